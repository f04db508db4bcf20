"""Encoder-decoder transformer with partially randomised (PaRa) layers.

A PaRa attention block projects to Q/K/V with frozen random weights and
combines the heads through a trainable output projection. A PaRa feed-forward
block has a frozen first layer (weights and bias) and a trainable second
layer. A :class:`LayerPlan` chooses which encoder/decoder positions use the
PaRa blocks; decoder cross-attention is always fully trainable.

Weights are stored input-major (``x @ W``), so a weight of shape ``(a, b)``
has fan-in ``a``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .data import PAD_ID
from .errors import ConfigError, DimensionError, LengthError, ParameterError
from .init import InitSpec, LayerRole, SeededRng, kaiming_std, reinit_all_frozen
from .tensor import Tensor

MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n: int = 300
    d_qkv: int = 128
    d_ff: int = 2048
    heads: int = 4
    layers: int = 6
    max_len: int = 64
    ln_eps: float = 1e-5
    freeze_embedding: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "n", "d_qkv", "d_ff", "heads", "layers", "max_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name} must be positive, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class LayerPlan:
    """Which encoder / decoder positions are PaRa (True) or standard (False)."""

    encoder_mask: tuple[bool, ...]
    decoder_mask: tuple[bool, ...]
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "encoder_mask", tuple(bool(b) for b in self.encoder_mask))
        object.__setattr__(self, "decoder_mask", tuple(bool(b) for b in self.decoder_mask))

    @classmethod
    def alt(cls, layers: int) -> "LayerPlan":
        mask = tuple(i % 2 == 0 for i in range(layers))
        return cls(mask, mask, "alt")

    @classmethod
    def full(cls, layers: int) -> "LayerPlan":
        return cls((True,) * layers, (True,) * layers, "full")

    @classmethod
    def seq1(cls, layers: int) -> "LayerPlan":
        mask = tuple(i < layers // 2 for i in range(layers))
        return cls(mask, mask, "seq1")

    @classmethod
    def seq2(cls, layers: int) -> "LayerPlan":
        mask = tuple(i >= layers - layers // 2 for i in range(layers))
        return cls(mask, mask, "seq2")

    @classmethod
    def standard(cls, layers: int) -> "LayerPlan":
        return cls((False,) * layers, (False,) * layers, "standard")

    @classmethod
    def named(cls, name: str, layers: int) -> "LayerPlan":
        key = name.lower().replace("_", "")
        builders = {"alt": cls.alt, "full": cls.full, "seq1": cls.seq1, "seq2": cls.seq2, "standard": cls.standard}
        if key not in builders:
            raise ConfigError(f"unknown layer plan {name!r}; expected one of {sorted(builders)}")
        return builders[key](layers)

    @property
    def has_para(self) -> bool:
        return any(self.encoder_mask) or any(self.decoder_mask)

    def to_dict(self) -> dict:
        return {"name": self.name, "encoder_mask": list(self.encoder_mask), "decoder_mask": list(self.decoder_mask)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerPlan":
        return cls(tuple(d["encoder_mask"]), tuple(d["decoder_mask"]), d.get("name", "custom"))


@dataclass
class FrozenParam:
    name: str
    tensor: Tensor
    role: LayerRole | None  # None: frozen by config (e.g. pretrained embedding), never redrawn
    fan_in: int


class ParamFactory:
    """Creates named parameter tensors.

    Trainable weights get N(0, 1/fan_in); each tensor draws from a stream keyed
    by its name, so a given tensor is initialised identically whatever the plan.
    Frozen tensors start as zeros and are drawn by ``build_model``.
    """

    def __init__(self, rng: SeededRng):
        self.trainable_rng = rng.child("trainable")

    def weight(self, name: str, shape: tuple[int, int]) -> Tensor:
        std = kaiming_std(shape[0], 1.0)
        return Tensor(self.trainable_rng.child(name).normal(std, shape), grad_enabled=True, name=name)

    def constant(self, name: str, shape, value: float) -> Tensor:
        return Tensor(np.full(shape, value), grad_enabled=True, name=name)

    def frozen(self, name: str, shape) -> Tensor:
        # placeholder; drawn by reinit_all_frozen once the registry exists
        return Tensor(np.zeros(shape), grad_enabled=False, name=name)


class Module:
    """Minimal parameter container: ``params`` and the role of each frozen one."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.frozen_info: dict[str, tuple[LayerRole, int]] = {}

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.params.items()
        for child in self.children():
            yield from child.named_parameters()

    def frozen_roles(self) -> Iterator[tuple[str, LayerRole, int]]:
        for name, (role, fan_in) in self.frozen_info.items():
            yield name, role, fan_in
        for child in self.children():
            yield from child.frozen_roles()

    def children(self) -> list["Module"]:
        return []

    def _add(self, t: Tensor) -> Tensor:
        self.params[t.name] = t
        return t

    def _add_frozen(self, factory: ParamFactory, name, shape, role, fan_in) -> Tensor:
        self.frozen_info[name] = (role, fan_in)
        return self._add(factory.frozen(name, shape))


class Attention(Module):
    """Multi-head attention; ``para=True`` freezes the Q/K/V projections."""

    def __init__(self, prefix: str, n: int, d_qkv: int, heads: int, para: bool, factory: ParamFactory):
        super().__init__()
        self.para = para
        self.n, self.d_qkv, self.heads = n, d_qkv, heads
        self.wq, self.wk, self.wv = [], [], []
        for h in range(heads):
            for label, bucket in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv)):
                name = f"{prefix}.{label}.{h}"
                if para:
                    bucket.append(self._add_frozen(factory, name, (n, d_qkv), LayerRole.ATTENTION_QKV, n))
                else:
                    bucket.append(self._add(factory.weight(name, (n, d_qkv))))
        self.wz = self._add(factory.weight(f"{prefix}.wz", (heads * d_qkv, n)))


class FeedForward(Module):
    """Two-layer ReLU network; ``para=True`` freezes the first layer and its bias."""

    def __init__(self, prefix: str, n: int, d_ff: int, para: bool, factory: ParamFactory):
        super().__init__()
        self.para = para
        if para:
            self.w1 = self._add_frozen(factory, f"{prefix}.w1", (n, d_ff), LayerRole.FEED_FORWARD_FIRST, n)
            self.b1 = self._add_frozen(factory, f"{prefix}.b1", (d_ff,), LayerRole.FEED_FORWARD_FIRST, n)
        else:
            self.w1 = self._add(factory.weight(f"{prefix}.w1", (n, d_ff)))
            self.b1 = self._add(factory.constant(f"{prefix}.b1", (d_ff,), 0.0))
        self.w2 = self._add(factory.weight(f"{prefix}.w2", (d_ff, n)))
        self.b2 = self._add(factory.constant(f"{prefix}.b2", (n,), 0.0))


class LayerNorm(Module):
    def __init__(self, prefix: str, n: int, factory: ParamFactory, eps: float):
        super().__init__()
        self.eps = eps
        self.gain = self._add(factory.constant(f"{prefix}.gain", (n,), 1.0))
        self.bias = self._add(factory.constant(f"{prefix}.bias", (n,), 0.0))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class EncoderLayer(Module):
    def __init__(self, prefix: str, cfg: ModelConfig, para: bool, factory: ParamFactory):
        super().__init__()
        self.para = para
        self.self_attn = Attention(f"{prefix}.self_attn", cfg.n, cfg.d_qkv, cfg.heads, para, factory)
        self.norm1 = LayerNorm(f"{prefix}.norm1", cfg.n, factory, cfg.ln_eps)
        self.ffn = FeedForward(f"{prefix}.ffn", cfg.n, cfg.d_ff, para, factory)
        self.norm2 = LayerNorm(f"{prefix}.norm2", cfg.n, factory, cfg.ln_eps)

    def children(self):
        return [self.self_attn, self.norm1, self.ffn, self.norm2]


class DecoderLayer(Module):
    def __init__(self, prefix: str, cfg: ModelConfig, para: bool, factory: ParamFactory):
        super().__init__()
        self.para = para
        self.self_attn = Attention(f"{prefix}.self_attn", cfg.n, cfg.d_qkv, cfg.heads, para, factory)
        self.norm1 = LayerNorm(f"{prefix}.norm1", cfg.n, factory, cfg.ln_eps)
        # cross-attention stays trainable in PaRa decoders
        self.cross_attn = Attention(f"{prefix}.cross_attn", cfg.n, cfg.d_qkv, cfg.heads, False, factory)
        self.norm2 = LayerNorm(f"{prefix}.norm2", cfg.n, factory, cfg.ln_eps)
        self.ffn = FeedForward(f"{prefix}.ffn", cfg.n, cfg.d_ff, para, factory)
        self.norm3 = LayerNorm(f"{prefix}.norm3", cfg.n, factory, cfg.ln_eps)

    def children(self):
        return [self.self_attn, self.norm1, self.cross_attn, self.norm2, self.ffn, self.norm3]


def sinusoidal_positions(max_len: int, n: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(n)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / n)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class ParaFormerModel(Module):
    def __init__(self, config: ModelConfig, plan: LayerPlan, spec: InitSpec, seed: int):
        super().__init__()
        self.config, self.plan, self.init_spec, self.seed = config, plan, spec, seed
        factory = ParamFactory(SeededRng(seed))
        cfg = config
        self.embedding = self._add(Tensor(factory.trainable_rng.child("embedding").normal(1.0, (cfg.vocab_size, cfg.n)),
                                          grad_enabled=not cfg.freeze_embedding, name="embedding"))
        self.positions = sinusoidal_positions(cfg.max_len, cfg.n)
        self.encoders = [EncoderLayer(f"enc.{i}", cfg, p, factory) for i, p in enumerate(plan.encoder_mask)]
        self.decoders = [DecoderLayer(f"dec.{i}", cfg, p, factory) for i, p in enumerate(plan.decoder_mask)]
        self.w_out = self._add(factory.weight("out.w", (cfg.n, cfg.vocab_size)))
        self.b_out = self._add(factory.constant("out.b", (cfg.vocab_size,), 0.0))
        self._build_registries()

    def children(self):
        return [*self.encoders, *self.decoders]

    def _build_registries(self):
        roles = {name: (role, fan_in) for name, role, fan_in in self.frozen_roles()}
        self.trainable: dict[str, Tensor] = {}
        self.frozen: dict[str, FrozenParam] = {}
        for name, t in self.named_parameters():
            if name in self.trainable or name in self.frozen:
                raise ConfigError(f"duplicate parameter name {name}")
            if t.grad_enabled:
                self.trainable[name] = t
            else:
                role, fan_in = roles.get(name, (None, t.shape[0]))
                self.frozen[name] = FrozenParam(name, t, role, fan_in)

    def all_parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def set_embedding(self, table: np.ndarray):
        if table.shape != self.embedding.shape:
            raise DimensionError(f"embedding table shape {table.shape} != {self.embedding.shape}")
        self.embedding.data[...] = table


def build_model(config: ModelConfig, plan: LayerPlan, spec: InitSpec, rng: SeededRng | int) -> ParaFormerModel:
    """Assemble a model; frozen tensors are drawn from ``spec``, trainable ones by Kaiming (gain 1)."""
    if len(plan.encoder_mask) != config.layers or len(plan.decoder_mask) != config.layers:
        raise ConfigError(
            f"plan masks have lengths {len(plan.encoder_mask)}/{len(plan.decoder_mask)}, "
            f"expected {config.layers}")
    seed = rng.seed if isinstance(rng, SeededRng) else int(rng)
    model = ParaFormerModel(config, plan, spec, seed)
    reinit_all_frozen(model, spec, SeededRng(seed).child("frozen"))
    return model


# --- forward pass --------------------------------------------------------------

def attention_forward(block: Attention, queries_in: Tensor, kv_in: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention per head, heads concatenated then projected by ``wz``.

    Inputs are ``(..., L, n)``; ``mask`` is additive and broadcast to ``(..., L_q, L_k)``.
    """
    if queries_in.shape[-1] != block.n or kv_in.shape[-1] != block.n:
        raise DimensionError(f"attention expects width {block.n}, got {queries_in.shape} and {kv_in.shape}")
    scale = 1.0 / math.sqrt(block.d_qkv)
    outputs = []
    for wq, wk, wv in zip(block.wq, block.wk, block.wv):
        q = T.matmul(queries_in, wq)
        k = T.matmul(kv_in, wk)
        v = T.matmul(kv_in, wv)
        scores = T.scale(T.matmul(q, T.transpose(k)), scale)
        if mask is not None:
            scores = T.add(scores, mask)
        outputs.append(T.matmul(T.softmax_rows(scores), v))
    z = outputs[0] if len(outputs) == 1 else T.concat(outputs, axis=-1)
    return T.matmul(z, block.wz)


para_attention_forward = attention_forward


def feed_forward(block: FeedForward, x: Tensor) -> Tensor:
    """``relu(x @ w1 + b1) @ w2 + b2``."""
    if x.shape[-1] != block.w1.shape[0]:
        raise DimensionError(f"feed forward expects width {block.w1.shape[0]}, got {x.shape}")
    hidden = T.relu(T.add(T.matmul(x, block.w1), block.b1))
    return T.add(T.matmul(hidden, block.w2), block.b2)


para_ff_forward = feed_forward


def encoder_layer_forward(layer: EncoderLayer, x: Tensor, pad_mask: np.ndarray | None = None) -> Tensor:
    x = layer.norm1(T.add(x, attention_forward(layer.self_attn, x, x, pad_mask)))
    return layer.norm2(T.add(x, feed_forward(layer.ffn, x)))


def decoder_layer_forward(layer: DecoderLayer, y: Tensor, enc_out: Tensor,
                          causal_mask: np.ndarray | None = None, pad_mask: np.ndarray | None = None) -> Tensor:
    y = layer.norm1(T.add(y, attention_forward(layer.self_attn, y, y, causal_mask)))
    y = layer.norm2(T.add(y, attention_forward(layer.cross_attn, y, enc_out, pad_mask)))
    return layer.norm3(T.add(y, feed_forward(layer.ffn, y)))


def key_pad_mask(ids: np.ndarray) -> np.ndarray:
    """Additive mask ``(B, 1, L)`` blocking pad keys."""
    return np.where(ids == PAD_ID, MASK_VALUE, 0.0)[:, None, :]


def causal_mask(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), MASK_VALUE), k=1)


def _embed(model: ParaFormerModel, ids: np.ndarray) -> Tensor:
    length = ids.shape[-1]
    if length > model.config.max_len:
        raise LengthError(f"sequence length {length} exceeds max_len {model.config.max_len}")
    return T.add(T.embedding_lookup(model.embedding, ids), model.positions[:length])


def _as_batch(ids) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise DimensionError(f"expected a non-empty id sequence or batch, got shape {arr.shape}")
    return arr


def encode(model: ParaFormerModel, context_ids) -> tuple[Tensor, np.ndarray]:
    """Run the encoder stack; returns the encoder output and the context key mask."""
    ctx = _as_batch(context_ids)
    mask = key_pad_mask(ctx)
    x = _embed(model, ctx)
    for layer in model.encoders:
        x = encoder_layer_forward(layer, x, mask)
    return x, mask


def decode_logits(model: ParaFormerModel, enc_out: Tensor, ctx_mask: np.ndarray, response_ids) -> Tensor:
    resp = _as_batch(response_ids)
    self_mask = causal_mask(resp.shape[1])[None, :, :] + key_pad_mask(resp)
    y = _embed(model, resp)
    for layer in model.decoders:
        y = decoder_layer_forward(layer, y, enc_out, self_mask, ctx_mask)
    return T.add(T.matmul(y, model.w_out), model.b_out)


def model_forward(model: ParaFormerModel, context_ids, response_prefix_ids) -> Tensor:
    """Logits for every response position.

    1-D inputs give ``(L_y, vocab)``; 2-D padded batches give ``(B, L_y, vocab)``.
    """
    single = np.ndim(response_prefix_ids) == 1
    enc_out, ctx_mask = encode(model, context_ids)
    logits = decode_logits(model, enc_out, ctx_mask, response_prefix_ids)
    if single:
        return T.reshape(logits, logits.shape[1:])
    return logits


# --- parameter accounting ------------------------------------------------------

@dataclass(frozen=True)
class PaperParamCounts:
    attn: int
    norm: int
    ff: int
    rl_attn: int
    rl_ff: int


def count_paper_params(n: int, d_qkv: int, d_ff: int, d_r: int = 512) -> PaperParamCounts:
    """Closed-form per-component counts for a single attention head.

    ``norm`` is ``2 * n * n`` as the formula is written, which is not what a
    gain+bias layer norm actually holds (``2 * n`` per norm).
    """
    for label, v in (("n", n), ("d_qkv", d_qkv), ("d_ff", d_ff), ("d_r", d_r)):
        if v < 1:
            raise ParameterError(f"{label} must be positive, got {v}")
    return PaperParamCounts(
        attn=4 * (n * d_qkv),
        norm=2 * (n * n),
        ff=(n * d_ff + d_ff) + (d_ff * n + n),
        rl_attn=3 * (n * d_r) + 3 * ((d_r + n) * d_qkv) + (d_qkv * d_r) + ((d_r + d_qkv) * n),
        rl_ff=(n * d_ff + d_ff) + ((d_ff + n) * n + n),
    )


@dataclass
class ActualParamCounts:
    trainable: int
    frozen: int
    total: int
    per_layer: dict[str, dict[str, int]] = field(default_factory=dict)


def _layer_key(name: str) -> str:
    parts = name.split(".")
    return ".".join(parts[:2]) if parts[0] in ("enc", "dec") else parts[0]


def count_actual_params(module: Module) -> ActualParamCounts:
    """Exact element counts of a model or a single block, split by gradient participation."""
    counts = ActualParamCounts(0, 0, 0)
    for name, t in module.named_parameters():
        kind = "trainable" if t.grad_enabled else "frozen"
        bucket = counts.per_layer.setdefault(_layer_key(name), {"trainable": 0, "frozen": 0})
        bucket[kind] += t.size
        if t.grad_enabled:
            counts.trainable += t.size
        else:
            counts.frozen += t.size
    counts.total = counts.trainable + counts.frozen
    return counts


def standalone_blocks(n: int, d_qkv: int, d_ff: int, heads: int = 1, para: bool = True, seed: int = 0) -> tuple[Attention, FeedForward, list[LayerNorm]]:
    """One attention block, one feed-forward block and the two norms of an encoder, for accounting."""
    factory = ParamFactory(SeededRng(seed))
    attn = Attention("attn", n, d_qkv, heads, para, factory)
    ff = FeedForward("ffn", n, d_ff, para, factory)
    norms = [LayerNorm(f"norm{i}", n, factory, 1e-5) for i in (1, 2)]
    return attn, ff, norms
