"""Random initialisation of the frozen (PaRa) layers.

Two schemes are supported: a plain zero-mean normal with a fixed standard
deviation per layer family, and a Kaiming-style normal whose standard
deviation is ``gain / sqrt(fan_in)``. Frozen tensors are redrawn in place
so the model keeps pointing at the same objects across epochs.
"""
from __future__ import annotations

import enum
import math
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConsistencyError, ParameterError
from .tensor import Tensor


class InitKind(str, enum.Enum):
    STANDARD_NORMAL = "standard_normal"
    SCALABLE_KAIMING = "scalable_kaiming"


class LayerRole(str, enum.Enum):
    ATTENTION_QKV = "attention_qkv"
    FEED_FORWARD_FIRST = "feed_forward_first"


@dataclass(frozen=True)
class InitSpec:
    kind: InitKind = InitKind.SCALABLE_KAIMING
    sigma_sa: float = 0.01
    sigma_ff: float = 0.05
    gain_sa: float = 2.5
    gain_ff: float = 1.5

    def __post_init__(self):
        object.__setattr__(self, "kind", InitKind(self.kind))
        for field in ("sigma_sa", "sigma_ff", "gain_sa", "gain_ff"):
            if not getattr(self, field) > 0:
                raise ParameterError(f"{field} must be positive, got {getattr(self, field)}")

    @classmethod
    def standard_normal(cls, sigma_sa: float = 0.01, sigma_ff: float = 0.05) -> "InitSpec":
        return cls(InitKind.STANDARD_NORMAL, sigma_sa=sigma_sa, sigma_ff=sigma_ff)

    @classmethod
    def scalable_kaiming(cls, gain_sa: float = 2.5, gain_ff: float = 1.5) -> "InitSpec":
        return cls(InitKind.SCALABLE_KAIMING, gain_sa=gain_sa, gain_ff=gain_ff)

    def target_std(self, role: LayerRole, fan_in: int) -> float:
        role = _coerce_role(role)
        if self.kind is InitKind.STANDARD_NORMAL:
            return self.sigma_sa if role is LayerRole.ATTENTION_QKV else self.sigma_ff
        gain = self.gain_sa if role is LayerRole.ATTENTION_QKV else self.gain_ff
        return kaiming_std(fan_in, gain, relu_on_input=False)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "sigma_sa": self.sigma_sa, "sigma_ff": self.sigma_ff,
                "gain_sa": self.gain_sa, "gain_ff": self.gain_ff}

    @classmethod
    def from_dict(cls, d: dict) -> "InitSpec":
        return cls(InitKind(d["kind"]), float(d["sigma_sa"]), float(d["sigma_ff"]),
                   float(d["gain_sa"]), float(d["gain_ff"]))


class SeededRng:
    """Splittable deterministic random stream.

    ``child(*key)`` derives an independent stream from the root seed and a key
    path, so draws do not depend on the order in which streams are consumed.
    """

    def __init__(self, seed: int, key: Sequence[int] = ()):
        if seed < 0 or seed >= 2 ** 64:
            raise ParameterError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.key)))

    def child(self, *key) -> "SeededRng":
        return SeededRng(self.seed, self.key + tuple(stream_key(k) for k in key))

    def normal(self, std: float, shape) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def random(self) -> float:
        return float(self._gen.random())

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, key={self.key})"


def stream_key(k) -> int:
    """Stable integer key for ints or strings (crc32 for strings)."""
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k)


def _coerce_role(role) -> LayerRole:
    try:
        return LayerRole(role)
    except ValueError:
        raise ParameterError(f"unknown layer role {role!r}") from None


def std_normal_init(shape, sigma: float, rng: SeededRng) -> Tensor:
    """I.i.d. N(0, sigma^2) draws as a frozen tensor."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    return Tensor(rng.normal(sigma, tuple(shape)), grad_enabled=False)


def kaiming_std(fan_in: int, gain: float = 1.0, relu_on_input: bool = False) -> float:
    """Standard deviation keeping ``fan_in * Var(W)`` at ``gain**2`` (x2 when ReLU feeds the layer)."""
    if fan_in < 1:
        raise ParameterError(f"fan_in must be >= 1, got {fan_in}")
    if not gain > 0:
        raise ParameterError(f"gain must be positive, got {gain}")
    if relu_on_input:
        return gain * math.sqrt(2.0) / math.sqrt(fan_in)
    return gain / math.sqrt(fan_in)


def init_frozen_layer(layer_role, shape, spec: InitSpec, rng: SeededRng, fan_in: int | None = None) -> Tensor:
    """Draw a frozen tensor for ``layer_role``.

    Weights are stored input-major, so ``fan_in`` defaults to ``shape[0]``;
    1-D tensors (the frozen feed-forward bias) must pass ``fan_in`` explicitly.
    """
    role = _coerce_role(layer_role)
    shape = tuple(shape)
    if fan_in is None:
        if len(shape) < 2:
            raise ParameterError("fan_in must be given for 1-D frozen tensors")
        fan_in = shape[0]
    return std_normal_init(shape, spec.target_std(role, fan_in), rng)


def reinit_all_frozen(model, spec: InitSpec, rng: SeededRng) -> int:
    """Redraw every randomly initialised frozen tensor of ``model`` in place.

    Each tensor uses the stream ``rng.child(name)``, so the result is
    independent of registry order. Trainable tensors are not touched.
    Returns the number of tensors redrawn.
    """
    entries = [e for e in model.frozen.values() if e.role is not None]
    if not entries and model.plan.has_para:
        raise ConsistencyError("layer plan requires PaRa layers but the frozen registry is empty")
    for entry in entries:
        fresh = init_frozen_layer(entry.role, entry.tensor.shape, spec, rng.child(entry.name), fan_in=entry.fan_in)
        entry.tensor.data[...] = fresh.data
    return len(entries)
