"""Response generation: greedy, temperature / top-k / top-p sampling and beam search.

The search routines work on a *step function* mapping a token prefix
(starting with ``<bos>``) to next-token logits, so they can be exercised on
hand-built toy models as well as on a :class:`ParaFormerModel`.
Sampling applies temperature first, then top-k / top-p filtering.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import BOS_ID, EOS_ID
from .errors import DataError, ParameterError
from .init import SeededRng, reinit_all_frozen
from .model import ParaFormerModel, decode_logits, encode
from .tensor import no_grad

StepFn = Callable[[Sequence[int]], np.ndarray]
STRATEGIES = ("greedy", "temperature", "topk", "topp", "beam")


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "greedy"
    temperature: float = 1.0
    k: int = 40
    p: float = 0.9
    width: int = 5
    max_new_tokens: int = 20
    seed: int = 0
    reinit_per_context: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not self.temperature > 0:
            raise ParameterError("temperature must be positive")
        if not 0 < self.p <= 1:
            raise ParameterError("p must lie in (0, 1]")
        if self.k < 1 or self.width < 1:
            raise ParameterError("k and width must be >= 1")
        if self.max_new_tokens < 0:
            raise ParameterError("max_new_tokens must be >= 0")

    @property
    def label(self) -> str:
        if self.strategy == "greedy":
            return "greedy"
        if self.strategy == "temperature":
            return f"temperature(T={self.temperature:g})"
        if self.strategy == "topk":
            return f"topk(k={self.k},T={self.temperature:g})"
        if self.strategy == "topp":
            return f"topp(p={self.p:g},T={self.temperature:g})"
        return f"beam({self.width})"


def apply_temperature(logits, temperature: float) -> np.ndarray:
    """softmax(logits / T)."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    e = np.exp(z - z.max())
    return e / e.sum()


def _descending(probs: np.ndarray) -> np.ndarray:
    # stable sort keeps the lower token id first among equal probabilities
    return np.argsort(-probs, kind="stable")


def top_k_filter(probs, k: int) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if not 1 <= k <= probs.size:
        raise ParameterError(f"k must lie in [1, {probs.size}], got {k}")
    out = np.zeros_like(probs)
    keep = _descending(probs)[:k]
    out[keep] = probs[keep]
    return out / out.sum()


def top_p_filter(probs, p: float) -> np.ndarray:
    """Smallest high-probability prefix whose mass reaches ``p`` (the crossing token is kept)."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 < p <= 1:
        raise ParameterError(f"p must lie in (0, 1], got {p}")
    order = _descending(probs)
    cumulative = np.cumsum(probs[order])
    count = min(int(np.searchsorted(cumulative, p, side="left")) + 1, probs.size)
    out = np.zeros_like(probs)
    keep = order[:count]
    out[keep] = probs[keep]
    return out / out.sum()


def sample_index(probs: np.ndarray, rng: SeededRng) -> int:
    cumulative = np.cumsum(probs)
    idx = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))
    return min(idx, probs.size - 1)


def next_distribution(logits: np.ndarray, config: DecodeConfig) -> np.ndarray:
    probs = apply_temperature(logits, config.temperature)
    if config.strategy == "topk":
        probs = top_k_filter(probs, min(config.k, probs.size))
    elif config.strategy == "topp":
        probs = top_p_filter(probs, config.p)
    return probs


def greedy_steps(step: StepFn, max_new_tokens: int, bos: int = BOS_ID, eos: int = EOS_ID) -> list[int]:
    prefix = [bos]
    for _ in range(max_new_tokens):
        token = int(np.argmax(step(prefix)))
        if token == eos:
            break
        prefix.append(token)
    return prefix[1:]


def sample_steps(step: StepFn, config: DecodeConfig, rng: SeededRng,
                 bos: int = BOS_ID, eos: int = EOS_ID) -> list[int]:
    prefix = [bos]
    for _ in range(config.max_new_tokens):
        token = sample_index(next_distribution(step(prefix), config), rng)
        if token == eos:
            break
        prefix.append(token)
    return prefix[1:]


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]  # generated tokens, including a final eos when finished
    logprob: float
    finished: bool

    @property
    def score(self) -> float:
        return self.logprob / len(self.tokens) if self.tokens else 0.0


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    return z - math.log(np.exp(z).sum())


def _rank(h: Hypothesis):
    return (-h.score, h.tokens)


def beam_search_steps(step: StepFn, width: int, max_new_tokens: int,
                      bos: int = BOS_ID, eos: int = EOS_ID) -> Hypothesis:
    """Length-normalised beam search (score = mean log-probability per generated token).

    Each step keeps the ``width`` best extensions of all live beams; those ending
    in ``eos`` retire to the completed pool. Beams still live at the horizon join
    the pool too, and the best pooled hypothesis is returned.
    """
    if width < 1:
        raise ParameterError("beam width must be >= 1")
    live = [Hypothesis((), 0.0, False)]
    pool: list[Hypothesis] = []
    for _ in range(max_new_tokens):
        candidates = []
        for hyp in live:
            logp = _log_softmax(step([bos, *hyp.tokens]))
            for token, lp in enumerate(logp):
                candidates.append(Hypothesis(hyp.tokens + (token,), hyp.logprob + float(lp), token == eos))
        candidates.sort(key=_rank)
        live = []
        for cand in candidates[:width]:
            (pool if cand.finished else live).append(cand)
        if not live:
            break
    pool.extend(live)
    if not pool:
        return Hypothesis((), 0.0, False)
    return min(pool, key=_rank)


def strip_eos(tokens: Sequence[int], eos: int = EOS_ID) -> list[int]:
    tokens = list(tokens)
    return tokens[:-1] if tokens and tokens[-1] == eos else tokens


def model_stepper(model: ParaFormerModel, context_ids: Sequence[int]) -> StepFn:
    """Step function that encodes the context once and reruns the decoder on each prefix."""
    if len(context_ids) == 0:
        raise DataError("cannot generate from an empty context")
    with no_grad():
        enc_out, ctx_mask = encode(model, list(context_ids))

    def step(prefix: Sequence[int]) -> np.ndarray:
        with no_grad():
            logits = decode_logits(model, enc_out, ctx_mask, list(prefix))
        return logits.data[0, -1]

    return step


def _horizon(model: ParaFormerModel, max_new_tokens: int) -> int:
    return min(max_new_tokens, model.config.max_len - 1)


def beam_search(model: ParaFormerModel, context_ids: Sequence[int], width: int, max_new_tokens: int) -> list[int]:
    hyp = beam_search_steps(model_stepper(model, context_ids), width, _horizon(model, max_new_tokens))
    return strip_eos(hyp.tokens)


def generate(model: ParaFormerModel, context_ids: Sequence[int], config: DecodeConfig,
             rng: SeededRng | None = None) -> list[int]:
    """Generate one response (without ``<bos>``/``<eos>``).

    With ``config.reinit_per_context`` the frozen tensors are redrawn from
    ``rng`` before decoding starts, which mutates ``model``.
    """
    if len(context_ids) == 0:
        raise DataError("cannot generate from an empty context")
    rng = rng or SeededRng(config.seed)
    if config.reinit_per_context:
        reinit_all_frozen(model, model.init_spec, rng.child("reinit"))
    horizon = _horizon(model, config.max_new_tokens)
    if horizon == 0:
        return []
    step = model_stepper(model, context_ids)
    if config.strategy == "greedy":
        return greedy_steps(step, horizon)
    if config.strategy == "beam":
        return strip_eos(beam_search_steps(step, config.width, horizon).tokens)
    return sample_steps(step, DecodeConfig(**{**config.__dict__, "max_new_tokens": horizon}), rng.child("sample"))
