"""Adam over the trainable registry and the epoch loop with frozen-weight redraws."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import PAD_ID, Batch, DialogueExample, Vocab, make_batches
from .errors import ConfigError, ContractError, DataError
from .init import InitSpec, SeededRng, reinit_all_frozen
from .model import ParaFormerModel, model_forward
from .tensor import Tensor, backward, cross_entropy_logits, no_grad

log = logging.getLogger(__name__)

INFERENCE_MODES = ("freeze_final", "reinit_per_context")


@dataclass
class AdamState:
    lr: float = 6e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 6e-4
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    reinit_each_epoch: bool = True
    inference_mode: str = "reinit_per_context"
    max_turns: int = 5
    min_count: int = 1
    eval_fraction: float = 0.1

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("train.lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.inference_mode not in INFERENCE_MODES:
            raise ConfigError(f"train.inference_mode must be one of {INFERENCE_MODES}")
        if not 0 <= self.eval_fraction < 1:
            raise ConfigError("train.eval_fraction must lie in [0, 1)")


def adam_step(state: AdamState, grads: dict[Tensor, np.ndarray], params: dict[str, Tensor]) -> AdamState:
    """One bias-corrected Adam update, in place. Only tensors present in ``grads`` move."""
    names = {id(t): name for name, t in params.items()}
    for tensor in grads:
        if id(tensor) not in names or not tensor.grad_enabled:
            raise ContractError(f"gradient supplied for a tensor outside the trainable registry: {tensor!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for tensor, g in grads.items():
        name = names[id(tensor)]
        m = state.m.setdefault(name, np.zeros_like(tensor.data))
        v = state.v.setdefault(name, np.zeros_like(tensor.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        tensor.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


def batch_loss(model: ParaFormerModel, batch: Batch) -> Tensor:
    logits = model_forward(model, batch.context_ids, batch.response_in)
    return cross_entropy_logits(logits, batch.response_target, PAD_ID)


def train_epoch(model: ParaFormerModel, batches: Sequence[Batch], state: AdamState, spec: InitSpec,
                rng: SeededRng, config: TrainConfig) -> float:
    """Redraw the frozen tensors (when enabled), then one teacher-forced pass. Returns mean per-token loss."""
    if not batches:
        raise DataError("cannot train on an empty corpus")
    if config.reinit_each_epoch:
        reinit_all_frozen(model, spec, rng)
    total, tokens = 0.0, 0
    for batch in batches:
        loss = batch_loss(model, batch)
        adam_step(state, backward(loss), model.trainable)
        total += loss.item() * batch.n_tokens
        tokens += batch.n_tokens
    return total / tokens


def evaluate_loss(model: ParaFormerModel, batches: Sequence[Batch]) -> float:
    if not batches:
        raise DataError("cannot evaluate on an empty batch list")
    total, tokens = 0.0, 0
    with no_grad():
        for batch in batches:
            total += batch_loss(model, batch).item() * batch.n_tokens
            tokens += batch.n_tokens
    return total / tokens


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    eval_loss: float
    reinit_count: int


LOG_FIELDS = ("epoch", "train_loss", "eval_loss", "reinit_count")


def epoch_rng(seed: int, epoch: int) -> SeededRng:
    return SeededRng(seed).child("epoch", epoch)


def fit(model: ParaFormerModel, train: Sequence[DialogueExample], vocab: Vocab, config: TrainConfig,
        state: AdamState | None = None, eval_set: Sequence[DialogueExample] | None = None,
        start_epoch: int = 0, log_path=None,
        on_epoch: Callable[[EpochRecord], None] | None = None) -> list[EpochRecord]:
    """Train for ``config.epochs`` epochs after ``start_epoch``; optionally write the CSV epoch log.

    Epoch ``e`` shuffles with ``SeededRng(seed).child("shuffle", e)`` and redraws
    frozen tensors with :func:`epoch_rng`, so a resumed run replays identically.
    """
    if not train:
        raise DataError("cannot train on an empty corpus")
    state = state if state is not None else AdamState(lr=config.lr)
    max_len = model.config.max_len
    eval_batches = make_batches(eval_set or train, vocab, config.batch_size, max_len)
    redraw_count = sum(1 for e in model.frozen.values() if e.role is not None)
    history = []
    writer = None
    fh = open(log_path, "w", newline="") if log_path is not None else None
    try:
        if fh is not None:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_FIELDS)
        for epoch in range(start_epoch + 1, start_epoch + config.epochs + 1):
            shuffle = SeededRng(config.seed).child("shuffle", epoch)
            batches = make_batches(train, vocab, config.batch_size, max_len, shuffle)
            train_loss = train_epoch(model, batches, state, model.init_spec, epoch_rng(config.seed, epoch), config)
            record = EpochRecord(epoch, train_loss, evaluate_loss(model, eval_batches),
                                 redraw_count if config.reinit_each_epoch else 0)
            history.append(record)
            log.info("epoch %d train %.4f eval %.4f", epoch, record.train_loss, record.eval_loss)
            if writer is not None:
                writer.writerow([record.epoch, repr(record.train_loss), repr(record.eval_loss), record.reinit_count])
                fh.flush()
            if on_epoch is not None:
                on_epoch(record)
    finally:
        if fh is not None:
            fh.close()
    return history
