"""Dialogue corpus ingestion, vocabulary, batching and word-vector loading.

Corpus files are UTF-8 JSONL with one object per line::

    {"context": ["first turn", "second turn"], "response": "reply"}

Text is lower-cased and split on whitespace.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, FormatError, ParseError
from .init import SeededRng
from .tensor import Tensor

PAD, BOS, EOS, UNK, SEP = "<pad>", "<bos>", "<eos>", "<unk>", "<sep>"
RESERVED = (PAD, BOS, EOS, UNK, SEP)
PAD_ID, BOS_ID, EOS_ID, UNK_ID, SEP_ID = range(len(RESERVED))
MAX_TURNS = 5


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class DialogueExample:
    context: list[list[str]]
    response: list[str]

    def __post_init__(self):
        if not self.context:
            raise DataError("dialogue context must contain at least one utterance")


@dataclass
class Vocab:
    itos: list[str]
    min_count: int = 1
    stoi: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.itos[:len(RESERVED)]) != RESERVED:
            raise DataError(f"vocabulary must start with the reserved tokens {RESERVED}")
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("vocabulary contains duplicate tokens")

    def __len__(self):
        return len(self.itos)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]


def load_corpus(path) -> list[DialogueExample]:
    """Parse a JSONL corpus; contexts are kept whole (see :func:`window_context`)."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise OSError(f"cannot read corpus {path}: {exc.strerror or exc}") from exc
    examples = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(lineno, f"invalid JSON ({exc.msg})", path) from None
        if not isinstance(obj, dict):
            raise ParseError(lineno, "expected a JSON object", path)
        for key in ("context", "response"):
            if key not in obj:
                raise ParseError(lineno, f"missing {key!r}", path)
        context, response = obj["context"], obj["response"]
        if not isinstance(context, list) or not context or not all(isinstance(u, str) for u in context):
            raise ParseError(lineno, "'context' must be a non-empty array of strings", path)
        if not isinstance(response, str):
            raise ParseError(lineno, "'response' must be a string", path)
        examples.append(DialogueExample([tokenize(u) for u in context], tokenize(response)))
    if not examples:
        raise DataError(f"corpus {path} contains no examples")
    return examples


def window_context(example: DialogueExample, max_turns: int = MAX_TURNS) -> DialogueExample:
    if max_turns < 1:
        raise ValueError("max_turns must be >= 1")
    return DialogueExample(example.context[-max_turns:], example.response)


def build_vocab(examples: Sequence[DialogueExample], min_count: int = 1) -> Vocab:
    """Frequency-ordered vocabulary; ties broken lexicographically."""
    if not examples:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for ex in examples:
        for utt in ex.context:
            counts.update(utt)
        counts.update(ex.response)
    for tok in RESERVED:
        counts.pop(tok, None)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocab(list(RESERVED) + kept, min_count)


def encode_context(example: DialogueExample, vocab: Vocab, max_len: int) -> list[int]:
    """Turns joined by ``<sep>``; the most recent ``max_len`` tokens are kept."""
    ids: list[int] = []
    for i, utt in enumerate(example.context):
        if i:
            ids.append(SEP_ID)
        ids.extend(vocab.encode(utt))
    if not ids:
        ids = [UNK_ID]
    return ids[-max_len:]


@dataclass
class Batch:
    context_ids: np.ndarray
    response_in: np.ndarray
    response_target: np.ndarray
    context_pad: np.ndarray  # True where padded (attention blocked)
    response_pad: np.ndarray

    def __len__(self):
        return self.context_ids.shape[0]

    @property
    def n_tokens(self) -> int:
        return int((self.response_target != PAD_ID).sum())


def _pad(rows: list[list[int]]) -> np.ndarray:
    out = np.full((len(rows), max(len(r) for r in rows)), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def collate(examples: Sequence[DialogueExample], vocab: Vocab, max_len: int) -> Batch:
    contexts, inputs, targets = [], [], []
    for ex in examples:
        contexts.append(encode_context(ex, vocab, max_len))
        body = vocab.encode(ex.response)[:max_len - 1]
        inputs.append([BOS_ID] + body)
        targets.append(body + [EOS_ID])
    ctx, r_in, r_tgt = _pad(contexts), _pad(inputs), _pad(targets)
    return Batch(ctx, r_in, r_tgt, ctx == PAD_ID, r_in == PAD_ID)


def make_batches(examples: Sequence[DialogueExample], vocab: Vocab, batch_size: int, max_len: int,
                 rng: SeededRng | None = None) -> list[Batch]:
    """Encode, pad and group examples; ``rng`` shuffles the order (``None`` keeps it)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    return [collate([examples[i] for i in order[start:start + batch_size]], vocab, max_len)
            for start in range(0, len(examples), batch_size)]


def load_word_vectors(path, vocab: Vocab, n: int, rng: SeededRng | None = None,
                      trainable: bool = True) -> tuple[Tensor, float]:
    """Embedding table from a text file of ``token v1 ... vn`` lines.

    Rows for tokens absent from the file are drawn from N(0, 0.01^2).
    Coverage is measured over the non-reserved vocabulary entries.
    """
    rng = rng or SeededRng(0)
    table = rng.normal(0.01, (len(vocab), n))
    covered: set[int] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if not line.strip():
                continue
            if len(parts) != n + 1:
                raise FormatError(f"{path}:{lineno}: expected {n} values, found {len(parts) - 1}")
            idx = vocab.stoi.get(parts[0])
            if idx is None:
                continue
            try:
                table[idx] = [float(v) for v in parts[1:]]
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric vector entry") from None
            covered.add(idx)
    regular = len(vocab) - len(RESERVED)
    coverage = len([i for i in covered if i >= len(RESERVED)]) / regular if regular else 0.0
    return Tensor(table, grad_enabled=trainable, name="embedding"), coverage


def make_copy_corpus(n_examples: int, words: Sequence[str], seed: int = 0,
                     min_len: int = 3, max_len: int = 6, turns: int = 1) -> list[dict]:
    """Synthetic echo dialogues: the response repeats the last context turn."""
    rng = SeededRng(seed)
    rows = []
    for i in range(n_examples):
        r = rng.child(i)
        context = []
        for _ in range(turns):
            length = int(r.integers(min_len, max_len + 1))
            context.append(" ".join(words[j] for j in r.integers(0, len(words), size=length)))
        rows.append({"context": context, "response": context[-1]})
    return rows


def write_jsonl(rows: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
