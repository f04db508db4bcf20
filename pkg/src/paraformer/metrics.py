"""Corpus-level Distinct-n and a pluggable coherence scorer."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

from .errors import ConfigError, DataError, ParameterError

Tokens = Sequence[str]


def ngrams(tokens: Tokens, n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def distinct_n(responses: Sequence[Tokens], n: int) -> float:
    """Unique n-grams over total n-grams, pooled across all responses (0 when there are none)."""
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    unique: set[tuple[str, ...]] = set()
    total = 0
    for resp in responses:
        grams = ngrams(list(resp), n)
        total += len(grams)
        unique.update(grams)
    return len(unique) / total if total else 0.0


@dataclass
class DiversityReport:
    distinct_1: float
    distinct_2: float
    distinct_3: float
    total_ngrams: dict[int, int] = field(default_factory=dict)
    unique_ngrams: dict[int, int] = field(default_factory=dict)
    response_count: int = 0


def diversity_report(responses: Sequence[Tokens]) -> DiversityReport:
    if not responses:
        raise DataError("diversity report needs at least one response")
    totals, uniques, scores = {}, {}, {}
    for n in (1, 2, 3):
        grams = [g for resp in responses for g in ngrams(list(resp), n)]
        totals[n], uniques[n] = len(grams), len(set(grams))
        scores[n] = uniques[n] / totals[n] if totals[n] else 0.0
    return DiversityReport(scores[1], scores[2], scores[3], totals, uniques, len(responses))


# --- coherence ------------------------------------------------------------------

Scorer = Callable[[Sequence[Tokens], Tokens], float]

STOPWORDS = frozenset(
    "a an the and or but if of to in on at for with by from is are was were be been am i you he she it we "
    "they me him her us them my your his its our their this that these those do does did so not no yes "
    ", . ? ! ' \"".split()
)


def lexical_overlap(context: Sequence[Tokens], response: Tokens) -> float:
    """Share of distinct response content tokens that also occur in the context.

    A cheap lexical proxy standing in for an entailment-based coherence model;
    its numbers are not comparable to NLI scores.
    """
    resp = {t for t in response if t not in STOPWORDS}
    if not resp:
        return 0.0
    ctx = {t for utt in context for t in utt if t not in STOPWORDS}
    return len(resp & ctx) / len(resp)


_SCORERS: dict[str, Scorer] = {"lexical-overlap-proxy": lexical_overlap}
DEFAULT_SCORER = "lexical-overlap-proxy"


def register_scorer(name: str, scorer: Scorer) -> None:
    """Plug in a coherence model (e.g. an NLI-based entailment scorer)."""
    _SCORERS[name] = scorer


def get_scorer(name: str | None = None, allow_default: bool = True) -> tuple[str, Scorer]:
    if name is None:
        if not allow_default:
            raise ConfigError("no coherence scorer registered and the default proxy is disabled")
        name = DEFAULT_SCORER
    if name not in _SCORERS:
        raise ConfigError(f"unknown coherence scorer {name!r}; registered: {sorted(_SCORERS)}")
    return name, _SCORERS[name]


def coherence_score(scorer: Scorer | str | None, context: Sequence[Tokens], response: Tokens,
                    allow_default: bool = True) -> float:
    if not callable(scorer):
        _, scorer = get_scorer(scorer, allow_default)
    value = float(scorer(context, response))
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"coherence scorer returned {value}, outside [0, 1]")
    return value
