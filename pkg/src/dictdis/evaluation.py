"""Copy success rate, corpus BLEU and paired bootstrap resampling."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InputError

Tokens = Sequence[Hashable]
MAX_ORDER = 4
SMOOTH_EPS = 1e-16


@dataclass
class EvalRecord:
    hypothesis: List[Hashable]
    reference: List[Hashable]
    # each constraint is its tuple of target-side candidates
    constraints: List[Tuple[Tuple[Hashable, ...], ...]] = field(default_factory=list)

    def __post_init__(self):
        if not self.reference:
            raise InputError("reference must be nonempty")
        self.constraints = [tuple(tuple(c) for c in getattr(con, "candidates", con))
                            for con in self.constraints]


def contains(seq: Tokens, sub: Tokens) -> bool:
    """True when ``sub`` occurs as a contiguous run in ``seq``."""
    n, m = len(seq), len(sub)
    if m == 0 or m > n:
        return m == 0
    sub = list(sub)
    first = sub[0]
    for i in range(n - m + 1):
        if seq[i] == first and list(seq[i:i + m]) == sub:
            return True
    return False


def constraint_status(record: EvalRecord, candidates) -> Optional[bool]:
    """Satisfied (True/False) or None when the constraint is not evaluable.

    A degree-1 constraint needs its candidate in the hypothesis.  For higher
    degrees at least one candidate found in the reference must also be in
    the hypothesis; with no candidate in the reference it is skipped.
    """
    if len(candidates) == 1:
        return contains(record.hypothesis, candidates[0])
    in_ref = [c for c in candidates if contains(record.reference, c)]
    if not in_ref:
        return None
    return any(contains(record.hypothesis, c) for c in in_ref)


@dataclass
class CSRResult:
    csr: float
    satisfied: int
    evaluated: int
    skipped: int


def _tally(records: Sequence[EvalRecord]) -> Dict[int, List[int]]:
    """degree -> [satisfied, evaluated, skipped]"""
    out: Dict[int, List[int]] = {}
    for rec in records:
        for cands in rec.constraints:
            bucket = out.setdefault(len(cands), [0, 0, 0])
            status = constraint_status(rec, cands)
            if status is None:
                bucket[2] += 1
            else:
                bucket[1] += 1
                bucket[0] += int(status)
    return out


def _result(sat: int, ev: int, skip: int) -> CSRResult:
    return CSRResult(100.0 * sat / ev if ev else 0.0, sat, ev, skip)


def csr(records: Sequence[EvalRecord]) -> CSRResult:
    tally = _tally(records)
    sat = sum(v[0] for v in tally.values())
    ev = sum(v[1] for v in tally.values())
    skip = sum(v[2] for v in tally.values())
    return _result(sat, ev, skip)


def csr_by_degree(records: Sequence[EvalRecord]) -> Dict[int, CSRResult]:
    """CSR within each polysemy-degree bucket; buckets with nothing evaluated are omitted."""
    return {d: _result(*v) for d, v in sorted(_tally(records).items()) if v[1] > 0}


# ---------------------------------------------------------------------------
# BLEU


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hypothesis: Tokens, reference: Tokens, max_order: int = MAX_ORDER) -> np.ndarray:
    """[matches_1..N, totals_1..N, hyp_len, ref_len] for one sentence pair."""
    stats = np.zeros(2 * max_order + 2, dtype=np.int64)
    hypothesis, reference = list(hypothesis), list(reference)
    for n in range(1, max_order + 1):
        h, r = _ngrams(hypothesis, n), _ngrams(reference, n)
        stats[n - 1] = sum(min(c, r[g]) for g, c in h.items())
        stats[max_order + n - 1] = max(len(hypothesis) - n + 1, 0)
    stats[-2] = len(hypothesis)
    stats[-1] = len(reference)
    return stats


def bleu_from_stats(stats: np.ndarray, max_order: int = MAX_ORDER) -> float:
    """Corpus BLEU (0-100) from summed sufficient statistics.

    Zero n-gram matches get an epsilon numerator, but only when at least one
    unigram matches; otherwise the score is 0.
    """
    matches, totals = stats[:max_order], stats[max_order:2 * max_order]
    c, r = float(stats[-2]), float(stats[-1])
    if c == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches.tolist(), totals.tolist()):
        num = m if m > 0 else SMOOTH_EPS
        log_p += math.log(num / max(t, 1))
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_p / max_order)


def corpus_bleu(hypotheses: Sequence[Tokens], references: Sequence[Tokens]) -> float:
    if len(hypotheses) != len(references):
        raise InputError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    if not hypotheses:
        return 0.0
    total = sum(bleu_stats(h, r) for h, r in zip(hypotheses, references))
    return bleu_from_stats(total)


# ---------------------------------------------------------------------------
# significance


@dataclass
class BootstrapResult:
    p_value: float
    significant: bool
    score_a: float
    score_b: float
    wins_a: int
    wins_b: int
    resamples: int
    p_threshold: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def paired_bootstrap(hyps_a: Sequence[Tokens], hyps_b: Sequence[Tokens], references: Sequence[Tokens],
                     resamples: int = 1000, p_threshold: float = 0.05, seed: int = 0) -> BootstrapResult:
    """Paired bootstrap resampling over sentences with corpus BLEU as the statistic.

    Two-sided p-value: ``min(1, 2 * min(P(A >= B), P(B >= A)))`` over the
    resamples; ``wins_*`` count strict wins.
    """
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    if not (len(hyps_a) == len(hyps_b) == len(references)):
        raise InputError("systems and references must be aligned")
    n = len(references)
    if n == 0:
        raise InputError("no sentences to resample")
    stats_a = np.stack([bleu_stats(h, r) for h, r in zip(hyps_a, references)])
    stats_b = np.stack([bleu_stats(h, r) for h, r in zip(hyps_b, references)])
    rng = np.random.default_rng(seed)
    ge_a = ge_b = wins_a = wins_b = 0
    for _ in range(resamples):
        idx = rng.integers(0, n, size=n)
        a = bleu_from_stats(stats_a[idx].sum(0))
        b = bleu_from_stats(stats_b[idx].sum(0))
        ge_a += a >= b
        ge_b += b >= a
        wins_a += a > b
        wins_b += b > a
    p = min(1.0, 2.0 * min(ge_a, ge_b) / resamples)
    return BootstrapResult(p, p < p_threshold, bleu_from_stats(stats_a.sum(0)),
                           bleu_from_stats(stats_b.sum(0)), int(wins_a), int(wins_b),
                           resamples, p_threshold)


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    csr: float
    csr_by_degree: Dict[int, float]
    bleu: float
    counts: dict
    bootstrap: Optional[BootstrapResult] = None

    def to_dict(self) -> dict:
        out = {
            "csr": self.csr,
            "csr_by_degree": {str(k): v for k, v in sorted(self.csr_by_degree.items())},
            "bleu": self.bleu,
            "counts": self.counts,
        }
        if self.bootstrap is not None:
            out["bootstrap"] = self.bootstrap.to_dict()
        return out


def evaluate_records(records: Sequence[EvalRecord]) -> MetricsReport:
    overall = csr(records)
    by_degree = csr_by_degree(records)
    tally = _tally(records)
    counts = {
        "sentences": len(records),
        "evaluated": overall.evaluated,
        "satisfied": overall.satisfied,
        "skipped": overall.skipped,
        "by_degree": {str(d): {"evaluated": v[1], "satisfied": v[0], "skipped": v[2]}
                      for d, v in sorted(tally.items())},
    }
    bleu = corpus_bleu([r.hypothesis for r in records], [r.reference for r in records])
    return MetricsReport(overall.csr, {d: r.csr for d, r in by_degree.items()}, bleu, counts)
