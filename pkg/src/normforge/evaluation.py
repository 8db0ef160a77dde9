"""Tokenized corpus BLEU, paired bootstrap significance and smoothed perplexity."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

Sentence = Sequence[str] | Sequence[int] | str


@dataclass(frozen=True)
class BleuReport:
    bleu: float
    precisions: tuple[float, ...]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def __str__(self) -> str:
        ps = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return (f"BLEU = {self.bleu:.2f}, {ps} (BP={self.brevity_penalty:.3f}, "
                f"ratio={self.hyp_len / max(self.ref_len, 1):.3f}, "
                f"hyp_len={self.hyp_len}, ref_len={self.ref_len})")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SignificanceReport:
    n_resamples: int
    wins_a: int
    wins_b: int
    ties: int
    p_value: float
    bleu_a: float
    bleu_b: float

    def __str__(self) -> str:
        return (f"A={self.bleu_a:.2f} B={self.bleu_b:.2f} resamples={self.n_resamples} "
                f"wins_a={self.wins_a} wins_b={self.wins_b} ties={self.ties} "
                f"p={self.p_value:.4f}")

    def to_dict(self) -> dict:
        return asdict(self)


def _tok(s: Sentence) -> list:
    return s.split() if isinstance(s, str) else list(s)


def sentence_stats(hyp: Sentence, ref: Sentence, max_n: int = 4) -> np.ndarray:
    """[hyp_len, ref_len, match_1, total_1, ..., match_n, total_n] for one pair."""
    h, r = _tok(hyp), _tok(ref)
    row = [len(h), len(r)]
    for n in range(1, max_n + 1):
        hc = Counter(tuple(h[i:i + n]) for i in range(len(h) - n + 1))
        rc = Counter(tuple(r[i:i + n]) for i in range(len(r) - n + 1))
        row += [sum(min(c, rc[g]) for g, c in hc.items()), max(len(h) - n + 1, 0)]
    return np.array(row, dtype=np.int64)


def _bleu_from_stats(s: np.ndarray, max_n: int) -> BleuReport:
    hyp_len, ref_len = int(s[0]), int(s[1])
    matches, totals = s[2::2], s[3::2]
    precisions = tuple(float(m) / t if t else 0.0 for m, t in zip(matches, totals))
    bp = math.exp(min(0.0, 1.0 - ref_len / max(hyp_len, 1)))
    if hyp_len == 0:
        return BleuReport(0.0, precisions, bp, hyp_len, ref_len)
    if min(precisions) == 0.0:
        return BleuReport(0.0, precisions, bp, hyp_len, ref_len)
    log_p = sum(math.log(p) for p in precisions) / max_n
    return BleuReport(100.0 * bp * math.exp(log_p), precisions, bp, hyp_len, ref_len)


def bleu(hypotheses: Sequence[Sentence], references: Sequence[Sentence],
         max_n: int = 4) -> BleuReport:
    """Corpus BLEU with clipped n-gram counts and no smoothing of zero counts."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("BLEU of an empty corpus is undefined")
    stats = sum(sentence_stats(h, r, max_n) for h, r in zip(hypotheses, references))
    return _bleu_from_stats(stats, max_n)


def _bleu_matrix(stats: np.ndarray, max_n: int) -> np.ndarray:
    """Vectorized BLEU for rows of summed statistics."""
    hyp, ref = stats[:, 0].astype(float), stats[:, 1].astype(float)
    m, t = stats[:, 2::2].astype(float), stats[:, 3::2].astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where((m > 0) & (t > 0), np.log(np.where(m > 0, m, 1) / np.where(t > 0, t, 1)), -np.inf)
        bp = np.where(hyp > 0, np.minimum(0.0, 1.0 - ref / np.where(hyp > 0, hyp, 1)), -np.inf)
    logb = bp + logp.sum(axis=1) / max_n
    return np.where(np.isfinite(logb), 100.0 * np.exp(logb), 0.0)


def bootstrap_significance(hyps_a: Sequence[Sentence], hyps_b: Sequence[Sentence],
                           refs: Sequence[Sentence], n_resamples: int = 1000,
                           seed: int = 0, max_n: int = 4,
                           ties: str = "half") -> SignificanceReport:
    """Paired bootstrap test of "A is better than B".

    Sentences are resampled with replacement. The p-value is the fraction of
    resamples where B beats A. Exact ties count half (``ties="half"``) or
    fully (``ties="b"``) toward B; with ``"b"`` two identical systems get
    p = 1, with ``"half"`` they get 0.5.
    """
    if ties not in ("half", "b"):
        raise ValueError(f"ties must be 'half' or 'b', got {ties!r}")
    if not len(hyps_a) == len(hyps_b) == len(refs):
        raise ValueError("bootstrap_significance: corpora must be aligned")
    if n_resamples < 100:
        raise ValueError("n_resamples must be >= 100")
    sa = np.stack([sentence_stats(h, r, max_n) for h, r in zip(hyps_a, refs)])
    sb = np.stack([sentence_stats(h, r, max_n) for h, r in zip(hyps_b, refs)])
    rng = np.random.default_rng(seed)
    N = len(refs)
    counts = np.zeros((n_resamples, N), dtype=np.int64)
    for i in range(n_resamples):
        counts[i] = np.bincount(rng.integers(0, N, size=N), minlength=N)
    ba, bb = _bleu_matrix(counts @ sa, max_n), _bleu_matrix(counts @ sb, max_n)
    wins_a = int((ba > bb).sum())
    wins_b = int((bb > ba).sum())
    n_ties = n_resamples - wins_a - wins_b
    p = (wins_b + (0.5 if ties == "half" else 1.0) * n_ties) / n_resamples
    return SignificanceReport(n_resamples, wins_a, wins_b, n_ties, p,
                              bleu(hyps_a, refs, max_n).bleu, bleu(hyps_b, refs, max_n).bleu)


def label_smoothed_perplexity(logits: np.ndarray, targets: np.ndarray,
                              token_count: int | None = None) -> float:
    """``exp(sum of cross-entropies against smoothed targets / token count)``.

    ``logits`` and ``targets`` are (N, V); rows of ``targets`` that are all
    zero (padding) contribute nothing. Entries with zero target mass are
    skipped, so ``-inf`` logits on masked ids are fine.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if token_count is None:
        token_count = int((targets.sum(axis=-1) > 0).sum())
    if token_count < 1:
        raise ValueError("token_count must be >= 1")
    m = logits.max(axis=-1, keepdims=True)
    logp = logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    live = targets > 0
    ce = -np.sum(np.where(live, targets * np.where(live, logp, 0.0), 0.0))
    return math.exp(ce / token_count)


def perplexity_from_loss(total_ce: float, token_count: int) -> float:
    if token_count < 1:
        raise ValueError("token_count must be >= 1")
    return math.exp(total_ce / token_count)
