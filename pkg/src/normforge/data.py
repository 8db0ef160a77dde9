"""Vocabularies, synthetic toy corpora, token-budget batching and training targets."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<s>", "</s>"
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3
RESERVED = (PAD, UNK, BOS, EOS)
TASKS = ("copy", "reverse", "vowel_swap_translation")


@dataclass
class Vocab:
    tokens: list[str]
    target_mask: np.ndarray
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.target_mask = np.asarray(self.target_mask, dtype=bool)
        self.target_mask[[UNK_ID, EOS_ID]] = True
        self.target_mask[[PAD_ID, BOS_ID]] = False

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.index.get(w, UNK_ID) for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path: str | Path) -> None:
        lines = [f"{t}\t{i}\t{int(self.target_mask[i])}" for i, t in enumerate(self.tokens)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> Vocab:
        tokens, mask = [], []
        for line in Path(path).read_text().splitlines():
            parts = line.split("\t")
            if int(parts[1]) != len(tokens):
                raise ValueError(f"vocabulary ids must be contiguous, got {line!r}")
            tokens.append(parts[0])
            mask.append(len(parts) < 3 or parts[2] == "1")
        return cls(tokens, np.array(mask))


@dataclass(frozen=True)
class ExamplePair:
    src: tuple[int, ...]
    tgt: tuple[int, ...]  # framed as BOS ... EOS

    @property
    def n_tokens(self) -> int:
        return len(self.src) + len(self.tgt)


@dataclass
class Batch:
    src: np.ndarray  # (B, S) padded
    tgt_in: np.ndarray  # (B, T) decoder input, starts with BOS
    tgt_out: np.ndarray  # (B, T) labels, ends with EOS
    indices: tuple[int, ...]  # corpus positions of the examples
    n_tokens: int

    @property
    def src_mask(self) -> np.ndarray:
        return self.src != PAD_ID

    @property
    def tgt_mask(self) -> np.ndarray:
        return self.tgt_out != PAD_ID


_CONS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
_ROTATE = str.maketrans(_VOWELS, _VOWELS[1:] + _VOWELS[0])


def _pseudo_words(n: int) -> list[str]:
    syll = [c + v for c in _CONS for v in _VOWELS]
    words = []
    for k in itertools.count(1):
        for combo in itertools.product(syll, repeat=k):
            words.append("".join(combo))
            if len(words) == n:
                return words
    return words


def make_toy_corpus(task: str, n_pairs: int, len_range: tuple[int, int], vocab_size: int,
                    seed: int) -> tuple[list[ExamplePair], Vocab]:
    """Deterministic synthetic parallel corpus.

    ``copy`` and ``reverse`` share one word list between source and target.
    ``vowel_swap_translation`` uses disjoint source and target vocabularies:
    each source pseudo-word maps to its vowel-rotated, upper-cased form and
    the sentence is reversed, so only target-side words enter the target mask.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    lo, hi = len_range
    if not 1 <= lo <= hi:
        raise ValueError(f"invalid length range {len_range}")
    if n_pairs < 0:
        raise ValueError("n_pairs must be >= 0")
    n_free = vocab_size - len(RESERVED)
    if task == "vowel_swap_translation":
        n_words = n_free // 2
    else:
        n_words = n_free
    if n_words < 1:
        raise ValueError(f"vocab_size={vocab_size} leaves no room for words")

    words = _pseudo_words(n_words)
    if task == "vowel_swap_translation":
        tgt_words = [w.translate(_ROTATE).upper() for w in words]
        tokens = list(RESERVED) + words + tgt_words
        mask = np.zeros(len(tokens), dtype=bool)
        mask[len(RESERVED) + n_words:] = True
        offset = n_words
    else:
        tokens = list(RESERVED) + words
        mask = np.ones(len(tokens), dtype=bool)
        offset = 0
    vocab = Vocab(tokens, mask)

    rng = np.random.default_rng(seed)
    base = len(RESERVED)
    pairs = []
    for _ in range(n_pairs):
        n = int(rng.integers(lo, hi + 1))
        src = [int(i) for i in rng.integers(base, base + n_words, size=n)]
        if task == "copy":
            tgt = src
        elif task == "reverse":
            tgt = src[::-1]
        else:
            tgt = [i + offset for i in src[::-1]]
        pairs.append(ExamplePair(tuple(src), (BOS_ID, *tgt, EOS_ID)))
    return pairs, vocab


def dump_corpus(pairs: Sequence[ExamplePair], vocab: Vocab, path: str | Path) -> None:
    lines = [" ".join(vocab.decode(p.src)) + " ||| " + " ".join(vocab.decode(p.tgt[1:-1]))
             for p in pairs]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_corpus(path: str | Path, vocab: Vocab) -> list[ExamplePair]:
    pairs = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if " ||| " not in line:
            raise ValueError(f"{path}:{n}: expected 'source ||| target'")
        s, t = line.split(" ||| ", 1)
        pairs.append(ExamplePair(tuple(vocab.encode(s.split())),
                                 (BOS_ID, *vocab.encode(t.split()), EOS_ID)))
    return pairs


def make_batch(pairs: Sequence[ExamplePair], indices: Sequence[int]) -> Batch:
    chosen = [pairs[i] for i in indices]
    S = max(len(p.src) for p in chosen)
    L = max(len(p.tgt) for p in chosen) - 1
    src = np.full((len(chosen), S), PAD_ID, dtype=np.int64)
    tin = np.full((len(chosen), L), PAD_ID, dtype=np.int64)
    tout = np.full((len(chosen), L), PAD_ID, dtype=np.int64)
    for r, p in enumerate(chosen):
        src[r, : len(p.src)] = p.src
        tin[r, : len(p.tgt) - 1] = p.tgt[:-1]
        tout[r, : len(p.tgt) - 1] = p.tgt[1:]
    return Batch(src, tin, tout, tuple(indices), sum(p.n_tokens for p in chosen))


def batch_by_tokens(pairs: Sequence[ExamplePair], budget: int,
                    rng: np.random.Generator | None = None) -> list[Batch]:
    """Length-bucket, then greedily pack examples while ``src + tgt`` tokens fit the budget.

    With ``rng`` the order within equal lengths and the batch order are
    shuffled; without it the packing is fully deterministic.
    """
    for i, p in enumerate(pairs):
        if p.n_tokens > budget:
            raise ValueError(f"example {i} has {p.n_tokens} tokens, over the budget of {budget}")
    keys = np.array([(len(p.src), len(p.tgt)) for p in pairs], dtype=np.int64).reshape(-1, 2)
    tie = rng.permutation(len(pairs)) if rng is not None else np.arange(len(pairs))
    order = np.lexsort((tie, keys[:, 1], keys[:, 0])) if len(pairs) else []
    groups: list[list[int]] = []
    cur: list[int] = []
    used = 0
    for i in order:
        n = pairs[i].n_tokens
        if cur and used + n > budget:
            groups.append(cur)
            cur, used = [], 0
        cur.append(int(i))
        used += n
    if cur:
        groups.append(cur)
    if rng is not None:
        groups = [groups[j] for j in rng.permutation(len(groups))]
    return [make_batch(pairs, g) for g in groups]


def word_dropout(tokens: np.ndarray, p: float, unk_id: int = UNK_ID,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Replace each non-reserved token by UNK with probability ``p``; returns a copy."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"word dropout rate must be in [0, 1], got {p}")
    tokens = np.array(tokens, dtype=np.int64)
    if p == 0.0:
        return tokens
    eligible = tokens >= len(RESERVED)
    hit = rng.random(tokens.shape) < p if p < 1.0 else np.ones(tokens.shape, dtype=bool)
    tokens[eligible & hit] = unk_id
    return tokens


def smooth_labels(target_id: int, eps: float, V: int,
                  excluded_ids: Iterable[int] = ()) -> np.ndarray:
    """``(1 - eps) * onehot + eps * uniform`` over the non-excluded ids."""
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {eps}")
    allowed = np.ones(V, dtype=bool)
    allowed[list(excluded_ids)] = False
    if not allowed[target_id]:
        raise ValueError(f"target id {target_id} is excluded")
    q = allowed * (eps / allowed.sum())
    q[target_id] += 1.0 - eps
    return q


def smoothed_targets(labels: np.ndarray, eps: float, allowed: np.ndarray,
                     pad_id: int = PAD_ID) -> np.ndarray:
    """Row-wise :func:`smooth_labels` for a label vector; PAD rows are all zero."""
    labels = np.asarray(labels, dtype=np.int64)
    allowed = np.asarray(allowed, dtype=bool).copy()
    allowed[pad_id] = False
    V = allowed.size
    q = np.zeros((labels.size, V))
    q[:, allowed] = eps / allowed.sum()
    q[np.arange(labels.size), labels] += 1.0 - eps
    q[labels == pad_id] = 0.0
    return q
