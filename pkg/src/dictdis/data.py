"""Tokenization, vocabulary, dictionaries, constraint matching and the augmented input.

The augmented encoder input appends every matched constraint block to the
source sentence::

    x1 .. xS <sep> c1^1 <isep> c1^2 <sep> c2^1 ... <eos>

Source positions keep position ids ``0..S-1``; everything after the source
is numbered from ``p_offset`` upwards so constraint positions never collide
with source positions.
"""
from __future__ import annotations

import enum
import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import InputError

logger = logging.getLogger(__name__)

PAD, UNK, BOS, EOS, SEP, ISEP = "<pad>", "<unk>", "<bos>", "<eos>", "<sep>", "<isep>"
SPECIALS = (PAD, UNK, BOS, EOS, SEP, ISEP)
PAD_ID, UNK_ID, BOS_ID, EOS_ID, SEP_ID, ISEP_ID = range(6)

MAX_SRC_LEN = 128
P_OFFSET = MAX_SRC_LEN
MAX_SEGMENTS = 16
MAX_AUG_LEN = 512
MAX_CONSTRAINTS = 16


class Region(enum.IntEnum):
    SOURCE = 0
    SEP = 1
    CONSTRAINT = 2
    ISEP = 3
    EOS = 4
    PAD = 5


# ---------------------------------------------------------------------------
# tokenization


def _escape(token: str) -> str:
    if token in SPECIALS:
        return token.replace("<", "&lt;").replace(">", "&gt;")
    return token


def _unescape(token: str) -> str:
    if token.startswith("&lt;") and token.endswith("&gt;"):
        candidate = "<" + token[4:-4] + ">"
        if candidate in SPECIALS:
            return candidate
    return token


def tokenize(line: str) -> List[str]:
    """Whitespace tokenization; literal special symbols are escaped so they
    can never collide with the reserved ids."""
    return [_escape(tok) for tok in line.split()]


def detokenize(tokens: Iterable[str]) -> str:
    return " ".join(_unescape(tok) for tok in tokens)


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    """Bijective token <-> id map with the six reserved symbols at ids 0-5."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise InputError("vocabulary must start with the reserved symbols " + " ".join(SPECIALS))
        self.tokens: List[str] = tokens
        self.index = {tok: i for i, tok in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise InputError("vocabulary contains duplicate tokens")

    pad_id, unk_id, bos_id, eos_id, sep_id, isep_id = PAD_ID, UNK_ID, BOS_ID, EOS_ID, SEP_ID, ISEP_ID

    @property
    def special_ids(self) -> Tuple[int, ...]:
        return tuple(range(len(SPECIALS)))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, tokens: Iterable[str]) -> List[int]:
        return [self.index.get(tok, UNK_ID) for tok in tokens]

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def to_text(self) -> str:
        return "".join(tok + "\n" for tok in self.tokens)

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        return cls([line for line in text.split("\n") if line])


def build_vocabulary(corpus: Iterable[Sequence[str]], min_freq: int = 1) -> Vocabulary:
    """Count tokens over ``corpus`` and keep those seen at least ``min_freq`` times.

    Order is frequency descending, ties broken lexicographically, after the
    reserved symbols.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts: Counter = Counter()
    n_sentences = 0
    for sentence in corpus:
        n_sentences += 1
        counts.update(sentence)
    if n_sentences == 0:
        raise InputError("cannot build a vocabulary from an empty corpus")
    kept = sorted((tok for tok, c in counts.items() if c >= min_freq and tok not in SPECIALS),
                  key=lambda tok: (-counts[tok], tok))
    return Vocabulary(list(SPECIALS) + kept)


# ---------------------------------------------------------------------------
# dictionary


@dataclass(frozen=True)
class DictEntry:
    source: Tuple[Hashable, ...]
    candidates: Tuple[Tuple[Hashable, ...], ...]

    @property
    def degree(self) -> int:
        return len(self.candidates)


@dataclass
class Dictionary:
    """Ordered source phrase -> candidate translations.  Candidate order is
    file order and defines the candidate index."""

    entries: List[DictEntry] = field(default_factory=list)

    def __post_init__(self):
        self._lookup = {}
        for entry in self.entries:
            if not entry.source or not entry.candidates or any(not c for c in entry.candidates):
                raise InputError(f"empty phrase in dictionary entry {entry.source!r}")
            if entry.source in self._lookup:
                raise InputError(f"duplicate source phrase {' '.join(map(str, entry.source))!r}")
            self._lookup[entry.source] = entry
        self.max_phrase_len = max((len(e.source) for e in self.entries), default=0)

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, phrase: Tuple[Hashable, ...]) -> Optional[DictEntry]:
        return self._lookup.get(phrase)

    def encode(self, vocab: Vocabulary) -> "Dictionary":
        """Map both sides to vocabulary ids.  Entries whose source collides
        after ``<unk>`` mapping keep the first occurrence."""
        out, seen = [], set()
        for e in self.entries:
            src = tuple(vocab.encode(e.source))
            if src in seen:
                continue
            seen.add(src)
            out.append(DictEntry(src, tuple(tuple(vocab.encode(c)) for c in e.candidates)))
        return Dictionary(out)


def load_dictionary(text: str) -> Dictionary:
    """Parse the TSV dictionary format: ``source phrase<TAB>cand1|cand2|...``."""
    entries: List[DictEntry] = []
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip(" \r\n")
        if not line.strip() or line.startswith("#"):
            continue
        if "\t" not in line:
            raise InputError(f"line {lineno}: expected 'source<TAB>candidates'")
        src_text, cand_text = line.split("\t", 1)
        source = tuple(tokenize(src_text))
        if not source:
            raise InputError(f"line {lineno}: empty source phrase")
        if not cand_text.strip():
            raise InputError(f"line {lineno}: empty candidate field")
        candidates = []
        for cand in cand_text.split("|"):
            toks = tuple(tokenize(cand))
            if not toks:
                raise InputError(f"line {lineno}: empty candidate in {cand_text!r}")
            candidates.append(toks)
        if source in seen:
            raise InputError(f"line {lineno}: duplicate source phrase {src_text.strip()!r} "
                             f"(first seen on line {seen[source]})")
        seen[source] = lineno
        entries.append(DictEntry(source, tuple(candidates)))
    return Dictionary(entries)


def dump_dictionary(dictionary: Dictionary) -> str:
    lines = []
    for e in dictionary.entries:
        lines.append(detokenize(e.source) + "\t" + "|".join(detokenize(c) for c in e.candidates))
    return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# constraint matching


@dataclass(frozen=True)
class ConstraintMatch:
    span: Tuple[int, int]
    candidates: Tuple[Tuple[Hashable, ...], ...]

    @property
    def degree(self) -> int:
        return len(self.candidates)


def match_constraints(source: Sequence[Hashable], dictionary: Dictionary,
                      max_constraints: int = MAX_CONSTRAINTS) -> List[ConstraintMatch]:
    """Greedy left-to-right longest match of dictionary phrases in ``source``.

    Only the leftmost ``max_constraints`` matches are kept.
    """
    matches: List[ConstraintMatch] = []
    source = tuple(source)
    i, n = 0, len(source)
    longest = dictionary.max_phrase_len
    while i < n and len(matches) < max_constraints:
        for length in range(min(longest, n - i), 0, -1):
            entry = dictionary.get(source[i:i + length])
            if entry is not None:
                matches.append(ConstraintMatch((i, i + length), entry.candidates))
                i += length
                break
        else:
            i += 1
    return matches


# ---------------------------------------------------------------------------
# augmented input


@dataclass
class AugmentedInput:
    token_ids: List[int]
    position_ids: List[int]
    segment_ids: List[int]
    region: List[Region]
    cand_index: List[Optional[Tuple[int, int]]]
    # candidate count of constraint i is degrees[i - 1]
    degrees: Tuple[int, ...] = ()
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def source_length(self) -> int:
        return sum(1 for r in self.region if r == Region.SOURCE)

    @property
    def n_constraints(self) -> int:
        return len(self.degrees)


def augmented_length(source_len: int, matches: Sequence[ConstraintMatch]) -> int:
    extra = sum(1 + sum(len(c) for c in m.candidates) + (m.degree - 1) for m in matches)
    return source_len + extra + 1


def build_augmented_input(source: Sequence[int], matches: Sequence[ConstraintMatch],
                          vocab: Optional[Vocabulary] = None, p_offset: int = P_OFFSET,
                          max_segments: int = MAX_SEGMENTS,
                          max_aug_len: int = MAX_AUG_LEN) -> AugmentedInput:
    """Lay out ``source`` followed by the constraint blocks of ``matches``.

    ``matches`` must hold candidate *ids*.  Trailing constraints are dropped
    whole until the sequence fits ``max_aug_len``; the count is recorded in
    ``dropped``.
    """
    sep_id = vocab.sep_id if vocab is not None else SEP_ID
    isep_id = vocab.isep_id if vocab is not None else ISEP_ID
    eos_id = vocab.eos_id if vocab is not None else EOS_ID
    S = len(source)
    if S == 0:
        raise InputError("empty source sentence")
    if S > p_offset:
        raise InputError(f"source length {S} exceeds the position offset {p_offset}")
    if S + 1 > max_aug_len:
        raise InputError(f"source length {S} does not fit max_aug_len {max_aug_len}")

    matches = list(matches)
    dropped = 0
    while matches and augmented_length(S, matches) > max_aug_len:
        matches.pop()
        dropped += 1
    if dropped:
        logger.warning("dropped %d trailing constraint(s) to fit max_aug_len=%d", dropped, max_aug_len)

    tokens = list(source)
    positions = list(range(S))
    segments = [0] * S
    region = [Region.SOURCE] * S
    cand_index: List[Optional[Tuple[int, int]]] = [None] * S
    next_pos = p_offset

    def push(tok, reg, seg, ci=None):
        nonlocal next_pos
        tokens.append(tok)
        positions.append(next_pos)
        next_pos += 1
        segments.append(seg)
        region.append(reg)
        cand_index.append(ci)

    seg = 0
    for i, m in enumerate(matches, start=1):
        seg = min(i, max_segments - 1)
        push(sep_id, Region.SEP, seg)
        for j, cand in enumerate(m.candidates, start=1):
            if j > 1:
                push(isep_id, Region.ISEP, seg)
            for tok in cand:
                push(tok, Region.CONSTRAINT, seg, (i, j))
    push(eos_id, Region.EOS, seg)
    return AugmentedInput(tokens, positions, segments, region, cand_index,
                          tuple(m.degree for m in matches), dropped)


def parse_augmented(token_ids: Sequence[int], vocab: Optional[Vocabulary] = None):
    """Inverse of :func:`build_augmented_input` on the token level.

    Returns ``(source, constraints)`` where ``constraints`` is a list of
    candidate lists.
    """
    sep_id = vocab.sep_id if vocab is not None else SEP_ID
    isep_id = vocab.isep_id if vocab is not None else ISEP_ID
    eos_id = vocab.eos_id if vocab is not None else EOS_ID
    ids = list(token_ids)
    if not ids or ids[-1] != eos_id:
        raise InputError("augmented input must end with <eos>")
    ids = ids[:-1]
    if sep_id not in ids:
        return ids, []
    cut = ids.index(sep_id)
    source, rest = ids[:cut], ids[cut:]
    constraints: List[List[List[int]]] = []
    for tok in rest:
        if tok == sep_id:
            constraints.append([[]])
        elif tok == isep_id:
            constraints[-1].append([])
        else:
            constraints[-1][-1].append(tok)
    return source, constraints


# ---------------------------------------------------------------------------
# examples, prepared records and batches


@dataclass
class Example:
    source: List[int]
    target: List[int]
    constraints: List[ConstraintMatch] = field(default_factory=list)

    def __post_init__(self):
        if not self.source or not self.target:
            raise InputError("source and target must be nonempty")
        prev_end = 0
        for m in self.constraints:
            start, end = m.span
            if not (prev_end <= start < end <= len(self.source)):
                raise InputError(f"invalid constraint span {m.span}")
            prev_end = end

    def to_json(self) -> str:
        return json.dumps({
            "src_ids": self.source,
            "tgt_ids": self.target,
            "constraints": [{"span": list(m.span), "candidates": [list(c) for c in m.candidates]}
                            for m in self.constraints],
        }, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "Example":
        rec = json.loads(line)
        return cls(list(rec["src_ids"]), list(rec["tgt_ids"]),
                   [ConstraintMatch(tuple(c["span"]), tuple(tuple(x) for x in c["candidates"]))
                    for c in rec["constraints"]])

    def augmented(self, **kwargs) -> AugmentedInput:
        return build_augmented_input(self.source, self.constraints, **kwargs)

    def unconstrained(self) -> "Example":
        return Example(self.source, self.target, [])


def read_examples(path) -> List[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(Example.from_json(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise InputError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return out


@dataclass
class Batch:
    """Right-padded tensors for a list of augmented inputs (and optionally targets).

    ``cand_slot`` maps every CONSTRAINT position to a flat candidate index
    ``k``; ``cand_constraint[b, k]`` gives the 0-based constraint that
    candidate belongs to (``-1`` for padding).
    """

    tokens: torch.Tensor
    positions: torch.Tensor
    segments: torch.Tensor
    regions: torch.Tensor
    src_mask: torch.Tensor
    cand_slot: torch.Tensor
    cand_constraint: torch.Tensor
    cand_len: torch.Tensor
    n_constraints: torch.Tensor
    pos_degree: torch.Tensor
    tgt_in: Optional[torch.Tensor] = None
    tgt_out: Optional[torch.Tensor] = None
    tgt_mask: Optional[torch.Tensor] = None

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    def n_target_tokens(self) -> int:
        return int(self.tgt_mask.sum()) if self.tgt_mask is not None else 0

    def select(self, index: torch.Tensor) -> "Batch":
        """Rows ``index`` of every tensor (used to expand one input over a beam)."""
        kw = {}
        for name in self.__dataclass_fields__:
            t = getattr(self, name)
            kw[name] = t.index_select(0, index) if t is not None else None
        return Batch(**kw)


def pad_batch(inputs: Sequence[AugmentedInput], targets: Optional[Sequence[Sequence[int]]] = None,
              pad_id: int = PAD_ID) -> Batch:
    """Right-pad to the batch maximum.  Targets become ``<bos> y`` / ``y <eos>`` pairs."""
    if not inputs:
        raise ValueError("empty batch")
    B = len(inputs)
    L = max(len(a) for a in inputs)
    flat = []
    for a in inputs:
        # flat candidate order follows (i, j)
        keys = sorted({ci for ci in a.cand_index if ci is not None})
        flat.append({key: k for k, key in enumerate(keys)})
    K = max((len(f) for f in flat), default=0)

    tokens = torch.full((B, L), pad_id, dtype=torch.long)
    positions = torch.zeros((B, L), dtype=torch.long)
    segments = torch.zeros((B, L), dtype=torch.long)
    regions = torch.full((B, L), int(Region.PAD), dtype=torch.long)
    cand_slot = torch.full((B, L), -1, dtype=torch.long)
    cand_constraint = torch.full((B, K), -1, dtype=torch.long)
    cand_len = torch.zeros((B, K))
    pos_degree = torch.zeros((B, L), dtype=torch.long)
    n_constraints = torch.zeros(B, dtype=torch.long)
    for b, a in enumerate(inputs):
        n = len(a)
        tokens[b, :n] = torch.tensor(a.token_ids)
        positions[b, :n] = torch.tensor(a.position_ids)
        segments[b, :n] = torch.tensor(a.segment_ids)
        regions[b, :n] = torch.tensor([int(r) for r in a.region])
        n_constraints[b] = a.n_constraints
        for s, ci in enumerate(a.cand_index):
            if ci is None:
                continue
            k = flat[b][ci]
            cand_slot[b, s] = k
            cand_constraint[b, k] = ci[0] - 1
            cand_len[b, k] += 1
            pos_degree[b, s] = a.degrees[ci[0] - 1]
    src_mask = regions != int(Region.PAD)

    batch = Batch(tokens, positions, segments, regions, src_mask, cand_slot, cand_constraint,
                  cand_len, n_constraints, pos_degree)
    if targets is not None:
        if len(targets) != B:
            raise ValueError("inputs and targets differ in length")
        T = max(len(t) for t in targets) + 1
        tgt_in = torch.full((B, T), pad_id, dtype=torch.long)
        tgt_out = torch.full((B, T), pad_id, dtype=torch.long)
        tgt_mask = torch.zeros((B, T), dtype=torch.bool)
        for b, t in enumerate(targets):
            tgt_in[b, : len(t) + 1] = torch.tensor([BOS_ID] + list(t))
            tgt_out[b, : len(t) + 1] = torch.tensor(list(t) + [EOS_ID])
            tgt_mask[b, : len(t) + 1] = True
        batch.tgt_in, batch.tgt_out, batch.tgt_mask = tgt_in, tgt_out, tgt_mask
    return batch


def batch_examples(examples: Sequence[Example], **aug_kwargs) -> Batch:
    return pad_batch([ex.augmented(**aug_kwargs) for ex in examples], [ex.target for ex in examples])


# ---------------------------------------------------------------------------
# statistics


@dataclass
class Stats:
    histogram: dict
    coverage: float
    n_entries: int
    n_sentences: int
    n_matched: int

    def to_dict(self) -> dict:
        return {
            "polysemy_histogram": {str(k): v for k, v in sorted(self.histogram.items())},
            "coverage": self.coverage,
            "n_entries": self.n_entries,
            "n_sentences": self.n_sentences,
            "n_matched_sentences": self.n_matched,
        }


def dictionary_stats(dictionary: Dictionary, corpus: Iterable[Sequence[Hashable]] = (),
                     max_constraints: int = MAX_CONSTRAINTS) -> Stats:
    """Polysemy histogram (degree -> % of entries) and corpus coverage
    (% of sentences with at least one match)."""
    degrees = Counter(e.degree for e in dictionary.entries)
    total = len(dictionary)
    histogram = {d: 100.0 * c / total for d, c in sorted(degrees.items())} if total else {}
    n_sent = n_hit = 0
    for sentence in corpus:
        n_sent += 1
        if total and match_constraints(sentence, dictionary, max_constraints=1):
            n_hit += 1
    coverage = 100.0 * n_hit / n_sent if n_sent and total else 0.0
    return Stats(histogram, coverage, total, n_sent, n_hit)


def read_lines(path) -> Iterator[str]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            yield line.rstrip("\n")


def vocabulary_corpus(src_lines: Iterable[str], tgt_lines: Iterable[str],
                      dictionary: Optional[Dictionary] = None) -> Iterator[List[str]]:
    """Token stream for a shared vocabulary: both corpus sides plus dictionary phrases."""
    for line in src_lines:
        yield tokenize(line)
    for line in tgt_lines:
        yield tokenize(line)
    if dictionary is not None:
        for e in dictionary.entries:
            yield list(e.source)
            for c in e.candidates:
                yield list(c)


def encode_matches(matches: Sequence[ConstraintMatch], vocab: Vocabulary) -> List[ConstraintMatch]:
    return [ConstraintMatch(m.span, tuple(tuple(vocab.encode(c)) for c in m.candidates)) for m in matches]


def make_example(src_line: str, tgt_line: str, vocab: Vocabulary, dictionary: Optional[Dictionary] = None,
                 max_constraints: int = MAX_CONSTRAINTS) -> Example:
    """Tokenize, match dictionary phrases on the source surface and encode to ids."""
    src_toks = tokenize(src_line)
    matches = match_constraints(src_toks, dictionary, max_constraints) if dictionary is not None else []
    return Example(vocab.encode(src_toks), vocab.encode(tokenize(tgt_line)), encode_matches(matches, vocab))


def prepare_examples(src_lines: Sequence[str], tgt_lines: Sequence[str], vocab: Vocabulary,
                     dictionary: Optional[Dictionary] = None,
                     max_constraints: int = MAX_CONSTRAINTS) -> List[Example]:
    if len(src_lines) != len(tgt_lines):
        raise InputError(f"source has {len(src_lines)} lines but target has {len(tgt_lines)}")
    out = []
    for lineno, (s, t) in enumerate(zip(src_lines, tgt_lines), start=1):
        try:
            out.append(make_example(s, t, vocab, dictionary, max_constraints))
        except InputError as exc:
            raise InputError(f"line {lineno}: {exc}") from exc
    return out


def withhold_constraints(examples: Sequence[Example], fraction: float, seed: int = 0) -> List[Example]:
    """Strip the constraints of a seeded ``round(fraction * n)`` subset of examples."""
    if not 0.0 <= fraction <= 1.0:
        raise InputError("unconstrained fraction must lie in [0, 1]")
    n = len(examples)
    k = int(round(fraction * n))
    chosen = set(np.random.default_rng([seed, 7919]).choice(n, size=k, replace=False).tolist()) if k else set()
    return [ex.unconstrained() if i in chosen else ex for i, ex in enumerate(examples)]
