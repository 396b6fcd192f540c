"""Seeded toy corpora for the copy and two-sense disambiguation tasks.

Both tasks translate token by token.  In the copy task dictionary words have
a single listed translation; in the disambiguation task every dictionary word
has two, and a context marker somewhere in the sentence selects which one the
reference uses.  Filler words translate through a lexicon the model only sees
via the parallel data.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np


@dataclass
class SyntheticTask:
    name: str
    train_src: List[str]
    train_tgt: List[str]
    test_src: List[str]
    test_tgt: List[str]
    dictionary: str

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for fname, lines in (("train.src", self.train_src), ("train.tgt", self.train_tgt),
                             ("test.src", self.test_src), ("test.tgt", self.test_tgt)):
            (out / fname).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        (out / "dict.tsv").write_text(self.dictionary, encoding="utf-8")


def _lengths(rng, n, lo=4, hi=9):
    return rng.integers(lo, hi + 1, size=n)


def copy_task(n_train: int = 2000, n_test: int = 200, n_entries: int = 40, n_fillers: int = 20,
              p_dict: float = 0.7, seed: int = 0) -> SyntheticTask:
    """Targets are the source mapped word by word; dictionary words have one candidate."""
    rng = np.random.default_rng(seed)
    dict_src = [f"s{i:02d}" for i in range(n_entries)]
    dict_tgt = [f"T{i:02d}" for i in range(n_entries)]
    fill_src = [f"f{i:02d}" for i in range(n_fillers)]
    fill_tgt = [f"F{i:02d}" for i in range(n_fillers)]
    mapping = dict(zip(dict_src + fill_src, dict_tgt + fill_tgt))

    def sentences(n):
        src, tgt = [], []
        for length in _lengths(rng, n):
            toks = [dict_src[rng.integers(n_entries)] if rng.random() < p_dict
                    else fill_src[rng.integers(n_fillers)] for _ in range(length)]
            src.append(" ".join(toks))
            tgt.append(" ".join(mapping[t] for t in toks))
        return src, tgt

    train_src, train_tgt = sentences(n_train)
    test_src, test_tgt = sentences(n_test)
    dictionary = "".join(f"{s}\t{t}\n" for s, t in zip(dict_src, dict_tgt))
    return SyntheticTask("copy", train_src, train_tgt, test_src, test_tgt, dictionary)


def disambiguation_task(n_train: int = 4000, n_test: int = 400, n_entries: int = 20,
                        n_fillers: int = 20, seed: int = 0) -> SyntheticTask:
    """Every dictionary word lists two senses; marker ``ctx1``/``ctx2`` picks one.

    Markers alternate over sentences before shuffling, so each split is
    exactly balanced between the senses.
    """
    rng = np.random.default_rng(seed)
    amb_src = [f"a{i:02d}" for i in range(n_entries)]
    senses = [(f"A{i:02d}_1", f"A{i:02d}_2") for i in range(n_entries)]
    fill_src = [f"f{i:02d}" for i in range(n_fillers)]
    fill_map = {s: f"F{i:02d}" for i, s in enumerate(fill_src)}
    markers = ("ctx1", "ctx2")
    marker_tgt = {"ctx1": "CTX1", "ctx2": "CTX2"}

    def sentences(n):
        src, tgt = [], []
        sense_of = np.arange(n) % 2
        rng.shuffle(sense_of)
        for sense, length in zip(sense_of.tolist(), _lengths(rng, n)):
            n_amb = int(rng.integers(1, 4))
            toks = [amb_src[rng.integers(n_entries)] for _ in range(n_amb)]
            toks += [fill_src[rng.integers(n_fillers)] for _ in range(max(length - n_amb - 1, 0))]
            toks = [toks[i] for i in rng.permutation(len(toks))]
            toks.insert(int(rng.integers(len(toks) + 1)), markers[sense])
            out = []
            for t in toks:
                if t in marker_tgt:
                    out.append(marker_tgt[t])
                elif t in fill_map:
                    out.append(fill_map[t])
                else:
                    out.append(senses[amb_src.index(t)][sense])
            src.append(" ".join(toks))
            tgt.append(" ".join(out))
        return src, tgt

    train_src, train_tgt = sentences(n_train)
    test_src, test_tgt = sentences(n_test)
    dictionary = "".join(f"{s}\t{a}|{b}\n" for s, (a, b) in zip(amb_src, senses))
    return SyntheticTask("disambiguation", train_src, train_tgt, test_src, test_tgt, dictionary)


TASKS = {"copy": copy_task, "disambiguation": disambiguation_task}
