"""Greedy and beam inference over the mixed output distribution."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .data import BOS_ID, EOS_ID, PAD_ID, AugmentedInput, Batch, Region, pad_batch
from .errors import ConfigError
from .model import DecoderStepOutput, DictDisModel, EncoderOutput, candidate_embeddings, candidate_vocab_matrix


@dataclass
class DecodeConfig:
    beam_size: int = 5
    max_len: int = 100
    alpha: float = 0.0
    length_penalty: float = 0.0

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigError("beam_size must be >= 1")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")


@dataclass
class BeamHypothesis:
    tokens: List[int]
    logprob: float
    finished: bool = False
    score: float = 0.0

    def output(self) -> List[int]:
        """Tokens without the trailing <eos>."""
        return self.tokens[:-1] if self.finished else list(self.tokens)


def alpha_boost(p_final: torch.Tensor, alpha: float, alpha_attn: torch.Tensor,
                batch: Batch) -> torch.Tensor:
    """Raise the probability of tokens inside degree-1 constraints.

    ``boost(v) = alpha * (attention mass on degree-1 constraint positions
    holding v)`` and ``p'(v) ~ p(v) * exp(boost(v))``.

    p_final: (B, V); alpha_attn: (B, L) head-averaged cross-attention.
    """
    if alpha == 0:
        return p_final
    single = (batch.regions == int(Region.CONSTRAINT)) & (batch.pos_degree == 1)
    if not bool(single.any()):
        return p_final
    mass = alpha_attn * single.to(alpha_attn.dtype)
    boost = torch.zeros_like(p_final).scatter_add(1, batch.tokens, mass) * alpha
    boosted = p_final * torch.exp(boost)
    return boosted / boosted.sum(-1, keepdim=True)


class _Encoded:
    """Encoder output plus the per-input tensors reused at every step."""

    def __init__(self, model: DictDisModel, batch: Batch):
        self.enc = model.encode(batch)
        self.e = candidate_embeddings(self.enc.h, batch)
        self.Q = candidate_vocab_matrix(batch, model.vocab_size, self.enc.h.dtype)

    def select(self, index: torch.Tensor) -> "_Encoded":
        out = _Encoded.__new__(_Encoded)
        out.enc = EncoderOutput(self.enc.h.index_select(0, index), self.enc.batch.select(index))
        out.e = self.e.index_select(0, index)
        out.Q = self.Q.index_select(0, index)
        return out

    def step(self, model: DictDisModel, prefix: torch.Tensor) -> DecoderStepOutput:
        return model.decode_step(prefix, self.enc, Q=self.Q, e=self.e)


def next_token_distribution(model: DictDisModel, encoded: _Encoded, prefix: torch.Tensor,
                            alpha: float) -> Tuple[torch.Tensor, DecoderStepOutput]:
    out = encoded.step(model, prefix)
    return alpha_boost(out.p_final, alpha, out.alpha, encoded.enc.batch), out


def _max_len(model: DictDisModel, config: DecodeConfig) -> int:
    # the prefix (<bos> + emitted tokens) must fit the target position table
    return min(config.max_len, model.config.max_tgt_len)


@torch.no_grad()
def greedy_decode_batch(inputs: Sequence[AugmentedInput], model: DictDisModel,
                        config: Optional[DecodeConfig] = None, trace: bool = False):
    """Greedy decoding of several inputs at once.  Ties go to the lowest id.

    Returns token lists (without <eos>); with ``trace`` also the per-step gate
    values of each sentence.
    """
    config = config or DecodeConfig()
    model.eval()
    encoded = _Encoded(model, pad_batch(list(inputs)))
    B = len(inputs)
    prefix = torch.full((B, 1), BOS_ID, dtype=torch.long)
    done = torch.zeros(B, dtype=torch.bool)
    outputs: List[List[int]] = [[] for _ in range(B)]
    gates: List[List[float]] = [[] for _ in range(B)]
    for _ in range(_max_len(model, config)):
        p, out = next_token_distribution(model, encoded, prefix, config.alpha)
        nxt = p.argmax(-1)
        for b in range(B):
            if not done[b]:
                tok = int(nxt[b])
                outputs[b].append(tok)
                gates[b].append(float(out.g[b]))
        done |= nxt == EOS_ID
        nxt = torch.where(done & (nxt != EOS_ID), torch.full_like(nxt, PAD_ID), nxt)
        if bool(done.all()):
            break
        prefix = torch.cat([prefix, nxt.unsqueeze(1)], dim=1)
    results = [o[:-1] if o and o[-1] == EOS_ID else o for o in outputs]
    return (results, gates) if trace else results


def greedy_decode(aug: AugmentedInput, model: DictDisModel,
                  config: Optional[DecodeConfig] = None) -> List[int]:
    return greedy_decode_batch([aug], model, config)[0]


def _rank_key(h: BeamHypothesis):
    return (-h.score, h.tokens)


def _score(logprob: float, length: int, penalty: float) -> float:
    if penalty == 0:
        return logprob
    return logprob / (max(length, 1) ** penalty)


@torch.no_grad()
def beam_decode(aug: AugmentedInput, model: DictDisModel,
                config: Optional[DecodeConfig] = None) -> List[BeamHypothesis]:
    """Beam search over log p_final (after the alpha boost).

    Finished hypotheses stay in the beam and compete with live expansions.
    Ranking is by cumulative log-probability / length**length_penalty, ties
    broken by the token sequence.
    """
    config = config or DecodeConfig()
    model.eval()
    k = config.beam_size
    base = _Encoded(model, pad_batch([aug]))
    beam = [BeamHypothesis([], 0.0, False, 0.0)]
    for _ in range(_max_len(model, config)):
        live = [h for h in beam if not h.finished]
        if not live:
            break
        frozen = [h for h in beam if h.finished]
        index = torch.zeros(len(live), dtype=torch.long)
        prefix = torch.tensor([[BOS_ID] + h.tokens for h in live], dtype=torch.long)
        p, _ = next_token_distribution(model, base.select(index), prefix, config.alpha)
        logp = p.double().log().numpy()
        V = logp.shape[1]
        pool = list(frozen)
        for row, h in enumerate(live):
            # at most k expansions of one hypothesis can survive
            order = np.lexsort((np.arange(V), -logp[row]))[:k]
            for v in order.tolist():
                lp = h.logprob + float(logp[row, v])
                tokens = h.tokens + [v]
                pool.append(BeamHypothesis(tokens, lp, v == EOS_ID,
                                           _score(lp, len(tokens), config.length_penalty)))
        pool.sort(key=_rank_key)
        beam = pool[:k]
    beam.sort(key=_rank_key)
    return beam


def translate(inputs: Sequence[AugmentedInput], model: DictDisModel,
              config: Optional[DecodeConfig] = None, batch_size: int = 64):
    """Decode every input.  Beam size 1 takes the batched greedy path.

    Returns ``[(tokens, score, gate_trace)]`` in input order.
    """
    config = config or DecodeConfig()
    results = []
    if config.beam_size == 1:
        for i in range(0, len(inputs), batch_size):
            chunk = inputs[i:i + batch_size]
            outs, gates = greedy_decode_batch(chunk, model, config, trace=True)
            for aug, toks, g in zip(chunk, outs, gates):
                results.append((toks, score_sequence(aug, toks, model, config), g))
        return results
    for aug in inputs:
        best = beam_decode(aug, model, config)[0]
        results.append((best.output(), best.score, gate_trace(aug, best.tokens, model)))
    return results


@torch.no_grad()
def gate_trace(aug: AugmentedInput, tokens: Sequence[int], model: DictDisModel) -> List[float]:
    """Gate value at each emitted position of ``tokens``."""
    model.eval()
    batch = pad_batch([aug])
    enc = model.encode(batch)
    prefix = torch.tensor([[BOS_ID] + list(tokens)], dtype=torch.long)
    out = model.decode(prefix, enc)
    return [float(x) for x in out.g[0, : len(tokens)]]


@torch.no_grad()
def score_sequence(aug: AugmentedInput, tokens: Sequence[int], model: DictDisModel,
                   config: Optional[DecodeConfig] = None) -> float:
    """Cumulative log-probability of ``tokens + <eos>`` under the boosted distribution."""
    config = config or DecodeConfig()
    model.eval()
    encoded = _Encoded(model, pad_batch([aug]))
    seq = list(tokens) + [EOS_ID]
    seq = seq[: _max_len(model, config)]
    prefix = torch.tensor([[BOS_ID] + seq[:-1]], dtype=torch.long)
    out = model.decode(prefix, encoded.enc, Q=encoded.Q, e=encoded.e)
    total = 0.0
    for t, tok in enumerate(seq):
        p = alpha_boost(out.p_final[:, t], config.alpha, out.alpha[:, t], encoded.enc.batch)
        total += float(p[0, tok].double().log())
    return total
