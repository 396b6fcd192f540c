"""Transformer encoder-decoder with copy, disambiguation and gate heads.

Per decoding step the model produces

* ``p_pred``  softmax over the vocabulary from the final decoder state,
* ``p_copy``  last-layer cross-attention (head averaged) restricted to
  constraint tokens and scattered onto their vocabulary ids,
* ``p_dis``   per-constraint softmax over ``c_t . e_i^j`` projected onto the
  vocabulary through the candidate tokens,
* ``g``       a scalar gate from ``[c_t; s_t]``,

and mixes them as ``g * p_pred + (1 - g) * mean(p_copy, p_dis)``.
Inputs without constraints bypass the mixture entirely.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import MAX_AUG_LEN, MAX_SEGMENTS, P_OFFSET, AugmentedInput, Batch, Region, Vocabulary
from .errors import ConfigError, InputError, NonFiniteError

COPY_MASS_EPS = 1e-12


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ffn: int = 256
    max_aug_len: int = MAX_AUG_LEN
    max_segments: int = MAX_SEGMENTS
    p_offset: int = P_OFFSET
    max_tgt_len: int = 128
    dropout: float = 0.1
    gate_hidden: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.gate_hidden is None:
            self.gate_hidden = 2 * self.d_model
        dims = (self.vocab_size, self.d_model, self.n_heads, self.n_layers, self.d_ffn,
                self.max_aug_len, self.max_segments, self.p_offset, self.max_tgt_len, self.gate_hidden)
        if min(dims) < 1:
            raise ConfigError("all model dimensions must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.max_tgt_len > self.p_offset + self.max_aug_len:
            raise ConfigError("max_tgt_len exceeds the position table")

    @property
    def n_positions(self) -> int:
        return self.p_offset + self.max_aug_len

    def to_dict(self) -> dict:
        return asdict(self)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def forward(self, query, key, mask):
        """``mask`` is boolean, broadcastable to (B, Tq, Tk), True where attending
        is allowed.  Returns the output and per-head weights (B, H, Tq, Tk)."""
        B, Tq, _ = query.shape
        Tk = key.shape[1]
        q = self.q(query).view(B, Tq, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k(key).view(B, Tk, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v(key).view(B, Tk, self.n_heads, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        scores = scores.masked_fill(~mask.unsqueeze(1), float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(B, Tq, -1)
        return self.o(out), weights


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ffn: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ffn)
        self.fc2 = nn.Linear(d_ffn, d_model)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_att = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mask):
        att, _ = self.self_att(x, x, mask)
        x = self.norm1(x + self.drop(att))
        return self.norm2(x + self.drop(self.ffn(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_att = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.cross_att = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, y, h, self_mask, cross_mask):
        att, _ = self.self_att(y, y, self_mask)
        y = self.norm1(y + self.drop(att))
        cross, weights = self.cross_att(y, h, cross_mask)
        y = self.norm2(y + self.drop(cross))
        y = self.norm3(y + self.drop(self.ffn(y)))
        return y, weights


class Gate(nn.Module):
    """sigmoid(w2 . relu(W1 [c; s] + b1) + b2), one scalar per step."""

    def __init__(self, d_model: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(2 * d_model, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, c, s):
        return torch.sigmoid(self.fc2(F.relu(self.fc1(torch.cat([c, s], dim=-1))))).squeeze(-1)


@dataclass
class EncoderOutput:
    h: torch.Tensor
    batch: Batch

    @property
    def mask(self) -> torch.Tensor:
        return self.batch.src_mask


@dataclass
class DecoderStepOutput:
    """Per-step quantities; tensors carry leading (B, T) or (B,) dimensions.

    ``has_copy`` / ``has_dis`` flag where the copy and disambiguation
    distributions exist; where they do not, the stored tensors are zero.
    """

    s: torch.Tensor
    alpha: torch.Tensor
    c: torch.Tensor
    p_pred: torch.Tensor
    p_copy: torch.Tensor
    has_copy: torch.Tensor
    p_dis: torch.Tensor
    has_dis: torch.Tensor
    dis_per_candidate: torch.Tensor
    g: torch.Tensor
    p_final: torch.Tensor

    def at(self, t) -> "DecoderStepOutput":
        """Slice one decoding position along dim 1 (``has_dis`` is per example)."""
        kw = {}
        for name in self.__dataclass_fields__:
            v = getattr(self, name)
            kw[name] = v if name == "has_dis" else v[:, t]
        return DecoderStepOutput(**kw)


# ---------------------------------------------------------------------------
# distribution heads (pure functions over tensors)


def pred_distribution(s: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    """softmax(s W); torch.softmax subtracts the row max internally."""
    return torch.softmax(s @ W, dim=-1)


def copy_distribution(alpha: torch.Tensor, tokens: torch.Tensor, regions: torch.Tensor,
                      vocab_size: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Scatter cross-attention on CONSTRAINT positions onto vocabulary ids.

    alpha: (B, T, L); tokens, regions: (B, L).  Returns ``(p_copy, present)``
    with p_copy (B, T, V) renormalized and present (B, T) boolean.
    """
    is_c = (regions == int(Region.CONSTRAINT)).to(alpha.dtype)
    retained = alpha * is_c.unsqueeze(1)
    mass = retained.sum(-1)
    present = mass >= COPY_MASS_EPS
    B, T, L = alpha.shape
    scattered = alpha.new_zeros(B, T, vocab_size).scatter_add(
        2, tokens.unsqueeze(1).expand(B, T, L), retained)
    safe = torch.where(present, mass, torch.ones_like(mass))
    p = scattered / safe.unsqueeze(-1)
    return torch.where(present.unsqueeze(-1), p, torch.zeros_like(p)), present


def candidate_embeddings(h: torch.Tensor, batch: Batch) -> torch.Tensor:
    """Mean of encoder states over each candidate's positions: (B, K, d)."""
    K = batch.cand_constraint.shape[1]
    if K == 0:
        return h.new_zeros(h.shape[0], 0, h.shape[-1])
    slot = batch.cand_slot
    member = (slot.unsqueeze(1) == torch.arange(K).view(1, K, 1)).to(h.dtype)
    lens = batch.cand_len.to(h.dtype).clamp(min=1.0).unsqueeze(-1)
    return (member / lens) @ h


def candidate_embedding(enc: EncoderOutput, i: int, j: int, row: int = 0) -> torch.Tensor:
    """e_i^j for example ``row`` (constraint and candidate indices start at 1)."""
    batch = enc.batch
    sel = batch.cand_slot[row]
    # flat candidate k with (constraint i-1, j-th in order)
    ks = [k for k in range(batch.cand_constraint.shape[1]) if int(batch.cand_constraint[row, k]) == i - 1]
    if j < 1 or j > len(ks):
        raise InputError(f"constraint {i} has no candidate {j}")
    positions = (sel == ks[j - 1]).nonzero().flatten()
    if positions.numel() == 0:
        raise InputError(f"candidate ({i}, {j}) has no positions")
    return enc.h[row, positions].mean(0)


def candidate_vocab_matrix(batch: Batch, vocab_size: int, dtype=torch.float32) -> torch.Tensor:
    """Q[b, k, v] = count(v in candidate k) / |candidate k|, shape (B, K, V)."""
    B, L = batch.tokens.shape
    K = batch.cand_constraint.shape[1]
    if K == 0:
        return torch.zeros(B, 0, vocab_size, dtype=dtype)
    valid = batch.cand_slot >= 0
    idx = torch.where(valid, batch.cand_slot * vocab_size + batch.tokens, torch.zeros_like(batch.tokens))
    lens = batch.cand_len.to(dtype).clamp(min=1.0)
    vals = torch.where(valid, 1.0 / lens.gather(1, batch.cand_slot.clamp(min=0)),
                       torch.zeros((B, L), dtype=dtype))
    return torch.zeros(B, K * vocab_size, dtype=dtype).scatter_add(1, idx, vals).view(B, K, vocab_size)


def dis_distribution(c: torch.Tensor, e: torch.Tensor, batch: Batch, vocab_size: int,
                     Q: Optional[torch.Tensor] = None):
    """Disambiguation head.

    c: (B, T, d) context vectors; e: (B, K, d) candidate embeddings.
    Returns ``(P_cand (B, T, K), p_dis (B, T, V), present (B,))`` where P_cand
    is a softmax over candidates within each constraint.
    """
    B, T, _ = c.shape
    K = e.shape[1]
    present = batch.n_constraints > 0
    if K == 0:
        return c.new_zeros(B, T, 0), c.new_zeros(B, T, vocab_size), present
    scores = c @ e.transpose(1, 2)
    group = batch.cand_constraint
    valid = group >= 0
    N = int(batch.n_constraints.max())
    onehot = (group.unsqueeze(-1) == torch.arange(N).view(1, 1, N)).to(c.dtype)  # (B, K, N)
    # per-group max, detached: the shift cancels in the softmax
    big_neg = torch.finfo(c.dtype).min / 4
    expanded = torch.where(onehot.unsqueeze(1) > 0, scores.detach().unsqueeze(-1),
                           torch.full((), big_neg, dtype=c.dtype))
    gmax = expanded.amax(dim=2)  # (B, T, N)
    gmax_c = gmax.gather(2, group.clamp(min=0).unsqueeze(1).expand(B, T, K))
    ex = torch.exp(torch.where(valid.unsqueeze(1), scores - gmax_c, torch.zeros_like(scores)))
    ex = ex * valid.unsqueeze(1).to(c.dtype)
    denom = (ex @ onehot).gather(2, group.clamp(min=0).unsqueeze(1).expand(B, T, K))
    P = ex / torch.where(valid.unsqueeze(1), denom, torch.ones_like(denom))
    if Q is None:
        Q = candidate_vocab_matrix(batch, vocab_size, c.dtype)
    n = batch.n_constraints.clamp(min=1).to(c.dtype).view(B, 1, 1)
    p_dis = (P @ Q) / n
    return P, p_dis, present


def gate_value(c: torch.Tensor, s: torch.Tensor, gate: Gate) -> torch.Tensor:
    return gate(c, s)


def mix_distributions(p_pred, p_copy, has_copy, p_dis, has_dis, g):
    """g * p_pred + (1 - g) * mean of the present heads; p_pred alone when none is present.

    ``has_copy`` is (B, T) and ``has_dis`` (B,) or (B, T).
    """
    if has_dis.dim() < has_copy.dim():
        has_dis = has_dis.unsqueeze(-1).expand_as(has_copy)
    hc = has_copy.to(p_pred.dtype).unsqueeze(-1)
    hd = has_dis.to(p_pred.dtype).unsqueeze(-1)
    count = (hc + hd).clamp(min=1.0)
    head = (hc * p_copy + hd * p_dis) / count
    g = g.unsqueeze(-1)
    mixed = g * p_pred + (1 - g) * head
    any_head = (has_copy | has_dis).unsqueeze(-1)
    return torch.where(any_head, mixed, p_pred)


# ---------------------------------------------------------------------------
# model


class DictDisModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.tok_emb = nn.Embedding(config.vocab_size, d)
        self.pos_emb = nn.Embedding(config.n_positions, d)
        self.seg_emb = nn.Embedding(config.max_segments, d)
        self.encoder = nn.ModuleList(EncoderLayer(config) for _ in range(config.n_layers))
        self.decoder = nn.ModuleList(DecoderLayer(config) for _ in range(config.n_layers))
        self.W = nn.Parameter(torch.empty(d, config.vocab_size))
        self.gate = Gate(d, config.gate_hidden)
        self.drop = nn.Dropout(config.dropout)
        self.reset_parameters(config.seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        d = self.config.d_model
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("_emb.weight"):
                    p.normal_(0.0, d ** -0.5, generator=gen)
                elif "norm" in name:
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif p.dim() >= 2:
                    nn.init.xavier_uniform_(p, generator=gen)
                else:
                    p.zero_()

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    # -- encoder ----------------------------------------------------------

    def embed(self, batch: Batch) -> torch.Tensor:
        """Row t is E_tok[token] + E_pos[position] + E_seg[segment]."""
        cfg = self.config
        for name, ids, bound in (("token", batch.tokens, cfg.vocab_size),
                                 ("position", batch.positions, cfg.n_positions),
                                 ("segment", batch.segments, cfg.max_segments)):
            if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= bound):
                raise InputError(f"{name} id out of range [0, {bound}); config/vocabulary mismatch?")
        return self.tok_emb(batch.tokens) + self.pos_emb(batch.positions) + self.seg_emb(batch.segments)

    def encode(self, batch: Batch) -> EncoderOutput:
        x = self.drop(self.embed(batch))
        mask = batch.src_mask.unsqueeze(1)
        for i, layer in enumerate(self.encoder):
            x = layer(x, mask)
            if not torch.isfinite(x).all():
                raise NonFiniteError(f"non-finite encoder state at layer {i}")
        return EncoderOutput(x, batch)

    # -- decoder ----------------------------------------------------------

    def decode(self, tgt_in: torch.Tensor, enc: EncoderOutput,
               Q: Optional[torch.Tensor] = None, e: Optional[torch.Tensor] = None) -> DecoderStepOutput:
        """Run the decoder over full prefixes ``tgt_in`` (B, T) in parallel."""
        B, T = tgt_in.shape
        if T > self.config.max_tgt_len:
            raise InputError(f"target prefix length {T} exceeds max_tgt_len {self.config.max_tgt_len}")
        batch = enc.batch
        positions = torch.arange(T).unsqueeze(0).expand(B, T)
        y = self.drop(self.tok_emb(tgt_in) + self.pos_emb(positions))
        causal = torch.ones(T, T, dtype=torch.bool).tril().unsqueeze(0)
        cross_mask = batch.src_mask.unsqueeze(1)
        weights = None
        for layer in self.decoder:
            y, weights = layer(y, enc.h, causal, cross_mask)
        s = y
        alpha = weights.mean(dim=1)  # (B, T, L)
        c = alpha @ enc.h
        V = self.vocab_size
        p_pred = pred_distribution(s, self.W)
        p_copy, has_copy = copy_distribution(alpha, batch.tokens, batch.regions, V)
        if e is None:
            e = candidate_embeddings(enc.h, batch)
        P_cand, p_dis, has_dis = dis_distribution(c, e, batch, V, Q)
        g = gate_value(c, s, self.gate)
        p_final = mix_distributions(p_pred, p_copy, has_copy, p_dis, has_dis, g)
        if not torch.isfinite(p_final).all():
            bad = (~torch.isfinite(p_final)).any(-1).any(0).nonzero().flatten()
            raise NonFiniteError(f"non-finite output distribution at step {int(bad[0])}")
        return DecoderStepOutput(s, alpha, c, p_pred, p_copy, has_copy, p_dis, has_dis, P_cand, g, p_final)

    def decode_step(self, prefix: torch.Tensor, enc: EncoderOutput, **kw) -> DecoderStepOutput:
        """Distribution for the next token after ``prefix`` (B, t)."""
        return self.decode(prefix, enc, **kw).at(-1)

    def forward(self, batch: Batch) -> DecoderStepOutput:
        """Teacher-forced pass: T+1 distributions per example (targets plus <eos>)."""
        enc = self.encode(batch)
        return self.decode(batch.tgt_in, enc)


def forward_teacher_forced(example, model: DictDisModel, **aug_kwargs):
    """List of the T+1 per-step ``p_final`` vectors for one example."""
    from .data import pad_batch

    batch = pad_batch([example.augmented(**aug_kwargs)], [example.target])
    out = model(batch)
    return [out.p_final[0, t] for t in range(len(example.target) + 1)]


def batch_from_input(aug: AugmentedInput) -> Batch:
    from .data import pad_batch

    return pad_batch([aug])


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"DDCKPT01"


def save_checkpoint(path, model: DictDisModel, vocab: Vocabulary,
                    extra_tensors: Optional[Dict[str, torch.Tensor]] = None,
                    meta: Optional[dict] = None) -> None:
    """Write ``MAGIC | u64 manifest length | manifest JSON | float32 LE payloads``.

    The manifest lists every tensor (name, shape, dtype) in payload order and
    carries the model config, vocabulary and its fingerprint.
    """
    tensors = {name: p.detach() for name, p in model.state_dict().items()}
    for name, t in (extra_tensors or {}).items():
        tensors[name] = t.detach()
    entries, payloads = [], []
    for name, t in tensors.items():
        arr = t.to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32"})
        payloads.append(arr.tobytes())
    manifest = {
        "format": "dictdis-checkpoint",
        "version": 1,
        "config": model.config.to_dict(),
        "vocab": vocab.tokens,
        "vocab_fingerprint": vocab.fingerprint(),
        "tensors": entries,
        "meta": meta or {},
    }
    blob = json.dumps(manifest, ensure_ascii=False, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for payload in payloads:
            fh.write(payload)


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab: Vocabulary
    tensors: Dict[str, torch.Tensor]
    meta: dict = field(default_factory=dict)

    def build_model(self) -> DictDisModel:
        model = DictDisModel(self.config)
        state = {k: v for k, v in self.tensors.items() if k in model.state_dict()}
        model.load_state_dict(state)
        return model.eval()


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise InputError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    manifest = json.loads(data[16:16 + n].decode("utf-8"))
    vocab = Vocabulary(manifest["vocab"])
    if vocab.fingerprint() != manifest["vocab_fingerprint"]:
        raise InputError(f"{path}: vocabulary fingerprint mismatch")
    offset = 16 + n
    tensors = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        offset += 4 * count
    return Checkpoint(ModelConfig(**manifest["config"]), vocab, tensors, manifest.get("meta", {}))
