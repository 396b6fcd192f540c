"""Label-smoothed maximum-likelihood training with Adam and inverse-sqrt warmup."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
import torch

from .data import PAD_ID, AugmentedInput, Batch, Example, Vocabulary, pad_batch
from .errors import ConfigError, InputError, NonFiniteError
from .model import DictDisModel, ModelConfig, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class TrainConfig:
    lr_peak: float = 5e-4
    warmup_steps: int = 400
    label_smoothing: float = 0.1
    batch_tokens: int = 2048
    max_updates: int = 5000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    clip_norm: float = 1.0
    seed: int = 0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.lr_peak < 0:
            raise ConfigError("lr_peak must be non-negative")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if self.batch_tokens < 1 or self.max_updates < 0 or self.checkpoint_every < 1:
            raise ConfigError("batch_tokens, checkpoint_every must be >= 1 and max_updates >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def label_smoothed_nll(dists: torch.Tensor, targets: torch.Tensor, epsilon: float,
                       pad_id: int = PAD_ID) -> torch.Tensor:
    """Mean over non-pad steps of -sum_v q(v) log p(v).

    q puts ``1 - epsilon`` on the gold token and ``epsilon / (V - 1)`` on
    every other token.  ``dists`` (..., V) holds probabilities, clamped at
    1e-12 before the log.
    """
    V = dists.shape[-1]
    logp = dists.clamp(min=PROB_FLOOR).log()
    gold = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if epsilon > 0:
        rest = logp.sum(-1) - gold
        per_step = -((1 - epsilon) * gold + epsilon / (V - 1) * rest)
    else:
        per_step = -gold
    mask = targets != pad_id
    n = mask.sum()
    if int(n) == 0:
        return per_step.sum() * 0.0
    return (per_step * mask.to(per_step.dtype)).sum() / n


def lr_schedule(step: int, config: TrainConfig) -> float:
    """lr_peak * min(step / warmup, sqrt(warmup / step))."""
    if step < 1:
        raise ValueError("step counts from 1")
    w = config.warmup_steps
    return config.lr_peak * min(step / w, math.sqrt(w / step))


# ---------------------------------------------------------------------------
# batching


def _n_tokens(aug: AugmentedInput, target: Sequence[int]) -> int:
    return len(aug) + len(target) + 1


def epoch_groups(sizes: Sequence[int], batch_tokens: int, seed: int, epoch: int) -> List[List[int]]:
    """Shuffle example indices and pack them greedily under the token cap."""
    order = np.random.default_rng([seed, epoch]).permutation(len(sizes))
    groups, cur, cur_tokens = [], [], 0
    for idx in order.tolist():
        if cur and cur_tokens + sizes[idx] > batch_tokens:
            groups.append(cur)
            cur, cur_tokens = [], 0
        cur.append(idx)
        cur_tokens += sizes[idx]
    if cur:
        groups.append(cur)
    return groups


class BatchStream:
    """Endless deterministic stream of training batches; batch ``n`` depends
    only on (seed, n), so training can resume mid-epoch."""

    def __init__(self, examples: Sequence[Example], config: TrainConfig, **aug_kwargs):
        if not examples:
            raise InputError("no training examples")
        self.inputs = [ex.augmented(**aug_kwargs) for ex in examples]
        self.targets = [ex.target for ex in examples]
        self.sizes = [_n_tokens(a, t) for a, t in zip(self.inputs, self.targets)]
        self.config = config

    def iterate(self, start: int = 0) -> Iterator[Batch]:
        epoch, seen = 0, 0
        while True:
            groups = epoch_groups(self.sizes, self.config.batch_tokens, self.config.seed, epoch)
            for g in groups:
                if seen >= start:
                    yield pad_batch([self.inputs[i] for i in g], [self.targets[i] for i in g])
                seen += 1
            epoch += 1


# ---------------------------------------------------------------------------
# state and update


@dataclass
class TrainState:
    model: DictDisModel
    optimizer: torch.optim.Optimizer
    step: int = 0
    smoothed_loss: Optional[float] = None
    history: List[float] = field(default_factory=list)


def make_optimizer(model: DictDisModel, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=config.lr_peak,
                            betas=(config.adam_beta1, config.adam_beta2), eps=config.adam_eps,
                            foreach=False)


def init_state(model: DictDisModel, config: TrainConfig) -> TrainState:
    return TrainState(model, make_optimizer(model, config))


def batch_fingerprint(batch: Batch) -> str:
    h = hashlib.sha1(batch.tokens.numpy().tobytes())
    if batch.tgt_out is not None:
        h.update(batch.tgt_out.numpy().tobytes())
    return h.hexdigest()[:12]


def train_step(batch: Batch, state: TrainState, config: TrainConfig) -> float:
    """One teacher-forced update.  Dropout is seeded from (seed, step)."""
    model = state.model
    model.train()
    step = state.step + 1
    torch.manual_seed(config.seed * 1_000_003 + step)
    out = model(batch)
    loss = label_smoothed_nll(out.p_final, batch.tgt_out, config.label_smoothing)
    if not torch.isfinite(loss):
        raise NonFiniteError(f"non-finite loss at step {step} (batch {batch_fingerprint(batch)})")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if config.clip_norm > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm)
    lr = lr_schedule(step, config)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    state.step = step
    value = float(loss.detach())
    state.history.append(value)
    state.smoothed_loss = value if state.smoothed_loss is None else 0.9 * state.smoothed_loss + 0.1 * value
    return value


@torch.no_grad()
def evaluate_loss(model: DictDisModel, examples: Sequence[Example], epsilon: float = 0.0,
                  batch_size: int = 64, **aug_kwargs) -> float:
    """Token-averaged label-smoothed NLL in eval mode."""
    model.eval()
    total, count = 0.0, 0
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        batch = pad_batch([ex.augmented(**aug_kwargs) for ex in chunk], [ex.target for ex in chunk])
        n = batch.n_target_tokens()
        out = model(batch)
        total += float(label_smoothed_nll(out.p_final, batch.tgt_out, epsilon)) * n
        count += n
    return total / max(count, 1)


# ---------------------------------------------------------------------------
# checkpointed training loop


def _optimizer_tensors(state: TrainState) -> Dict[str, torch.Tensor]:
    out = {}
    names = dict((id(p), n) for n, p in state.model.named_parameters())
    for p, st in state.optimizer.state.items():
        name = names[id(p)]
        out[f"adam.exp_avg.{name}"] = st["exp_avg"]
        out[f"adam.exp_avg_sq.{name}"] = st["exp_avg_sq"]
    return out


def save_state(path, state: TrainState, vocab: Vocabulary, config: TrainConfig) -> None:
    meta = {"step": state.step, "smoothed_loss": state.smoothed_loss, "train_config": config.to_dict()}
    save_checkpoint(path, state.model, vocab, _optimizer_tensors(state), meta)


def restore_state(path, config: TrainConfig, vocab: Optional[Vocabulary] = None,
                  model_config: Optional[ModelConfig] = None) -> TrainState:
    ckpt = load_checkpoint(path)
    if vocab is not None and ckpt.vocab.fingerprint() != vocab.fingerprint():
        raise ConfigError(f"{path}: checkpoint vocabulary does not match the prepared data")
    if model_config is not None and model_config.to_dict() != ckpt.config.to_dict():
        raise ConfigError(f"{path}: checkpoint model config differs from the requested config")
    model = ckpt.build_model()
    state = init_state(model, config)
    step = int(ckpt.meta.get("step", 0))
    if step:
        for name, p in model.named_parameters():
            key = f"adam.exp_avg.{name}"
            if key in ckpt.tensors:
                state.optimizer.state[p] = {
                    "step": torch.tensor(float(step)),
                    "exp_avg": ckpt.tensors[key].clone(),
                    "exp_avg_sq": ckpt.tensors[f"adam.exp_avg_sq.{name}"].clone(),
                }
    state.step = step
    state.smoothed_loss = ckpt.meta.get("smoothed_loss")
    return state


def checkpoint_name(step: int) -> str:
    return f"ckpt_{step:06d}.ddk"


def latest_checkpoint(directory) -> Optional[Path]:
    found = sorted(Path(directory).glob("ckpt_*.ddk"))
    return found[-1] if found else None


def train(examples: Sequence[Example], vocab: Vocabulary, model_config: ModelConfig,
          config: TrainConfig, out_dir=None, resume=None, callback=None,
          **aug_kwargs) -> TrainState:
    """Train to ``config.max_updates``.

    With ``out_dir`` a checkpoint is written every ``checkpoint_every`` steps
    plus at the final step, and ``train_log.jsonl`` receives one JSON line per
    update.  ``resume`` names a checkpoint to continue from.
    """
    if resume is not None:
        state = restore_state(resume, config, vocab, model_config)
    else:
        state = init_state(DictDisModel(model_config), config)
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
        kept = []
        if resume is not None and log_path.exists():
            kept = [line for line in log_path.read_text(encoding="utf-8").splitlines()
                    if line and json.loads(line)["step"] <= state.step]
        log_fh = open(log_path, "w", encoding="utf-8")
        for line in kept:
            log_fh.write(line + "\n")
    layout = {"p_offset": model_config.p_offset, "max_segments": model_config.max_segments,
              "max_aug_len": model_config.max_aug_len}
    layout.update(aug_kwargs)
    try:
        stream = BatchStream(examples, config, **layout).iterate(start=state.step)
        while state.step < config.max_updates:
            batch = next(stream)
            loss = train_step(batch, state, config)
            if log_fh is not None:
                rec = {"step": state.step, "lr": lr_schedule(state.step, config),
                       "loss": round(loss, 6), "smoothed_loss": round(state.smoothed_loss, 6)}
                log_fh.write(json.dumps(rec) + "\n")
            if callback is not None:
                callback(state, loss)
            if out_dir is not None and (state.step % config.checkpoint_every == 0
                                        or state.step == config.max_updates):
                save_state(out_dir / checkpoint_name(state.step), state, vocab, config)
    finally:
        if log_fh is not None:
            log_fh.close()
    state.model.eval()
    return state


# ---------------------------------------------------------------------------
# gradient verification


def gradient_check(batch: Batch, model: DictDisModel, epsilon: float = 0.1, n_coords: int = 64,
                   h: float = 1e-4, seed: int = 0, abs_floor: float = 1e-6) -> Dict[str, dict]:
    """Compare autograd gradients with central differences.

    The model is evaluated in float64 with dropout off.  For every parameter
    tensor up to ``n_coords`` coordinates are sampled (all when fewer).  The
    relative error of a coordinate is ``|a - n| / max(|a|, |n|, abs_floor)``.
    Returns ``{name: {"max_rel_err", "max_abs_grad", "n"}}``.
    """
    model = model.double().eval()

    def loss_fn():
        out = model(batch)
        return label_smoothed_nll(out.p_final, batch.tgt_out, epsilon)

    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    report = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            grad = p.grad.detach().clone().flatten()
            flat = p.data.view(-1)
            numel = flat.numel()
            coords = np.arange(numel) if numel <= n_coords else rng.choice(numel, n_coords, replace=False)
            worst = 0.0
            for idx in coords.tolist():
                orig = float(flat[idx])
                flat[idx] = orig + h
                plus = float(loss_fn())
                flat[idx] = orig - h
                minus = float(loss_fn())
                flat[idx] = orig
                numeric = (plus - minus) / (2 * h)
                analytic = float(grad[idx])
                rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), abs_floor)
                worst = max(worst, rel)
            report[name] = {"max_rel_err": worst, "max_abs_grad": float(grad.abs().max()),
                            "n": len(coords)}
    return report
