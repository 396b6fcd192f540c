"""dictdis command line: prepare | train | translate | evaluate | stats | make-synthetic.

Options can come from a JSON config file (``--config``) with sections
``data``, ``model``, ``train``, ``decode`` and ``paths``; explicit flags win.

Failures exit with status 1 and print one line::

    dictdis: error[<category>]: <message>
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence

import torch

from . import plotting
from .data import (MAX_CONSTRAINTS, Vocabulary, build_augmented_input, build_vocabulary,
                   detokenize, dictionary_stats, encode_matches, load_dictionary, match_constraints,
                   prepare_examples, read_examples, tokenize, vocabulary_corpus, withhold_constraints)
from .decoding import DecodeConfig, translate
from .errors import ConfigError, DictDisError, InputError
from .evaluation import EvalRecord, evaluate_records, paired_bootstrap
from .model import ModelConfig, load_checkpoint
from .synthetic import TASKS
from .training import TrainConfig, latest_checkpoint, train

logger = logging.getLogger("dictdis")


@dataclass
class RunConfig:
    paths: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    decode: dict = field(default_factory=dict)
    seed: Optional[int] = None
    unconstrained: bool = False


def load_run_config(path: Optional[str]) -> RunConfig:
    if not path:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})")
    known = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{path}: unknown config sections {sorted(unknown)}")
    return RunConfig(**raw)


def _section(cls, values: dict):
    names = {f.name for f in fields(cls)}
    bad = set(values) - names
    if bad:
        raise ConfigError(f"unknown {cls.__name__} fields {sorted(bad)}")
    return cls(**values)


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise InputError(f"file not found: {path}")
    except UnicodeDecodeError as exc:
        raise InputError(f"{path}: not UTF-8 ({exc})")


def _read_lines(path) -> List[str]:
    text = _read_text(path)
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def _write_lines(path, lines) -> None:
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _need(value, flag: str):
    if value is None:
        raise ConfigError(f"missing required option {flag}")
    return value


def _configure_runtime(args, seed: int) -> None:
    if args.threads:
        torch.set_num_threads(args.threads)
    if args.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(seed)


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args, cfg: RunConfig) -> int:
    paths = cfg.paths
    src = _need(args.src or paths.get("src"), "--src")
    tgt = _need(args.tgt or paths.get("tgt"), "--tgt")
    out = Path(_need(args.out or paths.get("prepared"), "--out"))
    dict_path = args.dict or paths.get("dict")
    max_constraints = args.max_constraints or cfg.data.get("max_constraints", MAX_CONSTRAINTS)
    min_freq = args.min_freq or cfg.data.get("min_freq", 1)

    src_lines, tgt_lines = _read_lines(src), _read_lines(tgt)
    if len(src_lines) != len(tgt_lines):
        raise InputError(f"{src} has {len(src_lines)} lines but {tgt} has {len(tgt_lines)}")
    dictionary = load_dictionary(_read_text(dict_path)) if dict_path else None
    vocab_path = args.vocab or paths.get("vocab")
    if vocab_path:
        vocab = Vocabulary.from_text(_read_text(vocab_path))
    else:
        vocab = build_vocabulary(vocabulary_corpus(src_lines, tgt_lines, dictionary), min_freq)
    examples = prepare_examples(src_lines, tgt_lines, vocab, dictionary, max_constraints)
    fraction = args.unconstrained_fraction
    if fraction is None:
        fraction = cfg.data.get("unconstrained_fraction", 0.0)
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError("--unconstrained-fraction must lie in [0, 1]")
    if fraction > 0:
        examples = withhold_constraints(examples, fraction, seed=_seed(args, cfg))

    out.mkdir(parents=True, exist_ok=True)
    _write_lines(out / "data.jsonl", [ex.to_json() for ex in examples])
    (out / "vocab.txt").write_text(vocab.to_text(), encoding="utf-8")
    stats = {"n_records": len(examples),
             "n_constrained": sum(1 for ex in examples if ex.constraints),
             "vocab_size": len(vocab)}
    if dictionary is not None:
        st = dictionary_stats(dictionary, (tokenize(s) for s in src_lines), max_constraints)
        stats.update(st.to_dict())
    else:
        stats.update({"polysemy_histogram": {}, "coverage": 0.0})
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"prepared {len(examples)} records -> {out} (coverage {stats['coverage']:.2f}%)")
    return 0


def _model_config(args, cfg: RunConfig, vocab_size: int, seed: int) -> ModelConfig:
    values = dict(cfg.model)
    for key in ("d_model", "n_heads", "n_layers", "d_ffn", "dropout"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    values["vocab_size"] = vocab_size
    values.setdefault("seed", seed)
    return _section(ModelConfig, values)


def _train_config(args, cfg: RunConfig, seed: int) -> TrainConfig:
    values = dict(cfg.train)
    for flag, key in (("lr", "lr_peak"), ("warmup", "warmup_steps"), ("max_updates", "max_updates"),
                      ("batch_tokens", "batch_tokens"), ("checkpoint_every", "checkpoint_every"),
                      ("label_smoothing", "label_smoothing")):
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    values["seed"] = seed
    return _section(TrainConfig, values)


def cmd_train(args, cfg: RunConfig) -> int:
    data_dir = Path(_need(args.data or cfg.paths.get("prepared"), "--data"))
    out = Path(_need(args.out or cfg.paths.get("out"), "--out"))
    seed = _seed(args, cfg)
    vocab = Vocabulary.from_text(_read_text(data_dir / "vocab.txt"))
    examples = read_examples(data_dir / "data.jsonl") if (data_dir / "data.jsonl").exists() else None
    if not examples:
        raise InputError(f"no prepared records in {data_dir / 'data.jsonl'}")
    model_cfg = _model_config(args, cfg, len(vocab), seed)
    train_cfg = _train_config(args, cfg, seed)
    resume = args.ckpt
    if args.resume and resume is None:
        resume = latest_checkpoint(out)
    if resume is not None and not Path(resume).exists():
        raise InputError(f"checkpoint not found: {resume}")
    state = train(examples, vocab, model_cfg, train_cfg, out_dir=out, resume=resume)
    if args.plot:
        plotting.loss_curve(out / "train_log.jsonl", out)
    print(f"trained to step {state.step} -> {out}")
    return 0


def _decode_config(args, cfg: RunConfig) -> DecodeConfig:
    values = dict(cfg.decode)
    for flag, key in (("alpha", "alpha"), ("beam", "beam_size"), ("max_len", "max_len"),
                      ("length_penalty", "length_penalty")):
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    return _section(DecodeConfig, values)


def build_inputs(src_lines: Sequence[str], vocab: Vocabulary, model_cfg: ModelConfig, dictionary=None,
                 max_constraints: int = MAX_CONSTRAINTS):
    """Augmented inputs for raw source lines; no dictionary means unconstrained."""
    inputs = []
    for lineno, line in enumerate(src_lines, start=1):
        toks = tokenize(line)
        if not toks:
            raise InputError(f"line {lineno}: empty source sentence")
        matches = match_constraints(toks, dictionary, max_constraints) if dictionary is not None else []
        inputs.append(build_augmented_input(vocab.encode(toks), encode_matches(matches, vocab), vocab,
                                            p_offset=model_cfg.p_offset,
                                            max_segments=model_cfg.max_segments,
                                            max_aug_len=model_cfg.max_aug_len))
    return inputs


def cmd_translate(args, cfg: RunConfig) -> int:
    ckpt_path = _need(args.ckpt or cfg.paths.get("ckpt"), "--ckpt")
    src = _need(args.src or cfg.paths.get("src"), "--src")
    out = _need(args.out or cfg.paths.get("hyp"), "--out")
    unconstrained = args.unconstrained or cfg.unconstrained
    dict_path = args.dict or cfg.paths.get("dict")
    if not unconstrained and not dict_path:
        raise ConfigError("constrained translation needs --dict (or pass --unconstrained)")
    if not Path(ckpt_path).exists():
        raise InputError(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    model = ckpt.build_model()
    dictionary = None if unconstrained else load_dictionary(_read_text(dict_path))
    max_constraints = args.max_constraints or cfg.data.get("max_constraints", MAX_CONSTRAINTS)
    inputs = build_inputs(_read_lines(src), ckpt.vocab, ckpt.config, dictionary, max_constraints)
    dcfg = _decode_config(args, cfg)
    results = translate(inputs, model, dcfg)
    if args.jsonl:
        lines = [json.dumps({"hyp": detokenize(ckpt.vocab.decode(toks)), "score": round(score, 6),
                             "gates": [round(g, 6) for g in gates]}, ensure_ascii=False)
                 for toks, score, gates in results]
    else:
        lines = [detokenize(ckpt.vocab.decode(toks)) for toks, _, _ in results]
    _write_lines(out, lines)
    print(f"translated {len(lines)} sentences -> {out}")
    return 0


def _load_constraints(path, n: int) -> List[list]:
    lines = _read_lines(path)
    if len(lines) != n:
        raise InputError(f"{path} has {len(lines)} lines, expected {n}")
    out = []
    for lineno, line in enumerate(lines, start=1):
        try:
            cons = json.loads(line) if line.strip() else []
            out.append([tuple(tuple(tokenize(c)) for c in cands) for cands in cons])
        except (json.JSONDecodeError, TypeError, AttributeError) as exc:
            raise InputError(f"{path}:{lineno}: expected a JSON list of candidate lists ({exc})")
    return out


def cmd_evaluate(args, cfg: RunConfig) -> int:
    hyp_path = _need(args.hyp, "--hyp")
    ref_path = _need(args.ref or cfg.paths.get("ref"), "--ref")
    out = _need(args.out, "--out")
    hyps = [tokenize(line) for line in _read_lines(hyp_path)]
    refs = [tokenize(line) for line in _read_lines(ref_path)]
    if len(hyps) != len(refs):
        raise InputError(f"line-count mismatch: {hyp_path} has {len(hyps)}, {ref_path} has {len(refs)}")
    constraints: List[list] = [[] for _ in refs]
    if args.constraints:
        constraints = _load_constraints(args.constraints, len(refs))
    elif args.src and args.dict:
        src_lines = _read_lines(args.src)
        if len(src_lines) != len(refs):
            raise InputError(f"line-count mismatch: {args.src} has {len(src_lines)}, {ref_path} has {len(refs)}")
        dictionary = load_dictionary(_read_text(args.dict))
        max_constraints = args.max_constraints or cfg.data.get("max_constraints", MAX_CONSTRAINTS)
        constraints = [[m.candidates for m in match_constraints(tokenize(s), dictionary, max_constraints)]
                       for s in src_lines]
    records = [EvalRecord(h, r, c) for h, r, c in zip(hyps, refs, constraints)]
    report = evaluate_records(records)
    degree_reports = {"A": report.csr_by_degree}
    if args.hyp_b:
        hyps_b = [tokenize(line) for line in _read_lines(args.hyp_b)]
        if len(hyps_b) != len(refs):
            raise InputError(f"line-count mismatch: {args.hyp_b} has {len(hyps_b)}, {ref_path} has {len(refs)}")
        report.bootstrap = paired_bootstrap(hyps, hyps_b, refs, resamples=args.resamples,
                                            p_threshold=args.p_threshold, seed=_seed(args, cfg))
        degree_reports["B"] = evaluate_records(
            [EvalRecord(h, r, c) for h, r, c in zip(hyps_b, refs, constraints)]).csr_by_degree
    Path(out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if args.report_dir:
        report_dir = Path(args.report_dir)
        report_dir.mkdir(parents=True, exist_ok=True)
        plotting.csr_by_degree(degree_reports, report_dir)
    print(f"bleu {report.bleu:.2f}  csr {report.csr:.2f}  -> {out}")
    return 0


def cmd_stats(args, cfg: RunConfig) -> int:
    dict_path = _need(args.dict or cfg.paths.get("dict"), "--dict")
    out = Path(_need(args.out, "--out"))
    dictionary = load_dictionary(_read_text(dict_path))
    corpus = [tokenize(line) for line in _read_lines(args.src)] if args.src else []
    max_constraints = args.max_constraints or cfg.data.get("max_constraints", MAX_CONSTRAINTS)
    st = dictionary_stats(dictionary, corpus, max_constraints)
    out.mkdir(parents=True, exist_ok=True)
    (out / "stats.json").write_text(json.dumps(st.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if st.histogram:
        plotting.polysemy_histogram(st.histogram, out)
    print(f"{st.n_entries} entries, coverage {st.coverage:.2f}% -> {out}")
    return 0


def cmd_make_synthetic(args, cfg: RunConfig) -> int:
    out = _need(args.out, "--out")
    kwargs = {"seed": _seed(args, cfg)}
    if args.n_train is not None:
        kwargs["n_train"] = args.n_train
    if args.n_test is not None:
        kwargs["n_test"] = args.n_test
    task = TASKS[args.task](**kwargs)
    task.write(out)
    print(f"wrote {args.task} task ({len(task.train_src)} train / {len(task.test_src)} test) -> {out}")
    return 0


def _seed(args, cfg: RunConfig) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return cfg.seed if cfg.seed is not None else 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="torch intra-op threads")
    common.add_argument("--deterministic", action="store_true",
                        help="single thread, deterministic kernels")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--max-constraints", type=int, dest="max_constraints")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dictdis", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="match dictionary constraints, write JSONL records")
    p.add_argument("--src")
    p.add_argument("--tgt")
    p.add_argument("--dict")
    p.add_argument("--vocab", help="reuse an existing vocabulary file")
    p.add_argument("--min-freq", type=int, dest="min_freq")
    p.add_argument("--unconstrained-fraction", type=float, dest="unconstrained_fraction",
                   help="share of records written without constraints (seeded)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="train a model on prepared data")
    p.add_argument("--data", help="directory written by 'prepare'")
    p.add_argument("--ckpt", help="resume from this checkpoint")
    p.add_argument("--resume", action="store_true", help="resume from the latest checkpoint in --out")
    p.add_argument("--max-updates", type=int, dest="max_updates")
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--batch-tokens", type=int, dest="batch_tokens")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--label-smoothing", type=float, dest="label_smoothing")
    p.add_argument("--d-model", type=int, dest="d_model")
    p.add_argument("--n-heads", type=int, dest="n_heads")
    p.add_argument("--n-layers", type=int, dest="n_layers")
    p.add_argument("--d-ffn", type=int, dest="d_ffn")
    p.add_argument("--dropout", type=float)
    p.add_argument("--plot", action="store_true", help="write loss.png/loss.tsv next to the log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", parents=[common], help="decode a source file")
    p.add_argument("--ckpt")
    p.add_argument("--src")
    p.add_argument("--dict")
    p.add_argument("--unconstrained", action="store_true")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beam", type=int)
    p.add_argument("--max-len", type=int, dest="max_len")
    p.add_argument("--length-penalty", type=float, dest="length_penalty")
    p.add_argument("--jsonl", action="store_true", help="emit score and gate trace per sentence")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", parents=[common], help="BLEU, CSR and paired bootstrap")
    p.add_argument("--hyp")
    p.add_argument("--hyp-b", dest="hyp_b", help="second system; enables the bootstrap test")
    p.add_argument("--ref")
    p.add_argument("--constraints", help="JSONL, one list of candidate lists per line")
    p.add_argument("--src", help="source file; with --dict, constraints are matched from it")
    p.add_argument("--dict")
    p.add_argument("--resamples", type=int, default=1000)
    p.add_argument("--p-threshold", type=float, default=0.05, dest="p_threshold")
    p.add_argument("--report-dir", dest="report_dir", help="write csr_by_degree.tsv/.png here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stats", parents=[common], help="dictionary polysemy histogram and coverage")
    p.add_argument("--dict")
    p.add_argument("--src", help="corpus for coverage")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("make-synthetic", parents=[common], help="generate a synthetic task corpus")
    p.add_argument("--task", choices=sorted(TASKS), required=True)
    p.add_argument("--n-train", type=int, dest="n_train")
    p.add_argument("--n-test", type=int, dest="n_test")
    p.set_defaults(func=cmd_make_synthetic)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config)
        _configure_runtime(args, _seed(args, cfg))
        return args.func(args, cfg)
    except DictDisError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"dictdis: error[{exc.category}]: {msg}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"dictdis: error[io]: {exc}".replace("\n", " "), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
