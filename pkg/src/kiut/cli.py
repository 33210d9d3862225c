"""Command-line entry point: ``kiut {gen-data,train,eval,ablate,decode}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import (GeneratorSpec, build_vocab, by_split, default_lexicon, generate_dataset, normalize, read_jsonl,
                     write_jsonl)
from .decoder import ConnectionSchema
from .knowledge import read_lexicon
from .metrics import MetricsReport
from .model import ModelConfig
from .training import (TrainConfig, decode_reports, evaluate, evaluate_references, load_checkpoint,
                       save_checkpoint, train)

log = logging.getLogger("kiut")

METRIC_FIELDS = [f.name for f in dataclasses.fields(MetricsReport)]


class UsageError(Exception):
    """Bad flags or config; mapped to exit code 2."""


# ---------------------------------------------------------------- config files


def load_run_config(path: str | None) -> tuple[dict, dict]:
    """Read ``{"model": {...}, "train": {...}}``; both sections optional."""
    if path is None:
        return {}, {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(data, dict) or set(data) - {"model", "train"}:
        raise UsageError(f"config {path}: expected an object with optional 'model' and 'train' sections")
    model, tr = data.get("model", {}), data.get("train", {})
    if not isinstance(model, dict) or not isinstance(tr, dict):
        raise UsageError(f"config {path}: 'model' and 'train' must be objects")
    return model, tr


def build_configs(model: dict, tr: dict) -> tuple[ModelConfig, TrainConfig]:
    try:
        return ModelConfig.from_dict(model), TrainConfig.from_dict(tr)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config: {exc}") from exc


def parse_grid(text: str) -> tuple[int, int]:
    """``"7"`` or ``"7x7"`` (width x height)."""
    parts = text.lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise UsageError(f"invalid grid {text!r}: expected N or WxH") from None
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2 or min(dims) < 1:
        raise UsageError(f"invalid grid {text!r}: expected positive N or WxH")
    return dims[0], dims[1]


def load_lexicon(path: str | None, n_symptoms: int):
    if path is None:
        return default_lexicon(n_symptoms)
    lex = read_lexicon(path)
    if len(lex) != n_symptoms:
        raise UsageError(f"lexicon has {len(lex)} symptoms, data has {n_symptoms}")
    return lex


def with_data_grid(model: dict, samples) -> dict:
    """Fill in a square grid from the data when the config leaves it unset."""
    if "grid_w" in model or "grid_h" in model:
        return model
    S = samples[0].features.shape[0]
    side = int(round(np.sqrt(S)))
    return {**model, "grid_w": side, "grid_h": side} if side * side == S else model


def load_data(path: str):
    samples = read_jsonl(path)
    if not samples:
        raise UsageError(f"{path}: no samples")
    return samples


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    gw, gh = parse_grid(args.grid)
    spec = GeneratorSpec(n=args.n, grid_w=gw, grid_h=gh, n_symptoms=args.symptoms)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    samples = generate_dataset(spec, args.seed)
    write_jsonl(args.out, samples)
    train_split = by_split(samples, "train")
    n_vocab = len(build_vocab([s.report for s in train_split])) if train_split else 0
    lengths = [len(normalize(s.report).split()) for s in samples]
    print(json.dumps({
        "samples": len(samples),
        "splits": {k: len(by_split(samples, k)) for k in ("train", "val", "test")},
        "regions": spec.num_regions,
        "symptoms": spec.n_symptoms,
        "vocab_size": n_vocab,
        "mean_report_words": float(np.mean(lengths)) if lengths else 0.0,
        "max_report_words": max(lengths, default=0),
    }))
    return 0


def cmd_train(args) -> int:
    model_dict, train_dict = load_run_config(args.config)
    samples = load_data(args.data)
    model_cfg, train_cfg = build_configs(with_data_grid(model_dict, samples), train_dict)
    lexicon = load_lexicon(args.lexicon, len(samples[0].labels))

    def on_epoch(entry):
        print(json.dumps(entry), flush=True)

    ckpt, _ = train(model_cfg, train_cfg, samples, lexicon, on_epoch=on_epoch)
    save_checkpoint(args.out, ckpt)
    log.info("wrote %s (best epoch %s)", args.out, ckpt.meta.get("best_epoch"))
    return 0


def check_compatible(config: ModelConfig, samples) -> None:
    s = samples[0]
    if s.features.shape != (config.num_regions, config.d_in):
        raise UsageError(f"data features {s.features.shape} do not match the checkpoint "
                         f"({config.num_regions}, {config.d_in})")
    if len(s.labels) != config.n_symptoms:
        raise UsageError(f"data has {len(s.labels)} symptoms, checkpoint expects {config.n_symptoms}")


def cmd_eval(args) -> int:
    samples = by_split(load_data(args.data), args.split)
    if not samples:
        raise UsageError(f"split {args.split!r} is empty")
    if args.references:
        report = evaluate_references(samples, load_lexicon(args.lexicon, len(samples[0].labels)))
    else:
        if args.ckpt is None:
            raise UsageError("--ckpt is required unless --references is given")
        ckpt = load_checkpoint(args.ckpt)
        check_compatible(ckpt.config, samples)
        lexicon = load_lexicon(args.lexicon, ckpt.config.n_symptoms)
        report = evaluate(ckpt.params, ckpt.config, ckpt.vocab, samples, lexicon)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(report.to_json())
    return 0


def cmd_decode(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    samples = load_data(args.data)
    match = [s for s in samples if s.id == args.id]
    if not match:
        raise UsageError(f"no sample with id {args.id}")
    check_compatible(ckpt.config, match)
    words = decode_reports(ckpt.params, ckpt.config, ckpt.vocab, match[0].features[None])[0]
    print(json.dumps({"id": args.id, "generated": " ".join(words), "reference": normalize(match[0].report)}))
    return 0


# ---------------------------------------------------------------- ablation

VARIANTS = {
    "full": (),
    "no_er": ("no_er",),
    "no_ir": ("no_ir",),
    "no_clinical": ("no_clinical",),
    "no_contextual": ("no_contextual",),
    "no_knowledge": ("no_clinical", "no_contextual"),
}
FLAGS = ("no_er", "no_ir", "no_clinical", "no_contextual")


@dataclass(frozen=True)
class AblationConfig:
    schema: str = "u"
    no_er: bool = False
    no_ir: bool = False
    no_clinical: bool = False
    no_contextual: bool = False
    n_layers: int | None = None

    @property
    def name(self) -> str:
        off = [f for f in FLAGS if getattr(self, f)]
        parts = [self.schema] + (off or ["full"])
        if self.n_layers is not None:
            parts.append(f"N{self.n_layers}")
        return "+".join(parts)

    def apply(self, base: ModelConfig) -> ModelConfig:
        changes = dict(schema=self.schema)
        if self.no_er:
            changes["use_er"] = False
        if self.no_ir:
            changes["n_memory"] = 0
        if self.no_clinical:
            changes["use_clinical"] = False
        if self.no_contextual:
            changes["use_contextual"] = False
        if self.n_layers is not None:
            changes["n_layers"] = self.n_layers
        return base.replace(**changes)


@dataclass
class AblationSpec:
    configs: list[AblationConfig]
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])

    def __post_init__(self):
        if not self.configs:
            raise ValueError("ablation needs at least one configuration")
        if not self.seeds:
            raise ValueError("ablation needs at least one seed")
        if len(set(self.configs)) != len(self.configs):
            raise ValueError("duplicate ablation configurations")

    @classmethod
    def from_flags(cls, schemas: Sequence[str], variants: Sequence[str], flags: dict, layers: Sequence[int],
                   seeds: Sequence[int]) -> "AblationSpec":
        configs = []
        for schema in schemas or ["u"]:
            ConnectionSchema(schema)
            for variant in variants or ["full"]:
                on = set(flags_of(variant)) | {f for f in FLAGS if flags.get(f)}
                for n in layers or [None]:
                    cfg = AblationConfig(schema=schema, n_layers=n, **{f: f in on for f in FLAGS})
                    if cfg not in configs:
                        configs.append(cfg)
        return cls(configs, list(seeds))


def flags_of(variant: str) -> tuple[str, ...]:
    """``full``, a single flag name, a preset, or flags joined with ``+``."""
    out: list[str] = []
    for part in variant.replace("-", "_").split("+"):
        if part not in VARIANTS:
            raise ValueError(f"unknown variant {part!r}; choose from {sorted(VARIANTS)}")
        out.extend(VARIANTS[part])
    return tuple(out)


def _ablation_job(job):
    cfg, seed, model_dict, train_dict, samples, lexicon = job
    model_cfg = cfg.apply(ModelConfig.from_dict(model_dict))
    train_cfg = TrainConfig.from_dict({**train_dict, "seed": seed})
    ckpt, history = train(model_cfg, train_cfg, samples, lexicon)
    metrics = evaluate(ckpt.params, ckpt.config, ckpt.vocab, by_split(samples, "test"), lexicon)
    return metrics, history


def run_ablation(spec: AblationSpec, model_cfg: ModelConfig, train_cfg: TrainConfig, samples, lexicon,
                 workers: int = 1, on_result=None) -> list[dict]:
    """Train and test every (configuration, seed); returns per-seed rows then one mean row per config."""
    jobs = [(cfg, seed, model_cfg.to_dict(), dataclasses.asdict(train_cfg), samples, lexicon)
            for cfg in spec.configs for seed in spec.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_ablation_job, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_ablation_job(job))
            if on_result:
                on_result(job[0], job[1], results[-1][0])
    rows = []
    for (cfg, seed, *_), (metrics, _) in zip(jobs, results):
        rows.append(_row(cfg, seed, metrics.to_dict()))
    for cfg in spec.configs:
        per_seed = [r for r in rows if r["config"] == cfg.name]
        rows.append(_row(cfg, "mean", {k: float(np.mean([r[k] for r in per_seed])) for k in METRIC_FIELDS}))
    return rows


def _row(cfg: AblationConfig, seed, metrics: dict) -> dict:
    row = {"config": cfg.name, "schema": cfg.schema, "n_layers": cfg.n_layers}
    row.update({f: getattr(cfg, f) for f in FLAGS})
    row["seed"] = seed
    row.update(metrics)
    return row


def write_ablation(rows: list[dict], out: str) -> tuple[Path, Path]:
    """Writes ``<out>.csv`` and ``<out>.json`` (``out`` may carry either suffix)."""
    base = Path(out)
    if base.suffix in (".csv", ".json"):
        base = base.with_suffix("")
    csv_path, json_path = base.with_suffix(".csv"), base.with_suffix(".json")
    base.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    json_path.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return csv_path, json_path


def thread_cap() -> int:
    raw = os.environ.get("KIUT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"KIUT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("KIUT_THREADS must be >= 1")
    return n


def cmd_ablate(args) -> int:
    model_dict, train_dict = load_run_config(args.config)
    samples = load_data(args.data)
    model_cfg, train_cfg = build_configs(with_data_grid(model_dict, samples), train_dict)
    try:
        spec = AblationSpec.from_flags(args.schema, args.variant, vars(args), args.layers, args.seeds)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    lexicon = load_lexicon(args.lexicon, len(samples[0].labels))

    def progress(cfg, seed, metrics):
        log.info("%s seed=%s bleu4=%.4f", cfg.name, seed, metrics.bleu4)

    rows = run_ablation(spec, model_cfg, train_cfg, samples, lexicon, workers=thread_cap(), on_result=progress)
    csv_path, json_path = write_ablation(rows, args.out)
    for row in rows:
        if row["seed"] == "mean":
            print(json.dumps({"config": row["config"], "bleu4": row["bleu4"], "ce_f1": row["ce_f1"]}))
    log.info("wrote %s and %s", csv_path, json_path)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kiut", description="Region-feature report generation: data, training, evaluation and ablations.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic region-feature / report corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--symptoms", type=int, default=8)
    p.add_argument("--grid", default="7", help="N or WxH (default 7)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help='JSON file {"model": {...}, "train": {...}}')
    p.add_argument("--out", required=True)
    p.add_argument("--lexicon", help="symptom lexicon (name<TAB>kw,kw); default matches gen-data")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy-decode a split and write a metrics JSON")
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out")
    p.add_argument("--lexicon")
    p.add_argument("--references", action="store_true",
                   help="score the reference reports against themselves (no model)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/test a grid of configurations over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output stem; writes .csv and .json")
    p.add_argument("--config", help="base config JSON, as for train")
    p.add_argument("--schema", action="append", choices=[s.value for s in ConnectionSchema])
    p.add_argument("--variant", action="append",
                   help=f"repeatable; one of {sorted(VARIANTS)} or flags joined with '+'")
    for flag in FLAGS:
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, action="store_true")
    p.add_argument("--layers", type=int, action="append", help="repeatable layer count N")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--lexicon")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("decode", help="generate the report for one sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--id", type=int, required=True)
    p.set_defaults(func=cmd_decode)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"kiut {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # every failure ends in a one-line diagnostic
        print(f"kiut {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
