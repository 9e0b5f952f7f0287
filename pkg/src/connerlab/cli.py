"""Command-line front end: ``connerlab <subcommand> [flags]``.

Subcommands chain naturally::

    connerlab synth --seed 0 --out data/
    connerlab train --train data/train.conll --dev data/dev.conll --seed 0 --out run/
    connerlab eval --checkpoint run/checkpoint.json --test data/test.conll --out run/
    connerlab bucket --checkpoint run/checkpoint.json --train data/train.conll --test data/test.conll --out run/

Settings come from built-in defaults, then an optional JSON ``--config``
file, then explicit flags. The merged settings are written next to the
outputs as ``config.json``. Every output file is written atomically.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .attributes import (
    AttributeKind,
    build_train_stats,
    bucket_performance,
    consistency_by_length,
    format_modifier_table,
    modifier_report,
)
from .conner import (
    CheckpointError,
    ModelConfig,
    Schedule,
    atomic_write,
    build_vocab,
    history_dicts,
    load_checkpoint,
    predict,
    report_json,
    save_checkpoint,
    train,
)
from .corpus import Corpus, CorpusError, LabelScheme, evaluate, format_report, read_conll, scan_entity_types, write_conll
from .experiments import gamma_grid, gamma_sweep, no_refinement_run
from .synthgen import SynthSpec, generate, measure

CONFIG_SCHEMA_VERSION = 1


class UsageError(Exception):
    """Bad or missing flags; reported with the usage text."""


@dataclass
class RunConfig:
    train: str | None = None
    dev: str | None = None
    test: str | None = None
    out: str | None = None
    checkpoint: str | None = None
    seed: int | None = None
    epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-2
    embed_dim: int = 32
    encoder_hidden: int = 32
    mlp_hidden: int = 32
    refine_hidden: int = 16
    context_mode: str = "document"
    gamma: float = 0.3
    lambda1: float = 1.0
    lambda2: float = 1e-1
    lambda3: float = 1e-3
    inference_refine: str = "off"
    max_window: int = 512
    buckets: int = 5
    attribute: str | None = None
    pooled_consistency: bool = False
    tokens: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"schema_version": CONFIG_SCHEMA_VERSION, **dataclasses.asdict(self)}

    def schedule(self) -> Schedule:
        return Schedule(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, seed=self.seed)

    def model_config(self, vocab: list[str], entity_types: list[str]) -> ModelConfig:
        return ModelConfig(
            vocab=vocab,
            entity_types=entity_types,
            embed_dim=self.embed_dim,
            encoder_hidden=self.encoder_hidden,
            mlp_hidden=self.mlp_hidden,
            refine_hidden=self.refine_hidden,
            context_mode=self.context_mode,
            gamma=self.gamma,
            lambdas=(self.lambda1, self.lambda2, self.lambda3),
            inference_refine=self.inference_refine,
            max_window=self.max_window,
        )


RUN_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def load_config_file(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            blob = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    if not isinstance(blob, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    version = blob.pop("schema_version", None)
    if version != CONFIG_SCHEMA_VERSION:
        raise UsageError(f"{path}: schema_version {version!r}, expected {CONFIG_SCHEMA_VERSION}")
    unknown = sorted(set(blob) - RUN_FIELDS)
    if unknown:
        raise UsageError(f"{path}: unknown config keys {unknown}")
    return blob


def merged_config(args: argparse.Namespace) -> RunConfig:
    values = load_config_file(args.config) if getattr(args, "config", None) else {}
    for name in RUN_FIELDS:
        v = getattr(args, name, None)
        if v is not None and v is not False:
            values[name] = v
    return RunConfig(**values)


# ---------------------------------------------------------------------------
# helpers


def require(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if getattr(cfg, n) in (None, "")]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"missing required setting(s): {flags}")


def existing(path: str | None, what: str) -> str | None:
    if path is not None and not os.path.exists(path):
        raise UsageError(f"{what} file not found: {path}")
    return path


def infer_scheme(paths: list[str]) -> LabelScheme:
    types: set[str] = set()
    for p in paths:
        with open(p, encoding="utf-8") as f:
            try:
                types |= scan_entity_types(f)
            except CorpusError as e:
                raise CorpusError(f"{p}: {e}") from None
    if not types:
        raise CorpusError(f"no entity labels found in {', '.join(paths)}")
    return LabelScheme(tuple(sorted(types)))


def out_dir(cfg: RunConfig) -> Path:
    d = Path(cfg.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_json(path: Path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2) + "\n")


def echo_config(d: Path, cfg: RunConfig) -> None:
    write_json(d / "config.json", cfg.to_dict())


def read_corpora(cfg: RunConfig, names: tuple[str, ...], scheme: LabelScheme | None = None):
    paths = {n: existing(getattr(cfg, n), n) for n in names}
    present = [p for p in paths.values() if p]
    scheme = scheme or infer_scheme(present)
    return scheme, {n: (read_conll(p, scheme) if p else None) for n, p in paths.items()}


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec_values = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as f:
                spec_values = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read synth spec {args.config}: {e}") from e
        spec_values.pop("schema_version", None)
    if args.seed is not None:
        spec_values["seed"] = args.seed
    if "seed" not in spec_values:
        raise UsageError("a seed is required: pass --seed or set it in the config file")
    if not args.out:
        raise UsageError("missing required setting(s): --out")
    try:
        spec = SynthSpec(**spec_values)
    except TypeError as e:
        raise UsageError(f"bad synth spec: {e}") from e
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    splits = generate(spec)
    for name, corpus in zip(("train", "dev", "test"), splits):
        atomic_write(d / f"{name}.conll", write_conll(corpus))
    atomic_write(d / "synth_spec.json", spec.to_json() + "\n")
    train_c = splits[0]
    summary = {name: measure(c, build_train_stats(train_c)).to_dict() for name, c in zip(("train", "dev", "test"), splits)}
    write_json(d / "summary.json", summary)
    print(f"wrote {sum(len(c) for c in splits)} documents to {d}")
    return 0


def cmd_analyze(args) -> int:
    cfg = merged_config(args)
    require(cfg, "train", "test", "out")
    model = load_checkpoint(existing(cfg.checkpoint, "checkpoint"))[0] if cfg.checkpoint else None
    _, c = read_corpora(cfg, ("train", "test"), model.config.scheme if model else None)
    stats = build_train_stats(c["train"], pooled_consistency=cfg.pooled_consistency)
    by_len = consistency_by_length(c["test"], stats)
    tokens = cfg.tokens or ambiguous_tokens(c["test"], stats)
    # without a checkpoint the agreement row compares gold with itself
    preds = predict(model, c["test"]) if model else [d.gold_labels for d in c["test"]]
    rows = modifier_report(tokens, c["train"], c["test"], preds, stats) if tokens else []
    d = out_dir(cfg)
    write_json(
        d / "analysis.json",
        {
            "consistency_by_length": {str(k): v for k, v in sorted(by_len.items())},
            "modifiers": [dataclasses.asdict(r) for r in rows],
        },
    )
    atomic_write(d / "modifiers.txt", format_modifier_table(rows) + "\n" if rows else "")
    echo_config(d, cfg)
    for k, v in sorted(by_len.items()):
        print(f"eLen {k}: mean eCon {v:.4f}")
    return 0


def ambiguous_tokens(test: Corpus, stats, limit: int = 20) -> list[str]:
    """Most frequent test tokens whose training consistency is strictly between 0 and 1."""
    counts: dict[str, int] = {}
    for doc in test:
        for t in doc.tokens:
            if 0.0 < stats.token_consistency(t) < 1.0:
                counts[t] = counts.get(t, 0) + 1
    return [t for t, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:limit]]


def cmd_train(args) -> int:
    cfg = merged_config(args)
    require(cfg, "train", "out", "seed")
    scheme, c = read_corpora(cfg, ("train", "dev", "test"))
    model_cfg = cfg.model_config(build_vocab(c["train"]), list(scheme.entity_types))
    result = train(c["train"], c["dev"], model_cfg, cfg.schedule())
    d = out_dir(cfg)
    meta = {"seed": cfg.seed, "best_epoch": result.best_epoch, "dev_f1_history": result.dev_f1_history()}
    save_checkpoint(result.model, d / "checkpoint.json", meta)
    write_json(d / "history.json", history_dicts(result))
    target = c["test"] or c["dev"] or c["train"]
    report = evaluate(target, predict(result.model, target))
    atomic_write(d / "report.json", report_json(report) + "\n")
    echo_config(d, cfg)
    print(format_report(report))
    return 0


def cmd_eval(args) -> int:
    cfg = merged_config(args)
    require(cfg, "checkpoint", "test", "out")
    model, _ = load_checkpoint(existing(cfg.checkpoint, "checkpoint"))
    _, c = read_corpora(cfg, ("test",), model.config.scheme)
    report = evaluate(c["test"], predict(model, c["test"]))
    d = out_dir(cfg)
    atomic_write(d / "report.json", report_json(report) + "\n")
    echo_config(d, cfg)
    print(format_report(report))
    return 0


def cmd_sweep_gamma(args) -> int:
    cfg = merged_config(args)
    require(cfg, "train", "test", "out", "seed")
    scheme, c = read_corpora(cfg, ("train", "dev", "test"))
    base = cfg.model_config(build_vocab(c["train"]), list(scheme.entity_types))
    grid = gamma_grid(base.label_count)
    rows = gamma_sweep(c["train"], c["dev"], c["test"], base, cfg.schedule(), grid)
    _, reference = no_refinement_run(c["train"], c["dev"], c["test"], base, cfg.schedule())
    d = out_dir(cfg)
    atomic_write(d / "gamma_sweep.tsv", "gamma\tprecision\trecall\tf1\n" + "".join(r.tsv() + "\n" for r in rows))
    write_json(
        d / "gamma_sweep.json",
        {
            "rows": [{"gamma": r.gamma, "refined_tokens": r.refined_tokens, "report": r.report.to_dict()} for r in rows],
            "no_refinement": reference.to_dict(),
        },
    )
    echo_config(d, cfg)
    for r in rows:
        print(f"gamma {r.gamma:.4f}  f1 {r.report.f1:.4f}  refined {r.refined_tokens}")
    print(f"no refinement   f1 {reference.f1:.4f}")
    return 0


def cmd_bucket(args) -> int:
    cfg = merged_config(args)
    require(cfg, "checkpoint", "train", "test", "out")
    model, _ = load_checkpoint(existing(cfg.checkpoint, "checkpoint"))
    _, c = read_corpora(cfg, ("train", "test"), model.config.scheme)
    if cfg.attribute is not None:
        try:
            kinds = [AttributeKind(cfg.attribute)]
        except ValueError:
            raise UsageError(f"unknown attribute {cfg.attribute!r}; choose from {[k.value for k in AttributeKind]}") from None
    else:
        kinds = list(AttributeKind)
    if cfg.buckets < 1:
        raise UsageError("--buckets must be >= 1")
    stats = build_train_stats(c["train"], pooled_consistency=cfg.pooled_consistency)
    preds = predict(model, c["test"])
    reports = [bucket_performance(k, c["test"], preds, stats, cfg.buckets) for k in kinds]
    d = out_dir(cfg)
    write_json(d / "buckets.json", [json.loads(r.to_json()) for r in reports])
    atomic_write(d / "buckets.txt", "\n\n".join(r.to_text() for r in reports) + "\n")
    echo_config(d, cfg)
    print("\n\n".join(r.to_text() for r in reports))
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_paths(p, *names):
    for n in names:
        p.add_argument(f"--{n}", metavar="PATH")


def _add_model_flags(p):
    p.add_argument("--seed", type=int, help="random seed (required for training)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--encoder-hidden", dest="encoder_hidden", type=int)
    p.add_argument("--mlp-hidden", dest="mlp_hidden", type=int)
    p.add_argument("--refine-hidden", dest="refine_hidden", type=int)
    p.add_argument("--context", dest="context_mode", choices=["sentence", "document"])
    p.add_argument("--gamma", type=float, help="entropy threshold for refinement")
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--lambda3", type=float)
    p.add_argument("--inference-refine", dest="inference_refine", choices=["off", "two_pass"])
    p.add_argument("--max-window", dest="max_window", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="connerlab", description="Label-consistency NER experiments.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate train/dev/test corpora")
    p.add_argument("--config", metavar="PATH", help="synthetic corpus spec (JSON)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("analyze", help="consistency-by-length and modifier tables")
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--checkpoint", metavar="PATH", help="model whose predictions fill the agreement row")
    _add_paths(p, "train", "test")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--tokens", nargs="+", help="tokens for the modifier table")
    p.add_argument("--pooled-consistency", dest="pooled_consistency", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", help="train a model and write checkpoint, history and report")
    p.add_argument("--config", metavar="PATH")
    _add_paths(p, "train", "dev", "test")
    p.add_argument("--out", metavar="DIR")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a corpus")
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--checkpoint", metavar="PATH")
    _add_paths(p, "test")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-gamma", help="retrain across the entropy-threshold grid")
    p.add_argument("--config", metavar="PATH")
    _add_paths(p, "train", "dev", "test")
    p.add_argument("--out", metavar="DIR")
    _add_model_flags(p)
    p.set_defaults(func=cmd_sweep_gamma)

    p = sub.add_parser("bucket", help="F1 per attribute bucket for a checkpoint")
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--checkpoint", metavar="PATH")
    _add_paths(p, "train", "test")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--attribute", help="one attribute kind; all kinds when omitted")
    p.add_argument("--buckets", type=int)
    p.add_argument("--pooled-consistency", dest="pooled_consistency", action="store_true")
    p.set_defaults(func=cmd_bucket)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        return args.func(args)
    except UsageError as e:
        sub.print_usage(sys.stderr)
        print(f"connerlab {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (CorpusError, CheckpointError, ValueError, OSError) as e:
        print(f"connerlab {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
