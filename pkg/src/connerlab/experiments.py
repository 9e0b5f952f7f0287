"""Multi-seed synthetic experiments shared by the scripts, the CLI and the
acceptance suite.

Each experiment regenerates its corpora from a :class:`SynthSpec` per seed,
so a run is a pure function of its arguments.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .attributes import build_train_stats, consistency_by_length
from .conner import (
    ConnerModel,
    ModelConfig,
    Schedule,
    TrainResult,
    _forward,
    build_vocab,
    make_batch,
    make_items,
    predict,
    train,
)
from .corpus import Corpus, EvalReport, evaluate
from .synthgen import SynthSpec, generate

FULL_LAMBDAS = (1.0, 1e-1, 1e-3)
ABLATED_LAMBDAS = (1.0, 0.0, 0.0)


@dataclass
class ExperimentSchedule:
    """Training schedule used by the synthetic experiments.

    The step size is larger than the optimizer default because the
    encoder here trains from scratch on a few thousand tokens.
    """

    epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-2

    def for_seed(self, seed: int) -> Schedule:
        return Schedule(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, seed=seed)


def config_for(train_corpus: Corpus, **overrides) -> ModelConfig:
    return ModelConfig(
        vocab=build_vocab(train_corpus),
        entity_types=list(train_corpus.scheme.entity_types),
        **overrides,
    )


@dataclass
class SeedRun:
    seed: int
    test: EvalReport
    two_pass_f1: float | None
    best_epoch: int
    seconds: float

    @property
    def f1(self) -> float:
        return self.test.f1


def run_seed(
    spec: SynthSpec,
    overrides: dict,
    schedule: ExperimentSchedule,
    seed: int,
    two_pass: bool = False,
) -> SeedRun:
    """Generate ``spec`` at ``seed``, train, and score the test split."""
    train_c, dev_c, test_c = generate(dataclasses.replace(spec, seed=seed))
    cfg = config_for(train_c, **overrides)
    t0 = time.perf_counter()
    res = train(train_c, dev_c, cfg, schedule.for_seed(seed))
    report = evaluate(test_c, predict(res.model, test_c))
    tp = None
    if two_pass:
        res.model.config = dataclasses.replace(cfg, inference_refine="two_pass")
        tp = evaluate(test_c, predict(res.model, test_c)).f1
        res.model.config = cfg
    return SeedRun(seed, report, tp, res.best_epoch, time.perf_counter() - t0)


@dataclass
class Comparison:
    """Two configurations trained on the same corpora and seeds."""

    name_a: str
    name_b: str
    runs_a: list[SeedRun] = field(default_factory=list)
    runs_b: list[SeedRun] = field(default_factory=list)

    @property
    def mean_a(self) -> float:
        return float(np.mean([r.f1 for r in self.runs_a]))

    @property
    def mean_b(self) -> float:
        return float(np.mean([r.f1 for r in self.runs_b]))

    @property
    def margin(self) -> float:
        """Mean F1 of ``a`` minus mean F1 of ``b``."""
        return self.mean_a - self.mean_b

    @property
    def seconds(self) -> float:
        return sum(r.seconds for r in self.runs_a + self.runs_b)

    def rows(self) -> list[dict]:
        out = []
        for a, b in zip(self.runs_a, self.runs_b):
            row = {"seed": a.seed, f"{self.name_a}_f1": a.f1, f"{self.name_b}_f1": b.f1}
            if a.two_pass_f1 is not None:
                row[f"{self.name_a}_two_pass_f1"] = a.two_pass_f1
            out.append(row)
        return out

    def to_dict(self) -> dict:
        return {
            "a": self.name_a,
            "b": self.name_b,
            "mean_a": self.mean_a,
            "mean_b": self.mean_b,
            "margin": self.margin,
            "seeds": self.rows(),
        }


def compare(
    spec: SynthSpec,
    a: tuple[str, dict],
    b: tuple[str, dict],
    seeds: Sequence[int],
    schedule: ExperimentSchedule | None = None,
    two_pass_a: bool = False,
    progress: Callable[[str], None] | None = None,
    schedule_a: ExperimentSchedule | None = None,
) -> Comparison:
    """Train arm ``a`` and arm ``b`` per seed; ``schedule_a`` overrides ``a``'s schedule."""
    schedule = schedule or ExperimentSchedule()
    cmp_ = Comparison(a[0], b[0])
    for seed in seeds:
        ra = run_seed(spec, a[1], schedule_a or schedule, seed, two_pass=two_pass_a)
        rb = run_seed(spec, b[1], schedule, seed)
        cmp_.runs_a.append(ra)
        cmp_.runs_b.append(rb)
        if progress:
            progress(f"seed {seed}: {a[0]} {ra.f1:.4f}  {b[0]} {rb.f1:.4f}")
    return cmp_


def ablation_spec(n_docs: int = 200, q: float = 0.3) -> SynthSpec:
    return SynthSpec(n_docs=n_docs, modifier_consistency=q)


def ablation(seeds=range(5), spec: SynthSpec | None = None, schedule=None, gamma: float = 0.3, progress=None) -> Comparison:
    """Full objective against the MLP-only objective (no label or distillation loss)."""
    spec = spec or ablation_spec()
    return compare(
        spec,
        ("full", {"lambdas": FULL_LAMBDAS, "gamma": gamma}),
        ("ablated", {"lambdas": ABLATED_LAMBDAS, "gamma": gamma}),
        seeds,
        schedule,
        two_pass_a=True,
        progress=progress,
    )


def context_spec(n_docs: int = 200) -> SynthSpec:
    # ambiguous entries make document context informative: only a first
    # mention carries the topic cue, repeats must be resolved from context
    return SynthSpec(n_docs=n_docs, repeat_entity_rate=0.5, ambiguous_fraction=0.5)


def document_batch_size(spec: SynthSpec, sentence_batch: int) -> int:
    """Documents per batch carrying about as many tokens as ``sentence_batch``
    sentences, so both context modes take the same number of optimizer steps."""
    per_doc = sum(spec.sentences_per_doc) / 2
    return max(1, round(sentence_batch / per_doc))


def context_comparison(seeds=range(5), spec: SynthSpec | None = None, schedule=None, progress=None) -> Comparison:
    spec = spec or context_spec()
    schedule = schedule or ExperimentSchedule()
    doc_schedule = dataclasses.replace(schedule, batch_size=document_batch_size(spec, schedule.batch_size))
    return compare(
        spec,
        ("document", {"context_mode": "document"}),
        ("sentence", {"context_mode": "sentence"}),
        seeds,
        schedule,
        progress=progress,
        schedule_a=doc_schedule,
    )


def consistency_anatomy(seeds=range(5), spec: SynthSpec | None = None) -> list[dict[int, float]]:
    """Mean test eCon per entity length, one table per seed."""
    spec = spec or SynthSpec(modifier_consistency=0.3)
    out = []
    for seed in seeds:
        train_c, _, test_c = generate(dataclasses.replace(spec, seed=seed))
        out.append(consistency_by_length(test_c, build_train_stats(train_c)))
    return out


def short_vs_long(table: dict[int, float]) -> tuple[float, float]:
    """(max eCon over lengths 1 and 2, mean eCon over lengths >= 4)."""
    short = [table[k] for k in (1, 2) if k in table]
    long_ = [v for k, v in table.items() if k >= 4]
    return max(short) if short else math.nan, float(np.mean(long_)) if long_ else math.nan


# ---------------------------------------------------------------------------
# gating threshold sweep


def gamma_grid(label_count: int) -> list[float]:
    """0.0, 0.1, ..., 0.9 and ln L."""
    return [round(0.1 * k, 1) for k in range(10)] + [math.log(label_count)]


@dataclass
class SweepRow:
    gamma: float
    report: EvalReport
    refined_tokens: int
    result: TrainResult

    def tsv(self) -> str:
        return f"{self.gamma!r}\t{self.report.precision!r}\t{self.report.recall!r}\t{self.report.f1!r}"


def gamma_sweep(
    train_c: Corpus,
    dev_c: Corpus | None,
    test_c: Corpus,
    base: ModelConfig,
    schedule: Schedule,
    grid: Sequence[float],
) -> list[SweepRow]:
    """Retrain once per threshold (same seed) and score ``test_c``."""
    rows = []
    for g in grid:
        cfg = dataclasses.replace(base, gamma=float(g))
        res = train(train_c, dev_c, cfg, schedule)
        report = evaluate(test_c, predict(res.model, test_c))
        refined = sum(h.refined_tokens for h in res.history)
        rows.append(SweepRow(float(g), report, refined, res))
    return rows


def no_refinement_run(train_c, dev_c, test_c, base: ModelConfig, schedule: Schedule) -> tuple[TrainResult, EvalReport]:
    """Same objective and seed with the gated combination switched off."""
    res = train(train_c, dev_c, base, schedule, gate=False)
    return res, evaluate(test_c, predict(res.model, test_c))


def refined_sets(model: ConnerModel, corpus: Corpus, grid: Sequence[float], batch_size: int = 8) -> list[list[np.ndarray]]:
    """Per batch, the refined-token mask (gold-span masks) at each threshold."""
    items = make_items(corpus, model.config.context_mode, model.config.max_window)
    saved = model.config
    out = []
    try:
        for k in range(0, len(items), batch_size):
            batch = make_batch(model, corpus, items[k:k + batch_size])
            masks = []
            for g in grid:
                model.config = dataclasses.replace(saved, gamma=float(g))
                trace, _ = _forward(model, batch, refine=True)
                masks.append(trace.refined_mask.copy())
            out.append(masks)
    finally:
        model.config = saved
    return out


def monotone_non_increasing(masks: Sequence[np.ndarray]) -> bool:
    """True when each mask is a subset of the previous one."""
    return all(not np.any(b & ~a) for a, b in zip(masks, masks[1:]))
