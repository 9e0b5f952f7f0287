"""Interpretable attribute functions over tokens and entity spans, bucketed
performance reports and label-consistency analyses."""

from __future__ import annotations

import enum
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Sequence

from .corpus import Corpus, Document, EntitySpan, EvalReport, decode_spans


class AttributeKind(str, enum.Enum):
    tLen = "tLen"
    eLen = "eLen"
    dLen = "dLen"
    eDen = "eDen"
    oDen = "oDen"
    tFre = "tFre"
    eFre = "eFre"
    tCon = "tCon"
    eCon = "eCon"

    @property
    def is_token(self) -> bool:
        return self in TOKEN_KINDS


TOKEN_KINDS = frozenset({AttributeKind.tLen, AttributeKind.tFre, AttributeKind.tCon})


def surface(tokens: Sequence[str], start: int, end: int) -> str:
    return " ".join(tokens[start:end])


@dataclass
class TrainStats:
    token_occurrences: Counter = field(default_factory=Counter)
    token_entity_occurrences: Counter = field(default_factory=Counter)
    entity_string_occurrences: Counter = field(default_factory=Counter)
    entity_string_as_entity: Counter = field(default_factory=Counter)
    vocabulary: set = field(default_factory=set)
    total_tokens: int = 0
    total_entities: int = 0
    entity_tokens: int = 0
    pooled_consistency: bool = False

    def token_consistency(self, token: str) -> float:
        hits = self.token_entity_occurrences.get(token, 0)
        if self.pooled_consistency:
            return hits / self.entity_tokens if self.entity_tokens else 0.0
        n = self.token_occurrences.get(token, 0)
        return hits / n if n else 0.0

    def entity_consistency(self, text: str) -> float:
        hits = self.entity_string_as_entity.get(text, 0)
        if self.pooled_consistency:
            return hits / self.total_entities if self.total_entities else 0.0
        n = self.entity_string_occurrences.get(text, 0)
        return hits / n if n else 0.0


def build_train_stats(train: Corpus, pooled_consistency: bool = False) -> TrainStats:
    """Counting tables behind the training-set-dependent attributes.

    ``entity_string_occurrences`` counts every (possibly overlapping)
    occurrence of a gold entity's surface string inside any training
    document, whether or not it is annotated there.
    """
    stats = TrainStats(pooled_consistency=pooled_consistency)
    lengths = set()
    for doc in train:
        stats.token_occurrences.update(doc.tokens)
        stats.total_tokens += len(doc)
        for sp in decode_spans(doc.gold_labels, train.scheme, doc.doc_id):
            stats.entity_string_as_entity[surface(doc.tokens, sp.start, sp.end)] += 1
            stats.token_entity_occurrences.update(doc.tokens[sp.start:sp.end])
            stats.total_entities += 1
            stats.entity_tokens += len(sp)
            lengths.add(len(sp))
    stats.vocabulary = set(stats.token_occurrences)
    targets = stats.entity_string_as_entity
    for doc in train:
        for k in lengths:
            for i in range(len(doc) - k + 1):
                s = surface(doc.tokens, i, i + k)
                if s in targets:
                    stats.entity_string_occurrences[s] += 1
    return stats


def _entity_token_count(doc: Document, scheme) -> int:
    return sum(len(sp) for sp in decode_spans(doc.gold_labels, scheme))


def compute_attribute(kind, target, doc: Document, stats: TrainStats, scheme=None) -> float:
    """Value of one attribute for a token position or an entity span.

    ``target`` is an ``int`` token index (token attributes) or an
    :class:`EntitySpan`; document attributes accept either. ``scheme`` is
    needed only for ``eDen``.
    """
    kind = AttributeKind(kind)
    n = len(doc)
    if isinstance(target, EntitySpan):
        if not 0 <= target.start < target.end <= n:
            raise IndexError(f"span {target} outside document of length {n}")
        if kind.is_token:
            raise TypeError(f"{kind.value} needs a token position, got a span")
    else:
        if not 0 <= target < n:
            raise IndexError(f"token {target} outside document of length {n}")
        if kind in (AttributeKind.eLen, AttributeKind.eFre, AttributeKind.eCon):
            raise TypeError(f"{kind.value} needs an entity span")

    if kind is AttributeKind.tLen:
        return float(len(doc.tokens[target]))
    if kind is AttributeKind.eLen:
        return float(len(target))
    if kind is AttributeKind.dLen:
        return float(n)
    if kind is AttributeKind.eDen:
        if scheme is None:
            raise ValueError("eDen needs the label scheme")
        return _entity_token_count(doc, scheme) / n
    if kind is AttributeKind.oDen:
        return sum(t not in stats.vocabulary for t in doc.tokens) / n
    if kind is AttributeKind.tFre:
        tok = doc.tokens[target]
        return stats.token_occurrences.get(tok, 0) / stats.total_tokens if stats.total_tokens else 0.0
    if kind is AttributeKind.tCon:
        return stats.token_consistency(doc.tokens[target])
    text = surface(doc.tokens, target.start, target.end)
    if kind is AttributeKind.eFre:
        hits = stats.entity_string_as_entity.get(text, 0)
        return hits / stats.total_entities if stats.total_entities else 0.0
    return stats.entity_consistency(text)


def consistency_by_length(test: Corpus, stats: TrainStats) -> dict[int, float]:
    """Mean entity consistency of test gold spans, grouped by span length."""
    sums: dict[int, float] = defaultdict(float)
    counts: dict[int, int] = defaultdict(int)
    for doc in test:
        for sp in decode_spans(doc.gold_labels, test.scheme, doc.doc_id):
            sums[len(sp)] += stats.entity_consistency(surface(doc.tokens, sp.start, sp.end))
            counts[len(sp)] += 1
    return {k: sums[k] / counts[k] for k in sorted(counts)}


# ---------------------------------------------------------------------------
# bucketing


@dataclass
class Bucket:
    lo: float
    hi: float
    count: int
    report: EvalReport
    closed: bool = False

    def to_dict(self) -> dict:
        return {
            "lo": self.lo,
            "hi": self.hi,
            "count": self.count,
            "precision": self.report.precision,
            "recall": self.report.recall,
            "f1": self.report.f1,
        }


@dataclass
class BucketReport:
    attribute: AttributeKind
    buckets: list[Bucket]
    requested: int

    def to_json(self) -> str:
        return json.dumps(
            {"attribute": self.attribute.value, "buckets": [b.to_dict() for b in self.buckets]},
            indent=2,
        )

    def to_text(self) -> str:
        lines = [f"attribute {self.attribute.value}: {len(self.buckets)} bucket(s), {self.requested} requested"]
        lines.append(f"{'interval':<28}{'count':>8}{'P':>8}{'R':>8}{'F1':>8}")
        for b in self.buckets:
            iv = f"[{b.lo:.4g}, {b.hi:.4g}{']' if b.closed else ')'}"
            lines.append(
                f"{iv:<28}{b.count:>8d}{b.report.precision:>8.4f}"
                f"{b.report.recall:>8.4f}{b.report.f1:>8.4f}"
            )
        return "\n".join(lines) + "\n"


def equal_frequency_cuts(values: Sequence[float], n_buckets: int) -> list[float]:
    """Lower edges of equal-frequency buckets; tied values never straddle a cut."""
    if n_buckets < 1:
        raise ValueError("n_buckets must be >= 1")
    v = sorted(values)
    if not v:
        return []
    n = len(v)
    starts = [0]
    for b in range(1, n_buckets):
        c = (b * n) // n_buckets
        while 0 < c < n and v[c] == v[c - 1]:
            c += 1
        if c < n and c > starts[-1]:
            starts.append(c)
    return [v[s] for s in starts]


def _bucket_of(x: float, edges: list[float]) -> int:
    k = 0
    for j, lo in enumerate(edges):
        if x >= lo:
            k = j
    return k


def bucket_performance(
    kind,
    gold: Corpus,
    predictions: Sequence[Sequence[int]],
    stats: TrainStats,
    n_buckets: int,
) -> BucketReport:
    """Per-bucket scores for one attribute.

    Entity and document attributes partition gold spans; predicted spans
    fall into the bucket their own attribute value lands in, so precision
    and recall stay exact-match entity scores. Token attributes partition
    tokens and score token-level entity-label agreement (a token is
    "predicted" when its predicted label is not O, "correct" when it also
    equals the gold label).
    """
    kind = AttributeKind(kind)
    if len(predictions) != len(gold.documents):
        raise ValueError("one prediction sequence per document required")
    scheme = gold.scheme
    if kind.is_token:
        items = []
        for doc, pred in zip(gold, predictions):
            for i in range(len(doc)):
                items.append((compute_attribute(kind, i, doc, stats, scheme), doc.gold_labels[i], pred[i]))
        edges = equal_frequency_cuts([x for x, _, _ in items], n_buckets)
        reports = [EvalReport() for _ in edges]
        counts = [0] * len(edges)
        for x, g, p in items:
            k = _bucket_of(x, edges)
            counts[k] += 1
            prf = reports[k].micro
            prf.gold += g != 0
            prf.predicted += p != 0
            prf.correct += g != 0 and g == p
        values = sorted(x for x, _, _ in items)
    else:
        golds, preds = [], []
        for doc, pred in zip(gold, predictions):
            if len(pred) != len(doc):
                raise ValueError(f"document {doc.doc_id}: prediction length mismatch")
            g_spans = decode_spans(doc.gold_labels, scheme, doc.doc_id)
            p_spans = decode_spans(pred, scheme, doc.doc_id)
            golds += [(compute_attribute(kind, s, doc, stats, scheme), s) for s in g_spans]
            preds += [(compute_attribute(kind, s, doc, stats, scheme), s) for s in p_spans]
        edges = equal_frequency_cuts([x for x, _ in golds], n_buckets)
        if not edges:
            edges = [min((x for x, _ in preds), default=0.0)]
        g_by = [[] for _ in edges]
        p_by = [[] for _ in edges]
        for x, s in golds:
            g_by[_bucket_of(x, edges)].append(s)
        for x, s in preds:
            p_by[_bucket_of(x, edges)].append(s)
        reports = []
        for gs, ps in zip(g_by, p_by):
            rep = EvalReport()
            rep.add(gs, ps)
            reports.append(rep)
        counts = [len(gs) for gs in g_by]
        values = sorted(x for x, _ in golds)
    buckets = []
    for k, lo in enumerate(edges):
        hi = edges[k + 1] if k + 1 < len(edges) else (values[-1] if values else lo)
        buckets.append(Bucket(lo, hi, counts[k], reports[k], closed=k + 1 == len(edges)))
    return BucketReport(kind, buckets, n_buckets)


# ---------------------------------------------------------------------------
# modifier consistency table


@dataclass
class ModifierRow:
    token: str
    train_tcon: float
    test_tcon: float
    agreement: float
    test_occurrences: int
    absent: bool = False


def modifier_report(
    tokens: Sequence[str],
    train: Corpus,
    test: Corpus,
    predictions: Sequence[Sequence[int]],
    train_stats: TrainStats | None = None,
) -> list[ModifierRow]:
    """Train/test token consistency plus the fraction of test occurrences
    whose predicted label equals the gold label."""
    if not tokens:
        raise ValueError("tokens must be non-empty")
    train_stats = train_stats or build_train_stats(train)
    test_stats = build_train_stats(test)
    rows = []
    for tok in tokens:
        hits = total = 0
        for doc, pred in zip(test, predictions):
            for i, t in enumerate(doc.tokens):
                if t == tok:
                    total += 1
                    hits += pred[i] == doc.gold_labels[i]
        absent = tok not in train_stats.vocabulary and tok not in test_stats.vocabulary
        rows.append(
            ModifierRow(
                tok,
                train_stats.token_consistency(tok),
                test_stats.token_consistency(tok),
                hits / total if total else 0.0,
                total,
                absent,
            )
        )
    return rows


def format_modifier_table(rows: list[ModifierRow]) -> str:
    width = max(10, *(len(r.token) + 2 for r in rows))
    head = f"{'criteria':<16}" + "".join(f"{r.token:>{width}}" for r in rows)
    lines = [head]
    lines.append(f"{'train tCon':<16}" + "".join(f"{r.train_tcon:>{width}.2f}" for r in rows))
    lines.append(f"{'test tCon':<16}" + "".join(f"{r.test_tcon:>{width}.2f}" for r in rows))
    lines.append(f"{'agreement':<16}" + "".join(f"{100 * r.agreement:>{width - 1}.0f}%" for r in rows))
    flagged = [r.token for r in rows if r.absent]
    if flagged:
        lines.append("absent from both splits: " + ", ".join(flagged))
    return "\n".join(lines) + "\n"
