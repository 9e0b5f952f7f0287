"""Synthetic BIO corpora with a tunable modifier label-consistency knob.

Entities are drawn from a fixed lexicon of ``[modifier]* head`` strings so
that surface strings recur across documents and splits. Modifier tokens
also appear outside entities, at a rate chosen so that the share of
modifier occurrences that sit inside an entity converges to
``modifier_consistency``. Head tokens only ever occur inside entities.

A fraction of lexicon entries is type-ambiguous: their type is the
document's topic, which is announced by a cue token in front of the first
(non-repeated) mention only. Later repetitions carry no cue, so resolving
them needs document-level context.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .attributes import TrainStats, build_train_stats, compute_attribute, AttributeKind
from .corpus import Corpus, Document, EntitySpan, LabelScheme, decode_spans


@dataclass
class SynthSpec:
    seed: int = 0
    n_docs: int = 200
    sentences_per_doc: tuple[int, int] = (3, 6)
    slots_per_sentence: tuple[int, int] = (4, 8)
    entity_types: int = 2
    head_vocab: int = 40
    modifier_vocab: int = 15
    filler_vocab: int = 60
    modifier_consistency: float = 0.3
    entity_length_dist: dict[int, float] = field(default_factory=lambda: {1: 1.0, 2: 1.0, 3: 1.0, 4: 1.0})
    entity_rate: float = 0.3
    repeat_entity_rate: float = 0.3
    lexicon_size: int = 120
    ambiguous_fraction: float = 0.0
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)

    def __post_init__(self):
        self.sentences_per_doc = tuple(self.sentences_per_doc)
        self.slots_per_sentence = tuple(self.slots_per_sentence)
        self.split = tuple(float(x) for x in self.split)
        self.entity_length_dist = {int(k): float(v) for k, v in self.entity_length_dist.items()}
        self.validate()

    def validate(self):
        if min(self.head_vocab, self.modifier_vocab, self.filler_vocab) < 1:
            raise ValueError("vocabulary sizes must be >= 1")
        if self.entity_types < 1 or self.n_docs < 1 or self.lexicon_size < 1:
            raise ValueError("entity_types, n_docs and lexicon_size must be >= 1")
        for name in ("modifier_consistency", "repeat_entity_rate", "entity_rate", "ambiguous_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.entity_rate >= 1.0:
            raise ValueError("entity_rate must be < 1 so filler slots exist")
        if abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValueError(f"split fractions must be >= 0 and sum to 1, got {self.split}")
        if not self.entity_length_dist or min(self.entity_length_dist) < 1 or min(self.entity_length_dist.values()) < 0:
            raise ValueError("entity_length_dist needs lengths >= 1 and non-negative weights")
        for lo, hi in (self.sentences_per_doc, self.slots_per_sentence):
            if not 1 <= lo <= hi:
                raise ValueError("ranges must satisfy 1 <= lo <= hi")

    @property
    def type_names(self) -> list[str]:
        return [f"T{k}" for k in range(self.entity_types)]

    @property
    def scheme(self) -> LabelScheme:
        return LabelScheme(tuple(self.type_names))

    def to_json(self) -> str:
        d = asdict(self)
        d["entity_length_dist"] = {str(k): v for k, v in self.entity_length_dist.items()}
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        return cls(**json.loads(text))


def _names(prefix, n):
    width = max(3, len(str(n - 1)))
    return [f"{prefix}_{i:0{width}d}" for i in range(n)]


@dataclass
class LexiconEntry:
    tokens: tuple[str, ...]
    etype: int | None  # None: takes the document topic


def build_lexicon(spec: SynthSpec, rng: np.random.Generator) -> list[LexiconEntry]:
    heads, mods = _names("head", spec.head_vocab), _names("mod", spec.modifier_vocab)
    lengths = sorted(spec.entity_length_dist)
    w = np.array([spec.entity_length_dist[k] for k in lengths])
    w = w / w.sum()
    seen, entries = set(), []
    attempts = 0
    while len(entries) < spec.lexicon_size:
        attempts += 1
        if attempts > 100 * spec.lexicon_size:
            raise ValueError("cannot build a lexicon of unique entries; enlarge the vocabularies")
        k = int(lengths[rng.choice(len(lengths), p=w)])
        if spec.modifier_consistency > 0:
            prefix = [mods[j] for j in rng.integers(0, len(mods), k - 1)]
        else:
            prefix = [heads[j] for j in rng.integers(0, len(heads), k - 1)]
        toks = tuple(prefix + [heads[int(rng.integers(len(heads)))]])
        if toks in seen:
            continue
        seen.add(toks)
        etype = None if rng.random() < spec.ambiguous_fraction else int(rng.integers(spec.entity_types))
        entries.append(LexiconEntry(toks, etype))
    return entries


def _expected_modifier_counts(spec: SynthSpec, lexicon: list[LexiconEntry]) -> np.ndarray:
    """Expected occurrences of each modifier per entity mention."""
    pools, length_p = _length_pools(spec, lexicon)
    counts = np.zeros(spec.modifier_vocab)
    for pool, w in zip(pools, length_p):
        for i in pool:
            for t in lexicon[i].tokens:
                if t.startswith("mod_"):
                    counts[int(t[4:])] += w / len(pool)
    return counts


def filler_modifier_weights(spec: SynthSpec, lexicon: list[LexiconEntry]) -> np.ndarray:
    """Sampling weights for out-of-entity modifiers, proportional to each
    modifier's expected frequency inside entities so every modifier's own
    ratio converges to the target, not just the pooled one."""
    counts = _expected_modifier_counts(spec, lexicon)
    if counts.sum() == 0:
        return np.full(spec.modifier_vocab, 1.0 / spec.modifier_vocab)
    return counts / counts.sum()


def filler_modifier_rate(spec: SynthSpec, lexicon: list[LexiconEntry]) -> float:
    """Mean number of modifiers per filler slot that yields the target ratio."""
    q = spec.modifier_consistency
    inside = spec.entity_rate * _expected_modifier_counts(spec, lexicon).sum()
    if q >= 1.0 or inside == 0:
        return 0.0
    if q == 0.0:
        return 1.0
    return inside * (1 - q) / (q * (1 - spec.entity_rate))


def _length_pools(spec: SynthSpec, lexicon: list[LexiconEntry]):
    """Lexicon indices grouped by length, with renormalized length weights."""
    groups: dict[int, list[int]] = {}
    for i, e in enumerate(lexicon):
        groups.setdefault(len(e.tokens), []).append(i)
    lengths = [k for k in sorted(groups) if spec.entity_length_dist.get(k, 0.0) > 0]
    w = np.array([spec.entity_length_dist[k] for k in lengths])
    return [groups[k] for k in lengths], w / w.sum()


@dataclass
class GeneratedDoc:
    document: Document
    spans: list[EntitySpan]


def generate_document(
    spec: SynthSpec, lexicon, doc_index: int, doc_id: str, rate: float, mod_weights: np.ndarray
) -> GeneratedDoc:
    rng = np.random.default_rng([spec.seed, 1, doc_index])
    scheme = spec.scheme
    mods, fills = _names("mod", spec.modifier_vocab), _names("fill", spec.filler_vocab)
    cues = [f"cue_{t}" for t in spec.type_names]
    topic = int(rng.integers(spec.entity_types))
    by_length, length_p = _length_pools(spec, lexicon)
    tokens, labels, bounds, spans = [], [], [], []
    mentioned: list[tuple[int, int]] = []  # (lexicon index, type)
    n_sent = int(rng.integers(spec.sentences_per_doc[0], spec.sentences_per_doc[1] + 1))
    for _ in range(n_sent):
        bounds.append(len(tokens))
        n_slots = int(rng.integers(spec.slots_per_sentence[0], spec.slots_per_sentence[1] + 1))
        for _ in range(n_slots):
            if rng.random() < spec.entity_rate:
                if mentioned and rng.random() < spec.repeat_entity_rate:
                    idx, etype = mentioned[int(rng.integers(len(mentioned)))]
                else:
                    # length first, then an entry of that length, so the
                    # realized length histogram follows entity_length_dist
                    pool = by_length[int(rng.choice(len(by_length), p=length_p))]
                    idx = pool[int(rng.integers(len(pool)))]
                    entry = lexicon[idx]
                    etype = topic if entry.etype is None else entry.etype
                    if entry.etype is None:
                        tokens.append(cues[topic])
                        labels.append(0)
                    mentioned.append((idx, etype))
                toks = lexicon[idx].tokens
                tname = spec.type_names[etype]
                spans.append(EntitySpan(doc_id, len(tokens), len(tokens) + len(toks), tname))
                tokens.extend(toks)
                labels.extend([scheme.begin(tname)] + [scheme.inside(tname)] * (len(toks) - 1))
            else:
                n_mod = int(rng.poisson(rate)) if rate > 0 else 0
                slot = [fills[int(rng.integers(len(fills)))]] + [mods[j] for j in rng.choice(len(mods), n_mod, p=mod_weights)]
                if n_mod and rng.random() < 0.5:
                    slot = slot[1:] + slot[:1]
                tokens.extend(slot)
                labels.extend([0] * len(slot))
    return GeneratedDoc(Document(doc_id, tokens, bounds, labels), spans)


def generate_with_spans(spec: SynthSpec) -> tuple[list[GeneratedDoc], list[Corpus]]:
    spec.validate()
    lex_rng = np.random.default_rng([spec.seed, 0])
    lexicon = build_lexicon(spec, lex_rng)
    rate = filler_modifier_rate(spec, lexicon)
    weights = filler_modifier_weights(spec, lexicon)
    docs = [generate_document(spec, lexicon, k, f"synth{k:05d}", rate, weights) for k in range(spec.n_docs)]
    n_train = int(round(spec.split[0] * spec.n_docs))
    n_dev = int(round(spec.split[1] * spec.n_docs))
    parts = (docs[:n_train], docs[n_train:n_train + n_dev], docs[n_train + n_dev:])
    corpora = [Corpus([g.document for g in part], spec.scheme) for part in parts]
    return docs, corpora


def generate(spec: SynthSpec) -> tuple[Corpus, Corpus, Corpus]:
    """Deterministic ``(train, dev, test)`` corpora for ``spec``."""
    _, (train, dev, test) = generate_with_spans(spec)
    return train, dev, test


def modifier_tokens(spec: SynthSpec) -> list[str]:
    return _names("mod", spec.modifier_vocab)


@dataclass
class RealizedSummary:
    modifier_tcon: dict[str, float]
    length_histogram: dict[int, int]
    mean_edensity: float
    mean_odensity: float

    @property
    def mean_modifier_tcon(self) -> float:
        vals = list(self.modifier_tcon.values())
        return float(np.mean(vals)) if vals else math.nan

    def to_dict(self) -> dict:
        return {
            "modifier_tcon": self.modifier_tcon,
            "mean_modifier_tcon": self.mean_modifier_tcon,
            "length_histogram": {str(k): v for k, v in sorted(self.length_histogram.items())},
            "mean_edensity": self.mean_edensity,
            "mean_odensity": self.mean_odensity,
        }


def measure(corpus: Corpus, stats: TrainStats | None = None, prefix: str = "mod_") -> RealizedSummary:
    """Realized modifier consistency (on ``corpus`` itself), entity-length
    histogram, and mean entity/OOV densities (OOV against ``stats``)."""
    own = build_train_stats(corpus)
    stats = stats or own
    tcon = {t: own.token_consistency(t) for t in sorted(own.vocabulary) if t.startswith(prefix)}
    hist: dict[int, int] = {}
    eden, oden = [], []
    for doc in corpus:
        for sp in decode_spans(doc.gold_labels, corpus.scheme, doc.doc_id):
            hist[len(sp)] = hist.get(len(sp), 0) + 1
        if len(doc):
            eden.append(compute_attribute(AttributeKind.eDen, 0, doc, stats, corpus.scheme))
            oden.append(compute_attribute(AttributeKind.oDen, 0, doc, stats, corpus.scheme))
    return RealizedSummary(
        tcon,
        hist,
        float(np.mean(eden)) if eden else 0.0,
        float(np.mean(oden)) if oden else 0.0,
    )
