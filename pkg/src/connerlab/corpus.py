"""BIO-tagged document corpora: CoNLL-style I/O, span conversion and
exact-match entity scoring."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

DOCSTART = "-DOCSTART-"
OUTSIDE = "O"


class CorpusError(ValueError):
    """Raised for malformed corpus input or inconsistent label sequences."""


@dataclass(frozen=True)
class LabelScheme:
    """BIO tag set over an ordered tuple of entity types.

    Id 0 is ``O``; type ``k`` owns ``B-`` at ``2k+1`` and ``I-`` at ``2k+2``.
    """

    entity_types: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.entity_types)) != len(self.entity_types):
            raise CorpusError(f"duplicate entity types in {self.entity_types}")
        for t in self.entity_types:
            if not t or any(c.isspace() for c in t):
                raise CorpusError(f"invalid entity type name {t!r}")
        object.__setattr__(self, "entity_types", tuple(self.entity_types))

    @property
    def label_count(self) -> int:
        return 2 * len(self.entity_types) + 1

    @property
    def labels(self) -> list[str]:
        out = [OUTSIDE]
        for t in self.entity_types:
            out += [f"B-{t}", f"I-{t}"]
        return out

    def label_id(self, name: str) -> int:
        if name == OUTSIDE:
            return 0
        prefix, _, etype = name.partition("-")
        if prefix not in ("B", "I") or etype not in self.entity_types:
            raise KeyError(name)
        k = self.entity_types.index(etype)
        return 2 * k + 1 if prefix == "B" else 2 * k + 2

    def label_name(self, label: int) -> str:
        if not 0 <= label < self.label_count:
            raise KeyError(label)
        return self.labels[label]

    def begin(self, etype: str) -> int:
        return 2 * self.entity_types.index(etype) + 1

    def inside(self, etype: str) -> int:
        return 2 * self.entity_types.index(etype) + 2

    def split(self, label: int) -> tuple[str, str | None]:
        """``(prefix, type)`` for a label id; ``("O", None)`` for outside."""
        if label == 0:
            return OUTSIDE, None
        k, r = divmod(label - 1, 2)
        return ("B" if r == 0 else "I"), self.entity_types[k]


@dataclass
class Document:
    doc_id: str
    tokens: list[str]
    sentence_boundaries: list[int]
    gold_labels: list[int]

    def __post_init__(self):
        if len(self.tokens) != len(self.gold_labels):
            raise CorpusError(
                f"document {self.doc_id}: {len(self.tokens)} tokens but "
                f"{len(self.gold_labels)} labels"
            )
        b = self.sentence_boundaries
        if self.tokens:
            if not b or b[0] != 0 or any(x >= y for x, y in zip(b, b[1:])) or b[-1] >= len(self.tokens):
                raise CorpusError(f"document {self.doc_id}: bad sentence boundaries {b}")
        elif b:
            raise CorpusError(f"document {self.doc_id}: boundaries on empty document")

    def __len__(self):
        return len(self.tokens)

    def sentences(self) -> list[tuple[int, int]]:
        """Half-open ``(start, end)`` token ranges, one per sentence."""
        ends = list(self.sentence_boundaries[1:]) + [len(self.tokens)]
        return list(zip(self.sentence_boundaries, ends))


@dataclass
class Corpus:
    documents: list[Document]
    scheme: LabelScheme

    def __post_init__(self):
        seen = set()
        for doc in self.documents:
            if doc.doc_id in seen:
                raise CorpusError(f"duplicate doc_id {doc.doc_id}")
            seen.add(doc.doc_id)
            for lab in doc.gold_labels:
                if not 0 <= lab < self.scheme.label_count:
                    raise CorpusError(f"document {doc.doc_id}: label id {lab} outside scheme")

    def __len__(self):
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents)

    @property
    def n_tokens(self) -> int:
        return sum(len(d) for d in self.documents)


@dataclass(frozen=True, order=True)
class EntitySpan:
    doc_id: str
    start: int
    end: int
    entity_type: str

    def __len__(self):
        return self.end - self.start


# ---------------------------------------------------------------------------
# CoNLL I/O


def parse_conll(stream: TextIO | str, scheme: LabelScheme, doc_prefix: str = "doc") -> Corpus:
    """Read a TAB-separated token/label file into a :class:`Corpus`.

    ``stream`` may be an open text file or a string. Token lines before the
    first ``-DOCSTART-`` form an implicit first document.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)

    documents: list[Document] = []
    tokens: list[str] = []
    labels: list[int] = []
    bounds: list[int] = []
    in_doc = False
    sentence_open = False

    def flush():
        doc_id = f"{doc_prefix}{len(documents):05d}"
        documents.append(Document(doc_id, tokens[:], bounds[:], labels[:]))

    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            sentence_open = False
            continue
        cols = line.split("\t")
        if cols[0] == DOCSTART:
            if in_doc or tokens:
                flush()
            tokens, labels, bounds = [], [], []
            in_doc = True
            sentence_open = False
            continue
        if len(cols) != 2:
            raise CorpusError(f"line {lineno}: expected 2 TAB-separated columns, got {len(cols)}")
        tok, lab = cols
        if not tok or any(c.isspace() for c in tok):
            raise CorpusError(f"line {lineno}: token {tok!r} is empty or contains whitespace")
        try:
            lab_id = scheme.label_id(lab)
        except KeyError:
            raise CorpusError(f"line {lineno}: unknown label {lab!r}") from None
        if not sentence_open:
            bounds.append(len(tokens))
            sentence_open = True
        tokens.append(tok)
        labels.append(lab_id)
    if in_doc or tokens:
        flush()
    return Corpus(documents, scheme)


def read_conll(path, scheme: LabelScheme) -> Corpus:
    with open(path, encoding="utf-8") as f:
        try:
            return parse_conll(f, scheme)
        except CorpusError as e:
            raise CorpusError(f"{path}: {e}") from None


def scan_entity_types(stream: TextIO | str) -> set[str]:
    """Entity types named by ``B-``/``I-`` labels in a CoNLL stream."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    types = set()
    for lineno, raw in enumerate(stream, start=1):
        cols = raw.rstrip("\r\n").split("\t")
        if not raw.strip() or cols[0] == DOCSTART:
            continue
        if len(cols) != 2:
            raise CorpusError(f"line {lineno}: expected 2 TAB-separated columns, got {len(cols)}")
        lab = cols[1]
        if lab != "O":
            if lab[:2] not in ("B-", "I-") or len(lab) < 3:
                raise CorpusError(f"line {lineno}: unknown label {lab!r}")
            types.add(lab[2:])
    return types


def write_conll(corpus: Corpus, stream: TextIO | None = None) -> str:
    """Serialize to the canonical CoNLL layout; returns the text as well."""
    out = io.StringIO()
    names = corpus.scheme.labels
    for doc in corpus.documents:
        out.write(f"{DOCSTART}\n\n")
        for start, end in doc.sentences():
            for i in range(start, end):
                out.write(f"{doc.tokens[i]}\t{names[doc.gold_labels[i]]}\n")
            out.write("\n")
    text = out.getvalue()
    if stream is not None:
        stream.write(text)
    return text


# ---------------------------------------------------------------------------
# spans


def decode_spans(
    labels: Sequence[int], scheme: LabelScheme, doc_id: str = "", strict: bool = False
) -> list[EntitySpan]:
    """Maximal BIO chunks, sorted by start.

    In the default lenient mode an ``I-X`` after ``O``, at position 0, or
    after a chunk of another type opens a new ``X`` chunk (conlleval
    behaviour). ``strict=True`` raises on those transitions instead.
    """
    spans = []
    cur_type = None
    cur_start = 0
    for i, lab in enumerate(labels):
        prefix, etype = scheme.split(lab)
        if prefix == "I" and cur_type == etype:
            continue
        if cur_type is not None:
            spans.append(EntitySpan(doc_id, cur_start, i, cur_type))
            cur_type = None
        if prefix == "I" and strict:
            raise CorpusError(f"ill-formed I-{etype} at position {i}")
        if prefix != OUTSIDE:
            cur_type, cur_start = etype, i
    if cur_type is not None:
        spans.append(EntitySpan(doc_id, cur_start, len(labels), cur_type))
    return spans


def encode_spans(spans: Iterable[EntitySpan], length: int, scheme: LabelScheme) -> list[int]:
    labels = [0] * length
    for sp in sorted(spans, key=lambda s: s.start):
        if not 0 <= sp.start < sp.end <= length:
            raise CorpusError(f"span {sp} outside [0, {length})")
        if any(labels[sp.start:sp.end]):
            raise CorpusError(f"span {sp} overlaps another span")
        labels[sp.start] = scheme.begin(sp.entity_type)
        for i in range(sp.start + 1, sp.end):
            labels[i] = scheme.inside(sp.entity_type)
    return labels


def gold_spans(doc: Document, scheme: LabelScheme) -> list[EntitySpan]:
    return decode_spans(doc.gold_labels, scheme, doc.doc_id)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class PRF:
    gold: int = 0
    predicted: int = 0
    correct: int = 0

    @property
    def precision(self) -> float:
        if self.predicted == 0:
            return 1.0 if self.gold == 0 else 0.0
        return self.correct / self.predicted

    @property
    def recall(self) -> float:
        if self.gold == 0:
            return 1.0 if self.predicted == 0 else 0.0
        return self.correct / self.gold

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "gold": self.gold,
            "predicted": self.predicted,
            "correct": self.correct,
        }


@dataclass
class EvalReport:
    micro: PRF = field(default_factory=PRF)
    per_type: dict[str, PRF] = field(default_factory=dict)

    @property
    def precision(self) -> float:
        return self.micro.precision

    @property
    def recall(self) -> float:
        return self.micro.recall

    @property
    def f1(self) -> float:
        return self.micro.f1

    def add(self, gold: Iterable[EntitySpan], pred: Iterable[EntitySpan]) -> None:
        gold, pred = set(gold), set(pred)
        hits = gold & pred
        for bucket_spans, attr in ((gold, "gold"), (pred, "predicted"), (hits, "correct")):
            setattr(self.micro, attr, getattr(self.micro, attr) + len(bucket_spans))
            for sp in bucket_spans:
                prf = self.per_type.setdefault(sp.entity_type, PRF())
                setattr(prf, attr, getattr(prf, attr) + 1)

    def merge(self, other: "EvalReport") -> "EvalReport":
        out = EvalReport()
        for rep in (self, other):
            for attr in ("gold", "predicted", "correct"):
                setattr(out.micro, attr, getattr(out.micro, attr) + getattr(rep.micro, attr))
                for t, prf in rep.per_type.items():
                    dst = out.per_type.setdefault(t, PRF())
                    setattr(dst, attr, getattr(dst, attr) + getattr(prf, attr))
        return out

    def to_dict(self) -> dict:
        return {
            "micro": self.micro.to_dict(),
            "per_type": {t: self.per_type[t].to_dict() for t in sorted(self.per_type)},
        }


def evaluate(gold: Corpus, predictions: Sequence[Sequence[int]], strict: bool = False) -> EvalReport:
    """Exact-match entity scoring, micro-averaged over all documents.

    ``predictions[i]`` is the label-id sequence for ``gold.documents[i]``.
    """
    if len(predictions) != len(gold.documents):
        raise CorpusError(f"{len(predictions)} predictions for {len(gold.documents)} documents")
    report = EvalReport()
    for doc, pred in zip(gold.documents, predictions):
        if len(pred) != len(doc):
            raise CorpusError(
                f"document {doc.doc_id}: prediction length {len(pred)} != {len(doc)} tokens"
            )
        report.add(
            decode_spans(doc.gold_labels, gold.scheme, doc.doc_id, strict=strict),
            decode_spans(pred, gold.scheme, doc.doc_id, strict=strict),
        )
    for t in gold.scheme.entity_types:
        report.per_type.setdefault(t, PRF())
    return report


def format_report(report: EvalReport) -> str:
    lines = [f"{'type':<16}{'P':>8}{'R':>8}{'F1':>8}{'gold':>8}{'pred':>8}{'corr':>8}"]
    rows = [(t, report.per_type[t]) for t in sorted(report.per_type)] + [("micro", report.micro)]
    for name, prf in rows:
        lines.append(
            f"{name:<16}{prf.precision:>8.4f}{prf.recall:>8.4f}{prf.f1:>8.4f}"
            f"{prf.gold:>8d}{prf.predicted:>8d}{prf.correct:>8d}"
        )
    return "\n".join(lines) + "\n"

