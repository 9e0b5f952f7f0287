import io
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from connerlab.corpus import (
    Corpus,
    CorpusError,
    Document,
    EntitySpan,
    LabelScheme,
    decode_spans,
    encode_spans,
    evaluate,
    parse_conll,
    write_conll,
)

DATA = Path(__file__).parent / "data"
SCHEME = LabelScheme(("D", "C"))
O, BD, ID, BC, IC = 0, 1, 2, 3, 4


def brute_force_spans(labels, scheme, doc_id=""):
    """All (i, j, X) that form a maximal lenient chunk, by enumeration."""
    n = len(labels)
    names = [scheme.label_name(x) for x in labels]
    out = set()
    for i in range(n):
        for j in range(i + 1, n + 1):
            head = names[i]
            if head == "O":
                continue
            t = head[2:]
            starts = head.startswith("B-") or i == 0 or names[i - 1] not in (f"B-{t}", f"I-{t}")
            body = all(names[k] == f"I-{t}" for k in range(i + 1, j))
            closed = j == n or names[j] != f"I-{t}"
            if starts and body and closed:
                out.add(EntitySpan(doc_id, i, j, t))
    return out


def line_count_oracle(text):
    """Count documents, sentences and tokens by scanning raw lines."""
    docs = sents = toks = 0
    in_sent = False
    for line in text.splitlines():
        if line.startswith("-DOCSTART-"):
            docs += 1
            in_sent = False
        elif line.strip() == "":
            in_sent = False
        else:
            toks += 1
            if not in_sent:
                sents += 1
                in_sent = True
    return docs, sents, toks


class TestLabelScheme:
    def test_ids(self):
        assert SCHEME.label_count == 5
        assert SCHEME.labels == ["O", "B-D", "I-D", "B-C", "I-C"]
        for k, name in enumerate(SCHEME.labels):
            assert SCHEME.label_id(name) == k
            assert SCHEME.label_name(k) == name

    def test_unknown_label(self):
        with pytest.raises(KeyError):
            SCHEME.label_id("B-X")

    def test_duplicate_types(self):
        with pytest.raises(CorpusError):
            LabelScheme(("A", "A"))


class TestParse:
    def test_empty(self):
        assert len(parse_conll("", SCHEME)) == 0

    def test_single_block(self):
        scheme = LabelScheme(("Anatomic",))
        c = parse_conll("-DOCSTART-\n\ncolon\tB-Anatomic\ncancer\tO\n", scheme)
        assert len(c) == 1
        doc = c.documents[0]
        assert doc.tokens == ["colon", "cancer"]
        assert doc.gold_labels == [scheme.label_id("B-Anatomic"), 0]

    def test_fixture_counts_match_line_oracle(self):
        text = (DATA / "three_docs.conll").read_text(encoding="utf-8")
        c = parse_conll(text, LabelScheme(("Disease",)))
        docs, sents, toks = line_count_oracle(text)
        assert (docs, sents, toks) == (3, 6, 37)
        assert len(c) == docs
        assert sum(len(d.sentence_boundaries) for d in c) == sents
        assert c.n_tokens == toks

    def test_unknown_label_reports_line(self):
        with pytest.raises(CorpusError, match="line 4"):
            parse_conll("-DOCSTART-\n\na\tO\nb\tB-Nope\n", SCHEME)

    def test_ragged_line(self):
        with pytest.raises(CorpusError, match="line 3"):
            parse_conll("-DOCSTART-\n\na\tO\textra\n", SCHEME)
        with pytest.raises(CorpusError):
            parse_conll("lonely\n", SCHEME)

    def test_docstart_label_ignored(self):
        c = parse_conll("-DOCSTART-\t-X-\n\na\tO\n", SCHEME)
        assert c.documents[0].tokens == ["a"]

    def test_file_stream(self):
        with open(DATA / "three_docs.conll", encoding="utf-8") as f:
            assert len(parse_conll(f, LabelScheme(("Disease",)))) == 3


tokens_st = st.text(alphabet="abcxyz01", min_size=1, max_size=4)


@st.composite
def corpora(draw, max_docs=4):
    n_docs = draw(st.integers(0, max_docs))
    docs = []
    for k in range(n_docs):
        sent_lens = draw(st.lists(st.integers(1, 5), min_size=1, max_size=3))
        n = sum(sent_lens)
        bounds = [sum(sent_lens[:i]) for i in range(len(sent_lens))]
        toks = draw(st.lists(tokens_st, min_size=n, max_size=n))
        labs = draw(st.lists(st.integers(0, SCHEME.label_count - 1), min_size=n, max_size=n))
        docs.append(Document(f"doc{k:05d}", toks, bounds, labs))
    return Corpus(docs, SCHEME)


@given(corpora())
def test_write_parse_round_trip(corpus):
    text = write_conll(corpus)
    again = parse_conll(text, SCHEME)
    assert write_conll(again).rstrip() == text.rstrip()
    assert [d.tokens for d in again] == [d.tokens for d in corpus]
    assert [d.gold_labels for d in again] == [d.gold_labels for d in corpus]
    assert [d.sentence_boundaries for d in again] == [d.sentence_boundaries for d in corpus]


def test_write_to_stream():
    c = parse_conll("-DOCSTART-\n\na\tB-D\nb\tI-D\n\nc\tO\n", SCHEME)
    buf = io.StringIO()
    write_conll(c, buf)
    assert buf.getvalue() == "-DOCSTART-\n\na\tB-D\nb\tI-D\n\nc\tO\n\n"


class TestSpans:
    def test_textbook(self):
        assert decode_spans([BD, ID, O, BC], SCHEME) == [
            EntitySpan("", 0, 2, "D"),
            EntitySpan("", 3, 4, "C"),
        ]

    def test_no_entities(self):
        assert decode_spans([O, O, O], SCHEME) == []

    def test_lenient_leading_inside(self):
        # hand enumeration: I-D at 0 opens D; I-D continues; B-D opens a new chunk
        assert decode_spans([ID, ID, BD], SCHEME) == [
            EntitySpan("", 0, 2, "D"),
            EntitySpan("", 2, 3, "D"),
        ]

    def test_type_switch_opens_new_chunk(self):
        assert decode_spans([BD, IC, IC], SCHEME) == [
            EntitySpan("", 0, 1, "D"),
            EntitySpan("", 1, 3, "C"),
        ]

    def test_strict_rejects(self):
        with pytest.raises(CorpusError):
            decode_spans([O, ID], SCHEME, strict=True)
        assert decode_spans([BD, ID], SCHEME, strict=True) == [EntitySpan("", 0, 2, "D")]

    def test_encode(self):
        assert encode_spans([], 3, SCHEME) == [O, O, O]
        assert encode_spans([EntitySpan("", 0, 2, "D")], 2, SCHEME) == [BD, ID]

    def test_encode_overlap(self):
        with pytest.raises(CorpusError):
            encode_spans([EntitySpan("", 0, 2, "D"), EntitySpan("", 1, 3, "C")], 3, SCHEME)

    @given(st.lists(st.integers(0, 4), max_size=30))
    def test_decode_matches_brute_force(self, labels):
        assert set(decode_spans(labels, SCHEME)) == brute_force_spans(labels, SCHEME)

    @given(st.lists(st.integers(0, 4), max_size=30))
    def test_spans_sorted_disjoint(self, labels):
        spans = decode_spans(labels, SCHEME)
        for a, b in zip(spans, spans[1:]):
            assert a.end <= b.start

    @settings(max_examples=100)
    @given(st.data())
    def test_round_trip(self, data):
        n = data.draw(st.integers(0, 25))
        cuts = sorted(set(data.draw(st.lists(st.integers(0, n), max_size=12))))
        spans = []
        for a, b in zip(cuts, cuts[1:]):
            if data.draw(st.booleans()):
                spans.append(EntitySpan("", a, b, data.draw(st.sampled_from(["D", "C"]))))
        assert decode_spans(encode_spans(spans, n, SCHEME), SCHEME) == spans


def _corpus(*label_seqs):
    docs = [
        Document(f"d{k}", [f"t{i}" for i in range(len(labs))], [0] if labs else [], list(labs))
        for k, labs in enumerate(label_seqs)
    ]
    return Corpus(docs, SCHEME)


class TestEvaluate:
    def test_identity(self):
        c = _corpus([BD, ID, O, BC], [O, BC, IC])
        rep = evaluate(c, [d.gold_labels for d in c])
        assert rep.precision == rep.recall == rep.f1 == 1.0

    def test_half(self):
        # gold: (0,2,D) and (3,4,C); predicted: (0,2,D) exact plus spurious (2,3,C)
        c = _corpus([BD, ID, O, BC, O])
        rep = evaluate(c, [[BD, ID, BC, O, O]])
        assert (rep.micro.gold, rep.micro.predicted, rep.micro.correct) == (2, 2, 1)
        assert rep.precision == rep.recall == rep.f1 == 0.5

    def test_nothing_predicted(self):
        c = _corpus([BD, O])
        rep = evaluate(c, [[O, O]])
        assert rep.precision == rep.recall == rep.f1 == 0.0

    def test_both_empty(self):
        c = _corpus([O, O])
        assert evaluate(c, [[O, O]]).f1 == 1.0

    def test_length_mismatch_names_document(self):
        c = _corpus([BD, O], [O])
        with pytest.raises(CorpusError, match="d1"):
            evaluate(c, [[O, O], [O, O]])

    def test_per_type(self):
        c = _corpus([BD, ID, O, BC])
        rep = evaluate(c, [[BD, ID, O, O]])
        assert rep.per_type["D"].f1 == 1.0
        assert rep.per_type["C"].recall == 0.0

    @given(corpora(), st.randoms(use_true_random=False))
    def test_properties(self, corpus, rnd):
        preds = [[rnd.randrange(SCHEME.label_count) for _ in d.tokens] for d in corpus]
        rep = evaluate(corpus, preds)
        for v in (rep.precision, rep.recall, rep.f1):
            assert 0.0 <= v <= 1.0
        m = rep.micro
        assert m.correct <= min(m.gold, m.predicted)
        if m.predicted and m.gold:
            p, r = m.correct / m.predicted, m.correct / m.gold
            assert rep.f1 == pytest.approx(2 * p * r / (p + r) if p + r else 0.0, abs=1e-15)
        assert evaluate(corpus, [d.gold_labels for d in corpus]).f1 == 1.0
        order = list(range(len(corpus)))
        rnd.shuffle(order)
        shuffled = Corpus([corpus.documents[i] for i in order], SCHEME)
        rep2 = evaluate(shuffled, [preds[i] for i in order])
        assert rep2.to_dict() == rep.to_dict()


class TestScanTypes:
    def test_types(self):
        from connerlab.corpus import scan_entity_types

        assert scan_entity_types("-DOCSTART-\n\na\tB-X\nb\tI-Y\n\nc\tO\n") == {"X", "Y"}

    def test_bad_label(self):
        from connerlab.corpus import scan_entity_types

        with pytest.raises(CorpusError, match="line 1"):
            scan_entity_types("a\tZ-X\n")

    def test_read_conll_names_file(self, tmp_path):
        from connerlab.corpus import read_conll

        path = tmp_path / "bad.conll"
        path.write_text("-DOCSTART-\n\na\tB-Q\n")
        with pytest.raises(CorpusError, match="bad.conll: line 3"):
            read_conll(path, SCHEME)
