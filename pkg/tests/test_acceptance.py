"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line
that is echoed in the terminal summary."""

import dataclasses
import time
from collections import Counter

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, TINY_DIMS, TINY_SPEC
from connerlab import numerics as nx
from connerlab.attributes import AttributeKind, build_train_stats, compute_attribute
from connerlab.cli import main as cli_main
from connerlab.conner import (
    ConnerModel,
    Schedule,
    _forward,
    batch_loss,
    batch_loss_and_grad,
    load_checkpoint,
    make_batch,
    make_items,
    predict,
    report_json,
    save_checkpoint,
    train,
)
from connerlab.corpus import Corpus, Document, EntitySpan, LabelScheme, evaluate
from connerlab.experiments import (
    ExperimentSchedule,
    ablation,
    config_for,
    consistency_anatomy,
    context_comparison,
    gamma_grid,
    gamma_sweep,
    monotone_non_increasing,
    no_refinement_run,
    refined_sets,
    short_vs_long,
)
from connerlab.synthgen import SynthSpec, generate
from test_attributes import naive_attribute, naive_chunks, modifier_fixture


def record(number, name, passed, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {name}: {detail}")
    print(ACCEPTANCE_LINES[-1])
    assert passed, detail


# ---------------------------------------------------------------------------
# 1. gradient soundness


def _kernel_checks(rng):
    """Finite-difference checks of the non-recurrent kernels on their own."""
    worst = 0.0
    x, W, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=(1, 3))
    y = rng.integers(0, 3, 4)
    q = nx.softmax(rng.normal(size=(4, 3)))

    def objective(store):
        z, _ = nx.affine(store["x"], store["W"], store["b"])
        p = nx.softmax(z)
        ce, _ = nx.cross_entropy(p, y)
        kl, _, _ = nx.sym_kl(p, q)
        return ce + kl + float(nx.entropy(p).mean())

    store = nx.ParamStore()
    for k, v in (("x", x), ("W", W), ("b", b)):
        store.add(k, v)
    z, cache = nx.affine(x, W, b)
    p = nx.softmax(z)
    _, dce = nx.cross_entropy(p, y)
    _, dkl, _ = nx.sym_kl(p, q)
    dent = -(np.log(np.maximum(p, nx.EPS)) + 1.0) / p.shape[0]
    dz = nx.softmax_backward(dce + dkl + dent, p)
    dx, dW, db = nx.affine_backward(dz, cache)
    rep = nx.grad_check(objective, store, {"x": dx, "W": dW, "b": db}, eps=1e-6, tol=1e-6, rng=rng)
    return rep.worst


def test_criterion_1_gradient_soundness():
    t0 = time.perf_counter()
    train_c, _, _ = generate(SynthSpec(seed=11, **TINY_SPEC))
    cfg = config_for(train_c, **TINY_DIMS)
    items = make_items(train_c, "document")
    worst_model = worst_kernel = 0.0
    gated_both_ways = 0
    for k in range(10):
        rng = np.random.default_rng([11, k])
        model = ConnerModel(cfg, seed=k)
        pick = rng.choice(len(items), 2, replace=False)
        batch = make_batch(model, train_c, [items[i] for i in pick])
        # threshold halfway between two entity-token entropies so both gate branches run
        trace, _ = _forward(model, batch, refine=True)
        u = np.sort(trace.U[trace.entity_mask])
        if u.size >= 2:
            mid = u.size // 2
            model.config = dataclasses.replace(cfg, gamma=float((u[mid - 1] + u[mid]) / 2))
        model.store.zero_grad()
        _, tr = batch_loss_and_grad(model, batch)
        if tr.refined_mask.any() and (tr.entity_mask & ~tr.refined_mask).any():
            gated_both_ways += 1
        analytic = {n: g.copy() for n, g in model.store.grads.items()}
        rep = nx.grad_check(lambda s: batch_loss(model, batch).total, model.store, analytic, samples=500, tol=1e-4, rng=rng)
        worst_model = max(worst_model, rep.worst)
        worst_kernel = max(worst_kernel, _kernel_checks(rng))
    elapsed = time.perf_counter() - t0
    ok = worst_model < 1e-4 and worst_kernel < 1e-6 and elapsed < 60
    record(
        1,
        "gradient soundness",
        ok,
        f"worst rel err full loss {worst_model:.2e} (<1e-4), kernels {worst_kernel:.2e} (<1e-6), "
        f"{gated_both_ways}/10 batches exercised both gate branches, {elapsed:.1f}s (<60s)",
    )


# ---------------------------------------------------------------------------
# 2. metric oracle


def brute_force_score(gold_corpus, predictions):
    """Enumerate every (i, j, type) and test the lenient chunk definition directly."""
    scheme = gold_corpus.scheme

    def chunks(doc_id, labels):
        names = [scheme.label_name(x) for x in labels]
        n = len(names)
        out = set()
        for i in range(n):
            if names[i] == "O":
                continue
            t = names[i][2:]
            opens = names[i][0] == "B" or i == 0 or names[i - 1] not in (f"B-{t}", f"I-{t}")
            if not opens:
                continue
            for j in range(i + 1, n + 1):
                if all(names[k] == f"I-{t}" for k in range(i + 1, j)) and (j == n or names[j] != f"I-{t}"):
                    out.add((doc_id, i, j, t))
        return out

    g, p = set(), set()
    for doc, pred in zip(gold_corpus, predictions):
        g |= chunks(doc.doc_id, doc.gold_labels)
        p |= chunks(doc.doc_id, pred)
    c = len(g & p)
    if not p:
        prec = 1.0 if not g else 0.0
    else:
        prec = c / len(p)
    rec = c / len(g) if g else 1.0
    f1 = 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)
    return (len(g), len(p), c), (prec, rec, f1)


def test_criterion_2_metric_oracle():
    scheme = LabelScheme(("A", "B", "C"))
    rng = np.random.default_rng(2)
    mismatches = 0
    for trial in range(200):
        docs, preds = [], []
        for k in range(int(rng.integers(0, 11))):
            n = int(rng.integers(1, 31))
            # biased draws produce both well-formed runs and ill-formed I- starts
            gold = [int(x) for x in rng.choice(scheme.label_count, n, p=[0.4, 0.1, 0.15, 0.1, 0.1, 0.05, 0.1])]
            pred = [x if rng.random() < 0.7 else int(rng.integers(scheme.label_count)) for x in gold]
            docs.append(Document(f"d{k}", [f"t{i}" for i in range(n)], [0], gold))
            preds.append(pred)
        corpus = Corpus(docs, scheme)
        rep = evaluate(corpus, preds)
        counts, prf = brute_force_score(corpus, preds)
        m = rep.micro
        if (m.gold, m.predicted, m.correct) != counts or (rep.precision, rep.recall, rep.f1) != prf:
            mismatches += 1
    record(2, "metric oracle", mismatches == 0, f"{mismatches}/200 randomized corpora disagree with the brute-force scorer (exact)")


# ---------------------------------------------------------------------------
# 3. attribute oracle


def test_criterion_3_attribute_oracle():
    from test_attributes import SCHEME, random_corpus

    worst = 0.0
    checked = Counter()
    for k in range(20):
        rng = np.random.default_rng([3, k])
        train_c = random_corpus(rng, n_docs=int(rng.integers(1, 8)))
        test_c = random_corpus(rng, n_docs=4, vocab=8, prefix="t")
        stats = build_train_stats(train_c)
        for doc in test_c:
            for i in range(len(doc)):
                for kind in ("tLen", "tFre", "tCon"):
                    worst = max(worst, abs(compute_attribute(kind, i, doc, stats, SCHEME) - naive_attribute(kind, i, doc, train_c)))
                    checked[kind] += 1
            for a, b, t in naive_chunks(doc.gold_labels):
                span = EntitySpan(doc.doc_id, a, b, t)
                for kind in ("eLen", "eFre", "eCon", "dLen", "eDen", "oDen"):
                    worst = max(worst, abs(compute_attribute(kind, span, doc, stats, SCHEME) - naive_attribute(kind, span, doc, train_c)))
                    checked[kind] += 1
    train_c, test_c = modifier_fixture()
    stats = build_train_stats(train_c)
    doc = test_c.documents[0]
    primary = compute_attribute("tCon", 2, doc, stats)
    abnormal = compute_attribute("tCon", 0, doc, stats)
    all_kinds = set(checked) == {k.value for k in AttributeKind}
    ok = worst <= 1e-12 and all_kinds and primary == 0.11 and abnormal == 0.94
    record(
        3,
        "attribute oracle",
        ok,
        f"max |diff| {worst:.1e} over {sum(checked.values())} values of {len(checked)} kinds (<=1e-12); "
        f"tCon(primary)={primary}, tCon(abnormal)={abnormal}",
    )


# ---------------------------------------------------------------------------
# 4. consistency anatomy


def test_criterion_4_consistency_anatomy():
    tables = consistency_anatomy(range(5))
    pairs = [short_vs_long(t) for t in tables]
    ok = all(s < l for s, l in pairs)
    detail = "; ".join(f"seed {k}: short {s:.3f} < long {l:.3f}" for k, (s, l) in enumerate(pairs))
    record(4, "consistency anatomy", ok, detail)


# ---------------------------------------------------------------------------
# 5. ablation direction


def test_criterion_5_ablation_margin():
    t0 = time.perf_counter()
    res = ablation(range(5))
    elapsed = time.perf_counter() - t0
    two_pass = np.mean([r.two_pass_f1 for r in res.runs_a])
    ok = res.margin >= 0.02 and elapsed < 600
    record(
        5,
        "ablation direction",
        ok,
        f"full {res.mean_a:.4f} vs ablated {res.mean_b:.4f}, margin {100 * res.margin:+.2f} F1 (>= +2.00), "
        f"{elapsed:.0f}s (<600s); two-pass inference {two_pass:.4f} (informational)",
    )


# ---------------------------------------------------------------------------
# 6. context direction


def test_criterion_6_context_direction():
    res = context_comparison(range(5))
    record(
        6,
        "context direction",
        res.margin >= 0.0,
        f"document {res.mean_a:.4f} vs sentence {res.mean_b:.4f} ({100 * res.margin:+.2f} F1, needs >= 0)",
    )


# ---------------------------------------------------------------------------
# 7. gating threshold sweep


def test_criterion_7_gamma_sweep():
    train_c, dev_c, test_c = generate(SynthSpec(seed=7, n_docs=40))
    base = config_for(train_c)
    sched = Schedule(epochs=5, batch_size=8, lr=1e-2, seed=7)
    grid = gamma_grid(base.label_count)
    rows = gamma_sweep(train_c, dev_c, test_c, base, sched, grid)
    ref_result, ref_report = no_refinement_run(train_c, dev_c, test_c, base, sched)
    top = rows[-1]
    same_report = report_json(top.report) == report_json(ref_report)
    same_params = all(
        top.result.model.store.params[k].tobytes() == ref_result.model.store.params[k].tobytes()
        for k in ref_result.model.store.params
    )
    same_history = [h.to_dict() for h in top.result.history] == [h.to_dict() for h in ref_result.history]
    batches = violations = 0
    for row in rows:
        for masks in refined_sets(row.result.model, train_c, grid):
            batches += 1
            violations += not monotone_non_increasing(masks)
    ok = len(rows) == len(grid) == 11 and same_report and same_params and same_history and violations == 0
    record(
        7,
        "gamma gating",
        ok,
        f"{len(rows)} grid points; ln L row identical to no-refinement run "
        f"(report {same_report}, params {same_params}, history {same_history}); "
        f"refined set monotone in {batches - violations}/{batches} batch checks",
    )


# ---------------------------------------------------------------------------
# 8. determinism and persistence


def test_criterion_8_determinism(tmp_path, monkeypatch):
    train_c, dev_c, test_c = generate(SynthSpec(seed=8, n_docs=40))
    cfg = config_for(train_c)
    res = train(train_c, dev_c, cfg, Schedule(epochs=3, lr=1e-2, seed=8))
    before = report_json(evaluate(test_c, predict(res.model, test_c)))
    save_checkpoint(res.model, tmp_path / "ck.json")
    loaded, _ = load_checkpoint(tmp_path / "ck.json")
    after = report_json(evaluate(test_c, predict(loaded, test_c)))
    bitwise = all(loaded.store.params[k].tobytes() == v.tobytes() for k, v in res.model.store.params.items())

    def pipeline(root):
        # relative paths, so the echoed configs of both runs are comparable
        root.mkdir()
        monkeypatch.chdir(root)
        assert cli_main(["synth", "--seed", "8", "--out", "data"]) == 0
        argv = ["train", "--train", "data/train.conll", "--dev", "data/dev.conll", "--test", "data/test.conll",
                "--seed", "8", "--epochs", "2", "--out", "run"]
        assert cli_main(argv) == 0
        assert cli_main(["eval", "--checkpoint", "run/checkpoint.json", "--test", "data/test.conll", "--out", "eval"]) == 0
        return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

    a, b = pipeline(tmp_path / "a"), pipeline(tmp_path / "b")
    ok = before == after and bitwise and a == b
    record(
        8,
        "determinism and persistence",
        ok,
        f"save/load report identical {before == after}, params bitwise {bitwise}; "
        f"two pipeline runs identical over {len(a)} files {a == b}",
    )


# ---------------------------------------------------------------------------
# 9. training smoke


def test_criterion_9_training_smoke():
    train_c, _, _ = generate(SynthSpec(seed=9, n_docs=50, split=(1.0, 0.0, 0.0)))
    sched = ExperimentSchedule(epochs=20)
    res = train(train_c, None, config_for(train_c), sched.for_seed(9))
    losses = [h.loss.total for h in res.history]
    drop = 1 - min(losses) / losses[0]
    record(9, "training smoke", drop >= 0.5, f"total loss {losses[0]:.4f} -> {min(losses):.4f} ({100 * drop:.1f}% drop, needs >= 50%) in 20 epochs on 50 docs")
