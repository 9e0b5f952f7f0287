"""Consistency-aware NER model: recurrent context encoder, MLP tagging head,
entity-masked recurrent refinement head, entropy-gated combination and the
three-term training objective.

All forward/backward work happens on padded batches of *items* (a sentence
or a document window, depending on the context mode). Losses are averaged
per token inside an item and then over items, so padding never leaks into
the objective.
"""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .corpus import Corpus, Document, EntitySpan, EvalReport, LabelScheme, decode_spans, evaluate

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
UNK = "<unk>"


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab: list[str]
    entity_types: list[str]
    embed_dim: int = 32
    encoder_hidden: int = 32
    mlp_hidden: int = 32
    refine_hidden: int = 16
    context_mode: str = "document"
    gamma: float = 0.3
    lambdas: tuple[float, float, float] = (1.0, 1e-1, 1e-3)
    inference_refine: str = "off"
    max_window: int = 512

    def __post_init__(self):
        self.lambdas = tuple(float(x) for x in self.lambdas)
        self.vocab = list(self.vocab)
        self.entity_types = list(self.entity_types)
        if not self.vocab or self.vocab[0] != UNK:
            raise ValueError(f"vocab must start with {UNK}")
        if min(self.embed_dim, self.encoder_hidden, self.mlp_hidden, self.refine_hidden) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.context_mode not in ("sentence", "document"):
            raise ValueError(f"context_mode must be sentence or document, got {self.context_mode}")
        if self.inference_refine not in ("off", "two_pass"):
            raise ValueError(f"inference_refine must be off or two_pass, got {self.inference_refine}")
        if not math.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError("gamma must be finite and >= 0")
        if len(self.lambdas) != 3 or min(self.lambdas) < 0 or self.lambdas[0] <= 0:
            raise ValueError("lambdas must be three reals >= 0 with lambda1 > 0")
        if self.max_window < 1:
            raise ValueError("max_window must be >= 1")

    @property
    def label_count(self) -> int:
        return 2 * len(self.entity_types) + 1

    @property
    def scheme(self) -> LabelScheme:
        return LabelScheme(tuple(self.entity_types))

    @property
    def rep_dim(self) -> int:
        return 2 * self.encoder_hidden

    @property
    def refinement_active(self) -> bool:
        # the refinement head only exists in the objective when one of its losses is on
        return self.lambdas[1] > 0 or self.lambdas[2] > 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        return d


def build_vocab(corpus: Corpus) -> list[str]:
    return [UNK] + sorted({t for doc in corpus for t in doc.tokens})


class ConnerModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.store = nx.ParamStore()
        self.index = {t: i for i, t in enumerate(config.vocab)}
        rng = np.random.default_rng(seed)
        c = config
        d, he, hr, L = c.embed_dim, c.encoder_hidden, c.refine_hidden, c.label_count
        self.store.add("embedding", rng.normal(0.0, 0.1, (len(c.vocab), d)))
        for side in ("fwd", "bwd"):
            _add_lstm(self.store, f"encoder.{side}", d, he, rng)
        self.store.add("mlp.W1", _glorot(rng, 2 * he, c.mlp_hidden))
        self.store.add("mlp.b1", np.zeros((1, c.mlp_hidden)))
        self.store.add("mlp.W2", _glorot(rng, c.mlp_hidden, L))
        self.store.add("mlp.b2", np.zeros((1, L)))
        for side in ("fwd", "bwd"):
            _add_lstm(self.store, f"refine.{side}", 2 * he, hr, rng)
        self.store.add("refine.Wp", _glorot(rng, 2 * hr, L))
        self.store.add("refine.bp", np.zeros((1, L)))

    def __getitem__(self, name):
        return self.store[name]

    def lstm(self, prefix):
        s = self.store
        return s[f"{prefix}.Wx"], s[f"{prefix}.Wh"], s[f"{prefix}.b"]

    def token_ids(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.index.get(t, 0) for t in tokens], dtype=np.int64)


def _glorot(rng, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, (fan_in, fan_out))


def _add_lstm(store, prefix, d_in, h, rng):
    a = 1.0 / math.sqrt(h)
    store.add(f"{prefix}.Wx", rng.uniform(-a, a, (d_in, 4 * h)))
    store.add(f"{prefix}.Wh", rng.uniform(-a, a, (h, 4 * h)))
    b = np.zeros((1, 4 * h))
    b[0, h:2 * h] = 1.0
    store.add(f"{prefix}.b", b)


# ---------------------------------------------------------------------------
# items and batches


@dataclass(frozen=True)
class Item:
    doc_index: int
    start: int
    end: int


def make_items(corpus: Corpus, mode: str, max_window: int = 512) -> list[Item]:
    """Split documents into encoder windows.

    Sentence mode yields one item per sentence. Document mode yields the
    whole document, or consecutive sentence-aligned windows of at most
    ``max_window`` tokens when it is longer (a single over-long sentence
    is cut at the window size).
    """
    items = []
    for k, doc in enumerate(corpus.documents):
        sents = doc.sentences()
        if mode == "sentence":
            pieces = sents
        else:
            pieces, cur = [], None
            for s, e in sents:
                if cur is not None and e - cur[0] <= max_window:
                    cur = (cur[0], e)
                    continue
                if cur is not None:
                    pieces.append(cur)
                cur = (s, e)
            if cur is not None:
                pieces.append(cur)
        for s, e in pieces:
            for w in range(s, e, max_window):
                items.append(Item(k, w, min(e, w + max_window)))
    return items


@dataclass
class Batch:
    ids: np.ndarray          # [B, T]
    lengths: np.ndarray      # [B]
    labels: np.ndarray       # [B, T], -1 on padding
    entity_mask: np.ndarray  # [B, T] bool

    @property
    def valid(self) -> np.ndarray:
        return np.arange(self.ids.shape[1])[None, :] < self.lengths[:, None]


def spans_to_mask(spans: Sequence[EntitySpan], length: int) -> np.ndarray:
    mask = np.zeros(length, dtype=bool)
    for sp in sorted(spans, key=lambda s: s.start):
        if not 0 <= sp.start < sp.end <= length:
            raise ValueError(f"span {sp} outside window of length {length}")
        if mask[sp.start:sp.end].any():
            raise ValueError(f"span {sp} overlaps another span")
        mask[sp.start:sp.end] = True
    return mask


def make_batch(model: ConnerModel, corpus: Corpus, items: Sequence[Item], masks=None) -> Batch:
    """Pad items into a batch; masks default to gold entity positions."""
    B = len(items)
    T = max(it.end - it.start for it in items)
    ids = np.zeros((B, T), dtype=np.int64)
    labels = np.full((B, T), -1, dtype=np.int64)
    emask = np.zeros((B, T), dtype=bool)
    lengths = np.zeros(B, dtype=np.int64)
    for r, it in enumerate(items):
        doc = corpus.documents[it.doc_index]
        n = it.end - it.start
        lengths[r] = n
        ids[r, :n] = model.token_ids(doc.tokens[it.start:it.end])
        gold = doc.gold_labels[it.start:it.end]
        labels[r, :n] = gold
        if masks is None:
            emask[r, :n] = np.asarray(gold) != 0
        else:
            emask[r, :n] = masks[r]
    return Batch(ids, lengths, labels, emask)


# ---------------------------------------------------------------------------
# forward pieces


@dataclass
class ForwardTrace:
    reps: np.ndarray
    p_raw: np.ndarray
    l: np.ndarray
    U: np.ndarray
    refined_mask: np.ndarray
    p_final: np.ndarray
    entity_mask: np.ndarray


@dataclass
class LossBreakdown:
    class_loss: float
    label_loss: float
    distill_loss: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def _encode_batch(model, ids, lengths):
    E = model["embedding"][ids]
    reps, cache = nx.birnn_forward(E, lengths, model.lstm("encoder.fwd"), model.lstm("encoder.bwd"))
    return reps, cache


def _classify_batch(model, reps):
    a1, c1 = nx.affine(reps, model["mlp.W1"], model["mlp.b1"])
    h1 = np.tanh(a1)
    z, c2 = nx.affine(h1, model["mlp.W2"], model["mlp.b2"])
    return nx.softmax(z), (c1, h1, c2)


def _refine_batch(model, reps, lengths, emask):
    m = emask[..., None].astype(np.float64)
    R, rcache = nx.birnn_forward(reps * m, lengths, model.lstm("refine.fwd"), model.lstm("refine.bwd"))
    zl, pcache = nx.affine(R, model["refine.Wp"], model["refine.bp"])
    s = nx.softmax(zl)
    return s * m, (m, rcache, pcache, s)


def combine(p_raw, l, U, gamma, entity_mask):
    """Gate-and-average: uncertain entity tokens get ``(p_raw + l) / 2``."""
    refined = np.asarray(entity_mask, dtype=bool) & (np.asarray(U) > gamma)
    if gamma >= math.log(p_raw.shape[-1]):
        # entropy never exceeds ln L; guard against rounding just above it
        refined = np.zeros_like(refined)
    p_final = np.where(refined[..., None], 0.5 * (p_raw + l), p_raw)
    return p_final, refined


def _forward(model, batch: Batch, refine: bool, gate: bool = True):
    reps, enc_cache = _encode_batch(model, batch.ids, batch.lengths)
    p_raw, mlp_cache = _classify_batch(model, reps)
    U = nx.entropy(p_raw)
    if refine:
        emask = batch.entity_mask & batch.valid
        l, ref_cache = _refine_batch(model, reps, batch.lengths, emask)
        if gate:
            p_final, refined = combine(p_raw, l, U, model.config.gamma, emask)
        else:
            p_final, refined = p_raw, np.zeros_like(emask)
    else:
        emask = np.zeros_like(batch.entity_mask)
        l, ref_cache = np.zeros_like(p_raw), None
        p_final, refined = p_raw, np.zeros_like(emask)
    trace = ForwardTrace(reps, p_raw, l, U, refined, p_final, emask)
    return trace, (enc_cache, mlp_cache, ref_cache)


def _losses_and_dprobs(trace: ForwardTrace, batch: Batch, lambdas):
    """Loss breakdown plus gradients w.r.t. ``p_raw`` and ``l``."""
    lam1, lam2, lam3 = lambdas
    B = batch.ids.shape[0]
    dp_final = np.zeros_like(trace.p_raw)
    dp_raw = np.zeros_like(trace.p_raw)
    dl = np.zeros_like(trace.l)
    cls = lab = dis = 0.0
    for r in range(B):
        n = int(batch.lengths[r])
        y = batch.labels[r, :n]
        v, g = nx.cross_entropy(trace.p_final[r, :n], y)
        cls += v / B
        dp_final[r, :n] = lam1 * g / B
        on = np.flatnonzero(trace.entity_mask[r, :n])
        if on.size:
            v, g = nx.cross_entropy(trace.l[r, on], y[on])
            lab += v / B
            dl[r, on] += lam2 * g / B
            v, gp, gl = nx.sym_kl(trace.p_raw[r, on], trace.l[r, on])
            dis += v / B
            dp_raw[r, on] += lam3 * gp / B
            dl[r, on] += lam3 * gl / B
    ref = trace.refined_mask[..., None]
    dp_raw += np.where(ref, 0.5 * dp_final, dp_final)
    dl += np.where(ref, 0.5 * dp_final, 0.0)
    total = lam1 * cls + lam2 * lab + lam3 * dis
    return LossBreakdown(cls, lab, dis, total), dp_raw, dl


def _backward(model, batch, trace, caches, dp_raw, dl):
    store = model.store
    enc_cache, (c1, h1, c2), ref_cache = caches
    dz = nx.softmax_backward(dp_raw, trace.p_raw)
    dh1, dW2, db2 = nx.affine_backward(dz, c2)
    store.accumulate("mlp.W2", dW2)
    store.accumulate("mlp.b2", db2)
    da1 = dh1 * (1 - h1 * h1)
    dreps, dW1, db1 = nx.affine_backward(da1, c1)
    store.accumulate("mlp.W1", dW1)
    store.accumulate("mlp.b1", db1)
    if ref_cache is not None:
        m, rcache, pcache, s = ref_cache
        dzl = nx.softmax_backward(dl * m, s)
        dR, dWp, dbp = nx.affine_backward(dzl, pcache)
        store.accumulate("refine.Wp", dWp)
        store.accumulate("refine.bp", dbp)
        dmasked, gf, gb = nx.birnn_backward(dR, rcache)
        _acc_lstm(store, "refine.fwd", gf)
        _acc_lstm(store, "refine.bwd", gb)
        dreps = dreps + dmasked * m
    dE, gf, gb = nx.birnn_backward(dreps, enc_cache)
    _acc_lstm(store, "encoder.fwd", gf)
    _acc_lstm(store, "encoder.bwd", gb)
    demb = np.zeros_like(store.grads["embedding"])
    valid = batch.valid
    np.add.at(demb, batch.ids[valid], dE[valid])
    store.accumulate("embedding", demb)


def _acc_lstm(store, prefix, grads):
    for name, g in zip(("Wx", "Wh", "b"), grads):
        store.accumulate(f"{prefix}.{name}", g)


def batch_loss(model: ConnerModel, batch: Batch, gate: bool = True) -> LossBreakdown:
    trace, _ = _forward(model, batch, model.config.refinement_active, gate)
    return _losses_and_dprobs(trace, batch, model.config.lambdas)[0]


def batch_loss_and_grad(model: ConnerModel, batch: Batch, gate: bool = True) -> tuple[LossBreakdown, ForwardTrace]:
    """Forward, losses and backward; gradients are *added* to the store.

    ``gate=False`` keeps the auxiliary losses but never combines, which is
    the reference run for the gating threshold.
    """
    trace, caches = _forward(model, batch, model.config.refinement_active, gate)
    lb, dp_raw, dl = _losses_and_dprobs(trace, batch, model.config.lambdas)
    _backward(model, batch, trace, caches, dp_raw, dl)
    return lb, trace


# ---------------------------------------------------------------------------
# single-window API


def encode(model: ConnerModel, doc: Document, window: tuple[int, int] | None = None) -> np.ndarray:
    """Contextual representations ``[n, 2 * encoder_hidden]`` for one window."""
    start, end = window if window is not None else (0, len(doc))
    if not 0 <= start < end <= len(doc):
        raise ValueError(f"empty or out-of-range window ({start}, {end}) for document of length {len(doc)}")
    ids = model.token_ids(doc.tokens[start:end])[None]
    reps, _ = _encode_batch(model, ids, np.array([end - start]))
    return reps[0]


def entity_representation(reps: np.ndarray, span: EntitySpan) -> np.ndarray:
    if not 0 <= span.start < span.end <= reps.shape[0]:
        raise IndexError(f"span {span} outside representation of length {reps.shape[0]}")
    return reps[span.start:span.end]


def classify(model: ConnerModel, reps: np.ndarray) -> np.ndarray:
    return _classify_batch(model, reps)[0]


def refine(model: ConnerModel, reps: np.ndarray, spans: Sequence[EntitySpan]) -> np.ndarray:
    """Label distributions from the entity-masked recurrent head; zero rows off-mask."""
    n = reps.shape[0]
    mask = spans_to_mask(spans, n)
    l, _ = _refine_batch(model, reps[None], np.array([n]), mask[None])
    return l[0]


def losses(trace: ForwardTrace, gold: Sequence[int], lambdas) -> LossBreakdown:
    n = trace.p_raw.shape[0]
    batch = Batch(
        np.zeros((1, n), dtype=np.int64),
        np.array([n]),
        np.asarray(gold, dtype=np.int64)[None],
        np.asarray(trace.entity_mask, dtype=bool)[None],
    )
    t = ForwardTrace(
        trace.reps[None], trace.p_raw[None], trace.l[None], trace.U[None],
        trace.refined_mask[None], trace.p_final[None], trace.entity_mask[None],
    )
    return _losses_and_dprobs(t, batch, lambdas)[0]


def forward_window(model: ConnerModel, doc: Document, window=None, spans=None) -> ForwardTrace:
    """Full forward trace for one window; ``spans`` default to the gold spans
    (positions relative to the window start)."""
    start, end = window if window is not None else (0, len(doc))
    reps = encode(model, doc, (start, end))
    p_raw = classify(model, reps)
    if spans is None:
        spans = decode_spans(doc.gold_labels[start:end], model.config.scheme)
    mask = spans_to_mask(spans, end - start)
    l = refine(model, reps, spans)
    U = nx.entropy(p_raw)
    p_final, refined = combine(p_raw, l, U, model.config.gamma, mask)
    return ForwardTrace(reps, p_raw, l, U, refined, p_final, mask)


# ---------------------------------------------------------------------------
# prediction


def predict(model: ConnerModel, corpus: Corpus, batch_size: int = 32) -> list[list[int]]:
    """Per-document argmax labels from the MLP head.

    With ``inference_refine == "two_pass"`` a second pass masks the spans
    decoded from the first pass and applies refinement and gating. The
    second pass is skipped when the refinement head is not trained
    (``lambda2 == lambda3 == 0``).
    """
    cfg = model.config
    scheme = cfg.scheme
    out = [[0] * len(doc) for doc in corpus]
    items = make_items(corpus, cfg.context_mode, cfg.max_window)
    for k in range(0, len(items), batch_size):
        chunk = items[k:k + batch_size]
        batch = make_batch(model, corpus, chunk)
        reps, _ = _encode_batch(model, batch.ids, batch.lengths)
        p, _ = _classify_batch(model, reps)
        if cfg.inference_refine == "two_pass" and cfg.refinement_active:
            first = p.argmax(-1)
            emask = np.zeros_like(batch.entity_mask)
            for r, it in enumerate(chunk):
                n = it.end - it.start
                emask[r, :n] = spans_to_mask(decode_spans(first[r, :n].tolist(), scheme), n)
            l, _ = _refine_batch(model, reps, batch.lengths, emask)
            p, _ = combine(p, l, nx.entropy(p), cfg.gamma, emask)
        labels = p.argmax(-1)
        for r, it in enumerate(chunk):
            out[it.doc_index][it.start:it.end] = labels[r, :it.end - it.start].tolist()
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class Schedule:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0


@dataclass
class EpochRecord:
    epoch: int
    loss: LossBreakdown
    dev: dict | None
    refined_tokens: int

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "loss": self.loss.to_dict(), "dev": self.dev, "refined_tokens": self.refined_tokens}


@dataclass
class TrainResult:
    model: ConnerModel
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def dev_f1_history(self) -> list[float]:
        return [h.dev["micro"]["f1"] if h.dev else float("nan") for h in self.history]


def train(
    train_corpus: Corpus,
    dev: Corpus | None,
    config: ModelConfig,
    schedule: Schedule,
    select_best: bool = True,
    gate: bool = True,
) -> TrainResult:
    """Mini-batch Adam on the combined objective with gold-span masks.

    The parameters with the best dev micro-F1 (earliest on ties) are kept;
    without a dev corpus, or with ``select_best=False``, the final epoch's.
    ``gate=False`` trains without the gated combination (see
    :func:`batch_loss_and_grad`).
    """
    if not train_corpus.documents or train_corpus.n_tokens == 0:
        raise ValueError("empty training corpus")
    if dev is not None and dev.scheme != train_corpus.scheme:
        raise ValueError("train and dev corpora use different label schemes")
    model = ConnerModel(config, seed=schedule.seed)
    opt = nx.AdamState(lr=schedule.lr)
    items = make_items(train_corpus, config.context_mode, config.max_window)
    order_rng = np.random.default_rng([schedule.seed, 1])
    result = TrainResult(model)
    best_f1, best_params = -1.0, None
    for epoch in range(1, schedule.epochs + 1):
        perm = order_rng.permutation(len(items))
        sums = np.zeros(4)
        refined = 0
        n_batches = 0
        for k in range(0, len(perm), schedule.batch_size):
            chunk = [items[j] for j in perm[k:k + schedule.batch_size]]
            batch = make_batch(model, train_corpus, chunk)
            lb, trace = batch_loss_and_grad(model, batch, gate)
            nx.adam_step(model.store, opt)
            sums += (lb.class_loss, lb.label_loss, lb.distill_loss, lb.total)
            refined += int(trace.refined_mask.sum())
            n_batches += 1
        mean = LossBreakdown(*(sums / n_batches).tolist())
        dev_report = None
        if dev is not None and dev.documents:
            rep = evaluate(dev, predict(model, dev))
            dev_report = rep.to_dict()
            if select_best and rep.f1 > best_f1:
                best_f1 = rep.f1
                best_params = {k: v.copy() for k, v in model.store.params.items()}
                result.best_epoch = epoch
        result.history.append(EpochRecord(epoch, mean, dev_report, refined))
        log.debug("epoch %d loss %.5f dev %s", epoch, mean.total, dev_report and dev_report["micro"]["f1"])
    if best_params is not None:
        for k, v in best_params.items():
            model.store.params[k][...] = v
    else:
        result.best_epoch = schedule.epochs
    return result


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_dict(model: ConnerModel, metadata: dict | None = None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "config": model.config.to_dict(),
        "params": {k: v.tolist() for k, v in model.store.params.items()},
        "metadata": metadata or {},
    }


def atomic_write(path, text: str) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: ConnerModel, path, metadata: dict | None = None) -> None:
    atomic_write(path, json.dumps(checkpoint_dict(model, metadata)))


def load_checkpoint(path, expected_label_count: int | None = None) -> tuple[ConnerModel, dict]:
    """Rebuild a model from a JSON checkpoint; returns ``(model, metadata)``."""
    try:
        with open(path, encoding="utf-8") as f:
            blob = json.load(f)
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(blob, dict) or "schema_version" not in blob:
        raise CheckpointError(f"{path}: not a checkpoint")
    if blob["schema_version"] != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: schema_version {blob['schema_version']}, expected {SCHEMA_VERSION}")
    try:
        cfg = blob["config"]
        cfg["lambdas"] = tuple(cfg["lambdas"])
        config = ModelConfig(**cfg)
        params = blob["params"]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: bad config: {e}") from e
    if expected_label_count is not None and config.label_count != expected_label_count:
        raise CheckpointError(
            f"{path}: config mismatch: checkpoint has label_count {config.label_count}, "
            f"corpus needs {expected_label_count}"
        )
    model = ConnerModel(config, seed=0)
    if set(params) != set(model.store.params):
        raise CheckpointError(f"{path}: parameter names do not match the config")
    for name, ref in model.store.params.items():
        arr = np.asarray(params[name], dtype=np.float64)
        if arr.shape != ref.shape:
            raise CheckpointError(f"{path}: config mismatch: {name} has shape {arr.shape}, expected {ref.shape}")
        ref[...] = arr
    return model, blob.get("metadata", {})


def history_dicts(result: TrainResult) -> list[dict]:
    return [h.to_dict() for h in result.history]


def report_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), indent=2)
