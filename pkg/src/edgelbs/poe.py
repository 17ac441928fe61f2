"""Next-POI evaluation model (POE).

Scores a candidate POI from three intent vectors:

    d_q = ReLU(W1 q_prev + b1)    (previous-visit intent)
    d_u = ReLU(W2 u     + b2)     (user preference intent)
    c_l = ReLU(W3 q_cand + b3)    (candidate intent)
    y   = (d_q + d_u) . c_l

Optionally the POI/user inputs are blended with metadata-item means
(alpha, beta knobs), W1 is replaced by a transfer matrix interpolated
on the time gap since the last visit, and b1 by an hour-of-day bucket
bias.  Training minimizes sampled softmax cross-entropy over observed
transitions; validation MAP picks the returned checkpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from edgelbs import numerics as nm
from edgelbs.metrics import RankedResult, mean_average_precision

__all__ = [
    "PoeHyper",
    "PoeModel",
    "ScoreRequest",
    "ColdStartError",
    "metadata_vector",
    "intent_vectors",
    "score",
    "rank_candidates",
    "train_poe",
    "poe_gate",
    "validation_map",
]

SECONDS_PER_DAY = 86400.0


class ColdStartError(LookupError):
    """User has no history; callers fall back to popularity ranking."""


@dataclass
class PoeHyper:
    dim: int = 8
    alpha: float = 0.3      # POI-input metadata blend (1 = ignore metadata)
    beta: float = 0.2       # user-input metadata blend
    interval_pi: float = SECONDS_PER_DAY   # transfer-matrix interpolation threshold
    buckets: int = 24       # hour-of-day bias buckets
    thre2: float = 0.5
    n_neg: int = 10
    lr: float = 0.02
    momentum: float = 0.5
    epochs: int = 6
    use_meta: bool = False
    use_time: bool = False

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("alpha and beta must be in [0, 1]")
        if self.interval_pi <= 0 or self.buckets < 1:
            raise ValueError("interval_pi must be positive and buckets >= 1")


@dataclass(frozen=True)
class ScoreRequest:
    user_id: str
    history: tuple     # (poi_id, timestamp) pairs, time-ascending
    query_time: float
    candidates: tuple  # candidate poi ids


class PoeModel:
    """Embedding tables, transfer matrices, and biases."""

    def __init__(self, user_index, poi_index, item_index_user, item_index_poi,
                 hyper, seed, poi_init=None, user_init=None):
        self.user_index = dict(user_index)
        self.poi_index = dict(poi_index)
        self.item_index_user = dict(item_index_user)
        self.item_index_poi = dict(item_index_poi)
        self.hyper = hyper
        rng = np.random.default_rng(seed)
        d = hyper.dim

        user_emb = nm.glorot_uniform(rng, (max(len(user_index), 1), d))
        if user_init is not None:
            for uid, vec in user_init.items():
                if uid in self.user_index:
                    user_emb[self.user_index[uid]] = vec
        poi_emb = nm.glorot_uniform(rng, (max(len(poi_index), 1), d))
        if poi_init is not None:
            poi_emb = np.array(poi_init, dtype=np.float64)

        self.user_emb = nm.param(user_emb)
        self.poi_emb = nm.param(poi_emb)
        self.item_emb_user = nm.param(
            nm.glorot_uniform(rng, (max(len(item_index_user), 1), d))
        )
        self.item_emb_poi = nm.param(
            nm.glorot_uniform(rng, (max(len(item_index_poi), 1), d))
        )
        self.w1 = nm.param(nm.glorot_uniform(rng, (d, d)))   # W_0 when use_time
        self.w_pi = nm.param(nm.glorot_uniform(rng, (d, d)))
        self.w2 = nm.param(nm.glorot_uniform(rng, (d, d)))
        self.w3 = nm.param(nm.glorot_uniform(rng, (d, d)))
        self.b1 = nm.param(np.zeros(d))
        self.b2 = nm.param(np.zeros(d))
        self.b3 = nm.param(np.zeros(d))
        self.bucket_bias = nm.param(np.zeros((hyper.buckets, d)))

    @property
    def params(self):
        return [
            self.user_emb, self.poi_emb, self.item_emb_user, self.item_emb_poi,
            self.w1, self.w_pi, self.w2, self.w3,
            self.b1, self.b2, self.b3, self.bucket_bias,
        ]

    def state(self):
        return {
            "user_emb": self.user_emb.value.copy(),
            "poi_emb": self.poi_emb.value.copy(),
            "item_emb_user": self.item_emb_user.value.copy(),
            "item_emb_poi": self.item_emb_poi.value.copy(),
            "w1": self.w1.value.copy(), "w_pi": self.w_pi.value.copy(),
            "w2": self.w2.value.copy(), "w3": self.w3.value.copy(),
            "b1": self.b1.value.copy(), "b2": self.b2.value.copy(),
            "b3": self.b3.value.copy(), "bucket_bias": self.bucket_bias.value.copy(),
        }

    def load_state(self, state):
        for name, arr in state.items():
            getattr(self, name).value = np.array(arr, dtype=np.float64)

    def save(self, path):
        nm.save_checkpoint(path, self.state())


def metadata_vector(entity_id, kind, meta, model):
    """Mean item embedding over the entity's metadata set (Eq-13/14 style).

    Empty metadata gives a zero vector plus a flag.  Unknown item ids
    are a vocabulary error.
    """
    if kind == "poi":
        items = meta.poi_meta.get(entity_id, set())
        table, index = model.item_emb_poi, model.item_index_poi
    else:
        items = meta.user_meta.get(entity_id, set())
        table, index = model.item_emb_user, model.item_index_user
    if not items:
        return nm.constant(np.zeros(model.hyper.dim)), True
    try:
        rows = np.array(sorted(index[i] for i in items), dtype=np.intp)
    except KeyError as exc:
        raise KeyError(f"metadata item {exc.args[0]!r} not in vocabulary") from None
    return nm.mean_(nm.gather_rows(table, rows), axis=0), False


def _blend(weight, primary, meta_vec):
    return weight * primary + (1.0 - weight) * meta_vec


def _transfer_matrix(model, delta_t):
    """W_pi(dt): linear interpolation between W_0 and W_pi below the
    threshold, constant W_pi above it."""
    pi = model.hyper.interval_pi
    if delta_t >= pi:
        return model.w_pi
    w = delta_t / pi
    return (1.0 - w) * model.w1 + w * model.w_pi


def intent_vectors(req, candidate, model, meta=None):
    """Tape nodes (d_q, d_u, c_l) for one request/candidate pair."""
    h = model.hyper
    if not req.history:
        raise ColdStartError(f"user {req.user_id} has no history")
    if req.user_id not in model.user_index:
        raise ColdStartError(f"user {req.user_id} unknown to the model")
    prev_poi, prev_t = req.history[-1]

    q_prev = nm.gather_rows(model.poi_emb, model.poi_index[prev_poi])
    u = nm.gather_rows(model.user_emb, model.user_index[req.user_id])
    q_cand = nm.gather_rows(model.poi_emb, model.poi_index[candidate])

    if h.use_meta:
        if meta is None:
            raise ValueError("use_meta set but no metadata supplied")
        m_prev, _ = metadata_vector(prev_poi, "poi", meta, model)
        m_user, _ = metadata_vector(req.user_id, "user", meta, model)
        m_cand, _ = metadata_vector(candidate, "poi", meta, model)
        x_prev = _blend(h.alpha, q_prev, m_prev)
        x_user = _blend(h.beta, u, m_user)
        x_cand = _blend(h.alpha, q_cand, m_cand)
    else:
        x_prev, x_user, x_cand = q_prev, u, q_cand

    if h.use_time:
        w_first = _transfer_matrix(model, req.query_time - prev_t)
        bucket = int((req.query_time % SECONDS_PER_DAY) // (SECONDS_PER_DAY / h.buckets))
        b_first = nm.gather_rows(model.bucket_bias, bucket)
    else:
        w_first, b_first = model.w1, model.b1

    d_q = nm.relu_n(nm.matmul(w_first, x_prev) + b_first)
    d_u = nm.relu_n(nm.matmul(model.w2, x_user) + model.b2)
    c_l = nm.relu_n(nm.matmul(model.w3, x_cand) + model.b3)
    return d_q, d_u, c_l


def score(req, candidate, model, meta=None):
    """Recommendation score y = (d_q + d_u) . c_l as a tape node."""
    d_q, d_u, c_l = intent_vectors(req, candidate, model, meta)
    return nm.matmul(d_q + d_u, c_l)


def rank_candidates(req, model, meta=None, top_k=None):
    """Candidates sorted by score descending, ties by ascending poi id."""
    if not req.candidates:
        raise ValueError("empty candidate set")
    scored = [(cand, float(score(req, cand, model, meta).value)) for cand in req.candidates]
    scored.sort(key=lambda cs: (-cs[1], cs[0]))
    return scored[:top_k] if top_k is not None else scored


def poe_gate(ranked, thre2):
    """Pass iff the mean of sigmoid(score) over the returned candidates
    reaches the threshold.  Returns (passed, aggregate)."""
    if not ranked:
        raise ValueError("empty ranked list")
    aggregate = float(np.mean([nm.sigmoid(s) for _, s in ranked]))
    return aggregate >= thre2, aggregate


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _transitions(log):
    """(user, prev_poi, prev_t, next_poi, next_t) over consecutive visits."""
    out = []
    for uid, recs in log.by_user().items():
        for prev, nxt in zip(recs, recs[1:]):
            out.append((uid, prev.poi_id, prev.timestamp, nxt.poi_id, nxt.timestamp))
    return out


def _cross_split_transitions(train, holdout):
    """Transitions whose target lies in the holdout split; the previous
    visit may come from the end of the user's training history."""
    timelines = {}
    for uid, recs in train.by_user().items():
        timelines[uid] = [(r.poi_id, r.timestamp, "train") for r in recs]
    for uid, recs in holdout.by_user().items():
        timelines.setdefault(uid, []).extend(
            (r.poi_id, r.timestamp, "holdout") for r in recs
        )
    out = []
    for uid, events in timelines.items():
        events.sort(key=lambda e: e[1])
        for prev, nxt in zip(events, events[1:]):
            if nxt[2] == "holdout":
                out.append((uid, prev[0], prev[1], nxt[0], nxt[1]))
    return out


def validation_map(model, train, holdout, meta=None):
    """MAP over holdout transitions, ranking every known POI."""
    all_pois = tuple(sorted(model.poi_index))
    results = []
    for uid, prev_poi, prev_t, next_poi, next_t in _cross_split_transitions(train, holdout):
        if uid not in model.user_index:
            continue
        req = ScoreRequest(uid, ((prev_poi, prev_t),), next_t, all_pois)
        ranked = rank_candidates(req, model, meta)
        results.append(RankedResult([cid for cid, _ in ranked], {next_poi}))
    if not results:
        return 0.0
    return mean_average_precision(results)


def train_poe(corpus, meta, hyper, seed, pretrained=None, user_init=None):
    """Sampled-softmax training over the train split's transitions.

    ``pretrained``, when given, is (poi embedding table, poi index) from
    the pretrain module; user rows are then initialized from the
    visit-frequency rule unless ``user_init`` overrides.  Returns
    (best-on-validation model, history dict).
    """
    rng = np.random.default_rng(seed)
    transitions = _transitions(corpus.train)
    if not transitions:
        raise ValueError("train split has no transitions")

    users = sorted(corpus.train.by_user())
    pois = sorted(
        {r.poi_id for log in (corpus.train, corpus.validation, corpus.test) for r in log.records}
    )
    if pretrained is not None:
        poi_table, poi_index = pretrained
        # extend with random rows for POIs the pretrainer never saw
        poi_index = dict(poi_index)
        rows = list(poi_table)
        for pid in pois:
            if pid not in poi_index:
                poi_index[pid] = len(rows)
                rows.append(nm.glorot_uniform(rng, (hyper.dim,)))
        poi_init, poi_index_final = np.array(rows), poi_index
    else:
        poi_init, poi_index_final = None, {p: i for i, p in enumerate(pois)}
    user_index = {u: i for i, u in enumerate(users)}
    item_index_user = {
        it: i for i, it in enumerate(sorted({x for s in meta.user_meta.values() for x in s}))
    }
    item_index_poi = {
        it: i for i, it in enumerate(sorted({x for s in meta.poi_meta.values() for x in s}))
    }

    model = PoeModel(
        user_index, poi_index_final, item_index_user, item_index_poi,
        hyper, seed, poi_init=poi_init, user_init=user_init,
    )

    poi_list = sorted(model.poi_index)
    opt = nm.SgdMomentum(model.params, hyper.lr, hyper.momentum)
    history = {"loss": [], "val_map": []}
    best = (model.state(), -1.0)

    for _ in range(hyper.epochs):
        order = rng.permutation(len(transitions))
        total = 0.0
        for idx in order:
            uid, prev_poi, prev_t, next_poi, next_t = transitions[idx]
            req = ScoreRequest(uid, ((prev_poi, prev_t),), next_t, ())
            negs = [
                poi_list[int(j)]
                for j in rng.integers(0, len(poi_list), size=hyper.n_neg)
                if poi_list[int(j)] != next_poi
            ]
            scores = [score(req, c, model, meta) for c in [next_poi] + negs]
            vec = nm.stack_scalars(scores)
            m = float(vec.value.max())
            lse = nm.log_(nm.sum_(nm.exp_(vec - m))) + m
            loss = lse - scores[0]
            if not math.isfinite(float(loss.value)):
                raise FloatingPointError(f"NaN loss on transition {transitions[idx]}")
            total += float(loss.value)
            opt.step(nm.grad(loss, model.params))
        history["loss"].append(total / len(transitions))
        vmap = validation_map(model, corpus.train, corpus.validation, meta)
        history["val_map"].append(vmap)
        if vmap > best[1]:
            best = (model.state(), vmap)

    if hyper.epochs > 0:
        model.load_state(best[0])
    history["best_val_map"] = best[1] if hyper.epochs > 0 else None
    return model, history
