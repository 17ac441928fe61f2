"""Key-factor evaluation model (NPE).

A decision is a small set of factors (identity, category, brand,
popularity bucket, user, context).  The model embeds the factors,
computes a self-projection attention matrix, estimates per-factor
key-factor likelihoods through a 3-layer perceptron, sparsifies them
with sparsemax, and scores the decision by the scalar projection of the
factor sum onto the likelihood-weighted aggregate embedding:

    VR(D) = sigmoid(f_hat . d / |d|),   d = sum_i l_i * f_i.

Training minimizes -sum_D log VR(D) - sum_D- log(1 - VR(D-)) over
positives and synthesized negatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from edgelbs import numerics as nm

__all__ = [
    "DecisionInstance",
    "PoiFactors",
    "NpeHyper",
    "NpeModel",
    "KeyFactorReport",
    "DecisionSynthSpec",
    "DegenerateEmbeddingError",
    "projection_matrix",
    "intent_embeddings",
    "factor_likelihoods",
    "visit_rate",
    "generate_negatives",
    "train_npe",
    "npe_gate",
    "brute_force_key_projection",
    "synthesize_decisions",
]

DEGENERATE_NORM = 1e-12


class DegenerateEmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class PoiFactors:
    """POI-derived factor bundle used when synthesizing negatives."""

    poi_id: str
    identity: str
    category: str
    brand: str
    popularity: str
    lat: float = 0.0
    lon: float = 0.0

    @property
    def as_list(self):
        return [self.identity, self.category, self.brand, self.popularity]


@dataclass(frozen=True)
class DecisionInstance:
    factors: tuple          # ordered factor identifiers, n >= 2
    label: int              # 1 = visited, 0 = synthesized negative
    poi: PoiFactors | None = None
    poi_slots: tuple = ()   # positions of the POI-derived factors

    def __post_init__(self):
        if len(self.factors) < 2:
            raise ValueError("a decision needs at least 2 factors")


@dataclass
class NpeHyper:
    dim: int = 8
    sparsity_lambda: int = 2      # soft target; enforced via tau_s, not a hard cap
    dropout: float = 0.0
    tau_s: float = 1.0            # sparsemax temperature
    thre1: float = 0.0
    reg_weight: float = 0.0       # optional weight on |sum l_i f_i| / |sum f_i|
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 40
    neg_ratio: int = 4
    neg_strategy: str = "nearby"
    batch_size: int = 16

    def __post_init__(self):
        if self.sparsity_lambda < 1:
            raise ValueError("sparsity_lambda must be >= 1")
        if self.tau_s <= 0:
            raise ValueError("tau_s must be positive")


class NpeModel:
    """Factor vocabulary, embedding table, and MLP parameters."""

    def __init__(self, vocab, hyper, seed):
        self.vocab = dict(vocab)  # factor id -> row index
        self.hyper = hyper
        rng = np.random.default_rng(seed)
        d = hyper.dim
        self.emb = nm.param(nm.glorot_uniform(rng, (len(vocab), d)))
        self.w1 = nm.param(nm.glorot_uniform(rng, (2 * d, d)))
        self.b1 = nm.param(np.zeros(d))
        self.w2 = nm.param(nm.glorot_uniform(rng, (d, d)))
        self.b2 = nm.param(np.zeros(d))
        self.w3 = nm.param(nm.glorot_uniform(rng, (d,)))

    @property
    def params(self):
        return [self.emb, self.w1, self.b1, self.w2, self.b2, self.w3]

    def factor_rows(self, instance):
        try:
            return np.array([self.vocab[f] for f in instance.factors], dtype=np.intp)
        except KeyError as exc:
            raise KeyError(f"factor {exc.args[0]!r} not in vocabulary") from None

    def save(self, path):
        nm.save_checkpoint(
            path,
            {
                "emb": self.emb.value,
                "w1": self.w1.value,
                "b1": self.b1.value,
                "w2": self.w2.value,
                "b2": self.b2.value,
                "w3": self.w3.value,
            },
        )


@dataclass
class KeyFactorReport:
    likelihoods: np.ndarray   # sparse weights over the instance's factors
    aggregated: np.ndarray    # d = l^T F
    visit_rate: float
    projection: float         # pre-sigmoid scalar projection f_hat.d/|d|
    degenerate: bool = False


# ---------------------------------------------------------------------------
# forward pieces (tape nodes in, tape nodes out)
# ---------------------------------------------------------------------------

def projection_matrix(f_node):
    """P_ij = f_i . f_j / |f_i| (so P_ii = |f_i|)."""
    norms_sq = nm.sum_(f_node * f_node, axis=1)
    min_norm = float(np.min(norms_sq.value))
    if min_norm < DEGENERATE_NORM**2:
        raise DegenerateEmbeddingError("zero-norm factor embedding")
    norms = nm.reshape_n(nm.sqrt_(norms_sq), (-1, 1))
    return nm.matmul(f_node, nm.transpose(f_node)) / norms


def intent_embeddings(f_node, p_node):
    """Row-softmax the projection matrix and mix the factor embeddings."""
    p_hat = nm.softmax_rows_n(p_node)
    return nm.matmul(p_hat, f_node)


def factor_likelihoods(f_node, f_hat_node, model, rng=None, train=False):
    """Sparse key-factor likelihood vector via the 3-layer MLP + sparsemax."""
    h = model.hyper
    cat = nm.concat_cols(f_hat_node, f_node)
    l1 = nm.dropout_n(nm.relu_n(nm.matmul(cat, model.w1) + model.b1), h.dropout, rng, train)
    l2 = nm.dropout_n(nm.relu_n(nm.matmul(l1, model.w2) + model.b2), h.dropout, rng, train)
    raw = nm.matmul(l2, model.w3)          # (n,) unnormalized likelihoods
    return nm.sparsemax_n(raw / h.tau_s)


def _forward(instance, model, rng=None, train=False):
    """Full forward pass; returns tape nodes (l_hat, d, proj_or_None, vr_or_None)."""
    rows = model.factor_rows(instance)
    f_node = nm.gather_rows(model.emb, rows)
    p = projection_matrix(f_node)
    f_hat_node = intent_embeddings(f_node, p)
    l_hat = factor_likelihoods(f_node, f_hat_node, model, rng, train)
    d = nm.matmul(l_hat, f_node)
    dnorm = math.sqrt(float(d.value @ d.value))
    if dnorm < DEGENERATE_NORM:
        return l_hat, d, None, None
    fsum = nm.sum_(f_node, axis=0)
    proj = nm.matmul(fsum, d) / nm.norm_(d)
    return l_hat, d, proj, nm.sigmoid_n(proj)


def visit_rate(instance, model):
    """Score one decision; degenerate aggregates get VR = 0.5 and a flag."""
    l_hat, d, proj, vr = _forward(instance, model)
    if proj is None:
        return KeyFactorReport(
            likelihoods=l_hat.value.copy(),
            aggregated=d.value.copy(),
            visit_rate=0.5,
            projection=0.0,
            degenerate=True,
        )
    return KeyFactorReport(
        likelihoods=l_hat.value.copy(),
        aggregated=d.value.copy(),
        visit_rate=float(vr.value),
        projection=float(proj.value),
    )


def npe_gate(report, thre1):
    """Pass iff the pre-sigmoid scalar projection reaches the threshold.
    Degenerate reports always fail."""
    if report.degenerate:
        return False
    return report.projection >= thre1


# ---------------------------------------------------------------------------
# negative synthesis
# ---------------------------------------------------------------------------

def generate_negatives(instance, pool, strategy, count, rng):
    """Copy the positive and swap its POI-derived factors for those of an
    alternative POI; user/context factors stay untouched.

    strategy "nearby" samples alternatives with inverse-distance
    weighting from the positive's POI; "same-category" prefers pool POIs
    sharing the positive's category (uniform fallback when none do).
    """
    if instance.poi is None or not instance.poi_slots:
        raise ValueError("instance carries no POI factor structure")
    candidates = [p for p in pool if p.identity != instance.poi.identity]
    if len(candidates) < 1 or (count > 0 and len(candidates) < min(count, 1)):
        raise ValueError(f"pool too small: {len(candidates)} alternatives available")
    if count == 0:
        return []

    if strategy == "nearby":
        from edgelbs.pretrain import haversine_km

        dists = np.array(
            [
                haversine_km(instance.poi.lat, instance.poi.lon, p.lat, p.lon)
                for p in candidates
            ]
        )
        weights = 1.0 / (dists + 1e-3)
    elif strategy == "same-category":
        same = np.array([p.category == instance.poi.category for p in candidates])
        weights = np.where(same, 1.0, 0.0)
        if weights.sum() == 0:
            weights = np.ones(len(candidates))
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    probs = weights / weights.sum()

    negatives = []
    for _ in range(count):
        alt = candidates[int(rng.choice(len(candidates), p=probs))]
        factors = list(instance.factors)
        for slot, value in zip(instance.poi_slots, alt.as_list):
            factors[slot] = value
        negatives.append(
            DecisionInstance(
                factors=tuple(factors), label=0, poi=alt, poi_slots=instance.poi_slots
            )
        )
    return negatives


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def instance_loss(instance, model, rng=None, train=False):
    """Tape node for one decision's cross-entropy term.

    -log VR(D) = softplus(-proj) for positives, softplus(proj) for
    negatives (numerically stable form of Eq-style cross-entropy).
    """
    l_hat, d, proj, _ = _forward(instance, model, rng, train)
    if proj is None:
        return nm.constant(math.log(2.0))  # VR = 0.5, no gradient
    loss = nm.softplus_n(-proj) if instance.label == 1 else nm.softplus_n(proj)
    h = model.hyper
    if h.reg_weight > 0.0:
        rows = model.factor_rows(instance)
        f_node = nm.gather_rows(model.emb, rows)
        fsum = nm.sum_(f_node, axis=0)
        loss = loss + h.reg_weight * (nm.norm_(d, eps=1e-12) / nm.norm_(fsum, eps=1e-12))
    return loss


def train_npe(positives, pool, hyper, seed, pinned_negatives=None, extra_vocab=()):
    """Mini-batch SGD on the visit-rate cross-entropy.

    Negatives are synthesized once up front (hyper.neg_ratio per
    positive) unless a pinned list is supplied.  The learning rate is
    halved when the 5-epoch smoothed loss stops decreasing.  Returns
    (model, per-epoch losses).

    extra_vocab lists factors that must be scoreable at serve time even
    if no training decision happens to contain them (e.g. hour buckets).
    """
    if not positives:
        raise ValueError("need at least one positive decision")
    rng = np.random.default_rng(seed)
    vocab_items = sorted(
        {f for inst in positives for f in inst.factors}
        | {f for p in pool for f in p.as_list}
        | set(extra_vocab)
    )
    vocab = {f: i for i, f in enumerate(vocab_items)}
    model = NpeModel(vocab, hyper, seed)

    if pinned_negatives is None:
        negatives = []
        for inst in positives:
            negatives.extend(
                generate_negatives(inst, pool, hyper.neg_strategy, hyper.neg_ratio, rng)
            )
    else:
        negatives = list(pinned_negatives)
    corpus = list(positives) + negatives

    opt = nm.SgdMomentum(model.params, hyper.lr, hyper.momentum)
    losses = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(corpus))
        total = 0.0
        for lo in range(0, len(order), hyper.batch_size):
            batch = [corpus[i] for i in order[lo : lo + hyper.batch_size]]
            grads = None
            for inst in batch:
                loss = instance_loss(inst, model, rng, train=True)
                if not math.isfinite(float(loss.value)):
                    raise FloatingPointError(
                        f"NaN loss on instance with factors {inst.factors}"
                    )
                total += float(loss.value)
                g = nm.grad(loss, model.params)
                grads = g if grads is None else [a + b for a, b in zip(grads, g)]
            opt.step([g / len(batch) for g in grads])
        losses.append(total / len(corpus))
        # learning-rate halving when the smoothed loss plateaus
        if epoch >= 10 and np.mean(losses[-5:]) >= np.mean(losses[-10:-5]):
            opt.halve_lr()
    return model, losses


# ---------------------------------------------------------------------------
# brute-force reference for the combinatorial objective (tests only)
# ---------------------------------------------------------------------------

def brute_force_key_projection(embeddings, sparsity):
    """Enumerate supports of size <= sparsity over tiny factor sets and
    maximize (sum_i a_i f_i).f_hat / |sum_i a_i f_i| with uniform a on
    the support.  Used only as a test oracle."""
    from itertools import combinations

    f = np.asarray(embeddings, dtype=np.float64)
    n = f.shape[0]
    if n > 6:
        raise ValueError("oracle is for n <= 6 only")
    f_hat = f.sum(axis=0)
    best, best_support = -np.inf, None
    for size in range(1, sparsity + 1):
        for support in combinations(range(n), size):
            d = f[list(support)].mean(axis=0)
            norm = np.linalg.norm(d)
            if norm < DEGENERATE_NORM:
                continue
            val = float(f_hat @ d / norm)
            if val > best:
                best, best_support = val, support
    return best, best_support


# ---------------------------------------------------------------------------
# planted synthetic decisions (2 of 6 factors carry the label)
# ---------------------------------------------------------------------------

@dataclass
class DecisionSynthSpec:
    n_train: int = 150
    n_heldout: int = 50
    n_good_pois: int = 20
    n_bad_pois: int = 20
    n_good_categories: int = 4
    n_bad_categories: int = 4
    n_brands: int = 8
    n_popularity: int = 4
    n_users: int = 10
    n_contexts: int = 6


def _make_poi(rng, tag, idx, n_cats, n_brands, n_pop):
    # brand/popularity are assigned by index so their distributions are
    # identical across the good and bad pools: only identity and
    # category carry label signal.
    return PoiFactors(
        poi_id=f"{tag}{idx}",
        identity=f"id:{tag}{idx}",
        category=f"cat:{tag}{idx % n_cats}",
        brand=f"brand:{idx % n_brands}",
        popularity=f"pop:{idx % n_pop}",
        lat=float(rng.uniform(-0.5, 0.5)),
        lon=float(rng.uniform(-0.5, 0.5)),
    )


def synthesize_decisions(spec, seed):
    """Decision corpus where exactly identity and category separate the
    classes: good POIs (visited) and bad POIs (negatives pool) share the
    brand/popularity/user/context pools but differ in identity and
    category vocabularies.

    Returns (train positives, held-out positives, negative pool,
    planted key-pair per held-out instance).
    """
    rng = np.random.default_rng(seed)
    good = [
        _make_poi(rng, "g", i, spec.n_good_categories, spec.n_brands, spec.n_popularity)
        for i in range(spec.n_good_pois)
    ]
    bad = [
        _make_poi(rng, "b", i, spec.n_bad_categories, spec.n_brands, spec.n_popularity)
        for i in range(spec.n_bad_pois)
    ]

    def draw(count):
        instances = []
        for _ in range(count):
            poi = good[int(rng.integers(len(good)))]
            extra = [
                f"user:{int(rng.integers(spec.n_users))}",
                f"ctx:{int(rng.integers(spec.n_contexts))}",
            ]
            factors = poi.as_list + extra
            order = rng.permutation(len(factors))
            shuffled = tuple(factors[i] for i in order)
            slots = tuple(int(np.where(order == s)[0][0]) for s in range(4))
            instances.append(
                DecisionInstance(factors=shuffled, label=1, poi=poi, poi_slots=slots)
            )
        return instances

    train = draw(spec.n_train)
    heldout = draw(spec.n_heldout)
    planted = [{inst.poi.identity, inst.poi.category} for inst in heldout]
    return train, heldout, bad, planted
