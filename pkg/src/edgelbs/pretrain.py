"""POI-embedding pre-training: transition graph, geographically biased
random walks, skip-gram with negative sampling, and frequency-weighted
initial user embeddings.

The walk step distribution mixes a logistic geographic kernel with the
empirical transition frequency:

    p(q_j | q_i) = rho * k(q_i, q_j) / sum_k k(q_i, q_k)
                 + (1 - rho) * f(q_i, q_j) / sum_k f(q_i, q_k)

with k(q_i, q_j) = 1 / (1 + exp((d(q_i, q_j) - mu) / sigma)) and d the
haversine distance in km.  The geographic term normalizes over all
other POIs (truncated to the nearest ``geo_truncate``); the frequency
term over observed out-neighbors.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from edgelbs import kernels
from edgelbs.numerics import glorot_uniform

__all__ = [
    "PoiGraph",
    "WalkConfig",
    "DegenerateNodeError",
    "haversine_km",
    "geo_kernel",
    "build_graph",
    "transition_distribution",
    "random_walks",
    "skipgram_train",
    "init_user_embeddings",
    "pretrain_embeddings",
]

EARTH_RADIUS_KM = 6371.0088
SIGMA_FLOOR = 1e-6


class DegenerateNodeError(RuntimeError):
    """Node with no out-transitions while rho = 0 (no geographic term)."""


def haversine_km(lat1, lon1, lat2, lon2):
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = phi2 - phi1
    dlmb = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(a))


def geo_kernel(d, mu, sigma):
    """Logistic decay of distance: 1 / (1 + e^((d - mu) / sigma))."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    z = (d - mu) / sigma
    if z >= 0:
        return math.exp(-z) / (1.0 + math.exp(-z))
    return 1.0 / (1.0 + math.exp(z))


@dataclass
class PoiGraph:
    poi_ids: list                 # index -> poi id
    index: dict                   # poi id -> index
    coords: np.ndarray            # (n, 2) lat/lon
    counts: dict                  # i -> {j: transition count}
    mu: float
    sigma: float
    geo_truncate: int = 200
    _geo_cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.poi_ids)

    def geo_weights(self, i):
        """(indices, kernel values) for the nearest geo_truncate other POIs."""
        cached = self._geo_cache.get(i)
        if cached is not None:
            return cached
        lat, lon = self.coords[i]
        others = [j for j in range(len(self.poi_ids)) if j != i]
        dists = np.array(
            [haversine_km(lat, lon, self.coords[j][0], self.coords[j][1]) for j in others]
        )
        if len(others) > self.geo_truncate:
            keep = np.argsort(dists, kind="stable")[: self.geo_truncate]
            others = [others[k] for k in keep]
            dists = dists[keep]
        ks = np.array([geo_kernel(d, self.mu, self.sigma) for d in dists])
        result = (np.array(others, dtype=np.int64), ks)
        self._geo_cache[i] = result
        return result


@dataclass
class WalkConfig:
    rho: float = 0.0          # geographic/frequency mixing weight
    walk_length: int = 20
    walks_per_node: int = 10
    window: int = 3
    negatives: int = 5
    epochs: int = 3
    lr: float = 0.025
    seed: int = 0
    geo_truncate: int = 200

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must be in [0, 1], got {self.rho}")


def build_graph(train_log, poi_coords, geo_truncate=200):
    """Transition graph from the training split.

    poi_coords maps poi_id -> (lat, lon) and defines the node set (it
    may include POIs the split never visits).  mu/sigma are the mean and
    std of haversine distances over observed transition pairs.
    """
    poi_ids = sorted(poi_coords)
    index = {pid: i for i, pid in enumerate(poi_ids)}
    coords = np.array([poi_coords[pid] for pid in poi_ids], dtype=np.float64)

    counts = {}
    dists = []
    for recs in train_log.by_user().values():
        for prev, nxt in zip(recs, recs[1:]):
            i, j = index[prev.poi_id], index[nxt.poi_id]
            counts.setdefault(i, {})
            counts[i][j] = counts[i].get(j, 0) + 1
            dists.append(
                haversine_km(prev.lat, prev.lon, nxt.lat, nxt.lon)
            )
    mu = float(np.mean(dists)) if dists else 0.0
    sigma = float(np.std(dists)) if dists else 0.0
    if sigma <= 0:
        warnings.warn("degenerate distance spread; clamping sigma to 1e-6")
        sigma = SIGMA_FLOOR
    return PoiGraph(poi_ids, index, coords, counts, mu, sigma, geo_truncate)


def _normalize_geo(ks):
    """Kernel weights to probabilities; if every weight underflowed to
    zero (tiny sigma, all candidates far away) fall back to uniform."""
    total = ks.sum()
    if total <= 0.0:
        return np.full(ks.shape, 1.0 / ks.size)
    return ks / total


def transition_distribution(i, graph, rho):
    """Walk step distribution from node ``i`` as (indices, probabilities).

    A node with no observed out-transitions uses the pure geographic
    term when rho > 0; with rho = 0 it raises DegenerateNodeError (the
    walk driver restarts at a random node in that case).
    """
    out = graph.counts.get(i, {})
    if not out:
        if rho == 0.0 or len(graph) < 2:
            raise DegenerateNodeError(f"node {i} has no out-transitions and rho=0")
        idx, ks = graph.geo_weights(i)
        return idx, _normalize_geo(ks)

    probs = {}
    if rho > 0.0:
        idx, ks = graph.geo_weights(i)
        geo = _normalize_geo(ks)
        for j, g in zip(idx, geo):
            probs[int(j)] = rho * g
    total = sum(out.values())
    for j, c in out.items():
        probs[j] = probs.get(j, 0.0) + (1.0 - rho) * c / total

    ids = np.array(sorted(probs), dtype=np.int64)
    p = np.array([probs[int(j)] for j in ids])
    return ids, p


def _walk_tables(graph, rho):
    """CSR candidate/CDF tables for the kernel; degenerate nodes get an
    empty slice (kernel restarts there)."""
    n = len(graph)
    offsets = np.zeros(n + 1, dtype=np.int64)
    neigh_parts, cdf_parts = [], []
    for i in range(n):
        try:
            ids, p = transition_distribution(i, graph, rho)
        except DegenerateNodeError:
            ids, p = np.empty(0, dtype=np.int64), np.empty(0)
        neigh_parts.append(ids)
        cdf_parts.append(np.cumsum(p))
        offsets[i + 1] = offsets[i] + len(ids)
    neighbors = np.concatenate(neigh_parts) if neigh_parts else np.empty(0, dtype=np.int64)
    cdfs = np.concatenate(cdf_parts) if cdf_parts else np.empty(0)
    return cdfs, offsets, neighbors.astype(np.int64)


def random_walks(graph, config):
    """walks_per_node sequences of walk_length nodes per start node.

    Deterministic per config.seed; uses the compiled kernel when built.
    Returns an int64 array of shape (n * walks_per_node, walk_length).
    """
    if len(graph) == 0:
        raise ValueError("empty graph")
    rng = np.random.default_rng(config.seed)
    cdfs, offsets, neighbors = _walk_tables(graph, config.rho)
    n = len(graph)
    n_walks = n * config.walks_per_node
    starts = np.repeat(np.arange(n, dtype=np.int64), config.walks_per_node)
    n_steps = config.walk_length - 1
    uniforms = rng.random((n_walks, max(n_steps, 1)))[:, :n_steps]
    restarts = rng.integers(0, n, size=(n_walks, max(n_steps, 1)))[:, :n_steps].astype(np.int64)
    return kernels.walk_steps(
        np.ascontiguousarray(cdfs),
        offsets,
        neighbors,
        starts,
        np.ascontiguousarray(uniforms),
        np.ascontiguousarray(restarts),
    )


def skipgram_train(walks, n_nodes, dim, config):
    """Skip-gram with negative sampling over walk sequences.

    Maximizes log s(q_c . q_x) + sum_neg log s(-q_c . q_n) for every
    center/context pair within the window.  Negatives are uniform over
    the node set.  Returns (embedding table |Q| x dim, per-epoch losses).
    """
    walks = np.asarray(walks, dtype=np.int64)
    if walks.size == 0:
        raise ValueError("no walks to train on")
    rng = np.random.default_rng(config.seed + 1)
    emb_in = glorot_uniform(rng, (n_nodes, dim))
    emb_out = glorot_uniform(rng, (n_nodes, dim))

    centers, contexts = [], []
    for walk in walks:
        for pos, c in enumerate(walk):
            lo = max(0, pos - config.window)
            hi = min(len(walk), pos + config.window + 1)
            for x in range(lo, hi):
                if x != pos:
                    centers.append(c)
                    contexts.append(walk[x])
    centers = np.array(centers, dtype=np.int64)
    contexts = np.array(contexts, dtype=np.int64)

    losses = []
    for _ in range(config.epochs):
        negatives = rng.integers(0, n_nodes, size=(len(centers), config.negatives)).astype(np.int64)
        loss = kernels.sgns_epoch(emb_in, emb_out, centers, contexts, negatives, config.lr)
        losses.append(float(loss))
    return emb_in, losses


def init_user_embeddings(train_log, poi_emb, poi_index, rng=None):
    """Visit-frequency-weighted mean of POI embeddings per user:
    u = (1/|L_u|) * sum_j f_j * q_j.

    Users absent from the log get a random row and a flag.  Returns
    (user embedding dict, set of randomly initialized users).
    """
    dim = poi_emb.shape[1]
    users = {}
    for uid, recs in train_log.by_user().items():
        freq = {}
        for r in recs:
            freq[r.poi_id] = freq.get(r.poi_id, 0) + 1
        total = sum(freq.values())
        vec = np.zeros(dim)
        for pid, f in freq.items():
            vec += f * poi_emb[poi_index[pid]]
        users[uid] = vec / total
    return users


def pretrain_embeddings(train_log, poi_coords, dim, config):
    """Full pre-training pass: graph -> walks -> skip-gram -> user init.

    Returns (poi embedding table, poi index, user embedding dict, losses).
    """
    graph = build_graph(train_log, poi_coords, geo_truncate=config.geo_truncate)
    walks = random_walks(graph, config)
    emb, losses = skipgram_train(walks, len(graph), dim, config)
    users = init_user_embeddings(train_log, emb, graph.index)
    return emb, graph.index, users, losses
