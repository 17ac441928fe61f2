"""Pure NumPy fallback for the hot kernels.

Mirrors edgelbs.kernels._fast operation-for-operation so both backends
consume the same pre-drawn random numbers and produce the same walks
and embeddings for a given seed.
"""

from __future__ import annotations

import math

import numpy as np


def walk_steps(cdfs, offsets, neighbors, starts, uniforms, restarts):
    """Random walks over per-node CDFs.

    cdfs/neighbors are flat arrays sliced by offsets (CSR layout);
    node i's candidates are neighbors[offsets[i]:offsets[i+1]] with
    cumulative probabilities cdfs[offsets[i]:offsets[i+1]].  A node with
    no candidates restarts the walk at the pre-drawn restart node.

    Returns an int64 array of shape (n_walks, walk_len) of node ids.
    """
    n_walks, n_steps = uniforms.shape
    out = np.empty((n_walks, n_steps + 1), dtype=np.int64)
    for w in range(n_walks):
        node = int(starts[w])
        out[w, 0] = node
        for s in range(n_steps):
            lo, hi = int(offsets[node]), int(offsets[node + 1])
            if lo == hi:
                node = int(restarts[w, s])
            else:
                j = lo + int(np.searchsorted(cdfs[lo:hi], uniforms[w, s], side="right"))
                if j >= hi:
                    j = hi - 1
                node = int(neighbors[j])
            out[w, s + 1] = node
        del node
    return out


def sgns_epoch(emb_in, emb_out, centers, contexts, negatives, lr):
    """One epoch of skip-gram negative-sampling SGD, in place.

    centers/contexts: int arrays of pair endpoints; negatives: int array
    (n_pairs, n_neg) of pre-drawn negative node ids.  Returns the summed
    loss -log s(v.u+) - sum log s(-v.u-) over all pairs.
    """
    n_pairs, n_neg = negatives.shape
    loss = 0.0
    for i in range(n_pairs):
        c = int(centers[i])
        v = emb_in[c]
        accum = np.zeros_like(v)
        for t in range(n_neg + 1):
            if t == 0:
                target, label = int(contexts[i]), 1.0
            else:
                target, label = int(negatives[i, t - 1]), 0.0
            u = emb_out[target]
            s = float(v @ u)
            p = 1.0 / (1.0 + math.exp(-s)) if s >= 0 else math.exp(s) / (1.0 + math.exp(s))
            loss -= math.log(max(p if label else 1.0 - p, 1e-12))
            g = (p - label) * lr
            accum += g * u
            emb_out[target] = u - g * v
        emb_in[c] = v - accum
    return loss
