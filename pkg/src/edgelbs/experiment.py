"""Ablation sweeps: pre-training mixing weight rho, metadata blend
alpha/beta, and hidden dimension.  Each sweep trains a POE model per
grid point and reports the best validation MAP as a CSV table.

The "-" row of the rho sweep means no pre-training at all: POI and
user embeddings start random.
"""

from __future__ import annotations

import dataclasses

from edgelbs import poe as poe_mod
from edgelbs import pretrain as pre_mod

__all__ = ["run_experiment", "write_csv", "rho_sweep", "alpha_beta_sweep", "dim_sweep"]


def _train_map(corpus, meta, hyper, seed, pretrained=None, user_init=None):
    _, history = poe_mod.train_poe(
        corpus, meta, hyper, seed, pretrained=pretrained, user_init=user_init
    )
    return history["best_val_map"]


def _pretrained(corpus, poi_coords, dim, walk_cfg, rho, seed):
    cfg = dataclasses.replace(walk_cfg, rho=rho, seed=seed)
    emb, index, users, _ = pre_mod.pretrain_embeddings(corpus.train, poi_coords, dim, cfg)
    return (emb, index), users


def rho_sweep(corpus, meta, poi_coords, poe_hyper, walk_cfg, grid, seed):
    rows = []
    for token in grid:
        if token == "-":
            val = _train_map(corpus, meta, poe_hyper, seed)
        else:
            pretrained, users = _pretrained(
                corpus, poi_coords, poe_hyper.dim, walk_cfg, float(token), seed
            )
            val = _train_map(
                corpus, meta, poe_hyper, seed, pretrained=pretrained, user_init=users
            )
        rows.append((token if token == "-" else f"{float(token):g}", val))
    return rows


def alpha_beta_sweep(corpus, meta, poi_coords, poe_hyper, walk_cfg, alpha_grid,
                     beta_grid, seed):
    pretrained, users = _pretrained(
        corpus, poi_coords, poe_hyper.dim, walk_cfg, walk_cfg.rho, seed
    )
    rows = []
    for alpha in alpha_grid:
        h = dataclasses.replace(poe_hyper, alpha=alpha, use_meta=True)
        rows.append(
            ("alpha", f"{alpha:g}",
             _train_map(corpus, meta, h, seed, pretrained, users))
        )
    for beta in beta_grid:
        h = dataclasses.replace(poe_hyper, beta=beta, use_meta=True)
        rows.append(
            ("beta", f"{beta:g}",
             _train_map(corpus, meta, h, seed, pretrained, users))
        )
    return rows


def dim_sweep(corpus, meta, poi_coords, poe_hyper, walk_cfg, grid, seed):
    rows = []
    for dim in grid:
        h = dataclasses.replace(poe_hyper, dim=dim)
        pretrained, users = _pretrained(corpus, poi_coords, dim, walk_cfg, walk_cfg.rho, seed)
        rows.append((dim, _train_map(corpus, meta, h, seed, pretrained, users)))
    return rows


def write_csv(path, header, rows):
    """Deterministic CSV: fixed 6-decimal float formatting."""
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.6f}"
        return str(v)

    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(fmt(v) for v in row) + "\n")


def run_experiment(corpus, meta, poi_coords, cfg, seed, out_dir):
    """Run the configured sweeps; returns {sweep name: rows} and writes
    one CSV per sweep under out_dir."""
    import os

    ex = cfg.experiment
    tables = {}
    if "rho" in ex.sweeps:
        rows = rho_sweep(corpus, meta, poi_coords, cfg.poe, cfg.pretrain, ex.rho_grid, seed)
        tables["rho"] = rows
        write_csv(os.path.join(out_dir, "rho_sweep.csv"), ("rho", "map"), rows)
    if "alphabeta" in ex.sweeps:
        rows = alpha_beta_sweep(
            corpus, meta, poi_coords, cfg.poe, cfg.pretrain,
            ex.alpha_grid, ex.beta_grid, seed,
        )
        tables["alphabeta"] = rows
        write_csv(
            os.path.join(out_dir, "alphabeta_sweep.csv"),
            ("parameter", "value", "map"), rows,
        )
    if "dim" in ex.sweeps:
        rows = dim_sweep(corpus, meta, poi_coords, cfg.poe, cfg.pretrain, ex.dim_grid, seed)
        tables["dim"] = rows
        write_csv(os.path.join(out_dir, "dim_sweep.csv"), ("dim", "map"), rows)
    return tables
