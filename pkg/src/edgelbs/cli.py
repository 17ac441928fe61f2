"""Command-line driver.

Subcommands: gen-synth, prep, pretrain, train-npe, train-poe, simulate,
experiment, evaluate.  Every stochastic subcommand requires --seed and
is bit-for-bit reproducible given (config, seed).  All outputs land
under --out together with a manifest listing inputs, config hash, and
seed.

Exit codes: 0 success, 1 usage error, 2 data/config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from edgelbs import anonymize as anon
from edgelbs import config as cfg_mod
from edgelbs import dataset as ds
from edgelbs import experiment as exp_mod
from edgelbs import metrics as met
from edgelbs import npe as npe_mod
from edgelbs import pipeline as pipe_mod
from edgelbs import poe as poe_mod
from edgelbs import pretrain as pre_mod
from edgelbs import numerics as nm

__all__ = ["main"]


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_manifest(out_dir, subcommand, args, inputs, outputs):
    manifest = {
        "subcommand": subcommand,
        "seed": args.seed,
        "config": os.path.abspath(args.config) if args.config else None,
        "config_sha256": cfg_mod.config_sha256(args.config) if args.config else None,
        "inputs": sorted(os.path.abspath(p) for p in inputs),
        "outputs": sorted(outputs),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return path


def _load_cfg(args):
    if args.config:
        if not os.path.exists(args.config):
            raise FileNotFoundError(f"config file not found: {args.config}")
        return cfg_mod.load_config(path=args.config)
    return cfg_mod.load_config(text=cfg_mod.DEFAULT_CONFIG)


def _apply_overrides(cfg, args):
    for name, target in (
        ("rho", ("pretrain", "rho")),
        ("alpha", ("poe", "alpha")),
        ("beta", ("poe", "beta")),
        ("dim", ("poe", "dim")),
        ("k", ("anonymize", "k")),
    ):
        value = getattr(args, name.replace("-", "_"), None)
        if value is not None:
            section, key = target
            setattr(getattr(cfg, section), key, value)
    return cfg


def _read_log(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"check-in file not found: {path}")
    with open(path, encoding="utf-8") as f:
        return ds.parse_checkins(f)


def _read_meta(poi_path=None, user_path=None):
    poi_f = open(poi_path, encoding="utf-8") if poi_path else None
    user_f = open(user_path, encoding="utf-8") if user_path else None
    try:
        return ds.parse_metadata(poi_f, user_f)
    finally:
        for f in (poi_f, user_f):
            if f:
                f.close()


def _poi_coords(log):
    """Mean coordinate per POI from its check-ins."""
    sums = {}
    for r in log.records:
        lat, lon, n = sums.get(r.poi_id, (0.0, 0.0, 0))
        sums[r.poi_id] = (lat + r.lat, lon + r.lon, n + 1)
    return {pid: (lat / n, lon / n) for pid, (lat, lon, n) in sums.items()}


def _synth_world(cfg, seed):
    """Synthetic corpus + splits from config: the self-contained world
    used by simulate/experiment."""
    log, meta, truth = ds.generate_synthetic(cfg.dataset.synth, seed)
    log = ds.filter_sparse(log, cfg.dataset.min_user, cfg.dataset.min_poi)
    corpus = ds.split(log, cfg.dataset.ratios)
    return log, meta, truth, corpus


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_gen_synth(args):
    cfg = _load_cfg(args)
    log, meta, truth = ds.generate_synthetic(cfg.dataset.synth, args.seed)
    out = args.out
    paths = {
        "checkins": os.path.join(out, "checkins.tsv"),
        "poi_meta": os.path.join(out, "poi_meta.tsv"),
        "user_meta": os.path.join(out, "user_meta.tsv"),
        "truth": os.path.join(out, "truth.json"),
    }
    with open(paths["checkins"], "w", encoding="utf-8") as f:
        f.write(ds.serialize_checkins(log))
    with open(paths["poi_meta"], "w", encoding="utf-8") as f:
        f.write(ds.serialize_metadata(meta.poi_meta))
    with open(paths["user_meta"], "w", encoding="utf-8") as f:
        f.write(ds.serialize_metadata(meta.user_meta))
    truth.save(paths["truth"])
    _write_manifest(out, "gen-synth", args, [], sorted(paths.values()))
    print(f"wrote {len(log)} check-ins to {paths['checkins']}")
    return 0


def _cmd_prep(args):
    cfg = _load_cfg(args)
    log, report = _read_log(args.checkins)
    filtered = ds.filter_sparse(log, cfg.dataset.min_user, cfg.dataset.min_poi)
    corpus = ds.split(filtered, cfg.dataset.ratios)
    out = args.out
    outputs = []
    for name, part in (
        ("train", corpus.train), ("validation", corpus.validation), ("test", corpus.test)
    ):
        path = os.path.join(out, f"{name}.tsv")
        with open(path, "w", encoding="utf-8") as f:
            f.write(ds.serialize_checkins(part))
        outputs.append(path)
    summary = {
        "parsed": len(log), "malformed": report.malformed,
        "after_filter": len(filtered),
        "train": len(corpus.train), "validation": len(corpus.validation),
        "test": len(corpus.test),
    }
    report_path = os.path.join(out, "prep_report.json")
    with open(report_path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    outputs.append(report_path)
    _write_manifest(out, "prep", args, [args.checkins], outputs)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _cmd_pretrain(args):
    cfg = _apply_overrides(_load_cfg(args), args)
    train, _ = _read_log(args.train)
    coords = _poi_coords(train)
    walk_cfg = dataclasses.replace(cfg.pretrain, seed=args.seed)
    emb, index, users, losses = pre_mod.pretrain_embeddings(
        train, coords, cfg.poe.dim, walk_cfg
    )
    out = args.out
    emb_path = os.path.join(out, "poi_embeddings.npz")
    nm.save_checkpoint(emb_path, {"poi_emb": emb})
    index_path = os.path.join(out, "poi_index.json")
    with open(index_path, "w", encoding="utf-8") as f:
        json.dump(index, f, indent=1, sort_keys=True)
    losses_path = os.path.join(out, "pretrain_losses.csv")
    exp_mod.write_csv(losses_path, ("epoch", "loss"), list(enumerate(losses)))
    _write_manifest(out, "pretrain", args, [args.train], [emb_path, index_path, losses_path])
    print(f"pretrained {emb.shape[0]} POI embeddings (dim {emb.shape[1]})")
    return 0


def _cmd_train_npe(args):
    cfg = _apply_overrides(_load_cfg(args), args)
    train, _ = _read_log(args.train)
    meta = _read_meta(poi_path=args.poi_meta)
    extractor = pipe_mod.FactorExtractor.from_corpus(train, meta, _poi_coords(train))
    positives = pipe_mod.build_decision_corpus(train, extractor)
    pool = list(extractor.poi_factors.values())
    model, losses = npe_mod.train_npe(positives, pool, cfg.npe, args.seed,
                                      extra_vocab=extractor.context_vocab)
    out = args.out
    model_path = os.path.join(out, "npe_model.npz")
    model.save(model_path)
    vocab_path = os.path.join(out, "npe_vocab.json")
    with open(vocab_path, "w", encoding="utf-8") as f:
        json.dump(model.vocab, f, indent=1, sort_keys=True)
    losses_path = os.path.join(out, "npe_losses.csv")
    exp_mod.write_csv(losses_path, ("epoch", "loss"), list(enumerate(losses)))
    _write_manifest(
        out, "train-npe", args,
        [args.train, args.poi_meta], [model_path, vocab_path, losses_path],
    )
    print(f"trained NPE on {len(positives)} positives; final loss {losses[-1]:.4f}")
    return 0


def _load_corpus_dir(data_dir):
    parts = {}
    for name in ("train", "validation", "test"):
        path = os.path.join(data_dir, f"{name}.tsv")
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing split file: {path}")
        parts[name], _ = _read_log(path)
    return ds.SplitCorpus(parts["train"], parts["validation"], parts["test"], (0.7, 0.2, 0.1))


def _cmd_train_poe(args):
    cfg = _apply_overrides(_load_cfg(args), args)
    corpus = _load_corpus_dir(args.data)
    meta = _read_meta(
        poi_path=os.path.join(args.data, "poi_meta.tsv")
        if os.path.exists(os.path.join(args.data, "poi_meta.tsv")) else None,
        user_path=os.path.join(args.data, "user_meta.tsv")
        if os.path.exists(os.path.join(args.data, "user_meta.tsv")) else None,
    )
    pretrained = None
    if args.pretrained:
        table = nm.load_checkpoint(os.path.join(args.pretrained, "poi_embeddings.npz"))
        with open(os.path.join(args.pretrained, "poi_index.json"), encoding="utf-8") as f:
            index = json.load(f)
        pretrained = (table["poi_emb"], index)
    model, history = poe_mod.train_poe(corpus, meta, cfg.poe, args.seed, pretrained=pretrained)
    out = args.out
    model_path = os.path.join(out, "poe_model.npz")
    model.save(model_path)
    index_path = os.path.join(out, "poe_indexes.json")
    with open(index_path, "w", encoding="utf-8") as f:
        json.dump(
            {
                "user_index": model.user_index, "poi_index": model.poi_index,
                "item_index_user": model.item_index_user,
                "item_index_poi": model.item_index_poi,
            },
            f, indent=1, sort_keys=True,
        )
    hist_path = os.path.join(out, "poe_history.csv")
    exp_mod.write_csv(
        hist_path, ("epoch", "loss", "val_map"),
        [(i, l, m) for i, (l, m) in enumerate(zip(history["loss"], history["val_map"]))],
    )
    _write_manifest(out, "train-poe", args, [args.data], [model_path, index_path, hist_path])
    print(f"best validation MAP {history['best_val_map']:.4f}")
    return 0


def _build_world_models(cfg, seed, log, meta, truth, corpus):
    """Train the NPE/POE pair on a corpus and calibrate thresholds."""
    coords = truth.poi_coords if truth is not None else _poi_coords(log)
    walk_cfg = dataclasses.replace(cfg.pretrain, seed=seed)
    emb, index, users, _ = pre_mod.pretrain_embeddings(
        corpus.train, coords, cfg.poe.dim, walk_cfg
    )
    poe_model, _ = poe_mod.train_poe(
        corpus, meta, cfg.poe, seed, pretrained=(emb, index), user_init=users
    )
    extractor = pipe_mod.FactorExtractor.from_corpus(corpus.train, meta, coords)
    positives = pipe_mod.build_decision_corpus(corpus.train, extractor)
    pool = list(extractor.poi_factors.values())
    npe_model, _ = npe_mod.train_npe(positives, pool, cfg.npe, seed,
                                     extra_vocab=extractor.context_vocab)

    # calibrate gates on validation visits
    projections, aggregates = [], []
    val_users = corpus.validation.by_user()
    all_pois = tuple(sorted(poe_model.poi_index))
    for uid, recs in sorted(val_users.items()):
        for r in recs[:3]:
            report = npe_mod.visit_rate(
                extractor.decision(uid, r.poi_id, r.timestamp), npe_model
            )
            if not report.degenerate:
                projections.append(report.projection)
            if uid in poe_model.user_index:
                req = poe_mod.ScoreRequest(
                    uid, ((r.poi_id, r.timestamp),), r.timestamp + 3600.0, all_pois[:8]
                )
                ranked = poe_mod.rank_candidates(req, poe_model, meta)
                _, agg = poe_mod.poe_gate(ranked, 0.0)
                aggregates.append(agg)
    thre1, thre2 = pipe_mod.calibrate_thresholds(
        projections or [0.0], aggregates or [0.5], cfg.pipeline.target_acceptance
    )
    return pipe_mod.PipelineModels(
        npe_model=npe_model, poe_model=poe_model, extractor=extractor,
        meta=meta, thre1=thre1, thre2=thre2,
    ), coords


def _cmd_simulate(args):
    cfg = _apply_overrides(_load_cfg(args), args)
    log, meta, truth, corpus = _synth_world(cfg, args.seed)
    models, coords = _build_world_models(cfg, args.seed, log, meta, truth, corpus)

    pl = cfg.pipeline
    poi_ids = sorted(coords)
    n_edge = max(1, int(len(poi_ids) * pl.edge_fraction))
    edge = pipe_mod.SimServer(
        "edge", {p: coords[p] for p in poi_ids[:n_edge]},
        latency_ms=pl.edge_latency_ms, degrade_prob=pl.degrade_prob, top_k=pl.top_k,
    )
    cloud = pipe_mod.SimServer(
        "cloud", dict(coords), latency_ms=pl.cloud_latency_ms, top_k=pl.top_k,
    )
    pipe_cfg = pipe_mod.PipelineConfig(
        k=cfg.anonymize.k, region=cfg.anonymize.region,
        attr_vocab=cfg.anonymize.attr_vocab, top_k=pl.top_k,
    )

    rng = np.random.default_rng(args.seed)
    table = anon.PseudonymTable()
    histories = {
        uid: tuple((r.poi_id, r.timestamp) for r in recs)
        for uid, recs in corpus.train.by_user().items()
    }
    users = sorted(histories)
    rows, trace_lines = [], []
    region = pipe_cfg.region
    for i in range(pl.n_requests):
        uid = users[int(rng.integers(len(users)))]
        loc = (
            region.center[0] + float(rng.uniform(-1, 1)) * region.half_extent[0] * 0.9,
            region.center[1] + float(rng.uniform(-1, 1)) * region.half_extent[1] * 0.9,
        )
        req = anon.ServiceRequest(
            uid, loc, pipe_cfg.attr_vocab[int(rng.integers(len(pipe_cfg.attr_vocab)))],
            time=histories[uid][-1][1] + 3600.0,
        )
        result = pipe_mod.handle_request(
            req, table, edge, cloud, models, pipe_cfg,
            seed=int(rng.integers(2**32)), history=histories[uid],
        )
        rows.append((i, result.source, int(result.low_confidence), result.latency_ms))
        trace_lines.append(pipe_mod.trace_to_jsonl(result.trace))

    out = args.out
    summary_path = os.path.join(out, "simulation.csv")
    exp_mod.write_csv(summary_path, ("request", "source", "low_confidence", "latency_ms"), rows)
    trace_path = os.path.join(out, "traces.jsonl")
    with open(trace_path, "w", encoding="utf-8") as f:
        f.writelines(trace_lines)
    _write_manifest(args.out, "simulate", args, [], [summary_path, trace_path])
    n_edge_answers = sum(1 for r in rows if r[1] == "edge")
    print(f"{n_edge_answers}/{len(rows)} requests answered by the edge")
    return 0


def _cmd_experiment(args):
    cfg = _apply_overrides(_load_cfg(args), args)
    _, meta, truth, corpus = _synth_world(cfg, args.seed)
    tables = exp_mod.run_experiment(corpus, meta, truth.poi_coords, cfg, args.seed, args.out)
    outputs = [
        os.path.join(args.out, f"{name}_sweep.csv") for name in tables
    ]
    _write_manifest(args.out, "experiment", args, [], outputs)
    for name, rows in tables.items():
        print(f"{name}: {rows}")
    return 0


def _cmd_evaluate(args):
    cfg = _apply_overrides(_load_cfg(args), args)
    corpus = _load_corpus_dir(args.data)
    meta = _read_meta(
        poi_path=os.path.join(args.data, "poi_meta.tsv")
        if os.path.exists(os.path.join(args.data, "poi_meta.tsv")) else None,
        user_path=os.path.join(args.data, "user_meta.tsv")
        if os.path.exists(os.path.join(args.data, "user_meta.tsv")) else None,
    )
    state = nm.load_checkpoint(os.path.join(args.model, "poe_model.npz"))
    with open(os.path.join(args.model, "poe_indexes.json"), encoding="utf-8") as f:
        idx = json.load(f)
    model = poe_mod.PoeModel(
        idx["user_index"], idx["poi_index"], idx["item_index_user"],
        idx["item_index_poi"], cfg.poe, seed=0,
    )
    model.load_state(state)

    all_pois = tuple(sorted(model.poi_index))
    rng = np.random.default_rng(args.seed)
    results, pos_scores, neg_scores = [], [], []
    for uid, prev_poi, prev_t, next_poi, next_t in poe_mod._cross_split_transitions(
        corpus.train, corpus.test
    ):
        if uid not in model.user_index or next_poi not in model.poi_index:
            continue
        req = poe_mod.ScoreRequest(uid, ((prev_poi, prev_t),), next_t, all_pois)
        ranked = poe_mod.rank_candidates(req, model, meta)
        scores = dict(ranked)
        results.append(met.RankedResult([cid for cid, _ in ranked], {next_poi}))
        pos_scores.append(scores[next_poi])
        others = [c for c in all_pois if c != next_poi]
        neg_scores.append(scores[others[int(rng.integers(len(others)))]])

    if not results:
        raise ValueError("no scoreable test transitions")
    rows = [("map", "", met.mean_average_precision(results)),
            ("auc", "", met.auc(pos_scores, neg_scores))]
    for k in (1, 5, 10):
        triples = [met.precision_recall_f1(r, k) for r in results]
        for name, j in (("prec", 0), ("recall", 1), ("f1", 2)):
            rows.append((name, k, float(np.mean([t[j] for t in triples]))))
    out_path = os.path.join(args.out, "metrics.csv")
    exp_mod.write_csv(out_path, ("metric", "k", "value"), rows)
    _write_manifest(args.out, "evaluate", args, [args.data, args.model], [out_path])
    print(f"wrote {out_path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _build_parser():
    parser = Parser(prog="edgelbs", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, seed_required=True):
        p.add_argument("--config", help="INI config file (defaults used when omitted)")
        p.add_argument("--seed", type=int, required=seed_required)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-synth", help="generate a synthetic check-in corpus")
    common(p)
    p.set_defaults(handler=_cmd_gen_synth)

    p = sub.add_parser("prep", help="parse, filter, and split a check-in file")
    common(p, seed_required=False)
    p.add_argument("--checkins", required=True)
    p.set_defaults(handler=_cmd_prep)

    p = sub.add_parser("pretrain", help="pre-train POI embeddings")
    common(p)
    p.add_argument("--train", required=True, help="training-split TSV")
    p.add_argument("--rho", type=float)
    p.add_argument("--dim", type=int)
    p.set_defaults(handler=_cmd_pretrain)

    p = sub.add_parser("train-npe", help="train the key-factor model")
    common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--poi-meta", required=True)
    p.set_defaults(handler=_cmd_train_npe)

    p = sub.add_parser("train-poe", help="train the next-POI model")
    common(p)
    p.add_argument("--data", required=True, help="directory with train/validation/test.tsv")
    p.add_argument("--pretrained", help="directory from the pretrain subcommand")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--dim", type=int)
    p.set_defaults(handler=_cmd_train_poe)

    p = sub.add_parser("simulate", help="run the edge/cloud routing simulation")
    common(p)
    p.add_argument("--k", type=int)
    p.set_defaults(handler=_cmd_simulate)

    p = sub.add_parser("experiment", help="run the configured ablation sweeps")
    common(p)
    p.set_defaults(handler=_cmd_experiment)

    p = sub.add_parser("evaluate", help="score a trained POE model on the test split")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="directory from train-poe")
    p.set_defaults(handler=_cmd_evaluate)

    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    try:
        os.makedirs(args.out, exist_ok=True)
        return args.handler(args)
    except (FileNotFoundError, ValueError, KeyError, ds.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
