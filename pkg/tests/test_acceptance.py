"""Acceptance gate: one test per shipped guarantee, with the tolerance
each guarantee is specified at.  Each test prints a PASS line so a full
run doubles as a checklist."""

import filecmp
import json
import os
import random
import time
from itertools import combinations

import numpy as np
import pytest
from scipy import stats

from edgelbs import anonymize as anon
from edgelbs import crypto
from edgelbs import dataset as ds
from edgelbs import kernels
from edgelbs import metrics as met
from edgelbs import npe as npe_mod
from edgelbs import numerics as nm
from edgelbs import pipeline as pipe
from edgelbs import poe as poe_mod
from edgelbs import pretrain
from edgelbs.cli import main as cli_main

CONFIG_PATH = os.path.join(os.path.dirname(__file__), "..", "configs", "synthetic.ini")


def _report(name, detail=""):
    print(f"PASS {name}" + (f" ({detail})" if detail else ""))


# ---------------------------------------------------------------------------
# 1. crypto correctness
# ---------------------------------------------------------------------------

def test_acceptance_1_crypto_correctness():
    start = time.time()
    rng = random.Random(0)
    for key in (crypto.RsaKeyPair.from_primes(5, 11), crypto.keygen(512, seed=0)):
        for m in (0, 1, 2, key.n - 1):
            assert crypto.decrypt(crypto.encrypt(m, key.public), key.private) == m
            assert crypto.verify(crypto.sign(m, key.private), m, key.public)
        for _ in range(1000):
            m1 = rng.randrange(key.n)
            m2 = rng.randrange(key.n)
            prod = crypto.homomorphic_multiply(
                crypto.encrypt(m1, key.public), crypto.encrypt(m2, key.public)
            )
            assert crypto.decrypt(prod, key.private) == (m1 * m2) % key.n
    elapsed = time.time() - start
    assert elapsed < 10.0
    _report("criterion 1: crypto correctness", f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. sparsemax oracle equivalence
# ---------------------------------------------------------------------------

def _brute_force_projection(z):
    n = z.size
    best, best_dist = None, np.inf
    for size in range(1, n + 1):
        for support in combinations(range(n), size):
            tau = (z[list(support)].sum() - 1.0) / size
            p = np.maximum(z - tau, 0.0)
            if set(np.nonzero(p)[0]) != set(support):
                continue
            dist = float(((p - z) ** 2).sum())
            if dist < best_dist:
                best, best_dist = p, dist
    return best


def test_acceptance_2_sparsemax_oracle():
    start = time.time()
    rng = np.random.default_rng(1)
    for _ in range(1000):
        z = rng.normal(0, 3, size=int(rng.integers(1, 9)))
        got = nm.sparsemax(z)
        assert np.max(np.abs(got - _brute_force_projection(z))) < 1e-6
        assert abs(got.sum() - 1.0) < 1e-12 and got.min() >= 0.0
    elapsed = time.time() - start
    assert elapsed < 5.0
    _report("criterion 2: sparsemax oracle equivalence", f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. gradient checks
# ---------------------------------------------------------------------------

def _max_rel_err(loss_fn, params, h=1e-5):
    grads = nm.grad(loss_fn(), params)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.value.ravel()
        gflat = np.asarray(g).ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(loss_fn().value)
            flat[i] = orig - h
            lm = float(loss_fn().value)
            flat[i] = orig
            num = (lp - lm) / (2.0 * h)
            worst = max(worst, abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), 1e-6))
    return worst


def test_acceptance_3_gradient_checks():
    start = time.time()
    # NPE loss at a generic (jittered) point so no ReLU sits exactly on 0
    spec = npe_mod.DecisionSynthSpec(n_train=4, n_heldout=1, n_good_pois=4, n_bad_pois=4)
    train, _, bad, _ = npe_mod.synthesize_decisions(spec, seed=0)
    vocab = sorted({f for i in train for f in i.factors} | {f for p in bad for f in p.as_list})
    model = npe_mod.NpeModel({f: i for i, f in enumerate(vocab)},
                             npe_mod.NpeHyper(dim=4), seed=1)
    rng = np.random.default_rng(6)
    for p in model.params:
        p.value = p.value + rng.normal(0, 0.05, p.value.shape)
    npe_err = max(
        _max_rel_err(lambda inst=inst: npe_mod.instance_loss(inst, model), model.params)
        for inst in train[:2]
    )
    assert npe_err < 1e-4

    # POE sampled-softmax loss with metadata and time paths enabled
    log, meta, _ = ds.generate_synthetic(ds.SynthSpec(n_users=3, n_pois=5, seq_len=6), seed=0)
    corpus = ds.split(log, (0.7, 0.2, 0.1))
    hyper = poe_mod.PoeHyper(dim=4, use_meta=True, use_time=True, epochs=0)
    poe_model, _ = poe_mod.train_poe(corpus, meta, hyper, seed=2)
    req = poe_mod.ScoreRequest("u0", (("p0", 1_600_000_000.0),),
                               1_600_010_000.0, ("p1",))

    def poe_loss():
        scores = [poe_mod.score(req, c, poe_model, meta) for c in ("p1", "p2", "p3")]
        vec = nm.stack_scalars(scores)
        m = float(vec.value.max())
        return nm.log_(nm.sum_(nm.exp_(vec - m))) + m - scores[0]

    poe_err = _max_rel_err(poe_loss, poe_model.params)
    assert poe_err < 1e-4
    elapsed = time.time() - start
    assert elapsed < 30.0
    _report("criterion 3: gradient checks",
            f"NPE {npe_err:.2e}, POE {poe_err:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4. NPE planted-factor recovery
# ---------------------------------------------------------------------------

def test_acceptance_4_npe_planted_recovery():
    start = time.time()
    spec = npe_mod.DecisionSynthSpec()
    train, heldout, bad, planted = npe_mod.synthesize_decisions(spec, seed=0)
    model, _ = npe_mod.train_npe(train, bad, npe_mod.NpeHyper(tau_s=2.0), seed=3)

    hits = 0
    pos_scores = []
    for inst, pair in zip(heldout, planted):
        report = npe_mod.visit_rate(inst, model)
        order = np.argsort(-report.likelihoods)
        hits += {inst.factors[i] for i in order[:2]} == pair
        pos_scores.append(report.visit_rate)
    recovery = hits / len(heldout)

    rng = np.random.default_rng(9)
    neg_scores = []
    for inst in heldout:
        for neg in npe_mod.generate_negatives(inst, bad, "nearby", 2, rng):
            neg_scores.append(npe_mod.visit_rate(neg, model).visit_rate)
    heldout_auc = met.auc(pos_scores, neg_scores)

    elapsed = time.time() - start
    assert recovery >= 0.80, f"top-2 recovery {recovery}"
    assert heldout_auc >= 0.85, f"held-out AUC {heldout_auc}"
    assert elapsed < 120.0
    _report("criterion 4: NPE planted-factor recovery",
            f"recovery {recovery:.2f}, AUC {heldout_auc:.3f}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 5 + 10. pre-training ablation direction and end-to-end determinism
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def experiment_runs(tmp_path_factory):
    """Run `edgelbs experiment` twice on the bundled synthetic config."""
    outs = []
    start = time.time()
    for name in ("run_a", "run_b"):
        out = str(tmp_path_factory.mktemp(name))
        code = cli_main(["experiment", "--config", CONFIG_PATH,
                         "--seed", "0", "--out", out])
        assert code == 0
        outs.append(out)
    return outs[0], outs[1], time.time() - start


def test_acceptance_5_pretraining_ablation(experiment_runs):
    run_a, _, elapsed = experiment_runs
    path = os.path.join(run_a, "rho_sweep.csv")
    lines = open(path).read().strip().split("\n")
    assert lines[0] == "rho,map"
    rows = [line.split(",") for line in lines[1:]]
    assert [r[0] for r in rows] == ["-", "0", "0.3", "0.5", "0.7", "1"]
    assert len(rows) == 6
    maps = {r[0]: float(r[1]) for r in rows}
    random_init = maps["-"]
    for rho in ("0", "0.3", "0.5", "0.7", "1"):
        assert maps[rho] >= random_init, (rho, maps[rho], random_init)
    assert elapsed < 300.0
    _report("criterion 5: pre-training ablation direction",
            f"random {random_init:.3f}, pretrained min "
            f"{min(v for k, v in maps.items() if k != '-'):.3f}, {elapsed:.0f}s")


def test_acceptance_10_end_to_end_determinism(experiment_runs):
    run_a, run_b, elapsed = experiment_runs
    name = "rho_sweep.csv"
    a, b = os.path.join(run_a, name), os.path.join(run_b, name)
    assert filecmp.cmp(a, b, shallow=False), "experiment CSVs differ between runs"
    assert open(a, "rb").read() == open(b, "rb").read()
    assert elapsed < 300.0
    _report("criterion 10: end-to-end determinism", f"two runs in {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 6. transition distributions and walk frequencies
# ---------------------------------------------------------------------------

def test_acceptance_6_transition_distributions():
    start = time.time()
    log, _, truth = ds.generate_synthetic(
        ds.SynthSpec(n_users=12, n_pois=24, n_clusters=6, seq_len=30), seed=0
    )
    graph = pretrain.build_graph(log, truth.poi_coords)
    for rho in (0.0, 0.3, 0.5, 0.7, 1.0):
        for i in range(len(graph)):
            _, p = pretrain.transition_distribution(i, graph, rho)
            assert abs(p.sum() - 1.0) < 1e-12

    rho = 0.5
    cdfs, offsets, neighbors = pretrain._walk_tables(graph, rho)
    n = 100_000
    rng = np.random.default_rng(3)
    walks = kernels.walk_steps(
        cdfs, offsets, neighbors,
        np.zeros(n, dtype=np.int64), rng.random((n, 1)),
        rng.integers(0, len(graph), size=(n, 1)).astype(np.int64),
    )
    ids, p = pretrain.transition_distribution(0, graph, rho)
    emp = np.bincount(walks[:, 1], minlength=len(graph)) / n
    full = np.zeros(len(graph))
    full[ids] = p
    tv = 0.5 * np.abs(emp - full).sum()
    elapsed = time.time() - start
    assert tv <= 0.01, f"TV distance {tv}"
    assert elapsed < 30.0
    _report("criterion 6: transition distributions", f"TV {tv:.4f}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 7. metric oracles
# ---------------------------------------------------------------------------

def _ref_auc(pos, neg):
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def _ref_ap(ranked, relevant):
    total, hits = 0.0, 0
    for rank, cid in enumerate(ranked, start=1):
        if cid in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def test_acceptance_7_metric_oracles():
    start = time.time()
    rng = np.random.default_rng(4)
    for _ in range(1000):
        pos = list(rng.integers(0, 5, size=int(rng.integers(1, 12))).astype(float))
        neg = list(rng.integers(0, 5, size=int(rng.integers(1, 12))).astype(float))
        assert abs(met.auc(pos, neg) - _ref_auc(pos, neg)) < 1e-12

        ids = list(rng.permutation(12))
        relevant = set(rng.choice(12, size=int(rng.integers(1, 6)), replace=False))
        result = met.RankedResult(ids, relevant)
        assert abs(met.average_precision(result) - _ref_ap(ids, relevant)) < 1e-12

        k = int(rng.integers(1, 12))
        prec, rec, f1 = met.precision_recall_f1(result, k)
        hits = sum(1 for c in ids[:k] if c in relevant)
        assert abs(prec - hits / k) < 1e-12
        assert abs(rec - hits / len(relevant)) < 1e-12
        want_f1 = 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)
        assert abs(f1 - want_f1) < 1e-12
    elapsed = time.time() - start
    assert elapsed < 10.0
    _report("criterion 7: metric oracles", f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 8. routing table and trace hygiene
# ---------------------------------------------------------------------------

def test_acceptance_8_routing_table():
    start = time.time()

    def verdict(npe_pass, poe_pass, aggregate):
        return pipe.EvaluationVerdict("x", npe_pass=npe_pass, projection=0.0,
                                      poe_pass=poe_pass, aggregate=aggregate)

    # all 8 combinations of (edge NPE, edge POE, cloud passed); when the
    # edge passes both gates the cloud is never queried (verdict None)
    table = [
        (verdict(True, True, 0.9), None, ("edge", False)),
        (verdict(True, True, 0.2), None, ("edge", False)),
        (verdict(True, False, 0.4), verdict(True, True, 0.9), ("cloud", False)),
        (verdict(True, False, 0.4), verdict(True, False, 0.2), ("edge", True)),
        (verdict(True, False, 0.4), verdict(True, False, 0.8), ("cloud", True)),
        (verdict(False, None, None), verdict(True, True, 0.9), ("cloud", False)),
        (verdict(False, None, None), verdict(False, None, None), ("edge", True)),
        (verdict(False, None, None), verdict(True, False, 0.1), ("cloud", True)),
    ]
    for edge_v, cloud_v, want in table:
        assert pipe.resolve_route(edge_v, cloud_v) == want

    # trace hygiene on a live pipeline run
    spec = ds.SynthSpec(n_users=6, n_pois=8, n_clusters=2, seq_len=12)
    log, meta, truth = ds.generate_synthetic(spec, seed=0)
    coords = {p: (la / 100.0, lo / 100.0) for p, (la, lo) in truth.poi_coords.items()}
    corpus = ds.split(log, (0.7, 0.2, 0.1))
    extractor = pipe.FactorExtractor.from_corpus(corpus.train, meta, coords)
    positives = pipe.build_decision_corpus(corpus.train, extractor)
    npe_model, _ = npe_mod.train_npe(
        positives, list(extractor.poi_factors.values()),
        npe_mod.NpeHyper(dim=4, epochs=1), seed=0,
        extra_vocab=extractor.context_vocab,
    )
    poe_model, _ = poe_mod.train_poe(
        corpus, meta, poe_mod.PoeHyper(dim=4, epochs=1), seed=0
    )
    models = pipe.PipelineModels(npe_model=npe_model, poe_model=poe_model,
                                 extractor=extractor, meta=meta,
                                 thre1=-100.0, thre2=0.0)
    config = pipe.PipelineConfig(k=4, region=anon.CloakRegion((0.0, 0.0), (0.3, 0.3)))
    edge = pipe.SimServer("edge", dict(list(coords.items())[:5]), 10.0, top_k=3)
    cloud = pipe.SimServer("cloud", coords, 100.0, top_k=3)
    histories = {uid: tuple((r.poi_id, r.timestamp) for r in recs)
                 for uid, recs in corpus.train.by_user().items()}
    cloud_queried_on_fail, edge_pass_seen = False, False
    some_time = next(iter(histories.values()))[-1][1]
    cases = [(uid, histories[uid][-1][1] + 3600.0, histories[uid])
             for uid in sorted(histories)]
    cases.append(("stranger", some_time, ()))  # unknown user: edge must fail
    for i, (uid, when, history) in enumerate(cases):
        req = anon.ServiceRequest(uid, (0.01 * i, -0.01 * i), "food", time=when)
        result = pipe.handle_request(req, anon.PseudonymTable(), edge, cloud,
                                     models, config, seed=i, history=history)
        post = [rec for rec in result.trace if rec["stage"] != "request"]
        assert uid not in json.dumps(post), "raw user id leaked into the trace"
        cloud_stages = [r for r in result.trace if r["stage"] == "cloud_query"]
        if result.verdicts[0].passed:
            edge_pass_seen = True
            assert not cloud_stages, "cloud queried although the edge passed"
        else:
            cloud_queried_on_fail = True
            assert cloud_stages, "cloud not queried although the edge failed"
    elapsed = time.time() - start
    assert elapsed < 5.0
    _report("criterion 8: routing table",
            f"edge-pass {edge_pass_seen}, cloud-fallback {cloud_queried_on_fail}, "
            f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 9. k-anonymity properties
# ---------------------------------------------------------------------------

def test_acceptance_9_k_anonymity():
    start = time.time()
    region = anon.CloakRegion((0.0, 0.0), (0.2, 0.2))
    vocab = ("food", "fuel", "shop", "parking")
    req = anon.ServiceRequest("alice", (0.05, -0.03), "food", time=1.0)
    k = 5
    counts = np.zeros(k)
    for seed in range(10_000):
        batch = anon.k_anonymize(req, region, k, vocab, seed=seed)
        assert batch.k == k and len(batch.requests) == k
        pseudonyms = [p for p, _, _ in batch.requests]
        assert len(set(pseudonyms)) == k
        counts[batch.real_index] += 1
    _, pval = stats.chisquare(counts)
    elapsed = time.time() - start
    assert pval > 0.01, f"chi-squared p = {pval}"
    assert elapsed < 30.0
    _report("criterion 9: k-anonymity properties",
            f"chi2 p {pval:.3f}, {elapsed:.0f}s")
