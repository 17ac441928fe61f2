"""POE: intent-vector algebra, metadata/time reductions, ranking, and
training behavior."""

import math

import numpy as np
import pytest

from edgelbs import dataset as ds
from edgelbs import poe
from edgelbs import numerics as nm

T0 = 1_600_000_000.0


def _tiny_model(hyper=None, seed=0, n_users=3, n_pois=4):
    hyper = hyper or poe.PoeHyper(dim=4)
    users = {f"u{i}": i for i in range(n_users)}
    pois = {f"p{i}": i for i in range(n_pois)}
    items_u = {"uhome:0": 0}
    items_p = {"pcluster:0": 0, "ptag:1": 1}
    return poe.PoeModel(users, pois, items_u, items_p, hyper, seed)


def _meta():
    meta = ds.Metadata()
    meta.poi_meta = {"p0": {"pcluster:0"}, "p1": {"pcluster:0", "ptag:1"}}
    meta.user_meta = {"u0": {"uhome:0"}}
    return meta


def _req(user="u0", prev="p0", dt=2 * 86400.0, cands=("p1", "p2")):
    return poe.ScoreRequest(user, ((prev, T0),), T0 + dt, tuple(cands))


def test_score_matches_hand_computation():
    model = _tiny_model()
    req = _req()
    d_q, d_u, c_l = poe.intent_vectors(req, "p1", model)
    q_prev = model.poi_emb.value[0]
    u = model.user_emb.value[0]
    q_cand = model.poi_emb.value[1]
    want_dq = np.maximum(model.w1.value @ q_prev + model.b1.value, 0.0)
    want_du = np.maximum(model.w2.value @ u + model.b2.value, 0.0)
    want_cl = np.maximum(model.w3.value @ q_cand + model.b3.value, 0.0)
    assert np.allclose(d_q.value, want_dq, atol=1e-12)
    assert np.allclose(d_u.value, want_du, atol=1e-12)
    assert np.allclose(c_l.value, want_cl, atol=1e-12)
    s = poe.score(req, "p1", model)
    assert float(s.value) == pytest.approx(float((want_dq + want_du) @ want_cl))


def test_metadata_blend_alpha_one_reduces_to_plain():
    """alpha = beta = 1 makes the metadata path exactly the plain model."""
    h_meta = poe.PoeHyper(dim=4, alpha=1.0, beta=1.0, use_meta=True)
    model = _tiny_model(h_meta)
    s_meta = float(poe.score(_req(), "p1", model, _meta()).value)
    model.hyper = poe.PoeHyper(dim=4, use_meta=False)
    s_plain = float(poe.score(_req(), "p1", model).value)
    assert s_meta == pytest.approx(s_plain, abs=1e-12)


def test_metadata_vector_mean_and_flags():
    model = _tiny_model(poe.PoeHyper(dim=4, use_meta=True))
    meta = _meta()
    vec, empty = poe.metadata_vector("p1", "poi", meta, model)
    want = model.item_emb_poi.value[[0, 1]].mean(axis=0)
    assert np.allclose(vec.value, want, atol=1e-12)
    assert not empty
    zero, empty = poe.metadata_vector("p99", "poi", meta, model)
    assert empty and np.allclose(zero.value, 0.0)
    meta.poi_meta["p2"] = {"unknown-item"}
    with pytest.raises(KeyError):
        poe.metadata_vector("p2", "poi", meta, model)


def test_time_transfer_interpolation():
    model = _tiny_model(poe.PoeHyper(dim=4, use_time=True))
    w0, wpi = model.w1.value, model.w_pi.value
    pi = model.hyper.interval_pi
    assert np.allclose(poe._transfer_matrix(model, pi).value, wpi)
    assert np.allclose(poe._transfer_matrix(model, 10 * pi).value, wpi)
    assert np.allclose(poe._transfer_matrix(model, 0.0).value, w0)
    mid = poe._transfer_matrix(model, pi / 2).value
    assert np.allclose(mid, 0.5 * w0 + 0.5 * wpi, atol=1e-12)


def test_time_model_reduces_to_plain_when_tied():
    """With W_0 = W_pi and all bucket biases equal b1, the time-aware
    score collapses exactly to the plain score."""
    model = _tiny_model(poe.PoeHyper(dim=4, use_time=True))
    model.w_pi.value = model.w1.value.copy()
    model.bucket_bias.value = np.tile(model.b1.value, (model.hyper.buckets, 1))
    s_time = float(poe.score(_req(dt=3.5 * 86400), "p1", model).value)
    model.hyper = poe.PoeHyper(dim=4, use_time=False)
    s_plain = float(poe.score(_req(dt=3.5 * 86400), "p1", model).value)
    assert s_time == pytest.approx(s_plain, abs=1e-12)


def test_hour_bucket_selection():
    model = _tiny_model(poe.PoeHyper(dim=4, buckets=24, use_time=True))
    model.bucket_bias.value = np.arange(24)[:, None] * np.ones((24, 4))
    # query a week after T0 at 13:30 UTC picks bucket 13 (and, with the
    # interval well past interval_pi, the W_pi transfer matrix)
    when = (T0 - T0 % 86400.0) + 7 * 86400.0 + 13.5 * 3600.0
    req = poe.ScoreRequest("u0", (("p0", T0),), when, ("p1",))
    d_q, _, _ = poe.intent_vectors(req, "p1", model)
    expect = np.maximum(model.w_pi.value @ model.poi_emb.value[0] + 13.0, 0.0)
    assert np.allclose(d_q.value, expect, atol=1e-12)


def test_cold_start_errors():
    model = _tiny_model()
    with pytest.raises(poe.ColdStartError):
        poe.score(poe.ScoreRequest("u0", (), T0, ("p1",)), "p1", model)
    with pytest.raises(poe.ColdStartError):
        poe.score(_req(user="stranger"), "p1", model)


def test_rank_candidates_order_and_ties():
    model = _tiny_model()
    # zero weights make every score 0: ties resolved by ascending poi id
    for w in (model.w1, model.w2, model.w3):
        w.value = np.zeros_like(w.value)
    ranked = poe.rank_candidates(_req(cands=("p2", "p0", "p1")), model)
    assert [c for c, _ in ranked] == ["p0", "p1", "p2"]
    top1 = poe.rank_candidates(_req(cands=("p2", "p0", "p1")), model, top_k=1)
    assert len(top1) == 1
    with pytest.raises(ValueError):
        poe.rank_candidates(_req(cands=()), model)


def test_poe_gate():
    passed, agg = poe.poe_gate([("a", 100.0), ("b", 100.0)], 0.7)
    assert passed and agg == pytest.approx(1.0)
    passed, agg = poe.poe_gate([("a", -100.0)], 0.5)
    assert not passed and agg == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        poe.poe_gate([], 0.5)


def test_cross_split_transitions_bridge():
    train = ds.CheckInLog.from_records(
        [ds.CheckIn("u", T0, 0, 0, "a"), ds.CheckIn("u", T0 + 10, 0, 0, "b")]
    )
    holdout = ds.CheckInLog.from_records(
        [ds.CheckIn("u", T0 + 20, 0, 0, "c"), ds.CheckIn("u", T0 + 30, 0, 0, "d")]
    )
    out = poe._cross_split_transitions(train, holdout)
    assert out == [
        ("u", "b", T0 + 10, "c", T0 + 20),
        ("u", "c", T0 + 20, "d", T0 + 30),
    ]


def test_train_poe_loss_decreases_and_deterministic(synth_corpus, synth_world):
    _, meta, _ = synth_world
    hyper = poe.PoeHyper(dim=6, epochs=3)
    m1, h1 = poe.train_poe(synth_corpus, meta, hyper, seed=0)
    m2, h2 = poe.train_poe(synth_corpus, meta, hyper, seed=0)
    assert h1["loss"] == h2["loss"] and h1["val_map"] == h2["val_map"]
    assert np.array_equal(m1.poi_emb.value, m2.poi_emb.value)
    assert h1["loss"][-1] < h1["loss"][0]
    assert h1["best_val_map"] == max(h1["val_map"])


def test_train_poe_best_checkpoint_restored(synth_corpus, synth_world):
    _, meta, _ = synth_world
    hyper = poe.PoeHyper(dim=6, epochs=3)
    model, history = poe.train_poe(synth_corpus, meta, hyper, seed=1)
    vmap = poe.validation_map(model, synth_corpus.train, synth_corpus.validation, meta)
    assert vmap == pytest.approx(history["best_val_map"], abs=1e-12)


def test_train_poe_requires_transitions():
    log = ds.CheckInLog.from_records([ds.CheckIn("u", T0, 0, 0, "a")])
    corpus = ds.SplitCorpus(log, ds.CheckInLog(), ds.CheckInLog(), (1, 0, 0))
    with pytest.raises(ValueError):
        poe.train_poe(corpus, ds.Metadata(), poe.PoeHyper(), seed=0)


def test_pretrained_rows_are_used(synth_corpus, synth_world):
    _, meta, _ = synth_world
    hyper = poe.PoeHyper(dim=4, epochs=0)
    pois = sorted({r.poi_id for r in synth_corpus.train.records})
    table = np.arange(len(pois) * 4, dtype=np.float64).reshape(len(pois), 4)
    index = {p: i for i, p in enumerate(pois)}
    model, _ = poe.train_poe(
        synth_corpus, meta, hyper, seed=0, pretrained=(table, index)
    )
    for pid, row in index.items():
        assert np.array_equal(model.poi_emb.value[model.poi_index[pid]], table[row])


def test_state_roundtrip(tmp_path):
    model = _tiny_model()
    path = tmp_path / "poe.npz"
    model.save(path)
    other = _tiny_model(seed=99)
    other.load_state(nm.load_checkpoint(path))
    assert np.array_equal(other.w1.value, model.w1.value)
    assert np.array_equal(other.poi_emb.value, model.poi_emb.value)


def test_hyper_validation():
    with pytest.raises(ValueError):
        poe.PoeHyper(alpha=1.5)
    with pytest.raises(ValueError):
        poe.PoeHyper(interval_pi=0.0)
