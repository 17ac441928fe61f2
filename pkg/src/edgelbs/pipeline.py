"""End-to-end flow: anonymize -> edge query -> NPE/POE gates -> cloud
fallback -> comparison.

Routing rule: the edge answer is accepted outright when it passes both
gates (the cloud is never contacted).  On any edge gate failure the
query is forwarded to the cloud and both verdicts are compared; a
result that passed both gates beats one that did not, otherwise the
higher aggregate score wins with ties preferring the edge (lower
latency).  When neither server passes, the better-scoring response is
returned flagged low-confidence.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from edgelbs import anonymize as anon
from edgelbs import npe as npe_mod
from edgelbs import poe as poe_mod
from edgelbs.pretrain import haversine_km

__all__ = [
    "SimServer",
    "EvaluationVerdict",
    "FactorExtractor",
    "PipelineModels",
    "PipelineConfig",
    "PipelineResult",
    "resolve_route",
    "evaluate_response",
    "handle_request",
    "calibrate_thresholds",
    "build_decision_corpus",
    "trace_to_jsonl",
]


@dataclass
class SimServer:
    """Edge or cloud POI index with a response-quality knob.

    The edge index must be a subset of the cloud's.  Degradation models
    why edge answers fail: with probability degrade_prob the candidate
    list is truncated and its ordering noised.
    """

    kind: str                 # "edge" or "cloud"
    poi_coords: dict          # poi_id -> (lat, lon); the server's index
    latency_ms: float
    degrade_prob: float = 0.0
    top_k: int = 5

    def query(self, loc, rng):
        """Nearest-POI candidate list for one batch entry."""
        lat, lon = loc
        scored = sorted(
            ((haversine_km(lat, lon, plat, plon), pid)
             for pid, (plat, plon) in self.poi_coords.items()),
        )
        candidates = [pid for _, pid in scored[: self.top_k]]
        if self.degrade_prob > 0.0 and rng.random() < self.degrade_prob:
            keep = max(1, len(candidates) // 2)
            candidates = list(rng.permutation(candidates))[:keep]
        return candidates


@dataclass
class EvaluationVerdict:
    server_kind: str
    npe_pass: bool
    projection: float
    poe_pass: bool | None = None     # None: POE never ran (NPE short-circuit)
    aggregate: float | None = None

    @property
    def passed(self):
        return self.npe_pass and bool(self.poe_pass)

    @property
    def comparison_score(self):
        """Score used when comparing failing results; a missing POE
        aggregate (NPE short-circuit) ranks below any evaluated one."""
        return self.aggregate if self.aggregate is not None else -1.0


@dataclass
class FactorExtractor:
    """Maps a (user, POI, time) triple to an NPE decision instance using
    corpus metadata and visit-count popularity buckets."""

    poi_factors: dict   # poi_id -> PoiFactors

    @classmethod
    def from_corpus(cls, log, meta, poi_coords):
        counts = log.poi_counts()
        values = sorted(counts.values()) or [0]
        quartiles = [values[int(q * (len(values) - 1))] for q in (0.25, 0.5, 0.75)]
        factors = {}
        for pid, (lat, lon) in poi_coords.items():
            items = sorted(meta.poi_meta.get(pid, set()))
            category = next((i for i in items if i.startswith("pcluster:")), "pcluster:?")
            brand = next((i for i in items if i.startswith("ptag:")), "ptag:?")
            c = counts.get(pid, 0)
            bucket = sum(1 for q in quartiles if c > q)
            factors[pid] = npe_mod.PoiFactors(
                poi_id=pid,
                identity=f"fid:{pid}",
                category=f"fcat:{category}",
                brand=f"fbrand:{brand}",
                popularity=f"fpop:{bucket}",
                lat=lat,
                lon=lon,
            )
        return cls(factors)

    @property
    def context_vocab(self):
        """Every context factor decision() can emit; handed to train_npe
        as extra_vocab so no serve-time hour is out of vocabulary."""
        return tuple(f"fctx:h{h}" for h in range(24))

    def decision(self, user_id, poi_id, timestamp, label=1):
        pf = self.poi_factors[poi_id]
        hour = int((timestamp % 86400.0) // 3600.0)
        factors = tuple(pf.as_list + [f"fuser:{user_id}", f"fctx:h{hour}"])
        return npe_mod.DecisionInstance(
            factors=factors, label=label, poi=pf, poi_slots=(0, 1, 2, 3)
        )


def build_decision_corpus(train_log, extractor):
    """Positive decision instances from every training visit."""
    return [
        extractor.decision(r.user_id, r.poi_id, r.timestamp) for r in train_log.records
    ]


@dataclass
class PipelineModels:
    npe_model: npe_mod.NpeModel
    poe_model: poe_mod.PoeModel
    extractor: FactorExtractor
    meta: object = None
    thre1: float = 0.0
    thre2: float = 0.5


@dataclass
class PipelineConfig:
    k: int = 5
    region: anon.CloakRegion = None
    attr_vocab: tuple = ("food", "fuel", "shop", "parking")
    top_k: int = 5


@dataclass
class PipelineResult:
    payload: list            # candidate poi ids handed back to the user
    source: str              # "edge" or "cloud"
    verdicts: list
    low_confidence: bool
    degraded: bool
    latency_ms: float
    trace: list = field(default_factory=list)


def evaluate_response(candidates, user_id, query_time, history, models):
    """Run the staged NPE -> POE evaluation of one server response.

    NPE gates on the scalar projection of the top candidate's decision
    instance; POE only runs when NPE passed.
    """
    if not candidates:
        return EvaluationVerdict("?", npe_pass=False, projection=-math.inf)
    instance = models.extractor.decision(user_id, candidates[0], query_time)
    try:
        report = npe_mod.visit_rate(instance, models.npe_model)
    except KeyError:
        # a decision the model cannot represent (e.g. unseen user)
        # cannot be vouched for
        return EvaluationVerdict("?", npe_pass=False, projection=-math.inf)
    npe_ok = npe_mod.npe_gate(report, models.thre1)
    verdict = EvaluationVerdict("?", npe_pass=npe_ok, projection=report.projection)
    if not npe_ok:
        return verdict
    req = poe_mod.ScoreRequest(user_id, tuple(history), query_time, tuple(candidates))
    try:
        ranked = poe_mod.rank_candidates(req, models.poe_model, models.meta)
    except poe_mod.ColdStartError:
        # cold users fall back to popularity order; gate on a neutral aggregate
        verdict.poe_pass = False
        verdict.aggregate = 0.0
        return verdict
    verdict.poe_pass, verdict.aggregate = poe_mod.poe_gate(ranked, models.thre2)
    return verdict


def resolve_route(edge_verdict, cloud_verdict):
    """(source, low_confidence) from the two verdicts.

    cloud_verdict is None iff the edge passed both gates.  Exhaustive
    outcome table (E-NPE, E-POE, cloud combined):
      P P *  -> edge, confident (cloud never queried)
      else   -> cloud queried;
                cloud passes both -> cloud, confident
                cloud fails       -> higher comparison score, low-confidence
                                     (tie prefers edge)
    """
    if edge_verdict.passed:
        return "edge", False
    if cloud_verdict is None:
        raise ValueError("edge failed but cloud was not queried")
    if cloud_verdict.passed:
        return "cloud", False
    if cloud_verdict.comparison_score > edge_verdict.comparison_score:
        return "cloud", True
    return "edge", True


def handle_request(req, client_table, edge, cloud, models, config, seed, history=()):
    """The four-part flow for a single service request.

    Returns a PipelineResult with a full per-stage trace.  After the
    anonymization stage no trace record contains the raw user id.
    """
    if not set(edge.poi_coords) <= set(cloud.poi_coords):
        raise ValueError("edge index must be a subset of the cloud index")
    rng = np.random.default_rng(seed)
    trace = [{"stage": "request", "user_id": req.user_id, "char": req.char}]

    batch = anon.k_anonymize(
        req, config.region, config.k, config.attr_vocab, seed, table=client_table
    )
    real_pseudonym = batch.requests[batch.real_index][0]
    trace.append(
        {"stage": "anonymize", "k": batch.k,
         "pseudonyms": [p for p, _, _ in batch.requests]}
    )

    def query_server(server):
        responses = [(p, server.query(loc, rng)) for p, loc, _ in batch.requests]
        payload = anon.deanonymize(responses, batch, client_table)
        verdict = evaluate_response(payload, req.user_id, req.time, history, models)
        verdict.server_kind = server.kind
        trace.append(
            {"stage": f"{server.kind}_query", "pseudonym": real_pseudonym,
             "candidates": payload}
        )
        trace.append(
            {"stage": f"{server.kind}_verdict", "npe_pass": verdict.npe_pass,
             "projection": verdict.projection, "poe_pass": verdict.poe_pass,
             "aggregate": verdict.aggregate}
        )
        return payload, verdict

    edge_payload, edge_verdict = query_server(edge)
    verdicts = [edge_verdict]
    latency = edge.latency_ms
    degraded = False

    if edge_verdict.passed:
        source, low_conf = "edge", False
        payload = edge_payload
    else:
        try:
            cloud_payload, cloud_verdict = query_server(cloud)
        except ConnectionError:
            # cloud unreachable in simulation: keep the edge result, flagged
            trace.append({"stage": "cloud_unreachable"})
            return PipelineResult(
                payload=edge_payload, source="edge", verdicts=verdicts,
                low_confidence=True, degraded=True, latency_ms=latency, trace=trace,
            )
        verdicts.append(cloud_verdict)
        latency += cloud.latency_ms
        source, low_conf = resolve_route(edge_verdict, cloud_verdict)
        payload = edge_payload if source == "edge" else cloud_payload

    trace.append({"stage": "route", "source": source, "low_confidence": low_conf})
    return PipelineResult(
        payload=payload, source=source, verdicts=verdicts,
        low_confidence=low_conf, degraded=degraded, latency_ms=latency, trace=trace,
    )


def calibrate_thresholds(projections, aggregates, target_acceptance=0.7):
    """Quantile thresholds giving the target pass rate on validation
    samples: Thre_1 on NPE projections, Thre_2 on POE aggregates."""
    if not 0.0 < target_acceptance <= 1.0:
        raise ValueError("target acceptance must be in (0, 1]")
    q = 1.0 - target_acceptance
    thre1 = float(np.quantile(np.asarray(projections, dtype=np.float64), q))
    thre2 = float(np.quantile(np.asarray(aggregates, dtype=np.float64), q))
    return thre1, thre2


def trace_to_jsonl(trace):
    """Line-delimited structured trace records."""
    return "\n".join(json.dumps(rec, sort_keys=True) for rec in trace) + "\n"
