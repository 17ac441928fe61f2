"""Check-in corpus handling: Gowalla-style TSV parsing, sparsity
filtering, chronological splitting, and desk-scale synthetic corpora
with planted transition structure.

File format (matches the public Gowalla check-in dump):
    user_id \\t timestamp \\t lat \\t lon \\t poi_id
with the timestamp either ISO-8601 or integer epoch seconds.
"""

from __future__ import annotations

import datetime as _dt
import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CheckIn",
    "CheckInLog",
    "Metadata",
    "SplitCorpus",
    "SynthSpec",
    "SynthTruth",
    "ParseReport",
    "FormatError",
    "parse_checkins",
    "serialize_checkins",
    "filter_sparse",
    "split",
    "generate_synthetic",
    "parse_metadata",
    "serialize_metadata",
]


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class CheckIn:
    user_id: str
    timestamp: float  # seconds since epoch, UTC
    lat: float
    lon: float
    poi_id: str

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"lat {self.lat} out of [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"lon {self.lon} out of [-180, 180]")
        if self.timestamp <= 0:
            raise ValueError(f"timestamp {self.timestamp} must be positive")


@dataclass
class CheckInLog:
    """Flat record list; users appear in first-seen order, each user's
    records contiguous and sorted by timestamp (stable for ties)."""

    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def by_user(self):
        users = {}
        for r in self.records:
            users.setdefault(r.user_id, []).append(r)
        return users

    def poi_counts(self):
        counts = {}
        for r in self.records:
            counts[r.poi_id] = counts.get(r.poi_id, 0) + 1
        return counts

    @classmethod
    def from_records(cls, records):
        """Canonicalize: group by user (first-appearance order), stable-sort
        each group by timestamp, concatenate."""
        groups = {}
        for r in records:
            groups.setdefault(r.user_id, []).append(r)
        out = []
        for recs in groups.values():
            out.extend(sorted(recs, key=lambda r: r.timestamp))
        return cls(out)


@dataclass
class Metadata:
    """Side information: POI items and user items live in disjoint
    vocabularies (separate embedding spaces)."""

    poi_meta: dict = field(default_factory=dict)   # poi_id -> set of item ids
    user_meta: dict = field(default_factory=dict)  # user_id -> set of item ids


@dataclass
class SplitCorpus:
    train: CheckInLog
    validation: CheckInLog
    test: CheckInLog
    ratios: tuple


@dataclass
class ParseReport:
    total_lines: int = 0
    malformed: int = 0
    first_bad_line: int | None = None


def _parse_timestamp(text):
    try:
        return float(text)
    except ValueError:
        pass
    return _dt.datetime.fromisoformat(text.replace("Z", "+00:00")).timestamp()


def parse_checkins(reader):
    """Parse a line-oriented TSV stream of check-ins.

    Malformed lines are counted and skipped; if more than half of the
    non-empty lines are malformed the whole input is rejected with the
    first offending line number.

    Returns (CheckInLog, ParseReport).
    """
    records = []
    report = ParseReport()
    for lineno, raw in enumerate(reader, start=1):
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        report.total_lines += 1
        parts = line.split("\t")
        try:
            if len(parts) != 5:
                raise ValueError(f"expected 5 columns, got {len(parts)}")
            user_id, ts, lat, lon, poi_id = parts
            records.append(
                CheckIn(user_id, _parse_timestamp(ts), float(lat), float(lon), poi_id)
            )
        except (ValueError, OverflowError):
            report.malformed += 1
            if report.first_bad_line is None:
                report.first_bad_line = lineno
    if report.total_lines and report.malformed * 2 > report.total_lines:
        raise FormatError(
            f"{report.malformed}/{report.total_lines} lines malformed; "
            f"first bad line: {report.first_bad_line}"
        )
    return CheckInLog.from_records(records), report


def serialize_checkins(log):
    """Inverse of parse_checkins on well-formed logs (epoch timestamps)."""
    lines = []
    for r in log.records:
        ts = repr(r.timestamp)
        lines.append(f"{r.user_id}\t{ts}\t{r.lat!r}\t{r.lon!r}\t{r.poi_id}")
    return "\n".join(lines) + ("\n" if lines else "")


def filter_sparse(log, min_user, min_poi):
    """Drop users with < min_user records and POIs with < min_poi visits,
    iterating until both thresholds hold simultaneously (fixed point)."""
    if min_user < 0 or min_poi < 0:
        raise ValueError("thresholds must be non-negative")
    records = list(log.records)
    while True:
        user_counts, poi_counts = {}, {}
        for r in records:
            user_counts[r.user_id] = user_counts.get(r.user_id, 0) + 1
            poi_counts[r.poi_id] = poi_counts.get(r.poi_id, 0) + 1
        kept = [
            r
            for r in records
            if user_counts[r.user_id] >= min_user and poi_counts[r.poi_id] >= min_poi
        ]
        if len(kept) == len(records):
            return CheckInLog.from_records(kept)
        records = kept


def split(log, ratios):
    """Per-user chronological split.

    First ceil(r_train * n) records go to train, the next ceil(r_val * n)
    to validation, the remainder to test.  Users with fewer than 3
    records go entirely to train (documented degenerate rule).
    """
    r_train, r_val, r_test = ratios
    if min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios}")
    train, val, test = [], [], []
    for recs in log.by_user().values():
        n = len(recs)
        if n < 3:
            train.extend(recs)
            continue
        n_train = min(n, math.ceil(r_train * n))
        n_val = min(n - n_train, math.ceil(r_val * n))
        train.extend(recs[:n_train])
        val.extend(recs[n_train : n_train + n_val])
        test.extend(recs[n_train + n_val :])
    return SplitCorpus(
        train=CheckInLog.from_records(train),
        validation=CheckInLog.from_records(val),
        test=CheckInLog.from_records(test),
        ratios=tuple(ratios),
    )


# ---------------------------------------------------------------------------
# synthetic corpus with planted structure
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    n_users: int = 20
    n_pois: int = 30
    n_clusters: int = 2
    seq_len: int = 50
    within_cluster_prob: float = 0.9
    transition: np.ndarray | None = None  # optional explicit row-stochastic matrix
    start_time: float = 1_600_000_000.0
    step_seconds: float = 3600.0


@dataclass
class SynthTruth:
    """Planted parameters emitted alongside the synthetic corpus."""

    transition: np.ndarray
    cluster_of_poi: list
    poi_coords: dict  # poi_id -> (lat, lon)
    poi_ids: list
    user_ids: list
    spec: SynthSpec

    def save(self, path):
        payload = {
            "transition": self.transition.tolist(),
            "cluster_of_poi": self.cluster_of_poi,
            "poi_coords": {k: list(v) for k, v in self.poi_coords.items()},
            "poi_ids": self.poi_ids,
            "user_ids": self.user_ids,
            "spec": {
                "n_users": self.spec.n_users,
                "n_pois": self.spec.n_pois,
                "n_clusters": self.spec.n_clusters,
                "seq_len": self.spec.seq_len,
                "within_cluster_prob": self.spec.within_cluster_prob,
            },
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=1, sort_keys=True)


def _planted_transition(spec):
    if spec.transition is not None:
        t = np.asarray(spec.transition, dtype=np.float64)
        if t.shape != (spec.n_pois, spec.n_pois):
            raise ValueError("explicit transition matrix has wrong shape")
        if not np.allclose(t.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("explicit transition matrix rows must sum to 1")
        return t
    clusters = [i % spec.n_clusters for i in range(spec.n_pois)]
    t = np.zeros((spec.n_pois, spec.n_pois))
    for i in range(spec.n_pois):
        mates = [j for j in range(spec.n_pois) if clusters[j] == clusters[i]]
        others = [j for j in range(spec.n_pois) if clusters[j] != clusters[i]]
        if others:
            t[i, mates] = spec.within_cluster_prob / len(mates)
            t[i, others] = (1.0 - spec.within_cluster_prob) / len(others)
        else:
            t[i, mates] = 1.0 / len(mates)
    return t


def generate_synthetic(spec, seed):
    """Markov-chain check-in corpus with planted clusters.

    Deterministic for a fixed seed.  Returns (CheckInLog, Metadata,
    SynthTruth); the truth object carries the planted transition matrix
    for acceptance checks.
    """
    if spec.n_users < 1 or spec.n_pois < 1:
        raise ValueError("need at least one user and one POI")
    rng = np.random.default_rng(seed)
    clusters = [i % spec.n_clusters for i in range(spec.n_pois)]
    transition = _planted_transition(spec)

    poi_ids = [f"p{i}" for i in range(spec.n_pois)]
    user_ids = [f"u{i}" for i in range(spec.n_users)]
    # cluster centers spread out in coordinate space; POIs jittered around them
    coords = {}
    for i, pid in enumerate(poi_ids):
        c = clusters[i]
        lat = 10.0 * c + rng.uniform(-0.05, 0.05)
        lon = 10.0 * c + rng.uniform(-0.05, 0.05)
        coords[pid] = (float(lat), float(lon))

    records = []
    for u, uid in enumerate(user_ids):
        state = int(rng.integers(spec.n_pois))
        t = spec.start_time + u  # offset so users are distinguishable in time
        for _ in range(spec.seq_len):
            pid = poi_ids[state]
            lat, lon = coords[pid]
            records.append(CheckIn(uid, t, lat, lon, pid))
            t += spec.step_seconds
            state = int(rng.choice(spec.n_pois, p=transition[state]))

    meta = Metadata()
    for i, pid in enumerate(poi_ids):
        meta.poi_meta[pid] = {f"pcluster:{clusters[i]}", f"ptag:{i % 5}"}
    for u, uid in enumerate(user_ids):
        meta.user_meta[uid] = {f"uhome:{u % spec.n_clusters}"}

    truth = SynthTruth(
        transition=transition,
        cluster_of_poi=clusters,
        poi_coords=coords,
        poi_ids=poi_ids,
        user_ids=user_ids,
        spec=spec,
    )
    return CheckInLog.from_records(records), meta, truth


# ---------------------------------------------------------------------------
# metadata TSV: entity_id \t item_id, one pair per line
# ---------------------------------------------------------------------------

def parse_metadata(poi_reader=None, user_reader=None):
    meta = Metadata()
    for reader, table in ((poi_reader, meta.poi_meta), (user_reader, meta.user_meta)):
        if reader is None:
            continue
        for raw in reader:
            if isinstance(raw, bytes):
                raw = raw.decode("utf-8")
            line = raw.strip()
            if not line:
                continue
            entity, item = line.split("\t")
            table.setdefault(entity, set()).add(item)
    return meta


def serialize_metadata(table):
    lines = []
    for entity in sorted(table):
        for item in sorted(table[entity]):
            lines.append(f"{entity}\t{item}")
    return "\n".join(lines) + ("\n" if lines else "")
