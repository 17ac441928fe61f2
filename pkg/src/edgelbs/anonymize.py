"""Client-side privacy transform: per-request pseudonyms and k-anonymous
dummy-query fan-out over a cloaking region.

The real request is pseudonymized and its location perturbed inside the
region; the remaining k-1 entries are fully synthetic dummies that are
format-indistinguishable from the real one.  The mapping pseudonym ->
user never leaves the client.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ServiceRequest",
    "AnonymizedBatch",
    "CloakRegion",
    "PseudonymTable",
    "IncompleteResponseError",
    "assign_pseudonym",
    "k_anonymize",
    "deanonymize",
    "serialize_batch",
]

# fraction of the region half-extent used to perturb the real location
DEFAULT_PERTURB_FRACTION = 0.1


class IncompleteResponseError(KeyError):
    pass


@dataclass(frozen=True)
class ServiceRequest:
    user_id: str
    loc: tuple  # (lat, lon)
    char: str   # service attribute from a finite vocabulary
    time: float

    def __post_init__(self):
        lat, lon = self.loc
        if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
            raise ValueError(f"location {self.loc} out of bounds")


@dataclass(frozen=True)
class CloakRegion:
    center: tuple        # (lat, lon)
    half_extent: tuple   # (d_lat, d_lon) degrees

    def __post_init__(self):
        if min(self.half_extent) <= 0:
            raise ValueError("half-extent must be positive")

    def contains(self, loc):
        lat, lon = loc
        clat, clon = self.center
        hlat, hlon = self.half_extent
        return abs(lat - clat) <= hlat and abs(lon - clon) <= hlon

    def clamp(self, loc):
        lat, lon = loc
        clat, clon = self.center
        hlat, hlon = self.half_extent
        lat = min(max(lat, clat - hlat), clat + hlat)
        lon = min(max(lon, clon - hlon), clon + hlon)
        # keep inside global coordinate bounds too
        return (min(max(lat, -90.0), 90.0), min(max(lon, -180.0), 180.0))


@dataclass
class AnonymizedBatch:
    requests: list       # (pseudonym, (lat, lon), char) tuples
    real_index: int      # held client-side only; never serialized outward
    k: int


@dataclass
class PseudonymTable:
    """Client-owned pseudonym -> user map.  Single writer; callers must
    serialize writes externally."""

    _table: dict = field(default_factory=dict)

    def record(self, pseudonym, user_id):
        self._table[pseudonym] = user_id

    def owner(self, pseudonym):
        return self._table.get(pseudonym)

    def __contains__(self, pseudonym):
        return pseudonym in self._table


def assign_pseudonym(user_id, seed, nonce=0):
    """Fresh 128-bit token, rotated per request (one per nonce).

    The token is independent of user_id: it is drawn purely from the
    seeded RNG, so no byte of the identifier can leak through it.
    """
    rng = np.random.default_rng([np.uint64(seed), np.uint64(nonce)])
    return bytes(rng.bytes(16)).hex()


def _draw_pseudonyms(rng, count):
    seen = []
    while len(seen) < count:
        token = bytes(rng.bytes(16)).hex()
        if token not in seen:  # 128-bit collisions are negligible, but cheap to enforce
            seen.append(token)
    return seen


def k_anonymize(req, region, k, vocab, seed, table=None,
                perturb_fraction=DEFAULT_PERTURB_FRACTION):
    """Build the k-anonymous batch for a service request.

    One entry is the pseudonymized real request with its location offset
    by a bounded random perturbation inside the region; the other k-1
    are dummies with locations uniform over the region and attributes
    uniform over the vocabulary.  The real entry's position is uniform
    over [0, k).  Deterministic per seed.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not region.contains(req.loc):
        raise ValueError(f"request location {req.loc} outside cloaking region")
    vocab = sorted(vocab)
    rng = np.random.default_rng(seed)
    pseudonyms = _draw_pseudonyms(rng, k)
    real_index = int(rng.integers(k))

    hlat, hlon = region.half_extent
    entries = []
    for i in range(k):
        if i == real_index:
            d_lat = rng.uniform(-1.0, 1.0) * perturb_fraction * hlat
            d_lon = rng.uniform(-1.0, 1.0) * perturb_fraction * hlon
            loc = region.clamp((req.loc[0] + d_lat, req.loc[1] + d_lon))
            char = req.char
        else:
            clat, clon = region.center
            loc = region.clamp(
                (clat + rng.uniform(-hlat, hlat), clon + rng.uniform(-hlon, hlon))
            )
            char = vocab[int(rng.integers(len(vocab)))]
        entries.append((pseudonyms[i], loc, char))

    if table is not None:
        table.record(pseudonyms[real_index], req.user_id)
    return AnonymizedBatch(requests=entries, real_index=real_index, k=k)


def deanonymize(responses, batch, table):
    """Pick the payload addressed to the batch's real pseudonym.

    ``responses`` is a list of (pseudonym, payload); dummy payloads are
    discarded.  Raises IncompleteResponseError when the real pseudonym
    is missing.
    """
    real = batch.requests[batch.real_index][0]
    if table is not None and real not in table:
        raise IncompleteResponseError(f"pseudonym {real} not in client table")
    for pseudonym, payload in responses:
        if pseudonym == real:
            return payload
    raise IncompleteResponseError("no response addressed to the real pseudonym")


def serialize_batch(batch):
    """Wire form: ``fID \\t lat \\t lon \\t char`` per line.  real_index is
    intentionally not serialized."""
    lines = []
    for pseudonym, (lat, lon), char in batch.requests:
        lines.append(f"{pseudonym}\t{lat:.6f}\t{lon:.6f}\t{char}")
    return "\n".join(lines) + "\n"
