"""Negative-sample mining and epoch batch planning.

Two mining phases: geographic near-neighbor sampling (NNS) fills early-epoch
batches with each anchor's closest unconsumed neighbors; dynamic similarity
sampling (DSS) ranks candidates by descriptor cosine similarity, keeps the
hardest half of each batch rank-exact and draws the other half uniformly from
the remainder of the top-S pool. A plain shuffled plan is also provided as the
baseline the mined strategies are compared against.

Coordinates are either WGS84 degrees (haversine distance) or planar UTM
meters (Euclidean distance); a dataset uses exactly one mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import kernels

EARTH_RADIUS_M = 6_371_000.0

WGS84 = "WGS84"
UTM = "UTM"

PHASE_NNS = "NNS"
PHASE_DSS = "DSS"
PHASE_RANDOM = "RANDOM"

# candidates closer than this to the anchor are treated as the same place
# and excluded from negative pools (they would be false negatives)
DUPLICATE_RADIUS_M = 1.0


@dataclass(frozen=True)
class GeoPoint:
    """A single coordinate in one of the two supported modes."""

    x: float  # longitude (deg) or easting (m)
    y: float  # latitude (deg) or northing (m)
    mode: str = WGS84

    def __post_init__(self):
        if self.mode not in (WGS84, UTM):
            raise ValueError(f"unknown coordinate mode {self.mode!r}")
        if self.mode == WGS84:
            if not (-90.0 <= self.y <= 90.0):
                raise ValueError(f"latitude {self.y} outside [-90, 90]")
            if not (-180.0 < self.x <= 180.0):
                raise ValueError(f"longitude {self.x} outside (-180, 180]")
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("coordinates must be finite")

    @classmethod
    def wgs84(cls, lat: float, lon: float) -> "GeoPoint":
        return cls(x=lon, y=lat, mode=WGS84)

    @classmethod
    def utm(cls, easting: float, northing: float) -> "GeoPoint":
        return cls(x=easting, y=northing, mode=UTM)

    @property
    def lat(self) -> float:
        if self.mode != WGS84:
            raise ValueError("lat only defined in WGS84 mode")
        return self.y

    @property
    def lon(self) -> float:
        if self.mode != WGS84:
            raise ValueError("lon only defined in WGS84 mode")
        return self.x

    @property
    def easting(self) -> float:
        if self.mode != UTM:
            raise ValueError("easting only defined in UTM mode")
        return self.x

    @property
    def northing(self) -> float:
        if self.mode != UTM:
            raise ValueError("northing only defined in UTM mode")
        return self.y


def haversine(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters (WGS84 points only)."""
    if a.mode != WGS84 or b.mode != WGS84:
        raise ValueError("haversine needs WGS84 points; use euclidean for UTM")
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = math.radians(b.lat - a.lat)
    dlam = math.radians(b.lon - a.lon)
    s = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(math.sqrt(min(1.0, s)))


def euclidean(a: GeoPoint, b: GeoPoint) -> float:
    """Planar distance in meters (UTM points only)."""
    if a.mode != UTM or b.mode != UTM:
        raise ValueError("euclidean needs UTM points; use haversine for WGS84")
    return math.hypot(a.easting - b.easting, a.northing - b.northing)


def distance(a: GeoPoint, b: GeoPoint) -> float:
    if a.mode != b.mode:
        raise ValueError(f"mixed coordinate modes {a.mode}/{b.mode}")
    return haversine(a, b) if a.mode == WGS84 else euclidean(a, b)


def distance_matrix(coords: Sequence[GeoPoint]) -> np.ndarray:
    """All-pairs distances in meters for a single-mode coordinate list."""
    modes = {c.mode for c in coords}
    if len(modes) != 1:
        raise ValueError(f"coordinate list mixes modes {modes}")
    xs = np.array([c.x for c in coords])
    ys = np.array([c.y for c in coords])
    if modes == {WGS84}:
        return kernels.haversine_matrix(ys, xs, EARTH_RADIUS_M)
    dx = xs[:, None] - xs[None, :]
    dy = ys[:, None] - ys[None, :]
    return np.sqrt(dx * dx + dy * dy)


def nns_neighbors(coords: Sequence[GeoPoint], query_index: int, count: int) -> list[int]:
    """The `count` nearest ids to the query, ascending by distance, query
    excluded, distance ties broken by ascending id."""
    n = len(coords)
    if not (0 <= query_index < n):
        raise ValueError(f"query_index {query_index} outside dataset of {n}")
    if count >= n:
        raise ValueError(f"count {count} must be < dataset size {n}")
    q = coords[query_index]
    dists = np.array([distance(q, c) for c in coords])
    order = np.lexsort((np.arange(n), dists))
    out = [int(i) for i in order if i != query_index]
    return out[:count]


@dataclass(frozen=True)
class DssConfig:
    """Similarity-mining constants: pool of top-S candidates, per-batch quota
    s (hardest s/2 kept rank-exact, s/2 drawn from the rest of the pool)."""

    pool_size: int = 128
    batch_quota: int = 64
    rng_seed: int = 0

    def __post_init__(self):
        if self.batch_quota % 2 != 0:
            raise ValueError(f"batch_quota must be even, got {self.batch_quota}")
        if not (2 <= self.batch_quota <= self.pool_size):
            raise ValueError(
                f"need 2 <= batch_quota <= pool_size, got "
                f"{self.batch_quota} / {self.pool_size}"
            )


def dss_batch(
    similarity_row: Sequence[int],
    cfg: DssConfig,
    already_used: Iterable[int] = (),
    quota: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[int]:
    """Select one batch from a candidate ranking (descending similarity).

    The first quota/2 slots take the best unused ranks in order; the rest are
    drawn uniformly without replacement (seeded) from the unused remainder of
    the top-S pool, falling back to the rank-ordered extension beyond S when
    the pool runs dry. Raises when the whole ranking cannot fill the quota.
    """
    if quota is None:
        quota = cfg.batch_quota
    if quota % 2 != 0 or quota < 2:
        raise ValueError(f"quota must be even and >= 2, got {quota}")
    if quota > cfg.pool_size:
        raise ValueError(f"quota {quota} exceeds pool_size {cfg.pool_size}")
    row = list(similarity_row)
    if len(row) < cfg.pool_size:
        raise ValueError(
            f"similarity row holds {len(row)} candidates, need >= "
            f"pool_size {cfg.pool_size}"
        )
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    used = set(already_used)
    half = quota // 2

    fixed: list[int] = []
    cursor = 0
    while cursor < len(row) and len(fixed) < half:
        cand = row[cursor]
        cursor += 1
        if cand not in used:
            fixed.append(cand)
    if len(fixed) < half:
        raise ValueError("exhausted candidate pool")

    pool = [row[i] for i in range(cursor, cfg.pool_size) if row[i] not in used]
    if len(pool) >= half:
        pick = rng.choice(len(pool), size=half, replace=False)
        rand = [pool[int(i)] for i in pick]
    else:
        rand = list(pool)
        ext = cfg.pool_size
        taken = used | set(fixed) | set(rand)
        while len(rand) < half and ext < len(row):
            cand = row[ext]
            ext += 1
            if cand not in taken:
                rand.append(cand)
                taken.add(cand)
        if len(rand) < half:
            raise ValueError("exhausted candidate pool")
    return fixed + rand


@dataclass
class EpochPlan:
    """Ordered batches of pair ids for one epoch. Every batch has exactly
    batch_size entries; ids never repeat within an epoch."""

    phase: str
    batch_size: int
    batches: list[list[int]] = field(default_factory=list)

    def covered(self) -> set[int]:
        return {i for b in self.batches for i in b}


def export_plan_text(plan: EpochPlan) -> str:
    lines = [f"# phase={plan.phase} batch_size={plan.batch_size}"]
    lines.extend(" ".join(str(i) for i in batch) for batch in plan.batches)
    return "\n".join(lines) + "\n"


def parse_plan_text(text: str) -> EpochPlan:
    phase, batch_size = PHASE_RANDOM, 0
    batches = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            fields = dict(kv.split("=", 1) for kv in line[1:].split())
            phase = fields.get("phase", phase)
            batch_size = int(fields.get("batch_size", batch_size))
            continue
        batches.append([int(tok) for tok in line.split()])
    if batches and batch_size == 0:
        batch_size = len(batches[0])
    return EpochPlan(phase=phase, batch_size=batch_size, batches=batches)


def build_epoch_plan(
    ids: Sequence[int],
    phase: str,
    batch_size: int,
    *,
    coords: Sequence[GeoPoint] | None = None,
    similarity: np.ndarray | None = None,
    dss_cfg: DssConfig | None = None,
    seed: int = 0,
) -> EpochPlan:
    """Assemble one epoch of batches under the given mining phase.

    NNS consumes `coords`: each batch is an unconsumed anchor plus its
    nearest unconsumed neighbors. DSS consumes `similarity` (dataset x
    dataset, descriptor cosine): each batch is dss_batch over the anchor-led
    ranking, with the training batch size as the quota. RANDOM shuffles.
    Candidates within DUPLICATE_RADIUS_M of the anchor are excluded from
    negative pools when coordinates are available. Batches always have
    exactly batch_size ids; the final partial batch is dropped.
    """
    ids = [int(i) for i in ids]
    n = len(ids)
    if batch_size < 1 or batch_size > n:
        raise ValueError(f"batch_size {batch_size} outside [1, {n}]")
    if len(set(ids)) != n:
        raise ValueError("pair ids must be unique")

    dmat = None
    if coords is not None:
        if len(coords) != n:
            raise ValueError(f"{len(coords)} coords for {n} ids")
        dmat = distance_matrix(coords)

    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x706C616E)))
    order = [int(i) for i in rng.permutation(n)]
    plan = EpochPlan(phase=phase, batch_size=batch_size)
    used: set[int] = set()

    if phase == PHASE_RANDOM:
        flat = order
        for k in range(n // batch_size):
            plan.batches.append([ids[p] for p in flat[k * batch_size:(k + 1) * batch_size]])
        return plan

    if phase == PHASE_NNS:
        if dmat is None:
            raise ValueError("NNS phase requires coordinates")
        for anchor in order:
            if anchor in used or n - len(used) < batch_size:
                continue
            row = dmat[anchor]
            neigh_order = np.lexsort((np.array(ids), row))
            batch = [anchor]
            for p in neigh_order:
                p = int(p)
                if len(batch) == batch_size:
                    break
                if p == anchor or p in used:
                    continue
                if row[p] < DUPLICATE_RADIUS_M:
                    continue
                batch.append(p)
            if len(batch) < batch_size:
                continue  # duplicates shrank the usable pool; skip this anchor
            used.update(batch)
            plan.batches.append([ids[p] for p in batch])
        return plan

    if phase == PHASE_DSS:
        if similarity is None:
            raise ValueError("DSS phase requires a similarity matrix")
        if similarity.shape != (n, n):
            raise ValueError(
                f"similarity must be {n}x{n}, got {similarity.shape}"
            )
        cfg = dss_cfg if dss_cfg is not None else DssConfig()
        if batch_size % 2 != 0:
            raise ValueError("DSS phase needs an even batch size")
        if cfg.pool_size > n - 1:
            raise ValueError(
                f"pool_size {cfg.pool_size} exceeds dataset size - 1 = {n - 1}"
            )
        for anchor in order:
            if anchor in used or n - len(used) < batch_size:
                continue
            neg = -similarity[anchor]
            rank = np.lexsort((np.array(ids), neg))
            excluded = {anchor}
            if dmat is not None:
                excluded |= {int(p) for p in np.nonzero(dmat[anchor] < DUPLICATE_RADIUS_M)[0]}
            row = [anchor] + [int(p) for p in rank if int(p) not in excluded]
            batch = dss_batch(row, cfg, used, quota=batch_size, rng=rng)
            used.update(batch)
            plan.batches.append([ids[p] for p in batch])
        return plan

    raise ValueError(f"unknown phase {phase!r}")
