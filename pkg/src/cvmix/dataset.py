"""Manifest parsing, feature-file IO, and the synthetic paired-feature
generator used as the desk-scale stand-in for a real backbone.

Manifest format: UTF-8 text, one `#`-prefixed header line declaring the
coordinate mode and split, then one tab-separated record per line:

    id  city  lat  lon  ground_ref  sat_ref  ground_date  sat_date  covering_ids

(UTM manifests carry easting/northing in the two coordinate columns.)
Optional fields hold `-` when absent; covering_ids is comma-separated.

Feature files (CVFM) carry one token grid: header magic/version/h/w/D, then
h*w tokens x D channels as little-endian float32, token-major (row i, col j
-> flat index i*w + j). Values are promoted to float64 on read; training
math stays in 64-bit while files stay compact.
"""

from __future__ import annotations

import datetime
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .sampling import EARTH_RADIUS_M, GeoPoint, UTM, WGS84

FEATURE_MAGIC = b"CVFM"
FEATURE_VERSION = 1

# meters per degree of arc on the sphere used by the haversine metric
_METERS_PER_DEG = EARTH_RADIUS_M * math.pi / 180.0


@dataclass(frozen=True)
class PairRecord:
    """One ground/satellite pair: u64 id, location, file references."""

    id: int
    city: str
    point: GeoPoint
    ground_ref: str
    sat_ref: str
    ground_date: str | None = None
    sat_date: str | None = None
    covering_ids: tuple[int, ...] | None = None

    def __post_init__(self):
        if not (0 <= self.id < 1 << 64):
            raise ValueError(f"id {self.id} outside u64 range")
        for name in ("city", "ground_ref", "sat_ref"):
            val = getattr(self, name)
            if not val or "\t" in val or "\n" in val:
                raise ValueError(f"{name} must be non-empty and tab/newline free")
        for name in ("ground_date", "sat_date"):
            val = getattr(self, name)
            if val is not None:
                try:
                    datetime.date.fromisoformat(val)
                except ValueError as exc:
                    raise ValueError(f"{name} {val!r} is not an ISO-8601 date") from exc


@dataclass
class Manifest:
    coordinate_mode: str
    split: str
    records: list[PairRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.coordinate_mode not in (WGS84, UTM):
            raise ValueError(f"unknown coordinate_mode {self.coordinate_mode!r}")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")
        seen = set()
        for rec in self.records:
            if rec.id in seen:
                raise ValueError(f"duplicate record id {rec.id}")
            seen.add(rec.id)
            if rec.point.mode != self.coordinate_mode:
                raise ValueError(
                    f"record {rec.id} uses {rec.point.mode}, manifest is "
                    f"{self.coordinate_mode}"
                )

    @property
    def cities(self) -> list[str]:
        return sorted({rec.city for rec in self.records})

    def by_id(self) -> dict[int, PairRecord]:
        return {rec.id: rec for rec in self.records}


def _fmt_opt(value) -> str:
    return "-" if value is None else str(value)


def save_manifest(path, manifest: Manifest) -> None:
    lines = [f"# coordinate_mode={manifest.coordinate_mode} split={manifest.split}"]
    for rec in manifest.records:
        covering = ("-" if rec.covering_ids is None
                    else ",".join(str(i) for i in rec.covering_ids))
        lines.append("\t".join([
            str(rec.id), rec.city, repr(rec.point.y), repr(rec.point.x),
            rec.ground_ref, rec.sat_ref, _fmt_opt(rec.ground_date),
            _fmt_opt(rec.sat_date), covering,
        ]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path) -> Manifest:
    """Parse and validate a manifest; errors carry the offending line number."""
    text = Path(path).read_text(encoding="utf-8")
    mode = split = None
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            fields = dict(
                kv.split("=", 1) for kv in line[1:].split() if "=" in kv
            )
            mode = fields.get("coordinate_mode", mode)
            split = fields.get("split", split)
            continue
        if mode is None or split is None:
            raise DataError(f"{path}:{lineno}: records before the header line")
        cols = line.split("\t")
        if len(cols) != 9:
            raise DataError(f"{path}:{lineno}: expected 9 fields, got {len(cols)}")
        try:
            covering = (None if cols[8] == "-" else
                        tuple(int(tok) for tok in cols[8].split(",")))
            rec = PairRecord(
                id=int(cols[0]),
                city=cols[1],
                point=GeoPoint(x=float(cols[3]), y=float(cols[2]), mode=mode),
                ground_ref=cols[4],
                sat_ref=cols[5],
                ground_date=None if cols[6] == "-" else cols[6],
                sat_date=None if cols[7] == "-" else cols[7],
                covering_ids=covering,
            )
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        records.append(rec)
    if mode is None or split is None:
        raise DataError(f"{path}: missing coordinate_mode/split header line")
    try:
        return Manifest(coordinate_mode=mode, split=split, records=records)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def check_city_disjoint(train: Manifest, test: Manifest) -> None:
    """Train/test city sets must not intersect when both splits are loaded."""
    overlap = set(train.cities) & set(test.cities)
    if overlap:
        raise DataError(
            f"train and test splits share cities: {sorted(overlap)}"
        )


@dataclass
class FeatureMap:
    """One token grid: (h*w, D) tokens, float64 in memory."""

    h: int
    w: int
    tokens: np.ndarray

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise ValueError(f"grid dims must be positive, got {self.h}x{self.w}")
        self.tokens = np.ascontiguousarray(self.tokens, dtype=np.float64)
        if self.tokens.shape[0] != self.h * self.w:
            raise ValueError(
                f"token count {self.tokens.shape[0]} != h*w = {self.h * self.w}"
            )

    @property
    def depth(self) -> int:
        return self.tokens.shape[1]


def write_feature_file(path, fmap: FeatureMap) -> None:
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IIII", FEATURE_VERSION, fmap.h, fmap.w, fmap.depth))
        fh.write(fmap.tokens.astype("<f4").tobytes())


def read_feature_file(path) -> FeatureMap:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURE_MAGIC:
            raise DataError(f"{path}: bad feature magic {magic!r}")
        header = fh.read(16)
        if len(header) != 16:
            raise DataError(f"{path}: truncated feature header")
        version, h, w, depth = struct.unpack("<IIII", header)
        if version != FEATURE_VERSION:
            raise DataError(f"{path}: unsupported feature version {version}")
        if h == 0 or w == 0 or depth == 0 or h * w * depth > 1 << 28:
            raise DataError(f"{path}: implausible dims {h}x{w}x{depth}")
        payload = fh.read(h * w * depth * 4)
        if len(payload) != h * w * depth * 4:
            raise DataError(f"{path}: truncated feature payload")
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after payload")
    tokens = np.frombuffer(payload, dtype="<f4").reshape(h * w, depth)
    return FeatureMap(h=h, w=w, tokens=tokens.astype(np.float64))


# ---------------------------------------------------------------------------
# synthetic paired features

# channel-mixing of the satellite view: a fixed orthonormal rotation that is
# identity on a hidden subspace (fraction below) and strongly rotating on the
# rest, so raw features do not match across views but an aggregation head can
# learn the alignment
_MIX_SEED = 0x5A7E1117
_INVARIANT_FRACTION = 0.5
# regional appearance field so geographic neighbors are genuinely confusable
_REGION_SCALE = 1.0
_REGION_RBF_M = 220.0
_GRID_SPACING_M = 100.0
_JITTER_M = 10.0


def _channel_mixing(D: int) -> np.ndarray:
    rng = np.random.default_rng(_MIX_SEED)
    q, _ = np.linalg.qr(rng.normal(size=(D, D)))
    k = max(1, int(round(D * _INVARIANT_FRACTION)))
    rot = np.eye(D)
    planes = (D - k) // 2
    for p in range(planes):
        theta = math.pi / 2.0 + (math.pi / 2.0) * (p + 0.5) / planes
        i, j = k + 2 * p, k + 2 * p + 1
        c, s = math.cos(theta), math.sin(theta)
        rot[i, i], rot[i, j], rot[j, i], rot[j, j] = c, -s, s, c
    return q @ rot @ q.T


@dataclass
class SyntheticDataset:
    manifest: Manifest
    ground: np.ndarray  # (pairs, h*w, D) float32
    satellite: np.ndarray
    h: int
    w: int


def synthetic_encoder(
    seed: int,
    pair_count: int,
    h: int = 8,
    w: int = 8,
    depth: int = 32,
    noise_sigma: float = 0.1,
) -> SyntheticDataset:
    """Deterministic paired features on a jittered ~100 m grid.

    Each pair draws a latent token grid (a private component plus a smooth
    regional field shared with geographic neighbors). The ground view adds
    noise to the latent; the satellite view first applies the fixed
    orthonormal channel mixing, so matching the views requires learned
    alignment rather than raw feature similarity.
    """
    if pair_count < 2:
        raise ValueError(f"pair_count must be >= 2, got {pair_count}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x53594E)))
    n = h * w

    side = math.ceil(math.sqrt(pair_count))
    spacing_deg = _GRID_SPACING_M / _METERS_PER_DEG
    jitter_deg = _JITTER_M / _METERS_PER_DEG
    rows, cols = np.divmod(np.arange(pair_count), side)
    lat = rows * spacing_deg + rng.uniform(-jitter_deg, jitter_deg, pair_count)
    lon = cols * spacing_deg + rng.uniform(-jitter_deg, jitter_deg, pair_count)

    # regional field: RBF mixture of landmark tensors over the grid
    n_landmarks = max(4, pair_count // 24)
    lm_lat = rng.uniform(lat.min(), lat.max(), n_landmarks)
    lm_lon = rng.uniform(lon.min(), lon.max(), n_landmarks)
    landmarks = rng.normal(size=(n_landmarks, n, depth))
    rbf_deg = _REGION_RBF_M / _METERS_PER_DEG
    d2 = (lat[:, None] - lm_lat[None, :]) ** 2 + (lon[:, None] - lm_lon[None, :]) ** 2
    weights = np.exp(-d2 / (2.0 * rbf_deg ** 2))
    # constant regional power everywhere: neighbors stay confusable but a
    # pair's own latent always dominates the cross terms
    weights /= np.linalg.norm(weights, axis=1, keepdims=True)

    unique = rng.normal(size=(pair_count, n, depth))
    regional = np.einsum("pk,knd->pnd", weights, landmarks)
    latent = unique + _REGION_SCALE * regional

    mix = _channel_mixing(depth)
    ground = latent + noise_sigma * rng.normal(size=latent.shape)
    satellite = latent @ mix.T + noise_sigma * rng.normal(size=latent.shape)

    records = []
    for i in range(pair_count):
        records.append(PairRecord(
            id=i,
            city="synthville",
            point=GeoPoint.wgs84(float(lat[i]), float(lon[i])),
            ground_ref=f"features/g{i:06d}.cvfm",
            sat_ref=f"features/s{i:06d}.cvfm",
        ))
    manifest = Manifest(coordinate_mode=WGS84, split="train", records=records)
    return SyntheticDataset(
        manifest=manifest,
        ground=ground.astype(np.float32),
        satellite=satellite.astype(np.float32),
        h=h,
        w=w,
    )


def write_synthetic_dataset(out_dir, data: SyntheticDataset) -> Path:
    """Materialize manifest + CVFM files under out_dir; returns manifest path."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    for rec, g_tokens, s_tokens in zip(
        data.manifest.records, data.ground, data.satellite
    ):
        write_feature_file(out / rec.ground_ref,
                           FeatureMap(h=data.h, w=data.w, tokens=g_tokens))
        write_feature_file(out / rec.sat_ref,
                           FeatureMap(h=data.h, w=data.w, tokens=s_tokens))
    manifest_path = out / "manifest.tsv"
    save_manifest(manifest_path, data.manifest)
    return manifest_path


# ---------------------------------------------------------------------------
# feature sources consumed by the trainer

GROUND = "ground"
SATELLITE = "satellite"


class FeatureSource:
    """Token access by record and view; variant > 0 selects a pre-extracted
    augmented copy when one exists."""

    def variant_count(self, record: PairRecord, view: str) -> int:
        return 1

    def tokens(self, record: PairRecord, view: str, variant: int = 0) -> np.ndarray:
        raise NotImplementedError


class ArrayFeatureSource(FeatureSource):
    """In-memory features keyed by record id (synthetic datasets, tests)."""

    def __init__(self, ground: dict[int, np.ndarray], satellite: dict[int, np.ndarray]):
        self._views = {GROUND: ground, SATELLITE: satellite}

    @classmethod
    def from_synthetic(cls, data: SyntheticDataset) -> "ArrayFeatureSource":
        ids = [rec.id for rec in data.manifest.records]
        return cls(
            ground={i: np.asarray(t, dtype=np.float64)
                    for i, t in zip(ids, data.ground)},
            satellite={i: np.asarray(t, dtype=np.float64)
                       for i, t in zip(ids, data.satellite)},
        )

    def tokens(self, record: PairRecord, view: str, variant: int = 0) -> np.ndarray:
        table = self._views[view]
        if record.id not in table:
            raise DataError(f"no {view} features for record id {record.id}")
        return table[record.id]


class FileFeatureSource(FeatureSource):
    """CVFM files resolved against a root directory, cached in memory.

    Augmented variants are sibling files with an `.augK` suffix before the
    extension (`g000001.aug1.cvfm`); variant 0 is the base file.
    """

    def __init__(self, root):
        self.root = Path(root)
        self._cache: dict[Path, np.ndarray] = {}

    def _ref(self, record: PairRecord, view: str) -> Path:
        ref = record.ground_ref if view == GROUND else record.sat_ref
        return self.root / ref

    def _variant_path(self, base: Path, variant: int) -> Path:
        if variant == 0:
            return base
        return base.with_suffix(f".aug{variant}{base.suffix}")

    def variant_count(self, record: PairRecord, view: str) -> int:
        base = self._ref(record, view)
        count = 1
        while self._variant_path(base, count).exists():
            count += 1
        return count

    def tokens(self, record: PairRecord, view: str, variant: int = 0) -> np.ndarray:
        path = self._variant_path(self._ref(record, view), variant)
        if path not in self._cache:
            if not path.exists():
                raise DataError(
                    f"missing {view} feature file for record id {record.id}: {path}"
                )
            self._cache[path] = read_feature_file(path).tokens
        return self._cache[path]
