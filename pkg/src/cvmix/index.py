"""Descriptor store and exact cosine-similarity retrieval.

All descriptors are unit vectors, so the dot product is the cosine score.
Search is exhaustive and exact: top-k selection is partition-based for speed
but the output is always identical to a full sort with ties broken by
ascending reference id. The store freezes after building; searches on a
frozen store are read-only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

DESCRIPTOR_MAGIC = b"CVDS"
DESCRIPTOR_VERSION = 1

_UNIT_TOL = 1e-4


@dataclass
class RankedList:
    """Per-query ranking: (reference_id, score) entries, scores non-increasing."""

    query_id: int | None
    entries: list[tuple[int, float]]

    def ids(self) -> list[int]:
        return [i for i, _ in self.entries]

    def scores(self) -> list[float]:
        return [s for _, s in self.entries]


class DescriptorStore:
    """Append-only set of unit descriptors keyed by unique u64 ids."""

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        self.dim = dim
        self._ids: list[int] = []
        self._rows: list[np.ndarray] = []
        self._id_set: set[int] = set()
        self._frozen = False
        self._matrix: np.ndarray | None = None
        self._ids_arr: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def ids(self) -> list[int]:
        return list(self._ids)

    def add(self, ref_id: int, descriptor: np.ndarray) -> None:
        if self._frozen:
            raise ValueError("store is frozen; no further adds")
        ref_id = int(ref_id)
        if ref_id < 0 or ref_id >= 1 << 64:
            raise ValueError(f"id {ref_id} outside u64 range")
        if ref_id in self._id_set:
            raise ValueError(f"duplicate id {ref_id}")
        v = np.asarray(descriptor, dtype=np.float64).reshape(-1)
        if v.shape[0] != self.dim:
            raise ValueError(f"descriptor dim {v.shape[0]} != store dim {self.dim}")
        norm = float(np.linalg.norm(v))
        if abs(norm - 1.0) > _UNIT_TOL:
            raise ValueError(f"descriptor for id {ref_id} is not unit (norm {norm:.6f})")
        self._ids.append(ref_id)
        self._rows.append(v.copy())
        self._id_set.add(ref_id)

    def freeze(self) -> "DescriptorStore":
        if not self._frozen:
            self._matrix = (np.vstack(self._rows) if self._rows
                            else np.zeros((0, self.dim)))
            self._ids_arr = np.array(self._ids, dtype=np.uint64)
            self._frozen = True
        return self

    def matrix(self) -> np.ndarray:
        self.freeze()
        return self._matrix

    def ids_array(self) -> np.ndarray:
        self.freeze()
        return self._ids_arr

    def get(self, ref_id: int) -> np.ndarray:
        idx = self._ids.index(int(ref_id))
        return self._rows[idx].copy()


def search(store: DescriptorStore, query: np.ndarray, k: int) -> RankedList:
    """Exact top-k by dot product; score ties broken by ascending id."""
    n = len(store)
    if n == 0:
        raise ValueError("cannot search an empty store")
    if not (1 <= k <= n):
        raise ValueError(f"k must be in [1, {n}], got {k}")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != store.dim:
        raise ValueError(f"query dim {q.shape[0]} != store dim {store.dim}")

    scores = store.matrix() @ q
    ids = store.ids_array()
    if k == n:
        order = np.lexsort((ids, -scores))
    else:
        # keep every candidate tied at the k-th score so the id tie rule
        # stays full-sort-equivalent
        thr = np.partition(scores, n - k)[n - k]
        cand = np.nonzero(scores >= thr)[0]
        order = cand[np.lexsort((ids[cand], -scores[cand]))]
    top = order[:k]
    return RankedList(
        query_id=None,
        entries=[(int(ids[i]), float(scores[i])) for i in top],
    )


def search_batch(
    store: DescriptorStore, queries: np.ndarray, k: int,
    query_ids: list[int] | None = None,
) -> list[RankedList]:
    """Elementwise map of search over the query rows; deterministic
    regardless of any internal parallelism."""
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2:
        raise ValueError(f"queries must be 2-D, got shape {queries.shape}")
    out = []
    for i in range(queries.shape[0]):
        ranked = search(store, queries[i], k)
        if query_ids is not None:
            ranked.query_id = int(query_ids[i])
        out.append(ranked)
    return out


def save_store(path, store: DescriptorStore) -> None:
    """Persist as CVDS: header, then per row an u64 id and float32 values."""
    mat = store.matrix()
    ids = store.ids_array()
    with open(path, "wb") as fh:
        fh.write(DESCRIPTOR_MAGIC)
        fh.write(struct.pack("<IIQ", DESCRIPTOR_VERSION, store.dim, len(store)))
        row32 = mat.astype("<f4")
        for i in range(len(store)):
            fh.write(struct.pack("<Q", int(ids[i])))
            fh.write(row32[i].tobytes())


def load_store(path) -> DescriptorStore:
    """Read a CVDS file; rows are promoted to float64 and re-normalized so the
    unit invariant survives the float32 quantization."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DESCRIPTOR_MAGIC:
            raise DataError(f"bad descriptor magic {magic!r}")
        header = fh.read(16)
        if len(header) != 16:
            raise DataError("truncated descriptor header")
        version, dim, count = struct.unpack("<IIQ", header)
        if version != DESCRIPTOR_VERSION:
            raise DataError(f"unsupported descriptor version {version}")
        if dim == 0 or dim > 1 << 24:
            raise DataError(f"implausible descriptor dim {dim}")
        store = DescriptorStore(dim)
        row_bytes = 8 + 4 * dim
        for _ in range(count):
            buf = fh.read(row_bytes)
            if len(buf) != row_bytes:
                raise DataError("truncated descriptor payload")
            (ref_id,) = struct.unpack_from("<Q", buf, 0)
            vals = np.frombuffer(buf, dtype="<f4", count=dim, offset=8)
            v = vals.astype(np.float64)
            norm = float(np.linalg.norm(v))
            if norm == 0.0 or not np.isfinite(norm):
                raise DataError(f"degenerate stored descriptor for id {ref_id}")
            store.add(ref_id, v / norm)
        if fh.read(1):
            raise DataError("trailing bytes after descriptor payload")
    return store.freeze()
