"""Feature-mix aggregation head.

Backbone tokens (N x D) are rearranged into D spatial maps, pushed through a
cascade of per-map residual MLP blocks (weights shared across maps), then
projected along channels and rows into a d x r output that is flattened and
L2-normalized into the global descriptor. Exact analytic gradients for every
parameter tensor and for the input tokens are provided; the finite-difference
checker in ``numerics`` is the oracle they are validated against.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import kernels
from .errors import DataError, NumericError

CHECKPOINT_MAGIC = b"CVMX"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MixerConfig:
    """Shape contract of the aggregation head.

    num_maps is the backbone channel count (one spatial map per channel);
    map_height x map_width is the token grid, flattened to n positions.
    """

    num_maps: int
    map_height: int
    map_width: int
    num_blocks: int = 2
    hidden_dim: int = 0  # 0 means "same as n" (square per-map MLP)
    out_depth: int = 64
    out_rows: int = 4
    use_biases: bool = True

    def __post_init__(self):
        for name in ("num_maps", "map_height", "map_width", "num_blocks",
                     "out_depth", "out_rows"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_dim < 0:
            raise ValueError(f"hidden_dim must be >= 0, got {self.hidden_dim}")
        if self.out_rows > self.n:
            raise ValueError(
                f"out_rows {self.out_rows} exceeds flattened map length {self.n}"
            )

    @property
    def n(self) -> int:
        return self.map_height * self.map_width

    @property
    def hidden(self) -> int:
        return self.hidden_dim if self.hidden_dim > 0 else self.n

    @property
    def descriptor_len(self) -> int:
        return self.out_depth * self.out_rows


@dataclass
class MixerParams:
    """All learnable tensors, block tensors stacked along a leading L axis."""

    W1: np.ndarray  # (L, hidden, n)
    b1: np.ndarray  # (L, hidden)
    W2: np.ndarray  # (L, n, hidden)
    b2: np.ndarray  # (L, n)
    W_d: np.ndarray  # (d, s)
    W_r: np.ndarray  # (r, n)

    def as_list(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2, self.W_d, self.W_r]

    @classmethod
    def from_list(cls, arrays: list[np.ndarray]) -> "MixerParams":
        return cls(*arrays)

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        """2-D views in checkpoint order; vectors appear as 1 x k rows."""
        L = self.W1.shape[0]
        for l in range(L):
            yield f"block{l}.W1", self.W1[l]
            yield f"block{l}.b1", self.b1[l].reshape(1, -1)
            yield f"block{l}.W2", self.W2[l]
            yield f"block{l}.b2", self.b2[l].reshape(1, -1)
        yield "W_d", self.W_d
        yield "W_r", self.W_r

    def copy(self) -> "MixerParams":
        return MixerParams(*[a.copy() for a in self.as_list()])

    def zeros_like(self) -> "MixerParams":
        return MixerParams(*[np.zeros_like(a) for a in self.as_list()])


@dataclass
class MixerGrads:
    """Gradient bundle returned by the backward pass."""

    params: MixerParams
    tokens: np.ndarray  # (N, D) or (m, N, D) for the batch variant


@dataclass
class MixerCache:
    """Activations captured by a forward pass, consumed by backward."""

    tokens: np.ndarray
    X: np.ndarray
    A: np.ndarray
    Zp: np.ndarray
    v: np.ndarray
    nrm: np.ndarray


def validate_params(params: MixerParams, cfg: MixerConfig) -> None:
    expect = {
        "W1": (cfg.num_blocks, cfg.hidden, cfg.n),
        "b1": (cfg.num_blocks, cfg.hidden),
        "W2": (cfg.num_blocks, cfg.n, cfg.hidden),
        "b2": (cfg.num_blocks, cfg.n),
        "W_d": (cfg.out_depth, cfg.num_maps),
        "W_r": (cfg.out_rows, cfg.n),
    }
    for name, arr in zip(expect, params.as_list()):
        if arr.shape != expect[name]:
            raise ValueError(f"{name} has shape {arr.shape}, expected {expect[name]}")
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"{name} contains non-finite entries")


def init_params(cfg: MixerConfig, seed: int) -> MixerParams:
    """Seeded uniform fan-in initialization; biases start at zero."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x6D69)))

    def uni(shape, fan_in):
        bound = np.sqrt(1.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    L, n, hid = cfg.num_blocks, cfg.n, cfg.hidden
    return MixerParams(
        W1=uni((L, hid, n), n),
        b1=np.zeros((L, hid)),
        W2=uni((L, n, hid), hid),
        b2=np.zeros((L, n)),
        W_d=uni((cfg.out_depth, cfg.num_maps), cfg.num_maps),
        W_r=uni((cfg.out_rows, n), n),
    )


def _check_tokens(tokens: np.ndarray, cfg: MixerConfig) -> np.ndarray:
    tokens = np.ascontiguousarray(tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be 2-D (N x D), got shape {tokens.shape}")
    if tokens.shape[0] != cfg.n:
        raise ValueError(
            f"token count {tokens.shape[0]} != map grid "
            f"{cfg.map_height}x{cfg.map_width} = {cfg.n}"
        )
    if tokens.shape[1] != cfg.num_maps:
        raise ValueError(
            f"token dim {tokens.shape[1]} != num_maps {cfg.num_maps}"
        )
    if not np.all(np.isfinite(tokens)):
        raise NumericError("tokens contain non-finite entries")
    return tokens


def feature_transform(tokens: np.ndarray, cfg: MixerConfig) -> np.ndarray:
    """Rearrange N x D tokens into the s x n map matrix.

    Pure permutation: channel c of the token at grid position (i, j) lands in
    map c at flat index i*w + j. Equivalently the transpose of the token
    matrix, each row read as an h x w map.
    """
    tokens = _check_tokens(tokens, cfg)
    return np.ascontiguousarray(tokens.T)


def inverse_feature_transform(maps: np.ndarray, cfg: MixerConfig) -> np.ndarray:
    """Exact inverse of feature_transform."""
    maps = np.ascontiguousarray(maps, dtype=np.float64)
    if maps.shape != (cfg.num_maps, cfg.n):
        raise ValueError(
            f"maps must have shape ({cfg.num_maps}, {cfg.n}), got {maps.shape}"
        )
    return np.ascontiguousarray(maps.T)


def mixer_block_forward(F, W1, b1, W2, b2) -> np.ndarray:
    """One residual mixing block applied independently to every map row:
    row <- W2 @ relu(W1 @ row + b1) + b2 + row."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2:
        raise ValueError(f"F must be 2-D, got shape {F.shape}")
    hid, n = W1.shape
    if F.shape[1] != n or W2.shape != (n, hid) or b1.shape != (hid,) or b2.shape != (n,):
        raise ValueError(
            f"block shape mismatch: F {F.shape}, W1 {W1.shape}, b1 {b1.shape}, "
            f"W2 {W2.shape}, b2 {b2.shape}"
        )
    H = np.maximum(0.0, F @ W1.T + b1)
    return H @ W2.T + b2 + F


def mixer_forward_batch(
    tokens: np.ndarray, params: MixerParams, cfg: MixerConfig, want_cache: bool = False
):
    """Descriptors for a batch of token grids, shape (m, N, D) -> (m, d*r)."""
    tokens = np.ascontiguousarray(tokens, dtype=np.float64)
    if tokens.ndim != 3:
        raise ValueError(f"batch tokens must be 3-D, got shape {tokens.shape}")
    if tokens.shape[1] != cfg.n or tokens.shape[2] != cfg.num_maps:
        raise ValueError(
            f"batch tokens must have shape (m, {cfg.n}, {cfg.num_maps}), "
            f"got {tokens.shape}"
        )
    if not np.all(np.isfinite(tokens)):
        raise NumericError("tokens contain non-finite entries")
    validate_params(params, cfg)
    desc, X, A, Zp, v, nrm = kernels.mixer_forward_batch(
        tokens, params.W1, params.b1, params.W2, params.b2, params.W_d, params.W_r
    )
    if (not np.all(np.isfinite(nrm)) or not np.all(nrm > 0.0)
            or not np.all(np.isfinite(desc))):
        raise NumericError("degenerate descriptor: zero or non-finite output")
    if want_cache:
        return desc, MixerCache(tokens=tokens, X=X, A=A, Zp=Zp, v=v, nrm=nrm)
    return desc


def mixer_forward(
    tokens: np.ndarray, params: MixerParams, cfg: MixerConfig, want_cache: bool = False
):
    """Single-sample forward pass; returns the unit descriptor of length d*r."""
    tokens = _check_tokens(tokens, cfg)
    out = mixer_forward_batch(tokens[None, :, :], params, cfg, want_cache)
    if want_cache:
        desc, cache = out
        return desc[0], cache
    return out[0]


def mixer_backward_batch(
    tokens: np.ndarray,
    params: MixerParams,
    cfg: MixerConfig,
    upstream: np.ndarray,
    cache: MixerCache,
) -> MixerGrads:
    """Exact gradients w.r.t. every parameter tensor (summed over the batch)
    and w.r.t. each sample's tokens, given d(loss)/d(descriptor) rows."""
    if cache is None:
        raise ValueError("mixer backward requires the forward cache")
    tokens = np.ascontiguousarray(tokens, dtype=np.float64)
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    if tokens.shape != cache.tokens.shape or not np.array_equal(tokens, cache.tokens):
        raise ValueError("forward cache does not match these tokens")
    if upstream.shape != (tokens.shape[0], cfg.descriptor_len):
        raise ValueError(
            f"upstream must have shape ({tokens.shape[0]}, {cfg.descriptor_len}), "
            f"got {upstream.shape}"
        )
    gW1, gb1, gW2, gb2, gWd, gWr, gtokens = kernels.mixer_backward_batch(
        upstream, params.W1, params.W2, params.W_d, params.W_r,
        cache.X, cache.A, cache.Zp, cache.v, cache.nrm,
    )
    grads = MixerParams(W1=gW1, b1=gb1, W2=gW2, b2=gb2, W_d=gWd, W_r=gWr)
    return MixerGrads(params=grads, tokens=gtokens)


def mixer_backward(
    tokens: np.ndarray,
    params: MixerParams,
    cfg: MixerConfig,
    upstream: np.ndarray,
    cache: MixerCache,
) -> MixerGrads:
    """Single-sample backward pass."""
    tokens = _check_tokens(tokens, cfg)
    upstream = np.asarray(upstream, dtype=np.float64).reshape(1, -1)
    out = mixer_backward_batch(tokens[None, :, :], params, cfg, upstream, cache)
    return MixerGrads(params=out.params, tokens=out.tokens[0])


def write_mixer_stream(fh, cfg: MixerConfig, params: MixerParams) -> None:
    """Emit the checkpoint block: magic, version, config, named tensors."""
    validate_params(params, cfg)
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<I", CHECKPOINT_VERSION))
    fh.write(struct.pack(
        "<7I?", cfg.num_maps, cfg.map_height, cfg.map_width, cfg.num_blocks,
        cfg.hidden, cfg.out_depth, cfg.out_rows, cfg.use_biases,
    ))
    tensors = list(params.named_tensors())
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _write_tensor(fh, name, arr)


def save_mixer(path, cfg: MixerConfig, params: MixerParams) -> None:
    """Write a standalone checkpoint file (float64, bit-exact round trip)."""
    with open(path, "wb") as fh:
        write_mixer_stream(fh, cfg, params)


def load_mixer(path) -> tuple[MixerConfig, MixerParams]:
    """Read a checkpoint back; bit-exact round trip with save_mixer."""
    with open(path, "rb") as fh:
        cfg, params = read_mixer_stream(fh)
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after checkpoint payload")
    return cfg, params


def read_mixer_stream(fh) -> tuple[MixerConfig, MixerParams]:
    magic = fh.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise DataError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack("<I", _must_read(fh, 4))
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    s, h, w, L, hidden, d, r, use_biases = struct.unpack("<7I?", _must_read(fh, 29))
    cfg = MixerConfig(
        num_maps=s, map_height=h, map_width=w, num_blocks=L,
        hidden_dim=hidden, out_depth=d, out_rows=r, use_biases=bool(use_biases),
    )
    (count,) = struct.unpack("<I", _must_read(fh, 4))
    blank = init_params(cfg, seed=0)
    expected = list(blank.named_tensors())
    if count != len(expected):
        raise DataError(f"checkpoint holds {count} tensors, expected {len(expected)}")
    out = blank.zeros_like()
    by_name = dict(out.named_tensors())
    for exp_name, exp_view in expected:
        name, arr = _read_tensor(fh)
        if name != exp_name:
            raise DataError(f"tensor {name!r} out of order, expected {exp_name!r}")
        if arr.shape != exp_view.shape:
            raise DataError(
                f"tensor {name!r} has shape {arr.shape}, expected {exp_view.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise DataError(f"tensor {name!r} contains non-finite entries")
        by_name[name][...] = arr
    return cfg, out


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _must_read(fh, 2))
    name = _must_read(fh, name_len).decode("utf-8")
    rows, cols = struct.unpack("<II", _must_read(fh, 8))
    if rows == 0 or cols == 0 or rows * cols > 1 << 28:
        raise DataError(f"tensor {name!r} has implausible shape {rows}x{cols}")
    buf = _must_read(fh, rows * cols * 8)
    arr = np.frombuffer(buf, dtype="<f8").reshape(rows, cols).astype(np.float64)
    return name, arr


def _must_read(fh, size: int) -> bytes:
    buf = fh.read(size)
    if len(buf) != size:
        raise DataError(f"truncated file: wanted {size} bytes, got {len(buf)}")
    return buf
