"""Dense float grids, two-stage feature normalization, and the DSTN file format.

A Grid is an H x W x depth block of float32 values, location-major: the flat
location index of (row, col) is row * width + col, with the channel axis
innermost. All public operations keep values finite.

DSTN tensor file format (bit-exact, no padding, no footer):

    magic  4 bytes  b"DSTN"
    u8     format version, = 1
    u8     dtype code, = 1 (float32)
    u8     ndim, 1..4
    u32 x ndim   little-endian dims
    payload      row-major little-endian float32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DataError, NumericError, TensorFormatError

MAGIC = b"DSTN"
_FORMAT_VERSION = 1
_DTYPE_F32 = 1

#: divisor floor for zero-variance feature dimensions
STD_EPSILON = 1e-8


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


@dataclass(frozen=True)
class Grid:
    """H x W x depth float32 grid; all values finite."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 3:
            raise DataError(f"Grid needs a 3-d array, got shape {v.shape}")
        if min(v.shape) < 1:
            raise DataError(f"Grid dims must be positive, got {v.shape}")
        if v.dtype != np.float32:
            object.__setattr__(self, "values", v.astype(np.float32))
        _require_finite(self.values, "Grid")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def depth(self) -> int:
        return self.values.shape[2]

    @property
    def n_locations(self) -> int:
        return self.height * self.width

    def locations(self) -> np.ndarray:
        """(H*W, depth) view in location order."""
        return self.values.reshape(self.n_locations, self.depth)


class NormState(Enum):
    RAW = "raw"
    STANDARDIZED = "standardized"
    UNIT = "unit"


@dataclass(frozen=True)
class FeatureGrid:
    """Per-image grid of feature vectors plus its normalization state."""

    grid: Grid
    norm_state: NormState = NormState.RAW
    zero_vector_count: int = 0  # locations left at norm 0 by unit scaling


@dataclass(frozen=True)
class NormStats:
    """Per-dimension mean/std over a training set, population convention."""

    mean: np.ndarray  # (D,) float64
    std: np.ndarray  # (D,) float64
    epsilon: float = STD_EPSILON
    clamped_dims: tuple[int, ...] = field(default_factory=tuple)

    @property
    def depth(self) -> int:
        return self.mean.shape[0]

    def divisors(self) -> np.ndarray:
        """std with near-zero entries clamped to epsilon."""
        return np.maximum(self.std, self.epsilon)


def compute_norm_stats(features: list[FeatureGrid] | tuple[FeatureGrid, ...]) -> NormStats:
    """Mean and population std per dimension over all locations of all grids.

    Dimensions with std below epsilon are flagged; their divisor is clamped
    rather than dropped so the feature depth stays stable.
    """
    if len(features) == 0:
        raise DataError("compute_norm_stats: no feature grids given")
    depths = {f.grid.depth for f in features}
    if len(depths) != 1:
        raise DataError(f"compute_norm_stats: mismatched depths {sorted(depths)}")
    stacked = np.concatenate([f.grid.locations() for f in features]).astype(np.float64)
    mean = stacked.mean(axis=0)
    std = np.sqrt(np.mean((stacked - mean) ** 2, axis=0))  # divide-by-N
    clamped = tuple(int(i) for i in np.nonzero(std < STD_EPSILON)[0])
    return NormStats(mean=mean, std=std, clamped_dims=clamped)


def l2_normalize_locations(values: np.ndarray) -> tuple[np.ndarray, int]:
    """Scale each location vector to unit norm; exact-zero vectors stay zero.

    Returns (normalized array, number of zero vectors left untouched).
    """
    flat = values.reshape(-1, values.shape[-1]).astype(np.float64)
    norms = np.linalg.norm(flat, axis=1)
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    out = flat / safe[:, None]
    return out.reshape(values.shape), int(zero.sum())


def normalize_features(f: FeatureGrid, stats: NormStats) -> FeatureGrid:
    """Two-stage normalization: per-dim z-score, then per-location unit norm."""
    if f.norm_state != NormState.RAW:
        raise DataError(f"normalize_features: input already {f.norm_state.value}")
    if stats.depth != f.grid.depth:
        raise DataError(
            f"normalize_features: stats depth {stats.depth} != grid depth {f.grid.depth}"
        )
    z = (f.grid.values.astype(np.float64) - stats.mean) / stats.divisors()
    unit, n_zero = l2_normalize_locations(z)
    return FeatureGrid(
        grid=Grid(unit.astype(np.float32)),
        norm_state=NormState.UNIT,
        zero_vector_count=n_zero,
    )


def save_tensor(array: np.ndarray, path) -> None:
    """Write a 1..4-d float array in the DSTN format described above."""
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if not 1 <= arr.ndim <= 4:
        raise TensorFormatError(f"DSTN supports 1..4 dims, got {arr.ndim}")
    if any(d > 0xFFFFFFFF for d in arr.shape):
        raise TensorFormatError(f"dimension overflow in shape {arr.shape}")
    header = MAGIC + struct.pack("<BBB", _FORMAT_VERSION, _DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype("<f4").tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    """Read a DSTN file back into a float32 array (exact round trip)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 7:
        raise TensorFormatError(f"{path}: truncated header")
    version, dtype_code, ndim = struct.unpack("<BBB", blob[4:7])
    if version != _FORMAT_VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if dtype_code != _DTYPE_F32:
        raise TensorFormatError(f"{path}: unsupported dtype code {dtype_code}")
    if not 1 <= ndim <= 4:
        raise TensorFormatError(f"{path}: bad ndim {ndim}")
    dim_end = 7 + 4 * ndim
    if len(blob) < dim_end:
        raise TensorFormatError(f"{path}: truncated dims")
    dims = struct.unpack(f"<{ndim}I", blob[7:dim_end])
    count = int(np.prod([int(d) for d in dims], dtype=np.int64))
    payload = blob[dim_end:]
    if len(payload) != 4 * count:
        raise TensorFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {4 * count}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def save_grid(g: Grid, path) -> None:
    save_tensor(g.values, path)


def load_grid(path) -> Grid:
    return Grid(load_tensor(path))
