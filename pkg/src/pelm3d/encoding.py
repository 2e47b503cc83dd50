"""Dense phase-mask encoding of sparse text vectors.

Each tf-idf row is zero-padded to the next power of two, passed through an
unnormalized fast Walsh-Hadamard transform, mapped affinely onto ``[0, pi]``
using bounds frozen from the training split, and laid out row-major on a
square grid of ``side = floor(sqrt(2**d))`` modes. Entries beyond ``side**2``
are discarded, so ``2**17`` gives a 362 x 362 mask.

Mask cache layout (little-endian)::

    offset  type      field
    0       8 bytes   magic  b"PELMMASK"
    8       uint32    format version (1)
    12      uint32    side
    16      uint64    count
    24      float64   lo (normalization lower bound)
    32      float64   hi (normalization upper bound)
    40      float64   phases, count * side * side values, row-major
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class EncodingError(ValueError):
    pass


class MaskCacheError(EncodingError):
    """The mask cache file is truncated, corrupted or of an unknown version."""


@dataclass(frozen=True)
class EncodingConfig:
    padded_length: int
    lo: float
    hi: float

    def __post_init__(self):
        if self.padded_length < 1 or self.padded_length & (self.padded_length - 1):
            raise EncodingError(f"padded_length {self.padded_length} is not a power of two")

    @property
    def side(self) -> int:
        return math.isqrt(self.padded_length)

    def to_dict(self):
        return {"padded_length": self.padded_length, "side": self.side, "lo": self.lo, "hi": self.hi}


@dataclass
class PhaseMask:
    phases: np.ndarray

    @property
    def side(self) -> int:
        return self.phases.shape[0]


def padded_length(n: int) -> int:
    """Smallest power of two ``>= n``."""
    if n < 1:
        raise EncodingError("vector length must be >= 1")
    return 1 << (n - 1).bit_length()


def pad_to_pow2(v) -> np.ndarray:
    """Zero-pad the last axis of ``v`` to a power-of-two length."""
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[-1]
    target = padded_length(n)
    if target == n:
        return v.copy()
    out = np.zeros(v.shape[:-1] + (target,), dtype=np.float64)
    out[..., :n] = v
    return out


def fwht(v) -> np.ndarray:
    """Unnormalized Walsh-Hadamard transform (Sylvester ordering) along the last axis.

    ``fwht(fwht(v)) == len(v) * v``. Runs in ``O(L log L)`` per vector and
    accepts a leading batch dimension.
    """
    a = np.array(v, dtype=np.float64)
    n = a.shape[-1]
    if n < 1 or n & (n - 1):
        raise EncodingError(f"fwht length must be a power of two, got {n}")
    lead = a.shape[:-1]
    a = a.reshape(-1, n)
    h = 1
    while h < n:
        b = a.reshape(-1, n // (2 * h), 2, h)
        x = b[:, :, 0, :].copy()
        b[:, :, 0, :] += b[:, :, 1, :]
        b[:, :, 1, :] = x - b[:, :, 1, :]
        h *= 2
    return a.reshape(lead + (n,))


def transform_rows(X, batch_size: int = 512) -> np.ndarray:
    """Pad and transform every row of a (sparse or dense) matrix.

    Returns a float64 array of shape ``(N, 2**d)``.
    """
    n, v = X.shape
    out = np.empty((n, padded_length(v)), dtype=np.float64)
    for start in range(0, n, batch_size):
        chunk = X[start:start + batch_size]
        chunk = chunk.toarray() if sp.issparse(chunk) else np.asarray(chunk)
        out[start:start + batch_size] = fwht(pad_to_pow2(chunk))
    return out


def fit_encoding(transformed_train: np.ndarray) -> EncodingConfig:
    """Freeze normalization bounds from transformed training rows.

    Only the ``side**2`` leading entries that reach the mask are considered.
    """
    length = transformed_train.shape[-1]
    cfg_side = math.isqrt(length)
    shown = transformed_train[..., : cfg_side * cfg_side]
    lo, hi = float(shown.min()), float(shown.max())
    if not lo < hi:
        raise EncodingError("training vectors are constant; cannot fix normalization bounds")
    return EncodingConfig(length, lo, hi)


def fit_bounds(X_train, batch_size: int = 512) -> EncodingConfig:
    """Like :func:`fit_encoding` but streams raw rows through the transform."""
    n, v = X_train.shape
    length = padded_length(v)
    s = math.isqrt(length)
    lo, hi = math.inf, -math.inf
    for start in range(0, n, batch_size):
        chunk = X_train[start:start + batch_size]
        chunk = chunk.toarray() if sp.issparse(chunk) else np.asarray(chunk)
        head = fwht(pad_to_pow2(chunk))[:, : s * s]
        lo, hi = min(lo, float(head.min())), max(hi, float(head.max()))
    if not lo < hi:
        raise EncodingError("training vectors are constant; cannot fix normalization bounds")
    return EncodingConfig(length, lo, hi)


def to_phase_mask(w, cfg: EncodingConfig) -> np.ndarray:
    """Map transformed vector(s) to ``side x side`` phase grids in ``[0, pi]``.

    ``w`` may be one vector or a batch ``(N, L)``; the return has shape
    ``(side, side)`` or ``(N, side, side)``. Values outside the frozen bounds
    are clamped.
    """
    if not cfg.lo < cfg.hi:
        raise EncodingError(f"degenerate normalization bounds lo={cfg.lo}, hi={cfg.hi}")
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != cfg.padded_length:
        raise EncodingError(f"expected vectors of length {cfg.padded_length}, got {w.shape[-1]}")
    s = cfg.side
    head = w[..., : s * s]
    phases = np.clip(np.pi * (head - cfg.lo) / (cfg.hi - cfg.lo), 0.0, np.pi)
    return phases.reshape(w.shape[:-1] + (s, s))


def encode_matrix(X, cfg: EncodingConfig, batch_size: int = 512) -> np.ndarray:
    """Encode all rows of ``X`` into a ``(N, side, side)`` phase stack."""
    n, v = X.shape
    if padded_length(v) != cfg.padded_length:
        raise EncodingError(f"{v}-column input does not pad to {cfg.padded_length}")
    s = cfg.side
    out = np.empty((n, s, s), dtype=np.float64)
    for start in range(0, n, batch_size):
        chunk = X[start:start + batch_size]
        chunk = chunk.toarray() if sp.issparse(chunk) else np.asarray(chunk)
        out[start:start + batch_size] = to_phase_mask(fwht(pad_to_pow2(chunk)), cfg)
    return out


_HEADER = struct.Struct("<8sIIQdd")
_MAGIC = b"PELMMASK"
_VERSION = 1


def write_mask_cache(path, masks: np.ndarray, cfg: EncodingConfig) -> None:
    masks = np.ascontiguousarray(masks, dtype="<f8")
    if masks.ndim != 3 or masks.shape[1] != masks.shape[2]:
        raise EncodingError("masks must be a (count, side, side) stack")
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, masks.shape[1], masks.shape[0], cfg.lo, cfg.hi))
        fh.write(masks.tobytes())
    tmp.replace(path)


def read_mask_cache(path):
    """Load a mask cache; returns ``(masks, lo, hi)``.

    Raises :class:`MaskCacheError` if the header or payload size is wrong.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise MaskCacheError(f"{path}: truncated header")
    magic, version, side, count, lo, hi = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != _VERSION:
        raise MaskCacheError(f"{path}: not a version-{_VERSION} mask cache")
    expected = _HEADER.size + 8 * count * side * side
    if len(raw) != expected:
        raise MaskCacheError(f"{path}: expected {expected} bytes, found {len(raw)}")
    masks = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(count, side, side).copy()
    if not np.all((masks >= 0.0) & (masks <= np.pi)):
        raise MaskCacheError(f"{path}: phases outside [0, pi]")
    return masks, lo, hi
