"""Coherent-light feature map of the three-dimensional photonic ELM.

A sample ``x`` (phase mask) and the fixed embedding ``w`` are written on a
phase-only modulator, ``exp(i(x + w))``. The wavefront is focused by a lens
(centered, orthonormal 2-D DFT) and then propagated by a distance ``z_j``
past the focal plane with the paraxial Fresnel transfer function
``exp(-i pi lambda z (fx^2 + fy^2))``. Each detection plane records
``|field|^2``, optionally quantized to the camera bit depth, and the pixels
are averaged over square blocks to form the output channels. Features of all
planes are concatenated column-wise.

Every propagation is unitary: the DFT is orthonormal, the transfer function
has unit modulus and zero-padding of the aperture is an isometry.

Feature file layout (little-endian)::

    offset  type      field
    0       8 bytes   magic  b"PELMFEAT"
    8       uint32    format version (1)
    12      uint32    detector bits (max over planes, 0 = full precision)
    16      uint64    N (rows)
    24      uint64    M_total (columns)
    32      uint64    embedding seed
    40      uint64    plane seed
    48      float32   N * M_total values, row-major

A JSON sidecar (``<file>.json``) carries the channel map, plane specs and
geometry.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

MODES = ("angular-spectrum", "random-unitary")
DETECTOR_BITS = (0, 8, 12)


class OpticsError(ValueError):
    pass


class FeatureFileError(OpticsError):
    """The feature file or its sidecar is truncated or inconsistent."""


@dataclass(frozen=True)
class EmbeddingMatrix:
    values: np.ndarray
    seed: int

    @property
    def side(self) -> int:
        return self.values.shape[0]


def make_embedding(side: int, seed: int) -> EmbeddingMatrix:
    """i.i.d. uniform phases on ``[0, pi]``."""
    rng = np.random.default_rng(seed)
    return EmbeddingMatrix(rng.uniform(0.0, np.pi, size=(side, side)), seed)


@dataclass
class OpticalField:
    grid: np.ndarray
    wavelength: float = 532e-9
    pitch: float = 8e-6

    @property
    def energy(self):
        return np.sum(np.abs(self.grid) ** 2, axis=(-2, -1))


@dataclass(frozen=True)
class PlaneSpec:
    plane_id: int
    z: float
    detector_bits: int = 0
    mode: str = "angular-spectrum"

    def __post_init__(self):
        if self.mode not in MODES:
            raise OpticsError(f"unknown propagation mode {self.mode!r}")
        if self.detector_bits not in DETECTOR_BITS:
            raise OpticsError(f"detector_bits must be one of {DETECTOR_BITS}")


@dataclass(frozen=True)
class Geometry:
    """Simulation constants shared by all planes.

    ``grid`` is the computational grid edge; an input smaller than ``grid`` is
    zero-padded (centered) before focusing, which enlarges the speckle grains
    to roughly ``grid / side`` pixels.
    """

    wavelength: float = 532e-9
    pitch: float = 8e-6
    grid: int | None = None
    slm_bits: int = 8
    noise_std: float = 0.0
    noise_seed: int = 0
    plane_seed: int = 0


@dataclass
class FeatureMatrix:
    values: np.ndarray
    channel_map: np.ndarray
    planes: list[PlaneSpec]
    block: int
    embedding_seed: int = 0
    geometry: Geometry = field(default_factory=Geometry)

    @property
    def shape(self):
        return self.values.shape

    @property
    def bits(self) -> int:
        return max(p.detector_bits for p in self.planes)

    def plane_columns(self, plane_id: int) -> np.ndarray:
        return np.flatnonzero(self.channel_map[:, 0] == plane_id)


def quantize_phase(phase, bits: int):
    """Round phases to ``2**bits`` uniform levels over ``[0, 2 pi)``."""
    if bits <= 0:
        return phase
    step = 2.0 * np.pi / (1 << bits)
    return np.mod(np.round(np.asarray(phase) / step), 1 << bits) * step


def synthesize_field(x, w: EmbeddingMatrix, slm_bits: int = 8, geometry: Geometry | None = None) -> OpticalField:
    """Phase-modulated wavefront ``exp(i (x + w))``.

    ``x`` may be a single ``(s, s)`` mask or a stack ``(n, s, s)``.
    """
    g = geometry or Geometry()
    x = np.asarray(getattr(x, "phases", x), dtype=np.float64)
    if x.shape[-2:] != w.values.shape:
        raise OpticsError(f"mask shape {x.shape[-2:]} does not match embedding {w.values.shape}")
    phase = quantize_phase(x + w.values, slm_bits)
    return OpticalField(np.exp(1j * phase), g.wavelength, g.pitch)


def _pad_center(a: np.ndarray, n: int) -> np.ndarray:
    s = a.shape[-1]
    if n == s:
        return a
    if n < s:
        raise OpticsError(f"grid {n} is smaller than the input side {s}")
    out = np.zeros(a.shape[:-2] + (n, n), dtype=np.complex128)
    o = (n - s) // 2
    out[..., o:o + s, o:o + s] = a
    return out


def far_field(grid: np.ndarray) -> np.ndarray:
    """Focal-plane field of a lens: centered orthonormal 2-D DFT."""
    shifted = np.fft.ifftshift(grid, axes=(-2, -1))
    return np.fft.fftshift(np.fft.fft2(shifted, norm="ortho"), axes=(-2, -1))


def fresnel_transfer(n: int, z: float, wavelength: float, pitch: float) -> np.ndarray:
    f = np.fft.fftfreq(n, d=pitch)
    f2 = f[:, None] ** 2 + f[None, :] ** 2
    return np.exp(-1j * np.pi * wavelength * z * f2)


def random_unitary(n: int, seed: int) -> Callable[[np.ndarray], np.ndarray]:
    """Seeded structured random unitary acting on ``(.., n, n)`` grids.

    ``U = D2 F P D1 F D0`` with random diagonal phases ``D``, a random pixel
    permutation ``P`` and the orthonormal DFT ``F``. It costs ``O(n^2 log n)``
    per grid and mixes every input mode into every output mode.
    """
    rng = np.random.default_rng(seed)
    d0, d1, d2 = (np.exp(2j * np.pi * rng.random((n, n))) for _ in range(3))
    perm = rng.permutation(n * n)

    def apply(a):
        b = np.fft.fft2(a * d0, norm="ortho") * d1
        lead = b.shape[:-2]
        b = b.reshape(lead + (n * n,))[..., perm].reshape(lead + (n, n))
        return np.fft.fft2(b, norm="ortho") * d2

    return apply


def propagate(fld: OpticalField, plane: PlaneSpec, geometry: Geometry | None = None) -> OpticalField:
    """Field on detection plane ``plane``.

    ``angular-spectrum``: lens focus then Fresnel propagation by ``plane.z``.
    ``random-unitary``: a seeded random unitary, a physics-free stand-in.
    """
    g = geometry or Geometry(wavelength=fld.wavelength, pitch=fld.pitch)
    n = g.grid or fld.grid.shape[-1]
    a = _pad_center(fld.grid, n)
    if plane.mode == "angular-spectrum":
        if not plane.z > 0:
            raise OpticsError(f"plane {plane.plane_id}: z must be positive in angular-spectrum mode")
        focal = far_field(a)
        h = fresnel_transfer(n, plane.z, g.wavelength, g.pitch)
        out = np.fft.ifft2(np.fft.fft2(focal, norm="ortho") * h, norm="ortho")
    else:
        out = random_unitary(n, g.plane_seed + plane.plane_id)(a)
    return OpticalField(out, g.wavelength, g.pitch)


def detect(fld, plane: PlaneSpec, scale: float | None = None, noise: np.ndarray | None = None) -> np.ndarray:
    """Camera response ``|E|^2``, with optional additive noise and quantization.

    With ``plane.detector_bits = b > 0`` the intensity is divided by the frozen
    calibration ``scale``, clamped to ``[0, 1]``, rounded to ``2**b`` levels and
    multiplied back by ``scale`` so that units match full-precision output.
    """
    grid = fld.grid if isinstance(fld, OpticalField) else np.asarray(fld)
    intensity = np.abs(grid) ** 2
    if noise is not None:
        intensity = np.maximum(intensity + noise, 0.0)
    b = plane.detector_bits
    if b:
        if scale is None or not scale > 0:
            raise OpticsError(f"plane {plane.plane_id}: quantized detection needs a positive calibration scale")
        levels = (1 << b) - 1
        intensity = np.round(np.clip(intensity / scale, 0.0, 1.0) * levels) * (scale / levels)
    return intensity


def bin_channels(intensity, block: int) -> np.ndarray:
    """Average ``block x block`` tiles; returns ``(..., floor(n/block)**2)``.

    Rows and columns that do not fill a whole tile at the far edge are dropped.
    """
    if block <= 0:
        raise OpticsError("block must be positive")
    a = np.asarray(intensity)
    n = a.shape[-1]
    k = n // block
    if k == 0:
        raise OpticsError(f"block {block} exceeds grid side {n}")
    a = a[..., : k * block, : k * block]
    lead = a.shape[:-2]
    tiles = a.reshape(lead + (k, block, k, block)).mean(axis=(-3, -1))
    return tiles.reshape(lead + (k * k,))


def intensity_planes(masks, w: EmbeddingMatrix, planes: Sequence[PlaneSpec], geometry: Geometry) -> list[np.ndarray]:
    """Raw ``|E|^2`` patterns per plane for a stack of masks (no detector model)."""
    fld = synthesize_field(masks, w, geometry.slm_bits, geometry)
    return [np.abs(propagate(fld, p, geometry).grid) ** 2 for p in planes]


def calibrate(masks, w: EmbeddingMatrix, planes: Sequence[PlaneSpec], geometry: Geometry, batch_size: int = 64) -> list[float]:
    """Per-plane maximum intensity over a calibration batch of masks."""
    masks = np.asarray(masks)
    peaks = np.zeros(len(planes))
    for start in range(0, len(masks), batch_size):
        for j, inten in enumerate(intensity_planes(masks[start:start + batch_size], w, planes, geometry)):
            peaks[j] = max(peaks[j], float(inten.max()))
    return peaks.tolist()


def _noise(geometry: Geometry, plane_id: int, rows: range, shape) -> np.ndarray:
    # Keyed by absolute row index so batching never changes the draw.
    out = np.empty((len(rows),) + shape)
    for i, r in enumerate(rows):
        rng = np.random.default_rng([geometry.noise_seed, plane_id, r])
        out[i] = rng.normal(0.0, geometry.noise_std, size=shape)
    return out


def channel_map(planes: Sequence[PlaneSpec], n: int, block: int) -> np.ndarray:
    k = n // block
    r, c = np.divmod(np.arange(k * k), k)
    return np.concatenate([np.stack([np.full(k * k, p.plane_id), r, c], axis=1) for p in planes])


def map_dataset(
    masks,
    w: EmbeddingMatrix,
    planes: Sequence[PlaneSpec],
    block: int = 1,
    geometry: Geometry | None = None,
    calibration: Sequence[float] | None = None,
    batch_size: int = 64,
    progress: Callable[[int, int], None] | None = None,
) -> FeatureMatrix:
    """Optical features ``H_3D`` for a stack of phase masks.

    Row ``i`` concatenates, plane by plane, the binned detected intensity of
    mask ``i``. ``calibration`` holds per-plane detector scales and is
    required when any plane quantizes.
    """
    g = geometry or Geometry()
    if not planes:
        raise OpticsError("at least one detection plane is required")
    if len({p.plane_id for p in planes}) != len(planes):
        raise OpticsError("plane ids must be unique")
    masks = np.asarray([getattr(m, "phases", m) for m in masks]) if isinstance(masks, list) else np.asarray(masks)
    if masks.ndim == 2:
        masks = masks[None]
    n_rows = len(masks)
    n = g.grid or masks.shape[-1]
    if calibration is None and any(p.detector_bits for p in planes):
        raise OpticsError("quantized planes need calibration scales; see optics.calibrate")
    cmap = channel_map(planes, n, block)
    per_plane = (n // block) ** 2
    out = np.empty((n_rows, per_plane * len(planes)), dtype=np.float32)
    for start in range(0, n_rows, batch_size):
        stop = min(start + batch_size, n_rows)
        fld = synthesize_field(masks[start:stop], w, g.slm_bits, g)
        for j, p in enumerate(planes):
            e = propagate(fld, p, g)
            noise = _noise(g, p.plane_id, range(start, stop), (n, n)) if g.noise_std > 0 else None
            scale = calibration[j] if calibration is not None else None
            inten = detect(e, p, scale, noise)
            out[start:stop, j * per_plane:(j + 1) * per_plane] = bin_channels(inten, block)
        if progress is not None:
            progress(stop, n_rows)
    return FeatureMatrix(out, cmap, list(planes), block, w.seed, g)


_FEAT = struct.Struct("<8sIIQQQQ")
_FEAT_MAGIC = b"PELMFEAT"


def write_features(path, fm: FeatureMatrix) -> None:
    path = Path(path)
    vals = np.ascontiguousarray(fm.values, dtype="<f4")
    n, m = vals.shape
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "wb") as fh:
        fh.write(_FEAT.pack(_FEAT_MAGIC, 1, fm.bits, n, m, fm.embedding_seed, fm.geometry.plane_seed))
        fh.write(vals.tobytes())
    sidecar = {
        "rows": n,
        "cols": m,
        "block": fm.block,
        "embedding_seed": fm.embedding_seed,
        "geometry": asdict(fm.geometry),
        "planes": [asdict(p) for p in fm.planes],
        "channel_map": fm.channel_map.tolist(),
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar))
    tmp.replace(path)


def read_features(path) -> FeatureMatrix:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _FEAT.size:
        raise FeatureFileError(f"{path}: truncated header")
    magic, version, bits, n, m, eseed, pseed = _FEAT.unpack_from(raw)
    if magic != _FEAT_MAGIC or version != 1:
        raise FeatureFileError(f"{path}: not a version-1 feature file")
    if len(raw) != _FEAT.size + 4 * n * m:
        raise FeatureFileError(f"{path}: payload size does not match {n} x {m}")
    try:
        meta = json.loads(Path(str(path) + ".json").read_text())
    except FileNotFoundError:
        raise FeatureFileError(f"{path}: missing JSON sidecar") from None
    cmap = np.asarray(meta["channel_map"], dtype=np.int64).reshape(-1, 3)
    if len(cmap) != m or meta["rows"] != n:
        raise FeatureFileError(f"{path}: sidecar does not match header")
    planes = [PlaneSpec(**p) for p in meta["planes"]]
    geometry = Geometry(**meta["geometry"])
    if max(p.detector_bits for p in planes) != bits or geometry.plane_seed != pseed or meta["embedding_seed"] != eseed:
        raise FeatureFileError(f"{path}: sidecar does not match header")
    values = np.frombuffer(raw, dtype="<f4", offset=_FEAT.size).reshape(n, m).astype(np.float32)
    return FeatureMatrix(values, cmap, planes, meta["block"], eseed, geometry)
