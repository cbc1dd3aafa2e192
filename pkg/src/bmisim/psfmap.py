"""Spatially varying PSF map: field interpolation, azimuthal rotation, resizing.

A :class:`PsfTensor` holds fine-pitch PSFs for each (channel, field angle,
depth).  :func:`psf_at` turns it into the PSF seen by one sensor pixel, and
:func:`build_psf_map_cache` precomputes those for every render tile.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse

from bmisim import optics
from bmisim.optics import PsfGrid

CHANNELS = ("R", "G", "B")
DEFAULT_THETAS = tuple(round(0.5 * i, 1) for i in range(13))
CACHE_MAGIC = b"BMIPSF1\0"
_HEADER = struct.Struct("<6i")


class PsfMapError(ValueError):
    pass


def default_depths(depth_min=0.7, depth_max=10.0, step=0.1) -> np.ndarray:
    count = int(round((depth_max - depth_min) / step)) + 1
    return np.round(depth_min + step * np.arange(count), 10)


@dataclass(frozen=True)
class SensorGeometry:
    width: int = 640
    height: int = 480
    pixel_pitch: float = 2.0  # um
    max_field: float = 6.0  # deg

    def __post_init__(self):
        if not self.pixel_pitch > 0 or not self.max_field > 0:
            raise PsfMapError("pixel pitch and max field must be positive")

    @property
    def center(self) -> tuple[float, float]:
        return self.height / 2.0, self.width / 2.0

    @property
    def r_max(self) -> float:
        return math.hypot(self.height / 2.0, self.width / 2.0)

    def field_of(self, pixel) -> tuple[float, float]:
        """Field angle and azimuth (deg) of a pixel under the linear f-theta map."""
        h, w = pixel
        if not (0 <= h < self.height and 0 <= w < self.width):
            raise PsfMapError(f"pixel {pixel} outside the {self.height}x{self.width} sensor")
        dh = h - self.center[0]
        dw = w - self.center[1]
        theta = self.max_field * math.hypot(dh, dw) / self.r_max
        if theta > self.max_field + 1e-12:
            raise PsfMapError(f"pixel {pixel} maps beyond the {self.max_field} deg field")
        return theta, math.degrees(math.atan2(dh, dw))


@dataclass(frozen=True)
class PsfTensor:
    """PSF samples of shape ``(channels, thetas, depths, n, n)``, unit sum each."""

    samples: np.ndarray
    theta_samples: tuple[float, ...]
    depth_samples: tuple[float, ...]
    wavelengths: tuple[float, ...] = optics.DESIGN_WAVELENGTHS
    pitch: float = optics.PSF_PITCH_UM
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        s = self.samples
        shape = (len(self.wavelengths), len(self.theta_samples), len(self.depth_samples))
        if s.ndim != 5 or s.shape[:3] != shape:
            raise PsfMapError(f"tensor shape {s.shape} does not match grid {shape}")
        if list(self.theta_samples) != sorted(self.theta_samples):
            raise PsfMapError("theta samples must be sorted")
        if list(self.depth_samples) != sorted(self.depth_samples):
            raise PsfMapError("depth samples must be sorted")
        sums = s.sum(axis=(-2, -1))
        if not np.all(np.isfinite(sums)) or np.any(np.abs(sums - 1.0) > 1e-6):
            raise PsfMapError("tensor is incomplete or a grid is not normalized")

    def grid(self, channel: int, theta_index: int, depth_index: int) -> PsfGrid:
        return PsfGrid(
            samples=self.samples[channel, theta_index, depth_index],
            pitch=self.pitch,
            center=(0.0, 0.0),
            wavelength=self.wavelengths[channel],
            depth=self.depth_samples[depth_index],
            field_angle=self.theta_samples[theta_index],
        )

    def depth_index(self, depth: float) -> int:
        d = np.asarray(self.depth_samples)
        if depth < d[0] - 1e-9 or depth > d[-1] + 1e-9:
            raise PsfMapError(f"depth {depth} m outside [{d[0]}, {d[-1]}]")
        return int(np.argmin(np.abs(d - depth)))

    def save(self, path) -> None:
        np.savez(
            path,
            samples=self.samples,
            theta_samples=np.asarray(self.theta_samples),
            depth_samples=np.asarray(self.depth_samples),
            wavelengths=np.asarray(self.wavelengths),
            pitch=np.asarray(self.pitch),
        )

    @classmethod
    def load(cls, path) -> "PsfTensor":
        with np.load(path) as z:
            return cls(
                samples=z["samples"],
                theta_samples=tuple(float(t) for t in z["theta_samples"]),
                depth_samples=tuple(float(d) for d in z["depth_samples"]),
                wavelengths=tuple(float(w) for w in z["wavelengths"]),
                pitch=float(z["pitch"]),
            )


def build_psf_tensor(
    prescription: optics.LensPrescription,
    theta_samples: Sequence[float] = DEFAULT_THETAS,
    depth_samples: Sequence[float] | None = None,
    wavelengths: Sequence[float] = optics.DESIGN_WAVELENGTHS,
    pupil_samples: int = optics.DEFAULT_PUPIL_SAMPLES,
    workers: int = 1,
    progress=None,
) -> PsfTensor:
    depths = default_depths() if depth_samples is None else np.asarray(depth_samples)
    samples = optics.compute_psf_stack(
        prescription, wavelengths, theta_samples, depths, pupil_samples,
        workers=workers, progress=progress,
    )
    return PsfTensor(
        samples=samples,
        theta_samples=tuple(float(t) for t in theta_samples),
        depth_samples=tuple(float(d) for d in depths),
        wavelengths=tuple(float(w) for w in wavelengths),
        meta={"prescription": prescription.name, "pupil_samples": pupil_samples},
    )


# ---------------------------------------------------------------------------
# the three operators


def interp_weights(theta_query: float, theta_samples: Sequence[float]) -> np.ndarray:
    """Inverse-square weights over the two samples bracketing ``theta_query``."""
    t = np.asarray(theta_samples, dtype=np.float64)
    w = np.zeros(len(t))
    if theta_query < t[0] - 1e-12 or theta_query > t[-1] + 1e-12:
        raise PsfMapError(f"field {theta_query} deg outside sampled range [{t[0]}, {t[-1]}]")
    exact = np.nonzero(np.abs(t - theta_query) <= 1e-12)[0]
    if exact.size:
        w[exact[0]] = 1.0
        return w
    hi = int(np.searchsorted(t, theta_query))
    lo = hi - 1
    a = 1.0 / (theta_query - t[lo]) ** 2
    b = 1.0 / (theta_query - t[hi]) ** 2
    w[lo] = a / (a + b)
    w[hi] = b / (a + b)
    return w


def _normalize_slices(a: np.ndarray) -> np.ndarray:
    flat = a.reshape(-1, a.shape[-2], a.shape[-1])
    for i in range(flat.shape[0]):
        s = np.sum(flat[i])
        if s > 0:
            flat[i] /= s
    return a


@lru_cache(maxsize=64)
def _rotation_matrix(nr: int, nc: int, phi: float) -> sparse.csr_matrix:
    """Bilinear splatting operator: each source sample spreads to 4 rotated neighbours."""
    cy, cx = (nr - 1) / 2.0, (nc - 1) / 2.0
    rad = math.radians(phi)
    cs, sn = math.cos(rad), math.sin(rad)
    yy, xx = np.mgrid[0:nr, 0:nc]
    x = xx.ravel() - cx
    y = yy.ravel() - cy
    tc = cs * x - sn * y + cx
    tr = sn * x + cs * y + cy
    c0 = np.floor(tc).astype(np.int64)
    r0 = np.floor(tr).astype(np.int64)
    fc = tc - c0
    fr = tr - r0
    src = np.arange(nr * nc)
    rows, cols, vals = [], [], []
    for dr, dc, w in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                      (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        r, c = r0 + dr, c0 + dc
        ok = (r >= 0) & (r < nr) & (c >= 0) & (c < nc) & (w != 0)
        rows.append(r[ok] * nc + c[ok])
        cols.append(src[ok])
        vals.append(w[ok])
    m = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(nr * nc, nr * nc))
    m.sum_duplicates()
    m.sort_indices()
    return m


def rotate_array(samples: np.ndarray, phi: float, normalize: bool = True) -> np.ndarray:
    """Rotate by ``phi`` degrees about the grid centre (last two axes).

    Bilinear splatting: every source sample deposits its value on the four
    output samples around its rotated position, so energy away from the
    border is conserved.  A feature on the +column axis moves toward +row
    for positive ``phi``.
    """
    a = np.asarray(samples, dtype=np.float64)
    if phi == 0.0:
        out = a.copy()
        return _normalize_slices(out) if normalize else out
    nr, nc = a.shape[-2:]
    flat = a.reshape(-1, nr * nc)
    out = np.asarray((_rotation_matrix(nr, nc, float(phi)) @ flat.T).T).reshape(a.shape)
    return _normalize_slices(out) if normalize else out


def rotate_psf(grid: PsfGrid, phi: float, normalize: bool = True) -> PsfGrid:
    return replace(grid, samples=rotate_array(grid.samples, phi, normalize=normalize))


def pitch_ratio(pitch: float, target_pitch: float) -> int:
    ratio = target_pitch / pitch
    k = int(round(ratio))
    if k < 1 or abs(ratio - k) > 1e-9:
        raise PsfMapError(f"pitch ratio {ratio:g} is not a positive integer")
    return k


def resize_array(samples: np.ndarray, k: int, normalize: bool = True) -> np.ndarray:
    """Zero-pad to a multiple of ``k`` (split evenly) and box-sum ``k x k`` blocks."""
    a = np.asarray(samples, dtype=np.float64)
    if k == 1:
        out = a.copy()
        return _normalize_slices(out) if normalize else out
    pads = []
    for n in a.shape[-2:]:
        total = (-n) % k
        pads.append((total // 2, total - total // 2))
    a = np.pad(a, [(0, 0)] * (a.ndim - 2) + pads)
    out = np.zeros(a.shape[:-2] + (a.shape[-2] // k, a.shape[-1] // k))
    for i in range(k):
        for j in range(k):
            out = out + a[..., i::k, j::k]
    return _normalize_slices(out) if normalize else out


def resize_psf(grid: PsfGrid, target_pitch: float, normalize: bool = True) -> PsfGrid:
    if target_pitch < grid.pitch - 1e-12:
        raise PsfMapError("target pitch must not be finer than the grid pitch")
    k = pitch_ratio(grid.pitch, target_pitch)
    return replace(grid, samples=resize_array(grid.samples, k, normalize=normalize),
                   pitch=grid.pitch * k)


def _channel_index(tensor: PsfTensor, channel) -> int:
    if isinstance(channel, str):
        return CHANNELS.index(channel.upper())
    if not 0 <= int(channel) < len(tensor.wavelengths):
        raise PsfMapError(f"channel {channel} out of range")
    return int(channel)


def _combine(tensor: PsfTensor, c: int, weights: np.ndarray, depth_idx) -> np.ndarray:
    acc = None
    for i in np.nonzero(weights)[0]:
        term = weights[i] * tensor.samples[c, i, depth_idx]
        acc = term if acc is None else acc + term
    return acc


def psf_stack_at(tensor: PsfTensor, geometry: SensorGeometry, channel, pixel,
                 depth_indices) -> np.ndarray:
    """Sensor-pitch PSFs at one pixel for several depth indices, ``(len, m, m)``."""
    c = _channel_index(tensor, channel)
    theta, phi = geometry.field_of(pixel)
    w = interp_weights(theta, tensor.theta_samples)
    acc = _combine(tensor, c, w, np.asarray(depth_indices))
    rot = rotate_array(acc, phi)
    return resize_array(rot, pitch_ratio(tensor.pitch, geometry.pixel_pitch))


def psf_at(tensor: PsfTensor, geometry: SensorGeometry, channel, pixel, depth: float) -> PsfGrid:
    """PSF seen by ``pixel`` for an object at ``depth`` (nearest depth sample)."""
    c = _channel_index(tensor, channel)
    j = tensor.depth_index(depth)
    samples = psf_stack_at(tensor, geometry, c, pixel, [j])[0]
    theta, _ = geometry.field_of(pixel)
    return PsfGrid(
        samples=samples,
        pitch=geometry.pixel_pitch,
        center=(float(pixel[0]), float(pixel[1])),
        wavelength=tensor.wavelengths[c],
        depth=tensor.depth_samples[j],
        field_angle=theta,
    )


# ---------------------------------------------------------------------------
# tiles and the binary cache


def tile_spans(length: int, tile: int) -> list[tuple[int, int]]:
    return [(a, min(a + tile, length)) for a in range(0, length, tile)]


def tile_center(span_r, span_c) -> tuple[int, int]:
    return span_r[0] + (span_r[1] - span_r[0]) // 2, span_c[0] + (span_c[1] - span_c[0]) // 2


def build_psf_map_cache(tensor: PsfTensor, geometry: SensorGeometry, path, tile_size: int = 40,
                        progress=None) -> Path:
    """Write resized PSFs for every (channel, depth, tile) to ``path``.

    Records are float32 in (channel, depth, tile-row, tile-col) order after an
    8-byte magic and six little-endian int32 header fields.
    """
    rows = tile_spans(geometry.height, tile_size)
    cols = tile_spans(geometry.width, tile_size)
    k = pitch_ratio(tensor.pitch, geometry.pixel_pitch)
    n = tensor.samples.shape[-1]
    side = (n + (-n) % k) // k
    n_c, n_d = len(tensor.wavelengths), len(tensor.depth_samples)
    out = np.empty((n_c, n_d, len(rows), len(cols), side, side), dtype="<f4")
    depth_idx = np.arange(n_d)
    total = n_c * len(rows) * len(cols)
    done = 0
    for c in range(n_c):
        for i, sr in enumerate(rows):
            for j, sc in enumerate(cols):
                out[c, :, i, j] = psf_stack_at(tensor, geometry, c, tile_center(sr, sc), depth_idx)
                done += 1
                if progress:
                    progress(done, total)
    return write_psf_cache(path, out, geometry.pixel_pitch)


def write_psf_cache(path, records: np.ndarray, pitch_um: float) -> Path:
    """Write a ``(C, D, rows, cols, side, side)`` record array in the cache format."""
    records = np.ascontiguousarray(records, dtype="<f4")
    if records.ndim != 6 or records.shape[-1] != records.shape[-2]:
        raise PsfMapError(f"bad record array shape {records.shape}")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(_HEADER.pack(*records.shape[:5], int(round(pitch_um * 1000))))
        f.write(records.tobytes(order="C"))
    tmp.replace(path)
    return path


@dataclass
class PsfCache:
    """Read-only view of a PSF cache file."""

    records: np.ndarray  # (C, D, rows, cols, side, side) float32
    pitch_nm: int

    @classmethod
    def open(cls, path) -> "PsfCache":
        with open(path, "rb") as f:
            magic = f.read(8)
            if magic != CACHE_MAGIC:
                raise PsfMapError(f"{path}: not a PSF cache file")
            n_c, n_d, n_r, n_col, side, pitch_nm = _HEADER.unpack(f.read(_HEADER.size))
        offset = len(CACHE_MAGIC) + _HEADER.size
        expected = offset + 4 * n_c * n_d * n_r * n_col * side * side
        if Path(path).stat().st_size != expected:
            raise PsfMapError(f"{path}: truncated or oversized cache file")
        rec = np.memmap(path, dtype="<f4", mode="r", offset=offset,
                        shape=(n_c, n_d, n_r, n_col, side, side))
        return cls(rec, pitch_nm)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.records.shape

    def kernel(self, channel: int, depth_index: int, tile_row: int, tile_col: int) -> np.ndarray:
        k = np.asarray(self.records[channel, depth_index, tile_row, tile_col], dtype=np.float64)
        return k / k.sum()
