"""Layered, occlusion-aware image formation with tiled FFT convolution.

Layers are indexed by depth sample: layer ``k`` sits at
``depth_min + k * depth_step``.  Compositing runs from the farthest layer to
the nearest, and the normalizer ``E_k`` blurs the union of layer ``k`` and
every layer behind it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy import fft as sfft
from scipy.signal import fftconvolve

EPS = 1e-8


class FormationError(ValueError):
    pass


class InputError(FormationError):
    pass


class ConfigError(FormationError):
    pass


@dataclass(frozen=True)
class RenderConfig:
    tile_size: int = 40
    patch_size: int = 16
    noise_sigma: float = 0.005
    seed: int = 0
    depth_min: float = 0.7
    depth_max: float = 10.0
    depth_step: float = 0.1

    def __post_init__(self):
        if self.tile_size < 1 or self.patch_size < 1:
            raise ConfigError("tile and patch sizes must be positive")
        if not self.noise_sigma >= 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not (0 < self.depth_min < self.depth_max and self.depth_step > 0):
            raise ConfigError("depth grid must satisfy 0 < min < max and step > 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")

    @property
    def layer_count(self) -> int:
        return int(round((self.depth_max - self.depth_min) / self.depth_step)) + 1

    @property
    def depths(self) -> np.ndarray:
        return np.round(self.depth_min + self.depth_step * np.arange(self.layer_count), 10)

    def layer_index(self, depth) -> np.ndarray:
        """Quantize depths (m) to layer indices, clamping and rounding halves up."""
        d = np.asarray(depth, dtype=np.float64)
        if not np.all(np.isfinite(d)) or np.any(d <= 0):
            raise InputError("depth values must be finite and positive")
        d = np.clip(d, self.depth_min, self.depth_max)
        # rounding q first keeps exact halves such as 0.75 m from landing at 0.4999...
        q = np.round((d - self.depth_min) / self.depth_step, 9)
        return np.clip(np.floor(q + 0.5), 0, self.layer_count - 1).astype(np.int32)


@dataclass
class DepthLayerStack:
    """Disjoint depth layers stored as an RGB image plus a layer-label map.

    ``labels[y, x] = k`` puts the pixel in layer ``k``; ``-1`` means no layer.
    ``image(k)`` and ``mask(k)`` give the per-layer ``I_k`` and ``alpha_k``.
    """

    rgb: np.ndarray
    labels: np.ndarray
    depths: np.ndarray

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int32)
        self.depths = np.asarray(self.depths, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[:2] != self.labels.shape:
            raise InputError("rgb must be HxWxC and match the label map")
        if self.labels.min() < -1 or self.labels.max() >= len(self.depths):
            raise InputError("label outside the layer range")
        if np.any(np.diff(self.depths) <= 0):
            raise InputError("layer depths must increase with k")
        self.rgb = np.where(self.labels[..., None] >= 0, self.rgb, 0.0)

    @classmethod
    def from_layers(cls, images, masks, depths) -> "DepthLayerStack":
        masks = np.asarray(masks).astype(bool)
        images = np.asarray(images, dtype=np.float64)
        if np.any(masks.sum(axis=0) > 1):
            raise InputError("layer masks overlap")
        if np.any(images[~masks] != 0):
            raise InputError("layer image is nonzero outside its mask")
        labels = np.full(masks.shape[1:], -1, dtype=np.int32)
        for k in range(masks.shape[0]):
            labels[masks[k]] = k
        return cls(images.sum(axis=0), labels, depths)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def layer_count(self) -> int:
        return len(self.depths)

    def mask(self, k: int) -> np.ndarray:
        return self.labels == k

    def image(self, k: int) -> np.ndarray:
        return self.rgb * self.mask(k)[..., None]

    def present_layers(self) -> np.ndarray:
        ks = np.unique(self.labels)
        return ks[ks >= 0]


@dataclass
class CodedImage:
    pixels: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.pixels)):
            raise FormationError("coded image contains non-finite values")


class PsfProvider(Protocol):
    """Returns the unit-sum sensor-pitch kernel for (channel, pixel, layer)."""

    size: int

    def __call__(self, channel: int, pixel: tuple[int, int], layer: int) -> np.ndarray: ...


def layerize(rgb, depth_map, config: RenderConfig = RenderConfig()) -> DepthLayerStack:
    rgb = np.asarray(rgb, dtype=np.float64)
    depth_map = np.asarray(depth_map, dtype=np.float64)
    if rgb.shape[:2] != depth_map.shape:
        raise InputError(f"rgb {rgb.shape[:2]} and depth {depth_map.shape} differ in size")
    return DepthLayerStack(rgb, config.layer_index(depth_map), config.depths)


# ---------------------------------------------------------------------------
# convolution


def kernel_pads(side: int) -> tuple[int, int]:
    """Padding (before, after) so a kernel centred at ``side // 2`` gives a same-size output."""
    c = side // 2
    return side - 1 - c, c


def fft_convolve(tile: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-region linear convolution of a padded tile with a kernel.

    The tile's trailing two axes must already carry ``kernel_pads`` on each
    side; the result is smaller by ``kernel.shape - 1``.  Leading axes are
    batched.
    """
    tile = np.asarray(tile, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    kh, kw = kernel.shape
    th, tw = tile.shape[-2:]
    if kh > th or kw > tw:
        raise ConfigError(f"kernel {kernel.shape} larger than padded tile {tile.shape[-2:]}")
    shape = (sfft.next_fast_len(th, real=True), sfft.next_fast_len(tw, real=True))
    spec = sfft.rfft2(tile, s=shape) * sfft.rfft2(kernel, s=shape)
    out = sfft.irfft2(spec, s=shape)
    return out[..., kh - 1:th, kw - 1:tw]


def _ramp(a: int, b: int, length: int, m: int, lo: int, hi: int) -> np.ndarray:
    """1-D blending weight over [lo, hi) for the tile span [a, b)."""
    x = np.arange(lo, hi) + 0.5
    w = np.ones(hi - lo)
    if m == 0:
        return ((x > a) & (x < b)).astype(np.float64)
    if a > 0:
        w = np.minimum(w, np.clip((x - (a - m)) / (2 * m), 0.0, 1.0))
    if b < length:
        w = np.minimum(w, np.clip(((b + m) - x) / (2 * m), 0.0, 1.0))
    return w


def _tile_spans(length: int, tile: int) -> list[tuple[int, int]]:
    return [(a, min(a + tile, length)) for a in range(0, length, tile)]


def composite_occlusion(stack: DepthLayerStack, psf: PsfProvider,
                        config: RenderConfig = RenderConfig(), provenance=None) -> CodedImage:
    """Occlusion-aware layered rendering, before noise."""
    H, W = stack.shape
    C = stack.rgb.shape[2]
    if len(stack.depths) != config.layer_count or not np.allclose(stack.depths, config.depths):
        raise FormationError("stack depth grid differs from the render config")
    side = int(psf.size)
    pb, pa = kernel_pads(side)
    m = side // 2
    pad = m + side
    labels = np.pad(stack.labels, pad, constant_values=-1)
    rgb = np.pad(stack.rgb, ((pad, pad), (pad, pad), (0, 0)))

    out = np.zeros((H, W, C))
    wsum = np.zeros((H, W))
    for r0, r1 in _tile_spans(H, config.tile_size):
        for c0, c1 in _tile_spans(W, config.tile_size):
            center = (r0 + (r1 - r0) // 2, c0 + (c1 - c0) // 2)
            er0, er1 = max(r0 - m, 0), min(r1 + m, H)
            ec0, ec1 = max(c0 - m, 0), min(c1 + m, W)
            # input window in padded coordinates
            ir0, ir1 = er0 - pb + pad, er1 + pa + pad
            ic0, ic1 = ec0 - pb + pad, ec1 + pa + pad
            lab = labels[ir0:ir1, ic0:ic1]
            img = rgb[ir0:ir1, ic0:ic1]
            acc = _composite_window(lab, img, psf, center, side)
            w = np.outer(_ramp(r0, r1, H, m, er0, er1), _ramp(c0, c1, W, m, ec0, ec1))
            out[er0:er1, ec0:ec1] += w[..., None] * acc
            wsum[er0:er1, ec0:ec1] += w
    out /= wsum[..., None]
    return CodedImage(out, dict(provenance or {}))


def _delta_shift(fields, kern):
    """Exact valid-region convolution for a unit impulse kernel, else None."""
    nz = np.flatnonzero(kern)
    if nz.size != 1 or kern.flat[nz[0]] != 1.0:
        return None
    side = kern.shape[0]
    i, j = divmod(int(nz[0]), side)
    h, w = fields.shape[-2] - side + 1, fields.shape[-1] - side + 1
    oi, oj = side - 1 - i, side - 1 - j
    return fields[..., oi:oi + h, oj:oj + w]


def _composite_window(lab, img, psf, center, side):
    h = lab.shape[0] - side + 1
    w = lab.shape[1] - side + 1
    C = img.shape[2]
    acc = np.zeros((h, w, C))
    present = np.unique(lab)
    present = present[present >= 0][::-1]  # farthest first
    if present.size == 0:
        return acc
    shape = (sfft.next_fast_len(lab.shape[0], real=True), sfft.next_fast_len(lab.shape[1], real=True))
    crop = (slice(side - 1, lab.shape[0]), slice(side - 1, lab.shape[1]))
    kspec = {}
    for k in present:
        alpha = (lab == k).astype(np.float64)
        behind = (lab >= k).astype(np.float64)
        fields = np.concatenate([np.moveaxis(img * alpha[..., None], -1, 0),
                                 alpha[None], behind[None]])
        fspec = None
        for c in range(C):
            kern = np.asarray(psf(c, center, int(k)), dtype=np.float64)
            if kern.shape != (side, side):
                raise ConfigError(f"kernel shape {kern.shape} differs from provider size {side}")
            blur = _delta_shift(fields[[c, C, C + 1]], kern)
            if blur is None:
                if fspec is None:
                    fspec = sfft.rfft2(fields, s=shape)
                key = (c, kern.tobytes())
                if key not in kspec:
                    kspec[key] = sfft.rfft2(kern, s=shape)
                blur = sfft.irfft2(fspec[[c, C, C + 1]] * kspec[key], s=shape)[(slice(None),) + crop]
            E = blur[2]
            starved = E < EPS
            Es = np.where(starved, 1.0, E)
            i_t = np.where(starved, 0.0, blur[0] / Es)
            a_t = np.where(starved, 0.0, blur[1] / Es)
            acc[..., c] = acc[..., c] * (1.0 - a_t) + i_t
    return acc


def render_patchwise(rgb, depth_map, psf: PsfProvider, config: RenderConfig = RenderConfig(),
                     provenance=None) -> CodedImage:
    """Baseline: each patch is convolved with one PSF and the results overlap-added."""
    rgb = np.asarray(rgb, dtype=np.float64)
    depth_map = np.asarray(depth_map, dtype=np.float64)
    layerize(rgb, depth_map, config)  # validates shapes and depths
    H, W, C = rgb.shape
    side = int(psf.size)
    c = side // 2
    out = np.zeros((H + side - 1, W + side - 1, C))
    P = config.patch_size
    for r0, r1 in _tile_spans(H, P):
        for c0, c1 in _tile_spans(W, P):
            k = int(config.layer_index(np.median(depth_map[r0:r1, c0:c1])))
            center = (r0 + (r1 - r0) // 2, c0 + (c1 - c0) // 2)
            for ch in range(C):
                kern = np.asarray(psf(ch, center, k), dtype=np.float64)
                full = fftconvolve(rgb[r0:r1, c0:c1, ch], kern)
                out[r0:r1 + side - 1, c0:c1 + side - 1, ch] += full
    return CodedImage(out[c:c + H, c:c + W], dict(provenance or {}))


# ---------------------------------------------------------------------------
# noise


def gaussian_field(seed: int, shape) -> np.ndarray:
    """Standard normal samples; element ``i`` (C order) uses Philox words ``2i, 2i+1``."""
    n = int(np.prod(shape))
    bits = np.random.Philox(key=int(seed)).random_raw(2 * n).reshape(n, 2)
    u1 = ((bits[:, 0] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (bits[:, 1] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
    return z.reshape(shape)


def add_gaussian_noise(image: CodedImage, sigma: float, seed: int) -> CodedImage:
    if not sigma >= 0:
        raise ConfigError("sigma must be >= 0")
    prov = dict(image.provenance, noise_sigma=float(sigma), seed=int(seed))
    if sigma == 0:
        return CodedImage(image.pixels.copy(), prov)
    return CodedImage(image.pixels + sigma * gaussian_field(seed, image.pixels.shape), prov)


# ---------------------------------------------------------------------------
# PSF providers


class UniformPsf:
    """Same kernel everywhere; optionally one kernel per channel or per (channel, layer)."""

    def __init__(self, kernels):
        k = np.asarray(kernels, dtype=np.float64)
        if k.ndim not in (2, 3, 4):
            raise ConfigError("kernels must be (n,n), (C,n,n) or (C,K,n,n)")
        self.kernels = k
        self.size = k.shape[-1]

    def __call__(self, channel, pixel, layer):
        k = self.kernels
        if k.ndim == 2:
            return k
        if k.ndim == 3:
            return k[channel]
        return k[channel, layer]


def delta_kernel(side: int = 1) -> np.ndarray:
    k = np.zeros((side, side))
    k[side // 2, side // 2] = 1.0
    return k


class TensorPsf:
    """Evaluates the PSF map from a tensor at every requested pixel."""

    def __init__(self, tensor, geometry):
        from bmisim import psfmap

        self.tensor = tensor
        self.geometry = geometry
        self._psfmap = psfmap
        n = tensor.samples.shape[-1]
        k = psfmap.pitch_ratio(tensor.pitch, geometry.pixel_pitch)
        self.size = (n + (-n) % k) // k

    def __call__(self, channel, pixel, layer):
        return self._psfmap.psf_stack_at(self.tensor, self.geometry, channel, pixel, [layer])[0]


class CachePsf:
    """Looks up the tile PSF containing ``pixel`` in a prebuilt cache."""

    def __init__(self, cache, tile_size: int = 40):
        self.cache = cache
        self.tile_size = tile_size
        self.size = cache.shape[-1]

    def __call__(self, channel, pixel, layer):
        return self.cache.kernel(channel, layer, pixel[0] // self.tile_size,
                                 pixel[1] // self.tile_size)


PsfFunction = Callable[[int, tuple, int], np.ndarray]
