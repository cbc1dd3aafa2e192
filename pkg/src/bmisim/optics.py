"""Sequential geometric ray tracing and geometric PSF synthesis.

Coordinate conventions
----------------------
The optical axis is +z and the first surface vertex sits at z = 0.  Lengths
are in mm unless a name says otherwise; object depths are in metres measured
from the first vertex.  Off-axis object points are placed on the -x side so
their images land on +x of the sensor, which makes the PSF grid's +column
direction the outward radial direction.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from bmisim import kernels

DESIGN_WAVELENGTHS = (656.3, 587.6, 486.1)  # R, G, B in nm
PSF_SIZE = 128
PSF_PITCH_UM = 0.4
DEFAULT_PUPIL_SAMPLES = 512 * 512

_WAVELENGTH_TOL = 0.05  # nm


class PrescriptionError(ValueError):
    """Raised for malformed prescription or material catalog files."""


class TotalInternalReflection(ArithmeticError):
    """Raised by :func:`refract` when no transmitted ray exists."""


class EmptyPsfError(RuntimeError):
    """Raised when no traced ray reaches the sensor."""


# ---------------------------------------------------------------------------
# materials


@dataclass(frozen=True)
class GlassMaterial:
    name: str
    index_by_wavelength: Mapping[float, float]

    def __post_init__(self):
        for wl, n in self.index_by_wavelength.items():
            if not 1.0 < n < 3.0:
                raise PrescriptionError(f"{self.name}: index {n} at {wl} nm outside (1, 3)")

    def index(self, wavelength: float) -> float:
        for wl, n in self.index_by_wavelength.items():
            if abs(wl - wavelength) <= _WAVELENGTH_TOL:
                return n
        raise PrescriptionError(f"{self.name}: no index tabulated at {wavelength} nm")


AIR = "air"


def _data_path(name: str) -> Path:
    return Path(str(resources.files("bmisim") / "data" / name))


def load_catalog(path: str | Path | None = None) -> dict[str, GlassMaterial]:
    """Read a ``{name: {"486.1": n, ...}}`` JSON catalog (packaged one by default)."""
    path = Path(path) if path is not None else _data_path("glass_catalog.json")
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise PrescriptionError(f"material catalog not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise PrescriptionError(f"cannot parse material catalog {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise PrescriptionError(f"{path}: catalog must be a JSON object")
    catalog = {}
    for name, table in raw.items():
        try:
            idx = {float(k): float(v) for k, v in table.items()}
        except (AttributeError, TypeError, ValueError):
            raise PrescriptionError(f"{path}: bad index table for {name}") from None
        catalog[name] = GlassMaterial(name, idx)
    return catalog


# ---------------------------------------------------------------------------
# prescription


@dataclass(frozen=True)
class Surface:
    kind: str  # "sphere" | "stop" | "even_asphere"
    radius: float  # mm, math.inf for planar
    thickness: float
    material: str
    semi_diameter: float
    asphere_coeffs: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    @property
    def curvature(self) -> float:
        return 0.0 if math.isinf(self.radius) else 1.0 / self.radius


@dataclass(frozen=True)
class LensPrescription:
    name: str
    surfaces: tuple[Surface, ...]
    sensor_radius: float
    sensor_semi_diameter: float
    entrance_semi_diameter: float
    materials: Mapping[str, GlassMaterial] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        validate_prescription(self)

    @property
    def vertex_z(self) -> np.ndarray:
        """Axial vertex positions of every surface followed by the sensor."""
        return np.concatenate([[0.0], np.cumsum([s.thickness for s in self.surfaces])])

    @property
    def stop_index(self) -> int:
        return next(i for i, s in enumerate(self.surfaces) if s.kind == "stop")

    def index_after(self, i: int, wavelength: float) -> float:
        """Refractive index of the medium following surface ``i`` (``-1`` is object space)."""
        if i < 0:
            return 1.0
        mat = self.surfaces[i].material
        if mat == AIR:
            return 1.0
        return self.materials[mat].index(wavelength)

    def surface_table(self, wavelength: float, upto: int | None = None, clip: bool = True,
                      clip_sensor: bool | None = None) -> dict:
        """Flatten the system into arrays for the trace kernels.

        ``upto`` truncates the table after that surface index and makes it the
        terminal surface; by default the sensor is appended as the terminus.
        ``clip_sensor`` (default: same as ``clip``) controls clipping at the
        sensor semi-diameter.
        """
        if clip_sensor is None:
            clip_sensor = clip
        zs = self.vertex_z
        rows = []
        last = len(self.surfaces) if upto is None else upto + 1
        for i, s in enumerate(self.surfaces[:last]):
            kind = kernels.KIND_STOP if s.kind == "stop" else kernels.KIND_REFRACT
            if upto is not None and i == upto:
                kind = kernels.KIND_SENSOR
            rows.append(
                (kind, zs[i], s.curvature, s.semi_diameter if clip else math.inf,
                 s.asphere_coeffs, self.index_after(i - 1, wavelength),
                 self.index_after(i, wavelength))
            )
        if upto is None:
            c = 0.0 if math.isinf(self.sensor_radius) else 1.0 / self.sensor_radius
            n = self.index_after(len(self.surfaces) - 1, wavelength)
            rows.append((kernels.KIND_SENSOR, zs[-1], c,
                         self.sensor_semi_diameter if clip_sensor else math.inf,
                         (0.0, 0.0, 0.0, 0.0), n, n))
        kind, z, c, sd, asph, n1, n2 = zip(*rows)
        return {
            "kind": np.asarray(kind, dtype=np.int32),
            "z": np.asarray(z, dtype=np.float64),
            "c": np.asarray(c, dtype=np.float64),
            "sd": np.asarray(sd, dtype=np.float64),
            "asph": np.ascontiguousarray(np.asarray(asph, dtype=np.float64).reshape(-1, 4)),
            "n1": np.asarray(n1, dtype=np.float64),
            "n2": np.asarray(n2, dtype=np.float64),
        }


def validate_prescription(p: LensPrescription) -> None:
    if not p.surfaces:
        raise PrescriptionError(f"{p.name}: prescription has no surfaces")
    kinds = {"sphere", "stop", "even_asphere"}
    for i, s in enumerate(p.surfaces, 1):
        if s.kind not in kinds:
            raise PrescriptionError(f"{p.name}: surface {i} has unknown kind {s.kind!r}")
        if s.thickness < 0:
            raise PrescriptionError(f"{p.name}: surface {i} has negative thickness")
        if not s.semi_diameter > 0:
            raise PrescriptionError(f"{p.name}: surface {i} needs a positive semi-diameter")
        if s.material != AIR and s.material not in p.materials:
            raise PrescriptionError(f"{p.name}: surface {i} uses unknown material {s.material!r}")
        if s.material != AIR:
            for wl in DESIGN_WAVELENGTHS:
                p.materials[s.material].index(wl)
    if not any(s.kind == "stop" for s in p.surfaces):
        raise PrescriptionError(f"{p.name}: no stop surface")
    for i, s in enumerate(p.surfaces):
        if s.kind == "stop":
            before = AIR if i == 0 else p.surfaces[i - 1].material
            if before != s.material:
                raise PrescriptionError(
                    f"{p.name}: stop surface {i + 1} separates {before!r} and {s.material!r}"
                )
    if np.any(np.diff(p.vertex_z) <= 0):
        raise PrescriptionError(f"{p.name}: axial positions are not strictly increasing")
    if not p.sensor_semi_diameter > 0 or not p.entrance_semi_diameter > 0:
        raise PrescriptionError(f"{p.name}: sensor and entrance semi-diameters must be positive")


def _radius(value) -> float:
    return math.inf if value is None else float(value)


def prescription_from_dict(doc: dict, catalog: Mapping[str, GlassMaterial]) -> LensPrescription:
    try:
        surfaces = []
        for s in doc["surfaces"]:
            coeffs = tuple(float(a) for a in (s.get("asphere") or (0.0, 0.0, 0.0, 0.0)))
            if len(coeffs) != 4:
                raise PrescriptionError("asphere needs four coefficients (r^4..r^10)")
            surfaces.append(
                Surface(
                    kind=s["kind"],
                    radius=_radius(s.get("radius_mm")),
                    thickness=float(s["thickness_mm"]),
                    material=(s.get("material") or AIR),
                    semi_diameter=float(s["semi_diameter_mm"]),
                    asphere_coeffs=coeffs,
                )
            )
        used = {s.material for s in surfaces} - {AIR}
        return LensPrescription(
            name=str(doc["name"]),
            surfaces=tuple(surfaces),
            sensor_radius=_radius(doc["sensor"].get("radius_mm")),
            sensor_semi_diameter=float(doc["sensor"]["semi_diameter_mm"]),
            entrance_semi_diameter=float(doc["entrance_semi_diameter_mm"]),
            materials={m: catalog[m] for m in used if m in catalog},
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, PrescriptionError):
            raise
        raise PrescriptionError(f"prescription schema error: {exc!r}") from None


def load_prescription(path: str | Path, catalog: Mapping[str, GlassMaterial] | None = None
                      ) -> LensPrescription:
    """Load and validate a JSON prescription file."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise PrescriptionError(f"prescription not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise PrescriptionError(f"cannot parse prescription {path}: {exc}") from None
    if catalog is None:
        catalog = load_catalog()
    return prescription_from_dict(doc, catalog)


def builtin_prescription(name: str = "monocentric") -> LensPrescription:
    """One of the packaged designs: ``"monocentric"`` or ``"double_gauss"``."""
    return load_prescription(_data_path(f"{name}.json"))


def builtin_prescription_path(name: str = "monocentric") -> Path:
    return _data_path(f"{name}.json")


# ---------------------------------------------------------------------------
# rays


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    wavelength: float
    alive: bool = True
    reason: str | None = None

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ValueError("ray direction must be a unit vector")
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))

    @classmethod
    def toward(cls, origin, target, wavelength: float) -> "Ray":
        origin = np.asarray(origin, dtype=np.float64)
        d = np.asarray(target, dtype=np.float64) - origin
        return cls(origin, d / np.linalg.norm(d), wavelength)


def refract(incident, normal, n1: float, n2: float) -> np.ndarray:
    """Vector Snell's law.

    The normal may point to either side of the surface.  Raises
    :class:`TotalInternalReflection` when ``n1 sin(i) > n2``.
    """
    d = np.asarray(incident, dtype=np.float64)
    nrm = np.asarray(normal, dtype=np.float64)
    cos_i = -float(np.dot(nrm, d))
    if cos_i < 0.0:
        nrm = -nrm
        cos_i = -cos_i
    eta = n1 / n2
    k = 1.0 - eta * eta * (1.0 - cos_i * cos_i)
    if k < 0.0:
        raise TotalInternalReflection(f"n1 sin(i) = {n1 * math.sqrt(1 - cos_i**2):.6g} > n2 = {n2}")
    t = eta * d + (eta * cos_i - math.sqrt(k)) * nrm
    return t / np.linalg.norm(t)


def trace_ray(prescription: LensPrescription, ray: Ray, backend: str | None = None) -> Ray:
    """Trace one ray to the sensor.

    Returns a ray whose origin is the sensor intersection; dead rays come back
    with ``alive=False`` and ``reason`` in ``{"miss", "clipped", "tir"}``.
    """
    table = prescription.surface_table(ray.wavelength)
    pos, dirs, status, _ = kernels.trace_bundle(
        ray.origin[None, :], ray.direction[None, :], table, backend=backend
    )
    code = int(status[0])
    return Ray(pos[0], dirs[0], ray.wavelength, alive=code == kernels.ALIVE,
               reason=kernels.REASONS.get(code))


# ---------------------------------------------------------------------------
# paraxial


def paraxial_power(prescription: LensPrescription, wavelength: float) -> float:
    """System power (mm^-1) from a y-nu trace of a unit-height axial-parallel ray."""
    y, nu = 1.0, 0.0
    n = 1.0
    for i, s in enumerate(prescription.surfaces):
        n2 = prescription.index_after(i, wavelength)
        nu = nu - y * s.curvature * (n2 - n)
        y = y + s.thickness * nu / n2
        n = n2
    return -nu


def paraxial_efl(prescription: LensPrescription, wavelength: float) -> float:
    """Effective focal length (mm); ``math.inf`` for an afocal system."""
    power = paraxial_power(prescription, wavelength)
    if abs(power) < 1e-12:
        return math.inf
    return 1.0 / power


def traced_efl(prescription: LensPrescription, wavelength: float, height: float = 1e-3,
               backend: str | None = None) -> float:
    """EFL from a real near-axis ray: input height over final ray slope."""
    table = prescription.surface_table(wavelength, clip=False)
    origin = np.array([[0.0, height, -1.0]])
    pos, dirs, status, _ = kernels.trace_bundle(origin, np.array([[0.0, 0.0, 1.0]]), table,
                                                backend=backend)
    if status[0] != kernels.ALIVE:
        raise EmptyPsfError("near-axis ray did not reach the image space")
    slope = dirs[0, 1] / dirs[0, 2]
    if abs(slope) < 1e-15:
        return math.inf
    n_img = prescription.index_after(len(prescription.surfaces) - 1, wavelength)
    return -height / (n_img * slope)


# ---------------------------------------------------------------------------
# PSF


@dataclass(frozen=True)
class PsfGrid:
    samples: np.ndarray
    pitch: float  # um
    center: tuple[float, float]  # mm, chief-ray landing (x, y)
    wavelength: float
    depth: float
    field_angle: float
    captured_energy_fraction: float = 1.0
    rays_inside: int = 0
    rays_survived: int = 0

    @property
    def size(self) -> int:
        return self.samples.shape[0]

    def coords_um(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-centre offsets (x along columns, y along rows) from the grid centre."""
        n = self.samples.shape[-1]
        ax = (np.arange(n) - (n - 1) / 2.0) * self.pitch
        return ax, (np.arange(self.samples.shape[-2]) - (self.samples.shape[-2] - 1) / 2.0) * self.pitch

    def centroid_um(self) -> tuple[float, float]:
        x, y = self.coords_um()
        w = self.samples / self.samples.sum()
        return float((w.sum(axis=0) * x).sum()), float((w.sum(axis=1) * y).sum())

    def second_moment_radius_um(self) -> float:
        x, y = self.coords_um()
        w = self.samples / self.samples.sum()
        cx, cy = self.centroid_um()
        r2 = (x[None, :] - cx) ** 2 + (y[:, None] - cy) ** 2
        return float(math.sqrt((w * r2).sum()))


def concentric_disc(side: int) -> np.ndarray:
    """Shirley-Chiu concentric mapping of a ``side x side`` grid of cell centres.

    Returns ``(side*side, 2)`` points in the unit disc.
    """
    u = (np.arange(side) + 0.5) / side * 2.0 - 1.0
    a, b = np.meshgrid(u, u, indexing="xy")
    a = a.ravel()
    b = b.ravel()
    use_a = np.abs(a) > np.abs(b)
    safe_a = np.where(a == 0, 1.0, a)
    safe_b = np.where(b == 0, 1.0, b)
    r = np.where(use_a, a, b)
    phi = np.where(use_a, (math.pi / 4) * (b / safe_a), math.pi / 2 - (math.pi / 4) * (a / safe_b))
    return np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)


def object_point(depth_m: float, field_angle_deg: float) -> np.ndarray:
    dist = depth_m * 1000.0
    return np.array([-dist * math.tan(math.radians(field_angle_deg)), 0.0, -dist])


def aim_chief_ray(prescription: LensPrescription, obj: np.ndarray, wavelength: float,
                  backend: str | None = None) -> float:
    """x on the z=0 plane through which a ray from ``obj`` crosses the stop centre."""
    if obj[0] == 0.0:
        return 0.0
    table = prescription.surface_table(wavelength, upto=prescription.stop_index, clip=False)

    def stop_x(a: np.ndarray) -> np.ndarray:
        targets = np.stack([a, np.zeros_like(a), np.zeros_like(a)], axis=1)
        d = targets - obj
        d /= np.linalg.norm(d, axis=1)[:, None]
        pos, _, status, _ = kernels.trace_bundle(np.repeat(obj[None], len(a), 0), d, table,
                                                 backend=backend)
        if np.any(status != kernels.ALIVE):
            raise EmptyPsfError("chief-ray aiming failed: trial ray did not reach the stop")
        return pos[:, 0]

    a = 0.0
    h = 1e-6
    for _ in range(30):
        f0, f1 = stop_x(np.array([a, a + h]))
        slope = (f1 - f0) / h
        step = -f0 / slope
        a += step
        if abs(step) < 1e-13:
            break
    return a


def _local_frame(prescription: LensPrescription, p: np.ndarray):
    """Tangent basis (u radial-x, v y) of the sensor surface at ``p``."""
    zs = prescription.vertex_z[-1]
    c = 0.0 if math.isinf(prescription.sensor_radius) else 1.0 / prescription.sensor_radius
    nrm = np.array([-c * p[0], -c * p[1], 1.0 - c * (p[2] - zs)])
    nrm /= np.linalg.norm(nrm)
    u = np.array([1.0, 0.0, 0.0]) - nrm[0] * nrm
    u /= np.linalg.norm(u)
    v = np.cross(nrm, u)
    return u, v


def compute_psf(
    prescription: LensPrescription,
    depth: float,
    field_angle: float,
    wavelength: float,
    pupil_samples: int = DEFAULT_PUPIL_SAMPLES,
    *,
    size: int = PSF_SIZE,
    pitch_um: float = PSF_PITCH_UM,
    aperture_scale: float = 1.0,
    clip_sensor: bool = False,
    backend: str | None = None,
) -> PsfGrid:
    """Bin a disc-sampled ray bundle from one object point into a PSF grid.

    The grid is centred on the chief-ray landing point.  ``pupil_samples`` is
    the total sample count; the nearest square grid of cells is mapped onto
    the sampling disc of radius ``entrance_semi_diameter * aperture_scale``
    in the first vertex plane.  The sensor semi-diameter is ignored unless
    ``clip_sensor`` is set, since the simulated pixel array may extend past it.
    """
    if pupil_samples < 64 * 64:
        raise ValueError("pupil_samples must be at least 64*64")
    if depth <= 0:
        raise ValueError("depth must be positive")
    side = math.isqrt(pupil_samples)
    obj = object_point(depth, field_angle)
    a = aim_chief_ray(prescription, obj, wavelength, backend=backend)

    radius = prescription.entrance_semi_diameter * aperture_scale
    disc = concentric_disc(side) * radius
    targets = np.column_stack([disc[:, 0] + a, disc[:, 1], np.zeros(len(disc))])
    dirs = targets - obj
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    origins = np.broadcast_to(obj, dirs.shape)

    table = prescription.surface_table(wavelength, clip_sensor=clip_sensor)
    pos, _, status, surf = kernels.trace_bundle(origins, dirs, table, backend=backend)

    chief_d = np.array([a, 0.0, 0.0]) - obj
    chief_d /= np.linalg.norm(chief_d)
    cpos, _, cstat, _ = kernels.trace_bundle(obj[None], chief_d[None], table, backend=backend)
    alive = status == kernels.ALIVE
    if not alive.any():
        raise EmptyPsfError(
            f"no ray reached the sensor (depth {depth} m, field {field_angle} deg)"
        )
    if cstat[0] != kernels.ALIVE:
        raise EmptyPsfError(f"chief ray vignetted at field {field_angle} deg")
    chief = cpos[0]

    survived = int(np.count_nonzero(alive | (surf > prescription.stop_index)))
    u, v = _local_frame(prescription, chief)
    delta = (pos[alive] - chief) * 1000.0  # um
    xu = delta @ u
    yv = delta @ v
    col = np.floor(xu / pitch_um + size / 2.0).astype(np.int64)
    row = np.floor(yv / pitch_um + size / 2.0).astype(np.int64)
    inside = (col >= 0) & (col < size) & (row >= 0) & (row < size)
    counts = np.bincount(row[inside] * size + col[inside], minlength=size * size)
    n_inside = int(counts.sum())
    if n_inside == 0:
        raise EmptyPsfError(
            f"no ray landed inside the PSF grid (depth {depth} m, field {field_angle} deg)"
        )
    samples = counts.reshape(size, size).astype(np.float64) / n_inside
    return PsfGrid(
        samples=samples,
        pitch=pitch_um,
        center=(float(chief[0]), float(chief[1])),
        wavelength=wavelength,
        depth=depth,
        field_angle=field_angle,
        captured_energy_fraction=n_inside / survived,
        rays_inside=n_inside,
        rays_survived=survived,
    )


def _psf_task(args):
    presc, depth, theta, wl, npupil, backend = args
    return compute_psf(presc, depth, theta, wl, npupil, backend=backend)


def compute_psf_stack(
    prescription: LensPrescription,
    wavelengths: Sequence[float],
    thetas: Sequence[float],
    depths: Sequence[float],
    pupil_samples: int = DEFAULT_PUPIL_SAMPLES,
    workers: int = 1,
    backend: str | None = None,
    progress=None,
) -> np.ndarray:
    """PSF samples for every (wavelength, theta, depth), shape ``(C, T, D, n, n)``.

    Results are assembled in index order, so the output is identical for any
    worker count.
    """
    jobs = [(prescription, d, t, wl, pupil_samples, backend)
            for wl in wavelengths for t in thetas for d in depths]
    out = np.empty((len(wavelengths), len(thetas), len(depths), PSF_SIZE, PSF_SIZE))
    flat = out.reshape(-1, PSF_SIZE, PSF_SIZE)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, psf in enumerate(pool.map(_psf_task, jobs, chunksize=4)):
                flat[i] = psf.samples
                if progress:
                    progress(i + 1, len(jobs))
    else:
        for i, job in enumerate(jobs):
            flat[i] = _psf_task(job).samples
            if progress:
                progress(i + 1, len(jobs))
    return out
