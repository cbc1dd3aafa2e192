"""Pipeline configuration: one JSON document, plus the provenance hashes."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from bmisim import optics
from bmisim.formation import RenderConfig
from bmisim.psfmap import DEFAULT_THETAS, SensorGeometry

ENV_VAR = "BMISIM_CONFIG"
PSF_SOURCES = ("traced", "delta")


class ConfigFileError(ValueError):
    pass


@dataclass
class MetricParams:
    canny_low: float = 0.1
    canny_high: float = 0.2
    gaussian_sigma: float = 1.4
    dilation_size: int = 5
    dilation_iterations: int = 2
    silog_lambda: float = 1.0


@dataclass
class PipelineConfig:
    prescription: str = "builtin:monocentric"
    catalog: str | None = None
    sensor: SensorGeometry = field(default_factory=SensorGeometry)
    render: RenderConfig = field(default_factory=RenderConfig)
    theta_samples: tuple = DEFAULT_THETAS
    pupil_samples: int = optics.DEFAULT_PUPIL_SAMPLES
    psf_source: str = "traced"
    linear_rgb: bool = True
    metrics: MetricParams = field(default_factory=MetricParams)
    output_dir: str = "bmisim_out"
    cache_dir: str | None = None
    workers: int = 1
    seed: int = 0
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def __post_init__(self):
        if self.psf_source not in PSF_SOURCES:
            raise ConfigFileError(f"psf_source must be one of {PSF_SOURCES}")
        if list(self.theta_samples) != sorted(self.theta_samples):
            raise ConfigFileError("theta_samples must be sorted")
        if self.theta_samples[0] != 0 or self.theta_samples[-1] < self.sensor.max_field:
            raise ConfigFileError("theta_samples must span 0 .. max_field")
        if self.workers < 1:
            raise ConfigFileError("workers must be >= 1")
        for p in (self.catalog, self._prescription_file()):
            if p is not None and not Path(p).is_file():
                raise ConfigFileError(f"referenced file not found: {p}")

    def _resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def _prescription_file(self) -> Path | None:
        if self.prescription.startswith("builtin:"):
            return None
        return self._resolve(self.prescription)

    def load_prescription(self) -> optics.LensPrescription:
        catalog = optics.load_catalog(self._resolve(self.catalog)) if self.catalog else None
        if self.prescription.startswith("builtin:"):
            path = optics.builtin_prescription_path(self.prescription.split(":", 1)[1])
        else:
            path = self._prescription_file()
        return optics.load_prescription(path, catalog)

    @property
    def out_dir(self) -> Path:
        return self._resolve(self.output_dir)

    @property
    def cache_path(self) -> Path:
        root = self._resolve(self.cache_dir) if self.cache_dir else self.out_dir / "cache"
        return root / f"psfmap_{self.psf_hash()[:16]}.bin"

    @property
    def tensor_path(self) -> Path:
        root = self._resolve(self.cache_dir) if self.cache_dir else self.out_dir / "cache"
        return root / f"psftensor_{self.tensor_hash()[:16]}.npz"

    # -- hashing -------------------------------------------------------------
    def _optics_doc(self) -> dict:
        doc = {"psf_source": self.psf_source}
        if self.psf_source == "traced":
            p = self.load_prescription()
            doc["prescription"] = {
                "name": p.name,
                "surfaces": [asdict(s) for s in p.surfaces],
                "sensor": [p.sensor_radius, p.sensor_semi_diameter],
                "entrance": p.entrance_semi_diameter,
                "materials": {k: dict(v.index_by_wavelength) for k, v in sorted(p.materials.items())},
            }
            doc["pupil_samples"] = self.pupil_samples
        return doc

    def tensor_hash(self) -> str:
        r = self.render
        doc = dict(self._optics_doc(), theta_samples=list(self.theta_samples),
                   depths=[r.depth_min, r.depth_max, r.depth_step])
        return _digest(doc)

    def psf_hash(self) -> str:
        return _digest({"tensor": self.tensor_hash(), "sensor": asdict(self.sensor),
                        "tile_size": self.render.tile_size})

    def config_hash(self) -> str:
        """Hash of every field that changes output pixels (the seed is tracked separately)."""
        r = asdict(self.render)
        r.pop("seed")
        return _digest({"psf": self.psf_hash(), "render": r, "linear_rgb": self.linear_rgb})

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        d["render"].pop("seed")
        d["theta_samples"] = list(self.theta_samples)
        return d


def _digest(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()


def config_from_dict(doc: dict, base_dir: Path | str = ".") -> PipelineConfig:
    doc = dict(doc)
    known = set(PipelineConfig.__dataclass_fields__) - {"base_dir"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigFileError(f"unknown config keys: {sorted(unknown)}")
    seed = int(doc.get("seed", 0))
    try:
        if "sensor" in doc:
            doc["sensor"] = SensorGeometry(**doc["sensor"])
        doc["render"] = RenderConfig(**dict(doc.get("render", {}), seed=seed))
        if "metrics" in doc:
            doc["metrics"] = MetricParams(**doc["metrics"])
        if "theta_samples" in doc:
            doc["theta_samples"] = tuple(float(t) for t in doc["theta_samples"])
    except TypeError as exc:
        raise ConfigFileError(str(exc)) from None
    return PipelineConfig(base_dir=Path(base_dir), **doc)


def load_config(path: str | Path | None = None, seed: int | None = None,
                output_dir: str | None = None) -> PipelineConfig:
    """Load the config from ``path``, the ``BMISIM_CONFIG`` variable, or defaults."""
    path = path or os.environ.get(ENV_VAR)
    if path:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigFileError(f"config file not found: {path}") from None
        base = path.parent
    else:
        doc, base = {}, Path(".")
    if seed is not None:
        doc["seed"] = seed
    if output_dir is not None:
        doc["output_dir"] = str(Path(output_dir).resolve())
    return config_from_dict(doc, base)
