"""Orchestration: PSF tensor and cache management, rendering, evaluation, batches."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from bmisim import formation, imageio, optics, psfmap, quality
from bmisim.config import PipelineConfig

log = logging.getLogger("bmisim")

MODES = ("occlusion", "patchwise")
SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = (".png",) + imageio.RAW_SUFFIXES


class PipelineError(RuntimeError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic(path: Path, write) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".part" + path.suffix)
    write(tmp)
    os.replace(tmp, path)


def _write_json(path: Path, doc) -> None:
    _atomic(path, lambda p: p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n"))


# ---------------------------------------------------------------------------
# PSF tensor and cache


def write_delta_cache(cfg: PipelineConfig, path, side: int = 1) -> Path:
    """Debug cache whose every record is a centred unit impulse."""
    rows = len(psfmap.tile_spans(cfg.sensor.height, cfg.render.tile_size))
    cols = len(psfmap.tile_spans(cfg.sensor.width, cfg.render.tile_size))
    rec = np.zeros((3, cfg.render.layer_count, rows, cols, side, side), dtype="<f4")
    rec[..., side // 2, side // 2] = 1.0
    return psfmap.write_psf_cache(path, rec, cfg.sensor.pixel_pitch)


def ensure_tensor(cfg: PipelineConfig, progress=None) -> psfmap.PsfTensor:
    if cfg.psf_source == "delta":
        raise PipelineError("the delta PSF source has no traced tensor")
    path = cfg.tensor_path
    if path.exists():
        return psfmap.PsfTensor.load(path)
    presc = cfg.load_prescription()
    log.info("tracing PSF tensor for %s (%d pupil samples)", presc.name, cfg.pupil_samples)
    tensor = psfmap.build_psf_tensor(presc, cfg.theta_samples, cfg.render.depths,
                                     pupil_samples=cfg.pupil_samples, workers=cfg.workers,
                                     progress=progress)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic(path, tensor.save)
    return tensor


def ensure_cache(cfg: PipelineConfig, progress=None) -> psfmap.PsfCache:
    path = cfg.cache_path
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        if cfg.psf_source == "delta":
            write_delta_cache(cfg, path)
        else:
            tensor = ensure_tensor(cfg, progress)
            psfmap.build_psf_map_cache(tensor, cfg.sensor, path, cfg.render.tile_size,
                                       progress=progress)
    cache = psfmap.PsfCache.open(path)
    expect_d = cfg.render.layer_count
    if cache.shape[1] != expect_d:
        raise PipelineError(f"cache has {cache.shape[1]} depths, config expects {expect_d}")
    return cache


def prescription_name(cfg: PipelineConfig) -> str:
    return "delta" if cfg.psf_source == "delta" else cfg.load_prescription().name


# ---------------------------------------------------------------------------
# scenes and rendering


def fill_invalid_depth(depth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Replace zero/non-finite depths by the nearest valid value; return (filled, valid)."""
    valid = np.isfinite(depth) & (depth > 0)
    if not valid.any():
        raise PipelineError("depth map has no valid pixels")
    if valid.all():
        return depth, valid
    idx = ndimage.distance_transform_edt(~valid, return_distances=False, return_indices=True)
    return depth[tuple(idx)], valid


def load_scene(cfg: PipelineConfig, rgb_path, depth_path):
    rgb = imageio.read_rgb(rgb_path, linear=cfg.linear_rgb)
    depth = imageio.read_depth(depth_path)
    if rgb.shape[:2] != depth.shape:
        raise PipelineError(f"{rgb_path} and {depth_path} differ in size")
    if rgb.shape[0] > cfg.sensor.height or rgb.shape[1] > cfg.sensor.width:
        raise PipelineError(f"{rgb_path}: {rgb.shape[1]}x{rgb.shape[0]} exceeds the "
                            f"{cfg.sensor.width}x{cfg.sensor.height} sensor")
    filled, valid = fill_invalid_depth(depth)
    return rgb, depth, filled, valid


def render(cfg: PipelineConfig, rgb, depth, mode: str, provider, seed: int,
           provenance=None) -> formation.CodedImage:
    if mode not in MODES:
        raise PipelineError(f"mode must be one of {MODES}")
    if mode == "occlusion":
        stack = formation.layerize(rgb, depth, cfg.render)
        img = formation.composite_occlusion(stack, provider, cfg.render, provenance)
    else:
        img = formation.render_patchwise(rgb, depth, provider, cfg.render, provenance)
    return formation.add_gaussian_noise(img, cfg.render.noise_sigma, seed)


def write_coded(stem: Path, img: formation.CodedImage) -> list[Path]:
    png, raw, meta = (stem.with_suffix(s) for s in (".png", ".f32", ".json"))
    _atomic(png, lambda p: imageio.write_png8(p, img.pixels))
    _atomic(raw, lambda p: imageio.write_raw(p, img.pixels))
    _write_json(meta, img.provenance)  # written last: marks the item complete
    return [png, raw, meta]


def render_files(cfg: PipelineConfig, rgb_path, depth_path, modes=MODES, out_dir=None,
                 scene_id=None) -> dict:
    cache = ensure_cache(cfg)
    provider = formation.CachePsf(cache, cfg.render.tile_size)
    rgb, _, depth, _ = load_scene(cfg, rgb_path, depth_path)
    out_dir = Path(out_dir or cfg.out_dir)
    scene_id = scene_id or Path(rgb_path).stem
    outputs = {}
    for mode in modes:
        prov = {"prescription": prescription_name(cfg), "config_hash": cfg.config_hash(),
                "seed": cfg.seed, "mode": mode, "scene_id": scene_id,
                "rgb_sha256": sha256_file(rgb_path), "depth_sha256": sha256_file(depth_path)}
        img = render(cfg, rgb, depth, mode, provider, cfg.seed, prov)
        outputs[mode] = [str(p) for p in write_coded(out_dir / f"{scene_id}_{mode}", img)]
    return outputs


# ---------------------------------------------------------------------------
# PSF tracing


def trace_psfs(cfg: PipelineConfig, depths, thetas, wavelengths, out_dir=None) -> list[dict]:
    presc = cfg.load_prescription()
    out_dir = Path(out_dir or cfg.out_dir) / "psf"
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for wl in wavelengths:
        for theta in thetas:
            if not 0 <= theta <= cfg.sensor.max_field:
                raise PipelineError(f"field {theta} deg outside 0..{cfg.sensor.max_field}")
            for d in depths:
                g = optics.compute_psf(presc, d, theta, wl, cfg.pupil_samples)
                name = f"psf_w{wl:g}_t{theta:g}_d{d:g}"
                imageio.write_png16(out_dir / f"{name}.png", g.samples, peak_scale=True)
                cx, cy = g.centroid_um()
                rec = {"file": f"{name}.png", "depth_m": d, "field_deg": theta,
                       "wavelength_nm": wl, "captured_energy_fraction": g.captured_energy_fraction,
                       "centroid_um": [cx, cy], "second_moment_radius_um": g.second_moment_radius_um(),
                       "chief_landing_mm": list(g.center), "pupil_samples": cfg.pupil_samples}
                _write_json(out_dir / f"{name}.json", rec)
                records.append(rec)
    with open(out_dir / "stats.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return records


# ---------------------------------------------------------------------------
# evaluation


def _read_any(path: Path, kind: str) -> np.ndarray:
    if path.suffix.lower() in imageio.RAW_SUFFIXES:
        return imageio.read_raw(path)
    return imageio.read_depth(path) if kind == "depth" else imageio.read_rgb(path)


def _pairs(pred_dir: Path, gt_dir: Path):
    def index(d):
        return {p.stem: p for p in sorted(Path(d).iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}

    pred, gt = index(pred_dir), index(gt_dir)
    matched = [(k, pred[k], gt[k]) for k in sorted(pred) if k in gt]
    unmatched = sorted(set(pred) ^ set(gt))
    return matched, unmatched


def evaluate_dirs(cfg: PipelineConfig, pred_dir, gt_dir, kind: str) -> dict:
    if kind not in ("depth", "image", "artifact"):
        raise PipelineError("kind must be depth, image or artifact")
    matched, unmatched = _pairs(Path(pred_dir), Path(gt_dir))
    mp = cfg.metrics
    rows, errors = [], [{"name": n, "error": "no matching file"} for n in unmatched]
    for name, p, g in matched:
        try:
            pred, gt = _read_any(p, kind), _read_any(g, kind)
            if kind == "depth":
                valid = np.isfinite(gt) & (gt > 0) & np.isfinite(pred) & (pred > 0)
                row = quality.depth_metrics(pred, gt, valid)
                row["silog"] = quality.silog_loss(pred, gt, mp.silog_lambda, valid)
            elif kind == "image":
                row = {"psnr": quality.psnr(pred, gt), "ssim": quality.ssim(pred, gt)}
            else:
                score, m = quality.artifact_score(
                    pred, gt, canny_low=mp.canny_low, canny_high=mp.canny_high,
                    gaussian_sigma=mp.gaussian_sigma, dilation_size=mp.dilation_size,
                    dilation_iterations=mp.dilation_iterations)
                row = {"artifact_score": score, "smooth_pixels": int(m.mask.sum())}
        except (OSError, ValueError) as exc:
            errors.append({"name": name, "error": str(exc)})
            continue
        rows.append(dict(row, name=name))
    keys = [k for k in (rows[0] if rows else {}) if k not in ("name", "valid_pixel_count", "smooth_pixels")]
    mean = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    return {"kind": kind, "params": vars(mp).copy(), "pairs": rows, "mean": mean, "errors": errors}


def _fmt(v) -> str:
    return "inf" if isinstance(v, float) and math.isinf(v) else f"{v:.3f}"


def report_table(report: dict) -> str:
    cols = {"depth": ["delta1", "delta2", "delta3", "abs_rel", "rmse"],
            "image": ["psnr", "ssim"], "artifact": ["artifact_score"]}[report["kind"]]
    width = max([len(r["name"]) for r in report["pairs"]] + [4])
    lines = ["  ".join(["name".ljust(width)] + [c.rjust(9) for c in cols])]
    for r in report["pairs"] + [dict(report["mean"], name="mean")]:
        if all(c in r for c in cols):
            lines.append("  ".join([r["name"].ljust(width)] + [_fmt(r[c]).rjust(9) for c in cols]))
    return "\n".join(lines) + "\n"


def _json_safe(doc):
    if isinstance(doc, float) and not math.isfinite(doc):
        return "inf" if doc > 0 else ("-inf" if doc < 0 else None)
    if isinstance(doc, dict):
        return {k: _json_safe(v) for k, v in doc.items()}
    if isinstance(doc, list):
        return [_json_safe(v) for v in doc]
    return doc


def write_report(report: dict, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    js, txt = out_dir / f"metrics_{report['kind']}.json", out_dir / f"metrics_{report['kind']}.txt"
    _write_json(js, _json_safe(report))
    _atomic(txt, lambda p: p.write_text(report_table(report)))
    return js, txt


# ---------------------------------------------------------------------------
# batch


@dataclass(frozen=True)
class ManifestItem:
    scene_id: str
    rgb: Path
    depth: Path


def load_manifest(path) -> tuple[str, list[ManifestItem]]:
    path = Path(path)
    doc = json.loads(path.read_text())
    split = doc.get("split", "test")
    if split not in SPLITS:
        raise PipelineError(f"split must be one of {SPLITS}")
    items, seen = [], set()
    for it in doc["items"]:
        sid = str(it["scene_id"])
        if sid in seen:
            raise PipelineError(f"duplicate scene id {sid}")
        seen.add(sid)
        items.append(ManifestItem(sid, path.parent / it["rgb"], path.parent / it["depth"]))
    return split, items


def item_seed(seed: int, scene_id: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{scene_id}".encode()).digest()[:8], "little")


def _batch_item(cfg: PipelineConfig, item: ManifestItem, mode: str, out_dir: Path) -> dict:
    hashes = {"rgb_sha256": sha256_file(item.rgb), "depth_sha256": sha256_file(item.depth)}
    seed = item_seed(cfg.seed, item.scene_id)
    key = hashlib.sha256(json.dumps([cfg.config_hash(), seed, mode, hashes],
                                    sort_keys=True).encode()).hexdigest()[:12]
    stem = f"{item.scene_id}_{key}"
    coded = out_dir / "coded" / stem
    raw_depth = out_dir / "depth" / f"{stem}_raw.f32"
    quant_depth = out_dir / "depth" / f"{stem}_quant.png"
    record = {"scene_id": item.scene_id, "seed": seed, "mode": mode, "provenance_key": key,
              "input_hashes": hashes,
              "outputs": {"coded_png": str(coded.with_suffix(".png").relative_to(out_dir)),
                          "coded_raw": str(coded.with_suffix(".f32").relative_to(out_dir)),
                          "depth_raw": str(raw_depth.relative_to(out_dir)),
                          "depth_quantized": str(quant_depth.relative_to(out_dir))}}
    if coded.with_suffix(".json").exists() and raw_depth.exists() and quant_depth.exists():
        return dict(record, resumed=True)
    rgb, depth, filled, valid = load_scene(cfg, item.rgb, item.depth)
    provider = formation.CachePsf(ensure_cache(cfg), cfg.render.tile_size)
    prov = {"prescription": prescription_name(cfg), "config_hash": cfg.config_hash(),
            "seed": seed, "mode": mode, "scene_id": item.scene_id, **hashes}
    img = render(cfg, rgb, filled, mode, provider, seed, prov)
    quant = np.where(valid, cfg.render.depths[cfg.render.layer_index(filled)], 0.0)
    _atomic(raw_depth, lambda p: imageio.write_raw(p, np.where(valid, depth, 0.0)))
    _atomic(quant_depth, lambda p: imageio.write_depth_png(p, quant))
    write_coded(coded, img)
    return dict(record, resumed=False)


def _batch_task(args):
    cfg, item, mode, out_dir = args
    try:
        return _batch_item(cfg, item, mode, out_dir)
    except Exception as exc:  # noqa: BLE001 - per-item failures are reported, batch continues
        return {"scene_id": item.scene_id, "error": f"{type(exc).__name__}: {exc}"}


def run_batch(cfg: PipelineConfig, manifest_path, mode: str = "occlusion", out_dir=None,
              limit: int | None = None) -> tuple[list[dict], list[dict]]:
    """Render every manifest item; returns (index records, failures).

    ``limit`` stops after that many items (used to simulate interruption).
    """
    split, items = load_manifest(manifest_path)
    out_dir = Path(out_dir or cfg.out_dir)
    ensure_cache(cfg)
    jobs = [(cfg, it, mode, out_dir) for it in items[:limit]]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_batch_task, jobs))
    else:
        results = [_batch_task(j) for j in jobs]
    done = [r for r in results if "error" not in r]
    failed = [r for r in results if "error" in r]
    for f in failed:
        log.error("item %s failed: %s", f["scene_id"], f["error"])
    with open(out_dir / "index.jsonl", "w") as f:
        for r in done:
            row = {k: v for k, v in r.items() if k != "resumed"}
            f.write(json.dumps(dict(row, split=split), sort_keys=True) + "\n")
    return done, failed
