"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line; the lines are repeated in the
pytest terminal summary under "acceptance criteria".
"""

import json
import math
import shutil
import time

import numpy as np
from PIL import Image

from bmisim import formation as F
from bmisim import imageio, optics, pipeline, quality
from bmisim.cli import main
from bmisim.config import config_from_dict
from bmisim.formation import RenderConfig, UniformPsf

import oracles
from conftest import boundary_scene

CFG = RenderConfig()
WL = 587.6


def test_01_energy_capture(mono, criterion):
    t0 = time.perf_counter()
    fr = {d: optics.compute_psf(mono, d, 0.0, WL, 512 * 512).captured_energy_fraction
          for d in (1.0, 2.0, 5.0, 10.0)}
    dt = time.perf_counter() - t0
    worst = min(fr.values())
    criterion(1, "PSF energy capture >= 0.999 at 1/2/5/10 m", worst >= 0.999 and dt < 60,
              f"min fraction {worst:.6f}, {dt:.1f} s")


def test_02_depth_coding_trend(mono, criterion):
    depths = [0.8, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 6.5, 8.0, 10.0]
    radii = [optics.compute_psf(mono, d, 0.0, WL, 512 * 512).second_moment_radius_um() for d in depths]
    ok = all(a > b for a, b in zip(radii, radii[1:]))
    criterion(2, "on-axis second-moment radius strictly decreasing 0.8 -> 10 m", ok,
              " > ".join(f"{r:.1f}" for r in radii) + " um")


def test_03_fft_direct_oracle(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        kh, kw = rng.integers(1, 16, 2)
        h, w = rng.integers(8, 49, 2)
        tile = rng.random((h + kh - 1, w + kw - 1))
        k = rng.random((kh, kw))
        k /= k.sum()
        ref = oracles.direct_convolve(tile, k)
        err = np.max(np.abs(F.fft_convolve(tile, k) - ref)) / np.max(np.abs(ref))
        worst = max(worst, err)
    dt = time.perf_counter() - t0
    criterion(3, "FFT vs direct convolution, 200 pairs, rel Linf < 1e-6", worst < 1e-6 and dt < 60,
              f"worst {worst:.2e}, {dt:.1f} s")


def test_04_telescoping(criterion):
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        K = int(rng.integers(1, 11))
        layers = np.sort(rng.choice(CFG.layer_count, K, replace=False))
        cell = int(rng.integers(2, 17))
        coarse = rng.integers(0, K, (64 // cell + 1, 64 // cell + 1))
        labels = layers[np.kron(coarse, np.ones((cell, cell), int))[:64, :64]]
        stack = F.DepthLayerStack(np.ones((64, 64, 3)), labels, CFG.depths)
        n = int(rng.choice([1, 3, 7, 11, 15, 21]))
        kernels = rng.random((3, n, n)) ** 3
        kernels /= kernels.sum(axis=(1, 2), keepdims=True)
        out = F.composite_occlusion(stack, UniformPsf(kernels)).pixels
        # full coverage: PSF * sum(alpha) > 0 at every pixel
        worst = max(worst, np.max(np.abs(out - 1.0)))
    dt = time.perf_counter() - t0
    criterion(4, "telescoping identity on 50 full-coverage stacks, |out - 1| < 1e-5",
              worst < 1e-5 and dt < 120, f"worst {worst:.2e}, {dt:.1f} s")


def test_05_brute_force_equivalence(criterion):
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(20):
        rgb = rng.random((32, 32, 3))
        depth = np.full((32, 32), rng.uniform(3.0, 10.0))
        y0, x0 = rng.integers(0, 20, 2)
        sy, sx = rng.integers(4, 14, 2)
        depth[y0:y0 + sy, x0:x0 + sx] = rng.uniform(0.7, 2.0)
        labels = CFG.layer_index(depth)
        ks = np.unique(labels)
        n = int(rng.choice([3, 5, 7, 9]))
        kernels = np.zeros((3, CFG.layer_count, n, n))
        for c in range(3):
            for k in ks:
                kernels[c, k] = rng.random((n, n))
                kernels[c, k] /= kernels[c, k].sum()
        cfg = RenderConfig(tile_size=(40, 16, 8)[i % 3])
        out = F.composite_occlusion(F.layerize(rgb, depth, cfg), UniformPsf(kernels), cfg).pixels
        masks = np.stack([labels == k for k in ks])
        ref = oracles.brute_force_composite(rgb[None] * masks[..., None], masks,
                                            [[kernels[c, k] for k in ks] for c in range(3)])
        worst = max(worst, np.max(np.abs(out - ref)))
    dt = time.perf_counter() - t0
    criterion(5, "tiled renderer vs per-pixel brute force, 20 two-layer scenes, < 1e-6",
              worst < 1e-6 and dt < 120, f"worst {worst:.2e}, {dt:.1f} s")


def test_06_artifact_score_ordering(traced_cache, criterion):
    provider = F.CachePsf(traced_cache)
    t0 = time.perf_counter()
    pairs = []
    for seed in range(6):
        rgb, depth = boundary_scene(seed, 480, 640)
        occ = F.composite_occlusion(F.layerize(rgb, depth), provider).pixels
        pw = F.render_patchwise(rgb, depth, provider).pixels
        a_occ, mask = quality.artifact_score(occ, rgb)
        a_pw, _ = quality.artifact_score(pw, rgb, mask=mask)
        pairs.append((a_occ, a_pw))
    dt = time.perf_counter() - t0
    ok = all(a < b for a, b in pairs) and dt < 120
    criterion(6, "AS(occlusion) < AS(patch-wise) on 6 boundary scenes", ok,
              ", ".join(f"{a:.1e}<{b:.1e}" for a, b in pairs) + f", {dt:.1f} s")


def test_07_paraxial_consistency(mono, dgauss, criterion):
    errs = []
    for p in (mono, dgauss):
        for wl in optics.DESIGN_WAVELENGTHS:
            ref = oracles.abcd_efl(p, wl)
            errs.append(abs(optics.traced_efl(p, wl) / ref - 1))
    worst = max(errs)
    criterion(7, "traced EFL vs transfer matrix within 0.1%", worst < 1e-3, f"worst {worst:.2e}")


def test_08_metric_closed_forms(criterion):
    rng = np.random.default_rng(8)
    gt = rng.uniform(0.7, 10.0, (30, 40))
    checks = {}
    m = quality.depth_metrics(gt, gt)
    checks["depth perfect"] = (m["delta1"], m["delta2"], m["delta3"], m["abs_rel"], m["rmse"]) == (1, 1, 1, 0, 0)
    m = quality.depth_metrics(1.3 * gt, gt)
    checks["depth x1.3"] = (m["delta1"] == 0 and m["delta2"] == 1 and abs(m["abs_rel"] - 0.3) < 1e-9)
    img = rng.random((32, 32, 3)) * 0.8
    checks["psnr inf"] = quality.psnr(img, img) == math.inf
    checks["psnr 20 dB"] = abs(quality.psnr(img + 0.1, img) - 20.0) < 1e-9
    checks["ssim self"] = abs(quality.ssim(img, img) - 1.0) < 1e-6
    checks["ssim 0 vs 1"] = abs(quality.ssim(np.zeros((16, 16)), np.ones((16, 16))) - 1e-4 / 1.0001) < 1e-6
    checks["silog equal"] = abs(quality.silog_loss(gt, gt)) < 1e-9
    checks["silog two-pixel"] = abs(quality.silog_loss(np.array([1.0, 4.0]), np.array([2.0, 2.0]))
                                    - math.log(2) ** 2) < 1e-9
    failed = [k for k, v in checks.items() if not v]
    criterion(8, "metric closed forms (depth, PSNR, SSIM, SiLog)", not failed,
              "failed: " + ", ".join(failed) if failed else f"{len(checks)} checks")


def test_09_loss_properties(criterion):
    rng = np.random.default_rng(9)
    gt = rng.uniform(0.7, 10.0, (40, 40))
    pred = gt * np.exp(rng.normal(0, 0.2, gt.shape))
    base = quality.silog_loss(pred, gt)
    drift = max(abs(quality.silog_loss(c * pred, gt) - base) for c in (0.01, 0.5, 1.7, 42.0))
    total = quality.total_loss((0.5, 0.2, 0.3))
    ok = drift < 1e-9 and abs(total - 0.55) < 1e-12
    criterion(9, "SiLog scale invariance and default-weight total loss", ok,
              f"max drift {drift:.1e}, total {total!r}")


def _warm_config(tmp_path, cache_path, **extra):
    doc = {"pupil_samples": 64 * 64, "output_dir": str(tmp_path / "out"), **extra}
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(doc))
    cfg = config_from_dict(doc, tmp_path)
    cfg.cache_path.parent.mkdir(parents=True, exist_ok=True)
    shutil.copy(cache_path, cfg.cache_path)
    return cfg_path, cfg


def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and "cache" not in p.parts}


def test_10_determinism(traced_cache_path, tmp_path, criterion):
    cfg_path, cfg = _warm_config(tmp_path, traced_cache_path, seed=77)
    rgb, depth = boundary_scene(10, 480, 640)
    Image.fromarray(np.round(rgb * 255).astype(np.uint8)).save(tmp_path / "scene.png")
    imageio.write_depth_png(tmp_path / "depth.png", depth)
    runs = []
    for i in range(2):
        out = tmp_path / f"run{i}"
        rc = main(["render", "--config", str(cfg_path), "--rgb", str(tmp_path / "scene.png"),
                   "--depth", str(tmp_path / "depth.png"), "--mode", "both", "--out", str(out)])
        runs.append((rc, _tree(out)))
    render_ok = runs[0][0] == runs[1][0] == 0 and runs[0][1] == runs[1][1] and len(runs[0][1]) == 6

    items = []
    for i in range(3):
        rgb, depth = boundary_scene(20 + i, 96, 128)
        Image.fromarray(np.round(rgb * 255).astype(np.uint8)).save(tmp_path / f"b{i}.png")
        imageio.write_depth_png(tmp_path / f"b{i}_d.png", depth)
        items.append({"scene_id": f"b{i}", "rgb": f"b{i}.png", "depth": f"b{i}_d.png"})
    man = tmp_path / "manifest.json"
    man.write_text(json.dumps({"split": "test", "items": items}))
    pipeline.run_batch(cfg, man, out_dir=tmp_path / "full")
    pipeline.run_batch(cfg, man, out_dir=tmp_path / "resumed", limit=1)
    done, failed = pipeline.run_batch(cfg, man, out_dir=tmp_path / "resumed")
    full, resumed = _tree(tmp_path / "full"), _tree(tmp_path / "resumed")
    batch_ok = not failed and sum(r["resumed"] for r in done) == 1 and full == resumed and len(full) == 3 * 5 + 1
    criterion(10, "byte-identical reruns and resumed batch", render_ok and batch_ok,
              f"render {'ok' if render_ok else 'differs'}, batch {'ok' if batch_ok else 'differs'}")


def test_11_throughput(traced_cache, criterion):
    rng = np.random.default_rng(11)
    # smooth depth ramp plus blocks so all 94 layers are present
    ramp = np.linspace(0.7, 10.0, 640)[None, :] * np.ones((480, 1))
    blocks = np.kron(rng.uniform(0.7, 10.0, (12, 16)), np.ones((40, 40)))
    depth = np.where((np.arange(480) // 40 % 2 == 0)[:, None], ramp, blocks)
    rgb = rng.random((480, 640, 3))
    stack = F.layerize(rgb, depth)
    assert len(stack.present_layers()) == 94
    t0 = time.perf_counter()
    out = F.composite_occlusion(stack, F.CachePsf(traced_cache))
    dt = time.perf_counter() - t0
    criterion(11, "640x480, K=94, 3-channel occlusion render under 60 s (warm cache)",
              dt < 60 and out.pixels.shape == (480, 640, 3), f"{dt:.1f} s")
