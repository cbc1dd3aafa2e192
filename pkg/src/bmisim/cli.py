"""Command-line entry point: ``bmisim <command> [--config] [--seed] [--out]``."""

from __future__ import annotations

import argparse
import logging
import sys

from bmisim import kernels, pipeline
from bmisim.config import ConfigFileError, load_config
from bmisim.optics import DESIGN_WAVELENGTHS, EmptyPsfError, PrescriptionError

log = logging.getLogger("bmisim")


def _progress(done, total):
    if done == total or done % max(total // 20, 1) == 0:
        log.info("%d / %d", done, total)


def cmd_trace_psf(cfg, args):
    recs = pipeline.trace_psfs(cfg, args.depth, args.theta, args.wavelength)
    for r in recs:
        print(f"{r['file']}: energy {r['captured_energy_fraction']:.5f} "
              f"rms radius {r['second_moment_radius_um']:.3f} um")
    return 0


def cmd_build_cache(cfg, args):
    cache = pipeline.ensure_cache(cfg, progress=_progress)
    print(f"{cfg.cache_path}: {cache.shape[0] * cache.shape[1] * cache.shape[2] * cache.shape[3]} "
          f"records of {cache.shape[4]}x{cache.shape[5]}")
    return 0


def cmd_render(cfg, args):
    modes = pipeline.MODES if args.mode == "both" else (args.mode,)
    out = pipeline.render_files(cfg, args.rgb, args.depth, modes, scene_id=args.scene_id)
    for mode, paths in out.items():
        print(f"{mode}: {paths[0]}")
    return 0


def cmd_evaluate(cfg, args):
    report = pipeline.evaluate_dirs(cfg, args.pred, args.gt, args.kind)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    js, txt = pipeline.write_report(report, cfg.out_dir)
    sys.stdout.write(txt.read_text())
    for e in report["errors"]:
        log.warning("%s: %s", e["name"], e["error"])
    return 0


def cmd_batch(cfg, args):
    done, failed = pipeline.run_batch(cfg, args.manifest, args.mode)
    resumed = sum(r["resumed"] for r in done)
    print(f"{len(done)} rendered ({resumed} already complete), {len(failed)} failed; "
          f"index at {cfg.out_dir / 'index.jsonl'}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config (default: $BMISIM_CONFIG or built-in defaults)")
    common.add_argument("--seed", type=int, help="64-bit seed overriding the config")
    common.add_argument("--out", help="output directory overriding the config")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bmisim", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s (trace backend: {kernels.BACKEND})")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("trace-psf", parents=[common], help="trace PSFs and write PNG + stats")
    s.add_argument("--depth", type=float, nargs="+", default=[1.0], help="object depths (m)")
    s.add_argument("--theta", type=float, nargs="+", default=[0.0], help="field angles (deg)")
    s.add_argument("--wavelength", type=float, nargs="+", default=[DESIGN_WAVELENGTHS[1]])
    s.set_defaults(func=cmd_trace_psf)

    s = sub.add_parser("build-cache", parents=[common], help="trace the PSF tensor and build the tile cache")
    s.set_defaults(func=cmd_build_cache)

    s = sub.add_parser("render", parents=[common], help="render a coded image from RGB-D input")
    s.add_argument("--rgb", required=True)
    s.add_argument("--depth", required=True)
    s.add_argument("--mode", choices=pipeline.MODES + ("both",), default="occlusion")
    s.add_argument("--scene-id")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("evaluate", parents=[common], help="metrics over matched prediction/reference files")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--kind", choices=("depth", "image", "artifact"), required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("batch", parents=[common], help="render every item of a dataset manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--mode", choices=pipeline.MODES, default="occlusion")
    s.set_defaults(func=cmd_batch)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, output_dir=args.out)
        return args.func(cfg, args)
    except (ConfigFileError, PrescriptionError, pipeline.PipelineError, EmptyPsfError,
            ValueError, FileNotFoundError) as exc:
        print(f"bmisim {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
