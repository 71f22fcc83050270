"""Command-line entry point.

Subcommands: ``run`` (one frame), ``batch`` (a directory of frames),
``synth`` (generate a synthetic frame), ``fusion-check`` (gradient
verification of the attention block), ``stats`` (voxel/normal statistics
without sampling).

Exit codes: 0 success, 1 input error, 2 pipeline error, 3 verification
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import NormvoxError
from .fusion import run_fusion_check
from .pipeline import (
    CONFIG_SPEC,
    PipelineConfig,
    batch_run,
    parse_config_file,
    run_pipeline,
)
from .pointcloud import write_kitti_bin, write_ply
from .scene import SyntheticScene, benchmark_scene, demo_scene, generate_scene

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_PIPELINE = 2
EXIT_VERIFY = 3


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="flat key = value config file")
    p.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override one config key (repeatable); see --list-keys",
    )
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--chain", help="override the sampler chain, e.g. nd,fov")
    p.add_argument("--list-keys", action="store_true", help="print config keys and exit")


def _add_output_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--ply", action="store_true", help="also write PLY visualizations")
    p.add_argument("--no-csv", action="store_true", help="skip CSV artifacts")
    p.add_argument("--no-figures", action="store_true", help="skip PNG figures")


def _build_config(args) -> PipelineConfig:
    flat: dict[str, str] = {}
    if args.config:
        flat.update(parse_config_file(args.config))
    for item in args.overrides:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in CONFIG_SPEC:
            raise ValueError(f"unknown config key {key!r}")
        flat[key] = value
    if args.seed is not None:
        flat["seed"] = str(args.seed)
    if getattr(args, "chain", None):
        flat["chain"] = args.chain
    return PipelineConfig.from_flat(flat)


def _print_keys() -> None:
    for key, (_, default) in CONFIG_SPEC.items():
        print(f"{key} = {default}")


def _write_error_report(outdir: str | None, frame_id: str, message: str) -> None:
    if outdir is None:
        return
    path = Path(outdir)
    path.mkdir(parents=True, exist_ok=True)
    report = {
        "schema_version": 1,
        "kind": "error",
        "frame_id": frame_id,
        "error": message,
    }
    (path / f"{frame_id}.report.json").write_text(
        json.dumps(report, indent=2) + "\n", encoding="ascii"
    )


def _cmd_run(args) -> int:
    if args.list_keys:
        _print_keys()
        return EXIT_OK
    cfg = _build_config(args)
    source = Path(args.input)
    if not source.exists():
        print(f"input not found: {source}", file=sys.stderr)
        return EXIT_INPUT
    try:
        result = run_pipeline(
            cfg, source, args.out, force=args.force,
            emit_csv=not args.no_csv, emit_ply=args.ply,
            emit_figures=not args.no_figures,
        )
    except NormvoxError as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        _write_error_report(args.out, source.stem, str(exc))
        return EXIT_PIPELINE
    rep = result.report
    print(
        f"{rep['frame_id']}: {rep['counts']['points_clipped']} points -> "
        f"{rep['counts']['voxels_capped']} voxels -> {rep['counts']['final']} kept "
        f"(drop {100 * rep['drop_rate_total']:.2f}%)"
    )
    return EXIT_OK


def _collect_sources(input_dir: Path) -> list[Path]:
    frames = sorted(input_dir.glob("*.bin"))
    if not frames:
        frames = sorted(input_dir.glob("*.json"))
    return frames


def _cmd_batch(args) -> int:
    if args.list_keys:
        _print_keys()
        return EXIT_OK
    cfg = _build_config(args)
    input_dir = Path(args.input)
    if not input_dir.is_dir():
        print(f"not a directory: {input_dir}", file=sys.stderr)
        return EXIT_INPUT
    sources = _collect_sources(input_dir)
    if not sources:
        print(f"no .bin or .json frames in {input_dir}", file=sys.stderr)
        return EXIT_INPUT
    report = batch_run(
        cfg, sources, args.out, workers=args.workers, force=args.force,
        emit_csv=not args.no_csv, emit_ply=args.ply,
        emit_figures=not args.no_figures,
    )
    agg = report["aggregate"]
    if not agg:
        print("all frames failed", file=sys.stderr)
        return EXIT_PIPELINE
    print(
        f"{agg['frames_ok']}/{report['n_frames']} frames ok; "
        f"mean drop {100 * agg['mean_drop_rate']:.2f}%"
    )
    for failure in report["failures"]:
        print(f"failed: {failure['source']}: {failure['error']}", file=sys.stderr)
    return EXIT_OK


def _cmd_synth(args) -> int:
    if args.scene:
        scene = SyntheticScene.from_file(args.scene)
    elif args.benchmark:
        scene = benchmark_scene(args.seed or 0)
    else:
        scene = demo_scene(args.seed or 0)
    if args.seed is not None:
        scene = SyntheticScene.from_dict({**scene.to_dict(), "seed": args.seed})
    pc = generate_scene(scene)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.exists() and not args.force:
        print(f"refusing to overwrite {out} (use --force)", file=sys.stderr)
        return EXIT_INPUT
    write_kitti_bin(pc, out)
    print(f"wrote {len(pc)} points to {out}")
    if args.ply:
        write_ply(pc, args.ply, colors=pc.reflectance)
        print(f"wrote {args.ply}")
    if args.save_scene:
        Path(args.save_scene).write_text(
            json.dumps(scene.to_dict(), indent=2) + "\n", encoding="ascii"
        )
        print(f"wrote {args.save_scene}")
    return EXIT_OK


def _cmd_fusion_check(args) -> int:
    if args.trials < 1:
        print("--trials must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    summary = run_fusion_check(args.seed, args.trials)
    print(
        f"{summary['trials']} trials, max relative gradient error "
        f"{summary['max_rel_error']:.3e} (threshold {summary['threshold']:.0e})"
    )
    if args.json:
        Path(args.json).write_text(
            json.dumps(summary, indent=2) + "\n", encoding="ascii"
        )
    if not summary["passed"]:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_VERIFY
    print("gradient check passed")
    return EXIT_OK


def _cmd_stats(args) -> int:
    if args.list_keys:
        _print_keys()
        return EXIT_OK
    args.chain = ""  # statistics only, no sampling
    cfg = _build_config(args)
    source = Path(args.input)
    if not source.exists():
        print(f"input not found: {source}", file=sys.stderr)
        return EXIT_INPUT
    try:
        result = run_pipeline(
            cfg, source, args.out, force=args.force,
            emit_csv=not args.no_csv, emit_ply=args.ply,
            emit_figures=not args.no_figures,
        )
    except NormvoxError as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        _write_error_report(args.out, source.stem, str(exc))
        return EXIT_PIPELINE
    rep = result.report
    dens = rep["density"]
    print(
        f"{rep['frame_id']}: {rep['counts']['voxels_capped']} voxels, "
        f"{dens['over_threshold']} above density "
        f"{rep['config']['nd.density_threshold']}"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="normvox",
        description="LiDAR voxel preprocessing: normals, density-aware "
        "sampling, and attention-fusion numerics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="process one frame (.bin or scene .json)")
    p_run.add_argument("input", help="KITTI .bin frame or scene .json")
    _add_config_flags(p_run)
    _add_output_flags(p_run)
    p_run.set_defaults(fn=_cmd_run)

    p_batch = sub.add_parser("batch", help="process a directory of frames")
    p_batch.add_argument("input", help="directory of .bin frames or scene .json files")
    p_batch.add_argument("--workers", type=int, default=1, help="parallel frame slots")
    _add_config_flags(p_batch)
    _add_output_flags(p_batch)
    p_batch.set_defaults(fn=_cmd_batch)

    p_synth = sub.add_parser("synth", help="generate a synthetic frame")
    p_synth.add_argument("--scene", metavar="FILE", help="scene description .json")
    p_synth.add_argument("--benchmark", action="store_true",
                         help="use the dense benchmark scene")
    p_synth.add_argument("--seed", type=int, default=None)
    p_synth.add_argument("--out", required=True, metavar="FILE.bin")
    p_synth.add_argument("--ply", metavar="FILE.ply", help="also write a PLY preview")
    p_synth.add_argument("--save-scene", metavar="FILE.json",
                         help="write the scene description used")
    p_synth.add_argument("--force", action="store_true")
    p_synth.set_defaults(fn=_cmd_synth)

    p_fc = sub.add_parser("fusion-check", help="verify fusion-block gradients")
    p_fc.add_argument("--seed", type=int, default=0)
    p_fc.add_argument("--trials", type=int, default=20)
    p_fc.add_argument("--json", metavar="FILE", help="write the summary as JSON")
    p_fc.set_defaults(fn=_cmd_fusion_check)

    p_stats = sub.add_parser(
        "stats", help="voxel/normal statistics for a frame, no sampling"
    )
    p_stats.add_argument("input", help="KITTI .bin frame or scene .json")
    _add_config_flags(p_stats)
    _add_output_flags(p_stats)
    p_stats.set_defaults(fn=_cmd_stats)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        code = args.fn(args)
    except (FileNotFoundError, FileExistsError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_INPUT
    except NormvoxError as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        code = EXIT_PIPELINE
    return code


if __name__ == "__main__":
    sys.exit(main())
