"""End-to-end frame processing and reporting.

A pipeline run is read -> clip -> voxelize -> cap -> normals -> sampler
chain -> statistics, followed by artifact and report writing. Reports are
JSON with a fixed field order; two runs with identical (config, seed,
input) produce byte-identical reports once timing fields are stripped
(see ``canonical_report``).
"""

from __future__ import annotations

import csv
import json
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyInput, NormvoxError
from .normals import (
    NormalConfig,
    NormalFeatures,
    density_histogram,
    extract_normals,
    write_normal_sphere_ply,
    write_normals_csv,
)
from .pointcloud import PointCloud, RangeBox, clip_to_range, read_kitti_bin, write_ply
from .sampling import (
    BinStatistics,
    FovConfig,
    NdConfig,
    SampleMask,
    bin_statistics,
    compose,
    expand_mask,
    fov_bin_sample,
    fps_sample,
    general_bin_sample,
    nd_sample,
    random_sample,
)
from .scene import SyntheticScene, generate_scene
from .voxels import VoxelConfig, VoxelSet, cap_voxels, voxelize, write_voxels_csv

SCHEMA_VERSION = 1

SAMPLER_TAGS = ("nd", "fov", "bin", "random", "fps")
CAP_PLACEMENTS = ("before_normals", "after_sampling")


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_opt_int(s: str) -> int | None:
    return None if s.strip().lower() == "none" else int(s)


def _parse_opt_float(s: str) -> float | None:
    return None if s.strip().lower() == "none" else float(s)


def _parse_chain(s: str) -> tuple[str, ...]:
    items = tuple(part.strip() for part in s.split(",") if part.strip())
    return items


#: Every config key with its parser and default; each key is settable from a
#: config file line ``key = value`` or a ``--set key=value`` CLI override.
CONFIG_SPEC: dict[str, tuple] = {
    "range.x_min": (float, 0.0),
    "range.x_max": (float, 70.4),
    "range.y_min": (float, -40.0),
    "range.y_max": (float, 40.0),
    "range.z_min": (float, -3.0),
    "range.z_max": (float, 1.0),
    "voxel.size_x": (float, 0.05),
    "voxel.size_y": (float, 0.05),
    "voxel.size_z": (float, 0.1),
    "voxel.max_voxels": (_parse_opt_int, 16000),
    "voxel.cap_placement": (str, "before_normals"),
    "normals.k": (int, 7),
    "normals.density_radius": (float, 0.25),
    "normals.orientation": (str, "toward_sensor"),
    "nd.density_threshold": (float, 0.7),
    "nd.drop_fraction": (float, 0.5),
    "nd.mode": (str, "random"),
    "fov.num_bins": (int, 10),
    "fov.base_quota": (int, 500),
    "fov.bin_width": (float, 3.0),
    "fov.far_cutoff": (_parse_opt_float, None),
    "fov.use_3d_range": (_parse_bool, False),
    "bin.num_bins": (int, 10),
    "bin.quota": (int, 500),
    "bin.far_cutoff": (float, 30.0),
    "random.keep_fraction": (float, 0.5),
    "fps.keep_count": (int, 4096),
    "chain": (_parse_chain, ("nd", "fov")),
    "seed": (int, 0),
    "stats.hist_bins": (int, 20),
}


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read ``key = value`` lines; '#' starts a comment, blank lines ignored."""
    flat: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_SPEC:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        flat[key] = value
    return flat


@dataclass(frozen=True)
class PipelineConfig:
    """Full pipeline configuration; defaults follow the standard setup."""

    voxel: VoxelConfig = field(default_factory=VoxelConfig)
    cap_placement: str = "before_normals"
    normals: NormalConfig = field(default_factory=NormalConfig)
    nd: NdConfig = field(default_factory=NdConfig)
    fov: FovConfig = field(default_factory=FovConfig)
    bin_num_bins: int = 10
    bin_quota: int = 500
    bin_far_cutoff: float = 30.0
    random_keep_fraction: float = 0.5
    fps_keep_count: int = 4096
    chain: tuple[str, ...] = ("nd", "fov")
    seed: int = 0
    hist_bins: int = 20

    def __post_init__(self):
        if self.cap_placement not in CAP_PLACEMENTS:
            raise ValueError(
                f"cap_placement must be one of {CAP_PLACEMENTS}, got {self.cap_placement!r}"
            )
        unknown = [t for t in self.chain if t not in SAMPLER_TAGS]
        if unknown:
            raise ValueError(f"unknown sampler tags {unknown}; valid: {SAMPLER_TAGS}")
        if len(set(self.chain)) != len(self.chain):
            raise ValueError(f"sampler chain has repeated tags: {self.chain}")
        if self.hist_bins < 1:
            raise ValueError("stats.hist_bins must be >= 1")

    @classmethod
    def from_flat(cls, overrides: dict[str, str]) -> "PipelineConfig":
        """Build from string-valued overrides of the documented config keys."""
        unknown = set(overrides) - set(CONFIG_SPEC)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        values = {}
        for key, (parse, default) in CONFIG_SPEC.items():
            values[key] = parse(overrides[key]) if key in overrides else default
        rng_box = RangeBox(
            values["range.x_min"], values["range.x_max"],
            values["range.y_min"], values["range.y_max"],
            values["range.z_min"], values["range.z_max"],
        )
        return cls(
            voxel=VoxelConfig(
                size_x=values["voxel.size_x"],
                size_y=values["voxel.size_y"],
                size_z=values["voxel.size_z"],
                range=rng_box,
                max_voxels=values["voxel.max_voxels"],
            ),
            cap_placement=values["voxel.cap_placement"],
            normals=NormalConfig(
                k=values["normals.k"],
                density_radius=values["normals.density_radius"],
                orientation=values["normals.orientation"],
            ),
            nd=NdConfig(
                density_threshold=values["nd.density_threshold"],
                drop_fraction=values["nd.drop_fraction"],
                mode=values["nd.mode"],
            ),
            fov=FovConfig(
                num_bins=values["fov.num_bins"],
                base_quota=values["fov.base_quota"],
                bin_width=values["fov.bin_width"],
                far_cutoff=values["fov.far_cutoff"],
                use_3d_range=values["fov.use_3d_range"],
            ),
            bin_num_bins=values["bin.num_bins"],
            bin_quota=values["bin.quota"],
            bin_far_cutoff=values["bin.far_cutoff"],
            random_keep_fraction=values["random.keep_fraction"],
            fps_keep_count=values["fps.keep_count"],
            chain=values["chain"],
            seed=values["seed"],
            hist_bins=values["stats.hist_bins"],
        )

    def to_flat(self) -> dict:
        """Typed echo of every config key, in the documented key order."""
        box = self.voxel.range
        return {
            "range.x_min": box.x_min, "range.x_max": box.x_max,
            "range.y_min": box.y_min, "range.y_max": box.y_max,
            "range.z_min": box.z_min, "range.z_max": box.z_max,
            "voxel.size_x": self.voxel.size_x,
            "voxel.size_y": self.voxel.size_y,
            "voxel.size_z": self.voxel.size_z,
            "voxel.max_voxels": self.voxel.max_voxels,
            "voxel.cap_placement": self.cap_placement,
            "normals.k": self.normals.k,
            "normals.density_radius": self.normals.density_radius,
            "normals.orientation": self.normals.orientation,
            "nd.density_threshold": self.nd.density_threshold,
            "nd.drop_fraction": self.nd.drop_fraction,
            "nd.mode": self.nd.mode,
            "fov.num_bins": self.fov.num_bins,
            "fov.base_quota": self.fov.base_quota,
            "fov.bin_width": self.fov.bin_width,
            "fov.far_cutoff": self.fov.far_cutoff,
            "fov.use_3d_range": self.fov.use_3d_range,
            "bin.num_bins": self.bin_num_bins,
            "bin.quota": self.bin_quota,
            "bin.far_cutoff": self.bin_far_cutoff,
            "random.keep_fraction": self.random_keep_fraction,
            "fps.keep_count": self.fps_keep_count,
            "chain": list(self.chain),
            "seed": self.seed,
            "stats.hist_bins": self.hist_bins,
        }


def load_frame(source, box: RangeBox) -> PointCloud:
    """Resolve a frame source: .bin path, scene .json path, scene, or cloud."""
    if isinstance(source, PointCloud):
        return source
    if isinstance(source, SyntheticScene):
        return generate_scene(source)
    path = Path(source)
    if path.suffix == ".json":
        return generate_scene(SyntheticScene.from_file(path))
    return read_kitti_bin(path)


def _run_sampler(tag: str, vs: VoxelSet, densities: np.ndarray,
                 cfg: PipelineConfig) -> SampleMask:
    if tag == "nd":
        return nd_sample(vs, densities, cfg.nd, cfg.seed)
    if tag == "fov":
        return fov_bin_sample(vs, cfg.fov, cfg.seed)
    if tag == "bin":
        return general_bin_sample(
            vs, cfg.bin_num_bins, cfg.bin_quota, cfg.bin_far_cutoff, cfg.seed
        )
    if tag == "random":
        return random_sample(vs, cfg.random_keep_fraction, cfg.seed)
    if tag == "fps":
        return fps_sample(vs, min(cfg.fps_keep_count, len(vs)), cfg.seed)
    raise ValueError(f"unknown sampler tag {tag!r}")


def _bin_block(stats: BinStatistics) -> dict:
    return {
        "bin_width": float(stats.bin_width),
        "counts": [int(c) for c in stats.counts],
        "areas": [float(a) for a in stats.areas],
        "densities": [float(d) for d in stats.densities],
        "far_count": int(stats.far_count),
        "total": int(stats.total),
    }


@dataclass
class FrameResult:
    """In-memory outcome of one frame: the report plus the heavyweight arrays."""

    report: dict
    voxels: VoxelSet
    features: NormalFeatures
    mask: SampleMask
    stage_masks: dict[str, SampleMask]


def run_pipeline(
    cfg: PipelineConfig,
    source,
    outdir: str | Path | None = None,
    force: bool = False,
    emit_csv: bool = True,
    emit_ply: bool = False,
    emit_figures: bool = True,
) -> FrameResult:
    """Process one frame and, when ``outdir`` is given, write its artifacts.

    Raises package errors (empty frame, too few voxels for the normal
    neighborhood, ...) to the caller; ``batch_run`` and the CLI map them
    to error reports and exit codes.
    """
    timing: dict[str, float] = {}

    def clock(name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        out = fn(*args, **kwargs)
        timing[name] = (time.perf_counter() - t0) * 1000.0
        return out

    pc_raw = clock("read", load_frame, source, cfg.voxel.range)
    pc = clock("clip", clip_to_range, pc_raw, cfg.voxel.range)
    if len(pc) == 0:
        raise EmptyInput(f"frame {pc_raw.frame_id!r}: no points inside the range box")

    vs_raw = clock("voxelize", voxelize, pc, cfg.voxel)
    if cfg.voxel.max_voxels is not None and cfg.cap_placement == "before_normals":
        vs = clock("cap", cap_voxels, vs_raw, cfg.voxel.max_voxels, cfg.seed)
    else:
        vs = vs_raw
        timing["cap"] = 0.0

    feats = clock("normals", extract_normals, vs, cfg.normals)

    counts = {
        "points_read": len(pc_raw),
        "points_clipped": len(pc),
        "voxels_raw": len(vs_raw),
        "voxels_capped": len(vs),
    }

    t0 = time.perf_counter()
    stage_rows = []
    stage_masks: dict[str, SampleMask] = {}
    full_masks: list[SampleMask] = []
    active_idx = np.arange(len(vs))
    for tag in cfg.chain:
        active = vs.subset(active_idx) if len(active_idx) != len(vs) else vs
        mask = _run_sampler(tag, active, feats.densities[active_idx], cfg)
        stage_masks[tag] = mask
        full_masks.append(expand_mask(mask, active_idx, len(vs)))
        stage_rows.append({
            "sampler": tag,
            "input": int(len(active)),
            "kept": int(mask.n_kept),
            "retention": float(mask.retention),
        })
        counts[f"post_{tag}"] = int(mask.n_kept)
        active_idx = active_idx[mask.kept_indices()]
    final_mask = compose(full_masks) if full_masks else SampleMask.all_kept(len(vs), cfg.seed)

    if cfg.voxel.max_voxels is not None and cfg.cap_placement == "after_sampling":
        kept = final_mask.kept_indices()
        if len(kept) > cfg.voxel.max_voxels:
            chosen = _cap_choice(len(kept), cfg.voxel.max_voxels, cfg.seed)
            cap_keep = np.zeros(len(vs), dtype=bool)
            cap_keep[kept[chosen]] = True
            tags = final_mask.dropped_by.copy()
            tags[final_mask.keep & ~cap_keep] = "cap"
            final_mask = SampleMask(cap_keep, tags, cfg.seed)
            counts["post_cap"] = int(final_mask.n_kept)
    counts["final"] = int(final_mask.n_kept)
    timing["samplers"] = (time.perf_counter() - t0) * 1000.0

    chain_input = counts["voxels_capped"]
    retention_total = counts["final"] / chain_input if chain_input else 1.0

    t0 = time.perf_counter()
    bins_before = bin_statistics(vs, None, cfg.fov)
    bins_after = bin_statistics(vs, final_mask, cfg.fov)
    hist_counts, hist_edges = density_histogram(feats.densities, cfg.hist_bins)
    timing["stats"] = (time.perf_counter() - t0) * 1000.0

    dropped_by = {
        tag: int((final_mask.dropped_by == tag).sum())
        for tag in ("nd", "fov", "cap", "baseline")
        if (final_mask.dropped_by == tag).any()
    }

    report = {
        "schema_version": SCHEMA_VERSION,
        "kind": "frame",
        "frame_id": vs.frame_id,
        "seed": cfg.seed,
        "config": cfg.to_flat(),
        "counts": counts,
        "stages": stage_rows,
        "retention_total": float(retention_total),
        "drop_rate_total": float(1.0 - retention_total),
        "dropped_by": dropped_by,
        "density": {
            "max_ball_count": int(feats.ball_counts.max()),
            "over_threshold": int((feats.densities > cfg.nd.density_threshold).sum()),
            "histogram": [int(c) for c in hist_counts],
            "histogram_edges": [float(e) for e in hist_edges],
            "orientation": feats.orientation,
        },
        "bins_before": _bin_block(bins_before),
        "bins_after": _bin_block(bins_after),
        "artifacts": {},
        "timing_ms": {k: round(v, 3) for k, v in timing.items()},
    }

    result = FrameResult(report, vs, feats, final_mask, stage_masks)
    if outdir is not None:
        t0 = time.perf_counter()
        _write_frame_artifacts(
            result, bins_before, bins_after, hist_counts, hist_edges,
            Path(outdir), force, emit_csv, emit_ply, emit_figures,
        )
        report["timing_ms"]["artifacts"] = round(
            (time.perf_counter() - t0) * 1000.0, 3
        )
    return result


def _cap_choice(n: int, max_voxels: int, seed: int) -> np.ndarray:
    from .rng import derive_rng

    return np.sort(derive_rng(seed, "cap").choice(n, size=max_voxels, replace=False))


def _refuse_overwrite(paths: list[Path], force: bool) -> None:
    if force:
        return
    existing = [str(p) for p in paths if p.exists()]
    if existing:
        raise FileExistsError(
            f"refusing to overwrite existing outputs (use --force): {existing[:3]}"
        )


def _write_frame_artifacts(
    result: FrameResult,
    bins_before: BinStatistics,
    bins_after: BinStatistics,
    hist_counts: np.ndarray,
    hist_edges: np.ndarray,
    outdir: Path,
    force: bool,
    emit_csv: bool,
    emit_ply: bool,
    emit_figures: bool,
) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    fid = result.voxels.frame_id
    artifacts: dict[str, str] = {"report": f"{fid}.report.json"}
    if emit_csv:
        artifacts["voxels_csv"] = f"{fid}.voxels.csv"
        artifacts["normals_csv"] = f"{fid}.normals.csv"
        artifacts["bins_csv"] = f"{fid}.bins.csv"
        artifacts["density_hist_csv"] = f"{fid}.density_hist.csv"
        artifacts["mask_csv"] = f"{fid}.mask.csv"
    if emit_ply:
        artifacts["voxels_ply"] = f"{fid}.voxels.ply"
        artifacts["normal_sphere_ply"] = f"{fid}.normal_sphere.ply"
    if emit_figures:
        artifacts["bin_counts_png"] = f"{fid}.bin_counts.png"
        artifacts["bin_density_png"] = f"{fid}.bin_density.png"
        artifacts["density_hist_png"] = f"{fid}.density_hist.png"
    paths = {k: outdir / v for k, v in artifacts.items()}
    _refuse_overwrite(list(paths.values()), force)

    result.report["artifacts"] = artifacts

    if emit_csv:
        write_voxels_csv(result.voxels, paths["voxels_csv"])
        write_normals_csv(result.voxels, result.features, paths["normals_csv"])
        _write_bins_csv(bins_before, bins_after, paths["bins_csv"])
        _write_hist_csv(hist_counts, hist_edges, paths["density_hist_csv"])
        _write_mask_csv(result.mask, paths["mask_csv"])
    if emit_ply:
        write_ply(result.voxels, paths["voxels_ply"], colors=result.features.densities)
        write_normal_sphere_ply(result.features, paths["normal_sphere_ply"])
    if emit_figures:
        from . import figures

        figures.render_bin_counts(bins_before, bins_after, paths["bin_counts_png"])
        figures.render_bin_density(bins_before, bins_after, paths["bin_density_png"])
        figures.render_density_hist(hist_counts, hist_edges, paths["density_hist_png"])

    paths["report"].write_text(
        json.dumps(result.report, indent=2) + "\n", encoding="ascii"
    )


def _write_bins_csv(before: BinStatistics, after: BinStatistics, path: Path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh)
        w.writerow([
            "bin", "lo", "hi", "count_before", "density_before",
            "count_after", "density_after",
        ])
        for rb, ra in zip(before.rows(), after.rows()):
            w.writerow([rb[0], rb[1], rb[2], rb[3], rb[5], ra[3], ra[5]])


def _write_hist_csv(counts: np.ndarray, edges: np.ndarray, path: Path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh)
        w.writerow(["lo", "hi", "count"])
        for i, c in enumerate(counts):
            w.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(c)])


def _write_mask_csv(mask: SampleMask, path: Path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "keep", "dropped_by"])
        for i, (k, tag) in enumerate(zip(mask.keep, mask.dropped_by)):
            w.writerow([i, int(k), tag])


def canonical_report(report: dict) -> bytes:
    """Report bytes with timing stripped; equal runs compare equal."""

    def strip(node):
        if isinstance(node, dict):
            return {
                k: strip(v)
                for k, v in node.items()
                if k not in ("timing_ms", "timing")
            }
        if isinstance(node, list):
            return [strip(v) for v in node]
        return node

    return (json.dumps(strip(report), indent=2) + "\n").encode("ascii")


def batch_run(
    cfg: PipelineConfig,
    sources: list,
    outdir: str | Path | None = None,
    workers: int = 1,
    force: bool = False,
    emit_csv: bool = True,
    emit_ply: bool = False,
    emit_figures: bool = True,
) -> dict:
    """Process frames independently; failures are recorded, the batch continues.

    Returns the aggregate report (also written as ``batch_report.json``
    when ``outdir`` is given). Aggregation runs in input order regardless
    of worker scheduling.
    """
    if not sources:
        raise ValueError("batch_run needs at least one frame")
    t_start = time.perf_counter()

    def work(src):
        t0 = time.perf_counter()
        result = run_pipeline(
            cfg, src, outdir, force=force, emit_csv=emit_csv,
            emit_ply=emit_ply, emit_figures=emit_figures,
        )
        return result, (time.perf_counter() - t0) * 1000.0

    outcomes: list = [None] * len(sources)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(work, src) for src in sources]
            for i, fut in enumerate(futures):
                try:
                    outcomes[i] = ("ok", fut.result())
                except (NormvoxError, OSError, ValueError) as exc:
                    outcomes[i] = ("error", exc)
    else:
        for i, src in enumerate(sources):
            try:
                outcomes[i] = ("ok", work(src))
            except (NormvoxError, OSError, ValueError) as exc:
                outcomes[i] = ("error", exc)

    frames = []
    failures = []
    retentions = []
    stage_retentions: dict[str, list[float]] = {}
    frame_times = []
    for src, (status, payload) in zip(sources, outcomes):
        label = getattr(src, "frame_id", None) or str(src)
        if status == "error":
            failures.append({"source": label, "error": str(payload)})
            continue
        result, ms = payload
        frame_times.append(ms)
        rep = result.report
        retentions.append(rep["retention_total"])
        for row in rep["stages"]:
            stage_retentions.setdefault(row["sampler"], []).append(row["retention"])
        frames.append({
            "frame_id": rep["frame_id"],
            "report": rep["artifacts"].get("report"),
            "retention_total": rep["retention_total"],
            "drop_rate_total": rep["drop_rate_total"],
            "counts": rep["counts"],
        })

    aggregate = {}
    if retentions:
        aggregate = {
            "frames_ok": len(retentions),
            "mean_retention": float(statistics.fmean(retentions)),
            "median_retention": float(statistics.median(retentions)),
            "mean_drop_rate": float(1.0 - statistics.fmean(retentions)),
            "retention_by_stage": {
                tag: float(statistics.fmean(vals))
                for tag, vals in stage_retentions.items()
            },
        }
    timing = {}
    if frame_times:
        ordered = sorted(frame_times)
        timing = {
            "total_ms": round((time.perf_counter() - t_start) * 1000.0, 3),
            "per_frame_ms": {
                "p50": round(float(np.percentile(ordered, 50)), 3),
                "p90": round(float(np.percentile(ordered, 90)), 3),
                "max": round(max(ordered), 3),
            },
        }

    report = {
        "schema_version": SCHEMA_VERSION,
        "kind": "batch",
        "seed": cfg.seed,
        "config": cfg.to_flat(),
        "n_frames": len(sources),
        "frames": frames,
        "failures": failures,
        "aggregate": aggregate,
        "timing": timing,
    }
    if outdir is not None:
        path = Path(outdir) / "batch_report.json"
        Path(outdir).mkdir(parents=True, exist_ok=True)
        _refuse_overwrite([path], force)
        path.write_text(json.dumps(report, indent=2) + "\n", encoding="ascii")
    return report
