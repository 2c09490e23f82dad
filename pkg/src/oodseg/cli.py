"""Command-line entry point.

Subcommands mirror the pipeline stages: tile, aggregate, fuse, eval,
synth, pipeline, report. Exit codes: 0 success, 1 structured error from
any stage, 2 usage error. Outputs are written atomically (temp + rename)
so a crashed run never leaves a partial CMAP or report behind.

The external-inference contract: `tile` writes patch PNGs plus a
manifest; any program (see also the reference bridge) writes one CMAP
per patch named <patch_id>.cmap next to the manifest; `aggregate`
verifies completeness and combines. `pipeline` closes that loop with a
built-in dependency-free mock model for end-to-end runs without any
network.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .aggregate import (
    ScaleSchedule,
    combine_scales,
    load_schedule,
)
from .errors import MalformedReport, OodsegError
from .fusion import entropy_map, fuse, resolve_road_index, road_uncertainty
from .metrics import EvalReport, evaluate_dataset
from .raster_io import (
    _atomic_write,
    read_cmap,
    read_image,
    read_label_mask,
    read_manifest,
    read_probability_volume,
    write_cmap,
    write_image,
    write_label_mask,
    write_manifest,
    write_probability_volume,
)
from .synth import (
    DetectionBand,
    DetectionProfile,
    SceneConfig,
    SimulatedModel,
    generate_scene,
    simulate_probs,
)
from .tiling import ResizePolicy, make_scheme, make_uniform_grid, reassemble, restore_original, slice_image

_POLICIES = {
    "reject": ResizePolicy.REJECT,
    "nearest": ResizePolicy.RESIZE_NEAREST,
    "bilinear": ResizePolicy.RESIZE_BILINEAR,
}


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("OODSEG_THREADS", "1")))
    except ValueError:
        return 1


def _load_json_config(path: str | Path) -> dict:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise MalformedReport(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedReport(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise MalformedReport(f"config {path} must be a JSON object")
    return payload


def mock_brightness(pixels: np.ndarray) -> np.ndarray:
    """Dependency-free stand-in model: confidence = normalized brightness."""
    arr = np.asarray(pixels, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return (arr / np.float32(255.0)).astype(np.float32)


# --- subcommand implementations -------------------------------------------------


def _tiles_for(args, height: int, width: int):
    if args.grid is not None:
        return make_uniform_grid(height, width, args.grid, _POLICIES[args.policy])
    return make_scheme(args.scheme, height, width)


def cmd_tile(args) -> int:
    image = read_image(args.image)
    image_id = args.image_id or Path(args.image).stem
    tiles = _tiles_for(args, image.shape[0], image.shape[1])
    patches, manifest = slice_image(image, tiles, image_id=image_id)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for patch, entry in zip(patches, manifest.entries):
        write_image(patch, out_dir / entry.path)
    write_manifest(manifest, out_dir / "patches.manifest")
    print(f"wrote {len(patches)} patches + manifest to {out_dir}")
    return 0


def _reassemble_source_dir(source_dir: Path) -> np.ndarray:
    manifest = read_manifest(source_dir / "patches.manifest")
    missing = [
        e.patch_id
        for e in manifest.entries
        if not (source_dir / f"{e.patch_id}.cmap").exists()
    ]
    if missing:
        raise MalformedReport(
            f"{source_dir}: missing CMAPs for {len(missing)} patches "
            f"(first: {missing[0]})"
        )
    patches = [read_cmap(source_dir / f"{e.patch_id}.cmap") for e in manifest.entries]
    return restore_original(reassemble(patches, manifest), manifest)


def cmd_aggregate(args) -> int:
    schedule = load_schedule(args.schedule)
    maps_dir = Path(args.maps)
    maps = [_reassemble_source_dir(maps_dir / src.tag) for src in schedule.sources]
    combined = combine_scales(maps, schedule.weights)
    write_cmap(combined, args.out)
    print(f"combined {len(maps)} scales -> {args.out}")
    return 0


def _uncertainty_map(volume, kind: str, road_index, road_name: str) -> np.ndarray:
    if kind == "entropy":
        return entropy_map(volume)
    if road_index is None:
        road_index = resolve_road_index(volume, road_name)
    return road_uncertainty(volume, road_index)


def cmd_fuse(args) -> int:
    conf = read_cmap(args.conf)
    volume = read_probability_volume(args.probs)
    unc = _uncertainty_map(volume, args.kind, args.road_index, args.road_name)
    write_cmap(fuse(conf, unc), args.out)
    print(f"fused {args.conf} with {args.kind} -> {args.out}")
    return 0


def _paired_files(scores_dir: Path, gt_dir: Path) -> list[tuple[str, Path, Path]]:
    pairs = []
    for score_path in sorted(scores_dir.glob("*.cmap")):
        gt_path = gt_dir / f"{score_path.stem}.png"
        if not gt_path.exists():
            raise MalformedReport(f"no ground truth {gt_path} for {score_path}")
        pairs.append((score_path.stem, score_path, gt_path))
    if not pairs:
        raise MalformedReport(f"no .cmap files under {scores_dir}")
    return pairs


def cmd_eval(args) -> int:
    files = _paired_files(Path(args.scores), Path(args.gt))
    pairs = [(read_cmap(s), read_label_mask(g)) for _, s, g in files]
    report = evaluate_dataset(
        pairs,
        binarize_at=args.binarize,
        connectivity=args.connectivity,
        threads=args.threads,
    )
    _atomic_write(Path(args.out), report.to_json().encode("utf-8"))
    if args.csv:
        _atomic_write(Path(args.csv), report.per_threshold_csv().encode("utf-8"))
    print(
        f"evaluated {report.n_images} images: AuPRC={report.auprc:.4f} "
        f"FPR95={report.fpr95:.4f} sIoU={report.mean_siou:.1f}% "
        f"PPV={report.mean_ppv:.1f}% F1={report.mean_f1:.1f}%"
    )
    return 0


def _scene_config_from_args(args) -> SceneConfig:
    if args.config:
        cfg = SceneConfig.from_json_dict(_load_json_config(args.config))
        if args.seed is not None:
            cfg = SceneConfig.from_json_dict({**cfg.to_json_dict(), "seed": args.seed})
        return cfg
    per_grid = {}
    for spec in args.band_for or []:
        name, _, band = spec.partition("=")
        lo, _, hi = band.partition(":")
        per_grid[int(name)] = DetectionBand(float(lo), float(hi))
    lo, _, hi = args.band.partition(":")
    profile = DetectionProfile(default=DetectionBand(float(lo), float(hi)), per_grid=per_grid)
    return SceneConfig(
        seed=args.seed if args.seed is not None else 0,
        height=args.height,
        width=args.width,
        n_objects=args.objects,
        size_range=(args.size_min, args.size_max),
        profile=profile,
        noise_sigma=args.noise_sigma,
        num_classes=args.classes,
        ignore_border=args.ignore_border,
    )


def cmd_synth(args) -> int:
    cfg = _scene_config_from_args(args)
    grids = [int(n) for n in args.grids.split(",") if n]
    out = Path(args.out_dir)
    for sub in ("masks", "scores", "scales"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    weights = [1.0 / len(grids)] * len(grids)
    index_lines = []
    for i in range(args.scenes):
        scene_cfg = SceneConfig.from_json_dict({**cfg.to_json_dict(), "seed": cfg.seed + i})
        scene = generate_scene(scene_cfg)
        model = SimulatedModel(scene, scene_cfg)
        scene_id = f"scene_{i:04d}"
        write_label_mask(scene.gt, out / "masks" / f"{scene_id}.png")

        scale_maps = []
        for n in grids:
            tiles = make_uniform_grid(scene_cfg.height, scene_cfg.width, n)
            scale_map = model.map_for(tiles)
            write_cmap(scale_map, out / "scales" / f"{scene_id}_grid{n}.cmap")
            scale_maps.append(scale_map)
        combined = combine_scales(scale_maps, weights)

        if args.fuse != "none":
            volume = simulate_probs(scene, scene_cfg)
            unc = _uncertainty_map(volume, args.fuse, scene_cfg.road_class_index, "road")
            combined = fuse(combined, unc)
        if args.emit_probs:
            write_probability_volume(
                simulate_probs(scene, scene_cfg), out / "probs" / scene_id
            )
        write_cmap(combined, out / "scores" / f"{scene_id}.cmap")
        index_lines.append(
            f"{scene_id}\tmasks/{scene_id}.png\tscores/{scene_id}.cmap"
        )

    _atomic_write(out / "scenes.tsv", ("\n".join(index_lines) + "\n").encode("utf-8"))
    _atomic_write(
        out / "config.json",
        (json.dumps(cfg.to_json_dict(), indent=2) + "\n").encode("utf-8"),
    )
    print(f"wrote {args.scenes} scenes to {out}")
    return 0


def _pipeline_image(
    image_path: Path,
    schedule: ScaleSchedule,
    work_root: Path,
    policy: ResizePolicy,
) -> np.ndarray:
    """tile -> mock inference -> per-patch CMAPs -> aggregate, for one image."""
    image = read_image(image_path)
    image_id = image_path.stem
    maps = []
    for src in schedule.sources:
        tiles = src.tiles(image.shape[0], image.shape[1], policy)
        patches, manifest = slice_image(image, tiles, image_id=image_id)
        source_dir = work_root / image_id / src.tag
        source_dir.mkdir(parents=True, exist_ok=True)
        for patch, entry in zip(patches, manifest.entries):
            write_image(patch, source_dir / entry.path)
            write_cmap(mock_brightness(patch), source_dir / f"{entry.patch_id}.cmap")
        write_manifest(manifest, source_dir / "patches.manifest")
        maps.append(_reassemble_source_dir(source_dir))
    return combine_scales(maps, schedule.weights)


def cmd_pipeline(args) -> int:
    config = _load_json_config(args.config)
    try:
        images_dir = Path(config["images_dir"])
        gt_dir = Path(config["gt_dir"])
        schedule_path = config["schedule"]
        out_dir = Path(config["out_dir"])
    except KeyError as exc:
        raise MalformedReport(f"pipeline config missing key {exc}") from exc
    model = config.get("model", "mock-brightness")
    if model != "mock-brightness":
        raise MalformedReport(f"unknown pipeline model {model!r}")
    fusion_kind = config.get("fusion", "none")
    policy = _POLICIES[config.get("policy", "reject")]
    binarize = float(config.get("binarize", 0.5))
    connectivity = int(config.get("connectivity", 8))
    threads = int(config.get("threads", _default_threads()))

    schedule = load_schedule(schedule_path)
    scores_dir = out_dir / "scores"
    scores_dir.mkdir(parents=True, exist_ok=True)
    work_root = out_dir / "work"

    for image_path in sorted(images_dir.glob("*.png")):
        combined = _pipeline_image(image_path, schedule, work_root, policy)
        if fusion_kind != "none":
            volume = read_probability_volume(Path(config["probs_root"]) / image_path.stem)
            unc = _uncertainty_map(volume, fusion_kind, config.get("road_index"), "road")
            combined = fuse(combined, unc)
        write_cmap(combined, scores_dir / f"{image_path.stem}.cmap")

    files = _paired_files(scores_dir, gt_dir)
    pairs = [(read_cmap(s), read_label_mask(g)) for _, s, g in files]
    report = evaluate_dataset(
        pairs, binarize_at=binarize, connectivity=connectivity, threads=threads
    )
    _atomic_write(out_dir / "report.json", report.to_json().encode("utf-8"))
    print(f"pipeline report -> {out_dir / 'report.json'}")
    return 0


_REPORT_COLUMNS = (
    ("AuPRC", "auprc", max),
    ("FPR95", "fpr95", min),
    ("sIoU", "mean_siou", max),
    ("PPV", "mean_ppv", max),
    ("F1", "mean_f1", max),
)


def cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise MalformedReport(f"cannot read {path}: {exc}") from exc
        reports.append((Path(path).stem, EvalReport.from_json(text)))

    best = {
        key: pick(getattr(r, key) for _, r in reports)
        for _, key, pick in _REPORT_COLUMNS
    }
    name_width = max(len(name) for name, _ in reports)
    header = "name".ljust(name_width) + "  " + "  ".join(
        f"{title:>9}" for title, _, _ in _REPORT_COLUMNS
    )
    lines = [header]
    csv_lines = ["name," + ",".join(title for title, _, _ in _REPORT_COLUMNS)]
    for name, report in reports:
        cells = []
        csv_cells = [name]
        for title, key, _ in _REPORT_COLUMNS:
            value = getattr(report, key)
            mark = "*" if value == best[key] else " "
            cells.append(f"{value:8.3f}{mark}")
            csv_cells.append(repr(value))
        lines.append(name.ljust(name_width) + "  " + "  ".join(cells))
        csv_lines.append(",".join(csv_cells))

    table = "\n".join(lines)
    print(table)
    if args.csv:
        _atomic_write(Path(args.csv), ("\n".join(csv_lines) + "\n").encode("utf-8"))
    return 0


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodseg",
        description="Multi-scale foreground-background confidence for OOD segmentation.",
    )
    parser.add_argument("--version", action="version", version=f"oodseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tile", help="slice an image into patches + manifest")
    p.add_argument("--image", required=True)
    p.add_argument("--image-id", default=None)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--grid", type=int, help="number of patches N (perfect square)")
    group.add_argument("--scheme", choices=["A", "B", "C"], help="mixed-size layout")
    p.add_argument("--policy", choices=sorted(_POLICIES), default="reject")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("aggregate", help="combine per-scale patch CMAPs per a schedule")
    p.add_argument("--schedule", required=True)
    p.add_argument("--maps", required=True, help="dir with <tag>/patches.manifest + CMAPs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("fuse", help="multiply a confidence map with an uncertainty map")
    p.add_argument("--conf", required=True)
    p.add_argument("--probs", required=True, help="probability-volume directory")
    p.add_argument("--kind", choices=["entropy", "road"], required=True)
    p.add_argument("--road-index", type=int, default=None)
    p.add_argument("--road-name", default="road")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="run the full evaluation protocol")
    p.add_argument("--scores", required=True, help="dir of <id>.cmap score maps")
    p.add_argument("--gt", required=True, help="dir of <id>.png label masks")
    p.add_argument("--binarize", type=float, default=0.5)
    p.add_argument("--connectivity", type=int, choices=[4, 8], default=8)
    p.add_argument("--threads", type=int, default=_default_threads())
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None, help="also write the per-threshold table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate synthetic benchmark scenes")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--config", default=None, help="JSON file mirroring the scene config")
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--objects", type=int, default=3)
    p.add_argument("--size-min", type=int, default=6)
    p.add_argument("--size-max", type=int, default=20)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--classes", type=int, default=19)
    p.add_argument("--ignore-border", type=int, default=0)
    p.add_argument("--band", default="0.001:1.0", help="default detection band lo:hi")
    p.add_argument(
        "--band-for",
        action="append",
        metavar="N=lo:hi",
        help="per-grid detection band, repeatable",
    )
    p.add_argument("--grids", default="16,64", help="comma-separated patch counts")
    p.add_argument("--fuse", choices=["none", "entropy", "road"], default="none")
    p.add_argument("--emit-probs", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pipeline", help="tile -> mock inference -> aggregate -> eval")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("report", help="compare evaluation reports side by side")
    p.add_argument("reports", nargs="+")
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except OodsegError as exc:
        print(f"oodseg: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
