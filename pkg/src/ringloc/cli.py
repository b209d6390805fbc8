"""Command line entry point: ``ringloc <subcommand> ...``.

Exit codes: 0 success (for ``locate``: pose accepted), 2 pose rejected or
frame failed, 1 I/O or input errors, 64 usage errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import detect, evaluation, fourier, io, pipeline, simulate
from .core import CameraIntrinsics, GeometryError, RingSpec

log = logging.getLogger("ringloc")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_REJECTED = 2
EXIT_USAGE = 64

LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- helpers ----------------------------------------------------------------


def _load_toml(path) -> dict:
    import tomli

    with Path(path).open("rb") as fh:
        return tomli.load(fh)


def _guard(paths, overwrite: bool) -> None:
    for p in paths:
        if Path(p).exists() and not overwrite:
            raise FileExistsError(f"{p} exists; pass --overwrite to replace it")


def _write_json(path, payload, overwrite: bool) -> None:
    _guard([path], overwrite)
    Path(path).write_text(json.dumps(payload, indent=2, default=io._json_default), encoding="utf-8")


def _pipeline_config(args, manifest: dict | None = None) -> pipeline.PipelineConfig:
    if args.config:
        cfg = pipeline.PipelineConfig.load(args.config)
    elif getattr(args, "intrinsics", None):
        cfg = pipeline.PipelineConfig(intrinsics=CameraIntrinsics.load(args.intrinsics))
    elif manifest is not None and "scene" in manifest and "intrinsics" in manifest["scene"]:
        cfg = pipeline.PipelineConfig(intrinsics=CameraIntrinsics.from_mapping(manifest["scene"]["intrinsics"]))
    else:
        raise UsageError("intrinsics are required: pass --config or --intrinsics")
    if getattr(args, "method", None):
        cfg = replace(cfg, method=args.method)
    if args.log_level == "debug" and cfg.debug_dir is None and getattr(args, "out", None):
        out = Path(args.out)
        cfg = replace(cfg, debug_dir=str((out if out.suffix == "" else out.parent) / "debug"))
    return cfg


def _summary(result: pipeline.FrameResult) -> str:
    if result.accepted:
        x, y, z = result.center
        return f"{result.frame_id}: {result.status} center = ({x:.9f}, {y:.9f}, {z:.9f}) mm"
    return f"{result.frame_id}: {result.status} at {result.stage}: {result.message}"


# --- subcommands ------------------------------------------------------------


def cmd_enhance(args) -> int:
    sigmas = {"sigma_narrow": 3.0, "sigma_wide": 15.0}
    if args.config:
        sigmas.update({k: float(v) for k, v in _load_toml(args.config).get("enhance", {}).items() if k in sigmas})
    for key in sigmas:
        if getattr(args, key) is not None:
            sigmas[key] = getattr(args, key)
    image = io.read_gray_png(args.image)
    outputs = [Path(args.out)]
    if args.dump_spectrum:
        d = Path(args.dump_spectrum)
        outputs += [d / "spectrum.png", d / "filter.png"]
    _guard(outputs, args.overwrite)
    io.write_gray_png(args.out, fourier.enhance(image, **sigmas))
    if args.dump_spectrum:
        Path(args.dump_spectrum).mkdir(parents=True, exist_ok=True)
        H, W = image.shape
        io.write_gray_png(outputs[1], fourier.log_magnitude_image(fourier.fft_forward(image)))
        gain = fourier.band_pass_filter(sigmas["sigma_narrow"], sigmas["sigma_wide"], W, H)
        io.write_gray_png(outputs[2], fourier.filter_display_image(gain))
    print(f"enhanced {args.image} -> {args.out}")
    return EXIT_OK


def cmd_detect(args) -> int:
    image = io.read_gray_png(args.image)
    H, W = image.shape
    if args.roi_in:
        boxes = detect.ingest_roi(Path(args.roi_in).read_text(encoding="utf-8"), W, H)
        for b in boxes:
            print(f"roi x={b.x} y={b.y} w={b.w} h={b.h} score={b.score:.9f}")
    else:
        cfg = pipeline.PipelineConfig.load(args.config) if args.config else None
        params = cfg.detector_params if cfg else detect.DetectorParams()
        found = detect.detect_rings(
            fourier.enhance(image) if args.enhanced else image,
            params,
            cfg.ring if cfg else None,
            cfg.intrinsics if cfg else None,
        )
        boxes = [b for b, _ in found]
        for b, fit in found:
            print(f"roi x={b.x} y={b.y} w={b.w} h={b.h} score={b.score:.9f} circle=({fit.xc:.9f}, {fit.yc:.9f}) r={fit.r:.9f} rms={fit.rms:.9f}")
    if args.out:
        _guard([args.out], args.overwrite)
        Path(args.out).write_text(detect.rois_to_json(boxes), encoding="utf-8")
    if not boxes:
        print("no ring candidates")
        return EXIT_REJECTED
    return EXIT_OK


def _locate_cloud(args) -> int:
    from .cloud import estimate_normals
    from .refine import locate_marker

    if args.gray or args.depth or args.roi:
        raise UsageError("--cloud replaces --gray/--depth/--roi")
    if args.method == "baseline":
        raise UsageError("the baseline method needs image inputs, not a cloud")
    cfg = pipeline.PipelineConfig.load(args.config) if args.config else None
    ring = cfg.ring if cfg else None
    _guard([args.out], args.overwrite)
    roi_cloud = io.read_ply(args.cloud)
    if not roi_cloud.has_normals:
        roi_cloud = estimate_normals(roi_cloud, cfg.normal_k if cfg else None)
    template = pipeline._template(ring or RingSpec(), cfg.template_spacing if cfg else 0.5, cfg.template_shell if cfg else False)
    pose = locate_marker(roi_cloud, template, ring, cfg.gates if cfg else None)
    doc = {"frame_id": Path(args.cloud).stem, "method": "refined", "status": "accepted" if pose.accepted else "rejected", **pose.to_dict()}
    _write_json(args.out, doc, True)
    if pose.accepted:
        x, y, z = pose.center
        print(f"{doc['frame_id']}: accepted center = ({x:.9f}, {y:.9f}, {z:.9f}) mm")
        return EXIT_OK
    print(f"{doc['frame_id']}: rejected ({pose.quality.value})")
    return EXIT_REJECTED


def cmd_locate(args) -> int:
    if args.cloud:
        return _locate_cloud(args)
    if not (args.gray and args.depth):
        raise UsageError("locate needs --gray and --depth, or --cloud")
    cfg = _pipeline_config(args)
    _guard([args.out], args.overwrite)
    gray = io.read_gray_png(args.gray)
    depth = io.read_depth_png(args.depth, args.depth_scale)
    rois = None
    if args.roi:
        rois = detect.ingest_roi(Path(args.roi).read_text(encoding="utf-8"), gray.shape[1], gray.shape[0])
    result = pipeline.run_frame(gray, depth, cfg, Path(args.gray).stem, rois)
    _write_json(args.out, result.to_dict(), True)
    print(_summary(result))
    return EXIT_OK if result.accepted else EXIT_REJECTED


def _manifest_items(manifest_path: Path) -> tuple[dict, list[pipeline.FrameInput]]:
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    base = manifest_path.parent
    items = []
    for i, frame in enumerate(manifest.get("frames", [])):
        try:
            fid, gray, depth = str(frame["id"]), frame["gray"], frame["depth"]
        except KeyError as exc:
            raise GeometryError(f"manifest frame {i} lacks {exc}") from exc
        roi = frame.get("roi")
        items.append(
            pipeline.FrameInput(
                fid,
                str(base / gray),
                str(base / depth),
                None if roi is None else str(base / roi),
            )
        )
    if not items:
        raise GeometryError("manifest lists no frames")
    for it in items:
        for p in (it.gray_path, it.depth_path, it.roi_path):
            if p is not None and not Path(p).exists():
                raise FileNotFoundError(f"manifest references missing file {p}")
    return manifest, items


def cmd_locate_batch(args) -> int:
    manifest_path = Path(args.manifest)
    manifest, items = _manifest_items(manifest_path)
    cfg = _pipeline_config(args, manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _guard([out / f"{it.frame_id}.json" for it in items] + [out / "results.json"], args.overwrite)
    extras = {str(f["id"]): {k: f[k] for k in ("axis", "value", "seed") if k in f} for f in manifest["frames"]}
    results = pipeline.run_batch(items, cfg, jobs=args.jobs, depth_scale=manifest.get("depth_scale"))
    docs = []
    for r in results:
        doc = r.to_dict()
        doc.update(extras.get(r.frame_id, {}))
        (out / f"{r.frame_id}.json").write_text(json.dumps(doc, indent=2), encoding="utf-8")
        docs.append(doc)
        print(_summary(r))
    (out / "results.json").write_text(json.dumps({"method": cfg.method, "frames": docs}, indent=2), encoding="utf-8")
    n_ok = sum(r.accepted for r in results)
    print(f"{n_ok}/{len(results)} frames accepted ({cfg.method})")
    return EXIT_OK


def cmd_simulate(args) -> int:
    data = _load_toml(args.config)
    scene = simulate.scene_from_mapping(data)
    sweep = dict(data.get("sweep", {}))
    axis = sweep.get("axis", "distance")
    if "values" in sweep:
        values = sweep["values"]
    elif axis == "noise":
        values = [scene.noise.z_sigma_at_400]
    else:
        values = [getattr(scene, axis)]
    runs = int(args.runs if args.runs is not None else sweep.get("runs_per_value", 20))
    out = Path(args.out)
    _guard([out / "manifest.json"], args.overwrite)
    manifest = simulate.sweep(scene, axis, values, runs, out, base_seed=sweep.get("base_seed"))
    print(f"rendered {len(manifest['frames'])} frames into {out}")
    return EXIT_OK


def _read_runs(path: Path):
    """Runs from a results directory, a results/report JSON file, or an XYZ CSV.

    Returns ``(report_or_None, centers, ids, extras)``.
    """
    if path.is_dir():
        path = path / "results.json"
    if path.suffix == ".csv":
        centers, ids = [], []
        with path.open(newline="", encoding="utf-8") as fh:
            for i, row in enumerate(csv.DictReader(fh)):
                vals = [row.get(k, "").strip() for k in ("x", "y", "z")]
                centers.append(None if any(v == "" for v in vals) else np.array([float(v) for v in vals]))
                ids.append(row.get("run") or str(i + 1))
        return None, centers, ids, [{} for _ in ids]
    data = json.loads(path.read_text(encoding="utf-8"))
    if isinstance(data, dict) and "n_runs" in data:
        return evaluation.RepeatabilityReport.from_dict(data), [], [], []
    frames = data["frames"] if isinstance(data, dict) else data
    centers, ids, extras = [], [], []
    for i, f in enumerate(frames):
        ok = f.get("status", "accepted") == "accepted" and f.get("center") is not None
        centers.append(np.asarray(f["center"], dtype=np.float64) if ok else None)
        ids.append(str(f.get("frame_id", i)))
        extras.append({k: f[k] for k in ("axis", "value") if k in f})
    return None, centers, ids, extras


def _report_for(path: Path, ddof: int = 1):
    report, centers, ids, extras = _read_runs(path)
    if report is None:
        report = evaluation.repeatability(centers, ids, ddof=ddof)
    return report, centers, ids, extras


def _plot(plot_dir: Path, report, baseline, extras, centers, ids, overwrite: bool) -> list[Path]:
    plot_dir.mkdir(parents=True, exist_ok=True)
    written = []
    csv_path = plot_dir / "repeatability.csv"
    _guard([csv_path, plot_dir / "repeatability.svg", plot_dir / "sweep.csv", plot_dir / "sweep.svg"], overwrite)
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "run", "x", "y", "z", "deviation"])
        for label, rep in (("refined", report), ("baseline", baseline)):
            if rep is None:
                continue
            for rid, c, d in zip(rep.run_ids, rep.centers, rep.deviations):
                w.writerow([label, rid, *(f"{v:.9f}" for v in c), f"{d:.9f}"])
    written.append(csv_path)

    # trend of the spread against the swept value, when the runs carry one
    by_value: dict[float, list] = {}
    for c, e in zip(centers, extras):
        if "value" in e:
            by_value.setdefault(float(e["value"]), []).append(c)
    trend = []
    for value in sorted(by_value):
        runs = by_value[value]
        try:
            rep = evaluation.repeatability(runs)
        except GeometryError:
            continue
        trend.append((value, rep))
    if len(trend) > 1:
        sweep_csv = plot_dir / "sweep.csv"
        with sweep_csv.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["value", "runs", "failures", "std_x", "std_y", "std_z", "mean_deviation"])
            for value, rep in trend:
                w.writerow([f"{value:.9f}", rep.n_runs, rep.n_failures, *(f"{s:.9f}" for s in rep.std), f"{rep.mean_deviation:.9f}"])
        written.append(sweep_csv)

    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib is not installed; wrote CSV only")
        return written

    fig, ax = plt.subplots(figsize=(5, 5))
    for label, rep, marker in (("refined", report, "o"), ("baseline", baseline, "x")):
        if rep is None:
            continue
        pts = np.asarray(rep.centers) - np.asarray(rep.mean)
        ax.scatter(pts[:, 0], pts[:, 1], marker=marker, label=f"{label} (mean dev {rep.mean_deviation:.3f} mm)")
    ax.set_xlabel("x - mean (mm)")
    ax.set_ylabel("y - mean (mm)")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(fontsize="small")
    fig.tight_layout()
    svg = plot_dir / "repeatability.svg"
    fig.savefig(svg)
    plt.close(fig)
    written.append(svg)

    if len(trend) > 1:
        fig, ax = plt.subplots(figsize=(6, 4))
        xs = [v for v, _ in trend]
        for i, axis_name in enumerate("xyz"):
            ax.plot(xs, [rep.std[i] for _, rep in trend], marker="o", label=f"std {axis_name}")
        ax.plot(xs, [rep.mean_deviation for _, rep in trend], marker="s", label="mean deviation")
        ax.set_xlabel(extras[0].get("axis", "value") if extras else "value")
        ax.set_ylabel("mm")
        ax.legend(fontsize="small")
        fig.tight_layout()
        svg = plot_dir / "sweep.svg"
        fig.savefig(svg)
        plt.close(fig)
        written.append(svg)
    return written


def cmd_evaluate(args) -> int:
    in_path = Path(args.inp)
    ddof = 0 if args.population_std else 1
    report, centers, ids, extras = _report_for(in_path, ddof)
    baseline = _report_for(Path(args.baseline), ddof)[0] if args.baseline else None

    out = Path(args.out) if args.out else (in_path if in_path.is_dir() else None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        targets = [out / "report.json", out / "report.txt"]
        if baseline is not None:
            targets += [out / "baseline_report.json", out / "comparison.json"]
        _guard(targets, args.overwrite)
        evaluation.save_report(out / "report.json", report)
        (out / "report.txt").write_text(evaluation.format_table(report), encoding="utf-8")
        if baseline is not None:
            evaluation.save_report(out / "baseline_report.json", baseline)
            (out / "comparison.json").write_text(json.dumps(evaluation.compare(baseline, report), indent=2), encoding="utf-8")

    print(evaluation.format_table(report), end="")
    if baseline is not None:
        cmp = evaluation.compare(baseline, report)
        print(f"baseline mean deviation {baseline.mean_deviation:.9f} mm, failures {baseline.n_failures}/{baseline.n_runs}")
        print(f"mean deviation ratio (baseline / refined): {cmp['mean_deviation_ratio']:.9f}")
    if args.plot:
        for p in _plot(Path(args.plot), report, baseline, extras, centers, ids, args.overwrite):
            print(f"wrote {p}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ringloc", description="Ring fiducial localization from gray + depth frames.")
    parser.add_argument("--version", action="version", version=f"ringloc {__version__}")
    parser.add_argument("--log-level", choices=sorted(LOG_LEVELS), default="quiet", help="quiet, info, or debug (debug also dumps intermediate artifacts)")
    parser.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        # accept the global flags after the subcommand too
        p.add_argument("--log-level", choices=sorted(LOG_LEVELS), default=argparse.SUPPRESS)
        p.add_argument("--overwrite", action="store_true", default=argparse.SUPPRESS)

    p = sub.add_parser("enhance", help="Fourier band-pass enhancement of a gray image")
    common(p)
    p.add_argument("--in", "--image", dest="image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--sigma-narrow", type=float)
    p.add_argument("--sigma-wide", type=float)
    p.add_argument("--dump-spectrum", metavar="DIR", help="also write the log-magnitude spectrum and filter images")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("detect", help="classical ring detection or ROI ingestion")
    common(p)
    p.add_argument("--in", "--image", dest="image", required=True)
    p.add_argument("--config")
    p.add_argument("--roi-in", help="ingest an external ROI document instead of detecting")
    p.add_argument("--enhanced", action="store_true", help="detect on the enhanced image")
    p.add_argument("--out", help="write ROI boxes as JSON")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("locate", help="locate the marker in one frame pair")
    common(p)
    p.add_argument("--gray")
    p.add_argument("--depth")
    p.add_argument("--cloud", help="ROI point cloud (PLY) to register directly, instead of --gray/--depth")
    p.add_argument("--config")
    p.add_argument("--intrinsics")
    p.add_argument("--roi")
    p.add_argument("--method", choices=["baseline", "refined"])
    p.add_argument("--depth-scale", type=float, default=io.DEPTH_SCALE)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_locate)

    p = sub.add_parser("locate-batch", help="locate the marker in every frame of a manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--intrinsics")
    p.add_argument("--method", choices=["baseline", "refined"])
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_locate_batch)

    p = sub.add_parser("simulate", help="render a seeded synthetic sweep")
    common(p)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--runs", type=int, help="runs per swept value (overrides the config)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="repeatability report, optional baseline comparison and plots")
    common(p)
    p.add_argument("--in", dest="inp", required=True, help="results directory, results/report JSON, or x,y,z CSV")
    p.add_argument("--baseline")
    p.add_argument("--out", help="report directory (defaults to --in when it is a directory)")
    p.add_argument("--plot", metavar="DIR", help="write CSV and SVG plots")
    p.add_argument("--population-std", action="store_true", help="divide by n instead of n - 1 in the per-axis std")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=LOG_LEVELS[args.log_level], format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ringloc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, GeometryError, ValueError, KeyError, TypeError) as exc:
        print(f"ringloc: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
