"""Command line entry point: simulate, detect, evaluate, sweep."""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import benchmark as bm
from .pipeline import ConfigError, Detector, PipelineConfig, load_config
from .scan import ScanFormatError, read_labels, read_scan, write_labels, write_scan
from .simulate import (
    SCENES, SceneFormatError, hdl64_like_rig, platform_trajectory, read_groundtruth,
    read_scene, simulate, write_groundtruth, write_scene,
)
from .trajectory import TrajectoryError, read_trajectory, write_trajectory

log = logging.getLogger("dynlidar")

SCAN_GLOB = "scan_*"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _scan_name(n):
    return f"scan_{n:06d}"


def _existing(path, what):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _scan_files(directory):
    d = _existing(directory, "scan directory")
    files = sorted(f for f in d.glob(SCAN_GLOB) if f.suffix in (".bin", ".csv"))
    if not files:
        raise DataError(f"no scan files in {d}")
    return files


def _iter_scans(files):
    for f in files:
        yield read_scan(f)


def _load_cfg(args):
    cfg = load_config(_existing(args.config, "config file")) if args.config else PipelineConfig()
    if getattr(args, "workers", None) is not None:
        cfg = cfg.replace(workers=args.workers)
    return cfg


def _load_truths(directory):
    d = _existing(directory, "groundtruth directory")
    return {int(f.stem.split("_")[1]): f for f in sorted(d.glob("scan_*.txt"))}


# --- subcommands ---------------------------------------------------------------

def cmd_simulate(args):
    if args.scene in SCENES:
        scene = SCENES[args.scene]()
    else:
        scene = read_scene(_existing(args.scene, "scene file"))
    rig = hdl64_like_rig()
    traj = platform_trajectory(rig, args.n_scans, speed=args.speed, yaw_rate=args.yaw_rate)
    out = Path(args.out)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(parents=True, exist_ok=True)
    write_trajectory(traj, out / "trajectory.txt")
    write_scene(scene, out / "scene.txt")
    for n in range(args.n_scans):
        scans, truths = simulate(scene, rig, traj, args.noise, args.seed, 1, n)
        write_scan(scans[0], out / "scans" / (_scan_name(n) + args.format))
        write_groundtruth(truths[0], out / "truth" / (_scan_name(n) + ".txt"))
    print(f"wrote {args.n_scans} scans to {out}")
    return 0


def _run_detection(files, traj, cfg, out=None):
    det = Detector(traj, cfg)
    results = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for res in det.run(_iter_scans(files)):
            if out is not None:
                write_labels(res.labels, out / (_scan_name(res.scan_index) + ".txt"))
            results.append(res)
    return results


def _manifest(cfg, results):
    lines = ["# config"]
    lines += cfg.to_text().splitlines()
    lines.append("# scan " + " ".join(f"{k}_ms" for k in
                                      ("prepare", "compare", "freespace", "filter", "segment"))
                 + " " + " ".join(f"n_{s}" for s in ("compare", "freespace", "filter",
                                                     "cluster", "grow")))
    for r in results:
        t = [f"{r.timings_ms[k]:.1f}" for k in ("prepare", "compare", "freespace", "filter",
                                                 "segment")]
        c = [str(r.counts[s]) for s in ("compare", "freespace", "filter", "cluster", "grow")]
        lines.append(" ".join([str(r.scan_index), *t, *c]))
    return "\n".join(lines) + "\n"


def cmd_detect(args):
    files = _scan_files(args.scans)
    traj = read_trajectory(_existing(args.traj, "trajectory file"))
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = _run_detection(files, traj, cfg, out)
    (out / "manifest.txt").write_text(_manifest(cfg, results), encoding="utf-8")
    if args.timings:
        (out / "timings.txt").write_text(
            "".join(f"{r.scan_index} {sum(r.timings_ms.values()):.1f}\n" for r in results),
            encoding="utf-8")
    print(f"labelled {len(results)} scans into {out}")
    return 0


def _pairs(pred_dir, truth_dir):
    pred = _existing(pred_dir, "prediction directory")
    truths = _load_truths(truth_dir)
    pairs = []
    for f in sorted(pred.glob("scan_*.txt")):
        n = int(f.stem.split("_")[1])
        if n not in truths:
            raise DataError(f"no groundtruth for {f.name}")
        pairs.append((n, read_labels(f), read_groundtruth(truths[n])))
    if not pairs:
        raise DataError(f"no label files in {pred}")
    return pairs


def cmd_evaluate(args):
    pairs = _pairs(args.pred, args.truth)
    report = bm.evaluate([p for _, p, _ in pairs], [t for _, _, t in pairs])
    rows = [["P_t", report.p_total], ["R_t", report.r_total], ["P_a", report.p_average],
            ["R_a", report.r_average], ["N_p", report.n_p], ["N_r", report.n_r]]
    text = bm.to_csv(["metric", "value"], rows)
    if args.range_limits:
        if not args.scans:
            raise UsageError("--range-limits needs --scans")
        scans = {s.scan_index: s for s in _iter_scans(_scan_files(args.scans))}
        missing = [n for n, _, _ in pairs if n not in scans]
        if missing:
            raise DataError(f"no scan file for scan {missing[0]}")
        ranges = [np.where(scans[n].valid, scans[n].ranges, np.inf) for n, _, _ in pairs]
        rows = bm.recall_vs_range([p for _, p, _ in pairs], [t for _, _, t in pairs], ranges,
                                  bm.parse_values(args.range_limits))
        text += "\n" + bm.to_csv(bm.RANGE_HEADER, rows)
    _emit(text, args.out)
    return 0


def cmd_sweep(args):
    cfg = _load_cfg(args)
    values = bm.parse_values(args.values)
    if args.param not in cfg.__dataclass_fields__:
        raise UsageError(f"unknown sweep parameter {args.param!r}")
    files = _scan_files(args.scans)
    traj = read_trajectory(_existing(args.traj, "trajectory file"))
    truths = _load_truths(args.truth)

    def run(c):
        results = _run_detection(files, traj, c)
        missing = [r.scan_index for r in results if r.scan_index not in truths]
        if missing:
            raise DataError(f"no groundtruth for scan {missing[0]}")
        return ([r.labels for r in results],
                [read_groundtruth(truths[r.scan_index]) for r in results])

    rows = bm.sweep(run, cfg, args.param, values)
    _emit(bm.to_csv([args.param, *bm.SWEEP_HEADER[1:]], rows), args.out)
    return 0


def _emit(text, out):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# --- argument parsing --------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="dynlidar",
                                description="Dynamic point detection in spinning lidar scans.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic log with groundtruth")
    s.add_argument("--scene", required=True,
                   help=f"scene file or one of: {', '.join(SCENES)}")
    s.add_argument("--n-scans", type=int, required=True)
    s.add_argument("--noise", type=float, default=0.0, help="range noise sigma (m)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--speed", type=float, default=10.0, help="platform speed (m/s)")
    s.add_argument("--yaw-rate", type=float, default=0.0)
    s.add_argument("--format", choices=(".bin", ".csv"), default=".bin")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("detect", help="label Dynamic points in a log")
    d.add_argument("--scans", required=True)
    d.add_argument("--traj", required=True)
    d.add_argument("--config")
    d.add_argument("--workers", type=int)
    d.add_argument("--timings", action="store_true", help="also write timings.txt")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("evaluate", help="precision/recall of labels against groundtruth")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--scans", help="scan directory (needed for --range-limits)")
    e.add_argument("--range-limits", help="e.g. 10:10:120 or 30,60,120")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    w = sub.add_parser("sweep", help="rerun detection over values of one config key")
    w.add_argument("--scans", required=True)
    w.add_argument("--traj", required=True)
    w.add_argument("--truth", required=True)
    w.add_argument("--param", required=True)
    w.add_argument("--values", required=True, help="start:step:stop or comma list")
    w.add_argument("--config")
    w.add_argument("--workers", type=int)
    w.add_argument("--out")
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "n_scans", 1) < 1:
            raise UsageError("--n-scans must be positive")
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dynlidar: error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"dynlidar: config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ScanFormatError, SceneFormatError, TrajectoryError, ValueError,
            LookupError, OSError) as exc:
        print(f"dynlidar: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
