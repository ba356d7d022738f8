"""Command-line entry point: ``roistereo simulate|run|bench|calibrate``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import rtsm
from .bench import BenchConfig, run_bench
from .errors import ConfigError, DegenerateLabels
from .masm import MATCH_MODES
from .pipeline import FUSIONS, STRATEGIES, RunConfig, RunResult, calibrate_from_frames, run_frames
from .scenesim import ScenarioConfig, generate_scenario, load_scenario, save_scenario

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_SCENARIO = 3
EXIT_LABELS = 4

OBJECT_CSV_FIELDS = [
    "frame", "index", "object_id", "camera", "gt_x", "gt_y", "gt_z", "gt_depth",
    "pred_x", "pred_y", "pred_z", "translation_error", "depth_error", "mono_error",
    "stereo_status", "stereo_depth", "bin_width", "confidence",
    "assigned_prev", "oracle_prev", "matched_ok",
]


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level must be a JSON object")
    return doc


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(round(float(x), 9))


def write_object_csv(result: RunResult, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(OBJECT_CSV_FIELDS)
        for r in result.records:
            writer.writerow([
                r.frame, r.index, r.object_id, r.camera, *(_fmt(x) for x in r.gt), _fmt(r.gt_depth),
                *(_fmt(x) for x in r.fused), _fmt(np.linalg.norm(r.fused - r.gt)),
                _fmt(abs(r.fused_depth - r.gt_depth)), _fmt(np.linalg.norm(r.mono - r.gt)),
                r.stereo_status, _fmt(r.stereo_depth), _fmt(r.bin_width), _fmt(r.confidence),
                "" if r.assigned_prev is None else r.assigned_prev,
                "" if r.oracle_prev is None else r.oracle_prev,
                "" if r.matched_ok is None else int(r.matched_ok),
            ])


def dump_metrics(metrics: dict) -> str:
    return json.dumps(metrics, indent=2) + "\n"


def _run_config(args) -> RunConfig:
    doc = _read_json(args.config)
    for name in ("strategy", "fusion", "matching", "region"):
        value = getattr(args, name, None)
        if value is not None:
            doc[name] = value
    if args.seed is not None:
        doc["seed"] = args.seed
    return RunConfig.from_dict(doc)


def _load(path: str):
    try:
        return load_scenario(path)
    except ConfigError as exc:
        raise CommandError(EXIT_SCENARIO, f"malformed scenario {path}: {exc}") from exc
    except (OSError, ValueError, KeyError, TypeError, IndexError) as exc:
        raise CommandError(EXIT_SCENARIO, f"malformed scenario {path}: {type(exc).__name__}: {exc}") from exc


def cmd_simulate(args) -> int:
    doc = _read_json(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = ScenarioConfig.from_dict(doc)
    frames = generate_scenario(cfg)
    path = save_scenario(frames, cfg, args.out_dir)
    objects = {o.object_id for f in frames for o in f.objects}
    boxes = sum(len(f.detections) for f in frames)
    print(f"wrote {path}: {len(frames)} frames, {len(objects)} objects, {boxes} boxes")
    return 0


def cmd_run(args) -> int:
    run_cfg = _run_config(args)
    _, frames = _load(args.scenario)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = run_frames(frames, run_cfg, debug_dir=out / "debug" if run_cfg.debug_dumps else None)
    except (OSError, ValueError) as exc:
        raise CommandError(EXIT_SCENARIO, f"malformed scenario {args.scenario}: {exc}") from exc
    metrics = result.metrics()
    (out / "metrics.json").write_text(dump_metrics(metrics))
    write_object_csv(result, out / "objects.csv")
    agg = metrics["aggregate"]
    print(
        f"{agg['num_detections']} detections over {agg['num_frames']} frames; "
        f"median translation error {agg['translation']['median']} m; "
        f"association accuracy {agg['association_accuracy']}; "
        f"cost volumes built {rtsm.calls['build_cost_volume']}"
    )
    return 0


def cmd_bench(args) -> int:
    doc = _read_json(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    known = set(BenchConfig.__dataclass_fields__)
    for key in doc:
        if key not in known:
            raise ConfigError(key, "unknown bench option")
    report = run_bench(BenchConfig(**doc))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(json.dumps(report, indent=2) + "\n")
    el, tm = report["elements"], report["timing"]
    print(f"elements dense/sparse = {el['ratio']} ({el['ratio_float']:.1f}x); "
          f"wall time {tm['dense_seconds_extrapolated']:.3f}s / {tm['sparse_seconds']:.4f}s "
          f"= {tm['ratio']:.1f}x")
    return 0


def cmd_calibrate(args) -> int:
    doc = _read_json(args.config)
    lr = float(doc.pop("gate_lr", 0.5))
    steps = int(doc.pop("gate_steps", 2000))
    if steps < 0:
        raise ConfigError("gate_steps", "must be >= 0")
    if args.seed is not None:
        doc["seed"] = args.seed
    run_cfg = RunConfig.from_dict(doc)
    _, frames = _load(args.scenario)
    try:
        cal = calibrate_from_frames(frames, run_cfg, lr=lr, steps=steps)
    except DegenerateLabels as exc:
        raise CommandError(EXIT_LABELS, f"cannot calibrate: {exc}") from exc
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cal.params.save(out / "gate_params.json")
    with open(out / "loss_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(cal.losses):
            writer.writerow([i, repr(float(loss))])
    summary = cal.summary()
    (out / "calibration.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"calibrated on {summary['train_samples']} samples, "
          f"held-out accuracy {summary['heldout_accuracy']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roistereo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_scenario=False):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out-dir", default=".", help="output directory")
        if needs_scenario:
            p.add_argument("--scenario", required=True, help="scenario.json written by simulate")

    common(sub.add_parser("simulate", help="generate a synthetic scenario"))
    run = sub.add_parser("run", help="run query generation and evaluate it")
    common(run, needs_scenario=True)
    run.add_argument("--strategy", choices=STRATEGIES)
    run.add_argument("--fusion", choices=FUSIONS)
    run.add_argument("--matching", choices=MATCH_MODES)
    run.add_argument("--region", choices=rtsm.REGIONS)
    common(sub.add_parser("bench", help="sparse vs dense cost-volume benchmark"))
    common(sub.add_parser("calibrate", help="fit the confidence gate"), needs_scenario=True)
    return parser


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "bench": cmd_bench, "calibrate": cmd_calibrate}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error in field '{exc.field}': {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CommandError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
