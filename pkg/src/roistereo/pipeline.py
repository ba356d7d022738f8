"""Frame-by-frame query generation over a simulated scenario.

For every frame the current RoIs are matched against last frame's queries,
a per-RoI plane sweep refines depth around the matched prior, and the stereo
and monocular points are fused. The fused points become the next frame's
history.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import rtsm
from .errors import ConfigError, RoIStereoError
from .featuregrid import RoIFeature, appearance_embedding, mono_reference_point, roi_align
from .gating import (
    GATE_EPS,
    GateDescriptor,
    GateParams,
    calibrate_gate,
    describe_row,
    fuse_pipeline,
    gate_confidence,
    init_gate_params,
)
from .geometry import RigidTransform, compose_ego_transform, equivalent_intrinsics
from .gridio import write_grid
from .masm import (
    MATCH_MODES,
    HistoricalQuery,
    MatchConfig,
    MotionContext,
    assignment_to_csv,
    soft_match,
)
from .networks import default_params
from .params import ParamBlock
from .scenesim import NEW, SceneFrame, evaluate, oracle_correspondences

logger = logging.getLogger(__name__)

STRATEGIES = ("mono", "stereo", "mixed")
FUSIONS = ("avg", "statistic")
MONO_MODES = ("oracle", "regressor")
# Distance at which the bearing-only (2D) position cue is placed.
BEARING_RANGE = 10.0


@dataclass(frozen=True)
class RunConfig:
    strategy: str = "mixed"
    fusion: str = "statistic"
    matching: str = "motion_3d"
    region: str = "entire_roi"
    num_depths: int = 64
    alpha: float = 1.5
    kernel_sigma: float = 1.0
    sinkhorn_iters: int = 100
    reg_epsilon: float = 0.1
    roi_size: int = 7
    eps: float = 1e-6
    seed: int = 0
    params_seed: int = 0
    match_threshold: float = 0.65
    mono_mode: str = "oracle"
    mono_sigma: float = 1.0
    gate_params: str | None = None  # path to a calibrated gate; otherwise a fixed prior gate
    debug_dumps: bool = False

    def __post_init__(self):
        enums = {
            "strategy": STRATEGIES,
            "fusion": FUSIONS,
            "matching": MATCH_MODES,
            "region": rtsm.REGIONS,
            "mono_mode": MONO_MODES,
        }
        for name, allowed in enums.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(name, f"{getattr(self, name)!r} is not one of {', '.join(allowed)}")
        if self.roi_size < 3:
            raise ConfigError("roi_size", "must be >= 3")
        if self.num_depths < 2:
            raise ConfigError("num_depths", "must be >= 2")
        if not self.alpha > 1:
            raise ConfigError("alpha", "must be > 1")
        if self.kernel_sigma < 0:
            raise ConfigError("kernel_sigma", "must be non-negative")
        if self.sinkhorn_iters < 1:
            raise ConfigError("sinkhorn_iters", "must be >= 1")
        if not self.reg_epsilon > 0:
            raise ConfigError("reg_epsilon", "must be positive")
        if not self.eps > 0:
            raise ConfigError("eps", "must be positive")
        if self.mono_sigma < 0:
            raise ConfigError("mono_sigma", "must be non-negative")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in doc:
            if key not in known:
                raise ConfigError(key, "unknown run option")
        return cls(**doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def rtsm_config(self) -> rtsm.RTSMConfig:
        return rtsm.RTSMConfig(self.num_depths, self.alpha, self.kernel_sigma, self.region, self.eps)

    @property
    def match_config(self) -> MatchConfig:
        return MatchConfig(self.matching, self.sinkhorn_iters, self.reg_epsilon)


def prior_gate_params(channels: int = 32, hidden: int = 16, psi_dim: int = 8) -> GateParams:
    """A hand-set gate that trusts stereo when the match is confident and consistent.

    One hidden unit fires when the real mass, the best entry, the margin and the
    RoI affinity are all high; the remaining units are inert. The output weight
    is large enough that a confident match gives ``c`` within 1e-5 of one, so
    little monocular noise leaks into well-matched queries.
    """
    base = init_gate_params(0, channels, hidden, psi_dim)
    w1 = np.zeros((hidden, 5))
    w1[0] = [3.0, 3.0, 3.0, 0.0, 3.0]
    b1 = np.zeros(hidden)
    b1[0] = -9.0
    w2 = np.zeros((1, hidden))
    w2[0, 0] = 12.0
    return base.replace(w1=w1, b1=b1, w2=w2, b2=np.array([0.0]))


@dataclass
class DetectionRecord:
    frame: int
    index: int
    object_id: int
    camera: int
    gt: np.ndarray
    gt_depth: float
    mono: np.ndarray
    fused: np.ndarray
    fused_depth: float
    stereo_status: str = "skipped"
    stereo_point: np.ndarray | None = None
    stereo_depth: float | None = None
    bin_width: float | None = None
    confidence: float | None = None
    assigned_prev: int | None = None
    oracle_prev: int | None = None
    matched_ok: bool | None = None


@dataclass
class FrameResult:
    index: int
    records: list[DetectionRecord] = field(default_factory=list)
    association_accuracy: float | None = None
    num_associations: int = 0
    error: str | None = None
    assignment: np.ndarray | None = None


@dataclass
class RunResult:
    config: RunConfig
    frames: list[FrameResult]
    calibration_samples: list[tuple[GateDescriptor, int]]
    calibration_frames: list[int] = field(default_factory=list)

    @property
    def records(self) -> list[DetectionRecord]:
        return [r for f in self.frames for r in f.records]

    def metrics(self) -> dict[str, Any]:
        return build_metrics(self)


def _bearing_positions(frame: SceneFrame, boxes) -> np.ndarray:
    """Ego-frame unit rays through box centres, placed at a fixed range."""
    out = []
    for box in boxes:
        k = frame.rig.intrinsics[box.camera_index]
        cx, cy = box.center
        ray = np.array([(cx - k.ox) / k.fx, (cy - k.oy) / k.fy, 1.0])
        ray = frame.rig.extrinsics[box.camera_index].rotation.T @ ray
        out.append(BEARING_RANGE * ray / np.linalg.norm(ray))
    return np.asarray(out).reshape(-1, 3)


@dataclass
class _History:
    queries: list[HistoricalQuery]
    rois: list[RoIFeature]
    bearings: np.ndarray
    frame: SceneFrame


class QueryGenerator:
    """Stateful runner; call :meth:`step` once per frame in order."""

    def __init__(self, config: RunConfig, params: ParamBlock | None = None,
                 gate: GateParams | None = None, collect_calibration: bool = False,
                 debug_dir: Path | None = None):
        self.config = config
        self.params = params
        if gate is None and config.gate_params:
            gate = ParamBlock.load(config.gate_params)
        self.gate = gate
        self.collect_calibration = collect_calibration
        self.calibration_samples: list[tuple[GateDescriptor, int]] = []
        self.calibration_frames: list[int] = []
        self.debug_dir = debug_dir
        self.history: _History | None = None

    def reset(self) -> None:
        self.history = None

    def _ensure_params(self, channels: int) -> None:
        # Weights are sized from the first feature map seen.
        cfg = self.config
        if self.params is None:
            self.params = default_params(
                cfg.params_seed, channels=channels, match_threshold=cfg.match_threshold,
                match_terms=1 if cfg.matching == "appearance_only" else 2, roi_size=cfg.roi_size,
            )
        if self.gate is None:
            self.gate = prior_gate_params(channels)

    def _mono_points(self, frame: SceneFrame, rois, k_eqs) -> list[np.ndarray]:
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, frame.index])
        out = []
        for i, roi in enumerate(rois):
            t_ext = frame.rig.extrinsics[roi.camera_index]
            if cfg.mono_mode == "oracle":
                out.append(mono_reference_point(roi, k_eqs[i], t_ext, self.params,
                                                oracle_override=(frame.gt_center(i), cfg.mono_sigma),
                                                rng=rng))
            else:
                out.append(mono_reference_point(roi, k_eqs[i], t_ext, self.params))
        return out

    def step(self, frame: SceneFrame) -> FrameResult:
        cfg = self.config
        result = FrameResult(frame.index)
        dets = frame.detections
        if not dets:
            self.history = None
            return result
        boxes = [d.box for d in dets]
        self._ensure_params(frame.feature_map(boxes[0].camera_index).channels)
        rois = [roi_align(frame.feature_map(b.camera_index), b, cfg.roi_size, cfg.roi_size)
                for b in boxes]
        k_eqs = [equivalent_intrinsics(frame.rig.intrinsics[b.camera_index], b, cfg.roi_size, cfg.roi_size)
                 for b in boxes]
        mono = self._mono_points(frame, rois, k_eqs)
        appearance = np.stack([appearance_embedding(r, self.params) for r in rois])
        bearings = _bearing_positions(frame, boxes)

        hist = self.history
        prev_frame = hist.frame if hist is not None else None
        if hist is not None:
            ego = compose_ego_transform(prev_frame.ego_pose, frame.ego_pose)
            dt = frame.timestamp - prev_frame.timestamp
        else:
            ego, dt = None, 1.0
        ctx = MotionContext(dt if dt > 0 else 1.0, ego if ego is not None else RigidTransform.identity())
        positions = bearings if cfg.matching == "motion_2d" else np.asarray(mono)
        a, aligned = soft_match(
            rois, hist.queries if hist else [], ctx, self.params, cfg.match_config,
            cur_positions=positions,
            hist_positions=hist.bearings if hist else None,
            cur_appearance=appearance,
        )
        result.assignment = a
        n_hist = a.shape[1] - 1

        stereo: list[rtsm.StereoEstimate | None] = [None] * len(rois)
        if cfg.strategy != "mono" and hist is not None:
            pairs = rtsm.make_pairs(a, rois, hist.rois, frame.rig.intrinsics, frame.rig.extrinsics, ego)
            stereo = rtsm.run_rtsm(pairs, a, aligned, cfg.rtsm_config, keep_volumes=cfg.debug_dumps)

        if cfg.strategy == "mono":
            fused = [m.copy() for m in mono]
            conf = np.zeros(len(rois))
        elif cfg.strategy == "stereo" or hist is None:
            fused = [s.point.copy() if s is not None and s.ok else m.copy() for s, m in zip(stereo, mono)]
            conf = np.array([1.0 if s is not None and s.ok else 0.0 for s in stereo])
        else:
            mode = "statistic_gating" if cfg.fusion == "statistic" else "avg_fusion"
            fused, conf, _ = fuse_pipeline(stereo, mono, a, rois, hist.rois, self.gate, mode, GATE_EPS)

        oracle = oracle_correspondences(prev_frame, frame) if hist is not None else {}
        for i, det in enumerate(dets):
            ext = frame.rig.extrinsics[det.box.camera_index]
            rec = DetectionRecord(
                frame=frame.index, index=i, object_id=det.object_id, camera=det.box.camera_index,
                gt=frame.gt_center(i), gt_depth=frame.gt_depth(i), mono=mono[i], fused=np.asarray(fused[i]),
                fused_depth=float(ext.apply(np.asarray(fused[i]))[2]),
                confidence=float(conf[i]),
            )
            s = stereo[i]
            if s is not None:
                rec.stereo_status = s.status
                if s.ok:
                    rec.stereo_point = s.point
                    rec.stereo_depth = s.depth
                    rec.bin_width = s.sweep.bin_width(rec.gt_depth)
            if hist is not None:
                best = int(np.argmax(a[i]))
                rec.assigned_prev = NEW if best == n_hist else best
                rec.oracle_prev = oracle[i]
                if rec.oracle_prev is NEW or rec.assigned_prev is NEW:
                    rec.matched_ok = rec.oracle_prev is rec.assigned_prev
                else:
                    rec.matched_ok = (prev_frame.detections[rec.assigned_prev].object_id
                                      == prev_frame.detections[rec.oracle_prev].object_id)
            result.records.append(rec)

            if self.collect_calibration and s is not None and s.ok:
                z = describe_row(a[i], rois[i], hist.rois, self.gate, GATE_EPS)
                if z.rho_real > GATE_EPS:
                    err_s = np.linalg.norm(s.point - rec.gt)
                    err_m = np.linalg.norm(mono[i] - rec.gt)
                    self.calibration_samples.append((z, int(err_s < err_m)))
                    self.calibration_frames.append(frame.index)

        if hist is not None:
            assignment = {r.index: r.assigned_prev for r in result.records}
            m = evaluate(fused, frame, assignment, oracle, prev_frame)
            result.association_accuracy = m.association_accuracy
            result.num_associations = m.num_associations

        if self.debug_dir is not None and cfg.debug_dumps:
            self._dump(frame.index, a, stereo)

        # Velocity estimate: displacement from the matched prior over dt.
        queries = []
        for i in range(len(rois)):
            vel = np.zeros(2)
            if hist is not None and n_hist and a[i, :n_hist].sum() > 0.5:
                prior = rtsm.prior_center(a[i], aligned, cfg.eps) / a[i, :n_hist].sum()
                vel = (np.asarray(fused[i]) - prior)[:2] / ctx.dt
            queries.append(HistoricalQuery(fused[i], vel, appearance[i], dets[i].object_id, rois[i]))
        self.history = _History(queries, rois, bearings, frame)
        return result

    def _dump(self, index: int, a: np.ndarray, stereo) -> None:
        out = self.debug_dir
        out.mkdir(parents=True, exist_ok=True)
        (out / f"assignment_{index:04d}.csv").write_text(assignment_to_csv(a))
        for m, s in enumerate(stereo):
            if s is not None and s.volume is not None:
                write_grid(out / f"cost_{index:04d}_{m:03d}.bin", s.volume.scores, s.volume.valid_mask)


def run_frames(frames: Sequence[SceneFrame], config: RunConfig, params: ParamBlock | None = None,
               gate: GateParams | None = None, collect_calibration: bool = False,
               debug_dir: Path | None = None, release_features: bool = True) -> RunResult:
    """Run the generator over ``frames``; a failing frame is recorded and resets history."""
    gen = QueryGenerator(config, params, gate, collect_calibration, debug_dir)
    results = []
    for frame in frames:
        try:
            results.append(gen.step(frame))
        except (RoIStereoError, ValueError) as exc:
            logger.warning("frame %d failed: %s", frame.index, exc)
            results.append(FrameResult(frame.index, error=f"{type(exc).__name__}: {exc}"))
            gen.reset()
        if release_features:
            # RoIs are already extracted; the full maps are not needed again.
            frame.drop_features()
    return RunResult(config, results, gen.calibration_samples, gen.calibration_frames)


def holdout_split(frame_indices: Sequence[int]) -> np.ndarray:
    """Every fourth frame is held out from gate calibration."""
    return np.asarray(frame_indices, dtype=np.int64) % 4 == 3


@dataclass
class Calibration:
    params: GateParams
    losses: np.ndarray
    train: list[tuple[GateDescriptor, int]]
    heldout: list[tuple[GateDescriptor, int]]

    @property
    def heldout_accuracy(self) -> float | None:
        if not self.heldout:
            return None
        return float(np.mean([(gate_confidence(z, self.params) > 0.5) == bool(y) for z, y in self.heldout]))

    def summary(self) -> dict[str, Any]:
        labels = [y for _, y in self.train + self.heldout]
        return {
            "train_samples": len(self.train),
            "heldout_samples": len(self.heldout),
            "positive_rate": float(np.mean(labels)),
            "final_loss": float(self.losses[-1]),
            "heldout_accuracy": self.heldout_accuracy,
        }


def calibrate_from_frames(frames: Sequence[SceneFrame], config: RunConfig, lr: float = 0.5,
                          steps: int = 2000) -> Calibration:
    """Collect labelled gate descriptors from a run and fit the gate on them.

    Samples come from a mixed run under the prior gate; a sample is labelled 1
    when the stereo point is closer to ground truth than the mono point.
    Frames picked by :func:`holdout_split` are kept out of training. The
    RoI-affinity cue was computed with the prior gate's projection, so the fit
    keeps that projection and only trains the MLP.
    """
    config = dataclasses.replace(config, strategy="mixed", fusion="statistic")
    channels = frames[0].feature_map(0).channels
    gate = prior_gate_params(channels)
    init = init_gate_params(config.seed, channels).replace(psi_w=gate["psi_w"], psi_b=gate["psi_b"])
    result = run_frames(frames, config, gate=gate, collect_calibration=True)
    held = holdout_split(result.calibration_frames)
    train = [s for s, h in zip(result.calibration_samples, held) if not h]
    test = [s for s, h in zip(result.calibration_samples, held) if h]
    params, losses = calibrate_gate(train, lr=lr, steps=steps, init=init)
    return Calibration(params, losses, train, test)


def _stats(x: Sequence[float]) -> dict[str, float | None]:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return {"mean": None, "median": None, "p90": None, "count": 0}
    return {
        "mean": round(float(np.mean(x)), 9),
        "median": round(float(np.median(x)), 9),
        "p90": round(float(np.percentile(x, 90)), 9),
        "count": int(x.size),
    }


def _trans(points, gts) -> list[float]:
    return [float(np.linalg.norm(np.asarray(p) - g)) for p, g in zip(points, gts)]


def build_metrics(result: RunResult) -> dict[str, Any]:
    """``{config_echo, per_frame, aggregate}`` summary of a run."""
    per_frame = []
    for fr in result.frames:
        recs = fr.records
        per_frame.append({
            "frame": fr.index,
            "num_detections": len(recs),
            "error": fr.error,
            "association_accuracy": None if fr.association_accuracy is None
            else round(fr.association_accuracy, 9),
            "translation": _stats(_trans([r.fused for r in recs], [r.gt for r in recs])),
            "stereo_ok": sum(r.stereo_status == "ok" for r in recs),
            "mean_confidence": round(float(np.mean([r.confidence for r in recs])), 9) if recs else None,
        })
    recs = result.records
    matched = [r for r in recs if r.matched_ok is not None]
    ok = [r for r in recs if r.stereo_status == "ok"]
    within = [abs(r.stereo_depth - r.gt_depth) <= 0.5 * r.bin_width for r in ok]
    status_counts: dict[str, int] = {}
    for r in recs:
        status_counts[r.stereo_status] = status_counts.get(r.stereo_status, 0) + 1
    aggregate = {
        "num_frames": len(result.frames),
        "num_detections": len(recs),
        "failed_frames": sum(f.error is not None for f in result.frames),
        "association_accuracy": round(sum(r.matched_ok for r in matched) / len(matched), 9)
        if matched else None,
        "translation": _stats(_trans([r.fused for r in recs], [r.gt for r in recs])),
        "depth": _stats([abs(r.fused_depth - r.gt_depth) for r in recs]),
        "mono_translation": _stats(_trans([r.mono for r in recs], [r.gt for r in recs])),
        "stereo_translation": _stats(_trans([r.stereo_point for r in ok], [r.gt for r in ok])),
        "stereo_depth_within_half_bin": round(float(np.mean(within)), 9) if within else None,
        "stereo_status": dict(sorted(status_counts.items())),
        "gate": _stats([r.confidence for r in recs if r.stereo_status == "ok"]),
    }
    return {"config_echo": result.config.to_dict(), "per_frame": per_frame, "aggregate": aggregate}

