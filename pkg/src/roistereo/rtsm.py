"""RoI-level temporal stereo: depth priors, log-spaced sweeps and RoI cost volumes."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .errors import BehindCamera, EmptyVolume, InvalidRange, NoRealMass
from .featuregrid import RoIFeature, bilinear_sample
from .geometry import (
    Intrinsics4,
    RigidTransform,
    equivalent_intrinsics,
    lift_to_world,
    project_to_roi,
    warp_candidates,
)

logger = logging.getLogger(__name__)

Region = Literal["entire_roi", "center_only"]
REGIONS = ("entire_roi", "center_only")

# Instrumentation: how many times each stage ran in this process.
calls: Counter = Counter()


@dataclass(frozen=True, eq=False)
class DepthSweep:
    center_d: float
    alpha: float
    candidates: np.ndarray

    @property
    def size(self) -> int:
        return len(self.candidates)

    def bin_width(self, depth: float) -> float:
        """Width of the sweep interval that contains ``depth`` (clamped to the ends)."""
        k = int(np.clip(np.searchsorted(self.candidates, depth) - 1, 0, self.size - 2))
        return float(self.candidates[k + 1] - self.candidates[k])


@dataclass(frozen=True, eq=False)
class CostVolume:
    scores: np.ndarray  # (D, roi_h, roi_w)
    valid_mask: np.ndarray  # (D, roi_h, roi_w) bool


@dataclass(frozen=True, eq=False)
class RoIPair:
    ref_roi: RoIFeature
    src_roi: RoIFeature
    K_ref: Intrinsics4
    K_src: Intrinsics4
    M_ref2src: RigidTransform
    T_ref: RigidTransform  # ego(t) -> reference camera, used for lifting
    src_index: int = -1


@dataclass(frozen=True)
class RTSMConfig:
    num_depths: int = 64
    alpha: float = 1.5
    kernel_sigma: float = 1.0
    region: Region = "entire_roi"
    eps: float = 1e-6

    def __post_init__(self):
        if self.region not in REGIONS:
            raise ValueError(f"unknown region {self.region!r}")


@dataclass
class StereoEstimate:
    """Outcome of the stereo branch for one current RoI."""

    status: str  # "ok", "no_real_mass", "behind_camera" or "empty_volume"
    point: np.ndarray | None = None
    depth: float | None = None
    prior_depth: float | None = None
    src_index: int = -1
    sweep: DepthSweep | None = field(default=None, repr=False)
    volume: CostVolume | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def prior_center(a_row, aligned_points: Sequence[np.ndarray], eps: float = 1e-6) -> np.ndarray:
    """Assignment-weighted sum of aligned history points over the real columns."""
    a_row = np.asarray(a_row, dtype=np.float64)
    n = len(aligned_points)
    if a_row.shape != (n + 1,):
        raise ValueError(f"row of length {a_row.shape} does not match {n} history points + dummy")
    real = a_row[:n]
    if real.sum() <= eps:
        raise NoRealMass(f"real mass {real.sum():.3g} <= {eps}")
    return real @ np.asarray(aligned_points, dtype=np.float64).reshape(n, 3)


def sid_samples(center_d: float, alpha: float, num: int) -> DepthSweep:
    """Log-uniform depth candidates on ``[center_d / alpha, alpha * center_d]``."""
    if not (center_d > 0 and alpha > 1 and num >= 2):
        raise InvalidRange(f"need center_d > 0, alpha > 1, D >= 2; got {center_d}, {alpha}, {num}")
    d_min, d_max = center_d / alpha, alpha * center_d
    k = np.arange(num)
    cand = d_min * (d_max / d_min) ** (k / (num - 1))
    cand[0], cand[-1] = d_min, d_max
    return DepthSweep(center_d=float(center_d), alpha=float(alpha), candidates=cand)


def roi_pixel_grid(roi_h: int, roi_w: int) -> tuple[np.ndarray, np.ndarray]:
    """Continuous RoI coordinates of every cell centre, each ``(roi_h, roi_w)``."""
    u, v = np.meshgrid(np.arange(roi_w) + 0.5, np.arange(roi_h) + 0.5)
    return u, v


def build_cost_volume(pair: RoIPair, sweep: DepthSweep) -> CostVolume:
    """Plane-sweep inner-product volume between a reference and a source RoI."""
    calls["build_cost_volume"] += 1
    ref = pair.ref_roi.data
    src = pair.src_roi.data
    h, w, c = ref.shape
    sh, sw = src.shape[:2]
    n_d = sweep.size
    u, v = roi_pixel_grid(h, w)
    uvd = np.stack(
        [
            np.broadcast_to(u, (n_d, h, w)),
            np.broadcast_to(v, (n_d, h, w)),
            np.broadcast_to(sweep.candidates[:, None, None], (n_d, h, w)),
        ],
        axis=-1,
    ).reshape(-1, 3)
    warped, in_front = warp_candidates(pair.K_src, pair.M_ref2src, pair.K_ref.inverse_matrix, uvd)
    xs = warped[:, 0] - 0.5
    ys = warped[:, 1] - 0.5
    with np.errstate(invalid="ignore"):
        valid = in_front & (xs >= 0) & (xs <= sw - 1) & (ys >= 0) & (ys <= sh - 1)
    xs = np.where(valid, xs, 0.0)
    ys = np.where(valid, ys, 0.0)
    sampled = bilinear_sample(src, xs, ys).reshape(n_d, h, w, c)
    scores = np.einsum("hwc,dhwc->dhw", ref, sampled) / np.sqrt(c)
    valid = valid.reshape(n_d, h, w)
    scores = np.where(valid, scores, 0.0)
    return CostVolume(scores=scores, valid_mask=valid)


def regularize_cost_volume(cv: CostVolume, kernel_sigma_d: float) -> CostVolume:
    """Gaussian smoothing along depth, renormalised over valid entries."""
    if kernel_sigma_d < 0:
        raise ValueError("kernel sigma must be non-negative")
    if kernel_sigma_d == 0:
        return CostVolume(scores=cv.scores.copy(), valid_mask=cv.valid_mask.copy())
    n_d = cv.scores.shape[0]
    radius = int(np.ceil(4 * kernel_sigma_d))
    k = np.arange(n_d)
    diff = k[:, None] - k[None, :]
    g = np.exp(-0.5 * (diff / kernel_sigma_d) ** 2) * (np.abs(diff) <= radius)
    m = cv.valid_mask.reshape(n_d, -1).astype(np.float64)
    s = cv.scores.reshape(n_d, -1) * m
    num = g @ s
    den = g @ m
    out = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    out = np.where(m > 0, out, 0.0)
    return CostVolume(scores=out.reshape(cv.scores.shape), valid_mask=cv.valid_mask.copy())


def per_pixel_argmax(cv: CostVolume) -> tuple[np.ndarray, np.ndarray]:
    """Best depth index per pixel (lowest index on ties) and which pixels have one."""
    masked = np.where(cv.valid_mask, cv.scores, -np.inf)
    return np.argmax(masked, axis=0), cv.valid_mask.any(axis=0)


def select_depth(cv: CostVolume, sweep: DepthSweep, region: Region = "entire_roi") -> float:
    """Collapse a cost volume to one depth for the RoI."""
    best, has_valid = per_pixel_argmax(cv)
    if region == "entire_roi":
        if not has_valid.any():
            raise EmptyVolume("no valid (pixel, depth) entry")
        return float(sweep.candidates[best[has_valid]].mean())
    if region == "center_only":
        h, w = has_valid.shape
        cy, cx = h // 2, w // 2
        if not has_valid[cy, cx]:
            raise EmptyVolume("centre pixel has no valid depth")
        return float(sweep.candidates[best[cy, cx]])
    raise ValueError(f"unknown region {region!r}")


def stereo_reference_point(box_center_uv, depth: float, k_eq: Intrinsics4,
                           t_ext: RigidTransform) -> np.ndarray:
    u, v = box_center_uv
    return lift_to_world(k_eq, t_ext, np.array([u, v, depth]))


def relative_pose(t_ref: RigidTransform, t_src: RigidTransform,
                  ego_prev_to_cur: RigidTransform) -> RigidTransform:
    """Reference camera at t to source camera at t-1.

    ``t_ref`` and ``t_src`` map their ego frames to camera frames and
    ``ego_prev_to_cur`` maps ego(t-1) to ego(t).
    """
    return t_src @ ego_prev_to_cur.inverse() @ t_ref.inverse()


def make_pairs(
    a: np.ndarray,
    cur_rois: Sequence[RoIFeature],
    hist_rois: Sequence[RoIFeature],
    intrinsics: Sequence[Intrinsics4],
    extrinsics: Sequence[RigidTransform],
    ego_prev_to_cur: RigidTransform,
) -> list[RoIPair | None]:
    """Pair each current RoI with its row-argmax history RoI (real columns only)."""
    pairs: list[RoIPair | None] = []
    n_hist = a.shape[1] - 1
    for m, roi in enumerate(cur_rois):
        if n_hist == 0:
            pairs.append(None)
            continue
        n_star = int(np.argmax(a[m, :n_hist]))
        src = hist_rois[n_star]
        ci, cj = roi.camera_index, src.camera_index
        pairs.append(
            RoIPair(
                ref_roi=roi,
                src_roi=src,
                K_ref=equivalent_intrinsics(intrinsics[ci], roi.source_box, roi.roi_w, roi.roi_h),
                K_src=equivalent_intrinsics(intrinsics[cj], src.source_box, src.roi_w, src.roi_h),
                M_ref2src=relative_pose(extrinsics[ci], extrinsics[cj], ego_prev_to_cur),
                T_ref=extrinsics[ci],
                src_index=n_star,
            )
        )
    return pairs


def estimate_one(pair: RoIPair, a_row: np.ndarray, aligned_points, config: RTSMConfig,
                 keep_volume: bool = False) -> StereoEstimate:
    try:
        prior = prior_center(a_row, aligned_points, config.eps)
    except NoRealMass:
        return StereoEstimate("no_real_mass")
    if pair is None:
        return StereoEstimate("no_real_mass")
    try:
        prior_d = project_to_roi(pair.K_ref, pair.T_ref, prior)[2]
    except BehindCamera:
        return StereoEstimate("behind_camera", src_index=pair.src_index)
    sweep = sid_samples(prior_d, config.alpha, config.num_depths)
    raw = build_cost_volume(pair, sweep)
    cv = regularize_cost_volume(raw, config.kernel_sigma)
    try:
        depth = select_depth(cv, sweep, config.region)
    except EmptyVolume:
        return StereoEstimate("empty_volume", prior_depth=prior_d, src_index=pair.src_index)
    roi = pair.ref_roi
    point = stereo_reference_point((roi.roi_w / 2, roi.roi_h / 2), depth, pair.K_ref, pair.T_ref)
    return StereoEstimate(
        "ok", point=point, depth=depth, prior_depth=prior_d, src_index=pair.src_index,
        sweep=sweep, volume=raw if keep_volume else None,
    )


def run_rtsm(
    pairs: Sequence[RoIPair | None],
    a: np.ndarray,
    aligned_points: Sequence[np.ndarray],
    config: RTSMConfig = RTSMConfig(),
    keep_volumes: bool = False,
) -> list[StereoEstimate]:
    """Stereo reference point per current RoI; failures carry a status instead."""
    if len(pairs) != a.shape[0]:
        raise ValueError("one pair slot per assignment row is required")
    return [
        estimate_one(pair, a[m], aligned_points, config, keep_volumes)
        for m, pair in enumerate(pairs)
    ]
