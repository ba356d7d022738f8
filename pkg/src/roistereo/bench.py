"""Cost of RoI-level cost volumes against a dense full-image plane sweep."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .featuregrid import RoIFeature, bilinear_sample
from .geometry import (
    BBox2D,
    Intrinsics4,
    RigidTransform,
    camera_extrinsic,
    equivalent_intrinsics,
    warp_candidates,
)
from .rtsm import RoIPair, build_cost_volume, sid_samples

FLOAT_BYTES = 4


@dataclass(frozen=True)
class BenchConfig:
    image_w: int = 1408
    image_h: int = 512
    num_boxes: int = 20
    roi_size: int = 7
    num_depths: int = 64
    channels: int = 32
    dense_planes: int = 4  # planes actually swept densely; the rest is extrapolated
    repeats: int = 3
    seed: int = 0


def element_counts(cfg: BenchConfig) -> dict:
    """Per-plane and total cost-volume element counts, plus their exact ratio."""
    sparse_plane = cfg.num_boxes * cfg.roi_size * cfg.roi_size
    dense_plane = cfg.image_w * cfg.image_h
    ratio = Fraction(dense_plane, sparse_plane)
    return {
        "sparse_per_plane": sparse_plane,
        "dense_per_plane": dense_plane,
        "sparse_total": sparse_plane * cfg.num_depths,
        "dense_total": dense_plane * cfg.num_depths,
        "sparse_bytes": sparse_plane * cfg.num_depths * FLOAT_BYTES,
        "dense_bytes": dense_plane * cfg.num_depths * FLOAT_BYTES,
        "ratio": f"{ratio.numerator}/{ratio.denominator}",
        "ratio_float": float(ratio),
    }


def dense_plane_scores(ref: np.ndarray, src: np.ndarray, k: Intrinsics4, m_ref2src: RigidTransform,
                       depth: float) -> np.ndarray:
    """Inner-product score of every reference pixel against the source at one depth."""
    h, w, c = ref.shape
    u, v = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    uvd = np.stack([u.ravel(), v.ravel(), np.full(u.size, depth)], axis=1)
    warped, ok = warp_candidates(k, m_ref2src, k.inverse_matrix, uvd)
    xs = np.where(ok, warped[:, 0] - 0.5, -2.0)
    ys = np.where(ok, warped[:, 1] - 0.5, -2.0)
    sampled = bilinear_sample(src, xs, ys)
    return np.einsum("nc,nc->n", ref.reshape(-1, c), sampled).reshape(h, w) / np.sqrt(c)


def _setup(cfg: BenchConfig):
    rng = np.random.default_rng(cfg.seed)
    f = cfg.image_w / 2 / np.tan(np.radians(35))
    k = Intrinsics4(f, f, cfg.image_w / 2, cfg.image_h / 2)
    t_ref = camera_extrinsic(np.radians(90.0), (0.0, 0.0, 1.5))
    ego = RigidTransform.from_yaw(0.0, (-1.0, 0.0, 0.0))  # ego moved 1 m forward
    m = t_ref @ ego @ t_ref.inverse()
    ref = rng.normal(size=(cfg.image_h, cfg.image_w, cfg.channels))
    src = rng.normal(size=(cfg.image_h, cfg.image_w, cfg.channels))
    pairs = []
    for _ in range(cfg.num_boxes):
        bw, bh = rng.uniform(20, 120, size=2)
        x0 = rng.uniform(0, cfg.image_w - bw)
        y0 = rng.uniform(0, cfg.image_h - bh)
        box = BBox2D(x0, y0, x0 + bw, y0 + bh)
        shape = (cfg.roi_size, cfg.roi_size, cfg.channels)
        ref_roi = RoIFeature(rng.normal(size=shape), box)
        src_roi = RoIFeature(rng.normal(size=shape), box)
        k_eq = equivalent_intrinsics(k, box, cfg.roi_size, cfg.roi_size)
        pairs.append(RoIPair(ref_roi, src_roi, k_eq, k_eq, m, t_ref))
    return k, m, ref, src, pairs


def run_bench(cfg: BenchConfig = BenchConfig()) -> dict:
    """Element counts plus measured wall time for the sparse and dense sweeps.

    The dense sweep is timed on ``dense_planes`` planes and scaled to the
    full depth count; the sparse sweep is timed in full.
    """
    k, m, ref, src, pairs = _setup(cfg)
    sweep = sid_samples(20.0, 1.5, cfg.num_depths)

    sparse_times = []
    for _ in range(cfg.repeats):
        start = time.perf_counter()
        for pair in pairs:
            build_cost_volume(pair, sweep)
        sparse_times.append(time.perf_counter() - start)
    sparse_s = min(sparse_times)

    planes = sweep.candidates[np.linspace(0, cfg.num_depths - 1, cfg.dense_planes).astype(int)]
    dense_times = []
    for _ in range(max(1, cfg.repeats - 1)):
        start = time.perf_counter()
        for d in planes:
            dense_plane_scores(ref, src, k, m, float(d))
        dense_times.append(time.perf_counter() - start)
    dense_s = min(dense_times) / len(planes) * cfg.num_depths

    return {
        "config": asdict(cfg),
        "elements": element_counts(cfg),
        "timing": {
            "sparse_seconds": sparse_s,
            "dense_seconds_extrapolated": dense_s,
            "dense_planes_measured": int(len(planes)),
            "ratio": dense_s / sparse_s,
        },
    }
