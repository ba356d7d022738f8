"""Feature maps, RoI-Align and the small stand-in networks fed by RoI features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import ShapeMismatch
from .geometry import BBox2D, Intrinsics4, RigidTransform, lift_to_world
from .params import ParamBlock, check_shape

DEFAULT_ROI_SIZE = 7


@dataclass(frozen=True, eq=False)
class FeatureMap:
    data: np.ndarray  # (H, W, C)
    camera_index: int = 0
    timestamp: float = 0.0

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeMismatch(f"feature map must be HxWxC, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class RoIFeature:
    data: np.ndarray  # (roi_h, roi_w, C)
    source_box: BBox2D
    timestamp: float = 0.0

    @property
    def roi_h(self) -> int:
        return self.data.shape[0]

    @property
    def roi_w(self) -> int:
        return self.data.shape[1]

    @property
    def camera_index(self) -> int:
        return self.source_box.camera_index


def bilinear_sample(grid: np.ndarray, xi: np.ndarray, yi: np.ndarray) -> np.ndarray:
    """Sample an ``(H, W, C)`` grid at fractional index coordinates.

    Neighbours outside the grid contribute zero, which keeps the sampler
    linear in ``grid``. Output shape is ``xi.shape + (C,)``.
    """
    h, w = grid.shape[:2]
    xi = np.asarray(xi, dtype=np.float64)
    yi = np.asarray(yi, dtype=np.float64)
    x0 = np.floor(xi)
    y0 = np.floor(yi)
    fx = xi - x0
    fy = yi - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = np.zeros(xi.shape + grid.shape[2:], dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xx = x0 + dx
            yy = y0 + dy
            inside = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
            weight = np.where(inside, wx * wy, 0.0)
            vals = grid[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out += weight[..., None] * vals
    return out


def roi_align(fm: FeatureMap, box: BBox2D, roi_w: int = DEFAULT_ROI_SIZE,
              roi_h: int = DEFAULT_ROI_SIZE) -> RoIFeature:
    """Extract a fixed-size patch with one bilinear sample per cell centre."""
    if roi_w < 1 or roi_h < 1:
        raise ValueError("RoI size must be at least 1")
    if box.x_max <= 0 or box.y_max <= 0 or box.x_min >= fm.width or box.y_min >= fm.height:
        raise ValueError("box does not intersect the feature map")
    xs = box.x_min + (np.arange(roi_w) + 0.5) * (box.width / roi_w)
    ys = box.y_min + (np.arange(roi_h) + 0.5) * (box.height / roi_h)
    xx, yy = np.meshgrid(xs - 0.5, ys - 0.5)
    data = bilinear_sample(fm.data, xx, yy)
    return RoIFeature(data=data, source_box=box, timestamp=fm.timestamp)


def conv3x3_relu(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-padded 3x3 convolution followed by ReLU; weight is (C_out, C_in, 3, 3)."""
    h, w, c_in = x.shape
    c_out = weight.shape[0]
    if weight.shape != (c_out, c_in, 3, 3) or bias.shape != (c_out,):
        raise ShapeMismatch(f"conv weight {weight.shape} / bias {bias.shape} vs {c_in} channels")
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(bias, (h, w, c_out)).copy()
    for ky in range(3):
        for kx in range(3):
            out += padded[ky:ky + h, kx:kx + w, :] @ weight[:, :, ky, kx].T
    return np.maximum(out, 0.0)


def appearance_embedding(roi: RoIFeature, params: ParamBlock) -> np.ndarray:
    feat = conv3x3_relu(roi.data, params["conv_w"], params["conv_b"])
    return feat.mean(axis=(0, 1))


def project_embedding(e: np.ndarray, params: ParamBlock,
                      which: Literal["current", "history"]) -> np.ndarray:
    """Affine map of one embedding (or a stack of them) into the matching space."""
    if which not in ("current", "history"):
        raise ValueError(f"unknown projection {which!r}")
    w = params[f"proj_{which}_w"]
    b = params[f"proj_{which}_b"]
    e = np.asarray(e, dtype=np.float64)
    if e.shape[-1] != w.shape[1]:
        raise ShapeMismatch(f"embedding length {e.shape[-1]} != projection input {w.shape[1]}")
    return e @ w.T + b


def mono_reference_point(
    roi: RoIFeature,
    k_eq: Intrinsics4,
    t_ext: RigidTransform,
    params: ParamBlock,
    oracle_override: tuple[np.ndarray, float] | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Single-frame 3D reference point for one RoI.

    With ``oracle_override=(center, sigma)`` the ground-truth center is returned
    perturbed by isotropic Gaussian noise drawn from ``rng``. Otherwise a small
    regressor maps the pooled RoI feature and the log focal lengths of
    ``k_eq`` to an offset from the RoI centre and a log depth, which is then
    lifted to 3D.
    """
    if oracle_override is not None:
        center, sigma = oracle_override
        center = np.asarray(center, dtype=np.float64)
        if sigma == 0:
            return center.copy()
        if rng is None:
            raise ValueError("oracle mode with noise needs an rng")
        return center + rng.normal(0.0, sigma, size=3)

    pooled = roi.data.mean(axis=(0, 1))
    x = np.concatenate([pooled, [np.log(k_eq.fx), np.log(k_eq.fy)]])
    w, b = params["mono_w"], params["mono_b"]
    check_shape("mono_w", w, (3, x.size))
    du, dv, log_d = w @ x + b
    uvd = np.array([roi.roi_w / 2 + du, roi.roi_h / 2 + dv, np.exp(log_d)])
    return lift_to_world(k_eq, t_ext, uvd)
