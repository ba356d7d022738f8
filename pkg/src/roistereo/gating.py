"""Confidence gating between stereo and monocular reference points."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from scipy.special import expit

from .errors import DegenerateLabels, ZeroVector
from .featuregrid import RoIFeature
from .params import ParamBlock, layer_norm
from .rtsm import StereoEstimate

logger = logging.getLogger(__name__)

GateParams = ParamBlock
FusionMode = Literal["statistic_gating", "avg_fusion"]
GATE_EPS = 1e-6
PARAM_NAMES = ("w1", "b1", "w2", "b2")


@dataclass(frozen=True)
class GateDescriptor:
    one_minus_dum: float
    rho_max: float
    rho_gap: float
    neg_entropy: float
    phi: float
    rho_real: float

    def vector(self) -> np.ndarray:
        return np.array([self.one_minus_dum, self.rho_max, self.rho_gap, self.neg_entropy, self.phi])

    def with_phi(self, phi: float) -> "GateDescriptor":
        return GateDescriptor(self.one_minus_dum, self.rho_max, self.rho_gap, self.neg_entropy,
                              float(phi), self.rho_real)


def init_gate_params(seed: int = 0, channels: int = 32, hidden: int = 16,
                     psi_dim: int = 8) -> GateParams:
    rng = np.random.default_rng(seed)
    return ParamBlock(
        {
            "psi_w": rng.normal(0.0, 1.0 / np.sqrt(channels), size=(psi_dim, channels)),
            "psi_b": np.zeros(psi_dim),
            "w1": rng.normal(0.0, 0.5, size=(hidden, 5)),
            "b1": np.zeros(hidden),
            "w2": rng.normal(0.0, 0.5, size=(1, hidden)),
            "b2": np.zeros(1),
        },
        seed=seed,
    )


def match_statistics(a_row, eps: float = GATE_EPS) -> GateDescriptor:
    """Association-shape statistics of one assignment row (``phi`` left at 0)."""
    a_row = np.asarray(a_row, dtype=np.float64)
    real = a_row[:-1]
    rho_dum = float(a_row[-1])
    rho_real = float(real.sum())
    if real.size == 0:
        rho_max = rho_gap = 0.0
    else:
        top = np.sort(real)[::-1]
        rho_max = float(top[0])
        rho_gap = float(top[0] - (top[1] if real.size > 1 else 0.0))
    entropy = float(-(real * np.log(real + eps)).sum())
    return GateDescriptor(
        one_minus_dum=1.0 - rho_dum,
        rho_max=rho_max,
        rho_gap=rho_gap,
        neg_entropy=-entropy,
        phi=0.0,
        rho_real=rho_real,
    )


def psi_embedding(roi: RoIFeature, params: GateParams) -> np.ndarray:
    pooled = roi.data.mean(axis=(0, 1))
    return layer_norm(params["psi_w"] @ pooled + params["psi_b"])


def cosine_affinity(roi_cur: RoIFeature, roi_best: RoIFeature, params: GateParams) -> float:
    """Cosine of the pooled-and-projected RoI embeddings; 0 if either vanishes."""
    if roi_cur.data.shape != roi_best.data.shape:
        raise ValueError(f"RoI shapes differ: {roi_cur.data.shape} vs {roi_best.data.shape}")
    a = psi_embedding(roi_cur, params)
    b = psi_embedding(roi_best, params)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        logger.warning("zero embedding in cosine affinity: %s", ZeroVector.__name__)
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _logit_and_grads(z: np.ndarray, params: GateParams) -> tuple[np.ndarray, dict]:
    """Gate logit ``f(z)`` for a batch ``(N, 5)`` and ``df/d(param, z)`` per sample."""
    z = np.atleast_2d(z)
    w1, b1, w2, b2 = (params[k] for k in PARAM_NAMES)
    pre = z @ w1.T + b1
    hid = np.tanh(pre)
    f = hid @ w2[0] + b2[0]
    dpre = w2[0] * (1.0 - hid**2)  # (N, h)
    grads = {
        "w1": dpre[:, :, None] * z[:, None, :],
        "b1": dpre,
        "w2": hid[:, None, :],
        "b2": np.ones((z.shape[0], 1)),
        "z": dpre @ w1,
    }
    return f, grads


def gate_confidence(z: GateDescriptor, params: GateParams, eps: float = GATE_EPS) -> float:
    if z.rho_real <= eps:
        return 0.0
    f, _ = _logit_and_grads(z.vector(), params)
    return float(expit(f[0]))


def gate_gradient(z: GateDescriptor, params: GateParams, eps: float = GATE_EPS) -> dict:
    """Analytic ``dc/d(w1, b1, w2, b2, z)``; all zeros on the fallback branch."""
    if z.rho_real <= eps:
        zero = {k: np.zeros_like(params[k]) for k in PARAM_NAMES}
        zero["z"] = np.zeros(5)
        return zero
    f, g = _logit_and_grads(z.vector(), params)
    c = expit(f[0])
    scale = c * (1.0 - c)
    return {k: scale * v[0] for k, v in g.items()}


def bce_loss(c: np.ndarray, y: np.ndarray) -> float:
    c = np.clip(c, 1e-12, 1 - 1e-12)
    return float(-np.mean(y * np.log(c) + (1 - y) * np.log1p(-c)))


def calibrate_gate(
    samples: Sequence[tuple[GateDescriptor, int]],
    lr: float = 0.5,
    steps: int = 2000,
    seed: int = 0,
    init: GateParams | None = None,
) -> tuple[GateParams, np.ndarray]:
    """Full-batch gradient descent on binary cross-entropy.

    Returns the trained parameters and the per-step training loss (the loss
    evaluated before each update, then once more after the last one).
    """
    if not samples:
        raise DegenerateLabels("no calibration samples")
    z = np.stack([d.vector() for d, _ in samples])
    y = np.array([label for _, label in samples], dtype=np.float64)
    if np.unique(y).size < 2:
        raise DegenerateLabels("calibration needs both labels")
    params = init if init is not None else init_gate_params(seed)
    weights = {k: params[k].copy() for k in PARAM_NAMES}
    losses = np.empty(steps + 1)
    for step in range(steps + 1):
        current = params.replace(**weights)
        f, g = _logit_and_grads(z, current)
        c = expit(f)
        losses[step] = bce_loss(c, y)
        if step == steps or lr == 0:
            if lr == 0:
                losses[step:] = losses[step]
            break
        resid = (c - y) / len(y)
        for k in PARAM_NAMES:
            weights[k] = weights[k] - lr * np.tensordot(resid, g[k], axes=1).reshape(weights[k].shape)
    return params.replace(**weights), losses


def fuse_reference(c: float, p_stereo, p_mono) -> np.ndarray:
    return c * np.asarray(p_stereo, dtype=np.float64) + (1.0 - c) * np.asarray(p_mono, dtype=np.float64)


def _stereo_point(result) -> np.ndarray | None:
    if isinstance(result, StereoEstimate):
        return result.point if result.ok else None
    return None if result is None else np.asarray(result, dtype=np.float64)


def describe_row(a_row: np.ndarray, roi_cur: RoIFeature, rois_prev: Sequence[RoIFeature],
                 params: GateParams, eps: float = GATE_EPS) -> GateDescriptor:
    """Full five-value descriptor for one current RoI."""
    z = match_statistics(a_row, eps)
    if len(rois_prev) == 0:
        return z
    n_star = int(np.argmax(a_row[:-1]))
    return z.with_phi(cosine_affinity(roi_cur, rois_prev[n_star], params))


def fuse_pipeline(
    stereo_results: Sequence,
    mono_results: Sequence[np.ndarray],
    a: np.ndarray,
    rois_cur: Sequence[RoIFeature],
    rois_prev: Sequence[RoIFeature],
    params: GateParams,
    mode: FusionMode = "statistic_gating",
    eps: float = GATE_EPS,
) -> tuple[list[np.ndarray], np.ndarray, list[GateDescriptor | None]]:
    """Fused reference points, the confidence used per RoI, and the descriptors.

    A RoI without a usable stereo point always falls back to its mono point.
    """
    if len(stereo_results) != len(mono_results):
        raise ValueError("stereo and mono result lists differ in length")
    fused, conf, descs = [], np.zeros(len(mono_results)), []
    for m, (res, p_mono) in enumerate(zip(stereo_results, mono_results)):
        p_stereo = _stereo_point(res)
        if p_stereo is None:
            fused.append(np.asarray(p_mono, dtype=np.float64).copy())
            descs.append(None)
            continue
        if mode == "avg_fusion":
            c = 0.5
            descs.append(None)
        elif mode == "statistic_gating":
            z = describe_row(a[m], rois_cur[m], rois_prev, params, eps)
            c = gate_confidence(z, params, eps)
            descs.append(z)
        else:
            raise ValueError(f"unknown fusion mode {mode!r}")
        conf[m] = c
        fused.append(fuse_reference(c, p_stereo, p_mono))
    return fused, conf, descs
