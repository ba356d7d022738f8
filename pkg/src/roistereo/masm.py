"""Motion-aware soft matching of current RoIs against last frame's queries."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import NumericalOverflow, ShapeMismatch
from .featuregrid import RoIFeature, appearance_embedding, project_embedding
from .geometry import RigidTransform, align_point
from .params import ParamBlock, layer_norm

MatchMode = Literal["appearance_only", "motion_2d", "motion_3d"]
MATCH_MODES = ("appearance_only", "motion_2d", "motion_3d")

DEFAULT_PE_FREQUENCIES = (1.0, 2.0, 4.0, 8.0)
# Periods (meters) of the sinusoidal point encoding that feeds the position MLP.
DEFAULT_POINT_PERIODS = (6.0, 12.0, 24.0, 48.0)


@dataclass
class HistoricalQuery:
    ref_point: np.ndarray  # ego frame of the previous timestamp
    velocity: np.ndarray  # BEV velocity, m/s
    appearance: np.ndarray  # length-C appearance embedding
    object_id: int = -1  # simulator id, used only for evaluation
    roi: RoIFeature | None = None

    def __post_init__(self):
        self.ref_point = np.asarray(self.ref_point, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        if not (np.all(np.isfinite(self.ref_point)) and np.all(np.isfinite(self.velocity))):
            raise ValueError("historical query has non-finite point or velocity")


@dataclass(frozen=True)
class MotionContext:
    dt: float
    ego_T: RigidTransform
    pe_frequencies: tuple[float, ...] = DEFAULT_PE_FREQUENCIES

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if any(f <= 0 for f in self.pe_frequencies):
            raise ValueError("PE frequencies must be positive")


@dataclass(frozen=True)
class MatchConfig:
    mode: MatchMode = "motion_3d"
    sinkhorn_iters: int = 100
    reg_epsilon: float = 0.1
    point_periods: tuple[float, ...] = field(default=DEFAULT_POINT_PERIODS)

    def __post_init__(self):
        if self.mode not in MATCH_MODES:
            raise ValueError(f"unknown matching mode {self.mode!r}")


def pe_length(n_freqs: int) -> int:
    return 2 * n_freqs * (2 + 1 + 12)


def sinusoid(values: np.ndarray, freqs: Sequence[float]) -> np.ndarray:
    """Interleaved ``(sin f*x, cos f*x)`` for every value and frequency."""
    values = np.asarray(values, dtype=np.float64)
    arg = values[..., :, None] * np.asarray(freqs, dtype=np.float64)
    out = np.stack([np.sin(arg), np.cos(arg)], axis=-1)
    return out.reshape(values.shape[:-1] + (-1,))


def positional_encode(ctx: MotionContext, velocity) -> np.ndarray:
    """Encode ``[velocity, dt, top three rows of the ego transform]``."""
    raw = np.concatenate(
        [np.asarray(velocity, dtype=np.float64).reshape(2), [ctx.dt], ctx.ego_T.matrix[:3].ravel()]
    )
    return sinusoid(raw, ctx.pe_frequencies)


def motion_affine_params(pe: np.ndarray, params: ParamBlock) -> tuple[np.ndarray, np.ndarray]:
    wg, bg = params["film_gamma_w"], params["film_gamma_b"]
    wb, bb = params["film_beta_w"], params["film_beta_b"]
    if pe.shape[-1] != wg.shape[1] or pe.shape[-1] != wb.shape[1]:
        raise ShapeMismatch(f"PE length {pe.shape[-1]} != affine input {wg.shape[1]}")
    return pe @ wg.T + bg, pe @ wb.T + bb


def point_mlp(points: np.ndarray, params: ParamBlock, periods: Sequence[float]) -> np.ndarray:
    """One-hidden-layer ReLU MLP over a sinusoidal encoding of 3D points."""
    enc = sinusoid(np.asarray(points, dtype=np.float64), 2 * np.pi / np.asarray(periods))
    w1, b1 = params["pos_w1"], params["pos_b1"]
    if enc.shape[-1] != w1.shape[1]:
        raise ShapeMismatch(f"point encoding length {enc.shape[-1]} != MLP input {w1.shape[1]}")
    hidden = np.maximum(enc @ w1.T + b1, 0.0)
    return hidden @ params["pos_w2"].T + params["pos_b2"]


def temporal_align(
    queries: Sequence[HistoricalQuery],
    ctx: MotionContext,
    params: ParamBlock,
    mode: MatchMode = "motion_3d",
    point_periods: Sequence[float] = DEFAULT_POINT_PERIODS,
    positions: np.ndarray | None = None,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Align last frame's points to the current ego frame and build their embeddings.

    In ``motion_3d`` mode each query is modulated as ``gamma*LN(MLP(p)) + beta``
    plus ``gamma*LN(O) + beta`` with ``gamma, beta`` regressed from the motion
    encoding. ``appearance_only`` keeps ``LN(O)`` and skips alignment.
    ``motion_2d`` substitutes the image-plane ``positions`` for the 3D point and
    ignores ego motion.
    """
    if not queries:
        raise ValueError("temporal_align needs at least one query")
    c = params["conv_b"].shape[0]
    points = np.stack([q.ref_point for q in queries])
    appearance = np.stack([q.appearance for q in queries])
    if appearance.shape[1] != c:
        raise ShapeMismatch(f"appearance length {appearance.shape[1]} != {c}")

    if mode == "appearance_only":
        aligned = points
        emb = layer_norm(appearance)
    elif mode == "motion_3d":
        aligned = align_point(ctx.ego_T, points)
        pe = np.stack([positional_encode(ctx, q.velocity) for q in queries])
        gamma, beta = motion_affine_params(pe, params)
        pos = layer_norm(point_mlp(aligned, params, point_periods))
        emb = (gamma * pos + beta) + (gamma * layer_norm(appearance) + beta)
    elif mode == "motion_2d":
        if positions is None:
            raise ValueError("motion_2d needs image-plane positions")
        aligned = points
        still = MotionContext(ctx.dt, RigidTransform.identity(), ctx.pe_frequencies)
        pe = np.stack([positional_encode(still, np.zeros(2)) for _ in queries])
        gamma, beta = motion_affine_params(pe, params)
        pos = layer_norm(point_mlp(positions, params, point_periods))
        emb = (gamma * pos + beta) + (gamma * layer_norm(appearance) + beta)
    else:
        raise ValueError(f"unknown matching mode {mode!r}")
    return list(aligned), list(emb)


def current_embeddings(
    appearance: np.ndarray,
    params: ParamBlock,
    positions: np.ndarray | None = None,
    point_periods: Sequence[float] = DEFAULT_POINT_PERIODS,
) -> np.ndarray:
    """``LN(O_t)``, plus ``LN(MLP(p))`` when a per-RoI position cue is supplied."""
    emb = layer_norm(np.asarray(appearance, dtype=np.float64))
    if positions is not None:
        emb = emb + layer_norm(point_mlp(positions, params, point_periods))
    return emb


def similarity_matrix(cur, hist) -> np.ndarray:
    """Scaled dot products, with an all-zero dummy vector appended to ``hist``."""
    cur = np.atleast_2d(np.asarray(cur, dtype=np.float64))
    dim = cur.shape[1]
    hist = np.atleast_2d(np.asarray(hist, dtype=np.float64)) if len(hist) else np.zeros((0, dim))
    if hist.shape[1] != dim:
        raise ShapeMismatch(f"history embeddings have length {hist.shape[1]}, expected {dim}")
    hist = np.vstack([hist, np.zeros((1, dim))])
    return cur @ hist.T / np.sqrt(dim)


def sinkhorn(s: np.ndarray, iterations: int = 100, reg_epsilon: float = 0.1) -> np.ndarray:
    """Slack Sinkhorn normalisation in the log domain.

    Rows are normalised to one over all columns; real columns (all but the
    last) are only scaled down when their mass exceeds one, so the dummy column
    can absorb any number of unmatched rows. The last step is a row step,
    after which any real column still holding more than one unit is scaled
    to one and the removed mass moves to the dummy entry of its row. The
    fixed iteration count does not always converge, and this closing step
    keeps both marginal constraints exact.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not reg_epsilon > 0:
        raise ValueError("reg_epsilon must be positive")
    log_k = np.asarray(s, dtype=np.float64) / reg_epsilon
    if log_k.ndim != 2 or log_k.shape[1] < 1:
        raise ShapeMismatch(f"similarity matrix must be 2-D with a dummy column, got {log_k.shape}")
    if log_k.shape[0] == 0:
        return np.zeros_like(log_k)
    for _ in range(iterations):
        log_k = log_k - logsumexp(log_k, axis=1, keepdims=True)
        if log_k.shape[1] > 1:
            col = logsumexp(log_k[:, :-1], axis=0, keepdims=True)
            log_k[:, :-1] -= np.maximum(col, 0.0)
    log_k = log_k - logsumexp(log_k, axis=1, keepdims=True)
    a = np.exp(log_k)
    if not np.all(np.isfinite(a)):
        raise NumericalOverflow("non-finite entries after log-domain Sinkhorn")
    if a.shape[1] > 1:
        col = a[:, :-1].sum(axis=0)
        a[:, :-1] /= np.maximum(col, 1.0)
        a[:, -1] = np.maximum(1.0 - a[:, :-1].sum(axis=1), 0.0)
    return a


def soft_match(
    cur_rois: Sequence[RoIFeature],
    hist: Sequence[HistoricalQuery],
    ctx: MotionContext,
    params: ParamBlock,
    config: MatchConfig = MatchConfig(),
    cur_positions: np.ndarray | None = None,
    hist_positions: np.ndarray | None = None,
    cur_appearance: np.ndarray | None = None,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Soft assignment ``A`` (M_t x (M_{t-1}+1)) and the aligned history points.

    ``cur_positions`` is the per-RoI position cue on the current side: 3D
    points for ``motion_3d``, image-plane vectors for ``motion_2d``. It is
    ignored for ``appearance_only``. ``hist_positions`` is only used by
    ``motion_2d``.
    """
    if not cur_rois:
        raise ValueError("soft_match needs at least one current RoI")
    if cur_appearance is None:
        cur_appearance = np.stack([appearance_embedding(r, params) for r in cur_rois])
    positions = None if config.mode == "appearance_only" else cur_positions
    cur = project_embedding(
        current_embeddings(cur_appearance, params, positions, config.point_periods),
        params, "current",
    )
    if not hist:
        return np.ones((len(cur_rois), 1)), []
    aligned, hist_emb = temporal_align(
        hist, ctx, params, config.mode, config.point_periods, hist_positions
    )
    hist_proj = project_embedding(np.stack(hist_emb), params, "history")
    s = similarity_matrix(cur, hist_proj)
    return sinkhorn(s, config.sinkhorn_iters, config.reg_epsilon), aligned


def assignment_to_csv(a: np.ndarray) -> str:
    """Row-major CSV dump with a ``M_t,M_t-1`` header line."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"M_t={a.shape[0]}", f"M_t-1={a.shape[1] - 1}"])
    for row in a:
        writer.writerow([repr(float(x)) for x in row])
    return buf.getvalue()


def assignment_from_csv(text: str) -> np.ndarray:
    rows = list(csv.reader(io.StringIO(text)))
    m_t = int(rows[0][0].split("=")[1])
    m_prev = int(rows[0][1].split("=")[1])
    a = np.array([[float(x) for x in r] for r in rows[1:]], dtype=np.float64).reshape(m_t, m_prev + 1)
    return a
