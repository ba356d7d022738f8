"""Seeded construction of the stand-in network weights.

No training happens here. The weights are drawn so that each stand-in behaves
sensibly out of the box: the embedding convolution is a perturbed projection,
the motion modulation starts near ``gamma=1, beta=0``, and both matching
projections share one orthonormal basis plus a bias pair that places the
dummy column's zero score between matched and unmatched pairs.
"""

from __future__ import annotations

import numpy as np

from .featuregrid import DEFAULT_ROI_SIZE
from .masm import DEFAULT_PE_FREQUENCIES, DEFAULT_POINT_PERIODS, pe_length
from .params import ParamBlock

DEFAULT_CHANNELS = 32


def default_params(
    seed: int = 0,
    channels: int = DEFAULT_CHANNELS,
    match_dim: int | None = None,
    pe_frequencies=DEFAULT_PE_FREQUENCIES,
    point_periods=DEFAULT_POINT_PERIODS,
    match_threshold: float = 0.65,
    match_terms: int = 2,
    nominal_size: tuple[float, float] = (2.0, 1.5),
    roi_size: int = DEFAULT_ROI_SIZE,
) -> ParamBlock:
    """Build the :class:`ParamBlock` used by the embedding, matching and mono stand-ins.

    ``match_threshold`` is the fraction of the largest possible raw score
    (``match_terms * C``, one ``C`` per layer-normed term in the embedding)
    that a current/history pair must exceed to outscore the dummy column.
    ``match_dim`` defaults to ``C``: ``C - 1`` dimensions spanning the
    zero-mean subspace plus one dimension carrying the threshold bias. ``nominal_size`` is the (width, height) in meters the mono
    regressor assumes when turning RoI scale into depth.
    """
    if match_dim is None:
        match_dim = channels
    if match_dim < 2 or match_dim > channels:
        raise ValueError("match_dim must be in [2, channels]")
    rng = np.random.default_rng(seed)
    c = channels

    # Appearance channels come in antisymmetric pairs (1 + p, 1 - p) and the
    # point MLP writes symmetric pairs (y, y). After layer norm the two parts
    # are orthogonal, so their cross terms vanish from the matching score.
    half = c // 2
    proj = rng.normal(0.0, 0.05, size=(half, c, 3, 3))
    mix, _ = np.linalg.qr(rng.normal(size=(c, half)))
    proj[:, :, 1, 1] += mix.T
    conv_w = np.zeros((c, c, 3, 3))
    conv_w[:half] = proj
    conv_w[half:2 * half] = -proj
    conv_b = np.zeros(c)
    conv_b[: 2 * half] = 1.0

    # Layer-normed embeddings are orthogonal to the all-ones direction, so a
    # basis of its complement keeps every bit of them in C - 1 dimensions.
    raw = rng.normal(size=(c, match_dim - 1))
    raw -= raw.mean(axis=0, keepdims=True)
    basis, _ = np.linalg.qr(raw)
    proj_w = np.zeros((match_dim, c))
    proj_w[: match_dim - 1] = basis.T
    offset = np.zeros(match_dim)
    offset[-1] = np.sqrt(match_threshold * match_terms * c)

    n_pe = pe_length(len(pe_frequencies))
    n_point = 3 * 2 * len(point_periods)

    pos_w2 = np.zeros((c, c))
    pos_w2[:half] = rng.normal(0.0, 1.0 / np.sqrt(c), size=(half, c))
    pos_w2[half:2 * half] = pos_w2[:half]

    mono_w = np.zeros((3, c + 2))
    mono_w[2, :c] = rng.normal(0.0, 1e-3, size=c)
    mono_w[2, c:] = 0.5
    w_nom, h_nom = nominal_size
    mono_b = np.array([0.0, 0.0, 0.5 * np.log(w_nom / roi_size) + 0.5 * np.log(h_nom / roi_size)])

    tensors = {
        "conv_w": conv_w,
        "conv_b": conv_b,
        "proj_current_w": proj_w,
        "proj_current_b": offset,
        "proj_history_w": proj_w.copy(),
        "proj_history_b": -offset,
        "film_gamma_w": rng.normal(0.0, 0.01, size=(c, n_pe)),
        "film_gamma_b": np.ones(c),
        "film_beta_w": rng.normal(0.0, 0.01, size=(c, n_pe)),
        "film_beta_b": np.zeros(c),
        "pos_w1": rng.normal(0.0, 1.0 / np.sqrt(n_point), size=(c, n_point)),
        "pos_b1": np.zeros(c),
        "pos_w2": pos_w2,
        "pos_b2": np.zeros(c),
        "mono_w": mono_w,
        "mono_b": mono_b,
    }
    return ParamBlock(tensors, seed=seed)
