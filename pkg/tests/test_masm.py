import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from roistereo.errors import ShapeMismatch
from roistereo.featuregrid import RoIFeature
from roistereo.geometry import BBox2D, RigidTransform
from roistereo.masm import (
    HistoricalQuery,
    MatchConfig,
    MotionContext,
    assignment_from_csv,
    assignment_to_csv,
    motion_affine_params,
    pe_length,
    point_mlp,
    positional_encode,
    similarity_matrix,
    sinkhorn,
    soft_match,
    temporal_align,
)
from roistereo.networks import default_params
from roistereo.params import ParamBlock, layer_norm
from roistereo.pipeline import QueryGenerator, RunConfig
from roistereo.scenesim import ScenarioConfig, generate_scenario

C = 8


def assert_assignment_invariants(a):
    assert np.all(a >= 0) and np.all(a <= 1 + 1e-12)
    assert np.allclose(a.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(a[:, :-1].sum(axis=0) <= 1 + 1e-6)


def neutral_params(c=C, n_freqs=4):
    """Default weights with the motion affine pinned to gamma = 1, beta = 0."""
    p = default_params(seed=0, channels=c)
    n = pe_length(n_freqs)
    return p.replace(film_gamma_w=np.zeros((c, n)), film_gamma_b=np.ones(c),
                     film_beta_w=np.zeros((c, n)), film_beta_b=np.zeros(c))


def make_queries(rng, n, c=C):
    return [HistoricalQuery(rng.normal(0, 10, 3), rng.normal(size=2), rng.normal(size=c), i)
            for i in range(n)]


class TestPositionalEncode:
    def test_zero_input_pattern(self):
        ctx = MotionContext(1.0, RigidTransform.identity())
        # zero the dt and the ego entries by using a zero transform row block
        pe = positional_encode(ctx, np.zeros(2))
        assert pe.shape == (pe_length(4),)
        vel_part = pe[: 2 * 4 * 2]
        assert np.array_equal(vel_part, np.tile([0.0, 1.0], 2 * 4))

    def test_deterministic(self):
        ctx = MotionContext(0.5, RigidTransform.from_yaw(0.3, (1.0, 2.0, 0.0)))
        assert np.array_equal(positional_encode(ctx, [1.0, 2.0]), positional_encode(ctx, [1.0, 2.0]))

    def test_distinct_velocities(self):
        ctx = MotionContext(0.5, RigidTransform.identity())
        assert np.linalg.norm(positional_encode(ctx, [1, 0]) - positional_encode(ctx, [0, 1])) > 0

    def test_context_validation(self):
        with pytest.raises(ValueError):
            MotionContext(0.0, RigidTransform.identity())
        with pytest.raises(ValueError):
            MotionContext(1.0, RigidTransform.identity(), (1.0, -2.0))


class TestMotionAffine:
    def test_constant_when_weights_zero(self):
        n = pe_length(4)
        g0, b0 = np.full(C, 0.7), np.full(C, -0.2)
        p = ParamBlock({"film_gamma_w": np.zeros((C, n)), "film_gamma_b": g0,
                        "film_beta_w": np.zeros((C, n)), "film_beta_b": b0})
        g, b = motion_affine_params(np.ones(n), p)
        assert np.array_equal(g, g0) and np.array_equal(b, b0)

    def test_affine(self, rng):
        p = default_params(channels=C)
        pe1, pe2 = rng.normal(size=(2, pe_length(4)))
        g12, b12 = motion_affine_params(pe1 + pe2, p)
        g1, b1 = motion_affine_params(pe1, p)
        g2, b2 = motion_affine_params(pe2, p)
        assert np.allclose(g12 - g1 - g2, -p["film_gamma_b"], atol=1e-12)
        assert np.allclose(b12 - b1 - b2, -p["film_beta_b"], atol=1e-12)

    def test_against_loop_oracle(self, rng):
        n = pe_length(4)
        wg, wb = rng.normal(size=(2, C, n))
        bg, bb = rng.normal(size=(2, C))
        pe = rng.normal(size=n)
        p = ParamBlock({"film_gamma_w": wg, "film_gamma_b": bg, "film_beta_w": wb, "film_beta_b": bb})
        g, b = motion_affine_params(pe, p)
        g_loop = [sum(wg[i, j] * pe[j] for j in range(n)) + bg[i] for i in range(C)]
        b_loop = [sum(wb[i, j] * pe[j] for j in range(n)) + bb[i] for i in range(C)]
        assert np.allclose(g, g_loop, atol=1e-12) and np.allclose(b, b_loop, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            motion_affine_params(np.ones(5), default_params(channels=C))


class TestTemporalAlign:
    def test_identity_ego_keeps_points(self, rng):
        qs = make_queries(rng, 4)
        for q in qs:
            q.velocity = np.zeros(2)
        aligned, _ = temporal_align(qs, MotionContext(0.5, RigidTransform.identity()), default_params(channels=C))
        for q, p in zip(qs, aligned):
            assert np.array_equal(p, q.ref_point)

    def test_ego_applied(self, rng):
        qs = make_queries(rng, 3)
        ego = RigidTransform.from_yaw(0.2, (1.0, -1.0, 0.0))
        aligned, _ = temporal_align(qs, MotionContext(0.5, ego), default_params(channels=C))
        for q, p in zip(qs, aligned):
            assert np.allclose(p, ego.apply(q.ref_point), atol=1e-12)

    def test_neutral_affine(self, rng):
        qs = make_queries(rng, 3)
        p = neutral_params()
        ctx = MotionContext(0.5, RigidTransform.from_yaw(0.1, (2.0, 0.0, 0.0)))
        aligned, emb = temporal_align(qs, ctx, p)
        for q, a, e in zip(qs, aligned, emb):
            expected = layer_norm(point_mlp(a, p, MatchConfig().point_periods)) + layer_norm(q.appearance)
            assert np.allclose(e, expected, atol=1e-12)

    def test_layer_norm_statistics(self, rng):
        p = default_params(channels=C)
        y = layer_norm(point_mlp(rng.normal(0, 20, (6, 3)), p, MatchConfig().point_periods))
        assert np.allclose(y.mean(axis=1), 0, atol=1e-6)
        assert np.allclose(y.var(axis=1), 1, atol=1e-6)

    def test_appearance_only(self, rng):
        qs = make_queries(rng, 2)
        ego = RigidTransform.from_yaw(0.2, (1.0, 0.0, 0.0))
        aligned, emb = temporal_align(qs, MotionContext(0.5, ego), default_params(channels=C), "appearance_only")
        assert np.array_equal(aligned[0], qs[0].ref_point)
        assert np.allclose(emb[1], layer_norm(qs[1].appearance))

    def test_errors(self, rng):
        ctx = MotionContext(0.5, RigidTransform.identity())
        with pytest.raises(ValueError):
            temporal_align([], ctx, default_params(channels=C))
        with pytest.raises(ShapeMismatch):
            temporal_align(make_queries(rng, 2, c=C + 1), ctx, default_params(channels=C))
        with pytest.raises(ValueError):
            temporal_align(make_queries(rng, 2), ctx, default_params(channels=C), "motion_2d")
        with pytest.raises(ValueError):
            HistoricalQuery([np.nan, 0, 0], [0, 0], np.zeros(C))


class TestSimilarity:
    def test_orthonormal_basis(self):
        e = np.eye(5)
        s = similarity_matrix(e, e)
        assert np.allclose(s[:, :5], np.eye(5) / np.sqrt(5))
        assert np.array_equal(s[:, 5], np.zeros(5))

    def test_against_loop_oracle(self, rng):
        cur, hist = rng.normal(size=(4, 6)), rng.normal(size=(3, 6))
        s = similarity_matrix(cur, hist)
        for m in range(4):
            for n in range(3):
                assert s[m, n] == pytest.approx(sum(cur[m, k] * hist[n, k] for k in range(6)) / np.sqrt(6), abs=1e-12)
        assert np.array_equal(s[:, 3], np.zeros(4))

    def test_empty_history(self, rng):
        s = similarity_matrix(rng.normal(size=(3, 4)), [])
        assert s.shape == (3, 1) and np.array_equal(s, np.zeros((3, 1)))

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            similarity_matrix(rng.normal(size=(2, 4)), rng.normal(size=(2, 5)))


class TestSinkhorn:
    def test_single_new_object(self):
        assert np.array_equal(sinkhorn(np.zeros((1, 1))), [[1.0]])

    def test_converges_to_hungarian(self, rng):
        n = 5
        perm = rng.permutation(n)
        s = rng.uniform(-1, 0, size=(n, n + 1))
        s[:, -1] = 0.0
        s[np.arange(n), perm] = 3.0
        a = sinkhorn(s, 200, 0.05)
        rows, cols = linear_sum_assignment(-s[:, :-1])
        hard = np.zeros((n, n))
        hard[rows, cols] = 1.0
        assert np.allclose(a[:, :-1], hard, atol=1e-3)

    def test_row_sums_random(self, rng):
        a = sinkhorn(rng.normal(size=(5, 7)), 100, 0.1)
        assert_assignment_invariants(a)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_invariants_property(self, m, n, seed):
        rng = np.random.default_rng(seed)
        s = rng.uniform(-5, 5, size=(m, n))
        assert_assignment_invariants(sinkhorn(s, 100, 0.1))

    def test_extreme_scores_no_overflow(self, rng):
        s = rng.uniform(-50, 50, size=(4, 5))
        assert_assignment_invariants(sinkhorn(s, 100, 1.0))
        assert_assignment_invariants(sinkhorn(s / 10, 100, 0.1))

    def test_row_shift_invariance(self, rng):
        s = rng.normal(size=(4, 6))
        shifted = s.copy()
        shifted[2] += 0.37
        a, b = sinkhorn(s), sinkhorn(shifted)
        assert np.array_equal(a.argmax(axis=1), b.argmax(axis=1))
        assert np.allclose(a, b, atol=1e-6)

    def test_many_new_objects_share_dummy(self):
        s = np.zeros((4, 2))
        s[:, 0] = -3.0
        a = sinkhorn(s)
        assert np.all(a[:, 1] > 0.99)

    def test_errors(self):
        with pytest.raises(ValueError):
            sinkhorn(np.zeros((2, 2)), 0)
        with pytest.raises(ValueError):
            sinkhorn(np.zeros((2, 2)), 10, 0.0)

    def test_csv_round_trip(self, rng):
        a = sinkhorn(rng.normal(size=(3, 4)))
        text = assignment_to_csv(a)
        assert text.splitlines()[0] == "M_t=3,M_t-1=3"
        assert np.array_equal(assignment_from_csv(text), a)


class TestSoftMatch:
    def rois(self, rng, n):
        return [RoIFeature(rng.normal(size=(7, 7, C)), BBox2D(0, 0, 10, 10)) for _ in range(n)]

    def test_empty_history(self, rng):
        a, aligned = soft_match(self.rois(rng, 3), [], MotionContext(0.5, RigidTransform.identity()),
                                default_params(channels=C))
        assert np.array_equal(a, np.ones((3, 1))) and aligned == []

    def test_needs_current(self):
        with pytest.raises(ValueError):
            soft_match([], [], MotionContext(0.5, RigidTransform.identity()), default_params(channels=C))

    @pytest.mark.parametrize("mode", ["appearance_only", "motion_2d", "motion_3d"])
    def test_every_mode_gives_valid_assignment(self, rng, mode):
        rois = self.rois(rng, 4)
        hist = make_queries(rng, 3)
        pos = rng.normal(size=(4, 3))
        a, aligned = soft_match(rois, hist, MotionContext(0.5, RigidTransform.from_yaw(0.1)),
                                default_params(channels=C), MatchConfig(mode=mode),
                                cur_positions=pos, hist_positions=rng.normal(size=(3, 3)))
        assert a.shape == (4, 4) and len(aligned) == 3
        assert_assignment_invariants(a)

    def test_neutral_motion_ablation(self, rng):
        a, _ = soft_match(self.rois(rng, 3), make_queries(rng, 5), MotionContext(0.5, RigidTransform.identity()),
                          neutral_params(), MatchConfig(mode="motion_3d"), cur_positions=rng.normal(size=(3, 3)))
        assert_assignment_invariants(a)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            MatchConfig(mode="optical_flow")


def _run_two(cfg):
    frames = generate_scenario(cfg)
    gen = QueryGenerator(RunConfig(strategy="mono", mono_sigma=0.0))
    results = [gen.step(f) for f in frames]
    return frames, results


class TestSoftMatchOnScenes:
    def test_noiseless_persistent_objects(self):
        cfg = ScenarioConfig(num_objects=10, num_frames=6, spawn_x=(-20.0, 40.0), spawn_y=(-20.0, 20.0),
                             write_features=False)
        frames, results = _run_two(cfg)
        rows = [r for res in results[1:] for r in res.records if r.matched_ok is not None]
        assert len(rows) >= 30
        assert np.mean([r.matched_ok for r in rows]) >= 0.95

    def test_object_leaves_and_enters(self):
        objects = [
            {"id": 0, "position": [12.0, 6.0]},
            {"id": 1, "position": [14.0, -7.0]},
            {"id": 2, "position": [8.0, 9.0]},
            {"id": 3, "position": [-10.0, 8.0]},
            {"id": 4, "position": [6.0, -12.0], "despawn_frame": 1},
            {"id": 5, "position": [-8.0, -10.0], "spawn_frame": 1},
        ]
        frames, results = _run_two(ScenarioConfig(objects=objects, num_frames=2, write_features=False))
        prev, cur = frames
        assert 4 in {d.object_id for d in prev.detections}
        assert 5 in {d.object_id for d in cur.detections}
        a = results[1].assignment
        for j, det in enumerate(prev.detections):
            if det.object_id == 4:
                assert a[:, j].sum() < 0.2
        for i, det in enumerate(cur.detections):
            if det.object_id == 5:
                assert a[i, -1] >= 0.5
