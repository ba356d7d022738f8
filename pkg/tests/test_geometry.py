import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roistereo.errors import BehindCamera, DegenerateBox, SingularIntrinsics
from roistereo.geometry import (
    BBox2D,
    Intrinsics4,
    RigidTransform,
    align_point,
    camera_extrinsic,
    compose_ego_transform,
    equivalent_intrinsics,
    lift_to_world,
    project_to_roi,
    rotation_z,
    transform_points,
    warp_candidate,
    warp_candidates,
)

from conftest import random_intrinsics, random_transform


def matmul_loop(a, b):
    out = [[0.0] * 4 for _ in range(4)]
    for i in range(4):
        for j in range(4):
            out[i][j] = sum(a[i][k] * b[k][j] for k in range(4))
    return np.array(out)


class TestRigidTransform:
    def test_inverse_composes_to_identity(self, rng):
        for _ in range(50):
            t = random_transform(rng)
            assert np.allclose((t @ t.inverse()).matrix, np.eye(4), atol=1e-9)

    def test_rejects_reflection(self):
        m = np.eye(4)
        m[0, 0] = -1
        with pytest.raises(ValueError):
            RigidTransform(m)

    def test_rejects_bad_last_row(self):
        m = np.eye(4)
        m[3, 0] = 0.1
        with pytest.raises(ValueError):
            RigidTransform(m)

    def test_matrix_is_read_only(self):
        t = RigidTransform.identity()
        with pytest.raises(ValueError):
            t.matrix[0, 0] = 2.0


class TestComposeEgo:
    def test_self_composition_is_identity(self, rng):
        e = random_transform(rng)
        assert np.allclose(compose_ego_transform(e, e).matrix, np.eye(4), atol=1e-9)

    def test_identity_current_pose(self):
        prev = RigidTransform.from_yaw(0.0, (2.0, 0.0, 0.0))
        out = compose_ego_transform(prev, RigidTransform.identity())
        assert np.allclose(out.matrix, prev.matrix)

    def test_against_loop_oracle(self):
        prev = RigidTransform.from_yaw(np.radians(30), (1.0, -2.0, 0.5))
        cur = RigidTransform.from_yaw(np.radians(10))
        expected = matmul_loop(np.linalg.inv(cur.matrix).tolist(), prev.matrix.tolist())
        assert np.allclose(compose_ego_transform(prev, cur).matrix, expected, atol=1e-12)

    def test_ego_advance_shortens_forward_distance(self):
        # ego drives 2 m forward; a static point 10 m ahead is now 8 m ahead
        prev = RigidTransform.identity()
        cur = RigidTransform.from_yaw(0.0, (2.0, 0.0, 0.0))
        p = align_point(compose_ego_transform(prev, cur), [10.0, 0.0, 0.0])
        assert np.allclose(p, [8.0, 0.0, 0.0])


class TestAlignPoint:
    def test_identity(self):
        assert np.array_equal(align_point(RigidTransform.identity(), [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])

    def test_translation(self):
        t = RigidTransform.from_rt(np.eye(3), (0.0, 0.0, 5.0))
        assert np.allclose(align_point(t, [1.0, 2.0, 3.0]), [1.0, 2.0, 8.0])

    def test_yaw_quarter_turn(self):
        p = align_point(RigidTransform.from_yaw(np.pi / 2), [1.0, 0.0, 0.0])
        assert np.allclose(p, [0.0, 1.0, 0.0], atol=1e-12)

    def test_batch_matches_single(self, rng):
        t = random_transform(rng)
        pts = rng.normal(size=(5, 3))
        batch = align_point(t, pts)
        for i in range(5):
            assert np.allclose(batch[i], align_point(t, pts[i]))


class TestEquivalentIntrinsics:
    def test_paper_style_arithmetic(self):
        k = Intrinsics4(1000.0, 1000.0, 800.0, 450.0)
        eq = equivalent_intrinsics(k, BBox2D(100, 50, 300, 150), 7, 7)
        assert eq.fx == pytest.approx(35.0, abs=1e-12)
        assert eq.ox == pytest.approx(24.5, abs=1e-12)
        assert eq.fy == pytest.approx(70.0, abs=1e-12)
        assert eq.oy == pytest.approx((450 - 50) * 0.07, abs=1e-12)

    def test_full_image_box(self):
        k = Intrinsics4(500.0, 400.0, 320.0, 240.0)
        eq = equivalent_intrinsics(k, BBox2D(0, 0, 640, 480), 7, 7)
        assert eq.fx == pytest.approx(500 * 7 / 640)
        assert eq.ox == pytest.approx(320 * 7 / 640)
        assert eq.fy == pytest.approx(400 * 7 / 480)

    def test_matrix_rows(self):
        m = Intrinsics4(3.0, 4.0, 1.0, 2.0).matrix
        assert np.array_equal(m[2], [0, 0, 1, 0]) and np.array_equal(m[3], [0, 0, 0, 1])

    def test_degenerate_box(self):
        with pytest.raises(DegenerateBox):
            BBox2D(5, 5, 5, 10)
        with pytest.raises(DegenerateBox):
            BBox2D(0, 0, 1e-7, 1)

    def test_consistent_with_affine_rescale(self, rng):
        for _ in range(200):
            k = random_intrinsics(rng)
            t = random_transform(rng)
            cam = rng.uniform([-3, -3, 2], [3, 3, 40])
            p = t.inverse().apply(cam)
            x0, y0 = rng.uniform(0, 500, 2)
            box = BBox2D(x0, y0, x0 + rng.uniform(5, 300), y0 + rng.uniform(5, 300))
            u_img, v_img, d = project_to_roi(k, t, p)
            eq = equivalent_intrinsics(k, box, 7, 5)
            u, v, d2 = project_to_roi(eq, t, p)
            assert u == pytest.approx((u_img - box.x_min) * 7 / box.width, abs=1e-9)
            assert v == pytest.approx((v_img - box.y_min) * 5 / box.height, abs=1e-9)
            assert d2 == pytest.approx(d, abs=1e-12)


class TestProjectLift:
    def test_principal_ray(self):
        k = Intrinsics4(35.0, 35.0, 3.5, 3.5)
        assert np.allclose(project_to_roi(k, RigidTransform.identity(), [0, 0, 10]), [3.5, 3.5, 10])

    def test_canonical_camera_lift(self):
        k = Intrinsics4(1.0, 1.0, 0.0, 0.0)
        assert np.allclose(lift_to_world(k, RigidTransform.identity(), [2.0, 3.0, 4.0]), [8.0, 12.0, 4.0])

    def test_behind_camera(self):
        k = Intrinsics4(1.0, 1.0, 0.0, 0.0)
        with pytest.raises(BehindCamera):
            project_to_roi(k, RigidTransform.identity(), [0, 0, -1])
        with pytest.raises(BehindCamera):
            project_to_roi(k, RigidTransform.identity(), [0, 0, 1e-7])

    def test_singular_intrinsics(self):
        with pytest.raises(SingularIntrinsics):
            Intrinsics4(0.0, 1.0, 0.0, 0.0)
        with pytest.raises(SingularIntrinsics):
            lift_to_world(Intrinsics4(1e-13, 1.0, 0, 0), RigidTransform.identity(), [1, 1, 1])

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_round_trip_property(self, seed):
        rng = np.random.default_rng(seed)
        k = random_intrinsics(rng)
        t = random_transform(rng)
        p = t.inverse().apply(rng.uniform([-5, -5, 0.5], [5, 5, 80]))
        assert np.allclose(lift_to_world(k, t, project_to_roi(k, t, p)), p, atol=1e-9)


class TestWarp:
    def test_identity_warp(self, rng):
        k = random_intrinsics(rng)
        p = np.array([3.2, 4.1, 12.0])
        assert np.allclose(warp_candidate(k, RigidTransform.identity(), k.inverse_matrix, p), p)

    def test_axial_motion(self):
        # source camera sits delta behind the reference camera along its axis
        k = Intrinsics4(10.0, 10.0, 3.5, 3.5)
        m = RigidTransform.from_rt(np.eye(3), (0.0, 0.0, 2.0))
        out = warp_candidate(k, m, k.inverse_matrix, [3.5, 3.5, 8.0])
        assert np.allclose(out, [3.5, 3.5, 10.0])

    def test_matches_explicit_chain(self, rng):
        for _ in range(20):
            k_ref, k_src = random_intrinsics(rng), random_intrinsics(rng)
            m = random_transform(rng, 1.0)
            uvd = np.array([rng.uniform(0, 7), rng.uniform(0, 7), rng.uniform(5, 30)])
            p_ref_cam = lift_to_world(k_ref, RigidTransform.identity(), uvd)
            p_src_cam = m.apply(p_ref_cam)
            if p_src_cam[2] <= 0:
                continue
            expected = project_to_roi(k_src, RigidTransform.identity(), p_src_cam)
            assert np.allclose(warp_candidate(k_src, m, k_ref.inverse_matrix, uvd), expected, atol=1e-9)

    def test_behind_source_is_masked(self):
        k = Intrinsics4(10.0, 10.0, 3.5, 3.5)
        m = RigidTransform.from_rt(np.eye(3), (0.0, 0.0, -20.0))
        out, ok = warp_candidates(k, m, k.inverse_matrix, np.array([[3.5, 3.5, 8.0], [3.5, 3.5, 30.0]]))
        assert ok.tolist() == [False, True]
        assert np.isnan(out[0, 0])
        with pytest.raises(BehindCamera):
            warp_candidate(k, m, k.inverse_matrix, [3.5, 3.5, 8.0])


class TestCameraExtrinsic:
    def test_optical_axis_along_yaw(self):
        for yaw in np.radians([0, 30, 90, 200]):
            t = camera_extrinsic(yaw, (0.0, 0.0, 1.5))
            ahead = np.array([np.cos(yaw), np.sin(yaw), 0.0]) * 10 + [0, 0, 1.5]
            assert np.allclose(t.apply(ahead), [0, 0, 10], atol=1e-12)

    def test_image_axes(self):
        t = camera_extrinsic(0.0)
        # ego +y (left) is image -x; ego +z (up) is image -y
        assert np.allclose(t.apply([5, 1, 0]), [-1, 0, 5])
        assert np.allclose(t.apply([5, 0, 1]), [0, -1, 5])

    def test_rotation_z_convention(self):
        assert np.allclose(rotation_z(np.pi / 2) @ [1, 0, 0], [0, 1, 0])
        assert np.allclose(transform_points(np.eye(4), [[1, 2, 3]]), [[1, 2, 3]])
