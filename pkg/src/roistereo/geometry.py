"""Homogeneous camera geometry: rigid transforms, RoI intrinsics, 2.5D points.

Conventions: right-handed frames, camera looks down +z with u to the right
and v down. Ego frames are x forward, y left, z up. A 2.5D point is the
array ``(u, v, d)`` with ``d`` the metric depth along the camera z axis, and
``(u*d, v*d, d, 1)`` is its homogeneous form.

RoI pixel index ``j`` sits at continuous coordinate ``u = j + 0.5``; the same
half-pixel convention holds for image pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, DegenerateBox, SingularIntrinsics

DEPTH_EPS = 1e-6
BOX_EPS = 1e-6
FOCAL_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """4x4 rigid transform with an orthonormal, right-handed rotation block."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
        r = m[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or np.linalg.det(r) < 0:
            raise ValueError("rotation block is not a proper rotation")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=1e-12):
            raise ValueError("last row must be (0, 0, 0, 1)")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(4))

    @classmethod
    def from_rt(cls, rotation, translation) -> "RigidTransform":
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = np.asarray(translation, dtype=np.float64).reshape(3)
        return cls(m)

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Rotation about +z by ``yaw`` radians (x toward y), then translation."""
        return cls.from_rt(rotation_z(yaw), translation)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def inverse(self) -> "RigidTransform":
        r = self.rotation
        m = np.eye(4)
        m[:3, :3] = r.T
        m[:3, 3] = -r.T @ self.translation
        return RigidTransform(m)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.matrix @ other.matrix)

    def apply(self, points) -> np.ndarray:
        return transform_points(self.matrix, points)


def rotation_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Intrinsics4:
    """Pinhole intrinsics stored in the 4x4 homogeneous layout."""

    fx: float
    fy: float
    ox: float
    oy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise SingularIntrinsics(f"focal lengths must be positive, got {self.fx}, {self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.fx, 0.0, self.ox, 0.0],
                [0.0, self.fy, self.oy, 0.0],
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ]
        )

    @property
    def inverse_matrix(self) -> np.ndarray:
        if self.fx < FOCAL_EPS or self.fy < FOCAL_EPS:
            raise SingularIntrinsics("focal length underflows epsilon")
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.ox / self.fx, 0.0],
                [0.0, 1.0 / self.fy, -self.oy / self.fy, 0.0],
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True)
class BBox2D:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    camera_index: int = 0

    def __post_init__(self):
        if not (self.x_max - self.x_min > BOX_EPS and self.y_max - self.y_min > BOX_EPS):
            raise DegenerateBox(
                f"box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max}) has no area"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2])


def transform_points(matrix: np.ndarray, points) -> np.ndarray:
    """Apply a 4x4 matrix to 3-vectors (``(3,)`` or ``(N, 3)``), extending with 1."""
    p = np.asarray(points, dtype=np.float64)
    flat = p.reshape(-1, 3)
    h = np.hstack([flat, np.ones((flat.shape[0], 1))]) @ matrix.T
    out = h[:, :3] / h[:, 3:4]
    return out.reshape(p.shape)


def compose_ego_transform(e_prev: RigidTransform, e_cur: RigidTransform) -> RigidTransform:
    """Ego motion from the previous to the current timestamp: ``E_cur^-1 @ E_prev``.

    Both poses map ego coordinates to world coordinates, so the result maps a
    point expressed in the previous ego frame into the current one.
    """
    return e_cur.inverse() @ e_prev


def align_point(t: RigidTransform, p) -> np.ndarray:
    return transform_points(t.matrix, p)


def equivalent_intrinsics(k: Intrinsics4, box: BBox2D, roi_w: int, roi_h: int) -> Intrinsics4:
    """Intrinsics under which RoI-grid coordinates obey the pinhole model.

    RoI-Align rescales the box to ``roi_w x roi_h`` cells; with
    ``rx = roi_w / box_w`` the RoI coordinate is ``(x - x_min) * rx``.
    """
    if roi_w < 1 or roi_h < 1:
        raise ValueError("RoI size must be at least 1")
    w, h = box.x_max - box.x_min, box.y_max - box.y_min
    if w <= BOX_EPS or h <= BOX_EPS:
        raise DegenerateBox("box width or height underflows epsilon")
    rx, ry = roi_w / w, roi_h / h
    return Intrinsics4(
        fx=k.fx * rx,
        fy=k.fy * ry,
        ox=(k.ox - box.x_min) * rx,
        oy=(k.oy - box.y_min) * ry,
    )


def project_to_roi(k_eq: Intrinsics4, t_ext: RigidTransform, p_world) -> np.ndarray:
    """Project a 3D point into RoI coordinates, returning ``(u, v, d)``."""
    q = k_eq.matrix @ t_ext.matrix @ np.append(np.asarray(p_world, dtype=np.float64), 1.0)
    q = q / q[3]
    d = q[2]
    if not d > DEPTH_EPS:
        raise BehindCamera(f"camera-frame depth {d:.3g} is not positive")
    return np.array([q[0] / d, q[1] / d, d])


def lift_to_world(k_eq: Intrinsics4, t_ext: RigidTransform, p) -> np.ndarray:
    """Inverse of :func:`project_to_roi` for a point with known depth."""
    u, v, d = np.asarray(p, dtype=np.float64)
    if not d > 0:
        raise BehindCamera(f"depth {d:.3g} is not positive")
    h = t_ext.inverse().matrix @ k_eq.inverse_matrix @ np.array([u * d, v * d, d, 1.0])
    return h[:3] / h[3]


def warp_candidates(
    k_src: Intrinsics4, m_ref2src: RigidTransform, k_ref_inv: np.ndarray, uvd: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised warp of ``(N, 3)`` 2.5D reference points into the source RoI.

    Returns the warped ``(N, 3)`` points and a boolean mask that is False where
    the warped depth is not positive. Invalid rows hold NaN in u and v.
    """
    uvd = np.asarray(uvd, dtype=np.float64).reshape(-1, 3)
    d = uvd[:, 2]
    hom = np.stack([uvd[:, 0] * d, uvd[:, 1] * d, d, np.ones_like(d)], axis=1)
    proj = k_src.matrix @ m_ref2src.matrix @ k_ref_inv
    q = hom @ proj.T
    q = q[:, :3] / q[:, 3:4]
    depth = q[:, 2]
    ok = depth > DEPTH_EPS
    safe = np.where(ok, depth, 1.0)
    u = np.where(ok, q[:, 0] / safe, np.nan)
    v = np.where(ok, q[:, 1] / safe, np.nan)
    return np.stack([u, v, depth], axis=1), ok


def warp_candidate(
    k_src: Intrinsics4, m_ref2src: RigidTransform, k_ref_inv: np.ndarray, p
) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if not p[2] > 0:
        raise BehindCamera("candidate depth must be positive")
    out, ok = warp_candidates(k_src, m_ref2src, k_ref_inv, p[None])
    if not ok[0]:
        raise BehindCamera(f"warped depth {out[0, 2]:.3g} is not positive")
    return out[0]


def camera_extrinsic(yaw: float, position=(0.0, 0.0, 0.0)) -> RigidTransform:
    """Ego-to-camera transform for a camera yawed by ``yaw`` about ego +z.

    The camera's optical axis points along ``(cos yaw, sin yaw, 0)`` in the ego
    frame, image x to the right and image y toward ego -z.
    """
    c, s = np.cos(yaw), np.sin(yaw)
    r = np.array(
        [
            [s, -c, 0.0],
            [0.0, 0.0, -1.0],
            [c, s, 0.0],
        ]
    )
    return RigidTransform.from_rt(r, -r @ np.asarray(position, dtype=np.float64))
