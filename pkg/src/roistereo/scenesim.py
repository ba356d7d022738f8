"""Synthetic multi-camera scenes with textured billboard objects and exact ground truth.

Every object is a flat rectangle ("billboard") carrying a smooth, unit-norm
feature texture that depends only on the object's texture key and the
surface coordinate, so any two observations of the same surface point agree.
In every frame each billboard faces the camera whose optical axis is closest
to the object's bearing, parallel to that camera's image plane.

Coordinate frames: ``ego_pose`` maps ego to world coordinates; camera
extrinsics map ego coordinates of the same timestamp to camera coordinates.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError, DegenerateBox
from .featuregrid import FeatureMap
from .geometry import BBox2D, Intrinsics4, RigidTransform, camera_extrinsic, transform_points
from .gridio import read_grid, write_grid

NEW = None  # correspondence marker for objects absent from the previous frame


@dataclass
class ScenarioConfig:
    num_cameras: int = 6
    image_w: int = 480
    image_h: int = 240
    camera_yaw_offsets: list[float] | None = None  # radians; default 30 + 60*i degrees
    hfov_deg: float = 60.0
    fx: float | None = None  # derived from hfov_deg when omitted
    fy: float | None = None
    ox: float | None = None
    oy: float | None = None
    camera_height: float = 1.5
    ego_velocity: tuple[float, float] = (4.0, 0.0)  # world m/s
    ego_yaw_rate: float = 0.0  # rad/s
    ego_waypoints: list[list[float]] | None = None  # per-frame [x, y, yaw]
    num_objects: int = 20
    spawn_x: tuple[float, float] = (-40.0, 80.0)
    spawn_y: tuple[float, float] = (-30.0, 30.0)
    spawn_min_lateral: float = 6.0
    spawn_min_separation: float = 4.0
    object_height: float = 1.0
    velocity_range: tuple[float, float] = (0.0, 0.0)  # speed, m/s
    billboard_size: tuple[float, float] = (2.0, 1.5)  # width, height in meters
    objects: list[dict] | None = None  # explicit objects, overrides random spawning
    frame_dt: float = 0.5
    num_frames: int = 40
    channels: int = 32
    texture_terms: int = 6
    texture_cycles: tuple[float, float] = (0.4, 1.5)
    texture_contrast: float = 0.8  # bound on the summed sinusoid amplitude; the base has norm 1
    min_box_area: float = 100.0
    min_visible_fraction: float = 0.95
    min_depth: float = 3.0
    max_range: float = 60.0
    min_obliquity: float = 0.3
    occlusion_rate: float = 0.0
    box_jitter: float = 0.0
    write_features: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def bad(name: str, why: str):
            raise ConfigError(name, why)

        if self.num_cameras < 1:
            bad("num_cameras", "must be >= 1")
        if self.image_w < 8 or self.image_h < 8:
            bad("image_w", "image must be at least 8x8")
        if self.camera_yaw_offsets is not None and len(self.camera_yaw_offsets) != self.num_cameras:
            bad("camera_yaw_offsets", "needs one entry per camera")
        if not 0 < self.hfov_deg < 180:
            bad("hfov_deg", "must be in (0, 180)")
        for name in ("fx", "fy"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                bad(name, "focal length must be positive")
        if not self.frame_dt > 0:
            bad("frame_dt", "must be positive")
        if self.num_frames < 1:
            bad("num_frames", "must be >= 1")
        if self.num_objects < 0:
            bad("num_objects", "must be >= 0")
        if not all(s > 0 for s in self.billboard_size):
            bad("billboard_size", "extents must be positive")
        if self.spawn_x[0] >= self.spawn_x[1]:
            bad("spawn_x", "empty interval")
        if self.spawn_y[0] >= self.spawn_y[1]:
            bad("spawn_y", "empty interval")
        if max(abs(self.spawn_y[0]), abs(self.spawn_y[1])) < self.spawn_min_lateral:
            bad("spawn_min_lateral", "excludes the whole spawn region")
        if self.velocity_range[0] < 0 or self.velocity_range[0] > self.velocity_range[1]:
            bad("velocity_range", "must satisfy 0 <= low <= high")
        if self.channels < 1:
            bad("channels", "must be >= 1")
        if not 0 <= self.texture_contrast < 1:
            bad("texture_contrast", "must be in [0, 1) so feature vectors stay nonzero")
        if not 0 <= self.occlusion_rate <= 1:
            bad("occlusion_rate", "must be in [0, 1]")
        if self.box_jitter < 0:
            bad("box_jitter", "must be non-negative")
        if self.ego_waypoints is not None and len(self.ego_waypoints) < self.num_frames:
            bad("ego_waypoints", "needs one [x, y, yaw] per frame")

    @property
    def yaw_offsets(self) -> list[float]:
        if self.camera_yaw_offsets is not None:
            return list(self.camera_yaw_offsets)
        return [math.radians(30.0 + 360.0 * i / self.num_cameras) for i in range(self.num_cameras)]

    @property
    def intrinsics(self) -> Intrinsics4:
        f = (self.image_w / 2) / math.tan(math.radians(self.hfov_deg) / 2)
        return Intrinsics4(
            fx=self.fx if self.fx is not None else f,
            fy=self.fy if self.fy is not None else (self.fx if self.fx is not None else f),
            ox=self.ox if self.ox is not None else self.image_w / 2,
            oy=self.oy if self.oy is not None else self.image_h / 2,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in doc:
            if key not in known:
                raise ConfigError(key, "unknown scenario field")
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in doc:
                value = doc[f.name]
                if isinstance(value, list) and f.name in _TUPLE_FIELDS:
                    value = tuple(value)
                kwargs[f.name] = value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from exc


_TUPLE_FIELDS = {
    "ego_velocity", "spawn_x", "spawn_y", "velocity_range", "billboard_size", "texture_cycles",
}


@dataclass(frozen=True)
class Rig:
    intrinsics: tuple[Intrinsics4, ...]
    extrinsics: tuple[RigidTransform, ...]  # ego -> camera
    image_w: int
    image_h: int

    @property
    def num_cameras(self) -> int:
        return len(self.extrinsics)

    @classmethod
    def from_config(cls, cfg: ScenarioConfig) -> "Rig":
        k = cfg.intrinsics
        ext = tuple(camera_extrinsic(y, (0.0, 0.0, cfg.camera_height)) for y in cfg.yaw_offsets)
        return cls(intrinsics=(k,) * len(ext), extrinsics=ext, image_w=cfg.image_w, image_h=cfg.image_h)


@dataclass(frozen=True, eq=False)
class Texture:
    base: np.ndarray  # (C,)
    freqs: np.ndarray  # (K, 2) cycles per billboard
    phases: np.ndarray  # (K,)
    amps: np.ndarray  # (K, C)

    @classmethod
    def generate(cls, seed: int, key: int, channels: int, terms: int,
                 cycles: tuple[float, float], contrast: float = 0.8) -> "Texture":
        rng = np.random.default_rng([seed, 7919, key])
        base = rng.normal(size=channels)
        base /= np.linalg.norm(base)
        mag = rng.uniform(*cycles, size=terms)
        ang = rng.uniform(0, 2 * np.pi, size=terms)
        freqs = np.stack([mag * np.cos(ang), mag * np.sin(ang)], axis=1)
        amps = rng.normal(size=(terms, channels))
        amps *= contrast / np.linalg.norm(amps, axis=1).sum()
        return cls(base=base, freqs=freqs, phases=rng.uniform(0, 2 * np.pi, size=terms), amps=amps)

    def __call__(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Unit-norm feature vectors at surface coordinates ``s, t`` in [0, 1]."""
        arg = 2 * np.pi * (s[..., None] * self.freqs[:, 0] + t[..., None] * self.freqs[:, 1]) + self.phases
        val = self.base + np.sin(arg) @ self.amps
        return val / np.linalg.norm(val, axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class ObjectSpec:
    object_id: int
    start: np.ndarray  # world position at frame 0 (center)
    velocity: np.ndarray  # world BEV velocity
    size: tuple[float, float]
    texture: Texture
    spawn_frame: int = 0
    despawn_frame: int | None = None

    def center(self, t: float) -> np.ndarray:
        return self.start + np.array([self.velocity[0], self.velocity[1], 0.0]) * t

    def alive(self, frame: int) -> bool:
        return frame >= self.spawn_frame and (self.despawn_frame is None or frame < self.despawn_frame)

    def corners(self, t: float, axes: "BillboardAxes") -> np.ndarray:
        c = self.center(t)
        hw, hh = self.size[0] / 2, self.size[1] / 2
        return np.array([c + su * hw * axes.u + sv * hh * axes.v
                         for su, sv in ((-1, -1), (1, -1), (1, 1), (-1, 1))])


@dataclass(frozen=True, eq=False)
class BillboardAxes:
    """World-frame orientation of a billboard in one frame."""

    normal: np.ndarray  # towards the facing camera
    u: np.ndarray  # along the width
    v: np.ndarray  # along the height, pointing down
    camera: int


@dataclass
class Detection:
    box: BBox2D
    object_id: int


@dataclass
class ObjectState:
    object_id: int
    center_world: np.ndarray
    center_ego: np.ndarray
    velocity: np.ndarray
    visible: list[bool]
    occluded: bool = False


class SceneFrame:
    """One timestamp: ego pose, object ground truth, detections and feature maps."""

    def __init__(self, index: int, timestamp: float, ego_pose: RigidTransform, rig: Rig,
                 objects: list[ObjectState], detections: list[Detection], feature_source):
        self.index = index
        self.timestamp = timestamp
        self.ego_pose = ego_pose
        self.rig = rig
        self.objects = objects
        self.detections = detections
        self._feature_source = feature_source
        self._features: dict[int, FeatureMap] = {}

    def feature_map(self, camera: int) -> FeatureMap:
        if camera not in self._features:
            self._features[camera] = self._feature_source(self, camera)
        return self._features[camera]

    def drop_features(self) -> None:
        self._features.clear()

    def object(self, object_id: int) -> ObjectState:
        for o in self.objects:
            if o.object_id == object_id:
                return o
        raise KeyError(object_id)

    def gt_center(self, det_index: int) -> np.ndarray:
        return self.object(self.detections[det_index].object_id).center_ego

    def gt_depth(self, det_index: int) -> float:
        det = self.detections[det_index]
        cam = self.rig.extrinsics[det.box.camera_index]
        return float(cam.apply(self.gt_center(det_index))[2])


class Renderer:
    """Ray-casts billboards into per-camera feature maps."""

    def __init__(self, cfg: ScenarioConfig, rig: Rig, specs: Sequence[ObjectSpec]):
        self.cfg = cfg
        self.rig = rig
        self.specs = list(specs)

    def __call__(self, frame: SceneFrame, camera: int) -> FeatureMap:
        cfg, rig = self.cfg, self.rig
        k = rig.intrinsics[camera]
        world_to_cam = rig.extrinsics[camera].matrix @ frame.ego_pose.inverse().matrix
        rot = world_to_cam[:3, :3]
        data = np.zeros((rig.image_h, rig.image_w, cfg.channels))
        zbuf = np.full((rig.image_h, rig.image_w), np.inf)
        t = frame.timestamp
        for spec in self.specs:
            if not spec.alive(frame.index):
                continue
            axes = billboard_axes(rig, frame.ego_pose, spec.center(t))
            corners = transform_points(world_to_cam, spec.corners(t, axes))
            if np.any(corners[:, 2] <= 1e-3):
                continue
            px = k.fx * corners[:, 0] / corners[:, 2] + k.ox
            py = k.fy * corners[:, 1] / corners[:, 2] + k.oy
            x0 = max(int(np.floor(px.min() - 0.5)), 0)
            x1 = min(int(np.ceil(px.max() + 0.5)), rig.image_w - 1)
            y0 = max(int(np.floor(py.min() - 0.5)), 0)
            y1 = min(int(np.ceil(py.max() + 0.5)), rig.image_h - 1)
            if x0 > x1 or y0 > y1:
                continue
            xs, ys = np.meshgrid(np.arange(x0, x1 + 1) + 0.5, np.arange(y0, y1 + 1) + 0.5)
            rays = np.stack([(xs - k.ox) / k.fx, (ys - k.oy) / k.fy, np.ones_like(xs)], axis=-1)
            center = transform_points(world_to_cam, spec.center(t))
            normal = rot @ axes.normal
            denom = rays @ normal
            with np.errstate(divide="ignore", invalid="ignore"):
                depth = (center @ normal) / denom
            hit = rays * depth[..., None]
            rel = hit - center
            a = rel @ (rot @ axes.u) / (spec.size[0] / 2)
            b = rel @ (rot @ axes.v) / (spec.size[1] / 2)
            sub_z = zbuf[y0:y1 + 1, x0:x1 + 1]
            inside = (np.abs(a) <= 1) & (np.abs(b) <= 1) & (depth > 0) & (depth < sub_z)
            if not inside.any():
                continue
            feats = spec.texture((a[inside] + 1) / 2, (b[inside] + 1) / 2)
            sub_d = data[y0:y1 + 1, x0:x1 + 1]
            sub_d[inside] = feats
            sub_z[inside] = depth[inside]
        return FeatureMap(data=data, camera_index=camera, timestamp=t)


def _ego_pose(cfg: ScenarioConfig, frame: int) -> RigidTransform:
    if cfg.ego_waypoints is not None:
        x, y, yaw = cfg.ego_waypoints[frame][:3]
        return RigidTransform.from_yaw(yaw, (x, y, 0.0))
    t = frame * cfg.frame_dt
    vx, vy = cfg.ego_velocity
    return RigidTransform.from_yaw(cfg.ego_yaw_rate * t, (vx * t, vy * t, 0.0))


def billboard_axes(rig: Rig, ego_pose: RigidTransform, position: np.ndarray) -> BillboardAxes:
    """Orientation facing the camera whose optical axis is closest to the object's bearing."""
    local = ego_pose.inverse().apply(position)
    bearing = math.atan2(local[1], local[0])
    best, best_gap = 0, np.inf
    for i, ext in enumerate(rig.extrinsics):
        fwd = ext.rotation[2]
        gap = abs(math.remainder(bearing - math.atan2(fwd[1], fwd[0]), 2 * math.pi))
        if gap < best_gap:
            best, best_gap = i, gap
    cam_to_world = ego_pose.rotation @ rig.extrinsics[best].rotation.T
    return BillboardAxes(-cam_to_world[:, 2], cam_to_world[:, 0], cam_to_world[:, 1], best)


def _spawn_objects(cfg: ScenarioConfig, rig: Rig, rng: np.random.Generator) -> list[ObjectSpec]:
    specs = []
    if cfg.objects is not None:
        for i, entry in enumerate(cfg.objects):
            oid = int(entry.get("id", i))
            x, y = entry["position"][:2]
            vel = np.asarray(entry.get("velocity", (0.0, 0.0)), dtype=np.float64)
            spawn = int(entry.get("spawn_frame", 0))
            despawn = entry.get("despawn_frame")
            key = int(entry.get("texture_key", oid))
            pos = np.array([x, y, cfg.object_height], dtype=np.float64)
            specs.append(ObjectSpec(
                oid, pos, vel, tuple(cfg.billboard_size),
                Texture.generate(cfg.seed, key, cfg.channels, cfg.texture_terms, cfg.texture_cycles,
                             cfg.texture_contrast),
                spawn_frame=spawn, despawn_frame=None if despawn is None else int(despawn),
            ))
        return specs

    placed: list[np.ndarray] = []
    attempts = 0
    while len(specs) < cfg.num_objects:
        attempts += 1
        if attempts > 10000 * max(cfg.num_objects, 1):
            raise ConfigError("num_objects", "cannot place objects with the given spacing")
        x = rng.uniform(*cfg.spawn_x)
        y = rng.uniform(*cfg.spawn_y)
        if abs(y) < cfg.spawn_min_lateral:
            continue
        pos = np.array([x, y, cfg.object_height])
        if any(np.linalg.norm(pos[:2] - p[:2]) < cfg.spawn_min_separation for p in placed):
            continue
        speed = rng.uniform(*cfg.velocity_range)
        heading = rng.uniform(0, 2 * np.pi)
        vel = speed * np.array([np.cos(heading), np.sin(heading)])
        oid = len(specs)
        specs.append(ObjectSpec(
            oid, pos, vel, tuple(cfg.billboard_size),
            Texture.generate(cfg.seed, oid, cfg.channels, cfg.texture_terms, cfg.texture_cycles,
                             cfg.texture_contrast),
        ))
        placed.append(pos)
    return specs


def _check_geometry(cfg: ScenarioConfig, rig: Rig) -> None:
    if cfg.objects is not None:
        return
    pose = _ego_pose(cfg, 0)
    pts = np.array([[x, y, cfg.object_height] for x in cfg.spawn_x for y in cfg.spawn_y]
                   + [[sum(cfg.spawn_x) / 2, sum(cfg.spawn_y) / 2, cfg.object_height]])
    local = pose.inverse().apply(pts)
    for ext in rig.extrinsics:
        if np.any(ext.apply(local)[:, 2] > cfg.min_depth):
            return
    raise ConfigError("spawn_x", "spawn region lies behind every camera")


def _project_box(cfg: ScenarioConfig, rig: Rig, camera: int, corners_cam: np.ndarray):
    """Clipped box and visible fraction of a billboard, or None if unusable."""
    if np.any(corners_cam[:, 2] <= cfg.min_depth * 0.5):
        return None
    k = rig.intrinsics[camera]
    px = k.fx * corners_cam[:, 0] / corners_cam[:, 2] + k.ox
    py = k.fy * corners_cam[:, 1] / corners_cam[:, 2] + k.oy
    full = (px.min(), py.min(), px.max(), py.max())
    clipped = (max(full[0], 0.0), max(full[1], 0.0), min(full[2], rig.image_w), min(full[3], rig.image_h))
    if clipped[2] <= clipped[0] or clipped[3] <= clipped[1]:
        return None
    area = (clipped[2] - clipped[0]) * (clipped[3] - clipped[1])
    full_area = (full[2] - full[0]) * (full[3] - full[1])
    return clipped, area, area / full_area


def generate_scenario(cfg: ScenarioConfig) -> list[SceneFrame]:
    """Deterministic timeline of frames for ``cfg`` (same seed, same frames)."""
    cfg.validate()
    rig = Rig.from_config(cfg)
    _check_geometry(cfg, rig)
    rng = np.random.default_rng(cfg.seed)
    specs = _spawn_objects(cfg, rig, rng)
    renderer = Renderer(cfg, rig, specs)
    event_rng = np.random.default_rng([cfg.seed, 1])
    jitter_rng = np.random.default_rng([cfg.seed, 2])
    radius = 0.5 * math.hypot(*cfg.billboard_size)

    frames = []
    for fi in range(cfg.num_frames):
        t = fi * cfg.frame_dt
        pose = _ego_pose(cfg, fi)
        world_to_ego = pose.inverse()
        occluded_now = event_rng.random(len(specs)) < cfg.occlusion_rate
        states: list[ObjectState] = []
        candidates: list[list[tuple]] = [[] for _ in range(rig.num_cameras)]
        for si, spec in enumerate(specs):
            if not spec.alive(fi):
                continue
            cw = spec.center(t)
            ce = world_to_ego.apply(cw)
            states.append(ObjectState(spec.object_id, cw, ce, spec.velocity.copy(),
                                      [False] * rig.num_cameras, bool(occluded_now[si])))
            axes = billboard_axes(rig, pose, cw)
            corners_ego = world_to_ego.apply(spec.corners(t, axes))
            normal_ego = world_to_ego.rotation @ axes.normal
            for cam, ext in enumerate(rig.extrinsics):
                cc = ext.apply(ce)
                if cc[2] <= cfg.min_depth or np.linalg.norm(ce[:2]) > cfg.max_range:
                    continue
                view = (ext.rotation.T @ cc) / np.linalg.norm(cc)
                if abs(view @ normal_ego) < cfg.min_obliquity:
                    continue
                proj = _project_box(cfg, rig, cam, ext.apply(corners_ego))
                if proj is None:
                    continue
                clipped, area, frac = proj
                if area < cfg.min_box_area or frac < cfg.min_visible_fraction:
                    continue
                k = rig.intrinsics[cam]
                centre_px = np.array([k.fx * cc[0] / cc[2] + k.ox, k.fy * cc[1] / cc[2] + k.oy])
                candidates[cam].append((cc[2], len(states) - 1, clipped, centre_px, k.fx * radius / cc[2]))

        detections: list[Detection] = []
        for cam in range(rig.num_cameras):
            cands = sorted(candidates[cam], key=lambda c: c[0])
            for i, (depth, state_idx, clipped, centre, rad) in enumerate(cands):
                blocked = any(
                    np.linalg.norm(centre - other[3]) < rad + other[4] for other in cands[:i]
                )
                state = states[state_idx]
                if blocked or state.occluded:
                    continue
                state.visible[cam] = True
                box = clipped
                if cfg.box_jitter > 0:
                    box = tuple(np.asarray(box) + jitter_rng.uniform(-cfg.box_jitter, cfg.box_jitter, 4))
                try:
                    bbox = BBox2D(*box, camera_index=cam)
                except DegenerateBox:
                    continue
                detections.append(Detection(bbox, state.object_id))
        frames.append(SceneFrame(fi, t, pose, rig, states, detections, renderer))
    return frames


def crossing_config(seed: int = 0, **overrides) -> ScenarioConfig:
    """Two identically textured objects whose image paths cross, plus static clutter.

    The ego stands still; object 0 drives away along +x at y=6 m while object 1
    drives towards the ego at y=11 m, so they swap image order in camera 0.
    """
    objects = [
        {"id": 0, "position": [2.0, 6.0], "velocity": [3.0, 0.0], "texture_key": 100},
        {"id": 1, "position": [20.0, 11.0], "velocity": [-3.0, 0.0], "texture_key": 100},
        {"id": 2, "position": [25.0, -8.0]},
        {"id": 3, "position": [-15.0, 9.0]},
        {"id": 4, "position": [-12.0, -10.0]},
    ]
    doc = {"objects": objects, "num_frames": 14, "ego_velocity": (0.0, 0.0), "seed": seed}
    doc.update(overrides)
    return ScenarioConfig(**doc)


def oracle_correspondences(prev: SceneFrame, cur: SceneFrame) -> dict[int, int | None]:
    """Map each current detection index to a previous detection of the same object.

    A detection in the same camera is preferred; objects without any previous
    detection map to :data:`NEW`.
    """
    out: dict[int, int | None] = {}
    for i, det in enumerate(cur.detections):
        match = NEW
        for j, pdet in enumerate(prev.detections):
            if pdet.object_id != det.object_id:
                continue
            if match is NEW or pdet.box.camera_index == det.box.camera_index:
                match = j
                if pdet.box.camera_index == det.box.camera_index:
                    break
        out[i] = match
    return out


@dataclass
class Metrics:
    translation_errors: np.ndarray
    depth_errors: np.ndarray
    association_accuracy: float | None = None
    num_associations: int = 0

    @staticmethod
    def _summary(x: np.ndarray) -> dict[str, float]:
        if x.size == 0:
            return {"mean": float("nan"), "median": float("nan"), "p90": float("nan")}
        return {"mean": float(np.mean(x)), "median": float(np.median(x)),
                "p90": float(np.percentile(x, 90))}

    def summary(self) -> dict[str, Any]:
        return {
            "translation": self._summary(self.translation_errors),
            "depth": self._summary(self.depth_errors),
            "association_accuracy": self.association_accuracy,
            "count": int(self.translation_errors.size),
        }


def evaluate(
    predicted: Sequence[np.ndarray],
    frame: SceneFrame,
    assignment: dict[int, int | None] | None = None,
    oracle: dict[int, int | None] | None = None,
    prev_frame: SceneFrame | None = None,
) -> Metrics:
    """Per-detection translation and depth errors, plus association accuracy.

    ``assignment`` and ``oracle`` map current detection indices to previous
    detection indices (or :data:`NEW`); two previous detections count as the
    same answer when they show the same object.
    """
    if len(predicted) != len(frame.detections):
        raise ValueError("one prediction per detection is required")
    trans, depth = [], []
    for i, p in enumerate(predicted):
        gt = frame.gt_center(i)
        trans.append(np.linalg.norm(np.asarray(p) - gt))
        ext = frame.rig.extrinsics[frame.detections[i].box.camera_index]
        depth.append(abs(ext.apply(np.asarray(p))[2] - ext.apply(gt)[2]))
    acc, n = None, 0
    if assignment is not None and oracle is not None:
        hits = 0
        for i, truth in oracle.items():
            guess = assignment.get(i, NEW)
            if truth is NEW or guess is NEW:
                ok = truth is guess
            elif prev_frame is not None:
                ok = prev_frame.detections[guess].object_id == prev_frame.detections[truth].object_id
            else:
                ok = guess == truth
            hits += ok
            n += 1
        acc = hits / n if n else None
    return Metrics(np.asarray(trans, dtype=np.float64), np.asarray(depth, dtype=np.float64), acc, n)


def save_scenario(frames: Sequence[SceneFrame], cfg: ScenarioConfig, out_dir) -> Path:
    """Write ``scenario.json`` (and feature grids when enabled) into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    feat_dir = out / "features"
    if cfg.write_features:
        feat_dir.mkdir(exist_ok=True)
    frame_docs = []
    for fr in frames:
        feats = []
        if cfg.write_features:
            for cam in range(fr.rig.num_cameras):
                rel = f"features/f{fr.index:04d}_c{cam}.bin"
                write_grid(out / rel, fr.feature_map(cam).data)
                feats.append(rel)
            fr.drop_features()
        frame_docs.append({
            "index": fr.index,
            "timestamp": fr.timestamp,
            "ego_pose": [float(x) for x in fr.ego_pose.matrix.ravel()],
            "objects": [
                {"id": o.object_id, "center": [float(x) for x in o.center_world],
                 "velocity": [float(x) for x in o.velocity], "visible": o.visible,
                 "occluded": o.occluded}
                for o in fr.objects
            ],
            "boxes": [[d.box.camera_index, d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max]
                      for d in fr.detections],
            "box_object_ids": [d.object_id for d in fr.detections],
            "features": feats,
        })
    path = out / "scenario.json"
    path.write_text(json.dumps({"config": cfg.to_dict(), "frames": frame_docs}, indent=1))
    return path


class _GridLoader:
    def __init__(self, root: Path, paths: list[list[str]]):
        self.root = root
        self.paths = paths

    def __call__(self, frame: SceneFrame, camera: int) -> FeatureMap:
        data, _ = read_grid(self.root / self.paths[frame.index][camera])
        return FeatureMap(data=data, camera_index=camera, timestamp=frame.timestamp)


def load_scenario(path) -> tuple[ScenarioConfig, list[SceneFrame]]:
    """Read a scenario file; features come from the grid files or are re-rendered."""
    path = Path(path)
    doc = json.loads(path.read_text())
    cfg = ScenarioConfig.from_dict(doc["config"])
    rig = Rig.from_config(cfg)
    feature_paths = [f.get("features", []) for f in doc["frames"]]
    if all(len(p) == rig.num_cameras for p in feature_paths):
        source = _GridLoader(path.parent, feature_paths)
    else:
        rng = np.random.default_rng(cfg.seed)
        source = Renderer(cfg, rig, _spawn_objects(cfg, rig, rng))
    frames = []
    for f in doc["frames"]:
        pose = RigidTransform(np.asarray(f["ego_pose"], dtype=np.float64).reshape(4, 4))
        to_ego = pose.inverse()
        objects = [
            ObjectState(o["id"], np.asarray(o["center"]), to_ego.apply(np.asarray(o["center"])),
                        np.asarray(o["velocity"]), list(o["visible"]), bool(o.get("occluded", False)))
            for o in f["objects"]
        ]
        dets = [Detection(BBox2D(b[1], b[2], b[3], b[4], camera_index=int(b[0])), int(oid))
                for b, oid in zip(f["boxes"], f["box_object_ids"])]
        frames.append(SceneFrame(int(f["index"]), float(f["timestamp"]), pose, rig, objects, dets, source))
    return cfg, frames
