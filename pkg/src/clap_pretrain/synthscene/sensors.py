"""Sphere-traced LiDAR and pinhole-camera simulators."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .primitives import Scene

HIT_EPS = 1e-6
MAX_STEPS = 256
LIGHT_DIR = np.array([0.4, 0.3, 1.0]) / np.linalg.norm([0.4, 0.3, 1.0])
AMBIENT = 0.25

DEFAULT_LIDAR_ORIGIN = np.array([0.0, 0.0, 1.8])
DEFAULT_ELEVATIONS = tuple(np.linspace(-30.0, -2.0, 16))
DEFAULT_AZIMUTH_STEPS = 64
DEFAULT_IMAGE_SIZE = 64


def luminance(rgb: np.ndarray) -> np.ndarray:
    return rgb @ np.array([0.2126, 0.7152, 0.0722])


def ray_box(origins: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Slab test; returns (t_enter, t_exit) per ray, t_exit < t_enter on a miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    t0 = np.where(np.isnan(t0), -np.inf, t0)
    t1 = np.where(np.isnan(t1), np.inf, t1)
    t_enter = np.minimum(t0, t1).max(axis=-1)
    t_exit = np.maximum(t0, t1).min(axis=-1)
    return t_enter, t_exit


def sphere_trace(scene: Scene, origins: np.ndarray, dirs: np.ndarray, t_max: np.ndarray,
                 eps: float = HIT_EPS, max_steps: int = MAX_STEPS):
    """March each ray by the composite SDF until ``|sdf| < eps``.

    Returns ``(t, hit)``; rays leaving ``[0, t_max]`` or out of steps miss.
    """
    n = origins.shape[0]
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.arange(n)
    for _ in range(max_steps):
        if active.size == 0:
            break
        p = origins[active] + t[active, None] * dirs[active]
        d = scene.sdf(p)
        done = np.abs(d) < eps
        hit[active[done]] = True
        t[active] += np.where(done, 0.0, d)
        alive = ~done & (t[active] <= t_max[active]) & (t[active] >= 0.0)
        active = active[alive]
    return t, hit


@dataclass
class PointCloud:
    """LiDAR returns with per-point ground truth.

    ``points`` is (N, 3 + d); the extra channel is a fake intensity equal to the
    albedo luminance of the surface hit. ``directions``/``ranges`` describe the
    originating rays from ``origin``.
    """

    points: np.ndarray
    origin: np.ndarray
    directions: np.ndarray
    ranges: np.ndarray
    prim_id: np.ndarray
    semantic: np.ndarray
    normals: np.ndarray
    curvature: np.ndarray

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def features(self) -> np.ndarray:
        return self.points[:, 3:]

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.points[idx], self.origin, self.directions[idx], self.ranges[idx],
                          self.prim_id[idx], self.semantic[idx], self.normals[idx], self.curvature[idx])


def lidar_directions(azimuth_steps: int, elevation_angles) -> np.ndarray:
    az = np.arange(azimuth_steps) * (2 * np.pi / azimuth_steps)
    el = np.deg2rad(np.asarray(elevation_angles, dtype=np.float64))
    A, E = np.meshgrid(az, el, indexing="ij")
    d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], -1)
    return d.reshape(-1, 3)


def _cast(scene: Scene, origin: np.ndarray, dirs: np.ndarray):
    origins = np.broadcast_to(origin, dirs.shape)
    _, t_exit = ray_box(origins, dirs, scene.bbox_min, scene.bbox_max)
    return sphere_trace(scene, origins, dirs, t_exit)


def simulate_lidar(scene: Scene, origin=DEFAULT_LIDAR_ORIGIN, azimuth_steps: int = DEFAULT_AZIMUTH_STEPS,
                   elevation_angles=DEFAULT_ELEVATIONS, directions: np.ndarray | None = None) -> PointCloud:
    """Trace a spinning LiDAR; rays that leave the scene box without a hit are dropped."""
    origin = np.asarray(origin, dtype=np.float64)
    if np.any(origin <= scene.bbox_min) or np.any(origin >= scene.bbox_max) or scene.sdf(origin[None])[0] <= 0:
        raise ValueError("LiDAR origin must lie inside the scene box and outside all geometry")
    dirs = lidar_directions(azimuth_steps, elevation_angles) if directions is None else np.asarray(directions, float)
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    t, hit = _cast(scene, origin, dirs)
    dirs, t = dirs[hit], t[hit]
    xyz = origin + t[:, None] * dirs
    pid = scene.primitive_id(xyz)
    intensity = luminance(scene.albedo(pid))
    return PointCloud(
        points=np.concatenate([xyz, intensity[:, None]], axis=1),
        origin=origin.copy(),
        directions=dirs,
        ranges=t,
        prim_id=pid,
        semantic=scene.semantic(pid),
        normals=scene.normals(xyz),
        curvature=scene.curvature(xyz),
    )


def look_at_rotation(yaw: float, pitch: float) -> np.ndarray:
    """Camera-to-world rotation (columns: right, down, forward) for a z-up world."""
    f = np.array([np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), np.sin(pitch)])
    right = np.cross(f, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    return np.stack([right, down, f], axis=1)


def pinhole_intrinsics(width: int, height: int, fov_deg: float = 90.0) -> np.ndarray:
    fx = (width / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
    return np.array([[fx, 0.0, (width - 1) / 2.0], [0.0, fx, (height - 1) / 2.0], [0.0, 0.0, 1.0]])


@dataclass
class CameraPose:
    rotation: np.ndarray  # camera-to-world
    center: np.ndarray

    @property
    def world_to_camera(self) -> np.ndarray:
        r = self.rotation.T
        return np.concatenate([r, (-r @ self.center)[:, None]], axis=1)


@dataclass
class CameraFrame:
    """Rendered image plus calibration; pixel (row i, col j) sits at (u=j, v=i)."""

    image: np.ndarray
    intrinsics: np.ndarray
    pose: CameraPose
    depth: np.ndarray
    prim_id: np.ndarray

    @property
    def calib(self) -> np.ndarray:
        """3x4 projection from world (LiDAR) coordinates to homogeneous pixels."""
        return self.intrinsics @ self.pose.world_to_camera

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def project(self, xyz: np.ndarray):
        return project(self.calib, xyz)

    def unproject(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        ones = np.ones((uv.shape[0], 1))
        rays = np.linalg.solve(self.intrinsics, np.concatenate([uv, ones], 1).T).T
        return self.pose.center + (rays * depth[:, None]) @ self.pose.rotation.T

    def pixel_rays(self, rows: np.ndarray, cols: np.ndarray):
        """Unit world directions through pixel centres (and the shared origin)."""
        uv = np.stack([cols, rows], axis=-1).astype(np.float64)
        ones = np.ones((uv.shape[0], 1))
        cam = np.linalg.solve(self.intrinsics, np.concatenate([uv, ones], 1).T).T
        d = cam @ self.pose.rotation.T
        return self.pose.center, d / np.linalg.norm(d, axis=-1, keepdims=True)


def project(calib: np.ndarray, xyz: np.ndarray):
    """Pixel coordinates (N, 2) and camera depth (N,) of world points."""
    h = np.concatenate([xyz, np.ones((xyz.shape[0], 1))], axis=1) @ calib.T
    z = h[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = h[:, :2] / z[:, None]
    return uv, z


def simulate_camera(scene: Scene, pose: CameraPose, intrinsics: np.ndarray,
                    height: int = DEFAULT_IMAGE_SIZE, width: int = DEFAULT_IMAGE_SIZE) -> CameraFrame:
    """Ray-march every pixel; Lambertian shading under a fixed directional light."""
    intrinsics = np.asarray(intrinsics, dtype=np.float64)
    if intrinsics[0, 0] <= 0 or intrinsics[1, 1] <= 0:
        raise ValueError("focal lengths must be positive")
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    frame = CameraFrame(np.zeros((height, width, 3)), intrinsics, pose,
                        np.full((height, width), np.inf), np.full((height, width), -1, dtype=np.int64))
    origin, dirs = frame.pixel_rays(rows.ravel(), cols.ravel())
    t, hit = _cast(scene, origin, dirs)
    xyz = origin + t[:, None] * dirs
    forward = pose.rotation[:, 2]
    image = np.zeros((height * width, 3))
    depth = np.full(height * width, np.inf)
    pid = np.full(height * width, -1, dtype=np.int64)
    if np.any(hit):
        ph = xyz[hit]
        ids = scene.primitive_id(ph)
        shade = AMBIENT + (1 - AMBIENT) * np.maximum(scene.normals(ph) @ LIGHT_DIR, 0.0)
        image[hit] = scene.albedo(ids) * shade[:, None]
        depth[hit] = (ph - origin) @ forward
        pid[hit] = ids
    frame.image = image.reshape(height, width, 3)
    frame.depth = depth.reshape(height, width)
    frame.prim_id = pid.reshape(height, width)
    return frame


def default_camera_poses(origin=DEFAULT_LIDAR_ORIGIN, n_cam: int = 2, pitch_deg: float = -15.0,
                         offset: float = 0.5, drop: float = 0.2) -> list[CameraPose]:
    """Cameras evenly spread in yaw, each displaced ``offset`` m along its view direction."""
    poses = []
    for k in range(n_cam):
        yaw = 2 * np.pi * k / n_cam
        rot = look_at_rotation(yaw, np.deg2rad(pitch_deg))
        center = np.asarray(origin, float) + offset * np.array([np.cos(yaw), np.sin(yaw), 0.0])
        center[2] -= drop
        poses.append(CameraPose(rot, center))
    return poses


@dataclass
class SensorSample:
    """One scene with every sensor output the pipeline consumes."""

    scene: Scene
    cloud: PointCloud
    frames: list

    @property
    def calibs(self) -> list:
        return [f.calib for f in self.frames]


def simulate_sample(scene: Scene, n_cam: int = 2, image_size: int = DEFAULT_IMAGE_SIZE,
                    azimuth_steps: int = DEFAULT_AZIMUTH_STEPS, elevation_angles=DEFAULT_ELEVATIONS,
                    origin=DEFAULT_LIDAR_ORIGIN) -> SensorSample:
    cloud = simulate_lidar(scene, origin, azimuth_steps, elevation_angles)
    k = pinhole_intrinsics(image_size, image_size)
    frames = [simulate_camera(scene, pose, k, image_size, image_size) for pose in default_camera_poses(origin, n_cam)]
    return SensorSample(scene, cloud, frames)
