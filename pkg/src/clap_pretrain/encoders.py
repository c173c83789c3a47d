"""Voxel grids and the point, image, fusion and 3-D refinement encoders.

Shapes at desk scale: a 16x16x8 grid, point features 32, image features 16,
fusion features 32. Everything downstream of the raw voxel/pixel inputs is
recorded on the caller's tape so the losses can reach every weight.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffengine as de
from .synthscene import CameraFrame, PointCloud, project
from .synthscene.primitives import DEFAULT_BOUNDS

VISIBILITY_TOL = 0.01


@dataclass(frozen=True)
class GridSpec:
    bbox_min: tuple = tuple(DEFAULT_BOUNDS[0])
    bbox_max: tuple = tuple(DEFAULT_BOUNDS[1])
    dims: tuple = (16, 16, 8)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise ValueError(f"grid dims must be three positive ints, got {self.dims}")
        if np.any(self.voxel_size <= 0):
            raise ValueError("grid bounding box has zero or negative volume")

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.bbox_min, dtype=np.float64)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.bbox_max, dtype=np.float64)

    @property
    def voxel_size(self) -> np.ndarray:
        return (np.asarray(self.bbox_max, float) - np.asarray(self.bbox_min, float)) / np.asarray(self.dims)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    def voxel_index(self, xyz: np.ndarray):
        """Integer (N, 3) indices and an in-bounds mask (upper faces are exclusive)."""
        rel = (xyz - self.lo) / self.voxel_size
        idx = np.floor(rel).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=1)
        return idx, inside

    def flat_index(self, idx: np.ndarray) -> np.ndarray:
        d = self.dims
        return (idx[:, 0] * d[1] + idx[:, 1]) * d[2] + idx[:, 2]

    def centers(self) -> np.ndarray:
        axes = [np.arange(n) for n in self.dims]
        g = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
        return self.lo + (g + 0.5) * self.voxel_size

    def continuous_coords(self, xyz):
        """World points to continuous voxel indices (centres at integers)."""
        return (xyz - self.lo) / self.voxel_size - 0.5

    def to_dict(self) -> dict:
        return {"bbox_min": list(map(float, self.bbox_min)), "bbox_max": list(map(float, self.bbox_max)),
                "dims": list(map(int, self.dims))}


@dataclass
class VoxelFeatureGrid:
    """Dense (X, Y, Z, C) features plus the set of voxels that received input."""

    spec: GridSpec
    values: de.DiffValue
    occupancy: np.ndarray
    dropped: int = 0
    masked: np.ndarray | None = None

    def __post_init__(self):
        self.values = de.as_value(self.values)
        if self.values.shape[:3] != tuple(self.spec.dims):
            raise ValueError(f"values {self.values.shape} do not match grid dims {self.spec.dims}")

    @property
    def channels(self) -> int:
        return self.values.shape[3]

    def flat(self) -> de.DiffValue:
        return de.reshape(self.values, (self.spec.n_voxels, self.channels))

    def with_values(self, values) -> "VoxelFeatureGrid":
        values = de.as_value(values)
        if values.ndim == 2:
            values = de.reshape(values, tuple(self.spec.dims) + (values.shape[1],))
        return replace(self, values=values)

    def dump(self, path) -> None:
        """Raw little-endian float64 values next to a JSON header."""
        path = Path(path)
        path.with_suffix(".bin").write_bytes(self.values.data.astype("<f8").tobytes())
        header = {"grid": self.spec.to_dict(), "channels": self.channels,
                  "occupied": int(self.occupancy.sum()), "dtype": "<f8", "order": "C (x, y, z, c)"}
        path.with_suffix(".json").write_text(json.dumps(header, indent=1, sort_keys=True))


@dataclass(frozen=True)
class MaskSpec:
    rate: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"masking rate must lie in [0, 1), got {self.rate}")


def voxelize(cloud: PointCloud, spec: GridSpec) -> VoxelFeatureGrid:
    """Mean of (xyz offset from voxel centre, extra channels) per voxel."""
    xyz = cloud.xyz
    idx, inside = spec.voxel_index(xyz)
    flat = spec.flat_index(idx[inside])
    centers = spec.lo + (idx[inside] + 0.5) * spec.voxel_size
    feats = np.concatenate([xyz[inside] - centers, cloud.features[inside]], axis=1)
    counts = np.bincount(flat, minlength=spec.n_voxels).astype(np.float64)
    sums = np.stack([np.bincount(flat, weights=feats[:, c], minlength=spec.n_voxels)
                     for c in range(feats.shape[1])], axis=1)
    occupied = counts > 0
    sums[occupied] /= counts[occupied, None]
    grid = sums.reshape(tuple(spec.dims) + (feats.shape[1],))
    return VoxelFeatureGrid(spec, grid, occupied.reshape(spec.dims), dropped=int((~inside).sum()))


def apply_mask(voxels: VoxelFeatureGrid, spec: MaskSpec) -> VoxelFeatureGrid:
    """Zero the inputs of floor(rate * occupied) randomly chosen occupied voxels."""
    occ = np.flatnonzero(voxels.occupancy.ravel())
    n_mask = int(np.floor(spec.rate * occ.size))
    rng = np.random.default_rng(spec.seed)
    chosen = rng.choice(occ, size=n_mask, replace=False) if n_mask else np.zeros(0, dtype=np.int64)
    masked = np.zeros(voxels.spec.n_voxels, dtype=bool)
    masked[chosen] = True
    keep = (~masked).astype(np.float64).reshape(tuple(voxels.spec.dims) + (1,))
    out = replace(voxels, values=voxels.values * keep, masked=masked.reshape(voxels.spec.dims))
    return out


# --------------------------------------------------------------------------
# parameters

def _dense(rng, fan_in, fan_out, gain=2.0):
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out))


def init_encoder_params(rng: np.random.Generator, in_point: int = 4, d_p: int = 32, d_i: int = 16,
                        d_f: int = 32, hidden: int = 32) -> dict:
    """Weights for the point, image, fusion and refinement encoders."""
    p = {}

    def layer(name, fan_in, fan_out, gain=2.0):
        p[f"{name}.w"] = _dense(rng, fan_in, fan_out, gain)
        p[f"{name}.b"] = np.zeros(fan_out)

    layer("point.fc1", in_point, hidden)
    layer("point.fc2", hidden, hidden)
    layer("point.mix", 27 * hidden, d_p, gain=1.0)
    layer("image.conv1", 9 * 3, d_i)
    layer("image.conv2", 9 * d_i, d_i, gain=1.0)
    layer("fusion.fc1", d_p + d_i, d_f)
    layer("fusion.fc2", d_f, d_f, gain=1.0)
    layer("refine.conv", 27 * d_f, d_f, gain=0.1)
    return p


# --------------------------------------------------------------------------
# encoders

def encode_points(voxels: VoxelFeatureGrid, params) -> VoxelFeatureGrid:
    """Per-voxel 2-layer MLP followed by a 3x3x3 mixing layer."""
    x = voxels.flat()
    if x.shape[1] != params["point.fc1.w"].shape[0]:
        raise de.ShapeError("encode_points", None, [x.shape, params["point.fc1.w"].shape], "input channels")
    h = de.relu(de.linear(x, params["point.fc1.w"], params["point.fc1.b"]))
    h = de.relu(de.linear(h, params["point.fc2.w"], params["point.fc2.b"]))
    out = de.neighborhood_conv(h, params["point.mix.w"], params["point.mix.b"], voxels.spec.dims)
    return voxels.with_values(out)


def image_features(frame: CameraFrame, params) -> de.DiffValue:
    """Two 3x3 convolutions on one image; returns (H*W, d_I)."""
    dims = (frame.height, frame.width)
    x = frame.image.reshape(-1, 3)
    h = de.relu(de.neighborhood_conv(x, params["image.conv1.w"], params["image.conv1.b"], dims))
    return de.neighborhood_conv(h, params["image.conv2.w"], params["image.conv2.b"], dims)


def visible_points(frame: CameraFrame, xyz: np.ndarray, calib: np.ndarray | None = None,
                   tol: float = VISIBILITY_TOL, depth: np.ndarray | None = None):
    """Pixel coordinates of points that pass the depth-buffer test.

    The reference depth at a sub-pixel location is the bilinear blend of the
    four neighbouring pixels' inverse depths (exact for planes). Sky pixels
    contribute zero inverse depth, which only ever makes a point more visible.
    ``depth`` overrides the projected camera depth of each point.
    """
    calib = frame.calib if calib is None else calib
    uv, z = project(calib, xyz)
    if depth is not None:
        z = np.asarray(depth, dtype=np.float64)
    h, w = frame.height, frame.width
    ok = (z > 1e-3) & (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1)
    ok &= np.isfinite(uv).all(axis=1)
    inv = np.where(np.isfinite(frame.depth), 1.0 / frame.depth, 0.0)
    vis = np.zeros(xyz.shape[0], dtype=bool)
    sel = np.flatnonzero(ok)
    if sel.size:
        u, v = uv[sel, 0], uv[sel, 1]
        u0 = np.minimum(np.floor(u).astype(int), w - 2)
        v0 = np.minimum(np.floor(v).astype(int), h - 2)
        fu, fv = u - u0, v - v0
        ref = ((1 - fu) * (1 - fv) * inv[v0, u0] + fu * (1 - fv) * inv[v0, u0 + 1]
               + (1 - fu) * fv * inv[v0 + 1, u0] + fu * fv * inv[v0 + 1, u0 + 1])
        with np.errstate(divide="ignore"):
            ref_depth = np.where(ref > 0, 1.0 / ref, np.inf)
        vis[sel] = z[sel] <= ref_depth + tol
    return vis, uv


def bilinear_rows(uv: np.ndarray, height: int, width: int):
    """Flat pixel indices and weights (M, 4) for bilinear sampling."""
    u, v = uv[:, 0], uv[:, 1]
    u0 = np.clip(np.floor(u).astype(int), 0, max(width - 2, 0))
    v0 = np.clip(np.floor(v).astype(int), 0, max(height - 2, 0))
    u1 = np.minimum(u0 + 1, width - 1)
    v1 = np.minimum(v0 + 1, height - 1)
    fu, fv = u - u0, v - v0
    idx = np.stack([v0 * width + u0, v0 * width + u1, v1 * width + u0, v1 * width + u1], 1)
    wts = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], 1)
    return idx, wts


@dataclass
class LiftPlan:
    """Constant bookkeeping for scattering pixel features into voxels."""

    per_camera: list = field(default_factory=list)  # (pixel idx (M,4), weights (M,4), voxel (M,))
    counts: np.ndarray | None = None
    pairs: set = field(default_factory=set)  # {(voxel, camera)}


def plan_lift(frames, calibs, cloud: PointCloud, spec: GridSpec, depths=None) -> LiftPlan:
    vidx, inside = spec.voxel_index(cloud.xyz)
    flat = spec.flat_index(vidx)
    counts = np.zeros(spec.n_voxels)
    plan = LiftPlan()
    for k, (frame, calib) in enumerate(zip(frames, calibs)):
        vis, uv = visible_points(frame, cloud.xyz, calib, depth=None if depths is None else depths[k])
        vis &= inside
        sel = np.flatnonzero(vis)
        idx, wts = bilinear_rows(uv[sel], frame.height, frame.width)
        plan.per_camera.append((idx, wts, flat[sel]))
        counts += np.bincount(flat[sel], minlength=spec.n_voxels)
        plan.pairs.update((int(v), k) for v in np.unique(flat[sel]))
    plan.counts = counts
    return plan


def encode_images(frames, calibs, cloud: PointCloud, params, spec: GridSpec,
                  plan: LiftPlan | None = None) -> VoxelFeatureGrid:
    """Lift per-pixel conv features to voxels via LiDAR points visible in each camera."""
    if len(frames) != len(calibs):
        raise ValueError("frames and calibrations differ in length")
    plan = plan_lift(frames, calibs, cloud, spec) if plan is None else plan
    d_i = params["image.conv2.b"].shape[0]
    total = None
    for frame, (idx, wts, vox) in zip(frames, plan.per_camera):
        if vox.size == 0:
            continue
        feats = image_features(frame, params)
        g = de.gather(feats, idx.ravel()) * wts.reshape(-1, 1)
        per_point = de.sum_(de.reshape(g, (vox.size, 4, d_i)), axis=1)
        acc = de.scatter_add(per_point, vox, spec.n_voxels)
        total = acc if total is None else total + acc
    if total is None:
        total = de.DiffValue(np.zeros((spec.n_voxels, d_i)))
    inv = np.where(plan.counts > 0, 1.0 / np.maximum(plan.counts, 1), 0.0)[:, None]
    values = de.reshape(total * inv, tuple(spec.dims) + (d_i,))
    return VoxelFeatureGrid(spec, values, (plan.counts > 0).reshape(spec.dims))


def fuse(p_feat: VoxelFeatureGrid, i_feat: VoxelFeatureGrid, params) -> VoxelFeatureGrid:
    """Channel concat followed by a per-voxel 2-layer MLP."""
    if tuple(p_feat.spec.dims) != tuple(i_feat.spec.dims):
        raise ValueError(f"fusion inputs differ in extent: {p_feat.spec.dims} vs {i_feat.spec.dims}")
    x = de.concat([p_feat.flat(), i_feat.flat()], axis=1)
    h = de.relu(de.linear(x, params["fusion.fc1.w"], params["fusion.fc1.b"]))
    out = de.linear(h, params["fusion.fc2.w"], params["fusion.fc2.b"])
    occ = p_feat.occupancy | i_feat.occupancy
    return VoxelFeatureGrid(p_feat.spec, de.reshape(out, tuple(p_feat.spec.dims) + (out.shape[1],)), occ)


def refine_3d(fused: VoxelFeatureGrid, params) -> VoxelFeatureGrid:
    """One residual 3x3x3 convolution."""
    x = fused.flat()
    out = x + de.neighborhood_conv(x, params["refine.conv.w"], params["refine.conv.b"], fused.spec.dims)
    return fused.with_values(out)
