"""Model assembly: parameters, cached scene data and the per-scene loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import diffengine as de
from .config import TrainConfig
from .curvsample import (CurvatureWeights, clip_weights, estimate_curvature, project_pixel_weights,
                         sample_pixels, sample_points)
from .encoders import (GridSpec, LiftPlan, MaskSpec, VoxelFeatureGrid, apply_mask, encode_images,
                       encode_points, fuse, init_encoder_params, plan_lift, refine_3d, voxelize)
from .neuralfield import eval_rgb, eval_sdf, head_input, init_field_params, sdf_function, sharpness
from .protolearn import init_proto_params, proto_loss, project_embeddings, similarity
from .renderer import integrate, near_far, render_weights, rendering_loss, sample_ranges
from .synthscene import SensorSample, generate_scene, simulate_sample
from .synthscene.sensors import DEFAULT_ELEVATIONS

PARAM_GROUPS = ("point", "image", "fusion", "refine", "field", "proj", "proto")
HOLDOUT_STRIDE = 8


def grid_spec(cfg: TrainConfig) -> GridSpec:
    return GridSpec(dims=tuple(int(d) for d in cfg.grid_dims))


def init_params(cfg: TrainConfig, seed: int | None = None) -> de.ParamSet:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    arrays = {}
    arrays.update(init_encoder_params(rng, d_p=cfg.d_p, d_i=cfg.d_i, d_f=cfg.d_f))
    arrays.update(init_field_params(rng, d_f=cfg.d_f, hidden=cfg.field_hidden, log_h=cfg.init_log_h))
    arrays.update(init_proto_params(rng, d_p=cfg.d_p, d_i=cfg.d_i, d_k=cfg.d_k, n_k=cfg.n_k))
    return de.ParamSet(arrays)


# --------------------------------------------------------------------------
# scene data


@dataclass
class SceneData:
    """Everything about one scene that does not depend on the weights."""

    seed: int
    sample: SensorSample
    spec: GridSpec
    voxels: VoxelFeatureGrid
    plan: LiftPlan
    near: np.ndarray
    far: np.ndarray
    train_idx: np.ndarray
    holdout_idx: np.ndarray
    valid_pixels: list

    @property
    def cloud(self):
        return self.sample.cloud

    @property
    def frames(self):
        return self.sample.frames

    @property
    def occupied_rows(self) -> np.ndarray:
        return np.flatnonzero(self.voxels.occupancy.ravel())


def _scene_key(cfg: TrainConfig, seed: int) -> tuple:
    return (int(seed), cfg.n_objects, cfg.image_size, cfg.n_cam, cfg.azimuth_steps, cfg.n_beams,
            tuple(int(d) for d in cfg.grid_dims))


@lru_cache(maxsize=256)
def _prepare(key: tuple) -> SceneData:
    seed, n_objects, image_size, n_cam, az, n_beams, dims = key
    scene = generate_scene(seed, n_objects=n_objects)
    elev = DEFAULT_ELEVATIONS if n_beams == len(DEFAULT_ELEVATIONS) else tuple(np.linspace(-30.0, -2.0, n_beams))
    return build_scene_data(simulate_sample(scene, n_cam, image_size, az, elev), GridSpec(dims=dims), seed)


def build_scene_data(sample: SensorSample, spec: GridSpec, seed: int = -1) -> SceneData:
    cloud = sample.cloud
    voxels = voxelize(cloud, spec)
    plan = plan_lift(sample.frames, sample.calibs, cloud, spec)
    near, far = near_far(cloud.origin, cloud.directions, spec.lo, spec.hi)
    # the range target must lie inside the sampled interval
    far = np.maximum(far, cloud.ranges + 0.05)
    idx = np.arange(len(cloud))
    held = idx % HOLDOUT_STRIDE == 0
    valid = [np.isfinite(f.depth) for f in sample.frames]
    return SceneData(seed, sample, spec, voxels, plan, near, far, idx[~held], idx[held], valid)


def prepare_scene(cfg: TrainConfig, seed: int) -> SceneData:
    """Generated, simulated and voxelised scene; cached per process."""
    return _prepare(_scene_key(cfg, seed))


# --------------------------------------------------------------------------
# forward pass


@dataclass
class Encoded:
    points: VoxelFeatureGrid
    images: VoxelFeatureGrid
    fused: VoxelFeatureGrid
    refined: VoxelFeatureGrid


def encode(data: SceneData, P: dict, mask_seed: int | None = None, mask_rate: float = 0.0,
           drop: str | None = None) -> Encoded:
    """Run both encoders, fusion and refinement on one scene.

    ``drop`` zeroes one modality's features before fusion ("points" or "images").
    """
    vox = data.voxels
    if mask_seed is not None and mask_rate > 0:
        vox = apply_mask(vox, MaskSpec(mask_rate, mask_seed))
    p_feat = encode_points(vox, P)
    i_feat = encode_images(data.frames, data.sample.calibs, data.cloud, P, data.spec, data.plan)
    pf, imf = p_feat, i_feat
    if drop == "points":
        pf = p_feat.with_values(p_feat.values * 0.0)
    elif drop == "images":
        imf = i_feat.with_values(i_feat.values * 0.0)
    elif drop is not None:
        raise ValueError(f"unknown modality '{drop}'")
    fused = fuse(pf, imf, P)
    return Encoded(p_feat, i_feat, fused, refine_3d(fused, P))


@dataclass
class Draw:
    """All random choices of one scene-step, so a loss can be re-evaluated exactly."""

    mask_seed: int
    lidar_idx: np.ndarray
    lidar_ranges: np.ndarray
    cam_origins: np.ndarray
    cam_dirs: np.ndarray
    cam_ranges: np.ndarray
    cam_rgb: np.ndarray
    drop: str | None = None
    strategy: str = "uniform"


def draw_rays(data: SceneData, cfg: TrainConfig, rng: np.random.Generator, strategy: str = "uniform",
              weights: CurvatureWeights | None = None, drop: str | None = None,
              jitter: bool = True) -> Draw:
    mask_seed = int(rng.integers(2 ** 31))
    pool = data.train_idx
    if strategy == "curvature" and weights is not None:
        lidar = pool[sample_points(weights.point_weights[pool], cfg.n_lidar_rays, rng)]
    else:
        lidar = pool[rng.integers(0, pool.size, cfg.n_lidar_rays)]
    how = "stratified" if jitter else "uniform"
    l_ranges = sample_ranges(data.near[lidar], data.far[lidar], cfg.n_ray_samples, how, rng)
    origins, dirs, rgb = [], [], []
    if cfg.n_pixels > 0:
        for k, frame in enumerate(data.frames):
            valid = data.valid_pixels[k]
            if not valid.any():
                continue
            if strategy == "curvature" and weights is not None and weights.pixel_maps:
                rows, cols = sample_pixels(weights.pixel_maps[k], valid, cfg.n_pixels, rng)
            else:
                flat = np.flatnonzero(valid.ravel())
                rows, cols = np.divmod(flat[rng.integers(0, flat.size, cfg.n_pixels)], frame.width)
            o, d = frame.pixel_rays(rows, cols)
            origins.append(np.broadcast_to(o, d.shape))
            dirs.append(d)
            rgb.append(frame.image[rows, cols])
    if origins:
        c_o, c_d, c_rgb = np.concatenate(origins), np.concatenate(dirs), np.concatenate(rgb)
        near, far = near_far(c_o, c_d, data.spec.lo, data.spec.hi)
        c_r = sample_ranges(near, far, cfg.n_ray_samples, how, rng)
    else:
        c_o = c_d = c_rgb = np.zeros((0, 3))
        c_r = np.zeros((0, cfg.n_ray_samples))
    return Draw(mask_seed, lidar, l_ranges, c_o, c_d, c_r, c_rgb, drop, strategy)


def eval_draw(data: SceneData, cfg: TrainConfig, idx: np.ndarray | None = None) -> Draw:
    """Deterministic draw over held-out LiDAR rays with midpoint samples and no camera rays."""
    idx = data.holdout_idx if idx is None else np.asarray(idx)
    ranges = sample_ranges(data.near[idx], data.far[idx], cfg.n_ray_samples, "uniform")
    empty = np.zeros((0, 3))
    return Draw(-1, idx, ranges, empty, empty, np.zeros((0, cfg.n_ray_samples)), empty)


@dataclass
class SceneTerms:
    total: de.DiffValue
    rend: de.DiffValue
    proto: de.DiffValue
    em: de.DiffValue
    swav: de.DiffValue
    gmm: de.DiffValue
    range_l1: de.DiffValue
    codes: tuple | None = None


def render(data: SceneData, enc: Encoded, P: dict, draw: Draw):
    """Rendered LiDAR ranges, surface SDF at the observed endpoints and rendered colours."""
    cloud = data.cloud
    grid = enc.refined
    r_l, s_n = draw.lidar_ranges.shape
    origin = cloud.origin
    dirs = cloud.directions[draw.lidar_idx]
    pts_l = (origin + draw.lidar_ranges[..., None] * dirs[:, None, :]).reshape(-1, 3)
    pts_c = (draw.cam_origins[:, None, :] + draw.cam_ranges[..., None] * draw.cam_dirs[:, None, :]).reshape(-1, 3)
    surf = cloud.xyz[draw.lidar_idx]
    n_l, n_c = pts_l.shape[0], pts_c.shape[0]
    x = head_input(np.concatenate([pts_l, pts_c, surf]), grid)
    s = eval_sdf(None, grid, P, x)
    h = sharpness(P)
    w_l = render_weights(de.reshape(s[:n_l], (r_l, s_n)), h)
    pred_range = integrate(w_l, draw.lidar_ranges)
    surface = s[n_l + n_c:]
    pred_rgb = None
    if n_c:
        r_c = draw.cam_ranges.shape[0]
        w_c = render_weights(de.reshape(s[n_l:n_l + n_c], (r_c, s_n)), h)
        rgb = eval_rgb(None, grid, P, x[n_l:n_l + n_c])
        pred_rgb = integrate(w_c, de.reshape(rgb, (r_c, s_n, 3)))
    return pred_range, surface, pred_rgb


def scene_loss(data: SceneData, P: dict, cfg: TrainConfig, draw: Draw, codes: tuple | None = None) -> SceneTerms:
    """omega_r * L_rend + omega_proto * L_proto for one scene under a fixed draw."""
    enc = encode(data, P, draw.mask_seed if draw.mask_seed >= 0 else None, cfg.mask_rate, draw.drop)
    pred_range, surface, pred_rgb = render(data, enc, P, draw)
    target = data.cloud.ranges[draw.lidar_idx]
    rt = rendering_loss(pred_range, target, surface, pred_rgb, draw.cam_rgb, cfg.omega_sur, cfg.omega_c)
    rows = data.occupied_rows if cfg.proto_cells == "occupied" else None
    e_p, e_i, _ = project_embeddings(enc.points, enc.images, P, rows)
    bank = P["proto.K"]
    pt = proto_loss(similarity(e_p, bank), similarity(e_i, bank), bank, codes,
                    cfg.omega_swav, cfg.omega_em, cfg.omega_gmm, cfg.tau, cfg.n_sink, cfg.sinkhorn_eps)
    total = rt.loss * cfg.omega_r + pt.loss * cfg.omega_proto
    return SceneTerms(total, rt.loss, pt.loss, pt.em, pt.swav, pt.gmm, rt.range_l1, pt.codes)


# --------------------------------------------------------------------------
# evaluation helpers


def frozen(params: de.ParamSet) -> dict:
    return params.constants()


def heldout_range_error(data: SceneData, params: de.ParamSet, cfg: TrainConfig) -> float:
    """Mean |r - r~| over the scene's held-out LiDAR rays with unmasked inputs."""
    P = frozen(params)
    enc = encode(data, P)
    pred, _, _ = render(data, enc, P, eval_draw(data, cfg))
    return float(np.mean(np.abs(pred.data - data.cloud.ranges[data.holdout_idx])))


def fused_features(data: SceneData, params: de.ParamSet) -> np.ndarray:
    """Fusion features F-hat (V, d_F) with unmasked inputs, before the 3-D refinement."""
    enc = encode(data, frozen(params))
    return enc.fused.flat().data


def curvature_weights(data: SceneData, params: de.ParamSet, cfg: TrainConfig, epoch: int = -1) -> CurvatureWeights:
    """Curvature of the current field at every LiDAR point plus blurred pixel maps."""
    enc = encode(data, frozen(params))
    fn = sdf_function(enc.refined, frozen(params))
    w = estimate_curvature(data.cloud.xyz, fn, cfg.curvature_mode)
    maps = project_pixel_weights(data.cloud.xyz, clip_weights(w), data.frames, data.sample.calibs)
    return CurvatureWeights(w, maps, cfg.curvature_mode, epoch)


def prototype_assignment(data: SceneData, params: de.ParamSet) -> np.ndarray:
    """Argmax prototype of each voxel's point embedding, (V,)."""
    P = frozen(params)
    enc = encode(data, P)
    e_p, _, _ = project_embeddings(enc.points, enc.images, P)
    return np.argmax(e_p.data @ P["proto.K"].data.T, axis=1)
