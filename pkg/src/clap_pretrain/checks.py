"""Measurement routines shared by the self-check command and the test suite."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .config import TrainConfig
from .model import SceneData, draw_rays, init_params, prepare_scene, scene_loss
from .synthscene import Scene, ScenePrimitive, ground_plane, simulate_sample

LOSS_NAMES = ("L_rend", "L_EM", "L_SwAV", "L_GMM", "L")


def micro_config(**changes) -> TrainConfig:
    """4^3 grid, 4 LiDAR rays, 4 prototypes: small enough for exhaustive FD checks."""
    base = dict(scene_seeds=[0], grid_dims=[4, 4, 4], n_lidar_rays=4, n_pixels=2, n_ray_samples=6,
                n_k=4, d_k=4, d_p=4, d_i=4, d_f=4, field_hidden=6, image_size=8, azimuth_steps=16,
                n_beams=4, n_objects=1, mask_rate=0.5, batch_size=1, epochs=1)
    base.update(changes)
    return TrainConfig(**base)


@dataclass
class GradCheck:
    loss: str
    rel_errors: np.ndarray
    names: list

    @property
    def frac_within(self) -> float:
        return float(np.mean(self.rel_errors <= 1e-4))

    @property
    def worst(self) -> float:
        return float(self.rel_errors.max())


def _term_values(terms) -> dict:
    return {"L_rend": terms.rend, "L_EM": terms.em, "L_SwAV": terms.swav, "L_GMM": terms.gmm, "L": terms.total}


def gradient_suite(cfg: TrainConfig | None = None, per_tensor: int = 8, eps: float = 1e-5,
                   floor: float = 1e-6, seed: int = 0) -> dict:
    """Analytic vs central-difference gradients of every loss term.

    Parameters are perturbed away from their initial values so that no ReLU
    sits exactly on its kink. Every random choice (rays, mask, Sinkhorn codes)
    is frozen. Returns {loss name: GradCheck}.
    """
    cfg = micro_config() if cfg is None else cfg
    data = prepare_scene(cfg, cfg.scene_seeds[0])
    rng = np.random.default_rng(seed)
    params = init_params(cfg)
    for name, arr in params.items():
        params[name] = arr + rng.normal(0.0, 0.05, size=arr.shape)
    draw = draw_rays(data, cfg, np.random.default_rng(seed + 1), "uniform")

    tape = de.Tape()
    base = scene_loss(data, params.bind(tape), cfg, draw)
    codes = base.codes
    names = params.names()
    analytic = {k: dict(zip(names, de.gradient(v, names))) for k, v in _term_values(base).items()}

    def values(p):
        t = scene_loss(data, p.constants(), cfg, draw, codes)
        return {k: v.data.item() for k, v in _term_values(t).items()}

    errs = {k: [] for k in LOSS_NAMES}
    labels = []
    for name in names:
        arr = params[name]
        picks = rng.choice(arr.size, size=min(per_tensor, arr.size), replace=False)
        for flat in picks:
            idx = np.unravel_index(flat, arr.shape)
            plus, minus = params.copy(), params.copy()
            a = arr.copy(); a[idx] += eps; plus[name] = a
            b = arr.copy(); b[idx] -= eps; minus[name] = b
            vp, vm = values(plus), values(minus)
            labels.append(f"{name}{list(idx)}")
            for k in LOSS_NAMES:
                num = (vp[k] - vm[k]) / (2 * eps)
                ana = analytic[k][name][idx]
                errs[k].append(abs(num - ana) / max(abs(num), abs(ana), floor))
    return {k: GradCheck(k, np.array(v), labels) for k, v in errs.items()}


def sphere_on_plane(radius: float = 1.5, center=(4.0, 0.0)) -> Scene:
    sphere = ScenePrimitive("sphere", np.array([center[0], center[1], radius]), np.eye(3), (radius,),
                            (0.8, 0.3, 0.2), "foreground")
    return Scene([ground_plane(), sphere])


def curvature_ratio(weights: np.ndarray, prim_id: np.ndarray, sphere_id: int = 1) -> float:
    """Mean clipped sampling weight on the sphere over the mean on the plane."""
    from .curvsample import clip_weights

    w = clip_weights(weights)
    on_plane = w[prim_id == 0].mean()
    return float(w[prim_id == sphere_id].mean() / max(on_plane, 1e-300))


def sphere_scene_data(cfg: TrainConfig, radius: float = 1.5) -> SceneData:
    from .encoders import GridSpec
    from .model import build_scene_data

    sample = simulate_sample(sphere_on_plane(radius), cfg.n_cam, cfg.image_size, cfg.azimuth_steps,
                             tuple(np.linspace(-30.0, -2.0, cfg.n_beams)))
    return build_scene_data(sample, GridSpec(dims=tuple(cfg.grid_dims)), seed=-1)


def closed_form_em_uniform() -> float:
    return 2.0 * math.log(4.0) / 4.0
