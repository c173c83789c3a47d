"""SDF-to-density volume rendering along LiDAR and camera rays."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .synthscene import ray_box

NEAR_MIN = 0.1
OMEGA_SUR = 0.05
OMEGA_C = 0.05


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    ranges: np.ndarray
    target: np.ndarray | float | None = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        self.ranges = np.asarray(self.ranges, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if np.any(np.diff(self.ranges) <= 0):
            raise ValueError("sample ranges must be strictly increasing")

    def points(self) -> np.ndarray:
        return self.origin + self.ranges[:, None] * self.direction


@dataclass
class RayBatch:
    """R rays with S samples each; ``target`` is (R,) ranges or (R, 3) colours."""

    origins: np.ndarray
    directions: np.ndarray
    ranges: np.ndarray
    target: np.ndarray

    def __len__(self) -> int:
        return self.ranges.shape[0]

    def points(self) -> np.ndarray:
        return (self.origins[:, None, :] + self.ranges[..., None] * self.directions[:, None, :]).reshape(-1, 3)


def sample_ranges(near, far, n: int, strategy: str = "uniform", rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-ray sample distances, one per equal-width bin (midpoints or jittered)."""
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    if np.any(near < 0) or np.any(near >= far):
        raise ValueError("need 0 <= near < far for every ray")
    if n < 1:
        raise ValueError("need at least one sample per ray")
    width = (far - near) / n
    if strategy == "uniform":
        offs = np.full((near.size, n), 0.5)
    elif strategy == "stratified":
        rng = np.random.default_rng() if rng is None else rng
        offs = rng.uniform(0.0, 1.0, size=(near.size, n))
    else:
        raise ValueError(f"unknown sampling strategy '{strategy}'")
    return near[:, None] + (np.arange(n)[None, :] + offs) * width[:, None]


def sample_ray(o, d, near: float, far: float, n: int, strategy: str = "uniform", seed: int | None = None) -> Ray:
    rng = np.random.default_rng(seed)
    return Ray(o, d, sample_ranges(near, far, n, strategy, rng)[0])


def near_far(origins: np.ndarray, directions: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Box-clipped ray extent, limited to [0.1 m, box diagonal]."""
    origins = np.broadcast_to(origins, directions.shape)
    t0, t1 = ray_box(origins, directions, lo, hi)
    diag = float(np.linalg.norm(hi - lo))
    near = np.clip(np.maximum(t0, 0.0), NEAR_MIN, diag)
    far = np.clip(t1, NEAR_MIN, diag)
    far = np.maximum(far, near + 1e-3)
    return near, far


def occupancy_alpha(s, h) -> de.DiffValue:
    """Discrete opacity from consecutive SDF samples, (R, S) -> (R, S).

    ``alpha_n = max((Phi(s_n) - Phi(s_{n+1})) / Phi(s_n), 0)`` with
    ``Phi(x) = sigmoid(h x)``; the last sample gets zero opacity.
    """
    s = de.as_value(s)
    squeeze = s.ndim == 1
    if squeeze:
        s = de.reshape(s, (1, s.shape[0]))
    if s.shape[1] < 2:
        raise ValueError("need at least two samples per ray")
    phi = de.sigmoid(s * h)
    prev, nxt = phi[:, :-1], phi[:, 1:]
    a = de.maximum((prev - nxt) / prev, 0.0)
    alpha = de.concat([a, np.zeros((s.shape[0], 1))], axis=1)
    return de.reshape(alpha, (alpha.shape[1],)) if squeeze else alpha


def transmittance(alpha) -> de.DiffValue:
    """t_n = prod_{i<n} (1 - alpha_i), with t_1 = 1."""
    alpha = de.as_value(alpha)
    squeeze = alpha.ndim == 1
    if squeeze:
        alpha = de.reshape(alpha, (1, alpha.shape[0]))
    cols = [de.DiffValue(np.ones((alpha.shape[0], 1)))]
    for n in range(1, alpha.shape[1]):
        cols.append(cols[-1] * (1.0 - alpha[:, n - 1:n]))
    t = de.concat(cols, axis=1)
    return de.reshape(t, (t.shape[1],)) if squeeze else t


@dataclass
class RenderWeights:
    alpha: de.DiffValue
    trans: de.DiffValue
    weights: de.DiffValue


def render_weights(s, h) -> RenderWeights:
    alpha = occupancy_alpha(s, h)
    trans = transmittance(alpha)
    return RenderWeights(alpha, trans, trans * alpha)


def integrate(weights, values) -> de.DiffValue:
    """sum_n w_n * value_n, no renormalisation. (R, S) x (R, S[, 3])."""
    if isinstance(weights, RenderWeights):
        weights = weights.weights
    weights = de.as_value(weights)
    values = de.as_value(values)
    if values.shape[: weights.ndim] != weights.shape:
        raise ValueError(f"weights {weights.shape} and values {values.shape} disagree")
    if values.ndim == weights.ndim:
        return de.sum_(weights * values, axis=-1)
    w = de.reshape(weights, weights.shape + (1,))
    return de.sum_(w * values, axis=-2)


@dataclass
class RenderTerms:
    loss: de.DiffValue
    range_l1: de.DiffValue
    surface: de.DiffValue
    color_l1: de.DiffValue | None


def rendering_loss(pred_range, target_range, surface_sdf, pred_rgb=None, target_rgb=None,
                   omega_sur: float = OMEGA_SUR, omega_c: float = OMEGA_C) -> RenderTerms:
    """Mean L1 range error + surface |s| over LiDAR rays, plus weighted colour L1."""
    pred_range = de.as_value(pred_range)
    n_l = pred_range.shape[0]
    if n_l == 0:
        raise ValueError("rendering loss needs at least one LiDAR ray")
    range_l1 = de.mean(de.abs_(pred_range - np.asarray(target_range, dtype=np.float64)))
    surface = de.mean(de.abs_(surface_sdf))
    loss = range_l1 + omega_sur * surface
    color = None
    if pred_rgb is not None and de.as_value(pred_rgb).shape[0] > 0:
        color = de.mean(de.abs_(de.as_value(pred_rgb) - np.asarray(target_rgb, dtype=np.float64)))
        loss = loss + omega_c * color
    return RenderTerms(loss, range_l1, surface, color)
