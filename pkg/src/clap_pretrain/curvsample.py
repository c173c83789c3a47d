"""Curvature of an SDF's normal field and the samplers built on it."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import diffengine as de
from .encoders import visible_points

log = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-8
CLIP_PERCENTILE = 99.9
K_GAUS = 5
SIGMA_BLUR = 1.0
CHUNK = 4096


def _normals_on_tape(points: np.ndarray, sdf_fn):
    tape = de.Tape()
    p = tape.leaf("p", points)
    s = sdf_fn(p)
    (n,) = de.gradient(de.sum_(s), [p], create_graph=True)
    norm = de.l2norm(n)
    degenerate = norm.data[:, 0] < DEGENERATE_NORM
    unit = n / (norm + degenerate.astype(np.float64)[:, None])
    return p, unit, degenerate


def estimate_normal(points, sdf_fn):
    """Unit normals (N, 3) from the SDF gradient plus a degenerate-gradient flag (N,).

    ``sdf_fn`` maps a recorded (N, 3) DiffValue to (N,) signed distances, and
    each output row must depend only on its own input row.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    normals, flags = [], []
    for i in range(0, points.shape[0], CHUNK):
        _, unit, deg = _normals_on_tape(points[i:i + CHUNK], sdf_fn)
        normals.append(unit.data)
        flags.append(deg)
    return np.concatenate(normals), np.concatenate(flags)


def estimate_curvature(points, sdf_fn, mode: str = "frobenius") -> np.ndarray:
    """Curvature weight per point: norm of the derivative of the unit normal.

    ``frobenius``: ||d n~/d p||_F.  ``vjp-ones``: ||(d n~/d p)^T 1||_2.
    Degenerate normals give 0.
    """
    if mode not in ("frobenius", "vjp-ones"):
        raise ValueError(f"unknown curvature mode '{mode}'")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    out = []
    for i in range(0, points.shape[0], CHUNK):
        p, unit, deg = _normals_on_tape(points[i:i + CHUNK], sdf_fn)
        jac = de.jacobian(unit, p)
        if mode == "frobenius":
            w = np.sqrt((jac ** 2).sum(axis=(-2, -1)))
        else:
            w = np.linalg.norm(jac.sum(axis=-2), axis=-1)
        w[deg] = 0.0
        out.append(w)
    return np.concatenate(out) if out else np.zeros(0)


@dataclass
class CurvatureWeights:
    point_weights: np.ndarray
    pixel_maps: list = field(default_factory=list)
    mode: str = "frobenius"
    epoch: int = -1


def clip_weights(w: np.ndarray, percentile: float = CLIP_PERCENTILE) -> np.ndarray:
    w = np.where(np.isfinite(w), np.maximum(w, 0.0), 0.0)
    if w.size == 0 or not np.any(w > 0):
        return w
    return np.minimum(w, np.percentile(w, percentile))


def multinomial(weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` draws with replacement, P(i) proportional to weights[i]; uniform if all zero."""
    if n < 1:
        raise ValueError("need n >= 1")
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        log.warning("all sampling weights are zero; falling back to uniform sampling")
        return rng.integers(0, w.size, size=n)
    return rng.choice(w.size, size=n, replace=True, p=w / total)


def sample_points(weights: np.ndarray, n: int, rng: np.random.Generator, clip: bool = True) -> np.ndarray:
    """Indices of ``n`` LiDAR points drawn proportionally to curvature."""
    w = clip_weights(weights) if clip else np.asarray(weights, dtype=np.float64)
    return multinomial(w, n, rng)


def gaussian_kernel(size: int = K_GAUS, sigma: float = SIGMA_BLUR) -> np.ndarray:
    if size % 2 != 1:
        raise ValueError("Gaussian kernel size must be odd")
    r = np.arange(size) - size // 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def project_pixel_weights(cloud_xyz: np.ndarray, weights: np.ndarray, frames, calibs=None,
                          k_gaus: int = K_GAUS, sigma: float = SIGMA_BLUR) -> list:
    """Scatter point weights to their nearest visible pixel and blur.

    The kernel sums to one, so total mass is preserved except for what spills
    past the image border.
    """
    kernel = gaussian_kernel(k_gaus, sigma)
    maps = []
    calibs = [f.calib for f in frames] if calibs is None else calibs
    for frame, calib in zip(frames, calibs):
        vis, uv = visible_points(frame, cloud_xyz, calib)
        m = np.zeros((frame.height, frame.width))
        if np.any(vis):
            cols = np.clip(np.rint(uv[vis, 0]).astype(int), 0, frame.width - 1)
            rows = np.clip(np.rint(uv[vis, 1]).astype(int), 0, frame.height - 1)
            np.add.at(m, (rows, cols), weights[vis])
        maps.append(ndimage.convolve(m, kernel, mode="constant", cval=0.0))
    return maps


def sample_pixels(weight_map: np.ndarray, valid: np.ndarray, n: int, rng: np.random.Generator):
    """(rows, cols) of ``n`` pixels drawn from ``weight_map`` restricted to ``valid``."""
    w = np.where(valid, weight_map, 0.0).ravel()
    if not np.any(w > 0):
        w = valid.ravel().astype(np.float64)
    idx = multinomial(w, n, rng)
    return np.divmod(idx, weight_map.shape[1])


def sampling_schedule(epoch: int, n_warmup: int = 4) -> str:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return "uniform" if epoch < n_warmup else "curvature"
