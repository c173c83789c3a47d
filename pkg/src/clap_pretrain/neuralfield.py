"""SDF and colour heads conditioned on trilinearly interpolated grid features."""
from __future__ import annotations

import numpy as np

from . import diffengine as de
from .encoders import GridSpec, VoxelFeatureGrid

HIDDEN = 64


def init_field_params(rng: np.random.Generator, d_f: int = 32, hidden: int = HIDDEN,
                      log_h: float = float(np.log(4.0))) -> dict:
    """Two 3-layer tanh MLPs (SDF, RGB) taking ``[p, f]`` plus the sharpness ``log h``."""
    p = {}
    for head, out in (("sdf", 1), ("rgb", 3)):
        sizes = [3 + d_f, hidden, hidden, out]
        for k in range(3):
            gain = 1.0 if k < 2 else 0.1
            p[f"field.{head}.{k}.w"] = rng.normal(0.0, np.sqrt(gain / sizes[k]), size=(sizes[k], sizes[k + 1]))
            p[f"field.{head}.{k}.b"] = np.zeros(sizes[k + 1])
    p["field.log_h"] = np.array([log_h])
    return p


def normalize_points(p, spec: GridSpec) -> de.DiffValue:
    """Map the scene box to [-1, 1]^3."""
    centre = 0.5 * (spec.lo + spec.hi)
    half = 0.5 * (spec.hi - spec.lo)
    return (de.as_value(p) - centre) * (1.0 / half)


def query_feature(p, grid: VoxelFeatureGrid) -> de.DiffValue:
    """Trilinear feature lookup at world points ``p`` (N, 3); clamp-to-edge outside."""
    coords = (de.as_value(p) - grid.spec.lo) * (1.0 / grid.spec.voxel_size) - 0.5
    return de.trilinear(grid.values, coords)


def _mlp(x, params, head):
    h = de.tanh(de.linear(x, params[f"field.{head}.0.w"], params[f"field.{head}.0.b"]))
    h = de.tanh(de.linear(h, params[f"field.{head}.1.w"], params[f"field.{head}.1.b"]))
    return de.linear(h, params[f"field.{head}.2.w"], params[f"field.{head}.2.b"])


def head_input(p, grid: VoxelFeatureGrid) -> de.DiffValue:
    p = de.as_value(p)
    return de.concat([normalize_points(p, grid.spec), query_feature(p, grid)], axis=1)


def eval_sdf(p, grid: VoxelFeatureGrid, params, x=None) -> de.DiffValue:
    """Signed distance at each point, shape (N,)."""
    x = head_input(p, grid) if x is None else x
    s = _mlp(x, params, "sdf")
    return de.reshape(s, (s.shape[0],))


def eval_rgb(p, grid: VoxelFeatureGrid, params, x=None) -> de.DiffValue:
    """Colour in (0, 1)^3 at each point, shape (N, 3)."""
    x = head_input(p, grid) if x is None else x
    return de.sigmoid(_mlp(x, params, "rgb"))


def eval_field(p, grid: VoxelFeatureGrid, params, with_rgb: bool = True):
    """SDF and (optionally) colour sharing one feature lookup."""
    x = head_input(p, grid)
    s = eval_sdf(p, grid, params, x)
    return s, (eval_rgb(p, grid, params, x) if with_rgb else None)


def sharpness(params) -> de.DiffValue:
    """h = exp(log h), positive by construction."""
    return de.exp(params["field.log_h"])


def sdf_function(grid: VoxelFeatureGrid, params):
    """Closure ``p -> s`` over frozen grid values and weights (for curvature)."""
    frozen = grid.with_values(de.DiffValue(grid.values.data))
    consts = {k: de.DiffValue(v.data if isinstance(v, de.DiffValue) else v) for k, v in params.items()}
    return lambda p: eval_sdf(p, frozen, consts)


def sample_lattice(grid: VoxelFeatureGrid, params, resolution=(32, 32, 16), path=None) -> np.ndarray:
    """SDF on a regular lattice over the box; optionally written as x,y,z,sdf CSV."""
    spec = grid.spec
    axes = [np.linspace(spec.lo[i], spec.hi[i], resolution[i]) for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    fn = sdf_function(grid, params)
    vals = np.concatenate([fn(de.DiffValue(pts[i:i + 8192])).data for i in range(0, len(pts), 8192)])
    if path is not None:
        from .synthscene.io import write_csv

        write_csv(path, ["x", "y", "z", "sdf"], np.concatenate([pts, vals[:, None]], 1))
    return vals.reshape(resolution)
