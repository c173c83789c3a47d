"""
From SDF samples to rendered range, and from normals to curvature
=================================================================

The renderer turns SDF values along a ray into opacities, transmittance and
weights. Curvature comes from differentiating the unit normal of an SDF,
which needs second derivatives from the tape.
"""
import math

import numpy as np

from clap_pretrain.checks import sphere_on_plane
from clap_pretrain.curvsample import estimate_curvature, sample_points
from clap_pretrain.renderer import integrate, occupancy_alpha, render_weights, sample_ranges, transmittance
from clap_pretrain.synthscene import ScenePrimitive, ground_plane, simulate_lidar

# entering a surface between two samples: s goes from +1 to -1
print("alpha(1 -> -1, h=1) =", occupancy_alpha(np.array([1.0, -1.0]), 1.0).data[0])
print("t for alpha = 0.5, 0.5, 0.5:", transmittance(np.array([0.5, 0.5, 0.5])).data)

# a ray towards a wall at 5 m: the SDF along the ray is 5 - r
r = sample_ranges(0.1, 10.0, 64)[0]
for h in (2.0, 8.0, 32.0):
    w = render_weights((5.0 - r)[None], h)
    depth = integrate(w, r[None]).data[0]
    print(f"h = {h:5.1f}: rendered range {depth:.3f}, weight mass {w.weights.data.sum():.3f}")

# curvature of analytic SDFs: sqrt(2)/r on a sphere, zero on a plane
for radius in (0.5, 1.0, 2.0):
    sph = ScenePrimitive("sphere", np.zeros(3), size=(radius,))
    w = estimate_curvature(np.array([[radius, 0.0, 0.0]]), sph.sdf_diff)[0]
    print(f"sphere r={radius}: {w:.6f} (closed form {math.sqrt(2) / radius:.6f})")
print("plane:", estimate_curvature(np.array([[1.0, 2.0, 0.0]]), ground_plane().sdf_diff)[0])

# sampling LiDAR rays in proportion to curvature favours the object
cloud = simulate_lidar(sphere_on_plane())
share = np.mean(cloud.prim_id == 1)
idx = sample_points(cloud.curvature, 4096, np.random.default_rng(0))
print(f"sphere share: {share:.1%} of returns, {np.mean(cloud.prim_id[idx] == 1):.1%} of curvature draws")
