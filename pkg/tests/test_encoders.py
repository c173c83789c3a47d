from collections import Counter

import numpy as np
import pytest

from clap_pretrain import diffengine as de
from clap_pretrain.encoders import (
    GridSpec,
    MaskSpec,
    VoxelFeatureGrid,
    apply_mask,
    encode_images,
    encode_points,
    fuse,
    init_encoder_params,
    plan_lift,
    refine_3d,
    voxelize,
)
from clap_pretrain.synthscene import (
    CameraFrame,
    CameraPose,
    PointCloud,
    Scene,
    ScenePrimitive,
    generate_scene,
    ground_plane,
    look_at_rotation,
    pinhole_intrinsics,
    simulate_camera,
    simulate_sample,
)

SPEC = GridSpec()


def cloud_of(xyz, intensity=None):
    xyz = np.atleast_2d(np.asarray(xyz, float))
    n = len(xyz)
    inten = np.zeros(n) if intensity is None else np.asarray(intensity, float)
    return PointCloud(np.column_stack([xyz, inten]), np.zeros(3), np.tile([1.0, 0, 0], (n, 1)), np.ones(n),
                      np.zeros(n, int), np.ones(n, int), np.tile([0, 0, 1.0], (n, 1)), np.zeros(n))


def small_params(seed=0):
    return init_encoder_params(np.random.default_rng(seed), d_p=6, d_i=4, d_f=5, hidden=6)


def zero_bias(params):
    return {k: (np.zeros_like(v) if k.endswith(".b") else v) for k, v in params.items()}


@pytest.fixture(scope="module")
def sample():
    return simulate_sample(generate_scene(4, 3), image_size=24)


class TestGridSpec:
    def test_degenerate_box(self):
        with pytest.raises(ValueError):
            GridSpec(bbox_min=(0, 0, 0), bbox_max=(1, 0, 1))

    def test_bad_dims(self):
        with pytest.raises(ValueError):
            GridSpec(dims=(4, 0, 4))

    def test_centres_map_to_own_voxel(self):
        spec = GridSpec(dims=(3, 4, 5))
        idx, inside = spec.voxel_index(spec.centers())
        assert inside.all()
        np.testing.assert_array_equal(spec.flat_index(idx), np.arange(spec.n_voxels))


class TestVoxelize:
    def test_point_at_centre(self):
        centre = SPEC.centers()[123]
        grid = voxelize(cloud_of(centre, [0.7]), SPEC)
        vals = grid.flat().data
        np.testing.assert_allclose(vals[123], [0, 0, 0, 0.7], atol=1e-12)
        assert grid.occupancy.sum() == 1

    def test_two_points_average(self):
        centre = SPEC.centers()[40]
        pts = centre + np.array([[0.1, 0, 0], [-0.05, 0.2, 0.1]])
        grid = voxelize(cloud_of(pts, [0.2, 0.6]), SPEC)
        np.testing.assert_allclose(grid.flat().data[40], [0.025, 0.1, 0.05, 0.4], atol=1e-12)

    def test_outside_points_counted(self):
        grid = voxelize(cloud_of([[100.0, 0, 0], [0, 0, 1.0]]), SPEC)
        assert grid.dropped == 1
        assert grid.occupancy.sum() == 1

    def test_empty_voxels_are_zero(self, sample):
        grid = voxelize(sample.cloud, SPEC)
        flat = grid.flat().data
        assert np.all(flat[~grid.occupancy.ravel()] == 0)

    def test_occupied_count_matches_hash_buckets(self, sample):
        grid = voxelize(sample.cloud, SPEC)
        lo, size = SPEC.lo, SPEC.voxel_size
        buckets = Counter()
        for p in sample.cloud.xyz:
            key = tuple(int(np.floor(c)) for c in (p - lo) / size)
            if all(0 <= k < d for k, d in zip(key, SPEC.dims)):
                buckets[key] += 1
        assert grid.occupancy.sum() == len(buckets)
        assert sum(buckets.values()) + grid.dropped == len(sample.cloud)

    def test_dump_writes_header(self, tmp_path, sample):
        grid = voxelize(sample.cloud, SPEC)
        grid.dump(tmp_path / "g")
        raw = np.frombuffer((tmp_path / "g.bin").read_bytes(), "<f8")
        np.testing.assert_array_equal(raw, grid.values.data.ravel())

    def test_values_must_match_dims(self):
        with pytest.raises(ValueError):
            VoxelFeatureGrid(SPEC, np.zeros((2, 2, 2, 1)), np.zeros((2, 2, 2), bool))


class TestMask:
    def grid_with(self, n_occupied):
        spec = GridSpec(dims=(10, 10, 2))
        vals = np.zeros((10, 10, 2, 4))
        occ = np.zeros((10, 10, 2), bool)
        occ.ravel()[:n_occupied] = True
        vals[occ] = 1.0
        return VoxelFeatureGrid(spec, vals, occ)

    def test_rate_zero_is_identity(self):
        g = self.grid_with(100)
        np.testing.assert_array_equal(apply_mask(g, MaskSpec(0.0, 3)).values.data, g.values.data)

    def test_ninety_of_hundred(self):
        out = apply_mask(self.grid_with(100), MaskSpec(0.9, 3))
        assert out.masked.sum() == 90
        assert np.count_nonzero(out.values.data.any(axis=-1)) == 10

    def test_seeded(self):
        g = self.grid_with(100)
        a, b = apply_mask(g, MaskSpec(0.5, 11)), apply_mask(g, MaskSpec(0.5, 11))
        np.testing.assert_array_equal(a.masked, b.masked)

    def test_rate_range(self):
        with pytest.raises(ValueError):
            MaskSpec(1.0)

    def test_gradient_at_masked_sites(self, sample):
        spec = GridSpec(dims=(6, 6, 4))
        vox = voxelize(sample.cloud, spec)
        tape = de.Tape()
        raw = tape.leaf("raw", vox.values.data)
        params = {k: tape.leaf(k, v) for k, v in small_params().items()}
        masked = apply_mask(VoxelFeatureGrid(spec, raw, vox.occupancy), MaskSpec(0.9, 0))
        out = de.sum_(encode_points(masked, params).values)
        g_raw, g_w = de.gradient(out, ["raw", "point.fc1.w"])
        assert np.all(g_raw[masked.masked] == 0)
        assert np.abs(g_w).sum() > 0


class TestEncodePoints:
    def test_zero_in_zero_out(self):
        grid = VoxelFeatureGrid(SPEC, np.zeros(SPEC.dims + (4,)), np.zeros(SPEC.dims, bool))
        out = encode_points(grid, zero_bias(small_params()))
        assert out.values.shape == SPEC.dims + (6,)
        assert np.all(out.values.data == 0)

    def test_channel_mismatch(self):
        grid = VoxelFeatureGrid(SPEC, np.zeros(SPEC.dims + (5,)), np.zeros(SPEC.dims, bool))
        with pytest.raises(de.ShapeError):
            encode_points(grid, small_params())

    @pytest.mark.parametrize("name", ["point.fc1.w", "point.fc2.w", "point.mix.w"])
    def test_weight_gradient(self, sample, name):
        spec = GridSpec(dims=(5, 5, 3))
        vox = voxelize(sample.cloud, spec)
        params = small_params(1)

        def total(p):
            return encode_points(vox, p).values.data.sum()

        tape = de.Tape()
        bound = {k: tape.leaf(k, v) for k, v in params.items()}
        (g,) = de.gradient(de.sum_(encode_points(vox, bound).values), [name])
        rng = np.random.default_rng(2)
        for flat in rng.choice(params[name].size, 3, replace=False):
            idx = np.unravel_index(flat, params[name].shape)
            eps = 1e-6
            up, dn = dict(params), dict(params)
            up[name] = params[name].copy(); up[name][idx] += eps
            dn[name] = params[name].copy(); dn[name][idx] -= eps
            num = (total(up) - total(dn)) / (2 * eps)
            assert abs(num - g[idx]) <= 1e-6 * max(abs(num), 1e-3)


def gray_frame(pose, size=24):
    scene = Scene([ground_plane(), ScenePrimitive("sphere", np.array([5.0, 0, 1]), size=(1.0,))])
    frame = simulate_camera(scene, pose, pinhole_intrinsics(size, size), size, size)
    return CameraFrame(np.full_like(frame.image, 0.5), frame.intrinsics, frame.pose, frame.depth, frame.prim_id)


class TestEncodeImages:
    def test_length_mismatch(self, sample):
        with pytest.raises(ValueError):
            encode_images(sample.frames, sample.calibs[:1], sample.cloud, small_params(), SPEC)

    def test_constant_image_gives_constant_features(self, sample):
        frames = [CameraFrame(np.full_like(f.image, 0.4), f.intrinsics, f.pose, f.depth, f.prim_id)
                  for f in sample.frames]
        params = small_params()
        # a 1x1 conv (only the centre tap) keeps the output constant up to the image border
        for name in ("image.conv1.w", "image.conv2.w"):
            w = np.zeros_like(params[name])
            c_in = w.shape[0] // 9
            w[4 * c_in:5 * c_in] = np.random.default_rng(0).normal(size=(c_in, w.shape[1]))
            params[name] = w
        out = encode_images(frames, sample.calibs, sample.cloud, params, SPEC)
        rows = out.flat().data[out.occupancy.ravel()]
        assert len(rows) > 5
        np.testing.assert_allclose(rows, np.broadcast_to(rows[0], rows.shape), atol=1e-12)

    def test_empty_voxels_zero(self, sample):
        out = encode_images(sample.frames, sample.calibs, sample.cloud, small_params(), SPEC)
        assert np.all(out.flat().data[~out.occupancy.ravel()] == 0)

    def test_two_cameras_average(self):
        pose = CameraPose(look_at_rotation(0.0, 0.0), np.array([0.0, 0.0, 1.0]))
        frame = gray_frame(pose)
        p = np.array([[3.0, 0.3, 1.1]])
        cloud = cloud_of(p)
        params = small_params()
        bright = CameraFrame(frame.image * 1.6, frame.intrinsics, frame.pose, frame.depth, frame.prim_id)
        one = encode_images([frame], [frame.calib], cloud, params, SPEC).flat().data
        two = encode_images([bright], [frame.calib], cloud, params, SPEC).flat().data
        both = encode_images([frame, bright], [frame.calib] * 2, cloud, params, SPEC).flat().data
        np.testing.assert_allclose(both, (one + two) / 2, atol=1e-12)

    def test_occluded_point_gets_other_camera_only(self):
        scene = Scene([ground_plane(), ScenePrimitive("sphere", np.array([5.0, 0, 1]), size=(1.0,))])
        front = CameraPose(look_at_rotation(0.0, 0.0), np.array([0.0, 0.0, 1.0]))
        side = CameraPose(look_at_rotation(np.pi / 2, 0.0), np.array([7.0, -6.0, 1.0]))
        frames = [simulate_camera(scene, pose, pinhole_intrinsics(32, 32), 32, 32) for pose in (front, side)]
        behind = cloud_of([[6.0, 0.0, 1.0]])  # far side of the sphere, seen by the side camera only
        plan = plan_lift(frames, [f.calib for f in frames], behind, SPEC)
        assert [vox.size for _, _, vox in plan.per_camera] == [0, 1]

    def test_lift_pairs_match_with_true_depth(self, sample):
        a = plan_lift(sample.frames, sample.calibs, sample.cloud, SPEC)
        depths = [f.project(sample.cloud.xyz)[1] for f in sample.frames]
        b = plan_lift(sample.frames, sample.calibs, sample.cloud, SPEC, depths=depths)
        assert a.pairs == b.pairs and len(a.pairs) > 0


class TestFuseAndRefine:
    def grids(self, sample, params):
        vox = voxelize(sample.cloud, SPEC)
        return encode_points(vox, params), encode_images(sample.frames, sample.calibs, sample.cloud, params, SPEC)

    def test_zero_inputs(self):
        params = zero_bias(small_params())
        p = VoxelFeatureGrid(SPEC, np.zeros(SPEC.dims + (6,)), np.zeros(SPEC.dims, bool))
        i = VoxelFeatureGrid(SPEC, np.zeros(SPEC.dims + (4,)), np.zeros(SPEC.dims, bool))
        out = fuse(p, i, params)
        assert out.values.shape == SPEC.dims + (5,)
        assert np.all(out.values.data == 0)

    def test_extent_mismatch(self):
        other = GridSpec(dims=(8, 8, 8))
        p = VoxelFeatureGrid(SPEC, np.zeros(SPEC.dims + (6,)), np.zeros(SPEC.dims, bool))
        i = VoxelFeatureGrid(other, np.zeros(other.dims + (4,)), np.zeros(other.dims, bool))
        with pytest.raises(ValueError):
            fuse(p, i, small_params())

    def test_gradient_reaches_both_paths(self, sample):
        tape = de.Tape()
        params = {k: tape.leaf(k, v) for k, v in small_params(3).items()}
        p, i = self.grids(sample, params)
        readout = de.sum_(fuse(p, i, params).values)
        gp, gi = de.gradient(readout, ["point.fc1.w", "image.conv1.w"])
        assert np.linalg.norm(gp) > 0 and np.linalg.norm(gi) > 0

    def test_refine_zero_weights_is_identity(self, sample):
        params = small_params()
        fused = fuse(*self.grids(sample, params), params)
        params = dict(params, **{"refine.conv.w": np.zeros_like(params["refine.conv.w"]),
                                 "refine.conv.b": np.zeros_like(params["refine.conv.b"])})
        np.testing.assert_array_equal(refine_3d(fused, params).values.data, fused.values.data)

    def test_refine_gradient(self, sample):
        params = small_params(4)
        params["refine.conv.b"] = np.random.default_rng(0).normal(size=5)
        fused = fuse(*self.grids(sample, params), params)
        tape = de.Tape()
        w = tape.leaf("w", params["refine.conv.w"])
        out = refine_3d(fused, dict(params, **{"refine.conv.w": w}))
        assert out.values.shape == fused.values.shape
        (g,) = de.gradient(de.sum_(de.tanh(out.values)), ["w"])
        idx = (13 * 5 + 2, 3)
        eps = 1e-6

        def f(delta):
            ww = params["refine.conv.w"].copy(); ww[idx] += delta
            return np.tanh(refine_3d(fused, dict(params, **{"refine.conv.w": ww})).values.data).sum()

        num = (f(eps) - f(-eps)) / (2 * eps)
        assert abs(num - g[idx]) <= 1e-6 * abs(num)
