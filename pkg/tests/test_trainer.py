import math

import numpy as np
import pytest

from clap_pretrain.checkpoint import Checkpoint
from clap_pretrain.checks import micro_config
from clap_pretrain.model import PARAM_GROUPS, draw_rays, init_params, prepare_scene
from clap_pretrain.trainer import (
    LOG_COLUMNS,
    Adam,
    Trainer,
    TrainingAborted,
    epoch_order,
    learning_rate,
    read_log,
    step_rng,
    total_loss,
    train,
)


@pytest.fixture(scope="module")
def micro_run(tmp_path_factory):
    cfg = micro_config(epochs=3, scene_seeds=[0, 1], lr=1e-2, n_warmup=2)
    out = tmp_path_factory.mktemp("run")
    ck = train(cfg, out)
    return cfg, out, ck


class TestSchedule:
    def test_cosine_endpoints(self):
        assert learning_rate(0, 11, 5e-5) == 5e-5
        assert abs(learning_rate(10, 11, 5e-5)) < 1e-20
        assert math.isclose(learning_rate(5, 11, 5e-5), 2.5e-5)

    def test_constant(self):
        assert learning_rate(7, 11, 1e-3, "constant") == 1e-3

    def test_deterministic_streams(self):
        cfg = micro_config()
        assert step_rng(cfg, 3).integers(1 << 30) == step_rng(cfg, 3).integers(1 << 30)
        np.testing.assert_array_equal(epoch_order(cfg, 2), epoch_order(cfg, 2))


class TestTotalLoss:
    def batch(self, cfg):
        return [prepare_scene(cfg, s) for s in cfg.scene_seeds]

    def test_no_proto_weight_gives_scaled_rendering_loss(self):
        cfg = micro_config(omega_proto=0.0)
        res = total_loss(self.batch(cfg), init_params(cfg), 0, cfg, np.random.default_rng(0))
        for t in res.terms:
            assert t.total.data.item() == cfg.omega_r * t.rend.data.item()

    def test_decomposition(self):
        cfg = micro_config(scene_seeds=[0, 1])
        v = total_loss(self.batch(cfg), init_params(cfg), 0, cfg, np.random.default_rng(1)).values
        assert abs(v["L"] - (cfg.omega_r * v["L_rend"] + cfg.omega_proto * v["L_proto"])) < 1e-12
        proto = cfg.omega_swav * v["L_SwAV"] + cfg.omega_em * v["L_EM"] + cfg.omega_gmm * v["L_GMM"]
        assert abs(v["L_proto"] - proto) < 1e-12

    def test_every_group_receives_gradient(self):
        cfg = micro_config()
        params = init_params(cfg)
        grads = total_loss(self.batch(cfg), params, 0, cfg, np.random.default_rng(2)).grads
        for group in PARAM_GROUPS:
            norm = sum(np.linalg.norm(g) for k, g in grads.items() if k.startswith(group + "."))
            assert norm > 0, group

    def test_frozen_draws_reproduce(self):
        cfg = micro_config()
        batch = self.batch(cfg)
        params = init_params(cfg)
        first = total_loss(batch, params, 0, cfg, np.random.default_rng(3))
        draws = [t.draw for t in first.terms]
        codes = [t.codes for t in first.terms]
        again = total_loss(batch, params, 0, cfg, draws=draws, codes=codes, with_grad=False)
        assert again.values == first.values

    def test_empty_batch(self):
        cfg = micro_config()
        with pytest.raises(ValueError):
            total_loss([], init_params(cfg), 0, cfg)

    def test_alternating_modalities(self):
        cfg = micro_config(alternate_modalities=True)
        batch = self.batch(cfg)
        even = total_loss(batch, init_params(cfg), 0, cfg, np.random.default_rng(0), step=0, with_grad=False)
        odd = total_loss(batch, init_params(cfg), 0, cfg, np.random.default_rng(0), step=1, with_grad=False)
        assert even.terms[0].draw.drop == "images" and odd.terms[0].draw.drop == "points"


class TestAdam:
    def test_first_step_moves_by_lr(self):
        cfg = micro_config()
        params = init_params(cfg)
        before = params["field.log_h"].copy()
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        grads["field.log_h"] = np.array([3.0])
        Adam(params).step(params, grads, 0.01)
        np.testing.assert_allclose(params["field.log_h"], before - 0.01, rtol=1e-6)

    def test_prototypes_stay_unit(self):
        cfg = micro_config()
        params = init_params(cfg)
        grads = {k: np.random.default_rng(0).normal(size=v.shape) for k, v in params.items()}
        Adam(params).step(params, grads, 0.5)
        np.testing.assert_allclose(np.linalg.norm(params["proto.K"], axis=1), 1.0)


class TestTraining:
    def test_log_columns_and_rows(self, micro_run):
        cfg, out, ck = micro_run
        rows = read_log(out / "train_log.csv")
        assert (out / "train_log.csv").read_text().splitlines()[0] == ",".join(LOG_COLUMNS)
        assert [r["step"] for r in rows] == list(range(ck.step))
        for r in rows:
            assert abs(r["L"] - (cfg.omega_r * r["L_rend"] + cfg.omega_proto * r["L_proto"])) < 1e-12

    def test_warmup_then_curvature(self, micro_run):
        cfg, out, _ = micro_run
        modes = {r["epoch"]: r["sampling_mode"] for r in read_log(out / "train_log.csv")}
        assert modes == {0: "uniform", 1: "uniform", 2: "curvature"}

    def test_checkpoint_every_epoch(self, micro_run):
        _, out, _ = micro_run
        names = sorted(p.name for p in (out / "checkpoints").glob("*.json"))
        assert names == ["epoch_001.json", "epoch_002.json", "epoch_003.json", "last.json"]

    def test_loss_decreases(self, micro_run):
        _, out, _ = micro_run
        rows = read_log(out / "train_log.csv")
        assert rows[-1]["L"] < rows[0]["L"]

    def test_identical_runs_identical_logs(self, micro_run, tmp_path):
        cfg, out, _ = micro_run
        train(cfg, tmp_path)
        assert (tmp_path / "train_log.csv").read_bytes() == (out / "train_log.csv").read_bytes()

    def test_resume_matches(self, micro_run, tmp_path):
        cfg, out, final = micro_run
        ck = Checkpoint.load(out / "checkpoints" / "epoch_001.json")
        lines = (out / "train_log.csv").read_text().splitlines(keepends=True)
        (tmp_path / "train_log.csv").write_text("".join(lines[:1 + ck.step]))
        resumed = Trainer(cfg, tmp_path, resume=ck).run()
        assert (tmp_path / "train_log.csv").read_bytes() == (out / "train_log.csv").read_bytes()
        for name in final.params.names():
            np.testing.assert_array_equal(resumed.params[name], final.params[name])

    def test_resume_rejects_other_config(self, micro_run):
        cfg, out, _ = micro_run
        ck = Checkpoint.load(out / "checkpoints" / "last.json")
        with pytest.raises(ValueError):
            Trainer(cfg.replace(lr=0.5), resume=ck)

    def test_fresh_run_truncates_log(self, tmp_path):
        cfg = micro_config()
        (tmp_path / "train_log.csv").write_text("stale\n")
        train(cfg, tmp_path)
        assert (tmp_path / "train_log.csv").read_text().startswith("step,")

    def test_non_finite_abort_names_node(self):
        cfg = micro_config()
        tr = Trainer(cfg)
        tr.params["field.sdf.2.b"] = np.array([np.nan])
        with pytest.raises(TrainingAborted, match="first non-finite node"):
            tr.run()


class TestCheckpoint:
    def test_byte_identical_round_trip(self, micro_run, tmp_path):
        _, _, ck = micro_run
        path = ck.save(tmp_path / "a.json")
        first = path.read_bytes(), path.with_suffix(".bin").read_bytes()
        Checkpoint.load(path).save(path)
        assert (path.read_bytes(), path.with_suffix(".bin").read_bytes()) == first

    def test_contents(self, micro_run, tmp_path):
        _, _, ck = micro_run
        back = Checkpoint.load(ck.save(tmp_path / "b.json"))
        assert back.epoch == ck.epoch and back.step == ck.step and back.config == ck.config
        np.testing.assert_array_equal(back.bank, ck.bank)
        for name in ck.params.names():
            np.testing.assert_array_equal(back.params[name], ck.params[name])
            np.testing.assert_array_equal(back.adam_v[name], ck.adam_v[name])

    def test_tampered_config_rejected(self, micro_run, tmp_path):
        _, _, ck = micro_run
        path = ck.save(tmp_path / "c.json")
        path.write_text(path.read_text().replace('"lr": 0.01', '"lr": 0.02'))
        with pytest.raises(ValueError):
            Checkpoint.load(path)

    def test_wrong_format(self, tmp_path):
        (tmp_path / "x.json").write_text('{"format": "other"}')
        with pytest.raises(ValueError):
            Checkpoint.load(tmp_path / "x.json")


def test_draw_is_seeded():
    cfg = micro_config()
    data = prepare_scene(cfg, 0)
    a = draw_rays(data, cfg, np.random.default_rng(5), "uniform")
    b = draw_rays(data, cfg, np.random.default_rng(5), "uniform")
    np.testing.assert_array_equal(a.lidar_idx, b.lidar_idx)
    np.testing.assert_array_equal(a.cam_dirs, b.cam_dirs)
