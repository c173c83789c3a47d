import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clap_pretrain.config import ABLATION_MODES, TrainConfig, ablation_mode, load_config


class TestDefaults:
    def test_loss_weights(self):
        cfg = TrainConfig()
        assert (cfg.omega_r, cfg.omega_proto) == (2.0, 1.0)
        assert (cfg.omega_sur, cfg.omega_c) == (0.05, 0.05)
        assert (cfg.omega_swav, cfg.omega_em, cfg.omega_gmm) == (1.0, 0.1, 0.1)

    def test_schedule_and_sampling(self):
        cfg = TrainConfig()
        assert cfg.lr == 5e-5 and cfg.schedule == "cosine"
        assert cfg.mask_rate == 0.9 and cfg.n_warmup == 4 and cfg.n_sink == 3 and cfg.tau == 1.0
        assert len(cfg.scene_seeds) == 64
        assert math.isclose(math.exp(cfg.init_log_h), 4.0)


class TestValidation:
    @pytest.mark.parametrize("change", [dict(lr=0.0), dict(omega_em=-1.0), dict(mask_rate=1.0),
                                        dict(schedule="step"), dict(sampling="fps"), dict(n_k=1),
                                        dict(curvature_mode="mean"), dict(scene_seeds=[]), dict(n_ray_samples=1)])
    def test_rejects(self, change):
        with pytest.raises(ValueError):
            TrainConfig(**change)

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"learning_rate": 1.0})


class TestSerialization:
    def test_toml_round_trip(self):
        cfg = TrainConfig(seed=3, lr=1.234e-3, scene_seeds=[5, 9], alternate_modalities=True, mode="separate")
        again = TrainConfig.from_toml(cfg.to_toml())
        assert again == cfg and again.hash() == cfg.hash()

    def test_hash_changes_with_content(self):
        assert TrainConfig(seed=1).hash() != TrainConfig(seed=2).hash()

    @settings(max_examples=30, deadline=None)
    @given(st.floats(1e-9, 1.0), st.integers(0, 2 ** 31), st.floats(0, 0.99))
    def test_lossless(self, lr, seed, rate):
        cfg = TrainConfig(lr=lr, seed=seed, mask_rate=rate)
        assert TrainConfig.from_toml(cfg.to_toml()) == cfg
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_load_config_with_overrides(self, tmp_path, monkeypatch):
        monkeypatch.delenv("CLAP_SEED", raising=False)
        path = tmp_path / "c.toml"
        path.write_text(TrainConfig(epochs=3, lr=1e-3).to_toml())
        cfg = load_config(path, {"epochs": 5})
        assert cfg.epochs == 5 and cfg.lr == 1e-3

    def test_env_seed(self, monkeypatch):
        monkeypatch.setenv("CLAP_SEED", "42")
        assert load_config(None, {"seed": 1}).seed == 42


class TestAblation:
    def test_full_is_unchanged(self):
        cfg = TrainConfig(lr=1e-3)
        assert ablation_mode(cfg, "full") == cfg

    def test_modes(self):
        cfg = TrainConfig()
        jc, ju, sep = (ablation_mode(cfg, m) for m in ("joint-curvature", "joint-uniform", "separate"))
        assert jc.omega_proto == 0 and jc.sampling == "curvature"
        assert ju.omega_proto == 0 and ju.sampling == "uniform"
        assert sep.alternate_modalities and sep.sampling == "uniform" and sep.omega_proto == 0

    def test_modes_are_distinct(self):
        cfgs = [ablation_mode(TrainConfig(), m) for m in ABLATION_MODES]
        assert len({c.hash() for c in cfgs}) == 4

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            ablation_mode(TrainConfig(), "prototypes-only")
