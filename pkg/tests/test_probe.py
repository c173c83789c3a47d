import numpy as np
import pytest

from clap_pretrain.checks import micro_config
from clap_pretrain.model import prepare_scene
from clap_pretrain.probe import CLASSES, CSV_HEADER, fit_probe, linear_probe, voxel_labels
from clap_pretrain.trainer import train

CFG = micro_config(grid_dims=[6, 6, 4], n_objects=2)


@pytest.fixture(scope="module")
def scenes():
    return [prepare_scene(CFG, s) for s in (100, 101, 102)], [prepare_scene(CFG, s) for s in (200, 201)]


def one_hot_labels(data):
    labels, _ = voxel_labels(data)
    return np.eye(3)[labels]


class TestLabels:
    def test_classes_and_ring(self, scenes):
        data = scenes[0][0]
        labels, ring = voxel_labels(data)
        assert set(np.unique(labels)) <= {0, 1, 2}
        occ = labels < 2
        assert np.all(ring[occ])
        assert np.any(ring & ~occ)

    def test_foreground_present(self, scenes):
        assert any(np.any(voxel_labels(d)[0] == 0) for d in scenes[0])


class TestProbe:
    def test_ground_truth_features_are_perfect(self, scenes):
        r = linear_probe(None, *scenes, config=CFG, feature_fn=one_hot_labels)
        assert r.accuracy == 1.0
        assert all(v == 1.0 for v in r.iou.values())

    def test_deterministic(self, scenes):
        a = linear_probe(None, *scenes, config=CFG)
        b = linear_probe(None, *scenes, config=CFG)
        assert a == b

    def test_rows_match_header(self, scenes):
        r = linear_probe(None, *scenes, config=CFG)
        (row,) = r.rows("x")
        assert len(row) == len(CSV_HEADER)
        assert r.miou == pytest.approx(np.mean([r.iou[c] for c in CLASSES]))

    def test_checkpoint_round_trip_keeps_score(self, scenes, tmp_path):
        from clap_pretrain.checkpoint import Checkpoint

        ck = train(CFG.replace(lr=1e-2), tmp_path)
        back = Checkpoint.load(tmp_path / "checkpoints" / "last.json")
        assert linear_probe(ck, *scenes) == linear_probe(back, *scenes)

    def test_incompatible_config(self, scenes, tmp_path):
        ck = train(CFG, tmp_path)
        with pytest.raises(ValueError):
            linear_probe(ck, *scenes, config=CFG.replace(d_f=6))

    def test_iou_absent_class(self):
        x = np.array([[0.0], [1.0], [0.1], [0.9]])
        y = np.array([1, 2, 1, 2])
        r = fit_probe(x, y, x, y)
        assert r.accuracy == 1.0 and r.iou["foreground"] == 1.0
