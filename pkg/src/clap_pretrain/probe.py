"""Linear probe on frozen fusion features: {foreground, ground, empty} per voxel."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from .checkpoint import Checkpoint
from .config import TrainConfig
from .model import SceneData, fused_features, init_params, prepare_scene

CLASSES = ("foreground", "ground", "empty")
PROBE_TRAIN_SEEDS = tuple(range(10_000, 10_016))
PROBE_TEST_SEEDS = tuple(range(20_000, 20_008))


def voxel_labels(data: SceneData) -> tuple[np.ndarray, np.ndarray]:
    """Per-voxel class and the mask of voxels that take part in the probe.

    A voxel is foreground if any LiDAR return inside it hit an object, ground
    if it only holds ground returns, and empty otherwise. Only occupied voxels
    and empty voxels touching them (26-neighbourhood) are probed, so the
    empty class is not dominated by free space far from any surface.
    """
    spec = data.spec
    cloud = data.cloud
    idx, inside = spec.voxel_index(cloud.xyz)
    flat = spec.flat_index(idx[inside])
    fg = np.bincount(flat, weights=(cloud.semantic[inside] == 0).astype(float), minlength=spec.n_voxels) > 0
    occ = np.bincount(flat, minlength=spec.n_voxels) > 0
    labels = np.full(spec.n_voxels, 2, dtype=np.int64)
    labels[occ] = 1
    labels[fg] = 0
    ring = ndimage.binary_dilation(occ.reshape(spec.dims), structure=np.ones((3, 3, 3), bool)).ravel()
    return labels, ring


def _dataset(scenes, feature_fn):
    xs, ys = [], []
    for data in scenes:
        labels, keep = voxel_labels(data)
        xs.append(feature_fn(data)[keep])
        ys.append(labels[keep])
    return np.concatenate(xs), np.concatenate(ys)


@dataclass
class ProbeResult:
    accuracy: float
    iou: dict
    n_train: int
    n_test: int

    @property
    def miou(self) -> float:
        return float(np.mean(list(self.iou.values())))

    def rows(self, name: str = "model") -> list:
        return [[name, f"{self.accuracy:.6f}", f"{self.miou:.6f}"] + [f"{self.iou[c]:.6f}" for c in CLASSES]]


CSV_HEADER = ["model", "accuracy", "miou"] + [f"iou_{c}" for c in CLASSES]


def fit_probe(train_x, train_y, test_x, test_y, seed: int = 0) -> ProbeResult:
    scaler = StandardScaler().fit(train_x)
    clf = LogisticRegression(max_iter=2000, random_state=seed)
    clf.fit(scaler.transform(train_x), train_y)
    pred = clf.predict(scaler.transform(test_x))
    iou = {}
    for k, name in enumerate(CLASSES):
        inter = np.sum((pred == k) & (test_y == k))
        union = np.sum((pred == k) | (test_y == k))
        iou[name] = float(inter / union) if union else 1.0
    return ProbeResult(float(np.mean(pred == test_y)), iou, len(train_y), len(test_y))


def linear_probe(ckpt: Checkpoint | None, train_scenes, test_scenes, config: TrainConfig | None = None,
                 feature_fn=None, seed: int = 0) -> ProbeResult:
    """Fit on ``train_scenes`` and score on ``test_scenes`` (seeds or SceneData).

    ``ckpt=None`` probes a randomly initialised model (the baseline).
    ``feature_fn`` replaces the encoder features entirely, e.g. for sanity checks.
    """
    cfg = config if config is not None else ckpt.config
    if ckpt is not None and tuple(ckpt.params.shapes()["fusion.fc2.w"]) != (cfg.d_f, cfg.d_f):
        raise ValueError("checkpoint is incompatible with the probe config")
    params = ckpt.params if ckpt is not None else init_params(cfg, seed=cfg.seed + 7919)
    feature_fn = feature_fn or (lambda d: fused_features(d, params))

    def load(items):
        return [d if isinstance(d, SceneData) else prepare_scene(cfg, int(d)) for d in items]

    tr_x, tr_y = _dataset(load(train_scenes), feature_fn)
    te_x, te_y = _dataset(load(test_scenes), feature_fn)
    return fit_probe(tr_x, tr_y, te_x, te_y, seed)
