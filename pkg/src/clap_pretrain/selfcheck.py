"""Fast invariant suite behind ``clap-pretrain selfcheck``.

Covers the closed-form and property checks of every module. The long
training-trend checks live in the acceptance tests instead.
"""
from __future__ import annotations

import math
import tempfile
import time
from pathlib import Path

import numpy as np

from . import diffengine as de


def _engine():
    tape = de.Tape()
    x = tape.leaf("x", np.array(3.0))
    (g,) = de.gradient(x * x, [x])
    assert abs(g - 6.0) < 1e-12
    p = tape.leaf("p", np.array([[1.2, -0.4, 1.5]]))
    n = p / de.l2norm(p)
    jac = de.jacobian(n, p)[0]
    u = p.data[0] / np.linalg.norm(p.data[0])
    assert np.allclose(jac, (np.eye(3) - np.outer(u, u)) / np.linalg.norm(p.data[0]), atol=1e-12)


def _rendering():
    from .renderer import occupancy_alpha, render_weights, transmittance

    a = occupancy_alpha(np.array([[1.0, -1.0]]), 1.0).data[0, 0]
    assert abs(a - 0.6322) < 1e-4
    assert np.array_equal(transmittance(np.array([[0.5, 0.5, 0.5]])).data[0], [1.0, 0.5, 0.25])
    rng = np.random.default_rng(0)
    rw = render_weights(rng.normal(0, 2, size=(1000, 16)), 4.0)
    al, t, w = rw.alpha.data, rw.trans.data, rw.weights.data
    assert al.min() >= 0 and al.max() <= 1 and t.min() >= 0 and t.max() <= 1
    assert np.all(np.diff(t, axis=1) <= 0) and np.all(w.sum(1) <= 1 + 1e-12)


def _prototypes():
    from .protolearn import em_loss, gram_loss, marginal_error, renormalize, sinkhorn_codes

    assert abs(gram_loss(np.eye(4)).data) < 1e-15
    assert abs(gram_loss(np.tile([[1.0, 0, 0]], (4, 1))).data - 1.0) < 1e-12
    assert abs(em_loss(np.zeros((1, 4)), np.zeros((1, 4))).data - 2 * math.log(4) / 4) < 1e-9
    e = np.random.default_rng(1).normal(size=(64, 8))
    k = np.random.default_rng(2).normal(size=(6, 8))
    s = renormalize(e) @ renormalize(k).T
    assert marginal_error(sinkhorn_codes(s, 200)) < 1e-9
    assert marginal_error(sinkhorn_codes(s, 3)) < marginal_error(sinkhorn_codes(s, 1))


def _curvature():
    from .curvsample import estimate_curvature
    from .synthscene import ScenePrimitive, ground_plane

    rng = np.random.default_rng(2)
    for r in (0.5, 1.0, 2.0):
        sph = ScenePrimitive("sphere", np.array([0.3, -0.2, 1.0]), size=(r,))
        d = rng.normal(size=(50, 3))
        pts = sph.translation + r * d / np.linalg.norm(d, axis=1, keepdims=True)
        w = estimate_curvature(pts, sph.sdf_diff)
        assert np.max(np.abs(w - math.sqrt(2) / r)) < 1e-6
    plane = ground_plane()
    pts = np.column_stack([rng.uniform(-5, 5, (50, 2)), np.zeros(50)])
    assert estimate_curvature(pts, plane.sdf_diff).max() < 1e-9


def _gradients():
    from .checks import gradient_suite

    for name, res in gradient_suite(per_tensor=4).items():
        assert res.frac_within >= 0.99 and res.worst < 1e-3, f"{name}: {res.frac_within:.3f}, worst {res.worst:.2e}"


def _determinism():
    from .checkpoint import Checkpoint
    from .checks import micro_config
    from .trainer import Trainer, train

    cfg = micro_config(epochs=2, scene_seeds=[0, 1], lr=1e-3)
    with tempfile.TemporaryDirectory() as tmp:
        a, b, c = Path(tmp, "a"), Path(tmp, "b"), Path(tmp, "c")
        train(cfg, a)
        train(cfg, b)
        log_a = (a / "train_log.csv").read_bytes()
        assert log_a == (b / "train_log.csv").read_bytes()
        ck = Checkpoint.load(a / "checkpoints" / "epoch_001.json")
        # resume into a fresh directory seeded with the first epoch's log lines
        c.mkdir()
        lines = log_a.decode().splitlines(keepends=True)
        (c / "train_log.csv").write_text("".join(lines[: 1 + ck.step]))
        Trainer(cfg, c, resume=ck).run()
        assert (c / "train_log.csv").read_bytes() == log_a
        path = ck.save(Path(tmp, "rt.json"))
        first = path.read_bytes(), path.with_suffix(".bin").read_bytes()
        Checkpoint.load(path).save(path)
        assert (path.read_bytes(), path.with_suffix(".bin").read_bytes()) == first


CHECKS = [
    ("diffengine: first and second derivatives", _engine),
    ("renderer: closed forms and weight invariants", _rendering),
    ("protolearn: closed forms and Sinkhorn marginals", _prototypes),
    ("curvsample: analytic sphere and plane curvature", _curvature),
    ("trainer: gradients vs finite differences", _gradients),
    ("trainer: determinism, resume, checkpoint round trip", _determinism),
]


def run_selfcheck(verbose: bool = True) -> list:
    failures = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            fn()
            status = "PASS"
        except Exception as exc:  # report every failure, keep going
            status = f"FAIL ({type(exc).__name__}: {exc})"
            failures.append(name)
        if verbose:
            print(f"{status[:4]} {name} [{time.perf_counter() - t0:.1f}s]{status[4:]}")
    return failures
