"""Pre-training loop: Adam, cosine schedule, curvature refresh, CSV log, checkpoints."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffengine as de
from .checkpoint import Checkpoint
from .config import TrainConfig
from .curvsample import CurvatureWeights, sampling_schedule
from .model import Draw, SceneData, SceneTerms, curvature_weights, draw_rays, init_params, prepare_scene, scene_loss
from .protolearn import renormalize

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "L", "L_rend", "L_proto", "L_EM", "L_SwAV", "L_GMM", "lr", "sampling_mode")
BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingAborted(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""


def learning_rate(step: int, total_steps: int, lr0: float, schedule: str = "cosine") -> float:
    if schedule == "constant" or total_steps <= 1:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps - 1) / (total_steps - 1)))


def epoch_strategy(cfg: TrainConfig, epoch: int) -> str:
    if cfg.sampling == "uniform":
        return "uniform"
    return sampling_schedule(epoch, cfg.n_warmup)


def step_rng(cfg: TrainConfig, step: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, 1, step])


def epoch_order(cfg: TrainConfig, epoch: int) -> np.ndarray:
    return np.random.default_rng([cfg.seed, 2, epoch]).permutation(len(cfg.scene_seeds))


@dataclass
class StepResult:
    terms: list  # SceneTerms per scene
    grads: dict
    values: dict  # batch-mean floats keyed like the log columns


def _mean(terms: list, attr: str) -> float:
    return float(sum(getattr(t, attr).data.item() for t in terms) / len(terms))


def total_loss(batch: list, params: de.ParamSet, epoch: int, cfg: TrainConfig,
               rng: np.random.Generator | None = None, weights: dict | None = None,
               draws: list | None = None, codes: list | None = None, step: int = 0,
               with_grad: bool = True) -> StepResult:
    """Batch-mean of omega_r * L_rend + omega_proto * L_proto with gradients.

    ``batch`` is a list of SceneData. The sampling strategy follows the epoch
    (warm-up then curvature) unless the config pins it to uniform. ``draws`` and
    ``codes`` freeze every random choice, which finite-difference checks need.
    """
    if not batch:
        raise ValueError("batch must hold at least one scene")
    strategy = epoch_strategy(cfg, epoch)
    rng = np.random.default_rng(0) if rng is None else rng
    grads = {name: np.zeros_like(arr) for name, arr in params.items()}
    terms = []
    for k, data in enumerate(batch):
        if draws is not None:
            draw = draws[k]
        else:
            drop = None
            if cfg.alternate_modalities:
                drop = "images" if step % 2 == 0 else "points"
            w = None if weights is None else weights.get(data.seed)
            draw = draw_rays(data, cfg, rng, strategy, w, drop)
        tape = de.Tape()
        P = params.bind(tape) if with_grad else params.constants()
        t = scene_loss(data, P, cfg, draw, None if codes is None else codes[k])
        t.draw = draw
        if not np.isfinite(t.total.data).all():
            _abort(tape, step, "loss")
        if with_grad:
            names = params.names()
            gs = de.gradient(t.total, names)
            for name, g in zip(names, gs):
                if not np.all(np.isfinite(g)):
                    _abort(tape, step, f"gradient of {name}")
                grads[name] += g / len(batch)
        terms.append(t)
    values = {"L": _mean(terms, "total"), "L_rend": _mean(terms, "rend"), "L_proto": _mean(terms, "proto"),
              "L_EM": _mean(terms, "em"), "L_SwAV": _mean(terms, "swav"), "L_GMM": _mean(terms, "gmm")}
    return StepResult(terms, grads, values)


def _abort(tape: de.Tape, step: int, what: str):
    bad = tape.first_nonfinite()
    where = f"node {bad} (op '{tape.ops[bad]}')" if bad is not None else "an unrecorded value"
    raise TrainingAborted(f"non-finite {what} at step {step}: first non-finite {where}")


class Adam:
    def __init__(self, params: de.ParamSet, m: dict | None = None, v: dict | None = None, t: int = 0):
        self.m = m or {k: np.zeros_like(a) for k, a in params.items()}
        self.v = v or {k: np.zeros_like(a) for k, a in params.items()}
        self.t = t

    def step(self, params: de.ParamSet, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = BETAS
        for name, g in grads.items():
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        if "proto.K" in params:
            params["proto.K"] = renormalize(params["proto.K"])


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


class Trainer:
    """Stateful training run; ``run()`` continues until ``cfg.epochs`` are done."""

    def __init__(self, cfg: TrainConfig, out_dir=None, resume: Checkpoint | None = None,
                 scenes: list | None = None, on_step=None):
        self.cfg = cfg
        self.out = None if out_dir is None else Path(out_dir)
        self.scenes = scenes if scenes is not None else [prepare_scene(cfg, s) for s in cfg.scene_seeds]
        if len(self.scenes) != len(cfg.scene_seeds):
            raise ValueError("scene list does not match scene_seeds")
        self.steps_per_epoch = math.ceil(len(self.scenes) / cfg.batch_size)
        self.total_steps = cfg.epochs * self.steps_per_epoch
        self.on_step = on_step
        self.weights: dict = {}
        if resume is not None:
            if resume.config.hash() != cfg.hash():
                raise ValueError("checkpoint was written with a different config")
            self.params = resume.params.copy()
            self.adam = Adam(self.params, {k: a.copy() for k, a in resume.adam_m.items()},
                             {k: a.copy() for k, a in resume.adam_v.items()}, resume.step)
            self.epoch, self.step = resume.epoch, resume.step
        else:
            self.params = init_params(cfg)
            self.adam = Adam(self.params)
            self.epoch, self.step = 0, 0
            if self.out is not None and self.log_path.exists():
                self.log_path.unlink()

    @property
    def log_path(self) -> Path:
        return self.out / "train_log.csv"

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.params.copy(), self.cfg, self.epoch, self.step,
                          {k: a.copy() for k, a in self.adam.m.items()}, {k: a.copy() for k, a in self.adam.v.items()})

    def refresh_weights(self) -> None:
        self.weights = {d.seed: curvature_weights(d, self.params, self.cfg, self.epoch) for d in self.scenes}

    def _log(self, row: dict) -> None:
        if self.out is None:
            return
        self.out.mkdir(parents=True, exist_ok=True)
        new = not self.log_path.exists()
        with open(self.log_path, "a", newline="") as fh:
            if new:
                fh.write(",".join(LOG_COLUMNS) + "\n")
            fh.write(",".join(_fmt(row[c]) for c in LOG_COLUMNS) + "\n")

    def run_epoch(self) -> list:
        cfg = self.cfg
        strategy = epoch_strategy(cfg, self.epoch)
        if strategy == "curvature":
            self.refresh_weights()
        order = epoch_order(cfg, self.epoch)
        rows = []
        for b in range(self.steps_per_epoch):
            batch = [self.scenes[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            lr = learning_rate(self.step, self.total_steps, cfg.lr, cfg.schedule)
            res = total_loss(batch, self.params, self.epoch, cfg, step_rng(cfg, self.step),
                             self.weights if strategy == "curvature" else None, step=self.step)
            self.adam.step(self.params, res.grads, lr)
            row = dict(res.values, step=self.step, epoch=self.epoch, lr=lr, sampling_mode=strategy)
            self._log(row)
            rows.append(row)
            if self.on_step is not None:
                self.on_step(self, row)
            self.step += 1
        self.epoch += 1
        if self.out is not None:
            ck = self.checkpoint()
            ck.save(self.out / "checkpoints" / f"epoch_{self.epoch:03d}.json")
            ck.save(self.out / "checkpoints" / "last.json")
        return rows

    def run(self) -> Checkpoint:
        while self.epoch < self.cfg.epochs:
            rows = self.run_epoch()
            log.info("epoch %d done: L=%.5f", self.epoch - 1, rows[-1]["L"])
        return self.checkpoint()


def train(config: TrainConfig, out_dir=None, resume: Checkpoint | None = None, scenes: list | None = None,
          on_step=None) -> Checkpoint:
    """Pre-train from scratch (or from ``resume``) and return the final checkpoint."""
    return Trainer(config, out_dir, resume, scenes, on_step).run()


def read_log(path) -> list[dict]:
    import csv

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in LOG_COLUMNS:
            if k in ("step", "epoch"):
                r[k] = int(r[k])
            elif k != "sampling_mode":
                r[k] = float(r[k])
    return rows
