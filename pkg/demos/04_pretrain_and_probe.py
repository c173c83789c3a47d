"""
A small pre-training run and its linear probe
=============================================

Trains on a handful of scenes for a few epochs, watches the loss terms, then
fits a linear classifier on frozen fusion features and compares it with a
randomly initialised network. Expect a couple of minutes on one core.
"""
import sys
from pathlib import Path

from clap_pretrain.config import TrainConfig
from clap_pretrain.probe import PROBE_TEST_SEEDS, PROBE_TRAIN_SEEDS, linear_probe
from clap_pretrain.trainer import read_log, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/04")

cfg = TrainConfig(scene_seeds=list(range(8)), epochs=4, n_warmup=2, lr=2e-3, batch_size=4, n_pixels=128)
ck = train(cfg, out)

# two uniform warm-up epochs, then curvature sampling
for row in read_log(out / "train_log.csv"):
    print(f"step {row['step']:2d} epoch {row['epoch']} {row['sampling_mode']:9s} "
          f"L={row['L']:.3f} L_rend={row['L_rend']:.3f} L_proto={row['L_proto']:.4f}")

# probe on scenes never seen during pre-training
pre = linear_probe(ck, PROBE_TRAIN_SEEDS[:6], PROBE_TEST_SEEDS[:3])
rand = linear_probe(None, PROBE_TRAIN_SEEDS[:6], PROBE_TEST_SEEDS[:3], config=cfg)
print(f"\npre-trained: accuracy {pre.accuracy:.4f}, mIoU {pre.miou:.4f}")
print(f"random init: accuracy {rand.accuracy:.4f}, mIoU {rand.miou:.4f}")
print(f"checkpoints in {out / 'checkpoints'}")
