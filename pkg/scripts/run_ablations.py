#!/usr/bin/env python3
"""Mixing-strategy, skip-connection, and classifier ablations on the synthetic
benchmark, with one row per variant (F1 / IoU / parameter count).

    python scripts/run_ablations.py --out runs/ablations --epochs 6
"""

import argparse
import time
from pathlib import Path

import numpy as np

from tinycd.augment import AugmentationConfig
from tinycd.data import SyntheticSpec, generate_synthetic, load_dataset
from tinycd.model import ModelConfig, TinyCDModel
from tinycd.optim import AdamW, ScheduleConfig, cosine_lr
from tinycd.train import evaluate, train_epoch

VARIANTS = {
    "default": {},
    "no_skip": {"use_skip_connections": False},
    "direct_classifier": {"classifier": "direct_sigmoid"},
    "subtraction_mix": {"mixing_strategy_bottleneck": "subtraction", "mixing_strategy_skip": "subtraction"},
    "concat_conv_mix": {"mixing_strategy_bottleneck": "concat_conv", "mixing_strategy_skip": "concat_conv"},
}


def train_variant(overrides, train_ds, test_ds, seed, epochs):
    model = TinyCDModel(ModelConfig(**overrides), seed=seed)
    optimizer = AdamW(model.parameters(), lr=3e-3, weight_decay=9e-3)
    schedule = ScheduleConfig(lr_max=3e-3, total_epochs=epochs)
    augmentation = AugmentationConfig(seed=seed)
    for epoch in range(epochs):
        optimizer.lr = cosine_lr(epoch, schedule)
        train_epoch(
            model,
            train_ds,
            optimizer,
            rng=np.random.default_rng(seed + epoch),
            augmentation=augmentation,
            epoch=epoch,
        )
    report = evaluate(model, test_ds)
    return report, model.param_count()


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("runs/ablations"))
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=6)
    args = parser.parse_args()

    data_root = args.out / "data"
    if not (data_root / "train").exists():
        for split, count in (("train", 200), ("test", 80)):
            generate_synthetic(SyntheticSpec(count=count, size=64, seed=1), data_root, split)

    train_ds = load_dataset(data_root, "train")
    test_ds = load_dataset(data_root, "test")

    print(f"{'variant':20s} {'F1':>8s} {'IoU':>8s} {'params':>8s} {'time':>6s}")
    for name, overrides in VARIANTS.items():
        t0 = time.time()
        report, params = train_variant(overrides, train_ds, test_ds, args.seed, args.epochs)
        print(f"{name:20s} {report.f1:8.4f} {report.iou:8.4f} {params:8d} {time.time() - t0:5.0f}s")


if __name__ == "__main__":
    main()
