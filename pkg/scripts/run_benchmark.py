#!/usr/bin/env python3
"""Full desk-scale experiment: generate the synthetic benchmark, train the
default model, and report test metrics.

    python scripts/run_benchmark.py --out runs/benchmark --seed 0
"""

import argparse
import json
import time
from pathlib import Path

from tinycd.checkpoint import save_checkpoint
from tinycd.config import RunConfig
from tinycd.data import SyntheticSpec, generate_synthetic, load_dataset
from tinycd.model import ModelConfig, TinyCDModel
from tinycd.optim import AdamW
from tinycd.train import evaluate, fit


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("runs/benchmark"))
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--train-count", type=int, default=500)
    args = parser.parse_args()

    data_root = args.out / "data"
    if not (data_root / "train").exists():
        t0 = time.time()
        for split, count in (("train", args.train_count), ("val", 100), ("test", 100)):
            generate_synthetic(SyntheticSpec(count=count, size=args.size, seed=args.seed), data_root, split)
        print(f"generated dataset in {time.time() - t0:.1f}s")

    cfg = RunConfig.from_dict(
        {
            "data_root": str(data_root),
            "epochs": args.epochs,
            "seed": args.seed,
            "augmentation": {"seed": args.seed},
        }
    )
    train_ds = load_dataset(data_root, "train")
    val_ds = load_dataset(data_root, "val")
    test_ds = load_dataset(data_root, "test")

    model = TinyCDModel(cfg.model, seed=cfg.seed)
    optimizer = AdamW(model.parameters(), lr=cfg.optimizer.lr, weight_decay=cfg.optimizer.weight_decay)
    print(f"model parameters: {model.param_count()}")

    result = fit(model, optimizer, train_ds, val_ds, cfg, args.out)
    test_report = evaluate(model, test_ds)
    print(f"test: {test_report.format()}")
    (args.out / "metrics_test.json").write_text(json.dumps(test_report.to_dict(), indent=2) + "\n")
    save_checkpoint(model, optimizer, args.out / "final.ckpt", meta={"test_f1": test_report.f1})


if __name__ == "__main__":
    main()
