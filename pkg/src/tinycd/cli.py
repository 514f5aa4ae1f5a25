"""Command-line entry points: train, eval, predict, gradcheck, synth, ablate.

Exit codes: 0 success, 1 check/validation failure, 2 usage error.
"""

from __future__ import annotations

import itertools
import json
import sys
from pathlib import Path

import click
import numpy as np

from .checkpoint import load_checkpoint, restore_model
from .config import RunConfig
from .data import SyntheticSpec, _read_rgb, generate_synthetic, load_dataset, save_prediction
from .errors import TinyCDError
from .gradcheck import run_suite
from .metrics import MetricsReport
from .model import TinyCDModel
from .optim import AdamW
from .tensor import Tensor, no_grad, set_deterministic
from .train import evaluate, fit

_DTYPES = {"f32": np.float32, "f64": np.float64}


def _fail(exc: Exception) -> None:
    raise click.ClickException(str(exc))


def _write_report(report: MetricsReport, json_path: Path, txt_path: Path | None = None) -> None:
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    if txt_path is not None:
        txt_path.write_text(report.format() + "\n")


def _load_run_config(config_path, seed, epochs, precision, deterministic, data_root) -> RunConfig:
    cfg = RunConfig.load(config_path)
    updates = cfg.to_dict()
    if seed is not None:
        updates["seed"] = seed
        updates["augmentation"]["seed"] = seed
    if epochs is not None:
        updates["epochs"] = epochs
        updates["schedule"]["total_epochs"] = max(1, epochs)
    if precision is not None:
        updates["precision"] = precision
    if deterministic:
        updates["deterministic"] = True
    if data_root is not None:
        updates["data_root"] = str(data_root)
    return RunConfig.from_dict(updates)


@click.group()
def main():
    """Change detection toolkit: Siamese U-Net training, evaluation, and verification."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--data", "data_root", type=click.Path(file_okay=False), default=None, help="Override data_root.")
@click.option("--seed", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--precision", type=click.Choice(["f32", "f64"]), default=None)
@click.option("--deterministic", is_flag=True, default=False)
def train(config_path, out_dir, data_root, seed, epochs, precision, deterministic):
    """Train on data_root/{train,val}; writes last.ckpt, best.ckpt, logs, and metrics."""
    try:
        cfg = _load_run_config(config_path, seed, epochs, precision, deterministic, data_root)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
        if cfg.deterministic:
            set_deterministic(True)

        train_ds = load_dataset(cfg.data_root, "train")
        val_ds = load_dataset(cfg.data_root, "val")
        dtype = _DTYPES[cfg.precision]
        model = TinyCDModel(cfg.model, seed=cfg.seed, dtype=dtype)
        optimizer = AdamW(
            model.parameters(),
            lr=cfg.optimizer.lr,
            weight_decay=cfg.optimizer.weight_decay,
            beta1=cfg.optimizer.beta1,
            beta2=cfg.optimizer.beta2,
            eps=cfg.optimizer.eps,
            amsgrad=cfg.optimizer.amsgrad,
        )
        click.echo(f"training {model.param_count()} parameters on {len(train_ds)} samples")
        result = fit(model, optimizer, train_ds, val_ds, cfg, out, log=click.echo)
        report = result["final_val"]
        _write_report(report, out / "metrics_val.json", out / "metrics_val.txt")
        click.echo(f"final val: {report.format()}")
        click.echo(f"best val_f1 {result['best']['f1']:.4f} at epoch {result['best']['epoch']}")
    except TinyCDError as exc:
        _fail(exc)


@main.command(name="eval")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_root", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="val", show_default=True)
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="Also write report JSON here.")
def eval_cmd(ckpt_path, data_root, split, threshold, out_path):
    """Evaluate a checkpoint on one split and print Pr/Rc/F1/IoU/OA plus raw counts."""
    try:
        model = restore_model(load_checkpoint(ckpt_path))
        dataset = load_dataset(data_root, split)
        report = evaluate(model, dataset, decision_threshold=threshold)
        click.echo(report.format())
        click.echo(json.dumps(report.to_dict(), sort_keys=True))
        if out_path:
            _write_report(report, Path(out_path))
    except TinyCDError as exc:
        _fail(exc)


@main.command()
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--image-a", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--image-b", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--dump-masks", is_flag=True, default=False, help="Also write each normalized attention mask.")
@click.option("--threshold", type=float, default=0.5, show_default=True)
def predict(ckpt_path, image_a, image_b, out_path, dump_masks, threshold):
    """Predict the binary change mask for one registered image pair."""
    try:
        model = restore_model(load_checkpoint(ckpt_path))
        img1 = _read_rgb(Path(image_a))
        img2 = _read_rgb(Path(image_b))
        if img1.shape != img2.shape:
            raise TinyCDError(f"image shapes differ: {img1.shape} vs {img2.shape}")
        i1 = Tensor(img1[None].astype(model.dtype))
        i2 = Tensor(img2[None].astype(model.dtype))
        with no_grad():
            prob, masks = model.forward_with_masks(i1, i2)
        dumps = [(stride, m.data[0]) for stride, m in masks] if dump_masks else None
        written = save_prediction(prob.data[0], out_path, dumps, binarize_threshold=threshold)
        for p in written:
            click.echo(f"wrote {p}")
    except TinyCDError as exc:
        _fail(exc)


@main.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--skip-model", is_flag=True, default=False, help="Only run the per-op checks.")
@click.option(
    "--inject-fault",
    "inject_fault",
    type=str,
    default=None,
    help="Corrupt the named op's backward as a negative control; the run must then fail.",
)
def gradcheck(seed, skip_model, inject_fault):
    """Finite-difference verification of every op and the end-to-end model (64-bit)."""
    results = run_suite(seed=seed, corrupt=inject_fault, include_model=not skip_model)
    failed = False
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        click.echo(f"{r.name:28s} max_rel_err {r.max_rel_error:10.3e}  tol {r.tolerance:g}  {status}")
        failed = failed or not r.passed
    if failed:
        click.echo("gradient check FAILED")
        sys.exit(1)
    click.echo("all gradient checks passed")


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--train-count", type=int, default=500, show_default=True)
@click.option("--val-count", type=int, default=100, show_default=True)
@click.option("--test-count", type=int, default=100, show_default=True)
@click.option("--size", type=int, default=64, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--toggle-prob", type=float, default=0.5, show_default=True)
@click.option("--drift", type=float, default=0.1, show_default=True)
@click.option("--min-shapes", type=int, default=2, show_default=True)
@click.option("--max-shapes", type=int, default=6, show_default=True)
def synth(out_dir, train_count, val_count, test_count, size, seed, toggle_prob, drift, min_shapes, max_shapes):
    """Generate the synthetic benchmark as train/val/test subtrees in A/B/label layout."""
    try:
        for split, count in (("train", train_count), ("val", val_count), ("test", test_count)):
            spec = SyntheticSpec(
                count=count,
                size=size,
                min_shapes=min_shapes,
                max_shapes=max_shapes,
                toggle_prob=toggle_prob,
                drift=drift,
                seed=seed,
            )
            manifest = generate_synthetic(spec, out_dir, split)
            click.echo(f"wrote {len(manifest)} samples to {Path(out_dir) / split}")
    except TinyCDError as exc:
        _fail(exc)


GRID_AXES = {
    "mixing_strategy_bottleneck": "model",
    "mixing_strategy_skip": "model",
    "classifier": "model",
    "use_skip_connections": "model",
    "loss": "top",
    "lr": "optimizer",
    "weight_decay": "optimizer",
}


def _run_cell(base: dict, overrides: dict, out_dir: Path, cell_seed: int) -> dict:
    cfg_dict = json.loads(json.dumps(base))
    for axis, value in overrides.items():
        section = GRID_AXES[axis]
        if section == "model":
            cfg_dict["model"][axis] = value
        elif section == "optimizer":
            cfg_dict["optimizer"][axis] = value
        else:
            cfg_dict[axis] = value
    cfg_dict["seed"] = cell_seed
    cfg_dict["augmentation"]["seed"] = cell_seed
    cfg_dict["schedule"]["lr_max"] = cfg_dict["optimizer"]["lr"]
    cfg = RunConfig.from_dict(cfg_dict)

    train_ds = load_dataset(cfg.data_root, "train")
    val_ds = load_dataset(cfg.data_root, "val")
    try:
        eval_ds = load_dataset(cfg.data_root, "test")
        eval_split = "test"
    except TinyCDError:
        eval_ds, eval_split = val_ds, "val"

    model = TinyCDModel(cfg.model, seed=cfg.seed, dtype=_DTYPES[cfg.precision])
    optimizer = AdamW(
        model.parameters(),
        lr=cfg.optimizer.lr,
        weight_decay=cfg.optimizer.weight_decay,
        beta1=cfg.optimizer.beta1,
        beta2=cfg.optimizer.beta2,
        eps=cfg.optimizer.eps,
        amsgrad=cfg.optimizer.amsgrad,
    )
    fit(model, optimizer, train_ds, val_ds, cfg, out_dir, log=lambda s: None)
    report = evaluate(model, eval_ds, batch_size=cfg.batch_size)
    delta = ",".join(f"{k}={v}" for k, v in overrides.items()) or "(base)"
    return {
        "cell": delta,
        "split": eval_split,
        "f1": report.f1,
        "iou": report.iou,
        "param_count": model.param_count(),
    }


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--max-cells", type=int, default=16, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--parallel", type=int, default=0, help="Train up to N cells concurrently with per-cell seeds.")
def ablate(config_path, grid_path, out_dir, max_cells, seed, parallel):
    """Train every cell of a config grid and tabulate F1 / IoU / parameter counts."""
    try:
        base_cfg = _load_run_config(config_path, seed, None, None, False, None)
        grid = json.loads(Path(grid_path).read_text())
        unknown = sorted(set(grid) - set(GRID_AXES))
        if unknown:
            raise TinyCDError(f"grid axis {unknown[0]!r} not supported; choose from {sorted(GRID_AXES)}")
        axes = sorted(grid)
        cells = [dict(zip(axes, combo)) for combo in itertools.product(*(grid[a] for a in axes))]
        if len(cells) > max_cells:
            raise TinyCDError(f"grid has {len(cells)} cells, above --max-cells {max_cells}; refusing")

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        base = base_cfg.to_dict()
        rows = []
        if parallel > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=parallel) as pool:
                futures = [
                    pool.submit(_run_cell, base, overrides, out / f"cell{i}", base_cfg.seed + i)
                    for i, overrides in enumerate(cells)
                ]
                rows = [f.result() for f in futures]
        else:
            for i, overrides in enumerate(cells):
                rows.append(_run_cell(base, overrides, out / f"cell{i}", base_cfg.seed))
                click.echo(f"finished cell {i + 1}/{len(cells)}: {rows[-1]['cell']}")

        width = max(len(r["cell"]) for r in rows)
        click.echo(f"{'cell':{width}s}  {'F1':>7s}  {'IoU':>7s}  {'params':>8s}")
        for r in rows:
            click.echo(f"{r['cell']:{width}s}  {r['f1']:7.4f}  {r['iou']:7.4f}  {r['param_count']:8d}")
        (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    except TinyCDError as exc:
        _fail(exc)


if __name__ == "__main__":
    main()
