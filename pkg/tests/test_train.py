"""Training loop behavior: determinism, learning progress, evaluation counting."""

import numpy as np
import pytest

from tinycd import Tensor, no_grad
from tinycd.augment import AugmentationConfig
from tinycd.data import SamplePair, generate_sample, SyntheticSpec
from tinycd.errors import UsageError, ValidationError
from tinycd.metrics import ConfusionCounts, derive_metrics
from tinycd.model import ModelConfig, TinyCDModel
from tinycd.optim import AdamW
from tinycd.train import evaluate, stack_batch, train_epoch


class ListDataset:
    def __init__(self, samples):
        self.samples = samples

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def synthetic_list(count, size=32, seed=3):
    spec = SyntheticSpec(count=count, size=size, seed=seed)
    out = []
    for i in range(count):
        img1, img2, label, _ = generate_sample(spec, "train", i)
        out.append(SamplePair(img1, img2, label.astype(np.float32)[None], f"{i:05d}"))
    return out


def small_model(seed=0):
    return TinyCDModel(ModelConfig(backbone_widths=(6, 8), backbone_strides=(2, 2), mamb_hidden_layers=1), seed=seed)


def test_zero_lr_keeps_loss_constant_across_epochs():
    ds = ListDataset(synthetic_list(1))
    model = small_model()
    opt = AdamW(model.parameters(), lr=0.0, weight_decay=0.0)
    losses = [
        train_epoch(model, ds, opt, rng=np.random.default_rng(0), batch_size=2)[0] for _ in range(3)
    ]
    assert losses[0] == pytest.approx(losses[1], abs=1e-12)
    assert losses[1] == pytest.approx(losses[2], abs=1e-12)


def test_fixed_seed_reproduces_loss_trace():
    def run():
        ds = ListDataset(synthetic_list(8))
        model = small_model(seed=4)
        opt = AdamW(model.parameters(), lr=3e-3, weight_decay=9e-3)
        aug = AugmentationConfig(seed=11)
        return [
            train_epoch(
                model, ds, opt, rng=np.random.default_rng(100 + e), epoch=e, batch_size=4, augmentation=aug
            )[0]
            for e in range(3)
        ]

    assert run() == run()


def test_loss_decreases_early_in_training():
    ds = ListDataset(synthetic_list(24))
    model = small_model(seed=1)
    opt = AdamW(model.parameters(), lr=3e-3, weight_decay=9e-3)
    losses = [
        train_epoch(model, ds, opt, rng=np.random.default_rng(e), epoch=e)[0] for e in range(6)
    ]
    deltas = [b - a for a, b in zip(losses, losses[1:])]
    assert sum(1 for d in deltas if d < 0) >= 4, losses


def test_train_epoch_rejects_empty_dataset():
    model = small_model()
    opt = AdamW(model.parameters())
    with pytest.raises(UsageError, match="empty"):
        train_epoch(model, ListDataset([]), opt)


def test_train_epoch_rejects_unknown_loss():
    model = small_model()
    opt = AdamW(model.parameters())
    with pytest.raises(UsageError, match="loss"):
        train_epoch(model, ListDataset(synthetic_list(2)), opt, loss_kind="hinge")


@pytest.mark.parametrize("loss_kind", ["bce", "mse", "iou", "bce_iou"])
def test_all_loss_kinds_run(loss_kind):
    ds = ListDataset(synthetic_list(4))
    model = small_model()
    opt = AdamW(model.parameters(), lr=1e-3)
    loss, counts = train_epoch(model, ds, opt, loss_kind=loss_kind, rng=np.random.default_rng(0))
    assert np.isfinite(loss)
    assert counts.total == 4 * 32 * 32


def test_mismatched_sample_is_named():
    samples = synthetic_list(3)
    samples[1] = SamplePair(
        reference=np.zeros((3, 16, 16), np.float32),
        comparison=np.zeros((3, 16, 16), np.float32),
        label=np.zeros((1, 16, 16), np.float32),
        id="odd-one",
    )
    with pytest.raises(ValidationError, match="odd-one"):
        stack_batch(samples, np.float32)


def test_evaluate_counts_match_brute_force_loop():
    ds = ListDataset(synthetic_list(3, size=16))
    model = small_model(seed=2)
    report = evaluate(model, ds, decision_threshold=0.5)

    expected = ConfusionCounts()
    with no_grad():
        for s in ds.samples:
            pred = model.forward(Tensor(s.reference[None]), Tensor(s.comparison[None])).data[0, 0]
            for y in range(16):
                for x in range(16):
                    p = 1 if pred[y, x] >= 0.5 else 0
                    t = int(s.label[0, y, x])
                    expected = expected + ConfusionCounts(
                        tp=p & t, tn=(1 - p) & (1 - t), fp=p & (1 - t), fn=(1 - p) & t
                    )
    assert report.counts == expected
    assert report.to_dict() == derive_metrics(expected).to_dict()


def test_evaluate_threshold_zero_gives_full_recall():
    ds = ListDataset(synthetic_list(2, size=16))
    model = small_model()
    report = evaluate(model, ds, decision_threshold=0.0)
    assert report.recall == 1.0


def test_evaluate_leaves_gradients_untouched():
    ds = ListDataset(synthetic_list(2, size=16))
    model = small_model()
    evaluate(model, ds)
    for p in model.parameters():
        np.testing.assert_array_equal(p.grad, np.zeros_like(p.data))


def test_gradient_accumulators_reset_between_steps():
    ds = ListDataset(synthetic_list(4, size=16))
    model = small_model()
    opt = AdamW(model.parameters(), lr=1e-3)
    train_epoch(model, ds, opt, batch_size=2, rng=np.random.default_rng(0))
    for p in model.parameters():
        np.testing.assert_array_equal(p.grad, np.zeros_like(p.data))
