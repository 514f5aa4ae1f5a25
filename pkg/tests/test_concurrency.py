"""Threading contracts: concurrent read-only inference and sharded evaluation."""

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from tinycd import Tensor, no_grad
from tinycd.metrics import ConfusionCounts, confusion, threshold
from tinycd.model import ModelConfig, TinyCDModel


def test_concurrent_inference_on_frozen_model_matches_serial():
    model = TinyCDModel(ModelConfig(backbone_widths=(6, 8), backbone_strides=(2, 2), mamb_hidden_layers=1), seed=5)
    rng = np.random.default_rng(0)
    pairs = [
        (Tensor(rng.random((1, 3, 16, 16), dtype=np.float32)), Tensor(rng.random((1, 3, 16, 16), dtype=np.float32)))
        for _ in range(8)
    ]

    def infer(pair):
        with no_grad():
            return model.forward(*pair).data

    serial = [infer(p) for p in pairs]
    with ThreadPoolExecutor(max_workers=4) as pool:
        threaded = list(pool.map(infer, pairs))
    for a, b in zip(serial, threaded):
        np.testing.assert_array_equal(a, b)


def test_distinct_models_train_independently_across_threads():
    from tinycd.optim import AdamW
    from tinycd.train import train_epoch
    from tinycd.data import SyntheticSpec, generate_sample, SamplePair

    spec = SyntheticSpec(count=4, size=16, seed=2)
    samples = []
    for i in range(4):
        img1, img2, label, _ = generate_sample(spec, "train", i)
        samples.append(SamplePair(img1, img2, label.astype(np.float32)[None], str(i)))

    class DS:
        def __len__(self):
            return len(samples)

        def __getitem__(self, i):
            return samples[i]

    def run(seed):
        model = TinyCDModel(
            ModelConfig(backbone_widths=(4, 6), backbone_strides=(2, 2), mamb_hidden_layers=1), seed=seed
        )
        opt = AdamW(model.parameters(), lr=1e-3)
        loss, _ = train_epoch(model, DS(), opt, rng=np.random.default_rng(seed), batch_size=2)
        return loss

    serial = [run(s) for s in (1, 2)]
    with ThreadPoolExecutor(max_workers=2) as pool:
        threaded = list(pool.map(run, (1, 2)))
    assert serial == threaded


def test_no_grad_is_thread_local():
    import threading

    from tinycd.tensor import grad_enabled

    inside = {}
    release = threading.Event()
    entered = threading.Event()

    def hold_no_grad():
        with no_grad():
            inside["worker"] = grad_enabled()
            entered.set()
            release.wait(timeout=5)

    worker = threading.Thread(target=hold_no_grad)
    worker.start()
    assert entered.wait(timeout=5)
    # the worker is inside no_grad; this thread must still record graphs
    assert grad_enabled()
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    assert (x * 2.0).requires_grad
    release.set()
    worker.join()
    assert inside["worker"] is False
    assert grad_enabled()


def test_sharded_confusion_counting_is_exact(rng):
    probs = rng.random((40, 1, 8, 8))
    labels = (rng.random((40, 1, 8, 8)) > 0.5).astype(np.uint8)

    def shard(lo, hi):
        return confusion(threshold(probs[lo:hi]), labels[lo:hi])

    whole = confusion(threshold(probs), labels)
    with ThreadPoolExecutor(max_workers=4) as pool:
        parts = list(pool.map(lambda b: shard(*b), [(0, 10), (10, 20), (20, 30), (30, 40)]))
    total = ConfusionCounts()
    for p in parts:
        total = total + p
    assert total == whole
