"""Dataset ingestion, synthetic benchmark generation, and mask output.

On-disk layout per split: ``root/<split>/{A,B,label}/<id>.png`` with 8-bit RGB
image pairs and single-channel labels (any nonzero pixel counts as change).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image

from .errors import ConfigurationError, ImageFormatError, ManifestError, ValidationError

SPLITS = ("train", "val", "test")
_SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}


@dataclass
class SamplePair:
    """A registered bitemporal pair: both images 3xHxW in [0, 1], binary 1xHxW label."""

    reference: np.ndarray
    comparison: np.ndarray
    label: np.ndarray
    id: str

    def validate(self) -> None:
        if self.reference.shape != self.comparison.shape:
            raise ValidationError(
                f"sample {self.id!r}: image shapes differ {self.reference.shape} vs {self.comparison.shape}"
            )
        if self.label.shape[1:] != self.reference.shape[1:]:
            raise ValidationError(
                f"sample {self.id!r}: label spatial size {self.label.shape[1:]} does not match images"
            )
        if not np.all((self.label == 0) | (self.label == 1)):
            raise ValidationError(f"sample {self.id!r}: label is not binary")


@dataclass
class DatasetManifest:
    root: Path
    split: str
    ids: list[str]
    patch_size: int

    def __len__(self) -> int:
        return len(self.ids)


class ChangePairDataset:
    """Lazy loader over a manifest; decoded samples are cached in memory."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: dict[int, SamplePair] = {}

    def __len__(self) -> int:
        return len(self.manifest.ids)

    def __getitem__(self, index: int) -> SamplePair:
        if index not in self._cache:
            sample_id = self.manifest.ids[index]
            base = self.manifest.root / self.manifest.split
            self._cache[index] = SamplePair(
                reference=_read_rgb(base / "A" / f"{sample_id}.png"),
                comparison=_read_rgb(base / "B" / f"{sample_id}.png"),
                label=_read_label(base / "label" / f"{sample_id}.png"),
                id=sample_id,
            )
        return self._cache[index]

    def __iter__(self) -> Iterator[SamplePair]:
        for i in range(len(self)):
            yield self[i]


def load_dataset(root, split: str) -> ChangePairDataset:
    """Build a manifest from the A/B/label triple, requiring a complete id set."""
    root = Path(root)
    base = root / split
    for sub in ("A", "B", "label"):
        if not (base / sub).is_dir():
            raise ManifestError(f"missing directory {base / sub}")
    id_sets = {sub: {p.stem for p in (base / sub).glob("*.png")} for sub in ("A", "B", "label")}
    all_ids = id_sets["A"] | id_sets["B"] | id_sets["label"]
    for sample_id in sorted(all_ids):
        for sub in ("A", "B", "label"):
            if sample_id not in id_sets[sub]:
                raise ManifestError(f"sample {sample_id!r} has no file in {base / sub}")
    ids = sorted(all_ids)
    if not ids:
        raise ManifestError(f"no samples found under {base}")
    probe = _read_rgb(base / "A" / f"{ids[0]}.png")
    return ChangePairDataset(DatasetManifest(root=root, split=split, ids=ids, patch_size=probe.shape[-1]))


def _read_rgb(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    except OSError as exc:
        raise ImageFormatError(f"cannot decode image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1)) / 255.0


def _read_label(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"))
    except OSError as exc:
        raise ImageFormatError(f"cannot decode label {path}: {exc}") from exc
    return (arr != 0).astype(np.float32)[None]


def _write_rgb(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path)


def _write_gray(path: Path, values: np.ndarray) -> None:
    Image.fromarray(values.astype(np.uint8), mode="L").save(path)


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Desk-scale generator: smooth-noise background, toggling rectangles/ellipses,
    photometric drift on the comparison image, labels = occupancy XOR."""

    count: int = 100
    size: int = 64
    min_shapes: int = 2
    max_shapes: int = 6
    toggle_prob: float = 0.5
    drift: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.count < 0:
            raise ConfigurationError(f"count must be >= 0, got {self.count}")
        if self.size < 8:
            raise ConfigurationError(f"size must be >= 8, got {self.size}")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ConfigurationError(
                f"need 1 <= min_shapes <= max_shapes, got {self.min_shapes}/{self.max_shapes}"
            )
        if not 0.0 <= self.toggle_prob < 1.0 or self.drift < 0:
            raise ConfigurationError(
                f"toggle_prob must lie in [0, 1) and drift >= 0, got {self.toggle_prob}/{self.drift}"
            )


@dataclass(frozen=True)
class _Shape:
    kind: str  # "rect" | "ellipse"
    cy: float
    cx: float
    hy: float
    hx: float
    present_t1: bool
    present_t2: bool


def _rasterize(shape: _Shape, size: int) -> np.ndarray:
    ys = np.arange(size)[:, None] - shape.cy
    xs = np.arange(size)[None, :] - shape.cx
    if shape.kind == "rect":
        return (np.abs(ys) <= shape.hy) & (np.abs(xs) <= shape.hx)
    return (ys / shape.hy) ** 2 + (xs / shape.hx) ** 2 <= 1.0


def _sample_scene(rng: np.random.Generator, spec: SyntheticSpec):
    size = spec.size
    base = rng.uniform(0.25, 0.75, size=3)
    coarse = rng.normal(0.0, 0.05, size=(3, max(2, size // 8), max(2, size // 8)))
    zoom_y = _smooth_zoom(coarse, size)
    background = np.clip(base[:, None, None] + zoom_y, 0.0, 1.0)

    # one foreground color per scene keeps appearance consistent where shapes
    # overlap across times, so the occupancy XOR is exactly the visible change
    shift = rng.uniform(0.3, 0.55) * rng.choice([-1.0, 1.0], size=3)
    color = np.clip(base + shift, 0.0, 1.0)

    n_shapes = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    shapes = []
    for _ in range(n_shapes):
        kind = "rect" if rng.random() < 0.5 else "ellipse"
        hy = rng.uniform(0.06, 0.22) * size
        hx = rng.uniform(0.06, 0.22) * size
        cy = rng.uniform(hy, size - 1 - hy)
        cx = rng.uniform(hx, size - 1 - hx)
        present_t1 = bool(rng.random() < 0.7)
        toggled = bool(rng.random() < spec.toggle_prob)
        shapes.append(_Shape(kind, cy, cx, hy, hx, present_t1, present_t1 ^ toggled))
    return background, color, shapes


def _smooth_zoom(coarse: np.ndarray, size: int) -> np.ndarray:
    from scipy.ndimage import zoom

    factor = size / coarse.shape[-1]
    return zoom(coarse, (1, factor, factor), order=1)[:, :size, :size]


def _render(background, color, shapes, size, at_t2: bool):
    image = background.copy()
    occupancy = np.zeros((size, size), dtype=bool)
    for shape in shapes:
        if shape.present_t2 if at_t2 else shape.present_t1:
            mask = _rasterize(shape, size)
            occupancy |= mask
            image[:, mask] = color[:, None]
    return image, occupancy


def generate_sample(spec: SyntheticSpec, split: str, index: int):
    """Fully seeded single sample: (reference, comparison, label, shapes)."""
    rng = np.random.default_rng([spec.seed, _SPLIT_CODE.get(split, 99), index])
    background, color, shapes = _sample_scene(rng, spec)
    img1, occ1 = _render(background, color, shapes, spec.size, at_t2=False)
    img2, occ2 = _render(background, color, shapes, spec.size, at_t2=True)
    label = occ1 ^ occ2

    # irrelevant photometric change the model must ignore
    contrast = 1.0 + rng.uniform(-spec.drift, spec.drift)
    brightness = rng.uniform(-spec.drift, spec.drift)
    img2 = np.clip(img2 * contrast + brightness, 0.0, 1.0)
    img1 = np.clip(img1 + rng.normal(0.0, 0.01, img1.shape), 0.0, 1.0)
    img2 = np.clip(img2 + rng.normal(0.0, 0.01, img2.shape), 0.0, 1.0)
    return img1.astype(np.float32), img2.astype(np.float32), label, shapes


def generate_synthetic(spec: SyntheticSpec, root, split: str) -> DatasetManifest:
    """Write ``spec.count`` samples for one split; bytes are a pure function of the spec."""
    root = Path(root)
    base = root / split
    for sub in ("A", "B", "label"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(spec.count):
        img1, img2, label, _ = generate_sample(spec, split, i)
        sample_id = f"{i:05d}"
        _write_rgb(base / "A" / f"{sample_id}.png", img1)
        _write_rgb(base / "B" / f"{sample_id}.png", img2)
        _write_gray(base / "label" / f"{sample_id}.png", label.astype(np.uint8) * 255)
        ids.append(sample_id)
    return DatasetManifest(root=root, split=split, ids=ids, patch_size=spec.size)


# ---------------------------------------------------------------------------
# prediction output
# ---------------------------------------------------------------------------


def save_prediction(
    probabilities: np.ndarray,
    path,
    intermediate_masks: Optional[list[tuple[int, np.ndarray]]] = None,
    binarize_threshold: float = 0.5,
) -> list[Path]:
    """Write the binary change mask (change = 255) plus optional normalized mask dumps.

    Intermediate masks are min-max normalized to 8 bits; a constant mask maps to
    all zeros.  Returns the written paths.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    prob = np.asarray(probabilities)
    if prob.ndim == 3:
        prob = prob[0]
    binary = (prob >= binarize_threshold).astype(np.uint8) * 255
    _write_gray(path, binary)
    written = [path]
    for stride, mask in intermediate_masks or []:
        arr = np.asarray(mask)
        if arr.ndim == 3:
            arr = arr[0]
        lo, hi = float(arr.min()), float(arr.max())
        norm = np.zeros_like(arr) if hi <= lo else (arr - lo) / (hi - lo)
        out = path.with_name(f"{path.stem}_attn_s{stride}{path.suffix}")
        _write_gray(out, np.rint(norm * 255.0))
        written.append(out)
    return written
