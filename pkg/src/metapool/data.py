"""Task and dataset construction: synthetic pooling-recovery tasks, character
image ingestion with the episodic few-shot protocol, rotation augmentation,
and salt-and-pepper corruption.

A bundled synthetic glyph generator (random polylines rasterized per class)
provides a character-like dataset with the same store interface, so the whole
suite runs without downloading anything.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class DataError(Exception):
    pass


@dataclass
class Task:
    """One episode: a training split and a disjoint validation split."""

    x_tr: np.ndarray
    y_tr: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    task_id: int = 0


@dataclass
class TaskSet:
    tasks: list[Task]
    seed: int = 0

    def __len__(self) -> int:
        return len(self.tasks)

    def sample_minibatch(self, n: int, rng: np.random.Generator) -> list[Task]:
        """n tasks, without replacement when possible, ordered by task id."""
        if len(self.tasks) >= n:
            idx = rng.choice(len(self.tasks), size=n, replace=False)
        else:
            idx = rng.choice(len(self.tasks), size=n, replace=True)
        return [self.tasks[i] for i in sorted(idx)]


# ---------------------------------------------------------------------------
# synthetic pooling-recovery tasks
# ---------------------------------------------------------------------------

@dataclass
class SyntheticTaskSpec:
    """Data process of the artificial experiments: random uniform inputs pushed
    through a fixed reference pooling (max for the first half of the outputs,
    average for the second half)."""

    dimensionality: str = "1d"          # "1d" or "2d"
    in_dim: int = 60                    # 1d length, or 2d side
    sets_per_task: int = 20
    task_count: int = 8000
    train_per_task: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.dimensionality not in ("1d", "2d"):
            raise DataError(f"unknown dimensionality {self.dimensionality!r}")
        if self.in_dim % 2:
            raise DataError("input extent must be even (kernel stride 2)")

    @property
    def out_dim(self) -> int:
        return self.in_dim // 2


def reference_pool_1d(x: np.ndarray) -> np.ndarray:
    """Ground truth 1D rule: size-2/stride-2 kernels, max for outputs k < I/2,
    average for k >= I/2."""
    pairs = x.reshape(x.shape[:-1] + (-1, 2))
    out_dim = pairs.shape[-2]
    half = out_dim // 2
    out = np.empty(x.shape[:-1] + (out_dim,))
    out[..., :half] = pairs[..., :half, :].max(axis=-1)
    out[..., half:] = pairs[..., half:, :].mean(axis=-1)
    return out


def reference_pool_2d(x: np.ndarray) -> np.ndarray:
    """Ground truth 2D rule: 2x1 vertical kernels at every other column
    (stride 2 both ways); top half of the output rows by max, bottom by
    average."""
    h = x.shape[-2]
    cols = x[..., 0::2]                       # (..., H, W/2)
    stacked = np.stack([cols[..., 0::2, :], cols[..., 1::2, :]], axis=-1)
    out_rows = h // 2
    half = out_rows // 2
    out = np.empty(stacked.shape[:-1])
    out[..., :half, :] = stacked[..., :half, :, :].max(axis=-1)
    out[..., half:, :] = stacked[..., half:, :, :].mean(axis=-1)
    return out


def gen_synthetic_tasks(spec: SyntheticTaskSpec) -> TaskSet:
    rng = np.random.default_rng(spec.seed)
    reference = reference_pool_1d if spec.dimensionality == "1d" else reference_pool_2d
    shape = (spec.in_dim,) if spec.dimensionality == "1d" else (spec.in_dim, spec.in_dim)
    tasks = []
    for tid in range(spec.task_count):
        x = rng.uniform(0.0, 1.0, size=(spec.sets_per_task,) + shape)
        y = reference(x)
        k = spec.train_per_task
        tasks.append(Task(x[:k], y[:k], x[k:], y[k:], task_id=tid))
    return TaskSet(tasks, seed=spec.seed)


# ---------------------------------------------------------------------------
# character image stores
# ---------------------------------------------------------------------------

@dataclass
class ClassImageStore:
    """Map from class label to a stack of grayscale images in [0, 1]."""

    images: dict[str, np.ndarray]
    split: str = "meta-train"

    def __post_init__(self):
        shapes = {v.shape[1:] for v in self.images.values()}
        if len(shapes) > 1:
            raise DataError(f"images disagree on extents: {sorted(shapes)}")

    @property
    def classes(self) -> list[str]:
        return sorted(self.images)

    @property
    def image_shape(self) -> tuple[int, int]:
        first = next(iter(self.images.values()))
        return first.shape[1:]

    def require_instances(self, minimum: int) -> None:
        for label, stack in self.images.items():
            if len(stack) < minimum:
                raise DataError(f"class {label!r} has {len(stack)} instances, "
                                f"needs {minimum}")


def load_character_dataset(directory: str, image_size: int = 28) -> ClassImageStore:
    """Load ``<root>/<class>/<image>.png`` grayscale files.

    Pixels are scaled to [0, 1], polarity inverted (ink becomes bright), and
    images resized to ``image_size`` square by area averaging.
    """
    from PIL import Image

    if not os.path.isdir(directory):
        raise DataError(f"dataset root does not exist: {directory}")
    classes = sorted(d for d in os.listdir(directory)
                     if os.path.isdir(os.path.join(directory, d)))
    if not classes:
        raise DataError(f"no class subdirectories under {directory}")
    images: dict[str, np.ndarray] = {}
    for label in classes:
        stack = []
        class_dir = os.path.join(directory, label)
        for name in sorted(os.listdir(class_dir)):
            path = os.path.join(class_dir, name)
            try:
                with Image.open(path) as img:
                    img = img.convert("L").resize((image_size, image_size),
                                                  Image.BOX)
                    arr = np.asarray(img, dtype=np.float64) / 255.0
            except Exception as exc:
                raise DataError(f"unreadable image {path}: {exc}") from exc
            stack.append(1.0 - arr)
        if not stack:
            raise DataError(f"class directory {class_dir} holds no images")
        images[label] = np.stack(stack)
    return ClassImageStore(images)


def split_classes(store: ClassImageStore, meta_train_count: int,
                  seed: int) -> tuple[ClassImageStore, ClassImageStore]:
    """Deterministic disjoint class split into (meta-train, held-out)."""
    classes = store.classes
    if meta_train_count > len(classes):
        raise DataError(f"cannot take {meta_train_count} of {len(classes)} classes")
    rng = np.random.default_rng(seed)
    picked = set(rng.choice(len(classes), size=meta_train_count, replace=False))
    train = {c: store.images[c] for i, c in enumerate(classes) if i in picked}
    held = {c: store.images[c] for i, c in enumerate(classes) if i not in picked}
    return (ClassImageStore(train, split="meta-train"),
            ClassImageStore(held, split="held-out"))


def rotate_cw(image: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Clockwise rotation: out[i, j] = in[H-1-j, i] for one quarter turn."""
    return np.rot90(image, k=-quarter_turns, axes=(-2, -1))


def augment_rotations(store: ClassImageStore) -> ClassImageStore:
    """Each of the 90/180/270-degree rotations becomes a distinct class."""
    h, w = store.image_shape
    if h != w:
        raise DataError("rotation augmentation needs square images")
    images: dict[str, np.ndarray] = {}
    for label in store.classes:
        stack = store.images[label]
        images[label] = stack
        for turns, degrees in ((1, 90), (2, 180), (3, 270)):
            images[f"{label}/rot{degrees}"] = rotate_cw(stack, turns)
    return ClassImageStore(images, split=store.split)


def sample_episode(store: ClassImageStore, way: int, shot: int,
                   queries: int, seed: int) -> Task:
    """One N-way K-shot episode with ``queries`` validation images per class;
    labels are re-indexed 0..way-1."""
    classes = store.classes
    if len(classes) < way:
        raise DataError(f"store has {len(classes)} classes, episode needs {way}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(classes), size=way, replace=False)
    x_tr, y_tr, x_val, y_val = [], [], [], []
    for new_label, ci in enumerate(chosen):
        stack = store.images[classes[ci]]
        if len(stack) < shot + queries:
            raise DataError(f"class {classes[ci]!r} has {len(stack)} instances, "
                            f"episode needs {shot + queries}")
        order = rng.permutation(len(stack))
        x_tr.append(stack[order[:shot]])
        x_val.append(stack[order[shot:shot + queries]])
        y_tr.extend([new_label] * shot)
        y_val.extend([new_label] * queries)
    return Task(np.concatenate(x_tr), np.array(y_tr),
                np.concatenate(x_val), np.array(y_val), task_id=seed)


def add_salt_pepper(image: np.ndarray, ratio: float, seed: int) -> np.ndarray:
    """Each pixel is independently replaced, with probability ``ratio``, by 0
    or 1 with equal chance; otherwise left unchanged."""
    if not 0.0 <= ratio <= 1.0:
        raise DataError(f"noise ratio {ratio} outside [0, 1]")
    rng = np.random.default_rng(seed)
    hit = rng.uniform(size=image.shape) < ratio
    salt = (rng.uniform(size=image.shape) < 0.5).astype(np.float64)
    return np.where(hit, salt, image)


# ---------------------------------------------------------------------------
# bundled synthetic glyphs
# ---------------------------------------------------------------------------

def _rasterize_strokes(points_list, size: int) -> np.ndarray:
    """Stamp Gaussian-profiled ink along each polyline."""
    canvas = np.zeros((size, size))
    yy, xx = np.mgrid[0:size, 0:size]
    for pts in points_list:
        for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
            steps = max(2, int(np.hypot(x1 - x0, y1 - y0) * 2))
            for t in np.linspace(0.0, 1.0, steps):
                cx, cy = x0 + t * (x1 - x0), y0 + t * (y1 - y0)
                d2 = (xx - cx) ** 2 + (yy - cy) ** 2
                canvas = np.maximum(canvas, np.exp(-d2 / (2 * 0.8 ** 2)))
    return np.clip(canvas, 0.0, 1.0)


def make_glyph_store(n_classes: int, instances: int = 20, size: int = 28,
                     seed: int = 0, jitter: float = 0.8) -> ClassImageStore:
    """Deterministic synthetic glyph classes: each class is a fixed set of
    polylines; instances add a small random affine warp and point jitter."""
    root = np.random.default_rng(seed)
    images: dict[str, np.ndarray] = {}
    margin = size * 0.15
    lo, hi = margin, size - margin
    for c in range(n_classes):
        class_rng = np.random.default_rng(root.integers(2 ** 63))
        strokes = []
        for _ in range(int(class_rng.integers(2, 5))):
            count = int(class_rng.integers(3, 6))
            strokes.append(class_rng.uniform(lo, hi, size=(count, 2)))
        stack = []
        for i in range(instances):
            inst_rng = np.random.default_rng(class_rng.integers(2 ** 63))
            angle = inst_rng.uniform(-0.12, 0.12)
            scale = inst_rng.uniform(0.92, 1.08)
            shift = inst_rng.uniform(-1.2, 1.2, size=2)
            rot = np.array([[np.cos(angle), -np.sin(angle)],
                            [np.sin(angle), np.cos(angle)]])
            center = size / 2
            warped = []
            for pts in strokes:
                moved = (pts - center) @ rot.T * scale + center + shift
                moved = moved + inst_rng.normal(0.0, jitter, size=moved.shape)
                warped.append(np.clip(moved, 1.0, size - 2.0))
            stack.append(_rasterize_strokes(warped, size))
        images[f"glyph{c:03d}"] = np.stack(stack)
    return ClassImageStore(images)
