"""Synthetic continual image streams and raw-tensor dataset ingestion.

Each class is a seeded procedural template (shape kind x fill color x
stripe frequency) rendered as a small RGB image; samples add per-sample
jitter and Gaussian noise. Attribute strings are the template's factor
names, so text-based task similarity is meaningful. The "CPDS" binary
format is an ingestion hook for real data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import serialize

SHAPES = ("circular", "square", "triangular", "cross")
COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.9),
    "yellow": (0.9, 0.85, 0.1),
    "magenta": (0.85, 0.1, 0.8),
    "cyan": (0.1, 0.8, 0.85),
}
FREQS = {"low-frequency": 1, "mid-frequency": 3, "high-frequency": 6}

CPDS_MAGIC = b"CPDS"


@dataclass
class StreamConfig:
    num_tasks: int = 5
    classes_per_task: int = 4
    samples_per_class: int = 64
    image_size: int = 32
    channels: int = 3
    seed: int = 0
    noise_std: float = 0.03

    def __post_init__(self):
        total = self.num_tasks * self.classes_per_task
        space = len(SHAPES) * len(COLORS) * len(FREQS)
        if total > space:
            raise ValueError(
                f"{total} classes requested but only {space} templates exist")


@dataclass
class TaskData:
    task_id: int
    class_ids: list
    class_names: list
    attributes: dict            # class name -> list of attribute strings
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


@dataclass
class SyntheticTaskStream:
    config: StreamConfig
    tasks: list = field(default_factory=list)

    def validate_disjoint(self):
        seen = set()
        for task in self.tasks:
            ids = set(task.class_ids)
            if ids & seen:
                raise ValueError(
                    f"task {task.task_id} reuses class ids {sorted(ids & seen)}")
            seen |= ids


def _shape_mask(kind, size, cx, cy, radius):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if kind == "circular":
        return dx * dx + dy * dy <= radius * radius
    if kind == "square":
        return (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
    if kind == "triangular":
        return (dy >= -radius) & (np.abs(dx) <= (radius - dy) * 0.6) & (dy <= radius)
    if kind == "cross":
        arm = max(radius // 3, 1)
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= radius)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= radius))
    raise ValueError(f"unknown shape kind {kind!r}")


def render_template(shape, color_name, freq_name, size, cx, cy):
    """Render one class template: striped background plus a filled shape."""
    rgb = COLORS[color_name]
    freq = FREQS[freq_name]
    yy = np.arange(size).reshape(-1, 1)
    stripes = 0.25 + 0.15 * np.sin(2.0 * np.pi * freq * yy / size)
    img = np.broadcast_to(stripes, (size, size)).copy()
    img = np.stack([img, img, img])
    mask = _shape_mask(shape, size, cx, cy, radius=size // 4)
    for ch in range(3):
        img[ch][mask] = rgb[ch]
    return img


def class_attributes(shape, color_name, freq_name):
    return [f"{color_name} fill", f"{shape} outline", f"{freq_name} stripes"]


def generate_stream(config: StreamConfig) -> SyntheticTaskStream:
    """Seeded procedural stream with disjoint class labels and 80/20 splits."""
    rng = np.random.default_rng(config.seed)
    templates = [(s, c, f) for s in SHAPES for c in COLORS for f in FREQS]
    order = rng.permutation(len(templates))
    stream = SyntheticTaskStream(config=config)
    label = 0
    size = config.image_size
    for t in range(1, config.num_tasks + 1):
        class_ids, names, attrs = [], [], {}
        images, labels = [], []
        for _ in range(config.classes_per_task):
            shape, color, freq = templates[order[label]]
            name = f"{color}-{shape}-{freq}"
            class_ids.append(label)
            names.append(name)
            attrs[name] = class_attributes(shape, color, freq)
            for _ in range(config.samples_per_class):
                cx = size / 2 + rng.integers(-3, 4)
                cy = size / 2 + rng.integers(-3, 4)
                img = render_template(shape, color, freq, size, cx, cy)
                img = img + rng.normal(0.0, config.noise_std, size=img.shape)
                images.append(np.clip(img, 0.0, 1.0))
                labels.append(label)
            label += 1
        images = np.asarray(images)
        labels = np.asarray(labels, dtype=np.int64)
        n_train = int(round(config.samples_per_class * 0.8))
        train_idx, test_idx = [], []
        for cid in class_ids:
            idx = np.flatnonzero(labels == cid)
            train_idx.extend(idx[:n_train])
            test_idx.extend(idx[n_train:])
        stream.tasks.append(TaskData(
            task_id=t, class_ids=class_ids, class_names=names, attributes=attrs,
            train_x=images[train_idx], train_y=labels[train_idx],
            test_x=images[test_idx], test_y=labels[test_idx]))
    stream.validate_disjoint()
    return stream


# -- CPDS raw-tensor ingestion ------------------------------------------------

def save_cpds(path, tasks):
    """tasks: list of (class_ids, images (n,C,S,S), labels)."""
    with open(path, "wb") as fh:
        fh.write(CPDS_MAGIC)
        fh.write(struct.pack("<I", len(tasks)))
        for class_ids, images, labels in tasks:
            fh.write(struct.pack("<I", len(class_ids)))
            fh.write(struct.pack(f"<{len(class_ids)}I", *class_ids))
            fh.write(struct.pack("<I", len(labels)))
            for img, lbl in zip(images, labels):
                fh.write(serialize.dumps_tensor(img))
                fh.write(struct.pack("<I", int(lbl)))


def load_cpds(path):
    """Inverse of save_cpds; validates magic and label membership."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CPDS_MAGIC:
        raise ValueError("not a CPDS file")
    (num_tasks,) = struct.unpack_from("<I", buf, 4)
    off = 8
    tasks = []
    for _ in range(num_tasks):
        (n_classes,) = struct.unpack_from("<I", buf, off)
        off += 4
        class_ids = list(struct.unpack_from(f"<{n_classes}I", buf, off))
        off += 4 * n_classes
        (n_samples,) = struct.unpack_from("<I", buf, off)
        off += 4
        images, labels = [], []
        for _ in range(n_samples):
            arr, off = serialize.loads_tensor(buf, off)
            (lbl,) = struct.unpack_from("<I", buf, off)
            off += 4
            if lbl not in class_ids:
                raise ValueError(f"label {lbl} not in task class ids {class_ids}")
            images.append(arr)
            labels.append(lbl)
        tasks.append((class_ids, np.asarray(images), np.asarray(labels, dtype=np.int64)))
    return tasks
