"""Task streams: sequences of classification tasks over disjoint class sets."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DatasetError,
    DuplicatePathError,
    EmptyClassError,
    UnreadableFileError,
)

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = (".png", ".ppm")


@dataclass(frozen=True)
class Split:
    x: np.ndarray  # (N, C, H, W) float32
    y: np.ndarray  # (N,) int64 global labels

    def __len__(self):
        return len(self.y)


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    class_ids: tuple[int, ...]
    train: Split
    val: Split
    test: Split
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))
        if len(set(self.class_ids)) != len(self.class_ids):
            raise DatasetError(f"task {self.task_id}: duplicate class ids")
        allowed = set(self.class_ids)
        for name in SPLITS:
            labels = set(np.unique(getattr(self, name).y).tolist())
            if not labels <= allowed:
                raise DatasetError(f"task {self.task_id}: {name} labels {sorted(labels - allowed)} outside class set")

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def to_local(self, labels) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.class_ids)}
        return np.array([lookup[int(c)] for c in np.asarray(labels).ravel()], dtype=np.int64)

    def to_global(self, local) -> np.ndarray:
        ids = np.asarray(self.class_ids, dtype=np.int64)
        return ids[np.asarray(local, dtype=np.int64)]

    def local(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        s = getattr(self, split)
        return s.x, self.to_local(s.y)


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[TaskSpec, ...]
    class_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        seen: set[int] = set()
        for t, task in enumerate(self.tasks):
            if task.task_id != t:
                raise DatasetError(f"task ids must be 0..T-1 in order, found {task.task_id} at {t}")
            overlap = seen & set(task.class_ids)
            if overlap:
                raise DatasetError(f"task {t} reuses classes {sorted(overlap)}")
            seen |= set(task.class_ids)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, t) -> TaskSpec:
        return self.tasks[t]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.tasks[0].train.x.shape[1:])

    def manifest(self) -> dict:
        return {
            "num_tasks": self.num_tasks,
            "input_shape": list(self.input_shape),
            "tasks": [
                {
                    "task_id": t.task_id,
                    "class_ids": list(t.class_ids),
                    "class_names": list(t.class_names),
                    "split_sizes": {name: len(getattr(t, name)) for name in SPLITS},
                }
                for t in self.tasks
            ],
        }

    def write_manifest(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2) + "\n")


# -- synthetic streams -----------------------------------------------------

def _class_pattern(rng: np.random.Generator, channels: int, size: int, blobs: int = 3) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    sigma = size / 4.0
    pattern = np.zeros((channels, size, size))
    for _ in range(blobs):
        cy, cx = rng.uniform(0, size, size=2)
        amp = rng.normal(size=channels)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        pattern += amp[:, None, None] * bump
    pattern -= pattern.mean()
    return pattern / pattern.std()


def synth_stream(num_tasks: int, classes_per_task: int, samples_per_class: int, image_size: int,
                 difficulty: float, seed: int, channels: int = 3, test_fraction: float = 0.2,
                 val_fraction: float = 0.1) -> TaskStream:
    """Gaussian-blob classes: each sample is its class pattern plus noise.

    Noise standard deviation equals ``difficulty`` against unit-variance
    patterns. ``val_fraction`` is carved out of what remains after the test
    share is removed.
    """
    if min(num_tasks, classes_per_task, samples_per_class, image_size, channels) < 1:
        raise ConfigError("synthetic stream counts must be positive")
    if difficulty < 0:
        raise ConfigError("difficulty must be non-negative")
    rng = np.random.default_rng(seed)
    n_classes = num_tasks * classes_per_task
    patterns = [_class_pattern(rng, channels, image_size) for _ in range(n_classes)]

    n_test = int(round(test_fraction * samples_per_class))
    n_val = int(round(val_fraction * (samples_per_class - n_test)))
    tasks = []
    for t in range(num_tasks):
        ids = list(range(t * classes_per_task, (t + 1) * classes_per_task))
        parts: dict[str, tuple[list, list]] = {name: ([], []) for name in SPLITS}
        for c in ids:
            noise = rng.normal(size=(samples_per_class, channels, image_size, image_size))
            x = (patterns[c][None] + difficulty * noise).astype(np.float32)
            cuts = {"test": x[:n_test], "val": x[n_test:n_test + n_val], "train": x[n_test + n_val:]}
            for name, xs in cuts.items():
                parts[name][0].append(xs)
                parts[name][1].append(np.full(len(xs), c, dtype=np.int64))
        splits = {name: Split(np.concatenate(xs), np.concatenate(ys)) for name, (xs, ys) in parts.items()}
        tasks.append(TaskSpec(t, tuple(ids), class_names=tuple(f"class_{c}" for c in ids), **splits))
    return TaskStream(tuple(tasks), tuple(f"class_{c}" for c in range(n_classes)))


# -- on-disk datasets ------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    classes_per_task: int = 10
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    image_size: int | None = None
    shuffle_classes: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if self.classes_per_task < 1:
            raise ConfigError("classes_per_task must be positive")
        if len(self.ratios) != 3 or min(self.ratios) < 0 or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {self.ratios}")


def _path_key(rel: str) -> str:
    return hashlib.sha256(rel.encode("utf-8")).hexdigest()


def _read_image(path: Path, size: int | None) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if size is not None and img.size != (size, size):
                img = img.resize((size, size), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise UnreadableFileError(f"cannot read image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1)


def _collect(root: Path) -> tuple[Path, dict[str, list[str]]]:
    """Map class name -> relative paths, from an index CSV or class folders."""
    index = root if root.is_file() else root / "index.csv"
    if index.is_file():
        base = index.parent
        by_class: dict[str, list[str]] = {}
        seen: set[str] = set()
        with index.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["path", "label"]:
                raise DatasetError(f"{index}: header must be 'path,label'")
            for row in reader:
                rel = Path(row["path"].strip()).as_posix()
                if rel in seen:
                    raise DuplicatePathError(f"{index}: path {rel} listed more than once")
                seen.add(rel)
                by_class.setdefault(row["label"].strip(), []).append(rel)
        return base, by_class

    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    by_class = {}
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = [f.relative_to(root).as_posix() for f in class_dir.iterdir()
                 if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES]
        by_class[class_dir.name] = files
    return root, by_class


def load_stream(root_path: str | Path, split_spec: SplitSpec | None = None) -> TaskStream:
    spec = split_spec or SplitSpec()
    base, by_class = _collect(Path(root_path))
    names = sorted(by_class)
    if not names:
        raise DatasetError(f"no classes found under {root_path}")
    for name in names:
        if not by_class[name]:
            raise EmptyClassError(f"class {name!r} has no samples")
    if len(names) % spec.classes_per_task:
        raise ConfigError(
            f"{len(names)} classes cannot be split into tasks of {spec.classes_per_task}"
        )
    order = list(names)
    if spec.shuffle_classes:
        order = [order[i] for i in np.random.default_rng(spec.seed).permutation(len(order))]

    global_id = {name: i for i, name in enumerate(names)}
    tasks = []
    shape = None
    for t in range(len(order) // spec.classes_per_task):
        block = order[t * spec.classes_per_task:(t + 1) * spec.classes_per_task]
        parts: dict[str, tuple[list, list]] = {name: ([], []) for name in SPLITS}
        for name in block:
            rels = sorted(by_class[name], key=_path_key)
            n = len(rels)
            n_train = int(round(spec.ratios[0] * n))
            n_val = int(round(spec.ratios[1] * n))
            n_val = min(n_val, n - n_train)
            groups = {"train": rels[:n_train], "val": rels[n_train:n_train + n_val],
                      "test": rels[n_train + n_val:]}
            for split, members in groups.items():
                for rel in members:
                    arr = _read_image(base / rel, spec.image_size)
                    if shape is None:
                        shape = arr.shape
                    elif arr.shape != shape:
                        raise DatasetError(
                            f"{rel}: image shape {arr.shape} differs from {shape}; set image_size"
                        )
                    parts[split][0].append(arr)
                    parts[split][1].append(global_id[name])
        splits = {}
        for split, (xs, ys) in parts.items():
            x = np.stack(xs).astype(np.float32) if xs else np.zeros((0, *shape), dtype=np.float32)
            splits[split] = Split(x, np.asarray(ys, dtype=np.int64))
        ids = tuple(global_id[n] for n in block)
        tasks.append(TaskSpec(t, ids, class_names=tuple(block), **splits))
    return TaskStream(tuple(tasks), tuple(names))
