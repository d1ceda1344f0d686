"""Task streams for sequential training: synthetic generators, CSV ingestion, ordering."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import jsonio
from .numcore import RngStream, require_finite


class StreamFormatError(ValueError):
    """Raised for malformed CSV rows or manifests; carries file/line context."""


@dataclass
class Split:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("split inputs must be (n, d), labels (n,)")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("split inputs and labels disagree on size")
        if self.inputs.shape[0] == 0:
            raise ValueError("split must be non-empty")
        require_finite(self.inputs, "split inputs")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


@dataclass
class TaskSpec:
    """One task: a class count and non-empty train/val/test splits."""

    task_id: int
    class_count: int
    train: Split
    val: Split
    test: Split

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("a task needs at least two classes")
        for name in ("train", "val", "test"):
            labels = getattr(self, name).labels
            if np.any(labels < 0) or np.any(labels >= self.class_count):
                raise ValueError(f"{name} labels fall outside [0, {self.class_count})")

    @property
    def input_dim(self) -> int:
        return self.train.inputs.shape[1]

    def split(self, name: str) -> Split:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


@dataclass
class BlobMeta:
    """Generator metadata kept so a disjoint warm-start corpus can be drawn later."""

    means: np.ndarray
    separation: float
    noise: float
    samples_per_class: int
    classes_per_task: int


@dataclass
class TaskStream:
    tasks: list[TaskSpec]
    blob_meta: BlobMeta | None = None

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("stream must contain at least one task")
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("task ids must be unique")
        dims = {t.input_dim for t in self.tasks}
        if len(dims) != 1:
            raise ValueError(f"tasks disagree on input dimension: {sorted(dims)}")

    @property
    def input_dim(self) -> int:
        return self.tasks[0].input_dim

    @property
    def task_ids(self) -> list[int]:
        return [t.task_id for t in self.tasks]

    def task_by_id(self, task_id: int) -> TaskSpec:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(f"stream has no task {task_id}")


def _split_stratified(inputs: np.ndarray, labels: np.ndarray, rng: RngStream) -> tuple[Split, Split, Split]:
    """80/10/10 split, stratified by class so every split keeps class balance."""
    tr_idx, va_idx, te_idx = [], [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        n = idx.size
        n_val = max(1, int(0.1 * n))
        n_test = max(1, int(0.1 * n))
        if n - n_val - n_test < 1:
            raise ValueError(f"class {cls} has too few samples ({n}) for an 80/10/10 split")
        va_idx.append(idx[:n_val])
        te_idx.append(idx[n_val : n_val + n_test])
        tr_idx.append(idx[n_val + n_test :])
    tr = np.concatenate(tr_idx)
    va = np.concatenate(va_idx)
    te = np.concatenate(te_idx)
    return (
        Split(inputs[tr], labels[tr]),
        Split(inputs[va], labels[va]),
        Split(inputs[te], labels[te]),
    )


def gen_split_blobs(
    num_tasks: int,
    classes_per_task: int,
    dim: int,
    samples_per_class: int,
    separation: float,
    noise: float,
    seed: int,
) -> TaskStream:
    """Gaussian-blob stream: class means drawn uniformly in a hypercube of side
    ``separation``, isotropic noise around each mean, consecutive classes
    grouped into tasks and relabeled to the local range.
    """
    if num_tasks < 1 or classes_per_task < 2:
        raise ValueError("need num_tasks >= 1 and classes_per_task >= 2")
    if samples_per_class < 10:
        raise ValueError("need samples_per_class >= 10 to keep all splits non-empty")
    if separation <= 0 or noise < 0:
        raise ValueError("separation must be positive and noise non-negative")
    rng = RngStream(seed, "blobs")
    total = num_tasks * classes_per_task
    means = rng.derive("means").uniform(-separation / 2, separation / 2, size=(total, dim))
    sample_rng = rng.derive("samples")
    tasks = []
    for k in range(num_tasks):
        xs, ys = [], []
        for local in range(classes_per_task):
            cls = k * classes_per_task + local
            pts = means[cls] + noise * sample_rng.derive(f"class{cls}").normal(size=(samples_per_class, dim))
            xs.append(pts)
            ys.append(np.full(samples_per_class, local, dtype=np.int64))
        inputs = np.concatenate(xs)
        labels = np.concatenate(ys)
        train, val, test = _split_stratified(inputs, labels, rng.derive(f"split{k}"))
        tasks.append(TaskSpec(k, classes_per_task, train, val, test))
    meta = BlobMeta(means, float(separation), float(noise), samples_per_class, classes_per_task)
    return TaskStream(tasks, blob_meta=meta)


def gen_permuted_tasks(base: TaskSpec, num_tasks: int, seed: int) -> TaskStream:
    """Feature-permutation stream: task k applies a fixed seeded permutation to
    every split of ``base``; task 0 uses the identity, so it equals the base.
    """
    if num_tasks < 1:
        raise ValueError("need num_tasks >= 1")
    rng = RngStream(seed, "permuted")
    dim = base.input_dim
    tasks = []
    for k in range(num_tasks):
        perm = np.arange(dim) if k == 0 else rng.derive(f"task{k}").permutation(dim)
        tasks.append(
            TaskSpec(
                k,
                base.class_count,
                Split(base.train.inputs[:, perm], base.train.labels.copy()),
                Split(base.val.inputs[:, perm], base.val.labels.copy()),
                Split(base.test.inputs[:, perm], base.test.labels.copy()),
            )
        )
    return TaskStream(tasks)


@dataclass
class CsvSchema:
    """Column mapping for raw CSV ingestion."""

    features: list[str]
    label: str
    task: str | None = None
    class_count: int | None = None


def load_csv(path, schema: CsvSchema, seed: int = 0) -> TaskStream:
    """Ingest a raw CSV into a stream: rows grouped by the task column (single
    task when absent), each group split 80/10/10 by a seeded shuffle.
    """
    groups: dict[int, tuple[list[list[float]], list[int]]] = {}
    with open(path, newline="", encoding="utf-8") as fp:
        reader = csv.DictReader(fp)
        header = reader.fieldnames or []
        for col in schema.features + [schema.label] + ([schema.task] if schema.task else []):
            if col not in header:
                raise StreamFormatError(f"{path}: missing column {col!r}")
        for lineno, row in enumerate(reader, start=2):
            try:
                feats = [float(row[c]) for c in schema.features]
                label = int(row[schema.label])
                task = int(row[schema.task]) if schema.task else 0
            except (TypeError, ValueError) as exc:
                raise StreamFormatError(f"{path}:{lineno}: malformed row ({exc})") from exc
            if label < 0:
                raise StreamFormatError(f"{path}:{lineno}: negative label {label}")
            if schema.class_count is not None and label >= schema.class_count:
                raise StreamFormatError(
                    f"{path}:{lineno}: label {label} exceeds declared class count {schema.class_count}"
                )
            xs, ys = groups.setdefault(task, ([], []))
            xs.append(feats)
            ys.append(label)
    if not groups:
        raise StreamFormatError(f"{path}: no data rows")
    tasks = []
    for task_id in sorted(groups):
        xs, ys = groups[task_id]
        inputs = np.asarray(xs, dtype=np.float64)
        labels = np.asarray(ys, dtype=np.int64)
        class_count = schema.class_count if schema.class_count is not None else int(labels.max()) + 1
        rng = RngStream(seed, f"csv-split/task{task_id}")
        idx = rng.permutation(labels.size)
        n = labels.size
        n_val = max(1, int(0.1 * n))
        n_test = max(1, int(0.1 * n))
        if n - n_val - n_test < 1:
            raise StreamFormatError(f"{path}: task {task_id} has too few rows ({n}) to split")
        va, te, tr = idx[:n_val], idx[n_val : n_val + n_test], idx[n_val + n_test :]
        tasks.append(
            TaskSpec(
                task_id,
                class_count,
                Split(inputs[tr], labels[tr]),
                Split(inputs[va], labels[va]),
                Split(inputs[te], labels[te]),
            )
        )
    return TaskStream(tasks)


def save_stream(stream: TaskStream, out_dir) -> None:
    """Write a stream as one JSON manifest plus a CSV per task.

    Floats use 17-significant-digit decimal, so a reload reproduces the
    in-memory arrays bit for bit, split membership included.
    """
    os.makedirs(out_dir, exist_ok=True)
    manifest: dict = {"format": "forgetlab-stream", "version": 1, "tasks": []}
    for t in stream.tasks:
        fname = f"task_{t.task_id}.csv"
        with open(os.path.join(out_dir, fname), "w", newline="", encoding="utf-8") as fp:
            writer = csv.writer(fp)
            dim = t.input_dim
            writer.writerow(["split", "label"] + [f"f{i}" for i in range(dim)])
            for split_name in ("train", "val", "test"):
                split = t.split(split_name)
                for x, y in zip(split.inputs, split.labels):
                    writer.writerow([split_name, int(y)] + [format(v, ".17g") for v in x])
        manifest["tasks"].append({"task_id": t.task_id, "class_count": t.class_count, "file": fname})
    if stream.blob_meta is not None:
        m = stream.blob_meta
        manifest["blob_meta"] = {
            "means": m.means,
            "separation": m.separation,
            "noise": m.noise,
            "samples_per_class": m.samples_per_class,
            "classes_per_task": m.classes_per_task,
        }
    jsonio.write_file(os.path.join(out_dir, "manifest.json"), manifest)


def load_stream(in_dir) -> TaskStream:
    manifest_path = os.path.join(in_dir, "manifest.json")
    doc = jsonio.read_file(manifest_path)
    if doc.get("format") != "forgetlab-stream":
        raise StreamFormatError(f"{manifest_path}: not a stream manifest")
    tasks = []
    for entry in doc["tasks"]:
        path = os.path.join(in_dir, entry["file"])
        parts: dict[str, tuple[list[list[float]], list[int]]] = {
            "train": ([], []),
            "val": ([], []),
            "test": ([], []),
        }
        with open(path, newline="", encoding="utf-8") as fp:
            reader = csv.reader(fp)
            header = next(reader, None)
            if not header or header[:2] != ["split", "label"]:
                raise StreamFormatError(f"{path}:1: bad header")
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(header):
                    raise StreamFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
                split_name = row[0]
                if split_name not in parts:
                    raise StreamFormatError(f"{path}:{lineno}: unknown split {split_name!r}")
                try:
                    label = int(row[1])
                    feats = [float(v) for v in row[2:]]
                except ValueError as exc:
                    raise StreamFormatError(f"{path}:{lineno}: malformed row ({exc})") from exc
                parts[split_name][0].append(feats)
                parts[split_name][1].append(label)
        splits = {}
        for name, (xs, ys) in parts.items():
            if not xs:
                raise StreamFormatError(f"{path}: split {name!r} is empty")
            splits[name] = Split(np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.int64))
        tasks.append(TaskSpec(int(entry["task_id"]), int(entry["class_count"]), splits["train"], splits["val"], splits["test"]))
    meta = None
    if doc.get("blob_meta"):
        bm = doc["blob_meta"]
        meta = BlobMeta(
            np.asarray(bm["means"], dtype=np.float64),
            float(bm["separation"]),
            float(bm["noise"]),
            int(bm["samples_per_class"]),
            int(bm["classes_per_task"]),
        )
    return TaskStream(tasks, blob_meta=meta)


def shuffle_sequences(stream: TaskStream, num_orders: int, seed: int) -> list[list[int]]:
    """``num_orders`` uniformly random task-id orderings (seeded, independent)."""
    if num_orders < 1:
        raise ValueError("need at least one ordering")
    rng = RngStream(seed, "orders")
    ids = stream.task_ids
    out = []
    for k in range(num_orders):
        perm = rng.derive(f"order{k}").permutation(len(ids))
        out.append([ids[i] for i in perm])
    return out


def reorder_stream(stream: TaskStream, order: Sequence[int]) -> TaskStream:
    """Stream with tasks visited in ``order``; task ids (and heads) keep their identity."""
    if sorted(order) != sorted(stream.task_ids):
        raise ValueError("order must be a permutation of the stream's task ids")
    return TaskStream([stream.task_by_id(tid) for tid in order], blob_meta=stream.blob_meta)


@dataclass
class WarmStartCorpus:
    """Pooled multi-class dataset drawn away from a stream's class means."""

    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    means: np.ndarray


def gen_warm_start_corpus(
    stream: TaskStream,
    seed: int,
    samples_per_class: int | None = None,
    max_attempts: int = 10_000,
) -> WarmStartCorpus:
    """Fresh blob classes disjoint from the stream's: each new mean is rejected
    until it sits at least separation/2 from every stream mean. Class count
    mirrors the stream's total.
    """
    meta = stream.blob_meta
    if meta is None:
        raise ValueError("warm-start corpus needs a stream built by gen_split_blobs")
    rng = RngStream(seed, "warmstart")
    dim = meta.means.shape[1]
    total = meta.means.shape[0]
    spc = samples_per_class if samples_per_class is not None else meta.samples_per_class
    min_dist = meta.separation / 2
    mean_rng = rng.derive("means")
    new_means = np.zeros((total, dim))
    for c in range(total):
        for attempt in range(max_attempts):
            cand = mean_rng.uniform(-meta.separation / 2, meta.separation / 2, size=dim)
            if np.min(np.linalg.norm(meta.means - cand, axis=1)) >= min_dist:
                new_means[c] = cand
                break
        else:
            raise RuntimeError(
                f"could not place disjoint corpus mean {c} after {max_attempts} draws; "
                "increase separation or dimensionality"
            )
    sample_rng = rng.derive("samples")
    xs, ys = [], []
    for c in range(total):
        pts = new_means[c] + meta.noise * sample_rng.derive(f"class{c}").normal(size=(spc, dim))
        xs.append(pts)
        ys.append(np.full(spc, c, dtype=np.int64))
    return WarmStartCorpus(np.concatenate(xs), np.concatenate(ys), total, new_means)
