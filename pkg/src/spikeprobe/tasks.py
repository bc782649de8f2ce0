"""Autonomous-localization sequences and a flat on-disk dataset format.

A dataset directory holds three files:

``meta.json``
    UTF-8 JSON with N, T, C, class count, encoding tag, generator
    fingerprint, class/action frequencies and CRC32 of both payloads.
``data.f32``
    little-endian float32, row-major ``N x T x C``.
``labels.u32``
    little-endian uint32, ``N`` entries.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .numerics import RngStream, categorical_from_uniform, _check_probs

SCHEMA_VERSION = 1
ACTIONS = ("turn_left", "turn_right", "go_straight", "stop")
TURN_LEFT, TURN_RIGHT, GO_STRAIGHT, STOP = range(4)
# headings in counter-clockwise order starting at +y
_HEADING_DX = np.array([0, -1, 0, 1], dtype=np.int64)
_HEADING_DY = np.array([1, 0, -1, 0], dtype=np.int64)

TRAIN_STREAM, TEST_STREAM = 10, 11


class CorruptDatasetError(ValueError):
    pass


class DatasetIOError(OSError):
    pass


@dataclass(frozen=True)
class AlSpec:
    length: int = 200
    probs: tuple[float, ...] = (0.05, 0.05, 0.45, 0.45)
    n_train: int = 50_000
    n_test: int = 5_000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        if self.length < 1:
            raise ValueError(f"length must be >= 1, got {self.length}")
        if len(self.probs) != 4:
            raise ValueError("probs needs exactly four action probabilities")
        try:
            _check_probs(self.probs)
        except ValueError as exc:
            raise type(exc)(f"probs: {exc}") from exc
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be positive")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class DatasetMeta:
    N: int
    T: int
    C: int
    n_classes: int
    encoding: str = "raw"
    fingerprint: str = ""
    data_crc32: int = 0
    labels_crc32: int = 0
    class_freq: list[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def validate(self):
        if self.N < 1:
            raise CorruptDatasetError("dataset declares N=0 samples")
        if self.T < 1 or self.C < 1 or self.n_classes < 1:
            raise CorruptDatasetError("T, C and class count must be positive")


class SequenceDataset:
    """Inputs ``(N, T, C)`` float32 and integer labels, indexable by sample."""

    def __init__(self, inputs: np.ndarray, labels: np.ndarray, meta: DatasetMeta):
        if inputs.shape != (meta.N, meta.T, meta.C) or labels.shape != (meta.N,):
            raise CorruptDatasetError("payload shapes do not match metadata")
        self.inputs = inputs
        self.labels = labels
        self.meta = meta

    def __len__(self) -> int:
        return self.meta.N

    def __getitem__(self, i):
        return np.asarray(self.inputs[i]), int(self.labels[i])

    def subset(self, n: int) -> "SequenceDataset":
        meta = DatasetMeta(**{**asdict(self.meta), "N": n})
        return SequenceDataset(self.inputs[:n], self.labels[:n], meta)


# -- AL kinematics --------------------------------------------------------------


def final_position(actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Final (x, y) of robots starting at the origin facing +y.

    ``actions`` is ``(L,)`` or ``(N, L)`` with codes from :data:`ACTIONS`.
    Turns rotate by 90 degrees in place; go-straight moves one unit along the
    heading; stop does nothing.
    """
    a = np.atleast_2d(actions)
    turn = (a == TURN_LEFT).astype(np.int8) - (a == TURN_RIGHT).astype(np.int8)
    heading = np.cumsum(turn, axis=1, dtype=np.int32) % 4
    move = a == GO_STRAIGHT
    x = np.where(move, _HEADING_DX[heading], 0).sum(axis=1)
    y = np.where(move, _HEADING_DY[heading], 0).sum(axis=1)
    if np.ndim(actions) == 1:
        return x[0], y[0]
    return x, y


def label_from_actions(actions: np.ndarray):
    """0 ("left") when the final x is <= 0, else 1 ("right")."""
    x, _ = final_position(actions)
    return (np.asarray(x) > 0).astype(np.int64)


def one_hot_actions(actions: np.ndarray, dtype=np.float32) -> np.ndarray:
    return np.eye(len(ACTIONS), dtype=dtype)[actions]


def al_actions(spec: AlSpec, split: str, start: int = 0, count: int | None = None) -> np.ndarray:
    """Action codes ``(count, L)`` for samples ``start..start+count`` of a split.

    Sample ``i`` step ``t`` always consumes draw ``i * L + t`` of the split's
    stream, so any slice regenerates identically.
    """
    stream = {"train": TRAIN_STREAM, "test": TEST_STREAM}[split]
    if count is None:
        count = (spec.n_train if split == "train" else spec.n_test) - start
    L = spec.length
    u, _ = RngStream(spec.seed, stream, start * L).uniform(count * L)
    return categorical_from_uniform(u, spec.probs).astype(np.uint8).reshape(count, L)


def generate_al_sample(rng: RngStream, spec: AlSpec):
    """One AL sample: returns ((inputs (1, L, 4), label), next stream)."""
    u, rng = rng.uniform(spec.length)
    actions = categorical_from_uniform(u, spec.probs)
    label = int(label_from_actions(actions))
    return (one_hot_actions(actions)[None], label), rng


def al_dataset(spec: AlSpec, split: str, chunk: int = 8192) -> SequenceDataset:
    """In-memory AL split."""
    n = spec.n_train if split == "train" else spec.n_test
    inputs = np.empty((n, spec.length, len(ACTIONS)), dtype=np.float32)
    labels = np.empty(n, dtype=np.uint32)
    action_counts = np.zeros(len(ACTIONS), dtype=np.int64)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        a = al_actions(spec, split, lo, hi - lo)
        inputs[lo:hi] = one_hot_actions(a)
        labels[lo:hi] = label_from_actions(a)
        action_counts += np.bincount(a.ravel(), minlength=len(ACTIONS))
    meta = DatasetMeta(
        N=n, T=spec.length, C=len(ACTIONS), n_classes=2, encoding="onehot-actions",
        fingerprint=f"al-{split}-{spec.fingerprint()}",
        class_freq=(np.bincount(labels, minlength=2) / n).tolist(),
        extra={"generator": "al", "split": split, "spec": asdict(spec),
               "action_freq": (action_counts / action_counts.sum()).tolist()},
    )
    return SequenceDataset(inputs, labels, meta)


# -- storage ------------------------------------------------------------------------


def save_dataset(ds: SequenceDataset, path) -> DatasetMeta:
    path = Path(path)
    data = np.ascontiguousarray(ds.inputs, dtype="<f4").tobytes()
    labels = np.ascontiguousarray(ds.labels, dtype="<u4").tobytes()
    meta = DatasetMeta(**{**asdict(ds.meta), "data_crc32": zlib.crc32(data),
                          "labels_crc32": zlib.crc32(labels)})
    try:
        path.mkdir(parents=True, exist_ok=True)
        (path / "data.f32").write_bytes(data)
        (path / "labels.u32").write_bytes(labels)
        (path / "meta.json").write_text(json.dumps(asdict(meta), indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    except OSError as exc:
        raise DatasetIOError(f"cannot write dataset to {path}: {exc}") from exc
    ds.meta = meta
    return meta


def generate_al_dataset(spec: AlSpec, out_dir) -> dict[str, DatasetMeta]:
    """Write ``train/`` and ``test/`` dataset directories under ``out_dir``."""
    out_dir = Path(out_dir)
    return {split: save_dataset(al_dataset(spec, split), out_dir / split)
            for split in ("train", "test")}


def load_dataset(path, verify: bool = True) -> SequenceDataset:
    """Open a dataset directory; payloads are memory-mapped read-only."""
    path = Path(path)
    try:
        raw = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DatasetIOError(f"no meta.json in {path}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptDatasetError(f"{path / 'meta.json'}: {exc}") from exc
    try:
        meta = DatasetMeta(**raw)
    except TypeError as exc:
        raise CorruptDatasetError(f"{path / 'meta.json'}: {exc}") from exc
    meta.validate()
    data_path, label_path = path / "data.f32", path / "labels.u32"
    for p, expected in ((data_path, meta.N * meta.T * meta.C * 4), (label_path, meta.N * 4)):
        if not p.exists():
            raise CorruptDatasetError(f"missing payload {p}")
        if p.stat().st_size != expected:
            raise CorruptDatasetError(f"{p} has {p.stat().st_size} bytes, expected {expected}")
    inputs = np.memmap(data_path, dtype="<f4", mode="r", shape=(meta.N, meta.T, meta.C))
    labels = np.memmap(label_path, dtype="<u4", mode="r", shape=(meta.N,))
    if verify:
        if zlib.crc32(inputs.tobytes()) != meta.data_crc32:
            raise CorruptDatasetError(f"CRC32 mismatch in {data_path}")
        if zlib.crc32(labels.tobytes()) != meta.labels_crc32:
            raise CorruptDatasetError(f"CRC32 mismatch in {label_path}")
        if meta.N and int(labels.max()) >= meta.n_classes:
            raise CorruptDatasetError("label outside declared class range")
    return SequenceDataset(inputs, labels, meta)


def batches(dataset: SequenceDataset, batch_size: int, rng: RngStream | None = None,
            shuffle: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(x (B, T, C) float32, labels int64)`` covering each sample once.

    With ``shuffle`` the order is a permutation drawn from ``rng``; the last
    batch may be short.
    """
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    n = len(dataset)
    if shuffle:
        if rng is None:
            raise ValueError("shuffling needs an RngStream")
        order, _ = rng.permutation(n)
    else:
        order = np.arange(n)
    for lo in range(0, n, batch_size):
        idx = order[lo:lo + batch_size]
        x = np.asarray(dataset.inputs[idx], dtype=np.float32)
        y = np.asarray(dataset.labels[idx], dtype=np.int64)
        yield x, y
