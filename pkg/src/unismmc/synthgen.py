"""Deterministic synthetic multimodal classification datasets.

Every class gets one fixed unit-norm prototype per modality, scaled by the
separation. A clean sample's features for modality m are that prototype
plus gaussian noise; a corrupted sample draws the prototype of a wrong
class instead, so the corrupted modality is confidently wrong rather than
merely noisy. The wrong class is a fixed cyclic shift of the true class,
one shift per modality: with class-dependent targets, a conflicting
feature pattern identifies which modality was corrupted, so the joint view
can in principle recover the true label (shifts that are mutual inverses
across modalities would reintroduce 50/50-ambiguous patterns and are
avoided). Which (sample, modality) cells are corrupted is recorded and
persisted as ground truth for evaluation; training never reads the flags.

File format (container.py framing): header carries the spec echo, seed,
split sizes, and payload checksum; blocks are, per split, the float64
little-endian feature matrix of each modality, int32 labels, int64 sample
ids, then one packed corruption bitmap per modality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .errors import ConfigurationError, FormatError, ShapeError

_DATASET_MAGIC = b"UMDS"
_DATASET_VERSION = 1

SPLIT_NAMES = ("train", "valid", "test")
OVERLAP_POLICIES = ("disjoint", "independent")


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int
    feature_dims: tuple[int, ...]
    train_samples: int
    valid_samples: int
    test_samples: int
    separation: float = 1.0
    noise_sigma: tuple[float, ...] = ()
    corruption_rate: tuple[float, ...] = ()
    overlap: str = "disjoint"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "feature_dims", tuple(int(d) for d in self.feature_dims))
        modalities = len(self.feature_dims)
        object.__setattr__(
            self,
            "noise_sigma",
            tuple(float(s) for s in (self.noise_sigma or (0.0,) * modalities)),
        )
        object.__setattr__(
            self,
            "corruption_rate",
            tuple(float(r) for r in (self.corruption_rate or (0.0,) * modalities)),
        )
        if self.num_classes < 2:
            raise ConfigurationError(f"need >= 2 classes, got {self.num_classes}")
        if modalities < 1 or any(d < 1 for d in self.feature_dims):
            raise ConfigurationError(f"bad feature dims {self.feature_dims}")
        if len(self.noise_sigma) != modalities or len(self.corruption_rate) != modalities:
            raise ConfigurationError("noise_sigma and corruption_rate must have one entry per modality")
        if any(s < 0 for s in self.noise_sigma):
            raise ConfigurationError(f"noise sigmas must be >= 0, got {self.noise_sigma}")
        if any(not 0 <= r < 1 for r in self.corruption_rate):
            raise ConfigurationError(f"corruption rates must lie in [0, 1), got {self.corruption_rate}")
        if not self.separation > 0:
            raise ConfigurationError(f"separation must be positive, got {self.separation}")
        if self.overlap not in OVERLAP_POLICIES:
            raise ConfigurationError(f"overlap must be one of {OVERLAP_POLICIES}, got {self.overlap!r}")
        if self.overlap == "disjoint" and sum(self.corruption_rate) > 1:
            raise ConfigurationError(
                f"disjoint corruption sets are infeasible: rates {self.corruption_rate} sum past 1"
            )
        if min(self.train_samples, self.valid_samples, self.test_samples) < 1:
            raise ConfigurationError("every split needs at least one sample")

    @property
    def num_modalities(self):
        return len(self.feature_dims)

    @property
    def split_sizes(self):
        return {"train": self.train_samples, "valid": self.valid_samples, "test": self.test_samples}


@dataclass
class MultimodalBatch:
    """Row-aligned per-modality feature matrices with integer labels."""

    features: tuple[np.ndarray, ...]
    labels: np.ndarray
    sample_ids: np.ndarray

    def __post_init__(self):
        rows = {f.shape[0] for f in self.features}
        if len(rows) != 1 or self.labels.shape[0] not in rows or self.sample_ids.shape[0] not in rows:
            raise ShapeError("batch features/labels/ids are not row-aligned")

    @property
    def size(self):
        return self.labels.shape[0]

    def take(self, indices):
        indices = np.asarray(indices)
        return MultimodalBatch(
            tuple(f[indices] for f in self.features),
            self.labels[indices],
            self.sample_ids[indices],
        )


@dataclass
class SplitData:
    batch: MultimodalBatch
    corrupted: tuple[np.ndarray, ...]  # per-modality bool arrays, ground truth only


@dataclass
class SynthDataset:
    spec: SynthSpec
    splits: dict = field(default_factory=dict)

    @property
    def train(self):
        return self.splits["train"]

    @property
    def valid(self):
        return self.splits["valid"]

    @property
    def test(self):
        return self.splits["test"]


def _balanced_labels(rng, n, num_classes):
    counts = [n // num_classes + (1 if c < n % num_classes else 0) for c in range(num_classes)]
    labels = np.repeat(np.arange(num_classes, dtype=np.int32), counts)
    return labels[rng.permutation(n)]


def _corruption_sets(rng, spec, n):
    """Per-modality corrupted index arrays; sizes are floor(rate * n)."""
    sizes = [math.floor(rate * n) for rate in spec.corruption_rate]
    if spec.overlap == "disjoint":
        pool = rng.permutation(n)
        sets, start = [], 0
        for size in sizes:
            sets.append(np.sort(pool[start:start + size]))
            start += size
        return sets
    return [np.sort(rng.choice(n, size=size, replace=False)) for size in sizes]


def _corruption_shifts(rng, num_classes, num_modalities):
    """One cyclic class shift per modality, avoiding mutually inverse pairs.

    Shifts s_i, s_j with s_i + s_j = K would make a sample corrupted in
    modality i produce the same feature pattern as its counterpart
    corrupted in modality j, leaving the pattern 50/50 ambiguous; such
    pairs are excluded whenever K admits an alternative.
    """
    shifts = []
    for _ in range(num_modalities):
        forbidden = {(num_classes - s) % num_classes for s in shifts}
        allowed = [s for s in range(1, num_classes) if s not in forbidden]
        if not allowed:
            allowed = list(range(1, num_classes))
        shifts.append(int(allowed[rng.integers(0, len(allowed))]))
    return shifts


def generate(spec):
    """Build all three splits deterministically from the spec's seed."""
    rng = np.random.default_rng(spec.seed)
    prototypes = []
    for dim in spec.feature_dims:
        raw = rng.normal(size=(spec.num_classes, dim))
        prototypes.append(spec.separation * raw / np.linalg.norm(raw, axis=1, keepdims=True))
    shifts = _corruption_shifts(rng, spec.num_classes, spec.num_modalities)

    dataset = SynthDataset(spec)
    next_id = 0
    for split in SPLIT_NAMES:
        n = spec.split_sizes[split]
        labels = _balanced_labels(rng, n, spec.num_classes)
        corrupted_sets = _corruption_sets(rng, spec, n)
        features, flags = [], []
        for m, dim in enumerate(spec.feature_dims):
            source_class = labels.copy()
            corrupted = corrupted_sets[m]
            if corrupted.size:
                source_class[corrupted] = (labels[corrupted] + shifts[m]) % spec.num_classes
            noise = rng.normal(0.0, spec.noise_sigma[m], size=(n, dim))
            features.append(prototypes[m][source_class] + noise)
            flag = np.zeros(n, dtype=bool)
            flag[corrupted] = True
            flags.append(flag)
        ids = np.arange(next_id, next_id + n, dtype=np.int64)
        next_id += n
        batch = MultimodalBatch(tuple(features), labels, ids)
        dataset.splits[split] = SplitData(batch, tuple(flags))
    return dataset


def _spec_to_dict(spec):
    return {
        "num_classes": spec.num_classes,
        "feature_dims": list(spec.feature_dims),
        "train_samples": spec.train_samples,
        "valid_samples": spec.valid_samples,
        "test_samples": spec.test_samples,
        "separation": spec.separation,
        "noise_sigma": list(spec.noise_sigma),
        "corruption_rate": list(spec.corruption_rate),
        "overlap": spec.overlap,
        "seed": spec.seed,
    }


def spec_from_dict(d):
    try:
        return SynthSpec(
            num_classes=int(d["num_classes"]),
            feature_dims=tuple(d["feature_dims"]),
            train_samples=int(d["train_samples"]),
            valid_samples=int(d["valid_samples"]),
            test_samples=int(d["test_samples"]),
            separation=float(d.get("separation", 1.0)),
            noise_sigma=tuple(d.get("noise_sigma", ())),
            corruption_rate=tuple(d.get("corruption_rate", ())),
            overlap=d.get("overlap", "disjoint"),
            seed=int(d.get("seed", 0)),
        )
    except KeyError as exc:
        raise ConfigurationError(f"dataset spec is missing field {exc.args[0]!r}") from exc


def save(dataset, path):
    """Persist the dataset; returns the payload checksum (hex)."""
    spec = dataset.spec
    blocks = []
    for split in SPLIT_NAMES:
        data = dataset.splits[split]
        for m in range(spec.num_modalities):
            blocks.append(np.ascontiguousarray(data.batch.features[m], dtype="<f8").tobytes())
        blocks.append(np.ascontiguousarray(data.batch.labels, dtype="<i4").tobytes())
        blocks.append(np.ascontiguousarray(data.batch.sample_ids, dtype="<i8").tobytes())
        for m in range(spec.num_modalities):
            blocks.append(np.packbits(data.corrupted[m]).tobytes())
    header = {
        "kind": "dataset",
        "spec": _spec_to_dict(spec),
        "splits": {name: spec.split_sizes[name] for name in SPLIT_NAMES},
    }
    return write_container(path, _DATASET_MAGIC, _DATASET_VERSION, header, blocks)


def load(path):
    header, blocks = read_container(path, _DATASET_MAGIC, _DATASET_VERSION)
    if header.get("kind") != "dataset":
        raise FormatError(f"{path}: not a dataset file")
    spec = spec_from_dict(header["spec"])
    modalities = spec.num_modalities
    per_split = modalities + 2 + modalities
    if len(blocks) != per_split * len(SPLIT_NAMES):
        raise FormatError(f"{path}: unexpected block count {len(blocks)}")

    dataset = SynthDataset(spec)
    cursor = 0
    for split in SPLIT_NAMES:
        n = spec.split_sizes[split]
        features = []
        for m, dim in enumerate(spec.feature_dims):
            block = blocks[cursor]
            cursor += 1
            if len(block) != n * dim * 8:
                raise FormatError(f"{path}: feature block for {split}/modality {m} has the wrong size")
            features.append(np.frombuffer(block, dtype="<f8").reshape(n, dim).astype(np.float64))
        labels = np.frombuffer(blocks[cursor], dtype="<i4")
        cursor += 1
        ids = np.frombuffer(blocks[cursor], dtype="<i8")
        cursor += 1
        if labels.shape[0] != n or ids.shape[0] != n:
            raise FormatError(f"{path}: label/id block for {split} has the wrong size")
        flags = []
        for m in range(modalities):
            block = blocks[cursor]
            cursor += 1
            if len(block) != (n + 7) // 8:
                raise FormatError(f"{path}: corruption bitmap for {split}/modality {m} has the wrong size")
            flags.append(np.unpackbits(np.frombuffer(block, dtype=np.uint8), count=n).astype(bool))
        batch = MultimodalBatch(tuple(features), labels.astype(np.int32), ids.astype(np.int64))
        dataset.splits[split] = SplitData(batch, tuple(flags))
    return dataset
