"""Core record types, the harmonized label registry and the stratified split."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional

import numpy as np

CANONICAL_CLASS_NAMES = (
    "basophil",
    "eosinophil",
    "erythroblast",
    "myeloblast",
    "promyelocyte",
    "myelocyte",
    "metamyelocyte",
    "neutrophil_banded",
    "neutrophil_segmented",
    "monocyte",
    "lymphocyte_typical",
    "lymphocyte_atypical",
    "smudge_cell",
)

UNLABELED = -1


@dataclass(frozen=True)
class ClassLabel:
    id: int
    name: str


def canonical_labels() -> list[ClassLabel]:
    """The 13 harmonized white-blood-cell classes, ids 0..12 in fixed order."""
    return [ClassLabel(i, name) for i, name in enumerate(CANONICAL_CLASS_NAMES)]


@dataclass(frozen=True)
class InstanceRecord:
    """One detected cell: instance feature vector, RGB crop, domain and label."""

    record_id: int
    features: np.ndarray
    image: np.ndarray
    domain: int
    label: Optional[int] = None

    @property
    def is_anchor(self) -> bool:
        return self.domain == 0


@dataclass(frozen=True)
class DatasetMeta:
    feature_dim: int = 256
    image_side: int = 64
    num_classes: int = 5
    num_domains: int = 3
    seed: int = 0
    generator_version: str = "synthgen-1"


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented collection of instance records.

    ``labels`` uses ``UNLABELED`` (-1) for records without a class label.
    Subsets produced by :meth:`subset` keep the parent's record ids, so only
    root datasets have ids contiguous from 0.
    """

    features: np.ndarray  # (n, D) float32
    images: np.ndarray  # (n, S, S, 3) uint8
    domains: np.ndarray  # (n,) int64
    labels: np.ndarray  # (n,) int64
    record_ids: np.ndarray  # (n,) int64
    meta: DatasetMeta = field(default_factory=DatasetMeta)

    def __post_init__(self):
        n = len(self.record_ids)
        feats = np.asarray(self.features, dtype=np.float32)
        imgs = np.asarray(self.images, dtype=np.uint8)
        if n == 0:
            feats = feats.reshape(0, self.meta.feature_dim)
            imgs = imgs.reshape(0, self.meta.image_side, self.meta.image_side, 3)
        object.__setattr__(self, "features", _readonly(feats))
        object.__setattr__(self, "images", _readonly(imgs))
        for name in ("domains", "labels", "record_ids"):
            object.__setattr__(self, name, _readonly(np.asarray(getattr(self, name), dtype=np.int64)))
        self._validate()

    def _validate(self):
        n = len(self.record_ids)
        m = self.meta
        if self.features.shape != (n, m.feature_dim):
            raise ValueError(f"features shape {self.features.shape} != ({n}, {m.feature_dim})")
        if self.images.shape != (n, m.image_side, m.image_side, 3):
            raise ValueError(f"images shape {self.images.shape} != ({n}, {m.image_side}, {m.image_side}, 3)")
        if self.domains.shape != (n,) or self.labels.shape != (n,):
            raise ValueError("domains/labels must be aligned with records")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if n and (self.domains.min() < 0 or self.domains.max() >= m.num_domains):
            raise ValueError("record domain out of range")
        labeled = self.labels[self.labels != UNLABELED]
        if labeled.size and (labeled.min() < 0 or labeled.max() >= m.num_classes):
            raise ValueError("record label out of range")
        if len(np.unique(self.record_ids)) != n:
            raise ValueError("record ids must be unique")

    def __len__(self) -> int:
        return len(self.record_ids)

    def __iter__(self) -> Iterator[InstanceRecord]:
        for i in range(len(self)):
            yield self.record(i)

    def record(self, i: int) -> InstanceRecord:
        label = int(self.labels[i])
        return InstanceRecord(
            record_id=int(self.record_ids[i]),
            features=self.features[i],
            image=self.images[i],
            domain=int(self.domains[i]),
            label=None if label == UNLABELED else label,
        )

    @property
    def records(self) -> list[InstanceRecord]:
        return list(self)

    @property
    def is_root(self) -> bool:
        return bool(np.array_equal(self.record_ids, np.arange(len(self))))

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            features=self.features[idx],
            images=self.images[idx],
            domains=self.domains[idx],
            labels=self.labels[idx],
            record_ids=self.record_ids[idx],
            meta=self.meta,
        )

    def equals(self, other: "Dataset") -> bool:
        """Structural equality with bit-exact feature comparison."""
        return (
            self.meta == other.meta
            and self.features.tobytes() == other.features.tobytes()
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.domains, other.domains)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.record_ids, other.record_ids)
        )

    @classmethod
    def from_records(cls, records, meta: DatasetMeta) -> "Dataset":
        records = list(records)
        side = meta.image_side
        return cls(
            features=np.array([r.features for r in records], dtype=np.float32).reshape(
                len(records), meta.feature_dim),
            images=np.array([r.image for r in records], dtype=np.uint8).reshape(
                len(records), side, side, 3),
            domains=[r.domain for r in records],
            labels=[UNLABELED if r.label is None else r.label for r in records],
            record_ids=[r.record_id for r in records],
            meta=meta,
        )


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie strictly between 0 and 1")


def cell_test_count(cell_size: int, train_fraction: float) -> int:
    """Held-out count for one (label, domain) cell.

    Round-half-up of the test share, clamped so a cell with at least two
    members lands in both partitions.
    """
    n_test = int(math.floor(cell_size * (1.0 - train_fraction) + 0.5))
    if cell_size >= 2:
        n_test = min(max(n_test, 1), cell_size - 1)
    return n_test


def stratified_split(ds: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset]:
    """Partition ``ds`` per (label, domain) cell into train and test subsets."""
    if len(ds) == 0:
        raise ValueError("cannot split an empty dataset")
    if np.any(ds.labels == UNLABELED):
        raise ValueError("stratification requires labels")
    rng = np.random.default_rng(spec.seed)
    test_mask = np.zeros(len(ds), dtype=bool)
    cells = sorted(set(zip(ds.labels.tolist(), ds.domains.tolist())))
    for label, domain in cells:
        members = np.flatnonzero((ds.labels == label) & (ds.domains == domain))
        n_test = cell_test_count(len(members), spec.train_fraction)
        test_mask[rng.permutation(members)[:n_test]] = True
    return ds.subset(np.flatnonzero(~test_mask)), ds.subset(np.flatnonzero(test_mask))


def with_meta(ds: Dataset, **changes) -> Dataset:
    return Dataset(ds.features, ds.images, ds.domains, ds.labels, ds.record_ids,
                   replace(ds.meta, **changes))
