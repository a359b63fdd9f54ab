"""Synthetic age-regression data and federation partitioners.

The generator stands in for an imaging cohort: standard-normal feature
vectors map to an "age" in [45, 80] through a fixed random affine term plus a
smooth nonlinearity. Partitions cover IID / Non-IID label distributions and
uniform / geometrically skewed learner sizes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

AGE_MIN, AGE_MAX = 45.0, 80.0
AGE_CENTER, AGE_SPREAD = 62.5, 6.0
DEFAULT_TRAIN_SIZE = 8356
DEFAULT_EVAL_SIZE = 2090
SKEW_RATIO = 0.7


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    targets: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        if len(self.features) != len(self.targets):
            raise ValueError("features and targets differ in length")
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.targets))):
            raise ValueError("dataset contains non-finite values")

    def __len__(self):
        return len(self.targets)

    def subset(self, indices) -> LabeledDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.targets[idx], self.seed)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            dim = self.features.shape[1]
            writer.writerow([f"x{i}" for i in range(dim)] + ["age"])
            for row, t in zip(self.features, self.targets):
                writer.writerow([repr(float(v)) for v in row] + [repr(float(t))])


def _target_map(features: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    dim = features.shape[1]
    w_lin = rng.normal(size=dim)
    w_lin /= np.linalg.norm(w_lin)
    w_nl = rng.normal(size=(dim, 4)) / np.sqrt(dim)
    a_nl = rng.normal(size=4)
    raw = features @ w_lin + 0.5 * np.tanh(features @ w_nl) @ a_nl
    return raw


def target_function(features: np.ndarray, seed: int) -> np.ndarray:
    """Noise-free ages for ``features`` under the generator seeded with ``seed``."""
    coeff_rng = np.random.default_rng([seed, 1])
    raw = _target_map(np.asarray(features, dtype=np.float64), coeff_rng)
    return np.clip(AGE_CENTER + AGE_SPREAD * raw, AGE_MIN, AGE_MAX)


def generate_synthetic(count: int, input_dim: int = 32, noise_sigma: float = 1.0,
                       seed: int = 0) -> LabeledDataset:
    if count <= 0:
        raise ValueError("count must be positive")
    rng = np.random.default_rng([seed, 0])
    features = rng.normal(size=(count, input_dim))
    targets = target_function(features, seed)
    if noise_sigma > 0:
        targets = np.clip(targets + rng.normal(0.0, noise_sigma, size=count), AGE_MIN, AGE_MAX)
    return LabeledDataset(features, targets, seed)


def train_eval_split(seed: int = 0, train_size: int = DEFAULT_TRAIN_SIZE,
                     eval_size: int = DEFAULT_EVAL_SIZE, input_dim: int = 32,
                     noise_sigma: float = 1.0) -> tuple[LabeledDataset, LabeledDataset]:
    full = generate_synthetic(train_size + eval_size, input_dim, noise_sigma, seed)
    idx = np.arange(len(full))
    return full.subset(idx[:train_size]), full.subset(idx[train_size:])


class Distribution(str, Enum):
    IID = "iid"
    NON_IID = "noniid"


class Amount(str, Enum):
    UNIFORM = "uniform"
    SKEWED = "skewed"


@dataclass(frozen=True)
class PartitionScheme:
    amount: Amount
    distribution: Distribution

    @classmethod
    def parse(cls, name: str) -> PartitionScheme:
        """Accepts environment names such as ``uniform_iid`` or ``skewed_noniid``."""
        try:
            amount, dist = name.lower().split("_", 1)
            return cls(Amount(amount), Distribution(dist.replace("-", "")))
        except ValueError:
            raise ValueError(f"unknown partition scheme {name!r}") from None

    @property
    def name(self) -> str:
        return f"{self.amount.value}_{self.distribution.value}"


ENVIRONMENTS = ("uniform_iid", "uniform_noniid", "skewed_noniid")


@dataclass(frozen=True)
class PartitionPlan:
    scheme: PartitionScheme
    indices: tuple[np.ndarray, ...]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(ix) for ix in self.indices)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["learner", "index"])
            for k, ix in enumerate(self.indices):
                for i in ix:
                    writer.writerow([k, int(i)])


def uniform_sizes(total: int, n: int) -> list[int]:
    base, extra = divmod(total, n)
    return [base + 1 if k < extra else base for k in range(n)]


def skewed_sizes(total: int, n: int, ratio: float = SKEW_RATIO) -> list[int]:
    """Geometric sizes ``ratio**k`` scaled to ``total`` by largest remainder."""
    raw = total * ratio ** np.arange(n) / np.sum(ratio ** np.arange(n))
    sizes = np.floor(raw).astype(np.int64)
    short = total - int(sizes.sum())
    for k in np.argsort(-(raw - sizes), kind="stable")[:short]:
        sizes[k] += 1
    if np.any(sizes < 1):
        raise ValueError(f"{total} examples cannot be skewed across {n} learners")
    return [int(s) for s in sizes]


def partition(dataset: LabeledDataset, n: int, scheme, seed: int = 0) -> PartitionPlan:
    """Split ``dataset`` across ``n`` learners.

    IID deals a global shuffle; Non-IID sorts by target and hands each learner
    one contiguous age block (learner 0 gets the youngest).
    """
    if isinstance(scheme, str):
        scheme = PartitionScheme.parse(scheme)
    total = len(dataset)
    if n < 1 or n > total:
        raise ValueError(f"cannot split {total} examples across {n} learners")
    if scheme.amount is Amount.UNIFORM:
        sizes = uniform_sizes(total, n)
    else:
        sizes = skewed_sizes(total, n)
    rng = np.random.default_rng([seed, 2])
    if scheme.distribution is Distribution.IID:
        order = rng.permutation(total)
    else:
        # random tie-breaking keeps equal targets from favouring index order
        jitter = rng.permutation(total)
        order = np.lexsort((jitter, dataset.targets))
    bounds = np.cumsum([0] + sizes)
    indices = tuple(np.sort(order[bounds[k]:bounds[k + 1]]) for k in range(n))
    return PartitionPlan(scheme, indices)
