"""Synthetic labelled domains with a controllable shift.

Two families are available:

``rotated_two_moons``
    Two interleaving half circles with Gaussian noise, centred and rotated
    by the domain angle. Two classes, two input dimensions.
``shifted_gaussian_mixture``
    ``num_classes`` isotropic clusters whose centres sit on a circle in the
    first two coordinates. Each domain applies an affine map parameterised by
    its angle: a rotation of the first two coordinates, an anisotropic
    stretch and a translation, all growing with the angle.

Both families draw exactly ``n // num_classes`` samples per class (the rest go
to the lowest classes), so label marginals are identical across domains.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

FAMILIES = ("rotated_two_moons", "shifted_gaussian_mixture")
MOONS_CENTER = np.array([0.5, 0.25])


@dataclass(frozen=True)
class DomainSpec:
    family: str
    angle: float
    samples: int = 500
    noise: float = 0.1
    seed: int = 0
    num_classes: int = 2
    input_dim: int = 2
    domain_id: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown domain family {self.family!r}")
        object.__setattr__(self, "angle", float(self.angle) % 360.0)
        if self.samples <= 0:
            raise ValueError("a domain needs at least one sample")
        if self.samples < 2 * self.num_classes:
            raise ValueError(f"samples per domain must be >= 2 * num_classes ({2 * self.num_classes})")
        if self.family == "rotated_two_moons" and (self.num_classes != 2 or self.input_dim != 2):
            raise ValueError("rotated_two_moons is fixed at 2 classes and 2 input dimensions")
        if not 2 <= self.num_classes <= 8 or not 2 <= self.input_dim <= 8:
            raise ValueError("num_classes and input_dim must lie in [2, 8]")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


@dataclass
class DomainDataset:
    domain_id: int
    spec: DomainSpec
    x: np.ndarray
    y: np.ndarray
    train_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    test_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self) -> int:
        return len(self.y)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    def subset(self, part: str) -> tuple[np.ndarray, np.ndarray]:
        if part == "all":
            return self.x, self.y
        idx = {"train": self.train_idx, "test": self.test_idx}[part]
        return self.x[idx], self.y[idx]


@dataclass
class ExperimentSplit:
    sources: list[DomainDataset]
    target: DomainDataset

    @property
    def K(self) -> int:
        return len(self.sources)


def rotation(angle_deg: float) -> np.ndarray:
    a = np.deg2rad(angle_deg)
    return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])


def _class_counts(n: int, num_classes: int) -> list[int]:
    base, extra = divmod(n, num_classes)
    return [base + (1 if c < extra else 0) for c in range(num_classes)]


def _moons(spec: DomainSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n0, n1 = _class_counts(spec.samples, 2)
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([upper, lower]) + rng.normal(0.0, spec.noise, (spec.samples, 2))
    y = np.concatenate([np.zeros(n0, dtype=int), np.ones(n1, dtype=int)])
    x = (x - MOONS_CENTER) @ rotation(spec.angle).T
    return x, y


def mixture_transform(angle: float, input_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Affine map (A, b) applied as ``x @ A.T + b`` for a mixture domain."""
    A = np.eye(input_dim)
    frac = angle / 45.0
    A[:2, :2] = rotation(angle) @ np.diag([1.0 + 0.25 * frac, 1.0 - 0.15 * frac])
    b = np.zeros(input_dim)
    b[:2] = 0.6 * frac * np.array([1.0, -0.5])
    return A, b


def _mixture(spec: DomainSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    counts = _class_counts(spec.samples, spec.num_classes)
    phases = 2 * np.pi * np.arange(spec.num_classes) / spec.num_classes
    centers = np.zeros((spec.num_classes, spec.input_dim))
    centers[:, 0] = 1.5 * np.cos(phases)
    centers[:, 1] = 1.5 * np.sin(phases)
    xs, ys = [], []
    for c, n in enumerate(counts):
        xs.append(centers[c] + rng.normal(0.0, spec.noise, (n, spec.input_dim)))
        ys.append(np.full(n, c, dtype=int))
    A, b = mixture_transform(spec.angle, spec.input_dim)
    return np.concatenate(xs) @ A.T + b, np.concatenate(ys)


def _stratified_split(y: np.ndarray, rng: np.random.Generator, train_frac: float):
    train, test = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        k = int(round(train_frac * len(idx)))
        k = min(max(k, 1), len(idx) - 1)
        train.append(idx[:k])
        test.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def generate_domain(spec: DomainSpec, train_frac: float = 0.7) -> DomainDataset:
    rng = np.random.default_rng([spec.seed, 7919])
    if spec.family == "rotated_two_moons":
        x, y = _moons(spec, rng)
    else:
        x, y = _mixture(spec, rng)
    train_idx, test_idx = _stratified_split(y, rng, train_frac)
    return DomainDataset(spec.domain_id, spec, x, y, train_idx, test_idx)


def domain_seed(experiment_seed: int, domain_index: int) -> int:
    return int(np.random.SeedSequence([experiment_seed, domain_index, 101]).generate_state(1)[0])


def make_split(family: str, domain_params: Sequence[float], target_index: int, *,
               samples: int = 500, noise: float = 0.1, seed: int = 0,
               num_classes: int = 2, input_dim: int = 2) -> ExperimentSplit:
    """Leave-one-domain-out split: ``domain_params[target_index]`` is held out."""
    if len(domain_params) < 3:
        raise ValueError("need at least 3 domains (2 sources + 1 target)")
    if not 0 <= target_index < len(domain_params):
        raise IndexError(f"target_index {target_index} out of range for {len(domain_params)} domains")
    norm = [float(p) % 360.0 for p in domain_params]
    if len(set(norm)) != len(norm):
        raise ValueError("domain parameters must be distinct")
    datasets = [
        generate_domain(DomainSpec(family, p, samples, noise, domain_seed(seed, i),
                                   num_classes, input_dim, domain_id=i))
        for i, p in enumerate(norm)
    ]
    target = datasets[target_index]
    sources = [d for i, d in enumerate(datasets) if i != target_index]
    return ExperimentSplit(sources, target)


def batches(x: np.ndarray, y: np.ndarray, batch_size: int,
            rng: np.random.Generator) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of shuffled mini-batches; the last short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(y))
    for start in range(0, len(y), batch_size):
        idx = order[start:start + batch_size]
        yield x[idx], y[idx]


def dump_csv(path: str | Path, datasets: Sequence[DomainDataset]) -> None:
    """Columns: domain_id, split, label, x_0 .. x_{d-1}."""
    dim = datasets[0].input_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain_id", "split", "label"] + [f"x_{j}" for j in range(dim)])
        for d in datasets:
            split = np.empty(len(d), dtype=object)
            split[d.train_idx] = "train"
            split[d.test_idx] = "test"
            for i in range(len(d)):
                w.writerow([d.domain_id, split[i], int(d.y[i])] + [repr(float(v)) for v in d.x[i]])


def load_csv(path: str | Path) -> dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Read a dump back as {domain_id: (x, y, is_train)}."""
    rows: dict[int, list] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            feats = [float(v) for k, v in rec.items() if k.startswith("x_")]
            rows.setdefault(int(rec["domain_id"]), []).append(
                (feats, int(rec["label"]), rec["split"] == "train"))
    return {
        k: (np.array([r[0] for r in v]), np.array([r[1] for r in v]), np.array([r[2] for r in v]))
        for k, v in rows.items()
    }
