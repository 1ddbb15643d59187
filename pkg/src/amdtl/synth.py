"""Synthetic multi-domain classification families with known ground truth.

A domain is the base family pushed through ``x -> s * R(phi) x + t`` plus
isotropic Gaussian noise; rotation acts on the first two input coordinates.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import norm

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DomainSpec:
    rotation: float = 0.0
    translation: tuple[float, ...] = ()
    scale: float = 1.0
    noise: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"domain scale must be positive, got {self.scale}")
        if self.noise < 0:
            raise ValueError(f"domain noise must be non-negative, got {self.noise}")
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))


@dataclass(frozen=True)
class TaskFamilySpec:
    """``gaussian_blobs``: class means on a circle of ``radius`` (first two
    coordinates), isotropic ``spread``. ``two_arcs``: interleaved half circles
    with radial jitter ``spread``; binary only."""

    family: str = "gaussian_blobs"
    num_classes: int = 2
    input_dim: int = 2
    radius: float = 2.0
    spread: float = 1.0
    label_flip: float = 0.0
    means: tuple[tuple[float, ...], ...] | None = None
    task_rotation: float = 0.5
    task_translation: float = 0.5

    def __post_init__(self):
        if self.family not in ("gaussian_blobs", "two_arcs"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.family == "two_arcs" and (self.num_classes != 2 or self.input_dim != 2):
            raise ValueError("two_arcs is a 2-class, 2-D family")
        if self.input_dim < 2:
            raise ValueError("input_dim must be >= 2")
        if not 0 <= self.label_flip < 0.5:
            raise ValueError(f"label_flip must lie in [0, 0.5), got {self.label_flip}")
        if self.spread < 0:
            raise ValueError("spread must be non-negative")
        if self.means is not None:
            means = tuple(tuple(float(v) for v in m) for m in self.means)
            if len(means) != self.num_classes or any(len(m) != self.input_dim for m in means):
                raise ValueError("means must be num_classes rows of input_dim values")
            object.__setattr__(self, "means", means)

    def class_means(self) -> np.ndarray:
        if self.means is not None:
            return np.array(self.means, dtype=np.float64)
        k = self.num_classes
        angles = np.pi * np.arange(k) * 2.0 / k
        out = np.zeros((k, self.input_dim))
        out[:, 0] = self.radius * np.cos(angles)
        out[:, 1] = self.radius * np.sin(angles)
        return _snap(out)


@dataclass
class LabeledSet:
    inputs: np.ndarray
    labels: np.ndarray  # one-hot (n, K)
    domain_id: str = "source"
    split: str = "all"
    index: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.inputs.ndim != 2 or self.labels.ndim != 2 or len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels must be matrices with equal row counts")

    def __len__(self):
        return len(self.inputs)

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def targets(self) -> np.ndarray:
        return self.labels.argmax(axis=1)

    def take(self, rows: np.ndarray, split: str | None = None) -> LabeledSet:
        return LabeledSet(self.inputs[rows], self.labels[rows], self.domain_id,
                          self.split if split is None else split,
                          None if self.index is None else self.index[rows])


def one_hot(y: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(y), k))
    out[np.arange(len(y)), y] = 1.0
    return out


def _snap(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a[np.abs(a) < 1e-15] = 0.0
    return a


def rotation_matrix(phi: float, dim: int) -> np.ndarray:
    """Rotation of the first two coordinates; quadrant angles come out exact."""
    r = np.eye(dim)
    c, s = np.cos(phi), np.sin(phi)
    r[:2, :2] = _snap(np.array([[c, -s], [s, c]]))
    return r


def affine(dom: DomainSpec, dim: int) -> tuple[np.ndarray, np.ndarray]:
    t = np.zeros(dim)
    if dom.translation:
        if len(dom.translation) != dim:
            raise ValueError(f"translation has {len(dom.translation)} entries, inputs have {dim}")
        t = np.array(dom.translation)
    return dom.scale * rotation_matrix(dom.rotation, dim), t


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def sample_family(family: TaskFamilySpec, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Raw (untransformed) inputs for the given class labels."""
    n, d = len(y), family.input_dim
    if family.family == "gaussian_blobs":
        return family.class_means()[y] + family.spread * rng.standard_normal((n, d))
    theta = rng.uniform(0.0, np.pi, size=n)
    r = 1.0 + family.spread * rng.standard_normal(n)
    return _arcs(y, theta, r, family.radius)


def _arcs(y: np.ndarray, theta: np.ndarray, r: np.ndarray, radius: float) -> np.ndarray:
    x = np.where(y == 0, r * np.cos(theta), 1.0 - r * np.cos(theta))
    x2 = np.where(y == 0, r * np.sin(theta), 0.5 - r * np.sin(theta))
    return np.stack([x, x2], axis=1) * radius / 2.0


def flip_labels(y: np.ndarray, k: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    flip = rng.random(len(y)) < rate
    other = (y + rng.integers(1, k, size=len(y))) % k
    return np.where(flip, other, y)


def generate_domain(family: TaskFamilySpec, dom: DomainSpec, n: int, seed: int,
                    domain_id: str = "source") -> LabeledSet:
    if n < family.num_classes:
        raise ValueError(f"need at least {family.num_classes} samples, got {n}")
    rng = np.random.default_rng(seed)
    y = _balanced_labels(n, family.num_classes, rng)
    raw = sample_family(family, y, rng)
    a, t = affine(dom, family.input_dim)
    x = raw @ a.T + t
    x = x + dom.noise * rng.standard_normal(x.shape)
    y = flip_labels(y, family.num_classes, family.label_flip, rng)
    return LabeledSet(x, one_hot(y, family.num_classes), domain_id, "all", np.arange(n))


def transformed_means(family: TaskFamilySpec, dom: DomainSpec) -> np.ndarray:
    a, t = affine(dom, family.input_dim)
    return family.class_means() @ a.T + t


def bayes_accuracy(family: TaskFamilySpec, dom: DomainSpec, n_mc: int = 100_000,
                   seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo Bayes-optimal accuracy (before label flips) and its standard error.

    gaussian_blobs uses the closed-form posterior (equal priors, shared
    isotropic covariance -> nearest transformed mean). two_arcs approximates
    the posterior by distance to the nearest (transformed) arc.
    """
    rng = np.random.default_rng(seed)
    k = family.num_classes
    y = rng.integers(0, k, size=n_mc)
    a, t = affine(dom, family.input_dim)
    x = sample_family(family, y, rng) @ a.T + t
    x = x + dom.noise * rng.standard_normal(x.shape)
    if family.family == "gaussian_blobs":
        mu = transformed_means(family, dom)
        d2 = ((x[:, None, :] - mu[None, :, :]) ** 2).sum(axis=2)
        pred = d2.argmin(axis=1)
    else:
        theta = np.linspace(0.0, np.pi, 400)
        arcs = []
        for c in range(2):
            pts = _arcs(np.full(theta.size, c), theta, np.ones(theta.size), family.radius)
            arcs.append(pts @ a.T + t)
        d = [np.min(((x[:, None, :] - arc[None, :, :]) ** 2).sum(axis=2), axis=1) for arc in arcs]
        pred = (d[1] < d[0]).astype(int)
    correct = (pred == y).astype(np.float64)
    acc = float(correct.mean())
    return acc, float(np.sqrt(acc * (1.0 - acc) / n_mc))


def gaussian_two_class_bayes(separation: float, sigma: float = 1.0) -> float:
    """Closed form for means +-separation/2 along one axis: Phi(separation / (2 sigma))."""
    return float(norm.cdf(separation / (2.0 * sigma)))


def split(data: LabeledSet, fractions: Sequence[float] = (0.7, 0.15, 0.15),
          seed: int = 0) -> tuple[LabeledSet, LabeledSet, LabeledSet]:
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(data)
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(np.floor(n * fr[1] + 1e-9))
    n_test = int(np.floor(n * fr[2] + 1e-9))
    n_train = n - n_val - n_test
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple(data.take(np.sort(p), s) for p, s in zip(parts, SPLITS))


@dataclass
class Episode:
    support: LabeledSet
    query: LabeledSet
    domain_id: str
    task_id: int


def sample_task_domain(family: TaskFamilySpec, rng: np.random.Generator,
                       base: DomainSpec = DomainSpec()) -> DomainSpec:
    """A fresh task: the base domain with a random rotation and translation offset."""
    d = family.input_dim
    base_t = np.array(base.translation) if base.translation else np.zeros(d)
    phi = base.rotation + rng.uniform(-family.task_rotation, family.task_rotation)
    t = base_t + family.task_translation * rng.standard_normal(d)
    return DomainSpec(phi, tuple(t), base.scale, base.noise)


def sample_episode(family: TaskFamilySpec, rng: np.random.Generator, n_support: int, n_query: int,
                   task_id: int = 0, base: DomainSpec = DomainSpec()) -> Episode:
    if n_support < 1 or n_query < 1:
        raise ValueError(f"support and query counts must be >= 1, got {n_support}, {n_query}")
    dom = sample_task_domain(family, rng, base)
    n = n_support + n_query
    y = _balanced_labels(n, family.num_classes, rng)
    a, t = affine(dom, family.input_dim)
    x = sample_family(family, y, rng) @ a.T + t
    x = x + dom.noise * rng.standard_normal(x.shape)
    y = flip_labels(y, family.num_classes, family.label_flip, rng)
    pool = LabeledSet(x, one_hot(y, family.num_classes), f"task{task_id}", "all", np.arange(n))
    return Episode(pool.take(np.arange(n_support), "support"),
                   pool.take(np.arange(n_support, n), "query"), pool.domain_id, task_id)


class TaskSampler:
    """Episodes are a pure function of (seed, call index)."""

    def __init__(self, family: TaskFamilySpec, seed: int, n_support: int, n_query: int,
                 base: DomainSpec = DomainSpec()):
        self.family = family
        self.seed = seed
        self.n_support = n_support
        self.n_query = n_query
        self.base = base
        self.calls = 0

    def episode(self, index: int) -> Episode:
        rng = np.random.default_rng([self.seed, index])
        return sample_episode(self.family, rng, self.n_support, self.n_query, index, self.base)

    def sample(self, count: int) -> list[Episode]:
        out = [self.episode(self.calls + i) for i in range(count)]
        self.calls += count
        return out


def inject_noise(data: LabeledSet, sigma_x: float, rho_y: float, seed: int) -> LabeledSet:
    if sigma_x < 0:
        raise ValueError(f"sigma_x must be non-negative, got {sigma_x}")
    if not 0 <= rho_y < 0.5:
        raise ValueError(f"rho_y must lie in [0, 0.5), got {rho_y}")
    if sigma_x == 0 and rho_y == 0:
        return LabeledSet(data.inputs.copy(), data.labels.copy(), data.domain_id, data.split,
                          None if data.index is None else data.index.copy())
    rng = np.random.default_rng(seed)
    x = data.inputs + sigma_x * rng.standard_normal(data.inputs.shape)
    y = flip_labels(data.targets, data.num_classes, rho_y, rng)
    return LabeledSet(x, one_hot(y, data.num_classes), data.domain_id, data.split, data.index)


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> Standardizer:
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 0, std, 1.0))

    def apply(self, data: LabeledSet) -> LabeledSet:
        return LabeledSet((data.inputs - self.mean) / self.std, data.labels, data.domain_id,
                          data.split, data.index)


def to_csv(sets: Sequence[LabeledSet]) -> str:
    """Rows ``x0..x{d-1},label,domain,split``; floats keep 17 significant digits."""
    d = sets[0].inputs.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{i}" for i in range(d)] + ["label", "domain", "split"])
    for s in sets:
        for x, y in zip(s.inputs, s.targets):
            w.writerow([f"{v:.17g}" for v in x] + [int(y), s.domain_id, s.split])
    return buf.getvalue()


def from_csv(text: str, num_classes: int) -> list[LabeledSet]:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    d = header.index("label")
    groups: dict[tuple[str, str], list] = {}
    for r in body:
        groups.setdefault((r[d + 1], r[d + 2]), []).append(r)
    out = []
    for (dom, sp), rs in groups.items():
        x = np.array([[float(v) for v in r[:d]] for r in rs])
        y = np.array([int(r[d]) for r in rs])
        out.append(LabeledSet(x, one_hot(y, num_classes), dom, sp))
    return out
