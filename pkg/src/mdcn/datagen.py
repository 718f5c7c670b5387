"""Synthetic multi-domain benchmarks with known CATE, and dataset CSV I/O."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import xavier_uniform


class DataValidationError(ValueError):
    pass


class SchemaError(DataValidationError):
    pass


def _frozen(a, dtype=np.float64):
    if a is None:
        return None
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable column store of samples.

    ``y0``, ``y1`` and ``tau`` are ``None`` for real data; individual rows may
    also carry NaN where a value is unknown (for example masked outcomes).
    """

    domain: np.ndarray
    X: np.ndarray
    t: np.ndarray
    y: np.ndarray
    y0: np.ndarray | None = None
    y1: np.ndarray | None = None
    tau: np.ndarray | None = None
    outcome_reads: Counter = field(default_factory=Counter, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "domain", _frozen(self.domain, np.int64))
        object.__setattr__(self, "X", _frozen(np.atleast_2d(self.X)))
        object.__setattr__(self, "t", _frozen(self.t, np.int64))
        for name in ("y", "y0", "y1", "tau"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        n = len(self.domain)
        for name in ("X", "t", "y", "y0", "y1", "tau"):
            col = getattr(self, name)
            if col is not None and len(col) != n:
                raise DataValidationError(f"column {name} has {len(col)} rows, expected {n}")
        if not np.isin(self.t, (0, 1)).all():
            raise DataValidationError("treatment column must contain only 0 and 1")

    def __len__(self):
        return len(self.domain)

    @property
    def n_features(self):
        return self.X.shape[1]

    @property
    def domains(self):
        return tuple(int(d) for d in np.unique(self.domain))

    @property
    def has_truth(self):
        return self.tau is not None

    def rows(self, domain) -> np.ndarray:
        return np.flatnonzero(self.domain == domain)

    def observed_outcomes(self, rows) -> np.ndarray:
        """Observed outcomes for ``rows``; every call is tallied per domain."""
        rows = np.asarray(rows)
        for d, c in zip(*np.unique(self.domain[rows], return_counts=True)):
            self.outcome_reads[int(d)] += int(c)
        return self.y[rows]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        pick = lambda a: None if a is None else a[rows]  # noqa: E731
        return Dataset(self.domain[rows], self.X[rows], self.t[rows], self.y[rows],
                       pick(self.y0), pick(self.y1), pick(self.tau))

    def mask_outcomes(self, domain) -> "Dataset":
        """Copy with every outcome column of ``domain`` replaced by NaN."""
        m = self.domain == domain

        def blank(a):
            if a is None:
                return None
            a = a.copy()
            a[m] = np.nan
            return a

        return Dataset(self.domain, self.X, self.t, blank(self.y), blank(self.y0), blank(self.y1), blank(self.tau))

    def validate(self, unlabeled=()):
        """Check that each labeled domain has both treatment arms.

        Treatment assignment must be probabilistic within every domain, so a
        domain with only one arm cannot be used as a source.
        """
        for d in self.domains:
            if d in unlabeled:
                continue
            arms = set(np.unique(self.t[self.domain == d]).tolist())
            if arms != {0, 1}:
                missing = ({0, 1} - arms).pop()
                raise DataValidationError(
                    f"domain {d} has no samples with t={missing}; every domain needs both "
                    "treatment arms (treatment probability bounded away from 0 and 1)")
        return self


# -- generators ------------------------------------------------------------------

@dataclass(frozen=True)
class CircularConfig:
    n_domains: int = 10
    samples_per_domain: int = 2000
    noise_sd: float = 1.0
    seed: int = 0
    angle_step: float = math.pi / 10


def _logistic(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def propensity(X) -> np.ndarray:
    """P(T=1|x) = 1 / (1 + exp(-0.5 x1 - 0.5 x2 - 2 x3))."""
    X = np.asarray(X)
    return _logistic(0.5 * X[:, 0] + 0.5 * X[:, 1] + 2.0 * X[:, 2])


def circular_angle(s, config: CircularConfig = CircularConfig()):
    return s * config.angle_step


def circular_means(X, angle):
    """Noiseless potential-outcome means (mu0, mu1) for circular domain ``angle``."""
    x1, x2, x3 = X[:, 0], X[:, 1], X[:, 2]
    mu0 = 1.5 * (np.sin(x1 + angle) + np.cos(x2 + x3 + angle))
    mu1 = 1.5 * (np.cos(x1 + angle) + np.sin(x2 + x3 + angle))
    return mu0, mu1


def _child_rng(seed, s):
    return np.random.default_rng([int(seed), int(s)])


def _assemble(parts):
    cols = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    return Dataset(cols["domain"], cols["X"], cols["t"], cols["y"], cols["y0"], cols["y1"], cols["tau"])


def gen_circular(config: CircularConfig = CircularConfig()) -> Dataset:
    """Ten domains whose feature means sit on a circle of radius 4.

    Domain ``s`` has angle ``s * angle_step``; features are N([4 sin a, 4 cos a, 0], I),
    outcomes shift with the angle, and treatment follows :func:`propensity`.
    """
    n = config.samples_per_domain
    parts = []
    for s in range(config.n_domains):
        rng = _child_rng(config.seed, s)
        a = circular_angle(s, config)
        center = np.array([4.0 * math.sin(a), 4.0 * math.cos(a), 0.0])
        X = center + rng.standard_normal((n, 3))
        t = (rng.uniform(size=n) < propensity(X)).astype(np.int64)
        mu0, mu1 = circular_means(X, a)
        y0 = mu0 + config.noise_sd * rng.standard_normal(n)
        y1 = mu1 + config.noise_sd * rng.standard_normal(n)
        y = np.where(t == 1, y1, y0)
        parts.append(dict(domain=np.full(n, s), X=X, t=t, y=y, y0=y0, y1=y1, tau=mu1 - mu0))
    return _assemble(parts)


@dataclass(frozen=True)
class SemiSynthConfig:
    n_domains: int = 21
    dim: int = 15
    samples_per_domain: int = 1000
    center_radius: float = 4.0
    spread: float = 1.0
    n_networks: int = 15
    hidden: int = 15
    noise_sd: float = 1.0
    seed: int = 0


def shift_grid(n: int = 15) -> np.ndarray:
    """Offsets 3j/n - 1.5 for j = 1..n: evenly spaced inside [-1.5, 1.5]."""
    j = np.arange(1, n + 1)
    return 3.0 * j / n - 1.5


class MiniNetworks:
    """Shifted copies of one tanh network; evaluates the summed outputs per arm."""

    def __init__(self, config: SemiSynthConfig):
        rng = np.random.default_rng([config.seed, 10_000])
        d, h, k = config.dim, config.hidden, config.n_networks
        offsets = shift_grid(k)
        self.offsets = (offsets, rng.permutation(offsets))
        self.W1, self.W2, self.b1, self.b2 = [], [], [], []
        for arm in (0, 1):
            base1 = xavier_uniform(rng, d, h)
            base2 = xavier_uniform(rng, h, 1)[:, 0]
            off = self.offsets[arm]
            self.W1.append(base1[None, :, :] + off[:, None, None])
            self.W2.append(base2[None, :] + off[:, None])
            self.b1.append(np.zeros((k, h)))
            self.b2.append(np.zeros(k))

    def outputs(self, X, arm):
        """Per-network outputs, shape (n, n_networks)."""
        hidden = np.tanh(np.einsum("nd,kdh->nkh", X, self.W1[arm]) + self.b1[arm][None])
        return np.einsum("nkh,kh->nk", hidden, self.W2[arm]) + self.b2[arm][None]

    def total(self, X, arm):
        return self.outputs(X, arm).sum(axis=1)


def semisynth_centers(config: SemiSynthConfig = SemiSynthConfig()) -> np.ndarray:
    """Domain centers on a circle in the first two coordinates, zero elsewhere."""
    ang = 2.0 * math.pi * np.arange(config.n_domains) / config.n_domains
    c = np.zeros((config.n_domains, config.dim))
    c[:, 0] = config.center_radius * np.sin(ang)
    c[:, 1] = config.center_radius * np.cos(ang)
    return c


def semisynth_means(X, center, nets: MiniNetworks):
    """Noiseless (mu0, mu1): sigmoid(first center coordinate) times the summed mini-networks."""
    gate = 1.0 / (1.0 + math.exp(-float(center[0])))
    return gate * nets.total(X, 0), gate * nets.total(X, 1)


def gen_semisynth(config: SemiSynthConfig = SemiSynthConfig()) -> Dataset:
    if config.dim < 3:
        raise ValueError("semi-synthetic embeddings need at least 3 dimensions for the propensity")
    nets = MiniNetworks(config)
    centers = semisynth_centers(config)
    n = config.samples_per_domain
    parts = []
    for s in range(config.n_domains):
        rng = _child_rng(config.seed, s)
        X = centers[s] + config.spread * rng.standard_normal((n, config.dim))
        t = (rng.uniform(size=n) < propensity(X)).astype(np.int64)
        mu0, mu1 = semisynth_means(X, centers[s], nets)
        y0 = mu0 + config.noise_sd * rng.standard_normal(n)
        y1 = mu1 + config.noise_sd * rng.standard_normal(n)
        y = np.where(t == 1, y1, y0)
        parts.append(dict(domain=np.full(n, s), X=X, t=t, y=y, y0=y0, y1=y1, tau=mu1 - mu0))
    return _assemble(parts)


# -- CSV I/O ----------------------------------------------------------------------

_FIXED = ["domain", "t", "y", "y0", "y1", "tau"]


def _num(v) -> str:
    v = float(v)
    return "" if math.isnan(v) else format(v, ".17g")


def write_dataset(dataset: Dataset, path) -> None:
    p = dataset.n_features
    header = _FIXED + [f"x{j}" for j in range(p)]
    n = len(dataset)
    empty = np.full(n, np.nan)
    cols = [dataset.y, dataset.y0 if dataset.y0 is not None else empty,
            dataset.y1 if dataset.y1 is not None else empty,
            dataset.tau if dataset.tau is not None else empty]
    lines = [",".join(header)]
    for i in range(n):
        row = [str(int(dataset.domain[i])), str(int(dataset.t[i]))]
        row += [_num(c[i]) for c in cols]
        row += [_num(v) for v in dataset.X[i]]
        lines.append(",".join(row))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    tmp.replace(path)


def read_dataset(path, validate: bool = True) -> Dataset:
    with open(path, encoding="utf-8", newline="") as fh:
        lines = fh.read().split("\n")
    if not lines or not lines[0]:
        raise SchemaError(f"{path}: empty file; expected header {','.join(_FIXED)},x0,...")
    header = lines[0].rstrip("\r").split(",")
    p = len(header) - len(_FIXED)
    expected = _FIXED + [f"x{j}" for j in range(max(p, 0))]
    if p < 1 or header != expected:
        raise SchemaError(f"{path}: header {','.join(header)!r} does not match expected columns "
                          f"{','.join(_FIXED)},x0,...,x{{p-1}}")
    domain, t, rest = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        fields = line.rstrip("\r").split(",")
        if len(fields) != len(header):
            raise DataValidationError(f"{path}:{lineno}: expected {len(header)} fields, got {len(fields)}")
        try:
            domain.append(int(fields[0]))
            t.append(int(fields[1]))
            rest.append([float(v) if v != "" else math.nan for v in fields[2:]])
        except ValueError as exc:
            raise DataValidationError(f"{path}:{lineno}: malformed value ({exc})") from None
    vals = np.array(rest, dtype=np.float64).reshape(len(rest), len(header) - 2)
    y, y0, y1, tau = (vals[:, i] for i in range(4))
    opt = lambda a: None if np.isnan(a).all() else a  # noqa: E731
    ds = Dataset(np.array(domain), vals[:, 4:], np.array(t), y, opt(y0), opt(y1), opt(tau))
    if validate:
        ds.validate()
    return ds
