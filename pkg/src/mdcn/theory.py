"""Exact transport distances on small samples and audits of the error bounds.

Distances are exact only for equal-size uniform empirical distributions, where
an optimal transport plan can be taken to be a permutation. The audits build
instances from function families whose Lipschitz constants are known by
construction.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

ASSIGNMENT_CAP = 256
DEFAULT_TOL = 1e-9


class CertificationError(ValueError):
    """A quantity the bound needs cannot be certified for this instance."""


# -- distributions and functions ----------------------------------------------------

@dataclass(frozen=True)
class DiscreteDist:
    """Uniform distribution over the rows of ``points`` (n x d)."""

    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.ndim == 1:
            p = p[:, None]
        if p.ndim != 2 or p.shape[0] < 1:
            raise ValueError(f"need at least one support point, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("support points must be finite")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]

    def union(self, other: "DiscreteDist") -> "DiscreteDist":
        return DiscreteDist(np.vstack([self.points, other.points]))

    def repeat(self, k: int) -> "DiscreteDist":
        """Same distribution with every support point listed ``k`` times."""
        return DiscreteDist(np.repeat(self.points, k, axis=0))


@dataclass(frozen=True)
class LipschitzFn:
    """A real function on R^d with a Lipschitz constant known by construction."""

    tag: str
    rule: Callable[[np.ndarray], np.ndarray]
    lam: float

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        return np.asarray(self.rule(X), dtype=np.float64).reshape(-1)

    def certified(self) -> float:
        lam = self.lam
        if lam is None or not isinstance(lam, (int, float)) or not math.isfinite(lam) or lam < 0:
            raise CertificationError(f"function {self.tag!r} has no certified Lipschitz constant ({lam!r})")
        return float(lam)

    def __add__(self, other: "LipschitzFn") -> "LipschitzFn":
        f, g = self, other
        return LipschitzFn(f"({f.tag})+({g.tag})", lambda X: f(X) + g(X), _lam_sum(f, g))

    def __sub__(self, other: "LipschitzFn") -> "LipschitzFn":
        f, g = self, other
        return LipschitzFn(f"({f.tag})-({g.tag})", lambda X: f(X) - g(X), _lam_sum(f, g))


def _lam_sum(f, g):
    try:
        return f.certified() + g.certified()
    except CertificationError:
        return None


def affine(a, b: float = 0.0) -> LipschitzFn:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    return LipschitzFn(f"affine(|a|={np.linalg.norm(a):.4g})", lambda X: X @ a + b, float(np.linalg.norm(a)))


def clamped(a, b: float = 0.0, lo: float = -1.0, hi: float = 1.0) -> LipschitzFn:
    """``clip(a.x + b, lo, hi)``; clamping never increases the Lipschitz constant."""
    if lo > hi:
        raise ValueError(f"empty clamp range [{lo}, {hi}]")
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    return LipschitzFn(f"clamped(|a|={np.linalg.norm(a):.4g})",
                       lambda X: np.clip(X @ a + b, lo, hi), float(np.linalg.norm(a)))


def check_lipschitz(f: LipschitzFn, points, rng=None, n_pairs: int = 200, tol: float = 1e-9) -> float:
    """Largest observed ratio ``|f(x)-f(y)| / |x-y|`` on random pairs; raises if it exceeds the certificate."""
    lam = f.certified()
    P = DiscreteDist(points).points
    rng = np.random.default_rng(0) if rng is None else rng
    i = rng.integers(0, P.shape[0], n_pairs)
    j = rng.integers(0, P.shape[0], n_pairs)
    dist = np.linalg.norm(P[i] - P[j], axis=1)
    keep = dist > 0
    if not keep.any():
        return 0.0
    ratio = np.abs(f(P[i[keep]]) - f(P[j[keep]])) / dist[keep]
    worst = float(ratio.max())
    if worst > lam * (1 + tol) + tol:
        raise CertificationError(f"{f.tag}: observed ratio {worst} exceeds certified constant {lam}")
    return worst


# -- exact Wasserstein-1 ------------------------------------------------------------

def _as_dist(x) -> DiscreteDist:
    return x if isinstance(x, DiscreteDist) else DiscreteDist(x)


def w1_exact_1d(a, b) -> float:
    """W1 between equal-size 1-D empiricals: mean gap between sorted samples."""
    a, b = _as_dist(a), _as_dist(b)
    if a.d != 1 or b.d != 1:
        raise ValueError(f"w1_exact_1d needs 1-D samples, got d={a.d} and d={b.d}")
    if a.n != b.n:
        raise ValueError(f"sample sizes differ ({a.n} vs {b.n}); use w1_exact_assignment on equal-size samples")
    gaps = np.abs(np.sort(a.points[:, 0]) - np.sort(b.points[:, 0]))
    return math.fsum(gaps) / a.n


def _canonical_key(d: DiscreteDist):
    order = np.lexsort(d.points.T[::-1])
    return d.points[order].tobytes()


def w1_exact_assignment(a, b, cap: int = ASSIGNMENT_CAP) -> float:
    """W1 between equal-size uniform empiricals in any dimension.

    Solved as a minimum-cost perfect matching under Euclidean cost. The two
    arguments are put in a canonical order first so the result is exactly
    symmetric.
    """
    a, b = _as_dist(a), _as_dist(b)
    if a.d != b.d:
        raise ValueError(f"dimension mismatch: {a.d} vs {b.d}")
    if a.n != b.n:
        raise ValueError(f"sample sizes differ ({a.n} vs {b.n}); exact matching needs equal sizes")
    if a.n > cap:
        raise ValueError(f"{a.n} points exceeds the assignment cap of {cap}; subsample both sides first")
    if _canonical_key(b) < _canonical_key(a):
        a, b = b, a
    cost = cdist(a.points, b.points)
    rows, cols = linear_sum_assignment(cost)
    return math.fsum(cost[rows, cols]) / a.n


def w1_to_mixture(target: DiscreteDist, sources, weights, cap: int = ASSIGNMENT_CAP) -> float:
    """W1 between ``target`` and a weighted mixture of equal-size sources.

    Exact for one-hot weights and for uniform weights (where the mixture is
    the uniform distribution on the pooled sources and the target is
    replicated to the same size).
    """
    sources = [_as_dist(s) for s in sources]
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(sources),):
        raise ValueError(f"need {len(sources)} weights, got shape {w.shape}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ValueError("weights must be nonnegative and sum to 1")
    hot = np.flatnonzero(w > 0)
    if len(hot) == 1:
        return w1_exact_assignment(target, sources[hot[0]], cap)
    if not np.allclose(w, 1.0 / len(sources), rtol=0, atol=1e-15):
        raise ValueError("only one-hot or uniform weights give an exact matching problem")
    sizes = {s.n for s in sources}
    if len(sizes) != 1:
        raise ValueError(f"uniform mixture needs equal-size sources, got sizes {sorted(sizes)}")
    pooled = DiscreteDist(np.vstack([s.points for s in sources]))
    if pooled.n % target.n:
        raise ValueError(f"target size {target.n} does not divide pooled size {pooled.n}")
    return w1_exact_assignment(target.repeat(pooled.n // target.n), pooled, cap)


def prob_discrepancy(h: LipschitzFn, h2: LipschitzFn, D, weights=None) -> float:
    """Mean absolute difference of two functions over the support of ``D``."""
    D = _as_dist(D)
    diff = np.abs(h(D.points) - h2(D.points))
    if weights is None:
        return math.fsum(diff) / D.n
    weights = np.asarray(weights, dtype=np.float64)
    return float(np.dot(weights, diff))


def _mixture_discrepancy(h, g, D0: DiscreteDist, D1: DiscreteDist, p1: float) -> float:
    return (1.0 - p1) * prob_discrepancy(h, g, D0) + p1 * prob_discrepancy(h, g, D1)


# -- bound reports -------------------------------------------------------------------

@dataclass
class BoundReport:
    kind: str
    lhs: float
    rhs: float
    components: dict = field(default_factory=dict)
    seed: int | None = None

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    def violated(self, tol: float = DEFAULT_TOL) -> bool:
        return self.slack < -tol


@dataclass
class BTInstance:
    """One domain split into control and treated groups with known functions."""

    h0: LipschitzFn
    h1: LipschitzFn
    g0: LipschitzFn
    g1: LipschitzFn
    D0: DiscreteDist
    D1: DiscreteDist
    p1: float
    seed: int | None = None


def _lambdas(hs, gs):
    lam = max(f.certified() for f in hs)
    lam_star = max(f.certified() for f in gs)
    return lam, lam_star


def verify_prop_bt(inst: BTInstance) -> BoundReport:
    """Audit the between-treatment bound on one domain.

    The full-domain error of both heads is compared with their error on the
    observed arm plus ``(lam + lam*) * W1(control, treated)``.
    """
    lam, lam_star = _lambdas((inst.h0, inst.h1), (inst.g0, inst.g1))
    if not 0.0 <= inst.p1 <= 1.0:
        raise ValueError(f"treated share must lie in [0, 1], got {inst.p1}")
    lhs = (_mixture_discrepancy(inst.h0, inst.g0, inst.D0, inst.D1, inst.p1)
           + _mixture_discrepancy(inst.h1, inst.g1, inst.D0, inst.D1, inst.p1))
    observed = prob_discrepancy(inst.h0, inst.g0, inst.D0) + prob_discrepancy(inst.h1, inst.g1, inst.D1)
    w1 = w1_exact_assignment(inst.D0, inst.D1)
    rhs = observed + (lam + lam_star) * w1
    return BoundReport("prop-bt", lhs, rhs, {
        "observed_error": observed, "w1_between": w1, "lam": lam, "lam_star": lam_star,
        "gamma_star": 0.0}, inst.seed)


@dataclass
class TheoremInstance:
    """Labeled source domains (control and treated groups of equal size) and a target.

    ``g0`` and ``g1`` hold one true function per domain, sources first and the
    target last.
    """

    h0: LipschitzFn
    h1: LipschitzFn
    g0: list
    g1: list
    sources: list          # list of (D0, D1) pairs
    target: DiscreteDist
    seed: int | None = None


def _shared_function(fns, inst: TheoremInstance):
    first = fns[0]
    if all(f is first for f in fns):
        return first
    pts = np.vstack([inst.target.points] + [np.vstack([a.points, b.points]) for a, b in inst.sources])
    ref = first(pts)
    if all(np.array_equal(f(pts), ref) for f in fns[1:]):
        return first
    raise CertificationError("γ* not certifiable: true outcome functions differ across domains")


def theorem_weights(n_sources: int, mode: str, k: int = 0) -> np.ndarray:
    if mode == "uniform":
        return np.full(n_sources, 1.0 / n_sources)
    if mode == "one-hot":
        if not 0 <= k < n_sources:
            raise ValueError(f"one-hot index {k} out of range for {n_sources} sources")
        w = np.zeros(n_sources)
        w[k] = 1.0
        return w
    raise ValueError(f"weight mode must be 'uniform' or 'one-hot', got {mode!r}")


def verify_thm_bound(inst: TheoremInstance, mode: str = "uniform", k: int = 0) -> BoundReport:
    """Audit the target-domain bound for a given source weighting.

    Only instances whose true functions are shared by all domains are
    accepted: then the shared function itself attains zero joint discrepancy,
    so the irreducible terms are exactly zero.
    """
    S1 = len(inst.sources)
    if len(inst.g0) != S1 + 1 or len(inst.g1) != S1 + 1:
        raise ValueError(f"need {S1 + 1} true functions per arm (sources then target)")
    if any(a.n != b.n for a, b in inst.sources):
        raise ValueError("control and treated groups must have equal sizes")
    g0 = _shared_function(inst.g0, inst)
    g1 = _shared_function(inst.g1, inst)
    lam, lam_star = _lambdas((inst.h0, inst.h1), list(inst.g0) + list(inst.g1))
    w = theorem_weights(S1, mode, k)

    lhs = prob_discrepancy(inst.h0, g0, inst.target) + prob_discrepancy(inst.h1, g1, inst.target)
    domains = [a.union(b) for a, b in inst.sources]
    w1_cd = w1_to_mixture(inst.target, domains, w)
    w1_bt = [w1_exact_assignment(a, b) for a, b in inst.sources]
    observed = [prob_discrepancy(inst.h0, g0, a) + prob_discrepancy(inst.h1, g1, b) for a, b in inst.sources]
    w1_bt_sum = float(np.dot(w, w1_bt))
    observed_sum = float(np.dot(w, observed))
    gamma_star = 0.0
    rhs = (lam + lam_star) * (2.0 * w1_cd + w1_bt_sum) + observed_sum + gamma_star
    return BoundReport(f"theorem-{mode}", lhs, rhs, {
        "observed_error": observed_sum, "w1_between": w1_bt_sum, "w1_cross": w1_cd,
        "lam": lam, "lam_star": lam_star, "gamma_star": gamma_star}, inst.seed)


# -- random instances -----------------------------------------------------------------

def random_function(rng: np.random.Generator, d: int, scale: float = 1.0) -> LipschitzFn:
    """Affine or clamped-affine function with random slope and offset."""
    a = rng.normal(0.0, scale, d)
    b = float(rng.normal())
    if rng.uniform() < 0.5:
        return affine(a, b)
    lo = float(rng.uniform(-2.0, 0.0))
    return clamped(a, b, lo, lo + float(rng.uniform(0.1, 3.0)))


def random_bt_instance(seed: int, index: int = 0, max_n: int = 32) -> BTInstance:
    rng = np.random.default_rng([seed, index])
    d = int(rng.integers(1, 4))
    n = int(rng.integers(1, max_n + 1))
    shift = rng.normal(0.0, 1.5, d)
    D0 = DiscreteDist(rng.normal(0.0, 1.0, (n, d)))
    D1 = DiscreteDist(rng.normal(0.0, 1.0, (n, d)) + shift)
    fns = [random_function(rng, d) for _ in range(4)]
    return BTInstance(*fns, D0, D1, float(rng.uniform(0.05, 0.95)), seed=index)


def random_theorem_instance(seed: int, index: int = 0, max_sources: int = 4, max_n: int = 16) -> TheoremInstance:
    rng = np.random.default_rng([seed, index])
    d = int(rng.integers(1, 4))
    S1 = int(rng.integers(1, max_sources + 1))
    n = int(rng.integers(1, max_n + 1))
    sources = []
    for _ in range(S1):
        center = rng.normal(0.0, 2.0, d)
        shift = rng.normal(0.0, 1.0, d)
        sources.append((DiscreteDist(center + rng.normal(0.0, 1.0, (n, d))),
                        DiscreteDist(center + shift + rng.normal(0.0, 1.0, (n, d)))))
    target = DiscreteDist(rng.normal(0.0, 2.0, d) + rng.normal(0.0, 1.0, (2 * n, d)))
    g0, g1 = random_function(rng, d), random_function(rng, d)
    h0, h1 = random_function(rng, d), random_function(rng, d)
    return TheoremInstance(h0, h1, [g0] * (S1 + 1), [g1] * (S1 + 1), sources, target, seed=index)


REPORT_COLUMNS = ("instance", "kind", "lhs", "rhs", "slack", "observed_error", "w1_between",
                  "w1_cross", "lam", "lam_star", "gamma_star", "violated")


def audit(mode: str, n_instances: int, seed: int = 0, rhs_reduction: float = 0.0,
          tol: float = DEFAULT_TOL) -> list[BoundReport]:
    """Verify ``n_instances`` random instances of ``mode`` ('prop-bt' or 'theorem').

    Theorem instances are audited under uniform weights and under a one-hot
    weight on a randomly chosen source. ``rhs_reduction`` is subtracted from
    every right-hand side to build a negative control.
    """
    if n_instances < 1:
        raise ValueError(f"n_instances must be positive, got {n_instances}")
    reports = []
    for i in range(n_instances):
        if mode == "prop-bt":
            reports.append(verify_prop_bt(random_bt_instance(seed, i)))
        elif mode == "theorem":
            inst = random_theorem_instance(seed, i)
            k = int(np.random.default_rng([seed, i, 1]).integers(0, len(inst.sources)))
            reports.append(verify_thm_bound(inst, "uniform"))
            reports.append(verify_thm_bound(inst, "one-hot", k))
        else:
            raise ValueError(f"unknown audit mode {mode!r}; choose 'prop-bt' or 'theorem'")
    if rhs_reduction:
        for r in reports:
            r.rhs -= rhs_reduction
            r.components["rhs_reduction"] = rhs_reduction
    return reports


def reports_to_csv(reports, tol: float = DEFAULT_TOL) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        c = r.components
        w.writerow([r.seed, r.kind] + [format(float(v), ".17g") for v in (
            r.lhs, r.rhs, r.slack, c.get("observed_error", 0.0), c.get("w1_between", 0.0),
            c.get("w1_cross", 0.0), c.get("lam", 0.0), c.get("lam_star", 0.0), c.get("gamma_star", 0.0))]
            + [int(r.violated(tol))])
    return buf.getvalue()
