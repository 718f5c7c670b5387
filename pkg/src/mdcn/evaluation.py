"""CATE estimation, PEHE, paired significance tests and result tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import norm, rankdata

from .losses import off_diagonal_to_full, softmax_rows
from .networks import ModelBundle, OracleModel, embed, predict, _atomic_write

EXACT_MAX_N = 20
RESULT_COLUMNS = ("variant", "target", "seed", "pehe")


# -- CATE and PEHE ---------------------------------------------------------------

def _bundle_of(model):
    return getattr(model, "bundle", model)


def estimate_cate(model, X) -> np.ndarray:
    """Estimated treatment effect ``h1(phi(x)) - h0(phi(x))`` for each row of ``X``.

    ``model`` may be a trained model, a bare bundle, or an oracle model that
    stores true effects.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"X must be 2-D, got shape {X.shape}")
    if isinstance(model, OracleModel):
        return model.cate(X)
    bundle = _bundle_of(model)
    if not isinstance(bundle, ModelBundle):
        raise TypeError(f"cannot estimate effects with {type(model).__name__}")
    p = bundle.embedder.spec.input_dim
    if X.shape[1] != p:
        raise ValueError(f"X has {X.shape[1]} features, model expects {p}")
    Phi = embed(bundle, X)
    return predict(bundle, Phi, 1) - predict(bundle, Phi, 0)


def pehe(tau_hat, tau_true) -> float:
    """Root mean squared error between estimated and true effects."""
    a = np.asarray(tau_hat, dtype=np.float64).reshape(-1)
    b = np.asarray(tau_true, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ValueError("pehe of an empty sample is undefined")
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} estimates vs {b.size} true effects")
    d = a - b
    return float(math.sqrt(float(np.mean(d * d))))


@dataclass(frozen=True)
class PeheResult:
    variant: str
    target: int
    seed: int
    pehe: float
    n: int = 0

    def __post_init__(self):
        if not (self.pehe >= 0):
            raise ValueError(f"PEHE must be nonnegative, got {self.pehe}")


def evaluate(model, dataset, target, variant=None, seed=None) -> PeheResult:
    """PEHE of ``model`` on every row of domain ``target``."""
    if not dataset.has_truth:
        raise ValueError("dataset carries no true effects; cannot compute PEHE")
    rows = dataset.rows(target)
    if len(rows) == 0:
        raise ValueError(f"domain {target} has no rows")
    value = pehe(estimate_cate(model, dataset.X[rows]), dataset.tau[rows])
    bundle = _bundle_of(model)
    meta = getattr(bundle, "meta", {}) or {}
    if variant is None:
        variant = meta.get("variant", "oracle" if isinstance(model, OracleModel) else "unknown")
    if seed is None:
        seed = getattr(bundle, "seed", 0)
    return PeheResult(str(variant), int(target), int(seed), value, len(rows))


# -- results files -----------------------------------------------------------------

def read_results(path) -> list[PeheResult]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(header) != RESULT_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(RESULT_COLUMNS)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                v, tgt, sd, val = row
                out.append(PeheResult(v, int(tgt), int(sd), float(val)))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed result row ({exc})") from None
    return out


def write_results(results, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in results:
        w.writerow([r.variant, r.target, r.seed, format(r.pehe, ".17g")])
    _atomic_write(path, buf.getvalue())


def append_result(result: PeheResult, path) -> list[PeheResult]:
    """Add ``result`` to the results file, replacing any row with the same key."""
    rows = read_results(path)
    key = (result.variant, result.target, result.seed)
    for i, r in enumerate(rows):
        if (r.variant, r.target, r.seed) == key:
            rows[i] = result
            break
    else:
        rows.append(result)
    write_results(rows, path)
    return rows


# -- summary table -------------------------------------------------------------------

def _mean_se(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return None
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size >= 2 else float("nan")
    return float(v.mean()), se


@dataclass
class SummaryTable:
    """Mean and standard error of PEHE per target (rows) and variant (columns).

    Cells are ``(mean, se)`` tuples or ``None`` when no result exists.
    """

    variants: list
    targets: list
    cells: dict
    overall: dict

    def cell(self, target, variant):
        if target == "overall":
            return self.overall.get(variant)
        return self.cells.get((target, variant))

    @staticmethod
    def _fmt(c, digits):
        if c is None:
            return "absent"
        m, se = c
        se_s = "n/a" if math.isnan(se) else f"{se:.{digits}f}"
        return f"{m:.{digits}f} ± {se_s}"

    def to_text(self, digits: int = 2) -> str:
        header = ["target"] + list(self.variants)
        body = [[str(t)] + [self._fmt(self.cells.get((t, v)), digits) for v in self.variants]
                for t in self.targets]
        body.append(["overall"] + [self._fmt(self.overall.get(v), digits) for v in self.variants])
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        lines = ["  ".join(s.rjust(w) for s, w in zip(r, widths)).rstrip() for r in [header] + body]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["target", "variant", "mean", "se"])
        for t in list(self.targets) + ["overall"]:
            for v in self.variants:
                c = self.cell(t, v)
                if c is None:
                    w.writerow([t, v, "", ""])
                else:
                    w.writerow([t, v, format(c[0], ".17g"), "" if math.isnan(c[1]) else format(c[1], ".17g")])
        return buf.getvalue()


def summary_table(results, variants=None) -> SummaryTable:
    """Aggregate results across seeds.

    The overall mean is the mean of per-target means; its standard error is
    taken over per-seed overall means, using only seeds that cover every
    target. Missing cells stay absent and are never imputed.
    """
    results = list(results)
    if variants is None:
        variants = sorted({r.variant for r in results})
    targets = sorted({r.target for r in results})
    by_cell = {}
    for r in results:
        by_cell.setdefault((r.target, r.variant), {})[r.seed] = r.pehe
    cells = {}
    for key, seeds in by_cell.items():
        cells[key] = _mean_se([seeds[s] for s in sorted(seeds)])
    overall = {}
    for v in variants:
        present = [t for t in targets if (t, v) in cells]
        if not present:
            continue
        mean = float(np.mean([cells[(t, v)][0] for t in present]))
        seeds = sorted({s for t in targets for s in by_cell.get((t, v), {})})
        per_seed = [np.mean([by_cell[(t, v)][s] for t in targets])
                    for s in seeds if all(s in by_cell.get((t, v), {}) for t in targets)]
        se = _mean_se(per_seed)[1] if len(per_seed) >= 2 else float("nan")
        overall[v] = (mean, se)
    return SummaryTable(list(variants), targets, cells, overall)


# -- Wilcoxon signed-rank ----------------------------------------------------------------

@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float      # sum of ranks of positive differences
    n: int                # pairs left after dropping zero differences
    p_two_sided: float
    p_greater: float      # P(T+ >= observed) under the null
    p_less: float         # P(T+ <= observed) under the null
    method: str           # "exact" or "normal"


def _signed_ranks(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"paired samples differ in length: {a.size} vs {b.size}")
    if a.size < 5:
        raise ValueError(f"need at least 5 pairs, got {a.size}")
    d = a - b
    d = d[d != 0]
    if d.size == 0:
        raise ValueError("degenerate pairs: every difference is zero")
    return d, rankdata(np.abs(d))


def exact_null_counts(doubled_ranks) -> np.ndarray:
    """Number of sign patterns giving each value of twice the positive-rank sum."""
    r = [int(x) for x in doubled_ranks]
    counts = np.zeros(sum(r) + 1, dtype=np.float64)
    counts[0] = 1.0
    for x in r:
        counts[x:] = counts[x:] + counts[:-x]
    return counts


def wilcoxon_signed_rank(a, b, exact_max_n: int = EXACT_MAX_N) -> WilcoxonResult:
    """Wilcoxon signed-rank test of ``a - b`` against a symmetric null at 0.

    Zero differences are dropped and ties get midranks. Up to ``exact_max_n``
    nonzero pairs the null distribution is enumerated exactly; beyond that a
    normal approximation with tie-corrected variance is used.
    """
    d, ranks = _signed_ranks(a, b)
    n = d.size
    t_plus = float(ranks[d > 0].sum())
    if n <= exact_max_n:
        doubled = np.rint(2 * ranks).astype(int)
        counts = exact_null_counts(doubled)
        total = counts.sum()
        k = int(round(2 * t_plus))
        p_greater = float(counts[k:].sum() / total)
        p_less = float(counts[:k + 1].sum() / total)
        method = "exact"
    else:
        mu = n * (n + 1) / 4.0
        _, tie_sizes = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_sizes ** 3 - tie_sizes)) / 48.0
        z = (t_plus - mu) / math.sqrt(var)
        p_greater = float(norm.sf(z))
        p_less = float(norm.cdf(z))
        method = "normal"
    p_two = min(1.0, 2.0 * min(p_greater, p_less))
    return WilcoxonResult(t_plus, n, p_two, p_greater, p_less, method)


# -- similarity matrices ------------------------------------------------------------------

@dataclass
class SimilarityMatrix:
    domains: tuple
    values: np.ndarray
    source: str = "learned"   # "learned" weights or "projection" surrogate

    def __post_init__(self):
        v = self.values
        if not np.array_equal(v, v.T):
            raise ValueError("similarity matrix must be exactly symmetric")
        if not np.all(np.diag(v) == 1.0):
            raise ValueError("similarity matrix must have a unit diagonal")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["domain"] + [str(d) for d in self.domains])
        for d, row in zip(self.domains, self.values):
            w.writerow([str(d)] + [format(float(x), ".17g") for x in row])
        return buf.getvalue()

    def save(self, path) -> None:
        _atomic_write(path, self.to_csv())


def similarity_from_weights(weights: np.ndarray) -> np.ndarray:
    """Symmetrize a weight matrix (S x S, or S x (S-1) off-diagonal) and set the diagonal to 1."""
    W = np.asarray(weights, dtype=np.float64)
    if W.shape[0] == W.shape[1] + 1:
        W = off_diagonal_to_full(W)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError(f"weights must be S x S or S x (S-1), got {W.shape}")
    M = 0.5 * (W + W.T)
    M = 0.5 * (M + M.T)
    np.fill_diagonal(M, 1.0)
    return M


def first_component(Phi: np.ndarray) -> np.ndarray:
    """Scores on the first principal axis, sign fixed so the largest loading is positive."""
    C = Phi - Phi.mean(axis=0)
    _, _, vt = np.linalg.svd(C, full_matrices=False)
    v = vt[0]
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    return C @ v


def surrogate_weights(bundle: ModelBundle, X, domain) -> np.ndarray:
    """Domain weights (S x (S-1)) from a one-dimensional projection of the embedding.

    Distances are absolute gaps between per-domain mean projections, turned
    into weights by a row softmax of their negatives.
    """
    domain = np.asarray(domain)
    z = first_component(embed(bundle, X))
    means = np.array([z[domain == d].mean() for d in bundle.domains])
    S = len(means)
    gaps = np.abs(means[:, None] - means[None, :])
    off = np.array([[gaps[s, i] for i in range(S) if i != s] for s in range(S)])
    return softmax_rows(-off)


def export_similarity(model, dataset=None, path=None) -> SimilarityMatrix:
    """Similarity between domains from learned weights, or from a surrogate
    projection when the model carries none (``dataset`` is then required)."""
    state = getattr(model, "state", None)
    bundle = _bundle_of(model)
    if state is not None:
        sim = SimilarityMatrix(tuple(bundle.domains), similarity_from_weights(state.w), "learned")
    else:
        if dataset is None:
            raise ValueError("model has no learned domain weights; pass the dataset for the surrogate")
        w = surrogate_weights(bundle, dataset.X, dataset.domain)
        sim = SimilarityMatrix(tuple(bundle.domains), similarity_from_weights(w), "projection")
    if path is not None:
        sim.save(path)
    return sim


def top_neighbors(weights: np.ndarray, k: int = 2) -> list[list[int]]:
    """Indices of the ``k`` largest off-diagonal entries per row of a full S x S matrix."""
    W = np.array(weights, dtype=np.float64)
    if W.shape[0] == W.shape[1] + 1:
        W = off_diagonal_to_full(W)
    np.fill_diagonal(W, -np.inf)
    return [list(np.argsort(-row, kind="stable")[:k]) for row in W]
