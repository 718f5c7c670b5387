"""Acceptance criteria, one test each; every test records a single pass/fail line.

Criteria 1-3 and 8 read the scaled circular-data sweep. Its records are cached in
acceptance/records.jsonl (see scripts/acceptance_sweep.py); a missing or stale
cache is recomputed here, which takes a few hours on one core.
"""

import importlib.util
import itertools
import math
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import rankdata

from conftest import record_criterion
from mdcn import autodiff as ad
from mdcn import cli
from mdcn import losses as L
from mdcn import theory as TH
from mdcn.datagen import read_dataset
from mdcn.evaluation import read_results, summary_table, wilcoxon_signed_rank
from mdcn.experiments import neighbor_hits
from mdcn.networks import Mlp, MlpSpec

ROOT = Path(__file__).resolve().parents[1]


def _load_sweep_module():
    spec = importlib.util.spec_from_file_location("acceptance_sweep", ROOT / "scripts" / "acceptance_sweep.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


@pytest.fixture(scope="module")
def sweep_records():
    return _load_sweep_module().sweep()


@pytest.fixture(scope="module")
def overall(sweep_records):
    table = summary_table([r.result() for r in sweep_records])
    return {v: table.cell("overall", v)[0] for v in table.variants}


# -- 1, 2, 3, 8: scaled circular sweep -----------------------------------------------------

def test_criterion_1_circular_ordering(overall):
    mdcn, cfr, mlp = overall["MDCN"], overall["CFR"], overall["MLP"]
    gain = (cfr - mdcn) / cfr
    ok = mdcn <= cfr and mdcn <= mlp and gain >= 0.05
    record_criterion(1, ok, f"overall PEHE MDCN {mdcn:.4f}, CFR {cfr:.4f}, MLP {mlp:.4f}; "
                            f"improvement over CFR {100 * gain:.2f}% (need >= 5%)")
    assert mdcn <= cfr and mdcn <= mlp
    assert gain >= 0.05


def test_criterion_2_dcfr_vs_cfr(overall):
    ok = overall["DCFR"] <= overall["CFR"]
    record_criterion(2, ok, f"overall PEHE DCFR {overall['DCFR']:.4f} vs CFR {overall['CFR']:.4f}")
    assert ok


def test_criterion_3_neighbor_recovery(sweep_records):
    hits = neighbor_hits([r for r in sweep_records if r.variant == "MDCN"], n_domains=10)
    n = sum(hits.values())
    record_criterion(3, n >= 7 and len(hits) == 10, f"{n}/10 target rows put their top-2 weights on s-1, s+1")
    assert len(hits) == 10 and n >= 7


def test_criterion_8_weight_simplex(sweep_records):
    runs = [r for r in sweep_records if r.variant == "MDCN"]
    worst_row = max(r.max_row_error for r in runs)
    min_w = min(r.min_weight for r in runs)
    ok = len(runs) == 50 and worst_row <= 1e-9 and min_w >= 0
    record_criterion(8, ok, f"{len(runs)} MDCN runs, every iteration: max |row sum - 1| = {worst_row:.2e}, "
                            f"min weight = {min_w:.3e}")
    assert ok


# -- 4: oracle -------------------------------------------------------------------------------

def test_criterion_4_oracle_pehe(tmp_path):
    assert cli.main(["generate", "circular", "--out", str(tmp_path / "c.csv")]) == 0
    assert cli.main(["oracle", str(tmp_path / "c.csv"), "--out", str(tmp_path / "o.ckpt")]) == 0
    values = []
    for target in range(10):
        assert cli.main(["eval", str(tmp_path / "o.ckpt"), str(tmp_path / "c.csv"), "--target", str(target),
                         "--out", str(tmp_path / "r.csv")]) == 0
    values = [r.pehe for r in read_results(tmp_path / "r.csv")]
    ok = len(values) == 10 and all(v == 0.0 for v in values)
    record_criterion(4, ok, f"oracle PEHE on all 10 domains: max {max(values)!r}")
    assert ok


# -- 5: autodiff audit ---------------------------------------------------------------------------

def _central_difference(f, arr, h):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def test_criterion_5_gradient_checks():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        dims = [int(rng.integers(1, 5)) for _ in range(int(rng.integers(0, 3)))]
        net = Mlp(MlpSpec(int(rng.integers(1, 5)), tuple(dims), int(rng.integers(1, 4))), rng)
        X = rng.normal(size=(int(rng.integers(1, 6)), net.spec.input_dim))
        R = rng.normal(size=(len(X), net.spec.output_dim))
        loss = lambda: float(np.sum(net(X) * R))  # noqa: E731
        for p in net.params:
            p.grad = None
        ad.backward(ad.sum(ad.mul(net.forward(X), R)))
        for p in net.params:
            analytic = np.zeros_like(p.value) if p.grad is None else p.grad
            worst = max(worst, _rel(analytic, _central_difference(loss, p.value, 1e-6)))
    gp_worst = 0.0
    for _ in range(20):
        q = int(rng.integers(1, 4))
        critic = Mlp(MlpSpec(q, (int(rng.integers(2, 6)),), int(rng.integers(1, 3))), rng)
        points = rng.normal(size=(int(rng.integers(2, 6)), q))
        heads = rng.integers(0, critic.spec.output_dim, size=len(points))
        penalty = lambda: float(L.gradient_penalty(critic, points, heads).value)  # noqa: E731
        for p in critic.params:
            p.grad = None
        ad.backward(L.gradient_penalty(critic, points, heads))
        for p in critic.params:
            analytic = np.zeros_like(p.value) if p.grad is None else p.grad
            gp_worst = max(gp_worst, _rel(analytic, _central_difference(penalty, p.value, 1e-6)))
    ok = worst <= 1e-4 and gp_worst <= 1e-3
    record_criterion(5, ok, f"100 nets: worst relative error {worst:.2e} (<= 1e-4); "
                            f"gradient penalty: {gp_worst:.2e} (<= 1e-3)")
    assert ok


# -- 6: transport oracles ---------------------------------------------------------------------------

def test_criterion_6_transport_equivalence():
    rng = np.random.default_rng(6)
    worst = 0.0
    symmetric = zero = True
    for _ in range(200):
        n = int(rng.integers(1, 65))
        a = rng.normal(size=n) * rng.uniform(0.1, 5)
        b = rng.normal(size=n) * rng.uniform(0.1, 5) + rng.normal()
        assign = TH.w1_exact_assignment(a, b)
        worst = max(worst, abs(TH.w1_exact_1d(a, b) - assign))
        symmetric &= TH.w1_exact_assignment(b, a) == assign
        zero &= TH.w1_exact_assignment(a, a[rng.permutation(n)]) == 0.0
    ok = worst <= 1e-9 and symmetric and zero
    record_criterion(6, ok, f"200 instances: max |sorted - assignment| = {worst:.2e}; "
                            f"symmetric={symmetric}; zero on permutations={zero}")
    assert ok


# -- 7: bound audits --------------------------------------------------------------------------------

def test_criterion_7_bound_audits(tmp_path):
    bt = TH.audit("prop-bt", 100, seed=0)
    thm = TH.audit("theorem", 100, seed=0)
    bad = sum(r.violated(1e-9) for r in bt + thm)
    control = cli.main(["verify", "--mode", "theorem", "--n-instances", "10", "--inject-violation", "100",
                        "--out", str(tmp_path / "bad.csv")])
    clean = cli.main(["verify", "--mode", "prop-bt", "--n-instances", "100", "--out", str(tmp_path / "ok.csv")])
    ok = bad == 0 and control != 0 and clean == 0
    record_criterion(7, ok, f"{len(bt)} between-treatment and {len(thm)} target-bound checks, {bad} violations "
                            f"(min slack {min(r.slack for r in bt + thm):.3g}); negative control exit {control}")
    assert ok


# -- 9: Wilcoxon -------------------------------------------------------------------------------------

def _enumerate(d):
    d = d[d != 0]
    r = rankdata(np.abs(d))
    obs = r[d > 0].sum()
    stats = np.array([np.dot(r, s) for s in itertools.product((0, 1), repeat=len(r))])
    ge, le = np.mean(stats >= obs - 1e-9), np.mean(stats <= obs + 1e-9)
    return ge, le, min(1.0, 2 * min(ge, le))


def test_criterion_9_wilcoxon_exactness():
    rng = np.random.default_rng(9)
    worst = 0.0
    for i in range(50):
        n = int(rng.integers(5, 11))
        a, b = rng.normal(size=n), rng.normal(size=n) + rng.normal() * 0.5
        if i % 4 == 0:
            b = a - rng.integers(-2, 3, size=n).astype(float)
            if np.count_nonzero(a - b) == 0:
                b[0] -= 1.0
        r = wilcoxon_signed_rank(a, b)
        ref = _enumerate(a - b)
        worst = max(worst, *(abs(x - y) for x, y in zip((r.p_greater, r.p_less, r.p_two_sided), ref)))
    five = wilcoxon_signed_rank(np.arange(1.0, 6.0), np.zeros(5))
    ok = worst <= 1e-12 and five.p_greater == 0.03125
    record_criterion(9, ok, f"50 samples n<=10: max |p - enumeration| = {worst:.1e}; "
                            f"n=5 all positive: one-sided p = {five.p_greater}")
    assert ok


# -- 10: determinism ---------------------------------------------------------------------------------

def _primary(root: Path):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and not p.name.endswith("manifest.json")}


def _pipeline(out: Path):
    out.mkdir(parents=True)
    (out.parent / "gen.txt").write_text("n_domains=4\nsamples_per_domain=40\n")
    c = lambda *a: cli.main([str(x) for x in a])  # noqa: E731
    codes = [
        c("generate", "circular", "--config", out.parent / "gen.txt", "--seed", 3, "--out", out / "c.csv"),
        c("generate", "semisynth", "--seed", 3, "--out", out / "s.csv"),
        c("train", out / "c.csv", "--n-iter", 5, "--seed", 1, "--target", 2, "--out", out / "run"),
        c("train", out / "c.csv", "--variant", "dcfr", "--n-iter", 2, "--all-targets", "--out", out / "all"),
        c("eval", out / "run", out / "c.csv", "--out", out / "results.csv"),
        c("heatmap", out / "run", "--out", out / "sim.csv"),
        c("heatmap", out / "all" / "target_0", "--dataset", out / "c.csv", "--out", out / "sim_proj.csv"),
        c("summary", out / "results.csv", out / "all" / "results.csv", "--out", out / "summary.txt"),
        c("oracle", out / "c.csv", "--out", out / "oracle.ckpt"),
        c("verify", "--mode", "theorem", "--n-instances", 10, "--out", out / "verify.csv"),
        c("config", "--variant", "mdmn", "--out", out / "config.txt"),
    ]
    return codes


def test_criterion_10_determinism(tmp_path):
    codes_a = _pipeline(tmp_path / "a" / "out")
    codes_b = _pipeline(tmp_path / "b" / "out")
    a, b = _primary(tmp_path / "a" / "out"), _primary(tmp_path / "b" / "out")
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    ok = codes_a == codes_b == [0] * len(codes_a) and not differing and len(a) >= 15
    record_criterion(10, ok, f"{len(codes_a)} commands rerun, {len(a)} output files compared, "
                             f"{len(differing)} differ")
    assert ok
