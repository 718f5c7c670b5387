import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mdcn import theory as TH
from mdcn.theory import DiscreteDist, affine


def pts(*v):
    return DiscreteDist(np.array(v, dtype=float))


# -- W1 -------------------------------------------------------------------------------------

def test_w1_identical_samples_is_zero():
    assert TH.w1_exact_1d(pts(0.3, -1.0, 2.0), pts(2.0, 0.3, -1.0)) == 0.0


def test_w1_point_masses():
    assert TH.w1_exact_1d(pts(0.0), pts(2.0)) == 2.0


def test_w1_sorted_pairing():
    assert TH.w1_exact_1d(pts(0.0, 1.0), pts(1.0, 2.0)) == 1.0


def test_w1_1d_rejects_unequal_sizes():
    with pytest.raises(ValueError, match="w1_exact_assignment"):
        TH.w1_exact_1d(pts(0.0), pts(1.0, 2.0))


def test_assignment_zero_on_permutation(rng):
    P = rng.normal(size=(20, 3))
    assert TH.w1_exact_assignment(P, P[rng.permutation(20)]) == 0.0


def test_assignment_matches_sorted_pairing(rng):
    for _ in range(50):
        n = int(rng.integers(1, 65))
        a, b = rng.normal(size=n), rng.normal(size=n) * 2 + 1
        assert abs(TH.w1_exact_assignment(a, b) - TH.w1_exact_1d(a, b)) <= 1e-9


def test_assignment_square_matches_along_edges():
    a = DiscreteDist(np.array([[0.0, 0.0], [1.0, 0.0]]))
    b = DiscreteDist(np.array([[1.0, 1.0], [0.0, 1.0]]))
    # straight pairing costs 1 + 1, crossed pairing costs 2 * sqrt(2)
    assert TH.w1_exact_assignment(a, b) == 1.0


def test_assignment_size_cap():
    with pytest.raises(ValueError, match="subsample"):
        TH.w1_exact_assignment(np.zeros(300), np.ones(300))


def test_w1_is_exactly_symmetric(rng):
    for _ in range(30):
        n, d = int(rng.integers(1, 20)), int(rng.integers(1, 4))
        a, b = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        assert TH.w1_exact_assignment(a, b) == TH.w1_exact_assignment(b, a)


def test_w1_triangle_inequality(rng):
    for _ in range(30):
        n, d = int(rng.integers(1, 16)), int(rng.integers(1, 4))
        a, b, c = (rng.normal(size=(n, d)) + rng.normal(size=d) for _ in range(3))
        ab, bc, ac = TH.w1_exact_assignment(a, b), TH.w1_exact_assignment(b, c), TH.w1_exact_assignment(a, c)
        assert ac <= ab + bc + 1e-9


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e3, 1e3)),
       st.floats(-10, 10))
def test_w1_of_translation_is_shift(x, c):
    assert math.isclose(TH.w1_exact_1d(x, x + c), abs(c), rel_tol=1e-9, abs_tol=1e-9)


def test_w1_to_uniform_mixture():
    target = pts(-1.0, 1.0)
    sources = [pts(-1.0, -1.0), pts(1.0, 1.0)]
    assert TH.w1_to_mixture(target, sources, [0.5, 0.5]) == 0.0
    assert TH.w1_to_mixture(target, sources, [1.0, 0.0]) == 1.0
    with pytest.raises(ValueError, match="one-hot or uniform"):
        TH.w1_to_mixture(target, sources, [0.3, 0.7])


# -- discrepancy and Lipschitz functions ----------------------------------------------------

def test_discrepancy_of_equal_functions(rng):
    f = affine([1.0, -2.0], 0.5)
    assert TH.prob_discrepancy(f, f, rng.normal(size=(10, 2))) == 0.0


def test_discrepancy_of_constant_gap(rng):
    D = rng.normal(size=(10, 2))
    assert math.isclose(TH.prob_discrepancy(affine([1.0, 1.0], 2.5), affine([1.0, 1.0], -0.5), D), 3.0,
                        rel_tol=1e-14)


def test_discrepancy_hand_mean(rng):
    X = rng.normal(size=(8, 1))
    f, g = affine([2.0], 1.0), TH.clamped([1.0], 0.0, -0.5, 0.5)
    x = X[:, 0]
    expected = sum(abs((2 * xi + 1) - min(max(xi, -0.5), 0.5)) for xi in x) / 8
    assert math.isclose(TH.prob_discrepancy(f, g, X), expected, rel_tol=1e-14)


def test_discrepancy_is_symmetric(rng):
    X = rng.normal(size=(12, 3))
    f, g = TH.random_function(rng, 3), TH.random_function(rng, 3)
    assert TH.prob_discrepancy(f, g, X) == TH.prob_discrepancy(g, f, X)


def test_lipschitz_constants_add(rng):
    f, g = affine([3.0, 4.0]), TH.clamped([1.0, 0.0])
    assert (f + g).certified() == 6.0 and (f - g).certified() == 6.0
    TH.check_lipschitz(f + g, rng.normal(size=(40, 2)))


def test_lipschitz_check_catches_false_certificate(rng):
    liar = TH.LipschitzFn("liar", lambda X: 5 * X[:, 0], 1.0)
    with pytest.raises(TH.CertificationError, match="exceeds"):
        TH.check_lipschitz(liar, rng.normal(size=(20, 1)))


# -- between-treatment bound -----------------------------------------------------------------

def test_bt_bound_tight_at_zero():
    f = affine([1.0])
    D = pts(0.0, 1.0)
    r = TH.verify_prop_bt(TH.BTInstance(f, f, f, f, D, D, 0.5))
    assert r.lhs == 0.0 and r.rhs == 0.0


def test_bt_bound_two_point_hand_case():
    h0, g0 = affine([1.0]), affine([-1.0])
    h1, g1 = affine([1.0], 1.0), affine([1.0])
    r = TH.verify_prop_bt(TH.BTInstance(h0, h1, g0, g1, pts(0.0, 1.0), pts(2.0, 3.0), 0.5))
    # |h0-g0| = 2|x|: 1 on control, 5 on treated; |h1-g1| = 1 everywhere
    assert r.lhs == 0.5 * 1 + 0.5 * 5 + 1
    assert r.components["observed_error"] == 1 + 1
    assert r.components["w1_between"] == 2.0
    assert r.rhs == 2 + (1 + 1) * 2.0
    assert r.slack == 2.0 and not r.violated()


def test_bt_bound_rejects_uncertified_function():
    f = affine([1.0])
    bad = TH.LipschitzFn("unknown", lambda X: X[:, 0] ** 2, None)
    with pytest.raises(TH.CertificationError):
        TH.verify_prop_bt(TH.BTInstance(f, f, bad, f, pts(0.0), pts(1.0), 0.5))


def test_bt_audit_has_no_violations():
    reports = TH.audit("prop-bt", 100, seed=0)
    assert len(reports) == 100
    assert not [r for r in reports if r.violated(1e-9)]


# -- target bound ------------------------------------------------------------------------------

def test_theorem_identical_domains_tight_at_zero():
    f = affine([0.7])
    D = pts(0.0, 1.0)
    inst = TH.TheoremInstance(f, f, [f, f, f], [f, f, f], [(D, D), (D, D)], D.union(D))
    r = TH.verify_thm_bound(inst)
    assert r.lhs == 0.0 and r.rhs == 0.0


def _midpoint_instance():
    g0, g1 = affine([0.0]), affine([1.0])
    h0, h1 = affine([1.0]), affine([1.0], 0.5)
    sources = [(pts(-1.0), pts(-1.0)), (pts(1.0), pts(1.0))]
    return TH.TheoremInstance(h0, h1, [g0] * 3, [g1] * 3, sources, pts(-1.0, 1.0))


def test_theorem_midpoint_uniform_weights():
    r = TH.verify_thm_bound(_midpoint_instance(), "uniform")
    # target error: mean |x| + 0.5 = 1.5; mixture equals the target, groups coincide
    assert r.lhs == 1.5
    assert r.components["w1_cross"] == 0.0 and r.components["w1_between"] == 0.0
    assert r.components["observed_error"] == 1.5
    assert r.rhs == 1.5 and r.slack == 0.0


def test_theorem_midpoint_one_hot_weights():
    r = TH.verify_thm_bound(_midpoint_instance(), "one-hot", 0)
    assert r.components["w1_cross"] == 1.0
    assert r.rhs == (1 + 1) * (2 * 1.0) + 1.5


def test_theorem_requires_shared_true_functions():
    inst = _midpoint_instance()
    inst.g0[1] = affine([2.0])
    with pytest.raises(TH.CertificationError, match="γ\\* not certifiable"):
        TH.verify_thm_bound(inst)


def test_theorem_audit_has_no_violations():
    reports = TH.audit("theorem", 100, seed=0)
    assert len(reports) == 200
    assert {r.kind for r in reports} == {"theorem-uniform", "theorem-one-hot"}
    assert not [r for r in reports if r.violated(1e-9)]


def test_injected_reduction_produces_violations():
    reports = TH.audit("prop-bt", 5, seed=0, rhs_reduction=1e6)
    assert all(r.violated() for r in reports)


def test_audit_is_deterministic():
    assert TH.reports_to_csv(TH.audit("theorem", 5, seed=3)) == TH.reports_to_csv(TH.audit("theorem", 5, seed=3))


def test_report_csv_columns():
    text = TH.reports_to_csv(TH.audit("prop-bt", 2, seed=1))
    lines = text.splitlines()
    assert lines[0].split(",") == list(TH.REPORT_COLUMNS) and len(lines) == 3
