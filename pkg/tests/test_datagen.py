import math

import numpy as np
import pytest

from mdcn import datagen as D
from mdcn.datagen import CircularConfig, SemiSynthConfig


@pytest.fixture(scope="module")
def circ():
    return D.gen_circular(CircularConfig(samples_per_domain=2000, seed=0))


@pytest.fixture(scope="module")
def semi():
    return D.gen_semisynth(SemiSynthConfig(samples_per_domain=60, seed=2))


def test_first_domain_is_centered_on_the_vertical_axis():
    a = D.circular_angle(0)
    assert [4 * math.sin(a), 4 * math.cos(a), 0.0] == [0.0, 4.0, 0.0]


def test_propensity_at_origin_is_one_half():
    assert D.propensity(np.zeros((1, 3)))[0] == 0.5


def test_propensity_matches_logistic_formula(rng):
    X = rng.normal(size=(50, 3)) * 3
    ref = 1.0 / (1.0 + np.exp(-0.5 * X[:, 0] - 0.5 * X[:, 1] - 2.0 * X[:, 2]))
    assert np.allclose(D.propensity(X), ref, rtol=0, atol=1e-14)


def test_effect_at_origin_of_first_domain_is_zero():
    mu0, mu1 = D.circular_means(np.zeros((1, 3)), D.circular_angle(0))
    assert mu1[0] - mu0[0] == 0.0


def test_circular_effect_is_noiseless_mean_difference(circ):
    a = D.circular_angle(circ.domain)
    x1, x2, x3 = circ.X.T
    mu0 = 1.5 * (np.sin(x1 + a) + np.cos(x2 + x3 + a))
    mu1 = 1.5 * (np.cos(x1 + a) + np.sin(x2 + x3 + a))
    assert np.allclose(circ.tau, mu1 - mu0, rtol=0, atol=1e-13)


def test_circular_domain_means_converge(circ):
    n = 2000
    for s in circ.domains:
        a = s * math.pi / 10
        center = np.array([4 * math.sin(a), 4 * math.cos(a), 0.0])
        gap = np.abs(circ.X[circ.domain == s].mean(axis=0) - center)
        assert (gap <= 3.0 / math.sqrt(n)).all(), (s, gap)


def test_treatment_fraction_tracks_mean_propensity(circ):
    for s in circ.domains:
        m = circ.domain == s
        p = D.propensity(circ.X[m])
        n = int(m.sum())
        pbar = p.mean()
        assert abs(circ.t[m].mean() - pbar) <= 3 * math.sqrt(pbar * (1 - pbar) / n)


def test_observed_outcome_consistency(circ, semi):
    for ds in (circ, semi):
        assert np.array_equal(ds.y, np.where(ds.t == 1, ds.y1, ds.y0))


def test_domains_do_not_depend_on_domain_count():
    a = D.gen_circular(CircularConfig(n_domains=3, samples_per_domain=20, seed=5))
    b = D.gen_circular(CircularConfig(n_domains=5, samples_per_domain=20, seed=5))
    m = b.domain < 3
    assert np.array_equal(a.X, b.X[m]) and np.array_equal(a.y, b.y[m])


def test_shift_grid_first_offset():
    g = D.shift_grid(15)
    assert len(g) == 15
    assert math.isclose(g[0], -1.3, abs_tol=1e-15)
    assert math.isclose(g[-1], 1.5, abs_tol=1e-15)
    assert np.allclose(np.diff(g), 0.2)


def test_identical_centers_give_identical_surfaces(rng):
    cfg = SemiSynthConfig(seed=4)
    nets = D.MiniNetworks(cfg)
    c = D.semisynth_centers(cfg)[3]
    X = rng.normal(size=(20, cfg.dim))
    a0, a1 = D.semisynth_means(X, c, nets)
    b0, b1 = D.semisynth_means(X, c.copy(), D.MiniNetworks(cfg))
    assert np.array_equal(a0, b0) and np.array_equal(a1, b1)


def test_semisynth_outcome_construction(rng):
    cfg = SemiSynthConfig(seed=1)
    nets = D.MiniNetworks(cfg)
    X = rng.normal(size=(5, cfg.dim))
    center = D.semisynth_centers(cfg)[2]
    gate = 1.0 / (1.0 + math.exp(-center[0]))
    for arm in (0, 1):
        total = 0.0
        for j in range(cfg.n_networks):
            total = total + np.tanh(X @ nets.W1[arm][j]) @ nets.W2[arm][j]
        assert np.allclose(D.semisynth_means(X, center, nets)[arm], gate * total, rtol=1e-12)
    # each copy is the base network shifted by its grid offset
    base = nets.W1[0][0] - nets.offsets[0][0]
    for j in range(cfg.n_networks):
        assert np.allclose(nets.W1[0][j], base + nets.offsets[0][j], atol=1e-14)
    assert sorted(nets.offsets[0]) == sorted(nets.offsets[1])


def test_semisynth_shape(semi):
    assert semi.n_features == 15 and semi.domains == tuple(range(21))
    assert np.isfinite(semi.tau).all()


def test_round_trip_is_bitwise(tmp_path):
    ds = D.gen_circular(CircularConfig(n_domains=3, samples_per_domain=30, seed=9))
    D.write_dataset(ds, tmp_path / "d.csv")
    back = D.read_dataset(tmp_path / "d.csv")
    for name in ("domain", "X", "t", "y", "y0", "y1", "tau"):
        assert getattr(ds, name).tobytes() == getattr(back, name).tobytes(), name
    text = (tmp_path / "d.csv").read_bytes()
    assert b"\r" not in text and text.startswith(b"domain,t,y,y0,y1,tau,x0,x1,x2\n")


def test_real_data_columns_may_be_empty(tmp_path):
    ds = D.Dataset([0, 0, 1, 1], np.arange(4.0)[:, None], [0, 1, 0, 1], [1.0, 2.0, 3.0, 4.0])
    D.write_dataset(ds, tmp_path / "r.csv")
    back = D.read_dataset(tmp_path / "r.csv")
    assert back.tau is None and back.y0 is None and not back.has_truth


def test_domain_with_single_arm_is_rejected(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("domain,t,y,y0,y1,tau,x0\n0,0,1,,,,0.5\n0,1,2,,,,0.1\n1,1,3,,,,0.2\n1,1,4,,,,0.3\n")
    with pytest.raises(D.DataValidationError, match="domain 1 has no samples with t=0"):
        D.read_dataset(p)


def test_header_mismatch_names_expected_columns(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("dom,t,y,x0\n0,0,1,2\n")
    with pytest.raises(D.SchemaError, match="domain,t,y,y0,y1,tau,x0"):
        D.read_dataset(p)


def test_malformed_row_reports_line_number(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("domain,t,y,y0,y1,tau,x0\n0,0,1,,,,0.5\n0,1,abc,,,,0.1\n")
    with pytest.raises(D.DataValidationError, match=":3:"):
        D.read_dataset(p)


def test_mask_outcomes_blanks_only_one_domain(circ):
    m = circ.mask_outcomes(3)
    sel = circ.domain == 3
    assert np.isnan(m.y[sel]).all() and np.isnan(m.tau[sel]).all()
    assert np.array_equal(m.y[~sel], circ.y[~sel])


def test_dataset_is_immutable(circ):
    with pytest.raises(ValueError):
        circ.X[0, 0] = 1.0
