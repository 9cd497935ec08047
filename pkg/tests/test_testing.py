import math

import numpy as np
import pytest
from scipy import stats

from cpme.data_policies import (
    FiniteActions,
    LoggedDataset,
    ScenarioSpec,
    generate,
    rng_stream,
)
from cpme.kernels import KernelSpec, gaussian_median_spec, gram
from cpme.nuisance import fit_propensity
from cpme import testing
from cpme.testing import (
    DEFAULT_MC_DRAWS,
    DEFAULT_WEIGHT_CLIP,
    METHODS,
    cross_statistic,
    dr_kpt,
    kpt_permutation,
    pt_linear,
    qq_points,
    run_study,
    wilson_ci,
)


def test_defaults():
    assert METHODS == ("dr-kpt", "kpt", "pt-linear")
    assert DEFAULT_WEIGHT_CLIP == 10.0
    assert DEFAULT_MC_DRAWS == 8


# ---------------------------------------------------------------------------
# cross U-statistic
# ---------------------------------------------------------------------------


def test_cross_statistic_hand_case():
    # rows [1],[3] against mean row [2], gram [[1]]:
    # f = (2, 6), f_bar = 4, s = sqrt(((2-4)^2 + (6-4)^2)/2) = 2,
    # t = sqrt(2) * 4 / 2 = 2 sqrt(2)
    f, f_bar, s, t = cross_statistic(np.array([[1.0], [3.0]]), np.array([[2.0]]), np.array([[1.0]]))
    np.testing.assert_allclose(f, [2.0, 6.0])
    assert f_bar == pytest.approx(4.0)
    assert s == pytest.approx(2.0)
    assert t == pytest.approx(2.0 * math.sqrt(2.0), abs=1e-14)


def test_cross_statistic_studentization_is_scale_free():
    rng = np.random.default_rng(0)
    rows_hat = rng.standard_normal((8, 5))
    rows_tilde = rng.standard_normal((6, 5))
    G = np.eye(5)
    _, _, _, t = cross_statistic(rows_hat, rows_tilde, G)
    _, _, _, t_scaled = cross_statistic(7.0 * rows_hat, rows_tilde, G)
    _, _, _, t_gram = cross_statistic(rows_hat, rows_tilde, 3.0 * G)
    assert t_scaled == pytest.approx(t, abs=1e-12)
    assert t_gram == pytest.approx(t, abs=1e-12)


def test_cross_statistic_degenerate_rows():
    _, f_bar, s, t = cross_statistic(np.zeros((3, 2)), np.zeros((2, 2)), np.eye(2))
    assert f_bar == 0.0 and s == 0.0
    assert math.isnan(t)


def test_cross_statistic_empty_block():
    with pytest.raises(ValueError, match="empty row block"):
        cross_statistic(np.zeros((0, 2)), np.zeros((2, 2)), np.eye(2))


# ---------------------------------------------------------------------------
# DR-KPT
# ---------------------------------------------------------------------------


def _coin_data(n=20, seed=0):
    # balanced binary actions keep the action median heuristic away from zero
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 3))
    A = np.tile([0.0, 1.0], n // 2)
    Y = X @ np.array([0.5, -0.2, 0.1]) + A + 0.3 * rng.standard_normal(n)
    return LoggedDataset(X, A, Y)


def test_dr_kpt_identical_enumerable_policies_degenerate():
    # pi = pi' with exact cancellation: every EIF row is zero, S = 0
    data = _coin_data()
    coin = FiniteActions((0.0, 1.0), (0.5, 0.5))
    res = dr_kpt(data, coin, coin, lam=0.1)
    assert res.diagnostics["degenerate"]
    assert res.p_value == 1.0
    assert not res.reject
    assert math.isnan(res.statistic)


def test_dr_kpt_diagnostics_and_split_sizes():
    sc = generate(ScenarioSpec("I", n=50, seed=1))
    res = dr_kpt(sc.data, sc.pi, sc.pi_prime, lam=0.1, seed=2)
    assert res.method == "dr-kpt"
    assert res.diagnostics["m"] == 25
    assert res.diagnostics["n"] == 50
    assert len(res.diagnostics["lambda"]) == 2
    assert 0.0 <= res.p_value <= 1.0
    whole = dr_kpt(sc.data, sc.pi, sc.pi_prime, lam=0.1, seed=2, no_split=True)
    assert whole.diagnostics["m"] == 50
    assert len(whole.diagnostics["lambda"]) == 1


def test_dr_kpt_needs_four_samples():
    tiny = LoggedDataset(np.zeros((3, 1)), [0.0, 1.0, 0.0], [0.0, 1.0, 2.0])
    with pytest.raises(ValueError, match="n >= 4"):
        dr_kpt(tiny, FiniteActions((0.0,), (1.0,)), FiniteActions((1.0,), (1.0,)))


def test_dr_kpt_is_seeded():
    sc = generate(ScenarioSpec("II", n=60, seed=3))
    r1 = dr_kpt(sc.data, sc.pi, sc.pi_prime, seed=5)
    r2 = dr_kpt(sc.data, sc.pi, sc.pi_prime, seed=5)
    r3 = dr_kpt(sc.data, sc.pi, sc.pi_prime, seed=6)
    assert r1.statistic == r2.statistic and r1.p_value == r2.p_value
    assert r1.statistic != r3.statistic  # different Monte-Carlo integral draws


def test_dr_kpt_shuffle_is_seeded():
    sc = generate(ScenarioSpec("I", n=40, seed=4))
    r1 = dr_kpt(sc.data, sc.pi, sc.pi_prime, seed=0, shuffle_seed=8)
    r2 = dr_kpt(sc.data, sc.pi, sc.pi_prime, seed=0, shuffle_seed=8)
    assert r1.statistic == r2.statistic


def test_test_result_consistency_guard():
    with pytest.raises(AssertionError):
        testing.TestResult(1.0, 0.2, True, 0.05, "dr-kpt")


# ---------------------------------------------------------------------------
# permutation baselines
# ---------------------------------------------------------------------------


def test_kpt_pinned_replication():
    # frozen from an independent double-loop implementation of the weighted
    # unbiased MMD^2 and a serial permutation pass on the same streams
    sc = generate(ScenarioSpec("II", n=40, seed=3))
    res = kpt_permutation(sc.data, sc.pi, sc.pi_prime, n_perm=42, rng=rng_stream(0, 7))
    assert res.statistic == pytest.approx(0.1865734942592485, abs=1e-15)
    assert res.p_value == pytest.approx(0.813953488372093, abs=1e-15)
    assert res.method == "kpt"
    assert res.diagnostics["n_perm"] == 42


def test_kpt_brute_force_oracle():
    # recompute the statistic and the whole permutation pass by hand
    sc = generate(ScenarioSpec("III", n=8, seed=5))
    data = sc.data
    res = kpt_permutation(data, sc.pi, sc.pi_prime, n_perm=25, rng=rng_stream(1, 7))

    p0 = fit_propensity(data).density_many(data.A, data.X)
    d = sc.pi.density_many(data.A, data.X) / p0 - sc.pi_prime.density_many(data.A, data.X) / p0
    K = gram(gaussian_median_spec(data.Y), data.Y, data.Y)

    def stat(w):
        acc = 0.0
        for i in range(8):
            for j in range(8):
                if i != j:
                    acc += w[i] * w[j] * K[i, j]
        return acc / (8 * 7)

    assert res.statistic == pytest.approx(stat(d), abs=1e-12)
    rng = rng_stream(1, 7)
    exceed = sum(stat(d[rng.permutation(8)]) >= res.statistic for _ in range(25))
    assert res.p_value == pytest.approx((1 + exceed) / 26, abs=1e-15)


def test_kpt_identical_policies():
    # d = 0 identically: statistic 0 and every permutation ties -> p = 1
    sc = generate(ScenarioSpec("I", n=20, seed=6))
    res = kpt_permutation(sc.data, sc.pi, sc.pi_prime, n_perm=30, rng=rng_stream(2, 7))
    assert res.statistic == 0.0
    assert res.p_value == 1.0
    assert not res.reject


def test_kpt_validation():
    sc = generate(ScenarioSpec("I", n=10, seed=7))
    with pytest.raises(ValueError, match="rng required"):
        kpt_permutation(sc.data, sc.pi, sc.pi_prime)
    with pytest.raises(ValueError, match="n_perm >= 1"):
        kpt_permutation(sc.data, sc.pi, sc.pi_prime, n_perm=0, rng=rng_stream(0))
    tiny = sc.data.rows([0, 1, 2])
    with pytest.raises(ValueError, match="n >= 4"):
        kpt_permutation(tiny, sc.pi, sc.pi_prime, n_perm=5, rng=rng_stream(0))


def test_pt_linear_statistic_formula():
    # linear outcome kernel: stat = [(sum d_i y_i)^2 - sum d_i^2 y_i^2] / (n(n-1))
    sc = generate(ScenarioSpec("II", n=12, seed=8))
    data = sc.data
    res = pt_linear(data, sc.pi, sc.pi_prime, n_perm=10, rng=rng_stream(3, 7))
    p0 = fit_propensity(data).density_many(data.A, data.X)
    d = sc.pi.density_many(data.A, data.X) / p0 - sc.pi_prime.density_many(data.A, data.X) / p0
    expected = (float(d @ data.Y) ** 2 - float((d**2) @ (data.Y**2))) / (12 * 11)
    assert res.statistic == pytest.approx(expected, abs=1e-12)
    assert res.method == "pt-linear"


# ---------------------------------------------------------------------------
# QQ points and Wilson intervals
# ---------------------------------------------------------------------------


def test_qq_points_two_values():
    pts = qq_points([1.0, -1.0])
    assert pts[0] == (pytest.approx(stats.norm.ppf(0.25)), -1.0)
    assert pts[1] == (pytest.approx(stats.norm.ppf(0.75)), 1.0)


def test_qq_points_sorts_and_validates():
    pts = qq_points([3.0, -2.0, 0.5, 1.0])
    assert [v for _, v in pts] == [-2.0, 0.5, 1.0, 3.0]
    assert all(a < b for (a, _), (b, _) in zip(pts, pts[1:]))
    with pytest.raises(ValueError, match=">= 2"):
        qq_points([1.0])


def test_wilson_ci_reference_formula():
    z = stats.norm.ppf(0.975)
    for k, n in ((0, 10), (3, 17), (8, 10), (10, 10)):
        lo, hi = wilson_ci(k, n)
        p = k / n
        den = 1 + z**2 / n
        center = (p + z**2 / (2 * n)) / den
        half = z * math.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / den
        assert lo == pytest.approx(max(0.0, center - half), abs=1e-12)
        assert hi == pytest.approx(min(1.0, center + half), abs=1e-12)
        assert 0.0 <= lo <= p <= hi + 1e-12 and hi <= 1.0
        assert isinstance(lo, float) and isinstance(hi, float)


# ---------------------------------------------------------------------------
# study harness
# ---------------------------------------------------------------------------


def test_run_study_shapes_and_determinism(tmp_path):
    table = run_study("I", [24], reps=2, methods=("dr-kpt", "pt-linear"), seed=9, n_perm=20)
    assert len(table.rows) == 2
    for row in table.rows:
        assert row.scenario == "I" and row.n == 24 and row.reps == 2
        assert row.rate in (0.0, 0.5, 1.0)
        assert 0.0 <= row.ci_low <= row.rate <= row.ci_high <= 1.0
        assert row.runtime_s > 0
    assert set(table.statistics) == {(24, "dr-kpt"), (24, "pt-linear")}
    assert len(table.statistics[(24, "dr-kpt")]) == 2

    again = run_study("I", [24], reps=2, methods=("dr-kpt", "pt-linear"), seed=9, n_perm=20)
    np.testing.assert_array_equal(
        table.statistics[(24, "dr-kpt")], again.statistics[(24, "dr-kpt")]
    )

    csv_path = tmp_path / "rates.csv"
    table.to_csv(csv_path)
    lines = csv_path.read_text().strip().split("\n")
    assert lines[0] == "scenario,n,method,rate,ci_low,ci_high,reps,runtime_s"
    assert len(lines) == 3
    assert "np.float64" not in csv_path.read_text()

    qq_path = tmp_path / "stats.csv"
    table.dump_statistics(qq_path, 24, "dr-kpt")
    qq_lines = qq_path.read_text().strip().split("\n")
    assert qq_lines[0] == "rep,t_stat"
    assert len(qq_lines) == 3
    assert "np.float64" not in qq_path.read_text()


def test_run_study_parallel_matches_serial():
    serial = run_study("I", [24], reps=2, seed=10, n_perm=10)
    parallel = run_study("I", [24], reps=2, seed=10, n_perm=10, jobs=2)
    np.testing.assert_array_equal(
        serial.statistics[(24, "dr-kpt")], parallel.statistics[(24, "dr-kpt")]
    )
    assert [r.rate for r in serial.rows] == [r.rate for r in parallel.rows]


def test_run_study_validates_reps():
    with pytest.raises(ValueError, match="reps >= 1"):
        run_study("I", [24], reps=0)
