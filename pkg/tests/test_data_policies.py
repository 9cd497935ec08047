import math

import numpy as np
import pytest
from scipy import stats

from cpme.data_policies import (
    ALL_KINDS,
    FiniteActions,
    GaussianLinear,
    GaussianMixture,
    HERD_TARGET_SD,
    LoggedDataset,
    LogisticLinear,
    MultinomialList,
    ScenarioSpec,
    Uniform,
    UNIT_LOGISTIC_SCALE,
    child_seed,
    empirical_click_rate,
    generate,
    oracle_click_rate,
    oracle_outcomes,
    outcome_betas,
    rng_stream,
)


def test_rng_stream_reproducible_and_keyed():
    a = rng_stream(7, 1, 2).standard_normal(4)
    b = rng_stream(7, 1, 2).standard_normal(4)
    c = rng_stream(7, 1, 3).standard_normal(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_child_seed_deterministic():
    assert child_seed(5, 0, 9) == child_seed(5, 0, 9)
    assert child_seed(5, 0, 9) != child_seed(5, 1, 9)


# ---------------------------------------------------------------------------
# LoggedDataset
# ---------------------------------------------------------------------------


def test_dataset_shapes_and_subset():
    ds = LoggedDataset(np.arange(6.0).reshape(3, 2), [0.0, 1.0, 2.0], [5.0, 6.0, 7.0])
    assert ds.n == 3 and ds.d == 2
    sub = ds.rows([2, 0])
    np.testing.assert_array_equal(sub.A, [2.0, 0.0])
    np.testing.assert_array_equal(sub.X, [[4.0, 5.0], [0.0, 1.0]])


def test_dataset_validation():
    with pytest.raises(ValueError, match="common length"):
        LoggedDataset(np.zeros((3, 2)), [0.0, 1.0], [0.0, 1.0, 2.0])
    with pytest.raises(ValueError, match="non-finite"):
        LoggedDataset([[np.nan]], [0.0], [0.0])
    with pytest.raises(ValueError, match="repeat"):
        LoggedDataset(np.zeros((1, 2)), np.array([[1, 1]]), [0.0])


def test_dataset_csv_round_trip_scalar_actions(tmp_path):
    rng = np.random.default_rng(0)
    ds = LoggedDataset(rng.standard_normal((5, 3)), rng.standard_normal(5), rng.standard_normal(5))
    path = tmp_path / "log.csv"
    ds.to_csv(path)
    back = LoggedDataset.from_csv(path)
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.A, ds.A)
    np.testing.assert_array_equal(back.Y, ds.Y)


def test_dataset_csv_round_trip_list_actions(tmp_path):
    ds = LoggedDataset(np.ones((2, 2)), np.array([[0, 2], [2, 1]]), [1.0, 0.0])
    path = tmp_path / "log.csv"
    ds.to_csv(path)
    back = LoggedDataset.from_csv(path)
    assert back.A.dtype.kind == "i"
    np.testing.assert_array_equal(back.A, ds.A)


def test_dataset_from_csv_errors(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(ValueError, match="empty file"):
        LoggedDataset.from_csv(empty)

    bad_header = tmp_path / "bad_header.csv"
    bad_header.write_text("u,v\n1,2\n")
    with pytest.raises(ValueError, match="unrecognized header"):
        LoggedDataset.from_csv(bad_header)

    short_row = tmp_path / "short.csv"
    short_row.write_text("x_0,a,y\n1.0,2.0,3.0\n1.0,2.0\n")
    with pytest.raises(ValueError, match=r"short\.csv:3"):
        LoggedDataset.from_csv(short_row)

    junk = tmp_path / "junk.csv"
    junk.write_text("x_0,a,y\n1.0,two,3.0\n")
    with pytest.raises(ValueError, match=r"junk\.csv:2"):
        LoggedDataset.from_csv(junk)


# ---------------------------------------------------------------------------
# policy families
# ---------------------------------------------------------------------------


def test_gaussian_linear_density_peak():
    # at the conditional mean the N(mean, 1) density is 1/sqrt(2 pi)
    pol = GaussianLinear(np.array([2.0, -1.0]))
    x = np.array([0.3, 0.4])
    assert pol.density(float(x @ pol.w), x) == pytest.approx(1.0 / math.sqrt(2.0 * math.pi))


def test_gaussian_linear_requires_positive_sd():
    with pytest.raises(ValueError, match="sd must be > 0"):
        GaussianLinear(np.array([1.0]), 0.0)


def test_gaussian_linear_sample_mean():
    # MC oracle: sample mean of a | x over 10^5 draws approaches x'w
    pol = GaussianLinear(np.array([1.0, 2.0]), sd=1.0)
    X = np.tile([[0.5, 0.25]], (100_000, 1))
    draws = pol.sample_many(X, np.random.default_rng(1))
    assert draws.mean() == pytest.approx(1.0, abs=0.02)


def test_mixture_collapses_to_single_gaussian():
    w = np.array([0.4, -0.2])
    mix = GaussianMixture(((0.5, w, 1.0), (0.5, w, 1.0)))
    single = GaussianLinear(w, 1.0)
    rng = np.random.default_rng(2)
    for _ in range(20):
        a, x = rng.standard_normal(), rng.standard_normal(2)
        assert mix.density(a, x) == pytest.approx(single.density(a, x), abs=1e-15)


def test_mixture_weight_validation():
    w = np.array([1.0])
    with pytest.raises(ValueError, match="sum to 1"):
        GaussianMixture(((0.7, w, 1.0), (0.7, w, 1.0)))
    with pytest.raises(ValueError, match="sd must be > 0"):
        GaussianMixture(((1.0, w, 0.0),))


def test_uniform_density_and_bounds():
    pol = Uniform(-2.0, 2.0)
    assert pol.density(0.0, None) == pytest.approx(0.25)
    assert pol.density(3.0, None) == 0.0
    with pytest.raises(ValueError, match="lo < hi"):
        Uniform(1.0, 1.0)


def test_logistic_linear_matches_scipy():
    pol = LogisticLinear(np.array([0.5]), scale=0.8)
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, x = rng.standard_normal(), rng.standard_normal(1)
        ref = stats.logistic.pdf(a, loc=0.5 * x[0], scale=0.8)
        assert pol.density(a, x) == pytest.approx(ref, abs=1e-14)


def test_unit_logistic_scale_gives_unit_variance():
    # Var Logistic(0, s) = pi^2 s^2 / 3 = 1 at s = sqrt(3)/pi
    assert math.pi**2 * UNIT_LOGISTIC_SCALE**2 / 3.0 == pytest.approx(1.0)
    draws = LogisticLinear(np.zeros(1)).sample_many(np.zeros((200_000, 1)), np.random.default_rng(4))
    assert draws.var() == pytest.approx(1.0, abs=0.02)


def test_densities_integrate_to_one():
    # trapezoid quadrature over a wide action grid at a fixed x
    grid = np.linspace(-30.0, 30.0, 20_001)
    x = np.array([0.7, -0.3])
    X = np.tile(x, (len(grid), 1))
    for pol in (
        GaussianLinear(np.array([1.0, 2.0])),
        GaussianMixture(((0.3, np.array([1.0, 0.0]), 1.0), (0.7, np.array([0.0, 1.0]), 2.0))),
        LogisticLinear(np.array([0.5, 0.5])),
    ):
        mass = np.trapezoid(pol.density_many(grid, X), grid)
        assert mass == pytest.approx(1.0, abs=1e-6)
    # the uniform density is flat on its support, where trapezoid is exact
    box = np.linspace(-2.0, 2.0, 101)
    mass = np.trapezoid(Uniform(-2.0, 2.0).density_many(box, np.tile(x, (101, 1))), box)
    assert mass == pytest.approx(1.0, abs=1e-12)


def test_density_many_matches_scalar_density():
    rng = np.random.default_rng(5)
    A = rng.standard_normal(15)
    X = rng.standard_normal((15, 2))
    for pol in (
        GaussianLinear(np.array([1.0, -1.0])),
        GaussianMixture(((0.5, np.array([1.0, 0.0]), 1.0), (0.5, np.array([0.0, 1.0]), 0.5))),
        LogisticLinear(np.array([0.3, 0.3])),
        Uniform(-2.0, 2.0),
    ):
        expected = [pol.density(a, x) for a, x in zip(A, X)]
        np.testing.assert_allclose(pol.density_many(A, X), expected, atol=1e-14)


def test_finite_actions():
    pol = FiniteActions((0.0, 1.0, 3.0), (0.2, 0.3, 0.5))
    assert pol.density(3.0, None) == pytest.approx(0.5)
    assert pol.density(2.0, None) == 0.0
    acts, probs = pol.enumerate_support(None)
    assert acts == [0.0, 1.0, 3.0]
    assert sum(probs) == pytest.approx(1.0)
    draws = pol.sample_many(np.zeros((50_000, 1)), np.random.default_rng(6))
    assert np.isclose((draws == 3.0).mean(), 0.5, atol=0.01)
    with pytest.raises(ValueError, match="sum to 1"):
        FiniteActions((0.0, 1.0), (0.5, 0.6))


def test_action_feat_reshapes_scalars():
    feat = GaussianLinear(np.ones(2)).action_feat([1.0, 2.0, 3.0])
    assert feat.shape == (3, 1)


# ---------------------------------------------------------------------------
# recommendation lists
# ---------------------------------------------------------------------------


def _flat_list_policy():
    # one user, zero selection parameters: all item scores equal
    users = np.array([[1.0]])
    B = np.zeros((1, 1))
    items = np.array([[0.0], [1.0], [2.0]])
    return MultinomialList(users, B, items, K=2)


def test_multinomial_list_uniform_mass():
    # equal scores: first pick 1/3, second pick 1/2 of the remaining two
    pol = _flat_list_policy()
    x = np.array([1.0])
    for pair in ([0, 1], [2, 0], [1, 2]):
        assert pol.density(np.array(pair), x) == pytest.approx((1.0 / 3.0) * 0.5)


def test_multinomial_list_mass_sums_to_one():
    rng = np.random.default_rng(7)
    users = rng.standard_normal((2, 3))
    B = rng.standard_normal((2, 3))
    items = rng.standard_normal((4, 3))
    pol = MultinomialList(users, B, items, K=3)
    for x in users:
        acts, probs = pol.enumerate_support(x)
        assert len(acts) == 4 * 3 * 2
        assert sum(probs) == pytest.approx(1.0, abs=1e-12)
        # enumerated masses agree with density() per list
        for a, p in zip(acts, probs):
            assert pol.density(a, x) == pytest.approx(p, abs=1e-14)


def test_multinomial_list_density_many_matches_loop():
    rng = np.random.default_rng(8)
    users = rng.standard_normal((3, 2))
    pol = MultinomialList(users, rng.standard_normal((3, 2)), rng.standard_normal((5, 2)), K=2)
    X = users[[1, 0, 2, 1]]
    A = pol.sample_many(X, rng)
    expected = [pol.density(a, x) for a, x in zip(A, X)]
    np.testing.assert_allclose(pol.density_many(A, X), expected, atol=1e-14)


def test_multinomial_list_sampling_frequencies():
    # Gumbel top-K draw must follow the sequential-softmax law
    rng = np.random.default_rng(9)
    users = np.array([[0.5, -0.5]])
    pol = MultinomialList(users, np.array([[1.0, 0.7]]), rng.standard_normal((3, 2)), K=2)
    acts, probs = pol.enumerate_support(users[0])
    draws = pol.sample_many(np.tile(users[0], (40_000, 1)), np.random.default_rng(10))
    for a, p in zip(acts, probs):
        freq = np.mean(np.all(draws == a, axis=1))
        assert freq == pytest.approx(p, abs=0.02)


def test_multinomial_list_sample_is_valid_list():
    pol = _flat_list_policy()
    a = pol.sample(np.array([1.0]), np.random.default_rng(11))
    assert len(a) == 2 and len(set(a.tolist())) == 2
    assert all(0 <= v < 3 for v in a)


def test_multinomial_list_action_feat():
    pol = _flat_list_policy()
    # mean of item vectors 0 and 2: (0 + 2) / 2 = 1
    np.testing.assert_allclose(pol.action_feat(np.array([[0, 2]])), [[1.0]])


def test_multinomial_list_unknown_user():
    pol = _flat_list_policy()
    with pytest.raises(ValueError, match="known user"):
        pol.density(np.array([0, 1]), np.array([5.0]))


def test_multinomial_list_enumeration_cap():
    rng = np.random.default_rng(12)
    users = rng.standard_normal((1, 2))
    pol = MultinomialList(users, np.zeros((1, 2)), rng.standard_normal((10, 2)), K=4)
    # perm(10, 4) = 5040 ordered lists is past the enumeration cap
    with pytest.raises(ValueError, match="too large"):
        pol.enumerate_support(users[0])


def test_multinomial_list_validation():
    with pytest.raises(ValueError, match="aligned"):
        MultinomialList(np.zeros((2, 3)), np.zeros((1, 3)), np.zeros((4, 3)), K=2)
    with pytest.raises(ValueError, match="1 <= K"):
        MultinomialList(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((3, 2)), K=4)


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------


def test_scenario_spec_validation():
    with pytest.raises(ValueError, match="unknown scenario kind"):
        ScenarioSpec("V", n=10)
    with pytest.raises(ValueError, match="n > 0"):
        ScenarioSpec("I", n=0)
    with pytest.raises(ValueError, match="sigma"):
        ScenarioSpec("I", n=10, sigma=-1.0)
    with pytest.raises(ValueError, match="alpha"):
        ScenarioSpec("ope-recommend", n=10, alpha=2.0)
    with pytest.raises(ValueError, match="K <= M"):
        ScenarioSpec("ope-recommend", n=10, M=3, K=5)
    assert len(ALL_KINDS) == 9


def test_outcome_betas_rotation():
    B = outcome_betas(7, 5)
    base = np.linspace(0.1, 0.5, 5)
    np.testing.assert_allclose(B[0], base)
    np.testing.assert_allclose(B[3], np.roll(base, 3))
    np.testing.assert_allclose(B[5], base)  # period d
    np.testing.assert_allclose(np.linalg.norm(B, axis=1), np.linalg.norm(base))


def test_generate_is_deterministic():
    for kind in ("I", "herd-uniform-quadratic", "ope-recommend"):
        a = generate(ScenarioSpec(kind, n=30, seed=4))
        b = generate(ScenarioSpec(kind, n=30, seed=4))
        np.testing.assert_array_equal(a.data.X, b.data.X)
        np.testing.assert_array_equal(a.data.A, b.data.A)
        np.testing.assert_array_equal(a.data.Y, b.data.Y)


def test_scenario_one_null_policies_match():
    sc = generate(ScenarioSpec("I", n=20, seed=0))
    np.testing.assert_array_equal(sc.pi.w, sc.pi_prime.w)
    rng = np.random.default_rng(13)
    A, X = rng.standard_normal(10), rng.standard_normal((10, 5))
    np.testing.assert_allclose(sc.pi.density_many(A, X), sc.pi_prime.density_many(A, X))


def test_scenario_two_mean_shift():
    sc = generate(ScenarioSpec("II", n=20, seed=0, delta=2.0))
    np.testing.assert_allclose(sc.pi_prime.w, sc.pi.w + 2.0)


def test_scenario_three_preserves_the_mean():
    # E[a | x] of the +-1 mixture is x'w + 0.5 x'1 - 0.5 x'1 = x'w
    sc = generate(ScenarioSpec("III", n=20, seed=0))
    (w1_wt, w1, _), (w2_wt, w2, _) = sc.pi_prime.components
    rng = np.random.default_rng(14)
    for _ in range(10):
        x = rng.standard_normal(5)
        mix_mean = w1_wt * float(x @ w1) + w2_wt * float(x @ w2)
        assert mix_mean == pytest.approx(float(x @ sc.pi.w), abs=1e-12)


def test_scenario_four_shifts_one_component():
    sc = generate(ScenarioSpec("IV", n=20, seed=0, delta=2.0))
    comps = sc.pi_prime.components
    np.testing.assert_allclose(comps[0][1], sc.pi.w + 2.0)
    np.testing.assert_allclose(comps[1][1], sc.pi.w)


def test_noiseless_outcomes_recompute_exactly():
    # sigma = 0: Y is a deterministic function of (X, A)
    for kind, form in (
        ("I", lambda lin, a: lin + a),
        ("herd-logistic-nonlinear", lambda lin, a: np.sin(lin) + a**2),
        ("herd-uniform-quadratic", lambda lin, a: lin**2 + a**2),
    ):
        sc = generate(ScenarioSpec(kind, n=25, seed=6, sigma=0.0))
        betas = outcome_betas(25, 5)
        lin = np.einsum("ij,ij->i", sc.data.X, betas)
        np.testing.assert_allclose(sc.data.Y, form(lin, sc.data.A), rtol=1e-12)


def test_scenario_one_oracle_laws_agree():
    # pi and pi_prime are the same law, so their oracle draws must be too
    sc = generate(ScenarioSpec("I", n=10, seed=1))
    y1 = sc.oracle(sc.pi, 4000, rng_stream(90, 0))
    y2 = sc.oracle(sc.pi_prime, 4000, rng_stream(90, 1))
    assert stats.ks_2samp(y1, y2).pvalue > 0.01


def test_oracle_point_mass_mean():
    # quadratic outcomes at a = 0: E y = E (x'beta)^2 = ||beta||^2 since
    # x ~ N(0, I); sum of linspace(0.1, 0.5, 5)^2 = 0.55
    spec = ScenarioSpec("herd-uniform-quadratic", n=10, seed=2)
    hold = FiniteActions((0.0,), (1.0,))
    draws = oracle_outcomes(spec, hold, 100_000, rng_stream(91))
    assert draws.mean() == pytest.approx(0.55, abs=0.02)


def test_oracle_herd_target_mean():
    # nonlinear outcomes under the herding target: E sin(x'beta) = 0 by
    # symmetry and E a^2 = ||w||^2 + sd^2 = 0.0625 + 0.0625 = 0.125
    spec = ScenarioSpec("herd-logistic-nonlinear", n=10, seed=3, sigma=0.0)
    sc = generate(spec)
    assert float(sc.pi.w @ sc.pi.w) == pytest.approx(0.0625)
    assert sc.pi.sd == HERD_TARGET_SD
    draws = oracle_outcomes(spec, sc.pi, 200_000, rng_stream(92))
    assert draws.mean() == pytest.approx(0.125, abs=0.01)


def test_recommendation_environment_structure():
    spec = ScenarioSpec("ope-recommend", n=50, seed=5, alpha=0.5, M=6, K=4, n_users=20)
    sc = generate(spec)
    assert sc.data.A.shape == (50, 4)
    assert set(np.unique(sc.data.Y)) <= {0.0, 1.0}
    assert np.all((sc.data.A >= 0) & (sc.data.A < 6))
    users = sc.pi.users
    for x in sc.data.X:
        assert any(np.array_equal(x, u) for u in users)
    # alpha scales the logging parameters off the target's
    np.testing.assert_allclose(sc.pi0.B, 0.5 * sc.pi.B)


def test_click_rates_agree():
    sc = generate(ScenarioSpec("ope-recommend", n=10, seed=7, M=6, K=4, n_users=30))
    r_pop = oracle_click_rate(sc.pi, 30_000, rng_stream(93, 0))
    X = np.repeat(sc.pi.users, 1000, axis=0)
    r_emp = empirical_click_rate(sc.pi, X, rng_stream(93, 1))
    assert 0.0 < r_pop < 1.0
    assert r_emp == pytest.approx(r_pop, abs=0.02)
