"""Distributional distances and scalar off-policy value readings.

MMD and 1-D Wasserstein score herded samples against oracle draws; the
DM / wIPS / DR point estimators are the linear-outcome readings of the
plug-in and one-step embeddings, assembled from the same weight builders
and Monte-Carlo streams so the cross-module identities hold to rounding.
The two study harnesses replicate the herding-fidelity and recommendation
OPE experiments with per-replication seed streams.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy import stats

from .cpme import (
    _same_data,
    dr_embedding,
    importance_weights,
    plugin_embedding,
    policy_weight_vector_discrete,
    policy_weight_vector_resample,
)
from .data_policies import (
    HERD_KINDS,
    OPE_KIND,
    LoggedDataset,
    Policy,
    ScenarioSpec,
    child_seed,
    empirical_click_rate,
    generate,
    rng_stream,
)
from .herding import HerdConfig, default_grid, herd
from .kernels import KernelSpec, gaussian_median_spec, gram
from .nuisance import (
    DEFAULT_LAMBDA_GRID,
    OPE_LAMBDA_GRID,
    CmeModel,
    PolicyPropensity,
    fit_cme,
    select_lambda_cv,
)
from .testing import DEFAULT_WEIGHT_CLIP

HERD_METHODS = ("plugin", "dr")
OPE_METHODS = ("cpme", "dr-cpme", "wips")

_Z95 = 1.959963984540054


@dataclass(frozen=True)
class DistanceReport:
    """Distances between two outcome samples (unbiased MMD can dip below 0)."""

    mmd2: float
    wasserstein1: float
    sample_sizes: tuple[int, int]

    def __post_init__(self):
        if self.wasserstein1 < 0:
            raise ValueError("wasserstein1 must be >= 0")
        if self.mmd2 < -2.0 / min(self.sample_sizes):
            raise ValueError("mmd2 below the unbiased-estimator floor")


@dataclass(frozen=True)
class MetricRow:
    """One aggregated study metric with a 95% CI."""

    scenario: str
    method: str
    metric: str
    value: float
    ci_low: float
    ci_high: float


def metric_rows_to_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["scenario", "method", "metric", "value", "ci_low", "ci_high"])
        for r in rows:
            wr.writerow([r.scenario, r.method, r.metric, repr(r.value), repr(r.ci_low), repr(r.ci_high)])


def mmd2_unbiased(s1, s2, k: KernelSpec) -> float:
    """Unbiased squared MMD between two outcome samples (diagonals removed)."""
    x = np.asarray(s1, dtype=float).ravel()
    y = np.asarray(s2, dtype=float).ravel()
    m, l = len(x), len(y)
    if m < 2 or l < 2:
        raise ValueError("need at least two samples per side")
    Kxx = gram(k, x, x)
    Kyy = gram(k, y, y)
    Kxy = gram(k, x, y)
    t_xx = (Kxx.sum() - np.trace(Kxx)) / (m * (m - 1))
    t_yy = (Kyy.sum() - np.trace(Kyy)) / (l * (l - 1))
    return float(t_xx + t_yy - 2.0 * Kxy.mean())


def mmd_between_embeddings(chi1, chi2) -> float:
    """RKHS distance ||chi1 - chi2|| via the Gram quadratic form."""
    if chi1.kY != chi2.kY:
        raise ValueError("embeddings use different outcome kernels")
    a1, c1 = chi1.atoms, chi1.coeffs
    a2, c2 = chi2.atoms, chi2.coeffs
    q = (
        c1 @ gram(chi1.kY, a1, a1) @ c1
        - 2.0 * (c1 @ gram(chi1.kY, a1, a2) @ c2)
        + c2 @ gram(chi1.kY, a2, a2) @ c2
    )
    return float(np.sqrt(max(q, 0.0)))


def wasserstein1d(s1, s2) -> float:
    """1-D Wasserstein-1: mean |order-statistic difference| for equal sizes,
    the piecewise-constant quantile integral otherwise."""
    a = np.sort(np.asarray(s1, dtype=float).ravel())
    b = np.sort(np.asarray(s2, dtype=float).ravel())
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty samples")
    if len(a) == len(b):
        return float(np.mean(np.abs(a - b)))
    return float(stats.wasserstein_distance(a, b))


def distance_report(s1, s2, k: KernelSpec) -> DistanceReport:
    return DistanceReport(mmd2_unbiased(s1, s2, k), wasserstein1d(s1, s2), (len(s1), len(s2)))


# ---------------------------------------------------------------------------
# scalar OPE readings
# ---------------------------------------------------------------------------


def _policy_rhs(cme: CmeModel, policy: Policy, mc_draws: int, rng) -> np.ndarray:
    """Exact enumeration when the action space permits, Monte Carlo otherwise
    (the same dispatch the embedding builders use, so readings stay aligned)."""
    try:
        return policy_weight_vector_discrete(cme, policy)
    except ValueError:
        return policy_weight_vector_resample(cme, policy, rng, draws=mc_draws)


def _outcome_dual(cme: CmeModel) -> np.ndarray:
    return linalg.cho_solve(cme.chol, cme.train_Y, check_finite=False)


def _require_logged(cme: CmeModel, data: LoggedDataset) -> None:
    if not _same_data(cme, data):
        raise ValueError("nuisances must be fitted on the logged data being read")


def ope_dm(cme: CmeModel, data: LoggedDataset, policy: Policy, mc_draws: int = 32, rng=None) -> float:
    """(1/n) sum_i E_{a~pi(.|x_i)} eta_hat(x_i, a) with the kernel-ridge eta_hat.

    Equals the linear-outcome reading sum_j c_j y_j of the plug-in embedding
    built from the same weight vector.
    """
    _require_logged(cme, data)
    return float(_policy_rhs(cme, policy, mc_draws, rng) @ _outcome_dual(cme))


def ope_wips(data: LoggedDataset, policy: Policy, propensity) -> float:
    """Self-normalized inverse propensity over logged rewards."""
    w = importance_weights(data, policy, propensity)
    total = w.sum()
    if total <= 0:
        raise ValueError("importance weights sum to zero")
    return float(w @ data.Y / total)


def ope_dr(
    cme: CmeModel,
    data: LoggedDataset,
    policy: Policy,
    propensity,
    mc_draws: int = 32,
    rng=None,
    weight_clip: float | None = None,
) -> float:
    """(1/n) sum_i [E_pi eta_hat(x_i, .) + w_i (y_i - eta_hat(x_i, a_i))].

    Equals the linear-outcome reading of the one-step embedding when both
    consume the same Monte-Carlo stream and clip.
    """
    _require_logged(cme, data)
    w = importance_weights(data, policy, propensity, weight_clip)
    g = _outcome_dual(cme)
    eta_logged = cme.K @ g
    direct = _policy_rhs(cme, policy, mc_draws, rng) @ g
    return float(direct + np.mean(w * (data.Y - eta_logged)))


# ---------------------------------------------------------------------------
# study harnesses
# ---------------------------------------------------------------------------


def _mean_ci(values: np.ndarray) -> tuple[float, float, float]:
    mean = float(values.mean())
    half = _Z95 * float(values.std(ddof=1)) / math.sqrt(len(values)) if len(values) > 1 else 0.0
    return mean, mean - half, mean + half


@dataclass(frozen=True)
class HerdStudyResult:
    """Aggregated rows plus the per-replication distance values."""

    rows: tuple
    values: dict  # (method, metric) -> per-rep array

    def to_csv(self, path) -> None:
        metric_rows_to_csv(self.rows, path)


def herding_rep(
    kind: str,
    n: int,
    m_herd: int,
    rep_seed: int,
    *,
    lam: float | None = None,
    lambda_grid=DEFAULT_LAMBDA_GRID,
    cv_folds: int = 3,
    mc_draws: int = 32,
    oracle_m: int = 2000,
    grid_count: int = 2048,
    normalization: str = "printed",
):
    """One herding replication: samples from both embeddings plus distances.

    Returns (samples dict by method, distances dict keyed (method, metric),
    oracle sample).  The logging propensities are the scenario's exact ones.
    """
    if kind not in HERD_KINDS:
        raise ValueError(f"not a herding scenario: {kind!r}")
    sc = generate(ScenarioSpec(kind, n=n, seed=rep_seed))
    data = sc.data
    kA = gaussian_median_spec(sc.pi.action_feat(data.A))
    kX = gaussian_median_spec(data.X)
    kY = gaussian_median_spec(data.Y)
    use_lam = (
        lam
        if lam is not None
        else select_lambda_cv(data, kA, kX, kY, lambda_grid, cv_folds, action_feat=sc.pi.action_feat)
    )
    model = fit_cme(data, kA, kX, kY, use_lam, action_feat=sc.pi.action_feat)
    rng = rng_stream(rep_seed, 21)
    chi_plugin = plugin_embedding(model, policy_weight_vector_resample(model, sc.pi, rng, draws=mc_draws))
    chi_dr = dr_embedding(model, PolicyPropensity(sc.pi0), data, sc.pi, mc_draws, rng)
    cfg = HerdConfig(m_herd, default_grid(data.Y, grid_count))
    oracle = sc.oracle(sc.pi, oracle_m, rng_stream(rep_seed, 22))
    k_rep = gaussian_median_spec(oracle)
    samples, distances = {}, {}
    for method, chi in (("plugin", chi_plugin), ("dr", chi_dr)):
        s = herd(chi, cfg, normalization)
        samples[method] = s
        distances[(method, "wasserstein1")] = wasserstein1d(s, oracle)
        distances[(method, "mmd2_unbiased")] = mmd2_unbiased(s, oracle, k_rep)
    return samples, distances, oracle


def _herding_rep_worker(args) -> dict:
    (kind, n, m_herd, rep, seed, lam, lambda_grid, cv_folds, mc_draws, oracle_m, grid_count, norm) = args
    _, distances, _ = herding_rep(
        kind,
        n,
        m_herd,
        child_seed(seed, rep),
        lam=lam,
        lambda_grid=lambda_grid,
        cv_folds=cv_folds,
        mc_draws=mc_draws,
        oracle_m=oracle_m,
        grid_count=grid_count,
        normalization=norm,
    )
    return distances


def run_herding_study(
    kind: str,
    n: int = 1000,
    m_herd: int = 500,
    reps: int = 100,
    seed: int = 0,
    *,
    lam: float | None = None,
    lambda_grid=DEFAULT_LAMBDA_GRID,
    cv_folds: int = 3,
    mc_draws: int = 32,
    oracle_m: int = 2000,
    grid_count: int = 2048,
    normalization: str = "printed",
    jobs: int = 1,
) -> HerdStudyResult:
    """Replicated herding fidelity: mean distances to oracle draws per method.

    Replication r uses the stream derived from (seed, r); results are
    identical for any `jobs`.
    """
    if reps < 1:
        raise ValueError("reps >= 1 required")
    tasks = [
        (kind, n, m_herd, rep, seed, lam, tuple(lambda_grid), cv_folds, mc_draws, oracle_m, grid_count, normalization)
        for rep in range(reps)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            per_rep = list(ex.map(_herding_rep_worker, tasks))
    else:
        per_rep = [_herding_rep_worker(t) for t in tasks]
    rows, values = [], {}
    for method in HERD_METHODS:
        for metric in ("wasserstein1", "mmd2_unbiased"):
            vals = np.array([r[(method, metric)] for r in per_rep])
            values[(method, metric)] = vals
            mean, lo, hi = _mean_ci(vals)
            rows.append(MetricRow(kind, method, metric, mean, lo, hi))
    return HerdStudyResult(tuple(rows), values)


@dataclass(frozen=True)
class OpeStudyResult:
    """Aggregated MSE rows plus per-replication squared errors and estimates."""

    rows: tuple
    errors: dict  # (alpha, method) -> per-rep squared errors
    estimates: dict  # (alpha, method) -> per-rep point estimates

    def to_csv(self, path) -> None:
        metric_rows_to_csv(self.rows, path)


def _ope_rep_worker(args) -> dict:
    (alpha, ai, n, d, M, K, n_users, rep, seed, lambda_grid, cv_folds, mc_draws, weight_clip) = args
    rep_seed = child_seed(seed, ai, rep)
    spec = ScenarioSpec(OPE_KIND, n=n, d=d, seed=rep_seed, alpha=alpha, M=M, K=K, n_users=n_users)
    sc = generate(spec)
    data = sc.data
    kA = gaussian_median_spec(sc.pi.action_feat(data.A))
    kX = gaussian_median_spec(data.X)
    kY = KernelSpec("linear")  # binary rewards; the readings are linear anyway
    lam = select_lambda_cv(data, kA, kX, kY, lambda_grid, cv_folds, action_feat=sc.pi.action_feat)
    model = fit_cme(data, kA, kX, kY, lam, action_feat=sc.pi.action_feat)
    prop = PolicyPropensity(sc.pi0)
    # ground truth: a same-size target sample drawn on the logged user rows,
    # so the error charged to each estimator excludes user-sampling noise
    truth = empirical_click_rate(sc.pi, data.X, rng_stream(rep_seed, 32))
    estimates = {
        "cpme": ope_dm(model, data, sc.pi, mc_draws, rng_stream(rep_seed, 31, 0)),
        "dr-cpme": ope_dr(model, data, sc.pi, prop, mc_draws, rng_stream(rep_seed, 31, 1), weight_clip),
        "wips": ope_wips(data, sc.pi, prop),
    }
    return {meth: (est, (est - truth) ** 2) for meth, est in estimates.items()}


def run_ope_study(
    alphas=(-1.0, 0.0, 1.0),
    n: int = 2000,
    d: int = 10,
    reps: int = 30,
    seed: int = 0,
    *,
    M: int = 6,
    K: int = 4,
    n_users: int = 200,
    lambda_grid=OPE_LAMBDA_GRID,
    cv_folds: int = 5,
    mc_draws: int = 32,
    weight_clip: float | None = DEFAULT_WEIGHT_CLIP,
    jobs: int = 1,
) -> OpeStudyResult:
    """Recommendation OPE: per-method MSE against the simulated click rate,
    swept over the logging/target similarity alpha.

    `weight_clip` applies to the DR correction term only; the wIPS baseline
    always uses the raw self-normalized weights.
    """
    if reps < 1:
        raise ValueError("reps >= 1 required")
    rows, errors, estimates = [], {}, {}
    for ai, alpha in enumerate(alphas):
        tasks = [
            (alpha, ai, n, d, M, K, n_users, rep, seed, tuple(lambda_grid), cv_folds, mc_draws, weight_clip)
            for rep in range(reps)
        ]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                per_rep = list(ex.map(_ope_rep_worker, tasks))
        else:
            per_rep = [_ope_rep_worker(t) for t in tasks]
        scenario = f"{OPE_KIND}(alpha={alpha:g})"
        for method in OPE_METHODS:
            sq = np.array([r[method][1] for r in per_rep])
            errors[(alpha, method)] = sq
            estimates[(alpha, method)] = np.array([r[method][0] for r in per_rep])
            mean, lo, hi = _mean_ci(sq)
            rows.append(MetricRow(scenario, method, "mse", mean, lo, hi))
    return OpeStudyResult(tuple(rows), errors, estimates)
