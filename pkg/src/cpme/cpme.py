"""Counterfactual policy mean embeddings as finite-atom functionals.

An embedding estimate chi_hat(pi) is stored as coefficients over outcome
atoms {y_j}, so evaluation, RKHS norms, MMDs, and test inner products all
reduce to Gram quadratic forms.  Three weight-vector builders provide the
right-hand side of the plug-in solve (exact enumeration over discrete
actions, resampling, or inverse propensity scoring); the one-step corrected
estimator and the per-sample EIF-difference rows share the same assembly.

Policy integrals int mu_hat(a, x) pi(da|x) are exact for enumerable policies
and Monte Carlo otherwise.  The Monte-Carlo path deliberately consumes an
independent draw stream per policy argument: identical *continuous* policies
then differ by mean-zero integration noise (which is what makes the DR test
statistic nondegenerate under the null), while identical *enumerable*
policies cancel exactly.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .data_policies import LoggedDataset, Policy
from .kernels import KernelSpec, gram, product_gram
from .nuisance import CmeModel

#: importance weights above this trigger a warning record (no clipping by default)
WEIGHT_WARN_CAP = 1e4


@dataclass(frozen=True)
class EmbeddingFunctional:
    """chi_hat(y) = sum_j coeffs_j * k_Y(atoms_j, y)."""

    atoms: np.ndarray
    coeffs: np.ndarray
    kY: KernelSpec

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float).ravel()
        coeffs = np.asarray(self.coeffs, dtype=float).ravel()
        if len(atoms) != len(coeffs):
            raise ValueError("atoms and coeffs must be aligned")
        if not (np.all(np.isfinite(atoms)) and np.all(np.isfinite(coeffs))):
            raise ValueError("non-finite embedding")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "coeffs", coeffs)

    def evaluate(self, y):
        """chi_hat at scalar y or at an array of outcomes."""
        vals = gram(self.kY, np.atleast_1d(np.asarray(y, dtype=float)), self.atoms) @ self.coeffs
        return float(vals[0]) if np.isscalar(y) or np.ndim(y) == 0 else vals

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["atom", "coeff"])
            for a, c in zip(self.atoms, self.coeffs):
                wr.writerow([repr(float(a)), repr(float(c))])
        with open(str(path) + ".kernel.json", "w") as fh:
            json.dump({"family": self.kY.family, "lengthscale": self.kY.lengthscale}, fh)

    @classmethod
    def from_csv(cls, path) -> "EmbeddingFunctional":
        with open(str(path) + ".kernel.json") as fh:
            spec = json.load(fh)
        kY = KernelSpec(spec["family"], spec["lengthscale"])
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(rows[:, 0], rows[:, 1], kY)


@dataclass(frozen=True)
class EifAtoms:
    """Per-sample EIF-difference rows in the span of {phi_Y(y_j)}.

    Row i holds the coefficients of phi_hat_{pi,pi'}(y_i, a_i, x_i):
    w_i e_i - w_i beta(a_i, x_i) + (betabar_pi(x_i) - betabar_pi'(x_i)).
    """

    atom_set: np.ndarray
    rows: np.ndarray
    kY: KernelSpec


def _enumerable(policy: Policy, x) -> bool:
    try:
        return policy.enumerate_support(x) is not None
    except ValueError:
        return False


def _policy_integral_rhs(m: CmeModel, X, policy: Policy, mc_draws: int, rng, totals_only: bool, force_mc: bool = False):
    """k-vector averages k̄(x_i) = int k_AX((.), (a, x_i)) pi(da|x_i).

    Returns the (n_train, n_query) matrix of averaged kernel vectors, or its
    row sums when `totals_only`.  Exact for enumerable policies (unless
    `force_mc`); Monte Carlo with `mc_draws` actions per query otherwise.
    """
    query_is_train = X is m.train_X
    X = np.atleast_2d(np.asarray(X, dtype=float))
    nq = len(X)
    KX_q = m.KX if query_is_train else gram(m.kX, m.train_X, X)
    if not force_mc and _enumerable(policy, X[0]):
        # duplicate query rows (e.g. repeated users) share one enumeration
        uniq, inv = np.unique(X, axis=0, return_inverse=True)
        cols = np.zeros((m.n, len(uniq)))
        for u in range(len(uniq)):
            acts, probs = policy.enumerate_support(uniq[u])
            feats = policy.action_feat(np.asarray(acts))
            cols[:, u] = gram(m.kA, m.train_A_feat, feats) @ np.asarray(probs)
        out = cols[:, inv] * KX_q
        return out.sum(axis=1) if totals_only else out
    if mc_draws < 1:
        raise ValueError("mc_draws >= 1 required for non-enumerable policies")
    if rng is None:
        raise ValueError("rng required for Monte-Carlo policy integrals")
    # all draws sampled in one call on draw-major tiled covariates, then the
    # Gram is assembled per block of draws to bound the temporaries (~32 MB)
    feats = policy.action_feat(policy.sample_many(np.tile(X, (mc_draws, 1)), rng))
    block_cols = nq * max(1, int(4_000_000 // max(1, m.n * nq)))
    acc = np.zeros((m.n, nq))
    for start in range(0, mc_draws * nq, block_cols):
        G = gram(m.kA, m.train_A_feat, feats[start : start + block_cols])
        acc += G.reshape(m.n, -1, nq).sum(axis=1)
    acc *= KX_q / mc_draws
    return acc.sum(axis=1) if totals_only else acc


def policy_weight_vector_discrete(m: CmeModel, policy: Policy) -> np.ndarray:
    """(1/n) K_pi 1 with K_pi[i,j] = sum_a k_AX((a_i,x_i),(a,x_j)) pi(a|x_j)."""
    if not _enumerable(policy, m.train_X[0]):
        raise ValueError("policy action space is not enumerable")
    return _policy_integral_rhs(m, m.train_X, policy, 0, None, totals_only=True) / m.n


def policy_weight_vector_resample(m: CmeModel, policy: Policy, rng, draws: int = 1) -> np.ndarray:
    """(1/n) (K_{A Atilde} . K_XX) 1 with one Atilde ~ pi(.|x_j) per column.

    `draws` > 1 averages several independent resamples of Atilde.
    """
    if draws < 1:
        raise ValueError("draws >= 1 required")
    return _policy_integral_rhs(m, m.train_X, policy, draws, rng, totals_only=True, force_mc=True) / m.n


def policy_weight_vector_ips(m: CmeModel, policy: Policy, propensity, weight_clip: float | None = None) -> np.ndarray:
    """(1/n) K_AX,AX W_pi with W_pi[i] = pi(a_i|x_i) / pi0_hat(a_i|x_i)."""
    data = LoggedDataset(m.train_X, m.train_A_raw, m.train_Y)
    W = importance_weights(data, policy, propensity, weight_clip)
    return m.K @ (W / m.n)


def plugin_embedding(m: CmeModel, rhs: np.ndarray) -> EmbeddingFunctional:
    """chi_hat_pi: coefficients (K + n lambda I)^{-1} rhs over the training outcomes."""
    rhs = np.asarray(rhs, dtype=float).ravel()
    if len(rhs) != m.n:
        raise ValueError("rhs length must equal n")
    return EmbeddingFunctional(m.train_Y, linalg.cho_solve(m.chol, rhs, check_finite=False), m.kY)


def _same_data(m: CmeModel, data: LoggedDataset) -> bool:
    return (
        np.array_equal(m.train_X, data.X)
        and np.array_equal(np.asarray(m.train_A_raw), np.asarray(data.A))
        and np.array_equal(m.train_Y, data.Y)
    )


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    if np.any(den <= 0):
        raise ValueError("propensity density vanishes on logged actions; cannot form importance weights")
    return num / den


def importance_weights(
    data: LoggedDataset, policy: Policy, propensity, weight_clip: float | None = None
) -> np.ndarray:
    """w_i = pi(a_i|x_i) / pi0_hat(a_i|x_i), optionally clipped at `weight_clip`."""
    W = _ratio(policy.density_many(data.A, data.X), propensity.density_many(data.A, data.X))
    if weight_clip is not None:
        if weight_clip <= 0:
            raise ValueError("weight_clip must be positive")
        return np.minimum(W, weight_clip)
    if np.any(W > WEIGHT_WARN_CAP):
        warnings.warn(f"importance weight overflow: max {W.max():.3g} exceeds {WEIGHT_WARN_CAP:g}")
    return W


def dr_embedding(
    m: CmeModel,
    prop,
    data: LoggedDataset,
    policy: Policy,
    mc_draws: int = 32,
    rng=None,
    weight_clip: float | None = None,
) -> EmbeddingFunctional:
    """One-step doubly robust embedding.

    chi_hat_dr = (1/n) sum_i [ w_i (phi_Y(y_i) - mu_hat(a_i, x_i)) + betabar_pi(x_i) ]
    with w_i = pi(a_i|x_i) / pi0_hat(a_i|x_i).  Atoms are the evaluated
    sample's outcomes plus (when different) the CME training outcomes.
    """
    W = importance_weights(data, policy, prop, weight_clip)
    same = _same_data(m, data)
    if same:
        V_log = m.K
    else:
        V_log = _query_kvecs_for(m, policy, data)
    rhs_int = _policy_integral_rhs(m, data.X, policy, mc_draws, rng, totals_only=True)
    c_train = linalg.cho_solve(m.chol, rhs_int - V_log @ W, check_finite=False) / data.n
    c_data = W / data.n
    if same:
        return EmbeddingFunctional(m.train_Y, c_data + c_train, m.kY)
    return EmbeddingFunctional(
        np.concatenate([data.Y, m.train_Y]), np.concatenate([c_data, c_train]), m.kY
    )


def _query_kvecs_for(m: CmeModel, policy: Policy, data: LoggedDataset) -> np.ndarray:
    feats = policy.action_feat(data.A)
    return product_gram(m.kA, m.kX, m.train_A_feat, m.train_X, feats, data.X)


def eif_difference_atoms(
    m: CmeModel,
    prop,
    data: LoggedDataset,
    pi: Policy,
    pi2: Policy,
    mc_draws: int = 32,
    rng=None,
    weight_clip: float | None = None,
) -> EifAtoms:
    """Rows of the EIF difference phi_{pi,pi'} at each evaluated sample.

    The nuisances must have been fitted on exactly the rows being evaluated
    (the test module controls the splits).  `weight_clip` caps each policy's
    importance-weight ratio before the two are differenced.
    """
    if not _same_data(m, data):
        raise ValueError("nuisances must be fitted on the evaluated rows")
    w_hat = importance_weights(data, pi, prop, weight_clip) - importance_weights(
        data, pi2, prop, weight_clip
    )
    B = linalg.cho_solve(m.chol, m.K, check_finite=False)  # column i is beta(a_i, x_i)
    D_pi = _policy_integral_rhs(m, data.X, pi, mc_draws, rng, totals_only=False)
    D_pi2 = _policy_integral_rhs(m, data.X, pi2, mc_draws, rng, totals_only=False)
    D_diff = linalg.cho_solve(m.chol, D_pi - D_pi2, check_finite=False)
    rows = np.diag(w_hat) - w_hat[:, None] * B.T + D_diff.T
    return EifAtoms(m.train_Y, rows, m.kY)
