"""Nuisance models: the conditional mean embedding and the propensity model.

The CME mu_{Y|A,X}(a, x) is fit by kernel ridge regression with feature-map
targets; everything needed later is the weight vector

    beta(a, x) = (K_AX,AX + n lambda I)^{-1} k_AX((a, x), train pairs),

so the model stores the training arrays, the factor Grams, and a Cholesky
factorization of the regularized joint Gram.  Action inputs to all functions
here are kernel *features* (real vectors; continuous scalar actions are their
own features, recommendation lists enter via `Policy.action_feat`).

The propensity model is the paper-exact linear-Gaussian fit: OLS of a on x
with no intercept, unit variance, and a positivity floor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .data_policies import LoggedDataset
from .kernels import KernelSpec, gram, product_gram


def _default_action_feat(A) -> np.ndarray:
    return np.asarray(A, dtype=float).reshape(len(np.atleast_1d(A)), -1)


@dataclass(frozen=True)
class CmeModel:
    """Fitted conditional mean embedding (immutable)."""

    train_X: np.ndarray
    train_A_raw: np.ndarray
    train_A_feat: np.ndarray
    train_Y: np.ndarray
    kA: KernelSpec
    kX: KernelSpec
    kY: KernelSpec
    lam: float
    KA: np.ndarray  # action-factor Gram
    KX: np.ndarray  # covariate-factor Gram
    K: np.ndarray  # joint Gram KA * KX
    chol: tuple  # cho_factor of (K + n lambda I)

    @property
    def n(self) -> int:
        return len(self.train_Y)


def _factor_grams(data: LoggedDataset, kA: KernelSpec, kX: KernelSpec, action_feat):
    feat = _default_action_feat if action_feat is None else action_feat
    A_feat = np.atleast_2d(np.asarray(feat(data.A), dtype=float))
    return A_feat, gram(kA, A_feat, A_feat), gram(kX, data.X, data.X)


def fit_cme(
    data: LoggedDataset,
    kA: KernelSpec,
    kX: KernelSpec,
    kY: KernelSpec,
    lam: float,
    action_feat=None,
    grams=None,
) -> CmeModel:
    """Fit the CME ridge solve on a logged dataset.

    `action_feat` maps raw actions to kernel features (default: continuous
    scalars as 1-D features).  `grams` optionally carries precomputed
    (A_feat, KA, KX) for the same data, e.g. from select_lambda_cv.
    """
    if data.n < 2:
        raise ValueError("n >= 2 required")
    if not lam > 0:
        raise ValueError("lambda must be > 0")
    A_feat, KA, KX = grams if grams is not None else _factor_grams(data, kA, kX, action_feat)
    K = KA * KX
    M = K + data.n * lam * np.eye(data.n)
    try:
        chol = linalg.cho_factor(M, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"CME factorization failed (n={data.n}, lambda={lam:g}, cond~{np.linalg.cond(M):.3g}): {exc}"
        ) from exc
    return CmeModel(data.X, data.A, A_feat, data.Y, kA, kX, kY, float(lam), KA, KX, K, chol)


def _query_kvecs(m: CmeModel, A_feat, X) -> np.ndarray:
    """Columns k_AX((a_q, x_q), train pairs) for a batch of queries."""
    return product_gram(m.kA, m.kX, m.train_A_feat, m.train_X, A_feat, X)


def cme_weights_many(m: CmeModel, A_feat, X) -> np.ndarray:
    """beta(a, x) for a batch of queries; column q is the weight vector."""
    return linalg.cho_solve(m.chol, _query_kvecs(m, A_feat, X), check_finite=False)


def cme_weights(m: CmeModel, a, x) -> np.ndarray:
    """The n-vector beta(a, x); a is an action feature (scalar or vector)."""
    A_feat = np.atleast_1d(np.asarray(a, dtype=float)).reshape(1, -1)
    X = np.asarray(x, dtype=float).reshape(1, -1)
    if A_feat.shape[1] != m.train_A_feat.shape[1] or X.shape[1] != m.train_X.shape[1]:
        raise ValueError("query dimension mismatch")
    return cme_weights_many(m, A_feat, X)[:, 0]


@dataclass(frozen=True)
class PropensityModel:
    """Linear-Gaussian logging-policy model N(x'w_hat, sd^2), floored."""

    w_hat: np.ndarray
    sd: float = 1.0
    floor: float = 1e-3

    def density_many(self, A, X) -> np.ndarray:
        z = (np.asarray(A, dtype=float) - np.atleast_2d(X) @ self.w_hat) / self.sd
        dens = np.exp(-0.5 * z * z) / (self.sd * np.sqrt(2.0 * np.pi))
        return np.maximum(dens, self.floor)


class PolicyPropensity:
    """Known logging propensities (exact masses of a given policy)."""

    def __init__(self, policy, floor: float = 0.0):
        self.policy = policy
        self.floor = floor

    def density_many(self, A, X) -> np.ndarray:
        return np.maximum(self.policy.density_many(A, X), self.floor)


def fit_propensity(data: LoggedDataset, floor: float = 1e-3) -> PropensityModel:
    """OLS of a on x with no intercept; density model N(x'w_hat, 1)."""
    if data.A.ndim != 1:
        raise ValueError("propensity fit requires continuous scalar actions")
    if data.n <= data.d:
        raise ValueError("n > d required")
    w_hat, _, rank, _ = np.linalg.lstsq(data.X, data.A, rcond=None)
    if rank < data.d:
        import warnings

        warnings.warn(f"rank-deficient design (rank {rank} < d={data.d}); using minimum-norm solution")
    return PropensityModel(w_hat, sd=1.0, floor=floor)


def propensity_density(m: PropensityModel, a, x) -> float:
    """max(N(a; x'w_hat, sd), floor) at a single query."""
    return float(m.density_many(np.atleast_1d(a), np.asarray(x, dtype=float).reshape(1, -1))[0])


#: CV grid used by the testing and herding studies
DEFAULT_LAMBDA_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1e0)
#: CV grid used by the recommendation OPE study
OPE_LAMBDA_GRID = (1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3)


def select_lambda_cv(
    data: LoggedDataset,
    kA: KernelSpec,
    kX: KernelSpec,
    kY: KernelSpec,
    grid=DEFAULT_LAMBDA_GRID,
    folds: int = 3,
    action_feat=None,
    grams=None,
) -> float:
    """Grid lambda minimizing the held-out CME reconstruction loss.

    The loss for a held-out point (a, x, y) is the kernel-trick expansion of
    ||phi_Y(y) - mu_hat(a, x)||^2:  k_Y(y,y) - 2 beta'K_{Ytr,y} + beta'K_YY beta.
    Folds are contiguous blocks (rows are i.i.d. by construction); ties break
    toward the larger lambda.  `grams` optionally carries precomputed
    (A_feat, KA, KX).
    """
    if folds < 2:
        raise ValueError("folds >= 2 required")
    if len(grid) == 0:
        raise ValueError("empty lambda grid")
    if data.n < folds:
        raise ValueError("fold size < 1")
    _, KA, KX = grams if grams is not None else _factor_grams(data, kA, kX, action_feat)
    K = KA * KX
    KYY = gram(kY, data.Y, data.Y)
    kyy_diag = np.diag(KYY)

    grid = sorted(set(float(g) for g in grid))
    losses = np.zeros(len(grid))
    fold_idx = np.array_split(np.arange(data.n), folds)
    for hold in fold_idx:
        tr = np.setdiff1d(np.arange(data.n), hold)
        K_tr = K[np.ix_(tr, tr)]
        K_cross = K[np.ix_(tr, hold)]
        KY_tr = KYY[np.ix_(tr, tr)]
        KY_cross = KYY[np.ix_(tr, hold)]
        ridge = len(tr) * np.eye(len(tr))
        for gi, lam in enumerate(grid):
            c = linalg.cho_factor(K_tr + lam * ridge, lower=True, check_finite=False)
            beta = linalg.cho_solve(c, K_cross, check_finite=False)  # (n_tr, n_hold)
            loss = kyy_diag[hold] - 2.0 * np.einsum("ih,ih->h", beta, KY_cross)
            loss = loss + np.einsum("ih,ih->h", beta, KY_tr @ beta)
            losses[gi] += loss.sum()
    # ascending grid + non-strict comparison -> ties break toward larger lambda
    best = 0
    for gi in range(1, len(grid)):
        if losses[gi] <= losses[best]:
            best = gi
    return grid[best]
