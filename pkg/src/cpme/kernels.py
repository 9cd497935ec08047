"""Kernel functions, Gram-matrix assembly, and bandwidth selection.

Everything downstream (conditional mean embeddings, test statistics, herding
objectives) reduces to dense Gram matrices over small point sets (n <= 5000),
so assembly is dense and exact.  The Gaussian kernel is parameterized as

    k(w, w') = exp(-||w - w'||^2 / (2 * lengthscale^2)),

and the joint action-covariate kernel is the entrywise (Hadamard) product of
the action and covariate Grams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist


@dataclass(frozen=True)
class KernelSpec:
    """A kernel family plus its bandwidth.

    Parameters
    ----------
    family : str
        Either ``"gaussian"`` or ``"linear"``.
    lengthscale : float, optional
        Positive lengthscale; required for (and only meaningful to) the
        Gaussian family.
    """

    family: str
    lengthscale: float | None = None

    def __post_init__(self):
        if self.family not in ("gaussian", "linear"):
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.family == "gaussian":
            if self.lengthscale is None or not np.isfinite(self.lengthscale) or self.lengthscale <= 0:
                raise ValueError("gaussian kernel requires a positive finite lengthscale")
        elif self.lengthscale is not None:
            raise ValueError("linear kernel takes no lengthscale")


def _as_points(W) -> np.ndarray:
    """Coerce a point set to a 2-D float array of shape (n, d)."""
    W = np.asarray(W, dtype=float)
    if W.ndim == 0:
        W = W.reshape(1, 1)
    elif W.ndim == 1:
        # a 1-D array is a set of scalar points, one per entry
        W = W[:, None]
    elif W.ndim != 2:
        raise ValueError(f"point set must be at most 2-D, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise ValueError("non-finite entries in point set")
    return W


def eval_kernel(spec: KernelSpec, w, w2) -> float:
    """Evaluate a single kernel entry k(w, w2).

    Parameters
    ----------
    spec : KernelSpec
    w, w2 : array_like
        Vectors of equal dimension (scalars are treated as 1-D).

    Returns
    -------
    float
        ``exp(-||w - w2||^2 / (2 l^2))`` for Gaussian, ``<w, w2>`` for linear.
    """
    w = np.atleast_1d(np.asarray(w, dtype=float))
    w2 = np.atleast_1d(np.asarray(w2, dtype=float))
    if w.shape != w2.shape:
        raise ValueError(f"dimension mismatch: {w.shape} vs {w2.shape}")
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(w2))):
        raise ValueError("non-finite kernel input")
    if spec.family == "linear":
        return float(w @ w2)
    sq = float(np.sum((w - w2) ** 2))
    return float(np.exp(-sq / (2.0 * spec.lengthscale**2)))


def gram(spec: KernelSpec, W1, W2) -> np.ndarray:
    """Dense Gram matrix with entry (i, j) = k(W1_i, W2_j).

    Parameters
    ----------
    spec : KernelSpec
    W1, W2 : array_like
        Point sets of shape (n1, d) and (n2, d); 1-D inputs are scalar points.

    Returns
    -------
    ndarray of shape (n1, n2)
    """
    W1 = _as_points(W1)
    W2 = _as_points(W2)
    if W1.shape[0] == 0 or W2.shape[0] == 0:
        raise ValueError("empty point set")
    if W1.shape[1] != W2.shape[1]:
        raise ValueError(f"dimension mismatch: {W1.shape[1]} vs {W2.shape[1]}")
    if spec.family == "linear":
        return W1 @ W2.T
    D = cdist(W1, W2, metric="sqeuclidean")
    D *= -1.0 / (2.0 * spec.lengthscale**2)
    return np.exp(D, out=D)


def product_gram(kA: KernelSpec, kX: KernelSpec, A1, X1, A2, X2) -> np.ndarray:
    """Gram of the product kernel k_AX((a,x), (a',x')) = k_A(a,a') * k_X(x,x').

    A1/X1 (and A2/X2) must be aligned point sets of equal length; the result
    is the Hadamard product of the two factor Grams.
    """
    A1, X1, A2, X2 = _as_points(A1), _as_points(X1), _as_points(A2), _as_points(X2)
    if len(A1) != len(X1) or len(A2) != len(X2):
        raise ValueError("action/covariate point sets must have equal length")
    return gram(kA, A1, A2) * gram(kX, X1, X2)


def median_heuristic(points) -> float:
    """Median of pairwise Euclidean distances over all i < j pairs.

    Unsquared distances, strict upper triangle.  Raises on point sets whose
    median distance is zero (no usable scale).
    """
    P = _as_points(points)
    if len(P) < 2:
        raise ValueError("median heuristic needs at least 2 points")
    med = float(np.median(pdist(P, metric="euclidean")))
    if med <= 0.0:
        raise ValueError("degenerate point set")
    return med


def gaussian_median_spec(points) -> KernelSpec:
    """Gaussian KernelSpec with the median-heuristic lengthscale of `points`."""
    return KernelSpec("gaussian", median_heuristic(points))
