"""Logged-bandit datasets, policy families, and seeded synthetic scenarios.

Policies are conditional action laws pi(a | x) that can evaluate densities
(or probability masses) and draw samples.  Scenario generators produce the
logged data plus the logging/target policies for every synthetic environment:
the four test scenarios (continuous treatments, linear outcomes), the four
herding scenarios (uniform/logistic logging x nonlinear/quadratic outcomes),
and the item-recommendation environment (ordered K-lists, binary clicks).

All randomness flows through counter-based Philox streams derived from
(seed, spawn_key) pairs, so replications are independent and every dataset is
byte-reproducible from its ScenarioSpec.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Philox generator for the stream identified by (seed, key...)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def child_seed(seed: int, *key: int) -> int:
    """A 64-bit seed for an independent child stream (scenario x replication)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# logged data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LoggedDataset:
    """n logged triples (x_i, a_i, y_i) drawn under a logging policy.

    A is a float vector of shape (n,) for continuous scalar treatments, or an
    int matrix of shape (n, K) of item indices for recommendation lists.
    """

    X: np.ndarray
    A: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Y = np.asarray(self.Y, dtype=float).ravel()
        A = np.asarray(self.A)
        if A.ndim == 2:
            A = A.astype(int)
            if any(len(set(row)) != len(row) for row in A.tolist()):
                raise ValueError("recommendation lists must not repeat items")
        else:
            A = A.astype(float).ravel()
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Y", Y)
        if not (len(X) == len(A) == len(Y)):
            raise ValueError("X, A, Y must have a common length")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("non-finite entries in logged data")
        if A.dtype == float and not np.all(np.isfinite(A)):
            raise ValueError("non-finite entries in logged actions")

    @property
    def n(self) -> int:
        return len(self.Y)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def rows(self, idx) -> "LoggedDataset":
        """Row subset (used for sample splitting)."""
        return LoggedDataset(self.X[idx], self.A[idx], self.Y[idx])

    def to_csv(self, path) -> None:
        d = self.d
        if self.A.ndim == 1:
            header = [f"x_{j}" for j in range(d)] + ["a", "y"]
        else:
            K = self.A.shape[1]
            header = [f"x_{j}" for j in range(d)] + [f"a_{k}" for k in range(K)] + ["y"]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(header)
            for i in range(self.n):
                row = [repr(float(v)) for v in self.X[i]]
                if self.A.ndim == 1:
                    row.append(repr(float(self.A[i])))
                else:
                    row.extend(str(int(v)) for v in self.A[i])
                row.append(repr(float(self.Y[i])))
                wr.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "LoggedDataset":
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            try:
                header = next(rd)
            except StopIteration:
                raise ValueError(f"{path}: empty file") from None
            x_cols = [h for h in header if h.startswith("x_")]
            a_cols = [h for h in header if h == "a" or h.startswith("a_")]
            if not x_cols or not a_cols or header[-1] != "y":
                raise ValueError(f"{path}: unrecognized header {header!r}")
            list_actions = a_cols != ["a"]
            X, A, Y = [], [], []
            for ln, row in enumerate(rd, start=2):
                if len(row) != len(header):
                    raise ValueError(f"{path}:{ln}: expected {len(header)} fields, got {len(row)}")
                try:
                    vals = [float(v) for v in row[: len(x_cols)]]
                    acts = row[len(x_cols) : len(x_cols) + len(a_cols)]
                    a = [int(v) for v in acts] if list_actions else float(acts[0])
                    y = float(row[-1])
                except ValueError as exc:
                    raise ValueError(f"{path}:{ln}: {exc}") from None
                X.append(vals)
                A.append(a)
                Y.append(y)
        return cls(np.array(X), np.array(A), np.array(Y))


# ---------------------------------------------------------------------------
# policy families
# ---------------------------------------------------------------------------


class Policy:
    """Conditional action law pi(a | x)."""

    def density(self, a, x) -> float:
        """Density (continuous families) or probability mass at action a."""
        raise NotImplementedError

    def sample(self, x, rng: np.random.Generator):
        raise NotImplementedError

    def density_many(self, A, X) -> np.ndarray:
        return np.array([self.density(a, x) for a, x in zip(A, X)])

    def sample_many(self, X, rng: np.random.Generator):
        return np.array([self.sample(x, rng) for x in X])

    def action_feat(self, A) -> np.ndarray:
        """Map raw actions to the real vectors the kernels operate on."""
        A = np.asarray(A, dtype=float)
        return A.reshape(-1, 1)

    def enumerate_support(self, x):
        """(actions, probabilities) for enumerable laws; None otherwise."""
        return None


@dataclass(frozen=True)
class GaussianLinear(Policy):
    """a | x ~ N(x'w, sd^2)."""

    w: np.ndarray
    sd: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float).ravel())
        if not (np.isfinite(self.sd) and self.sd > 0):
            raise ValueError("sd must be > 0")

    def density(self, a, x) -> float:
        return float(stats.norm.pdf(a, loc=float(np.dot(x, self.w)), scale=self.sd))

    def sample(self, x, rng):
        return float(rng.normal(float(np.dot(x, self.w)), self.sd))

    def density_many(self, A, X):
        return stats.norm.pdf(np.asarray(A, dtype=float), loc=np.asarray(X) @ self.w, scale=self.sd)

    def sample_many(self, X, rng):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return rng.normal(X @ self.w, self.sd)


@dataclass(frozen=True)
class GaussianMixture(Policy):
    """Mixture of GaussianLinear components: ((weight, w, sd), ...)."""

    components: tuple

    def __post_init__(self):
        comps = tuple(
            (float(wt), np.asarray(w, dtype=float).ravel(), float(sd)) for wt, w, sd in self.components
        )
        object.__setattr__(self, "components", comps)
        wts = np.array([c[0] for c in comps])
        if np.any(wts < 0) or abs(wts.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if any(c[2] <= 0 for c in comps):
            raise ValueError("sd must be > 0")

    def density(self, a, x) -> float:
        return float(
            sum(wt * stats.norm.pdf(a, loc=float(np.dot(x, w)), scale=sd) for wt, w, sd in self.components)
        )

    def density_many(self, A, X):
        A = np.asarray(A, dtype=float)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.zeros(len(A))
        for wt, w, sd in self.components:
            out += wt * stats.norm.pdf(A, loc=X @ w, scale=sd)
        return out

    def sample(self, x, rng):
        wt, w, sd = self.components[rng.choice(len(self.components), p=[c[0] for c in self.components])]
        return float(rng.normal(float(np.dot(x, w)), sd))

    def sample_many(self, X, rng):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        ks = rng.choice(len(self.components), size=len(X), p=[c[0] for c in self.components])
        locs = np.stack([X @ w for _, w, _ in self.components], axis=1)
        sds = np.array([sd for _, _, sd in self.components])
        return rng.normal(locs[np.arange(len(X)), ks], sds[ks])


@dataclass(frozen=True)
class Uniform(Policy):
    """a ~ U(lo, hi), independent of x."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")

    def density(self, a, x) -> float:
        return 1.0 / (self.hi - self.lo) if self.lo <= a <= self.hi else 0.0

    def density_many(self, A, X):
        A = np.asarray(A, dtype=float)
        return np.where((A >= self.lo) & (A <= self.hi), 1.0 / (self.hi - self.lo), 0.0)

    def sample(self, x, rng):
        return float(rng.uniform(self.lo, self.hi))

    def sample_many(self, X, rng):
        return rng.uniform(self.lo, self.hi, size=len(np.atleast_2d(X)))


#: scale giving a unit-variance logistic distribution (variance = pi^2 s^2 / 3)
UNIT_LOGISTIC_SCALE = math.sqrt(3.0) / math.pi


@dataclass(frozen=True)
class LogisticLinear(Policy):
    """a | x ~ Logistic(location x'w, scale s); default scale has unit variance."""

    w: np.ndarray
    scale: float = UNIT_LOGISTIC_SCALE

    def __post_init__(self):
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float).ravel())
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError("scale must be > 0")

    def density(self, a, x) -> float:
        z = (a - float(np.dot(x, self.w))) / self.scale
        return float(np.exp(-z) / (self.scale * (1.0 + np.exp(-z)) ** 2)) if z >= 0 else float(
            np.exp(z) / (self.scale * (1.0 + np.exp(z)) ** 2)
        )

    def density_many(self, A, X):
        A = np.asarray(A, dtype=float)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        z = np.abs(A - X @ self.w) / self.scale
        e = np.exp(-z)  # symmetric density, evaluate on the stable side
        return e / (self.scale * (1.0 + e) ** 2)

    def sample(self, x, rng):
        return float(rng.logistic(float(np.dot(x, self.w)), self.scale))

    def sample_many(self, X, rng):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return rng.logistic(X @ self.w, self.scale)


@dataclass(frozen=True)
class FiniteActions(Policy):
    """Finite scalar action set with fixed probabilities, independent of x."""

    actions: tuple
    probs: tuple

    def __post_init__(self):
        acts = tuple(float(a) for a in self.actions)
        p = np.asarray(self.probs, dtype=float)
        if len(acts) != len(p) or len(acts) == 0:
            raise ValueError("actions and probs must be nonempty and aligned")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("probs must be nonnegative and sum to 1")
        object.__setattr__(self, "actions", acts)
        object.__setattr__(self, "probs", tuple(float(v) for v in p))

    def density(self, a, x) -> float:
        for act, p in zip(self.actions, self.probs):
            if a == act:
                return p
        return 0.0

    def sample(self, x, rng):
        return self.actions[rng.choice(len(self.actions), p=self.probs)]

    def sample_many(self, X, rng):
        idx = rng.choice(len(self.actions), size=len(np.atleast_2d(X)), p=self.probs)
        return np.asarray(self.actions, dtype=float)[idx]

    def enumerate_support(self, x):
        return list(self.actions), list(self.probs)


@dataclass(frozen=True)
class MultinomialList(Policy):
    """Ordered K-lists of items sampled without replacement.

    For the user whose feature vector is x (looked up in `users`), item l is
    selected at each position with probability proportional to exp(b'v_l)
    among the items not yet placed, where b is that user's row of B.
    """

    users: np.ndarray  # (N, d) user features, the possible x values
    B: np.ndarray  # (N, d) per-user selection parameters
    items: np.ndarray  # (M, d) item features
    K: int
    _lookup: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        users = np.atleast_2d(np.asarray(self.users, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        items = np.atleast_2d(np.asarray(self.items, dtype=float))
        if users.shape != B.shape:
            raise ValueError("users and B must be aligned (N, d) matrices")
        if not 1 <= self.K <= len(items):
            raise ValueError("need 1 <= K <= number of items")
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "_lookup", {u.tobytes(): j for j, u in enumerate(users)})

    def _user(self, x) -> int:
        key = np.ascontiguousarray(np.asarray(x, dtype=float).ravel()).tobytes()
        try:
            return self._lookup[key]
        except KeyError:
            raise ValueError("x is not a known user feature vector") from None

    def _scores(self, x) -> np.ndarray:
        return self.items @ self.B[self._user(x)]

    def density(self, a, x) -> float:
        a = np.asarray(a, dtype=int).ravel()
        if len(a) != self.K or len(set(a.tolist())) != self.K:
            raise ValueError("action must be an ordered list of K distinct item indices")
        e = np.exp(self._scores(x))
        mass, remaining = 1.0, float(e.sum())
        for idx in a:
            mass *= e[idx] / remaining
            remaining -= e[idx]
        return float(mass)

    def density_many(self, A, X):
        A = np.asarray(A, dtype=int)
        J = np.array([self._user(x) for x in np.atleast_2d(X)])
        E = np.exp(self.B[J] @ self.items.T)  # (n, M)
        chosen = np.take_along_axis(E, A, axis=1)  # (n, K)
        remaining = E.sum(axis=1, keepdims=True) - np.concatenate(
            [np.zeros((len(A), 1)), np.cumsum(chosen, axis=1)[:, :-1]], axis=1
        )
        return np.prod(chosen / remaining, axis=1)

    def sample(self, x, rng):
        # Gumbel top-K draw == sequential softmax without replacement
        s = self._scores(x)
        return np.argsort(-(s + rng.gumbel(size=len(s))), kind="stable")[: self.K].astype(int)

    def sample_many(self, X, rng):
        J = np.array([self._user(x) for x in np.atleast_2d(X)])
        S = self.B[J] @ self.items.T + rng.gumbel(size=(len(J), len(self.items)))
        return np.argsort(-S, axis=1, kind="stable")[:, : self.K].astype(int)

    def action_feat(self, A) -> np.ndarray:
        A = np.asarray(A, dtype=int)
        if A.ndim == 1:
            A = A[None, :]
        return self.items[A].mean(axis=1)

    def enumerate_support(self, x):
        n_lists = math.perm(len(self.items), self.K)
        if n_lists > 2000:
            raise ValueError(f"action space too large to enumerate ({n_lists} ordered lists)")
        e = np.exp(self._scores(x))
        acts, probs = [], []
        for perm in itertools.permutations(range(len(self.items)), self.K):
            mass, remaining = 1.0, float(e.sum())
            for idx in perm:
                mass *= e[idx] / remaining
                remaining -= e[idx]
            acts.append(np.array(perm, dtype=int))
            probs.append(float(mass))
        return acts, probs


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------

TEST_KINDS = ("I", "II", "III", "IV")
HERD_KINDS = (
    "herd-logistic-nonlinear",
    "herd-logistic-quadratic",
    "herd-uniform-nonlinear",
    "herd-uniform-quadratic",
)
OPE_KIND = "ope-recommend"
ALL_KINDS = TEST_KINDS + HERD_KINDS + (OPE_KIND,)

#: herding-scenario policy constants: the target policy concentrates its
#: actions (small mean-weight norm and sd) so the counterfactual outcome
#: distribution is tight, while both logging designs spread actions across
#: a range that fully covers the target's mass
HERD_TARGET_SD = 0.25
HERD_W_SCALE = 0.25
HERD_UNIFORM_RANGE = (-2.0, 2.0)


@dataclass(frozen=True)
class ScenarioSpec:
    """Everything needed to reproduce one synthetic environment draw."""

    kind: str
    n: int
    d: int = 5
    seed: int = 0
    sigma: float = 1.0  # outcome noise sd (continuous-outcome scenarios)
    gamma: float = 1.0  # treatment-effect strength (test scenarios)
    delta: float = 2.0  # mean-shift size (Scenarios II and IV)
    alpha: float = 1.0  # logging/target similarity (recommendation scenario)
    M: int = 6  # catalog size (recommendation scenario)
    n_users: int = 200  # user count (recommendation scenario)
    K: int = 4  # list length (recommendation scenario)

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.n <= 0 or self.d <= 0:
            raise ValueError("need n > 0 and d > 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not -1.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [-1, 1]")
        if self.kind == OPE_KIND and not 1 <= self.K <= self.M:
            raise ValueError("need 1 <= K <= M")


@dataclass(frozen=True)
class GeneratedScenario:
    data: LoggedDataset
    pi0: Policy
    pi: Policy
    pi_prime: Policy | None
    oracle: Callable  # (policy, m, rng) -> m outcomes under that policy


def outcome_betas(n: int, d: int) -> np.ndarray:
    """Per-sample outcome coefficient vectors.

    Row i is the linearly increasing base vector linspace(0.1, 0.5, d)
    cyclically rotated by i mod d, so beta varies across samples while
    keeping a constant norm.
    """
    base = np.linspace(0.1, 0.5, d)
    return np.stack([np.roll(base, i % d) for i in range(n)])


def _kind_index(kind: str) -> int:
    return ALL_KINDS.index(kind)


def _test_policies(spec: ScenarioSpec):
    w = np.full(spec.d, 1.0 / math.sqrt(spec.d))
    ones = np.ones(spec.d)
    pi0 = GaussianLinear(w, 1.0)
    pi = GaussianLinear(w, 1.0)
    if spec.kind == "I":
        pi_prime = GaussianLinear(w, 1.0)
    elif spec.kind == "II":
        pi_prime = GaussianLinear(w + spec.delta * ones, 1.0)
    elif spec.kind == "III":
        pi_prime = GaussianMixture(((0.5, w + ones, 1.0), (0.5, w - ones, 1.0)))
    else:  # IV: only one component shifted
        pi_prime = GaussianMixture(((0.5, w + spec.delta * ones, 1.0), (0.5, w, 1.0)))
    return pi0, pi, pi_prime


def _herd_policies(spec: ScenarioSpec):
    w = HERD_W_SCALE * np.full(spec.d, 1.0 / math.sqrt(spec.d))
    if "logistic" in spec.kind:
        pi0 = LogisticLinear(w)
    else:
        pi0 = Uniform(*HERD_UNIFORM_RANGE)
    return pi0, GaussianLinear(w, HERD_TARGET_SD)


def _continuous_outcomes(spec: ScenarioSpec, X, A, rng) -> np.ndarray:
    betas = outcome_betas(len(X), spec.d)
    lin = np.einsum("ij,ij->i", X, betas)
    if spec.kind in TEST_KINDS:
        mean = lin + spec.gamma * A
    elif "nonlinear" in spec.kind:
        mean = np.sin(lin) + A**2
    else:
        mean = lin**2 + A**2
    return mean + spec.sigma * rng.standard_normal(len(X))


def generate(spec: ScenarioSpec) -> GeneratedScenario:
    """Draw the logged dataset and policies for a scenario."""
    kid = _kind_index(spec.kind)
    if spec.kind == OPE_KIND:
        return _generate_recommend(spec, kid)
    rng_x = rng_stream(spec.seed, kid, 0)
    rng_a = rng_stream(spec.seed, kid, 1)
    rng_e = rng_stream(spec.seed, kid, 2)
    X = rng_x.standard_normal((spec.n, spec.d))
    if spec.kind in TEST_KINDS:
        pi0, pi, pi_prime = _test_policies(spec)
    else:
        pi0, pi = _herd_policies(spec)
        pi_prime = None
    A = pi0.sample_many(X, rng_a)
    Y = _continuous_outcomes(spec, X, A, rng_e)
    data = LoggedDataset(X, A, Y)

    def oracle(policy: Policy, m: int, rng: np.random.Generator) -> np.ndarray:
        return oracle_outcomes(spec, policy, m, rng)

    return GeneratedScenario(data, pi0, pi, pi_prime, oracle)


def _generate_recommend(spec: ScenarioSpec, kid: int) -> GeneratedScenario:
    rng_env = rng_stream(spec.seed, kid, 0)
    users = rng_env.standard_normal((spec.n_users, spec.d))
    items = rng_env.standard_normal((spec.M, spec.d))
    masks = rng_env.random((spec.n_users, spec.d)) < 0.5
    b_star = masks * users  # target parameters p_j (.) x_j
    pi = MultinomialList(users, b_star, items, spec.K)
    pi0 = MultinomialList(users, spec.alpha * b_star, items, spec.K)

    rng_log = rng_stream(spec.seed, kid, 1)
    J = rng_log.integers(0, spec.n_users, size=spec.n)
    X = users[J]
    A = pi0.sample_many(X, rng_log)
    eps = rng_log.standard_normal(spec.n)
    theta = _click_probability(pi.action_feat(A), X, eps)
    Y = (rng_log.random(spec.n) < theta).astype(float)
    data = LoggedDataset(X, A, Y)

    def oracle(policy: Policy, m: int, rng: np.random.Generator) -> np.ndarray:
        return oracle_outcomes(spec, policy, m, rng, _env=(users, items))

    return GeneratedScenario(data, pi0, pi, None, oracle)


def _click_probability(a_feat, X, eps) -> np.ndarray:
    z = np.einsum("ij,ij->i", np.atleast_2d(a_feat), np.atleast_2d(X)) - eps
    return 1.0 / (1.0 + np.exp(-z))


def oracle_outcomes(spec: ScenarioSpec, policy: Policy, m: int, rng: np.random.Generator, _env=None) -> np.ndarray:
    """m i.i.d. outcomes drawn directly under `policy` (ground truth only).

    Used by evaluation harnesses to sample the true counterfactual outcome
    distribution; estimators never see these draws.
    """
    if spec.kind == OPE_KIND:
        if _env is None:
            raise ValueError("recommendation oracle requires the generated environment")
        users, _ = _env
        J = rng.integers(0, len(users), size=m)
        X = users[J]
        A = policy.sample_many(X, rng)
        theta = _click_probability(policy.action_feat(A), X, rng.standard_normal(m))
        return (rng.random(m) < theta).astype(float)
    X = rng.standard_normal((m, spec.d))
    A = policy.sample_many(X, rng)
    return _continuous_outcomes(spec, X, A, rng)


def oracle_click_rate(policy: MultinomialList, draws: int, rng: np.random.Generator) -> float:
    """True expected click probability of a recommendation policy.

    Averages theta (not the Bernoulli draw) over users, lists, and click
    noise, which has the same mean and far less Monte-Carlo variance.
    """
    J = rng.integers(0, len(policy.users), size=draws)
    X = policy.users[J]
    A = policy.sample_many(X, rng)
    theta = _click_probability(policy.action_feat(A), X, rng.standard_normal(draws))
    return float(theta.mean())


def empirical_click_rate(policy: MultinomialList, X: np.ndarray, rng: np.random.Generator) -> float:
    """Click rate of `policy` on a fixed roster of user rows.

    Draws one list per row and averages the click probability (the exact
    conditional mean of the binary outcome given list and noise).  Evaluating
    a target policy on the logged rows themselves shares the realized user
    mix with the estimators, so off-policy error measurements are not charged
    for user-sampling noise.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    A = policy.sample_many(X, rng)
    theta = _click_probability(policy.action_feat(A), X, rng.standard_normal(len(X)))
    return float(theta.mean())
