"""SAGA with non-uniform sampling over a generic finite sum, plus its convergence bounds.

Two variants share the estimator

    nu = (f'_j(x) - s_j) / (n p_j) + (1/n) sum_i s_i,    j ~ p

(a) refreshes the memory of the drawn term ``j``; (b) draws ``j``
proportionally to ``L_j`` and refreshes the memory of a second, uniformly
drawn term ``r``.  The bound helpers return the expected squared-distance
guarantees for both, so Monte-Carlo runs on problems with known constants
can be checked against them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ContractError, ConvergenceError
from .runlog import make_rng


class FiniteSumObjective:
    """``f(x) = (1/n) sum_i f_i(x)``.  Subclasses provide ``loss``/``grad`` per term."""

    n: int
    dim: int
    mu: float
    lipschitz: np.ndarray | None = None

    def loss(self, i: int, x: np.ndarray) -> float:
        raise NotImplementedError

    def grad(self, i: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grads(self, idx: np.ndarray, X: np.ndarray) -> np.ndarray:
        """Row ``s`` is ``f'_{idx[s]}(X[s])``."""
        return np.stack([self.grad(int(i), x) for i, x in zip(idx, X)])

    def grad_all(self, x: np.ndarray) -> np.ndarray:
        return np.stack([self.grad(i, x) for i in range(self.n)])

    def value(self, x: np.ndarray) -> float:
        return float(np.mean([self.loss(i, x) for i in range(self.n)]))

    def full_grad(self, x: np.ndarray) -> np.ndarray:
        return self.grad_all(x).mean(axis=0)


class RidgeLogistic(FiniteSumObjective):
    """``f_i(x) = log(1 + exp(-b_i a_i.x)) + lam/2 ||x||^2`` with ``L_i = ||a_i||^2/4 + lam``, ``mu = lam``."""

    def __init__(self, A: np.ndarray, b: np.ndarray, lam: float):
        if not lam > 0:
            raise ContractError("ridge weight must be positive")
        self.A = np.asarray(A, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.lam = float(lam)
        self.n, self.dim = self.A.shape
        self.mu = self.lam
        self.lipschitz = 0.25 * np.sum(self.A**2, axis=1) + self.lam

    def loss(self, i, x):
        z = -self.b[i] * (self.A[i] @ x)
        return float(np.logaddexp(0.0, z) + 0.5 * self.lam * (x @ x))

    def grad(self, i, x):
        z = self.b[i] * (self.A[i] @ x)
        return -self.b[i] * expit(-z) * self.A[i] + self.lam * x

    def grads(self, idx, X):
        a = self.A[idx]
        b = self.b[idx]
        z = b * np.einsum("sd,sd->s", a, X)
        return -(b * expit(-z))[:, None] * a + self.lam * X

    def grad_all(self, x):
        z = self.b * (self.A @ x)
        return -(self.b * expit(-z))[:, None] * self.A + self.lam * x

    def value(self, x):
        z = -self.b * (self.A @ x)
        return float(np.mean(np.logaddexp(0.0, z)) + 0.5 * self.lam * (x @ x))

    def hessian(self, x):
        z = self.b * (self.A @ x)
        s = expit(z) * expit(-z)
        return (self.A.T * s) @ self.A / self.n + self.lam * np.eye(self.dim)


class DiagonalQuadratic(FiniteSumObjective):
    """``f_i(x) = 1/2 sum_k c_ik (x_k - z_ik)^2``; ``L_i = max_k c_ik``, ``mu = min c``."""

    def __init__(self, C: np.ndarray, Z: np.ndarray):
        self.C = np.asarray(C, dtype=float)
        self.Z = np.asarray(Z, dtype=float)
        if np.any(self.C <= 0):
            raise ContractError("curvatures must be positive")
        self.n, self.dim = self.C.shape
        self.mu = float(self.C.min())
        self.lipschitz = self.C.max(axis=1)

    def loss(self, i, x):
        return float(0.5 * np.sum(self.C[i] * (x - self.Z[i]) ** 2))

    def grad(self, i, x):
        return self.C[i] * (x - self.Z[i])

    def grads(self, idx, X):
        return self.C[idx] * (X - self.Z[idx])

    def grad_all(self, x):
        return self.C * (x - self.Z)

    def optimum(self) -> np.ndarray:
        return (self.C * self.Z).sum(axis=0) / self.C.sum(axis=0)


def ridge_logistic_problem(n: int = 10, dim: int = 2, lam: float = 0.1, seed: int = 0,
                           lipschitz: np.ndarray | None = None) -> RidgeLogistic:
    """Random separable-ish logistic problem.

    With ``lipschitz`` given, each ``a_i`` is rescaled so that its term has
    exactly that constant (which must exceed ``lam``).
    """
    rng = make_rng(seed, "ridge-logistic")
    A = rng.standard_normal((n, dim))
    truth = rng.standard_normal(dim)
    b = np.where(A @ truth + 0.5 * rng.standard_normal(n) >= 0, 1.0, -1.0)
    if lipschitz is not None:
        target = np.asarray(lipschitz, dtype=float)
        if target.shape != (n,) or np.any(target <= lam):
            raise ContractError("target constants must have length n and exceed lam")
        A *= (np.sqrt(4.0 * (target - lam)) / np.linalg.norm(A, axis=1))[:, None]
    return RidgeLogistic(A, b, lam)


def diagonal_quadratic_problem(n: int = 5, dim: int = 3, seed: int = 0, spread: float = 4.0) -> DiagonalQuadratic:
    rng = make_rng(seed, "diag-quadratic")
    C = np.exp(rng.uniform(0.0, np.log(spread), size=(n, dim)))
    Z = rng.standard_normal((n, dim))
    return DiagonalQuadratic(C, Z)


def solve_optimum(problem: FiniteSumObjective, tol: float = 1e-12, max_iter: int = 200) -> np.ndarray:
    """Minimizer of the finite sum: closed form for quadratics, damped Newton for logistic."""
    if isinstance(problem, DiagonalQuadratic):
        return problem.optimum()
    if not isinstance(problem, RidgeLogistic):
        raise ContractError("no exact solver for this problem type")
    x = np.zeros(problem.dim)
    for _ in range(max_iter):
        g = problem.full_grad(x)
        if np.linalg.norm(g) <= tol:
            return x
        step = np.linalg.solve(problem.hessian(x), g)
        t, f0 = 1.0, problem.value(x)
        while problem.value(x - t * step) > f0 - 0.25 * t * (g @ step) and t > 1e-10:
            t *= 0.5
        x = x - t * step
    g = problem.full_grad(x)
    if np.linalg.norm(g) > tol:
        raise ConvergenceError(f"Newton stopped at gradient norm {np.linalg.norm(g):.3e}")
    return x


# ---------------------------------------------------------------------------
# state and steps


@dataclass
class SagaState:
    x: np.ndarray
    grads: np.ndarray  # stored f'_i(phi_i), shape (n, dim)
    grad_sum: np.ndarray
    p: np.ndarray

    @classmethod
    def start(cls, problem: FiniteSumObjective, x0: np.ndarray, p: np.ndarray | None = None) -> "SagaState":
        """Memory initialized with every term's gradient at ``x0``."""
        n = problem.n
        p = np.full(n, 1.0 / n) if p is None else np.asarray(p, dtype=float)
        check_distribution(p, n)
        x0 = np.array(x0, dtype=float)
        G = problem.grad_all(x0)
        return cls(x0, G, G.sum(axis=0), p)

    def recomputed_sum(self) -> np.ndarray:
        return self.grads.sum(axis=0)


def check_distribution(p: np.ndarray, n: int) -> None:
    if p.shape != (n,) or np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-12:
        raise ContractError("sampling distribution must be positive and sum to one")


def lipschitz_distribution(problem: FiniteSumObjective) -> np.ndarray:
    L = np.asarray(problem.lipschitz, dtype=float)
    return L / L.sum()


def estimator(state: SagaState, j: int, g_j: np.ndarray) -> np.ndarray:
    n = len(state.p)
    return (g_j - state.grads[j]) / (n * state.p[j]) + state.grad_sum / n


def _replace(state: SagaState, r: int, g: np.ndarray) -> None:
    state.grad_sum += g - state.grads[r]
    state.grads[r] = g


def saga_nus_a_step(problem, state: SagaState, alpha: float, j: int) -> SagaState:
    """One step of variant (a) with drawn index ``j``; the drawn term's memory is refreshed."""
    if not alpha > 0:
        raise ContractError("step size must be positive")
    g = problem.grad(j, state.x)
    nu = estimator(state, j, g)
    state.x = state.x - alpha * nu
    _replace(state, j, g)
    return state


def saga_nus_b_step(problem, state: SagaState, gamma: float, j: int, r: int) -> SagaState:
    """One step of variant (b): ``j`` drives the estimator, ``r`` has its memory refreshed at the old ``x``."""
    if not gamma > 0:
        raise ContractError("step size must be positive")
    g = problem.grad(j, state.x)
    g_r = g if r == j else problem.grad(r, state.x)
    nu = estimator(state, j, g)
    state.x = state.x - gamma * nu
    _replace(state, r, g_r)
    return state


def default_step(problem, variant: str, p: np.ndarray | None = None) -> float:
    n, mu = problem.n, problem.mu
    L = np.asarray(problem.lipschitz, dtype=float)
    if variant == "a":
        p = np.full(n, 1.0 / n) if p is None else p
        return n * float(p.min()) / (4.0 * L.max() + n * mu)
    if variant == "b":
        return 1.0 / (4.0 * L.mean())
    raise ContractError(f"unknown variant {variant!r}")


def draw_indices(seed: int, variant: str, p: np.ndarray, steps: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Per-run index stream: ``j ~ p`` for every step, plus uniform ``r`` for variant (b)."""
    rng = make_rng(seed, f"saga-{variant}")
    n = len(p)
    js = rng.choice(n, size=steps, p=p)
    rs = rng.integers(n, size=steps) if variant == "b" else None
    return js, rs


def run_single(problem, variant: str, steps: int, seed: int, x0=None, step=None, p=None,
               checkpoints=()) -> tuple[SagaState, dict]:
    """Reference loop over the single-state step functions; returns state and ``{k: x^k}``."""
    n = problem.n
    if p is None:
        p = np.full(n, 1.0 / n) if variant == "a" else lipschitz_distribution(problem)
    step = default_step(problem, variant, p) if step is None else step
    x0 = np.zeros(problem.dim) if x0 is None else x0
    state = SagaState.start(problem, x0, p)
    js, rs = draw_indices(seed, variant, state.p, steps)
    snaps = {}
    want = set(checkpoints)
    if 0 in want:
        snaps[0] = state.x.copy()
    for k in range(steps):
        if variant == "a":
            saga_nus_a_step(problem, state, step, int(js[k]))
        else:
            saga_nus_b_step(problem, state, step, int(js[k]), int(rs[k]))
        if k + 1 in want:
            snaps[k + 1] = state.x.copy()
    return state, snaps


def run_ensemble(problem, variant: str, steps: int, seeds, x_star: np.ndarray, x0=None, step=None, p=None,
                 checkpoints=None) -> dict:
    """Run one independent chain per seed in lockstep; returns squared distances to ``x_star``.

    The arithmetic is the vectorized form of :func:`run_single` with the same
    index streams, so chain ``s`` reproduces ``run_single(seed=seeds[s])``.
    Result keys: ``k`` (checkpoint steps), ``dist_sq`` (seeds x checkpoints),
    ``mean`` and ``step``.
    """
    n, dim = problem.n, problem.dim
    seeds = list(seeds)
    S = len(seeds)
    if p is None:
        p = np.full(n, 1.0 / n) if variant == "a" else lipschitz_distribution(problem)
    p = np.asarray(p, dtype=float)
    check_distribution(p, n)
    step = default_step(problem, variant, p) if step is None else step
    x0 = np.zeros(dim) if x0 is None else np.asarray(x0, dtype=float)
    ks = np.arange(steps + 1) if checkpoints is None else np.array(sorted(set(checkpoints)))
    if ks.max() > steps:
        raise ContractError("checkpoint beyond the step budget")

    draws = [draw_indices(s, variant, p, steps) for s in seeds]
    J = np.stack([d[0] for d in draws], axis=1)  # steps x S
    R = np.stack([d[1] for d in draws], axis=1) if variant == "b" else J

    X = np.tile(x0, (S, 1))
    G = np.tile(problem.grad_all(x0), (S, 1, 1))
    Gsum = G.sum(axis=1)
    rows = np.arange(S)
    out = np.empty((S, len(ks)))
    pos = {int(k): c for c, k in enumerate(ks)}
    if 0 in pos:
        out[:, pos[0]] = np.sum((X - x_star) ** 2, axis=1)
    for k in range(steps):
        j, r = J[k], R[k]
        g = problem.grads(j, X)
        g_r = g if variant == "a" else np.where((r == j)[:, None], g, problem.grads(r, X))
        nu = (g - G[rows, j]) / (n * p[j])[:, None] + Gsum / n
        X = X - step * nu
        Gsum += g_r - G[rows, r]
        G[rows, r] = g_r
        c = pos.get(k + 1)
        if c is not None:
            out[:, c] = np.sum((X - x_star) ** 2, axis=1)
    return {"k": ks, "dist_sq": out, "mean": out.mean(axis=0), "step": step}


# ---------------------------------------------------------------------------
# unbiasedness and bounds


def unbiasedness_check(problem, state: SagaState) -> float:
    """``||sum_j p_j nu(j) - f'(x)||_inf`` with the expectation taken by enumerating ``j``."""
    n = problem.n
    G = problem.grad_all(state.x)
    mean = np.zeros(problem.dim)
    for j in range(n):
        mean += state.p[j] * estimator(state, j, G[j])
    return float(np.max(np.abs(mean - G.mean(axis=0))))


@dataclass(frozen=True)
class BoundConstants:
    n: int
    mu: float
    L: float  # max_i L_i
    Lbar: float
    p: np.ndarray
    dist0_sq: float  # ||x0 - x*||^2
    grad_gaps: np.ndarray  # ||f'_i(x0) - f'_i(x*)||^2 per term
    f_gap: float  # f(x0) - f(x*)


def bound_constants(problem, x0: np.ndarray, x_star: np.ndarray, p: np.ndarray | None = None) -> BoundConstants:
    L = np.asarray(problem.lipschitz, dtype=float)
    n = problem.n
    p = np.full(n, 1.0 / n) if p is None else np.asarray(p, dtype=float)
    gaps = np.sum((problem.grad_all(x0) - problem.grad_all(x_star)) ** 2, axis=1)
    return BoundConstants(n, float(problem.mu), float(L.max()), float(L.mean()), p,
                          float(np.sum((x0 - x_star) ** 2)), gaps,
                          problem.value(x0) - problem.value(x_star))


def rate(variant: str, c: BoundConstants) -> float:
    """Per-step contraction factor of the bound."""
    if not c.mu > 0:
        raise ContractError("the bounds need a strongly convex objective (mu > 0)")
    if variant == "a":
        alpha = c.n * float(c.p.min()) / (4.0 * c.L + c.n * c.mu)
        return 1.0 - c.mu * alpha
    if variant == "b":
        return 1.0 - min(1.0 / (3.0 * c.n), c.mu / (8.0 * c.Lbar))
    raise ContractError(f"unknown variant {variant!r}")


def bound_offset(variant: str, c: BoundConstants) -> float:
    if variant == "a":
        pmin = float(c.p.min())
        return 2.0 * pmin / (4.0 * c.L + c.n * c.mu) ** 2 * float(np.sum(c.grad_gaps / c.p))
    if variant == "b":
        return c.n / (2.0 * c.Lbar) * c.f_gap
    raise ContractError(f"unknown variant {variant!r}")


def prop1_bound(variant: str, k, c: BoundConstants):
    """Bound on ``E ||x^k - x*||^2``: ``rate^k (||x0 - x*||^2 + C)``.  ``k`` may be an array."""
    q = rate(variant, c)
    return q ** np.asarray(k, dtype=float) * (c.dist0_sq + bound_offset(variant, c))


def log_slope(ks, values) -> float:
    """Least-squares slope of ``log(values)`` against ``k``."""
    ks = np.asarray(ks, dtype=float)
    y = np.log(np.asarray(values, dtype=float))
    return float(np.polyfit(ks, y, 1)[0])


@dataclass
class VerificationRow:
    variant: str
    k: int
    empirical_mean: float
    bound: float


def verify_convergence(variant: str, problem=None, steps: int = 1000, n_seeds: int = 100,
                       checkpoints=(10, 100, 1000), seed0: int = 0) -> list[VerificationRow]:
    """Monte-Carlo mean squared distance vs the bound for one variant on its default test problem."""
    if problem is None:
        problem = default_problem(variant)
    x_star = solve_optimum(problem)
    x0 = np.zeros(problem.dim)
    p = np.full(problem.n, 1.0 / problem.n) if variant == "a" else lipschitz_distribution(problem)
    res = run_ensemble(problem, variant, steps, range(seed0, seed0 + n_seeds), x_star, x0, p=p,
                       checkpoints=checkpoints)
    c = bound_constants(problem, x0, x_star, p)
    b = prop1_bound(variant, res["k"], c)
    return [VerificationRow(variant, int(k), float(m), float(bb)) for k, m, bb in zip(res["k"], res["mean"], b)]


def default_problem(variant: str) -> RidgeLogistic:
    """n=10, D=2 ridge logistic; variant (b) gets one term with 16 times the others' constant."""
    n = 10
    if variant == "a":
        return ridge_logistic_problem(n, 2, lam=0.1, seed=0)
    L = np.ones(n)
    L[-1] = 16.0
    return ridge_logistic_problem(n, 2, lam=0.1, seed=1, lipschitz=L)


def verification_csv(rows: list[VerificationRow]) -> str:
    lines = ["variant,k,empirical_mean,bound"]
    lines += [f"{r.variant},{r.k},{r.empirical_mean:.17g},{r.bound:.17g}" for r in rows]
    return "\n".join(lines) + "\n"


__all__ = [
    "FiniteSumObjective", "RidgeLogistic", "DiagonalQuadratic", "ridge_logistic_problem",
    "diagonal_quadratic_problem", "solve_optimum", "SagaState", "saga_nus_a_step", "saga_nus_b_step",
    "default_step", "run_single", "run_ensemble", "unbiasedness_check", "BoundConstants",
    "bound_constants", "prop1_bound", "verify_convergence", "verification_csv", "default_problem",
    "lipschitz_distribution", "estimator", "rate", "log_slope",
]
