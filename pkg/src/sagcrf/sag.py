"""Stochastic average gradient training for CRFs.

The update keeps the regularizer exact and averages only the stored
log-likelihood gradients::

    w <- (1 - alpha * lam) * w - (alpha / m) * d

where ``d`` is the sum of the stored per-example gradients and ``m`` the
number of distinct examples seen so far.  The step size comes from a
Lipschitz estimate maintained by backtracking on single examples; how that
estimate is kept and how examples are drawn is delegated to a *policy*
(uniform sampling here, non-uniform variants in :mod:`sagcrf.nus`).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .crf import _forward_backward, local_nll, local_potentials
from .errors import ContractError, NonFiniteError
from .memory import GradientMemory
from .runlog import EvalCounter, RunRecorder, make_rng
from .weights import ScaledWeights

log = logging.getLogger(__name__)

MAX_DOUBLINGS = 60
GRAD_SQ_GUARD = 1e-8


class LineSearchAudit:
    """Debug re-check of every accepted line-search step.

    When enabled, each accepted ``L`` is re-verified through an independent
    evaluation path (full forward-backward instead of the forward pass).
    """

    def __init__(self):
        self.enabled = False
        self.checked = 0
        self.violations: list[tuple[float, float, float]] = []

    def reset(self) -> None:
        self.checked = 0
        self.violations = []

    def check(self, f_new: float, f: float, g_sq: float, L: float) -> None:
        self.checked += 1
        bound = f - g_sq / (2.0 * L)
        if not f_new <= bound + 1e-12 * max(1.0, abs(f)):
            self.violations.append((f_new, bound, L))


AUDIT = LineSearchAudit()


def line_search(f: float, g_sq: float, probe: Callable[[float], float], L: float,
                counter: EvalCounter | None = None, verify: Callable[[float], float] | None = None,
                max_doublings: int = MAX_DOUBLINGS) -> tuple[float, int]:
    """Double ``L`` until ``probe(L) <= f - g_sq / (2 L)``.

    ``probe(L)`` evaluates the example loss at ``w - g / L``.  Returns the
    accepted ``L`` and the number of doublings.  Each probe is one
    forward-only evaluation on ``counter``.
    """
    if not L > 0:
        raise ContractError(f"line search needs a positive starting constant, got {L}")
    backtracks = 0
    f_new = probe(L)
    if counter is not None:
        counter.count("forward_only")
    while not f_new <= f - g_sq / (2.0 * L):
        backtracks += 1
        if backtracks > max_doublings:
            raise NonFiniteError(
                f"line search exceeded {max_doublings} doublings (f={f}, last probe={f_new}); "
                "the gradient is probably wrong or the objective non-finite"
            )
        L *= 2.0
        f_new = probe(L)
        if counter is not None:
            counter.count("forward_only")
    if AUDIT.enabled:
        AUDIT.check(verify(L) if verify is not None else probe(L), f, g_sq, L)
    return L, backtracks


def lipschitz_line_search(cs, f: float, g: np.ndarray, w_local: np.ndarray, L: float,
                          counter: EvalCounter | None = None) -> tuple[float, int]:
    """Line search on one CRF example; ``g`` and ``w_local`` live on ``cs.support``."""
    g_sq = float(g @ g)

    def probe(Lc):
        return local_nll(cs, w_local - g / Lc)

    def verify(Lc):
        pot = local_potentials(cs, w_local - g / Lc)
        logz, _, _ = _forward_backward(pot.unary, pot.pairwise)
        gold = float(np.sum(pot.unary * cs.gold_onehot) + np.sum(pot.pairwise * cs.gold_pair))
        return float(logz) - gold

    return line_search(f, g_sq, probe, L, counter, verify)


# ---------------------------------------------------------------------------


@dataclass
class SagConfig:
    lam: float
    delta: float = 1e-4
    max_passes: float = 50.0
    seed: int = 0
    initial_lg: float = 1.0
    log_interval: float = 1.0
    refresh_every: int | None = None  # iterations between exact recomputations of d; None -> n
    wall_clock: bool = False
    confirm_stop: bool = True  # refresh every slot at w before trusting the stopping test

    def __post_init__(self):
        if self.lam < 0:
            raise ContractError("lambda must be non-negative")
        if not self.delta > 0:
            raise ContractError("stopping tolerance must be positive")
        if self.max_passes < 1:
            raise ContractError("max_passes must be at least 1")


class UniformPolicy:
    """Uniform sampling with one global Lipschitz estimate that decays by ``2^(-1/n)`` per iteration."""

    name = "sag"

    def __init__(self, n: int, rng: np.random.Generator, initial_lg: float = 1.0):
        self.n = n
        self.rng = rng
        self.Lg = float(initial_lg)
        self.decay = 2.0 ** (-1.0 / n)

    def sample(self) -> int:
        return int(self.rng.integers(self.n))

    def process(self, i: int, first: bool, search) -> None:
        if search is not None:
            self.Lg, _ = search(self.Lg)

    def step_size(self, lam: float) -> float:
        return 1.0 / (self.Lg + lam)

    def end_iteration(self) -> None:
        self.Lg *= self.decay

    def metadata(self) -> dict:
        return {"optimizer": self.name, "step_size": "1/(Lg+lambda)"}


def should_stop(d: np.ndarray, m: int, n: int, w: np.ndarray, lam: float, delta: float) -> bool:
    """True once every example has been seen and ``||d/n + lam w||_inf < delta``."""
    if m < n:
        return False
    return float(np.max(np.abs(d / n + lam * w))) < delta


def sag_step(weights: ScaledWeights, m: int, alpha: float, lam: float) -> None:
    """``w <- (1 - alpha lam) w - (alpha / m) d`` with ``d`` the weights' lazy direction."""
    if alpha * lam >= 1.0:
        raise ContractError(f"step size {alpha} with lambda {lam} would flip the weight scale")
    weights.step(1.0 - alpha * lam, alpha / m)


def refresh_memory(objective, mem: GradientMemory, weights: ScaledWeights, counter: EvalCounter) -> np.ndarray:
    """Recompute every stored gradient at the current weights (``n`` counted evaluations).

    Afterwards ``d / n + lam w`` is the exact full gradient, so the stopping
    test no longer relies on stale slots.
    """
    w = weights.materialize()
    weights.direction_changed_everywhere()
    for i, cs in enumerate(objective.seqs):
        f, g, marg = objective.example_grad(i, w[cs.support])
        counter.count("gradient")
        if not math.isfinite(f):
            raise NonFiniteError(f"example {i} has a non-finite loss during the stopping check")
        mem.update(i, g, marg)
    mem.refresh_direction()
    return w


def make_policy(name: str, n: int, seed: int, initial_lg: float = 1.0, **kw):
    from .nus import LegacyNusPolicy, NusStarPolicy

    rng = make_rng(seed, name)
    if name == "sag":
        return UniformPolicy(n, rng, initial_lg)
    if name == "sag-nus-star":
        return NusStarPolicy(n, rng, initial_lg, **kw)
    if name == "sag-nus":
        return LegacyNusPolicy(n, rng, initial_lg)
    raise ContractError(f"unknown SAG variant {name!r}")


def sag_train(objective, mem: GradientMemory | None, config: SagConfig, policy=None, logger=None,
              testset=None, w0: np.ndarray | None = None, on_iteration=None, warm_start: dict | None = None,
              stop_when: Callable | None = None):
    """Run SAG until the stopping rule fires or the effective-pass budget is spent.

    ``policy`` defaults to uniform sampling.  ``on_iteration(t, weights)`` is
    called after every update (for tracing); ``stop_when(row)`` may end the
    run early after any logged row.  Returns the final dense weights and the
    :class:`RunLog`.
    """
    n, D, lam = objective.n, objective.D, config.lam
    if abs(lam - objective.lam) > 0:
        raise ContractError("config.lam and objective.lam disagree")
    if mem is None:
        mem = GradientMemory(objective.seqs, D, "mixed")
    if warm_start is not None:
        mem.load(warm_start)
    if policy is None:
        policy = make_policy("sag", n, config.seed, config.initial_lg)
    weights = ScaledWeights(D, direction=mem.d, w0=w0)
    counter = EvalCounter(n)
    rec = RunRecorder(objective, counter, getattr(policy, "name", "sag"), testset, logger,
                      config.log_interval, config.wall_clock)
    rec.log.meta.update(policy.metadata())
    rec.log.meta["memory"] = mem.mode
    rec.record(weights.materialize())

    refresh_every = n if config.refresh_every is None else config.refresh_every
    check_every = max(1, n // 10)
    stopped = False
    t = 0
    cooldown = n // 2 or 1
    next_confirm = 0
    seqs = objective.seqs
    horizon = 2 + MAX_DOUBLINGS  # most evaluations one iteration can spend
    while counter.evals < config.max_passes * n:
        if rec.needs_snapshot(horizon):
            rec.snapshot(weights.materialize())
        i = policy.sample()
        cs = seqs[i]
        sup = cs.support
        w_local = weights.get(sup)
        f, g, marg = objective.example_grad(i, w_local)
        counter.count("gradient")
        if not math.isfinite(f):
            raise NonFiniteError(f"example {i} has a non-finite loss at iteration {t}")
        first = not mem.seen[i]
        mem.update(i, g, marg)  # weights are synced on sup by get()
        g_sq = float(g @ g)
        search = None
        if g_sq > GRAD_SQ_GUARD:
            def search(L0, cs=cs, f=f, g=g, w_local=w_local):
                return lipschitz_line_search(cs, f, g, w_local, L0, counter)
        policy.process(i, first, search)
        sag_step(weights, mem.m, policy.step_size(lam), lam)
        policy.end_iteration()
        t += 1
        if refresh_every and t % refresh_every == 0:
            weights.direction_changed_everywhere()
            mem.refresh_direction()
        if on_iteration is not None:
            on_iteration(t, weights)
        row = rec.after_iteration(weights.materialize)
        if row is not None and stop_when is not None and stop_when(row):
            break
        if mem.m == n and t % check_every == 0:
            if should_stop(mem.d, mem.m, n, weights.materialize(), lam, config.delta):
                if not config.confirm_stop:
                    stopped = True
                    break
                if t >= next_confirm:
                    w = refresh_memory(objective, mem, weights, counter)
                    if should_stop(mem.d, mem.m, n, w, lam, config.delta):
                        stopped = True
                        break
                    # failed confirmation: back off so refreshes stay a small share of the budget
                    cooldown = min(2 * cooldown, 16 * n)
                    next_confirm = t + cooldown
    w = weights.materialize()
    rec.finish(w)
    rec.log.meta.update({"stopped": stopped, "iterations": t, "seen": mem.m})
    return w, rec.log
