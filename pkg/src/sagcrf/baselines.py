"""Classic stochastic-gradient baselines: Pegasos, constant-step SG, averaged SG and AdaGrad.

The ``*_step`` functions are dense reference forms of one update; the
training loop applies the same updates sparsely, with the regularizer's
shrink handled by :class:`ScaledWeights`.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NonFiniteError, TuningError
from .runlog import EvalCounter, RunLog, RunRecorder, make_rng
from .weights import ScaledWeights

log = logging.getLogger(__name__)

METHODS = ("pegasos", "sg", "asg", "adagrad")
DEFAULT_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0)


def pegasos_step(w: np.ndarray, g: np.ndarray, t: int, lam: float, eta: float) -> np.ndarray:
    """``w - eta / (lam t) * (g + lam w)``; ``g`` is the data gradient of the drawn term."""
    if not lam > 0:
        raise ContractError("Pegasos needs lambda > 0")
    if t < 1:
        raise ContractError("iteration counter starts at 1")
    return w - (eta / (lam * t)) * (g + lam * w)


def sg_step(w: np.ndarray, g: np.ndarray, eta: float, lam: float) -> np.ndarray:
    return w - eta * (g + lam * w)


def asg_step(w: np.ndarray, wbar: np.ndarray, t: int, g: np.ndarray, eta: float, lam: float):
    """SG step plus the running mean of iterates; ``t`` iterates are already in ``wbar``."""
    w_new = sg_step(w, g, eta, lam)
    return w_new, (t * wbar + w_new) / (t + 1)


def adagrad_step(w: np.ndarray, h: np.ndarray, g: np.ndarray, eta: float, delta: float, lam: float):
    """Per-coordinate steps ``eta / (delta + sqrt(h))`` followed by the exact ridge proximal map.

    Only coordinates where ``g`` is nonzero change; ``h`` accumulates the data
    gradient alone.
    """
    w = np.array(w, dtype=float)
    h = np.array(h, dtype=float)
    nz = g != 0
    h[nz] += g[nz] ** 2
    a = eta / (delta + np.sqrt(h[nz]))
    w[nz] = (w[nz] - a * g[nz]) / (1.0 + lam * a)
    return w, h


@dataclass
class BaselineConfig:
    method: str
    eta: float = 1.0
    lam: float = 0.0
    max_passes: float = 30.0
    seed: int = 0
    adagrad_delta: float = 1.0
    log_interval: float = 1.0
    wall_clock: bool = False
    grid: tuple = DEFAULT_GRID

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown baseline {self.method!r}; expected one of {METHODS}")
        if not self.eta > 0:
            raise ContractError("eta must be positive")
        if self.method == "pegasos" and not self.lam > 0:
            raise ContractError("Pegasos needs lambda > 0")
        if not self.grid:
            raise ContractError("empty step-size grid")


def baseline_train(objective, config: BaselineConfig, logger=None, testset=None, w0=None,
                   on_iteration=None):
    """Run one baseline for ``max_passes`` effective passes (one gradient per iteration)."""
    n, D, lam = objective.n, objective.D, config.lam
    if abs(lam - objective.lam) > 0:
        raise ContractError("config.lam and objective.lam disagree")
    method, eta = config.method, config.eta
    rng = make_rng(config.seed, method)
    counter = EvalCounter(n)
    rec = RunRecorder(objective, counter, method, testset, logger, config.log_interval, config.wall_clock)
    rec.log.meta.update({"optimizer": method, "eta": eta})
    seqs = objective.seqs

    if method == "adagrad":
        w = np.zeros(D) if w0 is None else np.array(w0, dtype=float)
        h = np.zeros(D)
        rec.record(w)
        t = 0
        while counter.evals < config.max_passes * n:
            if rec.needs_snapshot(1):
                rec.snapshot(w)
            i = int(rng.integers(n))
            sup = seqs[i].support
            f, g, _ = objective.example_grad(i, w[sup])
            counter.count("gradient")
            _check(f, i, t)
            nz = g != 0
            idx = sup[nz]
            h[idx] += g[nz] ** 2
            a = eta / (config.adagrad_delta + np.sqrt(h[idx]))
            w[idx] = (w[idx] - a * g[nz]) / (1.0 + lam * a)
            t += 1
            if on_iteration is not None:
                on_iteration(t, w)
            rec.after_iteration(lambda: w)
        rec.finish(w)
        rec.log.meta["iterations"] = t
        return w, rec.log

    weights = ScaledWeights(D, w0=w0, track_average=(method == "asg"))
    report = weights.average if method == "asg" else weights.materialize
    rec.record(weights.materialize())
    t = 0
    while counter.evals < config.max_passes * n:
        if rec.needs_snapshot(1):
            rec.snapshot(report())
        i = int(rng.integers(n))
        sup = seqs[i].support
        f, g, _ = objective.example_grad(i, weights.get(sup))
        counter.count("gradient")
        _check(f, i, t)
        t += 1
        step = eta / (lam * t) if method == "pegasos" else eta
        weights.step(1.0 - step * lam)
        weights.add(sup, -step * g)
        if method == "asg":
            weights.record_iterate()
        if on_iteration is not None:
            on_iteration(t, weights)
        rec.after_iteration(report)
    w = report()
    rec.finish(w)
    rec.log.meta["iterations"] = t
    return w, rec.log


def _check(f: float, i: int, t: int) -> None:
    if not math.isfinite(f):
        raise NonFiniteError(f"example {i} has a non-finite loss at iteration {t}")


@dataclass
class TuneResult:
    method: str
    best_eta: float
    second_eta: float | None
    logs: dict = field(default_factory=dict)  # eta -> RunLog for runs that finished
    diverged: list = field(default_factory=list)

    @property
    def best_log(self) -> RunLog:
        return self.logs[self.best_eta]

    @property
    def second_log(self) -> RunLog | None:
        return None if self.second_eta is None else self.logs[self.second_eta]


def grid_tune(objective, config: BaselineConfig, grid=None, logger=None, testset=None) -> TuneResult:
    """Run every step size in ``grid`` for the full budget; keep the one with the lowest final objective."""
    grid = tuple(config.grid if grid is None else grid)
    if len(grid) < 3:
        raise ContractError("step-size grid needs at least three values")
    logs, diverged = {}, []
    for eta in grid:
        cfg = BaselineConfig(**{**config.__dict__, "eta": eta})
        try:
            _, runlog = baseline_train(objective, cfg, logger, testset)
        except (NonFiniteError, FloatingPointError, OverflowError) as exc:
            log.info("%s eta=%g diverged: %s", config.method, eta, exc)
            diverged.append(eta)
            continue
        logs[eta] = runlog
    if not logs:
        raise TuningError(f"{config.method}: every step size diverged: {list(diverged)}")
    ranked = sorted(logs, key=lambda e: (logs[e].final.objective, e))
    best = ranked[0]
    if best in (min(grid), max(grid)):
        log.warning("%s: best step size %g lies on the boundary of the grid", config.method, best)
    return TuneResult(config.method, best, ranked[1] if len(ranked) > 1 else None, logs, diverged)
