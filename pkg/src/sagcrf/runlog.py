"""Evaluation accounting, run logs and test-error measurement shared by all optimizers."""
from __future__ import annotations

import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .crf import _viterbi, full_gradient, local_potentials
from .errors import ContractError, NonFiniteError

log = logging.getLogger(__name__)

KINDS = ("gradient", "forward_only")


def make_rng(seed: int, stream: str | int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, stream)``; the same pair always gives the same draws."""
    if isinstance(stream, str):
        stream = zlib.crc32(stream.encode())
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & (2**64 - 1), int(stream)])))


class EvalCounter:
    """Counts bottleneck evaluations; line-search forward passes count as full ones."""

    def __init__(self, n: int):
        self.n = n
        self.evals = 0
        self.probes = 0

    def count(self, kind: str = "gradient") -> None:
        if kind == "forward_only":
            self.probes += 1
        elif kind != "gradient":
            raise ContractError(f"unknown evaluation kind {kind!r}")
        self.evals += 1

    @property
    def passes(self) -> float:
        return self.evals / self.n


def count_evaluation(kind: str, counter: EvalCounter) -> EvalCounter:
    counter.count(kind)
    return counter


@dataclass(frozen=True)
class LogRow:
    passes: float
    evals: int
    wall_seconds: float
    objective: float
    grad_inf: float
    test_error: float | None = None


@dataclass
class RunLog:
    name: str = ""
    rows: list[LogRow] = field(default_factory=list)
    # per-row cumulative line-search probe counts and free-form run metadata
    probes: list[int] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, row: LogRow, probes: int = 0) -> None:
        if not math.isfinite(row.objective):
            raise NonFiniteError(f"non-finite objective at {row.passes:.3f} passes")
        if self.rows and row.passes < self.rows[-1].passes:
            raise ContractError("effective passes must be non-decreasing")
        self.rows.append(row)
        self.probes.append(probes)

    @property
    def final(self) -> LogRow:
        return self.rows[-1]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def passes_to_reach(self, f_star: float, f0: float, rel_gap: float) -> float:
        """First logged effective-pass count with ``(f - f*) / (f0 - f*) <= rel_gap`` (inf if never)."""
        for r in self.rows:
            if (r.objective - f_star) / (f0 - f_star) <= rel_gap:
                return r.passes
        return math.inf

    def probes_between(self, lo: float, hi: float) -> int:
        """Line-search probes spent while the pass count moved from ``lo`` to ``hi``."""
        def at(p):
            best = 0
            for r, c in zip(self.rows, self.probes):
                if r.passes <= p:
                    best = c
            return best
        return at(hi) - at(lo)


def evaluate_test_error(w: np.ndarray, testset, warn: bool = True) -> float:
    """Per-token error rate of Viterbi decodes; labels outside the alphabet always count as errors."""
    if testset is None or testset.n == 0:
        raise ContractError("test set must be non-empty")
    w = np.asarray(w, dtype=float)
    wrong = total = 0
    unknown = 0
    for cs in testset.compiled:
        pot = local_potentials(cs, w[cs.support])
        pred = _viterbi(pot.unary, pot.pairwise)
        wrong += int(np.sum(pred != cs.labels))
        unknown += int(np.sum(cs.labels < 0))
        total += cs.T
    if unknown and warn:
        log.warning("%d test tokens carry labels outside the training alphabet", unknown)
    return wrong / total


Logger = Callable[[float, int, float, float], None]


class RunRecorder:
    """Logs a row for every multiple of ``interval`` effective passes.

    The row for a boundary is the state after the last iteration that ended
    at or before it; no interpolation.  Iterations can spend several
    evaluations, so callers hand over a snapshot via :meth:`snapshot` before
    any iteration that might cross the next boundary (``needs_snapshot``),
    then call :meth:`after_iteration`.
    """

    def __init__(self, objective, counter: EvalCounter, name: str = "", testset=None,
                 logger: Logger | None = None, interval: float = 1.0, clock: bool = False):
        if not interval > 0:
            raise ContractError("log interval must be positive")
        self.objective = objective
        self.counter = counter
        self.testset = testset
        self.logger = logger
        self.interval = interval
        self.k_next = 0
        self.clock = clock
        self.t0 = time.perf_counter()
        self.log = RunLog(name)
        self._snap = None

    def _boundary(self, k: int) -> float:
        return k * self.interval * self.counter.n

    def needs_snapshot(self, horizon: int) -> bool:
        """True if an iteration costing up to ``horizon`` evaluations could pass the next boundary."""
        return self.counter.evals + horizon > self._boundary(self.k_next)

    def snapshot(self, w: np.ndarray) -> None:
        self._snap = (np.array(w, dtype=float), self.counter.evals, self.counter.probes,
                      time.perf_counter() - self.t0)

    def after_iteration(self, current: Callable[[], np.ndarray]) -> LogRow | None:
        """Record any boundary reached by the iteration that just finished; returns the last new row."""
        evals = self.counter.evals
        if evals < self._boundary(self.k_next):
            self._snap = None
            return None
        row = None
        if self._boundary(self.k_next) < evals:
            if self._snap is None:
                raise ContractError("boundary crossed without a snapshot of the previous state")
            w, e, p, secs = self._snap
            if not self.log.rows or self.log.rows[-1].evals != e:
                row = self.record(w, evals=e, probes=p, seconds=secs)
        k_at = round(evals / (self.interval * self.counter.n))
        if self._boundary(k_at) == evals:
            row = self.record(current())
        self.k_next = math.floor(evals / (self.interval * self.counter.n)) + 1
        self._snap = None
        return row

    def record(self, w: np.ndarray, evals: int | None = None, probes: int | None = None,
               seconds: float | None = None) -> LogRow:
        evals = self.counter.evals if evals is None else evals
        probes = self.counter.probes if probes is None else probes
        f, grad = full_gradient(w, self.objective.dataset, self.objective.lam)
        if not math.isfinite(f):
            raise NonFiniteError(f"objective became non-finite after {evals} evaluations")
        err = evaluate_test_error(w, self.testset, warn=not self.log.rows) if self.testset is not None else None
        if seconds is None:
            seconds = time.perf_counter() - self.t0
        row = LogRow(
            passes=evals / self.counter.n,
            evals=evals,
            wall_seconds=seconds if self.clock else 0.0,
            objective=f,
            grad_inf=float(np.max(np.abs(grad))),
            test_error=err,
        )
        self.log.append(row, probes)
        if evals >= self._boundary(self.k_next):
            self.k_next = math.floor(evals / (self.interval * self.counter.n)) + 1
        if self.logger is not None:
            self.logger(row.passes, row.evals, row.objective, row.grad_inf)
        return row

    def finish(self, w: np.ndarray) -> None:
        """Record the final state unless it is already the last row."""
        if not self.log.rows or self.log.rows[-1].evals != self.counter.evals:
            self.record(w)
