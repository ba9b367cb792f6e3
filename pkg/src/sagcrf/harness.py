"""Experiment orchestration: reference optimum, optimizer dispatch, CSV and SVG output."""
from __future__ import annotations

import csv
import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import DEFAULT_GRID, METHODS as BASELINES, BaselineConfig, baseline_train, grid_tune
from .crf import full_gradient
from .errors import ContractError, ConvergenceError
from .memory import GradientMemory
from .objective import CrfObjective
from .runlog import LogRow, RunLog
from .sag import SagConfig, make_policy, sag_train

log = logging.getLogger(__name__)

SAG_VARIANTS = ("sag", "sag-nus", "sag-nus-star")
OPTIMIZERS = SAG_VARIANTS + BASELINES
REFERENCE_TOL = 1.4e-7
CSV_HEADER = ("pass", "evals", "time_s", "objective", "gap", "grad_inf", "test_err")


# ---------------------------------------------------------------------------
# reference optimum


@dataclass
class ReferenceOptimum:
    w: np.ndarray
    f: float
    grad_inf: float
    from_cache: bool = False
    sag_passes: float = 0.0
    polish_iterations: int = 0


def cache_key(dataset, lam: float) -> str:
    return hashlib.sha256(f"{dataset.fingerprint}|{lam!r}".encode()).hexdigest()[:24]


def polish(w: np.ndarray, dataset, lam: float, tol: float = REFERENCE_TOL, max_iter: int = 20000):
    """Full-gradient descent with Barzilai-Borwein trial steps and Armijo backtracking.

    Returns ``(w, f, grad_inf, iterations)``; stops once ``||grad||_inf <= tol``.
    """
    w = np.array(w, dtype=float)
    f, g = full_gradient(w, dataset, lam)
    step = 1.0 / (1.0 + lam)
    it = 0
    while float(np.max(np.abs(g))) > tol and it < max_iter:
        gg = float(g @ g)
        while True:
            w_new = w - step * g
            f_new, g_new = full_gradient(w_new, dataset, lam)
            if f_new <= f - 1e-4 * step * gg or step < 1e-20:
                break
            step *= 0.5
        s, y = w_new - w, g_new - g
        sy = float(s @ y)
        w, f, g = w_new, f_new, g_new
        step = float(s @ s) / sy if sy > 0 else step * 2.0
        it += 1
    return w, f, float(np.max(np.abs(g))), it


def compute_reference_optimum(dataset, lam: float | None = None, cache_dir=None, tol: float = REFERENCE_TOL,
                              max_passes: float = 200.0, polish_iter: int = 20000, seed: int = 0) -> ReferenceOptimum:
    """Minimizer of the regularized objective to ``||grad||_inf <= tol``.

    SAG-NUS* with a tight stopping tolerance does the bulk of the work and
    full-gradient descent finishes.  Results are cached as ``.npz`` under
    ``cache_dir`` keyed by the dataset fingerprint and ``lam``.
    """
    lam = 1.0 / dataset.n if lam is None else float(lam)
    if not lam > 0:
        raise ContractError("the reference optimum needs lambda > 0")
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"refopt-{cache_key(dataset, lam)}.npz"
        if path.exists():
            with np.load(path, allow_pickle=False) as z:
                if str(z["fingerprint"]) == dataset.fingerprint and float(z["lam"]) == lam:
                    return ReferenceOptimum(z["w"].copy(), float(z["f"]), float(z["grad_inf"]), True)
            log.warning("ignoring stale reference cache %s", path)

    obj = CrfObjective(dataset, lam)
    cfg = SagConfig(lam=lam, delta=1e-8, max_passes=max_passes, seed=seed, log_interval=max_passes)
    w, runlog = sag_train(obj, GradientMemory(obj.seqs, obj.D, "mixed"), cfg,
                          policy=make_policy("sag-nus-star", obj.n, seed))
    w, f, ginf, it = polish(w, dataset, lam, tol, polish_iter)
    if not ginf <= tol:
        raise ConvergenceError(f"reference optimum stalled at ||grad||_inf = {ginf:.3e} (target {tol:.1e})")
    ref = ReferenceOptimum(w, f, ginf, False, runlog.final.passes, it)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, w=w, f=f, grad_inf=ginf, lam=lam, fingerprint=dataset.fingerprint)
        os.replace(tmp, path)
    return ref


# ---------------------------------------------------------------------------
# optimizer dispatch


@dataclass
class RunOptions:
    passes: float = 30.0
    seed: int = 0
    memory: str = "mixed"
    delta: float = 1e-4
    eta: float | None = None
    eta_grid: tuple = DEFAULT_GRID
    adagrad_delta: float = 1.0
    log_interval: float = 1.0
    wall_clock: bool = False


@dataclass
class RunResult:
    name: str
    w: np.ndarray
    log: RunLog
    extra: dict = field(default_factory=dict)  # e.g. the second-best step size's log for tuned baselines


def run_optimizer(name: str, objective: CrfObjective, opts: RunOptions, testset=None, logger=None) -> RunResult:
    if name in SAG_VARIANTS:
        cfg = SagConfig(lam=objective.lam, delta=opts.delta, max_passes=opts.passes, seed=opts.seed,
                        log_interval=opts.log_interval, wall_clock=opts.wall_clock)
        mem = GradientMemory(objective.seqs, objective.D, opts.memory)
        w, runlog = sag_train(objective, mem, cfg, policy=make_policy(name, objective.n, opts.seed),
                              logger=logger, testset=testset)
        runlog.name = name
        return RunResult(name, w, runlog)
    if name in BASELINES:
        cfg = BaselineConfig(name, eta=opts.eta or 1.0, lam=objective.lam, max_passes=opts.passes, seed=opts.seed,
                             adagrad_delta=opts.adagrad_delta, log_interval=opts.log_interval,
                             wall_clock=opts.wall_clock, grid=tuple(opts.eta_grid))
        if opts.eta is not None:
            w, runlog = baseline_train(objective, cfg, logger, testset)
            return RunResult(name, w, runlog)
        tuned = grid_tune(objective, cfg, logger=logger, testset=testset)
        best = tuned.best_log
        best.meta.update({"eta": tuned.best_eta, "second_eta": tuned.second_eta, "diverged": tuned.diverged})
        extra = {"second": tuned.second_log} if tuned.second_log is not None else {}
        return RunResult(name, None, best, extra)
    raise ContractError(f"unknown optimizer {name!r}; expected one of {OPTIMIZERS}")


# ---------------------------------------------------------------------------
# output


def _fmt(x) -> str:
    return "" if x is None else f"{x:.17g}"


def write_run_csv(runlog: RunLog, f_star: float, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CSV_HEADER)
        for r in runlog.rows:
            wr.writerow([_fmt(r.passes), r.evals, _fmt(r.wall_seconds), _fmt(r.objective),
                         _fmt(r.objective - f_star), _fmt(r.grad_inf), _fmt(r.test_error)])


def read_run_csv(path, name: str = "") -> RunLog:
    out = RunLog(name)
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if tuple(header) != CSV_HEADER:
            raise ContractError(f"unexpected CSV header {header}")
        for row in rd:
            p, e, t, f, _gap, gi, te = row
            out.append(LogRow(float(p), int(e), float(t), float(f), float(gi), float(te) if te else None))
    return out


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f",
           "#17becf", "#bcbd22")


def svg_chart(series: dict, title: str, xlabel: str, ylabel: str, log_y: bool = False,
              width: int = 640, height: int = 400) -> str:
    """Line chart with one ``<polyline>`` per series; ``series`` maps name -> (xs, ys)."""
    left, right, top, bottom = 70, 150, 40, 50
    pw, ph = width - left - right, height - top - bottom
    tr = {}
    for name, (xs, ys) in series.items():
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        if log_y:
            ys = np.log10(np.maximum(ys, 1e-16))
        tr[name] = (xs, ys)
    allx = np.concatenate([v[0] for v in tr.values()]) if tr else np.array([0.0, 1.0])
    ally = np.concatenate([v[1] for v in tr.values()]) if tr else np.array([0.0, 1.0])
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        y1 = y0 + 1.0

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<text x="{left + pw / 2:.1f}" y="22" text-anchor="middle" font-size="15">{_esc(title)}</text>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
           f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle" font-size="12">{_esc(xlabel)}</text>',
           f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
           f'transform="rotate(-90 16 {top + ph / 2:.1f})">{_esc(ylabel)}</text>']
    for frac in (0.0, 0.5, 1.0):
        xv = x0 + frac * (x1 - x0)
        yv = y0 + frac * (y1 - y0)
        ylab = f"1e{yv:.1f}" if log_y else f"{yv:.3g}"
        out.append(f'<text x="{px(xv):.1f}" y="{top + ph + 16}" text-anchor="middle" font-size="10">{xv:.3g}</text>')
        out.append(f'<text x="{left - 6}" y="{py(yv) + 3:.1f}" text-anchor="end" font-size="10">{ylab}</text>')
    for k, (name, (xs, ys)) in enumerate(tr.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline data-series="{_esc(name)}" fill="none" stroke="{color}" stroke-width="1.5" '
                   f'points="{pts}"/>')
        ly = top + 14 + 16 * k
        out.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 30}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly}" font-size="11">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def emit_outputs(runlogs: dict, f_star: float, out_dir, extra_logs: dict | None = None) -> list[Path]:
    """One CSV per run plus ``gap.svg`` (log-scale suboptimality) and ``test_error.svg``.

    ``extra_logs`` (name -> RunLog) get CSVs but no chart series.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, rl in {**runlogs, **(extra_logs or {})}.items():
        p = out / f"{name}.csv"
        write_run_csv(rl, f_star, p)
        paths.append(p)
    gap = {name: (rl.column("passes"), rl.column("objective") - f_star) for name, rl in runlogs.items()}
    p = out / "gap.svg"
    p.write_text(svg_chart(gap, "Suboptimality", "effective passes", "f(w) - f*", log_y=True), encoding="utf-8")
    paths.append(p)
    err = {name: (rl.column("passes"), rl.column("test_error")) for name, rl in runlogs.items()
           if rl.rows and rl.rows[0].test_error is not None}
    p = out / "test_error.svg"
    p.write_text(svg_chart(err, "Test error", "effective passes", "token error rate"), encoding="utf-8")
    paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class BenchmarkResult:
    reference: ReferenceOptimum
    runs: dict  # name -> RunResult
    paths: list


def benchmark(dataset, testset=None, optimizers=OPTIMIZERS, lam: float | None = None, opts: RunOptions | None = None,
              out_dir=None, cache_dir=None, logger=None) -> BenchmarkResult:
    """Run every optimizer on one dataset against a shared reference optimum."""
    opts = RunOptions() if opts is None else opts
    obj = CrfObjective(dataset, lam)
    ref = compute_reference_optimum(dataset, obj.lam, cache_dir=cache_dir)
    runs = {}
    for name in optimizers:
        log.info("running %s", name)
        runs[name] = run_optimizer(name, obj, opts, testset, logger)
        worst = min(r.objective for r in runs[name].log.rows) - ref.f
        if worst < -1e-9:
            log.warning("%s went below the reference optimum by %.3e", name, -worst)
    paths = []
    if out_dir is not None:
        extra = {f"{n}-second": r.extra["second"] for n, r in runs.items() if "second" in r.extra}
        paths = emit_outputs({n: r.log for n, r in runs.items()}, ref.f, out_dir, extra)
    return BenchmarkResult(ref, runs, paths)


def relative_gap_passes(runlog: RunLog, f_star: float, rel_gap: float = 1e-3) -> float:
    f0 = runlog.rows[0].objective
    return runlog.passes_to_reach(f_star, f0, rel_gap) if f0 > f_star else 0.0


__all__ = [
    "ReferenceOptimum", "compute_reference_optimum", "polish", "RunOptions", "RunResult", "run_optimizer",
    "write_run_csv", "read_run_csv", "svg_chart", "emit_outputs", "benchmark", "BenchmarkResult",
    "relative_gap_passes", "OPTIMIZERS", "SAG_VARIANTS", "CSV_HEADER",
]
