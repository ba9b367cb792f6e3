"""Scaled weight vector with just-in-time coordinate updates.

The training loops apply updates of the form ``w <- shrink * w - coef * d``
where ``d`` is a dense direction that only changes on a few coordinates per
iteration.  Storing ``w = scale * v`` turns the shrink into a scalar
multiply; the ``- coef * d`` part is deferred per coordinate using prefix
sums ``A = sum coef_u / scale_{u+1}``: a coordinate last synced when the
prefix sum was ``A_k`` catches up with ``v_j -= d_j * (A_now - A_k)``, valid
as long as ``d_j`` did not change in between.  Callers therefore must
:meth:`sync` a coordinate before modifying ``d`` there.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ContractError

SCALE_LO = 1e-100
SCALE_HI = 1e100


class ScaledWeights:
    def __init__(self, dim: int, direction: np.ndarray | None = None, w0: np.ndarray | None = None,
                 track_average: bool = False):
        if direction is not None and direction.shape != (dim,):
            raise ContractError("direction must have the weight dimension")
        if direction is not None and track_average:
            raise ContractError("iterate averaging is only supported without a lazy direction")
        self.dim = dim
        self.v = np.zeros(dim) if w0 is None else np.array(w0, dtype=float)
        if self.v.shape != (dim,):
            raise ContractError("initial weights have the wrong dimension")
        self.direction = direction
        self.scale = 1.0
        self.log_scale = 0.0  # log |prod of all shrink factors|, for reporting
        self.a_now = 0.0
        self.a_sync = np.zeros(dim)
        self.iteration = 0
        self.sync_stamp = np.zeros(dim, dtype=np.int64)
        self.track_average = track_average
        if track_average:
            self.avg_sum = np.zeros(dim)
            self.b_now = 0.0
            self.b_sync = np.zeros(dim)
            self.n_averaged = 0

    # -- coordinate access -------------------------------------------------

    def sync(self, idx) -> None:
        """Apply all deferred direction updates to ``v[idx]``."""
        if self.direction is not None:
            self.v[idx] -= self.direction[idx] * (self.a_now - self.a_sync[idx])
            self.a_sync[idx] = self.a_now
        self.sync_stamp[idx] = self.iteration

    def get(self, idx) -> np.ndarray:
        self.sync(idx)
        return self.scale * self.v[idx]

    def add(self, idx, delta) -> None:
        """``w[idx] += delta``; ``idx`` must not contain duplicates."""
        self.sync(idx)
        if self.track_average:
            self._catch_up_average(idx)
        self.v[idx] += np.asarray(delta) / self.scale

    def set(self, idx, values) -> None:
        self.sync(idx)
        if self.track_average:
            self._catch_up_average(idx)
        self.v[idx] = np.asarray(values) / self.scale

    # -- global operations ---------------------------------------------------

    def step(self, shrink: float, coef: float = 0.0) -> None:
        """``w <- shrink * w - coef * direction``."""
        if shrink <= 0.0:
            # sign flip or collapse (e.g. early Pegasos steps): fall back to dense
            w = self.materialize()
            self._reset(shrink * w)
            if coef and self.direction is not None:
                self.v -= coef * self.direction
        else:
            self.scale *= shrink
            self.log_scale += math.log(shrink)
            if coef and self.direction is not None:
                self.a_now += coef / self.scale
            if not SCALE_LO <= self.scale <= SCALE_HI:
                self._reset(self.materialize())
        self.iteration += 1

    def record_iterate(self) -> None:
        """Add the current iterate to the running average."""
        self.b_now += self.scale
        self.n_averaged += 1

    def materialize(self) -> np.ndarray:
        """Dense copy of the current weights (syncs every coordinate)."""
        self.sync(slice(None))
        return self.scale * self.v

    def average(self) -> np.ndarray:
        if not self.track_average:
            raise ContractError("averaging was not enabled")
        if self.n_averaged == 0:
            return self.materialize()
        self._catch_up_average(slice(None))
        return self.avg_sum / self.n_averaged

    def direction_changed_everywhere(self) -> None:
        """Call before replacing the whole direction vector (e.g. recomputing it)."""
        self.sync(slice(None))

    # -- internals -------------------------------------------------------------

    def _catch_up_average(self, idx) -> None:
        self.avg_sum[idx] += self.v[idx] * (self.b_now - self.b_sync[idx])
        self.b_sync[idx] = self.b_now

    def _reset(self, w: np.ndarray) -> None:
        if self.track_average:
            self._catch_up_average(slice(None))
            self.b_now = 0.0
            self.b_sync[:] = 0.0
        self.v = np.array(w, dtype=float)
        self.scale = 1.0
        self.a_now = 0.0
        self.a_sync[:] = 0.0
