"""Per-example gradient memory for SAG.

Three storage modes hold enough about each example's last gradient to
produce the difference ``g_new - g_old`` that SAG needs:

``sparse``
    the gradient itself on the example's support;
``marginals``
    unary marginals (``T x K``) and pairwise marginals (``(T-1) x K x K``);
    the unary part of the old gradient is rebuilt from the marginals and the
    attribute counts, since for indicator features the gradient is a sum of
    ``F(x) * (p(y_t = s) - [y_t = s])`` over firing positions;
``mixed``
    unary marginals plus the ``K x K`` pairwise gradient, exploiting that
    pairwise features ignore the input.

Marginal storage is independent of the feature dimension.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .crf import ChainMarginals, CompiledSequence, SparseVector
from .errors import ContractError

MODES = ("sparse", "marginals", "mixed")


class GradientMemory:
    def __init__(self, compiled: tuple[CompiledSequence, ...] | list, dim: int, mode: str = "mixed"):
        if mode not in MODES:
            raise ContractError(f"unknown memory mode {mode!r}; expected one of {MODES}")
        self.seqs = compiled
        self.mode = mode
        self.dim = dim
        self.n = len(compiled)
        self.d = np.zeros(dim)
        self.m = 0
        self.seen = np.zeros(self.n, dtype=bool)
        self.slots: list = [None] * self.n

    # -- slot reconstruction ---------------------------------------------------

    def stored_gradient(self, i: int) -> np.ndarray:
        """The example's stored gradient on its support (zeros if unseen)."""
        cs = self.seqs[i]
        slot = self.slots[i]
        if slot is None:
            return np.zeros(len(cs.support))
        if self.mode == "sparse":
            return slot.copy()
        node, pair = slot
        g_unary = cs.counts.T @ (node - cs.gold_onehot)
        if self.mode == "marginals":
            g_pair = pair.sum(axis=0) - cs.gold_pair
        else:
            g_pair = pair
        return np.concatenate([g_unary.ravel(), g_pair.ravel()])

    def _make_slot(self, cs: CompiledSequence, g: np.ndarray, marg: ChainMarginals):
        if self.mode == "sparse":
            return g.copy()
        if self.mode == "marginals":
            return (marg.unary.copy(), marg.pairwise.copy())
        return (marg.unary.copy(), g[cs.n_unary:].reshape(cs.K, cs.K).copy())

    # -- update ----------------------------------------------------------------

    def update(self, i: int, g: np.ndarray, marg: ChainMarginals) -> np.ndarray:
        """Replace slot ``i`` and apply ``delta = g - g_old`` to ``d``.

        ``g`` is the new gradient on ``seqs[i].support`` and ``marg`` the
        marginals it came from.  Returns ``delta`` on the same support.
        Lazily-updated weights must be synced on the support beforehand.
        """
        cs = self.seqs[i]
        if g.shape != cs.support.shape:
            raise ContractError("gradient does not match the example support")
        old = self.slots[i]
        if old is None:
            delta = g.copy()
            self.seen[i] = True
            self.m += 1
        elif self.mode == "sparse":
            delta = g - old
        else:
            old_node, old_pair = old
            d_unary = cs.counts.T @ (marg.unary - old_node)
            if self.mode == "marginals":
                d_pair = (marg.pairwise - old_pair).sum(axis=0)
            else:
                d_pair = g[cs.n_unary:].reshape(cs.K, cs.K) - old_pair
            delta = np.concatenate([d_unary.ravel(), d_pair.ravel()])
        self.slots[i] = self._make_slot(cs, g, marg)
        self.d[cs.support] += delta
        return delta

    def recompute_direction(self) -> np.ndarray:
        d = np.zeros(self.dim)
        for i in np.nonzero(self.seen)[0]:
            d[self.seqs[i].support] += self.stored_gradient(i)
        return d

    def refresh_direction(self) -> float:
        """Replace ``d`` by an exact recomputation; returns the drift that was removed."""
        exact = self.recompute_direction()
        drift = float(np.max(np.abs(exact - self.d))) if self.dim else 0.0
        self.d[:] = exact
        return drift

    # -- sizes ---------------------------------------------------------------

    def slot_scalars(self, i: int) -> int:
        cs = self.seqs[i]
        slot = self.slots[i]
        if self.mode == "sparse":
            return int(np.count_nonzero(slot)) if slot is not None else len(cs.support)
        return mode_scalars(self.mode, cs.T, cs.K, len(cs.support))

    def export(self) -> dict:
        """Copy of the warm-start state ``(slots, d, m)``."""
        return {"slots": [None if s is None else _copy_slot(s) for s in self.slots],
                "d": self.d.copy(), "m": self.m, "mode": self.mode}

    def load(self, state: dict) -> None:
        if state["mode"] != self.mode or len(state["slots"]) != self.n:
            raise ContractError("warm-start state does not match this memory")
        self.slots = [None if s is None else _copy_slot(s) for s in state["slots"]]
        self.seen = np.array([s is not None for s in self.slots])
        self.m = int(state["m"])
        self.d[:] = state["d"]


def _copy_slot(s):
    return s.copy() if isinstance(s, np.ndarray) else tuple(a.copy() for a in s)


def mode_scalars(mode: str, T: int, K: int, support_size: int) -> int:
    if mode == "sparse":
        return support_size
    if mode == "marginals":
        return T * K + (T - 1) * K * K
    if mode == "mixed":
        return T * K + K * K
    raise ContractError(f"unknown memory mode {mode!r}")


def apply_new_gradient(i: int, new_grad: SparseVector, new_marg: ChainMarginals,
                       mem: GradientMemory) -> SparseVector:
    """Sparse-vector front end to :meth:`GradientMemory.update`."""
    cs = mem.seqs[i]
    if new_grad.nnz and (new_grad.indices.max() >= mem.dim or new_grad.indices.min() < 0):
        raise ContractError("gradient index outside the weight dimension")
    pos = np.searchsorted(cs.support, new_grad.indices)
    if np.any(pos >= len(cs.support)) or np.any(cs.support[np.minimum(pos, len(cs.support) - 1)] != new_grad.indices):
        raise ContractError("gradient has entries outside the example support")
    g = np.zeros(len(cs.support))
    g[pos] = new_grad.values
    delta = mem.update(i, g, new_marg)
    return SparseVector.from_dense_support(cs.support, delta)


@dataclass(frozen=True)
class MemoryRow:
    mode: str
    count: int
    ratio: float


def memory_report(dataset, mem: GradientMemory | None = None) -> list[MemoryRow]:
    """Scalar counts per storage mode relative to naive dense storage (``n * D``).

    The sparse count is the nonzero count of the stored gradients when
    ``mem`` is a filled sparse memory, else the support size of each example.
    """
    n, D = dataset.n, dataset.D
    naive = n * D
    rows = [MemoryRow("naive", naive, 1.0)]
    for mode in MODES:
        if mode == "sparse" and mem is not None and mem.mode == "sparse":
            count = sum(mem.slot_scalars(i) for i in range(n))
        else:
            count = sum(mode_scalars(mode, cs.T, cs.K, len(cs.support)) for cs in dataset.compiled)
        rows.append(MemoryRow(mode, int(count), count / naive))
    return rows


def memory_report_csv(rows: list[MemoryRow]) -> str:
    lines = ["mode,count,ratio"]
    lines += [f"{r.mode},{r.count},{r.ratio:.17g}" for r in rows]
    return "\n".join(lines) + "\n"
