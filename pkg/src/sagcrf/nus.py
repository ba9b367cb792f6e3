"""Non-uniform sampling for SAG.

Each example keeps its own Lipschitz estimate ``L_i``.  Examples are drawn
uniformly over all ``n`` with probability 1/2 and otherwise proportionally
to ``L_i`` among the examples already seen; a Fenwick tree over the
``L_i`` makes each weighted draw ``O(log n)``.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractError


class FenwickTree:
    """Prefix sums over non-negative float weights with ``O(log n)`` update and search."""

    def __init__(self, n: int):
        if n < 1:
            raise ContractError("tree needs at least one slot")
        self.n = n
        self._tree = [0.0] * (n + 1)
        self._values = [0.0] * n
        self._top = 1 << (n.bit_length() - 1)

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> float:
        return self._values[i]

    def add(self, i: int, delta: float) -> None:
        self._values[i] += delta
        j = i + 1
        tree = self._tree
        while j <= self.n:
            tree[j] += delta
            j += j & -j

    def set(self, i: int, value: float) -> None:
        if value < 0:
            raise ContractError("tree weights must be non-negative")
        self.add(i, value - self._values[i])
        self._values[i] = value

    def prefix(self, i: int) -> float:
        """Sum of the first ``i`` weights."""
        s = 0.0
        j = i
        while j > 0:
            s += self._tree[j]
            j -= j & -j
        return s

    @property
    def total(self) -> float:
        return self.prefix(self.n)

    def find(self, u: float) -> int:
        """Smallest index ``i`` with ``prefix(i + 1) > u``."""
        pos = 0
        step = self._top
        tree = self._tree
        while step:
            nxt = pos + step
            if nxt <= self.n and tree[nxt] <= u:
                pos = nxt
                u -= tree[nxt]
            step >>= 1
        if pos >= self.n:
            # u reached the total through rounding; return the last positive slot
            for i in range(self.n - 1, -1, -1):
                if self._values[i] > 0:
                    return i
        return pos

    def rebuild(self, values=None) -> None:
        """Recompute all internal sums from scratch (removes accumulated rounding)."""
        if values is not None:
            self._values = [float(v) for v in values]
        tree = [0.0] * (self.n + 1)
        for i, v in enumerate(self._values):
            j = i + 1
            tree[j] += v
            parent = j + (j & -j)
            if parent <= self.n:
                tree[parent] += tree[j]
        self._tree = tree


class LipschitzState:
    """Per-example Lipschitz estimates with their mean, max and line-search skip counters."""

    def __init__(self, n: int, initial_lg: float = 1.0, rebuild_every: int | None = None):
        self.n = n
        self.Lg = float(initial_lg)
        self.L = np.zeros(n)
        self.seen = np.zeros(n, dtype=bool)
        self.count = 0
        self.Lmax = 0.0
        self.xi = np.zeros(n, dtype=np.int64)
        self.skip_remaining = np.zeros(n, dtype=np.int64)
        self.tree = FenwickTree(n)
        self._updates = 0
        self._rebuild_every = rebuild_every or 10 * n

    @property
    def Lbar(self) -> float:
        """Mean of the set ``L_i``; falls back to the global estimate before any visit."""
        if self.count == 0:
            return self.Lg
        return self.tree.total / self.count

    def set(self, i: int, value: float) -> None:
        if not value > 0:
            raise ContractError(f"Lipschitz estimates must be positive, got {value}")
        old = self.L[i]
        if not self.seen[i]:
            self.seen[i] = True
            self.count += 1
        self.L[i] = value
        self.tree.set(i, value)
        if value >= self.Lmax:
            self.Lmax = value
        elif old == self.Lmax:
            self.Lmax = float(self.L.max())
        self._updates += 1
        if self._updates % self._rebuild_every == 0:
            self.tree.rebuild(self.L)


class NusSampler:
    """Half uniform over all examples, half proportional to ``L_i`` over seen examples."""

    def __init__(self, state: LipschitzState, rng: np.random.Generator, weighted_prob: float = 0.5):
        self.state = state
        self.rng = rng
        self.weighted_prob = weighted_prob

    def sample(self) -> int:
        st = self.state
        if st.count == 0 or self.rng.random() >= self.weighted_prob:
            return int(self.rng.integers(st.n))
        return st.tree.find(self.rng.random() * st.tree.total)

    def probabilities(self) -> np.ndarray:
        """Exact marginal draw probabilities implied by the current state."""
        st = self.state
        p = np.full(st.n, 1.0 / st.n)
        if st.count == 0:
            return p
        return (1 - self.weighted_prob) * p + self.weighted_prob * st.L / st.L.sum()


def nus_sample(sampler: NusSampler) -> int:
    return sampler.sample()


def nus_step_size(Lmax: float, Lbar: float, lam: float) -> float:
    """Average of the conservative ``1/(Lmax+lam)`` and the aggressive ``1/(Lbar+lam)`` steps."""
    if not (Lmax > 0 and Lbar > 0):
        raise ContractError("Lipschitz constants must be positive")
    return 0.5 * (1.0 / (Lmax + lam) + 1.0 / (Lbar + lam))


def on_selected(state: LipschitzState, i: int, search=None, skipping: bool = True,
                decay: float = 0.9) -> dict:
    """Update example ``i``'s estimate after it has been drawn.

    First visit: ``L_i = Lbar / 2`` (mean over previously seen examples),
    then a line search from there.  Later visits run the line search from
    the stored ``L_i`` and multiply the result by ``decay``.  After ``xi``
    consecutive searches without backtracking the next ``2^(xi-1)``
    selections skip the search (and the decay).  ``search(L0)`` returns
    ``(L, backtracks)``; ``None`` means the gradient is too small to search.
    """
    first = not state.seen[i]
    L = 0.5 * state.Lbar if first else state.L[i]
    info = {"first": first, "searched": False, "backtracks": 0, "skipped": False}
    if skipping and not first and state.skip_remaining[i] > 0:
        state.skip_remaining[i] -= 1
        info["skipped"] = True
    elif search is not None:
        L, b = search(L)
        info.update(searched=True, backtracks=b)
        if b > 0:
            state.xi[i] = 0
        else:
            state.xi[i] += 1
            if skipping:
                state.skip_remaining[i] = 2 ** (int(state.xi[i]) - 1)
        if not first:
            L *= decay
    state.set(i, L)
    return info


class NusStarPolicy:
    """The simple mixture sampler with ``Lbar/2`` initialization, 0.9 decay and search skipping."""

    name = "sag-nus-star"

    def __init__(self, n: int, rng: np.random.Generator, initial_lg: float = 1.0, skipping: bool = True):
        self.state = LipschitzState(n, initial_lg)
        self.sampler = NusSampler(self.state, rng)
        self.skipping = skipping
        self.last = None

    def sample(self) -> int:
        return self.sampler.sample()

    def process(self, i: int, first: bool, search) -> None:
        self.last = on_selected(self.state, i, search, self.skipping)

    def step_size(self, lam: float) -> float:
        return nus_step_size(self.state.Lmax, self.state.Lbar, lam)

    def end_iteration(self) -> None:
        pass

    def metadata(self) -> dict:
        return {"optimizer": self.name, "step_size": "0.5*(1/(Lmax+lambda) + 1/(Lbar+lambda))",
                "skipping": self.skipping}


class LegacyNusPolicy:
    """Comparison arm modelled on the earlier adaptive SAG-NUS scheme.

    ``L_i`` starts at 1 and is halved at every re-selection before the line
    search (which may double it back).  Non-uniformity grows with coverage:
    the weighted branch is taken with probability ``m / (2n)``, and the step
    uses ``1/(L_m + lam)`` with ``L_m`` moving from ``Lmax`` towards ``Lbar``
    as ``m`` approaches ``n``.
    """

    name = "sag-nus"

    def __init__(self, n: int, rng: np.random.Generator, initial_lg: float = 1.0):
        self.n = n
        self.state = LipschitzState(n, initial_lg)
        self.sampler = NusSampler(self.state, rng, weighted_prob=0.0)

    def sample(self) -> int:
        self.sampler.weighted_prob = 0.5 * self.state.count / self.n
        return self.sampler.sample()

    def process(self, i: int, first: bool, search) -> None:
        st = self.state
        L = 1.0 if not st.seen[i] else 0.5 * st.L[i]
        if search is not None:
            L, _ = search(L)
        st.set(i, L)

    def step_size(self, lam: float) -> float:
        st = self.state
        frac = st.count / self.n
        Lm = frac * st.Lbar + (1.0 - frac) * st.Lmax
        return 1.0 / (Lm + lam)

    def end_iteration(self) -> None:
        pass

    def metadata(self) -> dict:
        return {"optimizer": self.name, "step_size": "1/(L_m+lambda), L_m=(m/n)Lbar+(1-m/n)Lmax"}
