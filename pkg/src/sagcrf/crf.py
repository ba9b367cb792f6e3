"""Exact inference for linear-chain CRFs.

All recursions run in log space.  Potentials are a ``T x K`` unary matrix plus
one ``K x K`` pairwise matrix shared by every adjacent pair of positions.

Weight vectors are laid out as ``[unary block | pairwise block]``: the unary
feature for raw attribute ``a`` and state ``s`` lives at ``a * K + s`` and the
pairwise feature ``(s, s')`` at ``pairwise_base + s * K + s'``.  A
:class:`CompiledSequence` carries the handful of coordinates a sequence
touches (its *support*), so the training loops only ever read and write
``w[support]``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np
from scipy.special import logsumexp

from .errors import ContractError, RefusalError

BRUTE_FORCE_LIMIT = 10**6


@dataclass(frozen=True)
class LabelAlphabet:
    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) == 0:
            raise ContractError("label alphabet must not be empty")
        if len(set(self.labels)) != len(self.labels):
            raise ContractError("duplicate labels in alphabet")
        object.__setattr__(self, "_lookup", {lab: k for k, lab in enumerate(self.labels)})

    @property
    def K(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        return self._lookup[label]

    def get(self, label: str, default: int = -1) -> int:
        return self._lookup.get(label, default)

    def __contains__(self, label) -> bool:
        return label in self._lookup

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class ChainSequence:
    """Input tokens; each position is a tuple of raw column strings (word first)."""

    positions: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if len(self.positions) == 0:
            raise ContractError("a chain needs at least one position")

    @property
    def T(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class LabeledSequence:
    sequence: ChainSequence
    labels: tuple[int, ...]

    def __post_init__(self):
        if len(self.labels) != self.sequence.T:
            raise ContractError(
                f"{len(self.labels)} labels for a sequence of length {self.sequence.T}"
            )

    @property
    def T(self) -> int:
        return self.sequence.T


@dataclass(frozen=True)
class Potentials:
    unary: np.ndarray  # (T, K) nats
    pairwise: np.ndarray  # (K, K) nats

    @property
    def T(self) -> int:
        return self.unary.shape[0]

    @property
    def K(self) -> int:
        return self.unary.shape[1]


@dataclass(frozen=True)
class ChainMarginals:
    unary: np.ndarray  # (T, K)
    pairwise: np.ndarray  # (T-1, K, K)
    logZ: float


@dataclass(frozen=True)
class SparseVector:
    indices: np.ndarray
    values: np.ndarray

    @classmethod
    def from_dense_support(cls, support: np.ndarray, values: np.ndarray) -> "SparseVector":
        """Build from coordinates (sorted, unique) and values, dropping exact zeros."""
        keep = values != 0.0
        return cls(np.asarray(support[keep], dtype=np.int64), np.asarray(values[keep], dtype=float))

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def to_dense(self, dim: int) -> np.ndarray:
        out = np.zeros(dim)
        out[self.indices] = self.values
        return out

    def squared_norm(self) -> float:
        return float(self.values @ self.values)


class CompiledSequence:
    """A sequence mapped onto feature coordinates.

    ``attrs`` holds the sorted raw-attribute ids firing anywhere in the
    sequence and ``counts[t, u]`` how often ``attrs[u]`` fires at position
    ``t``.  ``labels`` is ``None`` for unlabeled input; label id ``-1`` marks a
    gold label that is outside the alphabet.
    """

    __slots__ = (
        "attrs", "counts", "labels", "K", "pairwise_base", "support",
        "gold_onehot", "gold_pair", "n_unary",
    )

    def __init__(self, attrs, counts, labels, K: int, pairwise_base: int):
        self.attrs = np.asarray(attrs, dtype=np.int64)
        self.counts = np.ascontiguousarray(counts, dtype=float)
        if self.counts.ndim != 2 or self.counts.shape[1] != len(self.attrs):
            raise ContractError("counts must be T x len(attrs)")
        if self.counts.shape[0] < 1:
            raise ContractError("a chain needs at least one position")
        self.K = int(K)
        self.pairwise_base = int(pairwise_base)
        self.n_unary = len(self.attrs) * self.K
        unary_ids = (self.attrs[:, None] * self.K + np.arange(self.K)).ravel()
        pair_ids = self.pairwise_base + np.arange(self.K * self.K)
        self.support = np.concatenate([unary_ids, pair_ids]).astype(np.int64)
        if labels is None:
            self.labels = None
            self.gold_onehot = None
            self.gold_pair = None
        else:
            self.labels = np.asarray(labels, dtype=np.int64)
            if len(self.labels) != self.T:
                raise ContractError("label count does not match sequence length")
            if np.any(self.labels >= self.K):
                raise ContractError("label id out of range")
            onehot = np.zeros((self.T, self.K))
            ok = self.labels >= 0
            onehot[np.nonzero(ok)[0], self.labels[ok]] = 1.0
            pair = np.zeros((self.K, self.K))
            for a, b in zip(self.labels[:-1], self.labels[1:]):
                if a >= 0 and b >= 0:
                    pair[a, b] += 1.0
            self.gold_onehot = onehot
            self.gold_pair = pair

    @property
    def T(self) -> int:
        return self.counts.shape[0]

    @property
    def U(self) -> int:
        return len(self.attrs)

    def split(self, w_local: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Split a support-local weight vector into (U x K unary, K x K pairwise) blocks."""
        return (
            w_local[: self.n_unary].reshape(self.U, self.K),
            w_local[self.n_unary:].reshape(self.K, self.K),
        )


# ---------------------------------------------------------------------------
# kernels


@numba.njit(cache=True)
def _lse_update(m, s, x):
    # streaming log-sum-exp accumulator: returns new (max, scaled sum)
    if x > m:
        return x, s * np.exp(m - x) + 1.0
    return m, s + np.exp(x - m)


@numba.njit(cache=True)
def _forward_logz(unary, pairwise):
    T, K = unary.shape
    alpha = unary[0].copy()
    nxt = np.empty(K)
    for t in range(1, T):
        for b in range(K):
            m = -np.inf
            s = 0.0
            for a in range(K):
                m, s = _lse_update(m, s, alpha[a] + pairwise[a, b])
            nxt[b] = unary[t, b] + m + np.log(s)
        alpha[:] = nxt
    m = -np.inf
    s = 0.0
    for a in range(K):
        m, s = _lse_update(m, s, alpha[a])
    return m + np.log(s)


@numba.njit(cache=True)
def _forward_backward(unary, pairwise):
    T, K = unary.shape
    alpha = np.empty((T, K))
    beta = np.zeros((T, K))
    alpha[0] = unary[0]
    for t in range(1, T):
        for b in range(K):
            m = -np.inf
            s = 0.0
            for a in range(K):
                m, s = _lse_update(m, s, alpha[t - 1, a] + pairwise[a, b])
            alpha[t, b] = unary[t, b] + m + np.log(s)
    for t in range(T - 2, -1, -1):
        for a in range(K):
            m = -np.inf
            s = 0.0
            for b in range(K):
                m, s = _lse_update(m, s, pairwise[a, b] + unary[t + 1, b] + beta[t + 1, b])
            beta[t, a] = m + np.log(s)
    m = -np.inf
    s = 0.0
    for a in range(K):
        m, s = _lse_update(m, s, alpha[T - 1, a])
    logz = m + np.log(s)
    node = np.empty((T, K))
    for t in range(T):
        for a in range(K):
            node[t, a] = np.exp(alpha[t, a] + beta[t, a] - logz)
    edge = np.empty((max(T - 1, 0), K, K))
    for t in range(T - 1):
        for a in range(K):
            for b in range(K):
                edge[t, a, b] = np.exp(
                    alpha[t, a] + pairwise[a, b] + unary[t + 1, b] + beta[t + 1, b] - logz
                )
    return logz, node, edge


@numba.njit(cache=True)
def _viterbi(unary, pairwise):
    T, K = unary.shape
    score = unary[0].copy()
    back = np.zeros((T, K), dtype=np.int64)
    nxt = np.empty(K)
    for t in range(1, T):
        for b in range(K):
            best = -np.inf
            arg = 0
            for a in range(K):
                v = score[a] + pairwise[a, b]
                if v > best:  # strict: ties keep the lower id
                    best = v
                    arg = a
            nxt[b] = best + unary[t, b]
            back[t, b] = arg
        score[:] = nxt
    path = np.empty(T, dtype=np.int64)
    best = -np.inf
    arg = 0
    for a in range(K):
        if score[a] > best:
            best = score[a]
            arg = a
    path[T - 1] = arg
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


# ---------------------------------------------------------------------------
# potentials and inference


def _check_potentials(pot: Potentials):
    if pot.unary.ndim != 2 or pot.pairwise.shape != (pot.K, pot.K):
        raise ContractError("potentials must be T x K unary and K x K pairwise")
    if not (np.all(np.isfinite(pot.unary)) and np.all(np.isfinite(pot.pairwise))):
        raise ContractError("potentials must be finite")


def _as_compiled(seq, fx) -> CompiledSequence:
    if isinstance(seq, CompiledSequence):
        return seq
    return fx.compile(seq)


def local_potentials(cs: CompiledSequence, w_local: np.ndarray) -> Potentials:
    W, P = cs.split(w_local)
    return Potentials(cs.counts @ W, np.ascontiguousarray(P))


def compute_potentials(w: np.ndarray, seq, fx) -> Potentials:
    """Unary and pairwise log-scores of ``seq`` under the dense weights ``w``."""
    w = np.asarray(w, dtype=float)
    if w.shape != (fx.D,):
        raise ContractError(f"weight vector has shape {w.shape}, expected ({fx.D},)")
    cs = _as_compiled(seq, fx)
    return local_potentials(cs, w[cs.support])


def log_partition(pot: Potentials) -> float:
    """Forward pass only."""
    return float(_forward_logz(np.ascontiguousarray(pot.unary), np.ascontiguousarray(pot.pairwise)))


def forward_backward(pot: Potentials) -> ChainMarginals:
    _check_potentials(pot)
    logz, node, edge = _forward_backward(
        np.ascontiguousarray(pot.unary, dtype=float), np.ascontiguousarray(pot.pairwise, dtype=float)
    )
    return ChainMarginals(node, edge, float(logz))


def path_score(pot: Potentials, labels) -> float:
    y = np.asarray(labels, dtype=np.int64)
    s = pot.unary[np.arange(len(y)), y].sum()
    if len(y) > 1:
        s += pot.pairwise[y[:-1], y[1:]].sum()
    return float(s)


def viterbi(pot: Potentials) -> list[int]:
    """Highest-scoring label sequence; ties go to the lower label id."""
    _check_potentials(pot)
    return _viterbi(np.ascontiguousarray(pot.unary, dtype=float),
                    np.ascontiguousarray(pot.pairwise, dtype=float)).tolist()


# ---------------------------------------------------------------------------
# per-example loss and gradient on support-local weights (hot path)


def _gold_score(cs: CompiledSequence, pot: Potentials) -> float:
    return float(np.sum(pot.unary * cs.gold_onehot) + np.sum(pot.pairwise * cs.gold_pair))


def local_nll(cs: CompiledSequence, w_local: np.ndarray) -> float:
    """-log p(y|x,w) from a forward pass only."""
    pot = local_potentials(cs, w_local)
    return float(_forward_logz(pot.unary, pot.pairwise)) - _gold_score(cs, pot)


def local_grad(cs: CompiledSequence, w_local: np.ndarray):
    """Return ``(nll, g, marginals)`` with ``g = -grad log p`` over ``cs.support``."""
    pot = local_potentials(cs, w_local)
    logz, node, edge = _forward_backward(pot.unary, pot.pairwise)
    nll = float(logz) - _gold_score(cs, pot)
    g_unary = cs.counts.T @ (node - cs.gold_onehot)
    g_pair = edge.sum(axis=0) - cs.gold_pair
    g = np.concatenate([g_unary.ravel(), g_pair.ravel()])
    return nll, g, ChainMarginals(node, edge, float(logz))


def sequence_nll(w: np.ndarray, ls, fx) -> tuple[float, ChainMarginals]:
    cs = _as_compiled(ls, fx)
    if cs.labels is None:
        raise ContractError("sequence_nll needs gold labels")
    pot = compute_potentials(w, cs, fx)
    marg = forward_backward(pot)
    return marg.logZ - _gold_score(cs, pot), marg


def sequence_grad(w: np.ndarray, ls, fx) -> tuple[SparseVector, ChainMarginals]:
    cs = _as_compiled(ls, fx)
    if cs.labels is None:
        raise ContractError("sequence_grad needs gold labels")
    w = np.asarray(w, dtype=float)
    if w.shape != (fx.D,):
        raise ContractError(f"weight vector has shape {w.shape}, expected ({fx.D},)")
    _, g, marg = local_grad(cs, w[cs.support])
    return SparseVector.from_dense_support(cs.support, g), marg


def regularized_objective(w: np.ndarray, dataset, lam: float) -> float:
    """Mean negative log-likelihood plus ``lam / 2 * ||w||^2``."""
    if lam < 0:
        raise ContractError("lambda must be non-negative")
    seqs = dataset.compiled
    if len(seqs) == 0:
        raise ContractError("empty dataset")
    w = np.asarray(w, dtype=float)
    total = sum(local_nll(cs, w[cs.support]) for cs in seqs)
    return total / len(seqs) + 0.5 * lam * float(w @ w)


def full_gradient(w: np.ndarray, dataset, lam: float) -> tuple[float, np.ndarray]:
    """Objective value and dense gradient, summing every example exactly."""
    w = np.asarray(w, dtype=float)
    grad = np.zeros_like(w)
    total = 0.0
    for cs in dataset.compiled:
        nll, g, _ = local_grad(cs, w[cs.support])
        total += nll
        grad[cs.support] += g
    n = len(dataset.compiled)
    return total / n + 0.5 * lam * float(w @ w), grad / n + lam * w


# ---------------------------------------------------------------------------
# enumeration oracle


def enumerate_paths(T: int, K: int) -> np.ndarray:
    return np.array(list(itertools.product(range(K), repeat=T)), dtype=np.int64).reshape(-1, T)


def brute_force_inference(pot: Potentials) -> tuple[float, ChainMarginals]:
    """Partition function and marginals by summing over all ``K**T`` label sequences."""
    T, K = pot.unary.shape
    if K**T > BRUTE_FORCE_LIMIT:
        raise RefusalError(f"K^T = {K}^{T} exceeds the enumeration limit {BRUTE_FORCE_LIMIT}")
    Y = enumerate_paths(T, K)
    scores = pot.unary[np.arange(T), Y].sum(axis=1)
    if T > 1:
        scores = scores + pot.pairwise[Y[:, :-1], Y[:, 1:]].sum(axis=1)
    logz = float(logsumexp(scores))
    prob = np.exp(scores - logz)
    node = np.zeros((T, K))
    edge = np.zeros((max(T - 1, 0), K, K))
    for t in range(T):
        np.add.at(node[t], Y[:, t], prob)
    for t in range(T - 1):
        np.add.at(edge[t], (Y[:, t], Y[:, t + 1]), prob)
    return logz, ChainMarginals(node, edge, logz)


def brute_force_argmax(pot: Potentials) -> tuple[list[int], float]:
    T, K = pot.unary.shape
    if K**T > BRUTE_FORCE_LIMIT:
        raise RefusalError(f"K^T = {K}^{T} exceeds the enumeration limit {BRUTE_FORCE_LIMIT}")
    best, best_score = None, -np.inf
    for y in itertools.product(range(K), repeat=T):
        s = path_score(pot, y)
        if s > best_score:
            best, best_score = list(y), s
    return best, best_score


def all_path_scores(pot: Potentials) -> Sequence[float]:
    T, K = pot.unary.shape
    Y = enumerate_paths(T, K)
    scores = pot.unary[np.arange(T), Y].sum(axis=1)
    if T > 1:
        scores = scores + pot.pairwise[Y[:, :-1], Y[:, 1:]].sum(axis=1)
    return scores
