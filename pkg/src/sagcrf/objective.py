"""The regularized CRF training objective as a finite sum over sequences."""
from __future__ import annotations

import numpy as np

from .crf import SparseVector, full_gradient, local_grad, local_nll, regularized_objective
from .errors import ContractError
from .saga import FiniteSumObjective


class CrfObjective:
    """``f(w) = (1/n) sum_i -log p(y_i|x_i,w) + lam/2 ||w||^2`` over a :class:`Dataset`.

    The per-example methods take and return vectors restricted to
    ``support(i)``; the regularizer is never part of a per-example gradient.
    """

    def __init__(self, dataset, lam: float | None = None):
        if dataset.n < 1:
            raise ContractError("empty dataset")
        self.dataset = dataset
        self.lam = 1.0 / dataset.n if lam is None else float(lam)
        if self.lam < 0:
            raise ContractError("lambda must be non-negative")
        self.seqs = dataset.compiled
        self.n = dataset.n
        self.D = dataset.D

    def support(self, i: int) -> np.ndarray:
        return self.seqs[i].support

    def example_grad(self, i: int, w_local: np.ndarray):
        return local_grad(self.seqs[i], w_local)

    def example_loss(self, i: int, w_local: np.ndarray) -> float:
        return local_nll(self.seqs[i], w_local)

    def value(self, w: np.ndarray) -> float:
        return regularized_objective(w, self.dataset, self.lam)

    def value_and_grad(self, w: np.ndarray):
        return full_gradient(w, self.dataset, self.lam)


class CrfFiniteSum(FiniteSumObjective):
    """CRF objective through the generic finite-sum interface used by the SAGA code.

    Term ``i`` is ``-log p(y_i|x_i,w) + lam/2 ||w||^2`` so that the terms
    average to the training objective.  Gradients are dense.
    """

    def __init__(self, dataset, lam: float | None = None):
        self.obj = CrfObjective(dataset, lam)
        self.n = self.obj.n
        self.dim = self.obj.D
        self.mu = self.obj.lam
        self.lipschitz = None  # not known analytically for CRFs

    def loss(self, i: int, w: np.ndarray) -> float:
        sup = self.obj.support(i)
        return self.obj.example_loss(i, w[sup]) + 0.5 * self.obj.lam * float(w @ w)

    def grad(self, i: int, w: np.ndarray) -> np.ndarray:
        sup = self.obj.support(i)
        _, g, _ = self.obj.example_grad(i, w[sup])
        out = self.obj.lam * np.asarray(w, dtype=float)
        out[sup] += g
        return out

    def sparse_grad(self, i: int, w: np.ndarray) -> SparseVector:
        sup = self.obj.support(i)
        _, g, _ = self.obj.example_grad(i, w[sup])
        return SparseVector.from_dense_support(sup, g)

    def value(self, w: np.ndarray) -> float:
        return self.obj.value(w)
