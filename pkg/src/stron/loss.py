"""Matrix-free subsampled losses: l2-regularized logistic regression and l2-SVM.

Every quantity is an average over the rows of an index subset plus the full
(never subsampled) regularizer lam/2 ||w||^2 and its derivatives. Hessians are
never materialized; products cost one pass over the subset's nonzeros. For the
squared-hinge SVM the generalized Hessian is used, with the strict active set
1 - y_i w.x_i > 0 (margin ties excluded).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .dataio import IndexSubset, SparseDataset
from .errors import NumericError

LossKind = Literal["logistic", "svm"]


def _softplus(z: np.ndarray) -> np.ndarray:
    # log(1 + exp(z)) without overflow: max(z, 0) + log1p(exp(-|z|))
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


@dataclass(frozen=True)
class HvOperator:
    """A linear symmetric map v -> Hv paired with the gradient it belongs to."""

    apply: Callable[[np.ndarray], np.ndarray]
    grad: np.ndarray


class LossModel:
    """Subsampled value/gradient/Hessian-vector/Hessian-diagonal evaluations.

    The model is read-only after construction and safe to share between
    concurrent runs; every method is pure in (w, subset, v).
    """

    def __init__(self, kind: LossKind, lam: float, dataset: SparseDataset):
        if kind not in ("logistic", "svm"):
            raise ValueError(f"unknown loss kind {kind!r}")
        if lam < 0:
            raise ValueError(f"lambda must be >= 0, got {lam}")
        self.kind = kind
        self.lam = float(lam)
        self.dataset = dataset

    # -- plumbing ----------------------------------------------------------

    def _resolve(self, subset: IndexSubset) -> tuple[sp.csr_matrix, np.ndarray, int]:
        d = self.dataset
        if subset.is_full:
            return d.X, d.y, d.n_points
        idx = subset.indices
        if idx.size == 0:
            raise ValueError("subset must be nonempty")
        if idx[-1] >= d.n_points:
            raise ValueError(f"subset index {idx[-1]} out of range for {d.n_points} points")
        return d.X[idx], d.y[idx], int(idx.size)

    def _check_finite(self, x, what: str):
        if not np.all(np.isfinite(x)):
            raise NumericError(f"{self.kind} {what} is not finite")
        return x

    # -- first order -------------------------------------------------------

    def value(self, w: np.ndarray, subset: IndexSubset) -> float:
        X, y, count = self._resolve(subset)
        z = y * (X @ w)
        if self.kind == "logistic":
            data_term = float(np.sum(_softplus(-z))) / count
        else:
            viol = np.maximum(0.0, 1.0 - z)
            data_term = float(viol @ viol) / count
        out = data_term + 0.5 * self.lam * float(w @ w)
        return self._check_finite(out, "value")

    def value_and_gradient(self, w: np.ndarray, subset: IndexSubset) -> tuple[float, np.ndarray]:
        """Fused evaluation sharing a single pass over the subset's margins."""
        X, y, count = self._resolve(subset)
        z = y * (X @ w)
        reg = 0.5 * self.lam * float(w @ w)
        if self.kind == "logistic":
            val = float(np.sum(_softplus(-z))) / count + reg
            coeff = (-y * expit(-z)) / count
        else:
            viol = np.maximum(0.0, 1.0 - z)
            val = float(viol @ viol) / count + reg
            coeff = (-2.0 / count) * (y * viol)
        grad = X.T @ coeff + self.lam * w
        self._check_finite(val, "value")
        return val, self._check_finite(grad, "gradient")

    def gradient(self, w: np.ndarray, subset: IndexSubset) -> np.ndarray:
        return self.value_and_gradient(w, subset)[1]

    # -- second order ------------------------------------------------------

    def hess_operator(self, w: np.ndarray, subset: IndexSubset) -> Callable[[np.ndarray], np.ndarray]:
        """Return v -> Hv at fixed (w, subset), with curvature weights precomputed.

        Intended for CG inner loops where the operator is applied many times;
        each application costs two sparse passes over the subset rows.
        """
        X, y, count = self._resolve(subset)
        z = y * (X @ w)
        lam = self.lam
        if self.kind == "logistic":
            s = expit(z)
            weights = s * (1.0 - s) / count

            def apply(v: np.ndarray) -> np.ndarray:
                return X.T @ (weights * (X @ v)) + lam * v

        else:
            active = (1.0 - z) > 0.0
            Xa = X[active]
            scale = 2.0 / count

            def apply(v: np.ndarray) -> np.ndarray:
                return scale * (Xa.T @ (Xa @ v)) + lam * v

        return apply

    def hess_vec(self, w: np.ndarray, subset: IndexSubset, v: np.ndarray) -> np.ndarray:
        out = self.hess_operator(w, subset)(v)
        return self._check_finite(out, "hessian-vector product")

    def hess_diag(self, w: np.ndarray, subset: IndexSubset) -> np.ndarray:
        """Diagonal of the same (generalized) Hessian used by hess_vec."""
        X, y, count = self._resolve(subset)
        z = y * (X @ w)
        X2 = X.copy()
        X2.data = X2.data**2
        if self.kind == "logistic":
            s = expit(z)
            diag = X2.T @ (s * (1.0 - s)) / count
        else:
            active = (1.0 - z) > 0.0
            diag = (2.0 / count) * (X2[active].T @ np.ones(int(active.sum())))
        return self._check_finite(diag + self.lam, "hessian diagonal")
