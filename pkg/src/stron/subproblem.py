"""Approximate trust-region subproblem solvers.

Minimizes the quadratic model g.p + 1/2 p.Hp over ||p|| <= delta by truncated
conjugate gradient, stopping on a relative-residual (forcing) test, at the
region boundary, or at an iteration cap. A diagonally preconditioned variant
solves the transformed problem in the scaled space and maps the step back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from .errors import NumericError
from .loss import HvOperator

Termination = Literal["residual", "boundary", "max-iterations"]


@dataclass(frozen=True)
class TrSubproblemResult:
    """Outcome of one subproblem solve.

    ``step_norm`` is the norm the trust-region constraint was enforced in:
    the plain Euclidean norm of ``p`` for CG, the norm of the transformed
    step for PCG (the M-norm of ``p``). ``model_reduction`` is the quadratic
    model value at ``p`` and is <= 0.
    """

    p: np.ndarray
    cg_iterations: int
    termination: Termination
    model_reduction: float
    step_norm: float


@dataclass(frozen=True)
class Preconditioner:
    """Positive diagonal M blending the Hessian diagonal with the identity."""

    diagonal: np.ndarray
    alpha: float


def build_preconditioner(hdiag: np.ndarray, alpha: float) -> Preconditioner:
    """M = alpha * diag(H) + (1 - alpha) * I, clamped below at 1e-12.

    alpha = 0 disables preconditioning; alpha = 1 is the pure diagonal
    preconditioner.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    hdiag = np.asarray(hdiag, dtype=np.float64)
    if hdiag.size and hdiag.min() < 0:
        raise ValueError("Hessian diagonal entries must be >= 0")
    diag = np.maximum(alpha * hdiag + (1.0 - alpha), 1e-12)
    return Preconditioner(diagonal=diag, alpha=float(alpha))


def boundary_tau(p: np.ndarray, d: np.ndarray, delta: float) -> float:
    """The unique tau > 0 with ||p + tau*d|| = delta, given ||p|| < delta.

    Solves the quadratic (d.d) tau^2 + 2 (p.d) tau + (p.p - delta^2) = 0 using
    the root form that avoids cancellation for either sign of p.d.
    """
    pp = float(p @ p)
    pd = float(p @ d)
    dd = float(d @ d)
    if dd == 0.0:
        raise ValueError("direction d must be nonzero")
    if pp >= delta * delta:
        raise ValueError(f"||p|| = {math.sqrt(pp)} must be < delta = {delta}")
    c = pp - delta * delta
    disc = pd * pd - dd * c
    sq = math.sqrt(disc)
    if pd <= 0.0:
        return (-pd + sq) / dd
    return -c / (pd + sq)


def _run_cg(
    hv: Callable[[np.ndarray], np.ndarray],
    g: np.ndarray,
    delta: float,
    forcing: float,
    max_iters: int,
) -> TrSubproblemResult:
    gnorm = float(np.linalg.norm(g))
    if gnorm == 0.0:
        z = np.zeros_like(g)
        return TrSubproblemResult(z, 0, "residual", 0.0, 0.0)
    threshold = forcing * gnorm

    p = np.zeros_like(g)
    r = -g
    d = r.copy()
    rr = gnorm * gnorm
    mr = 0.0

    for j in range(1, max_iters + 1):
        if math.sqrt(rr) < threshold:
            return TrSubproblemResult(p, j - 1, "residual", mr, float(np.linalg.norm(p)))
        v = hv(d)
        dv = float(d @ v)
        if not math.isfinite(dv):
            raise NumericError(f"non-finite curvature d.Hd at CG iteration {j}")
        if dv <= 0.0:
            # negative curvature (or exact breakdown): the model decreases
            # without bound along d, so move to the boundary
            tau = boundary_tau(p, d, delta)
            rd = float(r @ d)
            mr += -tau * rd + 0.5 * tau * tau * dv
            p_out = p + tau * d
            return TrSubproblemResult(p_out, j, "boundary", mr, float(np.linalg.norm(p_out)))
        alpha = rr / dv
        p_new = p + alpha * d
        if float(np.linalg.norm(p_new)) >= delta:
            tau = boundary_tau(p, d, delta)
            rd = float(r @ d)
            mr += -tau * rd + 0.5 * tau * tau * dv
            p_out = p + tau * d
            return TrSubproblemResult(p_out, j, "boundary", mr, float(np.linalg.norm(p_out)))
        mr -= 0.5 * alpha * rr
        p = p_new
        r = r - alpha * v
        rr_new = float(r @ r)
        if not math.isfinite(rr_new):
            raise NumericError(f"non-finite residual at CG iteration {j}")
        d = r + (rr_new / rr) * d
        rr = rr_new

    return TrSubproblemResult(p, max_iters, "max-iterations", mr, float(np.linalg.norm(p)))


def steihaug_cg(
    op: HvOperator, delta: float, forcing: float, max_iters: int
) -> TrSubproblemResult:
    """Truncated CG on the trust-region subproblem for (op.grad, op.apply).

    Starts from p = 0 with r = d = -g, stops when ||r|| < forcing * ||g||,
    crosses to the boundary when an iterate leaves the region or when
    nonpositive curvature is detected, and otherwise caps at ``max_iters``
    operator applications (= returned cg_iterations).
    """
    if delta <= 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    if not 0.0 < forcing < 1.0:
        raise ValueError(f"forcing must be in (0, 1), got {forcing}")
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")
    return _run_cg(op.apply, op.grad, delta, forcing, max_iters)


def steihaug_pcg(
    op: HvOperator, delta: float, forcing: float, max_iters: int, M: Preconditioner
) -> TrSubproblemResult:
    """Preconditioned variant: CG on the diagonally rescaled subproblem.

    With L = sqrt(M) the solve runs on operator L^-1 H L^-1 and gradient
    L^-1 g under ||p_hat|| <= delta, and the returned step is p = L^-1 p_hat.
    The residual test therefore uses forcing * ||L^-1 g||, and the constraint
    (and ``step_norm``) live in the M-norm of p. With alpha = 0 the iterates
    coincide exactly with :func:`steihaug_cg`.
    """
    if delta <= 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    if not 0.0 < forcing < 1.0:
        raise ValueError(f"forcing must be in (0, 1), got {forcing}")
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")
    inv_l = 1.0 / np.sqrt(M.diagonal)
    g_hat = inv_l * op.grad
    apply = op.apply

    def hv_hat(v_hat: np.ndarray) -> np.ndarray:
        return inv_l * apply(inv_l * v_hat)

    res = _run_cg(hv_hat, g_hat, delta, forcing, max_iters)
    return TrSubproblemResult(
        p=inv_l * res.p,
        cg_iterations=res.cg_iterations,
        termination=res.termination,
        model_reduction=res.model_reduction,
        step_norm=res.step_norm,
    )
