"""Trust-region inexact Newton outer loops.

Implements the full-batch solver (TRON), its progressively subsampled variant
(STRON, optionally with a preconditioned CG subproblem solver), a variance
reduced variant (STRON-SVRG), and a line-search Newton-CG baseline that uses
the same progressive subsampling. All loops share the acceptance test
(step taken iff rho > eta0) and the radius update driven by the reduction
ratio rho = (F(w+p) - F(w)) / m(p), evaluated on the iteration's subsample.

The loops only touch the model through ``value``, ``value_and_gradient``,
``hess_operator`` and ``hess_diag`` plus ``model.dataset.n_points`` /
``n_features``, so test doubles can stand in for a real loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from time import perf_counter
from typing import Callable, Iterator, Literal

import numpy as np

from .dataio import IndexSubset, draw_subsample
from .errors import NumericError
from .loss import HvOperator
from .subproblem import TrSubproblemResult, build_preconditioner, steihaug_cg, steihaug_pcg

# effectively unconstrained radius for the line-search baseline
_UNCONSTRAINED_DELTA = 1e12

_ARMIJO_C1 = 1e-4
_MAX_BACKTRACKS = 30


@dataclass(frozen=True)
class TrustRegionConfig:
    """Acceptance thresholds, radius factors and stopping controls.

    ``delta0 = None`` starts the radius at the norm of the initial gradient.
    ``epsilon`` is relative: the loop stops once ||g_k|| <= epsilon * ||g_0||
    with g_0 the first gradient the method computed.
    """

    eta0: float = 1e-4
    eta1: float = 0.25
    eta2: float = 0.75
    gamma1: float = 0.25
    gamma2: float = 0.5
    gamma3: float = 4.0
    delta0: float | None = None
    forcing: float = 0.1
    max_cg: int = 25
    epsilon: float = 1e-2
    max_outer: int = 200

    def __post_init__(self) -> None:
        if not self.eta0 > 0:
            raise ValueError("eta0 must be > 0")
        if not 0 < self.eta1 < self.eta2 <= 1:
            raise ValueError("need 0 < eta1 < eta2 <= 1")
        if not 0 < self.gamma1 < self.gamma2 < 1 < self.gamma3:
            raise ValueError("need 0 < gamma1 < gamma2 < 1 < gamma3")
        if self.delta0 is not None and not self.delta0 > 0:
            raise ValueError("delta0 must be > 0 when given")
        if not 0 < self.forcing < 1:
            raise ValueError("forcing must be in (0, 1)")
        if self.max_cg < 1 or self.max_outer < 1:
            raise ValueError("max_cg and max_outer must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass(frozen=True)
class SubsampleSchedule:
    """Monotone growth of the subsample from an initial fraction to the full set.

    The growth rate is set so that the cumulative number of points consumed
    reaches ``epochs_to_full`` passes over the data at the iteration where the
    size first hits the full dataset.
    """

    initial_fraction: float = 0.01
    growth: Literal["linear", "exponential"] = "linear"
    epochs_to_full: float = 5.0

    def __post_init__(self) -> None:
        if not 0 < self.initial_fraction <= 1:
            raise ValueError("initial_fraction must be in (0, 1]")
        if self.growth not in ("linear", "exponential"):
            raise ValueError(f"unknown growth {self.growth!r}")
        if not self.epochs_to_full > 0:
            raise ValueError("epochs_to_full must be > 0")


@dataclass(frozen=True)
class SvrgConfig:
    """Inner-loop length between full-gradient anchor refreshes."""

    inner_iterations: int = 5

    def __post_init__(self) -> None:
        if self.inner_iterations < 1:
            raise ValueError("inner_iterations must be >= 1")


def schedule_sizes(s: SubsampleSchedule, n_points: int) -> Iterator[int]:
    """Yield subsample sizes for iterations 0, 1, 2, ... (never exhausts)."""
    f0 = s.initial_fraction
    if f0 >= 1.0:
        while True:
            yield n_points
    target = s.epochs_to_full * n_points
    if s.growth == "linear":
        consumed = 0.0
        while True:
            t = min(1.0, consumed / target)
            size = min(n_points, math.ceil(n_points * (f0 + (1.0 - f0) * t)))
            yield size
            consumed += size
    else:
        if s.epochs_to_full <= 1.0:
            # the whole budget fits in one epoch: jump to full after one draw
            yield min(n_points, math.ceil(n_points * f0))
            while True:
                yield n_points
        # rate at which the geometric series sums to the epoch budget exactly
        # when the size first reaches n_points
        r = (s.epochs_to_full - f0) / (s.epochs_to_full - 1.0)
        k = 0
        while True:
            yield min(n_points, math.ceil(n_points * f0 * r**k))
            k += 1


def schedule_size(s: SubsampleSchedule, k: int, n_points: int) -> int:
    """Size of the subsample at outer iteration ``k`` (replays the schedule)."""
    if k < 0:
        raise ValueError("k must be >= 0")
    it = schedule_sizes(s, n_points)
    for _ in range(k):
        next(it)
    return next(it)


def update_radius(
    cfg: TrustRegionConfig, rho: float, delta: float, step_norm: float, hit_boundary: bool
) -> float:
    """Next trust-region radius from the reduction ratio.

    Shrinks to gamma1 * min(||p||, delta) on poor agreement (rho <= eta1),
    keeps delta in the middle band, and expands to gamma3 * delta on strong
    agreement, but only when the step actually reached the boundary.
    """
    if rho <= cfg.eta1:
        return cfg.gamma1 * min(step_norm, delta)
    if rho < cfg.eta2:
        return delta
    return cfg.gamma3 * delta if hit_boundary else delta


def accept_step(
    cfg: TrustRegionConfig, rho: float, w: np.ndarray, p: np.ndarray
) -> np.ndarray:
    """w + p when rho > eta0 (strict), otherwise w unchanged."""
    return w + p if rho > cfg.eta0 else w


@dataclass
class TraceRow:
    outer_iteration: int
    elapsed_seconds: float
    effective_data_passes: float
    subsample_size: int
    function_value: float
    gradient_norm: float
    cg_iterations: int
    rho: float
    delta: float
    accepted: bool
    test_accuracy: float | None = None
    # debugging aid, never serialized
    w_snapshot: np.ndarray | None = None


@dataclass
class RunTrace:
    rows: list[TraceRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.rows]


@dataclass
class RunResult:
    w: np.ndarray
    trace: RunTrace
    converged: bool
    g0_norm: float
    final_gradient_norm: float
    total_passes: float
    line_search_failures: int = 0


Metrics = Callable[[np.ndarray], float]


def _initial_w(model, w0: np.ndarray | None) -> np.ndarray:
    if w0 is None:
        return np.zeros(model.dataset.n_features)
    w = np.array(w0, dtype=np.float64, copy=True)
    if w.shape != (model.dataset.n_features,):
        raise ValueError(f"w0 must have shape ({model.dataset.n_features},)")
    return w


def _tr_loop(
    model,
    cfg: TrustRegionConfig,
    sampler: Callable[[int], IndexSubset],
    *,
    pcg_alpha: float | None = None,
    w0: np.ndarray | None = None,
    metrics: Metrics | None = None,
    keep_iterates: bool = False,
) -> RunResult:
    n = model.dataset.n_points
    w = _initial_w(model, w0)
    t_start = perf_counter()
    trace = RunTrace()
    passes = 0.0
    g0_norm = math.nan
    delta = math.nan
    gnorm = math.nan
    converged = False
    # (f, g) at the current w, reusable only while w is unchanged and the
    # subset is the full set
    cached: tuple[float, np.ndarray] | None = None

    for k in range(cfg.max_outer):
        subset = sampler(k)
        size = subset.size(n)
        if cached is not None and subset.is_full:
            f, g = cached
        else:
            try:
                f, g = model.value_and_gradient(w, subset)
            except NumericError as e:
                raise NumericError(f"outer iteration {k}: {e}") from e
            passes += size / n
        gnorm = float(np.linalg.norm(g))
        if k == 0:
            g0_norm = gnorm
            delta = cfg.delta0 if cfg.delta0 is not None else gnorm
        if gnorm <= cfg.epsilon * g0_norm:
            converged = True
            break

        op = HvOperator(apply=model.hess_operator(w, subset), grad=g)
        try:
            if pcg_alpha is not None:
                precond = build_preconditioner(model.hess_diag(w, subset), pcg_alpha)
                res = steihaug_pcg(op, delta, cfg.forcing, cfg.max_cg, precond)
            else:
                res = steihaug_cg(op, delta, cfg.forcing, cfg.max_cg)
            f_new = model.value(w + res.p, subset)
        except NumericError as e:
            raise NumericError(f"outer iteration {k}: {e}") from e
        passes += size / n

        rho = (f_new - f) / res.model_reduction
        accepted = rho > cfg.eta0
        w = accept_step(cfg, rho, w, res.p)
        delta_used = delta
        delta = update_radius(cfg, rho, delta, res.step_norm, res.termination == "boundary")
        if accepted:
            cached = None
        else:
            cached = (f, g) if subset.is_full else None

        trace.rows.append(
            TraceRow(
                outer_iteration=k,
                elapsed_seconds=perf_counter() - t_start,
                effective_data_passes=passes,
                subsample_size=size,
                function_value=f_new if accepted else f,
                gradient_norm=gnorm,
                cg_iterations=res.cg_iterations,
                rho=rho,
                delta=delta_used,
                accepted=accepted,
                test_accuracy=metrics(w) if metrics is not None else None,
                w_snapshot=w.copy() if keep_iterates else None,
            )
        )

    return RunResult(
        w=w,
        trace=trace,
        converged=converged,
        g0_norm=g0_norm,
        final_gradient_norm=gnorm,
        total_passes=passes,
    )


def run_tron(
    model,
    cfg: TrustRegionConfig,
    *,
    pcg_alpha: float | None = None,
    w0: np.ndarray | None = None,
    metrics: Metrics | None = None,
    keep_iterates: bool = False,
) -> RunResult:
    """Full-batch trust-region inexact Newton loop.

    ``pcg_alpha = None`` solves subproblems with plain CG; a value in [0, 1]
    switches to the diagonally preconditioned solver rebuilt each iteration.
    """
    return _tr_loop(
        model,
        cfg,
        lambda k: IndexSubset.full(),
        pcg_alpha=pcg_alpha,
        w0=w0,
        metrics=metrics,
        keep_iterates=keep_iterates,
    )


def run_stron(
    model,
    cfg: TrustRegionConfig,
    schedule: SubsampleSchedule,
    rng: np.random.Generator,
    *,
    pcg_alpha: float | None = None,
    w0: np.ndarray | None = None,
    metrics: Metrics | None = None,
    keep_iterates: bool = False,
) -> RunResult:
    """Progressively subsampled trust-region loop.

    One subsample per outer iteration serves gradient, Hessian and both sides
    of the reduction ratio. The gradient stopping test is therefore evaluated
    on the subsampled gradient until the schedule reaches the full set, and is
    exact afterwards. With ``initial_fraction = 1.0`` the loop and its trace
    coincide exactly with :func:`run_tron` using plain CG.
    """
    n = model.dataset.n_points
    sizes = schedule_sizes(schedule, n)
    return _tr_loop(
        model,
        cfg,
        lambda k: draw_subsample(n, next(sizes), rng),
        pcg_alpha=pcg_alpha,
        w0=w0,
        metrics=metrics,
        keep_iterates=keep_iterates,
    )


def run_stron_svrg(
    model,
    cfg: TrustRegionConfig,
    schedule: SubsampleSchedule,
    svrg: SvrgConfig,
    rng: np.random.Generator,
    *,
    w0: np.ndarray | None = None,
    metrics: Metrics | None = None,
    keep_iterates: bool = False,
) -> RunResult:
    """Variance-reduced variant with a periodically refreshed full gradient.

    Each inner step solves the subproblem with the corrected gradient
    g = grad_S(w) - grad_S(w_anchor) + grad_full(w_anchor) while the Hessian
    keeps the progressive subsampling of the plain loop. Trace rows number
    inner steps consecutively; the full-gradient pass is charged to
    ``effective_data_passes`` when it happens.
    """
    n = model.dataset.n_points
    w = _initial_w(model, w0)
    t_start = perf_counter()
    trace = RunTrace()
    sizes = schedule_sizes(schedule, n)
    full = IndexSubset.full()
    passes = 0.0
    g0_norm: float | None = None
    delta = math.nan
    gnorm = math.nan
    converged = False
    t = 0

    while t < cfg.max_outer and not converged:
        try:
            g_full = model.gradient(w, full)
        except NumericError as e:
            raise NumericError(f"svrg anchor at step {t}: {e}") from e
        passes += 1.0
        w_anchor = w
        gnorm = float(np.linalg.norm(g_full))
        if g0_norm is None:
            g0_norm = gnorm
            delta = cfg.delta0 if cfg.delta0 is not None else gnorm
        if gnorm <= cfg.epsilon * g0_norm:
            converged = True
            break

        for _ in range(svrg.inner_iterations):
            if t >= cfg.max_outer:
                break
            subset = draw_subsample(n, next(sizes), rng)
            size = subset.size(n)
            try:
                f_s, g_s = model.value_and_gradient(w, subset)
                passes += size / n
                if subset.is_full:
                    # both anchor terms equal the full gradient and cancel
                    g_vr = g_s
                else:
                    g_vr = g_s - model.gradient(w_anchor, subset) + g_full
                    passes += size / n
            except NumericError as e:
                raise NumericError(f"outer iteration {t}: {e}") from e
            gnorm = float(np.linalg.norm(g_vr))
            if gnorm <= cfg.epsilon * g0_norm:
                converged = True
                break

            op = HvOperator(apply=model.hess_operator(w, subset), grad=g_vr)
            try:
                res = steihaug_cg(op, delta, cfg.forcing, cfg.max_cg)
                f_new = model.value(w + res.p, subset)
            except NumericError as e:
                raise NumericError(f"outer iteration {t}: {e}") from e
            passes += size / n

            rho = (f_new - f_s) / res.model_reduction
            accepted = rho > cfg.eta0
            w = accept_step(cfg, rho, w, res.p)
            delta_used = delta
            delta = update_radius(cfg, rho, delta, res.step_norm, res.termination == "boundary")

            trace.rows.append(
                TraceRow(
                    outer_iteration=t,
                    elapsed_seconds=perf_counter() - t_start,
                    effective_data_passes=passes,
                    subsample_size=size,
                    function_value=f_new if accepted else f_s,
                    gradient_norm=gnorm,
                    cg_iterations=res.cg_iterations,
                    rho=rho,
                    delta=delta_used,
                    accepted=accepted,
                    test_accuracy=metrics(w) if metrics is not None else None,
                    w_snapshot=w.copy() if keep_iterates else None,
                )
            )
            t += 1

    return RunResult(
        w=w,
        trace=trace,
        converged=converged,
        g0_norm=g0_norm if g0_norm is not None else math.nan,
        final_gradient_norm=gnorm,
        total_passes=passes,
    )


def run_newton_cg(
    model,
    cfg: TrustRegionConfig,
    schedule: SubsampleSchedule,
    rng: np.random.Generator,
    *,
    w0: np.ndarray | None = None,
    metrics: Metrics | None = None,
    keep_iterates: bool = False,
) -> RunResult:
    """Subsampled inexact Newton with backtracking line search, no trust region.

    The CG solve runs with an effectively infinite radius and the usual
    residual test; the step length starts at 1 and halves until the Armijo
    condition holds on the subsampled objective (at most 30 backtracks, after
    which the step is skipped). Trace conventions: ``rho`` carries the
    accepted step length (nan when the search failed) and ``delta`` is +inf.
    """
    n = model.dataset.n_points
    w = _initial_w(model, w0)
    t_start = perf_counter()
    trace = RunTrace()
    sizes = schedule_sizes(schedule, n)
    passes = 0.0
    g0_norm = math.nan
    gnorm = math.nan
    converged = False
    failures = 0

    for k in range(cfg.max_outer):
        subset = draw_subsample(n, next(sizes), rng)
        size = subset.size(n)
        try:
            f, g = model.value_and_gradient(w, subset)
        except NumericError as e:
            raise NumericError(f"outer iteration {k}: {e}") from e
        passes += size / n
        gnorm = float(np.linalg.norm(g))
        if k == 0:
            g0_norm = gnorm
        if gnorm <= cfg.epsilon * g0_norm:
            converged = True
            break

        op = HvOperator(apply=model.hess_operator(w, subset), grad=g)
        try:
            res = steihaug_cg(op, _UNCONSTRAINED_DELTA, cfg.forcing, cfg.max_cg)
        except NumericError as e:
            raise NumericError(f"outer iteration {k}: {e}") from e
        p = res.p
        slope = float(g @ p)

        step = 1.0
        ok = False
        f_try = f
        for _ in range(_MAX_BACKTRACKS):
            try:
                f_try = model.value(w + step * p, subset)
            except NumericError:
                f_try = math.inf  # treat overflow as failed sufficient decrease
            passes += size / n
            if f_try <= f + _ARMIJO_C1 * step * slope:
                ok = True
                break
            step *= 0.5
        if ok:
            w = w + step * p
        else:
            failures += 1

        trace.rows.append(
            TraceRow(
                outer_iteration=k,
                elapsed_seconds=perf_counter() - t_start,
                effective_data_passes=passes,
                subsample_size=size,
                function_value=f_try if ok else f,
                gradient_norm=gnorm,
                cg_iterations=res.cg_iterations,
                rho=step if ok else math.nan,
                delta=math.inf,
                accepted=ok,
                test_accuracy=metrics(w) if metrics is not None else None,
                w_snapshot=w.copy() if keep_iterates else None,
            )
        )

    return RunResult(
        w=w,
        trace=trace,
        converged=converged,
        g0_norm=g0_norm,
        final_gradient_norm=gnorm,
        total_passes=passes,
        line_search_failures=failures,
    )
