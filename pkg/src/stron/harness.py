"""Experiment orchestration: dataset loading, runs, CSV traces, references, gaps.

Trace CSVs are schema-stable: a fixed column order, a header row, RFC-4180
quoting, and floats printed with 17 significant digits so a round-trip parse
recovers every numeric field exactly. Two runs with the same config and seed
produce byte-identical CSVs except for the elapsed_seconds column.

``effective_data_passes`` counts gradient passes, reduction-ratio function
evaluations and SVRG full-gradient anchors (line-search trials for newton-cg),
each weighted by subset size over dataset size. Hessian-vector products are
reported separately through ``cg_iterations``. For the trust-region methods
the per-row increment is size/n for the rho evaluation plus size/n for the
(value, gradient) pass, the latter skipped when the previous row was rejected
on the full set (the pair is reused).
"""

from __future__ import annotations

import bz2
import csv
import gzip
import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .dataio import (
    IndexSubset,
    SparseDataset,
    k_fold,
    make_synthetic,
    parse_libsvm,
    split_train_test,
    subset_dataset,
    to_libsvm,
)
from .loss import LossKind, LossModel
from .optimizer import (
    RunResult,
    RunTrace,
    SubsampleSchedule,
    SvrgConfig,
    TraceRow,
    TrustRegionConfig,
    run_newton_cg,
    run_stron,
    run_stron_svrg,
    run_tron,
)

Method = Literal["tron", "stron", "stron-pcg", "stron-svrg", "newton-cg"]
METHODS = ("tron", "stron", "stron-pcg", "stron-svrg", "newton-cg")

TRACE_COLUMNS = (
    "outer_iteration",
    "elapsed_seconds",
    "effective_data_passes",
    "subsample_size",
    "function_value",
    "gradient_norm",
    "cg_iterations",
    "rho",
    "delta",
    "accepted",
    "test_accuracy",
)

_SYNTH_RE = re.compile(r"^synthetic(?::(\d+)x(\d+)(?::(\d+))?)?$")


def accuracy(w: np.ndarray, test: SparseDataset) -> float:
    """Fraction of points with sign(w.x) == y, counting sign(0) as +1."""
    scores = test.X @ w
    pred = np.where(scores >= 0.0, 1.0, -1.0)
    return float(np.mean(pred == test.y))


def dataset_hash(d: SparseDataset) -> str:
    """Content hash of the canonical LibSVM serialization."""
    return hashlib.sha256(to_libsvm(d).encode("utf-8")).hexdigest()


def load_dataset(path: str | Path, n_features: int | None = None) -> SparseDataset:
    """Load LibSVM text (optionally .gz/.bz2) or a ``synthetic:NxD:SEED`` spec."""
    m = _SYNTH_RE.match(str(path))
    if m:
        n = int(m.group(1)) if m.group(1) else 5000
        d = int(m.group(2)) if m.group(2) else 50
        seed = int(m.group(3)) if m.group(3) else 0
        return make_synthetic(n_points=n, n_features=d, seed=seed)
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"dataset not found: {p}")
    if p.suffix == ".gz":
        with gzip.open(p, "rt", encoding="utf-8") as fh:
            return parse_libsvm(fh, n_features=n_features)
    if p.suffix == ".bz2":
        with bz2.open(p, "rt", encoding="utf-8") as fh:
            return parse_libsvm(fh, n_features=n_features)
    return parse_libsvm(p, n_features=n_features)


# -- trace serialization ----------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def write_trace_csv(trace: RunTrace, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for r in trace.rows:
            writer.writerow([_fmt(getattr(r, c)) for c in TRACE_COLUMNS])


def read_trace_csv(path: str | Path) -> RunTrace:
    trace = RunTrace()
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames)[: len(TRACE_COLUMNS)] != list(TRACE_COLUMNS):
            raise ValueError(f"unexpected trace header in {path}: {reader.fieldnames}")
        for rec in reader:
            trace.rows.append(
                TraceRow(
                    outer_iteration=int(rec["outer_iteration"]),
                    elapsed_seconds=float(rec["elapsed_seconds"]),
                    effective_data_passes=float(rec["effective_data_passes"]),
                    subsample_size=int(rec["subsample_size"]),
                    function_value=float(rec["function_value"]),
                    gradient_norm=float(rec["gradient_norm"]),
                    cg_iterations=int(rec["cg_iterations"]),
                    rho=float(rec["rho"]),
                    delta=float(rec["delta"]),
                    accepted=rec["accepted"] == "1",
                    test_accuracy=float(rec["test_accuracy"]) if rec["test_accuracy"] else None,
                )
            )
    return trace


# -- experiment configuration ------------------------------------------------


@dataclass
class ExperimentConfig:
    """Everything one training run needs; mirrors the CLI flags."""

    data: str
    loss: LossKind = "logistic"
    method: Method = "tron"
    lam: float | Literal["auto"] = "auto"
    epsilon: float = 1e-2
    seed: int = 0
    init_frac: float = 0.01
    growth: Literal["linear", "exponential"] = "linear"
    epochs_to_full: float = 5.0
    pcg_alpha: float = 0.01
    svrg_m: int = 5
    max_cg: int = 25
    max_outer: int = 200
    forcing: float = 0.1
    delta0: float | None = None
    train_fraction: float = 0.8
    folds: int | None = None
    out: str = "trace.csv"
    n_features: int | None = None

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.loss not in ("logistic", "svm"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.lam != "auto" and float(self.lam) < 0:
            raise ValueError("lambda must be >= 0 or 'auto'")

    def resolve_lambda(self, n_train: int) -> float:
        return 1.0 / n_train if self.lam == "auto" else float(self.lam)

    def trust_region(self) -> TrustRegionConfig:
        return TrustRegionConfig(
            delta0=self.delta0,
            forcing=self.forcing,
            max_cg=self.max_cg,
            epsilon=self.epsilon,
            max_outer=self.max_outer,
        )

    def schedule(self) -> SubsampleSchedule:
        return SubsampleSchedule(
            initial_fraction=self.init_frac,
            growth=self.growth,
            epochs_to_full=self.epochs_to_full,
        )


def run_method(
    method: Method,
    model: LossModel,
    tr: TrustRegionConfig,
    schedule: SubsampleSchedule,
    svrg: SvrgConfig,
    seed: int,
    pcg_alpha: float,
    **kwargs,
) -> RunResult:
    rng = np.random.default_rng(seed)
    if method == "tron":
        return run_tron(model, tr, pcg_alpha=pcg_alpha, **kwargs)
    if method == "stron":
        return run_stron(model, tr, schedule, rng, **kwargs)
    if method == "stron-pcg":
        return run_stron(model, tr, schedule, rng, pcg_alpha=pcg_alpha, **kwargs)
    if method == "stron-svrg":
        return run_stron_svrg(model, tr, schedule, svrg, rng, **kwargs)
    if method == "newton-cg":
        return run_newton_cg(model, tr, schedule, rng, **kwargs)
    raise ValueError(f"unknown method {method!r}")


@dataclass
class TrainOutcome:
    result: RunResult
    train: SparseDataset
    test: SparseDataset | None
    lam: float
    train_hash: str
    summary: dict = field(default_factory=dict)


def _final_summary(cfg: ExperimentConfig, outcome: TrainOutcome, model: LossModel) -> dict:
    res = outcome.result
    full_gnorm = float(np.linalg.norm(model.gradient(res.w, _full_subset())))
    final = {
        "function_value": model.value(res.w, _full_subset()),
        "gradient_ratio": full_gnorm / res.g0_norm if res.g0_norm > 0 else 0.0,
        "converged": res.converged,
        "iterations": len(res.trace),
        "effective_data_passes": res.total_passes,
        "elapsed_seconds": res.trace.rows[-1].elapsed_seconds if res.trace.rows else 0.0,
        "line_search_failures": res.line_search_failures,
    }
    if outcome.test is not None:
        final["test_accuracy"] = accuracy(res.w, outcome.test)
    echo = asdict(cfg)
    return {
        "method": cfg.method,
        "dataset": cfg.data,
        "dataset_hash": outcome.train_hash,
        "loss": cfg.loss,
        "lambda": outcome.lam,
        "n_train": outcome.train.n_points,
        "n_test": outcome.test.n_points if outcome.test is not None else 0,
        "n_features": outcome.train.n_features,
        "config": echo,
        "final": final,
    }


def _full_subset() -> IndexSubset:
    return IndexSubset.full()


def train_once(
    cfg: ExperimentConfig,
    train: SparseDataset,
    test: SparseDataset | None,
    *,
    keep_iterates: bool = False,
) -> TrainOutcome:
    """Run the configured method on a prepared train/test pair."""
    lam = cfg.resolve_lambda(train.n_points)
    model = LossModel(cfg.loss, lam, train)
    metrics = (lambda w: accuracy(w, test)) if test is not None else None
    result = run_method(
        cfg.method,
        model,
        cfg.trust_region(),
        cfg.schedule(),
        SvrgConfig(inner_iterations=cfg.svrg_m),
        cfg.seed,
        cfg.pcg_alpha,
        metrics=metrics,
        keep_iterates=keep_iterates,
    )
    outcome = TrainOutcome(
        result=result,
        train=train,
        test=test,
        lam=lam,
        train_hash=dataset_hash(train),
    )
    outcome.summary = _final_summary(cfg, outcome, model)
    return outcome


def cmd_train(cfg: ExperimentConfig) -> dict:
    """Load data, run one training (or k-fold cross-validation), write outputs.

    Returns the summary dict that was also written next to the trace CSV.
    """
    data = load_dataset(cfg.data, n_features=cfg.n_features)
    if cfg.folds is not None:
        return _run_crossval(cfg, data)
    train, test = split_train_test(data, cfg.train_fraction, cfg.seed)
    outcome = train_once(cfg, train, test)
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trace_csv(outcome.result.trace, out)
    summary_path = out.with_suffix(".summary.json")
    summary_path.write_text(json.dumps(outcome.summary, indent=2, sort_keys=True) + "\n")
    return outcome.summary


def _run_crossval(cfg: ExperimentConfig, data: SparseDataset) -> dict:
    folds = k_fold(data, cfg.folds, cfg.seed)
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    accuracies = []
    fold_summaries = []
    for i, (train_idx, test_idx) in enumerate(folds):
        train = subset_dataset(data, train_idx)
        test = subset_dataset(data, test_idx)
        outcome = train_once(cfg, train, test)
        fold_path = out.with_suffix(f".fold{i}.csv")
        write_trace_csv(outcome.result.trace, fold_path)
        accuracies.append(outcome.summary["final"]["test_accuracy"])
        fold_summaries.append(outcome.summary)
    acc = np.asarray(accuracies)
    summary = {
        "method": cfg.method,
        "dataset": cfg.data,
        "loss": cfg.loss,
        "folds": cfg.folds,
        "accuracy_mean": float(acc.mean()),
        "accuracy_std": float(acc.std(ddof=1)) if len(acc) > 1 else 0.0,
        "per_fold": fold_summaries,
    }
    summary_path = out.with_suffix(".summary.json")
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# -- reference optima and optimality gaps -------------------------------------


@dataclass(frozen=True)
class ReferenceOptimum:
    """High-accuracy minimizer used as the oracle for optimality gaps."""

    f_star: float
    w_star: np.ndarray
    achieved_gradient_ratio: float


def compute_reference_optimum(
    model: LossModel, *, max_outer: int = 5000, epsilon: float = 1e-12
) -> ReferenceOptimum:
    """Full-batch high-accuracy solve; deterministic, no randomness involved.

    If the gradient-ratio target is not reached within ``max_outer`` the best
    iterate found is returned and the achieved ratio reports the shortfall.
    """
    cfg = TrustRegionConfig(epsilon=epsilon, max_outer=max_outer)
    res = run_tron(model, cfg, pcg_alpha=0.01)
    full = _full_subset()
    f_star = model.value(res.w, full)
    gnorm = float(np.linalg.norm(model.gradient(res.w, full)))
    ratio = gnorm / res.g0_norm if res.g0_norm > 0 else 0.0
    return ReferenceOptimum(f_star=f_star, w_star=res.w, achieved_gradient_ratio=ratio)


def save_reference(path: str | Path, ref: ReferenceOptimum, meta: dict) -> None:
    np.savez(
        path,
        w_star=ref.w_star,
        f_star=np.float64(ref.f_star),
        achieved_gradient_ratio=np.float64(ref.achieved_gradient_ratio),
        meta=json.dumps(meta, sort_keys=True),
    )


def load_reference(path: str | Path) -> tuple[ReferenceOptimum, dict]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"reference file not found: {p}")
    with np.load(p, allow_pickle=False) as z:
        ref = ReferenceOptimum(
            f_star=float(z["f_star"]),
            w_star=np.asarray(z["w_star"], dtype=np.float64),
            achieved_gradient_ratio=float(z["achieved_gradient_ratio"]),
        )
        meta = json.loads(str(z["meta"]))
    return ref, meta


def gapify_trace(
    trace_path: str | Path,
    reference_path: str | Path,
    out_path: str | Path,
    summary_path: str | Path | None = None,
) -> None:
    """Append a ``gap`` column, max(F_k - f_star, 0), to a trace CSV.

    Refuses to mix artifacts: the trace's summary metadata (dataset hash,
    lambda, loss) must match the reference's.
    """
    trace_path = Path(trace_path)
    if summary_path is None:
        summary_path = trace_path.with_suffix(".summary.json")
    summary_path = Path(summary_path)
    if not summary_path.exists():
        raise FileNotFoundError(f"trace summary not found: {summary_path}")
    summary = json.loads(summary_path.read_text())
    ref, meta = load_reference(reference_path)
    for key in ("dataset_hash", "lambda", "loss"):
        if summary.get(key) != meta.get(key):
            raise ValueError(
                f"trace/reference mismatch on {key}: {summary.get(key)!r} != {meta.get(key)!r}"
            )
    with open(trace_path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[: len(TRACE_COLUMNS)] != list(TRACE_COLUMNS):
            raise ValueError(f"unexpected trace header in {trace_path}")
        rows = list(reader)
    f_col = header.index("function_value")
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header + ["gap"])
        for row in rows:
            gap = max(float(row[f_col]) - ref.f_star, 0.0)
            writer.writerow(row + [_fmt(gap)])


def passes_to_target(trace: RunTrace, result: RunResult) -> float:
    """Effective data passes consumed by a finished run, detection included."""
    return result.total_passes


def default_reference_path(data: str, loss: str, lam: float | str) -> Path:
    tag = "auto" if lam == "auto" else f"{float(lam):g}"
    if _SYNTH_RE.match(str(data)):
        name = str(data).replace(":", "_").replace("/", "_")
        return Path(f"{name}.{loss}.lam{tag}.ref.npz")
    return Path(f"{data}.{loss}.lam{tag}.ref.npz")
