"""Command-line experiment runner.

Subcommands: train, crossval, reference, gapify, compare. Flags override an
optional JSON config file, which overrides built-in defaults. Exit codes:
0 success, 2 usage error, 3 I/O or data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .dataio import ParseError
from .errors import NumericError
from .harness import (
    METHODS,
    ExperimentConfig,
    cmd_train,
    compute_reference_optimum,
    dataset_hash,
    default_reference_path,
    gapify_trace,
    load_dataset,
    save_reference,
    split_train_test,
    train_once,
    write_trace_csv,
)
from .loss import LossModel

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _add_shared_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="LibSVM path (.gz/.bz2 ok) or synthetic:NxD:SEED")
    p.add_argument("--loss", choices=("logistic", "svm"), default="logistic")
    p.add_argument("--method", choices=METHODS, default="tron")
    p.add_argument("--lambda", dest="lam", default="auto",
                   help="regularization coefficient, or 'auto' for 1/n_train")
    p.add_argument("--eps", type=float, default=1e-2, help="relative gradient tolerance")
    p.add_argument("--max-cg", type=int, default=25)
    p.add_argument("--max-outer", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-frac", type=float, default=0.01)
    p.add_argument("--epochs-to-full", type=float, default=5.0)
    p.add_argument("--growth", choices=("linear", "exp"), default="linear")
    p.add_argument("--pcg-alpha", type=float, default=0.01)
    p.add_argument("--svrg-m", type=int, default=5)
    p.add_argument("--forcing", type=float, default=0.1)
    p.add_argument("--delta0", type=float, default=None)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--n-features", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None, help="JSON file of flag defaults; flags win")


def _experiment_config(args: argparse.Namespace, out_default: str) -> ExperimentConfig:
    lam = args.lam
    if lam != "auto":
        try:
            lam = float(lam)
        except ValueError:
            raise ValueError(f"--lambda must be a number or 'auto', got {lam!r}") from None
    return ExperimentConfig(
        data=args.data,
        loss=args.loss,
        method=args.method,
        lam=lam,
        epsilon=args.eps,
        seed=args.seed,
        init_frac=args.init_frac,
        growth="exponential" if args.growth == "exp" else args.growth,
        epochs_to_full=args.epochs_to_full,
        pcg_alpha=args.pcg_alpha,
        svrg_m=args.svrg_m,
        max_cg=args.max_cg,
        max_outer=args.max_outer,
        forcing=args.forcing,
        delta0=args.delta0,
        train_fraction=args.train_fraction,
        folds=getattr(args, "folds", None),
        out=args.out or out_default,
        n_features=args.n_features,
    )


def _do_train(args: argparse.Namespace) -> int:
    cfg = _experiment_config(args, out_default=f"stron-{args.method}.csv")
    summary = cmd_train(cfg)
    if cfg.folds is not None:
        print(f"{cfg.method} on {cfg.data}: {cfg.folds}-fold accuracy "
              f"{summary['accuracy_mean']:.4f} +/- {summary['accuracy_std']:.4f}")
    else:
        final = summary["final"]
        acc = final.get("test_accuracy")
        acc_s = f", test accuracy {acc:.4f}" if acc is not None else ""
        print(f"{cfg.method} on {cfg.data}: F = {final['function_value']:.10g}, "
              f"||g||/||g0|| = {final['gradient_ratio']:.3e}{acc_s}")
        print(f"trace written to {cfg.out}")
    return EXIT_OK


def _do_crossval(args: argparse.Namespace) -> int:
    if args.folds is None:
        args.folds = 5
    return _do_train(args)


def _do_reference(args: argparse.Namespace) -> int:
    cfg = _experiment_config(args, out_default="")
    data = load_dataset(cfg.data, n_features=cfg.n_features)
    train, _ = split_train_test(data, cfg.train_fraction, cfg.seed)
    lam = cfg.resolve_lambda(train.n_points)
    model = LossModel(cfg.loss, lam, train)
    ref = compute_reference_optimum(model, max_outer=args.ref_max_outer)
    out = Path(cfg.out) if cfg.out else default_reference_path(cfg.data, cfg.loss, cfg.lam)
    meta = {
        "dataset": cfg.data,
        "dataset_hash": dataset_hash(train),
        "loss": cfg.loss,
        "lambda": lam,
        "seed": cfg.seed,
        "train_fraction": cfg.train_fraction,
    }
    save_reference(out, ref, meta)
    print(f"f_star = {ref.f_star:.17g} (achieved gradient ratio {ref.achieved_gradient_ratio:.3e})")
    print(f"reference written to {out}")
    return EXIT_OK


def _do_gapify(args: argparse.Namespace) -> int:
    out = args.out or str(Path(args.trace).with_suffix(".gap.csv"))
    gapify_trace(args.trace, args.reference, out, summary_path=args.summary)
    print(f"gap-augmented trace written to {out}")
    return EXIT_OK


def _do_compare(args: argparse.Namespace) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r} in --methods")
    seeds = [int(s) for s in args.seeds.split(",")]
    out_dir = Path(args.out or "compare-out")
    out_dir.mkdir(parents=True, exist_ok=True)
    data = load_dataset(args.data, n_features=args.n_features)
    table = []
    for method in methods:
        for seed in seeds:
            ns = argparse.Namespace(**vars(args))
            ns.method = method
            ns.seed = seed
            cfg = _experiment_config(ns, out_default=str(out_dir / f"{method}-seed{seed}.csv"))
            cfg.folds = None
            train, test = split_train_test(data, cfg.train_fraction, cfg.seed)
            outcome = train_once(cfg, train, test)
            write_trace_csv(outcome.result.trace, cfg.out)
            Path(cfg.out).with_suffix(".summary.json").write_text(
                json.dumps(outcome.summary, indent=2, sort_keys=True) + "\n"
            )
            f = outcome.summary["final"]
            table.append({
                "method": method,
                "seed": seed,
                "converged": f["converged"],
                "iterations": f["iterations"],
                "effective_data_passes": f["effective_data_passes"],
                "gradient_ratio": f["gradient_ratio"],
                "test_accuracy": f.get("test_accuracy"),
            })
    summary_path = out_dir / "compare.summary.json"
    summary_path.write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    for row in table:
        print(f"{row['method']:>11} seed={row['seed']}: passes={row['effective_data_passes']:.2f} "
              f"iters={row['iterations']} ||g||/||g0||={row['gradient_ratio']:.2e} "
              f"acc={row['test_accuracy']}")
    print(f"comparison written to {summary_path}")
    return EXIT_OK


def build_parser() -> tuple[argparse.ArgumentParser, list[argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="stron", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers = []

    p_train = sub.add_parser("train", help="train one model, write a trace CSV")
    _add_shared_flags(p_train)
    p_train.add_argument("--folds", type=int, default=None,
                         help="run k-fold cross-validation instead of one split")
    p_train.set_defaults(func=_do_train)
    subparsers.append(p_train)

    p_cv = sub.add_parser("crossval", help="k-fold cross-validation (default 5 folds)")
    _add_shared_flags(p_cv)
    p_cv.add_argument("--folds", type=int, default=5)
    p_cv.set_defaults(func=_do_crossval)
    subparsers.append(p_cv)

    p_ref = sub.add_parser("reference", help="compute a high-accuracy reference optimum")
    _add_shared_flags(p_ref)
    p_ref.add_argument("--ref-max-outer", type=int, default=5000)
    p_ref.set_defaults(func=_do_reference)
    subparsers.append(p_ref)

    p_gap = sub.add_parser("gapify", help="append an optimality-gap column to a trace")
    p_gap.add_argument("--trace", required=True)
    p_gap.add_argument("--reference", required=True)
    p_gap.add_argument("--summary", default=None,
                       help="trace summary JSON (default: <trace>.summary.json)")
    p_gap.add_argument("--out", default=None)
    p_gap.set_defaults(func=_do_gapify)
    subparsers.append(p_gap)

    p_cmp = sub.add_parser("compare", help="run several methods/seeds on one dataset")
    _add_shared_flags(p_cmp)
    p_cmp.add_argument("--methods", default="tron,stron")
    p_cmp.add_argument("--seeds", default="0")
    p_cmp.set_defaults(func=_do_compare)
    subparsers.append(p_cmp)

    return parser, subparsers


def _apply_config_file(argv: list[str], subparsers: list[argparse.ArgumentParser]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    path = Path(known.config)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    overrides = json.loads(path.read_text())
    if not isinstance(overrides, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    for sp in subparsers:
        valid = {a.dest for a in sp._actions}  # noqa: SLF001
        sp.set_defaults(**{k: v for k, v in overrides.items() if k in valid})


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser, subparsers = build_parser()
    try:
        _apply_config_file(argv, subparsers)
        args = parser.parse_args(argv)
        return args.func(args)
    except (FileNotFoundError, OSError, ParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
