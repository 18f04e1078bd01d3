"""Command-line entry point.

Every command writes its outputs plus ``config.json`` (the resolved
parameters) into ``--out`` (default: ``$DEEPGNTK_OUT`` or the current
directory). ``--config FILE`` reads ``key = value`` lines (or a previously
written ``config.json``); explicit flags override file values.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, GntkError, NumericalError

log = logging.getLogger("deepgntk")

OUT_ENV = "DEEPGNTK_OUT"
_NOT_CONFIG = {"command", "config", "out", "func", "threads", "verbose"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config files

def read_config(path) -> dict:
    """Flat ``key = value`` text, or a JSON object with an ``args`` record."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        data = json.loads(text)
        return dict(data.get("args", data))
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def _coerce(action: argparse.Action, value):
    if value is None:
        return None
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        if isinstance(value, bool):
            return value
        s = str(value).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"cannot read {value!r} as a boolean for {action.dest}")
    if action.type is not None and isinstance(value, str):
        try:
            return action.type(value)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value {value!r} for {action.dest}: {exc}") from None
    return value


def _apply_config(sub: argparse.ArgumentParser, cfg: dict):
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in cfg.items():
        if key in _NOT_CONFIG:
            continue
        if key not in actions:
            raise UsageError(f"unknown config key {key!r}")
        defaults[key] = _coerce(actions[key], value)
    sub.set_defaults(**defaults)


# ---------------------------------------------------------------------------
# shared input handling

def _graph_args(p, labels=False, split=False, features=True):
    g = p.add_argument_group("inputs")
    g.add_argument("--graph", help="edge list file")
    g.add_argument("--sbm", help="generate a two-block SBM instead: N,P_IN,P_OUT,SEED")
    if features:
        g.add_argument("--features", help="feature file (identity features if omitted)")
        g.add_argument("--no-normalize", action="store_true",
                       help="keep feature rows as given")
    if labels:
        g.add_argument("--labels", help="label file ('node label' lines)")
    if split:
        g.add_argument("--split", help="split file (TRAIN/VAL/TEST sections)")
        g.add_argument("--train-count", type=int, default=40,
                       help="random train nodes when no split file is given")
        g.add_argument("--split-seed", type=int, default=0)


def _engine_args(p):
    g = p.add_argument_group("kernel")
    g.add_argument("--activation", choices=("relu", "tanh"), default="relu")
    g.add_argument("--sigma-w-sq", type=float, default=None,
                   help="default: edge-of-chaos value for the activation")
    g.add_argument("--sigma-b-sq", type=float, default=None,
                   help="default: 0 for relu, 0.05 for tanh")
    g.add_argument("--R", type=int, default=1, help="transformations per unit")
    g.add_argument("--L", type=int, default=1, help="propagation units")
    g.add_argument("--delta", type=float, default=None, help="residual aggregation weight")
    g.add_argument("--residual-mlp", action="store_true")
    g.add_argument("--order", type=int, default=40, help="tanh quadrature nodes")
    g.add_argument("--rule", choices=("trapezoid", "hermite"), default="trapezoid")
    g.add_argument("--allow-large", action="store_true")


def _load_inputs(args, need_labels=False, need_split=False):
    from .graph import (DatasetSplit, FeatureMatrix, generate_sbm, load_features,
                        load_graph, load_labels, load_split)

    labels = None
    if args.sbm:
        try:
            n, p_in, p_out, seed = args.sbm.split(",")
            graph, labels = generate_sbm(int(n), float(p_in), float(p_out), int(seed))
        except ValueError as exc:
            raise UsageError(f"--sbm expects N,P_IN,P_OUT,SEED ({exc})") from None
    elif args.graph:
        graph = load_graph(args.graph)
    else:
        raise UsageError("one of --graph or --sbm is required")
    features = None
    if hasattr(args, "features"):
        normalize = not args.no_normalize
        if args.features:
            features = load_features(args.features, normalize=normalize)
            if features.values.shape[0] != graph.node_count:
                raise DataError(f"feature rows ({features.values.shape[0]}) != node count "
                                f"({graph.node_count})")
        else:
            features = FeatureMatrix.from_array(np.eye(graph.node_count), normalize=normalize)
    if getattr(args, "labels", None):
        labels = load_labels(args.labels, graph.node_count)
    if need_labels and labels is None:
        raise UsageError("--labels is required (or use --sbm)")
    split = None
    if need_split:
        if getattr(args, "split", None):
            split = load_split(args.split)
        else:
            perm = np.random.default_rng(args.split_seed).permutation(graph.node_count)
            k = args.train_count
            if not 0 < k < graph.node_count:
                raise UsageError(f"--train-count must lie in (0, {graph.node_count})")
            split = DatasetSplit(np.sort(perm[:k]), np.array([], dtype=np.int64),
                                 np.sort(perm[k:]))
        split.validate(graph.node_count, labels)
    return graph, features, labels, split


def _gntk_config(args, **kw):
    from .dual import edge_of_chaos_solve
    from .engine import GntkConfig

    sb = args.sigma_b_sq
    if sb is None:
        sb = 0.0 if args.activation == "relu" else 0.05
    sw = args.sigma_w_sq
    if sw is None:
        sw = edge_of_chaos_solve(args.activation, sb).sigma_w_sq
    # record the values actually used so config.json reruns identically
    args.sigma_b_sq, args.sigma_w_sq = float(sb), float(sw)
    return GntkConfig(activation=args.activation, sigma_w_sq=sw, sigma_b_sq=sb,
                      R=args.R, L=args.L, residual_aggregation=args.delta,
                      residual_mlp=args.residual_mlp, quadrature_order=args.order,
                      quadrature_rule=args.rule, allow_large=args.allow_large, **kw)


def _out(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# commands

def cmd_kernel(args, out: Path) -> dict:
    from .diagnostics import write_json, write_trace_csv
    from .engine import kernel_metadata, run_gntk, save_kernel
    from .sampling import SampleConfig, sampled_operators

    graph, features, _, _ = _load_inputs(args)
    cfg = _gntk_config(args, record_trace=args.trace, trace_sigma=args.trace_sigma)
    extra = {}
    t0 = time.perf_counter()
    if args.sample:
        from .sampling import average_sampled_gntk
        sc = (SampleConfig.critical(args.seed, False) if args.sample == "critical"
              else SampleConfig.fixed(args.sample_rate, args.seed, False))
        extra["sampling"] = dict(sc.to_dict(), samples=args.samples,
                                 resample="per_unit" if args.per_unit else "per_run")
        if args.samples > 1 or not args.trace:
            theta = average_sampled_gntk(graph, features, cfg, sc, args.samples, args.per_unit)
            state = None
            trace = None
        else:
            ops = sampled_operators(graph, sc, cfg.residual_aggregation, args.per_unit)
            state, trace = run_gntk(graph, features, cfg, ops)
            theta = state.theta
    else:
        state, trace = run_gntk(graph, features, cfg)
        theta = state.theta
    elapsed = time.perf_counter() - t0
    log.info("kernel computed in %.3f s", elapsed)
    save_kernel(out / "kernel.txt", theta)
    clamp = int(state.clamp_count) if state is not None else None
    meta = {
        "config": cfg.to_dict(),
        "graph_hash": graph.content_hash(),
        "node_count": graph.node_count,
        "edge_count": graph.edge_count,
        "depth": cfg.R * cfg.L,
        "clamp_count": clamp,
        "features_normalized": bool(features.normalized),
    }
    if state is not None:
        meta = kernel_metadata(graph, cfg, state, elapsed if args.timing else None,
                               features_normalized=bool(features.normalized))
    elif args.timing:
        meta["wall_time"] = elapsed
    meta.update(extra)
    write_json(out / "kernel.json", meta)
    if trace is not None:
        write_trace_csv(out / "trace.csv", trace)
    return meta


def cmd_diagnose(args, out: Path) -> dict:
    from .diagnostics import (NumericalError as _NE, TrainabilityReport, condition_number,
                              fit_rate, write_json, write_report_csv, write_trace_csv)
    from .engine import run_gntk

    graph, features, labels, split = _load_inputs(args, need_split=bool(args.split))
    depths = sorted(set(_int_list(args.depths))) if args.depths else []
    l_max = max([args.L] + depths)
    args.L = l_max
    cfg = _gntk_config(args, record_trace=True)
    nodes = split.train if split is not None else np.arange(graph.node_count)
    report = TrainabilityReport()

    def capture(depth, state):
        if state.layer_index == cfg.R and state.unit_index in depths:
            report.add(condition_number(state.theta, nodes, depth=state.unit_index))

    state, trace = run_gntk(graph, features, cfg, callback=capture)
    write_trace_csv(out / "trace.csv", trace)
    write_report_csv(out / "report.csv", report)
    summary = {"depth_max": int(trace.depth[-1]), "units": l_max,
               "graph_hash": graph.content_hash(), "config": cfg.to_dict()}
    rng = tuple(_int_list(args.fit_range)) if args.fit_range else None
    try:
        summary["fit"] = fit_rate(trace, rng).to_json()
    except _NE as exc:
        summary["fit"] = {"error": str(exc)}
    summary["condition"] = [
        {"L": e.depth, "lambda_min": e.lambda_min, "lambda_max": e.lambda_max,
         "kappa": e.kappa, "singular": e.singular} for e in report.entries]
    write_json(out / "summary.json", summary)
    return summary


def _kernel_for(args, graph, features):
    from .engine import compute_gntk, load_kernel

    if args.kernel:
        theta = load_kernel(args.kernel)
        if theta.shape != (graph.node_count, graph.node_count):
            raise DataError(f"kernel shape {theta.shape} does not match {graph.node_count} nodes")
        return theta
    theta, _ = compute_gntk(graph, features, _gntk_config(args))
    return theta


def cmd_dynamics(args, out: Path) -> dict:
    from .diagnostics import simulate_dynamics, write_dynamics_csv, write_json

    graph, features, labels, split = _load_inputs(args, need_labels=True, need_split=True)
    theta = _kernel_for(args, graph, features)
    if args.times:
        times = _float_list(args.times)
    else:
        times = [0.0] + list(np.logspace(-2, np.log10(args.t_max), args.steps))
    res = simulate_dynamics(theta, labels, split, args.eta, times)
    write_dynamics_csv(out / "dynamics.csv", res)
    summary = {"eta": args.eta, "initial_residual": float(res.residual[0]),
               "final_residual": float(res.residual[-1]), "points": len(times)}
    write_json(out / "summary.json", summary)
    return summary


def cmd_classify(args, out: Path) -> dict:
    from .diagnostics import condition_number, kernel_regression, write_csv, write_json

    graph, features, labels, split = _load_inputs(args, need_labels=True, need_split=True)
    theta = _kernel_for(args, graph, features)
    pred, acc = kernel_regression(theta, labels, split, args.ridge)
    _, train_acc = kernel_regression(theta, labels, split, args.ridge, eval_nodes=split.train)
    cond = condition_number(theta, split.train)
    write_csv(out / "predictions.csv", ("node", "predicted", "label"),
              zip(split.test.tolist(), pred.tolist(), labels.labels[split.test].tolist()))
    summary = {"test_accuracy": acc, "train_accuracy": train_acc, "kappa": cond.kappa,
               "lambda_min": cond.lambda_min, "lambda_max": cond.lambda_max,
               "ridge": args.ridge, "train_nodes": int(len(split.train)),
               "test_nodes": int(len(split.test))}
    write_json(out / "classify.json", summary)
    return summary


def cmd_sample(args, out: Path) -> dict:
    from .diagnostics import write_json
    from .graph import save_graph
    from .sampling import SampleConfig, sample_edges

    graph, _, _, _ = _load_inputs(args)
    sc = (SampleConfig.critical(args.seed, False) if args.mode == "critical"
          else SampleConfig.fixed(args.rate, args.seed, False))
    sub = sample_edges(graph, sc)
    save_graph(sub, out / "sampled.txt")
    summary = {"node_count": graph.node_count, "input_edges": graph.edge_count,
               "kept_edges": sub.edge_count, "rate": sc.effective_rate(graph),
               "sampling": sc.to_dict()}
    write_json(out / "sample.json", summary)
    return summary


def cmd_percolate(args, out: Path) -> dict:
    from .diagnostics import write_csv, write_json
    from .sampling import parse_p_values, percolation_sweep

    if args.n is None:
        raise UsageError("percolate needs --n")
    values, labels = parse_p_values(args.p_values, args.n)
    stats = percolation_sweep(args.n, values, args.trials, args.seed, labels)
    write_csv(out / "percolation.csv", ("p", "trial", "largest_component", "components"),
              stats.rows())
    summary = {"n": args.n, "trials": args.trials, "p_c": 1.0 / (args.n - 1),
               "points": [{"label": lab, "p": float(p), "median": float(md), "mean": float(mn)}
                          for lab, p, md, mn in zip(labels, stats.p_values, stats.median,
                                                    stats.mean)]}
    write_json(out / "summary.json", summary)
    return summary


def cmd_mc_verify(args, out: Path) -> dict:
    from .diagnostics import write_json
    from .engine import compute_gntk
    from .network import NetConfig, empirical_ntk, ntk_comparison

    graph, features, _, _ = _load_inputs(args)
    cfg = _gntk_config(args)
    analytic, _ = compute_gntk(graph, features, cfg)
    net = NetConfig.from_gntk(cfg)
    reports = []
    for w in _int_list(args.widths):
        emp = empirical_ntk(graph, features, net, w, args.inits, args.seed,
                            allow_wide=args.allow_wide)
        reports.append(ntk_comparison(emp, analytic))
    summary = {"reports": reports, "config": cfg.to_dict(), "graph_hash": graph.content_hash()}
    write_json(out / "ntk_report.json", summary)
    return summary


def cmd_train(args, out: Path) -> dict:
    from .diagnostics import write_csv, write_json
    from .network import NetConfig, train_gcn
    from .sampling import SampleConfig

    graph, features, labels, split = _load_inputs(args, need_labels=True, need_split=True)
    cfg = _gntk_config(args)
    net = NetConfig.from_gntk(cfg, aggregation=args.aggregation)
    sampler = None
    if args.sampler == "critical":
        sampler = SampleConfig.critical(args.seed, not args.sample_once)
    elif args.sampler == "fixed":
        sampler = SampleConfig.fixed(args.rate, args.seed, not args.sample_once)
    curves = train_gcn(graph, features, labels, split, net, args.width, args.depth,
                       args.epochs, args.lr, sampler, args.seed, allow_wide=args.allow_wide)
    write_csv(out / "curves.csv", ("epoch", "loss", "train_acc", "test_acc"), curves.rows())
    summary = {"final_loss": float(curves.loss[-1]), "final_train_acc": curves.final_train_acc,
               "final_test_acc": curves.final_test_acc, "network": net.to_dict(),
               "width": args.width, "depth": args.depth,
               "sampling": sampler.to_dict() if sampler else None}
    write_json(out / "train.json", summary)
    return summary


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deepgntk", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"deepgntk {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value file; flags override it")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help="cap BLAS threads")
    common.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = subs.add_parser("kernel", parents=[common], help="compute the GNTK")
    _graph_args(p)
    _engine_args(p)
    p.add_argument("--trace", action="store_true", help="write per-depth trace.csv")
    p.add_argument("--trace-sigma", action="store_true")
    p.add_argument("--sample", choices=("critical", "fixed"), default=None,
                   help="compute on sampled subgraphs")
    p.add_argument("--sample-rate", type=float, default=None)
    p.add_argument("--samples", type=int, default=1, help="average over K samples")
    p.add_argument("--per-unit", action="store_true",
                   help="draw a fresh subgraph for every propagation unit")
    p.add_argument("--timing", action="store_true", help="record wall time in kernel.json")
    p.set_defaults(func=cmd_kernel)

    p = subs.add_parser("diagnose", parents=[common], help="trace, rate fit, condition numbers")
    _graph_args(p, split=True)
    _engine_args(p)
    p.add_argument("--depths", default="", help="units L at which to report kappa, e.g. 2,8,32")
    p.add_argument("--fit-range", default="", help="depth range for the rate fit, e.g. 30,300")
    p.set_defaults(func=cmd_diagnose)

    p = subs.add_parser("dynamics", parents=[common], help="gradient-flow simulation")
    _graph_args(p, labels=True, split=True)
    _engine_args(p)
    p.add_argument("--kernel", help="precomputed kernel file")
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--times", default="", help="comma-separated times")
    p.add_argument("--t-max", type=float, default=1e6)
    p.add_argument("--steps", type=int, default=50)
    p.set_defaults(func=cmd_dynamics)

    p = subs.add_parser("classify", parents=[common], help="kernel regression accuracy")
    _graph_args(p, labels=True, split=True)
    _engine_args(p)
    p.add_argument("--kernel", help="precomputed kernel file")
    p.add_argument("--ridge", type=float, default=None,
                   help="default 1e-6 * trace / n_train")
    p.set_defaults(func=cmd_classify)

    p = subs.add_parser("sample", parents=[common], help="DropEdge subgraph")
    _graph_args(p, features=False)
    p.add_argument("--mode", choices=("critical", "fixed"), default="critical")
    p.add_argument("--rate", type=float, default=None)
    p.set_defaults(func=cmd_sample)

    p = subs.add_parser("percolate", parents=[common], help="ER percolation sweep")
    # checked in the command so a config file can supply it
    p.add_argument("--n", type=int, default=None, help="node count (required)")
    p.add_argument("--p-values", default="0.5pc,pc,2pc",
                   help="comma list; 'pc' means 1/(n-1), e.g. 0.5pc,pc,2pc,0.01")
    p.add_argument("--trials", type=int, default=50)
    p.set_defaults(func=cmd_percolate)

    p = subs.add_parser("mc-verify", parents=[common], help="empirical vs analytic NTK")
    _graph_args(p)
    _engine_args(p)
    p.add_argument("--widths", default="128,2048")
    p.add_argument("--inits", type=int, default=20)
    p.add_argument("--allow-wide", action="store_true")
    p.set_defaults(func=cmd_mc_verify)

    p = subs.add_parser("train", parents=[common], help="train a finite-width GCN")
    _graph_args(p, labels=True, split=True)
    _engine_args(p)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--depth", type=int, default=2, help="propagation units")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.3)
    p.add_argument("--aggregation", choices=("mean", "sym"), default="mean")
    p.add_argument("--sampler", choices=("none", "critical", "fixed"), default="none")
    p.add_argument("--rate", type=float, default=None)
    p.add_argument("--sample-once", action="store_true",
                   help="draw one subgraph instead of one per epoch")
    p.add_argument("--allow-wide", action="store_true")
    p.set_defaults(func=cmd_train)
    return parser


def _resolved(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_CONFIG}


def dispatch(argv=None) -> int:
    # stdout/stderr are left to the caller; logging goes to stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            sub = parser._subparsers._group_actions[0].choices[args.command]
            _apply_config(sub, read_config(args.config))
            args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        out = _out(args)
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                result = args.func(args, out)
        else:
            result = args.func(args, out)
        from .diagnostics import write_json
        write_json(out / "config.json", {"command": args.command, "args": _resolved(args),
                                         "version": __version__})
        if args.verbose:
            print(json.dumps(result, sort_keys=True, default=str), file=sys.stderr)
        return 0
    except UsageError as exc:
        print(exc, file=sys.stderr)
        print(f"run 'deepgntk --help' for usage", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (DataError, GntkError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)


def main() -> None:
    sys.exit(dispatch())
