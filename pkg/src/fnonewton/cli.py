"""Command-line entry point: datagen, train, gridsearch, solve, bench.

Settings come from an optional text config (``key = value`` lines grouped
in ``[section]`` blocks) and are overridden by command-line flags. Relative
output paths are placed under ``$FNONEWTON_OUTPUT_ROOT`` when it is set.
"""
import argparse
import configparser
import json
import os
from pathlib import Path
import sys
import time

import numpy as np

from . import __version__
from .bench import (InitStrategy, aggregate_initializations, breakeven, breakeven_bundle, gains,
                    residual_traces, run_strategies, table4_strategies, write_csv, write_runs, write_traces)
from .datagen import GeneratorConfig, build_dataset, load_dataset, save_dataset
from .discretization import Field, save_field
from .fno import FnoConfig, FnoModel, load_model, save_model
from .gridsearch import HyperGrid, grid_search, naive_guess, write_results
from .jfnk import NewtonConfig, newton_solve
from .training import TrainConfig, train

OUTPUT_ROOT_ENV = "FNONEWTON_OUTPUT_ROOT"
RUN_MANIFEST = "run_manifest.txt"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# config handling

def _parse_value(text):
    """Best-effort literal: int, float, bool, comma list, else the raw string."""
    t = text.strip()
    if "," in t:
        return [_parse_value(p) for p in t.split(",") if p.strip()]
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(t)
        except ValueError:
            pass
    return t


SECTIONS = {
    "datagen": {"dim", "p", "alpha0", "resolutions", "count", "split", "n_max", "variance_range",
                "mu_ball_radius", "baseline", "eigenvalue_range", "max_retries"},
    "model": {"n_p", "n_layers", "modes", "n_q", "mask_boundary"},
    "train": {"ell0", "gamma", "batch_size", "omega", "epochs", "dis_scale", "h1_scale", "normalize"},
    "newton": {"f_tol", "max_iter", "forcing", "eta", "eta_max", "ew_gamma", "ew_alpha",
               "restart", "max_inner", "recycle", "c", "rho", "lambda_min", "fallback"},
    "grid": {"ell0", "gamma", "batch_size", "omega", "n_layers", "modes", "n_p"},
    "search": {"budget", "scores", "epochs", "iter_problems"},
    "run": {"seed"},
}


def read_config(path):
    """Parse a sectioned ``key = value`` file, rejecting unknown sections and keys."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown config section [{sec}]")
        vals = {}
        for key, raw in cp.items(sec):
            if key not in SECTIONS[sec]:
                raise ConfigError(f"unknown key {key!r} in section [{sec}]")
            vals[key] = _parse_value(raw)
        out[sec] = vals
    return out


def _merge(cfg, section, flags):
    """Config section values overridden by any flag that was given."""
    vals = dict(cfg.get(section, {}))
    vals.update({k: v for k, v in flags.items() if v is not None})
    return vals


def _as_list(v):
    return v if isinstance(v, list) else [v]


def newton_config(vals, dim):
    vals = dict(vals)
    kry = {k: vals.pop(k) for k in ("restart", "max_inner", "recycle") if k in vals}
    ls = {k: vals.pop(k) for k in ("c", "rho", "lambda_min", "fallback") if k in vals}
    if kry:
        vals["krylov"] = kry
    if ls:
        vals["linesearch"] = ls
    try:
        return NewtonConfig.for_dim(dim, **vals)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [newton] settings: {exc}") from exc


def output_dir(path):
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def write_manifest(out, command, settings, seed):
    lines = [
        f"format_version = {FORMAT_VERSION}",
        f"package_version = {__version__}",
        f"command = {command}",
        f"seed = {seed}",
        f"created = {time.strftime('%Y-%m-%dT%H:%M:%S')}",
        "settings = " + json.dumps(settings, sort_keys=True, default=str),
    ]
    (Path(out) / RUN_MANIFEST).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# subcommands

def cmd_datagen(args, cfg):
    vals = _merge(cfg, "datagen", {"dim": args.dim, "p": args.p, "alpha0": args.alpha0,
                                   "resolutions": args.resolutions, "count": args.count,
                                   "split": args.split})
    gen_keys = ("n_max", "variance_range", "mu_ball_radius", "baseline", "eigenvalue_range", "max_retries")
    gen = {k: (tuple(v) if isinstance(v, list) else v) for k, v in vals.items() if k in gen_keys}
    try:
        gcfg = GeneratorConfig(**gen)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    dim = int(vals.get("dim", 1))
    res = [int(n) for n in _as_list(vals.get("resolutions", [64]))]
    ds = build_dataset(int(vals.get("p", 4)), float(vals.get("alpha0", 2.0)), res,
                       int(vals.get("count", 16)), gcfg, args.seed, vals.get("split", "train"), dim)
    out = output_dir(args.out)
    save_dataset(ds, out)
    write_manifest(out, "datagen", vals, args.seed)
    print(f"wrote {len(ds)} samples to {out}")


def _model_config(cfg, flags, n_c, dim):
    vals = _merge(cfg, "model", flags)
    try:
        return FnoConfig(n_c=n_c, dim=dim, **{k: vals[k] for k in vals})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [model] settings: {exc}") from exc


def cmd_train(args, cfg):
    ds = load_dataset(args.dataset)
    val = load_dataset(args.validation) if args.validation else None
    dim = ds.dim
    mcfg = _model_config(cfg, {"n_p": args.n_p, "n_layers": args.n_layers, "modes": args.modes},
                         ds.samples[0].spec.n_channels, dim)
    tvals = _merge(cfg, "train", {"ell0": args.ell0, "gamma": args.gamma, "batch_size": args.batch_size,
                                  "omega": args.omega, "epochs": args.epochs})
    try:
        tcfg = TrainConfig(loss_combo=f"{dim}d", **tvals)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [train] settings: {exc}") from exc
    rng = np.random.default_rng(args.seed)
    model = FnoModel.init(mcfg, rng)
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    best, report = train(model, ds, tcfg, rng, val, log=log)
    out = output_dir(args.out)
    save_model(best, out / "model")
    report.to_csv(out / "train_report.csv")
    write_manifest(out, "train", {"model": vars(mcfg), "train": vars(tcfg), "dataset": str(args.dataset)}, args.seed)
    final = report.val_mse[-1] if report.val_mse else report.initial_val_mse
    print(f"trained {tcfg.epochs} epochs; validation mse {final:.6g}; best epoch {report.best_epoch}")


def cmd_gridsearch(args, cfg):
    train_set = load_dataset(args.train)
    val = load_dataset(args.validation)
    gvals = dict(cfg.get("grid", {}))
    if args.grid_file:
        gvals.update(read_config(args.grid_file).get("grid", {}))
    try:
        grid = HyperGrid(**{k: _as_list(v) for k, v in gvals.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [grid] settings: {exc}") from exc
    svals = _merge(cfg, "search", {"budget": args.budget, "scores": args.scores, "epochs": args.epochs})
    scores = [s.strip() for s in _as_list(svals.get("scores", ["data", "dis", "iter"]))]
    budget = svals.get("budget")
    ncfg = newton_config(cfg.get("newton", {}), train_set.dim)
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    ranked, best = grid_search(grid, train_set, val, budget, scores, int(svals.get("epochs", 50)), args.seed,
                               ncfg, int(svals.get("iter_problems", 5)), log=log)
    out = output_dir(args.out)
    write_results(ranked, out / "results.csv")
    write_manifest(out, "gridsearch", {"grid": vars(grid), "search": svals}, args.seed)
    print("best: " + json.dumps(best, sort_keys=True))


def _strategy(name, model=None):
    if name in ("ones", "one"):
        return InitStrategy("constant", 1.0, label="ones")
    if name.startswith("constant:"):
        return InitStrategy("constant", float(name.split(":", 1)[1]))
    if name == "exact":
        return InitStrategy("exact")
    if name == "fno":
        if model is None:
            raise ConfigError("--init fno needs --model")
        return InitStrategy("fno", model=model)
    raise ConfigError(f"unknown initialization {name!r} (ones, constant:<c>, exact, fno)")


def cmd_solve(args, cfg):
    ds = load_dataset(args.dataset)
    if not 0 <= args.sample < len(ds):
        raise ConfigError(f"sample index {args.sample} out of range 0..{len(ds) - 1}")
    sample = ds.samples[args.sample]
    model = load_model(args.model) if args.model else None
    strat = _strategy(args.init, model)
    ncfg = newton_config(_merge(cfg, "newton", {"max_iter": args.max_iter}), ds.dim)
    rep = newton_solve(sample.spec, strat.guess(sample, np.random.default_rng(args.seed)), ncfg)
    print(f"iterations {rep.iterations} converged {rep.converged} residual {rep.residual_history[-1]:.6e} "
          f"time {rep.wall_time:.3f}s")
    if args.out:
        out = output_dir(args.out)
        save_field(Field(sample.spec.grid, rep.solution, "u"), out / "solution.bin")
        write_csv(out / "history.csv", ["iteration", "residual"], list(enumerate(rep.residual_history)))
        write_manifest(out, "solve", {"dataset": str(args.dataset), "sample": args.sample, "init": args.init},
                       args.seed)


def _problems(path, limit):
    ds = load_dataset(path)
    return ds, (ds.samples[:limit] if limit else ds.samples)


def cmd_bench(args, cfg):
    out = output_dir(args.out)
    if args.action == "breakeven":
        if args.gains_files:
            per_res = {}
            for f in args.gains_files:
                with open(f) as fh:
                    rows = [line.strip().split(",") for line in fh.readlines()[1:] if line.strip()]
                per_res[f] = [float(r[3]) - float(r[4]) for r in rows]
            single = {f: breakeven(args.train_time, s) for f, s in per_res.items()}
            bundle = breakeven_bundle(args.train_time, per_res)
            rows = [(f, v) for f, v in single.items()] + [("bundle", bundle)]
        elif args.savings:
            rows = [("savings", breakeven(args.train_time, [float(s) for s in args.savings.split(",")]))]
        else:
            raise ConfigError("breakeven needs --gains-files or --savings")
        write_csv(out / "breakeven.csv", ["source", "simulations"], rows)
        for r in rows:
            print(f"{r[0]}: {r[1]}")
        write_manifest(out, "bench breakeven", {"train_time": args.train_time}, args.seed)
        return
    if not args.problems:
        raise ConfigError(f"bench {args.action} needs --problems")
    ds, problems = _problems(args.problems, args.limit)
    ncfg = newton_config(_merge(cfg, "newton", {"max_iter": args.max_iter}), ds.dim)
    model = load_model(args.model) if args.model else None
    if args.action == "compare-inits":
        strategies = ([_strategy(s.strip(), model) for s in args.inits.split(",")] if args.inits
                      else table4_strategies())
        if model is not None and not args.inits:
            strategies.append(InitStrategy("fno", model=model))
        records = run_strategies(problems, strategies, ncfg, args.seed)
        write_runs(out / "runs.csv", records)
        table = aggregate_initializations(records)
        write_csv(out / "initializations.csv", ["init", "mean_iterations", "failure_percent"], table)
        for label, mean_iter, fail in table:
            print(f"{label:>20s}  {mean_iter:8.1f}  {fail:5.1f}%")
    elif args.action == "gains":
        if model is None:
            raise ConfigError("bench gains needs --model")
        stats, pairs = gains(problems, model, ncfg, repeats=args.repeats)
        write_csv(out / "gains.csv", ["problem", "k_naive", "k_model", "t_naive", "t_model",
                                      "s_iter", "s_cpu", "g_iter", "g_cpu"],
                  [(i, *p, si, sc, gi, gc) for i, (p, si, sc, gi, gc)
                   in enumerate(zip(pairs, stats.s_iter, stats.s_cpu, stats.g_iter, stats.g_cpu))])
        edges = ["-inf", "-50", "0", "25", "50", "100", "200", "500", "1000", "inf"]
        write_csv(out / "histogram.csv", ["bin_low", "bin_high", "count_iter", "count_cpu"],
                  [(edges[i], edges[i + 1], stats.hist_iter[i], stats.hist_cpu[i])
                   for i in range(len(stats.hist_iter))])
        print(f"mean S_iter {stats.mean_s_iter:.3f} (G {stats.mean_g_iter:.0f}%), "
              f"mean S_cpu {stats.mean_s_cpu:.3f} (G {stats.mean_g_cpu:.0f}%)")
    elif args.action == "traces":
        inits = [_strategy("ones")] + ([InitStrategy("fno", model=model)] if model is not None else [])
        if args.inits:
            inits = [_strategy(s.strip(), model) for s in args.inits.split(",")]
        traces, thr = residual_traces(problems, inits, ncfg, args.seed)
        write_traces(out / "traces.csv", traces)
        write_csv(out / "thresholds.csv", ["problem", "init", "iter_10", "iter_1", "iter_0.1"], thr)
        print(f"wrote {len(traces)} trace rows")
    write_manifest(out, f"bench {args.action}", {"problems": str(args.problems), "model": str(args.model)},
                   args.seed)


# --------------------------------------------------------------------------
# parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser():
    ap = _Parser(prog="fnonewton", description="FNO initial guesses for Newton-Krylov solves")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_required=True):
        p.add_argument("--config", help="sectioned key = value settings file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=out_required)
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("datagen", help="generate a manufactured dataset")
    common(p)
    p.add_argument("--dim", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--alpha0", type=float)
    p.add_argument("--resolutions", type=lambda s: [int(v) for v in s.split(",")])
    p.add_argument("--count", type=int)
    p.add_argument("--split", choices=("train", "validation", "test"))

    p = sub.add_parser("train", help="train an FNO on a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--validation")
    for name, typ in (("epochs", int), ("ell0", float), ("gamma", float), ("batch-size", int),
                      ("omega", float), ("n-layers", int), ("modes", int), ("n-p", int)):
        p.add_argument(f"--{name}", type=typ)

    p = sub.add_parser("gridsearch", help="hyperparameter sweep")
    common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--validation", required=True)
    p.add_argument("--grid-file")
    p.add_argument("--budget", type=int)
    p.add_argument("--scores", type=lambda s: [v for v in s.split(",") if v])
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("solve", help="run Newton-Krylov on one stored problem")
    common(p, out_required=False)
    p.add_argument("--dataset", required=True)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--init", default="ones")
    p.add_argument("--model")
    p.add_argument("--max-iter", type=int)

    p = sub.add_parser("bench", help="benchmarks")
    p.add_argument("action", choices=("compare-inits", "gains", "traces", "breakeven"))
    common(p)
    p.add_argument("--problems")
    p.add_argument("--model")
    p.add_argument("--inits", help="comma list of ones, constant:<c>, exact, fno")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--train-time", type=float, default=0.0)
    p.add_argument("--gains-files", nargs="*")
    p.add_argument("--savings")
    return ap


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "gridsearch": cmd_gridsearch,
            "solve": cmd_solve, "bench": cmd_bench}


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        cfg = read_config(args.config) if args.config else {}
        if args.seed is None:
            args.seed = int(cfg.get("run", {}).get("seed", 0))
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - report any runtime failure uniformly
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
