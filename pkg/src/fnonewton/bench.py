"""Experiment harness: initial-guess comparisons, gains, residual traces, break-even."""
from dataclasses import dataclass
import csv
import math
import statistics
import time

import numpy as np

from .fno import forward
from .gridsearch import naive_guess
from .jfnk import NewtonConfig, newton_solve

GAIN_EDGES = (-math.inf, -50.0, 0.0, 25.0, 50.0, 100.0, 200.0, 500.0, 1000.0, math.inf)
THRESHOLDS = (10.0, 1.0, 0.1)
KINDS = ("constant", "constant_plus_noise", "exact_plus_noise", "exact", "fno")


@dataclass
class InitStrategy:
    """How to build a Newton starting point for a stored problem.

    ``sigma=None`` with ``constant_plus_noise`` uses the empirical standard
    deviation of the exact solution.
    """

    kind: str
    value: float = 1.0
    sigma: float = 0.0
    model: object = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown initialization kind {self.kind!r}")
        if self.sigma is not None and self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.kind == "fno" and self.model is None:
            raise ValueError("fno initialization needs a model")
        if not self.label:
            self.label = self._default_label()

    def _default_label(self):
        if self.kind == "constant":
            return f"{self.value:g}"
        if self.kind == "constant_plus_noise":
            s = "sigma_exact" if self.sigma is None else f"{self.sigma:g}"
            return f"{self.value:g}+N(0,{s})"
        if self.kind == "exact_plus_noise":
            return f"exact+N(0,{self.sigma:g})"
        return self.kind

    def guess(self, sample, rng=None):
        grid = sample.spec.grid
        bm = grid.boundary_mask()
        if self.kind == "constant":
            return naive_guess(grid, self.value)
        if self.kind == "exact":
            return sample.u.copy()
        if self.kind == "fno":
            return forward(self.model, sample.spec.inputs())
        sigma = float(np.std(sample.u)) if self.sigma is None else self.sigma
        base = np.full(grid.shape, self.value) if self.kind == "constant_plus_noise" else sample.u.copy()
        u0 = base + rng.normal(0.0, sigma, size=grid.shape)
        u0[bm] = 0.0
        return u0


def table4_strategies(sigma=0.25):
    """The eight naive and informed starts compared on the 1D problem."""
    out = [InitStrategy("constant", c) for c in (0.5, 0.75, 1.0, 1.25, 1.5)]
    out += [InitStrategy("constant_plus_noise", 1.0, sigma),
            InitStrategy("constant_plus_noise", 1.0, None),
            InitStrategy("exact_plus_noise", sigma=sigma)]
    return out


@dataclass
class RunRecord:
    problem: int
    label: str
    iterations: int
    wall_time: float
    converged: bool


def _cfg_for(sample, cfg):
    return cfg or NewtonConfig.for_dim(sample.spec.grid.dim)


def run_strategies(problems, strategies, newton_cfg=None, seed=0, keep_reports=False):
    """Solve every problem from every strategy; returns RunRecords (and reports)."""
    records, reports = [], []
    for si, strat in enumerate(strategies):
        for pi, sample in enumerate(problems):
            rng = np.random.default_rng(np.random.SeedSequence([seed, si, pi]))
            t0 = time.perf_counter()
            u0 = strat.guess(sample, rng)
            rep = newton_solve(sample.spec, u0, _cfg_for(sample, newton_cfg))
            wall = time.perf_counter() - t0
            records.append(RunRecord(pi, strat.label, rep.iterations, wall, rep.converged))
            if keep_reports:
                reports.append(rep)
    return (records, reports) if keep_reports else records


def aggregate_initializations(records):
    """Per label: (label, mean iterations, failure %), in first-seen order."""
    order, groups = [], {}
    for r in records:
        if r.label not in groups:
            order.append(r.label)
            groups[r.label] = []
        groups[r.label].append(r)
    rows = []
    for label in order:
        g = groups[label]
        mean_iter = sum(r.iterations for r in g) / len(g)
        fail = 100.0 * sum(not r.converged for r in g) / len(g)
        rows.append((label, mean_iter, fail))
    return rows


def compare_initializations(problems, strategies, newton_cfg=None, seed=0):
    """Mean iteration count (failures counted at the cap) and failure rate per strategy."""
    records = run_strategies(problems, strategies, newton_cfg, seed)
    return aggregate_initializations(records), records


# --------------------------------------------------------------------------
# gains

@dataclass
class GainStats:
    s_iter: list
    s_cpu: list
    g_iter: list
    g_cpu: list
    hist_iter: list
    hist_cpu: list
    mean_s_iter: float
    mean_s_cpu: float
    mean_g_iter: float
    mean_g_cpu: float


def gain_percent(s):
    return (s - 1.0) * 100.0


def histogram(values, edges=GAIN_EDGES):
    """Counts over right-closed bins ``(edges[i], edges[i+1]]``."""
    inner = np.asarray(edges[1:-1])
    counts = [0] * (len(edges) - 1)
    for v in values:
        counts[int(np.searchsorted(inner, v, side="left"))] += 1
    return counts


def gain_stats(pairs):
    """``pairs``: per-problem (k_naive, k_model, t_naive, t_model)."""
    s_iter = [kn / max(km, 1) for kn, km, _, _ in pairs]
    s_cpu = [tn / tm for _, _, tn, tm in pairs]
    g_iter = [gain_percent(s) for s in s_iter]
    g_cpu = [gain_percent(s) for s in s_cpu]
    return GainStats(s_iter, s_cpu, g_iter, g_cpu, histogram(g_iter), histogram(g_cpu),
                     float(np.mean(s_iter)), float(np.mean(s_cpu)),
                     float(np.mean(g_iter)), float(np.mean(g_cpu)))


def _timed_solve(sample, make_guess, cfg, repeats):
    times, rep = [], None
    for _ in range(repeats):
        t0 = time.perf_counter()
        rep = newton_solve(sample.spec, make_guess(), cfg)
        times.append(time.perf_counter() - t0)
    return rep, statistics.median(times)


def gains(problems, model, newton_cfg=None, repeats=3, naive_value=1.0):
    """Naive (all-ones) vs model-initialized solves; returns (GainStats, pairs).

    Model timings include the network forward pass; each timing is the
    median of ``repeats`` runs.
    """
    pairs = []
    for sample in problems:
        cfg = _cfg_for(sample, newton_cfg)
        naive, tn = _timed_solve(sample, lambda: naive_guess(sample.spec.grid, naive_value), cfg, repeats)
        warm, tm = _timed_solve(sample, lambda: forward(model, sample.spec.inputs()), cfg, repeats)
        pairs.append((naive.iterations, warm.iterations, tn, tm))
    return gain_stats(pairs), pairs


# --------------------------------------------------------------------------
# traces

def threshold_counts(history, thresholds=THRESHOLDS):
    """First iteration at which the residual reaches each threshold (None if never)."""
    out = {}
    for thr in thresholds:
        hit = next((i for i, r in enumerate(history) if r <= thr), None)
        out[thr] = hit
    return out


def residual_traces(problems, inits, newton_cfg=None, seed=0, thresholds=THRESHOLDS):
    """Returns (long rows (problem, init, iteration, residual), threshold rows)."""
    trace_rows, thr_rows = [], []
    for si, strat in enumerate(inits):
        for pi, sample in enumerate(problems):
            rng = np.random.default_rng(np.random.SeedSequence([seed, si, pi]))
            rep = newton_solve(sample.spec, strat.guess(sample, rng), _cfg_for(sample, newton_cfg))
            for it, r in enumerate(rep.residual_history):
                trace_rows.append((pi, strat.label, it, r))
            counts = threshold_counts(rep.residual_history, thresholds)
            thr_rows.append((pi, strat.label, *[counts[t] for t in thresholds]))
    return trace_rows, thr_rows


def threshold_ratio(naive_count, model_count):
    if naive_count is None:
        return math.inf
    return naive_count / max(model_count, 1)


# --------------------------------------------------------------------------
# break-even

NEVER = "never"


def breakeven(train_time, savings):
    """Simulations needed before training pays off: ceil(train_time / mean saving)."""
    saving = float(np.mean(savings)) if np.ndim(savings) else float(savings)
    if not saving > 0:
        return NEVER
    return int(math.ceil(train_time / saving))


def breakeven_bundle(train_time, savings_by_resolution):
    """Same, counting one simulation as a solve at every evaluated resolution."""
    if not savings_by_resolution:
        return NEVER
    total = sum(float(np.mean(v)) for v in savings_by_resolution.values())
    if not total > 0:
        return NEVER
    return int(math.ceil(train_time / total))


# --------------------------------------------------------------------------
# CSV

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_runs(path, records):
    write_csv(path, ["problem", "init", "iterations", "wall_time", "converged"],
              [(r.problem, r.label, r.iterations, r.wall_time, int(r.converged)) for r in records])


def read_runs(path):
    with open(path, newline="") as fh:
        return [RunRecord(int(r["problem"]), r["init"], int(r["iterations"]), float(r["wall_time"]),
                          bool(int(r["converged"]))) for r in csv.DictReader(fh)]


def write_traces(path, rows):
    write_csv(path, ["problem", "init", "iteration", "residual"], rows)


def read_traces(path):
    with open(path, newline="") as fh:
        return [(int(r["problem"]), r["init"], int(r["iteration"]), float(r["residual"]))
                for r in csv.DictReader(fh)]
