"""Hyperparameter grid search with data, residual and Newton-iteration scores."""
from dataclasses import asdict, dataclass, field, fields
import csv
import itertools
import time

import numpy as np

from .discretization import residual
from .fno import FnoConfig, FnoModel, forward
from .jfnk import NewtonConfig, newton_solve
from .training import TrainConfig, train

# Candidate sets explored by default.
DEFAULT_GRID = {
    "ell0": [1e-2, 1e-3, 1e-4],
    "gamma": [0.98, 0.99, 1.0],
    "batch_size": [64, 128, 256, 512],
    "omega": [0.0, 0.5, 1.0],
    "n_layers": [2, 3, 4, 5],
    "modes": [10, 20, 30, 40],
    "n_p": [10, 20, 30, 50],
}
# Best point of the reference sweep; used as the default configuration.
REFERENCE_BEST = {"ell0": 1e-3, "gamma": 0.99, "batch_size": 64, "omega": 0.5,
                  "n_layers": 4, "modes": 30, "n_p": 30}
_INT_KEYS = ("batch_size", "n_layers", "modes", "n_p")


@dataclass
class HyperGrid:
    ell0: list = field(default_factory=lambda: list(DEFAULT_GRID["ell0"]))
    gamma: list = field(default_factory=lambda: list(DEFAULT_GRID["gamma"]))
    batch_size: list = field(default_factory=lambda: list(DEFAULT_GRID["batch_size"]))
    omega: list = field(default_factory=lambda: list(DEFAULT_GRID["omega"]))
    n_layers: list = field(default_factory=lambda: list(DEFAULT_GRID["n_layers"]))
    modes: list = field(default_factory=lambda: list(DEFAULT_GRID["modes"]))
    n_p: list = field(default_factory=lambda: list(DEFAULT_GRID["n_p"]))

    def __post_init__(self):
        for f in fields(self):
            vals = getattr(self, f.name)
            if isinstance(vals, (int, float)):
                vals = [vals]
            vals = list(vals)
            if not vals:
                raise ValueError(f"empty candidate list for {f.name}")
            if f.name in _INT_KEYS:
                if any(int(v) != v or v < 1 for v in vals):
                    raise ValueError(f"{f.name} candidates must be positive integers")
                vals = [int(v) for v in vals]
            setattr(self, f.name, vals)
        if any(v <= 0 for v in self.ell0):
            raise ValueError("ell0 candidates must be positive")
        if any(not 0 < v <= 1 for v in self.gamma):
            raise ValueError("gamma candidates must lie in (0, 1]")
        if any(not 0 <= v <= 1 for v in self.omega):
            raise ValueError("omega candidates must lie in [0, 1]")

    @property
    def keys(self):
        return [f.name for f in fields(self)]

    def __len__(self):
        return int(np.prod([len(getattr(self, k)) for k in self.keys]))

    def points(self):
        """All combinations in lexicographic order of the declared lists."""
        keys = self.keys
        for combo in itertools.product(*(getattr(self, k) for k in keys)):
            yield dict(zip(keys, combo))


@dataclass
class ScoreRecord:
    mu: dict
    s_data: float = None
    s_dis: float = None
    s_iter: float = None
    per_resolution: dict = field(default_factory=dict)
    train_time: float = 0.0
    index: int = 0

    def sort_key(self):
        s_iter = -self.s_iter if self.s_iter is not None else np.inf
        s_data = self.s_data if self.s_data is not None else np.inf
        return (s_iter, s_data, self.index)

    def row(self):
        out = {"index": self.index}
        out.update(self.mu)
        out.update(s_data=self.s_data, s_dis=self.s_dis, s_iter=self.s_iter, train_time=self.train_time)
        return out


def score_losses(model, validation):
    """(S_data, S_dis): sums over all samples of the squared errors and residuals."""
    if len(validation) == 0:
        raise ValueError("empty validation set")
    s_data = 0.0
    s_dis = 0.0
    per_res = {}
    for n in validation.resolutions:
        group = validation.by_resolution(n)
        x = np.stack([s.spec.inputs() for s in group])
        pred = forward(model, x)
        d, r_sum = 0.0, 0.0
        for u_hat, s in zip(pred, group):
            e = u_hat - s.u
            d += float(np.sum(e * e))
            r = residual(u_hat, s.spec)
            r_sum += float(np.sum(r * r))
        per_res[n] = (d, r_sum)
        s_data += d
        s_dis += r_sum
    return s_data, s_dis, per_res


def naive_guess(grid, value=1.0):
    """Constant interior value with homogeneous Dirichlet entries."""
    u0 = np.full(grid.shape, float(value))
    u0[grid.boundary_mask()] = 0.0
    return u0


def iteration_ratio(k_naive, k_model):
    return k_naive / max(k_model, 1)


def score_iterations(model, problems, newton_cfg=None, naive_value=1.0):
    """Mean over problems of naive-guess over model-guess Newton iteration counts.

    Returns (S_iter, list of (k_naive, k_model)). Counts are capped at the
    iteration limit by the solver; a model count of 0 is floored to 1.
    """
    if not problems:
        raise ValueError("no problems to score")
    pairs = []
    for s in problems:
        spec = s.spec
        cfg = newton_cfg or NewtonConfig.for_dim(spec.grid.dim)
        guess = forward(model, spec.inputs())
        k_model = newton_solve(spec, guess, cfg).iterations
        k_naive = newton_solve(spec, naive_guess(spec.grid, naive_value), cfg).iterations
        pairs.append((k_naive, k_model))
    return float(np.mean([iteration_ratio(a, b) for a, b in pairs])), pairs


def _select_iter_problems(validation, per_resolution):
    out = []
    for n in validation.resolutions:
        out.extend(validation.by_resolution(n)[:per_resolution])
    return out


def grid_search(grid, train_set, validation, budget=None, scores=("data", "dis", "iter"),
                epochs=50, seed=0, newton_cfg=None, iter_problems=5, base_train=None, log=None):
    """Train and score configurations in lexicographic order.

    Returns (records ranked best first, best mu). ``budget`` caps the number
    of configurations visited.
    """
    if budget is not None and budget < 1:
        raise ValueError("budget must be >= 1")
    unknown = set(scores) - {"data", "dis", "iter"}
    if unknown:
        raise ValueError(f"unknown scores {sorted(unknown)}")
    dim = train_set.dim
    n_c = train_set.samples[0].spec.n_channels
    problems = _select_iter_problems(validation, iter_problems) if "iter" in scores else []
    base = asdict(base_train) if base_train is not None else {}
    records = []
    for index, mu in enumerate(grid.points()):
        if budget is not None and index >= budget:
            break
        # every configuration owns an independent, index-keyed stream
        rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
        fcfg = FnoConfig(n_c=n_c, n_p=mu["n_p"], n_layers=mu["n_layers"], modes=mu["modes"], dim=dim)
        tkw = dict(base)
        tkw.update(ell0=mu["ell0"], gamma=mu["gamma"], batch_size=min(mu["batch_size"], len(train_set)),
                   omega=mu["omega"], epochs=epochs, loss_combo=f"{dim}d")
        tcfg = TrainConfig(**tkw)
        t0 = time.perf_counter()
        model, _ = train(FnoModel.init(fcfg, rng), train_set, tcfg, rng, validation)
        rec = ScoreRecord(dict(mu), train_time=time.perf_counter() - t0, index=index)
        if "data" in scores or "dis" in scores:
            s_data, s_dis, per_res = score_losses(model, validation)
            rec.s_data = s_data if "data" in scores else None
            rec.s_dis = s_dis if "dis" in scores else None
            rec.per_resolution = per_res
        if "iter" in scores:
            rec.s_iter, _ = score_iterations(model, problems, newton_cfg)
        records.append(rec)
        if log is not None:
            log(f"config {index}: {mu} -> S_data={rec.s_data} S_dis={rec.s_dis} S_iter={rec.s_iter}")
    ranked = sorted(records, key=ScoreRecord.sort_key)
    return ranked, (ranked[0].mu if ranked else None)


def write_results(records, path):
    rows = [r.row() for r in sorted(records, key=lambda r: r.index)]
    if not rows:
        raise ValueError("no records to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in row.items()})
