"""Jacobian-free Newton-Krylov solver.

Inner solves use restarted GMRES augmented with a few previous correction
vectors (the LGMRES idea); the augmentation vectors persist across Newton
iterations. Steps are damped by an Armijo backtracking search on the 2-norm
of the residual, and convergence is declared on its max-norm.
"""
from dataclasses import dataclass, field
import math
import time
from typing import NamedTuple

import numpy as np
from scipy.linalg import solve_triangular

from . import kernels
from ._accel import USE_NUMBA
from .discretization import residual

SQRT_EPS = math.sqrt(np.finfo(np.float64).eps)


@dataclass
class KrylovConfig:
    restart: int = 30
    max_inner: int = 300
    recycle: int = 3

    def __post_init__(self):
        if self.restart < 1 or self.max_inner < 1 or self.recycle < 0:
            raise ValueError("restart and max_inner must be >= 1, recycle >= 0")


@dataclass
class LineSearchConfig:
    c: float = 1e-4
    rho: float = 0.5
    lambda_min: float = 1e-4
    # step taken when no trial length qualifies: "lambda_min" or "full"
    fallback: str = "lambda_min"

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ValueError("backtracking factor must be in (0, 1)")
        if not 0 < self.c < 1 or not 0 < self.lambda_min <= 1:
            raise ValueError("invalid line-search constants")
        if self.fallback not in ("lambda_min", "full"):
            raise ValueError(f"unknown line-search fallback {self.fallback!r}")


@dataclass
class NewtonConfig:
    """Outer-loop settings.

    ``forcing`` is either ``"fixed"`` (inner tolerance ``eta``) or
    ``"eisenstat-walker"`` (choice 2, safeguarded, starting from ``eta`` and
    capped at ``eta_max``).
    Either way the relative tolerance handed to GMRES is
    ``eta * min(1, |F|_2)``.
    """

    f_tol: float = 1e-6
    max_iter: int = 2000
    forcing: str = "fixed"
    eta: float = 1e-3
    eta_max: float = 0.9
    ew_gamma: float = 0.9
    ew_alpha: float = 2.0
    krylov: KrylovConfig = field(default_factory=KrylovConfig)
    linesearch: LineSearchConfig = field(default_factory=LineSearchConfig)

    def __post_init__(self):
        if not self.f_tol > 0:
            raise ValueError("f_tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0 < self.eta < 1 or not 0 < self.eta_max < 1:
            raise ValueError("forcing terms must lie in (0, 1)")
        if self.forcing not in ("fixed", "eisenstat-walker"):
            raise ValueError(f"unknown forcing rule {self.forcing!r}")
        if isinstance(self.krylov, dict):
            self.krylov = KrylovConfig(**self.krylov)
        if isinstance(self.linesearch, dict):
            self.linesearch = LineSearchConfig(**self.linesearch)

    @classmethod
    def for_dim(cls, dim, **kw):
        kw.setdefault("f_tol", 1e-6 if dim == 1 else 1e-5)
        return cls(**kw)


@dataclass
class NewtonReport:
    converged: bool
    iterations: int
    residual_history: list
    wall_time: float
    solution: np.ndarray
    message: str = ""


class KrylovResult(NamedTuple):
    x: np.ndarray
    residual: float  # relative
    converged: bool
    breakdown: bool
    matvecs: int


class LineSearchResult(NamedTuple):
    step: float
    improved: bool
    f_new: np.ndarray
    norm_new: float


def jvp(fun, u, v, f0=None):
    """Forward-difference directional derivative ``F'(u) v``."""
    vn = np.linalg.norm(v)
    if vn == 0.0:
        return np.zeros_like(u)
    if f0 is None:
        f0 = fun(u)
    eps = SQRT_EPS * (1.0 + np.linalg.norm(u)) / vn
    out = (fun(u + eps * v) - f0) / eps
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite residual during Jacobian-vector product")
    return out


def _givens(a, b):
    if b == 0.0:
        return 1.0, 0.0
    r = math.hypot(a, b)
    return a / r, b / r


def krylov_solve(apply, rhs, tol_rel=1e-3, restart=30, max_inner=300, recycle=3, outer=None):
    """Solve ``apply(x) = rhs`` to relative residual ``tol_rel``.

    ``outer`` is an optional list of augmentation vectors; it is updated in
    place with the normalized correction of every restart cycle (newest
    first, at most ``recycle`` kept), so callers can carry it across
    related systems.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    n = rhs.size
    b_norm = np.linalg.norm(rhs)
    x = np.zeros(n)
    if b_norm == 0.0:
        return KrylovResult(x, 0.0, True, False, 0)
    if outer is None:
        outer = []
    target = tol_rel * b_norm
    r = rhs.copy()
    r_norm = b_norm
    matvecs = 0
    breakdown = False
    while r_norm > target and matvecs < max_inner:
        m = min(restart, max_inner - matvecs)
        aug = outer[:recycle] if recycle else []
        total = m + len(aug)
        V = np.zeros((total + 1, n))
        Z = np.zeros((total, n))
        H = np.zeros((total + 1, total))
        cs = np.zeros(total)
        sn = np.zeros(total)
        g = np.zeros(total + 1)
        V[0] = r / r_norm
        g[0] = r_norm
        done = 0
        cycle_breakdown = False
        for j in range(total):
            z = V[j] if j < m else aug[j - m]
            w = apply(z)
            matvecs += 1
            w_norm0 = np.linalg.norm(w)
            Vj = V[: j + 1]
            hcol = Vj @ w
            w = w - hcol @ Vj
            corr = Vj @ w
            w = w - corr @ Vj
            hcol += corr
            hn = np.linalg.norm(w)
            H[: j + 1, j] = hcol
            H[j + 1, j] = hn
            Z[j] = z
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            cs[j], sn[j] = _givens(H[j, j], H[j + 1, j])
            H[j, j] = cs[j] * H[j, j] + sn[j] * H[j + 1, j]
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            done = j + 1
            if hn <= 1e-13 * max(w_norm0, 1e-300):
                cycle_breakdown = True
                break
            V[j + 1] = w / hn
            if abs(g[j + 1]) <= target:
                break
        diag = np.abs(np.diag(H[:done, :done]))
        keep = done
        while keep > 0 and diag[keep - 1] <= 1e-300:
            keep -= 1
        if keep == 0:
            breakdown = True
            break
        y = solve_triangular(H[:keep, :keep], g[:keep])
        dx = y @ Z[:keep]
        x += dx
        dxn = np.linalg.norm(dx)
        if recycle and dxn > 0:
            outer.insert(0, dx / dxn)
            del outer[recycle:]
        r = rhs - apply(x)
        matvecs += 1
        r_norm = np.linalg.norm(r)
        if cycle_breakdown:
            breakdown = r_norm > target
            break
    return KrylovResult(x, r_norm / b_norm, r_norm <= target, breakdown, matvecs)


def armijo_search(fun, u, delta, f0, merit_norm=np.linalg.norm, c=1e-4, rho=0.5, lambda_min=1e-4):
    """Backtrack from a full step until ``|F(u + lam d)| <= (1 - c lam) |F(u)|``.

    Returns the first qualifying ``lam`` in ``1, rho, rho**2, ...``; if none
    down to ``lambda_min`` qualifies, returns ``lambda_min`` flagged as
    non-improving.
    """
    n0 = merit_norm(f0)
    lam = 1.0
    while True:
        f_new = fun(u + lam * delta)
        n_new = merit_norm(f_new) if np.all(np.isfinite(f_new)) else math.inf
        if n_new <= (1.0 - c * lam) * n0:
            return LineSearchResult(lam, True, f_new, n_new)
        nxt = lam * rho
        if nxt < lambda_min:
            break
        lam = nxt
    if lam != lambda_min:
        lam = lambda_min
        f_new = fun(u + lam * delta)
        n_new = merit_norm(f_new) if np.all(np.isfinite(f_new)) else math.inf
    return LineSearchResult(lam, False, f_new, n_new)


def _max_norm(r):
    return float(np.max(np.abs(r))) if r.size else 0.0


class _MatrixFreeSolver:
    """Inner solves with finite-difference Jacobian products of ``fun``."""

    def __init__(self, fun, kcfg):
        self.fun = fun
        self.kcfg = kcfg
        self.outer = []

    def __call__(self, u, f, eta):
        fun, c = self.fun, self.kcfg
        return krylov_solve(lambda v: jvp(fun, u, v, f), -f, eta,
                            c.restart, c.max_inner, c.recycle, self.outer)


class _FusedEllipticSolver:
    """Same algorithm as ``_MatrixFreeSolver`` for the elliptic residual, compiled."""

    def __init__(self, spec, kcfg):
        g = spec.grid
        self.args = (np.ascontiguousarray(spec.k, dtype=np.float64).ravel(),
                     np.ascontiguousarray(spec.phi, dtype=np.float64).ravel(),
                     spec.p, float(spec.alpha0), g.h, g.dim, g.n)
        self.kcfg = kcfg
        self.outer = np.zeros((max(kcfg.recycle, 1), g.size))
        self.n_outer = 0

    def __call__(self, u, f, eta):
        c = self.kcfg
        x, rel, ok, bd, mv, self.n_outer, status = kernels._gmres_elliptic(
            u, f, *self.args, -f, eta, c.restart, c.max_inner, c.recycle, self.outer, self.n_outer)
        if status:
            raise FloatingPointError("non-finite residual during Jacobian-vector product")
        return KrylovResult(x, rel, ok, bd, mv)


def newton_krylov(fun, u0, cfg=None, linear_solver=None):
    """Solve ``fun(u) = 0`` for flat vectors ``u`` starting at ``u0``.

    ``linear_solver(u, f, eta)`` may replace the default matrix-free GMRES;
    it must return a ``KrylovResult`` for ``F'(u) x = -f``.
    """
    cfg = cfg or NewtonConfig()
    t0 = time.perf_counter()
    u = np.array(u0, dtype=np.float64).ravel()
    f = np.asarray(fun(u), dtype=np.float64)
    hist = [_max_norm(f)]
    solve = linear_solver or _MatrixFreeSolver(fun, cfg.krylov)
    eta = cfg.eta
    prev_norm2 = None
    lcfg = cfg.linesearch

    def fail(msg):
        return NewtonReport(False, cfg.max_iter, hist, time.perf_counter() - t0, u, msg)

    if not np.isfinite(hist[0]):
        return fail("non-finite initial residual")
    k = 0
    while hist[-1] > cfg.f_tol:
        if k >= cfg.max_iter:
            return fail("iteration cap reached")
        norm2 = float(np.linalg.norm(f))
        if cfg.forcing == "eisenstat-walker" and prev_norm2 is not None:
            new_eta = cfg.ew_gamma * (norm2 / prev_norm2) ** cfg.ew_alpha
            safeguard = cfg.ew_gamma * eta ** cfg.ew_alpha
            if safeguard > 0.1:
                new_eta = max(new_eta, safeguard)
            eta = min(new_eta, cfg.eta_max)
        prev_norm2 = norm2
        try:
            # tighten below unit residual so the local rate is superlinear
            sol = solve(u, f, eta * min(1.0, norm2))
        except FloatingPointError as exc:
            return fail(str(exc))
        ls = armijo_search(fun, u, sol.x, f, c=lcfg.c, rho=lcfg.rho, lambda_min=lcfg.lambda_min)
        if ls.improved or lcfg.fallback == "lambda_min":
            u = u + ls.step * sol.x
            f = ls.f_new
        else:
            u = u + sol.x
            f = np.asarray(fun(u), dtype=np.float64)
        k += 1
        hist.append(_max_norm(f) if np.all(np.isfinite(f)) else math.inf)
        if not math.isfinite(hist[-1]):
            return fail("non-finite residual")
    return NewtonReport(True, k, hist, time.perf_counter() - t0, u, "converged")


def newton_solve(spec, u0, cfg=None):
    """Run JFNK on the discrete problem ``spec`` from initial state ``u0``."""
    cfg = cfg or NewtonConfig.for_dim(spec.grid.dim)
    shape = spec.grid.shape
    u0 = np.asarray(u0, dtype=np.float64)
    if u0.shape != shape:
        raise ValueError(f"initial guess has shape {u0.shape}, grid expects {shape}")

    def fun(v):
        return residual(v.reshape(shape), spec).ravel()

    solver = None
    if USE_NUMBA and spec.phi is not None:
        solver = _FusedEllipticSolver(spec, cfg.krylov)
    rep = newton_krylov(fun, u0.ravel(), cfg, solver)
    rep.solution = rep.solution.reshape(shape)
    return rep
