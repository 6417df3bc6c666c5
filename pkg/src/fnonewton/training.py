"""Losses, their gradients through the FNO, and Adam training.

All norms are plain sums of squares over grid nodes, averaged over the
batch. Predictions and targets are always batched: ``u[b, *space]``.
"""
from dataclasses import dataclass, field
import csv
import time

import numpy as np

from .discretization import batch_residual, batch_residual_vjp, first_derivative, first_derivative_adjoint, residual
from .fno import backward, forward

COMBOS = ("1d", "2d")


@dataclass
class TrainConfig:
    """Optimizer and loss settings.

    ``loss_combo`` "1d" is ``omega L2 + (1 - omega) dis_scale L_dis``;
    "2d" is ``omega L2 + (1 - omega) h1_scale H1``.
    """

    ell0: float = 1e-3
    gamma: float = 0.99
    batch_size: int = 64
    omega: float = 0.5
    epochs: int = 50
    loss_combo: str = "1d"
    dis_scale: float = 1e-4
    h1_scale: float = 1e-2
    normalize: bool = True

    def __post_init__(self):
        if not self.ell0 > 0:
            raise ValueError("ell0 must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.omega <= 1:
            raise ValueError("omega must lie in [0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.loss_combo not in COMBOS:
            raise ValueError(f"loss_combo must be one of {COMBOS}")

    def lr(self, epoch):
        return self.ell0 * self.gamma ** epoch


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    initial_val_mse: float = float("nan")
    best_epoch: int = -1  # -1: the initial weights were never beaten

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_mse", "lr", "wall_time"])
            for i, row in enumerate(zip(self.train_loss, self.val_mse, self.lr, self.wall_time)):
                w.writerow([i] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path):
        rep = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rep.train_loss.append(float(row["train_loss"]))
                rep.val_mse.append(float(row["val_mse"]))
                rep.lr.append(float(row["lr"]))
                rep.wall_time.append(float(row["wall_time"]))
        return rep


# --------------------------------------------------------------------------
# losses

def _check_pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match target {target.shape}")
    if pred.ndim < 2:
        raise ValueError("expected a batch axis in front of the spatial axes")
    return pred, target


def _batch_sq(a):
    return float(np.sum(a * a)) / a.shape[0]


def loss_l2(pred, target):
    pred, target = _check_pair(pred, target)
    return _batch_sq(pred - target)


def loss_h1(pred, target):
    pred, target = _check_pair(pred, target)
    d = target - pred
    dim = d.ndim - 1
    return sum(_batch_sq(first_derivative(d, axis=a, dim=dim)) for a in range(dim))


def loss_dis(pred, specs):
    """Mean squared residual of the discrete problem at the predictions."""
    pred = np.asarray(pred, dtype=np.float64)
    if len(specs) != pred.shape[0]:
        raise ValueError(f"{pred.shape[0]} predictions for {len(specs)} problems")
    total = 0.0
    for u, spec in zip(pred, specs):
        r = residual(u, spec)
        total += float(np.sum(r * r))
    return total / pred.shape[0]


def _dis_batched(pred, k, phi, p, alpha0, dim):
    r = batch_residual(pred, k, phi, p, alpha0, dim)
    return _batch_sq(r), r


def combined_loss(cfg, pred, targets, specs):
    pred, targets = _check_pair(pred, targets)
    dim = pred.ndim - 1
    if cfg.loss_combo != f"{dim}d":
        raise ValueError(f"loss combo {cfg.loss_combo!r} does not fit {dim}D predictions")
    val = cfg.omega * loss_l2(pred, targets)
    if dim == 1:
        return val + (1.0 - cfg.omega) * cfg.dis_scale * loss_dis(pred, specs)
    return val + (1.0 - cfg.omega) * cfg.h1_scale * loss_h1(pred, targets)


# --------------------------------------------------------------------------
# gradients

def loss_terms_and_grad(pred, u, k, phi, p, alpha0, weights):
    """Weighted loss value and its gradient w.r.t. ``pred``.

    ``weights`` maps term names ("l2", "h1", "dis") to coefficients; terms
    with weight 0 are skipped entirely.
    """
    b = pred.shape[0]
    dim = pred.ndim - 1
    value = 0.0
    g = np.zeros_like(pred)
    diff = pred - u
    w = weights.get("l2", 0.0)
    if w:
        value += w * _batch_sq(diff)
        g += (2.0 * w / b) * diff
    w = weights.get("h1", 0.0)
    if w:
        h = 1.0 / (pred.shape[-1] - 1)
        for a in range(dim):
            d = first_derivative(diff, axis=a, dim=dim, h=h)
            value += w * _batch_sq(d)
            g += (2.0 * w / b) * first_derivative_adjoint(d, axis=a, dim=dim, h=h)
    w = weights.get("dis", 0.0)
    if w:
        val, r = _dis_batched(pred, k, phi, p, alpha0, dim)
        value += w * val
        g += (2.0 * w / b) * batch_residual_vjp(pred, k, p, alpha0, dim, r)
    return value, g


def combo_weights(cfg):
    if cfg.loss_combo == "1d":
        return {"l2": cfg.omega, "dis": (1.0 - cfg.omega) * cfg.dis_scale}
    return {"l2": cfg.omega, "h1": (1.0 - cfg.omega) * cfg.h1_scale}


def model_loss_and_grad(model, x, u, k, phi, p, alpha0, weights):
    """Forward + reverse pass; returns (loss, prediction, parameter gradients)."""
    cache = {}
    pred = forward(model, x, cache=cache)
    value, g_pred = loss_terms_and_grad(pred, u, k, phi, p, alpha0, weights)
    return value, pred, backward(model, cache, g_pred)


# --------------------------------------------------------------------------
# optimizer

def _real_view(a):
    return a.view(np.float64) if np.iscomplexobj(a) else a


class Adam:
    """Adam over a dict of arrays; complex arrays are updated as (re, im) pairs."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros(_real_view(v).shape) for k, v in params.items()}
        self.v = {k: np.zeros(_real_view(v).shape) for k, v in params.items()}

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = _real_view(np.ascontiguousarray(grads[name]))
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            pv = _real_view(p)
            pv -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --------------------------------------------------------------------------
# training loop

def _grouped(dataset):
    out = {}
    for n in dataset.resolutions:
        x, u, k, phi = dataset.arrays(n)
        out[n] = (x, u, k, phi)
    return out


def validation_mse(model, groups):
    """Mean over samples of the per-node squared error."""
    total, count = 0.0, 0
    for x, u, _, _ in groups.values():
        pred = forward(model, x)
        err = (pred - u).reshape(len(u), -1)
        total += float(np.sum(np.mean(err * err, axis=1)))
        count += len(u)
    return total / count


def _batches(groups, batch_size, rng):
    """Shuffled equal-resolution batches, then a shuffled batch order."""
    out = []
    for n in sorted(groups):
        idx = rng.permutation(len(groups[n][1]))
        for s in range(0, len(idx), batch_size):
            out.append((n, idx[s:s + batch_size]))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def train(model, dataset, cfg, rng, validation=None, log=None):
    """Fit ``model`` to ``dataset``; returns (best-validation model, report).

    The input model is not modified. Validation falls back to the training
    set when no validation split is given.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    if cfg.batch_size > len(dataset):
        raise ValueError(f"batch size {cfg.batch_size} exceeds the {len(dataset)} training samples")
    dim = model.config.dim
    if cfg.loss_combo != f"{dim}d":
        raise ValueError(f"loss combo {cfg.loss_combo!r} does not fit a {dim}D model")
    model = model.copy()
    groups = _grouped(dataset)
    if cfg.normalize:
        model.set_normalization(np.concatenate(
            [x.reshape(x.shape[0], x.shape[1], -1) for x, _, _, _ in groups.values()], axis=2))
    vgroups = _grouped(validation) if validation is not None and len(validation) else groups
    weights = combo_weights(cfg)
    p, alpha0 = dataset.p, dataset.alpha0
    opt = Adam(model.params)
    report = TrainReport()
    report.initial_val_mse = best = validation_mse(model, vgroups)
    best_model = model.copy()
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = cfg.lr(epoch)
        total, seen = 0.0, 0
        for n, idx in _batches(groups, cfg.batch_size, rng):
            x, u, k, phi = (a[idx] for a in groups[n])
            value, _, grads = model_loss_and_grad(model, x, u, k, phi, p, alpha0, weights)
            opt.step(model.params, grads, lr)
            total += value * len(idx)
            seen += len(idx)
        vmse = validation_mse(model, vgroups)
        report.train_loss.append(total / seen)
        report.val_mse.append(vmse)
        report.lr.append(lr)
        report.wall_time.append(time.perf_counter() - t0)
        if vmse < best:
            best = vmse
            best_model = model.copy()
            report.best_epoch = epoch
        if log is not None:
            log(f"epoch {epoch}: loss {total / seen:.6g} val_mse {vmse:.6g} lr {lr:.3g}")
    return best_model, report
