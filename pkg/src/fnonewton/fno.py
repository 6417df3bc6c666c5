"""Fourier neural operator in plain numpy, with a hand-written reverse pass.

Arrays are channels-last internally: ``v[b, *space, c]``. Public entry
points take and return channels-first inputs ``x[b, c, *space]`` and
predictions ``u[b, *space]``.

FFT conventions: unnormalized ``rfftn`` forward, ``1/N`` on the inverse.
In 2D the retained modes are the two corner blocks ``kx < m`` and
``kx >= N - m`` (each with ``ky < m``), which is what real-valued 2D
fields need to represent both diagonal orientations.
"""
from dataclasses import asdict, dataclass
import json
import math
from pathlib import Path

import numpy as np
from scipy.special import ndtr

CHECKPOINT_VERSION = 1
_SQRT_2PI = math.sqrt(2.0 * math.pi)


class ModelFormatError(ValueError):
    pass


@dataclass
class FnoConfig:
    n_c: int = 2
    n_p: int = 30
    n_layers: int = 4
    modes: int = 30
    dim: int = 1
    n_q: int = 0  # 0 -> 2 * n_p
    mask_boundary: bool = True

    def __post_init__(self):
        if self.n_layers < 1 or self.n_p < 1 or self.modes < 1 or self.n_c < 1:
            raise ValueError("n_c, n_p, n_layers and modes must be >= 1")
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")
        if self.n_q <= 0:
            self.n_q = 2 * self.n_p

    def check_resolution(self, shape):
        m = self.modes
        if self.dim == 1:
            if m > shape[-1] // 2 + 1:
                raise ValueError(f"{m} modes exceed the {shape[-1] // 2 + 1} available at N={shape[-1]}")
        else:
            n1, n2 = shape[-2:]
            if 2 * m > n1 or m > n2 // 2 + 1:
                raise ValueError(f"{m} modes per axis do not fit a {n1}x{n2} grid")


def gelu(x):
    return x * ndtr(x)


def gelu_grad(x):
    return ndtr(x) + x * np.exp(-0.5 * x * x) / _SQRT_2PI


def param_shapes(cfg):
    """Ordered parameter names and shapes; this order defines the weight blob."""
    p, m = cfg.n_p, cfg.modes
    shapes = [("P.w", (cfg.n_c, p)), ("P.b", (p,))]
    rshape = (m, p, p) if cfg.dim == 1 else (2, m, m, p, p)
    for layer in range(cfg.n_layers):
        shapes += [(f"R{layer}", rshape), (f"W{layer}.w", (p, p)), (f"W{layer}.b", (p,))]
    shapes += [("Q1.w", (p, cfg.n_q)), ("Q1.b", (cfg.n_q,)), ("Q2.w", (cfg.n_q,)), ("Q2.b", (1,))]
    return shapes


class FnoModel:
    def __init__(self, config, params, mean=None, std=None):
        self.config = config
        self.params = params
        self.mean = np.zeros(config.n_c) if mean is None else np.asarray(mean, dtype=np.float64)
        self.std = np.ones(config.n_c) if std is None else np.asarray(std, dtype=np.float64)

    @classmethod
    def init(cls, config, rng):
        params = {}
        for name, shape in param_shapes(config):
            if name.startswith("R"):
                scale = 1.0 / (config.n_p * config.modes)
                params[name] = scale * (rng.uniform(size=shape) + 1j * rng.uniform(size=shape))
            else:
                lname = name.split(".")[0]
                fan_in = {"P": config.n_c, "Q1": config.n_p, "Q2": config.n_q}.get(lname, config.n_p)
                bound = 1.0 / math.sqrt(fan_in)
                params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(config, params)

    def copy(self):
        return FnoModel(self.config, {k: v.copy() for k, v in self.params.items()},
                        self.mean.copy(), self.std.copy())

    def set_normalization(self, x):
        """Per-channel mean/std over a stack of channels-first inputs."""
        axes = (0,) + tuple(range(2, x.ndim))
        self.mean = x.mean(axis=axes)
        std = x.std(axis=axes)
        self.std = np.where(std > 0, std, 1.0)

    def __call__(self, x, mask=None):
        return forward(self, x, mask)


def boundary_bubble(shape, dim):
    x = np.linspace(0.0, 1.0, shape[-1])
    if dim == 1:
        return x * (1.0 - x)
    y = np.linspace(0.0, 1.0, shape[-2])
    return 16.0 * np.outer(y * (1.0 - y), x * (1.0 - x))


def _axes(dim):
    return (1,) if dim == 1 else (1, 2)


def _mode_weights(shape, dim):
    """Multiplicity of each rfft bin along the last spatial axis (1 or 2)."""
    n = shape[-1]
    c = np.full(n // 2 + 1, 2.0)
    c[0] = 1.0
    if n % 2 == 0:
        c[-1] = 1.0
    return c


def _mode_slices(m, dim):
    if dim == 1:
        return [(slice(None), slice(0, m))]
    return [(slice(None), slice(0, m), slice(0, m)), (slice(None), slice(-m, None), slice(0, m))]


def _mix(coef, r):
    """``out[b, modes, o] = sum_i coef[b, modes, i] r[modes, i, o]``."""
    return np.einsum("b...i,...io->b...o", coef, r, optimize=True)


def spectral_conv(v, r, dim=1, _cache=None):
    """Fourier layer convolution on channels-last ``v[b, *space, c]``.

    ``r`` holds one ``c x c`` complex matrix per retained mode:
    ``(m, c, c)`` in 1D and ``(2, m, m, c, c)`` in 2D.
    """
    space = v.shape[1:-1]
    m = r.shape[0] if dim == 1 else r.shape[1]
    if dim == 1 and m > space[0] // 2 + 1 or dim == 2 and (2 * m > space[0] or m > space[1] // 2 + 1):
        raise ValueError(f"{m} modes do not fit grid {space}")
    axes = _axes(dim)
    fv = np.fft.rfftn(v, axes=axes)
    out = np.zeros(fv.shape[:-1] + (r.shape[-1],), dtype=np.complex128)
    blocks = [r] if dim == 1 else [r[0], r[1]]
    for sl, rb in zip(_mode_slices(m, dim), blocks):
        out[sl] = _mix(fv[sl], rb)
    if _cache is not None:
        _cache["fv"] = fv
    return np.fft.irfftn(out, s=space, axes=axes)


def spectral_conv_backward(g, r, fv, dim):
    """Gradients of ``spectral_conv`` given upstream ``g`` (same shape as its output)."""
    space = g.shape[1:-1]
    axes = _axes(dim)
    n_tot = float(np.prod(space))
    c = _mode_weights(space, dim)
    cshape = (1,) * dim + (-1, 1)
    gG = np.fft.rfftn(g, axes=axes) * (c.reshape(cshape) / n_tot)
    m = r.shape[0] if dim == 1 else r.shape[1]
    gF = np.zeros(fv.shape, dtype=np.complex128)
    gr = np.zeros_like(r)
    blocks = [slice(None)] if dim == 1 else [0, 1]
    for sl, bi in zip(_mode_slices(m, dim), blocks):
        rb = r[bi]
        gGm = gG[sl]
        gr[bi] = np.einsum("b...i,b...o->...io", np.conj(fv[sl]), gGm, optimize=True)
        gF[sl] = np.einsum("b...o,...io->b...i", gGm, np.conj(rb), optimize=True)
    gv = np.fft.irfftn(gF / c.reshape(cshape), s=space, axes=axes) * n_tot
    return gv, gr


def _to_last(x):
    return np.moveaxis(x, 1, -1)


def forward(model, x, mask=None, cache=None):
    """Predict ``u[b, *space]`` from channels-first inputs ``x[b, n_c, *space]``.

    A single unbatched input ``x[n_c, *space]`` returns ``u[*space]``.
    """
    cfg = model.config
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == cfg.dim + 1
    if single:
        x = x[None]
    if x.shape[1] != cfg.n_c:
        raise ValueError(f"model expects {cfg.n_c} input channels, got {x.shape[1]}")
    space = x.shape[2:]
    cfg.check_resolution(space)
    P = model.params
    xn = _to_last((x - model.mean.reshape((1, -1) + (1,) * cfg.dim)) / model.std.reshape((1, -1) + (1,) * cfg.dim))
    v = xn @ P["P.w"] + P["P.b"]
    if cache is not None:
        cache.update(xn=xn, vs=[v], zs=[], fvs=[])
    for layer in range(cfg.n_layers):
        lc = {} if cache is not None else None
        s = spectral_conv(v, P[f"R{layer}"], cfg.dim, lc)
        z = s + v @ P[f"W{layer}.w"] + P[f"W{layer}.b"]
        v = gelu(z) if layer < cfg.n_layers - 1 else z
        if cache is not None:
            cache["zs"].append(z)
            cache["fvs"].append(lc["fv"])
            cache["vs"].append(v)
    h1 = v @ P["Q1.w"] + P["Q1.b"]
    a1 = gelu(h1)
    out = a1 @ P["Q2.w"] + P["Q2.b"][0]
    use_mask = cfg.mask_boundary if mask is None else mask
    if use_mask:
        bub = boundary_bubble(space, cfg.dim)
        out = out * bub
    if cache is not None:
        cache.update(h1=h1, a1=a1, mask=use_mask, space=space)
    return out[0] if single else out


def backward(model, cache, g_out):
    """Reverse pass: gradient of a scalar loss w.r.t. every parameter.

    ``g_out`` is the loss gradient w.r.t. the batched prediction.
    """
    cfg = model.config
    P = model.params
    grads = {}
    g = np.asarray(g_out, dtype=np.float64)
    if cache["mask"]:
        g = g * boundary_bubble(cache["space"], cfg.dim)
    red = tuple(range(g.ndim))
    a1, h1 = cache["a1"], cache["h1"]
    grads["Q2.w"] = np.tensordot(a1, g, axes=(red, red))
    grads["Q2.b"] = np.array([g.sum()])
    g_h1 = (g[..., None] * P["Q2.w"]) * gelu_grad(h1)
    v = cache["vs"][-1]
    grads["Q1.w"] = np.tensordot(v, g_h1, axes=(red, red))
    grads["Q1.b"] = g_h1.sum(axis=red)
    g_v = g_h1 @ P["Q1.w"].T
    for layer in reversed(range(cfg.n_layers)):
        z = cache["zs"][layer]
        v_in = cache["vs"][layer]
        g_z = g_v * gelu_grad(z) if layer < cfg.n_layers - 1 else g_v
        grads[f"W{layer}.w"] = np.tensordot(v_in, g_z, axes=(red, red))
        grads[f"W{layer}.b"] = g_z.sum(axis=red)
        g_spec, g_r = spectral_conv_backward(g_z, P[f"R{layer}"], cache["fvs"][layer], cfg.dim)
        grads[f"R{layer}"] = g_r
        g_v = g_z @ P[f"W{layer}.w"].T + g_spec
    grads["P.w"] = np.tensordot(cache["xn"], g_v, axes=(red, red))
    grads["P.b"] = g_v.sum(axis=red)
    for name, val in grads.items():
        if not np.all(np.isfinite(val)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    return grads


# --------------------------------------------------------------------------
# checkpoints: <dir>/manifest.json + <dir>/weights.bin (little-endian float64)

def save_model(model, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    order = param_shapes(model.config)
    chunks = [model.mean, model.std]
    layout = [{"name": "norm.mean", "shape": [model.config.n_c], "dtype": "f8"},
              {"name": "norm.std", "shape": [model.config.n_c], "dtype": "f8"}]
    for name, shape in order:
        arr = model.params[name]
        if arr.shape != tuple(shape):
            raise ModelFormatError(f"parameter {name} has shape {arr.shape}, expected {shape}")
        if np.iscomplexobj(arr):
            chunks.append(np.ascontiguousarray(arr).view(np.float64).ravel())
            layout.append({"name": name, "shape": list(shape), "dtype": "c16"})
        else:
            chunks.append(arr.ravel())
            layout.append({"name": name, "shape": list(shape), "dtype": "f8"})
    blob = np.concatenate([np.asarray(c, dtype=np.float64).ravel() for c in chunks]).astype("<f8")
    (path / "weights.bin").write_bytes(blob.tobytes())
    manifest = {"format_version": CHECKPOINT_VERSION, "config": asdict(model.config), "layout": layout}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_model(path, n_c=None):
    """Load a checkpoint; ``n_c`` (if given) must match the stored channel count."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ModelFormatError(f"unsupported checkpoint version {manifest.get('format_version')!r}")
    cfg = FnoConfig(**manifest["config"])
    if n_c is not None and cfg.n_c != n_c:
        raise ModelFormatError(f"checkpoint has {cfg.n_c} input channels, expected {n_c}")
    blob = np.frombuffer((path / "weights.bin").read_bytes(), dtype="<f8")
    expected = dict(param_shapes(cfg))
    params, pos = {}, 0
    mean = std = None
    for entry in manifest["layout"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) * (2 if entry["dtype"] == "c16" else 1)
        if pos + count > blob.size:
            raise ModelFormatError("weight blob is truncated")
        chunk = blob[pos:pos + count].astype(np.float64)
        pos += count
        name = entry["name"]
        if entry["dtype"] == "c16":
            arr = chunk.view(np.complex128).reshape(shape).copy()
        else:
            arr = chunk.reshape(shape).copy()
        if name == "norm.mean":
            mean = arr
        elif name == "norm.std":
            std = arr
        else:
            if expected.get(name) != shape:
                raise ModelFormatError(f"parameter {name} has shape {shape}, config implies {expected.get(name)}")
            params[name] = arr
    if pos != blob.size:
        raise ModelFormatError("weight blob has trailing data")
    missing = set(expected) - set(params)
    if missing:
        raise ModelFormatError(f"checkpoint lacks parameters {sorted(missing)}")
    return FnoModel(cfg, params, mean, std)
