"""Random manufactured problems: Gaussian-mixture solutions and diffusion fields."""
from dataclasses import dataclass, field
import math
from pathlib import Path

import numpy as np

from .discretization import Grid, ProblemSpec, bubble, elliptic_apply

SPLIT_CODES = {"train": 0, "validation": 1, "test": 2}
FORMAT_VERSION = 1


@dataclass
class GeneratorConfig:
    """Mixture generator settings.

    Each Gaussian's *variance* is drawn uniformly in ``variance_range``.
    """

    n_max: int = 5
    variance_range: tuple = (0.025, 0.07)
    mu_ball_radius: float = 0.25
    baseline: float = 0.5
    eigenvalue_range: tuple = (0.1, 1.0)
    angle_range: tuple = (0.0, math.pi)
    max_retries: int = 10

    def __post_init__(self):
        lo, hi = self.variance_range
        if not 0 < lo <= hi:
            raise ValueError("variance_range must lie in (0, inf)")
        if self.mu_ball_radius < 0 or self.n_max < 0:
            raise ValueError("mu_ball_radius and n_max must be nonnegative")
        lo, hi = self.eigenvalue_range
        if not 0 < lo <= hi:
            raise ValueError("eigenvalue_range must lie in (0, inf)")


@dataclass
class Mixture:
    """``baseline + sum_i N(x; mu_i, sigma_i)``, isotropic per-axis in 2D."""

    mus: np.ndarray  # (n+1, dim)
    sigmas: np.ndarray  # (n+1,)
    baseline: float = 0.5

    @property
    def dim(self):
        return self.mus.shape[1]

    def __call__(self, *coords):
        out = np.full(np.shape(coords[0]), self.baseline, dtype=np.float64)
        for mu, s in zip(self.mus, self.sigmas):
            d2 = sum((c - m) ** 2 for c, m in zip(coords, mu))
            out += np.exp(-0.5 * d2 / s ** 2) / (s * math.sqrt(2.0 * math.pi)) ** len(coords)
        return out


def sample_mixture(cfg, rng, dim=1):
    n = int(rng.integers(0, cfg.n_max + 1))
    var = rng.uniform(*cfg.variance_range, size=n + 1)
    if dim == 1:
        mus = 0.5 + rng.uniform(-cfg.mu_ball_radius, cfg.mu_ball_radius, size=(n + 1, 1))
    else:
        r = cfg.mu_ball_radius * np.sqrt(rng.uniform(size=n + 1))
        theta = rng.uniform(0.0, 2.0 * math.pi, size=n + 1)
        mus = 0.5 + np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return Mixture(mus, np.sqrt(var), cfg.baseline)


def spd_from_eig(lam1, lam2, angle):
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    b = rot.T @ np.diag([lam1, lam2]) @ rot
    # exact symmetry so K12 == K21 bitwise downstream
    b[1, 0] = b[0, 1]
    return b


def sample_spd_matrix(rng, eigenvalue_range=(0.1, 1.0), angle_range=(0.0, math.pi)):
    """Random symmetric positive definite 2x2 matrix and its eigenvalues."""
    lam = rng.uniform(*eigenvalue_range, size=2)
    angle = rng.uniform(*angle_range)
    return spd_from_eig(lam[0], lam[1], angle), lam


@dataclass
class DatasetSample:
    spec: ProblemSpec
    u: np.ndarray
    anisotropy: float = 1.0

    @property
    def resolution(self):
        return self.spec.grid.n

    @property
    def phi(self):
        return self.spec.phi

    @property
    def k(self):
        return self.spec.k


@dataclass
class Dataset:
    split: str
    samples: list
    p: int
    alpha0: float
    dim: int
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    @property
    def resolutions(self):
        return sorted({s.resolution for s in self.samples})

    def by_resolution(self, n):
        return [s for s in self.samples if s.resolution == n]

    def arrays(self, n):
        """Stacked ``(inputs, u, k, phi)`` for all samples at resolution ``n``."""
        group = self.by_resolution(n)
        x = np.stack([s.spec.inputs() for s in group])
        u = np.stack([s.u for s in group])
        k = np.stack([s.spec.k for s in group])
        phi = np.stack([s.spec.phi for s in group])
        return x, u, k, phi


def sample_stream(seed, split, slot, index):
    return np.random.default_rng(np.random.SeedSequence([seed, SPLIT_CODES[split], slot, index]))


def make_sample(grid, p, alpha0, cfg, rng):
    coords = grid.coords()
    for _ in range(cfg.max_retries):
        u = sample_mixture(cfg, rng, grid.dim)(*coords) * bubble(grid)
        delta = sample_mixture(cfg, rng, grid.dim)(*coords)
        ratio = 1.0
        if grid.dim == 1:
            k = delta
        else:
            b, lam = sample_spd_matrix(rng, cfg.eigenvalue_range, cfg.angle_range)
            k = np.stack([delta * b[0, 0], delta * b[0, 1], delta * b[1, 0], delta * b[1, 1]])
            ratio = float(lam.max() / lam.min())
        spec = ProblemSpec(grid, p, k, None, alpha0)
        phi = elliptic_apply(u, spec)
        if np.all(np.isfinite(phi)):
            return DatasetSample(spec.with_phi(phi), u, ratio)
    raise RuntimeError(f"could not draw a finite sample in {cfg.max_retries} attempts")


def build_dataset(p, alpha0, resolutions, n_samples, cfg=None, seed=0, split="train", dim=1):
    """Generate ``n_samples`` manufactured problems per resolution.

    Every sample owns an RNG stream keyed by ``(seed, split, slot, index)``
    with ``slot`` the position of its resolution in ``resolutions``, so the
    same seed at a different resolution samples the same continuous functions.
    """
    resolutions = list(resolutions)
    if not resolutions:
        raise ValueError("need at least one resolution")
    cfg = cfg or GeneratorConfig()
    samples = []
    for slot, n in enumerate(resolutions):
        grid = Grid(dim, n)
        for i in range(n_samples):
            samples.append(make_sample(grid, p, alpha0, cfg, sample_stream(seed, split, slot, i)))
    return Dataset(split, samples, p, alpha0, dim, seed)


# --------------------------------------------------------------------------
# on-disk format: manifest.txt + sample_XXXXX.bin

def _write_sample(path, s):
    grid = s.spec.grid
    kch = s.spec.k[None] if grid.dim == 1 else s.spec.k
    chans = np.concatenate([kch, s.spec.phi[None], s.u[None]]).astype("<f8")
    header = np.array([grid.n, grid.dim, chans.shape[0]], dtype="<i8")
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(chans.tobytes())


def _read_sample(path, p, alpha0, aniso=1.0):
    raw = Path(path).read_bytes()
    n, dim, nch = np.frombuffer(raw[:24], dtype="<i8")
    n, dim, nch = int(n), int(dim), int(nch)
    expected = (1 if dim == 1 else 4) + 2
    if nch != expected:
        raise ValueError(f"{path}: {nch} channels, expected {expected}")
    chans = np.frombuffer(raw[24:], dtype="<f8").reshape((nch,) + (n,) * dim).copy()
    k = chans[0] if dim == 1 else chans[:4]
    grid = Grid(dim, n)
    spec = ProblemSpec(grid, p, k, chans[-2], alpha0, check=False)
    return DatasetSample(spec, chans[-1], aniso)


def save_dataset(ds, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lines = [
        f"format_version = {FORMAT_VERSION}",
        f"split = {ds.split}",
        f"dim = {ds.dim}",
        f"p = {ds.p}",
        f"alpha0 = {ds.alpha0!r}",
        f"seed = {ds.seed}",
        f"count = {len(ds)}",
        "resolutions = " + ",".join(str(n) for n in ds.resolutions),
        "anisotropy = " + ",".join(repr(s.anisotropy) for s in ds.samples),
    ]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    for i, s in enumerate(ds.samples):
        _write_sample(out / f"sample_{i:05d}.bin", s)
    return out


def read_manifest(path):
    meta = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        meta[key.strip()] = val.strip()
    return meta


def load_dataset(path):
    path = Path(path)
    meta = read_manifest(path / "manifest.txt")
    if int(meta.get("format_version", -1)) != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {meta.get('format_version')!r}")
    p, alpha0 = int(meta["p"]), float(meta["alpha0"])
    count = int(meta["count"])
    aniso = [float(a) for a in meta.get("anisotropy", "").split(",") if a] or [1.0] * count
    samples = [_read_sample(path / f"sample_{i:05d}.bin", p, alpha0, aniso[i]) for i in range(count)]
    return Dataset(meta["split"], samples, p, alpha0, int(meta["dim"]), int(meta["seed"]), meta)
