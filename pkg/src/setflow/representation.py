"""Gaussian-mixture encoding of point sets and its grid discretisation."""

import itertools
import json
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, ParseError
from .point_process import Region, as_pointset

LOG_FLOOR = math.log(1e-300)


@dataclass(frozen=True)
class DeltaRepr:
    """Equal-weight Dirac atoms at the points of a set.

    Deliberately has no pointwise evaluation; it only exists as the limit
    object the mixture converges to.
    """

    atoms: np.ndarray

    def __post_init__(self):
        atoms = as_pointset(self.atoms)
        if len(atoms) == 0:
            raise ConfigError("delta representation needs at least one atom")
        object.__setattr__(self, "atoms", atoms)


@dataclass(frozen=True)
class MixtureRepr:
    centers: np.ndarray
    sigmas: np.ndarray
    epsilon: float

    def __post_init__(self):
        c = as_pointset(self.centers)
        s = np.asarray(self.sigmas, dtype=float).reshape(-1)
        if len(c) == 0:
            raise ConfigError("mixture needs at least one component")
        if len(s) != len(c):
            raise ConfigError("need one sigma per center")
        if not np.all(s > 0):
            raise ConfigError("sigmas must be positive")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "sigmas", s)

    @property
    def n(self) -> int:
        return len(self.centers)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def to_dict(self):
        return {"kind": "mixture", "centers": self.centers.tolist(),
                "sigmas": self.sigmas.tolist(), "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["centers"], dtype=float), np.asarray(d["sigmas"]), float(d["epsilon"]))


def nearest_neighbor_distances(points) -> np.ndarray:
    x = as_pointset(points)
    d = np.sqrt(np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1))
    np.fill_diagonal(d, np.inf)
    return d.min(axis=1)


def set_diameter(points) -> float:
    x = as_pointset(points)
    if len(x) < 2:
        return 0.0
    return float(np.sqrt(np.max(np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1))))


def encode(points, epsilon: float, region: Optional[Region] = None) -> MixtureRepr:
    """Mixture with bandwidth ``epsilon * ln(1 + nearest-neighbour distance)`` per point.

    A single point has no neighbour; it falls back to the region diameter,
    so ``region`` is required when N = 1.
    """
    x = as_pointset(points)
    if len(x) == 0:
        raise ConfigError("cannot encode an empty point set")
    if not epsilon > 0:
        raise ConfigError("epsilon must be positive")
    if len(x) == 1:
        if region is None:
            raise ConfigError("a single-point set needs a region for its fallback bandwidth")
        sig = np.array([epsilon * math.log1p(region.diameter)])
    else:
        sig = epsilon * np.log1p(nearest_neighbor_distances(x))
        if np.any(sig <= 0):
            raise ConfigError("duplicate points give a zero bandwidth")
    return MixtureRepr(x.copy(), sig, float(epsilon))


def _log_components(repr: MixtureRepr, y: np.ndarray):
    """log of (1/N) G(y; x_i, s_i^2 I) for every query/component pair, plus offsets."""
    diff = repr.centers[None, :, :] - y[:, None, :]  # (M, N, D)
    s2 = repr.sigmas ** 2
    r2 = np.sum(diff ** 2, axis=-1)
    logc = -math.log(repr.n) - 0.5 * repr.dim * np.log(2 * math.pi * s2) - 0.5 * r2 / s2
    return logc, diff, s2


def _queries(repr: MixtureRepr, y):
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    y2 = y.reshape(1, -1) if single else y
    if y2.shape[-1] != repr.dim:
        raise ConfigError(f"query dim {y2.shape[-1]} does not match mixture dim {repr.dim}")
    return y2, single


def log_density(repr: MixtureRepr, y):
    y2, single = _queries(repr, y)
    out = logsumexp(_log_components(repr, y2)[0], axis=1)
    return out[0] if single else out


def eval(repr: MixtureRepr, y):  # noqa: A001 - mirrors the operation name
    """Mixture density at ``y`` (a D-vector or an (M, D) batch)."""
    y2, single = _queries(repr, y)
    logc, _, _ = _log_components(repr, y2)
    out = np.exp(logc).sum(axis=1)
    return out[0] if single else out


def grad(repr: MixtureRepr, y):
    y2, single = _queries(repr, y)
    logc, diff, s2 = _log_components(repr, y2)
    g = np.einsum("mn,mnd->md", np.exp(logc) / s2, diff)
    return g[0] if single else g


class LogGrad(NamedTuple):
    value: np.ndarray
    clamped: np.ndarray  # density fell below the 1e-300 floor


def log_grad(repr: MixtureRepr, y, return_flags: bool = False):
    """Gradient of ln f as a softmax-weighted pull toward the centers.

    Computed in log space, so it stays finite and keeps its direction even
    where f itself underflows; those queries are flagged.
    """
    y2, single = _queries(repr, y)
    logc, diff, s2 = _log_components(repr, y2)
    lse = logsumexp(logc, axis=1, keepdims=True)
    w = np.exp(logc - lse) / s2
    g = np.einsum("mn,mnd->md", w, diff)
    clamped = lse[:, 0] < LOG_FLOOR
    if single:
        g, clamped = g[0], clamped[0]
    return LogGrad(g, clamped) if return_flags else g


def gaussian_density(y, mean, var):
    """Isotropic normal density with scalar variance ``var``; ``y``/``mean`` broadcast over the last axis."""
    y = np.asarray(y, dtype=float)
    mean = np.asarray(mean, dtype=float)
    d = y.shape[-1] if y.ndim else 1
    r2 = np.sum((y - mean) ** 2, axis=-1) if y.ndim else (y - mean) ** 2
    return np.exp(-0.5 * r2 / var) / (2 * math.pi * var) ** (d / 2)


def l2_inner(a: MixtureRepr, b: MixtureRepr) -> float:
    """Exact L2 inner product via the Gaussian product identity."""
    if a.dim != b.dim:
        raise ConfigError("mixtures live in different dimensions")
    var = a.sigmas[:, None] ** 2 + b.sigmas[None, :] ** 2
    r2 = np.sum((a.centers[:, None, :] - b.centers[None, :, :]) ** 2, axis=-1)
    g = np.exp(-0.5 * r2 / var) / (2 * math.pi * var) ** (a.dim / 2)
    return float(g.sum() / (a.n * b.n))


def l2_norm_sq(a: MixtureRepr) -> float:
    return l2_inner(a, a)


# ---------------------------------------------------------------------------
# grid functions


@dataclass
class GridFunction:
    """Values at the cell centers of a regular grid over ``region``, row-major."""

    region: Region
    shape: tuple
    values: np.ndarray

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        if len(self.shape) != self.region.dim:
            raise ConfigError("grid shape rank must equal region dim")
        if any(n < 2 for n in self.shape):
            raise ConfigError("grid needs at least 2 nodes per axis")
        vals = np.asarray(self.values, dtype=float).reshape(-1)
        if vals.size != int(np.prod(self.shape)):
            raise ConfigError(f"expected {np.prod(self.shape)} values, got {vals.size}")
        if not np.all(np.isfinite(vals)):
            raise ConfigError("grid values must be finite")
        self.values = vals

    @property
    def spacing(self) -> np.ndarray:
        return self.region.widths / np.asarray(self.shape)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def array(self) -> np.ndarray:
        return self.values.reshape(self.shape)

    def axes(self):
        return grid_axes(self.region, self.shape)

    def nodes(self) -> np.ndarray:
        return grid_nodes(self.region, self.shape)

    def integral(self) -> float:
        return float(self.values.sum() * self.cell_volume)

    def with_values(self, values) -> "GridFunction":
        return GridFunction(self.region, self.shape, values)


def grid_axes(region: Region, shape):
    return [l + (np.arange(n) + 0.5) * (h - l) / n
            for l, h, n in zip(region.lower, region.upper, shape)]


def grid_nodes(region: Region, shape) -> np.ndarray:
    mesh = np.meshgrid(*grid_axes(region, shape), indexing="ij")
    return np.stack(mesh, axis=-1).reshape(-1, region.dim)


def padded_region(repr: MixtureRepr, pad_sigmas: float = 4.0) -> Region:
    pad = pad_sigmas * repr.sigmas.max()
    return Region(tuple(repr.centers.min(axis=0) - pad), tuple(repr.centers.max(axis=0) + pad))


def rasterize(repr: MixtureRepr, region: Region, shape, min_sigma: float = 0.0) -> GridFunction:
    """Pointwise mixture values at cell centers.

    The caller keeps ``region`` wide enough (4 sigma_max past the data hull)
    for the grid mass to be ~1. ``min_sigma`` widens components narrower than
    that before sampling; at about one cell it stops sub-grid bumps from
    aliasing into isolated spikes, at no cost in mass.
    """
    if region.dim != repr.dim:
        raise ConfigError("region and mixture dimensions differ")
    if min_sigma > 0:
        repr = MixtureRepr(repr.centers, np.maximum(repr.sigmas, min_sigma), repr.epsilon)
    nodes = grid_nodes(region, shape)
    vals = np.empty(len(nodes))
    step = 65536
    for i in range(0, len(nodes), step):
        vals[i:i + step] = eval(repr, nodes[i:i + step])
    return GridFunction(region, shape, vals)


class _Multilinear:
    """Multilinear interpolation on cell-center nodes, clamped inside the region."""

    def __init__(self, region: Region, shape):
        self.region = region
        self.shape = np.asarray(shape)
        self.h = region.widths / self.shape
        self.corners = list(itertools.product((0, 1), repeat=region.dim))

    def locate(self, y):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if y.shape[-1] != self.region.dim:
            raise ConfigError("query dim does not match grid dim")
        tol = 1e-12 * self.region.widths
        if np.any(y < self.region.lo - tol) or np.any(y > self.region.hi + tol):
            raise ConfigError("interpolation query outside the grid region (no extrapolation)")
        u = (y - self.region.lo) / self.h - 0.5
        u = np.clip(u, 0.0, self.shape - 1.0)
        i0 = np.minimum(np.floor(u).astype(int), self.shape - 2)
        return i0, u - i0

    def __call__(self, arr: np.ndarray, y) -> np.ndarray:
        i0, f = self.locate(y)
        out = np.zeros(i0.shape[:1] + arr.shape[self.region.dim:])
        for corner in self.corners:
            c = np.asarray(corner)
            w = np.prod(np.where(c == 1, f, 1.0 - f), axis=1)
            idx = tuple((i0 + c).T)
            out += (w.reshape(-1, *([1] * (arr.ndim - self.region.dim)))) * arr[idx]
        return out


def grid_gradient(gf: GridFunction) -> np.ndarray:
    """Central-difference gradient field, shape ``(*grid, D)``."""
    parts = np.gradient(gf.array, *gf.spacing, edge_order=2)
    if gf.region.dim == 1:
        parts = [parts]
    return np.stack(parts, axis=-1)


class GridInterpolant:
    """Continuous value/gradient interpolant of a GridFunction.

    The gradient field is precomputed once; both are multilinear between nodes.
    """

    def __init__(self, gf: GridFunction):
        self.gf = gf
        self._interp = _Multilinear(gf.region, gf.shape)
        self._vals = gf.array
        self._grads = grid_gradient(gf)

    def value(self, y):
        y = np.asarray(y, dtype=float)
        out = self._interp(self._vals, y)
        return out[0] if y.ndim == 1 else out

    def gradient(self, y):
        y = np.asarray(y, dtype=float)
        out = self._interp(self._grads, y)
        return out[0] if y.ndim == 1 else out


def interp_eval(gf: GridFunction, y):
    return GridInterpolant(gf).value(y)


def interp_grad(gf: GridFunction, y):
    return GridInterpolant(gf).gradient(y)


def save_grid(path, gf: GridFunction, meta: Optional[dict] = None) -> None:
    """``.npz`` is binary; anything else is text (JSON header line, then one value per line)."""
    header = {"format": "setflow-grid", "version": 1, "region": gf.region.to_dict(),
              "shape": list(gf.shape)}
    if meta:
        header["meta"] = meta
    path = str(path)
    if path.endswith(".npz"):
        np.savez(path, header=json.dumps(header, sort_keys=True), values=gf.values)
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            fh.write("\n".join(repr(float(v)) for v in gf.values) + "\n")


def load_grid(path, return_meta: bool = False):
    path = str(path)
    try:
        if path.endswith(".npz"):
            with np.load(path, allow_pickle=False) as z:
                header = json.loads(str(z["header"]))
                values = np.array(z["values"], dtype=float)
        else:
            with open(path, "r", encoding="utf-8") as fh:
                header = json.loads(fh.readline())
                values = np.loadtxt(fh, dtype=float, ndmin=1)
    except (ValueError, KeyError, OSError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise ParseError(f"unreadable grid file {path}: {exc}") from None
    if header.get("format") != "setflow-grid":
        raise ParseError(f"{path} is not a setflow grid file")
    try:
        gf = GridFunction(Region.from_dict(header["region"]), tuple(header["shape"]), values)
    except ConfigError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return (gf, header.get("meta", {})) if return_meta else gf


# ---------------------------------------------------------------------------
# convergence check of the mixture toward its delta limit


@dataclass
class W2Check:
    rows: list  # (epsilon, bound, empirical_w2)
    slope: float
    within_bound: bool
    slope_ok: bool

    @property
    def ok(self) -> bool:
        return self.within_bound and self.slope_ok


def component_transport_cost(repr: MixtureRepr, n_samples: int = 2000, seed=0) -> float:
    """Monte-Carlo cost of moving each Gaussian's mass onto its own center.

    Returns the square root of the mean squared displacement, an upper bound
    on W2 between the mixture and its delta representation.
    """
    rng = np.random.default_rng(seed)
    comp = rng.integers(repr.n, size=n_samples)
    z = rng.standard_normal((n_samples, repr.dim))
    disp = z * repr.sigmas[comp, None]
    return float(math.sqrt(np.mean(np.sum(disp ** 2, axis=1))))


def w2_bound_check(points, epsilons: Sequence[float], n_samples: int = 2000, seed=0,
                   tolerance: float = 0.05, slope_range=(0.9, 1.1)) -> W2Check:
    x = as_pointset(points)
    if len(x) < 2:
        raise ConfigError("need at least two points")
    rho = set_diameter(x)
    dim = x.shape[1]
    rows = []
    for eps in epsilons:
        # same seed for every epsilon: common random numbers isolate the epsilon effect
        emp = component_transport_cost(encode(x, eps), n_samples, seed)
        rows.append((float(eps), eps * math.sqrt(dim) * math.log1p(rho), emp))
    e = np.array([r[0] for r in rows])
    w = np.array([r[2] for r in rows])
    slope = float(np.polyfit(np.log(e), np.log(w), 1)[0]) if len(rows) > 1 else float("nan")
    within = all(r[2] <= r[1] * (1 + tolerance) for r in rows)
    return W2Check(rows, slope, within, slope_range[0] <= slope <= slope_range[1])
