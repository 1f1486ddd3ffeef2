"""Synthetic point-process corpora: inhomogeneous Poisson and exponential Hawkes.

Point sets are plain ``(N, D)`` float arrays; an empty set has shape ``(0, D)``.
"""

import json
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigError, ParseError

POISSON = "poisson_sqexp_mixture"
HAWKES = "hawkes_exp"

CORPUS_FORMAT = "setflow-corpus"
CORPUS_VERSION = 1


@dataclass(frozen=True)
class Region:
    """Axis-aligned box ``[lower, upper]``."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) != len(hi) or len(lo) == 0:
            raise ConfigError("region bounds must be non-empty and of equal length")
        if not all(np.isfinite(lo + hi)):
            raise ConfigError("region bounds must be finite")
        if any(h <= l for l, h in zip(lo, hi)):
            raise ConfigError(f"region needs upper > lower on every axis, got {lo} {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.upper)

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def volume(self) -> float:
        return float(np.prod(self.widths))

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.widths))

    def contains(self, y) -> np.ndarray:
        y = np.atleast_2d(y)
        return np.all((y >= self.lo) & (y <= self.hi), axis=-1)

    def to_dict(self):
        return {"lower": list(self.lower), "upper": list(self.upper)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["lower"]), tuple(d["upper"]))


def as_pointset(points, dim: Optional[int] = None) -> np.ndarray:
    """Coerce to a float ``(N, D)`` array; 1-D input is read as N scalars."""
    arr = np.asarray(points, dtype=float)
    if arr.size == 0:
        if dim is None:
            dim = arr.shape[-1] if arr.ndim == 2 else 1
        return np.zeros((0, dim))
    if arr.ndim == 1:
        arr = arr[:, None] if dim in (None, 1) else arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ConfigError(f"point set must be 2-D (N, D), got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ConfigError(f"expected dim {dim}, got {arr.shape[1]}")
    return arr


@dataclass(frozen=True)
class IntensitySpec:
    variant: str
    mu: float
    weights: tuple = ()
    centers: tuple = ()
    alpha: float = 0.0
    beta: float = 1.0

    def __post_init__(self):
        if self.variant == POISSON:
            w = np.asarray(self.weights, dtype=float)
            b = np.atleast_2d(np.asarray(self.centers, dtype=float))
            if w.ndim != 1 or len(w) == 0 or len(w) != len(b):
                raise ConfigError("poisson spec needs one weight per center")
            if np.any(w < 0) or not math.isclose(w.sum(), 1.0, abs_tol=1e-9):
                raise ConfigError(f"poisson weights must be >= 0 and sum to 1, got {w.sum()}")
            if self.mu < 0:
                raise ConfigError("mu must be >= 0")
            object.__setattr__(self, "weights", tuple(w.tolist()))
            object.__setattr__(self, "centers", tuple(map(tuple, b.tolist())))
        elif self.variant == HAWKES:
            if not (self.mu > 0 and self.alpha >= 0 and self.beta > 0):
                raise ConfigError("hawkes spec needs mu > 0, alpha >= 0, beta > 0")
            if self.alpha >= self.beta:
                raise ConfigError(
                    f"supercritical hawkes spec rejected: alpha={self.alpha} >= beta={self.beta}"
                )
        else:
            raise ConfigError(f"unknown intensity variant {self.variant!r}")

    @classmethod
    def poisson(cls, mu, weights, centers):
        return cls(POISSON, float(mu), tuple(weights), tuple(map(tuple, np.atleast_2d(centers))))

    @classmethod
    def hawkes(cls, mu, alpha, beta):
        return cls(HAWKES, float(mu), alpha=float(alpha), beta=float(beta))

    @property
    def dim(self) -> int:
        return len(self.centers[0]) if self.variant == POISSON else 1

    def to_dict(self):
        if self.variant == POISSON:
            return {"variant": self.variant, "mu": self.mu,
                    "weights": list(self.weights), "centers": [list(c) for c in self.centers]}
        return {"variant": self.variant, "mu": self.mu, "alpha": self.alpha, "beta": self.beta}

    @classmethod
    def from_dict(cls, d):
        if d["variant"] == POISSON:
            return cls.poisson(d["mu"], d["weights"], d["centers"])
        return cls.hawkes(d["mu"], d["alpha"], d["beta"])


def default_poisson_spec() -> IntensitySpec:
    """Three-bump squared-exponential intensity used for the synthetic Poisson corpus."""
    return IntensitySpec.poisson(
        1.0, (0.3, 0.3, 0.4), ((2.51, 3.12), (-2.01, -1.12), (2.51, -2.31))
    )


def default_hawkes_spec() -> IntensitySpec:
    return IntensitySpec.hawkes(0.5, 0.5, 3.0)


def default_poisson_region() -> Region:
    # every bump center sits >= 2.3 units inside the box
    return Region((-5.0, -5.5), (5.5, 6.0))


def poisson_intensity(x, spec: IntensitySpec):
    """mu * sum_i w_i exp(-|x - b_i|^2), vectorised over leading axes of ``x``."""
    if spec.variant != POISSON:
        raise ConfigError(f"poisson_intensity needs a {POISSON} spec, got {spec.variant}")
    x = np.asarray(x, dtype=float)
    b = np.asarray(spec.centers)
    d2 = np.sum((x[..., None, :] - b) ** 2, axis=-1)
    return spec.mu * np.exp(-d2) @ np.asarray(spec.weights)


def _axis_nodes(region: Region, n: int):
    return [np.linspace(l, h, n) for l, h in zip(region.lower, region.upper)]


def intensity_upper_bound(spec: IntensitySpec, region: Region, n_scan: int = 41,
                          safety: float = 1.1) -> float:
    """Coarse grid scan of the intensity (plus bump centers inside the box) times a safety factor."""
    mesh = np.stack(np.meshgrid(*_axis_nodes(region, n_scan), indexing="ij"), axis=-1)
    probes = mesh.reshape(-1, region.dim)
    b = np.asarray(spec.centers)
    inside = b[region.contains(b)]
    if len(inside):
        probes = np.vstack([probes, inside])
    lam = poisson_intensity(probes, spec)
    if not np.all(np.isfinite(lam)):
        raise ConfigError("intensity is not finite on the region")
    return safety * float(lam.max())


def sample_poisson(spec: IntensitySpec, region: Region, rng_seed,
                   lam_max: Optional[float] = None) -> np.ndarray:
    """Inhomogeneous Poisson sample on ``region`` by thinning a homogeneous proposal.

    ``lam_max`` may be passed in to skip the bound scan when drawing many sets.
    """
    if spec.variant != POISSON:
        raise ConfigError(f"sample_poisson needs a {POISSON} spec")
    if spec.dim != region.dim:
        raise ConfigError("spec and region dimensions differ")
    rng = np.random.default_rng(rng_seed)
    if lam_max is None:
        lam_max = intensity_upper_bound(spec, region)
    if lam_max == 0.0:
        return np.zeros((0, region.dim))
    n = rng.poisson(lam_max * region.volume)
    cand = region.lo + rng.random((n, region.dim)) * region.widths
    lam = poisson_intensity(cand, spec)
    if np.any(lam > lam_max):
        raise ConfigError("intensity exceeded its scanned upper bound; refine the scan")
    keep = rng.random(n) * lam_max < lam
    return cand[keep]


def sample_hawkes(spec: IntensitySpec, horizon: float, rng_seed) -> np.ndarray:
    """Event times on ``[0, horizon]`` by Ogata thinning; returns shape ``(N, 1)``."""
    if spec.variant != HAWKES:
        raise ConfigError(f"sample_hawkes needs a {HAWKES} spec")
    if not horizon > 0:
        raise ConfigError("horizon must be positive")
    rng = np.random.default_rng(rng_seed)
    mu, alpha, beta = spec.mu, spec.alpha, spec.beta
    t = 0.0
    excite = 0.0  # sum_s alpha exp(-beta (t - s)) at the current t
    events = []
    while True:
        # intensity only decays between events, so its value now bounds the future
        lam_bar = mu + excite
        w = rng.exponential(1.0 / lam_bar)
        t += w
        if t > horizon:
            break
        excite *= math.exp(-beta * w)
        if rng.random() * lam_bar <= mu + excite:
            events.append(t)
            excite += alpha
    return np.asarray(events, dtype=float).reshape(-1, 1)


def spawn_seeds(seed, count: int) -> List[np.random.SeedSequence]:
    """Independent per-replicate seeds derived from one root seed."""
    return np.random.SeedSequence(seed).spawn(count)


def sample_corpus(spec: IntensitySpec, count: int, seed, region: Optional[Region] = None,
                  horizon: float = 100.0) -> List[np.ndarray]:
    seeds = spawn_seeds(seed, count)
    if spec.variant == POISSON:
        region = region or default_poisson_region()
        lam_max = intensity_upper_bound(spec, region)
        return [sample_poisson(spec, region, s, lam_max) for s in seeds]
    return [sample_hawkes(spec, horizon, s) for s in seeds]


def write_corpus(path, sets: Sequence, meta: Optional[dict] = None) -> None:
    """JSON-lines corpus: one header line, then ``{"dim": D, "points": [...]}`` per set."""
    sets = [as_pointset(s) for s in sets]
    dims = {s.shape[1] for s in sets}
    if len(dims) > 1:
        raise ConfigError(f"all sets in a corpus must share dim, got {sorted(dims)}")
    header = {"format": CORPUS_FORMAT, "version": CORPUS_VERSION,
              "dim": dims.pop() if dims else None, "count": len(sets)}
    if meta:
        header["meta"] = meta
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in sets:
            fh.write(json.dumps({"dim": s.shape[1], "points": s.tolist()}) + "\n")


def read_corpus(path, return_header: bool = False):
    sets = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("missing header record", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"header is not JSON ({exc.msg})", line=1) from None
    if not isinstance(header, dict) or header.get("format") != CORPUS_FORMAT:
        raise ParseError("not a setflow corpus header", line=1)
    dim = header.get("dim")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            d = int(rec["dim"])
            pts = rec["points"]
            arr = np.zeros((0, d)) if len(pts) == 0 else np.asarray(pts, dtype=float)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed record ({exc})", line=lineno) from None
        if arr.ndim != 2 or arr.shape[1] != d or (dim is not None and d != dim):
            raise ParseError(f"record dim mismatch (header dim {dim}, record dim {d})", line=lineno)
        sets.append(arr)
    if header.get("count") is not None and header["count"] != len(sets):
        raise ParseError(f"header announces {header['count']} sets, found {len(sets)}")
    return (sets, header) if return_header else sets
