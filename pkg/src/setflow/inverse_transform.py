"""Decode a density-like function back into a point set.

Particles start uniform on the region, are warmed up by unadjusted Langevin
dynamics on ln f, climb f by plain gradient ascent, and are finally merged
by single-pass clustering.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConfigError
from .point_process import Region, as_pointset
from .representation import (
    LOG_FLOOR,
    GridFunction,
    GridInterpolant,
    MixtureRepr,
    eval as mixture_eval,
    grad as mixture_grad,
    log_grad as mixture_log_grad,
)

INIT, WARMED, CONVERGED = "init", "warmed", "converged"


class MixtureTarget:
    """Exact mixture density restricted to a search region."""

    def __init__(self, repr: MixtureRepr, region: Region):
        if region.dim != repr.dim:
            raise ConfigError("region and mixture dimensions differ")
        self.repr = repr
        self.region = region

    def value(self, y):
        return mixture_eval(self.repr, y)

    def gradient(self, y):
        return mixture_grad(self.repr, y)

    def log_gradient(self, y):
        lg = mixture_log_grad(self.repr, y, return_flags=True)
        return lg.value, lg.clamped

    @property
    def sigma_range(self):
        return float(self.repr.sigmas.min()), float(self.repr.sigmas.max())

    def peak_value(self) -> float:
        return float(np.max(self.value(self.repr.centers)))


class GridTarget:
    """Interpolated grid function; negative values are clamped to the floor before the log."""

    def __init__(self, gf: GridFunction):
        self.gf = gf
        self.region = gf.region
        self._interp = GridInterpolant(gf)

    def value(self, y):
        return self._interp.value(y)

    def gradient(self, y):
        return self._interp.gradient(y)

    def log_gradient(self, y):
        f = self._interp.value(y)
        g = self._interp.gradient(y)
        floor = math.exp(LOG_FLOOR)
        clamped = f < floor
        return g / np.maximum(f, floor)[..., None], clamped

    def peak_value(self) -> float:
        return float(self.gf.values.max())


def as_target(obj, region: Optional[Region] = None):
    if isinstance(obj, (MixtureTarget, GridTarget)):
        return obj
    if isinstance(obj, GridFunction):
        return GridTarget(obj)
    if isinstance(obj, MixtureRepr):
        if region is None:
            raise ConfigError("a mixture target needs a search region")
        return MixtureTarget(obj, region)
    raise ConfigError(f"cannot build a decode target from {type(obj).__name__}")


@dataclass
class ParticleSwarm:
    particles: np.ndarray
    region: Region
    stage: str = INIT
    step_count: int = 0
    diagnostics: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return len(self.particles)


def reflect(y: np.ndarray, region: Region) -> np.ndarray:
    """Fold coordinates back into the box as if bounced off its walls (any distance)."""
    lo, w = region.lo, region.widths
    u = np.mod(y - lo, 2 * w)
    return lo + np.where(u > w, 2 * w - u, u)


def init_particles(region: Region, m: int, seed) -> ParticleSwarm:
    if m < 1:
        raise ConfigError("need at least one particle")
    rng = np.random.default_rng(seed)
    pts = region.lo + rng.random((m, region.dim)) * region.widths
    return ParticleSwarm(pts, region, INIT, 0, {})


def langevin_warmup(swarm: ParticleSwarm, target, beta: float, n_steps: int, seed,
                    on_step=None) -> ParticleSwarm:
    """``y <- y + beta * grad ln f(y) + sqrt(2 beta) z``, reflected at the walls.

    ``on_step(s, particles)`` is called after every step when given.
    """
    if swarm.stage != INIT:
        raise ConfigError(f"warm-up expects a fresh swarm, got stage {swarm.stage!r}")
    if beta < 0 or n_steps < 0:
        raise ConfigError("beta and step count must be nonnegative")
    target = as_target(target)
    region = swarm.region
    rng = np.random.default_rng(seed)
    y = swarm.particles.copy()
    resets = clamped = 0
    if beta > 0:
        noise_scale = math.sqrt(2.0 * beta)
        for s in range(n_steps):
            drift, low = target.log_gradient(y)
            clamped += int(np.count_nonzero(low))
            y = y + beta * drift + noise_scale * rng.standard_normal(y.shape)
            bad = ~np.all(np.isfinite(y), axis=1)
            if bad.any():
                resets += int(bad.sum())
                y[bad] = region.lo + rng.random((int(bad.sum()), region.dim)) * region.widths
            y = reflect(y, region)
            if on_step is not None:
                on_step(s + 1, y)
    diag = dict(swarm.diagnostics, langevin_resets=resets, langevin_clamped=clamped)
    return ParticleSwarm(y, region, WARMED, swarm.step_count + n_steps, diag)


def gradient_search(swarm: ParticleSwarm, target, alpha: float, n_steps: int) -> ParticleSwarm:
    """``y <- y + alpha * grad f(y)``; non-finite particles are dropped."""
    if swarm.stage == CONVERGED:
        raise ConfigError("swarm already converged")
    target = as_target(target)
    region = swarm.region
    y = swarm.particles.copy()
    dropped = 0
    for _ in range(n_steps):
        if len(y) == 0:
            break
        y = y + alpha * target.gradient(y)
        ok = np.all(np.isfinite(y), axis=1)
        if not ok.all():
            dropped += int((~ok).sum())
            y = y[ok]
        y = reflect(y, region)
    gnorm = np.linalg.norm(target.gradient(y), axis=1) if len(y) else np.zeros(0)
    diag = dict(swarm.diagnostics, search_dropped=dropped, final_grad_norms=gnorm)
    return ParticleSwarm(y, region, CONVERGED, swarm.step_count + n_steps, diag)


@dataclass
class Groups:
    centroids: np.ndarray
    sizes: np.ndarray
    labels: np.ndarray


def single_pass_cluster(points, merge_radius: float) -> Groups:
    """Visit points in order; join the nearest group whose running centroid is
    within ``merge_radius``, otherwise open a new group."""
    if not merge_radius > 0:
        raise ConfigError("merge_radius must be positive")
    pts = as_pointset(points)
    n, d = pts.shape
    sums = np.zeros((max(n, 1), d))
    counts = np.zeros(max(n, 1))
    labels = np.empty(n, dtype=int)
    g = 0
    r2 = merge_radius ** 2
    for i in range(n):
        p = pts[i]
        if g:
            cent = sums[:g] / counts[:g, None]
            dist2 = np.sum((cent - p) ** 2, axis=1)
            j = int(np.argmin(dist2))
            if dist2[j] <= r2:
                sums[j] += p
                counts[j] += 1
                labels[i] = j
                continue
        sums[g] = p
        counts[g] = 1
        labels[i] = g
        g += 1
    return Groups(sums[:g] / counts[:g, None], counts[:g].astype(int), labels)


def deduplicate(swarm, merge_radius: float, min_group: int, return_groups: bool = False):
    """Cluster, drop groups smaller than ``min_group``, return surviving centroids."""
    pts = swarm.particles if isinstance(swarm, ParticleSwarm) else as_pointset(swarm)
    if min_group < 1:
        raise ConfigError("min_group must be >= 1")
    groups = single_pass_cluster(pts, merge_radius)
    keep = groups.sizes >= min_group
    out = groups.centroids[keep] if len(groups.sizes) else np.zeros((0, pts.shape[1]))
    return (out, groups) if return_groups else out


@dataclass
class DecodeConfig:
    m: int = 2048
    s_lgvin: int = 300
    s_grad: int = 200
    alpha: float = 1e-4
    beta: float = 1e-6
    merge_radius: float = 1e-2
    min_group: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.m < 1 or self.s_lgvin < 0 or self.s_grad < 0 or self.min_group < 1:
            raise ConfigError("decode needs m >= 1, step counts >= 0, min_group >= 1")
        if self.alpha < 0 or self.beta < 0 or not self.merge_radius > 0:
            raise ConfigError("decode needs alpha, beta >= 0 and merge_radius > 0")

    @classmethod
    def from_scales(cls, sigma_min: float, sigma_max: float, peak_value: float, n_expected: float,
                    m: int = 2048, s_lgvin: int = 300, s_grad: int = 200, seed: int = 0,
                    **overrides) -> "DecodeConfig":
        """Scale-aware defaults from the smallest/largest bandwidth and the peak height.

        The ascent step is divided by the peak height so that the tallest
        peak contracts by half per step regardless of the function's units.
        """
        cfg = cls(m=m, s_lgvin=s_lgvin, s_grad=s_grad,
                  alpha=0.5 * sigma_min ** 2 / peak_value,
                  beta=(0.5 * sigma_min) ** 2,
                  merge_radius=4.0 * sigma_max,
                  min_group=max(3, int(m / (50.0 * max(n_expected, 1.0)))),
                  seed=seed)
        return replace(cfg, **overrides)

    @classmethod
    def for_mixture(cls, repr: MixtureRepr, region: Optional[Region] = None, **kw) -> "DecodeConfig":
        """Defaults for an exact mixture.

        Far from the data the log-density is ruled by the widest component,
        which pulls particles in at a fraction (sigma_min / sigma_max)^2 / 4 of
        their distance per step; the warm-up is lengthened until that pull
        has crossed the region.
        """
        s_min, s_max = float(repr.sigmas.min()), float(repr.sigmas.max())
        peak = float(np.max(mixture_eval(repr, repr.centers)))
        if "s_lgvin" not in kw:
            span = region.diameter if region is not None else max(1.0, 10 * s_max)
            need = 10.0 * (s_max / s_min) ** 2 * math.log(max(span / s_max, math.e))
            kw["s_lgvin"] = max(300, int(math.ceil(need)))
        return cls.from_scales(s_min, s_max, peak, repr.n, **kw)

    @classmethod
    def for_grid(cls, gf: GridFunction, sigma_ref: float, n_expected: float, m: int = 2048,
                 s_lgvin: int = 300, s_grad: int = 1000, seed: int = 0, **overrides) -> "DecodeConfig":
        """Defaults for a sampled function whose bumps have typical width ``sigma_ref``.

        The ascent step is a full Newton step on a peak of that width and of
        the function's maximum height; groups merge within one grid cell.
        Grid bumps are rarely narrower than a cell, so no finer radius helps.
        """
        peak = float(gf.values.max())
        if not peak > 0:
            raise ConfigError("sampled function has no positive values to decode")
        cfg = cls(m=m, s_lgvin=s_lgvin, s_grad=s_grad,
                  alpha=sigma_ref ** 2 / peak,
                  beta=(0.5 * sigma_ref) ** 2,
                  merge_radius=float(gf.spacing.max()),
                  min_group=max(3, int(m / (50.0 * max(n_expected, 1.0)))),
                  seed=seed)
        return replace(cfg, **overrides)


def decode(target, config: DecodeConfig, region: Optional[Region] = None, warmup: bool = True,
           record_every: int = 0):
    """Particles -> warm-up -> ascent -> de-duplication.

    Returns ``(points, diagnostics)``. With ``warmup=False`` the Langevin
    stage is skipped and its budget is *not* transferred; pass a larger
    ``s_grad`` for an equal-budget comparison.
    """
    target = as_target(target, region)
    region = target.region
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    swarm = init_particles(region, config.m, seeds[0])
    trajectory = [(0, swarm.particles.copy())] if record_every else None

    def snapshot(s, y):
        if s % record_every == 0:
            trajectory.append((s, y.copy()))

    if warmup and config.s_lgvin:
        swarm = langevin_warmup(swarm, target, config.beta, config.s_lgvin, seeds[1],
                                on_step=snapshot if record_every else None)
    else:
        swarm = replace(swarm, stage=WARMED)
    swarm = gradient_search(swarm, target, config.alpha, config.s_grad)
    if record_every:
        trajectory.append((swarm.step_count, swarm.particles.copy()))
    # densest particles first, so each group is seeded at a peak rather than in its tail
    if len(swarm.particles):
        order = np.argsort(-target.value(swarm.particles), kind="stable")
        swarm = replace(swarm, particles=swarm.particles[order])
    points, groups = deduplicate(swarm, config.merge_radius, config.min_group, return_groups=True)
    diag = dict(swarm.diagnostics)
    diag.update(group_sizes=groups.sizes, n_groups=len(groups.sizes), n_output=len(points),
                empty_output=len(points) == 0, warmup=bool(warmup), steps=swarm.step_count)
    if record_every:
        diag["trajectory"] = trajectory
    return points, diag


def add_noisy_peak(gf: GridFunction, location, width: float, relative_mass: float = 0.01) -> GridFunction:
    """Add an isotropic Gaussian bump holding ``relative_mass`` of the function's grid mass."""
    nodes = gf.nodes()
    loc = np.asarray(location, dtype=float)
    d = gf.region.dim
    bump = np.exp(-0.5 * np.sum((nodes - loc) ** 2, axis=1) / width ** 2) / (2 * math.pi * width ** 2) ** (d / 2)
    return gf.with_values(gf.values + relative_mass * gf.integral() * bump)
