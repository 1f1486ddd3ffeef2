"""Corpus-level comparison of point-set collections."""

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ConfigError
from .point_process import Region, as_pointset
from .representation import encode


@dataclass
class CorpusStats:
    sets: list
    sizes: np.ndarray

    @classmethod
    def from_sets(cls, sets):
        sets = [as_pointset(s) for s in sets]
        return cls(sets, np.array([len(s) for s in sets], dtype=int))

    def __post_init__(self):
        self.sizes = np.asarray(self.sizes, dtype=int)
        if len(self.sizes) != len(self.sets) or any(len(s) != n for s, n in zip(self.sets, self.sizes)):
            raise ConfigError("sizes must match the sets they describe")


def _stats(c) -> CorpusStats:
    return c if isinstance(c, CorpusStats) else CorpusStats.from_sets(c)


def wasserstein1_1d(u, v) -> float:
    """W1 between two empirical laws, integrating |F^-1 - G^-1| over the merged quantile breakpoints."""
    u = np.sort(np.asarray(u, dtype=float))
    v = np.sort(np.asarray(v, dtype=float))
    if len(u) == 0 or len(v) == 0:
        raise ConfigError("empty sample")
    q = np.union1d(np.arange(1, len(u)) / len(u), np.arange(1, len(v)) / len(v))
    edges = np.concatenate([[0.0], q, [1.0]])
    mid = 0.5 * (edges[:-1] + edges[1:])
    # left-continuous quantile: smallest x with F(x) >= p
    qu = u[np.minimum(np.ceil(mid * len(u)).astype(int) - 1, len(u) - 1)]
    qv = v[np.minimum(np.ceil(mid * len(v)).astype(int) - 1, len(v) - 1)]
    return float(np.sum(np.diff(edges) * np.abs(qu - qv)))


def s_wstein(gen, ref) -> float:
    """W1 distance between the set-size distributions of two corpora."""
    g, r = _stats(gen), _stats(ref)
    if len(g.sizes) == 0 or len(r.sizes) == 0:
        raise ConfigError("both corpora must be nonempty")
    return wasserstein1_1d(g.sizes, r.sizes)


def chamfer(a, b) -> float:
    """Mean of the two directed mean nearest-neighbour distances."""
    a, b = as_pointset(a), as_pointset(b)
    if len(a) == 0 or len(b) == 0:
        raise ConfigError("chamfer distance needs two nonempty sets")
    d = cdist(a, b)
    return 0.5 * (float(d.min(axis=1).mean()) + float(d.min(axis=0).mean()))


def _usable(sets, label):
    keep = [s for s in sets if len(s) > 0]
    if len(keep) < len(sets):
        warnings.warn(f"{len(sets) - len(keep)} empty set(s) in {label} corpus excluded from D-MMD",
                      RuntimeWarning, stacklevel=3)
    return keep


def set_kernel_matrix(sets, epsilon: float, region: Optional[Region] = None) -> np.ndarray:
    """Cosine-normalised L2 inner products of the sets' mixture encodings."""
    reprs = [encode(s, epsilon, region) for s in sets]
    n = len(reprs)
    centers = [r.centers for r in reprs]
    s2 = [r.sigmas ** 2 for r in reprs]
    dim = reprs[0].dim if reprs else 1
    gram = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            var = s2[i][:, None] + s2[j][None, :]
            r2 = np.sum((centers[i][:, None, :] - centers[j][None, :, :]) ** 2, axis=-1)
            val = np.sum(np.exp(-0.5 * r2 / var) / (2 * math.pi * var) ** (dim / 2))
            gram[i, j] = gram[j, i] = val / (len(centers[i]) * len(centers[j]))
    norm = np.sqrt(np.diag(gram))
    return gram / np.outer(norm, norm)


def mmd2_from_kernel(k: np.ndarray, n_x: int, biased: bool = False) -> float:
    """Squared MMD of the first ``n_x`` rows against the rest of a pooled kernel matrix."""
    kxx, kyy, kxy = k[:n_x, :n_x], k[n_x:, n_x:], k[:n_x, n_x:]
    m, n = kxx.shape[0], kyy.shape[0]
    if biased:
        return float(kxx.mean() + kyy.mean() - 2 * kxy.mean())
    if m < 2 or n < 2:
        raise ConfigError("the unbiased estimator needs at least two sets per corpus")
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2 * kxy.mean())


def d_mmd(gen, ref, bandwidth_epsilon: float, region: Optional[Region] = None,
          biased: bool = False) -> float:
    """Squared MMD between two corpora under the normalised mixture kernel.

    The unbiased estimate can be negative and is returned as is.
    """
    g = _usable(_stats(gen).sets, "generated")
    r = _usable(_stats(ref).sets, "reference")
    if not g or not r:
        raise ConfigError("both corpora need at least one nonempty set")
    k = set_kernel_matrix(g + r, bandwidth_epsilon, region)
    return mmd2_from_kernel(k, len(g), biased)


@dataclass
class PermutationTest:
    statistic: float
    null: np.ndarray
    p_value: float

    def quantile(self, q: float) -> float:
        return float(np.quantile(self.null, q))


def mmd_permutation_test(x_sets, y_sets, bandwidth_epsilon: float, n_perm: int = 500, seed=0,
                         region: Optional[Region] = None) -> PermutationTest:
    x = _usable(_stats(x_sets).sets, "first")
    y = _usable(_stats(y_sets).sets, "second")
    k = set_kernel_matrix(x + y, bandwidth_epsilon, region)
    n_x = len(x)
    stat = mmd2_from_kernel(k, n_x)
    rng = np.random.default_rng(seed)
    null = np.empty(n_perm)
    for i in range(n_perm):
        p = rng.permutation(len(k))
        null[i] = mmd2_from_kernel(k[np.ix_(p, p)], n_x)
    p_value = (1 + np.count_nonzero(null >= stat)) / (n_perm + 1)
    return PermutationTest(stat, null, float(p_value))


def metric_report(gen, ref, bandwidth_epsilon: float, region: Optional[Region] = None,
                  config: Optional[dict] = None) -> dict:
    g, r = _stats(gen), _stats(ref)
    return {"s_wstein": s_wstein(g, r), "d_mmd": d_mmd(g, r, bandwidth_epsilon, region),
            "n_gen": len(g.sets), "n_ref": len(r.sets), "config": config or {}}
