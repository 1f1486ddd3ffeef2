"""Corpus-level glue: point sets to grid functions and back.

The CLI and the end-to-end check both go through these functions, so each
command's output is exactly a library call's output.
"""

from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericError
from .inverse_transform import DecodeConfig, GridTarget, decode
from .point_process import Region, as_pointset
from .representation import GridFunction, encode, rasterize


def cell_size(region: Region, shape) -> float:
    return float(np.max(region.widths / np.asarray(shape)))


def encode_to_grid(points, epsilon: float, region: Region, shape,
                   min_sigma: Optional[float] = None) -> GridFunction:
    """Rasterised mixture of one set; the empty set maps to the zero function.

    ``min_sigma`` defaults to one grid cell.
    """
    shape = tuple(int(n) for n in shape)
    x = as_pointset(points, region.dim)
    if len(x) == 0:
        return GridFunction(region, shape, np.zeros(int(np.prod(shape))))
    floor = cell_size(region, shape) if min_sigma is None else min_sigma
    return rasterize(encode(x, epsilon, region), region, shape, min_sigma=floor)


def encode_corpus(sets, epsilon: float, region: Region, shape,
                  min_sigma: Optional[float] = None) -> List[GridFunction]:
    return [encode_to_grid(s, epsilon, region, shape, min_sigma) for s in sets]


@dataclass(frozen=True)
class CorpusScales:
    """Bandwidth and cardinality summary of a training corpus, kept for decoding."""

    sigma_ref: float
    sigma_min: float
    sigma_max: float
    n_expected: float

    @classmethod
    def from_sets(cls, sets, epsilon: float, region: Region, shape,
                  min_sigma: Optional[float] = None) -> "CorpusScales":
        floor = cell_size(region, shape) if min_sigma is None else min_sigma
        sig = [np.maximum(encode(s, epsilon, region).sigmas, floor)
               for s in map(as_pointset, sets) if len(s)]
        if not sig:
            raise ConfigError("corpus has no nonempty sets")
        sig = np.concatenate(sig)
        return cls(float(np.median(sig)), float(sig.min()), float(sig.max()),
                   float(np.mean([len(as_pointset(s)) for s in sets])))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(d[k]) for k in ("sigma_ref", "sigma_min", "sigma_max", "n_expected")})


def decode_grid(gf: GridFunction, scales: CorpusScales, seed=0, record_every: int = 0, **overrides):
    """Decode one sampled function. An all-nonpositive function decodes to the empty set."""
    if not np.all(np.isfinite(gf.values)):
        raise NumericError("sampled function has non-finite values")
    if not gf.values.max() > 0:
        return np.zeros((0, gf.region.dim)), {"n_output": 0, "empty_output": True, "config": None}
    cfg = DecodeConfig.for_grid(gf, scales.sigma_ref, scales.n_expected, seed=seed, **overrides)
    pts, diag = decode(GridTarget(gf), cfg, record_every=record_every)
    diag["config"] = asdict(cfg)
    return pts, diag


def decode_corpus(functions: Sequence[GridFunction], scales: CorpusScales, seed=0, **overrides):
    """Decode each function with its own child seed; returns ``(sets, diagnostics)``."""
    seeds = np.random.SeedSequence(seed).generate_state(len(functions))
    sets, diags = [], []
    for gf, s in zip(functions, seeds):
        pts, d = decode_grid(gf, scales, seed=int(s), **overrides)
        sets.append(pts)
        diags.append(d)
    return sets, diags
