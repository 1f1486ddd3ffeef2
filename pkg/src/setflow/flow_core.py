"""Flow matching over grid-discretised functions.

Functions are arrays of shape ``(B, *grid)``; a :class:`GridFunction` is
accepted wherever a single function is expected.
"""

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ParseError
from .point_process import Region
from .representation import GridFunction, grid_axes

DEFAULT_ZETA = 1e-3


@dataclass(frozen=True)
class NoiseMeasureSpec:
    """Zero-mean stationary Gaussian field, covariance ``amplitude^2 exp(-d^2 / 2 l^2) + nugget``.

    ``length_scale`` is in region coordinate units.
    """

    length_scale: float = 0.5
    amplitude: float = 1.0
    nugget: float = 1e-6

    def __post_init__(self):
        if not (self.length_scale > 0 and self.amplitude > 0 and self.nugget >= 0):
            raise ConfigError("noise spec needs length_scale > 0, amplitude > 0, nugget >= 0")


class NoiseSampler:
    """Circulant-embedding sampler on a fixed grid.

    Falls back to a separable eigendecomposition (negative eigenvalues clipped)
    when no embedding up to 8x the grid is nonnegative definite.
    """

    def __init__(self, spec: NoiseMeasureSpec, region: Region, shape, max_pad: int = 8,
                 neg_tol: float = 1e-8):
        self.spec = spec
        self.shape = tuple(int(n) for n in shape)
        self.spacing = region.widths / np.asarray(self.shape)
        self.method = None
        for pad in (2, 4, max_pad):
            m = tuple(pad * n for n in self.shape)
            lam = self._embedding_eigs(m)
            if lam.min() >= -neg_tol * lam.max():
                self.method = "circulant"
                self.embed_shape = m
                self.sqrt_eigs = np.sqrt(np.clip(lam, 0.0, None) / np.prod(m))
                break
        if self.method is None:
            self.method = "separable"
            self.factors = []
            for n, h in zip(self.shape, self.spacing):
                x = np.arange(n) * h
                c = np.exp(-0.5 * (x[:, None] - x[None, :]) ** 2 / spec.length_scale ** 2)
                w, v = np.linalg.eigh(c)
                if not np.all(np.isfinite(w)):
                    raise NumericError("covariance factorisation produced non-finite values")
                self.factors.append(v * np.sqrt(np.clip(w, 0.0, None)))

    def _embedding_eigs(self, m):
        lags = []
        for mk, h in zip(m, self.spacing):
            j = np.arange(mk)
            lags.append(np.minimum(j, mk - j) * h)
        mesh = np.meshgrid(*lags, indexing="ij")
        r2 = sum(g ** 2 for g in mesh)
        c = np.exp(-0.5 * r2 / self.spec.length_scale ** 2)
        return np.real(np.fft.fftn(c))

    def sample(self, n: int, rng) -> np.ndarray:
        amp = self.spec.amplitude
        out = np.empty((n,) + self.shape)
        if self.method == "circulant":
            crop = (slice(None),) + tuple(slice(0, k) for k in self.shape)
            done = 0
            while done < n:
                xi = rng.standard_normal(self.embed_shape) + 1j * rng.standard_normal(self.embed_shape)
                y = np.fft.fftn(self.sqrt_eigs * xi)
                pair = np.stack([y.real, y.imag])[crop]
                take = min(2, n - done)
                out[done:done + take] = pair[:take]
                done += take
        else:
            for k in range(n):
                z = rng.standard_normal(self.shape)
                for ax, f in enumerate(self.factors):
                    z = np.moveaxis(np.tensordot(f, z, axes=([1], [ax])), 0, ax)
                out[k] = z
        out *= amp
        if self.spec.nugget > 0:
            out += math.sqrt(self.spec.nugget) * rng.standard_normal(out.shape)
        if not np.all(np.isfinite(out)):
            raise NumericError("noise sample is not finite")
        return out


@lru_cache(maxsize=16)
def _cached_sampler(spec, region, shape):
    return NoiseSampler(spec, region, shape)


def noise_sampler(spec: NoiseMeasureSpec, region: Region, shape) -> NoiseSampler:
    return _cached_sampler(spec, region, tuple(int(n) for n in shape))


def sample_noise(spec: NoiseMeasureSpec, region: Region, shape, seed) -> GridFunction:
    rng = np.random.default_rng(seed)
    vals = noise_sampler(spec, region, shape).sample(1, rng)[0]
    return GridFunction(region, shape, vals)


# ---------------------------------------------------------------------------
# conditional path and its velocity


def _values(h):
    return h.array if isinstance(h, GridFunction) else np.asarray(h, dtype=float)


def _like(template, arr):
    return template.with_values(arr) if isinstance(template, GridFunction) else arr


def _check_t(t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > 1):
        raise ConfigError("t must lie in [0, 1]")
    return t


def _expand_t(t, arr):
    t = np.asarray(t, dtype=float)
    return t.reshape(t.shape + (1,) * (arr.ndim - t.ndim)) if t.ndim else t


def cond_flow(h0, h1, t, zeta: float = DEFAULT_ZETA):
    """``(1 - (1 - zeta) t) h0 + t h1``; ``t`` may be a scalar or one value per batch row."""
    a, b = _values(h0), _values(h1)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch {a.shape} vs {b.shape}")
    t = _expand_t(_check_t(t), a)
    return _like(h0, (1.0 - (1.0 - zeta) * t) * a + t * b)


def cond_field(h, h1, t, zeta: float = DEFAULT_ZETA):
    """``(h1 - (1 - zeta) h) / (1 - (1 - zeta) t)``."""
    a, b = _values(h), _values(h1)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch {a.shape} vs {b.shape}")
    t = _check_t(t)
    denom = 1.0 - (1.0 - zeta) * t
    if np.any(denom <= 0):
        raise ConfigError("conditional field is singular at t = 1 with zeta = 0")
    return _like(h, (b - (1.0 - zeta) * a) / _expand_t(denom, a))


# ---------------------------------------------------------------------------
# per-node field network


@dataclass(frozen=True)
class Architecture:
    grid_shape: tuple
    hidden: tuple = (64, 64)
    n_freq: int = 4
    value_scale: float = 1.0

    @property
    def dim(self) -> int:
        return len(self.grid_shape)

    @property
    def n_neighbors(self) -> int:
        return 3 ** self.dim

    @property
    def n_time(self) -> int:
        return 1 + 2 * self.n_freq

    def layout(self):
        h1, h2 = self.hidden
        return [("Wn", (self.n_neighbors, h1)), ("Wc", (self.dim, h1)), ("Wt", (self.n_time, h1)),
                ("b1", (h1,)), ("W2", (h1, h2)), ("b2", (h2,)), ("w3", (h2,)), ("b3", ())]

    def to_dict(self):
        d = asdict(self)
        d["grid_shape"] = list(self.grid_shape)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["grid_shape"]), tuple(d["hidden"]), int(d["n_freq"]), float(d["value_scale"]))


def time_features(t, n_freq: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    k = np.arange(1, n_freq + 1)
    return np.concatenate([t[:, None], np.sin(math.pi * k * t[:, None]), np.cos(math.pi * k * t[:, None])], axis=1)


class FieldModel:
    """Vector field u(h, t) applied node-wise.

    Every node sees its coordinates (rescaled to [-1, 1]), the 3^D values
    around it (edge-replicated at the border) and a sinusoidal embedding of t;
    a tanh MLP with shared weights maps those features to one output value.
    """

    def __init__(self, arch: Architecture, params: Optional[np.ndarray] = None, seed=0,
                 dtype=np.float32):
        if len(arch.hidden) != 2:
            raise ConfigError("the field network has exactly two hidden layers")
        self.arch = arch
        self.dtype = dtype
        self._sizes = [(name, shp, int(np.prod(shp))) for name, shp in arch.layout()]
        self.n_params = sum(s for _, _, s in self._sizes)
        self.params = self.init_params(seed) if params is None else np.array(params, dtype=float)
        if self.params.shape != (self.n_params,):
            raise ConfigError(f"expected {self.n_params} parameters, got {self.params.shape}")
        axes = [np.linspace(-1.0, 1.0, n) for n in arch.grid_shape]
        mesh = np.meshgrid(*axes, indexing="ij")
        self.coords = np.stack(mesh, axis=-1).reshape(-1, arch.dim)
        self.offsets = list(itertools.product((0, 1, 2), repeat=arch.dim))

    def init_params(self, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        parts = []
        fan_in1 = self.arch.n_neighbors + self.arch.dim + self.arch.n_time
        for name, shp, size in self._sizes:
            if name in ("Wn", "Wc", "Wt"):
                parts.append(rng.normal(0, 1 / math.sqrt(fan_in1), size))
            elif name == "W2":
                parts.append(rng.normal(0, 1 / math.sqrt(shp[0]), size))
            elif name == "w3":
                parts.append(rng.normal(0, 0.1 / math.sqrt(shp[0]), size))
            else:
                parts.append(np.zeros(size))
        return np.concatenate(parts)

    def unpack(self, params=None):
        params = self.params if params is None else params
        out, i = {}, 0
        for name, shp, size in self._sizes:
            out[name] = params[i:i + size].reshape(shp).astype(self.dtype)
            i += size
        return out

    def pack(self, parts) -> np.ndarray:
        return np.concatenate([np.asarray(parts[name], dtype=float).reshape(-1) for name, _, _ in self._sizes])

    def neighborhoods(self, h: np.ndarray) -> np.ndarray:
        """(B, *grid) -> (B * P, 3^D) local patches, rescaled by value_scale."""
        b = h.shape[0]
        pad = np.pad(h, [(0, 0)] + [(1, 1)] * self.arch.dim, mode="edge")
        cols = []
        for off in self.offsets:
            sl = (slice(None),) + tuple(slice(o, o + n) for o, n in zip(off, self.arch.grid_shape))
            cols.append(pad[sl].reshape(b, -1))
        return (np.stack(cols, axis=-1) / self.arch.value_scale).reshape(-1, len(self.offsets)).astype(self.dtype)

    def _forward(self, h, t, params=None):
        h = np.asarray(h, dtype=float)
        if h.shape[1:] != tuple(self.arch.grid_shape):
            raise ConfigError(f"model grid {self.arch.grid_shape} does not match input {h.shape[1:]}")
        b, p = h.shape[0], self.coords.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=float), (b,))
        w = self.unpack(params)
        nb = self.neighborhoods(h)
        tf = time_features(t, self.arch.n_time // 2).astype(self.dtype)
        coord_part = self.coords.astype(self.dtype) @ w["Wc"]
        time_part = tf @ w["Wt"] + w["b1"]
        pre1 = (nb @ w["Wn"]).reshape(b, p, -1)
        pre1 += coord_part[None]
        pre1 += time_part[:, None, :]
        a1 = np.tanh(pre1.reshape(b * p, -1))
        a2 = np.tanh(a1 @ w["W2"] + w["b2"])
        z3 = a2 @ w["w3"] + w["b3"]
        out = (self.arch.value_scale * z3).reshape(h.shape)
        return out, (w, nb, tf, a1, a2, b, p)

    def __call__(self, h, t):
        """Field values for a batch ``h`` of shape (B, *grid) and times ``t`` (scalar or (B,))."""
        single = isinstance(h, GridFunction)
        arr = h.array[None] if single else np.asarray(h, dtype=float)
        out = self._forward(arr, t)[0].astype(float)
        return h.with_values(out[0]) if single else out

    def backward(self, cache, dout: np.ndarray) -> np.ndarray:
        """Parameter gradient given dLoss/dOutput of shape (B, *grid)."""
        w, nb, tf, a1, a2, b, p = cache
        dz3 = (self.arch.value_scale * dout).reshape(-1).astype(self.dtype)
        g = {"w3": a2.T @ dz3, "b3": dz3.sum()}
        dpre2 = np.outer(dz3, w["w3"])
        dpre2 *= 1.0 - a2 * a2
        g["W2"] = a1.T @ dpre2
        g["b2"] = dpre2.sum(axis=0)
        dpre1 = dpre2 @ w["W2"].T
        dpre1 *= 1.0 - a1 * a1
        g["Wn"] = nb.T @ dpre1
        d3 = dpre1.reshape(b, p, -1)
        g["Wc"] = self.coords.T.astype(self.dtype) @ d3.sum(axis=0)
        per_batch = d3.sum(axis=1)
        g["Wt"] = tf.T @ per_batch
        g["b1"] = per_batch.sum(axis=0)
        return self.pack(g)

    def copy(self) -> "FieldModel":
        return FieldModel(self.arch, self.params.copy(), dtype=self.dtype)


def fm_loss(model: FieldModel, h0, h1, t, zeta: float = DEFAULT_ZETA, cell_volume: float = 1.0,
            params=None):
    """Batch-mean of the cell-volume-weighted squared error against the conditional field.

    Returns ``(loss, dloss/dtheta)``.
    """
    h0, h1 = np.asarray(h0, dtype=float), np.asarray(h1, dtype=float)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    mid = cond_flow(h0, h1, t, zeta)
    target = cond_field(mid, h1, t, zeta)
    out, cache = model._forward(mid, t, params)
    resid = out.astype(float) - target
    b = h0.shape[0]
    loss = cell_volume * float(np.sum(resid ** 2)) / b
    if not math.isfinite(loss):
        raise NumericError(f"non-finite flow-matching loss (max |resid| = {np.nanmax(np.abs(resid))})")
    grad = model.backward(cache, (2.0 * cell_volume / b) * resid)
    return loss, grad.astype(float)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    zeta: float = DEFAULT_ZETA
    batch: int = 16
    steps: int = 20000
    lr: float = 1e-3
    schedule: str = "constant"  # or "cosine"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    divergence_threshold: float = 1e6
    total_steps: int = 0  # schedule horizon across resumed runs; 0 means ``steps``

    def __post_init__(self):
        if not 0 < self.zeta < 1:
            raise ConfigError("zeta must lie in (0, 1)")
        if self.batch < 1 or self.steps < 0 or self.lr < 0:
            raise ConfigError("need batch >= 1, steps >= 0, lr >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, step: int) -> float:
        horizon = self.total_steps or self.steps
        if self.schedule == "cosine" and horizon > 0:
            return 0.5 * self.lr * (1 + math.cos(math.pi * min(step, horizon) / horizon))
        return self.lr


@dataclass
class OptimizerState:
    step: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None


@dataclass
class TrainResult:
    model: FieldModel
    losses: list
    state: OptimizerState
    first_step: int = 0


def _corpus_array(corpus) -> tuple:
    if isinstance(corpus, np.ndarray):
        return corpus, None
    corpus = list(corpus)
    if not corpus:
        raise ConfigError("training corpus is empty")
    region, shape = corpus[0].region, corpus[0].shape
    for gf in corpus:
        if gf.region != region or gf.shape != shape:
            raise ConfigError("all corpus functions must share region and grid shape")
    return np.stack([gf.array for gf in corpus]), region


def train(model: FieldModel, corpus, config: TrainConfig, noise: NoiseMeasureSpec,
          region: Optional[Region] = None, state: Optional[OptimizerState] = None,
          callback: Optional[Callable] = None) -> TrainResult:
    """Adam on the flow-matching loss; the model is updated in place.

    ``corpus`` is a list of GridFunctions (or an array with ``region`` given).
    Passing the ``state`` of a previous run resumes its step counter and moments.
    """
    data, reg = _corpus_array(corpus)
    region = region or reg
    if region is None:
        raise ConfigError("region is required when the corpus is a bare array")
    if len(data) == 0:
        raise ConfigError("training corpus is empty")
    if data.shape[1:] != tuple(model.arch.grid_shape):
        raise ConfigError("corpus grid does not match the model grid")
    cell_volume = float(np.prod(region.widths / np.asarray(data.shape[1:])))
    sampler = noise_sampler(noise, region, data.shape[1:])
    state = state or OptimizerState()
    if state.m is None:
        state.m = np.zeros(model.n_params)
        state.v = np.zeros(model.n_params)
    first = state.step
    # per-step generator keyed on the absolute step so resumed runs stay reproducible
    root = np.random.SeedSequence(config.seed)
    losses = []
    for k in range(config.steps):
        step = first + k
        rng = np.random.default_rng([root.entropy, step])
        idx = rng.integers(len(data), size=config.batch)
        h1 = data[idx]
        h0 = sampler.sample(config.batch, rng)
        t = rng.random(config.batch)
        loss, g = fm_loss(model, h0, h1, t, config.zeta, cell_volume)
        if loss > config.divergence_threshold:
            raise NumericError(f"training diverged at step {step}: loss {loss:.3e}")
        state.step = step + 1
        b1, b2 = config.beta1, config.beta2
        state.m = b1 * state.m + (1 - b1) * g
        state.v = b2 * state.v + (1 - b2) * g * g
        mhat = state.m / (1 - b1 ** state.step)
        vhat = state.v / (1 - b2 ** state.step)
        model.params = model.params - config.lr_at(step) * mhat / (np.sqrt(vhat) + config.adam_eps)
        losses.append(loss)
        if callback is not None:
            callback(step, loss)
    return TrainResult(model, losses, state, first)


# ---------------------------------------------------------------------------
# sampling


def ode_sample(field_fn, noise, n_steps: int = 100):
    """Explicit Euler from t = 0 to 1 on ``dh/dt = field_fn(h, t)``."""
    if n_steps < 1:
        raise ConfigError("n_steps must be >= 1")
    single = isinstance(noise, GridFunction)
    h = noise.array[None].copy() if single else np.array(noise, dtype=float)
    dt = 1.0 / n_steps
    for k in range(n_steps):
        t = np.full(h.shape[0], k * dt)
        h = h + dt * np.asarray(field_fn(h, t), dtype=float)
        if not np.all(np.isfinite(h)):
            raise NumericError(f"ODE state became non-finite at step {k}")
    return noise.with_values(h[0]) if single else h


def generate(model: FieldModel, noise: NoiseMeasureSpec, region: Region, n: int, seed,
             n_steps: int = 100, chunk: int = 16):
    """Draw ``n`` functions: noise fields pushed through the learned flow."""
    shape = tuple(model.arch.grid_shape)
    sampler = noise_sampler(noise, region, shape)
    out = []
    for i, ss in enumerate(np.random.SeedSequence(seed).spawn((n + chunk - 1) // chunk)):
        m = min(chunk, n - i * chunk)
        h0 = sampler.sample(m, np.random.default_rng(ss))
        out.append(ode_sample(model, h0, n_steps))
    arr = np.concatenate(out) if out else np.zeros((0,) + shape)
    return [GridFunction(region, shape, a) for a in arr]


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"SETFLOW-CKPT v1\n"


def save_checkpoint(path, model: FieldModel, region: Region, zeta: float, noise: NoiseMeasureSpec,
                    state: Optional[OptimizerState] = None, meta: Optional[dict] = None) -> None:
    """Magic line, one JSON header line, then raw little-endian float64 blocks."""
    blocks = [model.params]
    has_opt = state is not None and state.m is not None
    if has_opt:
        blocks += [state.m, state.v]
    header = {"architecture": model.arch.to_dict(), "grid": {"region": region.to_dict(),
              "shape": list(model.arch.grid_shape)}, "zeta": zeta, "noise": asdict(noise),
              "n_params": model.n_params, "step": state.step if state else 0,
              "has_optimizer": has_opt, "meta": meta or {}}
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for blk in blocks:
            fh.write(np.asarray(blk, dtype="<f8").tobytes())


@dataclass
class Checkpoint:
    model: FieldModel
    region: Region
    zeta: float
    noise: NoiseMeasureSpec
    state: OptimizerState
    meta: dict = field(default_factory=dict)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(CKPT_MAGIC):
        raise ParseError(f"{path}: bad checkpoint magic")
    rest = raw[len(CKPT_MAGIC):]
    nl = rest.find(b"\n")
    try:
        header = json.loads(rest[:nl].decode())
        arch = Architecture.from_dict(header["architecture"])
        region = Region.from_dict(header["grid"]["region"])
        noise = NoiseMeasureSpec(**header["noise"])
        n = int(header["n_params"])
        has_opt = bool(header["has_optimizer"])
        zeta = float(header["zeta"])
        step = int(header["step"])
    except (ValueError, KeyError, TypeError, UnicodeDecodeError, ConfigError) as exc:
        raise ParseError(f"{path}: checkpoint header fails schema ({exc})") from None
    body = rest[nl + 1:]
    n_blocks = 3 if has_opt else 1
    if nl < 0 or len(body) != 8 * n * n_blocks:
        raise ParseError(f"{path}: checkpoint body has {len(body)} bytes, expected {8 * n * n_blocks}")
    vals = np.frombuffer(body, dtype="<f8").astype(float)
    if not np.all(np.isfinite(vals)):
        raise ParseError(f"{path}: checkpoint holds non-finite parameters")
    try:
        model = FieldModel(arch, vals[:n])
    except ConfigError as exc:
        raise ParseError(f"{path}: {exc}") from None
    state = OptimizerState(step, vals[n:2 * n].copy(), vals[2 * n:].copy()) if has_opt else OptimizerState(step)
    return Checkpoint(model, region, zeta, noise, state, header.get("meta", {}))


def write_loss_csv(path, losses: Sequence[float], first_step: int = 0, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8", newline="\n") as fh:
        if not append:
            fh.write("step,loss\n")
        for k, loss in enumerate(losses):
            fh.write(f"{first_step + k},{loss!r}\n")
