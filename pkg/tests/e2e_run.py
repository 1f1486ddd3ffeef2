"""End-to-end generative check on the synthetic Poisson corpus.

Run directly to (re)build the cached model:

    python tests/e2e_run.py --workdir tests/.e2e

Training is chunked and resumable: each chunk leaves a checkpoint, and a
rerun picks up from the newest one. Evaluation always runs from scratch.
"""

import argparse
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from setflow import flow_core as fc
from setflow import metrics
from setflow.pipeline import CorpusScales, decode_corpus, encode_corpus
from setflow.point_process import default_poisson_region, default_poisson_spec, sample_corpus

EPSILON = 0.35
GRID = (64, 64)
TRAIN_SEED, HELD_SEED = 1, 2
N_TRAIN, N_HELD, N_GEN = 500, 200, 200
STEPS, CHUNK = 20_000, 5_000
NOISE = fc.NoiseMeasureSpec(length_scale=0.5, amplitude=0.1)
ARCH = fc.Architecture(GRID, (64, 64), 4, value_scale=0.2)
TRAIN = fc.TrainConfig(batch=16, steps=CHUNK, lr=1e-3, schedule="cosine", seed=0, total_steps=STEPS)


def corpora():
    spec, region = default_poisson_spec(), default_poisson_region()
    return (sample_corpus(spec, N_TRAIN, TRAIN_SEED, region),
            sample_corpus(spec, N_HELD, HELD_SEED, region), region)


def _latest(workdir: Path):
    ckpts = sorted(workdir.glob("model_*.ckpt"))
    return ckpts[-1] if ckpts else None


def ensure_trained(workdir, log=print) -> Path:
    """Train (or finish training) the model; returns the final checkpoint path."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    final = workdir / f"model_{STEPS:06d}.ckpt"
    if final.exists():
        return final
    train, _, region = corpora()
    functions = encode_corpus(train, EPSILON, region, GRID)
    scales = CorpusScales.from_sets(train, EPSILON, region, GRID)
    latest = _latest(workdir)
    if latest is not None:
        ck = fc.load_checkpoint(latest)
        model, state = ck.model, ck.state
    else:
        model, state = fc.FieldModel(ARCH, seed=0), None
    while state is None or state.step < STEPS:
        t0 = time.time()
        res = fc.train(model, functions, TRAIN, NOISE, region=region, state=state)
        state = res.state
        path = workdir / f"model_{state.step:06d}.ckpt"
        fc.save_checkpoint(path, model, region, TRAIN.zeta, NOISE, state,
                           meta={"epsilon": EPSILON, "scales": scales.to_dict()})
        fc.write_loss_csv(workdir / "loss.csv", res.losses, res.first_step,
                          append=res.first_step > 0)
        log(f"steps {res.first_step}-{state.step - 1}: mean loss {np.mean(res.losses[-500:]):.4f} "
            f"({time.time() - t0:.0f} s)")
    return final


def evaluate(checkpoint, seed=7, n_perm=500, log=print) -> dict:
    train, held, region = corpora()
    ck = fc.load_checkpoint(checkpoint)
    scales = CorpusScales.from_dict(ck.meta["scales"])
    gen_fns = fc.generate(ck.model, ck.noise, ck.region, N_GEN, seed)
    mass = float(np.mean([g.integral() for g in gen_fns]))
    gen, _ = decode_corpus(gen_fns, scales, seed=seed)
    sw_gen = metrics.s_wstein(gen, held)
    sw_train = metrics.s_wstein(train, held)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # empty sets are excluded from D-MMD by design
        mmd_gen = metrics.d_mmd(gen, held, EPSILON, region)
        half = N_HELD // 2
        null = metrics.mmd_permutation_test(held[:half], held[half:], EPSILON, n_perm=n_perm,
                                            seed=seed, region=region)
    q99 = null.quantile(0.99)
    out = {"mean_mass": mass, "s_wstein_gen": sw_gen, "s_wstein_train": sw_train,
           "d_mmd_gen": mmd_gen, "null_q99": q99,
           "gen_sizes": np.bincount([len(s) for s in gen]).tolist(),
           "held_sizes": np.bincount([len(s) for s in held]).tolist()}
    log(json.dumps(out))
    return out


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--workdir", default=str(Path(__file__).parent / ".e2e"))
    ap.add_argument("--eval", action="store_true")
    args = ap.parse_args(argv)
    ckpt = ensure_trained(args.workdir, log=lambda m: print(m, flush=True))
    if args.eval:
        evaluate(ckpt, log=lambda m: print(m, flush=True))


if __name__ == "__main__":
    sys.exit(main())
