"""``setflow {synth|train|sample|invert|eval|plotdata}``.

Every command takes ``--config PATH --seed N --out DIR`` and writes the
resolved config into ``DIR``. Exit codes: 0 ok, 2 validation, 3 numeric
failure, 4 I/O.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import flow_core as fc
from . import metrics
from .config import RunConfig
from .errors import ConfigError, NumericError, ParseError
from .inverse_transform import DecodeConfig, MixtureTarget, decode
from .pipeline import CorpusScales, decode_grid, encode_corpus
from .point_process import Region, poisson_intensity, read_corpus, sample_corpus, write_corpus
from .representation import MixtureRepr, grid_nodes, load_grid, save_grid

log = logging.getLogger("setflow")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    raise TypeError(f"not serialisable: {type(obj).__name__}")


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n",
                          encoding="utf-8")


def _prepare(args) -> tuple:
    cfg = RunConfig.load(args.config, seed=args.seed, out=args.out)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    return cfg, out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = RunConfig.load(args.config, seed=args.seed, out=args.out,
                         process=_process_overrides(args))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    spec = cfg.process_spec()
    p = cfg["process"]
    region = cfg.region()
    sets = sample_corpus(spec, int(p["count"]), cfg.seed, region=region if region.dim == 2 else None,
                         horizon=float(p["horizon"]))
    write_corpus(out / "corpus.jsonl", sets,
                 meta={"process": spec.to_dict(), "region": region.to_dict(), "seed": cfg.seed})
    log.info("wrote %d sets to %s", len(sets), out / "corpus.jsonl")
    return EXIT_OK


def _process_overrides(args):
    over = {}
    if getattr(args, "process", None) is not None:
        over["variant"] = args.process
    if getattr(args, "count", None) is not None:
        over["count"] = args.count
    return over or None


def cmd_train(args) -> int:
    cfg, out = _prepare(args)
    sets = read_corpus(args.corpus)
    region, shape = cfg.region(), cfg.grid_shape()
    eps = float(cfg["representation"]["epsilon"])
    functions = encode_corpus(sets, eps, region, shape, cfg.min_sigma())
    scales = CorpusScales.from_sets(sets, eps, region, shape, cfg.min_sigma())
    noise = cfg.noise()
    tcfg = cfg.train_config()
    if args.steps is not None:
        tcfg = fc.TrainConfig(**{**tcfg.__dict__, "steps": args.steps})
    state = None
    if args.resume:
        ck = fc.load_checkpoint(args.resume)
        if ck.model.arch != cfg.architecture():
            raise ConfigError("checkpoint architecture differs from the config")
        model, state = ck.model, ck.state
    else:
        model = fc.FieldModel(cfg.architecture(), seed=cfg.seed)
    res = fc.train(model, functions, tcfg, noise, region=region, state=state)
    meta = {"epsilon": eps, "scales": scales.to_dict(), "min_sigma": cfg.min_sigma()}
    fc.save_checkpoint(out / "model.ckpt", res.model, region, tcfg.zeta, noise, res.state, meta=meta)
    fc.write_loss_csv(out / "loss.csv", res.losses, res.first_step,
                      append=bool(args.resume) and (out / "loss.csv").exists())
    log.info("trained steps %d..%d", res.first_step, res.state.step - 1)
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg, out = _prepare(args)
    ck = fc.load_checkpoint(args.checkpoint)
    n = int(args.n if args.n is not None else cfg["sample"]["n"])
    fns = fc.generate(ck.model, ck.noise, ck.region, n, cfg.seed, n_steps=int(cfg["sample"]["ode_steps"]))
    sdir = out / "samples"
    sdir.mkdir(exist_ok=True)
    for i, gf in enumerate(fns):
        save_grid(sdir / f"sample_{i:04d}.npz", gf, meta={**ck.meta, "index": i, "seed": cfg.seed})
    log.info("wrote %d functions to %s", n, sdir)
    return EXIT_OK


def _function_files(paths):
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += sorted(q for q in p.iterdir() if q.suffix in (".npz", ".txt", ".json"))
        else:
            files.append(p)
    if not files:
        raise ConfigError("no function files given")
    return files


def _write_trajectory(path, trajectory):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        dim = trajectory[0][1].shape[1]
        w.writerow(["step", "particle"] + [f"x{k}" for k in range(dim)])
        for step, pts in trajectory:
            for i, p in enumerate(pts):
                w.writerow([step, i] + [repr(float(v)) for v in p])


def cmd_invert(args) -> int:
    cfg, out = _prepare(args)
    over = cfg.decode_overrides()
    record = int(cfg["decode"]["record_every"])
    files = _function_files(args.inputs)
    seeds = np.random.SeedSequence(cfg.seed).generate_state(len(files))
    sets, diags = [], []
    for path, seed in zip(files, seeds):
        if path.suffix == ".json":
            doc = json.loads(path.read_text(encoding="utf-8"))
            if doc.get("kind") != "mixture":
                raise ParseError(f"{path}: expected a mixture document")
            try:
                repr_ = MixtureRepr.from_dict(doc)
                region = Region.from_dict(doc["region"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}: {exc}") from None
            dcfg = DecodeConfig.for_mixture(repr_, region, seed=int(seed), **over)
            pts, diag = decode(MixtureTarget(repr_, region), dcfg, record_every=record)
            diag["config"] = dcfg.__dict__
        else:
            gf, meta = load_grid(path, return_meta=True)
            if "scales" not in meta:
                raise ConfigError(f"{path}: grid file lacks decode scales in its meta block")
            scales = CorpusScales.from_dict(meta["scales"])
            pts, diag = decode_grid(gf, scales, seed=int(seed), record_every=record, **over)
        traj = diag.pop("trajectory", None)
        if traj:
            tdir = out / "trajectories"
            tdir.mkdir(exist_ok=True)
            _write_trajectory(tdir / f"{path.stem}.csv", traj)
        diag["source"] = str(path)
        sets.append(pts)
        diags.append(diag)
    write_corpus(out / "corpus.jsonl", sets, meta={"seed": cfg.seed})
    _dump_json(out / "diagnostics.json", diags)
    log.info("decoded %d functions, %d empty", len(sets), sum(len(s) == 0 for s in sets))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, out = _prepare(args)
    gen, ref = read_corpus(args.gen), read_corpus(args.ref)
    region = cfg.region()
    report = metrics.metric_report(gen, ref, cfg.bandwidth_epsilon(), region,
                                   config={"bandwidth_epsilon": cfg.bandwidth_epsilon()})
    _dump_json(out / "metrics.json", report)
    log.info("s_wstein %.4f  d_mmd %.4g", report["s_wstein"], report["d_mmd"])
    return EXIT_OK


def cmd_plotdata(args) -> int:
    cfg, out = _prepare(args)
    run = Path(args.run)
    pdir = out / "plots"
    pdir.mkdir(exist_ok=True)
    written = 0
    for path in sorted((run / "samples").glob("*.npz")) if (run / "samples").is_dir() else []:
        gf = load_grid(path)
        _write_grid_csv(pdir / f"heatmap_{path.stem}.csv", gf.nodes(), gf.values)
        written += 1
    tdir = run / "trajectories"
    if tdir.is_dir():
        for path in sorted(tdir.glob("*.csv")):
            (pdir / f"trajectory_{path.name}").write_text(path.read_text(encoding="utf-8"), encoding="utf-8")
            written += 1
    spec = cfg.process_spec()
    if spec.variant != "hawkes_exp":
        region, shape = cfg.region(), cfg.grid_shape()
        nodes = grid_nodes(region, shape)
        _write_grid_csv(pdir / "intensity.csv", nodes, poisson_intensity(nodes, spec))
        written += 1
    log.info("wrote %d CSV files to %s", written, pdir)
    return EXIT_OK


def _write_grid_csv(path, nodes, values):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{k}" for k in range(nodes.shape[1])] + ["value"])
        for p, v in zip(nodes, values):
            w.writerow([repr(float(c)) for c in p] + [repr(float(v))])


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="setflow", description="Generate unordered point sets with function-valued flow matching.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, default=None, help="TOML run config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "sample a synthetic point-process corpus")
    p.add_argument("--process", choices=["poisson", "hawkes"], default=None)
    p.add_argument("--count", type=int, default=None)
    p = add("train", cmd_train, "train the flow model on a corpus")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    p = add("sample", cmd_sample, "draw grid functions from a trained model")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--n", type=int, default=None)
    p = add("invert", cmd_invert, "decode function files into point sets")
    p.add_argument("inputs", nargs="+", help="grid files (.npz/.txt), mixture .json files or directories")
    p = add("eval", cmd_eval, "compare a generated corpus with a reference corpus")
    p.add_argument("--gen", type=Path, required=True)
    p.add_argument("--ref", type=Path, required=True)
    p = add("plotdata", cmd_plotdata, "export CSV data for plotting a run")
    p.add_argument("--run", type=Path, required=True, help="run directory to export")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParseError) as exc:
        print(f"setflow {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"setflow {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"setflow {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
