"""metafap command line: generate, train, eval, ablate, baseline, bench.

Every command writes its artifacts plus one ``manifest.json`` into ``--out``.
Exit codes: 0 ok, 2 usage, 3 invalid input/config, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as ckpt_io
from .baselines import (
    BaselineConfig,
    eval_query_region,
    knn_predict_array,
    train_plain,
    train_region,
    zero_shot_metrics,
)
from .data import (
    DEFAULT_N_SAMPLES,
    SPLIT_NAMES,
    build_pools,
    fit_scaler,
    frequency_sweep,
    generate_dataset,
    preset_split,
    read_csv,
    write_csv,
)
from .errors import MetafapError, ValidationError
from .metatrain import MetaConfig, meta_evaluate, meta_train
from .net import Architecture, init_params, predict_batch
from .objective import evaluate
from .oracle import DesignVector, OracleConfig

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4
EPOCH_CSV_HEADER = ("epoch", "train_loss", "val_mse", "val_mae", "val_cc", "inner_lr", "outer_lr")
ABLATIONS = {"complete": None, "no_freq_branch": "freq", "no_other_branch": "other"}

log = logging.getLogger("metafap")


# -- helpers --------------------------------------------------------------------


def git_blob_hash(payload: bytes) -> str:
    """Content hash computed the way ``git hash-object`` does."""
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


def _file_hash(path: Path) -> str:
    return git_blob_hash(Path(path).read_bytes())


def _dump_json(obj, path: Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _thread_limit():
    raw = os.environ.get("METAFAP_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"METAFAP_THREADS must be a non-negative integer, got {raw!r}") from None
    if n < 0:
        raise ValidationError(f"METAFAP_THREADS must be a non-negative integer, got {raw!r}")
    if n == 0:
        return n, nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional dependency
        log.warning("threadpoolctl not installed; METAFAP_THREADS=%d ignored", n)
        return n, nullcontext()
    return n, threadpool_limits(limits=n)


def load_config(path) -> tuple[MetaConfig, OracleConfig]:
    """Read a JSON config: MetaConfig fields at top level, optional ``oracle`` section."""
    if path is None:
        return MetaConfig(), OracleConfig()
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(d, dict):
        raise ValidationError(f"{path}: top level must be an object")
    oracle = OracleConfig.from_dict(d.pop("oracle", {}))
    if isinstance(d.get("split"), str):
        d["split"] = preset_split(d["split"]).to_dict()
    return MetaConfig.from_dict(d), oracle


def _resolve_meta(args) -> tuple[MetaConfig, OracleConfig]:
    cfg, oracle = load_config(getattr(args, "config", None))
    over = {}
    if getattr(args, "split", None):
        over["split"] = preset_split(args.split)
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        over["epochs"] = args.epochs
    return (dataclasses.replace(cfg, **over) if over else cfg), oracle


def _load_data(args, oracle: OracleConfig):
    """Read ``--data`` or, when absent, generate the default dataset in memory."""
    if args.data:
        return read_csv(args.data), {"data": str(args.data)}
    log.info("no --data given; generating %d samples with seed %d", DEFAULT_N_SAMPLES, args.data_seed)
    return generate_dataset(DEFAULT_N_SAMPLES, oracle, args.data_seed), {}


class Run:
    """Collects inputs, outputs and timings, then writes the manifest."""

    def __init__(self, command: str, out: Path, argv: list[str]):
        self.command, self.out, self.argv = command, Path(out), argv
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.config: dict = {}
        self.seed = None
        self.timings: dict[str, float] = {}
        self.t0 = time.perf_counter()

    def add_inputs(self, paths: dict):
        for key, p in paths.items():
            if p is not None:
                self.inputs[key] = str(p)

    def output(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def finish(self, threads: int) -> dict:
        self.timings["total_s"] = time.perf_counter() - self.t0
        input_hashes = {k: _file_hash(Path(p)) for k, p in sorted(self.inputs.items())}
        basis = json.dumps({"config": self.config, "inputs": input_hashes}, sort_keys=True).encode()
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "version": __version__,
            "config": self.config,
            "seed": self.seed,
            "inputs": {k: {"path": self.inputs[k], "hash": h} for k, h in input_hashes.items()},
            "outputs": {name: _file_hash(self.out / name) for name in sorted(self.outputs)},
            "content_hash": git_blob_hash(basis),
            "timings": self.timings,
            "environment": {"python": platform.python_version(), "numpy": np.__version__, "threads": threads},
        }
        _dump_json(manifest, self.out / "manifest.json")
        return manifest


# -- commands ---------------------------------------------------------------------


def cmd_generate(args, run: Run):
    oracle = OracleConfig.from_dict(json.loads(Path(args.oracle_config).read_text())) if args.oracle_config else OracleConfig()
    over = {}
    if args.polarization:
        over["polarization"] = args.polarization
    if args.lossless:
        over["lossless"] = True
    oracle = dataclasses.replace(oracle, **over) if over else oracle
    if args.oracle_config:
        run.add_inputs({"oracle_config": args.oracle_config})
    run.config = {"samples": args.samples, "seed": args.seed, "oracle": oracle.to_dict(), "sweep": args.sweep}
    run.seed = args.seed
    t = time.perf_counter()
    data = generate_dataset(args.samples, oracle, args.seed)
    write_csv(data, run.output("dataset.csv"))
    run.timings["generate_s"] = time.perf_counter() - t
    if args.sweep:
        # reflectance-vs-frequency curves for the first few designs, one row per grid point
        grid = np.linspace(5.0, 25.0, 201)
        with open(run.output("sweep.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("design", "freq_ghz", "transmittance", "reflectance", "absorbance"))
            for i in range(min(args.sweep, len(data))):
                s = frequency_sweep(DesignVector.from_array(data.x[i]), grid, oracle)
                for f, (t_, r_, a_) in zip(s.freq_ghz, s.y):
                    w.writerow((i, format(f, ".6g"), format(t_, ".17g"), format(r_, ".17g"), format(a_, ".17g")))
    print(f"wrote {len(data)} samples to {run.out / 'dataset.csv'} (seed {args.seed})")


def write_report(report, cfg: MetaConfig, run: Run) -> None:
    _dump_json({"config": cfg.to_dict(), **report.to_dict()}, run.output("report.json"))
    with open(run.output("epochs.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EPOCH_CSV_HEADER)
        for e in report.epochs:
            w.writerow([e["epoch"]] + [format(e[k], ".17g") for k in ("train_query_loss", "val_mse", "val_mae", "val_cc", "inner_lr", "outer_lr")])


def cmd_train(args, run: Run):
    cfg, oracle = _resolve_meta(args)
    data, paths = _load_data(args, oracle)
    run.add_inputs({**paths, "config": args.config})
    run.config = {"meta": cfg.to_dict(), "oracle": oracle.to_dict(), "data_seed": args.data_seed}
    run.seed = cfg.seed
    print(f"training on split {cfg.split.name!r} with seed {cfg.seed} for {cfg.epochs} epochs")
    pools = build_pools(data, cfg.split, cfg.seed)
    ckpt, report = meta_train(cfg, pools, log=log.info)
    ckpt_io.save(ckpt, run.output("checkpoint.json"))
    write_report(report, cfg, run)
    run.timings.update(report.timings)
    print(f"best epoch {report.best_epoch}; meta-test {json.dumps(report.test)}")


def cmd_eval(args, run: Run):
    cfg, oracle = _resolve_meta(args)
    ckpt = ckpt_io.load(args.checkpoint)
    cfg = dataclasses.replace(cfg, arch=ckpt.arch)
    data, paths = _load_data(args, oracle)
    run.add_inputs({**paths, "config": args.config, "checkpoint": args.checkpoint})
    run.config = {"meta": cfg.to_dict(), "n_support": args.n_support, "inner_lr": args.inner_lr, "data_seed": args.data_seed}
    run.seed = cfg.seed
    pools = build_pools(data, cfg.split, cfg.seed)
    res = meta_evaluate(ckpt, pools.test, cfg, n_support=args.n_support, inner_lr=args.inner_lr)
    doc = {"split": cfg.split.name, "n_support": args.n_support or cfg.n_support, "seed": cfg.seed, **res.metrics.to_dict()}
    _dump_json(doc, run.output("metrics.json"))
    with open(run.output("per_task.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(res.per_task[0]))
        w.writeheader()
        w.writerows(res.per_task)
    print(json.dumps(doc))


def cmd_ablate(args, run: Run):
    cfg, oracle = _resolve_meta(args)
    data, paths = _load_data(args, oracle)
    run.add_inputs({**paths, "config": args.config})
    variants = args.variants.split(",")
    for v in variants:
        if v not in ABLATIONS:
            raise ValidationError(f"unknown ablation {v!r}; valid: {', '.join(ABLATIONS)}")
    run.config = {"meta": cfg.to_dict(), "variants": variants, "data_seed": args.data_seed}
    run.seed = cfg.seed
    pools = build_pools(data, cfg.split, cfg.seed)
    rows = []
    for v in variants:
        vcfg = dataclasses.replace(cfg, arch=dataclasses.replace(cfg.arch, drop_branch=ABLATIONS[v]))
        t = time.perf_counter()
        ckpt, report = meta_train(vcfg, pools, log=log.info)
        run.timings[f"{v}_s"] = time.perf_counter() - t
        ckpt_io.save(ckpt, run.output(f"{v}.checkpoint.json"))
        rows.append({"variant": v, "best_epoch": report.best_epoch, **report.test})
        print(json.dumps(rows[-1]))
    _dump_json(rows, run.output("ablation.json"))
    with open(run.output("ablation.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def cmd_baseline(args, run: Run):
    cfg, oracle = _resolve_meta(args)
    data, paths = _load_data(args, oracle)
    run.add_inputs({**paths, "config": args.config})
    bcfg = BaselineConfig(
        kind=args.kind, epochs=args.baseline_epochs, k=args.k, seed=cfg.seed, loss=cfg.loss, arch=cfg.arch,
        adabelief=cfg.adabelief,
    )
    run.config = {"baseline": bcfg.to_dict(), "split": cfg.split.to_dict(), "data_seed": args.data_seed}
    run.seed = cfg.seed
    pools = build_pools(data, cfg.split, cfg.seed)
    query = eval_query_region(pools.test, cfg.split)
    if len(query) == 0:
        raise ValidationError(f"split {cfg.split.name!r} leaves no eval-query samples in the test pool")
    if args.kind == "plain_dnn":
        ckpt, history = train_plain(pools, cfg.split, bcfg, log=log.info)
        ckpt_io.save(ckpt, run.output("checkpoint.json"))
        _dump_json(history, run.output("history.json"))
        metrics = zero_shot_metrics(ckpt, query, cfg.loss.corr_degenerate_value)
    else:
        train = train_region(pools.train, cfg.split)
        scaler = fit_scaler(train)
        pred = knn_predict_array(scaler.transform(train.x), train.y, scaler.transform(query.x), bcfg.k)
        metrics = evaluate(pred, query.y, cfg.loss.corr_degenerate_value)
    doc = {"kind": args.kind, "split": cfg.split.name, "seed": cfg.seed, "n_query": len(query), **metrics.to_dict()}
    _dump_json(doc, run.output("metrics.json"))
    print(json.dumps(doc))


def latency_stats(ckpt_or_params, n_iter: int, array_n: int = 4, seed: int = 0) -> dict:
    """Single-sample eval-mode prediction wall times in milliseconds."""
    params = getattr(ckpt_or_params, "params", ckpt_or_params)
    scaler = getattr(ckpt_or_params, "scaler", None)
    rng = np.random.default_rng(seed)
    x = np.array([[rng.uniform(5, 11), 30.0, 0.4, 200.0, 4.0, 10.0, 800.0, float(array_n)]])
    xs = scaler.transform(x) if scaler is not None else x
    for _ in range(min(100, n_iter)):
        predict_batch(params, xs)
    times = np.empty(n_iter)
    for i in range(n_iter):
        t = time.perf_counter()
        predict_batch(params, xs)
        times[i] = time.perf_counter() - t
    times *= 1e3
    return {
        "mean_ms": float(times.mean()),
        "p50_ms": float(np.percentile(times, 50)),
        "p99_ms": float(np.percentile(times, 99)),
        "iterations": n_iter,
        "array_n": array_n,
    }


def cmd_bench(args, run: Run):
    if args.checkpoint:
        model = ckpt_io.load(args.checkpoint)
        run.add_inputs({"checkpoint": args.checkpoint})
        arch = model.arch
    else:
        arch = Architecture()
        model = init_params(arch, args.seed)
    run.config = {"iterations": args.iterations, "batch": args.batch, "arch": arch.to_dict()}
    run.seed = args.seed
    single = latency_stats(model, args.iterations, seed=args.seed)
    params = getattr(model, "params", model)
    xb = np.random.default_rng(args.seed).normal(size=(args.batch, arch.n_features))
    t = time.perf_counter()
    predict_batch(params, xb)
    per_sample_ms = (time.perf_counter() - t) * 1e3 / args.batch
    doc = {"param_count": arch.param_count(), "single": single, "batch": args.batch, "batch_per_sample_ms": per_sample_ms}
    _dump_json(doc, run.output("bench.json"))
    print(f"parameters: {arch.param_count()}")
    print(f"single-sample latency: mean {single['mean_ms']:.4f} ms  p50 {single['p50_ms']:.4f} ms  p99 {single['p99_ms']:.4f} ms")
    print(f"batch of {args.batch}: {per_sample_ms:.5f} ms per sample")


# -- argument parsing -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metafap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"metafap {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, split=True):
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="run seed (default 0 or config value)")
        if data:
            p.add_argument("--data", type=Path, help="dataset CSV; generated in memory when omitted")
            p.add_argument("--data-seed", type=int, default=0, help="seed for in-memory generation")
            p.add_argument("--config", type=Path, help="JSON config with MetaConfig field names")
        if split:
            p.add_argument("--split", choices=SPLIT_NAMES, help="frequency split preset")

    g = sub.add_parser("generate", help="label random designs with the oracle")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--samples", type=int, default=DEFAULT_N_SAMPLES)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--oracle-config", type=Path, help="JSON with OracleConfig field names")
    g.add_argument("--polarization", choices=("TE", "TM"))
    g.add_argument("--lossless", action="store_true")
    g.add_argument("--sweep", type=int, default=0, metavar="N", help="also write frequency sweeps of the first N designs")

    t = sub.add_parser("train", help="meta-train a surrogate")
    common(t)
    t.add_argument("--epochs", type=int)

    e = sub.add_parser("eval", help="adapt a checkpoint on meta-test tasks")
    common(e)
    e.add_argument("--checkpoint", required=True, type=Path)
    e.add_argument("--n-support", type=int, choices=(64, 128, 512, 1024), default=None)
    e.add_argument("--inner-lr", type=float, default=None, help="override adaptation step size (0 disables)")

    a = sub.add_parser("ablate", help="retrain with branches removed")
    common(a)
    a.add_argument("--epochs", type=int)
    a.add_argument("--variants", default=",".join(ABLATIONS))

    b = sub.add_parser("baseline", help="plain supervised DNN or k-NN")
    common(b)
    b.add_argument("--kind", choices=("plain_dnn", "knn"), default="plain_dnn")
    b.add_argument("--baseline-epochs", type=int, default=BaselineConfig.epochs)
    b.add_argument("--k", type=int, default=BaselineConfig.k)

    n = sub.add_parser("bench", help="prediction latency and parameter count")
    n.add_argument("--out", required=True, type=Path)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--checkpoint", type=Path)
    n.add_argument("--iterations", type=int, default=10_000)
    n.add_argument("--batch", type=int, default=10_000)
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "baseline": cmd_baseline,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        threads, limiter = _thread_limit()
        if getattr(args, "samples", 1) <= 0:
            raise ValidationError(f"--samples must be positive, got {args.samples}")
        for name in ("iterations", "batch", "baseline_epochs", "epochs"):
            v = getattr(args, name, None)
            if v is not None and v < (0 if name == "baseline_epochs" else 1):
                raise ValidationError(f"--{name.replace('_', '-')} must be positive, got {v}")
        with limiter:
            run = Run(args.command, args.out, argv)
            COMMANDS[args.command](args, run)
            run.finish(threads)
    except (ValueError, FileNotFoundError) as exc:
        print(f"metafap {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (MetafapError, ArithmeticError, OSError) as exc:
        print(f"metafap {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
