"""Command-line entry point: ``volconv <subcommand> ...``.

Exit codes: 0 success, 1 usage or argument error, 2 data or format error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench, data, model, segmentation, training
from .conv import BenchRecord
from .errors import FormatError, ShapeError
from .layers import mae, mse

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- report writing -------------------------------------------------------------

def _out_dir(args) -> Path | None:
    if args.out is None:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_report(out: Path | None, stem: str, fields, rows, summary: dict):
    """Write ``stem.csv`` (``rows`` as dicts over ``fields``) and ``stem.json``."""
    if out is None:
        return
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})
    (out / f"{stem}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def _fmt(v):
    return f"{v:.10g}" if isinstance(v, float) else v


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _size_list(text: str) -> list[int | None]:
    out = []
    for v in text.split(","):
        v = v.strip()
        if v == "full":
            out.append(None)
        elif v:
            try:
                out.append(int(v))
            except ValueError:
                raise argparse.ArgumentTypeError(f"bad size {v!r}") from None
    return out


# --- shared helpers -------------------------------------------------------------

def _load(args) -> data.Dataset:
    ds = data.load_dataset(args.data)
    if args.prepool != "none":
        ds = ds.map_volumes(lambda v: data.prepool(v, 3, args.prepool))
    return ds


def _spec(args, shape) -> model.ArchitectureSpec:
    filters = tuple(args.filters) if getattr(args, "filters", None) else None
    return model.ArchitectureSpec.named(
        args.arch, k=getattr(args, "k", None), hidden_units=getattr(args, "hidden", None),
        block_filters=filters, input_shape=tuple(shape))


def _train_config(args, spec, name="") -> training.TrainConfig:
    return training.TrainConfig(
        spec=spec, epochs=args.epochs, batch_size=args.batch_size,
        seeds=tuple(args.seed + i for i in range(args.seeds)), patience=args.patience,
        kernel=args.kernel, name=name or args.arch)


def _progress(args):
    if not args.verbose:
        return None
    return lambda seed, epoch, val: print(f"seed {seed} epoch {epoch} val_mse {val:.6g}",
                                          file=sys.stderr, flush=True)


def _run_rows(results):
    return [r.as_dict() for r in results]


# --- subcommands ------------------------------------------------------------------

def cmd_gen_data(args):
    cfg = data.GeneratorConfig.from_json(args.config) if args.config else data.GeneratorConfig()
    overrides = {"seed": args.seed}
    if args.raw:
        overrides["raw"] = True
    if args.shape:
        overrides["volume_shape"] = tuple(args.shape)
    for name in ("n_train", "n_val", "n_test"):
        if getattr(args, name) is not None:
            overrides[name] = getattr(args, name)
    cfg = replace(cfg, **overrides)
    if args.out is None:
        raise UsageError("gen-data needs --out DIR")
    rows = data.generate_dataset(cfg, args.out)
    print(json.dumps({"subjects": len(rows), "shape": list(cfg.shape), "out": str(args.out)}))


def cmd_preprocess(args):
    dest = args.dest or args.out
    if dest is None:
        raise UsageError("preprocess needs an output path (OUT or --out)")
    vol = data.read_volume(args.src)
    if vol.ndim == 4:
        res = np.stack([data.prepool(v, args.factor, args.strategy) for v in vol])
    else:
        res = data.prepool(vol, args.factor, args.strategy)
    data.write_volume(dest, res)
    print(json.dumps({"in": list(vol.shape), "out": list(res.shape), "strategy": args.strategy}))


def cmd_segment(args):
    dest = args.dest or args.out
    if dest is None:
        raise UsageError("segment needs an output path (OUT or --out)")
    vol = data.read_volume(args.src)
    spatial = vol.shape[-3:] if vol.ndim in (3, 4) else vol.shape[1:4]
    plan = segmentation.make_plan(spatial, args.k, args.boundary)
    if args.orient != "native":
        ref = vol if vol.ndim == 3 else np.asarray(vol).reshape(-1, *spatial)[0]
        plan = segmentation.orient_regions(plan, args.orient, ref, args.tau)
    seg = segmentation.segment(vol, plan)
    data.write_volume(dest, seg.data)
    print(json.dumps({"shape": list(seg.data.shape),
                      "overlap": segmentation.overlap_score(seg, args.tau),
                      "orientations": [[int(v) for v in f] for f in plan.orientations]}))


def cmd_train(args):
    ds = _load(args)
    spec = _spec(args, ds.volume_shape)
    cfg = _train_config(args, spec)
    out = _out_dir(args)
    results = []
    if args.threads > 1:
        results = training.train(cfg, ds, workers=args.threads)
        print("note: weight files are not written with --threads > 1", file=sys.stderr)
    else:
        inputs = tuple(training.prepare_inputs(s, cfg.spec) for s in (ds.train, ds.val, ds.test))
        for seed in cfg.seeds:
            res, net = training.train_seed(cfg, ds, seed, inputs=inputs, progress=_progress(args))
            results.append(res)
            if out is not None:
                model.save_weights(net, out / f"weights_seed{seed}.rcnw")
    summary = {"spec": spec.to_dict(), "config": _config_dict(cfg),
               "summary": training.summarize(results), "runs": _run_rows(results)}
    if out is not None:
        (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    write_report(out, "results", training.RunResult.CSV_FIELDS,
                 [r.as_dict() | {"spec": r.arch} for r in results], summary)
    print(json.dumps(training.summarize(results), sort_keys=True))


def _config_dict(cfg: training.TrainConfig) -> dict:
    return {"alpha": cfg.alpha, "beta1": cfg.beta1, "beta2": cfg.beta2, "epsilon": cfg.epsilon,
            "epochs": cfg.epochs, "batch_size": cfg.batch_size, "seeds": list(cfg.seeds),
            "patience": cfg.patience, "kernel": cfg.kernel}


def cmd_eval(args):
    ds = _load(args)
    if args.spec:
        try:
            raw = json.loads(Path(args.spec).read_text())
            spec = model.ArchitectureSpec(**raw)
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise FormatError(f"cannot read spec {args.spec}: {exc}") from exc
    else:
        spec = _spec(args, ds.volume_shape)
    if tuple(spec.input_shape) != tuple(ds.volume_shape):
        raise ShapeError(f"spec expects volumes {spec.input_shape}, data has {ds.volume_shape}")
    net = model.load_weights(args.weights, spec, kernel=args.kernel)
    split = getattr(ds, args.split)
    if len(split) == 0:
        raise ValueError(f"split {args.split!r} is empty")
    pred = training.predict(net, training.prepare_inputs(split, spec))
    metrics = {"split": args.split, "n": len(split), "mse": mse(pred, split.y), "mae": mae(pred, split.y)}
    rows = [{"index": i, "label": float(y), "prediction": float(p)}
            for i, (y, p) in enumerate(zip(split.y, pred))]
    write_report(_out_dir(args), "eval", ("index", "label", "prediction"), rows, metrics)
    print(json.dumps(metrics, sort_keys=True))


def _sweep_summary(rows, key):
    return [{key: r.value, **{k: v for k, v in r.extra.items() if not isinstance(v, dict)},
             **{f"{m}_{s}": r.summary[m][s] for m in ("val_mse", "test_mse", "test_mae", "minutes")
                for s in ("mean", "std")}}
            for r in rows]


def cmd_sweep_k(args):
    ds = _load(args)
    cfg = _train_config(args, _spec(args, ds.volume_shape))
    rows, k = training.sweep_k(cfg, ds, ks=args.ks, progress=_progress(args), workers=args.threads)
    table = _sweep_summary(rows, "k")
    fields = list(table[0])
    write_report(_out_dir(args), "sweep_k", fields, table,
                 {"selected_k": k, "rows": [r.as_dict() for r in rows]})
    write_report(_out_dir(args), "sweep_k_runs", training.RunResult.CSV_FIELDS,
                 [x.as_dict() for r in rows for x in r.results], {"selected_k": k})
    print(json.dumps({"selected_k": k, "rows": table}, sort_keys=True))


def cmd_sweep_hidden(args):
    ds = _load(args)
    cfg = _train_config(args, _spec(args, ds.volume_shape))
    rows = training.sweep_hidden_units(cfg, ds, args.grid, progress=_progress(args),
                                       workers=args.threads)
    table = _sweep_summary(rows, "hidden_units")
    write_report(_out_dir(args), "sweep_hidden", list(table[0]), table,
                 {"rows": [r.as_dict() for r in rows]})
    print(json.dumps(table, sort_keys=True))


def cmd_sweep_size(args):
    ds = _load(args)
    configs = []
    for arch in args.archs:
        spec = model.ArchitectureSpec.named(arch, input_shape=ds.volume_shape)
        configs.append(replace(_train_config(args, spec, name=arch), subset_seed=args.seed))
    rows = training.sweep_train_size(configs, ds, args.sizes, progress=_progress(args),
                                     workers=args.threads)
    table = []
    for r in rows:
        line = {"size": r.value}
        for name, summ in r.extra["per_spec"].items():
            line[f"{name}_test_mse_mean"] = summ["test_mse"]["mean"]
            line[f"{name}_test_mse_std"] = summ["test_mse"]["std"]
        if "abs_diff_test_mse" in r.extra:
            line["abs_diff_test_mse"] = r.extra["abs_diff_test_mse"]
        table.append(line)
    write_report(_out_dir(args), "sweep_size", list(table[0]), table,
                 {"rows": [r.as_dict() for r in rows]})
    print(json.dumps(table, sort_keys=True))


def cmd_bench_conv(args):
    records = bench.bench_conv_sweep(ks=args.ks, base=args.base, batch=args.batch,
                                     filters=args.filters, reps=args.reps, threads=args.threads,
                                     seed=args.seed, kernel=args.kernel)
    summary = {"records": [r.as_dict() for r in records]}
    if len(records) >= 3:
        summary["ushape"] = bench.check_ushape(records).as_dict()
    out = _out_dir(args)
    if out is not None:
        lines = [BenchRecord.CSV_HEADER] + [r.csv_row() for r in records]
        (out / "bench.csv").write_text("\n".join(lines) + "\n")
        (out / "bench.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    else:
        print(BenchRecord.CSV_HEADER)
        for r in records:
            print(r.csv_row())
    if "ushape" in summary:
        print(json.dumps(summary["ushape"], sort_keys=True), file=sys.stderr)


def cmd_count_params(args):
    shape = tuple(args.shape) if args.shape else model.DEFAULT_INPUT_SHAPE
    spec = _spec(args, shape)
    counts = model.count_params(spec)
    report = {"arch": args.arch, **counts.as_dict(), "flatten_size": spec.flatten_size,
              "network_input": [*spec.network_input_shape, spec.in_channels]}
    write_report(_out_dir(args), "params", list(report),
                 [{**report, "network_input": "x".join(map(str, report["network_input"]))}], report)
    print(json.dumps(report, sort_keys=True))


def cmd_desk(args):
    report = bench.desk_experiment(shape=tuple(args.shape), epochs=args.epochs,
                                   seeds=tuple(args.seed + i for i in range(args.seeds)),
                                   repetitions=args.repetitions, kernel=args.kernel,
                                   progress=_progress(args))
    summary = report.as_dict()
    rows = [r.as_dict() for res in report.comparison.values() for r in res]
    write_report(_out_dir(args), "desk", training.RunResult.CSV_FIELDS, rows, summary)
    print(json.dumps({k: summary[k] for k in ("median_test_mse", "proposed_wins", "selected_k")},
                     sort_keys=True))


# --- parser ------------------------------------------------------------------------

def _common(p):
    p.add_argument("--seed", type=int, default=0, help="base random seed")
    p.add_argument("--out", default=None, help="output directory (or file where noted)")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads (bench) or seed-level worker processes (training)")


def _training_flags(p, arch="proposed"):
    p.add_argument("--data", required=True, help="dataset directory with manifest.csv")
    p.add_argument("--arch", default=arch, choices=sorted(model.ARCHITECTURES))
    p.add_argument("--k", type=int, default=None, help="override the segmentation rate")
    p.add_argument("--hidden", type=int, default=None, help="hidden dense units")
    p.add_argument("--filters", type=_int_list, default=None, help="block filters, e.g. 64,32,16,8")
    p.add_argument("--epochs", type=int, default=700)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--seeds", type=int, default=5, help="number of initialisations")
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--kernel", choices=("blas", "blocked"), default="blas")
    p.add_argument("--prepool", choices=("none", *data.POOL_STRATEGIES), default="none",
                   help="factor-3 pre-pooling applied after loading")
    p.add_argument("--verbose", action="store_true", help="per-epoch progress on stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="volconv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic cohort")
    _common(p)
    p.add_argument("--config", help="generator JSON config")
    p.add_argument("--raw", action="store_true", help="write pre-pooling sized volumes")
    p.add_argument("--shape", type=int, nargs=3, metavar=("X", "Y", "Z"))
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-test", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("preprocess", help="factor pre-pooling of a volume file")
    _common(p)
    p.add_argument("--strategy", choices=data.POOL_STRATEGIES, default="average")
    p.add_argument("--factor", type=int, default=3)
    p.add_argument("src", metavar="IN")
    p.add_argument("dest", metavar="OUT", nargs="?")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("segment", help="regional segmentation of a volume file")
    _common(p)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--boundary", type=int, default=3)
    p.add_argument("--orient", choices=("native", "min_overlap", "max_overlap"), default="native")
    p.add_argument("--tau", type=float, default=0.0, help="foreground threshold")
    p.add_argument("src", metavar="IN")
    p.add_argument("dest", metavar="OUT", nargs="?")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("train", help="multi-seed training with best-validation checkpoints")
    _common(p)
    _training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score saved weights on a split")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--spec", help="spec.json written by train")
    p.add_argument("--arch", default="proposed", choices=sorted(model.ARCHITECTURES))
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--split", choices=data.SPLITS, default="test")
    p.add_argument("--kernel", choices=("blas", "blocked"), default="blas")
    p.add_argument("--prepool", choices=("none", *data.POOL_STRATEGIES), default="none")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-k", help="segmentation-rate sweep")
    _common(p)
    _training_flags(p)
    p.add_argument("--ks", type=_int_list, default=[1, 2, 3, 4])
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("sweep-hidden", help="hidden-unit sweep")
    _common(p)
    _training_flags(p)
    p.add_argument("--grid", type=_int_list, default=[256, 2496, 4736, 6976, 9216])
    p.set_defaults(func=cmd_sweep_hidden)

    p = sub.add_parser("sweep-size", help="training-set-size sweep")
    _common(p)
    _training_flags(p)
    p.add_argument("--archs", type=lambda s: s.split(","), default=["proposed", "baseline"])
    p.add_argument("--sizes", type=_size_list, default=[100, 200, 300, 400, None],
                   help="comma-separated sizes; 'full' for the whole split")
    p.set_defaults(func=cmd_sweep_size)

    p = sub.add_parser("bench-conv", help="constant-work convolution timing sweep")
    _common(p)
    p.add_argument("--reps", type=int, default=500)
    p.add_argument("--ks", type=_int_list, default=list(bench.DEFAULT_KS))
    p.add_argument("--base", type=int, default=72)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--filters", type=int, default=8)
    p.add_argument("--kernel", choices=("blas", "blocked"), default="blocked")
    p.set_defaults(func=cmd_bench_conv)

    p = sub.add_parser("count-params", help="parameter counts of an architecture")
    _common(p)
    p.add_argument("--arch", default="baseline", choices=sorted(model.ARCHITECTURES))
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--filters", type=_int_list, default=None)
    p.add_argument("--shape", type=int, nargs=3, metavar=("X", "Y", "Z"))
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("desk", help="desk-scale baseline vs proposed experiment")
    _common(p)
    p.add_argument("--shape", type=int, nargs=3, default=list(bench.DESK_SHAPE))
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--kernel", choices=("blas", "blocked"), default="blas")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_desk)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except (FormatError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
