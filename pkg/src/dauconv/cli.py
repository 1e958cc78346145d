"""Command-line entry point: train, eval, prune, analyze, bench, gradcheck.

Every run writes its artifacts under --out together with a manifest listing
the inputs, the config hash, and the content hash of any checkpoint used.
Exit codes: 0 success, 2 usage/config, 3 data or format, 4 numerical failure,
5 I/O.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import analysis, bench
from .checkpoint import CheckpointError, load_checkpoint, restore_velocities, save_checkpoint
from .config import ConfigError, git_blob_sha1, load_run_config
from .data import FormatError, load_cifar10, load_idx_bundle, make_synthetic_displacement
from .gradcheck import GROUPS, render_report, run_gradcheck
from .network import BuildError, build_network
from .nn import DataError
from .optim import OptimizerError
from .train import TrainingDiverged, evaluate, format_float, train, write_history

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _limit_threads(n):
    import threadpoolctl
    threadpoolctl.threadpool_limits(limits=max(1, n))


def _load_bundle(run):
    v = run.values
    kind = v["data"]
    if kind == "synthetic":
        bundle = make_synthetic_displacement(
            v["data.n"], seed=v["seed"], offset=v["data.offset"],
            blob_sigma=v["data.blob_sigma"], noise=v["data.noise"],
            n_test=v["data.n_test"])
        inputs = ["synthetic"]
    elif kind == "cifar10":
        if not v["data.dir"]:
            raise CliError(EXIT_USAGE, "data=cifar10 requires data.dir")
        bundle = load_cifar10(v["data.dir"])
        inputs = [v["data.dir"]]
    elif kind == "idx":
        paths = [v["data.train_images"], v["data.train_labels"],
                 v["data.test_images"], v["data.test_labels"]]
        if not all(paths):
            raise CliError(EXIT_USAGE,
                           "data=idx requires data.train_images, data.train_labels, "
                           "data.test_images, data.test_labels")
        bundle = load_idx_bundle(*paths)
        inputs = paths
    else:
        raise CliError(EXIT_USAGE, f"unknown data kind {kind!r}")
    limit = v["data.limit"]
    if limit:
        bundle.train.images = bundle.train.images[:limit]
        bundle.train.labels = bundle.train.labels[:limit]
    if v["precision"] == "f32":
        bundle.train.images = bundle.train.images.astype(np.float32)
        bundle.test.images = bundle.test.images.astype(np.float32)
    return bundle, inputs


def _write_manifest(out_dir, command, run, inputs, outputs, checkpoint_path=None):
    manifest = {
        "command": command,
        "config_source": run.source,
        "config_sha1": git_blob_sha1(run.raw_text.encode("utf-8")),
        "inputs": list(inputs),
        "outputs": sorted(outputs),
        "seed": run["seed"],
        "threads": run["threads"],
        "precision": run["precision"],
    }
    if checkpoint_path:
        with open(checkpoint_path, "rb") as fh:
            manifest["checkpoint_sha1"] = git_blob_sha1(fh.read())
        manifest["checkpoint"] = checkpoint_path
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _out_dir(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _checkpoint_arg(run, args, required=True):
    path = getattr(args, "checkpoint", None) or run["checkpoint"]
    if not path and required:
        raise CliError(EXIT_USAGE,
                       "missing checkpoint: pass --checkpoint or set checkpoint=")
    return path


def cmd_train(args, run):
    out = _out_dir(args)
    bundle, inputs = _load_bundle(run)
    net = build_network(run.network_spec)
    ckpt_path = os.path.join(out, "checkpoint.ckpt")
    eval_interval = run["eval_interval"] or None
    history, groups = train(
        net, bundle, run.train_config,
        augment_mirror=run["augment_mirror"], eval_interval=eval_interval,
        checkpoint_path=ckpt_path, checkpoint_interval=run["checkpoint_interval"])
    save_checkpoint(ckpt_path, net, groups, step=run.train_config.total_iterations)
    hist_path = os.path.join(out, "history.csv")
    write_history(history, hist_path)
    outputs = [hist_path, ckpt_path]
    outputs.append(_write_manifest(out, "train", run, inputs, outputs, ckpt_path))
    last = history[-1]
    print(f"trained {run.train_config.total_iterations} steps; "
          f"final train_acc {format_float(last['train_acc'])} "
          f"test_acc {format_float(last['test_acc'])}")
    return EXIT_OK


def cmd_eval(args, run):
    out = _out_dir(args)
    ckpt = _checkpoint_arg(run, args)
    net, meta, _ = load_checkpoint(ckpt)
    bundle, inputs = _load_bundle(run)
    acc, loss = evaluate(net, bundle.test)
    path = os.path.join(out, "eval.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("split,accuracy,mean_loss\n")
        fh.write(f"test,{format_float(acc)},{format_float(loss)}\n")
    _write_manifest(out, "eval", run, inputs + [ckpt], [path], ckpt)
    print(f"accuracy {format_float(acc)} mean_loss {format_float(loss)}")
    return EXIT_OK


def cmd_prune(args, run):
    out = _out_dir(args)
    ckpt = _checkpoint_arg(run, args)
    net, meta, _ = load_checkpoint(ckpt)
    threshold = args.threshold if args.threshold is not None else run["prune.threshold"]
    bundle = None
    inputs = [ckpt]
    try:
        bundle, data_inputs = _load_bundle(run)
        inputs += data_inputs
    except CliError:
        bundle = None
    report = analysis.prune(net, threshold, scope=run["prune.scope"], bundle=bundle)
    report_path = os.path.join(out, "prune_report.csv")
    analysis.write_prune_report(report, report_path)
    pruned_path = os.path.join(out, "pruned.ckpt")
    save_checkpoint(pruned_path, net, step=meta.get("step", 0))
    outputs = [report_path, pruned_path]
    outputs.append(_write_manifest(out, "prune", run, inputs, outputs, ckpt))
    print(f"threshold {format_float(threshold)}: removed "
          f"{format_float(report.removed_fraction)} of units "
          f"({report.units_before} -> {report.units_after})")
    if report.accuracy_before is not None:
        print(f"accuracy {format_float(report.accuracy_before)} -> "
              f"{format_float(report.accuracy_after)}")
    return EXIT_OK


TOP_FRACTIONS = (1.0, 0.9, 0.75)


def cmd_analyze(args, run):
    out = _out_dir(args)
    ckpt = _checkpoint_arg(run, args)
    net, _, _ = load_checkpoint(ckpt)
    outputs = []
    if args.histograms:
        for idx, layer in net.dau_layers():
            for frac in TOP_FRACTIONS:
                for kind, tag in (("radial_1d", "radial"), ("planar_2d", "planar")):
                    hist = analysis.displacement_histograms(
                        layer.params, layer.cfg.max_displacement,
                        top_fraction=frac, kind=kind, n_bins=run["analyze.bins"])
                    name = f"hist_{tag}_layer{idx}_top{int(frac * 100)}.csv"
                    path = os.path.join(out, name)
                    analysis.write_histogram(hist, path)
                    outputs.append(path)
    if args.erf:
        layer_idx = run["analyze.layer"]
        if layer_idx < 0:
            dau = net.dau_layers()
            if not dau:
                raise CliError(EXIT_USAGE, "network has no aggregation-unit layer")
            layer_idx = dau[-1][0]
        shape = net.spec.input_shape
        probe = np.ones((1, *shape))
        erf = analysis.compute_erf(net, layer_idx, probe)
        grid_path = os.path.join(out, f"erf_grid_layer{layer_idx}.csv")
        levels_path = os.path.join(out, f"erf_levels_layer{layer_idx}.csv")
        svg_path = os.path.join(out, f"erf_layer{layer_idx}.svg") if args.svg else None
        analysis.write_erf(erf, grid_path, levels_path, svg_path)
        outputs += [grid_path, levels_path] + ([svg_path] if svg_path else [])
    if not outputs:
        raise CliError(EXIT_USAGE, "analyze: nothing to do (pass --histograms and/or --erf)")
    outputs.append(_write_manifest(out, "analyze", run, [ckpt], outputs, ckpt))
    print(f"wrote {len(outputs)} artifacts under {out}")
    return EXIT_OK


def cmd_bench(args, run):
    out = _out_dir(args)
    cfg = bench.BenchConfig(
        channels=run["bench.channels"], units=run["bench.units"],
        sigma=run["bench.sigma"], max_displacement=run["bench.dmax"],
        height=run["bench.size"], width=run["bench.size"],
        batch=run["bench.batch"], warmup=run["bench.warmup"],
        iters=run["bench.iters"], precision=run["precision"], seed=run["seed"])
    rows, side = bench.run_bench(cfg)
    path = os.path.join(out, "bench.csv")
    bench.write_bench(rows, path)
    _write_manifest(out, "bench", run, [], [path])
    print(bench.render_bench(rows, side))
    return EXIT_OK


def cmd_gradcheck(args, run):
    if run["precision"] != "f64":
        raise CliError(EXIT_USAGE, "gradcheck requires --precision f64")
    rows = run_gradcheck(inject=args.inject, seed=run["seed"])
    print(render_report(rows))
    failed = [r for r in rows if not r["passed"]]
    if failed:
        names = ", ".join(r["group"] for r in failed)
        print(f"gradient check FAILED for: {names}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dauconv",
        description="Train, analyze, and benchmark networks whose convolution "
                    "filters are mixtures of displaced Gaussian aggregation units.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--out", help="output directory (default: current)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker/BLAS thread cap; 1 (default) is bit-reproducible")
        p.add_argument("--precision", choices=("f32", "f64"), default=None)

    p = sub.add_parser("train", help="train a network and write history + checkpoint")
    common(p)
    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p)
    p.add_argument("--checkpoint")
    p = sub.add_parser("prune", help="deactivate units below a relative weight threshold")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--threshold", type=float, default=None)
    p = sub.add_parser("analyze", help="displacement histograms and effective receptive fields")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--histograms", action="store_true")
    p.add_argument("--erf", action="store_true")
    p.add_argument("--svg", action="store_true")
    p = sub.add_parser("bench", help="time the efficient path against dense convolution")
    common(p)
    p = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    common(p)
    p.add_argument("--inject", choices=GROUPS, default=None,
                   help="scale one group's analytic gradient by 1.01 to test the harness")
    return parser


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "prune": cmd_prune,
            "analyze": cmd_analyze, "bench": cmd_bench, "gradcheck": cmd_gradcheck}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        overrides = list(args.set)
        if args.threads is not None:
            overrides.append(f"threads={args.threads}")
        if args.precision is not None:
            overrides.append(f"precision={args.precision}")
        run = load_run_config(args.config, overrides,
                              require_layers=args.command in ("train",))
        _limit_threads(run["threads"])
        return COMMANDS[args.command](args, run)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, BuildError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OptimizerError, TrainingDiverged) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
