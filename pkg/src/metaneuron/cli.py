"""``metaneuron`` command line.

Verbs: train, eval, meta, capability, traces, encode.  Global flags
(--config, --seed, --out, --threads) go before the verb.
"""

from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

log = logging.getLogger("metaneuron")


def _parser():
    p = argparse.ArgumentParser(prog="metaneuron", description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, help="experiment config file (INI)")
    p.add_argument("--seed", type=int, help="override the configured seed list with one seed")
    p.add_argument("--out", type=Path, help="output directory (overrides the config)")
    p.add_argument("--threads", type=int, help="BLAS thread count")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="verb", required=True)

    tr = sub.add_parser("train", help="train/evaluate every neuron type per seed")
    tr.add_argument("--task", action="append", help="only these tasks (repeatable)")
    tr.add_argument("--types", nargs="+", help="only these neuron types")
    tr.add_argument("--timing", action="store_true",
                    help="fill the seconds column (makes outputs non-reproducible)")
    tr.add_argument("--no-checkpoints", action="store_true")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a task's test set")
    ev.add_argument("checkpoint", type=Path)
    ev.add_argument("--task", required=True)

    sub.add_parser("meta", help="generate neuron types from the [meta] source task")

    cap = sub.add_parser("capability", help="z-score accuracies per task")
    cap.add_argument("summaries", nargs="+", type=Path, help="summary.csv files")
    cap.add_argument("-o", "--output", type=Path, help="capability CSV (default <out>/capability.csv)")

    trc = sub.add_parser("traces", help="write probe traces per neuron type")
    trc.add_argument("--params", type=Path, help="params file (default: built-in table)")

    enc = sub.add_parser("encode", help="write an encoded spike dataset")
    src = enc.add_mutually_exclusive_group(required=True)
    src.add_argument("--idx", nargs=2, metavar=("IMAGES", "LABELS"), type=Path)
    src.add_argument("--synthetic", action="store_true", help="synthetic temporal task")
    enc.add_argument("-T", type=int, default=20, help="timesteps (rate code) or frames")
    enc.add_argument("--classes", type=int, default=10, help="class count for IDX labels")
    enc.add_argument("--limit", type=int, help="encode only the first N samples")
    enc.add_argument("-o", "--output", type=Path, required=True)
    return p


def _config(args, required=True):
    from metaneuron.config import load_config

    if args.config is None:
        if required:
            raise SystemExit("error: --config is required for this verb")
        return None
    return load_config(args.config, args.out, args.seed)


def cmd_train(args):
    from metaneuron.experiments import run_experiment

    cfg = _config(args)
    names = args.task or list(cfg.tasks)
    for name in names:
        if name not in cfg.tasks:
            raise SystemExit(f"error: unknown task {name!r}")
    for name in names:
        res = run_experiment(cfg.tasks[name], with_time=args.timing,
                             checkpoints=not args.no_checkpoints, types=args.types)
        for label in res.accuracies:
            mean, std = res.mean_std(label)
            print(f"{name}\t{label}\t{mean:.2f} +- {std:.2f}")
        print(f"summary: {res.summary_path}")
    return 0


def cmd_eval(args):
    from metaneuron.experiments import load_task_data
    from metaneuron.network import load_checkpoint
    from metaneuron.training import evaluate

    cfg = _config(args)
    task = cfg.tasks[args.task]
    model = load_checkpoint(args.checkpoint)
    _, test = load_task_data(task, model.seed)
    print(f"{evaluate(model, test):.2f}")
    return 0


def cmd_meta(args):
    from metaneuron.experiments import run_meta_pipeline
    from metaneuron.meta import EmptySelectionError

    cfg = _config(args)
    try:
        path = run_meta_pipeline(cfg)
    except EmptySelectionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(path)
    return 0


def cmd_capability(args):
    from metaneuron.experiments import capability, read_summaries, write_capability

    matrix = read_summaries(args.summaries)
    caps = capability(matrix)
    out = args.output or (args.out or Path(".")) / "capability.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    print(write_capability(out, matrix, caps))
    return 0


def cmd_traces(args):
    from metaneuron.dynamics import ProbeConfig, builtin_types, read_params_file
    from metaneuron.experiments import emit_traces

    cfg = _config(args, required=False)
    probe = cfg.probe if cfg else ProbeConfig()
    named = read_params_file(args.params) if args.params else builtin_types()
    out = args.out or (cfg.out_dir if cfg else Path("traces"))
    written = emit_traces(named, probe, out)
    for label, path in written.items():
        print(f"{label}\t{path if path else 'diverged'}")
    return 0


def cmd_encode(args):
    from metaneuron.datasets import (
        TemporalConfig,
        encode_rate,
        gen_synthetic_temporal,
        load_idx,
        save_encoded,
    )

    seed = 0 if args.seed is None else args.seed
    if args.synthetic:
        ds = gen_synthetic_temporal(TemporalConfig(frames=args.T), seed)
    else:
        dense = load_idx(*args.idx, n_classes=args.classes)
        if args.limit:
            dense = dense.subset(np.arange(min(args.limit, len(dense))))
        ds = encode_rate(dense, args.T, seed)
    if args.limit and args.synthetic:
        ds = ds.subset(np.arange(min(args.limit, ds.n_samples)))
    print(save_encoded(ds, args.output))
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "meta": cmd_meta,
            "capability": cmd_capability, "traces": cmd_traces, "encode": cmd_encode}


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(message)s")
    limiter = nullcontext()
    if args.threads:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    with limiter:
        return COMMANDS[args.verb](args)


if __name__ == "__main__":
    sys.exit(main())
