"""Batch drivers behind the CLI: training sweeps, capability, traces, meta."""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from metaneuron.datasets import (
    EncodedDataset,
    RateEncoded,
    TemporalConfig,
    gen_synthetic_temporal,
    load_encoded,
    load_idx,
)
from metaneuron.dynamics import (
    DivergenceError,
    NeuronKind,
    builtin_types,
    probe_response,
    read_params_file,
    write_params_file,
)
from metaneuron.meta import (
    EmptySelectionError,
    FilterConfig,
    cluster_cloud,
    combine_centers,
    filter_candidates,
    train_dynamic_params,
)
from metaneuron.network import LayerParams, init_network, save_checkpoint
from metaneuron.training import evaluate, fit, write_records

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["task", "neuron_type", "mean_acc", "std_acc", "seeds"]
CAPABILITY_COLUMNS = ["task", "neuron_type", "cap"]


# --------------------------------------------------------------------------
# data and models
# --------------------------------------------------------------------------

def _limit(ds, n):
    if n is None or n >= ds.n_samples:
        return ds
    idx = np.arange(n)
    if isinstance(ds, RateEncoded):
        return RateEncoded(ds.dense.subset(idx), ds.T, ds.seed)
    return ds.subset(idx)


def load_task_data(cfg, seed=0):
    """Train and test datasets for one task.  ``seed`` drives the training
    encoding; the test encoding always uses ``cfg.test_seed``."""
    if cfg.dataset == "idx":
        p = cfg.paths
        n_classes = cfg.layer_sizes[2]
        train = RateEncoded(load_idx(p["train_images"], p["train_labels"], n_classes), cfg.T, seed)
        test = RateEncoded(load_idx(p["test_images"], p["test_labels"], n_classes), cfg.T,
                           cfg.test_seed)
    elif cfg.dataset == "encoded":
        train = load_encoded(cfg.paths["train_path"])
        test = load_encoded(cfg.paths["test_path"])
    else:
        tcfg = TemporalConfig(**{"frames": cfg.T, **cfg.temporal})
        train = gen_synthetic_temporal(tcfg, seed)
        test = gen_synthetic_temporal(tcfg, cfg.test_seed + seed)
    return _limit(train, cfg.train_limit), _limit(test, cfg.test_limit)


def neuron_table(cfg=None):
    types = builtin_types()
    if cfg is not None and cfg.params_file is not None:
        types.update(read_params_file(cfg.params_file))
    return types


def layer_for(label, table, n):
    """LayerParams for a type label; ``A+B`` splits the layer into equal
    contiguous blocks of each type."""
    names = label.split("+")
    for nm in names:
        if nm not in table:
            raise KeyError(f"unknown neuron type {nm!r}")
    block = np.arange(n) * len(names) // n
    return LayerParams([table[nm] for nm in names], block)


def build_model(cfg, label, seed, table=None):
    table = table or neuron_table(cfg)
    n_h, n_out = cfg.layer_sizes[1:]
    hidden = layer_for(label, table, n_h)
    output = layer_for(label.split("+")[0], table, n_out)
    return init_network(cfg.layer_sizes, cfg.T, seed, hidden=hidden, output=output)


def _safe(label):
    return re.sub(r"[^A-Za-z0-9._+-]", "_", label)


# --------------------------------------------------------------------------
# training sweeps
# --------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    task: str
    accuracies: dict = field(default_factory=dict)  # type -> [acc per seed]
    record_paths: dict = field(default_factory=dict)
    summary_path: Path | None = None

    def mean_std(self, label):
        acc = np.asarray(self.accuracies[label])
        return float(acc.mean()), summary_std(acc)


def summary_std(acc):
    """Sample standard deviation over seeds (0 for a single seed)."""
    acc = np.asarray(acc, dtype=float)
    return float(acc.std(ddof=1)) if len(acc) > 1 else 0.0


def run_experiment(cfg, with_time=False, checkpoints=True, types=None):
    """Train and evaluate every neuron type once per seed.

    Writes ``<out>/<task>/<type>/seed<k>.csv`` (and ``.ckpt``) per run and
    ``<out>/<task>/summary.csv`` with mean and std of the final accuracies.
    """
    cfg.validate()
    table = neuron_table(cfg)
    labels = tuple(types or cfg.neuron_types)
    for label in labels:
        layer_for(label, table, 1)  # fail before training on unknown types
    task_dir = Path(cfg.out_dir) / _safe(cfg.task)
    result = ExperimentResult(cfg.task)
    tc = cfg.train_config()
    for label in labels:
        run_dir = task_dir / _safe(label)
        run_dir.mkdir(parents=True, exist_ok=True)
        accs, paths = [], []
        for seed in cfg.seeds:
            train, test = load_task_data(cfg, seed)
            model = build_model(cfg, label, seed, table)
            try:
                model, records = fit(model, train, test, tc, seed)
            except (DivergenceError, FloatingPointError) as exc:
                raise RuntimeError(f"{cfg.task}/{label}/seed {seed}: {exc}") from exc
            for r in records:
                r.config_hash = cfg.digest()
            paths.append(write_records(run_dir / f"seed{seed}.csv", records, with_time))
            if checkpoints:
                save_checkpoint(model, run_dir / f"seed{seed}.ckpt")
            accs.append(records[-1].test_acc)
            log.info("%s/%s seed %d: %.2f%%", cfg.task, label, seed, accs[-1])
        result.accuracies[label] = accs
        result.record_paths[label] = paths
    result.summary_path = write_summary(task_dir / "summary.csv", cfg.task, result, cfg.seeds)
    return result


def write_summary(path, task, result, seeds):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for label, accs in result.accuracies.items():
            mean, std = result.mean_std(label)
            w.writerow([task, label, repr(mean), repr(std), " ".join(str(s) for s in seeds)])
    return Path(path)


# --------------------------------------------------------------------------
# capability
# --------------------------------------------------------------------------

@dataclass
class AccuracyMatrix:
    """Rows are neuron types, columns tasks; entries in percent."""

    types: list
    tasks: list
    mean: np.ndarray
    std: np.ndarray | None = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(len(self.types), len(self.tasks))
        if self.std is None:
            self.std = np.zeros_like(self.mean)
        self.std = np.asarray(self.std, dtype=float).reshape(self.mean.shape)
        if np.any((self.mean < 0) | (self.mean > 100)):
            raise ValueError("accuracies must lie in [0, 100]")
        if np.any(self.std < 0):
            raise ValueError("standard deviations must be non-negative")


def capability(matrix):
    """Per-task z-score of each type's accuracy (population std)."""
    acc = matrix.mean
    if acc.shape[0] < 2:
        raise ValueError("capability needs at least two neuron types per task")
    mu = acc.mean(axis=0)
    sd = acc.std(axis=0)
    flat = [matrix.tasks[j] for j in np.flatnonzero(sd == 0)]
    if flat:
        raise ValueError(f"zero spread of accuracies for task(s) {flat}")
    return (acc - mu) / sd


def read_summaries(paths):
    rows = []
    for p in paths:
        with Path(p).open(newline="") as fh:
            rows.extend(csv.DictReader(fh))
    tasks = list(dict.fromkeys(r["task"] for r in rows))
    types = list(dict.fromkeys(r["neuron_type"] for r in rows))
    mean = np.full((len(types), len(tasks)), np.nan)
    std = np.zeros_like(mean)
    for r in rows:
        i, j = types.index(r["neuron_type"]), tasks.index(r["task"])
        mean[i, j] = float(r["mean_acc"])
        std[i, j] = float(r["std_acc"])
    if np.isnan(mean).any():
        raise ValueError("summaries do not cover every (type, task) pair")
    return AccuracyMatrix(types, tasks, mean, std)


def write_capability(path, matrix, caps):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CAPABILITY_COLUMNS)
        for j, task in enumerate(matrix.tasks):
            for i, label in enumerate(matrix.types):
                w.writerow([task, label, repr(float(caps[i, j]))])
    return Path(path)


# --------------------------------------------------------------------------
# traces
# --------------------------------------------------------------------------

def emit_traces(named_params, probe, out_dir):
    """One trace CSV per neuron type under ``probe``.

    A diverging type is noted in ``traces_summary.csv`` and skipped.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    rows = []
    for label, params in named_params.items():
        if params.kind is NeuronKind.IZHIKEVICH:
            rows.append([label, "skipped (reference model)", "", "", ""])
            continue
        try:
            trace = probe_response(params, probe)
        except DivergenceError as exc:
            log.warning("%s diverged: %s", label, exc)
            rows.append([label, f"diverged: {exc}", "", "", ""])
            written[label] = None
            continue
        written[label] = trace.to_csv(out_dir / f"trace_{_safe(label)}.csv")
        first, second = trace.half_counts()
        rows.append([label, "ok", trace.spike_count, first, second])
    with (out_dir / "traces_summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["neuron_type", "status", "spikes", "first_half", "second_half"])
        w.writerows(rows)
    return written


# --------------------------------------------------------------------------
# meta pipeline
# --------------------------------------------------------------------------

def candidate_accuracy(model, params, test, batch_size=500):
    """Source-task accuracy of the co-trained weights with every neuron
    switched to ``params``."""
    probe_model = model.copy()
    for name in ("hidden", "output"):
        layer = getattr(probe_model, name)
        setattr(probe_model, name, LayerParams([params], np.zeros(layer.size, dtype=np.int64)))
    try:
        return evaluate(probe_model, test, batch_size)
    except DivergenceError:
        return 0.0


def run_meta_pipeline(config, out_dir=None):
    """Train thetas on the source task, cluster, combine, filter.

    Writes ``meta_params.csv`` (selected types), ``meta_cloud.csv`` (learned
    thetas) and ``meta_report.json`` (cluster counts, every candidate, the
    discarded ones with reasons).  Returns the params file path.
    """
    settings = config.meta
    if settings is None:
        raise ValueError("config has no [meta] section")
    task = config.tasks[settings.source]
    out_dir = Path(out_dir or config.out_dir) / "meta"
    out_dir.mkdir(parents=True, exist_ok=True)
    tc = task.train_config()
    tc = replace(tc, epochs=settings.epochs or tc.epochs, lr_d=settings.lr_d or tc.lr_d)
    seed = settings.seed
    train, test = load_task_data(task, seed)
    cloud, model, records = train_dynamic_params(
        train, test, task.layer_sizes, tc, seed, task.T, settings.source)
    write_records(out_dir / "meta_training.csv", records)

    with (out_dir / "meta_cloud.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "theta_a", "theta_b", "theta_c", "theta_d"])
        for k in range(len(cloud.points_ab)):
            w.writerow([("hidden", "output")[int(cloud.layer[k])],
                        *(repr(float(x)) for x in (*cloud.points_ab[k], *cloud.points_cd[k]))])

    ab, m_ab = cluster_cloud(cloud.points_ab, settings.bandwidth_ab, seed)
    cd, m_cd = cluster_cloud(cloud.points_cd, settings.bandwidth_cd, seed)
    candidates = combine_centers(ab, cd)
    for cand in candidates:
        cand.accuracy = candidate_accuracy(model, cand.params, test)
    fcfg = FilterConfig(config.probe, settings.contrast, settings.min_change,
                        settings.max_correlation)

    report = {
        "source": settings.source, "seed": seed, "source_accuracy": cloud.accuracy,
        "neurons": int(len(cloud.points_ab)), "m_ab": m_ab, "m_cd": m_cd,
        "ab_centers": ab.tolist(), "cd_centers": cd.tolist(),
        "candidates": [{"provenance": list(c.provenance), "thetas": list(c.params.thetas),
                        "accuracy": c.accuracy} for c in candidates],
    }
    try:
        result = filter_candidates(candidates, fcfg)
    except EmptySelectionError as exc:
        report["discarded"] = [{"provenance": list(c.provenance), "reason": r}
                               for c, r in exc.discarded]
        report["selected"] = []
        _write_json(out_dir / "meta_report.json", report)
        raise
    report["discarded"] = [{"provenance": list(c.provenance), "reason": r}
                           for c, r in result.discarded]
    # prefixed so a generated type never shadows a built-in label
    for c in result.selected:
        c.label = f"meta-{c.label}"
    report["selected"] = [{"label": c.label, "provenance": list(c.provenance)}
                          for c in result.selected]
    _write_json(out_dir / "meta_report.json", report)
    return write_params_file(out_dir / "meta_params.csv",
                             {c.label: c.params for c in result.selected})


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
