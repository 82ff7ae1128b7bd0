"""Experiment configuration files.

INI syntax (``key = value`` lines) with one ``[task:<name>]`` section per
task, plus optional ``[experiment]``, ``[probe]`` and ``[meta]`` sections.
See ``CONFIG.md`` for every key.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from metaneuron.dynamics import ProbeConfig
from metaneuron.training import TrainConfig

# Per-task defaults: sizes, batch, epochs, learning rate
TASK_DEFAULTS = {
    "mnist": ((784, 500, 10), 100, 20, 1e-3),
    "fashion-mnist": ((784, 500, 10), 100, 20, 1e-3),
    "nettalk": ((189, 500, 26), 5, 20, 1e-3),
    "cifar-10": ((3072, 1500, 10), 100, 20, 1e-4),
    "tidigits": ((30, 500, 10), 10, 30, 1e-2),
    "timit": ((520, 500, 2), 32, 20, 1e-3),
    "n-mnist": ((2592, 500, 10), 100, 20, 1e-3),
}

DATASET_KINDS = ("idx", "encoded", "synthetic_temporal")
DATASET_PATH_KEYS = {
    "idx": ("train_images", "train_labels", "test_images", "test_labels"),
    "encoded": ("train_path", "test_path"),
    "synthetic_temporal": (),
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    task: str
    dataset: str
    paths: dict
    layer_sizes: tuple
    batch_size: int
    epochs: int
    lr_w: float
    lr_d: float
    T: int
    neuron_types: tuple
    seeds: tuple
    out_dir: Path
    params_file: Path | None = None
    decay: float = 0.9
    v_window: float = 0.25
    train_limit: int | None = None
    test_limit: int | None = None
    test_seed: int = 12345
    temporal: dict = field(default_factory=dict)

    def train_config(self):
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs, lr_w=self.lr_w,
                           lr_d=self.lr_d, decay=self.decay, v_window=self.v_window)

    def validate(self):
        if not self.seeds:
            raise ConfigError(f"[task:{self.task}] needs at least one seed")
        if self.dataset not in DATASET_KINDS:
            raise ConfigError(f"[task:{self.task}] unknown dataset kind {self.dataset!r}")
        for key in DATASET_PATH_KEYS[self.dataset]:
            if key not in self.paths:
                raise ConfigError(f"[task:{self.task}] missing {key}")
            if not Path(self.paths[key]).exists():
                raise ConfigError(f"[task:{self.task}] {key}: {self.paths[key]} does not exist")
        if self.params_file is not None and not Path(self.params_file).exists():
            raise ConfigError(f"[task:{self.task}] params_file {self.params_file} does not exist")
        if self.T < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"[task:{self.task}] T, epochs and batch_size must be positive")
        if not self.neuron_types:
            raise ConfigError(f"[task:{self.task}] neuron_types is empty")
        return self

    def digest(self):
        blob = repr(sorted((k, str(v)) for k, v in asdict(self).items() if k != "out_dir"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class MetaSettings:
    source: str
    epochs: int | None = None
    lr_d: float | None = None
    bandwidth_ab: float | None = None
    bandwidth_cd: float | None = None
    contrast: float = 0.5
    min_change: float = 0.05
    max_correlation: float = 0.95
    seed: int = 0


@dataclass
class Config:
    tasks: dict
    probe: ProbeConfig
    meta: MetaSettings | None
    out_dir: Path
    path: Path | None = None


def _ints(text):
    return tuple(int(x) for x in text.replace(",", " ").split())


def _words(text):
    return tuple(text.replace(",", " ").split())


def _opt_int(sec, key):
    return sec.getint(key) if key in sec else None


def _opt_float(sec, key):
    return sec.getfloat(key) if key in sec else None


def load_config(path, out_override=None, seed_override=None):
    """Parse a config file.  Relative paths resolve against the file's folder."""
    path = Path(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if not parser.read(path):
        raise ConfigError(f"cannot read config {path}")
    base = path.parent
    exp = parser["experiment"] if parser.has_section("experiment") else {}

    def resolve(p):
        p = Path(p).expanduser()
        return p if p.is_absolute() else base / p

    out_dir = Path(out_override) if out_override else resolve(exp.get("out", "results"))
    default_seeds = _ints(exp.get("seeds", "0"))
    tasks = {}
    for name in parser.sections():
        if not name.startswith("task:"):
            continue
        task = name.split(":", 1)[1].strip()
        sec = parser[name]
        sizes_d, batch_d, epochs_d, lr_d_ = TASK_DEFAULTS.get(task.lower(), ((None,) * 3, 100, 20, 1e-3))
        sizes = _ints(sec["layer_sizes"]) if "layer_sizes" in sec else sizes_d
        if None in sizes or len(sizes) != 3:
            raise ConfigError(f"[{name}] layer_sizes must give three integers")
        dataset = sec.get("dataset", "idx")
        paths = {k: str(resolve(sec[k])) for k in DATASET_PATH_KEYS.get(dataset, ()) if k in sec}
        seeds = _ints(sec["seeds"]) if "seeds" in sec else default_seeds
        if seed_override is not None:
            seeds = (int(seed_override),)
        temporal = {k[len("temporal_"):]: int(v) for k, v in sec.items()
                    if k.startswith("temporal_")}
        cfg = ExperimentConfig(
            task=task, dataset=dataset, paths=paths, layer_sizes=sizes,
            batch_size=sec.getint("batch_size", batch_d),
            epochs=sec.getint("epochs", epochs_d),
            lr_w=sec.getfloat("lr_w", lr_d_),
            lr_d=sec.getfloat("lr_d", 1e-3),
            T=sec.getint("T", 20),
            neuron_types=_words(sec.get("neuron_types", "1st-order")),
            seeds=seeds,
            out_dir=out_dir,
            params_file=resolve(sec["params_file"]) if "params_file" in sec else None,
            decay=sec.getfloat("decay", 0.9),
            v_window=sec.getfloat("v_window", 0.25),
            train_limit=_opt_int(sec, "train_limit"),
            test_limit=_opt_int(sec, "test_limit"),
            test_seed=sec.getint("test_seed", 12345),
            temporal=temporal,
        )
        tasks[task] = cfg.validate()

    probe = ProbeConfig()
    if parser.has_section("probe"):
        sec = parser["probe"]
        probe = replace(probe, **{k: (int if k == "horizon" else float)(sec[k])
                                  for k in ("std", "mean", "period", "horizon", "dt") if k in sec})
    meta = None
    if parser.has_section("meta"):
        sec = parser["meta"]
        if "source" not in sec:
            raise ConfigError("[meta] needs a source task")
        meta = MetaSettings(
            source=sec["source"], epochs=_opt_int(sec, "epochs"), lr_d=_opt_float(sec, "lr_d"),
            bandwidth_ab=_opt_float(sec, "bandwidth_ab"),
            bandwidth_cd=_opt_float(sec, "bandwidth_cd"),
            contrast=sec.getfloat("contrast", 0.5), min_change=sec.getfloat("min_change", 0.05),
            max_correlation=sec.getfloat("max_correlation", 0.95),
            seed=int(seed_override) if seed_override is not None else sec.getint("seed", 0))
        if meta.source not in tasks:
            raise ConfigError(f"[meta] source {meta.source!r} is not a configured task")
    return Config(tasks, probe, meta, out_dir, path)
