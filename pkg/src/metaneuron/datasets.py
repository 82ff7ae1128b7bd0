"""Dataset loading and spike encoding.

Training code only needs three things from a dataset: ``n_samples``,
``labels`` and ``batch(indices, stream)`` returning time-major spikes of
shape ``(T, B, neurons)``.  :class:`RateEncoded` draws its Bernoulli spikes
lazily (MNIST at T=20 would not fit in memory as a dense array), while
:class:`EncodedDataset` holds pre-computed spikes.
"""

from __future__ import annotations

import gzip
import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class EncodedFormatError(ValueError):
    pass


@dataclass
class LabeledDense:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    shape: tuple = ()

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")
        if self.features.size and (self.features.min() < 0 or self.features.max() > 1):
            raise ValueError("features must lie in [0, 1]")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label out of range")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return LabeledDense(self.features[idx], self.labels[idx], self.n_classes, self.shape)


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else path.open("rb")


def read_idx(path, expected_magic):
    """Read one IDX file into a uint8 array of the declared shape."""
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 8:
        raise IdxTruncatedError(f"{path}: header truncated")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(data) < head:
        raise IdxTruncatedError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", data[4:head])
    count = int(np.prod(dims))
    if len(data) - head < count:
        raise IdxTruncatedError(f"{path}: payload has {len(data) - head} bytes, needs {count}")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=head).reshape(dims)


def load_idx(images_path, labels_path, n_classes=10):
    """Parse an IDX image/label pair; pixels are scaled to ``[0, 1]``."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise IdxCountMismatchError(
            f"{len(images)} images but {len(labels)} labels")
    feats = images.reshape(len(images), -1).astype(float) / 255.0
    return LabeledDense(feats, labels.astype(np.int64), n_classes, images.shape[1:])


def write_idx(path, array):
    """Write a uint8 array as IDX (used for fixtures and conversions)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with Path(path).open("wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_mnist_dir(root, split="train"):
    """``<root>/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]``."""
    root = Path(root)
    prefix = "train" if split == "train" else "t10k"
    found = []
    for kind in ("images-idx3", "labels-idx1"):
        base = root / f"{prefix}-{kind}-ubyte"
        path = base if base.exists() else base.with_name(base.name + ".gz")
        if not path.exists():
            raise FileNotFoundError(base)
        found.append(path)
    return load_idx(*found)


# --------------------------------------------------------------------------
# encodings
# --------------------------------------------------------------------------

def _sample_rng(seed, stream, index):
    return np.random.default_rng([int(seed), int(stream), int(index)])


class RateEncoded:
    """Bernoulli rate coding drawn on demand.

    Sample ``i`` in stream ``s`` always gets the same spikes, independent of
    which batch it lands in: its generator is seeded with ``(seed, s, i)``.
    """

    def __init__(self, dense, T, seed=0):
        if T < 1:
            raise ValueError("T must be at least 1")
        self.dense = dense
        self.T = int(T)
        self.seed = int(seed)

    @property
    def n_samples(self):
        return len(self.dense)

    @property
    def labels(self):
        return self.dense.labels

    @property
    def n_classes(self):
        return self.dense.n_classes

    @property
    def n_neurons(self):
        return self.dense.features.shape[1]

    def batch(self, idx, stream=0):
        idx = np.asarray(idx)
        feats = self.dense.features
        out = np.empty((self.T, len(idx), feats.shape[1]))
        for k, i in enumerate(idx):
            draws = _sample_rng(self.seed, stream, i).random((self.T, feats.shape[1]))
            out[:, k, :] = draws < feats[i]
        return out


@dataclass
class EncodedDataset:
    """Binary spikes ``(samples, neurons, T)`` with labels."""

    spikes: np.ndarray
    labels: np.ndarray
    n_classes: int
    descriptor: dict = field(default_factory=dict)

    def __post_init__(self):
        self.spikes = np.asarray(self.spikes, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.spikes.ndim != 3:
            raise ValueError("spikes must be (samples, neurons, T)")
        if len(self.spikes) != len(self.labels):
            raise ValueError("spike and label counts differ")
        if self.spikes.size and self.spikes.max() > 1:
            raise ValueError("spikes must be binary")

    @property
    def n_samples(self):
        return len(self.labels)

    @property
    def n_neurons(self):
        return self.spikes.shape[1]

    @property
    def T(self):
        return self.spikes.shape[2]

    def batch(self, idx, stream=0):
        return np.ascontiguousarray(self.spikes[np.asarray(idx)].transpose(2, 0, 1), dtype=float)

    def subset(self, idx):
        return EncodedDataset(self.spikes[idx], self.labels[idx], self.n_classes,
                              dict(self.descriptor))


def encode_rate(data, T, seed=0, stream=0):
    """Materialise the rate code of ``data`` (same draws as :class:`RateEncoded`)."""
    lazy = RateEncoded(data, T, seed)
    spikes = lazy.batch(np.arange(len(data)), stream).transpose(1, 2, 0)
    return EncodedDataset(spikes.astype(np.uint8), data.labels.copy(), data.n_classes,
                          {"method": "rate", "T": int(T), "seed": int(seed),
                           "stream": int(stream)})


# --------------------------------------------------------------------------
# container
# --------------------------------------------------------------------------

ENCODED_MAGIC = b"MDNSPK"
ENCODED_VERSION = 1
_HEADER = struct.Struct("<6sBxIIII")


def save_encoded(dataset, path):
    """Write the bit-packed container documented in ``FORMATS.md``."""
    S, N, T = dataset.spikes.shape
    bits = np.packbits(dataset.spikes.reshape(-1), bitorder="little")
    desc = json.dumps(dataset.descriptor, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(ENCODED_MAGIC, ENCODED_VERSION, S, N, T, dataset.n_classes))
        fh.write(bits.tobytes())
        fh.write(dataset.labels.astype("<u4").tobytes())
        fh.write(struct.pack("<I", len(desc)))
        fh.write(desc)
    return Path(path)


def load_encoded(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise EncodedFormatError(f"{path}: header truncated")
    magic, version, S, N, T, C = _HEADER.unpack_from(data)
    if magic != ENCODED_MAGIC:
        raise EncodedFormatError(f"{path}: bad magic {magic!r}")
    if version != ENCODED_VERSION:
        raise EncodedFormatError(f"{path}: unsupported version {version}")
    nbits = S * N * T
    nbytes = (nbits + 7) // 8
    off = _HEADER.size
    need = off + nbytes + 4 * S + 4
    if len(data) < need:
        raise EncodedFormatError(f"{path}: payload truncated ({len(data)} < {need} bytes)")
    packed = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=off)
    spikes = np.unpackbits(packed, count=nbits, bitorder="little").reshape(S, N, T)
    off += nbytes
    labels = np.frombuffer(data, dtype="<u4", count=S, offset=off).astype(np.int64)
    off += 4 * S
    (dlen,) = struct.unpack_from("<I", data, off)
    off += 4
    if len(data) != off + dlen:
        raise EncodedFormatError(f"{path}: descriptor length does not match file size")
    descriptor = json.loads(data[off:off + dlen]) if dlen else {}
    if S and labels.max() >= C:
        raise EncodedFormatError(f"{path}: label {labels.max()} >= class count {C}")
    return EncodedDataset(spikes, labels, C, descriptor)


# --------------------------------------------------------------------------
# synthetic temporal task
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TemporalConfig:
    """Ordered channel groups; only the order of groups differs by class.

    Channels are split into ``groups`` groups and the ``frames`` steps into as
    many equal segments.  Class ``c`` plays the groups in its own order, one
    group per segment.  Inside a segment every channel of the active group
    emits exactly ``spikes_per_channel`` spikes at random frames among the
    first ``segment - gap`` frames.  Every channel therefore fires the same
    number of times in every sample.
    """

    classes: int = 4
    channels: int = 30
    frames: int = 30
    groups: int = 3
    spikes_per_channel: int = 4
    gap: int = 2
    samples_per_class: int = 100


def class_orders(groups, classes):
    perms = list(itertools.permutations(range(groups)))
    if classes > len(perms):
        raise ValueError(f"{groups} groups allow at most {len(perms)} classes")
    return perms[:classes]


def gen_synthetic_temporal(config=None, seed=0):
    cfg = config or TemporalConfig()
    if cfg.channels % cfg.groups or cfg.frames % cfg.groups:
        raise ValueError("channels and frames must divide evenly into groups")
    seg = cfg.frames // cfg.groups
    active = seg - cfg.gap
    if not 0 < cfg.spikes_per_channel <= active:
        raise ValueError(
            f"infeasible budget: {cfg.spikes_per_channel} spikes in {active} active frames")
    orders = class_orders(cfg.groups, cfg.classes)
    per_group = cfg.channels // cfg.groups
    rng = np.random.default_rng(seed)
    n = cfg.classes * cfg.samples_per_class
    labels = np.repeat(np.arange(cfg.classes), cfg.samples_per_class)
    spikes = np.zeros((n, cfg.channels, cfg.frames), dtype=np.uint8)
    for s in range(n):
        order = orders[labels[s]]
        for slot, grp in enumerate(order):
            # independent random frame subset per channel
            keys = rng.random((per_group, active))
            frames = np.argsort(keys, axis=1)[:, :cfg.spikes_per_channel] + slot * seg
            chans = np.arange(grp * per_group, (grp + 1) * per_group)
            spikes[s, chans[:, None], frames] = 1
    perm = rng.permutation(n)
    return EncodedDataset(spikes[perm], labels[perm], cfg.classes,
                          {"method": "synthetic_temporal", "T": cfg.frames, "seed": int(seed),
                           "classes": cfg.classes, "channels": cfg.channels,
                           "groups": cfg.groups, "spikes_per_channel": cfg.spikes_per_channel,
                           "gap": cfg.gap})
