"""Three-layer spiking network: input spikes -> hidden -> output.

Layers have no lateral or recurrent weights, so the input current of a layer
for all timesteps is one matrix product; only the per-neuron recurrence in
time runs through :mod:`metaneuron.kernels`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from metaneuron import kernels
from metaneuron.dynamics import (
    DIVERGENCE_LIMIT,
    INITIAL_THETAS,
    INITIAL_U,
    INITIAL_V,
    DivergenceError,
    DynamicParams,
    NeuronKind,
    sigmoid,
)

LAYER_NAMES = ("hidden", "output")


class ConfigurationError(ValueError):
    pass


@dataclass
class LayerParams:
    """Per-neuron dynamics of one layer, stored as flat arrays.

    ``types`` indexes into ``table`` (the neuron types this layer may use);
    ``thetas`` is the materialised ``(N, 4)`` array and is what training
    updates in meta mode.
    """

    table: list
    types: np.ndarray
    thetas: np.ndarray = None
    learnable: bool = False

    def __post_init__(self):
        self.types = np.asarray(self.types, dtype=np.int64)
        if self.types.ndim != 1 or len(self.types) == 0:
            raise ConfigurationError("layer needs at least one neuron")
        if self.types.min() < 0 or self.types.max() >= len(self.table):
            raise ConfigurationError("neuron type index out of range")
        for p in self.table:
            if p.kind is NeuronKind.IZHIKEVICH:
                raise ConfigurationError("Izhikevich neurons are reference-only")
        if self.thetas is None:
            self.thetas = np.array([self.table[k].thetas for k in self.types], dtype=float)
        self.thetas = np.asarray(self.thetas, dtype=float).reshape(len(self.types), 4)

    @property
    def size(self):
        return len(self.types)

    def _col(self, attr):
        return np.array([getattr(self.table[k], attr) for k in self.types], dtype=float)

    @property
    def kind_codes(self):
        return np.array([kernels.SECOND_ORDER if self.table[k].kind is NeuronKind.SECOND_ORDER
                         else kernels.FIRST_ORDER for k in self.types], dtype=np.int64)

    def arrays(self):
        """Arguments for the kernels: kind, a, b, c, d, v_th, g, v_reset, v0, u0."""
        kind = self.kind_codes
        th = self.thetas
        u0 = np.where(kind == kernels.SECOND_ORDER, INITIAL_U, 0.0)
        v0 = np.full(self.size, INITIAL_V)
        return (kind, np.ascontiguousarray(th[:, 0]), np.ascontiguousarray(th[:, 1]),
                np.ascontiguousarray(th[:, 2]), np.ascontiguousarray(th[:, 3]),
                self._col("v_th"), self._col("g"), self._col("v_reset"), v0, u0)

    def current_params(self):
        """DynamicParams per neuron with the (possibly learned) thetas."""
        return [self.table[k].with_thetas(th) for k, th in zip(self.types, self.thetas)]

    def copy(self):
        return LayerParams(list(self.table), self.types.copy(), self.thetas.copy(),
                           self.learnable)


def uniform_layer(params, n, learnable=False):
    return LayerParams([params], np.zeros(n, dtype=np.int64), learnable=learnable)


@dataclass
class NetworkModel:
    layer_sizes: tuple
    w1: np.ndarray
    w2: np.ndarray
    hidden: LayerParams
    output: LayerParams
    horizon: int
    seed: int = 0
    dt: float = 1.0

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        n_in, n_h, n_out = self.layer_sizes
        if self.w1.shape != (n_in, n_h) or self.w2.shape != (n_h, n_out):
            raise ConfigurationError(
                f"weights {self.w1.shape}, {self.w2.shape} do not match sizes {self.layer_sizes}")
        if self.hidden.size != n_h or self.output.size != n_out:
            raise ConfigurationError("layer params do not match layer sizes")
        if self.horizon < 1:
            raise ConfigurationError("horizon must be at least one step")

    @property
    def learns_dynamics(self):
        return self.hidden.learnable or self.output.learnable

    def copy(self):
        return NetworkModel(self.layer_sizes, self.w1.copy(), self.w2.copy(),
                            self.hidden.copy(), self.output.copy(), self.horizon,
                            self.seed, self.dt)


def init_network(sizes, horizon=20, seed=0, hidden=None, output=None, meta=False, dt=1.0):
    """Build a network with weights uniform in ``+-1/sqrt(fan_in)``.

    ``hidden`` and ``output`` may be a :class:`DynamicParams`, a
    :class:`LayerParams`, or ``None``.  In meta mode (or when ``None``) every
    neuron starts as a second-order neuron with thetas ``(0.02, 0.2, 0, 0.08)``.
    """
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 3:
        raise ConfigurationError("expected (n_in, n_hidden, n_out)")
    if min(sizes) < 1:
        raise ConfigurationError(f"zero-sized layer in {sizes}")
    n_in, n_h, n_out = sizes
    rng = np.random.default_rng(seed)
    bound1 = 1.0 / np.sqrt(n_in)
    bound2 = 1.0 / np.sqrt(n_h)
    w1 = rng.uniform(-bound1, bound1, size=(n_in, n_h))
    w2 = rng.uniform(-bound2, bound2, size=(n_h, n_out))

    def layer(spec, n):
        if isinstance(spec, LayerParams):
            return spec
        if spec is None:
            spec = DynamicParams.second_order(*INITIAL_THETAS)
        if meta:
            if spec.kind is not NeuronKind.SECOND_ORDER:
                raise ConfigurationError("meta mode learns second-order dynamics only")
            spec = spec.with_thetas(INITIAL_THETAS)
        return uniform_layer(spec, n, learnable=meta)

    return NetworkModel(sizes, w1, w2, layer(hidden, n_h), layer(output, n_out),
                        int(horizon), seed=int(seed), dt=float(dt))


@dataclass
class LayerCache:
    current: np.ndarray  # post-sigmoid input current (T, B, N)
    spikes: np.ndarray
    v_pre: np.ndarray
    v_post: np.ndarray
    u_post: np.ndarray


@dataclass
class ForwardCache:
    """Everything the backward pass reads, time-major ``(T, B, N)``."""

    inputs: np.ndarray
    hidden: LayerCache
    output: LayerCache
    smooth_k: float = 0.0
    layers: dict = field(init=False)

    def __post_init__(self):
        self.layers = {"hidden": self.hidden, "output": self.output}


def _run_layer(name, cur, layer, dt, smooth_k):
    spikes, v_pre, v_post, u_post, err = kernels.layer_forward(
        cur, *layer.arrays(), dt, smooth_k, DIVERGENCE_LIMIT)
    if err[0] >= 0:
        t, b, j = (int(x) for x in err)
        raise DivergenceError(j, step=t, layer=name, value=(v_post[t, b, j], u_post[t, b, j]))
    return LayerCache(cur, spikes, v_pre, v_post, u_post)


def forward_time_major(model, x, smooth_k=0.0):
    """Simulate on time-major input ``x`` of shape ``(T, B, n_in)``."""
    T, B, n_in = x.shape
    if n_in != model.layer_sizes[0]:
        raise ConfigurationError(f"input has {n_in} neurons, model expects {model.layer_sizes[0]}")
    x = np.ascontiguousarray(x, dtype=float)
    n_h, n_out = model.layer_sizes[1:]
    cur1 = sigmoid(x.reshape(T * B, n_in) @ model.w1).reshape(T, B, n_h)
    hid = _run_layer("hidden", cur1, model.hidden, model.dt, smooth_k)
    cur2 = sigmoid(hid.spikes.reshape(T * B, n_h) @ model.w2).reshape(T, B, n_out)
    out = _run_layer("output", cur2, model.output, model.dt, smooth_k)
    return out.spikes, ForwardCache(x, hid, out, smooth_k)


def forward(model, spikes, smooth_k=0.0):
    """Run the network on a ``(batch, neurons, T)`` spike array.

    Returns output spikes ``(batch, n_out, T)`` and the :class:`ForwardCache`.
    ``smooth_k > 0`` swaps the hard threshold for ``sigmoid(k (V - v_th))``;
    that mode exists for gradient checking.
    """
    spikes = np.asarray(spikes)
    if spikes.ndim != 3:
        raise ConfigurationError("input spikes must be (batch, neurons, T)")
    out, cache = forward_time_major(model, np.transpose(spikes, (2, 0, 1)), smooth_k)
    return np.transpose(out, (1, 2, 0)), cache


def mean_rate(spikes, time_axis=-1):
    """Average firing rate over the time axis."""
    spikes = np.asarray(spikes, dtype=float)
    if spikes.shape[time_axis] < 1:
        raise ValueError("need at least one timestep")
    return spikes.mean(axis=time_axis)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MDNCKPT\x00"
CHECKPOINT_VERSION = 1


def _layer_meta(layer):
    return {
        "table": [{"kind": p.kind.value, "theta_a": p.theta_a, "theta_b": p.theta_b,
                   "theta_c": p.theta_c, "theta_d": p.theta_d, "v_th": p.v_th,
                   "g": p.g, "v_reset": p.v_reset} for p in layer.table],
        "learnable": layer.learnable,
    }


def save_checkpoint(model, path):
    """Write a model to the checkpoint container described in ``FORMATS.md``."""
    header = {
        "layer_sizes": list(model.layer_sizes), "horizon": model.horizon,
        "seed": model.seed, "dt": model.dt,
        "hidden": _layer_meta(model.hidden), "output": _layer_meta(model.output),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    arrays = [model.w1, model.w2, model.hidden.types.astype("<i8"), model.hidden.thetas,
              model.output.types.astype("<i8"), model.output.thetas]
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for arr in arrays:
            if arr.dtype.kind == "f":
                arr = arr.astype("<f8")
            fh.write(np.ascontiguousarray(arr).tobytes(order="C"))
    return path


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen])
    n_in, n_h, n_out = header["layer_sizes"]
    offset = 16 + hlen

    def take(count, dtype, shape):
        nonlocal offset
        nbytes = count * 8
        if offset + nbytes > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(shape)
        offset += nbytes
        return arr.copy()

    w1 = take(n_in * n_h, "<f8", (n_in, n_h))
    w2 = take(n_h * n_out, "<f8", (n_h, n_out))
    layers = []
    for name, n in (("hidden", n_h), ("output", n_out)):
        types = take(n, "<i8", (n,))
        thetas = take(n * 4, "<f8", (n, 4))
        meta = header[name]
        table = [DynamicParams(NeuronKind(p.pop("kind")), **p) for p in meta["table"]]
        layers.append(LayerParams(table, types, thetas, meta["learnable"]))
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after payload")
    return NetworkModel((n_in, n_h, n_out), w1, w2, layers[0], layers[1],
                        header["horizon"], header["seed"], header["dt"])
