"""Rate loss, surrogate-gradient BPTT, Adam and the epoch loops."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from metaneuron import kernels
from metaneuron.network import LAYER_NAMES, forward_time_major

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 0.25


class GradientError(FloatingPointError):
    def __init__(self, layer, step):
        self.layer = layer
        self.step = step
        super().__init__(f"non-finite gradient in {layer} layer at timestep {step}")


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def loss(rates, targets):
    """Squared error between output rates and targets, summed over output
    neurons and averaged over the batch."""
    rates = np.asarray(rates, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if rates.shape != targets.shape:
        raise ValueError(f"rates {rates.shape} and targets {targets.shape} differ")
    err = (rates - targets) ** 2
    return float(err.reshape(len(err), -1).sum(axis=1).mean())


def surrogate_grad(v, v_th, v_window):
    """Box pseudo-derivative of the spike: 1 inside ``|v - v_th| < v_window``."""
    if not v_window > 0:
        raise ValueError("v_window must be positive")
    inside = np.abs(np.asarray(v, dtype=float) - v_th) < v_window
    return inside.astype(np.int8) if np.ndim(inside) else int(inside)


@dataclass
class GradientSet:
    dw1: np.ndarray
    dw2: np.ndarray
    d_theta: dict | None = None

    def as_dict(self):
        out = {"w1": self.dw1, "w2": self.dw2}
        if self.d_theta:
            out.update({f"theta_{k}": v for k, v in self.d_theta.items()})
        return out


def _layer_backward(name, g_spk, lc, layer, dt, smooth_k, window):
    g_cur, g_theta, bad = kernels.layer_backward(
        g_spk, lc.spikes, lc.v_pre, lc.v_post, lc.u_post, *layer.arrays(), dt,
        smooth_k, window)
    if bad >= 0:
        raise GradientError(name, int(bad))
    return g_cur * lc.current * (1.0 - lc.current), g_theta


def backward(model, cache, targets, v_window=DEFAULT_WINDOW):
    """Gradients of :func:`loss` w.r.t. both weight matrices (and the
    per-neuron thetas of learnable layers).

    Hard-threshold caches use the box surrogate and stop gradients at resets.
    Caches produced with ``smooth_k > 0`` get the exact derivative of the
    smoothed network, reset terms included, which is what the finite
    difference check compares against.
    """
    for attr in ("inputs", "hidden", "output"):
        if getattr(cache, attr, None) is None:
            raise ValueError(f"forward cache lacks {attr!r}")
    targets = np.asarray(targets, dtype=float)
    x = cache.inputs
    T, B, n_in = x.shape
    n_h, n_out = model.layer_sizes[1:]
    if targets.shape != (B, n_out):
        raise ValueError(f"targets {targets.shape} do not match batch ({B}, {n_out})")
    k = cache.smooth_k
    hid, out = cache.hidden, cache.output

    rates = out.spikes.mean(axis=0)
    g_rate = 2.0 * (rates - targets) / B
    g_spk2 = np.broadcast_to(g_rate / T, (T, B, n_out)).copy()
    g_z2, gth2 = _layer_backward("output", g_spk2, out, model.output, model.dt, k, v_window)
    dw2 = hid.spikes.reshape(T * B, n_h).T @ g_z2.reshape(T * B, n_out)
    g_spk1 = (g_z2.reshape(T * B, n_out) @ model.w2.T).reshape(T, B, n_h)
    g_z1, gth1 = _layer_backward("hidden", g_spk1, hid, model.hidden, model.dt, k, v_window)
    dw1 = x.reshape(T * B, n_in).T @ g_z1.reshape(T * B, n_h)

    d_theta = None
    if model.learns_dynamics:
        d_theta = {}
        if model.hidden.learnable:
            d_theta["hidden"] = gth1
        if model.output.learnable:
            d_theta["output"] = gth2
    return GradientSet(dw1, dw2, d_theta)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr_w: float = 1e-3
    lr_d: float = 1e-3
    decay: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    epoch: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr_for(self, name):
        base = self.lr_d if name.startswith("theta") else self.lr_w
        return base * self.decay ** self.epoch


def adam_update(params, grads, state):
    """One bias-corrected Adam step.  Returns a new ``{name: array}`` dict and
    advances ``state`` (moments and step counter) in place."""
    state.step += 1
    t = state.step
    out = dict(params)
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        out[name] = p - state.lr_for(name) * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


def model_params(model):
    params = {"w1": model.w1, "w2": model.w2}
    for name in LAYER_NAMES:
        layer = getattr(model, name)
        if layer.learnable:
            params[f"theta_{name}"] = layer.thetas
    return params


def apply_params(model, params):
    model.w1 = params["w1"]
    model.w2 = params["w2"]
    for name in LAYER_NAMES:
        key = f"theta_{name}"
        if key in params:
            layer = getattr(model, name)
            th = params[key]
            v_th = layer.arrays()[5]
            # keep every reset potential strictly below threshold
            th[:, 2] = np.minimum(th[:, 2], v_th - 1e-6)
            layer.thetas = th
    return model


# --------------------------------------------------------------------------
# loops
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    epochs: int = 20
    lr_w: float = 1e-3
    lr_d: float = 1e-3
    decay: float = 0.9
    v_window: float = DEFAULT_WINDOW
    eval_batch: int = 500


@dataclass
class TrainRecord:
    epoch: int
    train_loss: float
    test_acc: float | None
    lr: float
    seconds: float | None = None
    seed: int = 0
    config_hash: str = ""


RECORD_COLUMNS = ["epoch", "train_loss", "test_acc", "lr", "seconds"]


def write_records(path, records, with_time=False):
    """TrainRecord CSV.  ``seconds`` is left blank unless ``with_time`` so
    that reruns produce byte-identical files."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_COLUMNS)
        for r in records:
            acc = "" if r.test_acc is None else repr(float(r.test_acc))
            secs = repr(round(r.seconds, 3)) if with_time and r.seconds is not None else ""
            w.writerow([r.epoch, repr(float(r.train_loss)), acc, repr(float(r.lr)), secs])
    return path


def read_records(path):
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [TrainRecord(int(r["epoch"]), float(r["train_loss"]),
                        float(r["test_acc"]) if r["test_acc"] else None, float(r["lr"]),
                        float(r["seconds"]) if r["seconds"] else None) for r in rows]


def train_epoch(model, dataset, opt_state, config, seed, epoch=0):
    """One seeded pass over ``dataset`` in shuffled mini-batches.

    The learning rates are ``base * decay**epoch``.  Each epoch draws fresh
    encodings from lazily encoded datasets (stream ``epoch + 1``).
    """
    t0 = time.perf_counter()
    opt_state.epoch = epoch
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(dataset.n_samples)
    n_out = model.layer_sizes[2]
    total, count = 0.0, 0
    for start in range(0, len(order), config.batch_size):
        idx = order[start:start + config.batch_size]
        x = dataset.batch(idx, stream=epoch + 1)
        out, cache = forward_time_major(model, x)
        targets = one_hot(dataset.labels[idx], n_out)
        total += loss(out.mean(axis=0), targets) * len(idx)
        count += len(idx)
        grads = backward(model, cache, targets, config.v_window)
        apply_params(model, adam_update(model_params(model), grads.as_dict(), opt_state))
    rec = TrainRecord(epoch, total / count, None, opt_state.lr_for("w"),
                      time.perf_counter() - t0, seed)
    return model, rec


def predict(model, dataset, batch_size=500):
    preds = np.empty(dataset.n_samples, dtype=np.int64)
    for start in range(0, dataset.n_samples, batch_size):
        idx = np.arange(start, min(start + batch_size, dataset.n_samples))
        out, _ = forward_time_major(model, dataset.batch(idx, stream=0))
        # argmax picks the lowest index on ties
        preds[idx] = out.mean(axis=0).argmax(axis=1)
    return preds


def evaluate(model, dataset, batch_size=500):
    """Percent of samples whose highest-rate output neuron matches the label."""
    preds = predict(model, dataset, batch_size)
    return 100.0 * float(np.mean(preds == np.asarray(dataset.labels)))


def fit(model, train, test, config, seed, opt_state=None, callback=None):
    """Train for ``config.epochs`` epochs, evaluating after each one."""
    opt_state = opt_state or OptimizerState(config.lr_w, config.lr_d, config.decay)
    records = []
    for epoch in range(config.epochs):
        model, rec = train_epoch(model, train, opt_state, config, seed, epoch)
        if test is not None:
            rec.test_acc = evaluate(model, test, config.eval_batch)
        records.append(rec)
        log.info("seed %d epoch %d loss %.4f acc %s (%.1fs)", seed, epoch, rec.train_loss,
                 "-" if rec.test_acc is None else f"{rec.test_acc:.2f}", rec.seconds)
        if callback is not None:
            callback(rec)
    return model, records
