"""Shared oracles for the test suite."""

import numpy as np

from metaneuron.network import forward_time_major, init_network
from metaneuron.training import backward, loss, one_hot


def gradcheck_model(hidden=None, output=None, meta=False, sizes=(4, 3, 2), T=5, B=6, seed=3,
                    weight_scale=4.0):
    """Small network with weights scaled up so spikes actually occur."""
    model = init_network(sizes, horizon=T, seed=seed, hidden=hidden, output=output, meta=meta)
    model.w1 *= weight_scale
    model.w2 *= weight_scale
    rng = np.random.default_rng(seed)
    x = (rng.random((T, B, sizes[0])) < 0.5).astype(float)
    targets = one_hot(rng.integers(0, sizes[2], B), sizes[2])
    return model, x, targets


def finite_difference_errors(model, x, targets, smooth_k=5.0, h=1e-5):
    """Worst relative error between central differences and backward(),
    per parameter group."""
    def objective():
        out, _ = forward_time_major(model, x, smooth_k=smooth_k)
        return loss(out.mean(axis=0), targets)

    _, cache = forward_time_major(model, x, smooth_k=smooth_k)
    grads = backward(model, cache, targets)
    groups = {"w1": (model.w1, grads.dw1), "w2": (model.w2, grads.dw2)}
    for name, g in (grads.d_theta or {}).items():
        groups[f"theta_{name}"] = (getattr(model, name).thetas, g)
    worst = {}
    for name, (param, analytic) in groups.items():
        err = 0.0
        for idx in np.ndindex(param.shape):
            old = param[idx]
            param[idx] = old + h
            up = objective()
            param[idx] = old - h
            down = objective()
            param[idx] = old
            fd = (up - down) / (2 * h)
            scale = max(abs(fd), abs(analytic[idx]), 1e-8)
            err = max(err, abs(fd - analytic[idx]) / scale)
        worst[name] = err
    return worst, grads


def zscore(values):
    """Hand-rolled population z-score, independent of numpy reductions."""
    vals = [float(v) for v in values]
    n = len(vals)
    mean = sum(vals) / n
    var = sum((v - mean) ** 2 for v in vals) / n
    sd = var ** 0.5
    return [(v - mean) / sd for v in vals]


def ring_blobs(k, n_per, sigma, spacing, rng):
    """k Gaussian blobs on a ring with neighbouring centres ``spacing`` apart."""
    if k == 2:
        means = np.array([[0.0, 0.0], [spacing, 0.0]])
    else:
        r = spacing / (2 * np.sin(np.pi / k))
        ang = 2 * np.pi * np.arange(k) / k
        means = np.c_[r * np.cos(ang), r * np.sin(ang)]
    means = means + rng.uniform(-5, 5, size=2)
    pts = np.concatenate([m + sigma * rng.standard_normal((n_per, 2)) for m in means])
    return means, pts


# criterion number -> (verdict, detail); printed by conftest at session end
ACCEPTANCE = {}
