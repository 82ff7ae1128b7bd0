"""Acceptance criteria, one test per criterion.

Each test records a one-line verdict that is printed in the terminal summary
(see ``conftest.py``).  The full-scale MNIST run takes hours on one core and
only runs with ``METANEURON_FULL=1``; its smoke variant always runs.
"""

import math
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from helpers import ACCEPTANCE, finite_difference_errors, gradcheck_model, ring_blobs, zscore
from metaneuron.config import ExperimentConfig
from metaneuron.datasets import (EncodedDataset, TemporalConfig, encode_rate,
                                 gen_synthetic_temporal, load_encoded, load_mnist_dir,
                                 save_encoded)
from metaneuron.dynamics import (REFERENCE_TYPES, DivergenceError, DynamicParams, NeuronLayerState,
                                 analyze_attractors, probe_response, second_order_step)
from metaneuron.experiments import (AccuracyMatrix, capability, emit_traces, run_experiment,
                                    run_meta_pipeline)
from metaneuron.meta import cluster_cloud, combine_centers

FULL = os.environ.get("METANEURON_FULL", "") not in ("", "0")


def record(n, ok, detail):
    ACCEPTANCE[n] = ("PASS" if ok else "FAIL", detail)
    return ok


def logit(p):
    return math.log(p / (1.0 - p))


# --------------------------------------------------------------------------
# 1. attractor analytics
# --------------------------------------------------------------------------

def test_criterion_01_attractor_analytics():
    t0 = time.perf_counter()
    dt = 0.01
    # theta_a = 0 freezes U; v_th is out of reach of the stable branch
    p = DynamicParams.second_order(0.0, 0.2, -0.1, 0.0, v_th=0.5)
    U, I = np.meshgrid(np.linspace(0.3, 0.7, 5), np.linspace(0.1, 0.4, 5))
    U, I = U.ravel(), I.ravel()
    eps = U - I + 0.25
    assert eps.min() > 0.01
    target = 0.5 - np.sqrt(eps)  # closed form, independent of the library
    for u, i, v in zip(U, I, target):
        assert analyze_attractors(p, u, i).attractor == pytest.approx(v, abs=1e-12)
    x = np.array([logit(i) for i in I])
    state = NeuronLayerState(np.zeros(25), U.copy())
    steps = None
    for n in range(1, 10_001):
        state, spikes = second_order_step(state, x, p, dt)
        assert not spikes.any()
        if np.abs(state.v - target).max() < 1e-6:
            steps = n
            break
    converged = steps is not None
    err = float(np.abs(state.v - target).max())

    # eps < 0: no real fixed point, V runs away and the guard fires for every cell
    runaway = DynamicParams.second_order(0.0, 0.2, -0.1, 0.0, v_th=1e12)
    Un, In = np.meshgrid(np.linspace(0.0, 0.2, 5), np.linspace(0.6, 0.9, 5))
    Un, In = Un.ravel(), In.ravel()
    assert (Un - In + 0.25).max() < 0
    alive = np.arange(25)
    state = NeuronLayerState(np.zeros(25), Un.copy())
    xn = np.array([logit(i) for i in In])
    tripped = set()
    for _ in range(200_000):
        if len(alive) == 0:
            break
        try:
            state, _ = second_order_step(state, xn[alive], runaway, dt)
        except DivergenceError as exc:
            tripped.add(int(alive[exc.neuron]))
            keep = np.arange(len(alive)) != exc.neuron
            alive = alive[keep]
            state = NeuronLayerState(state.v[keep], state.u[keep])
    elapsed = time.perf_counter() - t0
    ok = converged and len(tripped) == 25 and elapsed < 10
    record(1, ok, f"converged in {steps} steps (max err {err:.1e}); guard fired "
                  f"{len(tripped)}/25; {elapsed:.2f}s")
    assert ok


# --------------------------------------------------------------------------
# 2. gradient harness
# --------------------------------------------------------------------------

def test_criterion_02_gradient_harness():
    t0 = time.perf_counter()
    worst = {}
    for name, p in (("1st-order", DynamicParams.lif()), ("2nd-RS", REFERENCE_TYPES["2nd-RS"])):
        model, x, targets = gradcheck_model(p, p, sizes=(4, 3, 2), T=5, seed=3)
        errs, _ = finite_difference_errors(model, x, targets, smooth_k=5.0, h=1e-5)
        worst[name] = max(errs["w1"], errs["w2"])
    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    ok = top < 1e-4 and elapsed < 5
    record(2, ok, "max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
           + f"; {elapsed:.2f}s")
    assert ok


# --------------------------------------------------------------------------
# 3 and 4. MNIST
# --------------------------------------------------------------------------

def mnist_config(mnist_dir, out, hidden, epochs, seeds, types):
    p = {k: str(mnist_dir / f) for k, f in (
        ("train_images", "train-images-idx3-ubyte"), ("train_labels", "train-labels-idx1-ubyte"),
        ("test_images", "t10k-images-idx3-ubyte"), ("test_labels", "t10k-labels-idx1-ubyte"))}
    for k, v in p.items():
        if not Path(v).exists():
            p[k] = v + ".gz"
    return ExperimentConfig(task="mnist", dataset="idx", paths=p, layer_sizes=(784, hidden, 10),
                            batch_size=100, epochs=epochs, lr_w=1e-3, lr_d=1e-3, T=20,
                            neuron_types=tuple(types), seeds=tuple(seeds), out_dir=Path(out))


class SmokeRuns:
    """Smoke-scale MNIST runs shared by criteria 3 and 4 (hidden 100, 5 epochs)."""

    def __init__(self, mnist_dir, out):
        self.mnist_dir, self.out = mnist_dir, out
        self.acc, self.seconds = {}, {}

    def get(self, label):
        if label not in self.acc:
            cfg = mnist_config(self.mnist_dir, self.out, 100, 5, (0, 1, 2), [label])
            times = []
            for seed in cfg.seeds:
                t0 = time.perf_counter()
                res = run_experiment(replace(cfg, seeds=(seed,)), checkpoints=False)
                times.append(time.perf_counter() - t0)
                self.acc.setdefault(label, []).extend(res.accuracies[label])
            self.seconds[label] = times
        return np.array(self.acc[label]), self.seconds[label]


@pytest.fixture(scope="module")
def smoke(mnist_dir, tmp_path_factory):
    return SmokeRuns(mnist_dir, tmp_path_factory.mktemp("smoke"))


@pytest.mark.slow
@pytest.mark.skipif(not FULL, reason="full-scale MNIST needs METANEURON_FULL=1 (hours)")
def test_criterion_03_mnist_full(mnist_dir, tmp_path):
    t0 = time.perf_counter()
    cfg = mnist_config(mnist_dir, tmp_path, 500, 20, (0, 1, 2), ["1st-order"])
    res = run_experiment(cfg, checkpoints=False)
    acc = np.array(res.accuracies["1st-order"])
    hours = (time.perf_counter() - t0) / 3600
    ok = acc.mean() >= 98.0 and hours <= 4
    record(3, ok, f"full LIF 784-500-10, 20 epochs: {np.round(acc, 2).tolist()} mean "
                  f"{acc.mean():.2f}% (>= 98.0) in {hours:.2f} h")
    assert ok


def test_criterion_03_mnist_smoke(smoke):
    acc, secs = smoke.get("1st-order")
    ok = acc.mean() >= 94.0 and max(secs) <= 20 * 60
    detail = (f"smoke LIF 784-100-10, 5 epochs: {np.round(acc, 2).tolist()} mean "
              f"{acc.mean():.2f}% (>= 94.0), slowest run {max(secs) / 60:.1f} min")
    if not FULL:
        detail += "; full scale not run (set METANEURON_FULL=1)"
    full = ACCEPTANCE.get(3)  # set by the full-scale test, which runs first
    verdict = ok
    if full and full[1].startswith("full"):
        verdict = ok and full[0] == "PASS"
        detail = full[1] + " | " + detail
    record(3, verdict, detail)
    assert ok


def test_criterion_04_fs_beats_sds(smoke):
    fs, _ = smoke.get("2nd-FS")
    sds, _ = smoke.get("2nd-SDS")
    gap = fs.mean() - sds.mean()
    ok = gap >= 1.5
    record(4, ok, f"2nd-FS {fs.mean():.2f}% vs 2nd-SDS {sds.mean():.2f}%: gap {gap:.2f} pp "
                  f"(>= 1.5)")
    assert ok


# --------------------------------------------------------------------------
# 5. temporal advantage
# --------------------------------------------------------------------------

def test_criterion_05_temporal_advantage(tmp_path):
    cfg = ExperimentConfig(task="temporal", dataset="synthetic_temporal", paths={},
                           layer_sizes=(30, 100, 4), batch_size=10, epochs=30, lr_w=1e-2,
                           lr_d=1e-4, T=30, neuron_types=("1st-order", "2nd-SDS"),
                           seeds=(0, 1, 2, 3, 4), out_dir=tmp_path)
    res = run_experiment(cfg, checkpoints=False)
    lif = np.array(res.accuracies["1st-order"])
    sds = np.array(res.accuracies["2nd-SDS"])
    base = []
    tcfg = TemporalConfig(frames=30)
    for seed in cfg.seeds:
        train = gen_synthetic_temporal(tcfg, seed)
        test = gen_synthetic_temporal(tcfg, cfg.test_seed + seed)
        clf = LogisticRegression(max_iter=2000).fit(train.spikes.mean(axis=2), train.labels)
        base.append(100 * clf.score(test.spikes.mean(axis=2), test.labels))
    chance = 100.0 / 4
    ceiling = max(chance, float(np.mean(base))) + 10
    ok = sds.mean() - lif.mean() >= 5 and lif.mean() <= ceiling
    record(5, ok, f"2nd-SDS {sds.mean():.2f}% vs LIF {lif.mean():.2f}% (gap "
                  f"{sds.mean() - lif.mean():.2f} pp >= 5); LIF <= {ceiling:.2f}% "
                  f"(chance {chance:.0f}%, rate baseline {np.mean(base):.2f}%)")
    assert ok


# --------------------------------------------------------------------------
# 6. probe
# --------------------------------------------------------------------------

def test_criterion_06_probe_ordering():
    tr = {k: probe_response(p) for k, p in REFERENCE_TYPES.items()}
    halves = {k: tr[k].half_counts() for k in ("2nd-SDS", "2nd-WDS")}
    ok = (tr["2nd-FS"].spike_count > tr["2nd-RS"].spike_count
          and all(second < first for first, second in halves.values()))
    record(6, ok, f"FS {tr['2nd-FS'].spike_count} > RS {tr['2nd-RS'].spike_count} spikes; "
                  + ", ".join(f"{k} halves {a}/{b}" for k, (a, b) in halves.items()))
    assert ok


# --------------------------------------------------------------------------
# 7. clustering recovery
# --------------------------------------------------------------------------

def test_criterion_07_clustering_recovery():
    worst, failures, counts_ok = 0.0, [], True
    for k in range(2, 6):
        for seed in range(5):
            rng = np.random.default_rng([k, seed])
            means, pts = ring_blobs(k, 40, 0.01, 1.0, rng)
            centers, m = cluster_cloud(pts, seed=seed)
            dist = max(np.linalg.norm(centers - mu, axis=1).min() for mu in means)
            worst = max(worst, dist)
            if m != k or dist >= 0.05:
                failures.append((k, seed, m))
            other = cluster_cloud(ring_blobs(7 - k, 40, 0.01, 1.0, rng)[1], seed=seed)[0]
            # blob coordinates are arbitrary, so lift v_th above any reset value
            combos = combine_centers(centers, other, v_th=100.0)
            counts_ok &= len(combos) == len(centers) * len(other)
    ok = not failures and counts_ok
    record(7, ok, f"20 blob sets (2-5 blobs x 5 seeds): worst centre error {worst:.4f} "
                  f"(< 0.05), failures {failures}; |AB|x|CD| counts exact: {counts_ok}")
    assert ok


# --------------------------------------------------------------------------
# 8. capability
# --------------------------------------------------------------------------

def test_criterion_08_capability_oracle():
    col = [98.67, 98.33, 94.87, 95.34, 98.69]
    fashion = [90.50, 89.58, 85.37, 85.79, 90.38]
    types = ["2nd-FS", "2nd-RS", "2nd-SDS", "2nd-WDS", "1st-order"]
    m = AccuracyMatrix(types, ["mnist", "fashion-mnist"], np.array([col, fashion]).T)
    cap = capability(m)
    err = max(float(np.abs(cap[:, 0] - zscore(col)).max()),
              float(np.abs(cap[:, 1] - zscore(fashion)).max()))
    col_mean = float(np.abs(cap.mean(axis=0)).max())
    top2 = {types[i] for i in np.argsort(cap[:, 0])[-2:]}
    ok = err < 1e-9 and col_mean < 1e-9 and top2 == {"2nd-FS", "1st-order"}
    record(8, ok, f"max |cap - oracle| {err:.1e}; max |column mean| {col_mean:.1e}; "
                  f"top two on MNIST {sorted(top2)}")
    assert ok


# --------------------------------------------------------------------------
# 9. determinism
# --------------------------------------------------------------------------

def _run_everything(out, mnist_dir):
    from metaneuron.config import Config, MetaSettings
    from metaneuron.dynamics import ProbeConfig, builtin_types

    temporal = ExperimentConfig(task="temporal", dataset="synthetic_temporal", paths={},
                                layer_sizes=(30, 20, 4), batch_size=10, epochs=2, lr_w=1e-2,
                                lr_d=1e-4, T=30, neuron_types=("1st-order", "2nd-SDS"),
                                seeds=(0, 1), out_dir=out, train_limit=120, test_limit=80)
    run_experiment(temporal)
    if mnist_dir is not None:
        mnist = replace(mnist_config(mnist_dir, out, 20, 1, (0,), ["2nd-FS"]),
                        train_limit=1000, test_limit=500)
        run_experiment(mnist)
    emit_traces(builtin_types(), ProbeConfig(), out / "traces")
    cfg = Config({"temporal": temporal}, ProbeConfig(), MetaSettings("temporal", epochs=1),
                 out)
    try:
        run_meta_pipeline(cfg)
    except Exception as exc:  # an empty selection is still a reproducible outcome
        (out / "meta" / "error.txt").write_text(f"{type(exc).__name__}: {exc}\n")
    return sorted(p.relative_to(out) for p in out.rglob("*") if p.is_file())


def test_criterion_09_determinism(tmp_path):
    from conftest import MNIST_DIR, MNIST_FILES, _find

    mnist = MNIST_DIR if all(_find(n) for n in MNIST_FILES) else None
    a = _run_everything(tmp_path / "a", mnist)
    b = _run_everything(tmp_path / "b", mnist)
    differ = [str(p) for p in a if (tmp_path / "a" / p).read_bytes()
              != (tmp_path / "b" / p).read_bytes()]
    csvs = [p for p in a if p.suffix == ".csv"]
    ok = a == b and not differ and len(csvs) > 10
    record(9, ok, f"{len(a)} output files ({len(csvs)} CSV) compared byte-for-byte across two "
                  f"runs; differing: {differ or 'none'}"
                  + ("" if mnist else "; MNIST run skipped (no data)"))
    assert ok


# --------------------------------------------------------------------------
# 10. format fidelity
# --------------------------------------------------------------------------

def test_criterion_10_format_fidelity(mnist_dir, tmp_path):
    train = load_mnist_dir(mnist_dir, "train")
    test = load_mnist_dir(mnist_dir, "test")
    sizes_ok = (len(train), len(test)) == (60000, 10000)
    pixels_ok = all(d.features.min() >= 0 and d.features.max() <= 1 for d in (train, test))
    labels_ok = set(np.unique(train.labels)) == set(range(10))
    enc = encode_rate(test.subset(np.arange(1000)), 20, seed=0)
    back = load_encoded(save_encoded(enc, tmp_path / "mnist.spk"))
    rng = np.random.default_rng(0)
    odd = EncodedDataset((rng.random((7, 13, 11)) < 0.5).astype(np.uint8),
                         rng.integers(0, 3, 7), 3, {"note": "odd bit count"})
    odd_back = load_encoded(save_encoded(odd, tmp_path / "odd.spk"))
    trips = all(np.array_equal(x.spikes, y.spikes) and np.array_equal(x.labels, y.labels)
                and x.n_classes == y.n_classes and x.descriptor == y.descriptor
                for x, y in ((enc, back), (odd, odd_back)))
    ok = sizes_ok and pixels_ok and labels_ok and trips
    record(10, ok, f"{len(train)}/{len(test)} samples, pixels in [0,1]: {pixels_ok}; "
                   f"encoded round-trip bit-exact: {trips}")
    assert ok
