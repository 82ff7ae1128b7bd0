"""Generate neuron types: co-train thetas, cluster them, combine, filter.

The learned per-neuron thetas are split into two 2-D clouds, ``(a, b)``
(recovery) and ``(c, d)`` (reset).  Mean-shift fixes the number of modes M in
each cloud, k-means with K=M places the centres, and the Cartesian product of
the two centre lists gives the candidate types.  Candidates are then probed
with a sine stimulus: input-insensitive or diverging ones are dropped and
near-duplicates (correlated membrane traces) are collapsed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from metaneuron import kernels
from metaneuron.dynamics import DivergenceError, DynamicParams, ProbeConfig, probe_response
from metaneuron.network import LAYER_NAMES, init_network
from metaneuron.training import TrainConfig, evaluate, fit

log = logging.getLogger(__name__)


class EmptySelectionError(RuntimeError):
    def __init__(self, discarded):
        self.discarded = discarded
        reasons = ", ".join(f"#{i}: {r}" for i, (_, r) in enumerate(discarded))
        super().__init__(f"every candidate was discarded ({reasons})")


@dataclass
class ParamCloud:
    points_ab: np.ndarray
    points_cd: np.ndarray
    source: str = ""
    layer: np.ndarray = None
    accuracy: float | None = None

    def __post_init__(self):
        self.points_ab = np.asarray(self.points_ab, dtype=float).reshape(-1, 2)
        self.points_cd = np.asarray(self.points_cd, dtype=float).reshape(-1, 2)
        if len(self.points_ab) != len(self.points_cd):
            raise ValueError("ab and cd clouds must have one point per neuron")


@dataclass
class MetaNeuronCandidate:
    params: DynamicParams
    provenance: tuple
    label: str | None = None
    accuracy: float | None = None


def cloud_from_model(model, source=""):
    """Collect the thetas of every second-order neuron in hidden and output."""
    thetas, layer = [], []
    for k, name in enumerate(LAYER_NAMES):
        lp = getattr(model, name)
        mask = lp.kind_codes == kernels.SECOND_ORDER
        thetas.append(lp.thetas[mask])
        layer.append(np.full(mask.sum(), k))
    th = np.concatenate(thetas)
    return ParamCloud(th[:, :2], th[:, 2:], source, np.concatenate(layer))


def train_dynamic_params(train, test, sizes, config=None, seed=0, horizon=None, source=""):
    """Jointly train weights and per-neuron thetas; return the theta cloud.

    ``config.lr_d`` is the theta learning rate (1e-3 for static images,
    1e-4 for temporal sources).
    """
    config = config or TrainConfig()
    T = horizon or getattr(train, "T", 20)
    model = init_network(sizes, T, seed, meta=True)
    model, records = fit(model, train, None, config, seed)
    cloud = cloud_from_model(model, source)
    if test is not None:
        cloud.accuracy = evaluate(model, test, config.eval_batch)
    return cloud, model, records


# --------------------------------------------------------------------------
# clustering
# --------------------------------------------------------------------------

def default_bandwidth(points):
    """Half the median pairwise distance (falls back to something positive)."""
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        return 1.0
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    iu = np.triu_indices(len(pts), 1)
    bw = 0.5 * float(np.median(d[iu]))
    if bw <= 0:
        bw = 0.5 * float(d.max())
    return bw if bw > 0 else 1.0


def mean_shift(points, bandwidth=None, max_iter=300, tol=None):
    """Flat-kernel mean-shift.

    Each point climbs to its mode; modes closer than ``bandwidth / 2`` are
    merged, keeping the one with more points inside its window.  Centres come
    back ordered by that support, largest first.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or len(pts) == 0:
        raise ValueError("mean_shift needs at least one point")
    bw = default_bandwidth(pts) if bandwidth is None else float(bandwidth)
    if not bw > 0:
        raise ValueError("bandwidth must be positive")
    tol = 1e-3 * bw if tol is None else tol
    modes = kernels.mean_shift_modes(np.ascontiguousarray(pts), bw, max_iter, tol)
    d2 = ((modes[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    support = (d2 <= bw * bw).sum(axis=1)
    order = np.lexsort((np.arange(len(modes)), -support))
    centers = []
    for i in order:
        m = modes[i]
        if all(np.linalg.norm(m - c) >= bw / 2 for c in centers):
            centers.append(m)
    return np.array(centers)


def _kmeans_pp(pts, K, rng):
    n = len(pts)
    centers = np.empty((K, pts.shape[1]))
    centers[0] = pts[rng.integers(n)]
    d2 = ((pts - centers[0]) ** 2).sum(1)
    for k in range(1, K):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[k] = pts[idx]
        d2 = np.minimum(d2, ((pts - centers[k]) ** 2).sum(1))
    return centers


def lloyd(points, K, seed=0, max_iter=300):
    """k-means++ seeded Lloyd iterations.

    Returns ``(centers, labels, sse_history)``; ``sse_history[i]`` is the
    within-cluster SSE after the i-th centre update.
    """
    pts = np.asarray(points, dtype=float)
    if not 1 <= K <= len(pts):
        raise ValueError(f"K={K} outside 1..{len(pts)}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(pts, K, rng)
    labels = None
    history = []
    for _ in range(max_iter):
        d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        new = d2.argmin(axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for k in range(K):
            members = labels == k
            if members.any():
                centers[k] = pts[members].mean(axis=0)
            else:
                # re-seed from the point worst served by its current centre
                far = ((pts - centers[labels]) ** 2).sum(1).argmax()
                centers[k] = pts[far]
                labels[far] = k
        history.append(float(((pts - centers[labels]) ** 2).sum()))
    return centers, labels, history


def k_means(points, K, seed=0, max_iter=300):
    return lloyd(points, K, seed, max_iter)[0]


def cluster_cloud(points, bandwidth=None, seed=0):
    """Mean-shift picks M, k-means with K=M places the centres."""
    modes = mean_shift(points, bandwidth)
    return k_means(points, len(modes), seed), len(modes)


def combine_centers(ab_centers, cd_centers, v_th=0.5):
    """Every (a, b) centre paired with every (c, d) centre."""
    ab = np.asarray(ab_centers, dtype=float).reshape(-1, 2)
    cd = np.asarray(cd_centers, dtype=float).reshape(-1, 2)
    if len(ab) == 0 or len(cd) == 0:
        raise ValueError("need at least one centre in each cloud")
    return [MetaNeuronCandidate(DynamicParams.second_order(a, b, c, d, v_th), (i, j))
            for i, (a, b) in enumerate(ab) for j, (c, d) in enumerate(cd)]


# --------------------------------------------------------------------------
# filtering
# --------------------------------------------------------------------------

PHENOTYPES = ("2nd-FS", "2nd-RS", "2nd-WDS", "2nd-SDS")


@dataclass(frozen=True)
class FilterConfig:
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    contrast: float = 0.5
    min_change: float = 0.05
    max_correlation: float = 0.95


@dataclass
class FilterResult:
    selected: list
    discarded: list  # (candidate, reason)


def _pearson(x, y):
    sx, sy = x.std(), y.std()
    if sx == 0 or sy == 0:
        return 1.0 if sx == sy and np.array_equal(x, y) else 0.0
    return float(np.corrcoef(x, y)[0, 1])


def filter_candidates(candidates, config=None, label=True):
    """Drop insensitive or diverging candidates, then collapse similar ones.

    A candidate is insensitive when its spike count under the half-amplitude
    contrast probe differs from the standard-probe count by less than
    ``min_change`` (relative).  Survivors whose standard-probe V traces
    correlate above ``max_correlation`` form one group; the group keeps its
    most accurate member (first in input order when accuracies tie or are
    unknown).
    """
    cfg = config or FilterConfig()
    contrast_probe = cfg.probe.scaled(cfg.contrast)
    alive, discarded = [], []
    for cand in candidates:
        try:
            std = probe_response(cand.params, cfg.probe)
            low = probe_response(cand.params, contrast_probe)
        except DivergenceError as exc:
            discarded.append((cand, f"diverged ({exc})"))
            continue
        change = abs(std.spike_count - low.spike_count) / max(std.spike_count, 1)
        if change < cfg.min_change:
            discarded.append((cand, f"insensitive (spike count {std.spike_count} vs "
                                    f"{low.spike_count}, change {change:.3f})"))
            continue
        alive.append((cand, std))

    ranked = sorted(range(len(alive)), key=lambda i: (
        -(alive[i][0].accuracy if alive[i][0].accuracy is not None else -np.inf), i))
    reps = []
    for i in ranked:
        cand, trace = alive[i]
        match = next((r for r in reps if
                      _pearson(trace.v_series, alive[r][1].v_series) > cfg.max_correlation), None)
        if match is None:
            reps.append(i)
        else:
            discarded.append((cand, f"similar dynamics to candidate {alive[match][0].provenance}"))
    if not reps:
        raise EmptySelectionError(discarded)
    reps.sort()
    selected = [alive[i][0] for i in reps]
    if label:
        counts = [alive[i][1].spike_count for i in reps]
        for rank, k in enumerate(sorted(range(len(reps)), key=lambda k: (-counts[k], k))):
            if selected[k].label is None:
                selected[k].label = PHENOTYPES[rank] if rank < len(PHENOTYPES) else f"2nd-T{rank}"
    return FilterResult(selected, discarded)
