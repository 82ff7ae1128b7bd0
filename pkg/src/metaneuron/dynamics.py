"""Neuron models, fixed-point analysis and the sine stimulus probe.

Three single-step updates share one explicit-Euler convention:

* :func:`second_order_step` - quadratic membrane with a recovery variable,
  ``dV = V^2 - V - U + sigmoid(x)``, ``dU = a (b V - U)``, reset to ``c`` and
  ``U += d`` on a strict threshold crossing.
* :func:`lif_step` - leaky integrator ``dV = -g V + sigmoid(x)``.
* :func:`izhikevich_step` - the mV-scale reference model, threshold ``>= 30``.

All values are dimensionless except for the Izhikevich reference.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

DIVERGENCE_LIMIT = 1e6
EPS_ZERO = 1e-12
# recorded in place of a real-valued attractor when V has none
ATTRACTOR_SENTINEL = 1.5


class DivergenceError(RuntimeError):
    """A membrane or recovery variable left the finite range."""

    def __init__(self, neuron, step=None, layer=None, value=None):
        self.neuron = int(neuron)
        self.step = step
        self.layer = layer
        self.value = value
        where = f"neuron {self.neuron}"
        if layer is not None:
            where = f"layer {layer!r}, " + where
        if step is not None:
            where += f", timestep {step}"
        super().__init__(f"state diverged at {where}")


class NeuronKind(str, enum.Enum):
    FIRST_ORDER = "first_order"
    SECOND_ORDER = "second_order"
    IZHIKEVICH = "izhikevich"


@dataclass(frozen=True)
class DynamicParams:
    """Parameters of one neuron type.

    ``theta_a..theta_d`` are the recovery rate, recovery coupling, reset
    potential and recovery increment of a second-order neuron (``a..d`` for
    the Izhikevich reference).  First-order neurons use ``g`` and ``v_reset``
    instead and ignore the thetas.
    """

    kind: NeuronKind
    theta_a: float = 0.0
    theta_b: float = 0.0
    theta_c: float = 0.0
    theta_d: float = 0.0
    v_th: float = 0.5
    g: float = 0.8
    v_reset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", NeuronKind(self.kind))
        if not math.isfinite(self.v_th):
            raise ValueError("v_th must be finite")
        if self.kind is NeuronKind.SECOND_ORDER and not self.v_th > self.theta_c:
            raise ValueError(
                f"reset potential theta_c={self.theta_c} must lie below v_th={self.v_th}")
        if self.kind is NeuronKind.FIRST_ORDER:
            if not self.g > 0:
                raise ValueError(f"leak conductance must be positive, got {self.g}")
            if not self.v_th > self.v_reset:
                raise ValueError("v_reset must lie below v_th")

    @classmethod
    def second_order(cls, theta_a, theta_b, theta_c, theta_d, v_th=0.5):
        return cls(NeuronKind.SECOND_ORDER, float(theta_a), float(theta_b),
                   float(theta_c), float(theta_d), v_th=float(v_th))

    @classmethod
    def lif(cls, g=0.8, v_th=0.5, v_reset=0.0):
        return cls(NeuronKind.FIRST_ORDER, v_th=float(v_th), g=float(g),
                   v_reset=float(v_reset))

    @classmethod
    def izhikevich(cls, a=0.02, b=0.2, c=-65.0, d=8.0):
        return cls(NeuronKind.IZHIKEVICH, float(a), float(b), float(c), float(d),
                   v_th=30.0)

    @property
    def thetas(self):
        return (self.theta_a, self.theta_b, self.theta_c, self.theta_d)

    def with_thetas(self, thetas):
        a, b, c, d = (float(x) for x in thetas)
        return replace(self, theta_a=a, theta_b=b, theta_c=c, theta_d=d)

    @property
    def reset_value(self):
        return self.v_reset if self.kind is NeuronKind.FIRST_ORDER else self.theta_c

    def initial_state(self, n=1):
        """Resting state: ``V = 0`` and ``U = 0.08`` (``U = 0`` for LIF)."""
        u0 = 0.0 if self.kind is NeuronKind.FIRST_ORDER else INITIAL_U
        return NeuronLayerState(np.zeros(n), np.full(n, u0))


# starting point for learned dynamics and for every simulation
INITIAL_THETAS = (0.02, 0.2, 0.0, 0.08)
INITIAL_V = 0.0
INITIAL_U = 0.08

REFERENCE_TYPES = {
    "2nd-FS": DynamicParams.second_order(0.060, 0.219, -0.065, 0.003),
    "2nd-RS": DynamicParams.second_order(0.060, 0.219, -0.010, 0.050),
    "2nd-SDS": DynamicParams.second_order(-0.009, 0.246, -0.058, 0.065),
    "2nd-WDS": DynamicParams.second_order(0.005, 0.158, -0.058, 0.065),
}
LIF_DEFAULT = DynamicParams.lif()


@dataclass
class NeuronLayerState:
    v: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.v = np.atleast_1d(np.asarray(self.v, dtype=float))
        self.u = np.atleast_1d(np.asarray(self.u, dtype=float))
        if self.v.shape != self.u.shape:
            raise ValueError(f"v and u differ in shape: {self.v.shape} vs {self.u.shape}")

    def __len__(self):
        return len(self.v)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    # exp(-|x|) never overflows; pick the branch that stays accurate
    e = np.exp(-np.abs(x))
    r = 1.0 / (1.0 + e)
    return np.where(x >= 0, r, e * r)


def _check_inputs(state, input_current, params, kind):
    if params.kind is not kind:
        raise ValueError(f"expected {kind.value} params, got {params.kind.value}")
    current = np.atleast_1d(np.asarray(input_current, dtype=float))
    if current.shape != state.v.shape:
        raise ValueError(
            f"input has {current.shape[0]} entries for {len(state)} neurons")
    return current


def _guard(v, u):
    bad = ~((np.abs(v) <= DIVERGENCE_LIMIT) & (np.abs(u) <= DIVERGENCE_LIMIT))
    if bad.any():
        j = int(np.flatnonzero(bad)[0])
        raise DivergenceError(j, value=(float(v[j]), float(u[j])))


def second_order_step(state, input_current, params, dt=1.0):
    """One Euler step of the quadratic neuron for a whole layer.

    ``input_current`` is the raw weighted sum; it is squashed through a
    sigmoid before entering the membrane equation.  Returns the new state and
    a 0/1 spike array.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    current = sigmoid(_check_inputs(state, input_current, params, NeuronKind.SECOND_ORDER))
    v, u = state.v, state.u
    a, b, c, d = params.thetas
    with np.errstate(over="ignore", invalid="ignore"):
        v_new = v + dt * (v * v - v - u + current)
        u_new = u + dt * a * (b * v - u)
    spikes = v_new > params.v_th
    v_new = np.where(spikes, c, v_new)
    u_new = np.where(spikes, u_new + d, u_new)
    _guard(v_new, u_new)
    return NeuronLayerState(v_new, u_new), spikes.astype(np.int8)


def lif_step(state, input_current, params, dt=1.0, leak_only=False):
    """One Euler step of the leaky integrate-and-fire neuron.

    ``leak_only`` forces the post-sigmoid current to zero so the pure decay
    can be observed.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    current = sigmoid(_check_inputs(state, input_current, params, NeuronKind.FIRST_ORDER))
    if leak_only:
        current = np.zeros_like(current)
    v = state.v
    v_new = v + dt * (-params.g * v + current)
    spikes = v_new > params.v_th
    v_new = np.where(spikes, params.v_reset, v_new)
    u_new = np.zeros_like(v_new)
    _guard(v_new, u_new)
    return NeuronLayerState(v_new, u_new), spikes.astype(np.int8)


def izhikevich_step(state, input_current, params, dt=1.0):
    """Izhikevich reference neuron in mV units; fires when ``V' >= 30``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    current = _check_inputs(state, input_current, params, NeuronKind.IZHIKEVICH)
    v, u = state.v, state.u
    a, b, c, d = params.thetas
    with np.errstate(over="ignore", invalid="ignore"):
        v_new = v + dt * (0.04 * v * v + 5.0 * v + 140.0 - u + current)
        u_new = u + dt * a * (b * v - u)
    spikes = v_new >= params.v_th
    v_new = np.where(spikes, c, v_new)
    u_new = np.where(spikes, u_new + d, u_new)
    _guard(v_new, u_new)
    return NeuronLayerState(v_new, u_new), spikes.astype(np.int8)


def step(state, input_current, params, dt=1.0):
    """Dispatch on ``params.kind``."""
    if params.kind is NeuronKind.SECOND_ORDER:
        return second_order_step(state, input_current, params, dt)
    if params.kind is NeuronKind.FIRST_ORDER:
        return lif_step(state, input_current, params, dt)
    return izhikevich_step(state, input_current, params, dt)


# --------------------------------------------------------------------------
# fixed points
# --------------------------------------------------------------------------

STABLE = "stable"
UNSTABLE = "unstable"
VIRTUAL = "virtual-infinity"


@dataclass(frozen=True)
class AttractorReport:
    epsilon: float
    fixed_points: tuple
    u_fixed_point: tuple | None = None

    @property
    def attractor(self):
        """Value of the stable (or marginal) V fixed point, ``inf`` if none."""
        for value, kind in self.fixed_points:
            if kind == STABLE:
                return value
        return math.inf


def analyze_attractors(params, u, i, v=None):
    """Fixed points of the membrane equation with ``U`` and the input frozen.

    ``i`` is the post-sigmoid current.  ``dV/dt = V^2 - V - U + i`` has roots
    ``1/2 +- sqrt(eps)`` with ``eps = U - i + 1/4``; the lower root attracts.

    The recovery fixed point is ``U* = theta_b * V`` evaluated at ``v`` when
    given, otherwise at the V attractor.  Its stability follows the sign of
    ``theta_a`` (``d(dU/dt)/dU = -theta_a``); ``theta_a == 0`` yields ``None``
    because U is then constant.
    """
    if params.kind is not NeuronKind.SECOND_ORDER:
        raise ValueError("attractor analysis applies to second-order params")
    eps = float(u) - float(i) + 0.25
    if abs(eps) <= EPS_ZERO:
        points = ((0.5, STABLE),)
    elif eps > 0:
        root = math.sqrt(eps)
        points = ((0.5 - root, STABLE), (0.5 + root, UNSTABLE))
    else:
        points = ((math.inf, VIRTUAL),)

    u_point = None
    v_ref = v if v is not None else (points[0][0] if eps >= -EPS_ZERO else None)
    if params.theta_a != 0 and v_ref is not None:
        u_point = (params.theta_b * float(v_ref), STABLE if params.theta_a > 0 else UNSTABLE)
    return AttractorReport(eps, points, u_point)


# --------------------------------------------------------------------------
# stimulus probe
# --------------------------------------------------------------------------

STANDARD_PROBE_STD = 0.723


@dataclass(frozen=True)
class ProbeConfig:
    """Sine stimulus applied as the raw (pre-sigmoid) input.

    The sine has zero mean and standard deviation ``std``, i.e. amplitude
    ``std * sqrt(2)``.
    """

    std: float = STANDARD_PROBE_STD
    mean: float = 0.0
    period: float = 50.0
    horizon: int = 200
    dt: float = 1.0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("probe horizon must be at least one step")
        if not self.dt > 0 or not self.period > 0:
            raise ValueError("dt and period must be positive")

    def signal(self):
        t = np.arange(self.horizon) * self.dt
        return self.mean + self.std * math.sqrt(2.0) * np.sin(2.0 * math.pi * t / self.period)

    def scaled(self, factor):
        return replace(self, std=self.std * factor)


@dataclass
class DynamicsTrace:
    """Per-step record of a single probed neuron.

    ``v_series`` holds the membrane potential *before* reset, so spike steps
    show the crossing value.  ``u_series`` is the recovery variable after the
    step (including any spike increment).
    """

    v_series: np.ndarray
    u_series: np.ndarray
    input_series: np.ndarray
    input_sigmoid: np.ndarray
    attractor_series: np.ndarray
    spike_times: list = field(default_factory=list)

    @property
    def spike_count(self):
        return len(self.spike_times)

    @property
    def spikes(self):
        out = np.zeros(len(self.v_series), dtype=np.int8)
        out[self.spike_times] = 1
        return out

    def half_counts(self):
        """Spike counts in the first and second half of the trace."""
        half = len(self.v_series) // 2
        first = sum(1 for t in self.spike_times if t < half)
        return first, self.spike_count - first

    def to_csv(self, path):
        path = Path(path)
        spikes = self.spikes
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "input_raw", "input_sigmoid", "v", "u", "attractor", "spike"])
            for t in range(len(self.v_series)):
                w.writerow([t, repr(float(self.input_series[t])),
                            repr(float(self.input_sigmoid[t])),
                            repr(float(self.v_series[t])), repr(float(self.u_series[t])),
                            repr(float(self.attractor_series[t])), int(spikes[t])])
        return path


def probe_response(params, probe=None):
    """Drive one neuron with the sine probe and record everything."""
    probe = probe or ProbeConfig()
    if params.kind is NeuronKind.IZHIKEVICH:
        raise ValueError("probe is defined for dimensionless first/second-order neurons")
    raw = probe.signal()
    current = sigmoid(raw)
    H = probe.horizon
    v_series = np.empty(H)
    u_series = np.empty(H)
    attractor = np.empty(H)
    spike_times = []
    state = params.initial_state(1)
    dt = probe.dt
    second = params.kind is NeuronKind.SECOND_ORDER
    a, b, c, d = params.thetas
    for t in range(H):
        v, u, i = state.v[0], state.u[0], current[t]
        if second:
            rep = analyze_attractors(params, u, i)
            fixed = rep.attractor
            attractor[t] = ATTRACTOR_SENTINEL if math.isinf(fixed) else fixed
            v_new = v + dt * (v * v - v - u + i)
            u_new = u + dt * a * (b * v - u)
        else:
            attractor[t] = i / params.g
            v_new = v + dt * (-params.g * v + i)
            u_new = 0.0
        v_series[t] = v_new
        if v_new > params.v_th:
            spike_times.append(t)
            v_new = params.reset_value
            if second:
                u_new += d
        u_series[t] = u_new
        if not (abs(v_new) <= DIVERGENCE_LIMIT and abs(u_new) <= DIVERGENCE_LIMIT):
            raise DivergenceError(0, step=t)
        state = NeuronLayerState([v_new], [u_new])
    return DynamicsTrace(v_series, u_series, raw, current, attractor, spike_times)


# --------------------------------------------------------------------------
# params files
# --------------------------------------------------------------------------

PARAMS_COLUMNS = ["label", "kind", "theta_a", "theta_b", "theta_c", "theta_d",
                  "v_th", "g", "v_reset"]


def write_params_file(path, named_params):
    """Write ``{label: DynamicParams}`` as CSV, one neuron type per row."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PARAMS_COLUMNS)
        for label, p in named_params.items():
            w.writerow([label, p.kind.value, repr(p.theta_a), repr(p.theta_b),
                        repr(p.theta_c), repr(p.theta_d), repr(p.v_th), repr(p.g),
                        repr(p.v_reset)])
    return path


def read_params_file(path):
    """Inverse of :func:`write_params_file`; preserves row order."""
    out = {}
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(PARAMS_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            label = row["label"]
            if label in out:
                raise ValueError(f"{path}: duplicate label {label!r}")
            out[label] = DynamicParams(
                NeuronKind(row["kind"]),
                *(float(row[k]) for k in ("theta_a", "theta_b", "theta_c", "theta_d",
                                          "v_th", "g", "v_reset")))
    if not out:
        raise ValueError(f"{path}: no neuron types")
    return out


def builtin_types():
    """Built-in second-order types plus the default LIF, keyed by label."""
    return {**REFERENCE_TYPES, "1st-order": LIF_DEFAULT}
