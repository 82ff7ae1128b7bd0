"""Spiking networks built from meta-dynamic neurons.

First-order (LIF) and second-order quadratic neurons, surrogate-gradient
BPTT, and the train / cluster / combine / filter pipeline that produces
reusable neuron types.
"""

from metaneuron.dynamics import (
    REFERENCE_TYPES,
    AttractorReport,
    DivergenceError,
    DynamicParams,
    DynamicsTrace,
    NeuronKind,
    NeuronLayerState,
    analyze_attractors,
    izhikevich_step,
    lif_step,
    probe_response,
    second_order_step,
)

__version__ = "0.1.0"

__all__ = [
    "REFERENCE_TYPES",
    "AttractorReport",
    "DivergenceError",
    "DynamicParams",
    "DynamicsTrace",
    "NeuronKind",
    "NeuronLayerState",
    "analyze_attractors",
    "izhikevich_step",
    "lif_step",
    "probe_response",
    "second_order_step",
]
