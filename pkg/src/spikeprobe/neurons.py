"""Spiking layer dynamics, the triangle surrogate and the non-spiking readout.

Internally every sequence is kept time-major, ``(T, B, C)``, so that a
single time step is a contiguous slice; the public ``forward_sequence``
accepts and returns batch-major ``(B, T, C)`` arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import _kernels
from .numerics import (
    DEFAULT_DTYPE,
    DimensionError,
    NumericError,
    RngStream,
    as_seq,
    init_uniform,
)

NEURON_KINDS = ("lif", "notd", "spsn")
ARCHITECTURES = ("sfnn", "srnn")
READOUT_MODES = ("mean", "last", "per_step")
FORWARD_MODES = ("temporal", "notd")

ForwardMode = Literal["temporal", "notd"]
SpikeFn = Literal["hard", "smooth"]


class ConfigurationError(ValueError):
    pass


class EmptySequenceError(ValueError):
    pass


# -- spike nonlinearity --------------------------------------------------------


def heaviside(u, threshold):
    """Spike where ``u >= threshold`` (inclusive tie rule)."""
    return (u >= threshold).astype(np.result_type(u, np.float32))


def triangle_surrogate(u, threshold, width):
    """Unit-area triangle pseudo-derivative of the step, peak ``1/width``."""
    if width <= 0:
        raise ConfigurationError("surrogate width must be positive")
    return np.maximum(0.0, width - np.abs(u - threshold)) * (1.0 / (width * width))


def triangle_ramp(u, threshold, width):
    """Antiderivative of :func:`triangle_surrogate`, rising 0 -> 1.

    Used as a smooth stand-in for the step when gradients are checked by
    finite differences; its derivative is exactly the triangle surrogate.
    """
    d = np.asarray(u - threshold)
    w2 = 2.0 * width * width
    lo = (d + width) ** 2 / w2
    hi = 1.0 - (width - d) ** 2 / w2
    out = np.where(d <= 0, lo, hi)
    out = np.where(d <= -width, 0.0, out)
    out = np.where(d >= width, 1.0, out)
    return out.astype(np.result_type(u, np.float32))


def _spike(u, threshold, width, spike_fn: SpikeFn):
    if spike_fn == "hard":
        return heaviside(u, threshold)
    if spike_fn == "smooth":
        return triangle_ramp(u, threshold, width)
    raise ConfigurationError(f"unknown spike function {spike_fn!r}")


# -- parameters and single steps ----------------------------------------------


@dataclass(frozen=True)
class LifParams:
    decay: float = 1.0
    threshold: float = 0.5
    width: float = 0.4

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ConfigurationError(f"decay must lie in [0, 1], got {self.decay}")
        if self.threshold <= 0:
            raise ConfigurationError(f"threshold must be positive, got {self.threshold}")
        if self.width <= 0:
            raise ConfigurationError(f"width must be positive, got {self.width}")


@dataclass(frozen=True)
class SpsnParams:
    kernel_size: int = 128
    threshold: float = 0.5
    width: float = 0.4

    def __post_init__(self):
        if self.kernel_size < 1:
            raise ConfigurationError(f"kernel_size must be >= 1, got {self.kernel_size}")
        if self.threshold <= 0 or self.width <= 0:
            raise ConfigurationError("threshold and width must be positive")


def lif_step(u_prev, s_prev, current, p: LifParams):
    """One leaky integrate-and-fire update with hard multiplicative reset."""
    if not np.all(np.isfinite(current)):
        raise NumericError("non-finite input current")
    u = p.decay * u_prev * (1 - s_prev) + current
    return u, heaviside(u, p.threshold)


def notd_step(current, threshold):
    """Memoryless cell: the membrane is the present input current only."""
    if not np.all(np.isfinite(current)):
        raise NumericError("non-finite input current")
    u = np.array(current, copy=True)
    return u, heaviside(u, threshold)


def spsn_potential(currents: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Causal windowed sum ``u[t] = sum_tau kernel[tau] * currents[t - tau]``.

    ``currents`` is time-major; steps before the start count as zero.
    """
    T = currents.shape[0]
    k = kernel.shape[0]
    if k > T:
        raise ConfigurationError(f"kernel size {k} exceeds sequence length {T}")
    u = kernel[0] * currents
    for tau in range(1, k):
        u[tau:] += kernel[tau] * currents[: T - tau]
    return u


# -- network ------------------------------------------------------------------


@dataclass(frozen=True)
class NetworkSpec:
    architecture: str = "sfnn"
    input_size: int = 4
    hidden: tuple[int, ...] = (128, 256, 256)
    n_classes: int = 2
    neuron: str | tuple[str, ...] = "lif"
    readout: str = "mean"
    decay: float = 1.0
    threshold: float = 0.5
    width: float = 0.4
    kernel_size: int = 128

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if not self.hidden:
            raise ConfigurationError("hidden needs at least one layer")
        if self.input_size < 1 or self.n_classes < 1 or min(self.hidden) < 1:
            raise ConfigurationError("hidden, input_size and n_classes must be positive")
        if self.readout not in READOUT_MODES:
            raise ConfigurationError(f"readout must be one of {READOUT_MODES}, got {self.readout!r}")
        kinds = self.neuron_kinds
        if len(kinds) != len(self.hidden):
            raise ConfigurationError("neuron needs one kind per hidden layer")
        for kind in kinds:
            if kind not in NEURON_KINDS:
                raise ConfigurationError(f"neuron kind {kind!r} is not one of {NEURON_KINDS}")
        LifParams(self.decay, self.threshold, self.width)
        if "spsn" in kinds:
            SpsnParams(self.kernel_size, self.threshold, self.width)

    @property
    def neuron_kinds(self) -> tuple[str, ...]:
        if isinstance(self.neuron, str):
            return (self.neuron,) * len(self.hidden)
        return tuple(self.neuron)

    @property
    def recurrent(self) -> bool:
        return self.architecture == "srnn"

    @property
    def lif(self) -> LifParams:
        return LifParams(self.decay, self.threshold, self.width)

    def layer_sizes(self) -> list[tuple[int, int]]:
        """(fan_in, width) for each hidden layer."""
        ins = (self.input_size,) + self.hidden[:-1]
        return list(zip(ins, self.hidden))


@dataclass
class LayerTrace:
    kind: str
    inputs: np.ndarray  # (T, B, m) spikes (or raw inputs) entering the layer
    u: np.ndarray  # (T, B, n) membrane potential after integration
    s: np.ndarray  # (T, B, n) emitted spikes
    gate: np.ndarray  # (T, B, n) hard reset gate, identical to s unless smoothed
    currents: np.ndarray | None = None  # (T, B, n) W @ inputs, kept for SPSN
    recurrent: bool = False


@dataclass
class ForwardTrace:
    mode: str
    spike_fn: str
    readout: str
    layers: list[LayerTrace]
    logits: np.ndarray
    readout_input: np.ndarray = field(repr=False, default=None)  # (T, B, n_last)

    @property
    def T(self) -> int:
        return self.layers[0].u.shape[0]

    @property
    def batch(self) -> int:
        return self.layers[0].u.shape[1]


def hidden_key(layer: int, name: str) -> str:
    return f"hidden.{layer}.{name}"


def init_params(spec: NetworkSpec, seed: int, dtype=DEFAULT_DTYPE) -> dict[str, np.ndarray]:
    """Uniform +-sqrt(1/fan_in) weights drawn from a dedicated init stream."""
    rng = RngStream(seed, stream=1)
    params: dict[str, np.ndarray] = {}
    for l, ((m, n), kind) in enumerate(zip(spec.layer_sizes(), spec.neuron_kinds)):
        params[hidden_key(l, "weight")], rng = init_uniform(rng, (n, m), m, dtype)
        if spec.recurrent:
            params[hidden_key(l, "recurrent")], rng = init_uniform(rng, (n, n), n, dtype)
        if kind == "spsn":
            k = spec.kernel_size
            params[hidden_key(l, "kernel")], rng = init_uniform(rng, (k,), k, dtype)
    n_last = spec.hidden[-1]
    params["readout.weight"], rng = init_uniform(rng, (spec.n_classes, n_last), n_last, dtype)
    params["readout.bias"], rng = init_uniform(rng, (spec.n_classes,), n_last, dtype)
    return params


def readout(spikes: np.ndarray, W_out: np.ndarray, b_out: np.ndarray | None, mode: str) -> np.ndarray:
    """Affine non-spiking readout of time-major spikes ``(T, B, n)``.

    Returns ``(B, C)`` for ``mean``/``last`` and ``(B, T, C)`` for ``per_step``.
    """
    if mode == "mean":
        y = spikes.mean(axis=0) @ W_out.T
    elif mode == "last":
        y = spikes[-1] @ W_out.T
    elif mode == "per_step":
        y = np.swapaxes(spikes @ W_out.T, 0, 1)
    else:
        raise ConfigurationError(f"unknown readout mode {mode!r}")
    if b_out is not None:
        y = y + b_out
    return y


def _lif_layer(inputs, W, R, p: LifParams, spike_fn: SpikeFn, fused: bool = True):
    T, B, _ = inputs.shape
    n = W.shape[0]
    currents = inputs @ W.T
    if fused and R is None and spike_fn == "hard":
        dt = currents.dtype.type
        U, S = _kernels.lif_scan(currents, dt(p.decay), dt(p.threshold))
        return U, S, S
    U = np.empty_like(currents)
    S = np.empty_like(currents)
    G = S if spike_fn == "hard" else np.empty_like(currents)
    u = np.zeros((B, n), dtype=currents.dtype)
    g = np.zeros_like(u)
    s = g
    for t in range(T):
        c = currents[t]
        if R is not None and t > 0:
            c = c + s @ R.T
        u = p.decay * u * (1 - g) + c
        U[t] = u
        S[t] = s = _spike(u, p.threshold, p.width, spike_fn)
        if spike_fn == "hard":
            g = s
        else:
            G[t] = g = heaviside(u, p.threshold)
    return U, S, G


def forward_sequence(
    spec: NetworkSpec,
    params: dict[str, np.ndarray],
    x,
    mode: ForwardMode = "temporal",
    spike_fn: SpikeFn = "hard",
    dtype=None,
) -> tuple[np.ndarray, ForwardTrace]:
    """Run every hidden layer and the readout on batch-major input ``x``.

    ``mode="temporal"`` integrates membranes over time; ``mode="notd"``
    replaces every hidden unit by a memoryless cell (no membrane carry, no
    recurrence, SPSN reduced to its instantaneous tap).
    """
    if mode not in FORWARD_MODES:
        raise ConfigurationError(f"forward mode must be one of {FORWARD_MODES}")
    dtype = dtype or params["readout.weight"].dtype
    x = as_seq(x, dtype=dtype)
    if x.shape[1] == 0:
        raise EmptySequenceError("sequence length T must be >= 1")
    if x.shape[2] != spec.input_size:
        raise DimensionError(f"input has {x.shape[2]} channels, network expects {spec.input_size}")
    h = np.ascontiguousarray(np.swapaxes(x, 0, 1))
    lif = spec.lif
    layers: list[LayerTrace] = []
    for l, kind in enumerate(spec.neuron_kinds):
        W = params[hidden_key(l, "weight")]
        if mode == "notd" or kind == "notd":
            currents = h @ W.T
            U = params[hidden_key(l, "kernel")][0] * currents if kind == "spsn" else currents
            S = _spike(U, lif.threshold, lif.width, spike_fn)
            G = S if spike_fn == "hard" else heaviside(U, lif.threshold)
            tr = LayerTrace("notd" if mode == "notd" else kind, h, U, S, G,
                            currents=currents if kind == "spsn" else None)
        elif kind == "lif":
            R = params.get(hidden_key(l, "recurrent")) if spec.recurrent else None
            U, S, G = _lif_layer(h, W, R, lif, spike_fn)
            tr = LayerTrace("lif", h, U, S, G, recurrent=R is not None)
        else:  # spsn
            kernel = params[hidden_key(l, "kernel")]
            currents = h @ W.T
            U = spsn_potential(currents, kernel)
            S = _spike(U, lif.threshold, lif.width, spike_fn)
            G = S if spike_fn == "hard" else heaviside(U, lif.threshold)
            tr = LayerTrace("spsn", h, U, S, G, currents=currents)
        layers.append(tr)
        h = tr.s
    logits = readout(h, params["readout.weight"], params["readout.bias"], spec.readout)
    trace = ForwardTrace(mode, spike_fn, spec.readout, layers, logits, readout_input=h)
    return logits, trace


def spsn_forward(inputs, W, kernel, p: SpsnParams):
    """Single SPSN layer on batch-major ``inputs``; returns (spikes, membrane)."""
    x = np.swapaxes(as_seq(inputs, dtype=W.dtype), 0, 1)
    if p.kernel_size != len(kernel):
        raise ConfigurationError("kernel length does not match kernel_size")
    U = spsn_potential(x @ W.T, np.asarray(kernel, dtype=W.dtype))
    S = heaviside(U, p.threshold)
    return np.swapaxes(S, 0, 1), np.swapaxes(U, 0, 1)
