"""Loss, segregated backward passes, AdamW and the training loop.

The three backward passes differ only in which edges of the unrolled
graph they follow:

* ``backward_stbp`` follows spatial (layer-to-layer) and temporal
  (membrane carry, recurrent spikes, SPSN window) edges.
* ``backward_sdbp`` follows spatial edges only; the forward trace still
  came from the temporal dynamics.
* ``backward_notd`` is the same per-step backward applied to a trace of the
  memoryless forward.

Gradients through the reset product are detached: d u[t+1] / d u[t] is
``decay * (1 - s[t])`` with ``s[t]`` held constant.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict
from typing import Callable, Iterable

import numpy as np

from .neurons import (
    ForwardTrace,
    NetworkSpec,
    forward_sequence,
    hidden_key,
    init_params,
    triangle_surrogate,
)
from . import _kernels
from .numerics import RngStream

ALGORITHMS = ("stbp", "sdbp", "notd")

GradSet = dict  # parameter name -> gradient array, same keys/shapes as params


class ContractError(RuntimeError):
    pass


class DataError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    pass


def forward_mode_for(algorithm: str) -> str:
    return "notd" if algorithm == "notd" else "temporal"


# -- loss ---------------------------------------------------------------------


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to ``logits``.

    ``logits`` may be ``(B, C)`` or per-step ``(B, T, C)``; in the latter
    case ``labels`` is either ``(B,)`` (repeated over time) or ``(B, T)`` and
    the mean runs over batch and time.
    """
    labels = np.asarray(labels)
    C = logits.shape[-1]
    if logits.ndim == 3 and labels.ndim == 1:
        labels = np.broadcast_to(labels[:, None], logits.shape[:2])
    if labels.shape != logits.shape[:-1]:
        raise DataError(f"labels shape {labels.shape} incompatible with logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise DataError(f"labels must lie in [0, {C})")
    flat = logits.reshape(-1, C).astype(np.float64)
    lab = labels.reshape(-1).astype(np.int64)
    z = flat - flat.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = flat.shape[0]
    loss = float(np.mean(logsum - z[np.arange(n), lab]))
    prob = np.exp(z - logsum[:, None])
    prob[np.arange(n), lab] -= 1.0
    grad = (prob / n).reshape(logits.shape).astype(logits.dtype)
    return loss, grad


# -- backward passes ------------------------------------------------------------


def _readout_backward(spec, params, trace: ForwardTrace, dlogits, grads):
    """Readout grads; returns dL/ds of the last hidden layer, time-major."""
    W = params["readout.weight"]
    S = trace.readout_input
    T = S.shape[0]
    if trace.readout == "mean":
        grads["readout.weight"] = dlogits.T @ S.mean(axis=0)
        grads["readout.bias"] = dlogits.sum(axis=0)
        ds = np.broadcast_to((dlogits @ W) / T, S.shape)
    elif trace.readout == "last":
        grads["readout.weight"] = dlogits.T @ S[-1]
        grads["readout.bias"] = dlogits.sum(axis=0)
        ds = np.zeros_like(S)
        ds[-1] = dlogits @ W
    else:
        d = np.ascontiguousarray(np.swapaxes(dlogits, 0, 1))  # (T, B, C)
        grads["readout.weight"] = np.einsum("tbc,tbn->cn", d, S)
        grads["readout.bias"] = d.sum(axis=(0, 1))
        ds = d @ W
    return ds


def _weight_grad(delta, inputs):
    T, B, n = delta.shape
    return delta.reshape(T * B, n).T @ inputs.reshape(T * B, inputs.shape[-1])


def _ordered(params, grads) -> GradSet:
    return {name: grads[name] if name in grads else np.zeros_like(p)
            for name, p in params.items()}


def _backward(spec: NetworkSpec, params, trace: ForwardTrace, dlogits, temporal: bool,
              zero_temporal: bool = False, fused: bool = True) -> GradSet:
    dlogits = np.asarray(dlogits, dtype=trace.logits.dtype)
    if dlogits.shape != trace.logits.shape:
        raise ContractError(f"dL/dlogits shape {dlogits.shape} != logits {trace.logits.shape}")
    grads: GradSet = {}
    ds = _readout_backward(spec, params, trace, dlogits, grads)
    lif = spec.lif
    follow_time = temporal and not zero_temporal
    for l in range(len(trace.layers) - 1, -1, -1):
        tr = trace.layers[l]
        W = params[hidden_key(l, "weight")]
        dt = tr.u.dtype.type
        ds = np.ascontiguousarray(ds)
        if fused:
            args = (dt(lif.threshold), dt(lif.width), dt(1.0 / (lif.width * lif.width)))
            surr = None
            local = _kernels.surrogate_mul(ds, tr.u, *args)
        else:
            surr = triangle_surrogate(tr.u, lif.threshold, lif.width)
            local = ds * surr
        if tr.kind == "lif":
            R = params.get(hidden_key(l, "recurrent")) if tr.recurrent else None
            if follow_time and fused and R is None:
                delta = _kernels.lif_scan_backward(ds, tr.u, tr.gate, dt(lif.decay), *args)
            elif follow_time:
                if surr is None:
                    surr = triangle_surrogate(tr.u, lif.threshold, lif.width)
                carry = lif.decay * (1 - tr.gate)
                delta = np.empty_like(tr.u)
                nxt = None
                for t in range(tr.u.shape[0] - 1, -1, -1):
                    if nxt is None:
                        delta[t] = ds[t] * surr[t]
                    else:
                        g = ds[t] + nxt @ R if R is not None else ds[t]
                        delta[t] = g * surr[t] + carry[t] * nxt
                    nxt = delta[t]
            else:
                delta = local
            if R is not None:
                grads[hidden_key(l, "recurrent")] = _weight_grad(delta[1:], tr.s[:-1])
            dcur = delta
        elif tr.kind == "spsn":
            kernel = params[hidden_key(l, "kernel")]
            delta = local
            T = delta.shape[0]
            k = kernel.shape[0]
            dk = np.empty_like(kernel)
            for tau in range(k):
                dk[tau] = np.vdot(delta[tau:], tr.currents[: T - tau])
            grads[hidden_key(l, "kernel")] = dk
            dcur = kernel[0] * delta
            if follow_time:
                for tau in range(1, k):
                    dcur[: T - tau] += kernel[tau] * delta[tau:]
        elif tr.kind == "notd" and trace.mode == "notd" and spec.neuron_kinds[l] == "spsn":
            kernel = params[hidden_key(l, "kernel")]
            delta = local
            dk = np.zeros_like(kernel)
            dk[0] = np.vdot(delta, tr.currents)
            grads[hidden_key(l, "kernel")] = dk
            dcur = kernel[0] * delta
        else:  # memoryless cell
            delta = local
            dcur = delta
        grads[hidden_key(l, "weight")] = _weight_grad(dcur, tr.inputs)
        if l > 0:
            ds = dcur @ W
    return _ordered(params, grads)


def backward_stbp(spec, params, trace: ForwardTrace, dlogits, zero_temporal: bool = False) -> GradSet:
    """Backpropagation through both layers and time.

    ``zero_temporal=True`` drops every cross-time term of the recursion;
    it exists so tests can compare against :func:`backward_sdbp`.
    """
    if trace.mode != "temporal":
        raise ContractError("STBP requires a trace from the temporal forward")
    return _backward(spec, params, trace, dlogits, temporal=True, zero_temporal=zero_temporal)


def backward_sdbp(spec, params, trace: ForwardTrace, dlogits) -> GradSet:
    """Spatial-only backward on a temporal forward trace."""
    if trace.mode != "temporal":
        raise ContractError("SDBP requires a trace from the temporal forward")
    return _backward(spec, params, trace, dlogits, temporal=False)


def backward_notd(spec, params, trace: ForwardTrace, dlogits) -> GradSet:
    """Per-step backward on a trace of the memoryless forward."""
    if trace.mode != "notd":
        raise ContractError("NoTD backward requires a trace from the memoryless forward")
    return _backward(spec, params, trace, dlogits, temporal=False)


BACKWARD = {"stbp": backward_stbp, "sdbp": backward_sdbp, "notd": backward_notd}


def compute_grads(spec, params, x, labels, algorithm: str, spike_fn="hard"):
    """Forward, loss and the algorithm's backward; returns (loss, grads, logits)."""
    if algorithm not in ALGORITHMS:
        raise ContractError(f"unknown algorithm {algorithm!r}")
    logits, trace = forward_sequence(spec, params, x, mode=forward_mode_for(algorithm),
                                     spike_fn=spike_fn)
    loss, dlogits = cross_entropy(logits, labels)
    grads = BACKWARD[algorithm](spec, params, trace, dlogits)
    return loss, grads, logits


# -- optimizer ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainPlan:
    algorithm: str = "stbp"
    lr: float = 5e-3
    batch_size: int = 256
    epochs: int = 100
    clip: float = 1.0
    weight_decay: float = 0.01
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS} (got {self.algorithm!r})")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive (got {self.lr})")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1 (got {self.epochs})")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.clip < 0:
            raise ValueError(f"clip must be non-negative (got {self.clip})")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative (got {self.weight_decay})")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


def global_norm(grads: GradSet) -> float:
    return float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))


def clip_grads(grads: GradSet, max_norm: float) -> GradSet:
    if max_norm <= 0:
        return grads
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / (norm + 1e-6)
    return {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}


def clip_and_step(params, grads: GradSet, state: OptimizerState, plan: TrainPlan):
    """Global-norm clipping then one AdamW update, in place; returns (params, state)."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ContractError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient in {name} at step {state.step + 1}")
    grads = clip_grads(grads, plan.clip)
    state.step += 1
    bc1 = 1.0 - BETA1 ** state.step
    bc2 = 1.0 - BETA2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * g * g
        if plan.weight_decay:
            p *= 1 - plan.lr * plan.weight_decay
        p -= (plan.lr / bc1) * m / (np.sqrt(v / bc2) + EPS)
    return params, state


# -- epoch loop -------------------------------------------------------------------


@dataclass
class TrainReport:
    algorithm: str
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    test_loss: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)
    step_seconds: list[float] = field(default_factory=list)
    steps: int = 0
    wall_seconds: float = 0.0

    @property
    def final_test_acc(self) -> float:
        return self.test_acc[-1] if self.test_acc else float("nan")

    @property
    def steps_per_second(self) -> float:
        return self.steps / sum(self.step_seconds) if self.step_seconds else float("nan")

    def to_dict(self, timing: bool = True) -> dict:
        """Plain dict; ``timing=False`` drops the wall-clock fields so two
        deterministic runs serialize identically."""
        d = asdict(self)
        d["final_test_acc"] = self.final_test_acc
        if timing:
            d["steps_per_second"] = self.steps_per_second
        else:
            del d["step_seconds"], d["wall_seconds"]
        return d


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    pred = logits.argmax(axis=-1)
    if pred.ndim == 2:  # per-step readout: vote with the mean logits
        pred = logits.mean(axis=1).argmax(axis=-1)
    return float(np.mean(pred == labels))


def evaluate(spec, params, dataset, algorithm="stbp", batch_size=256) -> tuple[float, float]:
    """Mean loss and accuracy of the network over a whole dataset."""
    from .tasks import batches

    mode = forward_mode_for(algorithm)
    total_loss = correct = 0.0
    for x, y in batches(dataset, batch_size):
        logits, _ = forward_sequence(spec, params, x, mode=mode)
        loss, _ = cross_entropy(logits, y)
        total_loss += loss * len(y)
        correct += accuracy(logits, y) * len(y)
    n = len(dataset)
    return total_loss / n, correct / n


def fit(spec: NetworkSpec, train, plan: TrainPlan, test=None, params=None,
        callbacks: Iterable[Callable] = (), dtype=np.float32):
    """Train ``spec`` on ``train`` under ``plan``; returns (params, TrainReport).

    Each epoch shuffles with a permutation drawn from the plan seed, takes one
    AdamW step per batch and, when ``test`` is given, evaluates it. Callbacks
    are called as ``cb(epoch, params, report)`` after every epoch.
    """
    from .tasks import batches

    if len(train) == 0:
        raise DataError("training set is empty")
    if train.meta.C != spec.input_size:
        raise DataError(f"dataset has {train.meta.C} channels, network expects {spec.input_size}")
    if params is None:
        params = init_params(spec, plan.seed, dtype=dtype)
    state = OptimizerState.zeros_like(params)
    report = TrainReport(plan.algorithm)
    shuffle_rng = RngStream(plan.seed, stream=2)
    start = time.perf_counter()
    for epoch in range(plan.epochs):
        losses, accs, sizes = [], [], []
        for x, y in batches(train, plan.batch_size, rng=shuffle_rng.advance(epoch * len(train)),
                            shuffle=True):
            t0 = time.perf_counter()
            loss, grads, logits = compute_grads(spec, params, x, y, plan.algorithm)
            if not np.isfinite(loss):
                raise TrainingAborted(f"loss became {loss} in epoch {epoch}")
            clip_and_step(params, grads, state, plan)
            report.step_seconds.append(time.perf_counter() - t0)
            report.steps += 1
            losses.append(loss)
            accs.append(accuracy(logits, y))
            sizes.append(len(y))
        report.epochs.append(epoch + 1)
        report.train_loss.append(float(np.average(losses, weights=sizes)))
        report.train_acc.append(float(np.average(accs, weights=sizes)))
        if test is not None:
            tl, ta = evaluate(spec, params, test, plan.algorithm, plan.batch_size)
            report.test_loss.append(tl)
            report.test_acc.append(ta)
        for cb in callbacks:
            cb(epoch, params, report)
    report.wall_seconds = time.perf_counter() - start
    return params, report
