"""Operation counting, spike statistics, energy formulas and training benchmarks."""

from __future__ import annotations

import csv
import io
import math
import os
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .neurons import NetworkSpec, forward_sequence, init_params
from .tasks import batches
from .training import OptimizerState, TrainPlan, clip_and_step, compute_grads

E_AC_PJ = 0.9
E_MAC_PJ = 4.6


class QueryError(ValueError):
    pass


class UnsupportedError(ValueError):
    pass


@dataclass(frozen=True)
class EnergyConstants:
    e_ac: float = E_AC_PJ
    e_mac: float = E_MAC_PJ

    def __post_init__(self):
        if self.e_ac <= 0 or self.e_mac <= 0:
            raise QueryError("energy constants must be positive")


# -- closed-form cost rows ------------------------------------------------------------
# Each row maps dimensions and spike frequencies to (ACs, MACs) per time step.


def _log2T(q):
    return math.log2(q.T)


ROWS = {
    "FFSNN-LIF": (("m", "n", "Fr_in", "Fr_out"),
                  lambda q: (q.m * q.n * q.Fr_in + q.n * q.Fr_out, q.n)),
    "FFSNN-CE-LIF": (("m", "n", "Fr_in", "Fr_out"),
                     lambda q: (q.m * q.n * q.Fr_in + q.n * q.Fr_out, 3 * q.n)),
    "FFSNN-LTC": (("m", "n", "Fr_in", "Fr_out"),
                  lambda q: (q.m * q.n * q.Fr_in + 2 * q.n * q.Fr_out + 2 * q.n,
                             4 * q.n * q.n + 3 * q.n)),
    "FFSNN-SPSN": (("m", "n", "k", "Fr_in"),
                   lambda q: (q.m * q.n * q.Fr_in, q.n * q.k)),
    "FFSNN-PMSN": (("m", "n", "T", "Fr_in"),
                   lambda q: (q.m * q.n * q.Fr_in, 2 * q.n * _log2T(q) + 5 * q.n)),
    "SRNN-LIF": (("m", "n", "Fr_in", "Fr_out"),
                 lambda q: (q.m * q.n * q.Fr_in + (q.n * q.n + q.n) * q.Fr_out, q.n)),
    "SRNN-CE-LIF": (("m", "n", "Fr_in", "Fr_out"),
                    lambda q: (q.m * q.n * q.Fr_in + (q.n * q.n + q.n) * q.Fr_out, 3 * q.n)),
    "SRNN-LTC": (("m", "n", "Fr_in", "Fr_out"),
                 lambda q: (q.m * q.n * q.Fr_in + (q.n * q.n + 2 * q.n) * q.Fr_out + 2 * q.n,
                            4 * q.n * q.n + 3 * q.n)),
    "GSN": (("m", "n", "Fr_in", "Fr_out"),
            lambda q: (2 * q.m * q.n * q.Fr_in + 2 * q.n * q.n * q.Fr_out, 5 * q.n)),
    "SpikingTCN": (("m", "n", "k", "Fr_in", "Fr_conv2"),
                   lambda q: (q.k * q.m * q.n * q.Fr_in + q.k * q.n * q.n * q.Fr_conv2, 0.0)),
    "SpikeDrivenTransformer": (
        ("n", "h", "T", "Fr_in", "Fr_q", "Fr_k", "Fr_v", "Fr_attn", "Fr_fc1", "Fr_fc2"),
        lambda q: ((3 * q.Fr_in + q.Fr_attn) * q.n * q.n
                   + (q.Fr_q * q.Fr_k + q.Fr_v) * q.n * q.T
                   + (q.Fr_fc1 + q.Fr_fc2) * q.n * q.h, 0.0)),
    "BinaryS4D": (("n", "T", "Fr_out"),
                  lambda q: (2 * q.n * q.n * q.Fr_out, 2 * q.n * _log2T(q) + 8 * q.n)),
    "GSU": (("n", "T", "Fr_y", "Fr_w"),
            lambda q: (q.n * q.n * (q.Fr_y + q.Fr_w) + 2 * q.n, 2 * q.n * _log2T(q) + 6 * q.n)),
}


@dataclass(frozen=True)
class EnergyQuery:
    row: str
    m: float | None = None
    n: float | None = None
    k: float | None = None
    h: float | None = None
    T: float | None = None
    Fr_in: float | None = None
    Fr_out: float | None = None
    Fr_conv2: float | None = None
    Fr_q: float | None = None
    Fr_k: float | None = None
    Fr_v: float | None = None
    Fr_attn: float | None = None
    Fr_fc1: float | None = None
    Fr_fc2: float | None = None
    Fr_y: float | None = None
    Fr_w: float | None = None
    constants: EnergyConstants = field(default_factory=EnergyConstants)


@dataclass
class EnergyResult:
    row: str
    acs: float
    macs: float
    energy_pj: float
    T: float | None = None

    @property
    def energy_nj(self) -> float:
        return self.energy_pj / 1000.0

    @property
    def per_sample_pj(self) -> float | None:
        return None if self.T is None else self.energy_pj * self.T

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(energy_nj=self.energy_nj, per_sample_pj=self.per_sample_pj,
                 per_sample_nj=None if self.T is None else self.per_sample_pj / 1000.0)
        return d


def energy_from_counts(acs: float, macs: float, constants: EnergyConstants = EnergyConstants()) -> float:
    """Energy in pJ of the given AC and MAC counts."""
    return acs * constants.e_ac + macs * constants.e_mac


def energy_formula(q: EnergyQuery) -> EnergyResult:
    """Evaluate one cost row per time step (and per sample when ``T`` is set)."""
    if q.row not in ROWS:
        raise QueryError(f"unknown row {q.row!r}; choose from {sorted(ROWS)}")
    required, fn = ROWS[q.row]
    for name in required:
        v = getattr(q, name)
        if v is None:
            raise QueryError(f"row {q.row} needs field {name!r}")
        if v < 0 or (name.startswith("Fr_") and v > 1):
            raise QueryError(f"field {name!r}={v} out of range")
    acs, macs = fn(q)
    return EnergyResult(q.row, float(acs), float(macs), energy_from_counts(acs, macs, q.constants), q.T)


# -- measurement --------------------------------------------------------------------


@dataclass
class SpikeStats:
    """Mean firing probability per step, sample and neuron for each population.

    ``populations['input']`` is the fraction of non-zero input entries;
    ``populations['hidden.l']`` belongs to hidden layer ``l``.
    """

    populations: dict[str, float]
    T: int
    samples: int

    def __getitem__(self, key):
        return self.populations[key]


def _iter_traces(spec, params, dataset, mode, batch_size):
    for x, _ in batches(dataset, batch_size):
        _, trace = forward_sequence(spec, params, x, mode=mode)
        yield trace


def record_spike_stats(spec: NetworkSpec, params, dataset, layers=None, mode="temporal",
                       batch_size: int = 256) -> SpikeStats:
    n_hidden = len(spec.hidden)
    layers = list(range(n_hidden)) if layers is None else list(layers)
    for l in layers:
        if not 0 <= l < n_hidden:
            raise IndexError(f"layer selector {l} out of range for {n_hidden} hidden layers")
    sums = {"input": 0.0, **{f"hidden.{l}": 0.0 for l in layers}}
    for trace in _iter_traces(spec, params, dataset, mode, batch_size):
        sums["input"] += float(np.count_nonzero(trace.layers[0].inputs))
        for l in layers:
            sums[f"hidden.{l}"] += float(trace.layers[l].s.sum(dtype=np.float64))
    N, T = len(dataset), dataset.meta.T
    pops = {"input": sums["input"] / (N * T * spec.input_size)}
    for l in layers:
        pops[f"hidden.{l}"] = sums[f"hidden.{l}"] / (N * T * spec.hidden[l])
    return SpikeStats(pops, T, N)


@dataclass
class LayerOps:
    name: str
    kind: str
    acs: float = 0.0
    macs: float = 0.0


@dataclass
class OpCounts:
    """Average operations per time step per sample."""

    layers: list[LayerOps]
    T: int
    samples: int

    @property
    def acs(self) -> float:
        return sum(l.acs for l in self.layers)

    @property
    def macs(self) -> float:
        return sum(l.macs for l in self.layers)

    @property
    def hidden_acs(self) -> float:
        return sum(l.acs for l in self.layers if l.kind != "readout")

    @property
    def hidden_macs(self) -> float:
        return sum(l.macs for l in self.layers if l.kind != "readout")

    def hidden(self, l: int) -> LayerOps:
        return self.layers[l]

    def energy_pj(self, constants: EnergyConstants = EnergyConstants()) -> float:
        return energy_from_counts(self.acs, self.macs, constants)

    def to_dict(self) -> dict:
        return {"layers": [asdict(l) for l in self.layers], "acs": self.acs, "macs": self.macs,
                "T": self.T, "samples": self.samples, "energy_pj": self.energy_pj()}


def _is_binary(x) -> bool:
    return bool(np.all((x == 0) | (x == 1)))


def count_ops(spec: NetworkSpec, params, dataset, mode="temporal", batch_size: int = 256) -> OpCounts:
    """Instrumented inference: count operations from the actual spike traces.

    Every non-zero binary input fans out into ``n`` accumulates (ACs); a
    non-binary input value costs ``n`` MACs instead. A LIF neuron spends one
    MAC per step on its decay and one AC per emitted spike on its reset.
    Recurrent spikes from step ``t-1`` fan out into ``n`` ACs at step ``t``.
    An SPSN layer spends ``n*k`` MACs per step on its window.
    """
    kinds = ["notd" if mode == "notd" else k for k in spec.neuron_kinds]
    for k in kinds:
        if k not in ("lif", "notd", "spsn"):
            raise UnsupportedError(f"no counter for neuron kind {k!r}; use energy_formula")
    n_hidden = len(spec.hidden)
    acs = np.zeros(n_hidden + 1)
    macs = np.zeros(n_hidden + 1)
    N, T = 0, dataset.meta.T
    for trace in _iter_traces(spec, params, dataset, mode, batch_size):
        B = trace.batch
        N += B
        for l, tr in enumerate(trace.layers):
            n = spec.hidden[l]
            fan = float(np.count_nonzero(tr.inputs)) * n
            if _is_binary(tr.inputs):
                acs[l] += fan
            else:
                macs[l] += fan
            if kinds[l] == "lif":
                macs[l] += n * T * B
                acs[l] += float(tr.s.sum(dtype=np.float64))
                if tr.recurrent:
                    acs[l] += float(tr.s[:-1].sum(dtype=np.float64)) * n
            elif kinds[l] == "spsn":
                macs[l] += n * spec.kernel_size * T * B
        acs[-1] += float(trace.readout_input.sum(dtype=np.float64)) * spec.n_classes
    denom = N * T
    layers = [LayerOps(f"hidden.{l}", kinds[l], acs[l] / denom, macs[l] / denom)
              for l in range(n_hidden)]
    layers.append(LayerOps("readout", "readout", acs[-1] / denom, macs[-1] / denom))
    return OpCounts(layers, T, N)


def formula_row(spec: NetworkSpec, mode="temporal") -> str:
    kind = "notd" if mode == "notd" else spec.neuron_kinds[0]
    if kind == "lif":
        return "SRNN-LIF" if spec.recurrent else "FFSNN-LIF"
    if kind == "spsn" and not spec.recurrent:
        return "FFSNN-SPSN"
    raise UnsupportedError(f"no closed-form row for {spec.architecture}/{kind}")


def layer_queries(spec: NetworkSpec, stats: SpikeStats, constants=EnergyConstants()) -> list[EnergyQuery]:
    """One cost-row query per hidden layer, filled from measured frequencies."""
    row = formula_row(spec)
    out = []
    for l, (m, n) in enumerate(spec.layer_sizes()):
        fr_in = stats["input"] if l == 0 else stats[f"hidden.{l - 1}"]
        out.append(EnergyQuery(row, m=m, n=n, k=spec.kernel_size, T=stats.T, Fr_in=fr_in,
                               Fr_out=stats[f"hidden.{l}"], constants=constants))
    return out


# -- training benchmark ------------------------------------------------------------------


def cached_widths(spec: NetworkSpec, mode="temporal") -> int:
    """Values cached per (sample, time step) by a hard-spike forward trace.

    Each hidden layer keeps its inputs, membrane and spikes; SPSN layers also
    keep their input currents.
    """
    total = 0
    for (m, n), kind in zip(spec.layer_sizes(), spec.neuron_kinds):
        total += m + 2 * n
        if kind == "spsn":
            total += n
    return total


def activation_bytes(spec: NetworkSpec, batch: int, T: int, bytes_per_value: int = 4) -> int:
    return batch * T * cached_widths(spec) * bytes_per_value


@dataclass
class BenchRow:
    length: int
    neuron: str
    architecture: str
    batch: int
    updates_per_second: float
    steps_per_second: float  # sequence time steps processed per second
    seconds_per_update: float
    epoch_seconds: float
    activation_bytes: int
    samples: list[float] = field(default_factory=list)


def bench_training(spec: NetworkSpec, plan: TrainPlan, lengths, batch_size: int = 64,
                   warmup: int = 5, repeats: int = 20, epoch_samples: int = 1024,
                   seed: int = 0, kernel_follows_length: bool = False) -> list[BenchRow]:
    """Time optimizer updates on random one-hot batches at each sequence length.

    Reports the median over ``repeats`` updates after ``warmup`` untimed
    ones. ``epoch_seconds`` extrapolates to ``epoch_samples`` samples. With
    ``kernel_follows_length`` the SPSN kernel size is set to each length.
    """
    rows = []
    rng = np.random.default_rng(seed)
    for T in lengths:
        if T < 1:
            raise ValueError("sequence lengths must be >= 1")
        s = spec
        if kernel_follows_length:
            s = NetworkSpec(**{**asdict(spec), "kernel_size": T})
        params = init_params(s, plan.seed)
        state = OptimizerState.zeros_like(params)
        x = np.eye(s.input_size, dtype=np.float32)[rng.integers(0, s.input_size, (batch_size, T))]
        y = rng.integers(0, s.n_classes, batch_size)
        times = []
        for i in range(warmup + repeats):
            t0 = time.perf_counter()
            _, grads, _ = compute_grads(s, params, x, y, plan.algorithm)
            clip_and_step(params, grads, state, plan)
            if i >= warmup:
                times.append(time.perf_counter() - t0)
        med = statistics.median(times)
        rows.append(BenchRow(T, "/".join(sorted(set(s.neuron_kinds))), s.architecture, batch_size,
                             1.0 / med, T / med, med,
                             med * math.ceil(epoch_samples / batch_size),
                             activation_bytes(s, batch_size, T), times))
    return rows


def bench_csv(rows: list[BenchRow], counts: OpCounts | None = None) -> str:
    """Table-4 shaped CSV: one line per architecture/neuron."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    lengths = [r.length for r in rows]
    w.writerow(["architecture", "neuron"]
               + [f"kstep_per_s_{L}" for L in lengths]
               + [f"activation_gb_{L}" for L in lengths]
               + ["acs_k", "macs_k", "empirical_cost_nj"])
    r0 = rows[0]
    w.writerow([r0.architecture, r0.neuron]
               + [f"{r.steps_per_second / 1e3:.4f}" for r in rows]
               + [f"{r.activation_bytes / 1e9:.4f}" for r in rows]
               + ([f"{counts.acs / 1e3:.4f}", f"{counts.macs / 1e3:.4f}",
                   f"{counts.energy_pj() / 1e3:.4f}"] if counts else ["", "", ""]))
    return buf.getvalue()


def thread_count() -> int:
    try:
        from threadpoolctl import threadpool_info

        return max((i.get("num_threads", 1) for i in threadpool_info()), default=1)
    except ImportError:  # pragma: no cover
        return os.cpu_count() or 1
