"""Spiking sequence models, segregated temporal probing and energy accounting."""

__version__ = "0.1.0"

from .neurons import NetworkSpec, forward_sequence, init_params
from .training import TrainPlan, backward_notd, backward_sdbp, backward_stbp, fit
from .tasks import AlSpec, al_dataset, generate_al_dataset, load_dataset
from .stp import ProbeConfig, ProbeReport, run_probe, verdict
from .efficiency import (
    EnergyConstants,
    EnergyQuery,
    bench_training,
    count_ops,
    energy_formula,
    record_spike_stats,
)

__all__ = [
    "AlSpec", "EnergyConstants", "EnergyQuery", "NetworkSpec", "ProbeConfig", "ProbeReport",
    "TrainPlan", "al_dataset", "backward_notd", "backward_sdbp", "backward_stbp",
    "bench_training", "count_ops", "energy_formula", "fit", "forward_sequence",
    "generate_al_dataset", "init_params", "load_dataset", "record_spike_stats", "run_probe",
    "verdict",
]
