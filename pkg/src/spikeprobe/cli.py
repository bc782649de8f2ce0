"""Command-line front end: ``gen``, ``train``, ``probe``, ``energy`` and ``bench``.

Every command writes its reports plus a ``manifest.json`` into the output
directory. On failure it writes ``error.json`` instead and exits nonzero.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import os
import sys
import traceback
from contextlib import nullcontext
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, parse_config
from .efficiency import (
    EnergyResult,
    bench_csv,
    bench_training,
    energy_formula,
    energy_from_counts,
    thread_count,
)
from .stp import run_probe
from .tasks import al_dataset, generate_al_dataset
from .training import fit

SCHEMA_VERSION = 1
OUT_ENV = "SPIKEPROBE_OUT"
EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def default_out(command: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "runs")) / command


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunWriter:
    """Single owner of an output directory; tracks every artifact written."""

    def __init__(self, out: Path):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def _track(self, rel: str):
        if rel not in self.files:
            self.files.append(rel)

    def json(self, rel: str, doc: dict):
        doc = {"schema_version": SCHEMA_VERSION, **doc}
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")
        self._track(rel)

    def text(self, rel: str, text: str):
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")
        self._track(rel)

    def array(self, rel: str, arr: np.ndarray):
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        np.save(p, np.ascontiguousarray(arr), allow_pickle=False)
        self._track(rel)

    def existing(self, rel: str):
        self._track(rel)

    def inventory(self) -> dict[str, str]:
        return {rel: sha256_file(self.out / rel) for rel in sorted(self.files)}


def manifest(cfg: ExperimentConfig, command: str, files: dict[str, str], args: dict) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "deterministic": cfg.train.deterministic,
        "version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "threads": thread_count(),
        "args": args,
        "files": files,
    }


# -- commands -------------------------------------------------------------------------------


def cmd_gen(cfg: ExperimentConfig, w: RunWriter):
    metas = generate_al_dataset(cfg.task, w.out / "data")
    for split in metas:
        for name in ("meta.json", "data.f32", "labels.u32"):
            w.existing(f"data/{split}/{name}")
    w.json("gen.json", {"splits": {k: asdict(v) for k, v in metas.items()}})


def _curves_csv(report) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["epoch", "train_loss", "train_acc", "test_loss", "test_acc"])
    for i, e in enumerate(report.epochs):
        out.writerow([e, repr(report.train_loss[i]), repr(report.train_acc[i]),
                      repr(report.test_loss[i]) if report.test_loss else "",
                      repr(report.test_acc[i]) if report.test_acc else ""])
    return buf.getvalue()


def cmd_train(cfg: ExperimentConfig, w: RunWriter):
    train, test = al_dataset(cfg.task, "train"), al_dataset(cfg.task, "test")
    params, report = fit(cfg.net, train, cfg.train, test=test)
    for key, arr in params.items():
        w.array(f"weights/{key}.npy", arr)
    w.json("train_report.json", {"report": report.to_dict(timing=False)})
    w.text("curves.csv", _curves_csv(report))
    w.json("timing.json", {"steps_per_second": report.steps_per_second,
                           "wall_seconds": report.wall_seconds, "threads": thread_count()})


def cmd_probe(cfg: ExperimentConfig, w: RunWriter):
    train, test = al_dataset(cfg.task, "train"), al_dataset(cfg.task, "test")
    report = run_probe(cfg.probe_config(), train, test)
    w.json("probe_report.json", {"report": report.to_dict()})
    w.text("probe.csv", report.to_csv())
    if report.partial:
        raise RuntimeError(f"probe arms failed: {sorted(report.failures)}")


def cmd_energy(cfg: ExperimentConfig, w: RunWriter):
    eff = cfg.efficiency
    q = eff.query()
    if eff.acs is not None:
        res = EnergyResult("counts", eff.acs, eff.macs,
                           energy_from_counts(eff.acs, eff.macs, q.constants), eff.T)
    else:
        res = energy_formula(q)
    w.json("energy.json", {"result": res.to_dict(),
                           "constants": {"e_ac_pj": eff.e_ac, "e_mac_pj": eff.e_mac}})


def cmd_bench(cfg: ExperimentConfig, w: RunWriter):
    eff = cfg.efficiency
    rows = bench_training(cfg.net, cfg.train, eff.lengths, batch_size=eff.bench_batch,
                          warmup=eff.warmup, repeats=eff.repeats, epoch_samples=eff.epoch_samples,
                          seed=cfg.seed)
    w.json("bench.json", {"rows": [asdict(r) for r in rows], "threads": thread_count()})
    w.text("bench.csv", bench_csv(rows))


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "probe": cmd_probe, "energy": cmd_energy,
            "bench": cmd_bench}


# -- entry point --------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spikeprobe", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="TOML config file or a previous manifest.json")
        s.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key, e.g. train.lr=1e-3")
        s.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
        s.add_argument("--seed", type=int)
        s.add_argument("--preset", choices=("paper", "desk"))
        s.add_argument("--deterministic", action="store_true")
        s.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
    return p


def _thread_limit(n):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = None
    try:
        cfg = parse_config(args.config, args.overrides, seed=args.seed, preset=args.preset)
        if args.deterministic:
            cfg = replace(cfg, train=replace(cfg.train, deterministic=True))
        out = Path(args.out or cfg.out or default_out(args.command))
    except ConfigError as exc:
        out = Path(args.out or default_out(args.command))
        _write_error(out, args.command, exc, "config")
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    w = RunWriter(out)
    try:
        with _thread_limit(args.threads):
            COMMANDS[args.command](cfg, w)
        files = w.inventory()
        missing = [f for f in files if not (w.out / f).is_file()]
        if missing:
            raise RuntimeError(f"artifacts missing after write: {missing}")
        (w.out / "manifest.json").write_text(
            json.dumps(manifest(cfg, args.command, files, {"threads": args.threads}),
                       indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except Exception as exc:  # noqa: BLE001 - serialized for the caller
        _write_error(out, args.command, exc, "runtime")
        print(f"{args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    print(str(w.out))
    return EXIT_OK


def _write_error(out: Path, command: str, exc: BaseException, stage: str):
    out.mkdir(parents=True, exist_ok=True)
    doc = {"schema_version": SCHEMA_VERSION, "command": command, "stage": stage,
           "error_type": type(exc).__name__, "message": str(exc),
           "traceback": traceback.format_exception(type(exc), exc, exc.__traceback__)}
    (out / "error.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":  # pragma: no cover
    main()
