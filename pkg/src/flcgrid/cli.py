"""Command-line entry point: ``flcgrid {simulate,gen-data,train,evaluate,info}``.

All outputs go under ``<out>/<command>/``; ``<out>`` defaults to the config's
``output.dir``.  Nothing written depends on wall-clock time, so reruns of the
same config produce byte-identical files.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, System, build_system, load_config, schema
from .control import ControlAssignment, Mode, TimeFeature, assign_controllers
from .dynamics import simulate
from .errors import ConfigError, FlcGridError
from .experiments import (
    StabilityCriterion,
    energy_metrics,
    generate_dataset,
    penetration_sweep,
    stability_time,
    write_rows,
)
from .federated import FederatedConfig, run_federated_training
from .kan import ChebyKanModel, Dataset, flop_breakdown, flop_count, load_checkpoint, param_count, save_checkpoint

logger = logging.getLogger("flcgrid")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SHARD_HEADER = ["omega", "delta_err", "t_feature", "pa"]
HEALTH_FRACTION = 0.8


def _dump_json(path: Path, doc):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _out_dir(args, cfg: RunConfig, command: str) -> Path:
    path = Path(args.out if args.out is not None else cfg.output.dir) / command
    path.mkdir(parents=True, exist_ok=True)
    return path


def _fault(system: System, name):
    if name is None:
        return None
    if name not in system.faults:
        raise ConfigError(f"fault {name!r} is not defined (have: {', '.join(system.faults) or 'none'})")
    return system.faults[name]


def _checkpoint_path(args, cfg: RunConfig, base: Path | None = None):
    if getattr(args, "checkpoint", None):
        return Path(args.checkpoint)
    if cfg.control.checkpoint:
        return Path(cfg.control.checkpoint)
    return base


def _load_model(path: Path) -> ChebyKanModel:
    if path is None or not path.exists():
        raise ConfigError(f"checkpoint {str(path)!r} not found")
    try:
        model, _ = load_checkpoint(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad checkpoint {path}: {exc}") from None
    return model


def _horizon(cfg: RunConfig) -> float:
    return cfg.training.t_max


def _common_meta(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.hash(), "version": __version__, "dt": cfg.simulation.dt}


# -- commands ----------------------------------------------------------------

def cmd_simulate(args, cfg: RunConfig) -> int:
    system = build_system(cfg)
    scenario = _fault(system, args.fault)
    ctl = cfg.control
    mode = Mode.parse(ctl.mode)
    model = None
    if mode in (Mode.DPFL, Mode.FLC):
        assignment = assign_controllers(system.n, mode, ctl.level)
        if mode is Mode.FLC:
            model = _load_model(_checkpoint_path(args, cfg))
    else:
        assignment = ControlAssignment.uniform(system.n, mode)
    sim = cfg.simulation
    traj = simulate(
        system.network, system.params, scenario, assignment, model, sim.dt, sim.t_max,
        time_feature=TimeFeature(scenario.t_fault if scenario else 0.0, _horizon(cfg)),
        saturation=ctl.saturation, switchover_time=ctl.switchover_time,
    )
    out = _out_dir(args, cfg, "simulate") / (scenario.id if scenario else "none")
    out.mkdir(parents=True, exist_ok=True)
    traj.write_csv(out / "trajectory.csv")

    criterion = StabilityCriterion(cfg.evaluation.epsilon)
    generators = []
    for i in range(system.n):
        st = stability_time(traj, i, criterion)
        energy = energy_metrics(traj, [i], cfg.output.base_power_kw)
        generators.append({
            "generator": i + 1, "mode": assignment.modes[i].value, "stab_time_s": st.seconds,
            "unstable": st.unstable, "p_inj": energy.p_inj, "p_stor": energy.p_stor,
        })
    summary = {
        **_common_meta(cfg),
        "fault": scenario.id if scenario else None,
        "mode": mode.value,
        "level_pct": ctl.level if mode in (Mode.DPFL, Mode.FLC) else None,
        "t_max": sim.t_max,
        "epsilon": criterion.epsilon,
        "energy_unit": "kW*s",
        "generators": generators,
        "any_unstable": any(g["unstable"] for g in generators),
    }
    _dump_json(out / "summary.json", summary)
    for g in generators:
        flag = "UNSTABLE" if g["unstable"] else "stable"
        print(f"G{g['generator']} {g['mode']:<4} stab_time={g['stab_time_s']:.3f}s {flag}")
    print(f"wrote {out}")
    return EXIT_OK


def _write_shard(path: Path, shard: Dataset):
    block = np.column_stack([shard.inputs, shard.targets.reshape(len(shard), -1)])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SHARD_HEADER)
        for row in block.tolist():
            writer.writerow([repr(v) for v in row])


def _read_shard(path: Path) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != SHARD_HEADER:
        raise ConfigError(f"{path} is not a shard file")
    body = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(SHARD_HEADER))
    return Dataset(body[:, :3], body[:, 3])


def _training_fault(args, cfg: RunConfig, system: System):
    name = args.fault or cfg.training.fault
    if name is None:
        raise ConfigError("no training fault: set training.fault or pass --fault")
    return _fault(system, name)


def cmd_gen_data(args, cfg: RunConfig) -> int:
    system = build_system(cfg)
    scenario = _training_fault(args, cfg, system)
    tr = cfg.training
    shards = generate_dataset(system.network, system.params, scenario, cfg.simulation.dt, tr.t_max,
                              horizon=_horizon(cfg))
    out = _out_dir(args, cfg, "data") / scenario.id
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, shard in enumerate(shards):
        path = out / f"shard_{i + 1}.csv"
        _write_shard(path, shard)
        files.append({"client": i, "generator": i + 1, "file": path.name, "samples": len(shard),
                      "sha256": _sha256(path)})
    _dump_json(out / "manifest.json", {
        **_common_meta(cfg), "fault": scenario.id, "t_max": tr.t_max, "horizon": _horizon(cfg),
        "columns": SHARD_HEADER, "shards": files,
    })
    print(f"wrote {len(files)} shards of {files[0]['samples']} samples to {out}")
    return EXIT_OK


def _load_shards(data_dir: Path) -> list:
    manifest = data_dir / "manifest.json"
    if not manifest.exists():
        raise ConfigError(f"no manifest.json in {data_dir}")
    doc = json.loads(manifest.read_text())
    shards = []
    for entry in doc["shards"]:
        shard = _read_shard(data_dir / entry["file"])
        if len(shard) != entry["samples"]:
            raise ConfigError(f"{entry['file']}: {len(shard)} rows, manifest says {entry['samples']}")
        shards.append(shard)
    return shards


def split_probe(shards, stride: int):
    """Hold out every ``stride``-th sample of each shard; returns ``(train_shards, probe)``."""
    train, held = [], []
    for s in shards:
        mask = np.arange(len(s)) % stride == 0
        held.append(s.subset(np.flatnonzero(mask)))
        train.append(s.subset(np.flatnonzero(~mask)))
    return train, Dataset.concat(held)


def cmd_train(args, cfg: RunConfig) -> int:
    tr = cfg.training
    seed = tr.master_seed if args.seed is None else args.seed
    system = build_system(cfg)
    if args.data:
        shards = _load_shards(Path(args.data))
        source = str(args.data)
    else:
        scenario = _training_fault(args, cfg, system)
        shards = generate_dataset(system.network, system.params, scenario, cfg.simulation.dt, tr.t_max,
                                  horizon=_horizon(cfg))
        source = f"generated:{scenario.id}"
    if len(shards) != system.n:
        raise ConfigError(f"{len(shards)} shards for {system.n} generators")
    train_shards, probe = split_probe(shards, tr.probe_stride)
    fed = FederatedConfig(
        dims=list(tr.dims), degree=tr.degree, rounds=tr.rounds, lr=tr.lr, batch_size=tr.batch_size,
        local_epochs=tr.local_epochs, optimizer=tr.optimizer, master_seed=seed, transport=tr.transport,
        jobs=args.jobs,
    )
    out = _out_dir(args, cfg, "train")
    rounds_dir = out / "rounds"
    rounds_dir.mkdir(exist_ok=True)
    meta = {**_common_meta(cfg), "master_seed": seed, "data": source, "horizon": _horizon(cfg)}

    def on_round(report, model):
        extra = {"seed": seed, "round": report.round, "final_loss": report.probe_loss}
        save_checkpoint(rounds_dir / f"round_{report.round:03d}.json", model, {**meta, **extra})
        print(f"round {report.round:3d} probe_loss {report.probe_loss:.6g}")

    model, reports = run_federated_training(fed, train_shards, probe, on_round=on_round)
    save_checkpoint(out / "checkpoint_final.json", model,
                    {**meta, "seed": seed, "rounds": tr.rounds, "final_loss": reports[-1].probe_loss})
    with open(out / "rounds.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["round", "probe_loss_before", "probe_loss", "mean_client_loss"]
                        + [f"client_{i + 1}_loss" for i in range(len(shards))])
        for r in reports:
            writer.writerow([r.round, repr(r.probe_loss_before), repr(r.probe_loss),
                             repr(float(np.mean(r.client_losses)))] + [repr(v) for v in r.client_losses])
    improving = sum(r.probe_loss <= r.probe_loss_before for r in reports)
    if improving < HEALTH_FRACTION * len(reports):
        logger.warning("probe loss fell in only %d of %d rounds", improving, len(reports))
    print(f"probe loss {reports[0].probe_loss_before:.6g} -> {reports[-1].probe_loss:.6g}; wrote {out}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    system = build_system(cfg)
    ev = cfg.evaluation
    names = [args.fault] if args.fault else ev.faults
    if not names:
        raise ConfigError("no evaluation faults: set evaluation.faults or pass --fault")
    faults = [_fault(system, n) for n in names]
    base = Path(args.out if args.out is not None else cfg.output.dir)
    model, ckpt = None, None
    if "FLC" in ev.modes:
        ckpt = _checkpoint_path(args, cfg, base / "train" / "checkpoint_final.json")
        model = _load_model(ckpt)
    t_max = ev.t_max if ev.t_max is not None else cfg.simulation.t_max
    rows, cpfl_rows = penetration_sweep(
        system.network, system.params, faults, ev.modes, ev.levels, model, cfg.simulation.dt, t_max,
        StabilityCriterion(ev.epsilon), cfg.output.base_power_kw, _horizon(cfg), args.jobs,
        cfg.control.switchover_time, cfg.control.saturation,
    )
    out = _out_dir(args, cfg, "evaluate")
    write_rows(out / "results.csv", rows)
    write_rows(out / "cpfl_groups.csv", cpfl_rows)
    _dump_json(out / "metadata.json", {
        **_common_meta(cfg), "t_max": t_max, "epsilon": ev.epsilon, "faults": names, "modes": list(ev.modes),
        "levels": list(ev.levels), "base_power_kw": cfg.output.base_power_kw, "energy_unit": "kW*s",
        "stability_cap_s": {f.id: t_max - f.t_fault for f in faults},
        "checkpoint_sha256": _sha256(ckpt) if ckpt is not None else None,
        "master_seed": cfg.training.master_seed if args.seed is None else args.seed,
    })
    errors = [r for r in rows if r.error]
    for r in rows:
        print(",".join(r.as_csv()))
    if errors:
        logger.warning("%d cells failed; see the unstable=error rows", len(errors))
    return EXIT_OK


def cmd_info(args, cfg: RunConfig | None) -> int:
    dims = list(cfg.training.dims) if cfg else [3, 32, 1]
    degree = cfg.training.degree if cfg else 5
    model = ChebyKanModel.zeros(dims, degree)
    doc = {"dims": dims, "degree": degree, "param_count": param_count(model),
           "flop_count": flop_count(model), "flop_breakdown": flop_breakdown(model)}
    print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "info": cmd_info,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flcgrid", description=__doc__.splitlines()[0])
    parser.add_argument("--print-schema", action="store_true", help="print the config JSON schema and exit")
    parser.add_argument("--version", action="version", version=f"flcgrid {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "info",
                       help="config file (TOML or JSON) or a bundled name: desk3, ieee39")
        p.add_argument("--fault", help="fault id from the config")
        p.add_argument("--out", help="run directory (default: output.dir)")
        p.add_argument("--seed", type=int, help="override training.master_seed")
        p.add_argument("--jobs", type=int, default=1, help="max concurrent clients or sweep cells")
        p.add_argument("--print-schema", action="store_true", help=argparse.SUPPRESS)
        if name in ("simulate", "evaluate"):
            p.add_argument("--checkpoint", help="FLC checkpoint (default: control.checkpoint or <out>/train)")
        if name == "train":
            p.add_argument("--data", help="shard directory written by gen-data (default: generate in memory)")
    return parser


def _fail(code: int, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.print_schema:
        print(json.dumps(schema(), indent=2, sort_keys=True))
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg = load_config(args.config) if args.config else None
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (FlcGridError, ValueError, OSError) as exc:
        return _fail(EXIT_RUNTIME, exc)


if __name__ == "__main__":
    sys.exit(main())
