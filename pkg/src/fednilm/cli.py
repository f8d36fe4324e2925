"""Experiment runner: synth, preprocess, train, serve/join, evaluate.

Every command is driven by an INI config (see `runconfig.SCHEMA`) plus
`--set section.key=value` overrides, and is reproducible byte for byte from
(inputs, config, seeds); wall-clock numbers go to separate time logs.  The
FEDNILM_LOG environment variable selects log verbosity only.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import pipeline
from .federation import FederationError, run_centralized, run_federated
from .metrics import aggregate_experiment, write_score_report
from .model import NilmModel, load_checkpoint, save_checkpoint
from .runconfig import ConfigError, RunConfig
from .wire import ProtocolError, join, serve

log = logging.getLogger("fednilm")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_PROTOCOL = 4
EXIT_NUMERIC = 5


def cmd_synth(cfg: RunConfig) -> int:
    """Write a deterministic synthetic raw dataset plus its manifest."""
    s = cfg["synth"]
    raw_dir = Path(cfg["data"]["raw_dir"])
    households = D.synth_households(
        seed=s["seed"],
        n_households=s["households"],
        days=s["days"],
        noise_sigma_w=s["noise_sigma"],
    )
    raw_dir.mkdir(parents=True, exist_ok=True)
    D.write_manifest(raw_dir / "manifest.ini")
    for house, channels in households.items():
        house_dir = raw_dir / house
        house_dir.mkdir(exist_ok=True)
        for channel, series in channels.items():
            D.write_series(house_dir / f"{channel}.dat", series)
    log.info("wrote %d synthetic households under %s", len(households), raw_dir)
    return EXIT_OK


def _split_plan(cfg: RunConfig, households: list[str]) -> D.SplitPlan:
    mode = cfg["split"]["mode"]
    case = cfg["split"]["case"] if mode == "unseen" else None
    return D.plan_split(households, mode, case)


def cmd_preprocess(cfg: RunConfig) -> int:
    raw_dir = cfg["data"]["raw_dir"]
    plan = _split_plan(cfg, pipeline.discover_households(raw_dir))
    provenance = pipeline.preprocess_dataset(
        raw_dir,
        cfg["data"]["dataset_dir"],
        plan,
        window_len=cfg["model"]["window_len"],
        train_stride=cfg["data"]["train_stride"],
        eval_stride=cfg["data"]["eval_stride"],
    )
    for house, record in provenance["households"].items():
        log.info("%s: windows %s, mean %.1f W", house, record["window_counts"], record["mean_w"])
    return EXIT_OK


def _write_rounds(out_dir: Path, reports, client_names: list[str], appliances: list[str]) -> None:
    """Round log (deterministic) and wall-time log (separate file)."""
    has_metrics = any(r.metrics for r in reports)
    with open(out_dir / "rounds.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        header = ["round"]
        header += [f"loss_{name}" for name in client_names]
        header += [f"bytes_up_{name}" for name in client_names]
        header += [f"bytes_down_{name}" for name in client_names]
        if has_metrics:
            header += [f"val_f1_{a}" for a in appliances]
        writer.writerow(header)
        for r in reports:
            row = [r.round_index]
            row += [f"{r.client_losses.get(i, float('nan')):.9g}" for i in range(len(client_names))]
            row += [r.bytes_up.get(i, 0) for i in range(len(client_names))]
            row += [r.bytes_down.get(i, 0) for i in range(len(client_names))]
            if has_metrics:
                row += [
                    f"{r.metrics[a]:.6f}" if r.metrics else "" for a in appliances
                ]
            writer.writerow(row)
    with open(out_dir / "times.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "wall_time_s"])
        for r in reports:
            writer.writerow([r.round_index, f"{r.wall_time_s:.6f}"])


def _make_eval_fn(cfg: RunConfig, appliances: list[str]):
    """Per-round validation metrics over pooled val windows, if any exist."""
    val = pipeline.load_role_arrays(cfg["data"]["dataset_dir"], "val")
    if not val:
        return None
    x = np.concatenate([v[0] for v in val.values()])
    y = np.concatenate([v[1] for v in val.values()])

    def eval_fn(model: NilmModel) -> dict[str, float]:
        results = pipeline.evaluate_model(model, x, y, appliances)
        return {name: results[name][0].f1 for name in appliances}

    return eval_fn


def cmd_train_federated(cfg: RunConfig) -> int:
    dataset_dir = cfg["data"]["dataset_dir"]
    per_house = pipeline.load_role_arrays(dataset_dir, "train")
    if not per_house:
        raise D.DataError(f"{dataset_dir}: no training window files")
    appliances = pipeline.dataset_appliances(dataset_dir)
    houses = sorted(per_house)
    datasets = [per_house[h] for h in houses]
    fed = cfg.federation_config(n_clients=len(houses))
    model_cfg = cfg.model_config()
    out_dir = Path(cfg["run"]["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    params, reports = run_federated(
        fed, model_cfg, datasets, eval_fn=_make_eval_fn(cfg, appliances)
    )
    final = NilmModel(cfg.model_config(init_seed=fed.global_seed))
    final.load_params(params)
    save_checkpoint(final, out_dir / "checkpoint.fnlm")
    _write_rounds(out_dir, reports, houses, appliances)
    log.info("federated run: %d clients, %d rounds -> %s", len(houses), fed.global_rounds, out_dir)
    return EXIT_OK


def cmd_train_central(cfg: RunConfig) -> int:
    dataset_dir = cfg["data"]["dataset_dir"]
    per_house = pipeline.load_role_arrays(dataset_dir, "train")
    if not per_house:
        raise D.DataError(f"{dataset_dir}: no training window files")
    appliances = pipeline.dataset_appliances(dataset_dir)
    houses = sorted(per_house)
    x = np.concatenate([per_house[h][0] for h in houses])
    y = np.concatenate([per_house[h][1] for h in houses])
    fed = cfg.federation_config(n_clients=1)
    out_dir = Path(cfg["run"]["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    params, reports = run_centralized(
        fed, cfg.model_config(), (x, y), eval_fn=_make_eval_fn(cfg, appliances)
    )
    final = NilmModel(cfg.model_config(init_seed=fed.global_seed))
    final.load_params(params)
    save_checkpoint(final, out_dir / "checkpoint.fnlm")
    _write_rounds(out_dir, reports, ["pooled"], appliances)
    log.info(
        "centralized run: %d epochs -> %s", fed.global_rounds * fed.local_epochs, out_dir
    )
    return EXIT_OK


def cmd_serve(cfg: RunConfig) -> int:
    w = cfg["wire"]
    fed = cfg.federation_config(n_clients=w["n_clients"])
    out_dir = Path(cfg["run"]["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    params, reports = serve(
        fed, cfg.model_config(), (w["host"], w["port"]), timeout_s=w["timeout_s"]
    )
    final = NilmModel(cfg.model_config(init_seed=fed.global_seed))
    final.load_params(params)
    save_checkpoint(final, out_dir / "checkpoint.fnlm")
    names = [f"client_{i}" for i in range(fed.n_clients)]
    _write_rounds(out_dir, reports, names, [])
    return EXIT_OK


def cmd_join(cfg: RunConfig) -> int:
    w = cfg["wire"]
    client_id = w["client_id"]
    per_house = pipeline.load_role_arrays(cfg["data"]["dataset_dir"], "train")
    houses = sorted(per_house)
    if client_id >= len(houses):
        raise ConfigError(f"wire.client_id {client_id} but only {len(houses)} households")
    fed = cfg.federation_config(n_clients=w["n_clients"])
    losses = join(
        (w["host"], w["port"]),
        fed,
        cfg.model_config(),
        per_house[houses[client_id]],
        client_id,
        timeout_s=w["timeout_s"],
    )
    log.info("client %d finished %d rounds", client_id, len(losses))
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    checkpoint = cfg["run"]["checkpoint"]
    if not checkpoint:
        raise ConfigError("evaluate needs run.checkpoint")
    dataset_dir = cfg["data"]["dataset_dir"]
    model = load_checkpoint(checkpoint)
    appliances = pipeline.dataset_appliances(dataset_dir)
    per_house = pipeline.load_role_arrays(dataset_dir, "test")
    if not per_house:
        raise D.DataError(f"{dataset_dir}: no test windows to evaluate")
    out_dir = Path(cfg["run"]["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    summary = {}
    if cfg["split"]["mode"] == "seen":
        # concatenated evaluation windows across households
        x = np.concatenate([per_house[h][0] for h in sorted(per_house)])
        y = np.concatenate([per_house[h][1] for h in sorted(per_house)])
        results = pipeline.evaluate_model(model, x, y, appliances)
        for name in appliances:
            s, c = results[name]
            rows.append((name, "seen", "", s, c))
            summary[name] = s
    else:
        per_case: dict[str, list] = {name: [] for name in appliances}
        for case_idx, house in enumerate(sorted(per_house), start=1):
            x, y = per_house[house]
            results = pipeline.evaluate_model(model, x, y, appliances)
            for name in appliances:
                s, c = results[name]
                rows.append((name, house, str(case_idx), s, c))
                per_case[name].append(s)
        for name in appliances:
            summary[name] = aggregate_experiment(per_case[name])
    write_score_report(out_dir / "scores.csv", rows, summary)
    for name, s in summary.items():
        log.info(
            "%s: accuracy %.3f precision %.3f recall %.3f f1 %.3f",
            name, s.accuracy, s.precision, s.recall, s.f1,
        )
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train-federated": cmd_train_federated,
    "train-central": cmd_train_central,
    "serve": cmd_serve,
    "join": cmd_join,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fednilm",
        description="Federated appliance-state disaggregation experiments",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="INI run configuration")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )
    return parser


def main(argv=None) -> int:
    level = os.environ.get("FEDNILM_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, args.set)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (D.DataError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (ProtocolError, FederationError, ConnectionError, OSError) as exc:
        log.error("protocol error: %s", exc)
        return EXIT_PROTOCOL
    except FloatingPointError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
