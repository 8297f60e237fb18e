"""Single entry point: synth, prepare, cooc, train, eval, gradplot, ablate.

Every command takes a JSON config (unknown keys are rejected), an output
directory, and optional --seed / --lead overrides, and writes one
run_manifest.json next to its outputs. Config problems exit 2; runtime
failures exit 1 with a structured error record on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import labels as labels_mod
from .loss import LcrConfig, SCHEMES, co_gradient_probe, gradient_curve_csv
from .model import ModelConfig
from .preprocess import SAMPLE_PERIOD_S
from .shards import load_shards, prepare_shards
from .synthgen import SynthConfig, generate_cohort, read_cohort, write_cohort
from .trainer import TrainConfig, ablate, evaluate_checkpoint, split_patients, train

_SCHEMAS = {
    "synth": {"n_cases", "seed", "event_rates", "missing_rates", "horizon_minutes",
              "duration_range_s", "hold_range_s", "pair_correlation", "allow_rate_override"},
    "prepare": {"cohort_dir", "lead_minutes", "stride_s", "event_window_steps",
                "split", "seed"},
    "cooc": {"shards_dir", "split"},
    "train": {"shards_dir", "model", "train", "lcr"},
    "eval": {"checkpoint", "shards_dir", "split", "threshold"},
    "gradplot": {"z_min", "z_max", "n_points", "f", "lam", "co_offdiag", "render"},
    "ablate": {"shards_dir", "axis", "values", "model", "train", "lcr"},
}


class ConfigError(ValueError):
    pass


def _check_keys(config: dict, allowed: set, context: str) -> None:
    unknown = set(config) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {context}: {sorted(unknown)}")


def _dataclass_from(config: dict, cls, context: str):
    allowed = {f.name for f in dataclass_fields(cls)}
    _check_keys(config, allowed, context)
    config = dict(config)
    for key in ("split", "betas", "duration_range_s", "hold_range_s"):
        if key in config and isinstance(config[key], list):
            config[key] = tuple(config[key])
    try:
        return cls(**config)
    except ValueError as exc:
        raise ConfigError(f"invalid {context}: {exc}") from exc


def _write_manifest(command: str, config: dict, out_dir: Path, seed, inputs: dict,
                    outputs: list) -> None:
    config_hash = hashlib.sha256(
        json.dumps(config, sort_keys=True, default=str).encode()
    ).hexdigest()
    stable = {"command": command, "config_hash": config_hash,
              "inputs": inputs, "outputs": sorted(outputs)}
    manifest = dict(stable)
    manifest["manifest_hash"] = hashlib.sha256(
        json.dumps(stable, sort_keys=True).encode()
    ).hexdigest()
    manifest["seed"] = seed
    manifest["versions"] = {"muae": __version__, "numpy": np.__version__,
                            "torch": torch.__version__}
    manifest["created_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def cmd_synth(config: dict, out_dir: Path) -> list:
    synth_cfg = _dataclass_from(config, SynthConfig, "synth config")
    cases = generate_cohort(synth_cfg)
    write_cohort(cases, out_dir)
    return [f"{c.case_id}.csv" for c in cases] + ["cohort.json"]


def cmd_prepare(config: dict, out_dir: Path) -> list:
    _check_keys(config, _SCHEMAS["prepare"], "prepare config")
    cohort_dir = Path(config["cohort_dir"])
    lead_minutes = int(config.get("lead_minutes", 5))
    stride_s = float(config.get("stride_s", SAMPLE_PERIOD_S))
    event_window_steps = int(config.get("event_window_steps", 30))
    split = tuple(config.get("split", (0.70, 0.10, 0.20)))
    seed = int(config.get("seed", 0))

    cases = read_cohort(cohort_dir)
    split_cfg = TrainConfig(seed=seed, split=split, lead_minutes=lead_minutes)
    train_cases, val_cases, test_cases = split_patients(cases, split_cfg)
    from .schema import lead_steps as to_steps

    stride_steps = stride_s / SAMPLE_PERIOD_S
    if stride_steps != int(stride_steps) or stride_steps < 1:
        raise ConfigError("stride_s must be a positive multiple of 2")
    prepare_shards(
        {"train": train_cases, "val": val_cases, "test": test_cases},
        out_dir,
        lead_steps=to_steps(lead_minutes),
        stride_steps=int(stride_steps),
        event_window_steps=event_window_steps,
    )
    return ["train.muae", "val.muae", "test.muae", "index.json"]


def cmd_cooc(config: dict, out_dir: Path) -> list:
    _check_keys(config, _SCHEMAS["cooc"], "cooc config")
    bundle = load_shards(Path(config["shards_dir"]))
    split = config.get("split", "train")
    co = labels_mod.co_occurrence(bundle.splits[split].y)
    (out_dir / "co_matrix.json").write_text(co.to_json() + "\n")
    return ["co_matrix.json"]


def _train_configs(config: dict):
    _check_keys(config, _SCHEMAS["train"], "train config")
    model_cfg = _dataclass_from(config.get("model", {}), ModelConfig, "model config")
    train_cfg = _dataclass_from(config.get("train", {}), TrainConfig, "train config")
    lcr_cfg = _dataclass_from(config.get("lcr", {}), LcrConfig, "lcr config")
    return model_cfg, train_cfg, lcr_cfg


def cmd_train(config: dict, out_dir: Path) -> list:
    model_cfg, train_cfg, lcr_cfg = _train_configs(config)
    bundle = load_shards(Path(config["shards_dir"]))
    record = train(model_cfg, train_cfg, lcr_cfg, bundle, out_dir)
    (out_dir / "run_record.json").write_text(record.to_json() + "\n")
    return ["run_record.json", "checkpoint.bin"]


def cmd_eval(config: dict, out_dir: Path) -> list:
    _check_keys(config, _SCHEMAS["eval"], "eval config")
    bundle = load_shards(Path(config["shards_dir"]))
    split = config.get("split", "test")
    report = evaluate_checkpoint(Path(config["checkpoint"]), bundle.splits[split],
                                 threshold=float(config.get("threshold", 0.5)))
    (out_dir / "eval_report.json").write_text(report.to_json() + "\n")
    return ["eval_report.json"]


def cmd_gradplot(config: dict, out_dir: Path) -> list:
    _check_keys(config, _SCHEMAS["gradplot"], "gradplot config")
    z = np.linspace(float(config.get("z_min", -10.0)), float(config.get("z_max", 10.0)),
                    int(config.get("n_points", 401)))
    f = float(config.get("f", 0.005))
    lam = float(config.get("lam", 0.02))
    co_offdiag = float(config.get("co_offdiag", 0.5))
    outputs = []
    curves = {}
    for kind in ("bce", "focal", "asl"):
        for target in (0, 1):
            name = f"grad_{kind}_target{target}.csv"
            (out_dir / name).write_text(gradient_curve_csv(kind, target, z))
            curves[(kind, target)] = name
            outputs.append(name)
    for scheme in SCHEMES[1:]:
        for target in (0, 1):
            name = f"grad_lcr_{scheme}_target{target}.csv"
            (out_dir / name).write_text(
                gradient_curve_csv("lcr", target, z, scheme=scheme, f=f))
            curves[(f"lcr_{scheme}", target)] = name
            outputs.append(name)
    probe = co_gradient_probe(z, lam=lam, co_offdiag=co_offdiag)
    lines = ["z,grad"] + [f"{float(a)!r},{float(b)!r}" for a, b in zip(z, probe)]
    (out_dir / "grad_co_probe.csv").write_text("\n".join(lines) + "\n")
    outputs.append("grad_co_probe.csv")

    if config.get("render", True):
        try:
            import matplotlib

            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            return outputs
        for target in (0, 1):
            fig, ax = plt.subplots(figsize=(7, 4.5))
            for (label, tgt), name in curves.items():
                if tgt != target:
                    continue
                table = np.genfromtxt(out_dir / name, delimiter=",", skip_header=1)
                ax.plot(table[:, 0], table[:, 1], label=label)
            ax.set_xlabel("logit")
            ax.set_ylabel("dL/dz")
            ax.set_title(f"loss gradients, target={target}")
            ax.legend(fontsize=7)
            fig.tight_layout()
            fig.savefig(out_dir / f"gradients_target{target}.png", dpi=120)
            plt.close(fig)
            outputs.append(f"gradients_target{target}.png")
    return outputs


def cmd_ablate(config: dict, out_dir: Path) -> list:
    _check_keys(config, _SCHEMAS["ablate"], "ablate config")
    model_cfg, train_cfg, lcr_cfg = _train_configs(
        {k: config.get(k, {}) for k in ("shards_dir", "model", "train", "lcr")}
    )
    bundle = load_shards(Path(config["shards_dir"]))
    ablate(config["axis"], config["values"], model_cfg, train_cfg, lcr_cfg, bundle, out_dir)
    return ["ablation.csv", "ablation.json"]


_COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "cooc": cmd_cooc,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradplot": cmd_gradplot,
    "ablate": cmd_ablate,
}


def _apply_overrides(command: str, config: dict, seed, lead) -> dict:
    config = dict(config)
    if seed is not None:
        if command == "synth":
            config["seed"] = seed
        elif command in ("prepare",):
            config["seed"] = seed
        elif command in ("train", "ablate"):
            config.setdefault("train", {})
            config["train"] = dict(config["train"], seed=seed)
    if lead is not None:
        if command == "synth":
            config["horizon_minutes"] = lead
        elif command == "prepare":
            config["lead_minutes"] = lead
        elif command in ("train", "ablate"):
            config.setdefault("train", {})
            config["train"] = dict(config["train"], lead_minutes=lead)
    return config


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="muae", description=__doc__)
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="path to the command's JSON config")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--lead", type=int, choices=(5, 10, 15), default=None,
                        help="override the lead time in minutes")
    args = parser.parse_args(argv)

    threads = os.environ.get("MUAE_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))

    try:
        config = json.loads(Path(args.config).read_text())
        if not isinstance(config, dict):
            raise ConfigError("config must be a JSON object")
        _check_keys(config, _SCHEMAS[args.command], f"{args.command} config")
        config = _apply_overrides(args.command, config, args.seed, args.lead)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        outputs = _COMMANDS[args.command](config, out_dir)
        _write_manifest(args.command, config, out_dir, args.seed, {"config": str(args.config)},
                        outputs)
        return 0
    except (ConfigError, ValueError, TypeError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": "config", "command": args.command, "detail": str(exc)}),
              file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - structured runtime error record
        print(json.dumps({"error": "runtime", "command": args.command,
                          "type": type(exc).__name__, "detail": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
