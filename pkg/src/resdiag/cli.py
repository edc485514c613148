"""Command-line front end.

Subcommands: ``train``, ``evaluate``, ``diagnose``, ``sweep``, ``cat``,
``synth``.  Every command reads an optional JSON config file
(``--config``) whose keys mirror the command's flags; flags override
file values, unknown keys are rejected.  The effective configuration is
embedded in every output file (a ``# config:`` comment line in CSVs, a
``config`` field in JSON) so results stay traceable to their settings.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import functools
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .cat import RandomStrategy, restrict_to_students, run_cat, split_students
from .checkpoint import load_trained, save_trained
from .data import (
    Dataset,
    SyntheticSpec,
    generate_synthetic,
    inject_noise,
    load_dataset,
    save_dataset,
    split_dataset,
)
from .errors import ConfigError, DataError, LatentMasteryError, NumericsError
from .training import TrainConfig, TrainedModel, train

STRATEGIES = {"random": RandomStrategy}

_TRAIN_CONFIG_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))


# ---------------------------------------------------------------------------
# small shared helpers


def _write_text_atomic(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _config_comment(effective: dict) -> str:
    return "# config: " + json.dumps(effective, sort_keys=True)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        payload = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return payload


def _effective_config(args: argparse.Namespace, allowed: dict, defaults: dict) -> dict:
    """defaults <- config file <- explicit flags, with unknown keys rejected."""
    effective = dict(defaults)
    from_file = _load_config_file(args.config)
    unknown = set(from_file) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    effective.update(from_file)
    for key in allowed:
        value = getattr(args, key, None)
        if value is not None:
            effective[key] = value
    return effective


def _require(effective: dict, *keys: str) -> None:
    missing = [k for k in keys if effective.get(k) is None]
    if missing:
        raise ConfigError(f"missing required settings: {missing}")


def _out_dir(effective: dict) -> Path:
    out = Path(effective["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_dataset(effective: dict) -> Dataset:
    _require(effective, "logs", "q")
    try:
        return load_dataset(effective["logs"], effective["q"])
    except OSError as exc:
        raise DataError(f"cannot read dataset: {exc}") from exc


def _train_config(effective: dict) -> TrainConfig:
    payload = {k: effective[k] for k in _TRAIN_CONFIG_KEYS if k in effective}
    return TrainConfig.from_dict(payload)


def _make_split(dataset: Dataset, effective: dict):
    split = split_dataset(dataset, tuple(effective["split_ratios"]), seed=effective["seed"])
    if effective["noise_ratio"] > 0:
        split = inject_noise(split, float(effective["noise_ratio"]), effective["seed"])
    return split


def _provenance(effective: dict, config: TrainConfig | None = None) -> dict:
    merged = dict(effective)
    if config is not None:
        merged.update(config.to_dict())
    return merged


def _write_metrics(path: Path, effective: dict, block: str, report) -> None:
    payload = {"config": effective, "block": block, "metrics": report.to_dict()}
    _write_text_atomic(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _fmt(value) -> str:
    # str(float) is the shortest representation that round-trips exactly
    return "" if value is None else str(float(value))


# ---------------------------------------------------------------------------
# train / evaluate / diagnose


def cmd_train(args: argparse.Namespace) -> None:
    effective = _effective_config(args, _TRAIN_ALLOWED, _TRAIN_DEFAULTS)
    dataset = _read_dataset(effective)
    config = _train_config(effective)
    split = _make_split(dataset, effective)
    model = train(dataset, split, config)

    provenance = _provenance(effective, config)
    out = _out_dir(effective)
    save_trained(model, out / "model.ckpt")

    lines = [_config_comment(provenance), "epoch,loss,valid_auc,valid_accuracy"]
    for row in model.epoch_rows:
        lines.append(
            f"{row.epoch},{_fmt(row.loss)},{_fmt(row.valid_auc)},{_fmt(row.valid_accuracy)}"
        )
    _write_text_atomic(out / "epochs.csv", "\n".join(lines) + "\n")

    block = "test" if split.test.size else "train"
    report = model.evaluate(getattr(split, block))
    _write_metrics(out / "metrics.json", provenance, block, report)
    print(
        f"trained {config.ablation}/{config.cdm} for {len(model.epoch_rows)} epochs; "
        f"{block} auc {report.auc:.4f}, wrote {out / 'model.ckpt'}"
    )


def cmd_evaluate(args: argparse.Namespace) -> None:
    effective = _effective_config(args, _EVALUATE_ALLOWED, _EVALUATE_DEFAULTS)
    _require(effective, "checkpoint")
    dataset = _read_dataset(effective)
    model = _load_checkpoint(effective["checkpoint"], dataset)

    block = effective["block"]
    if block not in ("train", "valid", "test"):
        raise ConfigError(f"block must be train, valid or test, got {block!r}")
    triplets = getattr(model.split, block)
    if not triplets.size:
        raise DataError(f"the {block} block of the recorded split is empty")
    report = model.evaluate(triplets)

    out = _out_dir(effective)
    _write_metrics(out / "metrics.json", _provenance(effective, model.config), block, report)
    print(f"{block} auc {report.auc:.4f} accuracy {report.accuracy:.4f}")


def _load_checkpoint(path: str, dataset: Dataset) -> TrainedModel:
    try:
        return load_trained(path, dataset)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


def cmd_diagnose(args: argparse.Namespace) -> None:
    effective = _effective_config(args, _DIAGNOSE_ALLOWED, _DIAGNOSE_DEFAULTS)
    _require(effective, "checkpoint")
    dataset = _read_dataset(effective)
    model = _load_checkpoint(effective["checkpoint"], dataset)

    names = dataset.student_ids or tuple(str(i) for i in range(dataset.n_students))
    requested = effective["students"]
    if requested is None:
        requested = list(names)
    requested = [str(s) for s in requested]
    index = {name: i for i, name in enumerate(names)}
    unknown = [s for s in requested if s not in index]
    if unknown:
        raise DataError(f"unknown student ids: {unknown[:5]}")

    try:
        mastery = model.mastery()
    except LatentMasteryError as exc:
        raise ConfigError(f"this checkpoint cannot produce concept mastery: {exc}") from exc

    rows = [_config_comment(_provenance(effective, model.config))]
    rows.append("# students: " + ",".join(requested))
    for student in requested:
        rows.append(",".join(_fmt(v) for v in mastery[index[student]]))
    out = _out_dir(effective)
    _write_text_atomic(out / "mastery.csv", "\n".join(rows) + "\n")
    print(f"wrote mastery rows for {len(requested)} students to {out / 'mastery.csv'}")


# ---------------------------------------------------------------------------
# sweep


@functools.lru_cache(maxsize=4)
def _cached_dataset(logs: str, q: str) -> Dataset:
    return load_dataset(logs, q)


def _sweep_cell(payload: dict) -> dict:
    """Train and evaluate one (ablation, p_t, p_n, seed) grid cell."""
    dataset = _cached_dataset(payload["logs"], payload["q"])
    ratios = (1.0 - payload["p_t"], 0.0, payload["p_t"])
    split = split_dataset(dataset, ratios, seed=payload["seed"])
    if payload["p_n"] > 0:
        split = inject_noise(split, payload["p_n"], payload["seed"])
    config = TrainConfig.from_dict(payload["train_config"])
    model = train(dataset, split, config)
    report = model.evaluate(split.test)
    return {
        "ablation": payload["train_config"]["ablation"],
        "p_t": payload["p_t"],
        "p_n": payload["p_n"],
        "seed": payload["seed"],
        "auc": report.auc,
        "accuracy": report.accuracy,
        "doa": report.doa,
        "mnd": report.mnd,
    }


def cmd_sweep(args: argparse.Namespace) -> None:
    effective = _effective_config(args, _SWEEP_ALLOWED, _SWEEP_DEFAULTS)
    dataset_paths = (effective.get("logs"), effective.get("q"))
    _require(effective, "logs", "q")
    _read_dataset(effective)  # fail early on bad files

    for name, low, high in (("p_t", 0.0, 1.0), ("p_n", 0.0, 1.0)):
        for value in effective[name]:
            if not low < value < high and not (name == "p_n" and value == 0.0):
                raise ConfigError(f"{name} values must lie in ({low}, {high}), got {value}")

    threads = int(effective["threads"])
    if threads < 1:
        raise ConfigError(f"threads must be at least 1, got {threads}")

    payloads = []
    for ablation in effective["ablations"]:
        base = {
            k: effective[k]
            for k in _TRAIN_CONFIG_KEYS
            if k in effective and k not in ("ablation", "seed")
        }
        for p_t in effective["p_t"]:
            for p_n in effective["p_n"]:
                for seed in effective["seeds"]:
                    payloads.append(
                        {
                            "logs": dataset_paths[0],
                            "q": dataset_paths[1],
                            "p_t": float(p_t),
                            "p_n": float(p_n),
                            "seed": int(seed),
                            "train_config": {**base, "ablation": ablation, "seed": int(seed)},
                        }
                    )
    for payload in payloads:  # validate configs before spawning workers
        TrainConfig.from_dict(payload["train_config"])

    if threads == 1:
        rows = [_sweep_cell(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_sweep_cell, payloads))

    lines = [_config_comment(effective), "ablation,p_t,p_n,seed,auc,accuracy,doa,mnd"]
    for row in rows:
        lines.append(
            f"{row['ablation']},{_fmt(row['p_t'])},{_fmt(row['p_n'])},{row['seed']},"
            f"{_fmt(row['auc'])},{_fmt(row['accuracy'])},{_fmt(row['doa'])},{_fmt(row['mnd'])}"
        )
    out = _out_dir(effective)
    _write_text_atomic(out / "sweep.csv", "\n".join(lines) + "\n")
    print(f"swept {len(rows)} cells, wrote {out / 'sweep.csv'}")


# ---------------------------------------------------------------------------
# cat / synth


def cmd_cat(args: argparse.Namespace) -> None:
    effective = _effective_config(args, _CAT_ALLOWED, _CAT_DEFAULTS)
    dataset = _read_dataset(effective)
    if effective["strategy"] not in STRATEGIES:
        raise ConfigError(
            f"strategy must be one of {sorted(STRATEGIES)}, got {effective['strategy']!r}"
        )

    cohorts = split_students(dataset, tuple(effective["cohort_ratios"]), seed=effective["seed"])
    base_dataset = restrict_to_students(dataset, cohorts.train)
    out = _out_dir(effective)

    if effective.get("checkpoint"):
        model = _load_checkpoint(effective["checkpoint"], base_dataset)
        config = model.config
    else:
        config = _train_config(effective)
        split = _make_split(base_dataset, effective)
        model = train(base_dataset, split, config)
        save_trained(model, out / "base.ckpt")

    reports = run_cat(
        model,
        dataset,
        cohorts.testees,
        steps=tuple(effective["steps"]),
        seed=effective["seed"],
        strategy=STRATEGIES[effective["strategy"]](),
        candidate_fraction=float(effective["candidate_fraction"]),
        fit_steps=int(effective["fit_steps"]),
        fit_lr=float(effective["fit_lr"]),
    )

    lines = [_config_comment(_provenance(effective, config))]
    lines.append("step,auc,accuracy,n_testees,n_predictions")
    for report in reports:
        lines.append(
            f"{report.step},{_fmt(report.auc)},{_fmt(report.accuracy)},"
            f"{report.n_testees},{report.n_predictions}"
        )
    _write_text_atomic(out / "cat_steps.csv", "\n".join(lines) + "\n")
    print(f"ran {reports[-1].n_testees} testees, wrote {out / 'cat_steps.csv'}")


def _matrix_csv(effective: dict, matrix: np.ndarray) -> str:
    lines = [_config_comment(effective)]
    if matrix.ndim == 1:
        matrix = matrix[:, None]
    for row in matrix:
        lines.append(",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def cmd_synth(args: argparse.Namespace) -> None:
    effective = _effective_config(args, _SYNTH_ALLOWED, _SYNTH_DEFAULTS)
    _require(effective, "n_students", "n_exercises", "n_concepts")
    spec = SyntheticSpec.random(
        int(effective["n_students"]),
        int(effective["n_exercises"]),
        int(effective["n_concepts"]),
        concepts_per_exercise=float(effective["concepts_per_exercise"]),
        logs_per_student=int(effective["logs_per_student"]),
        slope=float(effective["slope"]),
        seed=effective["seed"],
        ability_weight=float(effective["ability_weight"]),
    )
    dataset = generate_synthetic(spec)

    out = _out_dir(effective)
    with tempfile.TemporaryDirectory(dir=out) as tmp:
        tmp_logs, tmp_q = Path(tmp) / "logs.csv", Path(tmp) / "q.csv"
        save_dataset(dataset, tmp_logs, tmp_q)
        os.replace(tmp_logs, out / "logs.csv")
        os.replace(tmp_q, out / "q.csv")

    _write_text_atomic(out / "mastery_truth.csv", _matrix_csv(effective, spec.mastery))
    _write_text_atomic(out / "difficulty_truth.csv", _matrix_csv(effective, spec.difficulty))
    _write_text_atomic(
        out / "discrimination_truth.csv", _matrix_csv(effective, spec.discrimination)
    )
    print(
        f"wrote {dataset.n_logs} logs for {dataset.n_students} students "
        f"({dataset.n_exercises} exercises, {dataset.n_concepts} concepts) to {out}"
    )


# ---------------------------------------------------------------------------
# argument wiring


def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip() != ""]


def _float_list(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part.strip() != ""]


def _str_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip() != ""]


_COMMON_ALLOWED = {"seed": int, "out": str, "threads": int}
_COMMON_DEFAULTS = {"seed": 0, "out": "out", "threads": 1}

_KNOB_TYPES = {
    "cdm": str,
    "ablation": str,
    "dim": int,
    "n_layers": int,
    "activation": str,
    "flip_ratio": float,
    "lambda_reg": float,
    "tau": float,
    "consistency": str,
    "learning_rate": float,
    "batch_size": int,
    "max_epochs": int,
    "patience": int,
    "mlp_hidden": _int_list,
}

_TRAIN_ALLOWED = {
    **_COMMON_ALLOWED,
    **_KNOB_TYPES,
    "logs": str,
    "q": str,
    "split_ratios": _float_list,
    "noise_ratio": float,
}
_TRAIN_DEFAULTS = {**_COMMON_DEFAULTS, "split_ratios": [0.7, 0.1, 0.2], "noise_ratio": 0.0}

_EVALUATE_ALLOWED = {**_COMMON_ALLOWED, "checkpoint": str, "logs": str, "q": str, "block": str}
_EVALUATE_DEFAULTS = {**_COMMON_DEFAULTS, "block": "test"}

_DIAGNOSE_ALLOWED = {
    **_COMMON_ALLOWED,
    "checkpoint": str,
    "logs": str,
    "q": str,
    "students": _str_list,
}
_DIAGNOSE_DEFAULTS = {**_COMMON_DEFAULTS, "students": None}

_SWEEP_ALLOWED = {
    **_COMMON_ALLOWED,
    **{k: v for k, v in _KNOB_TYPES.items() if k != "ablation"},
    "logs": str,
    "q": str,
    "ablations": _str_list,
    "p_t": _float_list,
    "p_n": _float_list,
    "seeds": _int_list,
}
_SWEEP_DEFAULTS = {
    **_COMMON_DEFAULTS,
    "ablations": ["or"],
    "p_t": [0.2],
    "p_n": [0.0],
    "seeds": [0],
}

_CAT_ALLOWED = {
    **_COMMON_ALLOWED,
    **_KNOB_TYPES,
    "logs": str,
    "q": str,
    "checkpoint": str,
    "split_ratios": _float_list,
    "noise_ratio": float,
    "cohort_ratios": _float_list,
    "steps": _int_list,
    "strategy": str,
    "candidate_fraction": float,
    "fit_steps": int,
    "fit_lr": float,
}
_CAT_DEFAULTS = {
    **_TRAIN_DEFAULTS,
    "cohort_ratios": [0.7, 0.2, 0.1],
    "steps": [5, 10, 15],
    "strategy": "random",
    "candidate_fraction": 0.6,
    "fit_steps": 25,
    "fit_lr": 1e-2,
}

_SYNTH_ALLOWED = {
    **_COMMON_ALLOWED,
    "n_students": int,
    "n_exercises": int,
    "n_concepts": int,
    "concepts_per_exercise": float,
    "logs_per_student": int,
    "slope": float,
    "ability_weight": float,
}
_SYNTH_DEFAULTS = {
    **_COMMON_DEFAULTS,
    "concepts_per_exercise": 1.2,
    "logs_per_student": 40,
    "slope": 4.0,
    "ability_weight": 0.0,
}

_COMMANDS = {
    "train": (cmd_train, _TRAIN_ALLOWED, "train a model, write checkpoint and epoch log"),
    "evaluate": (cmd_evaluate, _EVALUATE_ALLOWED, "evaluate a checkpoint on a split block"),
    "diagnose": (cmd_diagnose, _DIAGNOSE_ALLOWED, "export per-student concept mastery rows"),
    "sweep": (cmd_sweep, _SWEEP_ALLOWED, "grid of runs over ablations, test and noise ratios"),
    "cat": (cmd_cat, _CAT_ALLOWED, "adaptive-testing simulation on held-out students"),
    "synth": (cmd_synth, _SYNTH_ALLOWED, "generate a synthetic dataset with ground truth"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resdiag", description="response-graph cognitive diagnosis toolkit"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, (_, allowed, help_text) in _COMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", help="JSON config file; flags override its values")
        for key, parse in allowed.items():
            sub.add_argument(f"--{key.replace('_', '-')}", dest=key, type=parse, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler = _COMMANDS[args.command][0]
    try:
        handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
