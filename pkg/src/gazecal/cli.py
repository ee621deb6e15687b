"""Command-line surface for the gaze pipeline.

Subcommands: ``prepare`` (resample a store to 3000 per person and write
partitions), ``synth`` (generate a synthetic store), ``train`` /
``eval`` (single model, checkpoint in, metrics out), ``study`` (full
paired calibration study), ``report`` (re-render or audit a study
manifest).

Exit codes: 0 success, 1 usage error, 2 I/O or validation error,
3 numerical failure (training divergence, degenerate geometry).

Seeds resolve as: command-line flag, then config file (for training),
then the ``GAZECAL_SEED`` environment variable, then 0.  Config files
are flat ``key=value`` lines (``#`` comments allowed); command-line
flags override file values.  Every artifact-producing run also writes a
small JSON run manifest describing inputs, seeds, and outputs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, calibration, dataset, geometry, net, train
from .errors import (
    DegenerateGeometryError,
    FormatError,
    GazecalError,
    TrainingDivergedError,
    ValidationError,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; the contract wants 1
    def error(self, message):
        raise _UsageError(message)


# ---------------------------------------------------------------------------
# Config plumbing

_TRAIN_FIELD_TYPES = {
    "epochs": int,
    "steps_per_epoch": int,
    "learning_rate": float,
    "optimizer": str,
    "momentum": float,
    "beta1": float,
    "beta2": float,
    "adam_epsilon": float,
    "seed": int,
    "bn_momentum": float,
    "loss_reduction": str,
    "precision": str,
}
assert set(_TRAIN_FIELD_TYPES) == {f.name for f in dataclasses.fields(train.TrainConfig)}


def load_config_file(path) -> dict:
    """Parse a flat key=value config file into raw string values."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
        values[key.strip()] = value.strip()
    return values


def _env_seed() -> int | None:
    raw = os.environ.get("GAZECAL_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"GAZECAL_SEED must be an integer, got {raw!r}")


def _resolve_seed(flag_value: int | None) -> int:
    if flag_value is not None:
        return flag_value
    env = _env_seed()
    return 0 if env is None else env


def build_train_config(file_values: dict, overrides: dict) -> train.TrainConfig:
    """Merge config file values with command-line overrides."""
    kwargs = {}
    for key, raw in file_values.items():
        if key not in _TRAIN_FIELD_TYPES:
            raise ValidationError(f"unknown training config key {key!r}")
        caster = _TRAIN_FIELD_TYPES[key]
        try:
            kwargs[key] = caster(raw)
        except ValueError:
            raise ValidationError(
                f"config key {key!r} needs a {caster.__name__}, got {raw!r}"
            )
    for key, value in overrides.items():
        if value is not None:
            kwargs[key] = value
    if "seed" not in kwargs:
        env = _env_seed()
        if env is not None:
            kwargs["seed"] = env
    return train.TrainConfig(**kwargs)


def _parse_stage_channels(raw: str) -> tuple:
    try:
        parts = tuple(int(p) for p in raw.split(","))
    except ValueError:
        raise ValidationError(f"--stage-channels needs integers, got {raw!r}")
    return parts


def build_net_config(args) -> net.NetworkConfig:
    kwargs = {}
    if args.stem_channels is not None:
        kwargs["stem_channels"] = args.stem_channels
    if args.stage_channels is not None:
        kwargs["stage_channels"] = _parse_stage_channels(args.stage_channels)
    if args.fc_width is not None:
        kwargs["fc_width"] = args.fc_width
    return net.NetworkConfig(**kwargs)


def _write_json(path, payload: dict) -> None:
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(payload, indent=1, sort_keys=True))
    os.replace(tmp, path)


def write_run_manifest(path, command: str, config: dict, seeds: dict, artifacts: dict,
                       dataset_hash: str | None = None) -> None:
    """One JSON record per run: enough to reproduce and locate outputs."""
    _write_json(
        path,
        {
            "command": command,
            "version": __version__,
            "config": config,
            "seeds": seeds,
            "dataset_fingerprint": dataset_hash,
            "artifacts": {name: str(p) for name, p in artifacts.items()},
            "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        },
    )


def _load_store(path) -> list:
    persons = dataset.load_dataset(path)
    if not persons:
        raise ValidationError(f"no person stores found in {path}")
    return persons


def _all_samples(persons) -> list:
    return [s for p in persons for s in p.samples]


# ---------------------------------------------------------------------------
# Commands


def cmd_prepare(args) -> int:
    seed = _resolve_seed(args.seed)
    persons = _load_store(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prepared_all = []
    artifacts = {}
    for person in persons:
        pid = person.person_id
        prepared = dataset.prepare_person(person, seed=dataset.person_seed(seed, pid, "prepare"))
        parts = dataset.partition_person(
            prepared, seed=dataset.person_seed(seed, pid, "partition")
        )
        prepared_all.append(prepared)
        dataset.save_partitions(out, parts, seed=seed)
        artifacts[f"store:{pid}"] = out / f"{pid}.gzd"
        artifacts[f"partitions:{pid}"] = out / f"{pid}.partitions.json"
    dataset.save_dataset(out, prepared_all)
    if args.dump_normalized:
        preview = out / "preview"
        preview.mkdir(exist_ok=True)
        for person in prepared_all:
            for i, sample in enumerate(person.samples[: args.dump_normalized]):
                name = f"{person.person_id}_{i:03d}_{sample.eye_side}.pgm"
                geometry.write_pgm(preview / name, sample.eye_image)
        artifacts["preview"] = preview
    write_run_manifest(
        out / "prepare.run.json",
        "prepare",
        {"data": str(args.data), "out": str(out), "dump_normalized": args.dump_normalized},
        {"master": seed},
        artifacts,
        dataset_hash=dataset.dataset_fingerprint(prepared_all),
    )
    print(f"prepared {len(prepared_all)} persons -> {out}")
    return 0


def cmd_synth(args) -> int:
    if args.persons < 1:
        raise ValidationError("--persons must be at least 1")
    if args.samples < 1:
        raise ValidationError("--samples must be at least 1")
    if args.bias_scale < 0 or args.noise < 0:
        raise ValidationError("--bias-scale and --noise must be non-negative")
    seed = _resolve_seed(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    persons = []
    generator_record = {}
    for i in range(args.persons):
        pid = f"p{i:02d}"
        bias_rng = np.random.default_rng(dataset.person_seed(seed, pid, "bias"))
        bias = bias_rng.uniform(-args.bias_scale, args.bias_scale, 2)
        spec = dataset.SyntheticPersonSpec(
            person_id=pid,
            bias=(float(bias[0]), float(bias[1])),
            noise_sigma=args.noise,
            sample_count=args.samples,
        )
        sample_seed = dataset.person_seed(seed, pid, "synth")
        persons.append(dataset.generate_synthetic_person(spec, seed=sample_seed))
        generator_record[pid] = {
            "bias": [float(bias[0]), float(bias[1])],
            "noise_sigma": args.noise,
            "sample_count": args.samples,
            "sample_seed": sample_seed,
        }
    dataset.save_dataset(out, persons)
    write_run_manifest(
        out / "synth.run.json",
        "synth",
        {
            "persons": args.persons,
            "bias_scale": args.bias_scale,
            "noise": args.noise,
            "samples": args.samples,
            "out": str(out),
            "generator": generator_record,
        },
        {"master": seed},
        {f"store:{p.person_id}": out / f"{p.person_id}.gzd" for p in persons},
        dataset_hash=dataset.dataset_fingerprint(persons),
    )
    print(f"wrote {len(persons)} synthetic persons -> {out}")
    return 0


def _train_overrides(args) -> dict:
    return {
        "epochs": args.epochs,
        "steps_per_epoch": args.steps_per_epoch,
        "learning_rate": args.learning_rate,
        "optimizer": args.optimizer,
        "seed": args.seed,
        "bn_momentum": args.bn_momentum,
        "loss_reduction": args.loss_reduction,
        "precision": args.precision,
    }


def cmd_train(args) -> int:
    persons = _load_store(args.data)
    samples = _all_samples(persons)
    file_values = load_config_file(args.config) if args.config else {}
    config = build_train_config(file_values, _train_overrides(args))
    net_config = build_net_config(args)
    params = net.init_network(net_config, args.init_seed)
    val_samples = None
    if args.val_data:
        val_samples = _all_samples(_load_store(args.val_data))
    trained, record = train.train(params, samples, config, val_data=val_samples)
    checkpoint = Path(args.checkpoint)
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    net.save_checkpoint(checkpoint, trained)
    history = Path(args.history) if args.history else checkpoint.with_suffix(".history.csv")
    train.export_history(record, history)
    write_run_manifest(
        checkpoint.with_suffix(".run.json"),
        "train",
        {
            "data": str(args.data),
            "val_data": str(args.val_data) if args.val_data else None,
            "config_file": str(args.config) if args.config else None,
            "train_config": dataclasses.asdict(config),
            "net_config": dataclasses.asdict(net_config),
        },
        {"train": config.seed, "init": args.init_seed},
        {"checkpoint": checkpoint, "history": history},
        dataset_hash=dataset.dataset_fingerprint(persons),
    )
    final_val = f" val_error={record.val_errors[-1]!r}" if record.val_errors else ""
    print(f"trained {config.epochs} epochs: final loss={record.losses[-1]!r}{final_val}")
    print(f"checkpoint -> {checkpoint}")
    return 0


def cmd_eval(args) -> int:
    params = net.load_checkpoint(args.checkpoint)
    persons = _load_store(args.data)
    result = train.evaluate(params, _all_samples(persons))
    report_path = Path(args.report) if args.report else Path(args.checkpoint).with_suffix(".eval.json")
    _write_json(
        report_path,
        {
            "command": "eval",
            "version": __version__,
            "checkpoint": str(args.checkpoint),
            "data": str(args.data),
            "dataset_fingerprint": dataset.dataset_fingerprint(persons),
            "mean_error": result.mean_error,
            "std_error": result.std_error,
            "count": len(result),
            "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        },
    )
    print(f"mean_error={result.mean_error!r} std_error={result.std_error!r} count={len(result)}")
    return 0


_MODE_ALIASES = {
    "retrain": "retrain_with_calibration",
    "retrain_with_calibration": "retrain_with_calibration",
    "finetune": "finetune",
}


def _write_csv(path, header: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _write_study_tables(out: Path, report: calibration.StudyReport) -> dict:
    aggregate = out / "aggregate.csv"
    _write_csv(
        aggregate,
        ["person", "completed", "mean_with", "std_with", "mean_without", "std_without",
         "best_partition", "improvement_pct"],
        [
            [s.person_id, s.completed, repr(s.mean_with), repr(s.std_with),
             repr(s.mean_without), repr(s.std_without), s.best_partition,
             repr(s.improvement_pct)]
            for s in report.summaries
        ],
    )
    detail = out / "detail.csv"
    rows = [
        [r.target_person, r.partition_index, "done", repr(r.error_with.mean),
         repr(r.error_with.std), repr(r.error_without.mean), repr(r.error_without.std),
         r.test_size, r.train_size_with, r.train_size_without, r.init_seed, ""]
        for r in report.results
    ] + [
        [f.person_id, f.partition_index, "failed", "", "", "", "", "", "", "", "", f.message]
        for f in report.failures
    ]
    _write_csv(
        detail,
        ["person", "partition", "status", "mean_with", "std_with", "mean_without",
         "std_without", "test_size", "train_size_with", "train_size_without",
         "init_seed", "note"],
        rows,
    )
    plot = out / "plot.csv"
    _write_csv(
        plot,
        ["person", "mean_without", "std_without", "mean_with", "std_with"],
        [
            [s.person_id, repr(s.mean_without), repr(s.std_without),
             repr(s.mean_with), repr(s.std_with)]
            for s in report.summaries
        ],
    )
    return {"aggregate": aggregate, "detail": detail, "plot": plot}


def cmd_study(args) -> int:
    seed = _resolve_seed(args.seed)
    persons = _load_store(args.data)
    file_values = load_config_file(args.config) if args.config else {}
    config = build_train_config(file_values, _train_overrides(args))
    net_config = build_net_config(args)
    mode = _MODE_ALIASES.get(args.mode)
    if mode is None:
        raise ValidationError(f"--mode must be one of {sorted(_MODE_ALIASES)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "study.json"
    if manifest_path.exists() and not args.resume:
        raise ValidationError(
            f"{manifest_path} already exists; pass --resume to continue it"
        )
    report = calibration.run_full_study(
        persons,
        seed,
        config,
        calibration_mode=mode,
        calib_weight=args.calib_weight,
        finetune_epochs=args.finetune_epochs,
        share_baseline=args.share_baseline,
        net_config=net_config,
        manifest_path=manifest_path,
        jobs=args.jobs,
    )
    tables = _write_study_tables(out, report)
    write_run_manifest(
        out / "study.run.json",
        "study",
        {
            "data": str(args.data),
            "config_file": str(args.config) if args.config else None,
            "train_config": dataclasses.asdict(config),
            "net_config": dataclasses.asdict(net_config),
            "calibration_mode": mode,
            "calib_weight": args.calib_weight,
            "finetune_epochs": args.finetune_epochs,
            "share_baseline": args.share_baseline,
            "jobs": args.jobs,
        },
        {"master": seed},
        {"study_manifest": manifest_path, **tables},
        dataset_hash=dataset.dataset_fingerprint(persons),
    )
    for s in report.summaries:
        print(
            f"{s.person_id}: without={s.mean_without:.4f} with={s.mean_with:.4f} "
            f"improvement={s.improvement_pct:.1f}% best_partition={s.best_partition} "
            f"({s.completed}/{dataset.PARTITION_COUNT})"
        )
    if report.failures:
        print(f"{len(report.failures)} experiment(s) failed and were excluded", file=sys.stderr)
    issues = calibration.audit_study(calibration.load_study_manifest(manifest_path))
    if issues:
        for issue in issues:
            print(f"audit: {issue}", file=sys.stderr)
        return 2
    print(f"audit clean; tables -> {out}")
    return 0


def cmd_report(args) -> int:
    manifest = calibration.load_study_manifest(args.study)
    issues = []
    if args.audit:
        issues = calibration.audit_study(manifest)
        for issue in issues:
            print(f"audit: {issue}", file=sys.stderr)
        if not issues:
            print("audit clean", file=sys.stderr)
    report = calibration.report_from_manifest(manifest)
    text = calibration.render_report(report, args.format)
    if args.out:
        Path(args.out).write_text(text)
        print(f"report -> {args.out}")
    else:
        sys.stdout.write(text)
    return 2 if issues else 0


# ---------------------------------------------------------------------------
# Parser


def _add_net_flags(parser) -> None:
    parser.add_argument("--stem-channels", type=int, default=None,
                        help="channels in the stem convolution")
    parser.add_argument("--stage-channels", default=None, metavar="A,B,C",
                        help="channels of the three residual stages")
    parser.add_argument("--fc-width", type=int, default=None,
                        help="width of the fully connected layer")


def _add_train_flags(parser) -> None:
    parser.add_argument("--config", default=None, help="key=value training config file")
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--steps-per-epoch", type=int, default=None)
    parser.add_argument("--learning-rate", "--lr", type=float, default=None, dest="learning_rate")
    parser.add_argument("--optimizer", choices=("adam", "sgd"), default=None)
    parser.add_argument("--bn-momentum", type=float, default=None)
    parser.add_argument("--loss-reduction", choices=("sum", "mean"), default=None)
    parser.add_argument("--precision", choices=("float64", "float32"), default=None)
    parser.add_argument("--seed", type=int, default=None,
                        help="training shuffle seed (default: GAZECAL_SEED or 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gazecal", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"gazecal {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="resample a store to 3000 per person + partitions")
    p.add_argument("--data", required=True, help="input store directory")
    p.add_argument("--out", required=True, help="output store directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dump-normalized", type=int, default=0, metavar="N",
                   help="also write the first N eye images per person as PGM")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate a synthetic person store")
    p.add_argument("--persons", type=int, required=True)
    p.add_argument("--bias-scale", type=float, default=0.0,
                   help="per-person gaze bias drawn uniform in [-scale, scale]^2")
    p.add_argument("--noise", type=float, default=0.0, help="gaze noise sigma")
    p.add_argument("--samples", type=int, default=dataset.PREPARED_SIZE)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model on a whole store")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data", default=None, help="optional store evaluated every epoch")
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--history", default=None, help="history CSV (default: beside checkpoint)")
    p.add_argument("--init-seed", type=int, default=0, help="network initialization seed")
    _add_train_flags(p)
    _add_net_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a store")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", default=None, help="metrics JSON (default: beside checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("study", help="run the full paired calibration study")
    p.add_argument("--data", required=True, help="prepared store directory")
    p.add_argument("--out", required=True, help="output directory for manifest and tables")
    p.add_argument("--resume", action="store_true", help="continue an interrupted study")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--mode", default="retrain", help="retrain (default) or finetune")
    p.add_argument("--calib-weight", type=int, default=1,
                   help="replication factor for calibration samples")
    p.add_argument("--finetune-epochs", type=int, default=None,
                   help="epochs for the finetune stage (default: config epochs)")
    p.add_argument("--share-baseline", action="store_true",
                   help="train the uncalibrated arm once per person, not per partition")
    _add_train_flags(p)
    _add_net_flags(p)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("report", help="render or audit an existing study manifest")
    p.add_argument("--study", required=True, help="study.json produced by the study command")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", default=None, help="output file (default: stdout)")
    p.add_argument("--audit", action="store_true", help="also audit pairing/leakage")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDivergedError, DegenerateGeometryError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (GazecalError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
