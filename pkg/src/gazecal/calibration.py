"""Paired leave-one-person-out calibration experiments.

For a target person, one partition of their prepared samples (300 of
3000) plays the role of calibration data.  Arm A ("with") gets to use
it for training; arm B ("without") does not.  Both arms start from the
same initialization seed, share one training config, and are evaluated
on the identical remaining 2700 samples, so the only difference between
the two error numbers is the calibration data itself.  Repeating this
over all 10 partitions and all persons yields the full study.

A study writes a JSON manifest recording every seed, config, partition,
and per-experiment outcome.  The manifest makes an interrupted study
resumable and is the input to ``audit_study``, which re-checks pairing
and leakage properties from the recorded metadata alone.
"""

from __future__ import annotations

import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import train as _train
from .dataset import (
    PARTITION_COUNT,
    PARTITION_SIZE,
    PREPARED_SIZE,
    PartitionSet,
    PersonDataset,
    dataset_fingerprint,
    partition_person,
    person_seed,
)
from .errors import FormatError, TrainingDivergedError, ValidationError
from .net import NetworkConfig, NetworkParams, init_network
from .train import TrainConfig

MANIFEST_FORMAT = "gazecal-study/1"
CALIBRATION_MODES = ("retrain_with_calibration", "finetune")


@dataclass(frozen=True)
class ExperimentSpec:
    """One paired experiment: a target person and one partition choice.

    ``calibration_mode`` selects how arm A uses the calibration data:
    ``retrain_with_calibration`` trains from scratch on everyone else's
    data plus the calibration partition; ``finetune`` continues training
    arm B's parameters on the calibration partition alone (for
    ``finetune_epochs`` epochs, defaulting to the config's epochs).
    ``calib_weight`` replicates the calibration samples, giving them
    more influence than their 300-versus-many headcount would.
    """

    target_person: str
    partition_index: int
    train_config: TrainConfig
    calibration_mode: str = "retrain_with_calibration"
    calib_weight: int = 1
    finetune_epochs: int | None = None
    init_seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.partition_index < PARTITION_COUNT:
            raise ValidationError(
                f"partition_index must be in [0, {PARTITION_COUNT})"
            )
        if self.calibration_mode not in CALIBRATION_MODES:
            raise ValidationError(
                f"calibration_mode must be one of {CALIBRATION_MODES}"
            )
        if self.calib_weight < 1:
            raise ValidationError("calib_weight must be at least 1")
        if self.finetune_epochs is not None and self.finetune_epochs < 1:
            raise ValidationError("finetune_epochs must be at least 1")


@dataclass(frozen=True)
class ArmError:
    mean: float
    std: float


@dataclass(frozen=True)
class PairedResult:
    """Outcome of one paired experiment, both arms on the same test set."""

    target_person: str
    partition_index: int
    error_with: ArmError
    error_without: ArmError
    test_size: int
    train_size_with: int
    train_size_without: int
    init_seed: int

    @property
    def improvement(self) -> float:
        """Relative error reduction from calibration; 0 when undefined."""
        if self.error_without.mean == 0.0:
            return 0.0
        return (self.error_without.mean - self.error_with.mean) / self.error_without.mean


@dataclass(frozen=True)
class FailedExperiment:
    person_id: str
    partition_index: int
    message: str
    epoch: int | None = None
    step: int | None = None


@dataclass(frozen=True)
class PersonSummary:
    """Across-partition aggregate for one person.

    Means and stds are taken over the per-partition mean errors of the
    completed experiments; ``improvement_pct`` compares the aggregate
    means; ``best_partition`` minimizes the calibrated error (ties go to
    the lowest index).
    """

    person_id: str
    mean_with: float
    std_with: float
    mean_without: float
    std_without: float
    best_partition: int
    improvement_pct: float
    completed: int


@dataclass
class StudyReport:
    results: list[PairedResult] = field(default_factory=list)
    failures: list[FailedExperiment] = field(default_factory=list)
    summaries: list[PersonSummary] = field(default_factory=list)


def _find_person(all_persons: Sequence[PersonDataset], person_id: str) -> PersonDataset:
    ids = [p.person_id for p in all_persons]
    if len(set(ids)) != len(ids):
        raise ValidationError("person ids are not unique")
    if person_id not in ids:
        raise ValidationError(f"target person {person_id!r} not in dataset")
    return all_persons[ids.index(person_id)]


def _other_samples(all_persons: Sequence[PersonDataset], target: str) -> list:
    others = [s for p in all_persons if p.person_id != target for s in p.samples]
    if not others:
        raise ValidationError("paired experiment needs at least one other person")
    return others


def train_baseline(
    all_persons: Sequence[PersonDataset],
    target_person: str,
    train_config: TrainConfig,
    init_seed: int,
    net_config: NetworkConfig | None = None,
) -> NetworkParams:
    """Train the uncalibrated arm: everyone's data except the target's.

    This arm does not depend on the partition choice, so its parameters
    may be reused across a person's partitions (see ``share_baseline``).
    """
    if net_config is None:
        net_config = NetworkConfig()
    _find_person(all_persons, target_person)
    others = _other_samples(all_persons, target_person)
    params, _ = _train.train(init_network(net_config, init_seed), others, train_config)
    return params


def run_paired_experiment(
    all_persons: Sequence[PersonDataset],
    partitions: PartitionSet,
    spec: ExperimentSpec,
    *,
    net_config: NetworkConfig | None = None,
    baseline: NetworkParams | None = None,
) -> PairedResult:
    """Train both arms and evaluate them on the held-out 2700 samples.

    ``baseline``, when given, is used as the already-trained uncalibrated
    arm; it must come from ``train_baseline`` with this spec's init seed
    and config, which the caller is responsible for (the study runner
    guarantees it when sharing baselines).
    """
    if net_config is None:
        net_config = NetworkConfig()
    target = _find_person(all_persons, spec.target_person)
    if partitions.person_id != spec.target_person:
        raise ValidationError(
            f"partitions belong to {partitions.person_id!r}, "
            f"not target {spec.target_person!r}"
        )
    if len(target.samples) != PREPARED_SIZE:
        raise ValidationError(
            f"target person has {len(target.samples)} samples, "
            f"expected {PREPARED_SIZE}; run preparation first"
        )
    others = _other_samples(all_persons, spec.target_person)

    calib_idx = partitions.partitions[spec.partition_index]
    test_idx = partitions.rest(spec.partition_index)
    calib = [target.samples[i] for i in calib_idx] * spec.calib_weight
    test = [target.samples[i] for i in test_idx]

    init = init_network(net_config, spec.init_seed)
    if baseline is None:
        params_without, _ = _train.train(init, others, spec.train_config)
    else:
        params_without = baseline

    if spec.calibration_mode == "retrain_with_calibration":
        params_with, _ = _train.train(init, others + calib, spec.train_config)
    else:
        config = spec.train_config
        if spec.finetune_epochs is not None:
            config = replace(config, epochs=spec.finetune_epochs)
        params_with, _ = _train.train(params_without, calib, config)

    eval_with = _train.evaluate(params_with, test)
    eval_without = _train.evaluate(params_without, test)
    return PairedResult(
        target_person=spec.target_person,
        partition_index=spec.partition_index,
        error_with=ArmError(eval_with.mean_error, eval_with.std_error),
        error_without=ArmError(eval_without.mean_error, eval_without.std_error),
        test_size=len(test),
        train_size_with=len(others) + len(calib),
        train_size_without=len(others),
        init_seed=spec.init_seed,
    )


def summarize(
    results: Sequence[PairedResult],
    person_order: Sequence[str] | None = None,
) -> list[PersonSummary]:
    """Aggregate per-partition results into per-person summaries."""
    by_person: dict[str, list[PairedResult]] = {}
    for result in results:
        by_person.setdefault(result.target_person, []).append(result)
    if person_order is None:
        person_order = list(by_person)
    summaries = []
    for person_id in person_order:
        rows = by_person.get(person_id)
        if not rows:
            continue
        with_means = np.array([r.error_with.mean for r in rows])
        without_means = np.array([r.error_without.mean for r in rows])
        best = min(rows, key=lambda r: (r.error_with.mean, r.partition_index))
        mean_with = float(with_means.mean())
        mean_without = float(without_means.mean())
        if mean_without == 0.0:
            pct = 0.0
        else:
            pct = 100.0 * (mean_without - mean_with) / mean_without
        summaries.append(
            PersonSummary(
                person_id=person_id,
                mean_with=mean_with,
                std_with=float(with_means.std()),
                mean_without=mean_without,
                std_without=float(without_means.std()),
                best_partition=best.partition_index,
                improvement_pct=pct,
                completed=len(rows),
            )
        )
    return summaries


# ---------------------------------------------------------------------------
# Full study with a resumable manifest


def _result_entry(result: PairedResult) -> dict:
    return {
        "status": "done",
        "person": result.target_person,
        "partition": result.partition_index,
        "init_seed": result.init_seed,
        "result": {
            "error_with": {"mean": result.error_with.mean, "std": result.error_with.std},
            "error_without": {
                "mean": result.error_without.mean,
                "std": result.error_without.std,
            },
            "test_size": result.test_size,
            "train_size_with": result.train_size_with,
            "train_size_without": result.train_size_without,
        },
    }


def _failure_entry(person_id: str, partition: int, init_seed: int, exc: Exception) -> dict:
    entry = {
        "status": "failed",
        "person": person_id,
        "partition": partition,
        "init_seed": init_seed,
        "error": {"message": str(exc), "epoch": None, "step": None},
    }
    if isinstance(exc, TrainingDivergedError):
        entry["error"]["epoch"] = exc.epoch
        entry["error"]["step"] = exc.step
    return entry


def _entry_sort_key(persons: Sequence[str]):
    index = {pid: i for i, pid in enumerate(persons)}

    def key(entry: dict):
        return (index.get(entry["person"], len(index)), entry["partition"])

    return key


def _write_manifest(path, manifest: dict) -> None:
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, path)


def load_study_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict):
        raise FormatError(f"{path} does not hold a study manifest")
    return manifest


def _person_job(args: tuple) -> list:
    """Run one person's pending experiments (worker for --jobs)."""
    (
        all_persons,
        partition_set,
        person_id,
        pending,
        train_config,
        net_config,
        mode,
        calib_weight,
        finetune_epochs,
        share_baseline,
        init_seeds,
    ) = args
    entries = []
    baseline = None
    if share_baseline and pending:
        try:
            baseline = train_baseline(
                all_persons, person_id, train_config, init_seeds[pending[0]], net_config
            )
        except TrainingDivergedError as exc:
            wrapped = TrainingDivergedError(
                f"baseline training diverged: {exc}", epoch=exc.epoch, step=exc.step
            )
            return [_failure_entry(person_id, k, init_seeds[k], wrapped) for k in pending]
    for k in pending:
        spec = ExperimentSpec(
            target_person=person_id,
            partition_index=k,
            train_config=train_config,
            calibration_mode=mode,
            calib_weight=calib_weight,
            finetune_epochs=finetune_epochs,
            init_seed=init_seeds[k],
        )
        try:
            result = run_paired_experiment(
                all_persons, partition_set, spec, net_config=net_config, baseline=baseline
            )
            entries.append(_result_entry(result))
        except TrainingDivergedError as exc:
            entries.append(_failure_entry(person_id, k, init_seeds[k], exc))
    return entries


def run_full_study(
    all_persons: Sequence[PersonDataset],
    seed: int,
    train_config: TrainConfig,
    *,
    calibration_mode: str = "retrain_with_calibration",
    calib_weight: int = 1,
    finetune_epochs: int | None = None,
    share_baseline: bool = False,
    net_config: NetworkConfig | None = None,
    manifest_path=None,
    jobs: int = 1,
) -> StudyReport:
    """Run every person x partition paired experiment and aggregate.

    All per-person seeds (partition shuffles, network initializations)
    derive from ``seed``, so a study is fully determined by its inputs.
    With ``share_baseline`` the uncalibrated arm is trained once per
    person instead of once per partition (its training data does not
    depend on the partition), sharing one init seed across the person's
    partitions.  A diverged experiment is recorded as failed and left
    out of the aggregates rather than aborting the study.

    ``manifest_path`` enables persistence: the manifest is rewritten
    after every finished experiment, and a re-run with identical inputs
    resumes whatever is missing.  ``jobs`` > 1 distributes persons over
    worker processes; results are identical regardless.
    """
    if net_config is None:
        net_config = NetworkConfig()
    if len(all_persons) < 2:
        raise ValidationError("a study needs at least 2 persons")
    if jobs < 1:
        raise ValidationError("jobs must be at least 1")
    if calib_weight < 1:
        raise ValidationError("calib_weight must be at least 1")
    if calibration_mode not in CALIBRATION_MODES:
        raise ValidationError(f"calibration_mode must be one of {CALIBRATION_MODES}")
    ids = [p.person_id for p in all_persons]
    if len(set(ids)) != len(ids):
        raise ValidationError("person ids are not unique")
    for person in all_persons:
        if len(person.samples) != PREPARED_SIZE:
            raise ValidationError(
                f"person {person.person_id!r} has {len(person.samples)} samples, "
                f"expected {PREPARED_SIZE}; run preparation first"
            )

    partition_sets = {
        pid: partition_person(person, person_seed(seed, pid, "partition"))
        for pid, person in zip(ids, all_persons)
    }
    init_seeds = {}
    for pid in ids:
        if share_baseline:
            shared = person_seed(seed, pid, "init")
            init_seeds[pid] = {k: shared for k in range(PARTITION_COUNT)}
        else:
            init_seeds[pid] = {
                k: person_seed(seed, pid, f"init:{k}") for k in range(PARTITION_COUNT)
            }

    header = {
        "format": MANIFEST_FORMAT,
        "seed": int(seed),
        "train_config": asdict(train_config),
        "net_config": asdict(net_config),
        "calibration_mode": calibration_mode,
        "calib_weight": int(calib_weight),
        "finetune_epochs": finetune_epochs,
        "share_baseline": bool(share_baseline),
        "dataset_fingerprint": dataset_fingerprint(all_persons),
        "persons": ids,
        "partitions": {
            pid: [part.tolist() for part in partition_sets[pid].partitions] for pid in ids
        },
    }

    manifest = dict(header)
    manifest["experiments"] = []
    if manifest_path is not None and Path(manifest_path).exists():
        existing = load_study_manifest(manifest_path)
        stored_header = {k: existing.get(k) for k in header}
        if stored_header != json.loads(json.dumps(header)):
            raise ValidationError(
                "existing study manifest does not match the requested study"
            )
        manifest = existing

    done = {(e["person"], e["partition"]) for e in manifest["experiments"]}
    pending_by_person = {
        pid: [k for k in range(PARTITION_COUNT) if (pid, k) not in done] for pid in ids
    }

    def job_args(pid: str):
        return (
            all_persons,
            partition_sets[pid],
            pid,
            pending_by_person[pid],
            train_config,
            net_config,
            calibration_mode,
            calib_weight,
            finetune_epochs,
            share_baseline,
            init_seeds[pid],
        )

    def absorb(entries: list) -> None:
        manifest["experiments"].extend(entries)
        manifest["experiments"].sort(key=_entry_sort_key(ids))
        if manifest_path is not None:
            _write_manifest(manifest_path, manifest)

    active = [pid for pid in ids if pending_by_person[pid]]
    if jobs == 1:
        for pid in active:
            # run partitions one by one so the manifest tracks progress
            baseline = None
            pending = pending_by_person[pid]
            if share_baseline:
                try:
                    baseline = train_baseline(
                        all_persons, pid, train_config, init_seeds[pid][pending[0]], net_config
                    )
                except TrainingDivergedError as exc:
                    wrapped = TrainingDivergedError(
                        f"baseline training diverged: {exc}", epoch=exc.epoch, step=exc.step
                    )
                    absorb(
                        [_failure_entry(pid, k, init_seeds[pid][k], wrapped) for k in pending]
                    )
                    continue
            for k in pending:
                spec = ExperimentSpec(
                    target_person=pid,
                    partition_index=k,
                    train_config=train_config,
                    calibration_mode=calibration_mode,
                    calib_weight=calib_weight,
                    finetune_epochs=finetune_epochs,
                    init_seed=init_seeds[pid][k],
                )
                try:
                    result = run_paired_experiment(
                        all_persons,
                        partition_sets[pid],
                        spec,
                        net_config=net_config,
                        baseline=baseline,
                    )
                    absorb([_result_entry(result)])
                except TrainingDivergedError as exc:
                    absorb([_failure_entry(pid, k, init_seeds[pid][k], exc)])
    else:
        import multiprocessing

        context = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=context) as pool:
            futures = {pool.submit(_person_job, job_args(pid)): pid for pid in active}
            for future in futures:
                absorb(future.result())

    return report_from_manifest(manifest)


def report_from_manifest(manifest: dict) -> StudyReport:
    """Rebuild a StudyReport from a (possibly reloaded) manifest."""
    results = []
    failures = []
    persons = manifest.get("persons", [])
    entries = sorted(manifest.get("experiments", []), key=_entry_sort_key(persons))
    for entry in entries:
        if entry["status"] == "done":
            payload = entry["result"]
            results.append(
                PairedResult(
                    target_person=entry["person"],
                    partition_index=entry["partition"],
                    error_with=ArmError(**payload["error_with"]),
                    error_without=ArmError(**payload["error_without"]),
                    test_size=payload["test_size"],
                    train_size_with=payload["train_size_with"],
                    train_size_without=payload["train_size_without"],
                    init_seed=entry["init_seed"],
                )
            )
        else:
            failures.append(
                FailedExperiment(
                    person_id=entry["person"],
                    partition_index=entry["partition"],
                    message=entry["error"]["message"],
                    epoch=entry["error"].get("epoch"),
                    step=entry["error"].get("step"),
                )
            )
    return StudyReport(
        results=results,
        failures=failures,
        summaries=summarize(results, person_order=persons),
    )


# ---------------------------------------------------------------------------
# Rendering


_CSV_COLUMNS = (
    "row_type,person,partition,mean_with,std_with,mean_without,std_without,"
    "test_size,best_partition,improvement_pct,note"
)


def render_report(report: StudyReport, format: str = "csv") -> str:
    """Serialize a report; CSV and JSON carry identical numbers.

    CSV rows come in three kinds sharing one column set (missing fields
    empty): ``summary`` (one per person: aggregate errors, best
    partition, improvement percent), ``experiment`` (one per paired
    experiment), and ``failed`` (one per excluded experiment, message in
    ``note``).
    """
    if not report.results:
        raise ValidationError("report holds no completed experiments")
    if format == "json":
        return json.dumps(
            {
                "summaries": [asdict(s) for s in report.summaries],
                "experiments": [asdict(r) for r in report.results],
                "failures": [asdict(f) for f in report.failures],
            },
            indent=1,
        )
    if format != "csv":
        raise ValidationError("format must be 'csv' or 'json'")
    out = io.StringIO()
    out.write(_CSV_COLUMNS + "\n")
    for s in report.summaries:
        out.write(
            f"summary,{s.person_id},,{s.mean_with!r},{s.std_with!r},"
            f"{s.mean_without!r},{s.std_without!r},,{s.best_partition},"
            f"{s.improvement_pct!r},\n"
        )
    for r in report.results:
        out.write(
            f"experiment,{r.target_person},{r.partition_index},"
            f"{r.error_with.mean!r},{r.error_with.std!r},"
            f"{r.error_without.mean!r},{r.error_without.std!r},"
            f"{r.test_size},,,\n"
        )
    for f in report.failures:
        note = f.message.replace('"', "'")
        out.write(f'failed,{f.person_id},{f.partition_index},,,,,,,,"{note}"\n')
    return out.getvalue()


# ---------------------------------------------------------------------------
# Audit


def _audit_partitions(manifest: dict, issues: list) -> dict:
    valid = {}
    persons = manifest.get("persons", [])
    partitions = manifest.get("partitions", {})
    for pid in persons:
        if pid not in partitions:
            issues.append(f"person {pid!r} has no recorded partitions")
            continue
        try:
            valid[pid] = PartitionSet(person_id=pid, partitions=partitions[pid])
        except (ValidationError, ValueError, TypeError) as exc:
            issues.append(f"partitions of {pid!r} are invalid: {exc}")
    return valid


def audit_study(manifest) -> list[str]:
    """Re-check pairing and leakage properties of a study manifest.

    Returns a list of human-readable issues; an empty list means the
    manifest is internally consistent: partitions are genuine disjoint
    covers, every experiment's calibration partition is disjoint from
    its test remainder, training-set sizes admit no extra target
    samples, arms share init seeds and config by construction, and the
    recorded seeds match their derivation from the study seed.
    """
    if not isinstance(manifest, dict):
        manifest = load_study_manifest(manifest)
    issues: list[str] = []
    if manifest.get("format") != MANIFEST_FORMAT:
        return [f"unrecognized manifest format {manifest.get('format')!r}"]
    persons = manifest.get("persons")
    if not isinstance(persons, list) or not persons:
        return ["manifest lists no persons"]
    if len(set(persons)) != len(persons):
        issues.append("person ids are not unique")
    try:
        TrainConfig(**manifest.get("train_config", {}))
    except (ValidationError, TypeError) as exc:
        issues.append(f"train_config does not validate: {exc}")
    calib_weight = manifest.get("calib_weight", 1)
    share_baseline = manifest.get("share_baseline", False)
    seed = manifest.get("seed")
    partition_sets = _audit_partitions(manifest, issues)

    seen = set()
    init_by_person: dict[str, set] = {}
    for entry in manifest.get("experiments", []):
        pid = entry.get("person")
        k = entry.get("partition")
        label = f"experiment {pid!r}:{k}"
        if pid not in persons:
            issues.append(f"{label} names an unknown person")
            continue
        if not isinstance(k, int) or not 0 <= k < PARTITION_COUNT:
            issues.append(f"{label} has an invalid partition index")
            continue
        if (pid, k) in seen:
            issues.append(f"{label} appears more than once")
        seen.add((pid, k))
        status = entry.get("status")
        if status not in ("done", "failed"):
            issues.append(f"{label} has unknown status {status!r}")
            continue
        init_seed = entry.get("init_seed")
        init_by_person.setdefault(pid, set()).add(init_seed)
        if seed is not None:
            purpose = "init" if share_baseline else f"init:{k}"
            if init_seed != person_seed(seed, pid, purpose):
                issues.append(f"{label} init seed does not derive from the study seed")
        if status == "failed":
            if not entry.get("error", {}).get("message"):
                issues.append(f"{label} failed without a message")
            continue
        payload = entry.get("result", {})
        for arm in ("error_with", "error_without"):
            stats = payload.get(arm, {})
            mean, std = stats.get("mean"), stats.get("std")
            if not all(
                isinstance(v, (int, float)) and math.isfinite(v) and v >= 0
                for v in (mean, std)
            ):
                issues.append(f"{label} has malformed {arm} statistics")
        if payload.get("test_size") != PREPARED_SIZE - PARTITION_SIZE:
            issues.append(f"{label} test size is not {PREPARED_SIZE - PARTITION_SIZE}")
        expected_without = (len(persons) - 1) * PREPARED_SIZE
        if payload.get("train_size_without") != expected_without:
            issues.append(f"{label} uncalibrated train size is not {expected_without}")
        expected_with = expected_without + PARTITION_SIZE * calib_weight
        if payload.get("train_size_with") != expected_with:
            issues.append(f"{label} calibrated train size is not {expected_with}")
        if pid in partition_sets:
            calib = partition_sets[pid].partitions[k]
            test = partition_sets[pid].rest(k)
            if np.intersect1d(calib, test).size:
                issues.append(f"{label} calibration indices leak into the test set")
            if calib.size + test.size != PREPARED_SIZE:
                issues.append(f"{label} partition and test set do not cover the person")
    if share_baseline:
        for pid, seeds in init_by_person.items():
            if len(seeds) > 1:
                issues.append(
                    f"person {pid!r} mixes init seeds despite a shared baseline"
                )
    return issues
