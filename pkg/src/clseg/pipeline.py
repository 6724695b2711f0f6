"""Pipeline plumbing: cohort loading, the training loop with checkpoints
and a loss log, whole-subject inference, k-fold cross-validation, and
report emission. Every step is a pure function of (config, input files,
seed); repeated runs are byte-identical.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from . import __version__, volume_io
from .config import ConfigError, RunConfig
from .evaluation import EvalConfig, PatientEval, build_report, evaluate_patient, write_report_files
from .optim import AdamState
from .sampling import PatchSampler, TrainingSubject
from .unet import (NetworkParams, build_network, load_checkpoint, normalize_volume,
                   save_checkpoint, sliding_window_inference, train_step)

PREDICTION_NAMES = ("cl_pred", "tissue_pred", "cl_prob")


def derive_seed(*keys: int) -> int:
    """Deterministic child seed from a tuple of integers."""
    return int(np.random.SeedSequence(entropy=list(keys)).generate_state(1)[0])


def discover_subjects(cohort_dir: str | Path) -> list[str]:
    cohort_dir = Path(cohort_dir)
    if not cohort_dir.is_dir():
        raise volume_io.VolumeError(f"cohort directory not found: {cohort_dir}")
    ids = sorted(d.name for d in cohort_dir.iterdir()
                 if d.is_dir() and (d / "mp2rage.json").exists())
    if not ids:
        raise volume_io.VolumeError(f"no subjects found under {cohort_dir}")
    return ids


def load_training_subject(cohort_dir: str | Path, subject_id: str) -> TrainingSubject:
    vols = volume_io.read_subject(Path(cohort_dir) / subject_id)
    contrasts = np.stack([normalize_volume(vols[name].data)
                          for name in volume_io.CONTRAST_NAMES])
    return TrainingSubject(
        subject_id=subject_id,
        contrasts=contrasts,
        cl_labels=vols["cl_labels"].data,
        tissue_labels=vols["tissue_labels"].data,
        wml_labels=vols["wml_labels"].data,
    )


def load_training_data(cohort_dir: str | Path,
                       subject_ids: list[str] | None = None) -> list[TrainingSubject]:
    ids = subject_ids if subject_ids is not None else discover_subjects(cohort_dir)
    return [load_training_subject(cohort_dir, sid) for sid in sorted(ids)]


def write_run_manifest(out_dir: Path, cfg: RunConfig, command: str) -> None:
    doc = {
        "command": command,
        "package_version": __version__,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
    }
    (out_dir / "run_manifest.json").write_text(
        json.dumps(doc, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _checkpoint_paths(out_dir: Path) -> list[tuple[int, Path]]:
    found = []
    for p in sorted(out_dir.glob("checkpoint_*.json")):
        stem = p.name[len("checkpoint_"):-len(".json")]
        if stem.isdigit():
            found.append((int(stem), p.with_suffix("")))
    return found


def _stack_batch(patches) -> dict:
    return {
        "input": np.stack([p.input for p in patches]),
        "cl_labels": np.stack([p.cl_labels for p in patches]),
        "tissue_labels": np.stack([p.tissue_labels for p in patches]),
        "wml_labels": np.stack([p.wml_labels for p in patches]),
        "provenance": [p.provenance for p in patches],
    }


def _truncate_loss_log(log_path: Path, keep_iterations: int) -> list[str]:
    if not log_path.exists() or keep_iterations == 0:
        return ["iteration,cl_loss,tissue_loss,total_loss\n"]
    lines = log_path.read_text().splitlines(keepends=True)
    kept = lines[:1]
    for line in lines[1:]:
        it = int(line.split(",", 1)[0])
        if it <= keep_iterations:
            kept.append(line)
    return kept


def run_training(cfg: RunConfig, out_dir: str | Path,
                 subject_ids: list[str] | None = None, resume: bool = True) -> Path:
    """Train per the config; emits loss.csv and periodic checkpoints.

    Resumable: with `resume`, continues from the newest checkpoint in
    out_dir and reproduces the uninterrupted run exactly (the sampler is
    draw-indexed, so only the draw counter is state).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tr = cfg.training
    subjects = load_training_data(cfg.paths.cohort_dir, subject_ids)
    sampler = PatchSampler(cfg.sampler, cfg.network.input_patch, subjects)

    start_iter = 0
    draws = 0
    existing = _checkpoint_paths(out_dir) if resume else []
    if existing:
        start_iter, ckpt = existing[-1]
        params, state, start_iter, draws = load_checkpoint(ckpt)
        if params.config != cfg.network:
            raise ConfigError(f"checkpoint {ckpt} config differs from run config")
    else:
        params = build_network(cfg.network, seed=tr.seed)
        state = AdamState.for_params(params.tensors, learning_rate=tr.learning_rate)

    log_path = out_dir / "loss.csv"
    log_lines = _truncate_loss_log(log_path, start_iter)
    with open(log_path, "w") as log:
        log.writelines(log_lines)
        for it in range(start_iter + 1, tr.iterations + 1):
            patches = [sampler.draw(draws + i) for i in range(tr.batch_size)]
            draws += tr.batch_size
            result = train_step(params, state, _stack_batch(patches), cfg.loss)
            log.write(f"{it},{result.cl_loss!r},{result.tissue_loss!r},"
                      f"{result.total_loss!r}\n")
            if it % tr.checkpoint_every == 0 or it == tr.iterations:
                save_checkpoint(out_dir / f"checkpoint_{it:08d}", params, state, it, draws)
                log.flush()
    return out_dir / f"checkpoint_{tr.iterations:08d}"


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def run_inference(checkpoint: str | Path, subject_dir: str | Path,
                  out_dir: str | Path, drop_channel: str | None = None) -> dict[str, Path]:
    """Predict one subject and write cl_pred/tissue_pred/cl_prob volumes."""
    params, _, _, _ = load_checkpoint(checkpoint)
    vols = volume_io.read_subject(subject_dir)
    header = vols["mp2rage"].header
    contrasts = np.stack([normalize_volume(vols[name].data)
                          for name in volume_io.CONTRAST_NAMES])
    cl_pred, tissue_pred, cl_prob = sliding_window_inference(
        params, contrasts, drop_channel=drop_channel)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for name, arr, kind in (("cl_pred", cl_pred, "cl_labels"),
                            ("tissue_pred", tissue_pred, "tissue_labels"),
                            ("cl_prob", cl_prob, "intensity")):
        v = volume_io.make_volume(arr, kind, header.subject_id, header.spacing_mm)
        volume_io.write_volume(v, out_dir / name)
        written[name] = out_dir / name
    return written


# ---------------------------------------------------------------------------
# Cross-validation and reporting
# ---------------------------------------------------------------------------


def make_fold_split(subject_ids: list[str], k: int, seed: int) -> list[list[str]]:
    """Deterministic k folds from (seed, subject ids); sizes differ by <= 1."""
    if k < 2 or k > len(subject_ids):
        raise ConfigError(f"k={k} invalid for cohort of {len(subject_ids)}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xF01D,)))
    order = rng.permutation(sorted(subject_ids))
    return [sorted(chunk.tolist()) for chunk in np.array_split(order, k)]


def _lesion_records_by_subject(cohort_dir: Path) -> dict[str, list[dict]]:
    manifest_path = cohort_dir / "cohort_manifest.json"
    if not manifest_path.exists():
        return {}
    doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    return {s["subject_id"]: s["lesions"] for s in doc.get("subjects", [])}


def evaluate_predictions(cohort_dir: str | Path, pred_dir: str | Path,
                         eval_cfg: EvalConfig,
                         subject_ids: list[str] | None = None) -> list[PatientEval]:
    """Per-patient evaluation of a prediction directory against the cohort."""
    cohort_dir = Path(cohort_dir)
    pred_dir = Path(pred_dir)
    ids = sorted(subject_ids if subject_ids is not None else discover_subjects(cohort_dir))
    records = _lesion_records_by_subject(cohort_dir)
    patients = []
    for sid in ids:
        ref = volume_io.read_volume(cohort_dir / sid / "cl_labels")
        pred_path = pred_dir / sid / "cl_pred"
        if not pred_path.with_suffix(".json").exists():
            raise volume_io.MissingVolumeFileError(
                f"no prediction for {sid} under {pred_dir} (cohort coverage mismatch)")
        pred = volume_io.read_volume(pred_path)
        patients.append(evaluate_patient(
            sid, ref.data, pred.data, eval_cfg,
            spacing_mm=ref.header.spacing_mm,
            lesion_records=records.get(sid)))
    return patients


def run_xval(cfg: RunConfig, out_dir: str | Path, k: int | None = None) -> dict:
    """Train/test each fold, then pool every held-out prediction into one report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    k = k if k is not None else cfg.xval_folds
    subject_ids = discover_subjects(cfg.paths.cohort_dir)
    folds = make_fold_split(subject_ids, k, cfg.training.seed)
    (out_dir / "folds.json").write_text(json.dumps(folds, indent=2) + "\n", encoding="utf-8")

    pred_dir = out_dir / "predictions"
    for fi, test_ids in enumerate(folds):
        train_ids = sorted(set(subject_ids) - set(test_ids))
        fold_cfg = dataclasses.replace(
            cfg,
            training=dataclasses.replace(cfg.training, seed=derive_seed(cfg.training.seed, fi)),
            sampler=dataclasses.replace(cfg.sampler, seed=derive_seed(cfg.sampler.seed, fi)),
        )
        ckpt = run_training(fold_cfg, out_dir / f"fold_{fi}", subject_ids=train_ids)
        for sid in test_ids:
            run_inference(ckpt, Path(cfg.paths.cohort_dir) / sid, pred_dir / sid)

    patients = evaluate_predictions(cfg.paths.cohort_dir, pred_dir, cfg.eval)
    report = build_report({cfg.variant: patients}, cfg.eval)
    write_report_files(report, out_dir / "report")
    return report


def run_report(cohort_dir: str | Path, pred_dirs: dict[str, str | Path],
               out_dir: str | Path, eval_cfg: EvalConfig) -> dict:
    """Evaluate one or more variants' prediction dirs into a single report."""
    if not pred_dirs:
        raise ConfigError("report needs at least one prediction directory")
    model_patients = {
        name: evaluate_predictions(cohort_dir, pdir, eval_cfg)
        for name, pdir in sorted(pred_dirs.items())
    }
    report = build_report(model_patients, eval_cfg)
    write_report_files(report, out_dir)
    return report
