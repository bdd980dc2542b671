"""Offline pipeline and run bookkeeping.

Everything the online server does with live streams, done from files
instead: generate a trajectory dataset, train on it epoch-by-epoch with
the identical trainer core, and compare the resulting metrics between
runs. Also builds the held-out validation set both paths share.
"""

from __future__ import annotations

import csv
import json
import os
from math import ceil

import numpy as np

from . import dataset, solvers, trainer
from .buffer import Batch, FullTrajectory, Sample, SingleStep, StepPair
from .config import space_to_json
from .sampler import next_params


def build_validation_set(cfg):
    """Held-out (sample list, stacked raw fields) for validation.

    λ draws come from the validation seed, disjoint from training
    draws; fields feed fitted normalization constants.
    """
    count = cfg["server"]["validation_trajectories"]
    stride = max(1, cfg["server"]["validation_stride"])
    kind = cfg["solver"]["kind"]
    direct = cfg["trainer"]["mode"] == "direct"
    samples = []
    stacks = []
    collected, i = 0, 0
    while collected < count:
        if i >= 64 * count:
            raise solvers.DivergenceError(
                f"could not build {count} finite validation trajectories "
                f"in {i} draws; parameter space too divergence-prone"
            )
        lam = cfg.validation_params(i)
        params = cfg.solver_params(lam, seed=10_000_000 + i)
        sim_id = 10_000_000 + i
        i += 1
        rows = []
        try:
            solvers.run_trajectory(kind, params, lambda t, v: rows.append(v))
        except solvers.DivergenceError:
            continue  # unstable draw: validation needs finite targets
        collected += 1
        fields = np.asarray(rows)
        stacks.append(fields)
        if direct:
            for t in range(0, len(fields), stride):
                samples.append(Sample(sim_id, lam, SingleStep(t, fields[t])))
        else:
            for t in range(1, len(fields), stride):
                samples.append(
                    Sample(sim_id, lam, StepPair(t - 1, fields[t - 1 : t + 1]))
                )
    fields = np.concatenate(stacks, axis=0) if stacks else None
    return samples, fields


# ---------------------------------------------------------------------------
# offline generation

def generate_dataset(cfg, path) -> dict:
    """Run the full ensemble locally and store every trajectory.

    A sim whose solver diverges contributes no record, the way a
    repeatedly crashing client ends up abandoned by the launcher; its id
    is listed in the manifest under "diverged_sims"."""
    space = cfg.param_space()
    strategy = cfg.strategy()
    kind = cfg["solver"]["kind"]
    manifest = {
        "experiment": cfg["run"]["experiment"],
        "param_names": list(space.names),
        "param_space": space_to_json(space),
        "seed": cfg["seeds"]["master"],
        "field_shape": list(cfg.field_shape()),
        "solver": dict(cfg["solver"]),
    }

    # records() runs inside write_dataset before the manifest is
    # serialized, so divergence entries added here land in the file
    def records():
        for sim_id in range(cfg["run"]["ensemble_size"]):
            lam = next_params(space, strategy, sim_id)
            params = cfg.solver_params(lam, seed=sim_id)
            rows = []
            try:
                solvers.run_trajectory(kind, params, lambda t, v: rows.append(v))
            except solvers.DivergenceError:
                manifest.setdefault("diverged_sims", []).append(sim_id)
                continue
            yield dataset.TrajectoryRecord(sim_id, lam, np.asarray(rows))

    dataset.write_dataset(path, manifest, records())
    return dataset.read_manifest(path)


# ---------------------------------------------------------------------------
# offline training

def samples_from_records(records, unit_kind: str) -> list:
    out = []
    for rec in records:
        if unit_kind == "single_step":
            for t in range(rec.t_count):
                out.append(Sample(rec.sim_id, rec.params, SingleStep(t, rec.fields[t])))
        elif unit_kind == "step_pair":
            for t in range(1, rec.t_count):
                out.append(
                    Sample(rec.sim_id, rec.params, StepPair(t - 1, rec.fields[t - 1 : t + 1]))
                )
        else:
            out.append(Sample(rec.sim_id, rec.params, FullTrajectory(rec.fields)))
    return out


def train_offline(cfg, data_path, outdir=None) -> dict:
    """Epoch-based training over a stored dataset.

    Same model, same SGD, same validation as the online server; the
    only difference is where samples come from: a uniformly reshuffled
    pass over the full dataset each epoch instead of a live buffer.
    """
    outdir = outdir if outdir is not None else cfg["paths"]["outdir"]
    os.makedirs(outdir, exist_ok=True)
    _, records = dataset.read_dataset(data_path)
    samples = samples_from_records(records, cfg["run"]["sample_unit"])
    if not samples:
        raise ValueError(f"dataset {data_path} produced no training samples")

    val_samples, val_fields = build_validation_set(cfg)
    mode = cfg.build_mode(val_fields)
    normalizer = cfg.build_input_normalizer(val_fields)
    sgd = cfg.sgd_config()
    master = cfg["seeds"]["master"]
    model = trainer.init_mlp(
        cfg.model_dims(), cfg["trainer"]["activation"],
        np.random.default_rng(np.random.SeedSequence([master, 11, 0])),
    )

    per_epoch = len(samples) // sgd.batch_size
    if per_epoch == 0:
        raise ValueError(
            f"{len(samples)} samples cannot fill one batch of {sgd.batch_size}"
        )
    max_batches = sgd.max_batches
    if cfg["trainer"]["epochs"] > 0:
        max_batches = cfg["trainer"]["epochs"] * per_epoch

    metrics = trainer.MetricsWriter(os.path.join(outdir, "metrics_offline.csv"))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([master, 99]))
    validate_every = cfg["trainer"]["validate_every"]
    checkpoint_every = cfg["trainer"]["checkpoint_every"]
    ckpt_path = os.path.join(outdir, "checkpoint_offline.bin")

    step = 0
    epoch = 0
    last_rmse = None
    status, abort_error = "ok", None
    try:
        while step < max_batches:
            order = shuffle_rng.permutation(len(samples))
            for b in range(per_epoch):
                if step >= max_batches:
                    break
                idx = order[b * sgd.batch_size : (b + 1) * sgd.batch_size]
                batch = Batch(tuple(samples[i] for i in idx), step)
                loss = trainer.train_on_batch(model, batch, mode, normalizer, sgd, step)
                step += 1
                if step % validate_every == 0 or step == max_batches:
                    rmse = trainer.validate(model, val_samples, mode, normalizer)
                    vloss = trainer.validation_loss(model, val_samples, mode, normalizer)
                    metrics.append(step, sgd.lr(step - 1), loss, rmse, vloss, epoch)
                    last_rmse = rmse
                if checkpoint_every and step % checkpoint_every == 0:
                    trainer.checkpoint_save(model, sgd, step, ckpt_path)
            epoch += 1
    except trainer.TrainingDiverged as err:
        status, abort_error = "aborted", str(err)
    trainer.checkpoint_save(model, sgd, step, ckpt_path)
    metrics.close()
    report = {
        "status": status,
        "abort_error": abort_error,
        "batches_trained": step,
        "epochs_completed": epoch if status == "ok" else epoch,
        "samples": len(samples),
        "batches_per_epoch": per_epoch,
        "val_rmse": last_rmse,
    }
    with open(os.path.join(outdir, "offline_report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    return report


# ---------------------------------------------------------------------------
# dataset statistics (two independent passes, so any single-pass
# accumulator bug elsewhere has something to disagree with)

def dataset_stats(path) -> dict:
    manifest, records = dataset.read_dataset(path)
    n_values = 0
    total = 0.0
    vmin, vmax = np.inf, -np.inf
    for rec in records:
        n_values += rec.fields.size
        total += float(rec.fields.sum())
        vmin = min(vmin, float(rec.fields.min()))
        vmax = max(vmax, float(rec.fields.max()))
    mean = total / n_values if n_values else float("nan")
    ssq = 0.0
    for rec in records:
        ssq += float(((rec.fields - mean) ** 2).sum())
    std = (ssq / n_values) ** 0.5 if n_values else float("nan")
    return {
        "records": len(records),
        "timesteps": sum(r.t_count for r in records),
        "values": n_values,
        "mean": mean,
        "std": std,
        "min": vmin,
        "max": vmax,
    }


# ---------------------------------------------------------------------------
# run comparison

def read_metrics(path) -> list:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for row in rows:
        for key in row:
            row[key] = float(row[key]) if key != "step" else int(row[key])
        row["step"] = int(row["step"])
    return rows


def final_val_rmse(path) -> float:
    rows = read_metrics(path)
    if not rows:
        raise ValueError(f"{path} has no metric rows")
    return rows[-1]["val_rmse"]


def compare_runs(run_metrics, baseline_metrics) -> dict:
    """Relative improvement of `run` over `baseline` in final
    validation RMSE: gain_pct = (1 - run/baseline) * 100."""
    run_rmse = final_val_rmse(run_metrics)
    base_rmse = final_val_rmse(baseline_metrics)
    return {
        "run_rmse": run_rmse,
        "baseline_rmse": base_rmse,
        "gain_pct": (1.0 - run_rmse / base_rmse) * 100.0,
    }
