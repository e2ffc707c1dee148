"""Experiment runners: single runs, the component ablation, sweeps and augmentation studies."""
from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import data as data_mod
from .augment import STANDARD_POLICIES, AugmentPolicy, DriftReport, batch_hook, distortion_probe
from .config import ExperimentConfig
from .data import Benchmark, SyntheticDataset, Subset
from .errors import ConfigError
from .evaluation import EvalReport, calibration_sweep, evaluate
from .model import ModelParams, forward
from .trainer import TrainingLog, train

# name -> (adversarial updates on, keep rob, keep rel, keep div); cls is always on
VARIANTS = {
    "baseline": (False, False, False, False),
    "+CLS": (True, False, False, False),
    "+CLS+ROB": (True, True, False, False),
    "+CLS+DIV": (True, False, False, True),
    "+CLS+ROB+REL": (True, True, True, False),
    "+CLS+DIV+REL": (True, False, True, True),
    "HAS": (True, True, True, True),
}

AXES = {"lambda1": "lambda1", "lambda2": "lambda2", "lambda3": "lambda3", "epsilon": "epsilon"}


def variant_overrides(cfg: ExperimentConfig, name: str) -> tuple[bool, dict]:
    """Adversarial flag and perturb overrides for a named ablation row."""
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; expected one of {list(VARIANTS)}")
    adv, rob, rel, div = VARIANTS[name]
    p = cfg.perturb
    return adv, {"lambda1": p.lambda1 if rob else 0.0,
                 "lambda2": p.lambda2 if rel else 0.0,
                 "lambda3": p.lambda3 if div else 0.0}


def load_benchmark(cfg: ExperimentConfig, seed: int) -> Benchmark:
    """Dataset from disk when a path is configured, else generated with ``dataset.seed + seed``."""
    if cfg.dataset.path:
        ds = data_mod.load(cfg.dataset.path)
    else:
        dc = cfg.data_config()
        ds = data_mod.generate_dataset(type(dc)(**{**dc.__dict__, "seed": dc.seed + seed}))
    return data_mod.make_benchmark(ds, seed)


@dataclass
class RunResult:
    seed: int
    variant: str
    params: ModelParams
    log: TrainingLog
    report: EvalReport
    curve: list = field(default_factory=list)  # (mu, S, U, H) on validation
    extra: dict = field(default_factory=dict)


def run_experiment(cfg: ExperimentConfig, seed: int, variant: str = "HAS",
                   perturb_overrides: dict | None = None, bench: Benchmark | None = None,
                   augment: AugmentPolicy | None = None) -> RunResult:
    """Train one model, calibrate mu on validation and evaluate on test."""
    bench = bench or load_benchmark(cfg, seed)
    adv, over = variant_overrides(cfg, variant)
    over.update(perturb_overrides or {})
    tcfg = cfg.train_config(seed, **over)
    tcfg = replace(tcfg, adversarial_enabled=adv and tcfg.adversarial_enabled)
    hook = batch_hook(augment, bench.train.semantics) if augment is not None else None
    params, log = train(bench.train, tcfg, cfg.model_config(), augment=hook)
    report, curve = evaluate_params(params, bench, cfg)
    return RunResult(seed, variant, params, log, report, curve)


def evaluate_params(params: ModelParams, bench: Benchmark, cfg: ExperimentConfig):
    ds = bench.dataset
    class_ids = np.array([c.class_id for c in ds.classes])
    seen_mask = np.array([c.split == "seen" for c in ds.classes])
    curve = []
    mu = cfg.eval.mu
    if mu is None:
        mu, curve = calibration_sweep(params, bench.val_seen, bench.val_unseen, ds.semantics,
                                      class_ids, seen_mask, cfg.eval.mu_grid)
    return evaluate(params, bench, mu=mu), curve


# ----------------------------------------------------------------------------
# multi-seed fan-out

def worker_count(n_jobs: int) -> int:
    raw = os.environ.get("HASZSL_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"HASZSL_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(cap, n_jobs))


def fan_out(fn: Callable, jobs: list) -> list:
    """Run ``fn(*job)`` for each job; results come back in job order regardless of workers."""
    n = worker_count(len(jobs))
    if n == 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        futures = [pool.submit(fn, *j) for j in jobs]
        return [f.result() for f in futures]


# ----------------------------------------------------------------------------
# ablation grid and sweeps

ABLATION_FIELDS = ["variant", "n_seeds", "T1_mean", "T1_std", "S_mean", "U_mean", "H_mean", "H_std"]
SWEEP_FIELDS = ["axis", "value", "seed", "T1", "S", "U", "H", "mu"]


def _summary(reports: list[EvalReport]) -> dict:
    t1 = np.array([r.T1_unseen for r in reports])
    h = np.array([r.harmonic for r in reports])
    return {"n_seeds": len(reports), "T1_mean": t1.mean(), "T1_std": t1.std(),
            "S_mean": np.mean([r.acc_seen for r in reports]),
            "U_mean": np.mean([r.acc_unseen for r in reports]),
            "H_mean": h.mean(), "H_std": h.std()}


def _ablation_job(cfg, seed, variant):
    return run_experiment(cfg, seed, variant).report


def ablation_grid(cfg: ExperimentConfig, seeds=None, variants=None) -> list[dict]:
    """Mean and std of T1 / H for every ablation row over ``seeds``."""
    seeds = list(cfg.seeds if seeds is None else seeds)
    variants = list(VARIANTS if variants is None else variants)
    jobs = [(cfg, s, v) for v in variants for s in seeds]
    reports = fan_out(_ablation_job, jobs)
    rows = []
    for i, v in enumerate(variants):
        rows.append({"variant": v, **_summary(reports[i * len(seeds):(i + 1) * len(seeds)])})
    return rows


def _sweep_job(cfg, seed, axis, value):
    return run_experiment(cfg, seed, "HAS", {axis: float(value)}).report


def sweep(cfg: ExperimentConfig, axis: str, grid, seeds=None) -> list[dict]:
    """Full-HAS runs with one weight or the budget overridden; one row per (value, seed)."""
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {list(AXES)}")
    if len(grid) == 0:
        raise ConfigError("sweep grid is empty")
    seeds = list(cfg.seeds if seeds is None else seeds)
    jobs = [(cfg, s, axis, v) for v in grid for s in seeds]
    reports = fan_out(_sweep_job, jobs)
    return [{"axis": axis, "value": float(j[3]), "seed": j[1], "T1": r.T1_unseen, "S": r.acc_seen,
             "U": r.acc_unseen, "H": r.harmonic, "mu": r.mu} for j, r in zip(jobs, reports)]


# ----------------------------------------------------------------------------
# augmentation studies

AUGMENT_FIELDS = ["policy", "seed", "T1", "S", "U", "H"]


def _augment_job(cfg, seed, policy):
    return run_experiment(cfg, seed, "baseline", augment=policy).report


def augmentation_harness(cfg: ExperimentConfig, policies=None, seeds=None) -> list[dict]:
    """Train the non-adversarial baseline under each augmentation policy."""
    policies = list(policies or cfg.policies() or STANDARD_POLICIES)
    seeds = list(cfg.seeds if seeds is None else seeds)
    jobs = [(cfg, s, p) for p in policies for s in seeds]
    reports = fan_out(_augment_job, jobs)
    return [{"policy": j[2].label, "seed": j[1], "T1": r.T1_unseen, "S": r.acc_seen,
             "U": r.acc_unseen, "H": r.harmonic} for j, r in zip(jobs, reports)]


def drift_study(params: ModelParams, bench: Benchmark, policies, seed: int) -> list[DriftReport]:
    """Evaluation-time attribute drift of a trained model on the seen test images."""
    sub = bench.test_seen
    out = []
    for i, pol in enumerate(policies):
        rng = np.random.default_rng([seed, 2, i])
        out.append(distortion_probe(params, sub.images, sub.labels, sub.class_ids, sub.semantics,
                                    pol, rng))
    return out


# ----------------------------------------------------------------------------
# attribute localization

def attention_cells(params: ModelParams, images, semantics, image_size: int,
                    patch_size: int) -> np.ndarray:
    """Grid cell (row, col) of the attention argmax, per image and attribute: N x K x 2."""
    maps = forward(np.asarray(images, dtype=np.float64), params, semantics).attn_maps.values
    n, k, h, w = maps.shape
    flat = maps.reshape(n, k, h * w).argmax(axis=-1)
    r, c = np.divmod(flat, w)
    scale = image_size // h
    return np.stack([(r * scale) // patch_size, (c * scale) // patch_size], axis=-1)


def localization_accuracy(params: ModelParams, sub: Subset, ds: SyntheticDataset,
                          threshold: float = 0.5) -> float:
    """Fraction of (image, active attribute) pairs whose attention peak is on the motif cell."""
    cfg = ds.config
    cells = attention_cells(params, sub.images, sub.semantics, cfg.image_size, cfg.patch_size)
    truth = np.array([ds.cell_of(k) for k in range(cfg.n_attributes)])
    active = sub.attrs > threshold
    hit = np.all(cells == truth[None], axis=-1)
    return float(hit[active].mean()) if active.any() else float("nan")


def test_images(bench: Benchmark) -> Subset:
    """Seen and unseen test images together, candidates over all classes."""
    ds = bench.dataset
    ids = np.array([c.class_id for c in ds.classes])
    return Subset(np.concatenate([bench.test_seen.images, bench.test_unseen.images]),
                  np.concatenate([bench.test_seen.labels, bench.test_unseen.labels]),
                  ids, ds.semantics)


# ----------------------------------------------------------------------------
# CSV output

def fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def write_rows(path, fields: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in rows:
            w.writerow([fmt(r[f]) for f in fields])
