"""Two-phase training loop: a clean update, then an update on adversarial samples, per batch."""
from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .adversarial import PerturbConfig, generate_adversarial
from .autodiff import Tape
from .data import Subset
from .errors import ConfigError, NumericError
from .losses import loc_loss, soft_cls_loss
from .model import ModelConfig, ModelParams, forward, init_params, read_container, write_container


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 5e-3
    beta1: float = 0.5
    beta2: float = 0.999
    lr_decay: float = 0.8
    decay_every: int = 10
    loc_weight: float = 1.0
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    seed: int = 0
    adversarial_enabled: bool = True
    record_wall_time: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.decay_every < 1:
            raise ConfigError("decay_every must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.decay_every)


# ----------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
                lr: float, beta1: float = 0.5, beta2: float = 0.999,
                eps: float = 1e-8) -> dict[str, np.ndarray]:
    """One bias-corrected Adam step. Mutates ``state``; returns new parameter arrays."""
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, expected {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {k}")
    state.step += 1
    t = state.step
    out = {}
    for k, p in params.items():
        g = grads[k]
        state.m[k] = beta1 * state.m[k] + (1 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1 - beta2) * g * g
        m_hat = state.m[k] / (1 - beta1 ** t)
        v_hat = state.v[k] / (1 - beta2 ** t)
        out[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


# ----------------------------------------------------------------------------
# batches and steps

@dataclass
class Batch:
    """Training batch. ``targets`` is a label distribution over the seen classes
    (one-hot unless produced by a mixing augmentation); ``attrs`` the matching
    attribute targets."""

    images: np.ndarray
    labels: np.ndarray  # dominant local label per sample
    targets: np.ndarray
    attrs: np.ndarray

    @classmethod
    def from_labels(cls, images, labels, semantics) -> "Batch":
        labels = np.asarray(labels)
        return cls(np.asarray(images, dtype=np.float64), labels,
                   np.eye(len(semantics))[labels], np.asarray(semantics)[labels])


@dataclass
class StepStats:
    cls_loss: float
    loc_loss: float


def _loss_and_grads(images, batch: Batch, params: ModelParams, semantics, loc_weight):
    tape = Tape()
    bound = params.on(tape)
    out = forward(images, bound, semantics)
    cls = soft_cls_loss(out, batch.targets)
    loc = loc_loss(out, batch.attrs)
    total = ad.mean(cls + ad.scale(loc, loc_weight))
    if not np.isfinite(total.values):
        raise NumericError(f"non-finite training loss (cls={cls.values.mean()}, loc={loc.values.mean()})")
    grads = tape.backward(total)
    names = params.names()
    ids = bound.leaf_ids()
    return {n: grads[ids[n]] for n in names}, StepStats(float(cls.values.mean()), float(loc.values.mean()))


def _apply(params: ModelParams, grads, opt: AdamState, lr, cfg: TrainConfig) -> ModelParams:
    new = adam_update(params.as_dict(), grads, opt, lr, cfg.beta1, cfg.beta2)
    return ModelParams.from_dict(new, params.seed)


def standard_step(batch: Batch, params: ModelParams, opt: AdamState, semantics, lr: float,
                  cfg: TrainConfig) -> tuple[ModelParams, StepStats]:
    """One Adam update on the batch-mean of ``L_CLS + loc_weight * L_LOC``."""
    grads, stats = _loss_and_grads(batch.images, batch, params, semantics, cfg.loc_weight)
    return _apply(params, grads, opt, lr, cfg), stats


def adversarial_step(batch: Batch, params: ModelParams, opt: AdamState, semantics, lr: float,
                     cfg: TrainConfig, perturb: PerturbConfig | None = None
                     ) -> tuple[ModelParams, StepStats]:
    """Perturb the batch with frozen ``params``, then update on the adversarial images."""
    perturb = perturb or cfg.perturb
    ab = generate_adversarial(batch.images, batch.labels, params, semantics, perturb, batch.attrs)
    grads, stats = _loss_and_grads(ab.adv, batch, params, semantics, cfg.loc_weight)
    return _apply(params, grads, opt, lr, cfg), stats


# ----------------------------------------------------------------------------
# training loop

LOG_FIELDS = ["epoch", "batch", "phase", "cls_loss", "loc_loss", "lr", "wall_ms"]


@dataclass
class LogRow:
    epoch: int
    batch: int
    phase: str
    cls_loss: float
    loc_loss: float
    lr: float
    wall_ms: float


@dataclass
class EpochSummary:
    epoch: int
    lr: float
    cls_loss: float
    loc_loss: float
    perm_hash: str


@dataclass
class TrainingLog:
    rows: list[LogRow] = field(default_factory=list)
    epochs: list[EpochSummary] = field(default_factory=list)
    n_updates: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_FIELDS)
            for r in self.rows:
                w.writerow([r.epoch, r.batch, r.phase, f"{r.cls_loss:.6g}", f"{r.loc_loss:.6g}",
                            f"{r.lr:.6g}", f"{r.wall_ms:.6g}"])

    def write_epoch_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "lr", "cls_loss", "loc_loss", "perm_hash"])
            for e in self.epochs:
                w.writerow([e.epoch, f"{e.lr:.6g}", f"{e.cls_loss:.6g}", f"{e.loc_loss:.6g}", e.perm_hash])


@dataclass
class TrainState:
    """Everything needed to resume training after a completed epoch."""

    params: ModelParams
    opt: AdamState
    next_epoch: int
    log: TrainingLog


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def perm_hash(perm: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(perm, dtype="<i8").tobytes()).hexdigest()[:16]


BatchHook = Callable[[Batch, np.random.Generator], Batch]


def train(data: Subset, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
          state: TrainState | None = None, stop_after_epoch: int | None = None,
          augment: BatchHook | None = None,
          on_epoch_end: Callable[[TrainState], None] | None = None) -> tuple[ModelParams, TrainingLog]:
    """Train on the seen-class subset.

    Each epoch shuffles with a permutation that depends only on ``(seed,
    epoch)``; every batch gets a standard update and, when enabled, an
    adversarial update. ``state`` resumes a previous run; ``stop_after_epoch``
    halts after that epoch (used to exercise resumption). ``augment`` maps a
    batch to an augmented batch before the standard update.
    """
    if len(data) == 0:
        raise ConfigError("training set is empty")
    semantics = data.semantics
    if state is None:
        model_cfg = model_cfg or ModelConfig(n_attributes=semantics.shape[1],
                                             image_size=data.images.shape[-1])
        params = init_params(cfg.seed, model_cfg)
        state = TrainState(params, AdamState.zeros_like(params.as_dict()), 0, TrainingLog())
    params, opt, log = state.params, state.opt, state.log
    labels = data.local_labels
    n = len(data)
    bs = min(cfg.batch_size, n)
    for epoch in range(state.next_epoch, cfg.epochs):
        lr = cfg.lr_at(epoch)
        perm = epoch_permutation(cfg.seed, epoch, n)
        aug_rng = np.random.default_rng([cfg.seed, epoch, 1])
        cls_acc, loc_acc, count = 0.0, 0.0, 0
        for b, start in enumerate(range(0, n, bs)):
            idx = perm[start:start + bs]
            batch = Batch.from_labels(data.images[idx], labels[idx], semantics)
            if augment is not None:
                batch = augment(batch, aug_rng)
            t0 = time.perf_counter()
            params, st = standard_step(batch, params, opt, semantics, lr, cfg)
            log.n_updates += 1
            log.rows.append(LogRow(epoch, b, "standard", st.cls_loss, st.loc_loss, lr,
                                   _ms(t0, cfg)))
            cls_acc += st.cls_loss
            loc_acc += st.loc_loss
            count += 1
            if cfg.adversarial_enabled:
                t0 = time.perf_counter()
                params, st = adversarial_step(batch, params, opt, semantics, lr, cfg)
                log.n_updates += 1
                log.rows.append(LogRow(epoch, b, "adversarial", st.cls_loss, st.loc_loss, lr,
                                       _ms(t0, cfg)))
        log.epochs.append(EpochSummary(epoch, lr, cls_acc / count, loc_acc / count, perm_hash(perm)))
        state = TrainState(params, opt, epoch + 1, log)
        if on_epoch_end is not None:
            on_epoch_end(state)
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break
    return params, log


def _ms(t0: float, cfg: TrainConfig) -> float:
    return (time.perf_counter() - t0) * 1e3 if cfg.record_wall_time else 0.0


# ----------------------------------------------------------------------------
# resumable state on disk

def save_state(path, state: TrainState, meta: dict | None = None) -> None:
    arrays = {}
    for k, v in state.params.as_dict().items():
        arrays[f"params/{k}"] = v
    for k, v in state.opt.m.items():
        arrays[f"adam_m/{k}"] = v
    for k, v in state.opt.v.items():
        arrays[f"adam_v/{k}"] = v
    rows = [[r.epoch, r.batch, r.phase, r.cls_loss, r.loc_loss, r.lr, r.wall_ms] for r in state.log.rows]
    epochs = [[e.epoch, e.lr, e.cls_loss, e.loc_loss, e.perm_hash] for e in state.log.epochs]
    info = {"step": state.opt.step, "next_epoch": state.next_epoch, "seed": state.params.seed,
            "n_updates": state.log.n_updates, "rows": rows, "epochs": epochs, **(meta or {})}
    write_container(path, arrays, info)


def load_state(path) -> TrainState:
    arrays, info = read_container(path)

    def group(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    params = ModelParams.from_dict(group("params/"), info.get("seed"))
    opt = AdamState(group("adam_m/"), group("adam_v/"), info["step"])
    log = TrainingLog([LogRow(*r) for r in info["rows"]], [EpochSummary(*e) for e in info["epochs"]],
                      info["n_updates"])
    return TrainState(params, opt, info["next_epoch"], log)
