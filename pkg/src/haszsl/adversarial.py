"""Iterated signed-gradient perturbation of training images under the HAS objective."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .errors import ConfigError, NumericError
from .losses import LossWeights, combine, has_components
from .model import ModelParams, forward


@dataclass(frozen=True)
class PerturbConfig:
    """Adversarial generation knobs. ``epsilon`` is in [0, 1] pixel units."""

    epsilon: float = 4 / 255
    steps: int = 3
    weights: LossWeights = field(default_factory=LossWeights)
    clamp_lo: float = 0.0
    clamp_hi: float = 1.0
    cls_weight: float = 1.0
    paper_literal_signs: bool = False

    def __post_init__(self):
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not self.clamp_lo < self.clamp_hi:
            raise ConfigError("clamp_lo must be < clamp_hi")

    @classmethod
    def from_pixel_scale(cls, epsilon_255: float, **kw) -> "PerturbConfig":
        return cls(epsilon=epsilon_255 / 255.0, **kw)


@dataclass
class AdversarialBatch:
    clean: np.ndarray
    adv: np.ndarray
    per_step_objective: list[float]  # mean L_HAS at I_adv_t, t = 0..T-1
    per_step_drift: list[float]  # mean ||g(f(I)) - g(f(I_adv_t))||^2, t = 0..T-1


def fgsm_step(image, grad, epsilon: float, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """``clamp(image - epsilon * sign(grad), lo, hi)`` with ``sign(0) = 0``."""
    image = np.asarray(image, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if image.shape != grad.shape:
        raise ValueError(f"image {image.shape} and gradient {grad.shape} differ in shape")
    return np.clip(image - epsilon * np.sign(grad), lo, hi)


def generate_adversarial(images, labels, params: ModelParams, semantics,
                         cfg: PerturbConfig, attrs=None) -> AdversarialBatch:
    """Run ``cfg.steps`` descent steps of the HAS objective on the input pixels.

    ``labels`` index rows of ``semantics`` (the seen-class attribute matrix).
    Parameters are read-only; the clean global features are computed once and
    anchor the drift term for every step.
    """
    clean = np.asarray(images, dtype=np.float64)
    clean_feat = forward(clean, params, semantics).global_feat
    adv = clean.copy()
    direction = -1.0 if cfg.paper_literal_signs else 1.0
    objectives, drifts = [], []
    for _ in range(cfg.steps):
        tape = Tape()
        x = tape.leaf(adv)
        out = forward(x, params, semantics)
        comps = has_components(out, labels, attrs, clean_feat, cfg.paper_literal_signs)
        per_sample = combine(comps, cfg.weights, cfg.cls_weight)
        total = ad.sum_(per_sample)
        grad = tape.backward(total)[x]
        if not np.all(np.isfinite(grad)):
            raise NumericError(_diagnose(adv, labels, params, semantics, clean_feat, cfg))
        objectives.append(float(per_sample.values.mean()))
        drifts.append(float(comps["rel"].values.mean()))
        adv = fgsm_step(adv, direction * grad, cfg.epsilon, cfg.clamp_lo, cfg.clamp_hi)
    return AdversarialBatch(clean, adv, objectives, drifts)


def _diagnose(adv, labels, params, semantics, clean_feat, cfg) -> str:
    bad = []
    for name in ("cls", "rob", "rel", "div"):
        tape = Tape()
        x = tape.leaf(adv)
        comps = has_components(forward(x, params, semantics), labels, None, clean_feat,
                               cfg.paper_literal_signs)
        value = comps[name]
        grad = tape.backward(ad.sum_(value))[x]
        if not (np.all(np.isfinite(value.values)) and np.all(np.isfinite(grad))):
            bad.append(name)
    return f"non-finite input gradient in adversarial objective; offending components: {bad or 'combined'}"


@dataclass
class PerturbStats:
    normalized: np.ndarray  # per image delta min-max scaled to [0, 1]
    background: np.ndarray  # modal delta value per image
    foreground: np.ndarray  # N x H x W bool
    bin_width: np.ndarray  # per image


def perturbation_report(ab: AdversarialBatch, bins: int = 256) -> PerturbStats:
    """Split each perturbation into a modal background value and a foreground mask.

    Deltas are quantized into ``bins`` equal bins over their range; the centre
    of the fullest bin is the background value. A pixel is foreground when any
    channel differs from it by more than one bin width.
    """
    delta = np.asarray(ab.adv) - np.asarray(ab.clean)
    single = delta.ndim == 3
    if single:
        delta = delta[None]
    n = delta.shape[0]
    norm = np.zeros_like(delta)
    mode = np.zeros(n)
    width = np.zeros(n)
    fg = np.zeros((n,) + delta.shape[-2:], dtype=bool)
    for i in range(n):
        d = delta[i]
        lo, hi = d.min(), d.max()
        if hi == lo:
            mode[i] = lo
            continue
        norm[i] = (d - lo) / (hi - lo)
        width[i] = (hi - lo) / bins
        q = np.minimum(((d - lo) / width[i]).astype(int), bins - 1)
        counts = np.bincount(q.ravel(), minlength=bins)
        mode[i] = lo + (np.argmax(counts) + 0.5) * width[i]
        fg[i] = (np.abs(d - mode[i]) > width[i]).any(axis=0)
    if single:
        return PerturbStats(norm[0], mode[:1], fg[0], width[:1])
    return PerturbStats(norm, mode, fg, width)


def foreground_iou(stats: PerturbStats, motif_masks: np.ndarray) -> float:
    """IoU between perturbation foreground and the union of ground-truth motif masks."""
    gt = np.asarray(motif_masks).any(axis=0)
    fg = stats.foreground if stats.foreground.ndim == 3 else stats.foreground[None]
    inter = (fg & gt).sum()
    union = (fg | gt).sum()
    return float(inter / union) if union else 1.0
