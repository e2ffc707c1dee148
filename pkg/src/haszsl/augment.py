"""Conventional image augmentations and the semantic-distortion probe.

All resampling is nearest-neighbour. Every stochastic choice is drawn from
the ``numpy.random.Generator`` passed in.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError
from .evaluation import compatibility_scores, per_class_accuracies, predict_from_scores
from .model import ModelParams, forward

KINDS = ("color_jitter", "grayscale", "gaussian_blur", "random_rotate", "random_crop",
         "cutout", "mixup", "cutmix")

# (default strength, max strength)
_RANGES = {
    "color_jitter": (0.2, 1.0),
    "grayscale": (1.0, 1.0),
    "gaussian_blur": (0.5, 10.0),
    "random_rotate": (360.0, 360.0),
    "random_crop": (0.5, 0.95),
    "cutout": (0.5, 1.0),
    "mixup": (1.0, 1.0),
    "cutmix": (1.0, 1.0),
}

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentPolicy:
    """One augmentation kind.

    ``strength`` per kind: color_jitter channel gain spread s (gain ~ U(1-s, 1+s));
    grayscale blend towards luminance; gaussian_blur sigma in pixels;
    random_rotate max angle in degrees; random_crop fraction of the side removed
    (0.5 = half-size crop); cutout side of the zeroed square as a fraction of the
    image side; mixup / cutmix scale of the mixing coefficient drawn from Beta(1, 1).
    """

    kind: str
    strength: float | None = None
    apply_prob: float = 1.0
    name: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown augmentation kind {self.kind!r}; expected one of {KINDS}")
        if self.strength is None:
            object.__setattr__(self, "strength", _RANGES[self.kind][0])
        hi = _RANGES[self.kind][1]
        if not 0.0 <= self.strength <= hi:
            raise ConfigError(f"{self.kind}: strength {self.strength} outside [0, {hi}]")
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ConfigError(f"apply_prob {self.apply_prob} outside [0, 1]")

    @property
    def label(self) -> str:
        return self.name or f"{self.kind}({self.strength:g},p={self.apply_prob:g})"


STANDARD_POLICIES = (
    AugmentPolicy("color_jitter", 0.2, name="ColorJitter0.2"),
    AugmentPolicy("color_jitter", 0.4, name="ColorJitter0.4"),
    AugmentPolicy("grayscale", 1.0, 0.2, name="GrayScale0.2"),
    AugmentPolicy("grayscale", 1.0, 0.4, name="GrayScale0.4"),
    AugmentPolicy("gaussian_blur", 0.5, name="GaussianBlur(L)"),
    AugmentPolicy("gaussian_blur", 2.0, name="GaussianBlur(H)"),
    AugmentPolicy("random_rotate", 360.0, name="RandomRotate"),
    AugmentPolicy("random_crop", 0.5, name="RandomCrop"),
    AugmentPolicy("cutout", 0.5, name="CutOut"),
    AugmentPolicy("mixup", 1.0, name="MixUp"),
    AugmentPolicy("cutmix", 1.0, name="CutMix"),
)


def rotate_nearest(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate a C x H x W image about its centre; uncovered pixels become 0."""
    _, h, w = image.shape
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    # inverse map output -> source
    sy = np.cos(theta) * (yy - cy) + np.sin(theta) * (xx - cx) + cy
    sx = -np.sin(theta) * (yy - cy) + np.cos(theta) * (xx - cx) + cx
    iy, ix = np.rint(sy).astype(int), np.rint(sx).astype(int)
    ok = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    out = np.zeros_like(image)
    out[:, ok] = image[:, iy[ok], ix[ok]]
    return out


def resize_nearest(image: np.ndarray, h: int, w: int) -> np.ndarray:
    _, sh, sw = image.shape
    rows = np.minimum((np.arange(h) * sh) // h, sh - 1)
    cols = np.minimum((np.arange(w) * sw) // w, sw - 1)
    return image[:, rows][:, :, cols]


def _box(rng, h, w, side_h, side_w):
    top = int(rng.integers(0, h - side_h + 1))
    left = int(rng.integers(0, w - side_w + 1))
    return top, left


def apply(policy: AugmentPolicy, image, label, rng: np.random.Generator,
          partner=None, partner_label=None):
    """Augment one C x H x W image.

    Returns ``(image, mixture)`` where ``mixture`` is a list of
    ``(label, weight)`` pairs summing to one. Mixing kinds need ``partner``.
    """
    img = np.asarray(image, dtype=np.float64)
    mixture = [(label, 1.0)]
    if rng.random() >= policy.apply_prob or policy.strength == 0:
        return img.copy(), mixture
    s = policy.strength
    _, h, w = img.shape
    kind = policy.kind
    if kind == "color_jitter":
        gains = rng.uniform(1 - s, 1 + s, size=(img.shape[0], 1, 1))
        out = img * gains
    elif kind == "grayscale":
        gray = np.tensordot(LUMA, img, axes=(0, 0))
        out = (1 - s) * img + s * gray[None]
    elif kind == "gaussian_blur":
        out = gaussian_filter(img, sigma=(0, s, s), mode="nearest")
    elif kind == "random_rotate":
        out = rotate_nearest(img, rng.uniform(0.0, s))
    elif kind == "random_crop":
        ch, cw = max(1, int(round(h * (1 - s)))), max(1, int(round(w * (1 - s))))
        top, left = _box(rng, h, w, ch, cw)
        out = resize_nearest(img[:, top:top + ch, left:left + cw], h, w)
    elif kind == "cutout":
        side = int(round(s * min(h, w)))
        top, left = _box(rng, h, w, side, side)
        out = img.copy()
        out[:, top:top + side, left:left + side] = 0.0
    else:
        if partner is None:
            raise ConfigError(f"{kind} needs a partner image")
        other = np.asarray(partner, dtype=np.float64)
        u = rng.beta(1.0, 1.0)
        if kind == "mixup":
            lam = 1.0 - s * (1.0 - u)
            out = lam * img + (1 - lam) * other
            mixture = [(label, lam), (partner_label, 1.0 - lam)]
        else:
            area = s * (1.0 - u)
            bh, bw = int(round(h * np.sqrt(area))), int(round(w * np.sqrt(area)))
            top, left = _box(rng, h, w, bh, bw)
            out = img.copy()
            out[:, top:top + bh, left:left + bw] = other[:, top:top + bh, left:left + bw]
            frac = bh * bw / float(h * w)
            mixture = [(label, 1.0 - frac), (partner_label, frac)]
    return np.clip(out, 0.0, 1.0), mixture


def cutmix_box(image_a, image_b, top: int, left: int, bh: int, bw: int):
    """Deterministic cut-and-paste; returns the mixed image and the (a, b) label weights."""
    a = np.asarray(image_a, dtype=np.float64).copy()
    a[:, top:top + bh, left:left + bw] = np.asarray(image_b)[:, top:top + bh, left:left + bw]
    _, h, w = a.shape
    frac = bh * bw / float(h * w)
    return a, (1.0 - frac, frac)


def mixup_pair(image_a, image_b, lam: float):
    return lam * np.asarray(image_a) + (1 - lam) * np.asarray(image_b), (lam, 1.0 - lam)


def apply_batch(policy: AugmentPolicy, images, labels, semantics, rng: np.random.Generator):
    """Augment a batch; mixing partners come from a random permutation of the batch.

    Returns ``(images, targets, attrs)`` with label distributions over the rows
    of ``semantics`` and the correspondingly mixed attribute targets.
    """
    images = np.asarray(images)
    n_cls = len(semantics)
    partners = rng.permutation(len(images))
    out = np.empty_like(images, dtype=np.float64)
    targets = np.zeros((len(images), n_cls))
    for i, (img, lab) in enumerate(zip(images, labels)):
        j = partners[i]
        out[i], mix = apply(policy, img, int(lab), rng, images[j], int(labels[j]))
        for lab_k, wgt in mix:
            targets[i, lab_k] += wgt
    return out, targets, targets @ np.asarray(semantics)


def batch_hook(policy: AugmentPolicy, semantics):
    """Adapter for ``trainer.train(augment=...)``; ``semantics`` are the seen-class rows."""
    from .trainer import Batch

    def hook(batch: Batch, rng):
        images, targets, attrs = apply_batch(policy, batch.images, batch.labels, semantics, rng)
        return Batch(images, np.argmax(targets, axis=1), targets, attrs)

    return hook


@dataclass
class DriftReport:
    policy: str
    per_attribute: np.ndarray  # mean |a(clean) - a(aug)| per attribute
    mean_drift: float
    class_acc_delta: dict[int, float]  # augmented minus clean, percent


def distortion_probe(params: ModelParams, images, labels, class_ids, semantics,
                     policy: AugmentPolicy, rng: np.random.Generator) -> DriftReport:
    """Attribute drift of the global head and per-class accuracy change under ``policy``.

    ``labels`` are global class ids, ``semantics`` rows align with ``class_ids``.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    aug = np.empty_like(images)
    partners = rng.permutation(len(images))
    for i in range(len(images)):
        aug[i], _ = apply(policy, images[i], int(labels[i]), rng, images[partners[i]],
                          int(labels[partners[i]]))
    a_clean = forward(images, params, semantics).attr_global.values
    a_aug = forward(aug, params, semantics).attr_global.values
    per_attr = np.abs(a_clean - a_aug).mean(axis=0)
    p_clean = predict_from_scores(compatibility_scores(params, images, semantics), class_ids)
    p_aug = predict_from_scores(compatibility_scores(params, aug, semantics), class_ids)
    acc_c = per_class_accuracies(p_clean, labels, class_ids)
    acc_a = per_class_accuracies(p_aug, labels, class_ids)
    delta = {c: acc_a[c] - acc_c[c] for c in acc_c}
    return DriftReport(policy.label, per_attr, float(per_attr.mean()), delta)
