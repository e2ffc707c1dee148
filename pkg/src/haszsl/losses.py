"""Scalar objectives for standard ZSL training and adversarial generation.

Every loss returns one value per sample: shape ``()`` for a single sample and
``(N,)`` for a batch. Callers reduce with ``mean``/``sum``.

Sign convention for the adversarial objective: ``div_loss`` is LARGER when
attention maps are spatially uniform and weak, and the generator descends

    L_HAS = cls - lambda1 * rob + lambda2 * rel - lambda3 * div

which simultaneously keeps the label, raises class entropy, limits feature
drift, flattens attention and suppresses its magnitude.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .model import ForwardOutputs, spatial_softmax


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.0  # robustness (class entropy)
    lambda2: float = 0.0  # reliability (feature drift)
    lambda3: float = 0.0  # diversity (attention)

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be a finite value >= 0, got {v}")


def _one_hot(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise IndexError(f"labels must be integers, got {labels.dtype}")
    if np.any(labels < 0) or np.any(labels >= n):
        raise IndexError(f"label out of range for {n} classes: {labels}")
    return np.eye(n)[labels]


def cls_loss(outputs: ForwardOutputs, label) -> Tensor:
    """Cross-entropy ``-log softmax(class_scores)[label]``."""
    scores = outputs.class_scores
    return soft_cls_loss(outputs, _one_hot(label, scores.shape[-1]))


def soft_cls_loss(outputs: ForwardOutputs, target) -> Tensor:
    """Cross-entropy against a label distribution (label mixtures from mixup/cutmix)."""
    logp = ad.log_softmax(outputs.class_scores)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logp.shape:
        raise DimensionError(f"target {target.shape} does not match scores {logp.shape}")
    return -ad.sum_(logp * target, axis=-1)


def loc_loss(outputs: ForwardOutputs, phi) -> Tensor:
    """Squared L2 distance between max-pooled attention responses and ``phi``."""
    a = outputs.attr_local
    phi = ad.as_tensor(phi)
    if phi.shape != a.shape:
        raise DimensionError(f"loc_loss: attr_local {a.shape} vs phi {phi.shape}")
    return ad.sum_(ad.square(a - phi), axis=-1)


def rob_loss(outputs: ForwardOutputs) -> Tensor:
    """Entropy of the class posterior."""
    return ad.entropy(ad.softmax(outputs.class_scores))


def rel_loss(clean_feat, adv_feat) -> Tensor:
    """Squared L2 drift of global features; ``clean_feat`` is held constant."""
    clean = ad.detach(clean_feat)
    adv = ad.as_tensor(adv_feat)
    if clean.shape != adv.shape:
        raise DimensionError(f"rel_loss: {clean.shape} vs {adv.shape}")
    return ad.sum_(ad.square(adv - clean), axis=-1)


def _map_terms(attn_maps) -> tuple[Tensor, Tensor]:
    h = ad.as_tensor(attn_maps)
    if h.ndim not in (3, 4):
        raise DimensionError(f"attention maps must be (N) x K x H x W, got {h.shape}")
    shape = h.shape
    flat_shape = shape[:-2] + (shape[-2] * shape[-1],)
    ent = ad.entropy(ad.reshape(spatial_softmax(h), flat_shape))  # (N) x K
    mag = ad.sum_(ad.square(ad.reshape(h, flat_shape)), axis=-1)  # (N) x K
    return ent, mag


def div_loss(attn_maps) -> Tensor:
    """``sum_k [ H(spatial_softmax(h_k)) - ||h_k||^2 ]``: high when maps are flat and weak."""
    ent, mag = _map_terms(attn_maps)
    return ad.sum_(ent - mag, axis=-1)


def div_loss_printed(attn_maps) -> Tensor:
    """Literal reading ``sum_k ||h_k||^2 - h_k log h_k`` (entropy on normalized maps)."""
    ent, mag = _map_terms(attn_maps)
    return ad.sum_(mag + ent, axis=-1)


def has_components(outputs_adv: ForwardOutputs, label, phi, clean_feat,
                   paper_literal_signs: bool = False) -> dict[str, Tensor]:
    div = div_loss_printed if paper_literal_signs else div_loss
    return {
        "cls": cls_loss(outputs_adv, label),
        "rob": rob_loss(outputs_adv),
        "rel": rel_loss(clean_feat, outputs_adv.global_feat),
        "div": div(outputs_adv.attn_maps),
    }


def combine(components: dict[str, Tensor], w: LossWeights, cls_weight: float = 1.0) -> Tensor:
    total = ad.scale(components["cls"], cls_weight)
    if w.lambda1:
        total = total - ad.scale(components["rob"], w.lambda1)
    if w.lambda2:
        total = total + ad.scale(components["rel"], w.lambda2)
    if w.lambda3:
        total = total - ad.scale(components["div"], w.lambda3)
    return total


def has_objective(outputs_adv: ForwardOutputs, label, phi, clean_feat, w: LossWeights,
                  cls_weight: float = 1.0, paper_literal_signs: bool = False) -> Tensor:
    """``cls - lambda1*rob + lambda2*rel - lambda3*div`` per sample.

    ``phi`` is accepted for interface symmetry with the other losses; the
    attribute target enters through the class label. ``cls_weight`` exists so
    tests can isolate the non-classification terms.
    """
    comps = has_components(outputs_adv, label, phi, clean_feat, paper_literal_signs)
    return combine(comps, w, cls_weight)
