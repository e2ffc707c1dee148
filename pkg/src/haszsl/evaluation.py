"""ZSL / GZSL inference, per-class accuracy, harmonic mean and calibration."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .adversarial import PerturbConfig, fgsm_step
from .autodiff import Tape
from . import autodiff as ad
from .data import Benchmark, Subset
from .losses import combine, has_components
from .model import ModelParams, forward



def compatibility_scores(params: ModelParams, images, semantics, batch_size: int = 256) -> np.ndarray:
    """``g(f(I))^T V phi(y)`` for every image and every row of ``semantics``."""
    images = np.asarray(images, dtype=np.float64)
    out = [forward(images[i:i + batch_size], params, semantics).class_scores.values
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, len(semantics)))


def predict_from_scores(scores, class_ids, seen_mask=None, mu: float = 0.0) -> np.ndarray:
    """Argmax of ``score - mu * [class is seen]``; ties go to the lowest class id."""
    scores = np.asarray(scores, dtype=np.float64)
    class_ids = np.asarray(class_ids)
    order = np.argsort(class_ids, kind="stable")
    adj = scores[:, order]
    if seen_mask is not None and mu:
        adj = adj - mu * np.asarray(seen_mask, dtype=np.float64)[order]
    return class_ids[order][np.argmax(adj, axis=1)]


def zsl_predict(params: ModelParams, images, unseen_semantics, unseen_ids) -> np.ndarray:
    scores = compatibility_scores(params, images, unseen_semantics)
    return predict_from_scores(scores, unseen_ids)


def gzsl_predict(params: ModelParams, images, semantics, class_ids, seen_mask, mu: float) -> np.ndarray:
    scores = compatibility_scores(params, images, semantics)
    return predict_from_scores(scores, class_ids, seen_mask, mu)


def per_class_accuracies(predictions, labels, classes) -> dict[int, float]:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    accs = {}
    for c in classes:
        sel = labels == c
        if not sel.any():
            warnings.warn(f"class {c} has no samples; excluded from the average", stacklevel=3)
            continue
        accs[int(c)] = 100.0 * float(np.mean(predictions[sel] == c))
    return accs


def per_class_top1(predictions, labels, classes) -> float:
    """Unweighted mean over classes of within-class top-1 accuracy, in percent."""
    accs = per_class_accuracies(predictions, labels, classes)
    return float(np.mean(list(accs.values()))) if accs else 0.0


def harmonic_mean(s: float, u: float) -> float:
    if s < 0 or u < 0:
        raise ValueError("accuracies must be nonnegative")
    return 0.0 if s + u == 0 else 2.0 * s * u / (s + u)


@dataclass
class EvalReport:
    T1_unseen: float
    acc_seen: float
    acc_unseen: float
    harmonic: float
    mu: float
    per_class: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _ScoredSet:
    scores: np.ndarray  # over all classes
    labels: np.ndarray


def _score_all(params, sub: Subset, semantics) -> _ScoredSet:
    return _ScoredSet(compatibility_scores(params, sub.images, semantics), sub.labels)


def gzsl_accuracies(seen: _ScoredSet, unseen: _ScoredSet, class_ids, seen_mask, mu: float):
    seen_ids = np.asarray(class_ids)[np.asarray(seen_mask, dtype=bool)]
    unseen_ids = np.asarray(class_ids)[~np.asarray(seen_mask, dtype=bool)]
    ps = predict_from_scores(seen.scores, class_ids, seen_mask, mu)
    pu = predict_from_scores(unseen.scores, class_ids, seen_mask, mu)
    s = per_class_top1(ps, seen.labels, seen_ids)
    u = per_class_top1(pu, unseen.labels, unseen_ids)
    return s, u, harmonic_mean(s, u), ps, pu


def calibration_curve(seen: _ScoredSet, unseen: _ScoredSet, class_ids, seen_mask, mu_grid):
    return [(float(mu),) + gzsl_accuracies(seen, unseen, class_ids, seen_mask, mu)[:3]
            for mu in mu_grid]


def breakpoint_mu_grid(scores, seen_mask) -> np.ndarray:
    """Every calibration factor at which some prediction switches from seen to unseen.

    H(mu) is piecewise constant, so evaluating 0 and just above each positive
    seen-minus-unseen score gap covers every distinct value of the curve.
    """
    scores = np.asarray(scores, dtype=np.float64)
    seen_mask = np.asarray(seen_mask, dtype=bool)
    gaps = scores[:, seen_mask].max(axis=1) - scores[:, ~seen_mask].max(axis=1)
    gaps = gaps[gaps >= 0]
    return np.unique(np.concatenate([[0.0], gaps + 1e-9 * (1.0 + np.abs(gaps))]))


def calibration_sweep(params: ModelParams, val_seen: Subset, val_unseen: Subset, semantics,
                      class_ids, seen_mask, mu_grid=None):
    """Harmonic mean over a grid of calibration factors.

    Returns ``(best_mu, curve)`` where ``curve`` rows are ``(mu, S, U, H)``
    and ties in H resolve to the smallest mu. Without an explicit grid the
    exact breakpoints of the validation curve are used.
    """
    seen = _score_all(params, val_seen, semantics)
    unseen = _score_all(params, val_unseen, semantics)
    if mu_grid is None:
        mu_grid = breakpoint_mu_grid(np.concatenate([seen.scores, unseen.scores]), seen_mask)
    if len(mu_grid) == 0:
        raise ValueError("mu grid is empty")
    curve = calibration_curve(seen, unseen, class_ids, seen_mask, mu_grid)
    best = max(curve, key=lambda r: (r[3], -r[0]))
    return best[0], curve


def evaluate(params: ModelParams, bench: Benchmark, mu: float | None = None,
             mu_grid=None) -> EvalReport:
    """Conventional ZSL accuracy plus GZSL S/U/H at ``mu`` (swept on validation if None)."""
    ds = bench.dataset
    semantics = ds.semantics
    class_ids = np.array([c.class_id for c in ds.classes])
    seen_mask = np.array([c.split == "seen" for c in ds.classes])
    if mu is None:
        mu, _ = calibration_sweep(params, bench.val_seen, bench.val_unseen, semantics,
                                  class_ids, seen_mask, mu_grid)
    test_u = bench.test_unseen
    t1_pred = predict_from_scores(compatibility_scores(params, test_u.images, test_u.semantics),
                                  test_u.class_ids)
    t1 = per_class_top1(t1_pred, test_u.labels, test_u.class_ids)
    seen = _score_all(params, bench.test_seen, semantics)
    unseen = _score_all(params, test_u, semantics)
    s, u, h, ps, pu = gzsl_accuracies(seen, unseen, class_ids, seen_mask, mu)
    per_class = {}
    for cid, acc in per_class_accuracies(ps, seen.labels, class_ids[seen_mask]).items():
        per_class[str(cid)] = acc
    for cid, acc in per_class_accuracies(pu, unseen.labels, class_ids[~seen_mask]).items():
        per_class[str(cid)] = acc
    return EvalReport(t1, s, u, h, float(mu), per_class)


# ----------------------------------------------------------------------------
# feature drift under perturbation

@dataclass
class DriftTrace:
    features: np.ndarray  # (T+1) x N x C, global features of I_adv_t
    projected: np.ndarray  # (T+1) x N x 2
    max_drift: np.ndarray  # N, max_t ||g_t - g_0||


def pca_basis(x: np.ndarray, n_components: int = 2) -> tuple[np.ndarray, np.ndarray]:
    centre = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - centre, full_matrices=False)
    basis = vt[:n_components]
    # deterministic orientation: largest-magnitude loading positive
    signs = np.sign(basis[np.arange(len(basis)), np.argmax(np.abs(basis), axis=1)])
    signs[signs == 0] = 1.0
    return centre, basis * signs[:, None]


def drift_trace(params: ModelParams, images, labels, semantics, cfg: PerturbConfig) -> DriftTrace:
    """Global features along the adversarial trajectory, projected on the clean top-2 PCs."""
    clean = np.asarray(images, dtype=np.float64)
    clean_feat = forward(clean, params, semantics).global_feat
    feats = [clean_feat.values]
    adv = clean.copy()
    direction = -1.0 if cfg.paper_literal_signs else 1.0
    for _ in range(cfg.steps):
        tape = Tape()
        x = tape.leaf(adv)
        comps = has_components(forward(x, params, semantics), labels, None, clean_feat,
                               cfg.paper_literal_signs)
        grad = tape.backward(ad.sum_(combine(comps, cfg.weights, cfg.cls_weight)))[x]
        adv = fgsm_step(adv, direction * grad, cfg.epsilon, cfg.clamp_lo, cfg.clamp_hi)
        feats.append(forward(adv, params, semantics).global_feat.values)
    features = np.stack(feats)
    centre, basis = pca_basis(features[0])
    projected = (features - centre) @ basis.T
    max_drift = np.linalg.norm(features - features[0], axis=-1).max(axis=0)
    return DriftTrace(features, projected, max_drift)
