"""Synthetic attribute-grounded image benchmark.

Each attribute is a colored square motif at a fixed grid cell; a class is a
vector of motif intensities. Images render every motif at ``phi_k * color``
on a black background plus clipped Gaussian pixel noise. Ground-truth motif
masks make attribute localization directly checkable.
"""
from __future__ import annotations

import colorsys
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, UnsupportedVersionError

SCHEMA_VERSION = 1
LOW, HIGH, JITTER = 0.1, 0.9, 0.05


@dataclass(frozen=True)
class DataConfig:
    n_attributes: int = 8
    n_seen: int = 12
    n_unseen: int = 4
    per_class: int = 40
    image_size: int = 16
    patch_size: int = 4
    noise_sigma: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_attributes, self.n_seen, self.n_unseen, self.per_class) < 1:
            raise ConfigError("attribute and class counts must be >= 1")
        if self.patch_size < 1 or self.image_size < self.patch_size:
            raise ConfigError("patch_size must be in [1, image_size]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.n_attributes > self.grid ** 2:
            raise ConfigError(f"{self.n_attributes} attributes do not fit a "
                              f"{self.grid}x{self.grid} grid of {self.patch_size}px cells")
        if 2 ** self.n_attributes < self.n_seen + self.n_unseen:
            raise ConfigError("too many classes for distinct binary attribute patterns")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size


@dataclass(frozen=True)
class AttributeSpec:
    attr_id: int
    location: tuple[int, int]  # grid (row, col)
    color: tuple[float, float, float]
    size: int


@dataclass(frozen=True)
class ClassDef:
    class_id: int
    phi: tuple[float, ...]
    split: str  # "seen" | "unseen"


@dataclass
class SyntheticDataset:
    config: DataConfig
    attributes: list[AttributeSpec]
    classes: list[ClassDef]
    images: np.ndarray  # N x 3 x S x S, float32-representable values in [0, 1]
    labels: np.ndarray  # N class ids
    masks: np.ndarray = field(repr=False)  # K x S x S bool, shared by all images

    @property
    def semantics(self) -> np.ndarray:
        return np.array([c.phi for c in self.classes], dtype=np.float64)

    @property
    def seen_ids(self) -> np.ndarray:
        return np.array([c.class_id for c in self.classes if c.split == "seen"])

    @property
    def unseen_ids(self) -> np.ndarray:
        return np.array([c.class_id for c in self.classes if c.split == "unseen"])

    def cell_of(self, k: int) -> tuple[int, int]:
        return self.attributes[k].location

    def dataset_hash(self) -> str:
        h = hashlib.sha256(_canonical_json(self).encode())
        h.update(_image_bytes(self.images))
        h.update(_mask_bytes(self.masks))
        return h.hexdigest()


@dataclass
class Subset:
    """Images of a set of classes together with their attribute targets."""

    images: np.ndarray
    labels: np.ndarray  # global class ids
    class_ids: np.ndarray  # candidate classes, ascending
    semantics: np.ndarray  # rows aligned with class_ids

    def __len__(self):
        return len(self.labels)

    @property
    def local_labels(self) -> np.ndarray:
        """Labels re-indexed into ``class_ids``."""
        return np.searchsorted(self.class_ids, self.labels)

    @property
    def attrs(self) -> np.ndarray:
        return self.semantics[self.local_labels]

    def take(self, idx) -> "Subset":
        return Subset(self.images[idx], self.labels[idx], self.class_ids, self.semantics)


def _palette(k: int) -> list[tuple[float, float, float]]:
    return [tuple(round(c, 6) for c in colorsys.hsv_to_rgb(i / k, 1.0, 1.0)) for i in range(k)]


def _sample_phis(cfg: DataConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.n_seen + cfg.n_unseen
    for _ in range(1000):
        bits = rng.integers(0, 2, size=(n, cfg.n_attributes))
        if len({tuple(b) for b in bits}) < n:
            continue
        seen_bits = bits[:cfg.n_seen]
        # unseen classes must interpolate: both levels present among seen per attribute
        if cfg.n_seen > 1 and not (seen_bits.min(axis=0) == 0).all():
            continue
        if cfg.n_seen > 1 and not (seen_bits.max(axis=0) == 1).all():
            continue
        break
    else:
        raise ConfigError("could not sample distinct class attribute patterns")
    phi = np.where(bits == 1, HIGH, LOW) + rng.uniform(-JITTER, JITTER, size=bits.shape)
    lo = phi[:cfg.n_seen].min(axis=0)
    hi = phi[:cfg.n_seen].max(axis=0)
    phi[cfg.n_seen:] = np.clip(phi[cfg.n_seen:], lo, hi)
    return np.round(phi, 6)


def generate_dataset(cfg: DataConfig | None = None) -> SyntheticDataset:
    cfg = cfg or DataConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    s, p, K = cfg.image_size, cfg.patch_size, cfg.n_attributes
    cells = rng.permutation(cfg.grid ** 2)[:K]
    colors = _palette(K)
    attributes = [AttributeSpec(k, (int(c // cfg.grid), int(c % cfg.grid)), colors[k], p)
                  for k, c in enumerate(cells)]
    masks = np.zeros((K, s, s), dtype=bool)
    for a in attributes:
        r, c = a.location
        masks[a.attr_id, r * p:(r + 1) * p, c * p:(c + 1) * p] = True

    phis = _sample_phis(cfg, rng)
    classes = [ClassDef(i, tuple(float(v) for v in phis[i]), "seen" if i < cfg.n_seen else "unseen")
               for i in range(len(phis))]

    labels = np.repeat(np.arange(len(classes)), cfg.per_class)
    clean = np.zeros((len(classes), 3, s, s))
    col = np.array(colors)  # K x 3
    for cls in classes:
        for k in range(K):
            clean[cls.class_id][:, masks[k]] = (cls.phi[k] * col[k])[:, None]
    images = clean[labels] + rng.normal(0.0, cfg.noise_sigma, size=(len(labels), 3, s, s)) \
        if cfg.noise_sigma > 0 else clean[labels].copy()
    images = np.clip(images, 0.0, 1.0).astype(np.float32).astype(np.float64)
    return SyntheticDataset(cfg, attributes, classes, images, labels, masks)


def split(ds: SyntheticDataset) -> tuple[Subset, Subset]:
    """Partition images by class split into (seen, unseen) subsets."""
    out = []
    for ids in (ds.seen_ids, ds.unseen_ids):
        sel = np.isin(ds.labels, ids)
        out.append(Subset(ds.images[sel], ds.labels[sel], ids, ds.semantics[ids]))
    return out[0], out[1]


def holdout(sub: Subset, fractions: tuple[float, ...], seed: int) -> list[Subset]:
    """Stratified per-class split into ``len(fractions) + 1`` parts; the last part takes the rest."""
    rng = np.random.default_rng([seed, 7919])
    parts: list[list[int]] = [[] for _ in range(len(fractions) + 1)]
    for cid in sub.class_ids:
        idx = rng.permutation(np.flatnonzero(sub.labels == cid))
        start = 0
        for j, f in enumerate(fractions):
            n = int(round(f * len(idx)))
            parts[j].extend(idx[start:start + n])
            start += n
        parts[-1].extend(idx[start:])
    return [sub.take(np.sort(np.array(p, dtype=int))) for p in parts]


@dataclass
class Benchmark:
    """Train / validation / test partitions used by the experiment runners.

    Seen images split 70/10/20 into train / calibration / test; unseen images
    split 10/90 into calibration / test. Unseen images never reach training.
    """

    dataset: SyntheticDataset
    train: Subset
    val_seen: Subset
    test_seen: Subset
    val_unseen: Subset
    test_unseen: Subset


def make_benchmark(ds: SyntheticDataset, seed: int = 0) -> Benchmark:
    seen, unseen = split(ds)
    val_s, test_s, train = holdout(seen, (0.1, 0.2), seed)
    val_u, test_u = holdout(unseen, (0.1,), seed)
    return Benchmark(ds, train, val_s, test_s, val_u, test_u)


# ----------------------------------------------------------------------------
# on-disk format

def _canonical_json(ds: SyntheticDataset) -> str:
    body = {
        "config": asdict(ds.config),
        "attributes": [asdict(a) for a in ds.attributes],
        "classes": [asdict(c) for c in ds.classes],
        "labels": [int(v) for v in ds.labels],
    }
    return json.dumps(body, sort_keys=True, separators=(",", ":"))


def _image_bytes(images: np.ndarray) -> bytes:
    return np.ascontiguousarray(images, dtype="<f4").tobytes()


def _mask_bytes(masks: np.ndarray) -> bytes:
    return np.ascontiguousarray(masks, dtype=np.uint8).tobytes()


def save(ds: SyntheticDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    img, msk = _image_bytes(ds.images), _mask_bytes(ds.masks)
    manifest = json.loads(_canonical_json(ds))
    manifest.update({
        "schema_version": SCHEMA_VERSION,
        "seed": ds.config.seed,
        "payload_sha256": hashlib.sha256(img + msk).hexdigest(),
        "dataset_sha256": ds.dataset_hash(),
        "image_shape": list(ds.images.shape),
    })
    (path / "images.bin").write_bytes(img)
    (path / "masks.bin").write_bytes(msk)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load(path) -> SyntheticDataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        img = (path / "images.bin").read_bytes()
        msk = (path / "masks.bin").read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"{path}: missing dataset file {exc.filename}") from exc
    except ValueError as exc:
        raise FormatError(f"{path}: manifest is not valid JSON") from exc
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise UnsupportedVersionError(f"{path}: dataset schema version {version} "
                                      f"(supported: {SCHEMA_VERSION})")
    try:
        cfg = DataConfig(**manifest["config"])
        shape = tuple(manifest["image_shape"])
        attributes = [AttributeSpec(a["attr_id"], tuple(a["location"]), tuple(a["color"]), a["size"])
                      for a in manifest["attributes"]]
        classes = [ClassDef(c["class_id"], tuple(c["phi"]), c["split"]) for c in manifest["classes"]]
        labels = np.array(manifest["labels"], dtype=np.int64)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from exc
    k, s = cfg.n_attributes, cfg.image_size
    if len(img) != 4 * int(np.prod(shape)) or len(msk) != k * s * s:
        raise FormatError(f"{path}: payload size does not match manifest (truncated?)")
    if hashlib.sha256(img + msk).hexdigest() != manifest.get("payload_sha256"):
        raise FormatError(f"{path}: payload hash mismatch")
    images = np.frombuffer(img, dtype="<f4").reshape(shape).astype(np.float64)
    masks = np.frombuffer(msk, dtype=np.uint8).reshape(k, s, s).astype(bool)
    ds = SyntheticDataset(cfg, attributes, classes, images, labels, masks)
    if ds.dataset_hash() != manifest.get("dataset_sha256"):
        raise FormatError(f"{path}: dataset hash mismatch")
    return ds
