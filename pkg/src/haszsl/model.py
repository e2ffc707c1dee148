"""Attribute-prototype ZSL model: conv backbone, global attribute head, attention head."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import DimensionError, FormatError, UnsupportedVersionError


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    hidden_channels: int = 16
    channels: int = 32
    n_attributes: int = 8
    image_size: int = 16
    kernel_size: int = 3

    def __post_init__(self):
        for name in ("in_channels", "hidden_channels", "channels", "n_attributes", "image_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.image_size % 2:
            raise ValueError("image_size must be even (one 2x downsample)")

    @property
    def feature_size(self) -> int:
        return self.image_size // 2


@dataclass
class ModelParams:
    """Backbone conv kernels plus the projection ``V`` and attention kernel ``CV`` (both C x K).

    Fields hold numpy arrays, or tape leaves when obtained through :meth:`on`.
    """

    backbone: list
    V: object
    CV: object
    seed: int | None = None

    def names(self) -> list[str]:
        return [f"backbone.{i}" for i in range(len(self.backbone))] + ["V", "CV"]

    def as_dict(self) -> dict[str, np.ndarray]:
        arrays = list(self.backbone) + [self.V, self.CV]
        return {n: (a.values if isinstance(a, Tensor) else a) for n, a in zip(self.names(), arrays)}

    @classmethod
    def from_dict(cls, d: dict[str, np.ndarray], seed: int | None = None) -> "ModelParams":
        n_layers = sum(1 for k in d if k.startswith("backbone."))
        backbone = [np.asarray(d[f"backbone.{i}"], dtype=np.float64) for i in range(n_layers)]
        return cls(backbone, np.asarray(d["V"], dtype=np.float64),
                   np.asarray(d["CV"], dtype=np.float64), seed)

    def on(self, tape: Tape) -> "ModelParams":
        """Copy whose arrays are leaves of ``tape`` (for parameter gradients)."""
        return ModelParams([tape.leaf(w) for w in self.backbone], tape.leaf(self.V),
                           tape.leaf(self.CV), self.seed)

    def leaf_ids(self) -> dict[str, int]:
        arrays = list(self.backbone) + [self.V, self.CV]
        return {n: a.node_id for n, a in zip(self.names(), arrays)}

    def copy(self) -> "ModelParams":
        return ModelParams.from_dict({k: v.copy() for k, v in self.as_dict().items()}, self.seed)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.as_dict().values())


def init_params(seed: int, cfg: ModelConfig | None = None, *, channels: int | None = None,
                n_attributes: int | None = None) -> ModelParams:
    """Zero-mean uniform init in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``, deterministic in ``seed``."""
    cfg = cfg or ModelConfig()
    if channels is not None or n_attributes is not None:
        cfg = ModelConfig(cfg.in_channels, cfg.hidden_channels, channels or cfg.channels,
                          n_attributes or cfg.n_attributes, cfg.image_size, cfg.kernel_size)
    rng = np.random.default_rng(seed)
    k = cfg.kernel_size

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    plan = [cfg.in_channels, cfg.hidden_channels, cfg.channels]
    backbone = [uniform((cout, cin, k, k), cin * k * k) for cin, cout in zip(plan[:-1], plan[1:])]
    V = uniform((cfg.channels, cfg.n_attributes), cfg.channels)
    CV = uniform((cfg.channels, cfg.n_attributes), cfg.channels)
    return ModelParams(backbone, V, CV, seed)


@dataclass
class ForwardOutputs:
    featmaps: Tensor     # x = f(I), (N) x C x H x W
    global_feat: Tensor  # g(x), (N) x C
    attr_global: Tensor  # g(x)^T V, (N) x K
    attn_maps: Tensor    # h(x), (N) x K x H x W
    attr_local: Tensor   # max-pooled h(x), (N) x K
    class_scores: Tensor  # (N) x n_classes


def backbone_forward(images, params: ModelParams) -> Tensor:
    """conv -> relu -> 2x2 avg pool -> conv -> relu, for each backbone layer pair."""
    x = ad.as_tensor(images)
    squeeze = x.ndim == 3
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    for i, w in enumerate(params.backbone):
        x = ad.relu(ad.conv2d(x, w))
        if i == 0:
            x = ad.avg_pool2(x)
    if squeeze:
        x = ad.reshape(x, x.shape[1:])
    return x


def forward(images, params: ModelParams, semantics,
            backbone: Callable[[object, ModelParams], Tensor] = backbone_forward) -> ForwardOutputs:
    """Run the model on one image (C x H x W) or a batch (N x C x H x W).

    ``semantics`` is the (n_classes x K) matrix whose rows are the class
    attribute vectors; ``class_scores`` holds the compatibilities
    ``g(x)^T V phi(y)``.
    """
    sem = ad.as_tensor(semantics)
    V = ad.as_tensor(params.V)
    if sem.ndim != 2 or sem.shape[1] != V.shape[1]:
        raise DimensionError(f"semantics {sem.shape} do not match V {V.shape}")
    feat = backbone(images, params)
    if feat.shape[-3] != V.shape[0]:
        raise DimensionError(f"backbone channels {feat.shape[-3]} != V rows {V.shape[0]}")
    g = ad.avg_pool_spatial(feat)
    g2 = g if g.ndim == 2 else ad.reshape(g, (1, g.shape[0]))
    a_glob = ad.matmul(g2, V)
    scores = ad.matmul(a_glob, _transpose_const(sem))
    if g.ndim == 1:
        a_glob = ad.reshape(a_glob, a_glob.shape[1:])
        scores = ad.reshape(scores, scores.shape[1:])
    attn = ad.conv1x1(feat, params.CV)
    a_loc = ad.max_pool_spatial(attn)
    return ForwardOutputs(feat, g, a_glob, attn, a_loc, scores)


def _transpose_const(t: Tensor) -> Tensor:
    if t.tape is None:
        return Tensor(t.values.T)
    vals = t.values.T.copy()
    return ad._emit("transpose", vals, (t,), lambda g: (g.T,))


def spatial_softmax(attn_maps) -> Tensor:
    """Softmax over the H*W cells of each attention map."""
    a = ad.as_tensor(attn_maps)
    shape = a.shape
    flat = ad.reshape(a, shape[:-2] + (shape[-2] * shape[-1],))
    return ad.reshape(ad.softmax(flat), shape)


# ----------------------------------------------------------------------------
# checkpoint container: MAGIC | u32 header length | JSON header | float64 LE arrays

MAGIC = b"HASZCKPT"
CHECKPOINT_VERSION = 1


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def write_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    header = {
        "version": CHECKPOINT_VERSION,
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
        "meta": meta or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4 or not data.startswith(MAGIC):
        raise FormatError(f"{path}: not a checkpoint container")
    (hlen,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(data[start:start + hlen])
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"{path}: checkpoint version {header.get('version')}")
    off = start + hlen
    arrays = {}
    for spec in header["arrays"]:
        n = int(np.prod(spec["shape"], dtype=np.int64))
        if off + 8 * n > len(data):
            raise FormatError(f"{path}: truncated payload at array {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(data, dtype="<f8", count=n, offset=off) \
            .reshape(spec["shape"]).astype(np.float64)
        off += 8 * n
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return arrays, header["meta"]


def save_params(path, params: ModelParams, config: dict | None = None) -> None:
    meta = {"seed": params.seed, "config_hash": config_hash(config or {})}
    write_container(path, params.as_dict(), meta)


def load_params(path) -> ModelParams:
    arrays, meta = read_container(path)
    return ModelParams.from_dict(arrays, meta.get("seed"))
