"""Siamese multi-zoom embedder: one shared CNN per zoom, element-wise max across zooms."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .canvas import DEFAULT_CROP, DEFAULT_ZOOMS, ZoomStack

INK_CONVENTION = "0=ink,1=background"


class ShapeError(ValueError):
    pass


class AlexNetBackbone(nn.Module):
    """Five conv layers with ReLU and AlexNet's pooling, fc6/fc7 and a d-dim head.

    ``width`` scales every channel count; ``width=1`` is the standard
    64-192-384-256-256 / 4096-4096 layout.
    """

    def __init__(self, d: int = 128, crop_size: int = DEFAULT_CROP, width: float = 1.0,
                 dropout: float = 0.5, in_channels: int = 3):
        super().__init__()
        c = [max(4, int(round(k * width))) for k in (64, 192, 384, 256, 256)]
        fc = max(16, int(round(4096 * width)))
        self.in_channels = in_channels
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, c[0], kernel_size=11, stride=4, padding=2),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(kernel_size=3, stride=2),
            nn.Conv2d(c[0], c[1], kernel_size=5, padding=2),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(kernel_size=3, stride=2),
            nn.Conv2d(c[1], c[2], kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c[2], c[3], kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c[3], c[4], kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(kernel_size=3, stride=2),
        )
        # torchvision's 6x6 adaptive pool only at full resolution; small crops flatten as-is
        self.pool = nn.AdaptiveAvgPool2d((6, 6)) if crop_size >= 224 else nn.Identity()
        with torch.no_grad():
            n_flat = self.pool(self.features(torch.zeros(1, in_channels, crop_size, crop_size))).numel()
        self.classifier = nn.Sequential(
            nn.Dropout(p=dropout),
            nn.Linear(n_flat, fc),  # fc6
            nn.ReLU(inplace=True),
            nn.Linear(fc, fc),  # fc7
            nn.ReLU(inplace=True),
            nn.Linear(fc, d),
        )

    def forward(self, x):
        x = self.pool(self.features(x))
        return self.classifier(torch.flatten(x, 1))


class TinyBackbone(nn.Module):
    """Two conv layers and a linear head; for gradient checks and fast tests."""

    def __init__(self, d: int = 8, crop_size: int = 16, width: float = 1.0, in_channels: int = 3, **_):
        super().__init__()
        c = max(2, int(round(4 * width)))
        self.in_channels = in_channels
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, c, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, stride=2, padding=1), nn.ReLU(),
        )
        with torch.no_grad():
            n_flat = self.features(torch.zeros(1, in_channels, crop_size, crop_size)).numel()
        self.head = nn.Linear(n_flat, d)

    def forward(self, x):
        return self.head(torch.flatten(self.features(x), 1))


BACKBONES = {"alexnet": AlexNetBackbone, "tiny": TinyBackbone}


def register_backbone(name: str, factory) -> None:
    BACKBONES[name] = factory


@dataclass
class EmbedderSpec:
    backbone_id: str = "alexnet"
    d: int = 128
    crop_size: int = DEFAULT_CROP
    zoom_fractions: tuple = DEFAULT_ZOOMS
    width: float = 1.0
    ink_convention: str = INK_CONVENTION
    normalize: bool = False
    backbone_kwargs: dict = field(default_factory=dict)


class EmbedderModel(nn.Module):
    """Maps zoom stacks (n, z, h, w) to descriptors (n, d)."""

    def __init__(self, spec: EmbedderSpec | None = None, **kw):
        super().__init__()
        spec = spec or EmbedderSpec(**kw)
        spec.zoom_fractions = tuple(float(f) for f in spec.zoom_fractions)
        if spec.backbone_id not in BACKBONES:
            raise KeyError(f"unknown backbone {spec.backbone_id!r}; registered: {sorted(BACKBONES)}")
        self.spec = spec
        self.backbone = BACKBONES[spec.backbone_id](d=spec.d, crop_size=spec.crop_size, width=spec.width,
                                                    **spec.backbone_kwargs)

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def crop_size(self) -> int:
        return self.spec.crop_size

    @property
    def zoom_fractions(self) -> tuple:
        return self.spec.zoom_fractions

    def _prepare(self, crops: torch.Tensor) -> torch.Tensor:
        if crops.shape[-1] != self.crop_size or crops.shape[-2] != self.crop_size:
            raise ShapeError(f"crops are {tuple(crops.shape[-2:])}, model expects "
                             f"{self.crop_size}x{self.crop_size}")
        # ink as positive signal; grayscale replicated to the backbone's channels
        x = (1.0 - crops).unsqueeze(-3)
        return x.expand(*x.shape[:-3], self.backbone.in_channels, *x.shape[-2:])

    def views(self, crops: torch.Tensor) -> torch.Tensor:
        """Per-zoom descriptors, shape (n, z, d)."""
        n, z = crops.shape[:2]
        x = self._prepare(crops).reshape(n * z, self.backbone.in_channels, self.crop_size, self.crop_size)
        return self.backbone(x).reshape(n, z, self.d)

    def forward(self, crops: torch.Tensor) -> torch.Tensor:
        out = aggregate_views(self.views(crops))
        if self.spec.normalize:
            out = torch.nn.functional.normalize(out, dim=-1)
        return out


def aggregate_views(per_view):
    """Element-wise maximum across zoom descriptors.

    Accepts a list of equal-length vectors or an array/tensor whose
    second-to-last axis indexes the zooms.  Tensors stay differentiable.
    """
    if isinstance(per_view, torch.Tensor):
        if per_view.ndim < 2:
            raise ShapeError("expected (..., n_views, d)")
        return torch.amax(per_view, dim=-2)
    if isinstance(per_view, (list, tuple)):
        if not per_view:
            raise ShapeError("aggregate_views needs at least one descriptor")
        if isinstance(per_view[0], torch.Tensor):
            return aggregate_views(torch.stack(list(per_view), dim=-2))
        dims = {np.asarray(v).shape for v in per_view}
        if len(dims) != 1:
            raise ShapeError(f"descriptor dimensions differ: {sorted(dims)}")
        per_view = np.stack([np.asarray(v) for v in per_view], axis=-2)
    arr = np.asarray(per_view)
    if arr.ndim < 2 or arr.shape[-2] == 0:
        raise ShapeError("expected (..., n_views, d)")
    return arr.max(axis=-2)


def distance(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"descriptor shapes differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def _as_batch(stacks) -> np.ndarray:
    if isinstance(stacks, ZoomStack):
        return stacks.crops[None]
    if isinstance(stacks, np.ndarray):
        return stacks if stacks.ndim == 4 else stacks[None]
    return np.stack([s.crops for s in stacks])


@torch.no_grad()
def embed_crops(model: EmbedderModel, crops: np.ndarray, batch: int = 256, per_view: bool = False) -> np.ndarray:
    """Inference-mode descriptors for a crop batch (n, z, h, w)."""
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        out = []
        for s in range(0, len(crops), batch):
            x = torch.as_tensor(crops[s:s + batch], dtype=dtype)
            out.append((model.views(x) if per_view else model(x)).cpu().numpy())
    finally:
        model.train(was_training)
    if not out:
        shape = (0, len(model.zoom_fractions), model.d) if per_view else (0, model.d)
        return np.empty(shape, dtype=np.float32)
    return np.concatenate(out)


def embed_views(model: EmbedderModel, stack: ZoomStack) -> list[np.ndarray]:
    return list(embed_crops(model, _as_batch(stack), per_view=True)[0])


def embed_stack(model: EmbedderModel, stack: ZoomStack) -> np.ndarray:
    return embed_crops(model, _as_batch(stack))[0]


def embed_stacks(model: EmbedderModel, stacks: Sequence[ZoomStack] | np.ndarray) -> np.ndarray:
    return embed_crops(model, _as_batch(stacks))


def build_model(backbone_id: str = "alexnet", seed: int | None = None, **kw) -> EmbedderModel:
    if seed is not None:
        torch.manual_seed(seed)
    return EmbedderModel(EmbedderSpec(backbone_id=backbone_id, **kw))


def load_pretrained(model: EmbedderModel, state_dict: dict) -> EmbedderModel:
    """Optionally seed the convolutional layers from an external state dict.

    Only tensors whose names and shapes match are copied.
    """
    own = model.backbone.state_dict()
    hits = {k: v for k, v in state_dict.items() if k in own and own[k].shape == v.shape}
    own.update(hits)
    model.backbone.load_state_dict(own)
    return model


def save_checkpoint(model: EmbedderModel, directory, extra: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), d / "params.pt")
    meta = asdict(model.spec)
    meta["zoom_fractions"] = list(meta["zoom_fractions"])
    if extra:
        meta["extra"] = extra
    (d / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def load_checkpoint(directory) -> EmbedderModel:
    d = Path(directory)
    meta = json.loads((d / "metadata.json").read_text())
    meta.pop("extra", None)
    meta["zoom_fractions"] = tuple(meta["zoom_fractions"])
    model = EmbedderModel(EmbedderSpec(**meta))
    model.load_state_dict(torch.load(d / "params.pt", map_location="cpu", weights_only=True))
    model.eval()
    return model
