"""Base feature extraction at 1/16 resolution.

A small pre-norm ViT stands in for the SAM / MobileSAM image encoder. Features
computed offline by a real foundation-model encoder can be plugged in through
the binary feature-file format instead.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ._io import atomic_path
from .datamodel import ImageSample

PATCH = 16
FEATURE_MAGIC = b"GEMF"
_HEADER = struct.Struct("<4sIII")


class FeatureSource(str, enum.Enum):
    TOY_VIT = "toy_vit"
    IMPORTED = "imported"


class FeatureFileError(ValueError):
    pass


@dataclass
class BaseFeature:
    feature: Tensor  # h x w x d
    source: FeatureSource = FeatureSource.TOY_VIT

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.feature.shape)

    def as_batch(self) -> Tensor:
        """1 x d x h x w view for the convolutional modules."""
        return self.feature.permute(2, 0, 1).unsqueeze(0)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * (q.shape[-1] ** -0.5)
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, c))


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Dropout(dropout), nn.Linear(hidden, dim))

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ToyViT(nn.Module):
    def __init__(self, d_model: int = 256, depth: int = 4, num_heads: int = 4, grid_size: int = 24,
                 dropout: float = 0.0):
        super().__init__()
        self.patch_embed = nn.Conv2d(3, d_model, kernel_size=PATCH, stride=PATCH)
        self.pos_embed = nn.Parameter(torch.zeros(1, d_model, grid_size, grid_size))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(Block(d_model, num_heads, dropout=dropout) for _ in range(depth))
        self.norm = nn.LayerNorm(d_model)

    def _pos(self, h: int, w: int) -> Tensor:
        if self.pos_embed.shape[-2:] == (h, w):
            return self.pos_embed
        return F.interpolate(self.pos_embed, size=(h, w), mode="bilinear", align_corners=False)

    def forward(self, images: Tensor) -> Tensor:
        """(B, 3, H, W) -> (B, d, H/16, W/16)."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        H, W = images.shape[-2:]
        if H % PATCH or W % PATCH:
            raise ValueError(f"image size {H}x{W} is not divisible by {PATCH}")
        x = self.patch_embed(images)
        b, d, h, w = x.shape
        x = (x + self._pos(h, w)).flatten(2).transpose(1, 2)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        return x.transpose(1, 2).reshape(b, d, h, w)


class FeatureAdapter(nn.Module):
    """1x1 projection from an imported feature width to d_model (identity when equal)."""

    def __init__(self, in_width: int, d_model: int):
        super().__init__()
        self.proj = nn.Identity() if in_width == d_model else nn.Conv2d(in_width, d_model, 1)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(x)


def image_to_tensor(image: ImageSample, dtype=torch.float32) -> Tensor:
    return torch.as_tensor(np.ascontiguousarray(image.image.transpose(2, 0, 1)), dtype=dtype)


def encode(image: ImageSample, encoder: ToyViT) -> BaseFeature:
    param = next(encoder.parameters())
    x = image_to_tensor(image, dtype=param.dtype).unsqueeze(0)
    feat = encoder(x)[0].permute(1, 2, 0)
    return BaseFeature(feat, FeatureSource.TOY_VIT)


def export_features(feature: BaseFeature, path) -> None:
    arr = feature.feature.detach().cpu().numpy().astype("<f4", copy=False)
    h, w, d = arr.shape
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as fh:
            fh.write(_HEADER.pack(FEATURE_MAGIC, h, w, d))
            fh.write(np.ascontiguousarray(arr).tobytes())


def import_features(path) -> BaseFeature:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureFileError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, h, w, d = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: bad magic {magic!r}")
    expected = h * w * d * 4
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise FeatureFileError(f"{path}: header declares {h}x{w}x{d} ({expected} bytes), payload has {len(payload)}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w, d).astype(np.float32)
    return BaseFeature(torch.from_numpy(arr), FeatureSource.IMPORTED)
