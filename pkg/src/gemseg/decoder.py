"""Query-based mask decoder.

A simplified MaskDINO decoder: no pixel-decoder fusion (C2 is used as the pixel
embedding map as-is), no denoising queries, plain cross-attention over the
flattened C3/C4/C5 memory. Every layer, plus the un-refined initial queries,
emits class / box / mask predictions for deep supervision.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .dqs import SelectionResult
from .pyramid import FeaturePyramid


class QueryOrigin(str, enum.Enum):
    DQS_INIT = "dqs_init"
    LEARNED = "learned"


@dataclass
class QuerySet:
    content: Tensor  # (B, N, d)
    positional: Tensor  # (B, N, d)
    origin: QueryOrigin


@dataclass
class Memory:
    memory: Tensor  # (B, L, d)
    level_index: Tensor  # (L,)
    positions: Tensor  # (1, L, d)


@dataclass
class LayerPrediction:
    class_logits: Tensor  # (B, N, 1)
    boxes: Tensor  # (B, N, 4) normalized cxcywh
    mask_logits: Tensor  # (B, N, H/4, W/4)


@dataclass
class DecoderOutput:
    """Predictions from the initial queries followed by one entry per decoder layer."""

    layers: list[LayerPrediction]
    cross_attention: list[Tensor] = field(default_factory=list)

    @property
    def last(self) -> LayerPrediction:
        return self.layers[-1]


class MLP(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, num_layers: int):
        super().__init__()
        dims = [in_dim] + [hidden] * (num_layers - 1)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims, dims[1:] + [out_dim]))

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


def sine_position_encoding(h: int, w: int, d: int, temperature: float = 10000.0,
                           dtype=torch.float32, device=None) -> Tensor:
    """Normalized 2-D sinusoidal encoding, (h*w, d): first d/2 channels encode y, the rest x."""
    if d % 4:
        raise ValueError(f"d_model must be divisible by 4 for 2-D sine encoding, got {d}")
    npf = d // 2
    scale = 2 * math.pi
    y = (torch.arange(1, h + 1, dtype=dtype, device=device) / h * scale)[:, None].expand(h, w)
    x = (torch.arange(1, w + 1, dtype=dtype, device=device) / w * scale)[None, :].expand(h, w)
    dim_t = temperature ** (2 * (torch.arange(npf, dtype=dtype, device=device) // 2) / npf)
    px = x[..., None] / dim_t
    py = y[..., None] / dim_t
    px = torch.stack((px[..., 0::2].sin(), px[..., 1::2].cos()), dim=-1).flatten(2)
    py = torch.stack((py[..., 0::2].sin(), py[..., 1::2].cos()), dim=-1).flatten(2)
    return torch.cat((py, px), dim=-1).reshape(h * w, d)


def mask_logits_from_embeddings(embeddings: Tensor, pixel_map: Tensor) -> Tensor:
    """Inner product of each query embedding (B, N, d) with every pixel of (B, d, h, w)."""
    return torch.einsum("bnd,bdhw->bnhw", embeddings, pixel_map)


class DecoderLayer(nn.Module):
    def __init__(self, d_model: int, num_heads: int, dim_feedforward: int, dropout: float = 0.0):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d_model, num_heads, dropout=dropout, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(d_model, num_heads, dropout=dropout, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(d_model, dim_feedforward), nn.ReLU(), nn.Dropout(dropout),
                                 nn.Linear(dim_feedforward, d_model))
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)

    def forward(self, tgt: Tensor, query_pos: Tensor, memory: Tensor, memory_pos: Tensor):
        q = k = tgt + query_pos
        tgt = self.norm1(tgt + self.self_attn(q, k, tgt, need_weights=False)[0])
        out, weights = self.cross_attn(tgt + query_pos, memory + memory_pos, memory,
                                       need_weights=True, average_attn_weights=True)
        tgt = self.norm2(tgt + out)
        tgt = self.norm3(tgt + self.ffn(tgt))
        return tgt, weights


class MaskDecoder(nn.Module):
    def __init__(self, d_model: int = 256, num_queries: int = 100, num_layers: int = 3, num_heads: int = 4,
                 dim_feedforward: Optional[int] = None, dropout: float = 0.0):
        super().__init__()
        self.d_model = d_model
        self.num_queries = num_queries
        self.query_content = nn.Embedding(num_queries, d_model)
        self.query_pos = nn.Embedding(num_queries, d_model)
        self.level_embed = nn.Embedding(3, d_model)
        ff = dim_feedforward or 4 * d_model
        self.layers = nn.ModuleList(DecoderLayer(d_model, num_heads, ff, dropout) for _ in range(num_layers))
        self.norm = nn.LayerNorm(d_model)
        self.class_head = nn.Linear(d_model, 1)
        self.box_head = MLP(d_model, d_model, 4, 3)
        self.mask_head = MLP(d_model, d_model, d_model, 3)

    def init_queries(self, selection: Optional[SelectionResult], dqs_init: bool, batch_size: int = 1) -> QuerySet:
        if selection is not None:
            batch_size = selection.queries.shape[0]
        positional = self.query_pos.weight.unsqueeze(0).expand(batch_size, -1, -1)
        if dqs_init:
            if selection is None:
                raise ValueError("query initialization from selection requested without a selection")
            if selection.k != self.num_queries:
                raise ValueError(f"selection has k={selection.k} entries, decoder expects {self.num_queries}")
            return QuerySet(selection.queries, positional, QueryOrigin.DQS_INIT)
        content = self.query_content.weight.unsqueeze(0).expand(batch_size, -1, -1)
        return QuerySet(content, positional, QueryOrigin.LEARNED)

    def flatten_memory(self, pyramid: FeaturePyramid) -> Memory:
        feats, level_index, positions = [], [], []
        for lvl, fmap in enumerate((pyramid.c3, pyramid.c4, pyramid.c5)):
            h, w = fmap.shape[-2:]
            feats.append(fmap.flatten(2).transpose(1, 2))
            level_index.append(torch.full((h * w,), lvl, dtype=torch.long, device=fmap.device))
            pos = sine_position_encoding(h, w, self.d_model, dtype=fmap.dtype, device=fmap.device)
            positions.append(pos + self.level_embed.weight[lvl])
        return Memory(torch.cat(feats, 1), torch.cat(level_index), torch.cat(positions).unsqueeze(0))

    def predict(self, tgt: Tensor, pixel_map: Tensor) -> LayerPrediction:
        out = self.norm(tgt)
        boxes = self.box_head(out).sigmoid().clamp(0.0, 1.0)
        mask_logits = mask_logits_from_embeddings(self.mask_head(out), pixel_map)
        return LayerPrediction(self.class_head(out), boxes, mask_logits)

    def forward(self, queries: QuerySet, memory: Memory, pixel_map: Tensor) -> DecoderOutput:
        tgt = queries.content
        if tgt.shape[-1] != memory.memory.shape[-1] or pixel_map.shape[1] != tgt.shape[-1]:
            raise ValueError("query, memory and pixel-embedding widths differ")
        if tgt.shape[0] != memory.memory.shape[0] or pixel_map.shape[0] != tgt.shape[0]:
            raise ValueError("query, memory and pixel-embedding batch sizes differ")
        layers = [self.predict(tgt, pixel_map)]
        attention = []
        for layer in self.layers:
            tgt, weights = layer(tgt, queries.positional, memory.memory, memory.positions)
            attention.append(weights)
            layers.append(self.predict(tgt, pixel_map))
        return DecoderOutput(layers, attention)


def decode(queries: QuerySet, memory: Memory, pixel_map: Tensor, decoder: MaskDecoder) -> DecoderOutput:
    return decoder(queries, memory, pixel_map)


def semantic_inference(last: LayerPrediction, upscale: int = 4) -> Tensor:
    """Per-pixel glass probability: max over queries of class prob times mask prob, upsampled.

    Returns (B, H, W) in [0, 1].
    """
    cls = last.class_logits.sigmoid()  # (B, N, 1)
    masks = last.mask_logits.sigmoid()
    prob = (cls.unsqueeze(-1) * masks).amax(dim=1, keepdim=True)
    if upscale != 1:
        prob = F.interpolate(prob, scale_factor=upscale, mode="bilinear", align_corners=False)
    return prob[:, 0].clamp(0.0, 1.0)
