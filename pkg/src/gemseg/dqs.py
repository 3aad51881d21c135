"""Discerning query selection.

C3 and C5 are resampled onto the C4 grid and summed with C4. A 1x1 head scores
each location of the merged map as background / glass, and the features at the
top-k entries of the flattened 2 x h x w probability tensor become the decoder's
initial content queries.

Channel 0 is background, channel 1 is glass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .datamodel import SelectionSource
from .pyramid import FeaturePyramid

BACKGROUND, GLASS = 0, 1


@dataclass
class ConfidenceMap:
    logits: Tensor  # (B, 2, h, w)

    @property
    def probs(self) -> Tensor:
        return self.logits.softmax(dim=1)

    @property
    def scores(self) -> Tensor:
        """Row-major flattening of the probabilities, (B, 2hw)."""
        return self.probs.flatten(1)

    @property
    def grid(self) -> tuple[int, int]:
        return tuple(self.logits.shape[-2:])


@dataclass
class SelectionResult:
    indices: Tensor  # (B, k) positions in the ranked score vector
    locations: Tensor  # (B, k, 2) (row, col) on the source grid
    queries: Tensor  # (B, k, d)
    scores: Tensor  # (B, k), non-increasing
    levels: Optional[Tensor] = None  # (B, k) source level (0=C3, 1=C4, 2=C5) for per-level modes
    level_maps: list[ConfidenceMap] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def aggregate(c3: Tensor, c4: Tensor, c5: Tensor) -> Tensor:
    """f = avgpool2(C3) + C4 + bilinear_up2(C5) on the C4 grid."""
    h, w = c4.shape[-2:]
    if tuple(c3.shape[-2:]) != (2 * h, 2 * w) or tuple(c5.shape[-2:]) != (h // 2, w // 2) or h % 2 or w % 2:
        raise ValueError(
            f"pyramid shapes do not nest: C3 {tuple(c3.shape[-2:])}, C4 {(h, w)}, C5 {tuple(c5.shape[-2:])}"
        )
    if not (c3.shape[:2] == c4.shape[:2] == c5.shape[:2]):
        raise ValueError("C3/C4/C5 batch or channel dims differ")
    down = F.avg_pool2d(c3, kernel_size=2, stride=2)
    up = F.interpolate(c5, size=(h, w), mode="bilinear", align_corners=False)
    return down + c4 + up


class ConfidenceHead(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.proj = nn.Conv2d(d_model, 2, kernel_size=1)

    def forward(self, f: Tensor) -> ConfidenceMap:
        return ConfidenceMap(self.proj(f))


def classify(f: Tensor, head: ConfidenceHead) -> ConfidenceMap:
    if f.ndim != 4:
        raise ValueError(f"expected (B, d, h, w) feature, got {tuple(f.shape)}")
    return head(f)


def _ranked(scores: Tensor) -> Tensor:
    # stable descending sort: equal scores keep ascending index order
    return torch.sort(scores.detach(), dim=1, descending=True, stable=True).indices


def _dedup_order(order: Tensor, hw: int, k: int) -> Tensor:
    rows = []
    for row in order.tolist():
        seen, kept = set(), []
        for idx in row:
            loc = idx % hw
            if loc not in seen:
                seen.add(loc)
                kept.append(idx)
                if len(kept) == k:
                    break
        rows.append(kept)
    return torch.tensor(rows, dtype=torch.long, device=order.device)


def _gather(feature: Tensor, loc: Tensor) -> Tensor:
    """feature (B, d, h, w), loc (B, k) flat locations -> (B, k, d)."""
    flat = feature.flatten(2).transpose(1, 2)
    return flat.gather(1, loc.unsqueeze(-1).expand(-1, -1, flat.shape[-1]))


def select_topk(cm: ConfidenceMap, f: Tensor, k: int, dedup: bool = False) -> SelectionResult:
    """Gather the features behind the k largest entries of the flattened 2 x h x w scores."""
    h, w = cm.grid
    hw = h * w
    limit = hw if dedup else 2 * hw
    if not 1 <= k <= limit:
        raise ValueError(f"k={k} out of range [1, {limit}]")
    if tuple(f.shape[-2:]) != (h, w):
        raise ValueError(f"feature grid {tuple(f.shape[-2:])} does not match confidence map {(h, w)}")
    scores = cm.scores
    order = _ranked(scores)
    idx = _dedup_order(order, hw, k) if dedup else order[:, :k]
    loc = idx % hw
    locations = torch.stack([loc // w, loc % w], dim=-1)
    return SelectionResult(idx, locations, _gather(f, loc), scores.gather(1, idx))


class LevelScorers(nn.Module):
    """Separate 2-channel heads on C3, C4 and C5 for the per-level selection baselines."""

    def __init__(self, d_model: int):
        super().__init__()
        self.heads = nn.ModuleDict({name: ConfidenceHead(d_model) for name in ("c3", "c4", "c5")})

    def forward(self, pyramid: FeaturePyramid, mode: SelectionSource) -> list[tuple[int, Tensor, ConfidenceMap]]:
        mode = SelectionSource(mode)
        names = {SelectionSource.C3: ["c3"], SelectionSource.C4: ["c4"],
                 SelectionSource.C3C4C5: ["c3", "c4", "c5"]}.get(mode)
        if names is None:
            raise ValueError(f"per-level scoring does not apply to mode {mode.value!r}")
        level_ids = {"c3": 0, "c4": 1, "c5": 2}
        return [(level_ids[n], getattr(pyramid, n), self.heads[n](getattr(pyramid, n))) for n in names]


def alt_select(pyramid: FeaturePyramid, scorers: LevelScorers, mode, k: int) -> SelectionResult:
    """Per-level selection: rank locations by glass probability, over one level or all three concatenated."""
    levels = scorers(pyramid, mode)
    sizes = [cm.grid[0] * cm.grid[1] for _, _, cm in levels]
    total = sum(sizes)
    if not 1 <= k <= total:
        raise ValueError(f"k={k} out of range [1, {total}]")
    scores = torch.cat([cm.probs[:, GLASS].flatten(1) for _, _, cm in levels], dim=1)
    idx = _ranked(scores)[:, :k].contiguous()

    offsets = torch.tensor([0] + sizes[:-1], device=idx.device).cumsum(0)
    level_pos = torch.bucketize(idx, offsets, right=True) - 1  # position in `levels`
    queries = torch.zeros(idx.shape[0], k, levels[0][1].shape[1], dtype=levels[0][1].dtype, device=idx.device)
    locations = torch.zeros(idx.shape[0], k, 2, dtype=torch.long, device=idx.device)
    for pos, (_, feat, cm) in enumerate(levels):
        sel = level_pos == pos
        if not sel.any():
            continue
        loc = (idx - offsets[pos]).clamp(min=0, max=sizes[pos] - 1)
        w = cm.grid[1]
        gathered = _gather(feat, loc)
        queries = torch.where(sel.unsqueeze(-1), gathered, queries)
        locations = torch.where(sel.unsqueeze(-1), torch.stack([loc // w, loc % w], dim=-1), locations)
    level_ids = torch.tensor([lid for lid, _, _ in levels], device=idx.device)[level_pos]
    return SelectionResult(idx, locations, queries, scores.gather(1, idx), levels=level_ids,
                           level_maps=[cm for _, _, cm in levels])
