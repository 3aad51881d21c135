"""Bipartite matching and the six-term training objective.

Per decoder layer (including the initial-query predictions) queries are matched
to ground-truth instances with the Hungarian algorithm on the full cost matrix,
then focal / L1 / GIoU / mask-BCE / dice terms are computed on the matching.
The query-selection cross-entropy is computed once per forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import Tensor

from .datamodel import LossWeights, SupervisionTarget, area_downsample
from .decoder import DecoderOutput, LayerPrediction
from .dqs import ConfidenceMap

FIVE_TERMS = ("cls", "l1", "giou", "ce", "dice")


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    unmatched_queries: list[int]

    @property
    def query_indices(self) -> list[int]:
        return [q for q, _ in self.pairs]

    @property
    def instance_indices(self) -> list[int]:
        return [i for _, i in self.pairs]


@dataclass
class LossBreakdown:
    cls: float
    l1: float
    giou: float
    ce: float
    dice: float
    q: float
    total: float
    per_layer: list[dict[str, float]] = field(default_factory=list)
    q_enabled: bool = True
    objective: Optional[Tensor] = None  # differentiable total, same summation order

    def components(self) -> dict[str, float]:
        return {"cls": self.cls, "l1": self.l1, "giou": self.giou, "ce": self.ce, "dice": self.dice, "q": self.q}


def weighted_total(values, weights: LossWeights):
    """λ_cls·cls + λ_L1·l1 + λ_giou·giou + λ_ce·ce + λ_dice·dice + λ_q·q, left to right."""
    total = weights.cls * values["cls"]
    total = total + weights.l1 * values["l1"]
    total = total + weights.giou * values["giou"]
    total = total + weights.ce * values["ce"]
    total = total + weights.dice * values["dice"]
    total = total + weights.q * values["q"]
    return total


# --- boxes ---------------------------------------------------------------------

def box_cxcywh_to_xyxy(boxes: Tensor) -> Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def _area(b: Tensor) -> Tensor:
    return (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)


def generalized_box_iou(a: Tensor, b: Tensor, pairwise: bool = True) -> Tensor:
    """GIoU of xyxy boxes; (N, M) when pairwise, else elementwise over matching rows."""
    if pairwise:
        a, b = a[:, None, :], b[None, :, :]
    area_a, area_b = _area(a), _area(b)
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    inter = (rb - lt).clamp(min=0).prod(-1)
    union = area_a + area_b - inter
    iou = inter / union.clamp(min=1e-12)
    lt_c = torch.minimum(a[..., :2], b[..., :2])
    rb_c = torch.maximum(a[..., 2:], b[..., 2:])
    enclose = (rb_c - lt_c).clamp(min=0).prod(-1)
    return iou - (enclose - union) / enclose.clamp(min=1e-12)


# --- matching -------------------------------------------------------------------

def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost injective assignment of rows to columns (or columns to rows)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if cost.size and not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    if 0 in cost.shape:
        return []
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()))


def _image(pred: LayerPrediction, b: int) -> LayerPrediction:
    if pred.mask_logits.ndim == 3:
        return pred
    return LayerPrediction(pred.class_logits[b], pred.boxes[b], pred.mask_logits[b])


def _mask_targets(target: SupervisionTarget, grid: tuple[int, int], like: Tensor) -> Tensor:
    """Instance masks as area fractions on the prediction grid, (M, h, w)."""
    masks = target.instance_masks
    factor = target.semantic_mask.shape[0] // grid[0]
    if masks.shape[0] == 0:
        return like.new_zeros((0, *grid))
    if factor == 1:
        down = masks.astype(np.float64)
    else:
        down = np.stack([area_downsample(m, factor) for m in masks])
    return torch.as_tensor(down, dtype=like.dtype, device=like.device)


def focal_cost(logits: Tensor, alpha: float, gamma: float) -> Tensor:
    p = logits.sigmoid()
    neg = (1 - alpha) * p.pow(gamma) * F.softplus(logits)  # -log(1 - p) = softplus(x)
    pos = alpha * (1 - p).pow(gamma) * F.softplus(-logits)  # -log(p) = softplus(-x)
    return pos - neg


def matching_cost(pred: LayerPrediction, target: SupervisionTarget, weights: LossWeights,
                  alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    """(N, M) cost = λ_cls·cls + λ_ce·ce + λ_dice·dice + λ_L1·L1 + λ_giou·GIoU."""
    with torch.no_grad():
        logits = pred.class_logits.reshape(-1)
        n, m = logits.shape[0], len(target.instances)
        if m == 0:
            return np.zeros((n, 0))
        t_boxes = torch.as_tensor(target.boxes, dtype=pred.boxes.dtype)
        t_masks = _mask_targets(target, tuple(pred.mask_logits.shape[-2:]), pred.mask_logits).flatten(1)
        x = pred.mask_logits.flatten(1)
        npix = x.shape[1]
        cost_cls = focal_cost(logits, alpha, gamma)[:, None].expand(n, m)
        cost_ce = (F.softplus(x).sum(1, keepdim=True) - x @ t_masks.T) / npix
        p = x.sigmoid()
        cost_dice = 1 - (2 * p @ t_masks.T + 1) / (p.sum(1)[:, None] + t_masks.sum(1)[None, :] + 1)
        cost_l1 = torch.cdist(pred.boxes, t_boxes, p=1)
        cost_giou = 1 - generalized_box_iou(box_cxcywh_to_xyxy(pred.boxes), box_cxcywh_to_xyxy(t_boxes))
        cost = (weights.cls * cost_cls + weights.ce * cost_ce + weights.dice * cost_dice
                + weights.l1 * cost_l1 + weights.giou * cost_giou)
    return cost.double().cpu().numpy()


def match(pred: LayerPrediction, target: SupervisionTarget, weights: LossWeights,
          alpha: float = 0.25, gamma: float = 2.0) -> MatchResult:
    cost = matching_cost(pred, target, weights, alpha, gamma)
    if cost.size and not np.isfinite(cost).all():
        raise ValueError("matching cost contains non-finite entries")
    pairs = hungarian(cost)
    matched = {q for q, _ in pairs}
    return MatchResult(pairs, [q for q in range(cost.shape[0]) if q not in matched])


# --- loss terms -----------------------------------------------------------------

def focal_loss(class_logits: Tensor, match_result: MatchResult, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Sigmoid focal loss, matched queries target 1, the rest 0; mean over queries."""
    logits = class_logits.reshape(-1)
    target = torch.zeros_like(logits)
    if match_result.pairs:
        target[match_result.query_indices] = 1.0
    p = logits.sigmoid()
    ce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    p_t = p * target + (1 - p) * (1 - target)
    alpha_t = alpha * target + (1 - alpha) * (1 - target)
    return (alpha_t * (1 - p_t).pow(gamma) * ce).mean()


def _box_sums(boxes: Tensor, match_result: MatchResult, target: SupervisionTarget) -> tuple[Tensor, Tensor]:
    if not match_result.pairs:
        zero = boxes.sum() * 0.0
        return zero, zero
    src = boxes[match_result.query_indices]
    tgt = torch.as_tensor(target.boxes[match_result.instance_indices], dtype=boxes.dtype, device=boxes.device)
    l1 = (src - tgt).abs().sum()
    giou = (1 - generalized_box_iou(box_cxcywh_to_xyxy(src), box_cxcywh_to_xyxy(tgt), pairwise=False)).sum()
    return l1, giou


def box_losses(boxes: Tensor, match_result: MatchResult, target: SupervisionTarget) -> tuple[Tensor, Tensor]:
    """(L1, 1 - GIoU), each averaged over matched pairs."""
    l1, giou = _box_sums(boxes, match_result, target)
    n = max(len(match_result.pairs), 1)
    return l1 / n, giou / n


def _mask_sums(mask_logits: Tensor, match_result: MatchResult, target: SupervisionTarget) -> tuple[Tensor, Tensor]:
    if not match_result.pairs:
        zero = mask_logits.sum() * 0.0
        return zero, zero
    src = mask_logits[match_result.query_indices].flatten(1)
    tgt = _mask_targets(target, tuple(mask_logits.shape[-2:]), mask_logits)[match_result.instance_indices].flatten(1)
    ce = F.binary_cross_entropy_with_logits(src, tgt, reduction="none").mean(1).sum()
    p = src.sigmoid()
    dice = (1 - (2 * (p * tgt).sum(1) + 1) / (p.sum(1) + tgt.sum(1) + 1)).sum()
    return ce, dice


def mask_losses(mask_logits: Tensor, match_result: MatchResult, target: SupervisionTarget) -> tuple[Tensor, Tensor]:
    """(per-pixel BCE, dice), averaged over matched pairs.

    Instance masks are reduced to the prediction grid by area fraction.
    """
    ce, dice = _mask_sums(mask_logits, match_result, target)
    n = max(len(match_result.pairs), 1)
    return ce / n, dice / n


def dqs_loss(cm: ConfidenceMap, dqs_target) -> Tensor:
    """Mean per-location two-class cross-entropy between the confidence map and the glass target."""
    target = torch.as_tensor(np.asarray(dqs_target), dtype=torch.long, device=cm.logits.device)
    if target.ndim == 2:
        target = target.unsqueeze(0)
    if tuple(target.shape) != (cm.logits.shape[0], *cm.grid):
        raise ValueError(f"target shape {tuple(target.shape)} does not match confidence map {tuple(cm.logits.shape)}")
    return F.cross_entropy(cm.logits, target)


def level_target(target: SupervisionTarget, grid: tuple[int, int]) -> np.ndarray:
    """Binary glass target on an arbitrary grid (area fraction >= 0.5)."""
    if tuple(target.dqs_target.shape) == tuple(grid):
        return target.dqs_target
    factor = target.semantic_mask.shape[0] // grid[0]
    return (area_downsample(target.semantic_mask, factor) >= 0.5).astype(np.uint8)


def selection_loss(maps: Sequence[ConfidenceMap], targets: Sequence[SupervisionTarget]) -> Tensor:
    """Cross-entropy averaged over the supplied confidence maps (one for DQS, one per level otherwise)."""
    terms = []
    for cm in maps:
        stacked = np.stack([level_target(t, cm.grid) for t in targets])
        terms.append(dqs_loss(cm, stacked))
    return torch.stack(terms).mean()


def layer_losses(pred: LayerPrediction, targets: Sequence[SupervisionTarget], weights: LossWeights,
                 alpha: float = 0.25, gamma: float = 2.0) -> dict[str, Tensor]:
    """Five matched terms for one decoder layer, aggregated over the batch."""
    cls_terms, l1_sum, giou_sum, ce_sum, dice_sum, n_pairs = [], 0.0, 0.0, 0.0, 0.0, 0
    for b, target in enumerate(targets):
        pred_b = _image(pred, b)
        m = match(pred_b, target, weights, alpha, gamma)
        cls_terms.append(focal_loss(pred_b.class_logits, m, alpha, gamma))
        l1, giou = _box_sums(pred_b.boxes, m, target)
        ce, dice = _mask_sums(pred_b.mask_logits, m, target)
        l1_sum, giou_sum, ce_sum, dice_sum = l1_sum + l1, giou_sum + giou, ce_sum + ce, dice_sum + dice
        n_pairs += len(m.pairs)
    n = max(n_pairs, 1)
    return {
        "cls": torch.stack(cls_terms).mean(),
        "l1": l1_sum / n,
        "giou": giou_sum / n,
        "ce": ce_sum / n,
        "dice": dice_sum / n,
    }


def total_loss(out: DecoderOutput, cm, targets: Sequence[SupervisionTarget], weights: LossWeights,
               dqs_aux_loss: bool = True, alpha: float = 0.25, gamma: float = 2.0) -> LossBreakdown:
    """Deep-supervised weighted objective.

    ``cm`` is a ConfidenceMap or a list of them (per-level selection baselines).
    With ``dqs_aux_loss`` off the selection term is reported as 0 and left out
    of the objective.
    """
    if isinstance(targets, SupervisionTarget):
        targets = [targets]
    per_layer_t = [layer_losses(pred, targets, weights, alpha, gamma) for pred in out.layers]
    summed = {k: sum(layer[k] for layer in per_layer_t) for k in FIVE_TERMS}
    maps = [cm] if isinstance(cm, ConfidenceMap) else list(cm or [])
    if dqs_aux_loss and maps:
        summed["q"] = selection_loss(maps, targets)
    else:
        summed["q"] = summed["cls"] * 0.0
    values = {k: v.detach().item() for k, v in summed.items()}
    return LossBreakdown(
        **values,
        total=weighted_total(values, weights),
        per_layer=[{k: v.detach().item() for k, v in layer.items()} for layer in per_layer_t],
        q_enabled=bool(dqs_aux_loss and maps),
        objective=weighted_total(summed, weights),
    )
