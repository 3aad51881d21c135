"""IoU, F-beta, MAE and BER for binary glass maps.

Counting metrics use the prediction thresholded at ``threshold`` (default 0.5);
MAE uses the continuous map. Dataset scores are unweighted means of per-image
scores. Conventions for degenerate images:

* IoU is 1 when prediction and ground truth are both empty.
* F-beta is 1 when both are empty, 0 whenever its denominator vanishes otherwise.
* A class absent from the ground truth contributes a perfect recall term to BER.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from ._io import atomic_write_text

THRESHOLD = 0.5
BETA_SQUARED = 0.3


@dataclass(frozen=True)
class Counts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class ImageMetrics:
    iou: float
    f_beta: float
    mae: float
    ber: float
    tp: int
    fp: int
    tn: int
    fn: int


@dataclass
class MetricReport:
    per_image: dict[str, ImageMetrics]
    aggregate: dict[str, float]
    config: dict[str, float] = field(default_factory=lambda: {"threshold": THRESHOLD, "beta_squared": BETA_SQUARED})

    def to_dict(self) -> dict:
        return {
            "config": dict(self.config),
            "per_image": {k: asdict(v) for k, v in self.per_image.items()},
            "aggregate": dict(self.aggregate),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "MetricReport":
        return cls({k: ImageMetrics(**v) for k, v in data["per_image"].items()},
                   dict(data["aggregate"]), dict(data["config"]))

    def to_text(self) -> str:
        lines = [f"threshold {self.config['threshold']:.4f}  beta_squared {self.config['beta_squared']:.4f}",
                 f"{'id':<24} {'IoU':>8} {'Fbeta':>8} {'MAE':>8} {'BER':>8} {'TP':>8} {'FP':>8} {'TN':>8} {'FN':>8}"]
        for key, m in self.per_image.items():
            lines.append(f"{key:<24} {m.iou:>8.4f} {m.f_beta:>8.4f} {m.mae:>8.4f} {m.ber:>8.4f} "
                         f"{m.tp:>8d} {m.fp:>8d} {m.tn:>8d} {m.fn:>8d}")
        a = self.aggregate
        lines += ["", "aggregate",
                  f"images {len(self.per_image)}",
                  f"IoU    {a['iou']:.4f}",
                  f"Fbeta  {a['f_beta']:.4f}",
                  f"MAE    {a['mae']:.4f}",
                  f"BER    {a['ber']:.4f}"]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        """Text report at ``path`` and a JSON mirror beside it (``.json`` suffix)."""
        path = Path(path)
        json_path = path.with_suffix(".json") if path.suffix != ".json" else path.with_name(path.stem + ".mirror.json")
        atomic_write_text(json_path, json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        atomic_write_text(path, self.to_text())


def _binary(x, threshold: float = THRESHOLD) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) >= threshold


def confusion(pred_binary, gt) -> Counts:
    p = np.asarray(pred_binary).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} does not match ground truth {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return Counts(tp, fp, p.size - tp - fp - fn, fn)


def iou(counts: Counts) -> float:
    denom = counts.tp + counts.fp + counts.fn
    return 1.0 if denom == 0 else counts.tp / denom


def f_beta_from_counts(counts: Counts, beta_squared: float = BETA_SQUARED) -> float:
    if counts.tp + counts.fp + counts.fn == 0:
        return 1.0
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    denom = beta_squared * precision + recall
    return 0.0 if denom == 0 else (1 + beta_squared) * precision * recall / denom


def f_beta(pred_continuous, gt, beta_squared: float = BETA_SQUARED, threshold: float = THRESHOLD) -> float:
    return f_beta_from_counts(confusion(_binary(pred_continuous, threshold), gt), beta_squared)


def mae(pred_continuous, gt) -> float:
    p = np.asarray(pred_continuous, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} does not match ground truth {g.shape}")
    return float(np.abs(p - g).mean())


def ber(counts: Counts) -> float:
    pos_acc = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 1.0
    neg_acc = counts.tn / (counts.tn + counts.fp) if counts.tn + counts.fp else 1.0
    return 100.0 * (1.0 - 0.5 * (pos_acc + neg_acc))


def image_metrics(pred_continuous, gt, threshold: float = THRESHOLD,
                  beta_squared: float = BETA_SQUARED) -> ImageMetrics:
    counts = confusion(_binary(pred_continuous, threshold), gt)
    return ImageMetrics(
        iou=iou(counts),
        f_beta=f_beta_from_counts(counts, beta_squared),
        mae=mae(pred_continuous, gt),
        ber=ber(counts),
        tp=counts.tp, fp=counts.fp, tn=counts.tn, fn=counts.fn,
    )


def evaluate(items: Iterable, threshold: float = THRESHOLD, beta_squared: float = BETA_SQUARED) -> MetricReport:
    """``items``: (id, continuous map, gt) triples or a mapping id -> (map, gt)."""
    if isinstance(items, Mapping):
        items = [(k, *v) for k, v in items.items()]
    per_image = {}
    for key, pred, gt in sorted(items, key=lambda item: item[0]):
        if key in per_image:
            raise ValueError(f"duplicate image id {key!r}")
        per_image[key] = image_metrics(pred, gt, threshold, beta_squared)
    if not per_image:
        raise ValueError("cannot evaluate an empty set of images")
    aggregate = {name: float(np.mean([getattr(m, name) for m in per_image.values()]))
                 for name in ("iou", "f_beta", "mae", "ber")}
    return MetricReport(per_image, aggregate, {"threshold": threshold, "beta_squared": beta_squared})
