"""Seeded training loop, checkpoint evaluation and the ablation sweep."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import torch

from ._io import atomic_write_text
from .datamodel import GroundTruthMask, ImageSample, LRSchedule, RunConfig, SelectionSource, build_supervision
from .decoder import semantic_inference
from .encoder import image_to_tensor
from .losses import LossBreakdown, total_loss
from .metrics import MetricReport, evaluate
from .model import GEM, build_model, load_checkpoint, load_state, save_checkpoint

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("iteration", "total", "cls", "l1", "giou", "ce", "dice", "q", "lr")
Dataset = Sequence[tuple[ImageSample, GroundTruthMask]]


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: GEM
    history: list[dict[str, float]]
    evaluations: list[tuple[int, MetricReport]] = field(default_factory=list)
    best_iou: Optional[float] = None
    best_state: Optional[dict] = None


def _stack_images(samples: Sequence[ImageSample]) -> torch.Tensor:
    return torch.stack([image_to_tensor(s) for s in samples])


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled batches of indices; a pure function of (seed, epoch)."""
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _finite(decoded) -> bool:
    return all(
        bool(torch.isfinite(t).all())
        for layer in decoded.layers for t in (layer.class_logits, layer.boxes, layer.mask_logits)
    )


def lr_factor(config: RunConfig, iteration: int, total_iters: int) -> float:
    """Multiplier on the base learning rate for 0-based ``iteration``."""
    warmup = config.warmup_iters
    if iteration < warmup:
        return (iteration + 1) / warmup
    if config.lr_schedule is LRSchedule.COSINE and total_iters > warmup:
        progress = (iteration - warmup) / (total_iters - warmup)
        return 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))
    return 1.0


def history_to_csv(history: Sequence[Mapping[str, float]]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=HISTORY_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in history:
        writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in HISTORY_FIELDS})
    return buf.getvalue()


@torch.no_grad()
def predict(model: GEM, samples: Sequence[ImageSample], batch_size: int = 8) -> list[np.ndarray]:
    model.eval()
    maps = []
    for i in range(0, len(samples), batch_size):
        x = _stack_images(samples[i:i + batch_size]).to(next(model.parameters()).dtype)
        probs = semantic_inference(model(x).decoder.last)
        maps.extend(p.double().numpy() for p in probs)
    return maps


def evaluate_model(model: GEM, dataset: Dataset, batch_size: int = 8) -> MetricReport:
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    maps = predict(model, [s for s, _ in dataset], batch_size)
    cfg = model.config
    return evaluate([(s.id, m, gt.mask) for (s, gt), m in zip(dataset, maps)],
                    threshold=cfg.threshold, beta_squared=cfg.beta_squared)


def evaluate_checkpoint(checkpoint, dataset: Dataset, batch_size: int = 8) -> MetricReport:
    """``checkpoint`` is a path or an already-built model."""
    model = checkpoint if isinstance(checkpoint, GEM) else load_checkpoint(checkpoint)[0]
    return evaluate_model(model, dataset, batch_size)


def train(config: RunConfig, train_set: Dataset, val_set: Optional[Dataset] = None,
          init_checkpoint=None, out_dir=None) -> TrainResult:
    """Train with AdamW; keeps the best validation-IoU weights (last weights without a val set).

    Runs ``epochs_finetune`` epochs when starting from ``init_checkpoint`` and
    ``epochs_pretrain`` otherwise; ``max_iters`` caps the iteration count.
    """
    if not train_set:
        raise ValueError("training set is empty")
    torch.manual_seed(config.seed)
    model = build_model(config)
    if init_checkpoint is not None:
        load_state(model, init_checkpoint)
    epochs = config.epochs_finetune if init_checkpoint is not None else config.epochs_pretrain

    images = _stack_images([s for s, _ in train_set])
    targets = [build_supervision(gt) for _, gt in train_set]
    ids = [s.id for s, _ in train_set]
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    batches_per_epoch = -(-len(train_set) // config.batch_size)
    total_iters = epochs * batches_per_epoch
    if config.max_iters:
        total_iters = min(total_iters, config.max_iters)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda it: lr_factor(config, it, total_iters))

    result = TrainResult(model, [])
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    iteration = 0
    done = False
    for epoch in range(epochs):
        model.train()
        for batch_id, idx in enumerate(batch_order(len(train_set), config.batch_size, config.seed, epoch)):
            out = model(images[idx])
            where = f"epoch {epoch} batch {batch_id} (ids {[ids[i] for i in idx]})"
            if not _finite(out.decoder):
                raise NonFiniteLossError(f"non-finite predictions at {where}")
            breakdown: LossBreakdown = total_loss(
                out.decoder, out.confidence_maps, [targets[i] for i in idx], config.loss_weights,
                dqs_aux_loss=config.dqs_aux_loss, alpha=config.focal_alpha, gamma=config.focal_gamma,
            )
            if not np.isfinite(breakdown.total):
                raise NonFiniteLossError(f"non-finite loss at {where}")
            optimizer.zero_grad(set_to_none=True)
            breakdown.objective.backward()
            lr = optimizer.param_groups[0]["lr"]
            optimizer.step()
            scheduler.step()
            iteration += 1
            result.history.append({"iteration": iteration, "total": breakdown.total, **breakdown.components(),
                                   "lr": lr})
            if config.max_iters and iteration >= config.max_iters:
                done = True
                break
        last_epoch = done or epoch == epochs - 1
        if val_set and ((epoch + 1) % config.eval_every == 0 or last_epoch):
            report = evaluate_model(model, val_set)
            result.evaluations.append((epoch + 1, report))
            iou = report.aggregate["iou"]
            log.info("epoch %d  val IoU %.4f", epoch + 1, iou)
            if result.best_iou is None or iou > result.best_iou:
                result.best_iou = iou
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if done:
            break

    if not val_set:
        best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    result.best_state = best_state
    model.load_state_dict(best_state)
    model.eval()
    if out_dir is not None:
        out = Path(out_dir)
        save_checkpoint(model, out / "checkpoint.pt", extra={"best_val_iou": result.best_iou, "iterations": iteration})
        atomic_write_text(out / "history.csv", history_to_csv(result.history))
    return result


# --- ablation -------------------------------------------------------------------

ABLATION_AXES = ("selection_source", "dqs_init", "dqs_aux_loss")


@dataclass
class AblationRow:
    selection_source: SelectionSource
    dqs_init: bool
    dqs_aux_loss: bool
    report: MetricReport
    final_loss: Optional[dict[str, float]] = None


def parse_axes(text: str) -> dict[str, list]:
    """``selection_source=dqs,c3;dqs_init=true,false`` -> axis values."""
    axes: dict[str, list] = {}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        if "=" not in part:
            raise ValueError(f"axis {part!r} must look like name=v1,v2")
        name, values = (s.strip() for s in part.split("=", 1))
        if name not in ABLATION_AXES:
            raise ValueError(f"unknown ablation axis {name!r}; expected one of {ABLATION_AXES}")
        items = [v.strip() for v in values.split(",") if v.strip()]
        if name == "selection_source":
            axes[name] = [SelectionSource(v) for v in items]
        else:
            axes[name] = [v.lower() in ("1", "true", "yes", "on") for v in items]
    return axes


def ablation_sweep(config: RunConfig, train_set: Dataset, val_set: Optional[Dataset] = None,
                   axes: Optional[Mapping[str, Iterable]] = None) -> list[AblationRow]:
    """Train and evaluate every cell of the cartesian product of the given axes."""
    axes = dict(axes or {})
    values = [list(axes.get(name, [getattr(config, name)])) for name in ABLATION_AXES]
    rows = []
    for source, dqs_init, aux in itertools.product(*values):
        cell = config.replace(selection_source=SelectionSource(source), dqs_init=bool(dqs_init),
                              dqs_aux_loss=bool(aux))
        log.info("ablation cell source=%s init=%s aux=%s", cell.selection_source.value, dqs_init, aux)
        result = train(cell, train_set, val_set)
        report = evaluate_model(result.model, val_set or train_set)
        rows.append(AblationRow(cell.selection_source, cell.dqs_init, cell.dqs_aux_loss, report,
                                result.history[-1] if result.history else None))
    return rows


def _mark(flag: bool) -> str:
    return "yes" if flag else "no"


def format_ablation(rows: Sequence[AblationRow]) -> str:
    """One row per cell: configuration columns followed by the aggregate metrics."""
    header = f"{'Source':<8} {'Extra loss':>10} {'Init':>6} {'IoU':>8} {'Fbeta':>8} {'MAE':>8} {'BER':>8} {'L_q':>10}"
    lines = [header, "-" * len(header)]
    for r in rows:
        a = r.report.aggregate
        q = "-" if not r.dqs_aux_loss or r.final_loss is None else f"{r.final_loss['q']:.4f}"
        lines.append(f"{r.selection_source.value.upper():<8} {_mark(r.dqs_aux_loss):>10} {_mark(r.dqs_init):>6} "
                     f"{a['iou']:>8.4f} {a['f_beta']:>8.4f} {a['mae']:>8.4f} {a['ber']:>8.4f} {q:>10}")
    return "\n".join(lines) + "\n"


def ablation_records(rows: Sequence[AblationRow]) -> list[dict]:
    return [{"selection_source": r.selection_source.value, "dqs_init": r.dqs_init, "dqs_aux_loss": r.dqs_aux_loss,
             **r.report.aggregate, "final_loss": r.final_loss} for r in rows]
