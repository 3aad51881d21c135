"""Core value types, dataset directory I/O and the run configuration."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MIN_COMPONENT_AREA = 16
DQS_STRIDE = 16


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"


class LRSchedule(str, enum.Enum):
    CONSTANT = "constant"
    COSINE = "cosine"


class SelectionSource(str, enum.Enum):
    DQS = "dqs"
    C3 = "c3"
    C4 = "c4"
    C3C4C5 = "c3c4c5"


class DatasetError(Exception):
    """Raised for malformed dataset directories."""


@dataclass
class ImageSample:
    id: str
    image: np.ndarray  # H x W x 3 float32, per-channel standardized
    original_size: tuple[int, int]
    rgb: Optional[np.ndarray] = None  # H x W x 3 uint8 before standardization

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"{self.id}: image must be H x W x 3, got {self.image.shape}")
        h, w = self.image.shape[:2]
        if h % 32 or w % 32:
            raise ValueError(f"{self.id}: image size {h}x{w} is not divisible by 32")


@dataclass
class GroundTruthMask:
    mask: np.ndarray  # H x W uint8 in {0, 1}
    source_split: Split = Split.TRAIN
    id: str = ""

    def __post_init__(self):
        self.source_split = Split(self.source_split)
        if self.mask.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {self.mask.shape}")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask must be strictly binary {0, 1}")
        self.mask = self.mask.astype(np.uint8, copy=False)


@dataclass
class Instance:
    mask: np.ndarray  # H x W uint8
    box: np.ndarray  # normalized (cx, cy, w, h)


@dataclass
class SupervisionTarget:
    semantic_mask: np.ndarray
    instances: list[Instance]
    dqs_target: np.ndarray  # (H/16) x (W/16) uint8

    @property
    def boxes(self) -> np.ndarray:
        if not self.instances:
            return np.zeros((0, 4))
        return np.stack([inst.box for inst in self.instances])

    @property
    def instance_masks(self) -> np.ndarray:
        h, w = self.semantic_mask.shape
        if not self.instances:
            return np.zeros((0, h, w), dtype=np.uint8)
        return np.stack([inst.mask for inst in self.instances])


@dataclass
class LossWeights:
    cls: float = 4.0
    l1: float = 5.0
    giou: float = 2.0
    ce: float = 5.0
    dice: float = 5.0
    q: float = 80.0

    def __post_init__(self):
        for name, value in dataclasses.asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {value}")


@dataclass
class RunConfig:
    image_size: int = 384
    num_queries: int = 100
    d_model: int = 256
    decoder_layers: int = 3
    encoder_depth: int = 4
    num_heads: int = 4
    selection_source: SelectionSource = SelectionSource.DQS
    dqs_aux_loss: bool = True
    dqs_init: bool = True
    dedup_selection: bool = False
    loss_weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 2e-4
    lr_schedule: LRSchedule = LRSchedule.CONSTANT
    warmup_iters: int = 0  # linear warmup length, in iterations
    weight_decay: float = 0.05
    batch_size: int = 32
    epochs_pretrain: int = 160
    epochs_finetune: int = 80
    dropout: float = 0.0
    seed: int = 0
    max_iters: int = 0  # 0 means no cap
    eval_every: int = 1  # epochs between validation passes
    import_width: int = 0  # width of externally imported features; 0 means d_model
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    threshold: float = 0.5
    beta_squared: float = 0.3

    def __post_init__(self):
        self.selection_source = SelectionSource(self.selection_source)
        self.lr_schedule = LRSchedule(self.lr_schedule)
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        self.validate()

    @property
    def grid_size(self) -> int:
        return self.image_size // DQS_STRIDE

    def validate(self) -> None:
        if self.image_size <= 0 or self.image_size % 32:
            raise ValueError(f"image size must be a positive multiple of 32, got {self.image_size}")
        max_queries = 2 * self.grid_size ** 2
        if not 1 <= self.num_queries <= max_queries:
            raise ValueError(
                f"# queries must lie in [1, {max_queries}] for image size {self.image_size}, "
                f"got {self.num_queries}"
            )
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.decoder_layers < 1:
            raise ValueError("decoder_layers must be >= 1")
        if self.dedup_selection and self.num_queries > self.grid_size ** 2:
            raise ValueError("dedup_selection needs # queries <= number of grid locations")
        for name in ("learning_rate", "weight_decay", "dropout", "batch_size",
                     "epochs_pretrain", "epochs_finetune", "max_iters", "warmup_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch size and eval_every must be >= 1")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


# Hyperparameter-table names first, then artifact-specific keys. Maps file key -> (attribute path, type).
_CONFIG_KEYS: dict[str, tuple[str, type]] = {
    "learning rate": ("learning_rate", float),
    "weight decay": ("weight_decay", float),
    "batch size": ("batch_size", int),
    "image size": ("image_size", int),
    "epochs for pretrain": ("epochs_pretrain", int),
    "epochs for finetune": ("epochs_finetune", int),
    "# queries": ("num_queries", int),
    "dropout": ("dropout", float),
    "λ_cls": ("loss_weights.cls", float),
    "λ_L1": ("loss_weights.l1", float),
    "λ_giou": ("loss_weights.giou", float),
    "λ_ce": ("loss_weights.ce", float),
    "λ_dice": ("loss_weights.dice", float),
    "λ_q": ("loss_weights.q", float),
    "lr_schedule": ("lr_schedule", LRSchedule),
    "warmup_iters": ("warmup_iters", int),
    "d_model": ("d_model", int),
    "decoder_layers": ("decoder_layers", int),
    "encoder_depth": ("encoder_depth", int),
    "num_heads": ("num_heads", int),
    "selection_source": ("selection_source", SelectionSource),
    "dqs_aux_loss": ("dqs_aux_loss", bool),
    "dqs_init": ("dqs_init", bool),
    "dedup_selection": ("dedup_selection", bool),
    "seed": ("seed", int),
    "max_iters": ("max_iters", int),
    "eval_every": ("eval_every", int),
    "import_width": ("import_width", int),
    "focal_alpha": ("focal_alpha", float),
    "focal_gamma": ("focal_gamma", float),
    "threshold": ("threshold", float),
    "beta_squared": ("beta_squared", float),
}
# ASCII spellings accepted on read
_KEY_ALIASES = {k.replace("λ_", "lambda_"): k for k in _CONFIG_KEYS if k.startswith("λ_")}


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, enum.Enum):
        return value.value
    return repr(value) if isinstance(value, float) else str(value)


def config_to_text(config: RunConfig) -> str:
    lines = []
    for key, (attr, _) in _CONFIG_KEYS.items():
        obj = config
        for part in attr.split("."):
            obj = getattr(obj, part)
        lines.append(f"{key} = {_format_value(obj)}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> RunConfig:
    """Parse ``key = value`` lines. Blank lines and lines starting with ``;`` are ignored."""
    top: dict = {}
    weights: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith(";"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = _KEY_ALIASES.get(key, key)
        if key not in _CONFIG_KEYS:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        attr, kind = _CONFIG_KEYS[key]
        parsed = _parse_bool(value) if kind is bool else kind(value)
        if attr.startswith("loss_weights."):
            weights[attr.split(".", 1)[1]] = parsed
        else:
            top[attr] = parsed
    return RunConfig(loss_weights=LossWeights(**weights), **top)


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(config_to_text(config), encoding="utf-8")


def load_config(path) -> RunConfig:
    return config_from_text(Path(path).read_text(encoding="utf-8"))


def standardize(rgb: np.ndarray) -> np.ndarray:
    """Per-channel zero-mean / unit-variance float32 image."""
    x = rgb.astype(np.float64)
    mean = x.mean(axis=(0, 1), keepdims=True)
    std = x.std(axis=(0, 1), keepdims=True)
    return ((x - mean) / np.maximum(std, 1e-6)).astype(np.float32)


def read_mask_file(path, size: Optional[int] = None) -> np.ndarray:
    img = Image.open(path).convert("L")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.NEAREST)
    return (np.asarray(img) >= 128).astype(np.uint8)


def read_image_file(path, size: Optional[int] = None) -> tuple[np.ndarray, tuple[int, int]]:
    img = Image.open(path).convert("RGB")
    original = (img.height, img.width)
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.uint8), original


def write_mask_file(mask: np.ndarray, path) -> None:
    Image.fromarray((mask > 0).astype(np.uint8) * 255, mode="L").save(path)


def _list_by_stem(directory: Path, suffixes) -> dict[str, Path]:
    found = {}
    for p in sorted(directory.iterdir()):
        if p.is_file() and p.suffix.lower() in suffixes:
            found.setdefault(p.stem, p)
    return found


def load_dataset(root, split=Split.TRAIN, image_size: int = 384) -> list[tuple[ImageSample, GroundTruthMask]]:
    """Load ``root/<split>/{images,masks}`` pairs sorted by id.

    ``root`` may also point directly at a directory holding ``images/`` and ``masks/``.
    """
    split = Split(split)
    root = Path(root)
    base = root / split.value if (root / split.value).is_dir() else root
    image_dir, mask_dir = base / "images", base / "masks"
    if not image_dir.is_dir() or not mask_dir.is_dir():
        raise DatasetError(f"{base} must contain images/ and masks/ subdirectories")
    images = _list_by_stem(image_dir, IMAGE_SUFFIXES)
    masks = _list_by_stem(mask_dir, (".png",))
    pairs = []
    for sample_id in sorted(images):
        if sample_id not in masks:
            raise DatasetError(f"missing mask for image id {sample_id!r} in {mask_dir}")
        rgb, original = read_image_file(images[sample_id], image_size)
        mask = read_mask_file(masks[sample_id], image_size)
        pairs.append((
            ImageSample(sample_id, standardize(rgb), original, rgb=rgb),
            GroundTruthMask(mask, split, id=sample_id),
        ))
    return pairs


def area_downsample(mask: np.ndarray, factor: int) -> np.ndarray:
    """Foreground fraction of each ``factor`` x ``factor`` cell."""
    h, w = mask.shape
    if h % factor or w % factor:
        raise ValueError(f"mask {h}x{w} not divisible by {factor}")
    cells = mask.reshape(h // factor, factor, w // factor, factor).astype(np.float64)
    return cells.mean(axis=(1, 3))


def tight_box(mask: np.ndarray) -> np.ndarray:
    """Normalized (cx, cy, w, h) of the pixel-edge bounding box of a non-empty mask."""
    h, w = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    y0, y1 = rows[0], rows[-1] + 1
    x0, x1 = cols[0], cols[-1] + 1
    return np.array([(x0 + x1) / 2 / w, (y0 + y1) / 2 / h, (x1 - x0) / w, (y1 - y0) / h])


def build_supervision(gt: GroundTruthMask, image_size: Optional[int] = None,
                      min_area: int = MIN_COMPONENT_AREA) -> SupervisionTarget:
    mask = gt.mask
    if image_size is not None and mask.shape != (image_size, image_size):
        raise ValueError(f"mask shape {mask.shape} does not match image size {image_size}")
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    components = []
    for label in range(1, count + 1):
        comp = (labels == label).astype(np.uint8)
        area = int(comp.sum())
        if area >= min_area:
            components.append((area, label, comp))
    # descending area; label order (raster order of first pixel) breaks ties
    components.sort(key=lambda item: (-item[0], item[1]))
    instances = [Instance(comp, tight_box(comp)) for _, _, comp in components]
    dqs_target = (area_downsample(mask, DQS_STRIDE) >= 0.5).astype(np.uint8)
    return SupervisionTarget(mask.copy(), instances, dqs_target)
