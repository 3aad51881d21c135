"""Procedural stand-in for diffusion-generated glass data, plus the job manifests
an external mask-conditioned generator would consume.

The renderer mimics three physical cues of glass inside the conditioning mask:
transparency (alpha tint), refraction (local box blur of the background) and
reflection (one specular streak). Pixels outside the mask are never touched, so
the returned mask is an exact annotation of the rendered image.
"""

from __future__ import annotations

import enum
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from ._io import atomic_write_text
from .datamodel import GroundTruthMask, ImageSample, Split, standardize

PLACEHOLDER = "<object>"

# The first three templates are canonical; the remaining twenty are neutral
# photographic variations (non-canonical).
DEFAULT_TEMPLATES = (
    "a photo of a clean <object>",
    "a close-up photo of the <object>",
    "a rendition of the <object>",
    "a photo of the <object>",
    "a bright photo of the <object>",
    "a dark photo of the <object>",
    "a photo of a large <object>",
    "a photo of a small <object>",
    "a cropped photo of the <object>",
    "a good photo of the <object>",
    "a photo of one <object>",
    "a photo of the nice <object>",
    "a low resolution photo of the <object>",
    "a blurry photo of the <object>",
    "a jpeg photo of the <object>",
    "a photo of my <object>",
    "an indoor photo of the <object>",
    "an outdoor photo of the <object>",
    "a wide-angle photo of the <object>",
    "a realistic photo of the <object>",
    "a detailed photo of the <object>",
    "a photo of the <object> in a building",
    "a street photo of the <object>",
)


class LeakageError(ValueError):
    """A validation-split mask was offered as a generation condition."""


class Tier(str, enum.Enum):
    X1 = "x1"
    X5 = "x5"
    X10 = "x10"
    X20 = "x20"

    @property
    def multiplicity(self) -> int:
        return int(self.value[1:])


TIERS = tuple(Tier)


@dataclass
class PromptBank:
    templates: tuple[str, ...] = DEFAULT_TEMPLATES
    object_word: str = "transparent glasses"

    def __post_init__(self):
        self.templates = tuple(self.templates)
        if not self.templates:
            raise ValueError("prompt bank needs at least one template")
        for t in self.templates:
            if t.count(PLACEHOLDER) != 1:
                raise ValueError(f"template must contain {PLACEHOLDER} exactly once: {t!r}")

    def __len__(self):
        return len(self.templates)

    def prompt(self, i: int) -> str:
        return self.templates[i % len(self.templates)].replace(PLACEHOLDER, self.object_word)


@dataclass(frozen=True)
class GenerationJob:
    job_id: str
    conditioning_mask_id: str
    prompt: str
    scale_tier: Tier
    seed: int
    source_split: Split = Split.TRAIN

    def __post_init__(self):
        object.__setattr__(self, "scale_tier", Tier(self.scale_tier))
        object.__setattr__(self, "source_split", Split(self.source_split))
        if self.source_split is not Split.TRAIN:
            raise LeakageError(
                f"job {self.job_id}: only training masks may condition generation "
                "(validation masks would leak into the synthetic set)"
            )


@dataclass
class ScaleManifest:
    tier: Tier
    jobs: list[GenerationJob] = field(default_factory=list)
    target_count: int = 0


def build_manifests(mask_pool: Sequence[GroundTruthMask], bank: PromptBank | None = None,
                    base_seed: int = 0, tiers: Iterable[Tier] = TIERS) -> dict[Tier, ScaleManifest]:
    """One manifest per tier with ``multiplicity`` jobs per conditioning mask.

    Prompts are assigned round-robin in job order within each tier. Seeds are
    ``base_seed`` plus the job's position in the full x1..x20 sequence, so they are
    unique across tiers even when only a subset of tiers is requested.
    """
    bank = bank or PromptBank()
    for i, gt in enumerate(mask_pool):
        if Split(gt.source_split) is not Split.TRAIN:
            raise LeakageError(
                f"mask {gt.id or i!r} is from the {Split(gt.source_split).value} split; "
                "validation masks must not condition generation (leakage guard)"
            )
    ids = [gt.id or f"m{i:06d}" for i, gt in enumerate(mask_pool)]
    if len(set(ids)) != len(ids):
        raise ValueError("conditioning mask ids must be unique")
    wanted = {Tier(t) for t in tiers}
    manifests: dict[Tier, ScaleManifest] = {}
    offset = 0
    for tier in TIERS:
        m = tier.multiplicity
        if tier in wanted:
            jobs = []
            for pos in range(len(ids) * m):
                mask_id, replica = ids[pos // m], pos % m
                jobs.append(GenerationJob(
                    job_id=f"{tier.value}-{mask_id}-{replica:02d}",
                    conditioning_mask_id=mask_id,
                    prompt=bank.prompt(pos),
                    scale_tier=tier,
                    seed=base_seed + offset + pos,
                ))
            manifests[tier] = ScaleManifest(tier, jobs, target_count=len(ids) * m)
        offset += len(ids) * m
    return manifests


def _job_record(job: GenerationJob) -> dict:
    record = asdict(job)
    record["scale_tier"] = job.scale_tier.value
    record["source_split"] = job.source_split.value
    return record


def export_jobs(manifests: Mapping[Tier, ScaleManifest], path) -> int:
    """Write one JSON record per line; returns the record count."""
    lines = [json.dumps(_job_record(job), sort_keys=True)
             for tier in TIERS if tier in manifests
             for job in manifests[tier].jobs]
    atomic_write_text(path, "".join(line + "\n" for line in lines))
    return len(lines)


def import_jobs(path) -> list[GenerationJob]:
    jobs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            jobs.append(GenerationJob(**json.loads(line)))
    return jobs


def manifests_from_jobs(jobs: Iterable[GenerationJob]) -> dict[Tier, ScaleManifest]:
    manifests: dict[Tier, ScaleManifest] = {}
    for job in jobs:
        manifests.setdefault(job.scale_tier, ScaleManifest(job.scale_tier)).jobs.append(job)
    for manifest in manifests.values():
        manifest.target_count = len(manifest.jobs)
    return dict(sorted(manifests.items(), key=lambda kv: TIERS.index(kv[0])))


# --- rendering ---------------------------------------------------------------

def _rng(seed: int, key: str, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(key.encode()), stream])


def _value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    grid = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1, 3))
    return ndimage.zoom(grid, (size / (cells + 1), size / (cells + 1), 1), order=1)[:size, :size]


def render_background(size: int, seed: int, key: str = "") -> np.ndarray:
    """Seeded float RGB background in [0, 255]: gradient, noise octaves, rectangles."""
    rng = _rng(seed, key, 0)
    c0, c1 = rng.uniform(0, 255, size=(2, 3))
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    t = (np.cos(angle) * xx + np.sin(angle) * yy)
    t = (t - t.min()) / max(np.ptp(t), 1e-9)
    img = c0 + (c1 - c0) * t[..., None]
    for octave, cells in enumerate((2, 4, 8, 16)):
        img += 40.0 / (2 ** octave) * _value_noise(rng, size, min(cells, size))
    for _ in range(int(rng.integers(3, 9))):
        x0, y0 = rng.integers(0, size, size=2)
        w, h = rng.integers(size // 16 + 1, size // 2 + 2, size=2)
        color = rng.uniform(0, 255, size=3)
        alpha = rng.uniform(0.5, 1.0)
        region = img[y0:y0 + h, x0:x0 + w]
        region[:] = (1 - alpha) * region + alpha * color
    return np.clip(img, 0, 255)


def render_rgb(mask: np.ndarray, seed: int, key: str = "") -> np.ndarray:
    """Render an 8-bit RGB image whose glass pixels are exactly ``mask == 1``."""
    size = mask.shape[0]
    if mask.shape != (size, size):
        raise ValueError(f"renderer expects a square mask, got {mask.shape}")
    background = render_background(size, seed, key)
    base = np.rint(background).astype(np.uint8)
    inside = mask.astype(bool)
    if not inside.any():
        return base

    rng = _rng(seed, key, 1)
    blurred = ndimage.uniform_filter(background, size=(5, 5, 1), mode="reflect")
    tint = rng.uniform([120, 150, 160], [200, 230, 255])
    alpha = rng.uniform(0.2, 0.45)
    glass = (1 - alpha) * blurred + alpha * tint

    rows, cols = np.nonzero(inside)
    k = rng.integers(len(rows))
    py, px = rows[k], cols[k]
    theta = rng.uniform(0, np.pi)
    width = rng.uniform(0.03, 0.08) * size
    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.abs(np.cos(theta) * (yy - py) - np.sin(theta) * (xx - px))
    streak = rng.uniform(0.4, 0.8) * np.exp(-((dist / width) ** 2))
    glass = glass + streak[..., None] * (255.0 - glass)

    out = base.copy()
    out[inside] = np.clip(np.rint(glass[inside]), 0, 255).astype(np.uint8)
    # a glass pixel must differ from its background; nudge exact collisions by one level
    same = inside & (out == base).all(axis=-1)
    if same.any():
        ch = out[same, 0]
        out[same, 0] = np.where(ch < 255, ch + 1, ch - 1)
    return out


def render_procedural(job: GenerationJob, mask: GroundTruthMask, size: int) -> tuple[ImageSample, GroundTruthMask]:
    if size % 32:
        raise ValueError(f"render size must be divisible by 32, got {size}")
    if mask.mask.shape != (size, size):
        raise ValueError(f"conditioning mask is {mask.mask.shape}, expected {(size, size)}")
    rgb = render_rgb(mask.mask, job.seed, job.job_id)
    sample = ImageSample(job.job_id, standardize(rgb), (size, size), rgb=rgb)
    return sample, GroundTruthMask(mask.mask.copy(), Split.TRAIN, id=job.job_id)


def random_glass_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    """Window-like conditioning mask: one or two panes, optionally split by a mullion."""
    mask = np.zeros((size, size), dtype=np.uint8)
    for _ in range(int(rng.integers(1, 3))):
        h, w = rng.integers(size // 4, size // 2 + size // 8, size=2)
        y0 = int(rng.integers(0, size - h + 1))
        x0 = int(rng.integers(0, size - w + 1))
        mask[y0:y0 + h, x0:x0 + w] = 1
        if rng.random() < 0.3 and w >= size // 3:
            bar = max(size // 32, 2)
            mid = x0 + w // 2
            mask[y0:y0 + h, mid - bar // 2:mid - bar // 2 + bar] = 0
    return mask


def procedural_mask_pool(n: int, size: int, seed: int = 0) -> list[GroundTruthMask]:
    rng = np.random.default_rng(seed)
    return [GroundTruthMask(random_glass_mask(rng, size), Split.TRAIN, id=f"mask{i:04d}") for i in range(n)]


def procedural_dataset(n: int, size: int, seed: int = 0) -> list[tuple[ImageSample, GroundTruthMask]]:
    """Render the x1 tier of a procedural mask pool."""
    pool = procedural_mask_pool(n, size, seed)
    manifest = build_manifests(pool, base_seed=seed, tiers=[Tier.X1])[Tier.X1]
    by_id = {gt.id: gt for gt in pool}
    return [render_procedural(job, by_id[job.conditioning_mask_id], size) for job in manifest.jobs]
