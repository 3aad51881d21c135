"""Simple feature pyramid: four scales from the single 1/16 base map, no top-down fusion."""

from __future__ import annotations

from dataclasses import dataclass

from torch import Tensor, nn
import torch.nn.functional as F


@dataclass
class FeaturePyramid:
    c2: Tensor  # (B, d, H/4, W/4)
    c3: Tensor  # (B, d, H/8, W/8)
    c4: Tensor  # (B, d, H/16, W/16)
    c5: Tensor  # (B, d, H/32, W/32)

    def levels(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return self.c2, self.c3, self.c4, self.c5

    def shapes(self) -> list[tuple[int, int]]:
        return [tuple(t.shape[-2:]) for t in self.levels()]


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis of an NCHW map."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


def _refine(d: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(d, d, 1, bias=False),
        LayerNorm2d(d),
        nn.Conv2d(d, d, 3, padding=1, bias=False),
        LayerNorm2d(d),
    )


class SimpleFeaturePyramid(nn.Module):
    def __init__(self, d_model: int = 256):
        super().__init__()
        # single 4x4 stride-4 deconvolution rather than two stacked stride-2 ones
        self.up4 = nn.ConvTranspose2d(d_model, d_model, kernel_size=4, stride=4)
        self.up2 = nn.ConvTranspose2d(d_model, d_model, kernel_size=2, stride=2)
        self.refine = nn.ModuleList(_refine(d_model) for _ in range(4))

    def raw_branches(self, base: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Branch outputs before the 1x1/3x3 refinement convs."""
        if base.ndim != 4:
            raise ValueError(f"expected (B, d, h, w) base feature, got {tuple(base.shape)}")
        h, w = base.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"base feature {h}x{w} has an odd side; the 1/32 level would be fractional")
        return self.up4(base), self.up2(base), base, F.max_pool2d(base, kernel_size=2, stride=2)

    def forward(self, base: Tensor) -> FeaturePyramid:
        branches = self.raw_branches(base)
        return FeaturePyramid(*(refine(x) for refine, x in zip(self.refine, branches)))
