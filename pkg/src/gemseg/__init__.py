"""Glass surface segmentation with a simple feature pyramid, discerning query
selection and a query-based mask decoder, plus a mask-conditioned synthetic
data pipeline and evaluation tools."""

from .datamodel import (
    GroundTruthMask, ImageSample, LossWeights, RunConfig, SelectionSource, SupervisionTarget, build_supervision,
    load_config, load_dataset, save_config,
)
from .metrics import MetricReport, evaluate
from .model import GEM, build_model, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "GEM", "GroundTruthMask", "ImageSample", "LossWeights", "MetricReport", "RunConfig", "SelectionSource",
    "SupervisionTarget", "build_model", "build_supervision", "evaluate", "load_checkpoint", "load_config",
    "load_dataset", "save_checkpoint", "save_config",
]
