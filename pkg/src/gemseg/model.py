"""End-to-end segmentor: encoder -> feature pyramid -> query selection -> mask decoder."""

from __future__ import annotations

import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
from torch import Tensor, nn

from ._io import atomic_path
from .datamodel import RunConfig, SelectionSource, config_from_text, config_to_text
from .decoder import DecoderOutput, MaskDecoder, QuerySet, semantic_inference
from .dqs import ConfidenceHead, ConfidenceMap, LevelScorers, SelectionResult, aggregate, alt_select, select_topk
from .encoder import FeatureAdapter, ToyViT
from .pyramid import FeaturePyramid, SimpleFeaturePyramid

CHECKPOINT_FORMAT = "gemseg-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class GEMOutput:
    base: Tensor
    pyramid: FeaturePyramid
    aggregated: Tensor
    confidence_maps: list[ConfidenceMap]
    selection: SelectionResult
    queries: QuerySet
    decoder: DecoderOutput


class GEM(nn.Module):
    def __init__(self, config: RunConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.encoder = ToyViT(d, config.encoder_depth, config.num_heads, config.grid_size, config.dropout)
        self.adapter = FeatureAdapter(config.import_width or d, d)
        self.pyramid = SimpleFeaturePyramid(d)
        if config.selection_source is SelectionSource.DQS:
            self.dqs_head = ConfidenceHead(d)
        else:
            self.level_scorers = LevelScorers(d)
        self.decoder = MaskDecoder(d, config.num_queries, config.decoder_layers, config.num_heads,
                                   dropout=config.dropout)

    def select(self, pyramid: FeaturePyramid, aggregated: Tensor) -> tuple[SelectionResult, list[ConfidenceMap]]:
        k = self.config.num_queries
        if self.config.selection_source is SelectionSource.DQS:
            cm = self.dqs_head(aggregated)
            return select_topk(cm, aggregated, k, dedup=self.config.dedup_selection), [cm]
        selection = alt_select(pyramid, self.level_scorers, self.config.selection_source, k)
        return selection, selection.level_maps

    def forward(self, images: Optional[Tensor] = None, features: Optional[Tensor] = None) -> GEMOutput:
        """Either images (B, 3, H, W) or precomputed base features (B, d_in, H/16, W/16)."""
        if (images is None) == (features is None):
            raise ValueError("pass exactly one of images or features")
        base = self.encoder(images) if features is None else self.adapter(features)
        pyramid = self.pyramid(base)
        f = aggregate(pyramid.c3, pyramid.c4, pyramid.c5)
        selection, maps = self.select(pyramid, f)
        queries = self.decoder.init_queries(selection, self.config.dqs_init)
        memory = self.decoder.flatten_memory(pyramid)
        out = self.decoder(queries, memory, pyramid.c2)
        return GEMOutput(base, pyramid, f, maps, selection, queries, out)

    @torch.no_grad()
    def predict_probs(self, images: Tensor) -> Tensor:
        """(B, H, W) glass probabilities."""
        return semantic_inference(self(images).decoder.last)


def build_model(config: RunConfig, seed: Optional[int] = None) -> GEM:
    torch.manual_seed(config.seed if seed is None else seed)
    return GEM(config)


def parameter_manifest(model: nn.Module) -> dict[str, list[int]]:
    return {name: list(t.shape) for name, t in model.state_dict().items()}


def save_checkpoint(model: GEM, path, extra: Optional[dict] = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config_to_text(model.config),
        "manifest": parameter_manifest(model),
        "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    with atomic_path(path) as tmp:
        torch.save(payload, tmp)


def _read(path) -> dict:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def load_state(model: GEM, payload_or_path) -> dict:
    """Load parameters into ``model``, rejecting any name or shape mismatch."""
    payload = payload_or_path if isinstance(payload_or_path, dict) else _read(payload_or_path)
    expected = parameter_manifest(model)
    manifest = payload["manifest"]
    missing = sorted(set(expected) - set(manifest))
    unexpected = sorted(set(manifest) - set(expected))
    mismatched = sorted(k for k in set(expected) & set(manifest) if list(expected[k]) != list(manifest[k]))
    for name, tensor in payload["state"].items():
        if list(tensor.shape) != list(manifest.get(name, [])):
            mismatched.append(name)
    if missing or unexpected or mismatched:
        raise CheckpointError(
            f"checkpoint does not fit model: missing={missing[:5]} unexpected={unexpected[:5]} "
            f"shape mismatch={sorted(set(mismatched))[:5]}"
        )
    model.load_state_dict(payload["state"])
    return payload


def load_checkpoint(path) -> tuple[GEM, dict]:
    payload = _read(path)
    config = config_from_text(payload["config"])
    model = GEM(config)
    load_state(model, payload)
    model.eval()
    return model, payload
