"""Cross-fusion of patch embeddings with degradation prompts.

Pipeline: patch-token grid x prompt embeddings -> raw cosine grid ->
sigmoid normalization -> bilinear up-resize to the network input ->
three 2x average-pool downsamples, giving one weight map per network level.
The level-1 map also multiplies the shallow feature map so degradation
weighting enters the network at the input.

Everything here is a pure function of its inputs; heatmaps and pyramids are
immutable once built and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .backbone import PatchEmbeddingGrid, PromptSet, VisionLanguageBackbone, _as_batched
from .errors import ConfigError, ShapeMismatchError, ValidationError

PYRAMID_LEVELS = 4


@dataclass(frozen=True)
class DegradationHeatmap:
    """Per-patch degradation weights for one pyramid level.

    ``map`` is h x w x P with normalized values in [0, 1]; ``source_grid``
    keeps the raw g_h x g_w x P cosine values in [-1, 1] the map came from.
    """

    map: torch.Tensor
    source_grid: torch.Tensor

    def __post_init__(self):
        if self.map.dim() != 3 or self.source_grid.dim() != 3:
            raise ShapeMismatchError("heatmap tensors must be h x w x P")
        if self.map.shape[2] != self.source_grid.shape[2]:
            raise ShapeMismatchError("map and source grid disagree on prompt count")
        if self.map.min() < -1e-6 or self.map.max() > 1 + 1e-6:
            raise ValidationError("normalized heatmap values must lie in [0, 1]")
        if self.source_grid.min() < -1 - 1e-6 or self.source_grid.max() > 1 + 1e-6:
            raise ValidationError("raw similarity values must lie in [-1, 1]")

    @property
    def height(self) -> int:
        return self.map.shape[0]

    @property
    def width(self) -> int:
        return self.map.shape[1]

    @property
    def num_prompts(self) -> int:
        return self.map.shape[2]

    def chw(self) -> torch.Tensor:
        """Channel-first view (P, h, w) for network consumption."""
        return self.map.permute(2, 0, 1)


@dataclass(frozen=True)
class HeatmapPyramid:
    """Exactly 4 heatmaps at (H, H/2, H/4, H/8) relative to the network input."""

    levels: tuple[DegradationHeatmap, ...]

    def __post_init__(self):
        if len(self.levels) != PYRAMID_LEVELS:
            raise ShapeMismatchError(f"pyramid needs {PYRAMID_LEVELS} levels, got {len(self.levels)}")
        for prev, cur in zip(self.levels, self.levels[1:]):
            if cur.height * 2 != prev.height or cur.width * 2 != prev.width:
                raise ShapeMismatchError(
                    f"pyramid level {prev.height}x{prev.width} is not twice {cur.height}x{cur.width}"
                )

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i: int) -> DegradationHeatmap:
        return self.levels[i]


def compute_raw_heatmap(patches: PatchEmbeddingGrid, prompt_embeds: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of every patch token with every prompt embedding.

    Returns a g_h x g_w x P grid in [-1, 1]; entry (i, j, p) is the cosine
    between patch (i, j) and prompt p.
    """
    if prompt_embeds.dim() != 2:
        raise ShapeMismatchError("prompt embeddings must be a P x d matrix")
    if prompt_embeds.shape[1] != patches.dim:
        raise ShapeMismatchError(
            f"patch dim {patches.dim} != prompt dim {prompt_embeds.shape[1]}"
        )
    pe = prompt_embeds.to(patches.grid.dtype)
    patch_norm = patches.grid / patches.grid.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    prompt_norm = pe / pe.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    raw = torch.einsum("ijd,pd->ijp", patch_norm, prompt_norm)
    return raw.clamp(-1.0, 1.0)


def normalize_heatmap(raw: torch.Tensor, temperature: float = 10.0) -> torch.Tensor:
    """Elementwise sigmoid(temperature * raw), mapping [-1, 1] into (0, 1)."""
    if temperature <= 0:
        raise ConfigError("heatmap temperature must be positive")
    if raw.min() < -1 - 1e-6 or raw.max() > 1 + 1e-6:
        raise ValidationError("raw similarities must lie in [-1, 1]")
    return torch.sigmoid(temperature * raw)


def build_pyramid(normalized: torch.Tensor, input_h: int, input_w: int, raw: torch.Tensor | None = None) -> HeatmapPyramid:
    """Resize a normalized g_h x g_w x P grid into the 4-level pyramid.

    Level 1 is the grid bilinearly resized to (input_h, input_w); each later
    level is a 2x2 average-pool of the previous (mean preserving for even
    sizes). Inputs must already be padded to spatial multiples of 8.
    """
    if normalized.dim() != 3:
        raise ShapeMismatchError("normalized grid must be g_h x g_w x P")
    if input_h % 8 or input_w % 8:
        raise ShapeMismatchError(
            f"input size {input_h}x{input_w} must be padded to multiples of 8 before pyramid construction"
        )
    source = normalized if raw is None else raw
    chw = normalized.permute(2, 0, 1).unsqueeze(0)
    level = F.interpolate(chw, size=(input_h, input_w), mode="bilinear", align_corners=False)
    maps = [level]
    for _ in range(PYRAMID_LEVELS - 1):
        level = F.avg_pool2d(level, kernel_size=2)
        maps.append(level)
    levels = tuple(
        DegradationHeatmap(map=m[0].permute(1, 2, 0), source_grid=source) for m in maps
    )
    return HeatmapPyramid(levels=levels)


def apply_weights(f_in: torch.Tensor, heatmap: DegradationHeatmap) -> torch.Tensor:
    """Multiply a feature map by the per-patch weights (Hadamard, per pixel).

    Multi-prompt maps are averaged into a single weighting channel first;
    the channel dimension of ``f_in`` broadcasts over it, so the output
    shape equals the input shape. Accepts C x H x W or B x C x H x W.
    """
    spatial = f_in.shape[-2:]
    if spatial != (heatmap.height, heatmap.width):
        raise ShapeMismatchError(
            f"feature map spatial size {tuple(spatial)} != heatmap {(heatmap.height, heatmap.width)}"
        )
    weight = heatmap.map.mean(dim=2).to(f_in.dtype)
    return f_in * weight


def stack_pyramid_levels(pyramids: list[HeatmapPyramid]) -> list[torch.Tensor]:
    """Batch per-image pyramids into 4 tensors of shape B x P x h x w."""
    return [
        torch.stack([pyr[k].chw() for pyr in pyramids]) for k in range(PYRAMID_LEVELS)
    ]


class CrossFusionModule:
    """End-to-end heatmap construction from an input image.

    Binds a frozen backbone, a prompt set, and the sigmoid temperature. The
    heatmap is computed once per image from the raw image itself (the
    backbone consumes 3-channel images, not intermediate feature maps).
    """

    def __init__(
        self,
        backbone: VisionLanguageBackbone,
        prompt_set: PromptSet,
        temperature: float = 10.0,
    ):
        if temperature <= 0:
            raise ConfigError("heatmap temperature must be positive")
        self.backbone = backbone
        self.prompt_set = prompt_set
        self.temperature = temperature

    def raw_heatmap(self, image) -> torch.Tensor:
        with torch.no_grad():
            patches = self.backbone.encode_image_patches(image)
            prompts = self.backbone.encode_text(self.prompt_set)
            return compute_raw_heatmap(patches, prompts)

    def normalized_heatmap(self, image) -> torch.Tensor:
        return normalize_heatmap(self.raw_heatmap(image), self.temperature)

    def pyramid(self, image, input_h: int, input_w: int) -> HeatmapPyramid:
        raw = self.raw_heatmap(image)
        return build_pyramid(normalize_heatmap(raw, self.temperature), input_h, input_w, raw=raw)

    def pyramid_for_batch(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Per-image pyramids for a B x 3 x H x W batch, stacked per level."""
        if images.dim() != 4:
            raise ShapeMismatchError("expected a B x 3 x H x W batch")
        h, w = images.shape[-2:]
        return stack_pyramid_levels([self.pyramid(img, h, w) for img in images])

    def weight_features(self, f_in: torch.Tensor, pyramid: HeatmapPyramid) -> torch.Tensor:
        """Apply the level-1 degradation weights to the shallow feature map."""
        return apply_weights(f_in, pyramid[0])
