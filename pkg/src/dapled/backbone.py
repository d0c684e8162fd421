"""Frozen vision-language encoder pair (image encoder + text encoder).

Two interchangeable implementations sit behind the same interface:

* :class:`ClipBackbone` -- a real pretrained CLIP ViT-L/14 loaded through
  ``transformers`` (weights resolved from a local directory, see
  ``DAPLED_BACKBONE_DIR``).
* :class:`StubBackbone` -- a deterministic seeded stand-in for tests and
  CPU-only environments. Its pooling and projection formulas are documented
  exactly so an independent re-implementation reproduces it.

Both expose patch-token grids (no class token), pooled global embeddings,
text embeddings, and zero-shot degradation scoring. Weights are immutable
after construction and all encoders are safe for concurrent read-only use.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericError, ShapeMismatchError, ValidationError

DEFAULT_GRID = 16

# Text prompts describing each degradation mode, keyed by preset name.
PROMPT_PRESETS = {
    "joint": [("This is a low-light and blurry image.", "joint")],
    "lowlight": [("This is a low-light image.", "lowlight-only")],
    "deblur": [("This is a blurry image.", "blur-only")],
}


@dataclass
class PatchEmbeddingGrid:
    """Grid of patch-token embeddings, g_h x g_w x d, class token excluded."""

    grid: torch.Tensor
    grid_h: int
    grid_w: int
    dim: int

    def __post_init__(self):
        if self.grid_h <= 0 or self.grid_w <= 0 or self.dim <= 0:
            raise ValidationError("patch grid dimensions must be positive")
        if tuple(self.grid.shape) != (self.grid_h, self.grid_w, self.dim):
            raise ShapeMismatchError(
                f"grid shape {tuple(self.grid.shape)} != ({self.grid_h}, {self.grid_w}, {self.dim})"
            )
        if not torch.isfinite(self.grid).all():
            raise ValidationError("patch embeddings contain non-finite entries")


@dataclass
class GlobalEmbedding:
    """Pooled, projection-applied whole-image or whole-text embedding."""

    vec: torch.Tensor

    def __post_init__(self):
        if self.vec.dim() != 1:
            raise ShapeMismatchError(f"expected 1-D embedding, got shape {tuple(self.vec.shape)}")
        if not torch.isfinite(self.vec).all():
            raise ValidationError("embedding contains non-finite entries")

    @property
    def dim(self) -> int:
        return self.vec.shape[0]


class PromptSet:
    """Ordered degradation text descriptions with a lazily cached encoding.

    The embedding cache is keyed by the encoding backbone and guarded by a
    lock so concurrent first calls initialize it exactly once.
    """

    def __init__(self, prompts: list[str], roles: list[str] | None = None):
        if not prompts:
            raise ValidationError("prompt set must be non-empty")
        for p in prompts:
            if not isinstance(p, str) or not p.strip():
                raise ValidationError("prompts must be non-empty strings")
        self.prompts = list(prompts)
        self.roles = list(roles) if roles is not None else ["joint"] * len(prompts)
        if len(self.roles) != len(self.prompts):
            raise ValidationError("one role tag per prompt required")
        self._cache: dict[int, torch.Tensor] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.prompts)

    def embeddings_for(self, backbone: "VisionLanguageBackbone") -> torch.Tensor:
        """P x d embedding matrix, computed once per backbone and cached."""
        key = id(backbone)
        with self._lock:
            if key not in self._cache:
                self._cache[key] = backbone._encode_prompts(self.prompts)
        emb = self._cache[key]
        if emb.shape[0] != len(self.prompts):
            raise ShapeMismatchError("cached embedding row count does not match prompt count")
        return emb

    @classmethod
    def preset(cls, name: str) -> "PromptSet":
        if name not in PROMPT_PRESETS:
            raise ConfigError(f"unknown prompt preset {name!r}; choose from {sorted(PROMPT_PRESETS)}")
        pairs = PROMPT_PRESETS[name]
        return cls([p for p, _ in pairs], [r for _, r in pairs])


def _as_batched(image, dtype: torch.dtype) -> torch.Tensor:
    """Accept H x W x 3 arrays or (1,)3 x H x W tensors; return 1 x 3 x H x W."""
    if isinstance(image, np.ndarray):
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeMismatchError(f"expected H x W x 3 image array, got {image.shape}")
        t = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))
    elif isinstance(image, torch.Tensor):
        t = image
    else:
        raise ValidationError(f"unsupported image type {type(image).__name__}")
    if t.dim() == 3:
        t = t.unsqueeze(0)
    if t.dim() != 4 or t.shape[0] != 1 or t.shape[1] != 3:
        raise ShapeMismatchError(f"expected a single 3-channel image, got shape {tuple(t.shape)}")
    if not torch.isfinite(t).all():
        raise ValidationError("image contains non-finite pixels")
    return t.to(dtype)


def _l2_normalize(x: torch.Tensor, what: str) -> torch.Tensor:
    norm = x.norm(dim=-1, keepdim=True)
    if (norm < 1e-12).any():
        raise NumericError(f"zero-norm {what}; cosine similarity is undefined")
    return x / norm


class VisionLanguageBackbone:
    """Interface shared by the pretrained and stub encoder pairs."""

    embed_dim: int
    grid_h: int
    grid_w: int

    def encode_image_patches(self, image) -> PatchEmbeddingGrid:
        raise NotImplementedError

    def encode_image_global(self, image) -> GlobalEmbedding:
        raise NotImplementedError

    def _encode_prompts(self, prompts: list[str]) -> torch.Tensor:
        raise NotImplementedError

    def encode_text(self, prompt_set: PromptSet) -> torch.Tensor:
        """P x d embeddings, one row per prompt, order preserved."""
        return prompt_set.embeddings_for(self)

    def score_degradations(
        self, image, prompt_set: PromptSet, softmax: bool = False, softmax_scale: float = 100.0
    ) -> list[tuple[str, float]]:
        """Cosine similarity between the global image embedding and each prompt.

        With ``softmax=True`` the cosine scores are rescaled by
        ``softmax_scale`` and normalized across prompts, mimicking zero-shot
        classification readouts.
        """
        with torch.no_grad():
            img = _l2_normalize(self.encode_image_global(image).vec, "image embedding")
            txt = _l2_normalize(self.encode_text(prompt_set).to(img.dtype), "text embedding")
            scores = txt @ img
            if softmax:
                scores = torch.softmax(softmax_scale * scores, dim=0)
        return list(zip(prompt_set.prompts, [float(s) for s in scores]))


class StubBackbone(VisionLanguageBackbone):
    """Seeded, fully specified encoder pair for deterministic tests.

    All projection matrices are drawn once from
    ``numpy.random.default_rng(seed).standard_normal`` in this exact order:

    1. ``P_patch``: shape (dim, 3)
    2. ``P_image``: shape (dim, grid_h * grid_w * 3)
    3. ``P_text``:  shape (dim, 256)

    Encodings are then:

    * cell means: per-channel adaptive average pooling of the image onto the
      (grid_h, grid_w) grid, where output cell i covers input rows
      ``floor(i * H / grid_h)`` to ``ceil((i + 1) * H / grid_h)`` (same rule
      for columns);
    * patch embedding (i, j) = l2-normalize(P_patch @ cell_mean[i, j]);
    * global embedding = l2-normalize(P_image @ flatten(cell_means)) with
      row-major (i, j, channel) flattening;
    * text embedding = l2-normalize(P_text @ h) where h counts each byte
      value 0..255 in the UTF-8 encoding of the prompt.
    """

    def __init__(
        self,
        seed: int = 0,
        embed_dim: int = 32,
        grid: tuple[int, int] = (DEFAULT_GRID, DEFAULT_GRID),
        dtype: torch.dtype = torch.float32,
    ):
        if embed_dim <= 0:
            raise ConfigError("embed_dim must be positive")
        self.seed = seed
        self.embed_dim = embed_dim
        self.grid_h, self.grid_w = grid
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self._p_patch = torch.from_numpy(rng.standard_normal((embed_dim, 3))).to(dtype)
        self._p_image = torch.from_numpy(
            rng.standard_normal((embed_dim, self.grid_h * self.grid_w * 3))
        ).to(dtype)
        self._p_text = torch.from_numpy(rng.standard_normal((embed_dim, 256))).to(dtype)

    def _cell_means(self, image) -> torch.Tensor:
        x = _as_batched(image, self.dtype)
        return F.adaptive_avg_pool2d(x, (self.grid_h, self.grid_w))[0].permute(1, 2, 0)

    def encode_image_patches(self, image) -> PatchEmbeddingGrid:
        cells = self._cell_means(image)  # gh x gw x 3
        grid = _l2_normalize(cells @ self._p_patch.T, "patch embedding")
        return PatchEmbeddingGrid(grid=grid, grid_h=self.grid_h, grid_w=self.grid_w, dim=self.embed_dim)

    def encode_image_global(self, image) -> GlobalEmbedding:
        cells = self._cell_means(image)
        vec = _l2_normalize(cells.reshape(-1) @ self._p_image.T, "image embedding")
        return GlobalEmbedding(vec=vec)

    def _encode_prompts(self, prompts: list[str]) -> torch.Tensor:
        rows = []
        for p in prompts:
            if not p:
                raise ValidationError("cannot encode an empty prompt")
            hist = np.bincount(np.frombuffer(p.encode("utf-8"), dtype=np.uint8), minlength=256)
            h = torch.from_numpy(hist.astype(np.float64)).to(self.dtype)
            rows.append(_l2_normalize(h @ self._p_text.T, "text embedding"))
        return torch.stack(rows)


class ClipBackbone(VisionLanguageBackbone):
    """Frozen pretrained CLIP ViT-L/14 behind the shared interface.

    Weights come from ``weights_dir`` or the ``DAPLED_BACKBONE_DIR``
    environment variable (a directory saved via ``transformers``). Inputs of
    any size are bilinearly resized to the native 224 x 224 resolution and
    normalized with the CLIP pixel statistics, keeping the whole image
    branch differentiable with respect to the input.

    Patch tokens are taken from the vision transformer without the class
    token, layer-normalized, and mapped through the visual projection so
    they live in the shared image-text embedding space.
    """

    NATIVE_SIZE = 224
    PIXEL_MEAN = (0.48145466, 0.4578275, 0.40821073)
    PIXEL_STD = (0.26862954, 0.26130258, 0.27577711)

    def __init__(self, weights_dir: str | None = None):
        try:
            from transformers import CLIPModel, CLIPTokenizer
        except ImportError as e:  # pragma: no cover - transformers is an extra
            raise ConfigError(
                "the pretrained backbone requires the 'transformers' package; "
                "install with pip install dapled[clip]"
            ) from e
        location = weights_dir or os.environ.get("DAPLED_BACKBONE_DIR")
        if not location:
            raise ConfigError(
                "no backbone weights configured; set DAPLED_BACKBONE_DIR or pass weights_dir"
            )
        self._model = CLIPModel.from_pretrained(location)
        self._tokenizer = CLIPTokenizer.from_pretrained(location)
        self._model.eval()
        for p in self._model.parameters():
            p.requires_grad_(False)
        self.embed_dim = self._model.config.projection_dim
        patch = self._model.config.vision_config.patch_size
        self.grid_h = self.grid_w = self.NATIVE_SIZE // patch
        self._mean = torch.tensor(self.PIXEL_MEAN).view(1, 3, 1, 1)
        self._std = torch.tensor(self.PIXEL_STD).view(1, 3, 1, 1)

    def _preprocess(self, image) -> torch.Tensor:
        x = _as_batched(image, torch.float32)
        if x.shape[-2:] != (self.NATIVE_SIZE, self.NATIVE_SIZE):
            x = F.interpolate(
                x, size=(self.NATIVE_SIZE, self.NATIVE_SIZE), mode="bilinear", align_corners=False
            )
        return (x - self._mean) / self._std

    def encode_image_patches(self, image) -> PatchEmbeddingGrid:
        pixel_values = self._preprocess(image)
        out = self._model.vision_model(pixel_values=pixel_values)
        tokens = out.last_hidden_state[:, 1:, :]  # drop the class token
        tokens = self._model.vision_model.post_layernorm(tokens)
        tokens = self._model.visual_projection(tokens)
        grid = tokens[0].reshape(self.grid_h, self.grid_w, self.embed_dim)
        return PatchEmbeddingGrid(grid=grid, grid_h=self.grid_h, grid_w=self.grid_w, dim=self.embed_dim)

    def encode_image_global(self, image) -> GlobalEmbedding:
        pixel_values = self._preprocess(image)
        feats = self._model.get_image_features(pixel_values=pixel_values)
        return GlobalEmbedding(vec=feats[0])

    def _encode_prompts(self, prompts: list[str]) -> torch.Tensor:
        for p in prompts:
            if not p:
                raise ValidationError("cannot encode an empty prompt")
        tokens = self._tokenizer(prompts, padding=True, return_tensors="pt")
        with torch.no_grad():
            feats = self._model.get_text_features(**tokens)
        return feats


def create_backbone(
    name: str = "stub",
    seed: int = 0,
    stub_dim: int = 32,
    weights_dir: str | None = None,
    dtype: torch.dtype = torch.float32,
) -> VisionLanguageBackbone:
    """Build a backbone from a config key: ``"stub"`` or ``"vit-l-14"``."""
    if name == "stub":
        return StubBackbone(seed=seed, embed_dim=stub_dim, dtype=dtype)
    if name == "vit-l-14":
        return ClipBackbone(weights_dir=weights_dir)
    raise ConfigError(f"unknown backbone {name!r}; choose 'stub' or 'vit-l-14'")
