"""Image I/O and spatial padding helpers.

All images cross the API boundary as float arrays/tensors in [0, 1].
On disk the only supported format is 8-bit RGB PNG; the [0, 255] <-> [0, 1]
mapping is plain division so that save/load round-trips are exact up to
quantization.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ShapeMismatchError, ValidationError


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Load an 8-bit RGB PNG as an H x W x 3 float32 array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(arr: np.ndarray, path: str | os.PathLike) -> None:
    """Save an H x W x 3 array in [0, 1] as 8-bit RGB PNG (values clipped)."""
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeMismatchError(f"expected H x W x 3 image, got shape {arr.shape}")
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def validate_image(arr: np.ndarray) -> np.ndarray:
    """Check an H x W x 3 image for shape and finiteness; returns float32 view."""
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeMismatchError(f"expected H x W x 3 image, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError("image contains NaN or infinite pixels")
    return arr


def to_tensor(arr: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """H x W x 3 array in [0, 1] -> 1 x 3 x H x W tensor."""
    arr = validate_image(arr)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(dtype).unsqueeze(0)


def to_array(t: torch.Tensor) -> np.ndarray:
    """1 x 3 x H x W (or 3 x H x W) tensor -> H x W x 3 float32 array."""
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise ShapeMismatchError("to_array expects a single image")
        t = t[0]
    return t.detach().cpu().float().numpy().transpose(1, 2, 0)


def pad_to_multiple(t: torch.Tensor, multiple: int = 8) -> tuple[torch.Tensor, tuple[int, int]]:
    """Reflect-pad a B x C x H x W tensor on the bottom/right to spatial multiples.

    Returns the padded tensor and the original (H, W) needed by :func:`crop_to`.
    """
    h, w = t.shape[-2:]
    ph = (multiple - h % multiple) % multiple
    pw = (multiple - w % multiple) % multiple
    if ph or pw:
        t = F.pad(t, (0, pw, 0, ph), mode="reflect")
    return t, (h, w)


def crop_to(t: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Undo :func:`pad_to_multiple` by cropping back to the original size."""
    h, w = size
    return t[..., :h, :w]


def false_color(values: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to an H x W x 3 blue->cyan->yellow->red ramp."""
    v = np.clip(np.asarray(values, dtype=np.float32), 0.0, 1.0)
    stops = np.array([0.0, 1 / 3, 2 / 3, 1.0])
    colors = np.array(
        [[0.0, 0.0, 0.55], [0.0, 0.85, 0.85], [0.95, 0.9, 0.1], [0.85, 0.05, 0.05]],
        dtype=np.float32,
    )
    out = np.empty(v.shape + (3,), dtype=np.float32)
    for c in range(3):
        out[..., c] = np.interp(v, stops, colors[:, c])
    return out


def overlay_heatmap(image: np.ndarray, heat: np.ndarray, alpha: float = 0.45) -> np.ndarray:
    """Blend a false-colored heat map (H x W in [0,1]) over an RGB image."""
    image = validate_image(image)
    if heat.shape != image.shape[:2]:
        raise ShapeMismatchError(
            f"heat map shape {heat.shape} does not match image {image.shape[:2]}"
        )
    return (1.0 - alpha) * image + alpha * false_color(heat)
