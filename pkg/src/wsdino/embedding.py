"""Field-level embeddings: four-crop centre median per channel, then channel concatenation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DegenerateInputError, ShapeError, StructureError
from .synthgen import CHANNELS


@dataclass
class EmbeddingRecord:
    image_id: str
    channel: str
    vector: np.ndarray
    meta: dict = field(default_factory=dict)


def centre_quadrants(image, crop=224):
    """Split the centred ``2*crop`` square window into four non-overlapping crops (TL, TR, BL, BR)."""
    image = np.asarray(image)
    height, width = image.shape[-2:]
    window = 2 * crop
    if height < window or width < window:
        raise ShapeError(f"image {height}x{width} smaller than the {window}x{window} centre window")
    top = (height - window) // 2
    left = (width - window) // 2
    return [
        image[..., top + r * crop: top + (r + 1) * crop, left + c * crop: left + (c + 1) * crop]
        for r in (0, 1) for c in (0, 1)
    ]


def model_encoder(model, batch_size=256):
    """Adapt a ``WSDinoNet`` into a crops -> class-embedding function."""

    def encode(crops):
        x = torch.as_tensor(np.asarray(crops), dtype=torch.float32)
        model.eval()
        out = []
        with torch.no_grad():
            for start in range(0, len(x), batch_size):
                out.append(model.backbone(x[start:start + batch_size]))
        return torch.cat(out).double().numpy()

    return encode


def field_embedding(image, encoder, crop=224):
    """Elementwise median of the encodings of the four centre crops.

    ``encoder`` maps a stack of crops ``(4, crop, crop)`` to vectors ``(4, D)``.
    """
    crops = np.stack(centre_quadrants(image, crop))
    return np.median(np.asarray(encoder(crops)), axis=0)


def field_embeddings(images, encoder, crop=224):
    """Vectorised :func:`field_embedding` over a stack of images ``(N, H, W)``."""
    images = np.asarray(images)
    crops = np.stack(centre_quadrants(images, crop), axis=1)  # (N, 4, c, c)
    vecs = np.asarray(encoder(crops.reshape(-1, crop, crop)))
    return np.median(vecs.reshape(len(images), 4, -1), axis=1)


def concat_and_normalize(per_channel, order=CHANNELS):
    """Concatenate channel vectors in ``order`` and scale to unit L2 norm.

    ``per_channel`` is a mapping channel -> vector, or a sequence already in ``order``.
    """
    if isinstance(per_channel, dict):
        missing = [c for c in order if c not in per_channel]
        if missing:
            raise StructureError(f"missing channels {missing}")
        parts = [np.asarray(per_channel[c], dtype=np.float64) for c in order]
    else:
        parts = [np.asarray(v, dtype=np.float64) for v in per_channel]
        if len(parts) != len(order):
            raise StructureError(f"expected {len(order)} channel vectors, got {len(parts)}")
    vec = np.concatenate(parts, axis=-1)
    norm = np.linalg.norm(vec, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise DegenerateInputError("zero concatenated embedding")
    return vec / norm
