"""Field-of-view pre-processing: illumination correction, bicubic resize, clip, normalise.

The fixed order is correct -> resize -> clip -> normalise (see :func:`preprocess`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import DegenerateInputError, ParameterError, ShapeError

ILLUM_EPS = 1e-6


@dataclass
class CorrectedImage:
    pixels: np.ndarray
    image_id: str = ""
    steps: list = field(default_factory=list)


def illumination_function(image, filter_size=320, eps=ILLUM_EPS, rescale=None) -> np.ndarray:
    """Gaussian smoothing with sigma = filter_size / 6 and reflective borders, floored at ``eps``.

    ``rescale="mean"`` divides the function by its mean so that corrected intensities stay
    in raw units; ``None`` leaves it unscaled (corrected values are then ratios near 1).
    """
    if filter_size <= 0:
        raise ParameterError(f"filter_size must be positive, got {filter_size}")
    smooth = ndimage.gaussian_filter(np.asarray(image, dtype=np.float64), sigma=filter_size / 6.0, mode="reflect")
    smooth = np.maximum(smooth, eps)
    if rescale == "mean":
        smooth = smooth / smooth.mean()
    elif rescale is not None:
        raise ParameterError(f"unknown rescale mode {rescale!r}")
    return smooth


def illumination_correct(image, filter_size=320, eps=ILLUM_EPS, rescale=None) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image / illumination_function(image, filter_size, eps, rescale)


def resize_bicubic(image, target=(640, 512)) -> np.ndarray:
    """Bicubic resize to ``target = (width, height)``, antialiased when shrinking."""
    width, height = target
    if width < 1 or height < 1:
        raise ParameterError(f"degenerate resize target {target}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < 4:
        raise ShapeError(f"resize needs a 2-D image of at least 4x4, got shape {image.shape}")
    if image.shape == (height, width):
        return image.copy()
    t = torch.from_numpy(image)[None, None]
    out = F.interpolate(t, size=(height, width), mode="bicubic", align_corners=False, antialias=True)
    return out[0, 0].numpy()


def clip_normalize(image, cutoff=10000.0, image_id="") -> CorrectedImage:
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise ShapeError("empty image")
    clipped = np.minimum(image, cutoff)
    std = clipped.std()
    if not std > 0:
        raise DegenerateInputError(f"image {image_id or '<anon>'} has zero variance after clipping")
    pixels = (clipped - clipped.mean()) / std
    return CorrectedImage(pixels, image_id, ["clip", "normalize"])


@dataclass(frozen=True)
class ImagingConfig:
    filter_size: float = 320.0
    target: tuple = (640, 512)
    cutoff: float = 10000.0
    illum_rescale: str | None = "mean"


def preprocess(image, config: ImagingConfig = ImagingConfig(), image_id="") -> CorrectedImage:
    corrected = illumination_correct(image, config.filter_size, rescale=config.illum_rescale)
    resized = resize_bicubic(corrected, config.target)
    out = clip_normalize(resized, config.cutoff, image_id)
    out.steps = ["illumination_correct", "resize_bicubic"] + out.steps
    return out
