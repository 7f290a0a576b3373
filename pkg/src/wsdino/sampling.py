"""Weak-label grouping, balanced sampling and multi-crop view construction.

A training example is an ordered pair ``(i, j)`` of distinct images sharing a weak
label: the teacher sees two global crops of ``i`` and the student sees those same two
global crops plus ``n_local`` local crops of ``j``.  With ``label_kind="none"`` every
image is its own group, so ``i == j`` and the construction reduces to plain DINO.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ParameterError, ShapeError, StructureError

log = logging.getLogger(__name__)

LABEL_KINDS = ("none", "treatment", "compound", "moa")


@dataclass
class WeakLabelIndex:
    label_kind: str
    groups: dict
    _group_of: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._group_of:
            self._group_of = {img: key for key, members in self.groups.items() for img in members}

    def group_of(self, image_id):
        return self._group_of[image_id]

    def __len__(self):
        return len(self._group_of)


def build_index(manifest, label_kind: str) -> WeakLabelIndex:
    """Group images by their weak label. ``manifest`` is a sequence of ``ImageRecord``."""
    if label_kind not in LABEL_KINDS:
        raise ParameterError(f"unknown weak label {label_kind!r}; expected one of {LABEL_KINDS}")
    if not manifest:
        raise StructureError("cannot index an empty manifest")
    groups: dict = {}
    for rec in manifest:
        key = rec.image_id if label_kind == "none" else getattr(rec, label_kind)
        if key is None:
            raise StructureError(f"image {rec.image_id} has no {label_kind} label")
        groups.setdefault(key, []).append(rec.image_id)
    return WeakLabelIndex(label_kind, groups)


def sampler_weights(index: WeakLabelIndex) -> dict:
    """Per-image weight 1 / (group size * number of groups): every group gets equal mass."""
    n_groups = len(index.groups)
    weights = {}
    for key, members in index.groups.items():
        if not members:
            raise StructureError(f"weak-label group {key!r} is empty")
        w = 1.0 / (len(members) * n_groups)
        for img in members:
            weights[img] = w
    return weights


_warned_singletons: set = set()


def sample_pair(index: WeakLabelIndex, group_key, rng: np.random.Generator):
    """Ordered pair (i, j) from one group; ``i`` feeds the global crops, ``j`` the local ones."""
    members = index.groups[group_key]
    if len(members) == 1:
        if index.label_kind != "none" and (index.label_kind, group_key) not in _warned_singletons:
            _warned_singletons.add((index.label_kind, group_key))
            log.warning("weak-label group %r has a single image; falling back to same-image crops", group_key)
        return members[0], members[0]
    a = int(rng.integers(len(members)))
    b = int(rng.integers(len(members) - 1))
    if b >= a:
        b += 1
    return members[a], members[b]


class PairSampler:
    """Group-balanced sampler; each draw picks a group, then an ordered pair inside it.

    Every image has marginal probability ``sampler_weights``.  Within one ``draw`` call
    the groups are visited in stacked random permutations, so group counts differ by
    at most one (stratified rather than i.i.d. group choice).  One epoch is
    ``len(index)`` draws; images are sampled with replacement.
    """

    def __init__(self, index: WeakLabelIndex, rng: np.random.Generator):
        self.index = index
        self.rng = rng
        sampler_weights(index)  # validates the groups
        self._keys = list(index.groups)

    def draw(self, n: int):
        g = len(self._keys)
        rounds = -(-n // g)
        order = np.concatenate([self.rng.permutation(g) for _ in range(rounds)])[:n] if n else []
        return [sample_pair(self.index, self._keys[k], self.rng) for k in order]

    def epoch(self):
        return self.draw(len(self.index))


@dataclass(frozen=True)
class CropSpec:
    global_size: int = 224
    global_scale: tuple = (0.10, 0.20)
    local_size: int = 96
    local_scale: tuple = (0.04, 0.08)
    n_local: int = 8
    flip_p: float = 0.5
    ratio: tuple = (3 / 4, 4 / 3)
    max_tries: int = 10

    def __post_init__(self):
        for name in ("global_scale", "local_scale"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi <= 1:
                raise ParameterError(f"{name} {(lo, hi)} must be a subinterval of (0, 1]")
        if self.local_scale[1] > self.global_scale[0]:
            raise ParameterError("local scale range must lie below the global scale range")
        if self.n_local < 0 or not 0 <= self.flip_p <= 1:
            raise ParameterError("n_local must be >= 0 and flip_p in [0, 1]")


@dataclass
class ViewSet:
    teacher_views: list
    student_views: list
    pair: tuple


def random_resized_crop(image: torch.Tensor, out_size: int, scale, ratio, rng, flip_p=0.5, max_tries=10):
    """Crop a random region covering ``scale`` of the image area and resize it bicubically.

    ``image`` is a 2-D float tensor; returns ``(out_size, out_size)``.
    """
    height, width = image.shape[-2:]
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(max_tries):
        target_area = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(height - h + 1))
            left = int(rng.integers(width - w + 1))
            crop = image[top:top + h, left:left + w]
            break
    else:
        raise ShapeError(f"no {scale} crop fits a {height}x{width} image after {max_tries} tries")
    crop = F.interpolate(crop[None, None], size=(out_size, out_size), mode="bicubic", align_corners=False,
                         antialias=h > out_size or w > out_size)[0, 0]
    if rng.random() < flip_p:
        crop = crop.flip(-1)
    if rng.random() < flip_p:
        crop = crop.flip(-2)
    return crop


def make_views(image_i, image_j, crop_spec: CropSpec, rng: np.random.Generator, pair=None) -> ViewSet:
    image_i = torch.as_tensor(image_i, dtype=torch.float32)
    image_j = torch.as_tensor(image_j, dtype=torch.float32)
    for img, size in ((image_i, crop_spec.global_size), (image_j, crop_spec.local_size)):
        if min(img.shape[-2:]) < size:
            raise ShapeError(f"image {tuple(img.shape)} smaller than crop size {size}")
    cs = crop_spec
    teacher = [
        random_resized_crop(image_i, cs.global_size, cs.global_scale, cs.ratio, rng, cs.flip_p, cs.max_tries)
        for _ in range(2)
    ]
    local = [
        random_resized_crop(image_j, cs.local_size, cs.local_scale, cs.ratio, rng, cs.flip_p, cs.max_tries)
        for _ in range(cs.n_local)
    ]
    return ViewSet(teacher_views=teacher, student_views=teacher + local, pair=pair)


def collate(viewsets):
    """Stack a batch of ViewSets into per-view tensors of shape ``(B, 1, s, s)``."""
    n_views = len(viewsets[0].student_views)
    if any(len(v.student_views) != n_views for v in viewsets):
        raise StructureError("ViewSets in a batch must have equal view counts")
    return [torch.stack([v.student_views[k] for v in viewsets])[:, None] for k in range(n_views)]
