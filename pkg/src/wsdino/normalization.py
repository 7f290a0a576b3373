"""Typical variation normalisation (TVN) and plate/treatment aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, StructureError
from .synthgen import CONTROL


@dataclass
class TvnTransform:
    mean: np.ndarray
    matrix: np.ndarray
    eps: float = 1e-6
    whiten: bool = True

    @property
    def dim(self):
        return self.mean.shape[0]

    def save(self, path):
        np.savez(path, mean=self.mean, matrix=self.matrix, eps=self.eps, whiten=self.whiten, dim=self.dim)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            return cls(z["mean"], z["matrix"], float(z["eps"]), bool(z["whiten"]))


def fit_tvn(controls, eps=1e-6, whiten=True) -> TvnTransform:
    """PCA fitted on control embeddings, no dimensionality reduction.

    With ``whiten`` the rotation is scaled by inverse square-root eigenvalues (floored at
    ``eps``) so transformed controls have identity sample covariance; otherwise rotate only.
    """
    x = np.asarray(controls, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise StructureError(f"need at least 2 control vectors, got {x.shape[0] if x.ndim == 2 else x.shape}")
    mu = x.mean(axis=0)
    cov = np.cov(x - mu, rowvar=False, ddof=1).reshape(x.shape[1], x.shape[1])
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, eps)
    rot = vecs.T
    matrix = rot / np.sqrt(vals)[:, None] if whiten else rot
    return TvnTransform(mu, matrix, eps, whiten)


def apply_tvn(transform: TvnTransform, embedding):
    x = np.asarray(embedding, dtype=np.float64)
    if x.shape[-1] != transform.dim:
        raise ShapeError(f"embedding dim {x.shape[-1]} != TVN dim {transform.dim}")
    return (x - transform.mean) @ transform.matrix.T


@dataclass
class TreatmentProfile:
    treatment: str
    compound: str
    moa: str | None
    batches: frozenset
    vector: np.ndarray


def aggregate_profiles(vectors, meta, exclude_compounds=(CONTROL,)) -> list:
    """Mean over fields within each (treatment, plate), then median over plates per treatment.

    ``meta`` is a sequence of dicts (or records) with treatment, compound, moa, batch, plate.
    Profiles are returned sorted by treatment label.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if len(vectors) != len(meta):
        raise StructureError("vectors and metadata differ in length")
    plates: dict = {}
    info: dict = {}
    for vec, m in zip(vectors, meta):
        get = m.get if isinstance(m, dict) else lambda k, _m=m: getattr(_m, k)
        treatment = get("treatment")
        if get("compound") in exclude_compounds:
            continue
        plates.setdefault(treatment, {}).setdefault(get("plate"), []).append(vec)
        entry = info.setdefault(treatment, {"compound": get("compound"), "moa": get("moa"), "batches": set()})
        entry["batches"].add(get("batch"))
    profiles = []
    for treatment in sorted(plates):
        per_plate = [np.mean(v, axis=0) for _, v in sorted(plates[treatment].items()) if v]
        if not per_plate:
            raise StructureError(f"treatment {treatment} has no fields")
        entry = info[treatment]
        profiles.append(TreatmentProfile(
            treatment=treatment,
            compound=entry["compound"],
            moa=entry["moa"],
            batches=frozenset(entry["batches"]),
            vector=np.median(np.stack(per_plate), axis=0),
        ))
    return profiles
