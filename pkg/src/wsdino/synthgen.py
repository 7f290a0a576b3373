"""Deterministic synthetic fluorescence screen with known MOA / compound / batch structure.

Every field of view is a sum of anisotropic Gaussian "cells" modulated by a smoothed
noise texture.  Morphology knobs (cell count, radius, eccentricity, texture frequency
and amplitude, brightness) are drawn per MOA, perturbed slightly per compound, and
interpolated towards a neutral control morphology by concentration.  Batch effects are
a multiplicative per-batch gain plus an additive low-frequency field.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ParameterError, StructureError

log = logging.getLogger(__name__)

CONTROL = "DMSO"
CHANNELS = ("DNA", "Tubulin", "Actin")
MANIFEST_COLUMNS = (
    "image_id", "path", "channel", "compound", "concentration",
    "treatment", "moa", "batch", "plate", "field_id",
)

# (low, high) at the reference image size of 128 px; radii scale with image size
_CELL_COUNT = (10.0, 34.0)
_CHANNEL_RANGES = {
    "radius": (2.2, 4.6),
    "eccentricity": (0.0, 0.85),
    "texture_freq": (0.06, 0.35),
    "texture_amp": (0.0, 0.6),
    "brightness": (2500.0, 7000.0),
}
_CHANNEL_RADIUS_SCALE = {"DNA": 1.0, "Tubulin": 1.8, "Actin": 2.2}
_BACKGROUND = 400.0
_REFERENCE_SIZE = 128


@dataclass(frozen=True)
class SyntheticSpec:
    n_moa: int = 4
    compounds_per_moa: int = 3
    concentrations_per_compound: int = 2
    fields_per_treatment: int = 8
    n_batches: int = 3
    image_size: int = 128
    channels: int = 3
    batch_effect_strength: float = 1.0
    controls_per_batch: int = 80
    moa_separation: float = 1.0
    compound_spread: float = 0.06
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_moa", "compounds_per_moa", "concentrations_per_compound", "n_batches"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.fields_per_treatment < 0 or self.controls_per_batch < 0:
            raise ParameterError("field counts must be >= 0")
        if self.image_size < 64:
            raise ParameterError(f"image_size must be >= 64, got {self.image_size}")
        if not 1 <= self.channels <= len(CHANNELS):
            raise ParameterError(f"channels must be in 1..{len(CHANNELS)}")
        if self.batch_effect_strength < 0:
            raise ParameterError("batch_effect_strength must be >= 0")
        if self.n_batches >= 2 and self.concentrations_per_compound < 2:
            # a treatment lives in one batch, so a compound needs >= 2 treatments to cross batches
            raise StructureError(
                "compounds cannot span >= 2 batches with a single concentration per compound"
            )

    @property
    def channel_names(self) -> tuple[str, ...]:
        return CHANNELS[: self.channels]


@dataclass
class ImageRecord:
    image_id: str
    compound: str
    concentration: float
    treatment: str
    moa: str | None
    batch: str
    channel: str
    plate: str = ""
    field_id: str = ""
    path: str = ""
    pixels: np.ndarray | None = field(default=None, repr=False)

    @property
    def is_control(self) -> bool:
        return self.compound == CONTROL


def treatment_label(compound: str, concentration: float) -> str:
    return f"{compound}@{concentration:g}"


def checksum(pixels: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(pixels).tobytes()).hexdigest()


@dataclass(frozen=True)
class _Treatment:
    compound: str
    concentration: float
    dose: float
    moa: str
    batch_index: int
    params: dict


class _Design:
    """Structure shared by all fields: MOA prototypes, compound offsets, batch effects."""

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 0])
        n = spec.n_moa
        channels = spec.channel_names

        levels = np.linspace(0.0, 1.0, n) if n > 1 else np.array([0.5])
        # one evenly spread level per MOA, shuffled independently for every knob
        self.moa_points = {}
        knobs = ["cell_count"] + [f"{c}:{k}" for c in channels for k in _CHANNEL_RANGES]
        perms = {k: rng.permutation(levels) for k in knobs}
        for m in range(n):
            self.moa_points[m] = {k: 0.5 + spec.moa_separation * (float(perms[k][m]) - 0.5) for k in knobs}
        self.neutral = {k: 0.5 for k in knobs}
        self.knobs = knobs

        self.compound_offsets = {}
        for m in range(n):
            for c in range(spec.compounds_per_moa):
                self.compound_offsets[(m, c)] = {
                    k: float(rng.normal(0.0, spec.compound_spread)) for k in knobs
                }

        nb = spec.n_batches
        if nb > 1:
            gains = rng.permutation(np.linspace(-1.0, 1.0, nb))
        else:
            gains = np.zeros(1)
        self.batch_gain = 1.0 + 0.3 * spec.batch_effect_strength * gains
        self.batch_field = [
            dict(
                offset=float(rng.uniform(0.2, 1.0)),
                gx=float(rng.uniform(-1, 1)),
                gy=float(rng.uniform(-1, 1)),
                bump_x=float(rng.uniform(-0.6, 0.6)),
                bump_y=float(rng.uniform(-0.6, 0.6)),
                bump_amp=float(rng.uniform(0.5, 1.0)),
            )
            for _ in range(nb)
        ]

        nc = spec.concentrations_per_compound
        self.concentrations = [round(0.3 * 3.0**k, 4) for k in range(nc)]
        self.doses = np.linspace(0.6, 1.0, nc) if nc > 1 else np.array([1.0])

    def treatments(self) -> list[_Treatment]:
        spec = self.spec
        out = []
        for m in range(spec.n_moa):
            for c in range(spec.compounds_per_moa):
                compound_index = m * spec.compounds_per_moa + c
                for k in range(spec.concentrations_per_compound):
                    point = {
                        key: self.neutral[key]
                        + self.doses[k]
                        * (self.moa_points[m][key] + self.compound_offsets[(m, c)][key] - self.neutral[key])
                        for key in self.knobs
                    }
                    out.append(
                        _Treatment(
                            compound=f"cmpd{compound_index:02d}",
                            concentration=self.concentrations[k],
                            dose=float(self.doses[k]),
                            moa=f"moa{m:02d}",
                            batch_index=(compound_index + k) % spec.n_batches,
                            params=point,
                        )
                    )
        return out

    def render_field(self, point: dict, batch_index: int, rng: np.random.Generator) -> dict:
        """Render all channels of one field; cell positions are shared across channels."""
        spec = self.spec
        size = spec.image_size
        scale = size / _REFERENCE_SIZE
        lo, hi = _CELL_COUNT
        mean_count = (lo + np.clip(point["cell_count"], 0, 1) * (hi - lo)) * scale**2
        n_cells = max(1, int(rng.poisson(mean_count)))
        centres = rng.uniform(0, size, size=(n_cells, 2))
        angles = rng.uniform(0, np.pi, size=n_cells)
        size_jitter = rng.uniform(0.85, 1.15, size=n_cells)

        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        u = 2.0 * xx / (size - 1) - 1.0
        v = 2.0 * yy / (size - 1) - 1.0
        bf = self.batch_field[batch_index]
        strength = spec.batch_effect_strength
        additive = strength * (
            300.0 * bf["offset"]
            + 250.0 * (bf["gx"] * u + bf["gy"] * v)
            + 500.0 * bf["bump_amp"] * np.exp(-((u - bf["bump_x"]) ** 2 + (v - bf["bump_y"]) ** 2) / 0.5)
        )
        gain = self.batch_gain[batch_index]

        images = {}
        for channel in spec.channel_names:
            def knob(name):
                lo, hi = _CHANNEL_RANGES[name]
                return lo + float(np.clip(point[f"{channel}:{name}"], 0, 1)) * (hi - lo)

            radius = knob("radius") * _CHANNEL_RADIUS_SCALE[channel] * scale
            ecc = knob("eccentricity")
            freq = knob("texture_freq") / scale
            tex_amp = knob("texture_amp")
            brightness = knob("brightness")

            cells = np.zeros((size, size))
            aspect = 1.0 / np.sqrt(1.0 - ecc**2)
            amps = brightness * rng.uniform(0.8, 1.2, size=n_cells)
            for (cx, cy), theta, jit, amp in zip(centres, angles, size_jitter, amps):
                s_major = radius * jit * np.sqrt(aspect)
                s_minor = radius * jit / np.sqrt(aspect)
                reach = int(np.ceil(3.5 * s_major))
                x0, x1 = max(0, int(cx) - reach), min(size, int(cx) + reach + 1)
                y0, y1 = max(0, int(cy) - reach), min(size, int(cy) + reach + 1)
                if x0 >= x1 or y0 >= y1:
                    continue
                dx = xx[y0:y1, x0:x1] - cx
                dy = yy[y0:y1, x0:x1] - cy
                a = dx * np.cos(theta) + dy * np.sin(theta)
                b = -dx * np.sin(theta) + dy * np.cos(theta)
                cells[y0:y1, x0:x1] += amp * np.exp(-0.5 * ((a / s_major) ** 2 + (b / s_minor) ** 2))

            noise = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=max(0.6, 0.25 / freq))
            noise /= noise.std() + 1e-12
            texture = 1.0 + tex_amp * np.clip(noise, -2.0, 2.0)
            texture = np.clip(texture, 0.0, None)

            signal = gain * (_BACKGROUND + cells * texture) + additive
            signal = np.clip(signal, 0.0, None)
            noisy = signal + rng.normal(size=signal.shape) * np.sqrt(signal + 100.0)
            images[channel] = np.clip(np.rint(noisy), 0, 65535).astype(np.uint16)
        return images


def _field_rng(spec: SyntheticSpec, kind: int, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, kind, index])


def _records_for_field(images, field_id, base) -> list[ImageRecord]:
    return [
        ImageRecord(image_id=f"{field_id}-{ch}", channel=ch, field_id=field_id, pixels=px, **base)
        for ch, px in images.items()
    ]


def generate_dataset(spec: SyntheticSpec, out_dir=None, include_controls=False, workers=1) -> list[ImageRecord]:
    """Render the treated fields (and optionally the DMSO controls).

    Returns one ``ImageRecord`` per (field, channel) with ``pixels`` populated.  When
    ``out_dir`` is given the images are written as 16-bit TIFFs together with
    ``manifest.csv``.
    """
    spec.validate()
    design = _Design(spec)
    jobs = []
    for t_index, t in enumerate(design.treatments()):
        for f in range(spec.fields_per_treatment):
            jobs.append((t_index * spec.fields_per_treatment + f, t))

    def render(job):
        index, t = job
        images = design.render_field(t.params, t.batch_index, _field_rng(spec, 1, index))
        base = dict(
            compound=t.compound,
            concentration=t.concentration,
            treatment=treatment_label(t.compound, t.concentration),
            moa=t.moa,
            batch=f"batch{t.batch_index}",
            plate=f"plate{t.batch_index}",
        )
        return _records_for_field(images, f"F{index:05d}", base)

    records = _map(render, jobs, workers)
    if include_controls:
        records.extend(dmso_controls(spec, workers=workers, _design=design))
    if out_dir is not None:
        from .io import write_dataset

        write_dataset(records, out_dir)
    return records


def dmso_controls(spec: SyntheticSpec, workers=1, _design=None) -> list[ImageRecord]:
    """Neutral-morphology control fields, ``controls_per_batch`` of them in every batch."""
    spec.validate()
    design = _design or _Design(spec)
    jobs = [(b * spec.controls_per_batch + k, b) for b in range(spec.n_batches) for k in range(spec.controls_per_batch)]

    def render(job):
        index, b = job
        images = design.render_field(design.neutral, b, _field_rng(spec, 2, index))
        base = dict(
            compound=CONTROL,
            concentration=0.0,
            treatment=treatment_label(CONTROL, 0.0),
            moa=None,
            batch=f"batch{b}",
            plate=f"plate{b}",
        )
        return _records_for_field(images, f"C{index:05d}", base)

    return _map(render, jobs, workers)


def _map(fn, jobs, workers):
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(fn, jobs))
    else:
        chunks = [fn(j) for j in jobs]
    return [r for chunk in chunks for r in chunk]
