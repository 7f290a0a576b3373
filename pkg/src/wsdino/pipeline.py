"""End-to-end glue used by the CLI and the acceptance run."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .embedding import concat_and_normalize, field_embeddings, model_encoder
from .errors import StructureError
from .evaluation import EvalReport, evaluate
from .imaging import preprocess
from .normalization import aggregate_profiles, apply_tvn, fit_tvn
from .synthgen import CHANNELS, generate_dataset
from .training import Trainer, set_determinism

log = logging.getLogger(__name__)


def preprocess_records(records, imaging_cfg, load=None):
    """Map image_id -> float32 pre-processed image. ``load(record)`` supplies raw pixels."""
    out = {}
    for r in records:
        raw = r.pixels if load is None else load(r)
        out[r.image_id] = preprocess(raw, imaging_cfg, r.image_id).pixels.astype(np.float32)
    return out


def by_channel(records):
    groups = defaultdict(list)
    for r in records:
        groups[r.channel].append(r)
    return groups


def training_records(records, include_controls=False):
    return [r for r in records if include_controls or not r.is_control]


def make_trainer(cfg: RunConfig, images, records, channel, out_dir=None, weak_label=None):
    return Trainer(
        {r.image_id: images[r.image_id] for r in records},
        records,
        cfg.model,
        cfg.schedule,
        cfg.sampling.crop,
        weak_label=weak_label or cfg.sampling.weak_label,
        batch_size=cfg.train.batch_size,
        seed=cfg.train.seed,
        use_centering=cfg.train.use_centering,
        out_dir=out_dir,
        config_hash=cfg.hash(),
        checkpoint_every=cfg.train.checkpoint_every,
        channel=channel,
    )


def train_channels(cfg: RunConfig, images, records, out_dir=None, weak_label=None, epochs=None):
    """One independent model per fluorescent channel. Returns channel -> teacher network."""
    channels = by_channel(training_records(records, cfg.train.include_controls))
    teachers = {}
    for ch in cfg.train.channels:
        if ch not in channels:
            raise StructureError(f"no training images for channel {ch}")
        trainer = make_trainer(cfg, images, channels[ch], ch,
                               None if out_dir is None else out_dir / ch, weak_label)
        trainer.fit(epochs)
        teachers[ch] = trainer.state.teacher.eval()
    return teachers


@dataclass
class FieldTable:
    field_ids: list
    vectors: np.ndarray
    meta: list = field(default_factory=list)


def embed_fields(records, images, models, crop, channels=CHANNELS, batch_size=256) -> FieldTable:
    """Per-field concatenated, L2-normalised embeddings (channels in fixed order)."""
    fields = defaultdict(dict)
    meta = {}
    for r in records:
        fields[r.field_id][r.channel] = r.image_id
        meta.setdefault(r.field_id, dict(field_id=r.field_id, treatment=r.treatment, compound=r.compound,
                                         moa=r.moa, batch=r.batch, plate=r.plate,
                                         concentration=r.concentration))
    field_ids = sorted(fields)
    per_channel = {}
    for ch in channels:
        missing = [f for f in field_ids if ch not in fields[f]]
        if missing:
            raise StructureError(f"field {missing[0]} lacks channel {ch}")
        stack = np.stack([images[fields[f][ch]] for f in field_ids])
        per_channel[ch] = field_embeddings(stack, model_encoder(models[ch], batch_size), crop)
    vectors = concat_and_normalize(per_channel, channels)
    return FieldTable(field_ids, vectors, [meta[f] for f in field_ids])


def profiles_from_fields(table: FieldTable, eps=1e-6, whiten=True):
    controls = np.array([m["compound"] == "DMSO" for m in table.meta])
    if controls.sum() < 2:
        raise StructureError("TVN needs control fields")
    tvn = fit_tvn(table.vectors[controls], eps=eps, whiten=whiten)
    corrected = apply_tvn(tvn, table.vectors)
    return aggregate_profiles(corrected, table.meta), tvn


@dataclass
class ExperimentResult:
    weak_label: str
    report: EvalReport
    profiles: list
    losses: dict = field(default_factory=dict)


def run_experiment(cfg: RunConfig, records=None, images=None, weak_labels=None, out_dir=None):
    """Generate (if needed), pre-process, train per weak label, embed, TVN, evaluate."""
    set_determinism(cfg.train.threads)
    if records is None:
        records = generate_dataset(cfg.data, include_controls=True)
    if images is None:
        images = preprocess_records(records, cfg.imaging)
    results = {}
    for label in weak_labels or [cfg.sampling.weak_label]:
        teachers = train_channels(cfg, images, records, None if out_dir is None else out_dir / label, label)
        table = embed_fields(records, images, teachers, cfg.embed.crop, cfg.train.channels, cfg.embed.batch_size)
        profiles, _ = profiles_from_fields(table, cfg.tvn.eps, cfg.tvn.whiten)
        report = evaluate(profiles, cfg.eval.batch_rule)
        log.info("weak label %s: %s", label, report.summary())
        results[label] = ExperimentResult(label, report, profiles)
    return results
