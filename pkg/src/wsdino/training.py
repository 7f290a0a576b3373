"""Epoch loop around :func:`distillation.train_step`: sampling, logging, checkpoints, resume."""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path

import numpy as np
import torch

from .backbone import ViTConfig, WSDinoNet
from .distillation import ScheduleSpec, TrainState, train_step
from .errors import DependencyError, IncompatibleCheckpointError, NumericalError
from .sampling import CropSpec, PairSampler, build_index, collate, make_views

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "wsdino-ckpt-1"
LOG_COLUMNS = ("epoch", "step", "loss", "lr", "tau_t")


def set_determinism(threads=1):
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


class Trainer:
    """Trains one per-channel student/teacher pair.

    ``images`` maps image_id -> pre-processed 2-D array; ``records`` are the matching
    ``ImageRecord`` rows (one channel only) that carry the weak labels.
    """

    def __init__(self, images, records, model_cfg: ViTConfig, schedule: ScheduleSpec, crop: CropSpec,
                 weak_label="compound", batch_size=16, seed=0, use_centering=True,
                 out_dir=None, config_hash="", checkpoint_every=10, channel=""):
        self.images = {k: torch.as_tensor(np.asarray(v), dtype=torch.float32) for k, v in images.items()}
        self.records = list(records)
        self.crop = crop
        self.batch_size = batch_size
        self.config_hash = config_hash
        self.checkpoint_every = checkpoint_every
        self.channel = channel
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.index = build_index(self.records, weak_label)
        self.sampler_rng = np.random.default_rng([seed, 1])
        self.crop_rng = np.random.default_rng([seed, 2])
        self.sampler = PairSampler(self.index, self.sampler_rng)
        torch.manual_seed(seed)
        self.state = TrainState.create(WSDinoNet(model_cfg), schedule, use_centering)
        self.steps_per_epoch = math.ceil(len(self.index) / batch_size)

    # -- training -------------------------------------------------------------
    def batches(self):
        pairs = self.sampler.epoch()
        for start in range(0, len(pairs), self.batch_size):
            chunk = pairs[start:start + self.batch_size]
            views = [make_views(self.images[i], self.images[j], self.crop, self.crop_rng, pair=(i, j))
                     for i, j in chunk]
            yield collate(views)

    def run_epoch(self, max_steps=None):
        st = self.state
        st.step = 0
        losses = []
        for views in self.batches():
            try:
                _, loss = train_step(st, views, self.steps_per_epoch)
            except NumericalError as exc:
                self._dump(exc)
                raise
            losses.append(loss)
            if self.out_dir is not None:
                self._log(st.history[-1])
            if max_steps is not None and len(losses) >= max_steps:
                break
        st.epoch += 1
        st.step = 0
        return losses

    def fit(self, epochs=None, on_epoch=None):
        total = self.state.schedule.total_epochs if epochs is None else epochs
        while self.state.epoch < total:
            losses = self.run_epoch()
            log.info("%s epoch %d loss %.4f", self.channel, self.state.epoch, float(np.mean(losses)))
            if on_epoch is not None:
                on_epoch(self)
            if self.out_dir is not None and (self.state.epoch % self.checkpoint_every == 0 or self.state.epoch == total):
                self.save(self.checkpoint_path(self.state.epoch))
        return self.state

    # -- artefacts ------------------------------------------------------------
    def _log(self, row):
        path = self.out_dir / "train_log.csv"
        new = not path.exists()
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(LOG_COLUMNS)
            w.writerow([row["epoch"], row["step"], f"{row['loss']:.8g}", f"{row['lr']:.8g}", f"{row['tau_t']:.8g}"])

    def _dump(self, exc):
        if self.out_dir is None:
            return
        path = self.out_dir / "numerical_failure.pt"
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"diagnostics": exc.diagnostics, "student": self.state.student.state_dict(),
                    "center": self.state.center}, path)
        log.error("non-finite loss; diagnostics written to %s", path)

    def checkpoint_path(self, epoch):
        return self.out_dir / "checkpoints" / f"epoch{epoch:04d}.pt"

    def save(self, path):
        st = self.state
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "version": CHECKPOINT_VERSION,
            "config_hash": self.config_hash,
            "channel": self.channel,
            "model_cfg": st.student.cfg.to_dict(),
            "schedule": st.schedule.to_dict(),
            "student": st.student.state_dict(),
            "teacher": st.teacher.state_dict(),
            "center": st.center,
            "optimizer": st.optimizer.state_dict(),
            "epoch": st.epoch,
            "global_step": st.global_step,
            "history": st.history,
            "sampler_rng": self.sampler_rng.bit_generator.state,
            "crop_rng": self.crop_rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
        }, path)
        return path

    def load(self, path):
        ckpt = read_checkpoint(path, self.config_hash)
        st = self.state
        st.student.load_state_dict(ckpt["student"])
        st.teacher.load_state_dict(ckpt["teacher"])
        st.center = ckpt["center"]
        st.optimizer.load_state_dict(ckpt["optimizer"])
        st.epoch = ckpt["epoch"]
        st.step = 0
        st.global_step = ckpt["global_step"]
        st.history = list(ckpt["history"])
        self.sampler_rng.bit_generator.state = ckpt["sampler_rng"]
        self.crop_rng.bit_generator.state = ckpt["crop_rng"]
        torch.set_rng_state(ckpt["torch_rng"])
        return self


def read_checkpoint(path, config_hash=None):
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(f"{path}: version {ckpt.get('version')!r} != {CHECKPOINT_VERSION!r}")
    if config_hash is not None and ckpt.get("config_hash") != config_hash:
        raise IncompatibleCheckpointError(
            f"{path}: written under config {ckpt.get('config_hash')}, current config is {config_hash}"
        )
    return ckpt


def load_teacher(path, config_hash=None) -> WSDinoNet:
    """Rebuild the teacher network from a checkpoint (the teacher is used for embedding)."""
    ckpt = read_checkpoint(path, config_hash)
    model = WSDinoNet(ViTConfig(**ckpt["model_cfg"]))
    model.load_state_dict(ckpt["teacher"])
    model.eval()
    return model


def latest_checkpoint(directory):
    paths = sorted(Path(directory).glob("epoch*.pt"))
    if not paths:
        raise DependencyError(f"no checkpoints in {directory}")
    return paths[-1]
