"""Command line entry point: ``wsdino <subcommand> [-c config.yaml] [--preset toy] [--set key=value]``.

Artifacts live under the run directory (``run_dir`` in the config, or ``$WSDINO_RUN_DIR``)::

    config.yaml               effective configuration
    data/manifest.csv         image manifest (+ data/images/*.tif for synthetic data)
    preprocessed.npz          image_id -> corrected, resized, normalised image
    train/<channel>/          checkpoints/epochNNNN.pt, train_log.csv
    embeddings.csv            per-field embeddings (channel order in the header)
    tvn.npz, profiles.csv     whitening transform and treatment profiles
    eval.txt, eval_matches.csv
    attn/<image_id>.*         attention maps
    plot/                     profile projection and training curves

Every output gets a ``<name>.lineage.json`` sidecar with the config hash and input hashes.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import io, pipeline, plotting
from .backbone import attention_maps
from .config import RunConfig, dump_config, load_config
from .errors import DependencyError, StructureError, WSDinoError
from .evaluation import evaluate
from .normalization import aggregate_profiles, apply_tvn, fit_tvn
from .synthgen import CONTROL, generate_dataset
from .training import Trainer, latest_checkpoint, load_teacher, set_determinism

log = logging.getLogger("wsdino")

SUBCOMMANDS = ("datagen", "preprocess", "train", "resume", "embed", "tvn", "eval", "attn", "plot", "run")


class Run:
    """Resolved paths for one run directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = cfg.path
        self.hash = cfg.hash()

    def __getattr__(self, name):
        paths = dict(
            config=self.root / "config.yaml",
            data=self.root / "data",
            manifest=self.root / "data" / "manifest.csv",
            preprocessed=self.root / "preprocessed.npz",
            train=self.root / "train",
            embeddings=self.root / "embeddings.csv",
            tvn=self.root / "tvn.npz",
            profiles=self.root / "profiles.csv",
            eval_text=self.root / "eval.txt",
            eval_matches=self.root / "eval_matches.csv",
            attn=self.root / "attn",
            plot=self.root / "plot",
        )
        if name in paths:
            return paths[name]
        raise AttributeError(name)

    def lineage(self, output, inputs=()):
        io.write_lineage(output, self.hash, inputs)

    def records(self):
        return io.read_manifest(self.manifest)

    def checkpoint(self, channel):
        return latest_checkpoint(self.train / channel / "checkpoints")


# -- subcommands --------------------------------------------------------------

def cmd_datagen(run: Run, args):
    run.root.mkdir(parents=True, exist_ok=True)
    if args.bbbc021:
        from .bbbc021 import build_manifest

        image_csv, moa_csv = (Path(p) for p in args.bbbc021)
        root = Path(args.image_root or image_csv.parent).resolve()
        records = build_manifest(image_csv, moa_csv)
        for r in records:
            r.path = str(root / r.path)
        io.write_manifest(records, run.manifest)
        run.lineage(run.manifest, [image_csv, moa_csv])
    else:
        records = generate_dataset(run.cfg.data, out_dir=run.data, include_controls=True, workers=args.workers)
        run.lineage(run.manifest)
    log.info("wrote %d manifest rows to %s", len(records), run.manifest)


def cmd_preprocess(run: Run, args):
    records = run.records()
    images = pipeline.preprocess_records(records, run.cfg.imaging, load=lambda r: io.load_pixels(r, run.data))
    io.save_arrays(run.preprocessed, images)
    run.lineage(run.preprocessed, [run.manifest])
    log.info("pre-processed %d images", len(images))


def _images(run: Run):
    return io.load_arrays(run.preprocessed)


def _trainers(run: Run, args, images=None):
    cfg = run.cfg
    images = _images(run) if images is None else images
    channels = pipeline.by_channel(pipeline.training_records(run.records(), cfg.train.include_controls))
    wanted = [args.channel] if getattr(args, "channel", None) else list(cfg.train.channels)
    for ch in wanted:
        if ch not in channels:
            raise StructureError(f"no training images for channel {ch}")
        yield ch, pipeline.make_trainer(cfg, images, channels[ch], ch, run.train / ch)


def _fit(run: Run, ch, trainer: Trainer, epochs):
    trainer.fit(epochs)
    ckpt = trainer.checkpoint_path(trainer.state.epoch)
    if not ckpt.exists():
        trainer.save(ckpt)
    run.lineage(ckpt, [run.preprocessed, run.manifest])
    log.info("%s: trained to epoch %d", ch, trainer.state.epoch)


def cmd_train(run: Run, args):
    set_determinism(run.cfg.train.threads)
    for ch, trainer in _trainers(run, args):
        _fit(run, ch, trainer, args.epochs)


def cmd_resume(run: Run, args):
    set_determinism(run.cfg.train.threads)
    for ch, trainer in _trainers(run, args):
        path = run.checkpoint(ch)
        trainer.load(path)
        log.info("%s: resumed from %s (epoch %d)", ch, path, trainer.state.epoch)
        _fit(run, ch, trainer, args.epochs)


def cmd_embed(run: Run, args):
    cfg = run.cfg
    records = run.records()
    models = {ch: load_teacher(run.checkpoint(ch), run.hash) for ch in cfg.train.channels}
    table = pipeline.embed_fields(records, _images(run), models, cfg.embed.crop, cfg.train.channels,
                                  cfg.embed.batch_size)
    io.write_table(run.embeddings, table.field_ids, table.vectors,
                   {"channels": ",".join(cfg.train.channels), "crop": cfg.embed.crop}, id_column="field_id")
    run.lineage(run.embeddings, [run.preprocessed, run.manifest] + [run.checkpoint(ch) for ch in cfg.train.channels])


def _field_meta(records):
    meta = {}
    for r in records:
        meta.setdefault(r.field_id, dict(treatment=r.treatment, compound=r.compound, moa=r.moa,
                                         batch=r.batch, plate=r.plate))
    return meta


def cmd_tvn(run: Run, args):
    ids, vectors, _ = io.read_table(run.embeddings)
    meta_by_field = _field_meta(run.records())
    missing = [i for i in ids if i not in meta_by_field]
    if missing:
        raise StructureError(f"embedding rows without manifest entry, e.g. {missing[0]}")
    meta = [meta_by_field[i] for i in ids]
    controls = np.array([m["compound"] == CONTROL for m in meta])
    if controls.sum() < 2:
        raise StructureError("TVN needs at least two control fields")
    tvn = fit_tvn(vectors[controls], eps=run.cfg.tvn.eps, whiten=run.cfg.tvn.whiten)
    tvn.save(run.tvn)
    profiles = aggregate_profiles(apply_tvn(tvn, vectors), meta)
    io.write_profiles(run.profiles, profiles)
    run.lineage(run.tvn, [run.embeddings, run.manifest])
    run.lineage(run.profiles, [run.embeddings, run.manifest])
    log.info("%d treatment profiles", len(profiles))


def cmd_eval(run: Run, args):
    source = Path(args.profiles) if args.profiles else run.profiles
    out_dir = Path(args.out) if args.out else run.root
    profiles = io.read_profiles(source)
    report = evaluate(profiles, run.cfg.eval.batch_rule)
    text, matches = out_dir / "eval.txt", out_dir / "eval_matches.csv"
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [report.summary(), f"batch_rule={run.cfg.eval.batch_rule}", f"treatments={len(profiles)}"]
    lines += [f"excluded {t}: {reason}" for t, reason in report.excluded]
    text.write_text("\n".join(lines) + "\n")
    with open(matches, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "query", "match", "distance", "correct"])
        for metric, ms in (("NSC", report.nsc_matches), ("NSCB", report.nscb_matches)):
            for m in ms:
                w.writerow([metric, m.query, m.match, f"{m.distance:.9g}", int(m.correct)])
    run.lineage(text, [source])
    run.lineage(matches, [source])
    print(report.summary())
    return report


def cmd_attn(run: Run, args):
    records = {r.image_id: r for r in run.records()}
    if args.image_id not in records:
        raise DependencyError(f"image {args.image_id} not in manifest")
    record = records[args.image_id]
    image = _images(run)[args.image_id]
    model = load_teacher(run.checkpoint(record.channel), run.hash)
    size = args.size or run.cfg.embed.crop
    h, w = image.shape
    if min(h, w) < size:
        raise StructureError(f"image {image.shape} smaller than attention crop {size}")
    top, left = (h - size) // 2, (w - size) // 2
    crop = image[top:top + size, left:left + size]
    attn = attention_maps(crop, model)
    run.attn.mkdir(parents=True, exist_ok=True)
    stem = run.attn / args.image_id
    np.savez(stem.with_suffix(".npz"), weights=attn.weights, cls_rows=attn.cls_rows)
    mean = attn.mean_map()
    np.savetxt(stem.with_suffix(".csv"), mean, delimiter=",", fmt="%.9g")
    plotting.plot_attention(crop, attn, stem.with_suffix(".png"))
    for suffix in (".npz", ".csv", ".png"):
        run.lineage(stem.with_suffix(suffix), [run.preprocessed, run.checkpoint(record.channel)])
    return attn


def cmd_plot(run: Run, args):
    source = Path(args.profiles) if args.profiles else run.profiles
    out_dir = Path(args.out) if args.out else run.plot
    profiles = io.read_profiles(source)
    out_dir.mkdir(parents=True, exist_ok=True)
    coords_csv, png = out_dir / "projection.csv", out_dir / "projection.png"
    plotting.plot_profiles(profiles, coords_csv, png)
    run.lineage(coords_csv, [source])
    run.lineage(png, [source])
    logs = {}
    for path in sorted(run.train.glob("*/train_log.csv")):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        logs[path.parent.name] = (np.arange(len(rows)), [float(r["loss"]) for r in rows])
    if logs:
        curve = out_dir / "training_curve.png"
        plotting.plot_training_curves(logs, curve)
        run.lineage(curve, sorted(run.train.glob("*/train_log.csv")))


def cmd_run(run: Run, args):
    if not run.manifest.exists():
        cmd_datagen(run, args)
    cmd_preprocess(run, args)
    cmd_train(run, args)
    cmd_embed(run, args)
    cmd_tvn(run, args)
    report = cmd_eval(run, args)
    cmd_plot(run, args)
    return report


COMMANDS = {
    "datagen": cmd_datagen, "preprocess": cmd_preprocess, "train": cmd_train, "resume": cmd_resume,
    "embed": cmd_embed, "tvn": cmd_tvn, "eval": cmd_eval, "attn": cmd_attn, "plot": cmd_plot, "run": cmd_run,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML config file")
    common.add_argument("--preset", choices=("full", "toy"), default="full")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set train.batch_size=8")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="wsdino", description="Weakly supervised DINO profiling pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("datagen", parents=[common], help="render the synthetic dataset or ingest BBBC021")
    p.add_argument("--bbbc021", nargs=2, metavar=("IMAGE_CSV", "MOA_CSV"))
    p.add_argument("--image-root")
    p.add_argument("--workers", type=int, default=1)
    sub.add_parser("preprocess", parents=[common], help="illumination-correct, resize, clip, normalise")
    for name in ("train", "resume"):
        p = sub.add_parser(name, parents=[common], help=f"{name} the per-channel models")
        p.add_argument("--channel")
        p.add_argument("--epochs", type=int)
    sub.add_parser("embed", parents=[common], help="per-field embeddings from the trained teachers")
    sub.add_parser("tvn", parents=[common], help="fit TVN on controls and aggregate treatment profiles")
    for name in ("eval", "plot"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--profiles", help="profile table (default: the run's profiles.csv)")
        p.add_argument("--out", help="output directory")
    p = sub.add_parser("attn", parents=[common], help="export last-layer class-token attention")
    p.add_argument("image_id")
    p.add_argument("--size", type=int)
    p = sub.add_parser("run", parents=[common], help="full pipeline")
    p.add_argument("--epochs", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(bbbc021=None, image_root=None, channel=None, profiles=None, out=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.preset, args.overrides)
        run = Run(cfg)
        run.root.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, run.config)
        COMMANDS[args.command](run, args)
    except WSDinoError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
