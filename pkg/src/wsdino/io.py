"""File formats: manifests, images, embedding tables, lineage sidecars."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import tifffile

from .errors import DependencyError, StructureError
from .synthgen import MANIFEST_COLUMNS, ImageRecord


def write_manifest(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow([
                r.image_id, r.path, r.channel, r.compound, f"{r.concentration:g}",
                r.treatment, r.moa or "", r.batch, r.plate, r.field_id,
            ])


def read_manifest(path) -> list[ImageRecord]:
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"manifest not found: {path}")
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS[:8]) - set(reader.fieldnames or ())
        if missing:
            raise StructureError(f"manifest {path} lacks columns {sorted(missing)}")
        for row in reader:
            records.append(ImageRecord(
                image_id=row["image_id"],
                path=row["path"],
                channel=row["channel"],
                compound=row["compound"],
                concentration=float(row["concentration"]),
                treatment=row["treatment"],
                moa=row["moa"] or None,
                batch=row["batch"],
                plate=row.get("plate") or row["batch"],
                field_id=row.get("field_id") or row["image_id"],
            ))
    return records


def write_dataset(records, out_dir) -> Path:
    """Write each record's pixels as a TIFF under ``out_dir/images`` plus ``manifest.csv``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    for r in records:
        rel = f"images/{r.image_id}.tif"
        tifffile.imwrite(out_dir / rel, r.pixels)
        r.path = rel
    manifest = out_dir / "manifest.csv"
    write_manifest(records, manifest)
    return manifest


def load_pixels(record: ImageRecord, root) -> np.ndarray:
    if record.pixels is not None:
        return record.pixels
    path = Path(root) / record.path
    if not path.exists():
        raise DependencyError(f"image not found: {path}")
    return tifffile.imread(path)


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_lineage(output, config_hash: str, inputs=()) -> Path:
    """Record which config and input files produced ``output`` in ``<output>.lineage.json``."""
    output = Path(output)
    sidecar = output.with_name(output.name + ".lineage.json")
    payload = {
        "output": output.name,
        "config_hash": config_hash,
        "inputs": {str(p): file_hash(p) for p in inputs if Path(p).is_file()},
    }
    sidecar.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return sidecar


def write_table(path, ids, matrix, header_comments=None, id_column="image_id") -> None:
    """Delimited table of 32-bit reals, one row per id. ``#`` lines carry header metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    matrix = np.asarray(matrix, dtype=np.float32)
    with open(path, "w", newline="") as fh:
        for key, value in (header_comments or {}).items():
            fh.write(f"# {key}={value}\n")
        writer = csv.writer(fh)
        writer.writerow([id_column] + [f"f{i}" for i in range(matrix.shape[1])])
        for ident, row in zip(ids, matrix):
            writer.writerow([ident] + [f"{x:.9g}" for x in row])


def read_table(path):
    """Inverse of :func:`write_table`; returns ``(ids, float32 matrix, header dict)``."""
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"table not found: {path}")
    header, ids, rows = {}, [], []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh]
    body = []
    for ln in lines:
        if ln.startswith("# "):
            key, _, value = ln[2:].rstrip("\n").partition("=")
            header[key] = value
        else:
            body.append(ln)
    reader = csv.reader(body)
    next(reader)
    for row in reader:
        ids.append(row[0])
        rows.append([float(x) for x in row[1:]])
    matrix = np.asarray(rows, dtype=np.float32).reshape(len(ids), -1)
    return ids, matrix, header


PROFILE_COLUMNS = ("treatment", "compound", "moa", "batches")


def write_profiles(path, profiles) -> None:
    """One row per treatment profile; ``batches`` is ``;``-joined."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = len(profiles[0].vector) if profiles else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(PROFILE_COLUMNS) + [f"f{i}" for i in range(dim)])
        for p in profiles:
            writer.writerow([p.treatment, p.compound, p.moa or "", ";".join(sorted(p.batches))]
                            + [f"{float(x):.9g}" for x in p.vector])


def read_profiles(path):
    from .normalization import TreatmentProfile

    path = Path(path)
    if not path.exists():
        raise DependencyError(f"profile table not found: {path}")
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[:4]) != PROFILE_COLUMNS:
            raise StructureError(f"{path}: expected columns {PROFILE_COLUMNS} first")
        for row in reader:
            out.append(TreatmentProfile(
                treatment=row[0], compound=row[1], moa=row[2] or None,
                batches=frozenset(b for b in row[3].split(";") if b),
                vector=np.asarray([float(x) for x in row[4:]]),
            ))
    return out


def save_arrays(path, arrays: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)


def load_arrays(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"array bundle not found: {path}")
    with np.load(path) as data:
        return {k: data[k] for k in data.files}
