"""Manifest adapter for the BBBC021 image and MOA metadata tables.

Only builds manifests; images are read from disk on demand by the usual loaders.
"""

from __future__ import annotations

import csv
from pathlib import Path

from .errors import DependencyError, StructureError
from .synthgen import CHANNELS, CONTROL, ImageRecord, treatment_label

# channel name -> (file column, path column) in BBBC021_v1_image.csv
CHANNEL_COLUMNS = {
    "DNA": ("Image_FileName_DAPI", "Image_PathName_DAPI"),
    "Tubulin": ("Image_FileName_Tubulin", "Image_PathName_Tubulin"),
    "Actin": ("Image_FileName_Actin", "Image_PathName_Actin"),
}


def _read_csv(path):
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"metadata table not found: {path}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def batch_of_plate(plate: str) -> str:
    """Plates are named ``Week<k>_<id>``; the week is the experimental batch."""
    return plate.split("_", 1)[0]


def read_moa_table(path) -> dict:
    """(compound, concentration) -> MOA."""
    out = {}
    for row in _read_csv(path):
        out[(row["compound"], float(row["concentration"]))] = row["moa"]
    return out


def build_manifest(image_csv, moa_csv, annotated_only=True) -> list[ImageRecord]:
    """One record per (field, channel).

    With ``annotated_only`` the treatments without an MOA annotation are dropped; DMSO
    controls are always kept.
    """
    moas = read_moa_table(moa_csv)
    records = []
    for row in _read_csv(image_csv):
        missing = [c for pair in CHANNEL_COLUMNS.values() for c in pair if c not in row]
        if missing:
            raise StructureError(f"{image_csv}: missing columns {missing}")
        compound = row["Image_Metadata_Compound"]
        conc = float(row["Image_Metadata_Concentration"])
        moa = moas.get((compound, conc))
        is_control = compound == CONTROL
        if annotated_only and moa is None and not is_control:
            continue
        plate = row["Image_Metadata_Plate_DAPI"]
        field_id = f"{row['TableNumber']}-{row['ImageNumber']}"
        for channel in CHANNELS:
            file_col, path_col = CHANNEL_COLUMNS[channel]
            records.append(ImageRecord(
                image_id=f"{field_id}-{channel}",
                compound=compound,
                concentration=conc,
                treatment=treatment_label(compound, conc),
                moa=None if is_control else moa,
                batch=batch_of_plate(plate),
                channel=channel,
                plate=plate,
                field_id=field_id,
                path=str(Path(row[path_col]) / row[file_col]),
            ))
    return records
