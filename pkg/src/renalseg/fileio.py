"""Filesystem helpers: atomic writes and path-level volume load/save."""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

from .nifti import gzip_bytes, parse_nifti, write_nifti
from .volume import LabelVolume, ScalarVolume


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write via temp-then-rename so interrupted runs never leave truncated files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: str | Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_volume(volume: ScalarVolume | LabelVolume, path: str | Path) -> None:
    """Write a NIfTI file; a ``.gz`` suffix selects deterministic gzip."""
    data = write_nifti(volume)
    if str(path).endswith(".gz"):
        data = gzip_bytes(data)
    atomic_write_bytes(path, data)


def load_volume(path: str | Path, *, as_labels: bool = False,
                xform_priority: str = "sform") -> ScalarVolume | LabelVolume:
    data = Path(path).read_bytes()
    return parse_nifti(data, as_labels=as_labels, xform_priority=xform_priority)


def case_id_from_path(path: str | Path) -> str:
    """Case id = file stem with the .nii/.nii.gz extension and any
    ``_image``/``_truth``/``_pred`` role suffix stripped."""
    name = Path(path).name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            name = name[: -len(ext)]
            break
    for suffix in ("_image", "_truth", "_pred", "_label", "_labels"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return name
