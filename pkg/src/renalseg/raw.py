"""Raw interchange format: a JSON manifest plus an x-fastest voxel blob.

This is the on-disk twin of the predictor wire payload: ``f32le`` scalar
grids or ``u8`` label grids, serialized x-fastest (Fortran order), described
by a manifest carrying the grid geometry.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataQualityError
from .fileio import atomic_write_bytes, atomic_write_text
from .volume import LabelVolume, ScalarVolume, VolumeHeader

_DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}


def encode_blob(array: np.ndarray, dtype: str = "f32le") -> bytes:
    """Serialize an [i,j,k]-indexed array x-fastest."""
    return np.asarray(array, dtype=_DTYPES[dtype]).tobytes(order="F")


def decode_blob(data: bytes, shape, dtype: str = "f32le") -> np.ndarray:
    want = int(np.prod(shape)) * _DTYPES[dtype].itemsize
    if len(data) != want:
        raise DataQualityError(f"blob length {len(data)} != expected {want} for shape {tuple(shape)}")
    return np.frombuffer(data, dtype=_DTYPES[dtype]).reshape(tuple(shape), order="F")


def manifest_for(header: VolumeHeader, dtype: str) -> dict:
    return {
        "shape": list(header.shape),
        "spacing": list(header.spacing),
        "origin": list(header.origin),
        "direction": [[float(v) for v in row] for row in header.direction],
        "dtype": dtype,
    }


def header_from_manifest(manifest: dict) -> VolumeHeader:
    return VolumeHeader(shape=manifest["shape"], spacing=manifest["spacing"],
                        origin=manifest["origin"], direction=np.asarray(manifest["direction"]))


def write_raw(volume: ScalarVolume | LabelVolume, directory: str | Path, name: str) -> tuple[Path, Path]:
    """Write ``<name>.json`` + ``<name>.raw`` under ``directory``."""
    directory = Path(directory)
    if isinstance(volume, LabelVolume):
        dtype, arr = "u8", volume.labels
    else:
        dtype, arr = "f32le", volume.voxels
    manifest_path = directory / f"{name}.json"
    blob_path = directory / f"{name}.raw"
    atomic_write_text(manifest_path, json.dumps(manifest_for(volume.header, dtype),
                                                indent=2, sort_keys=True) + "\n")
    atomic_write_bytes(blob_path, encode_blob(arr, dtype))
    return manifest_path, blob_path


def read_raw(manifest_path: str | Path) -> ScalarVolume | LabelVolume:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    dtype = manifest["dtype"]
    if dtype not in _DTYPES:
        raise DataQualityError(f"unknown raw dtype {dtype!r}")
    header = header_from_manifest(manifest)
    blob = manifest_path.with_suffix(".raw").read_bytes()
    arr = decode_blob(blob, header.shape, dtype)
    if dtype == "u8":
        return LabelVolume(header=header, labels=arr)
    return ScalarVolume(header=header, voxels=arr)
