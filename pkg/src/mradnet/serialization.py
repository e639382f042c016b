"""Deterministic NPZ container IO.

``np.savez`` stamps zip members with the current time, so identical runs
would produce different bytes. This writer pins every member's zip timestamp
to the DOS epoch and writes arrays in NPY v1.0 format, keeping the container
readable by ``np.load`` while making checkpoint bytes a pure function of
their contents. Writes are atomic (temp file + rename).
"""
from __future__ import annotations

import io
import os
import zipfile
from pathlib import Path

import numpy as np

_DOS_EPOCH = (1980, 1, 1, 0, 0, 0)


def write_npz(path: str | Path, arrays: dict[str, np.ndarray]):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, mode="w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(
                buf, np.asarray(arrays[key]), version=(1, 0), allow_pickle=False
            )
            info = zipfile.ZipInfo(key + ".npy", date_time=_DOS_EPOCH)
            zf.writestr(info, buf.getvalue())
    os.replace(tmp, path)


def read_npz(path: str | Path) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as z:
        return {key: z[key] for key in z.files}


def json_to_array(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8)


def array_to_json(arr: np.ndarray) -> str:
    return arr.tobytes().decode("utf-8")
