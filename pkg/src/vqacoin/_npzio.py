"""Byte-stable ``.npz``-compatible archives.

``numpy.savez`` stamps zip entries with the current time, so two saves of
identical arrays differ.  These helpers pin the timestamp and entry order.
"""

from __future__ import annotations

import io
import zipfile
from pathlib import Path
from typing import Mapping

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)


def write_archive(path: str | Path, arrays: Mapping[str, np.ndarray], texts: Mapping[str, str] | None = None) -> None:
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, text in sorted((texts or {}).items()):
            zf.writestr(zipfile.ZipInfo(name, _EPOCH), text.encode("utf-8"))
        for name, arr in sorted(arrays.items()):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", _EPOCH), buf.getvalue())


def read_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    arrays, texts = {}, {}
    with zipfile.ZipFile(path) as zf:
        for info in zf.infolist():
            raw = zf.read(info)
            if info.filename.endswith(".npy"):
                arrays[info.filename[:-4]] = np.lib.format.read_array(io.BytesIO(raw), allow_pickle=False)
            else:
                texts[info.filename] = raw.decode("utf-8")
    return arrays, texts
