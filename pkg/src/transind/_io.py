"""Versioned, byte-deterministic array containers.

Every persisted artifact (dataset records, checkpoints, pseudo-label stores)
is a zip archive holding ``.npy`` members plus one ``__meta__.json`` member.
Zip timestamps are pinned so that writing the same content twice yields
identical bytes, which lets run manifests compare artifacts by hash.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

FORMAT_VERSION = 1
_META = "__meta__.json"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def write_container(path: str | Path, arrays: Mapping[str, np.ndarray],
                    meta: Mapping[str, Any], kind: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": "transind", "version": FORMAT_VERSION, "kind": kind, **meta}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr(_member(_META), json.dumps(header, sort_keys=True, indent=1))
        for name in sorted(arrays):
            arr_buf = io.BytesIO()
            np.save(arr_buf, np.asarray(arrays[name], order="C"), allow_pickle=False)
            zf.writestr(_member(name + ".npy"), arr_buf.getvalue())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def read_container(path: str | Path, kind: str | None = None
                   ) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read(_META))
        if meta.get("format") != "transind":
            raise ValueError(f"{path}: not a transind container")
        if meta.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported container version {meta.get('version')}")
        if kind is not None and meta.get("kind") != kind:
            raise ValueError(f"{path}: expected a {kind!r} container, found {meta.get('kind')!r}")
        arrays = {}
        for name in zf.namelist():
            if name == _META:
                continue
            arrays[name[:-4]] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
    return arrays, meta


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_sha256(root: str | Path, pattern: str = "*") -> str:
    """Hash of all matching files under ``root`` (names and bytes, sorted)."""
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob(pattern)):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(file_sha256(p).encode())
    return h.hexdigest()
