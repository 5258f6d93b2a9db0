"""Array container: a directory of raw binary files described by a manifest.

The manifest is a JSON file named ``manifest`` mapping array names to
``{"shape": [...], "dtype": "float32"|"int32", "file": "<name>.bin"}``.
Binary files are little-endian, row-major, no header. The same container
convention backs morphable-model assets, training caches, and checkpoints.

Writes are atomic at the file level and the manifest is written last, so a
directory with a manifest is always a complete container.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ContainerError, MissingArrayError

MANIFEST_NAME = "manifest"

_DTYPES = {
    "float32": np.dtype("<f4"),
    "int32": np.dtype("<i4"),
}


def _dtype_name(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "float32"
    if arr.dtype == np.int32:
        return "int32"
    raise ContainerError(f"unsupported dtype {arr.dtype}; use float32 or int32")


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write bytes to ``path`` via a temp file + rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(Path(path), text.encode("utf-8"))


def atomic_write_json(path: Path, obj) -> None:
    atomic_write_text(Path(path), json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_container(directory, arrays: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Write ``arrays`` into ``directory`` under the manifest convention.

    ``extra`` is stored verbatim under the manifest's ``"extra"`` key for
    small structured metadata (config snapshots, tables).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in sorted(arrays.items()):
        arr = np.asarray(arr)
        shape = list(arr.shape)  # before ascontiguousarray, which promotes 0-dim
        arr = np.ascontiguousarray(arr)
        dtype = _dtype_name(arr)
        fname = name.replace("/", "_") + ".bin"
        atomic_write_bytes(directory / fname, arr.astype(_DTYPES[dtype], copy=False).tobytes())
        entries[name] = {"shape": shape, "dtype": dtype, "file": fname}
    manifest = {"arrays": entries}
    if extra is not None:
        manifest["extra"] = extra
    atomic_write_json(directory / MANIFEST_NAME, manifest)


def load_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise ContainerError(f"no manifest in {directory}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ContainerError(f"unparseable manifest in {directory}: {exc}") from exc
    if "arrays" not in manifest:
        raise ContainerError(f"manifest in {directory} has no 'arrays' table")
    return manifest


def load_array(directory, name: str, manifest: dict | None = None) -> np.ndarray:
    directory = Path(directory)
    manifest = manifest or load_manifest(directory)
    entry = manifest["arrays"].get(name)
    if entry is None:
        raise MissingArrayError(f"array '{name}' missing from {directory}")
    dtype = _DTYPES.get(entry["dtype"])
    if dtype is None:
        raise ContainerError(f"array '{name}' has unsupported dtype {entry['dtype']!r}")
    shape = tuple(int(s) for s in entry["shape"])
    raw = np.fromfile(directory / entry["file"], dtype=dtype)
    expected = int(np.prod(shape)) if shape else 1
    if raw.size != expected:
        raise ContainerError(
            f"array '{name}': file holds {raw.size} elements, manifest declares shape {shape}"
        )
    return raw.reshape(shape)


def load_container(directory) -> tuple[dict[str, np.ndarray], dict]:
    """Load every array plus the manifest's ``extra`` block."""
    manifest = load_manifest(directory)
    arrays = {name: load_array(directory, name, manifest) for name in manifest["arrays"]}
    return arrays, manifest.get("extra", {})


def container_exists(directory) -> bool:
    return (Path(directory) / MANIFEST_NAME).is_file()
