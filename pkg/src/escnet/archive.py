"""Named-tensor archive: one file, a JSON manifest line, then raw float32.

Layout: the first line of the file is a UTF-8 JSON object
``{"manifest": [{"name", "dtype": "f32", "shape", "offset", "nbytes"}, ...]}``
terminated by a single ``\\n``; everything after is the payload of raw
little-endian float32 values, row-major, with offsets measured from the
payload start. Round trips are bit-exact for every finite float32 value,
signed zeros included.
"""

from __future__ import annotations

import json

import numpy as np


class ArchiveError(Exception):
    """Base class for archive failures."""


class MissingTensorError(ArchiveError):
    """A required tensor name is absent from the archive."""


class TensorShapeError(ArchiveError):
    """A tensor is present but its shape does not match expectations."""


class CorruptArchiveError(ArchiveError):
    """Manifest is unreadable or disagrees with the payload length."""


def write_archive(path, tensors: dict) -> None:
    """Write `tensors` (name -> array-like) as float32 to `path`."""
    arrays = {}
    for name, value in tensors.items():
        arr = np.ascontiguousarray(_to_numpy(value), dtype="<f4")
        arrays[name] = arr

    manifest = []
    offset = 0
    for name, arr in arrays.items():
        manifest.append({
            "name": name,
            "dtype": "f32",
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": arr.nbytes,
        })
        offset += arr.nbytes

    header = json.dumps({"manifest": manifest}) + "\n"
    with open(path, "wb") as f:
        f.write(header.encode("utf-8"))
        for arr in arrays.values():
            f.write(arr.tobytes())


def read_archive(path) -> dict:
    """Read an archive back as name -> float32 ndarray."""
    with open(path, "rb") as f:
        data = f.read()
    newline = data.find(b"\n")
    if newline < 0:
        raise CorruptArchiveError(f"{path}: no manifest line found")
    try:
        header = json.loads(data[:newline].decode("utf-8"))
        manifest = header["manifest"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CorruptArchiveError(f"{path}: unreadable manifest ({exc})") from exc

    payload = data[newline + 1:]
    expected = 0
    for entry in manifest:
        nbytes = entry["nbytes"]
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        if entry.get("dtype") != "f32":
            raise CorruptArchiveError(
                f"{path}: tensor {entry['name']!r} has unsupported dtype "
                f"{entry.get('dtype')!r}"
            )
        if nbytes != 4 * count:
            raise CorruptArchiveError(
                f"{path}: tensor {entry['name']!r} declares {nbytes} bytes "
                f"for shape {entry['shape']}"
            )
        expected = max(expected, entry["offset"] + nbytes)
    if len(payload) != expected:
        raise CorruptArchiveError(
            f"{path}: payload holds {len(payload)} bytes, manifest covers {expected}"
        )

    out = {}
    for entry in manifest:
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        arr = np.frombuffer(payload[start:stop], dtype="<f4")
        out[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return out


def require(tensors: dict, name: str, shape=None, path="archive") -> np.ndarray:
    """Fetch `name` from a read archive, optionally checking its shape."""
    if name not in tensors:
        raise MissingTensorError(f"{path}: missing tensor {name!r}")
    arr = tensors[name]
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise TensorShapeError(
            f"{path}: tensor {name!r} has shape {tuple(arr.shape)}, "
            f"expected {tuple(shape)}"
        )
    return arr


def _to_numpy(value):
    if hasattr(value, "detach"):  # torch tensor
        return value.detach().cpu().numpy()
    return np.asarray(value)
