"""The versioned binary container shared by corpus, dataset and model files.

Layout::

    magic "SMFT" | kind (4 bytes) | version (uint32 LE) | header length (uint64 LE)
    header: YAML mapping {"meta": ..., "arrays": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    array blobs, little-endian, in manifest order

The header is dumped with sorted keys and the blobs are raw bytes, so identical inputs produce identical files.
"""
from typing import Any, BinaryIO, Dict, Mapping, Tuple, Union
from pathlib import Path
import io
import logging
import os
import struct

import numpy as np
import yaml

l = logging.getLogger(__name__)

__all__ = ("MAGIC", "FORMAT_VERSION", "dump_container", "load_container")

MAGIC = b"SMFT"
FORMAT_VERSION = 1

_prefix = struct.Struct("<4s4sIQ")


def _little_endian(array: np.ndarray) -> np.ndarray:
    if array.dtype.kind == "M":
        array = array.astype("datetime64[D]").astype(np.int64)
    if array.dtype.kind not in "biuf":
        raise TypeError(f"Cannot store arrays of dtype {array.dtype}")
    return np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<"))


def dump_container(
    path: Union[str, Path, BinaryIO], kind: bytes, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]
) -> None:
    """Write a container of the given ``kind`` holding YAML-able ``meta`` and the named ``arrays``.

    Paths are written through a temporary sibling and renamed into place, so readers never see half a file.
    """
    if len(kind) != 4:
        raise ValueError(f"Container kind must be 4 bytes, got {kind!r}")

    manifest = []
    blobs = []
    offset = 0
    for name, array in arrays.items():
        stored = _little_endian(np.asarray(array))
        blob = stored.tobytes()
        manifest.append(
            {
                "name": name,
                "dtype": stored.dtype.str,
                "shape": list(stored.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)

    header = yaml.safe_dump({"meta": dict(meta), "arrays": manifest}, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_prefix.pack(MAGIC, kind, FORMAT_VERSION, len(header)))
    buf.write(header)
    for blob in blobs:
        buf.write(blob)

    if isinstance(path, (str, Path)):
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fp:
            fp.write(buf.getvalue())
        os.replace(tmp, path)
        l.debug("Wrote %s container %s (%d bytes)", kind.decode(), path, buf.tell())
    else:
        path.write(buf.getvalue())


def load_container(path: Union[str, Path, BinaryIO], kind: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Read a container written by `dump_container`, checking magic, kind, version and completeness.

    :return: The metadata mapping and a dict of arrays in native byte order.
    """
    if isinstance(path, (str, Path)):
        with open(path, "rb") as fp:
            data = fp.read()
        where = str(path)
    else:
        data = path.read()
        where = repr(path)

    if len(data) < _prefix.size:
        raise ValueError(f"{where} is truncated: no container header")
    magic, found_kind, version, header_len = _prefix.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"{where} is not a smartfeat container")
    if found_kind != kind:
        raise ValueError(f"{where} holds a {found_kind.decode(errors='replace')} container, expected {kind.decode()}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{where} has format version {version}, this build reads version {FORMAT_VERSION}")

    start = _prefix.size
    if len(data) < start + header_len:
        raise ValueError(f"{where} is truncated inside the header")
    header = yaml.safe_load(data[start : start + header_len].decode("utf-8"))
    body = memoryview(data)[start + header_len :]

    expected = sum(entry["nbytes"] for entry in header["arrays"])
    if len(body) != expected:
        raise ValueError(f"{where} is truncated: expected {expected} payload bytes, found {len(body)}")

    arrays = {}
    for entry in header["arrays"]:
        raw = body[entry["offset"] : entry["offset"] + entry["nbytes"]]
        array = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = array.astype(array.dtype.newbyteorder("="))
    return header["meta"] or {}, arrays
