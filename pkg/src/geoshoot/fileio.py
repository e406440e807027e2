"""Bit-exact QSF field files.

Layout: an ASCII header followed by a raw little-endian float32 payload,
channels-last, last spatial axis fastest::

    QSF 1
    dim <d>
    sizes <n1> ... <nd>
    spacing <s1> ... <sd>
    channels <c>
    kind <image|momentum|velocity|map|label>
    data
    <raw float32 payload>

Spacing values are written with ``repr`` so floats round-trip exactly.
Label images hold integer-valued floats and use ``kind label``.
"""

from __future__ import annotations

import numpy as np

from .grid import DeformationMap, GridGeometry, ScalarImage, VectorField

__all__ = ["read_field", "write_field", "QsfError"]

_KINDS = ("image", "momentum", "velocity", "map", "label")


class QsfError(ValueError):
    """Malformed QSF file."""


def _default_kind(obj) -> str:
    if isinstance(obj, ScalarImage):
        return "image"
    if isinstance(obj, DeformationMap):
        return "map"
    if isinstance(obj, VectorField):
        return "momentum"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_field(obj, path, kind: str | None = None) -> None:
    """Serialize a ScalarImage / VectorField / DeformationMap to ``path``."""
    kind = kind or _default_kind(obj)
    if kind not in _KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    geom = obj.geom
    data = obj.coords if isinstance(obj, DeformationMap) else obj.data
    channels = 1 if data.ndim == geom.dim else data.shape[-1]
    if kind in ("image", "label") and channels != 1:
        raise ValueError(f"kind {kind!r} requires 1 channel")
    header = (
        "QSF 1\n"
        f"dim {geom.dim}\n"
        f"sizes {' '.join(str(n) for n in geom.sizes)}\n"
        f"spacing {' '.join(repr(s) for s in geom.spacing)}\n"
        f"channels {channels}\n"
        f"kind {kind}\n"
        "data\n"
    )
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload)


def _header_line(fh, name):
    line = fh.readline().decode("ascii", errors="replace").rstrip("\n")
    parts = line.split()
    if not parts or parts[0] != name:
        raise QsfError(f"expected {name!r} header line, got {line!r}")
    return parts[1:]


def read_field(path):
    """Read a QSF file; returns ScalarImage, VectorField or DeformationMap
    according to the ``kind`` header."""
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii", errors="replace").rstrip("\n")
        if magic != "QSF 1":
            raise QsfError(f"bad magic: {magic!r}")
        (dim_s,) = _header_line(fh, "dim")
        dim = int(dim_s)
        sizes = tuple(int(v) for v in _header_line(fh, "sizes"))
        spacing = tuple(float(v) for v in _header_line(fh, "spacing"))
        if len(sizes) != dim or len(spacing) != dim:
            raise QsfError(
                f"dimension/size mismatch: dim {dim} with {len(sizes)} sizes, "
                f"{len(spacing)} spacings"
            )
        (chan_s,) = _header_line(fh, "channels")
        channels = int(chan_s)
        (kind,) = _header_line(fh, "kind")
        if kind not in _KINDS:
            raise QsfError(f"unknown kind {kind!r}")
        if _header_line(fh, "data") != []:
            raise QsfError("malformed data separator line")
        geom = GridGeometry(dim, sizes, spacing)
        expected = geom.voxel_count * channels
        payload = fh.read()
        n_vals = len(payload) // 4
        if len(payload) % 4 != 0 or n_vals < expected:
            raise QsfError(
                f"truncated payload: expected {expected * 4} bytes, got {len(payload)}"
            )
        if n_vals != expected:
            raise QsfError(
                f"payload size mismatch: header implies {expected} values, "
                f"file holds {n_vals}"
            )
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if kind in ("image", "label"):
        if channels != 1:
            raise QsfError(f"payload size mismatch: kind {kind!r} with {channels} channels")
        return ScalarImage(geom, data.reshape(sizes))
    if channels != dim:
        raise QsfError(f"payload size mismatch: kind {kind!r} needs {dim} channels")
    shaped = data.reshape(sizes + (dim,))
    if kind == "map":
        return DeformationMap(geom, shaped)
    return VectorField(geom, shaped)
