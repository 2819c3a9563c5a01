"""MetaImage (.mhd header + .raw payload) reader and writer for 3-D volumes."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .volume import Volume

ELEMENT_TYPES = {
    "MET_SHORT": np.int16,
    "MET_USHORT": np.uint16,
    "MET_UCHAR": np.uint8,
    "MET_FLOAT": np.float32,
}


class MetaImageError(ValueError):
    pass


def parse_header(text: str) -> dict:
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise MetaImageError(f"malformed header line: {line!r}")
        fields[key.strip()] = value.strip()
    return fields


def _numbers(fields, key, cast, n):
    try:
        vals = [cast(v) for v in fields[key].split()]
    except (KeyError, ValueError) as exc:
        raise MetaImageError(f"bad or missing {key}") from exc
    if len(vals) != n:
        raise MetaImageError(f"{key} must have {n} values, got {fields[key]!r}")
    return vals


def load_mhd(path, kind: str | None = None) -> Volume:
    """Read a 3-D MetaImage. DimSize and spacing are (x, y, z) on disk, (d, h, w) in memory."""
    path = Path(path)
    fields = parse_header(path.read_text())
    if fields.get("NDims", "").strip() != "3":
        raise MetaImageError(f"{path}: NDims must be 3, got {fields.get('NDims')!r}")
    nx, ny, nz = _numbers(fields, "DimSize", int, 3)
    spacing_key = "ElementSpacing" if "ElementSpacing" in fields else "ElementSize"
    sx, sy, sz = _numbers(fields, spacing_key, float, 3)
    etype = fields.get("ElementType")
    if etype not in ELEMENT_TYPES:
        raise MetaImageError(f"{path}: unsupported ElementType {etype!r}")
    msb = fields.get("BinaryDataByteOrderMSB", fields.get("ElementByteOrderMSB", "False"))
    big = msb.strip().lower() == "true"
    dt = np.dtype(ELEMENT_TYPES[etype]).newbyteorder(">" if big else "<")
    data_file = fields.get("ElementDataFile")
    if not data_file or data_file == "LOCAL":
        raise MetaImageError(f"{path}: ElementDataFile must name a separate raw file")
    raw = (path.parent / data_file).read_bytes()
    expected = nx * ny * nz * dt.itemsize
    if len(raw) != expected:
        raise MetaImageError(
            f"{path}: DimSize {nx}x{ny}x{nz} of {etype} needs {expected} bytes, payload has {len(raw)}"
        )
    data = np.frombuffer(raw, dtype=dt).reshape(nz, ny, nx)
    if kind is None:
        kind = "mask" if etype == "MET_UCHAR" and np.isin(data, (0, 1)).all() else "intensity"
    if kind == "mask":
        data = data.astype(np.uint8)
    else:
        data = data.astype(np.float32)
    return Volume(data, (sz, sy, sx), kind)


def save_mhd(path, vol: Volume) -> Path:
    """Write ``vol`` as ``path`` (.mhd) plus a sibling .raw. Masks are MET_UCHAR, intensities MET_FLOAT."""
    path = Path(path)
    if vol.kind == "mask":
        etype, payload = "MET_UCHAR", vol.data.astype(np.uint8)
    else:
        etype, payload = "MET_FLOAT", vol.data.astype("<f4")
    raw_path = path.with_suffix(".raw")
    d, h, w = vol.shape
    sz, sy, sx = vol.spacing
    header = "\n".join([
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        f"DimSize = {w} {h} {d}",
        f"ElementSpacing = {sx!r} {sy!r} {sz!r}",
        f"ElementType = {etype}",
        f"ElementDataFile = {raw_path.name}",
    ]) + "\n"
    raw_path.write_bytes(np.ascontiguousarray(payload).tobytes())
    path.write_text(header)
    return path
