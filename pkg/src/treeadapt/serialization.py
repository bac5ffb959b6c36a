"""Binary containers: checkpoints and density-map files; flat key=value configs."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"TRADCKPT"
CKPT_VERSION = 1
DENSITY_MAGIC = b"TRDENS01"


class FormatError(ValueError):
    pass


def write_container(path, arrays: dict, meta: dict, magic=CKPT_MAGIC, version=CKPT_VERSION):
    """magic(8) | u32 version | u64 header length | JSON header | raw little-endian arrays."""
    index, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)  # not ascontiguousarray: that turns 0-d arrays into 1-d
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes(order="C")
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": version, "arrays": index, "meta": meta}).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<IQ", version, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)
    return path


def read_container(path, magic=CKPT_MAGIC):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != magic:
        raise FormatError(f"{path}: bad magic {data[:8]!r}")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    header = json.loads(data[20:20 + hlen])
    base = 20 + hlen
    arrays = {}
    for ent in header["arrays"]:
        start = base + ent["offset"]
        buf = data[start:start + ent["nbytes"]]
        arrays[ent["name"]] = np.frombuffer(buf, dtype=np.dtype(ent["dtype"])).reshape(ent["shape"]).copy()
    return arrays, header["meta"]


def write_density(path, density: np.ndarray):
    """8-byte magic, u32 height, u32 width, float32 little-endian values."""
    density = np.asarray(density, dtype="<f4")
    if density.ndim != 2:
        raise FormatError("density map must be 2-D")
    with open(path, "wb") as fh:
        fh.write(DENSITY_MAGIC)
        fh.write(struct.pack("<II", *density.shape))
        fh.write(density.tobytes())
    return Path(path)


def read_density(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != DENSITY_MAGIC:
        raise FormatError(f"{path}: not a density file")
    h, w = struct.unpack("<II", data[8:16])
    return np.frombuffer(data[16:16 + 4 * h * w], dtype="<f4").reshape(h, w).copy()


def save_density_png(path, density: np.ndarray):
    """Jet-coloured 8-bit preview (blue = low density)."""
    from matplotlib import colormaps
    from PIL import Image

    d = np.asarray(density, dtype=np.float64)
    top = d.max()
    norm = d / top if top > 0 else np.zeros_like(d)
    rgb = (colormaps["jet"](norm)[..., :3] * 255).astype(np.uint8)
    Image.fromarray(rgb, "RGB").save(path)
    return Path(path)


def _parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    if "," in text:
        return tuple(_parse_value(p) for p in text.split(",") if p.strip())
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _format_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(_format_value(x) for x in v) + ("," if len(v) == 1 else "")
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def read_kv(path) -> dict:
    """Flat ``key = value`` file; '#' starts a comment; comma-separated values become tuples."""
    out = {}
    with open(path) as fh:
        for i, line in enumerate(fh):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{i + 1}: expected key = value")
            k, v = line.split("=", 1)
            out[k.strip()] = _parse_value(v)
    return out


def write_kv(path, values: dict):
    with open(path, "w") as fh:
        for k in sorted(values):
            fh.write(f"{k} = {_format_value(values[k])}\n")
    return Path(path)
