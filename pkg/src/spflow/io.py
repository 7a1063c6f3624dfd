"""File formats: flat binary clouds/flows, ASCII PLY, versioned checkpoints.

Binary layout is little-endian float32 (x, y, z) triples; labels are
little-endian int32. Checkpoints start with magic "SPFW" and a format
version, then named float64 tensors. All loaders reject rather than clamp
non-finite input.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .optim import ParameterStore

CHECKPOINT_MAGIC = b"SPFW"
CHECKPOINT_VERSION = 1

# 32 visually distinct colors for superpoint export (index = center id mod 32)
PALETTE = np.array(
    [
        (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
        (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
        (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
        (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
        (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
        (255, 255, 255), (0, 0, 0), (233, 150, 122), (46, 139, 87),
        (106, 90, 205), (255, 105, 180), (32, 178, 170), (218, 165, 32),
        (188, 143, 143), (72, 61, 139), (154, 205, 50), (205, 92, 92),
    ],
    dtype=np.uint8,
)


def _reject_nonfinite(arr, path):
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: non-finite values")


def _infer_format(path, fmt):
    if fmt is not None:
        return fmt
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return "ply"
    return "bin"


def load_cloud(path, fmt=None) -> np.ndarray:
    """Read an (n, 3) cloud from flat binary or ASCII PLY."""
    fmt = _infer_format(path, fmt)
    if fmt == "bin":
        raw = Path(path).read_bytes()
        if len(raw) == 0 or len(raw) % 12 != 0:
            raise DataError(f"{path}: byte length {len(raw)} is not a multiple of 12")
        arr = np.frombuffer(raw, dtype="<f4").reshape(-1, 3).astype(np.float64)
        _reject_nonfinite(arr, path)
        return arr
    if fmt == "ply":
        return _load_ply(path)
    raise DataError(f"unknown cloud format: {fmt}")


def save_cloud(path, coords, fmt=None):
    fmt = _infer_format(path, fmt)
    coords = np.asarray(coords, dtype=np.float64)
    if fmt == "bin":
        Path(path).write_bytes(coords.astype("<f4").tobytes())
    elif fmt == "ply":
        _save_ply(path, coords)
    else:
        raise DataError(f"unknown cloud format: {fmt}")


def load_flow(path) -> np.ndarray:
    return load_cloud(path, fmt="bin")


def save_flow(path, flow):
    save_cloud(path, flow, fmt="bin")


def load_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % 4 != 0:
        raise DataError(f"{path}: byte length {len(raw)} is not a multiple of 4")
    return np.frombuffer(raw, dtype="<i4").astype(np.int64)


def save_labels(path, labels):
    Path(path).write_bytes(np.asarray(labels).astype("<i4").tobytes())


# -- ASCII PLY -----------------------------------------------------------


def _load_ply(path) -> np.ndarray:
    try:
        text = Path(path).read_text()
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: not ASCII PLY ({e})")
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise DataError(f"{path}: missing 'ply' magic line")
    vertex_count = None
    props = []
    prop_types = []
    in_vertex = False
    body_start = None
    fmt_seen = False
    for i, line in enumerate(lines[1:], start=1):
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if tok[1:] != ["ascii", "1.0"]:
                raise DataError(f"{path}: only 'format ascii 1.0' is supported")
            fmt_seen = True
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                vertex_count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
            prop_types.append(tok[1])
        elif tok[0] == "end_header":
            body_start = i + 1
            break
    if body_start is None or not fmt_seen:
        raise DataError(f"{path}: malformed PLY header")
    if vertex_count is None:
        raise DataError(f"{path}: no vertex element")
    try:
        cols = [props.index(axis) for axis in ("x", "y", "z")]
    except ValueError:
        raise DataError(f"{path}: vertex element lacks x, y, z properties")
    # a 'float' property is 32-bit: quantize so 9-digit text round-trips exactly
    single = [prop_types[c] in ("float", "float32") for c in cols]
    rows = [line for line in lines[body_start:] if line.strip()]
    if len(rows) < vertex_count:
        raise DataError(f"{path}: truncated, {len(rows)} rows < {vertex_count} vertices")
    out = np.empty((vertex_count, 3), dtype=np.float64)
    for r in range(vertex_count):
        fields = rows[r].split()
        if len(fields) != len(props):
            raise DataError(f"{path}: row {r} has {len(fields)} fields, expected {len(props)}")
        try:
            for axis, (c, f32) in enumerate(zip(cols, single)):
                v = float(fields[c])
                out[r, axis] = np.float32(v) if f32 else v
        except ValueError as e:
            raise DataError(f"{path}: row {r}: {e}")
    _reject_nonfinite(out, path)
    return out


def _fmt_f32(v) -> str:
    return "%.9g" % np.float32(v)


def _save_ply(path, coords, colors=None):
    n = coords.shape[0]
    header = ["ply", "format ascii 1.0", f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    lines = header
    for i in range(n):
        row = " ".join(_fmt_f32(c) for c in coords[i])
        if colors is not None:
            row += " %d %d %d" % tuple(colors[i])
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def export_superpoints_ply(path, coords, center_index):
    """Cloud colored by dominant superpoint (palette indexed mod 32)."""
    coords = np.asarray(coords, dtype=np.float64)
    colors = PALETTE[np.asarray(center_index, dtype=np.int64) % len(PALETTE)]
    _save_ply(path, coords, colors)


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(store: ParameterStore, path):
    """Versioned container of the named parameter tensors (float64 LE)."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(store))]
    for name, tensor in sorted(store.items()):
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(tensor.data, dtype="<f8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, schema=None) -> ParameterStore:
    """Read a checkpoint; optionally validate names/shapes against `schema`."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    if len(raw) < 12:
        raise DataError(f"{path}: truncated checkpoint header")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    store = ParameterStore()
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            end = off + 8 * size
            if end > len(raw):
                raise DataError(f"{path}: truncated tensor data for {name}")
            arr = np.frombuffer(raw[off:end], dtype="<f8").reshape(shape).astype(np.float64)
            off = end
            _reject_nonfinite(arr, path)
            store.add(name, arr)
    except (struct.error, UnicodeDecodeError) as e:
        raise DataError(f"{path}: corrupt checkpoint ({e})")
    if schema is not None:
        missing = sorted(set(schema) - set(store.names()))
        if missing:
            raise DataError(f"{path}: checkpoint missing tensors: {', '.join(missing)}")
        extra = sorted(set(store.names()) - set(schema))
        if extra:
            raise DataError(f"{path}: checkpoint has unexpected tensors: {', '.join(extra)}")
        for name, shape in schema.items():
            got = store[name].data.shape
            if tuple(got) != tuple(shape):
                raise DataError(f"{path}: {name} has shape {got}, expected {tuple(shape)}")
    return store


# -- scene directories ---------------------------------------------------


def save_scene(directory, scene, meta=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_cloud(d / "source.bin", scene.source)
    save_cloud(d / "target.bin", scene.target)
    if scene.gt_flow is not None:
        save_flow(d / "gtflow.bin", scene.gt_flow)
    if scene.part_labels is not None:
        save_labels(d / "labels.bin", scene.part_labels)
    if meta is not None:
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def list_scene_dirs(root):
    root = Path(root)
    if (root / "source.bin").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / "source.bin").exists())
    if not dirs:
        raise DataError(f"{root}: no scene directories with source.bin found")
    return dirs
