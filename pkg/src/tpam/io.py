"""File formats: IDX datasets, the TPTC tensor container, checkpoints, PGM images.

TPTC layout (little-endian)::

    b"TPTC" | version u8 (=1) | dtype u8 (1=f32, 2=f64) | ndim u8 | reserved u8 (=0)
    | dims: ndim x u64 | payload: row-major elements

A checkpoint is ``b"TPAMCKPT\\n"``, a u64 header length, a UTF-8 JSON header
(format tag, model config, parameter manifest, sha256 of the body) and the
body: one TPTC blob per parameter, in manifest order.
"""

from __future__ import annotations

import csv
import gzip
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, FormatError, IntegrityError
from .model import ModelConfig, TpamModel

MAGIC = b"TPTC"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODE_OF = {np.dtype("float32"): 1, np.dtype("float64"): 2}

CHECKPOINT_MAGIC = b"TPAMCKPT\n"
CHECKPOINT_FORMAT = "tpam-checkpoint/1"

IDX_TYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def atomic_write(path, data: bytes) -> None:
    """Write via a temp file in the same directory followed by a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def parse_idx(raw: bytes) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"IDX header needs 4 bytes, file has {len(raw)}", offset=0)
    zero0, zero1, type_code, ndim = raw[:4]
    if zero0 != 0 or zero1 != 0:
        raise FormatError(f"bad IDX magic {raw[:4].hex()}", offset=0)
    if type_code not in IDX_TYPES:
        raise FormatError(f"unknown IDX element type 0x{type_code:02x}", offset=2)
    if ndim == 0:
        raise FormatError("IDX file declares zero dimensions", offset=3)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"truncated IDX dims: need {header_end} bytes, have {len(raw)}", offset=len(raw))
    dims = struct.unpack(">" + "I" * ndim, raw[4:header_end])
    dtype = IDX_TYPES[type_code]
    expected = int(np.prod(dims)) * dtype.itemsize
    actual = len(raw) - header_end
    if actual != expected:
        raise FormatError(
            f"IDX payload length mismatch: expected {expected} bytes, got {actual}", offset=header_end
        )
    return np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(dims).copy()


def load_idx(path) -> np.ndarray:
    """Raw IDX array (gzipped files are recognised by a ``.gz`` suffix)."""
    return parse_idx(_read_bytes(path))


def load_idx_images(path) -> np.ndarray:
    """IDX image stack scaled to [0, 1] as float64 (raw byte / 255)."""
    return load_idx(path).astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    labels = load_idx(path)
    if labels.ndim != 1:
        raise FormatError(f"label file must be 1-d, got shape {labels.shape}")
    return labels.astype(np.int64)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist(directory):
    """(train_images, train_labels, test_images, test_labels) from the four IDX files."""
    d = Path(directory)
    return (
        load_idx_images(_find(d, "train-images-idx3-ubyte")),
        load_idx_labels(_find(d, "train-labels-idx1-ubyte")),
        load_idx_images(_find(d, "t10k-images-idx3-ubyte")),
        load_idx_labels(_find(d, "t10k-labels-idx1-ubyte")),
    )


def has_mnist(directory) -> bool:
    try:
        d = Path(directory)
        for stem in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                     "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"):
            _find(d, stem)
        return True
    except FileNotFoundError:
        return False


# ---------------------------------------------------------------------------
# tensor container


def encode_tensor(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    if t.dtype not in CODE_OF:
        t = t.astype(np.float64)
    if t.ndim == 0:
        raise ArgumentError("containers hold tensors of order >= 1")
    if t.ndim > 255:
        raise ArgumentError("too many dimensions for the container format")
    if not np.all(np.isfinite(t)):
        raise ArgumentError("refusing to write a non-finite tensor")
    code = CODE_OF[t.dtype]
    header = MAGIC + struct.pack("<BBBB", VERSION, code, t.ndim, 0)
    header += struct.pack("<" + "Q" * t.ndim, *t.shape)
    return header + np.ascontiguousarray(t, dtype=DTYPE_CODES[code]).tobytes()


def decode_tensor(raw: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one container starting at ``offset``; returns (tensor, end offset)."""
    if len(raw) - offset < 8:
        raise FormatError("truncated container header", offset=offset)
    if raw[offset : offset + 4] != MAGIC:
        raise FormatError(f"bad container magic {raw[offset:offset + 4]!r}", offset=offset)
    version, code, ndim, reserved = struct.unpack_from("<BBBB", raw, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}", offset=offset + 4)
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}", offset=offset + 5)
    if ndim == 0:
        raise FormatError("container declares zero dimensions", offset=offset + 6)
    if reserved != 0:
        raise FormatError(f"reserved byte must be 0, got {reserved}", offset=offset + 7)
    dims_at = offset + 8
    if len(raw) < dims_at + 8 * ndim:
        raise FormatError("truncated container dims", offset=len(raw))
    dims = struct.unpack_from("<" + "Q" * ndim, raw, dims_at)
    if any(d < 1 for d in dims):
        raise FormatError(f"container dims must be >= 1, got {dims}", offset=dims_at)
    dtype = DTYPE_CODES[code]
    start = dims_at + 8 * ndim
    nbytes = int(np.prod(dims, dtype=object)) * dtype.itemsize
    if len(raw) - start < nbytes:
        raise FormatError(
            f"container payload needs {nbytes} bytes, {len(raw) - start} available", offset=start
        )
    t = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize, offset=start)
    return t.reshape(dims).astype(dtype.newbyteorder("="), copy=True), start + nbytes


def write_tensor(path, t: np.ndarray) -> None:
    atomic_write(path, encode_tensor(t))


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    t, end = decode_tensor(raw)
    if end != len(raw):
        raise FormatError(f"{len(raw) - end} trailing bytes after container", offset=end)
    return t


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(model: TpamModel, metadata: dict | None = None) -> bytes:
    body = bytearray()
    manifest = []
    for name, arr in model.params.items():
        blob = encode_tensor(arr)
        manifest.append({"name": name, "shape": list(arr.shape), "offset": len(body), "length": len(blob)})
        body += blob
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "manifest": manifest,
        "sha256": hashlib.sha256(bytes(body)).hexdigest(),
        "metadata": metadata or {},
    }
    hbytes = json.dumps(header, indent=1, sort_keys=True).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + bytes(body)


def decode_checkpoint(raw: bytes) -> tuple[TpamModel, dict]:
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise FormatError("not a tpam checkpoint", offset=0)
    at = len(CHECKPOINT_MAGIC)
    if len(raw) < at + 8:
        raise FormatError("truncated checkpoint header length", offset=at)
    (hlen,) = struct.unpack_from("<Q", raw, at)
    at += 8
    try:
        header = json.loads(raw[at : at + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}", offset=at) from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"unknown checkpoint format {header.get('format')!r}", offset=at)
    body = raw[at + hlen :]
    if hashlib.sha256(body).hexdigest() != header.get("sha256"):
        raise IntegrityError("checkpoint checksum mismatch")
    try:
        config = ModelConfig.from_dict(header["config"])
    except Exception as exc:
        raise IntegrityError(f"invalid model config in checkpoint: {exc}") from exc
    expected = config.param_shapes()
    manifest = header["manifest"]
    if [m["name"] for m in manifest] != list(expected):
        raise IntegrityError(f"manifest names {[m['name'] for m in manifest]} do not match config")
    params = {}
    for entry in manifest:
        name = entry["name"]
        if tuple(entry["shape"]) != expected[name]:
            raise IntegrityError(
                f"parameter {name}: manifest shape {tuple(entry['shape'])} != config shape {expected[name]}"
            )
        start = entry["offset"]
        t, end = decode_tensor(body, start)
        if end - start != entry["length"] or t.shape != expected[name]:
            raise IntegrityError(f"parameter {name}: blob does not match manifest")
        params[name] = t
    return TpamModel(config, params), header.get("metadata", {})


def save_checkpoint(path, model: TpamModel, metadata: dict | None = None) -> None:
    atomic_write(path, encode_checkpoint(model, metadata))


def load_checkpoint(path) -> TpamModel:
    return decode_checkpoint(Path(path).read_bytes())[0]


def load_checkpoint_with_metadata(path) -> tuple[TpamModel, dict]:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# images and CSV


def encode_pgm(m: np.ndarray) -> bytes:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise ArgumentError(f"grayscale image must be a non-empty H x W map, got shape {m.shape}")
    if not np.all(np.isfinite(m)) or m.min() < 0.0 or m.max() > 1.0:
        raise ArgumentError("grayscale values must lie in [0, 1]")
    pixels = np.floor(m * 255.0 + 0.5).astype(np.uint8)
    h, w = m.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_grayscale_image(m: np.ndarray, path) -> None:
    atomic_write(path, encode_pgm(m))


def write_signed_map(m: np.ndarray, stem) -> tuple[Path, Path]:
    """Max-abs normalized map written as a (positive, negative) PGM pair."""
    m = np.asarray(m, dtype=np.float64)
    scale = np.max(np.abs(m))
    n = m / scale if scale > 0 else np.zeros_like(m)
    stem = Path(stem)
    pos = stem.with_name(stem.name + "_pos.pgm")
    neg = stem.with_name(stem.name + "_neg.pgm")
    write_grayscale_image(np.clip(n, 0.0, 1.0), pos)
    write_grayscale_image(np.clip(-n, 0.0, 1.0), neg)
    return pos, neg


@dataclass(frozen=True)
class BoundingBox:
    image_id: str
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def check(self, height: int, width: int) -> None:
        if not (0 <= self.x_min < self.x_max <= width and 0 <= self.y_min < self.y_max <= height):
            raise ArgumentError(f"bounding box {self} outside a {height}x{width} image")


def read_bboxes(path) -> dict[str, BoundingBox]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        need = ["id", "x_min", "y_min", "x_max", "y_max"]
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != need:
            raise FormatError(f"bounding box CSV header must be {','.join(need)}", offset=0)
        out = {}
        for row in reader:
            box = BoundingBox(row["id"], *(int(row[c]) for c in need[1:]))
            out[box.image_id] = box
    return out
