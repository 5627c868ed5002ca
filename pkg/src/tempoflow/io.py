"""Readers and writers for .flo flows, PFM depths, PNG frames, PGM masks and latent dumps."""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .consistency import LatentSequence
from .errors import (
    BadMagicError,
    DataError,
    FormatError,
    HeaderError,
    NonFiniteError,
    TruncatedError,
    UnsupportedVariantError,
)
from .flow import FlowField, OcclusionMask

FLO_MAGIC = b"PIEH"


def write_flo(path, flow: FlowField) -> None:
    h, w = flow.height, flow.width
    uv = np.ascontiguousarray(flow.vectors, dtype="<f4")
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(struct.pack("<ii", w, h))
        f.write(uv.tobytes())


def read_flo(path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != FLO_MAGIC:
        raise BadMagicError(f"{path}: not a .flo file (magic {raw[:4]!r})")
    if len(raw) < 12:
        raise TruncatedError(f"{path}: header truncated")
    w, h = struct.unpack("<ii", raw[4:12])
    if w <= 0 or h <= 0:
        raise HeaderError(f"{path}: bad dimensions {w}x{h}")
    need = 12 + 8 * w * h
    if len(raw) < need:
        raise TruncatedError(f"{path}: expected {need} bytes, got {len(raw)}")
    if len(raw) > need:
        raise HeaderError(f"{path}: {len(raw) - need} trailing bytes")
    uv = np.frombuffer(raw, dtype="<f4", offset=12, count=2 * w * h).reshape(h, w, 2)
    if not np.all(np.isfinite(uv)):
        raise NonFiniteError(f"{path}: non-finite flow values")
    return FlowField(uv.astype(np.float64))


def write_pfm(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise DataError(f"PFM writer expects a single-channel [H, W] map, got {depth.shape}")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
        # PFM stores rows bottom to top
        f.write(np.ascontiguousarray(depth[::-1], dtype="<f4").tobytes())


_PFM_HEADER = re.compile(rb"\A(P[fF])\s+(\S+)\s+(\S+)\s+(\S+)\s")


def read_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] == b"PF":
        raise UnsupportedVariantError(f"{path}: colour PFM is not supported")
    m = _PFM_HEADER.match(raw)
    if m is None or m.group(1) != b"Pf":
        raise HeaderError(f"{path}: malformed PFM header")
    try:
        w, h = int(m.group(2)), int(m.group(3))
        scale = float(m.group(4))
    except ValueError as exc:
        raise HeaderError(f"{path}: malformed PFM header") from exc
    if w <= 0 or h <= 0 or scale == 0 or not np.isfinite(scale):
        raise HeaderError(f"{path}: bad PFM dimensions or scale")
    dtype = "<f4" if scale < 0 else ">f4"
    off = m.end()
    if len(raw) - off < 4 * w * h:
        raise TruncatedError(f"{path}: PFM payload truncated")
    data = np.frombuffer(raw, dtype=dtype, offset=off, count=w * h).reshape(h, w)
    return data[::-1].astype(np.float64)


def quantize(frame: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8, rounding halves up."""
    return np.floor(np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, frame: np.ndarray) -> None:
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise DataError(f"PNG frames must be [3, H, W], got {frame.shape}")
    Image.fromarray(np.ascontiguousarray(quantize(frame).transpose(1, 2, 0)), mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            mode, fmt = img.mode, img.format
            arr = np.asarray(img)
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"{path}: unreadable image ({exc})") from exc
    if fmt != "PNG":
        raise FormatError(f"{path}: not a PNG file")
    if mode != "RGB":
        raise UnsupportedVariantError(f"{path}: need 8-bit RGB, got mode {mode}")
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pgm(path, mask: np.ndarray) -> None:
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise DataError(f"PGM masks must be [H, W], got {m.shape}")
    h, w = m.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.where(m, 255, 0).astype(np.uint8).tobytes())


def _pgm_tokens(raw: bytes, n: int):
    tokens, pos = [], 0
    while len(tokens) < n:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise HeaderError("PGM header truncated")
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] in (b"P2", b"P1", b"P4"):
        raise UnsupportedVariantError(f"{path}: PGM variant {raw[:2].decode()} is not supported")
    if raw[:2] != b"P5":
        raise BadMagicError(f"{path}: not a binary PGM file")
    try:
        (magic, w, h, maxval), off = _pgm_tokens(raw, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise HeaderError(f"{path}: malformed PGM header") from exc
    except HeaderError as exc:
        raise HeaderError(f"{path}: {exc}") from exc
    if w <= 0 or h <= 0:
        raise HeaderError(f"{path}: bad PGM dimensions")
    if maxval != 255:
        raise UnsupportedVariantError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    if len(raw) - off < w * h:
        raise TruncatedError(f"{path}: PGM payload truncated")
    px = np.frombuffer(raw, dtype=np.uint8, offset=off, count=w * h).reshape(h, w)
    return px >= 128


def write_latents(directory, seq: LatentSequence, name: str = "latents") -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(np.stack(seq.latents), dtype="<f8")
    (d / f"{name}.f64").write_bytes(arr.tobytes())
    meta = {"shape": list(arr.shape), "level": int(seq.level), "dtype": "<f8"}
    (d / f"{name}.json").write_text(json.dumps(meta, indent=2) + "\n")


def read_latents(directory, name: str = "latents") -> LatentSequence:
    d = Path(directory)
    try:
        meta = json.loads((d / f"{name}.json").read_text())
        shape = tuple(int(s) for s in meta["shape"])
        level = int(meta["level"])
    except FileNotFoundError as exc:
        raise DataError(f"{d}: missing latent sidecar {name}.json") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise HeaderError(f"{d}: malformed latent sidecar") from exc
    if meta.get("dtype", "<f8") != "<f8" or len(shape) != 4:
        raise UnsupportedVariantError(f"{d}: unsupported latent layout {meta}")
    try:
        raw = (d / f"{name}.f64").read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"{d}: missing latent dump {name}.f64") from exc
    need = 8 * int(np.prod(shape))
    if len(raw) != need:
        raise TruncatedError(f"{d}: latent dump has {len(raw)} bytes, expected {need}")
    arr = np.frombuffer(raw, dtype="<f8").reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{d}: non-finite latent values")
    return LatentSequence([a.astype(np.float64) for a in arr], level)


def _numbered(directory, suffix: str) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"{d}: not a directory")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() == suffix)
    if not files:
        raise DataError(f"{d}: no {suffix} files")
    return files


def write_sequence(directory, items: Sequence, writer, prefix: str, suffix: str) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, item in enumerate(items):
        p = d / f"{prefix}_{i:04d}{suffix}"
        writer(p, item)
        paths.append(p)
    return paths


def read_frames(directory) -> list[np.ndarray]:
    frames = [read_png(p) for p in _numbered(directory, ".png")]
    _same_dims([f.shape[1:] for f in frames], directory)
    return frames


def read_flows(directory) -> list[FlowField]:
    flows = [read_flo(p) for p in _numbered(directory, ".flo")]
    _same_dims([(f.height, f.width) for f in flows], directory)
    return flows


def read_occlusions(directory) -> list[OcclusionMask]:
    occs = [OcclusionMask(read_pgm(p)) for p in _numbered(directory, ".pgm")]
    _same_dims([o.shape for o in occs], directory)
    return occs


def read_depths(directory) -> list[np.ndarray]:
    depths = [read_pfm(p) for p in _numbered(directory, ".pfm")]
    _same_dims([d.shape for d in depths], directory)
    return depths


def _same_dims(shapes, where) -> None:
    if len(set(tuple(s) for s in shapes)) > 1:
        raise DataError(f"{where}: files disagree on dimensions")
