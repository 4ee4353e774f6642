"""File formats: binary PPM images, the TCFW1 weight container, token reports."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import F32

PPM_WHITESPACE = b" \t\n\v\f\r"
WEIGHTS_MAGIC = b"TCFW1"
REPORT_SCHEMA = "tcf-report/1"


# --- PPM -------------------------------------------------------------------

def _header_fields(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping '#' comments.

    Returns the tokens and the offset just past the single whitespace byte
    that terminates the last one.
    """
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and (data[pos] in PPM_WHITESPACE or data[pos] == ord("#")):
            if data[pos] == ord("#"):
                while pos < n and data[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and data[pos] not in PPM_WHITESPACE and data[pos] != ord("#"):
            pos += 1
        if start == pos:
            raise FormatError("PPM header ended early")
        tokens.append(data[start:pos])
    if pos >= n or data[pos] not in PPM_WHITESPACE:
        raise FormatError("PPM header must end with a single whitespace byte")
    return tokens, pos + 1


def _positive_int(token: bytes, what: str) -> int:
    if not token.isdigit():
        raise FormatError(f"PPM {what} {token!r} is not a decimal integer")
    value = int(token)
    if value < 1:
        raise FormatError(f"PPM {what} must be positive")
    return value


def parse_ppm(data: bytes) -> np.ndarray:
    if data[:2] != b"P6":
        raise FormatError("not a binary PPM (magic P6 expected)")
    if len(data) < 3 or (data[2] not in PPM_WHITESPACE and data[2] != ord("#")):
        raise FormatError("PPM magic must be followed by whitespace")
    fields, offset = _header_fields(data[2:], 3)
    width = _positive_int(fields[0], "width")
    height = _positive_int(fields[1], "height")
    maxval = _positive_int(fields[2], "maxval")
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval} (only 255)")
    start = 2 + offset
    expected = width * height * 3
    payload = data[start:start + expected]
    if len(payload) < expected:
        raise FormatError(f"PPM payload truncated: {len(payload)} of {expected} bytes")
    rgb = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return (rgb.transpose(2, 0, 1).astype(F32) / F32(255.0))


def load_ppm(path) -> np.ndarray:
    """Channels-first float32 image in [0, 1] from a P6 file with maxval 255."""
    return parse_ppm(Path(path).read_bytes())


def encode_ppm(rgb: np.ndarray) -> bytes:
    """Canonical P6 bytes for an H x W x 3 uint8 array."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    return b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes()


def save_ppm(image, path) -> None:
    """Write a 3 x H x W float image in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    rgb = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(encode_ppm(rgb))


# --- weights ---------------------------------------------------------------

def dump_weights(store: dict) -> bytes:
    out = io.BytesIO()
    out.write(WEIGHTS_MAGIC)
    out.write(struct.pack("<I", len(store)))
    for name, tensor in store.items():
        arr = np.asarray(tensor, dtype="<f4", order="C")
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes())
    return out.getvalue()


def parse_weights(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("weight file truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(len(WEIGHTS_MAGIC))) != WEIGHTS_MAGIC:
        raise FormatError("bad weight file magic (expected TCFW1)")
    (count,) = struct.unpack("<I", take(4))
    store = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("weight name is not valid UTF-8") from None
        if name in store:
            raise FormatError(f"duplicate weight name {name!r}")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").astype(F32).reshape(shape)
        store[name] = arr
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after the last weight")
    return store


def save_weights(store: dict, path) -> None:
    Path(path).write_bytes(dump_weights(store))


def load_weights(path) -> dict[str, np.ndarray]:
    return parse_weights(Path(path).read_bytes())


# --- reports ---------------------------------------------------------------

def f32_value(x) -> float:
    """Shortest decimal that round-trips the float32 value, as a Python float."""
    return float(str(np.float32(x)))


@dataclass
class StageReport:
    stage: int
    token_count: int
    grid: tuple
    token_ids: np.ndarray   # H0 x W0
    areas: np.ndarray       # pixels per token

    @property
    def density(self) -> np.ndarray:
        return 1.0 / self.areas.astype(np.float64)

    @property
    def density_map(self) -> np.ndarray:
        return self.density[self.token_ids]

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "token_count": self.token_count,
            "grid": list(self.grid),
            "token_ids": self.token_ids.tolist(),
            "areas": self.areas.tolist(),
            "density": self.density.tolist(),
            "density_map": self.density_map.tolist(),
        }


@dataclass
class TokenMapReport:
    image_size: tuple
    stem_grid: tuple
    stages: list
    ctm: list
    attention_macs: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "schema": REPORT_SCHEMA,
            "image_size": list(self.image_size),
            "stem_grid": list(self.stem_grid),
            "stages": [s.to_dict() for s in self.stages],
            "ctm": self.ctm,
            "attention_macs": self.attention_macs,
        }
        d.update(self.extra)
        return d


def build_report(pyramid, attention_macs: int, parts, extra: dict | None = None) -> TokenMapReport:
    stages = [
        StageReport(s, t.n, (t.grid_h, t.grid_w), t.pixel_map.copy(), t.areas())
        for s, t in enumerate(pyramid.stages)
    ]
    ctm = [
        {"index": i, "parts": int(p), "tokens_in": c.num_tokens, "clusters": c.num_clusters, "dist_ops": int(c.dist_ops)}
        for i, (c, p) in enumerate(zip(pyramid.clusters, parts))
    ]
    return TokenMapReport(tuple(pyramid.image_size), tuple(pyramid.stem_grid), stages, ctm,
                          int(attention_macs), dict(extra or {}))


# --- overlays --------------------------------------------------------------

def token_color(ids: np.ndarray) -> np.ndarray:
    """Distinct, never-black RGB colours for token ids below 2**24 - 1.

    ``id + 1`` goes through an invertible 24-bit mix (odd multiply and
    xorshifts modulo 2**24), so different ids never share a colour and
    only the unused input 0 would map to black.
    """
    x = (np.asarray(ids, dtype=np.uint64) + np.uint64(1)) & np.uint64(0xFFFFFF)
    mask = np.uint64(0xFFFFFF)
    for mult in (0x9E3779, 0x85EBCB):
        x = (x * np.uint64(mult | 1)) & mask
        x ^= x >> np.uint64(12)
    r = (x >> np.uint64(16)) & np.uint64(0xFF)
    g = (x >> np.uint64(8)) & np.uint64(0xFF)
    b = x & np.uint64(0xFF)
    return np.stack([r, g, b], axis=-1).astype(np.uint8)


def boundary_mask(ids: np.ndarray) -> np.ndarray:
    """Pixels whose id differs from any 4-neighbour."""
    mask = np.zeros(ids.shape, dtype=bool)
    vert = ids[1:, :] != ids[:-1, :]
    horiz = ids[:, 1:] != ids[:, :-1]
    mask[1:, :] |= vert
    mask[:-1, :] |= vert
    mask[:, 1:] |= horiz
    mask[:, :-1] |= horiz
    return mask


def render_overlay(ids: np.ndarray, boundaries: bool = True) -> np.ndarray:
    rgb = token_color(ids)
    if boundaries:
        rgb[boundary_mask(ids)] = 0
    return rgb


def render_density(stage: StageReport) -> np.ndarray:
    """Grey-level density map, brightest where tokens are finest."""
    dm = stage.density_map
    level = np.rint(255.0 * dm / dm.max()).astype(np.uint8)
    return np.repeat(level[:, :, None], 3, axis=2)


def save_token_overlay(report: TokenMapReport, stage: int, path) -> None:
    if not 0 <= stage < len(report.stages):
        raise FormatError(f"report has no stage {stage}")
    Path(path).write_bytes(encode_ppm(render_overlay(report.stages[stage].token_ids)))


def save_density_map(report: TokenMapReport, stage: int, path) -> None:
    Path(path).write_bytes(encode_ppm(render_density(report.stages[stage])))
