"""File-format glue shared by every pipeline stage.

Text assets are Wavefront OBJ meshes and JSON documents; rasters are 8-bit
binary PPM (P6) or float PFM; the pipeline's own binary containers
(VSBM, VSCM, VSDB, VSTT, VSLS) share the little-endian reader and writer
defined here so that every decoding failure reports the byte offset where
the file stopped making sense.
"""

from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import Any, List, Tuple

import numpy as np
from PIL import Image


LOGGER = logging.getLogger(__name__)


class FormatError(RuntimeError):
    """Signal that an asset file violates its declared format."""

    def __init__(self, message: str, path: Path | str | None = None, offset: int | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self.offset = offset
        location = ""
        if path is not None:
            location = f"{path}"
            if offset is not None:
                location += f" @ byte {offset}"
            location += ": "
        super().__init__(f"{location}{message}")


class BinaryWriter:
    """Accumulate a little-endian binary document in memory."""

    def __init__(self, magic: bytes) -> None:
        self._chunks: List[bytes] = [magic]

    def u16(self, value: int) -> None:
        self._chunks.append(struct.pack("<H", int(value)))

    def u32(self, value: int) -> None:
        self._chunks.append(struct.pack("<I", int(value)))

    def f32(self, value: float) -> None:
        self._chunks.append(struct.pack("<f", float(value)))

    def f32_array(self, values: np.ndarray, order: str = "C") -> None:
        array = np.asarray(values, dtype="<f4")
        self._chunks.append(array.tobytes(order=order))

    def u32_array(self, values: np.ndarray) -> None:
        self._chunks.append(np.asarray(values, dtype="<u4").tobytes())

    def text(self, value: str) -> None:
        encoded = value.encode("utf-8")
        self.u32(len(encoded))
        self._chunks.append(encoded)

    def getvalue(self) -> bytes:
        return b"".join(self._chunks)

    def write(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.getvalue())
        return path


class BinaryReader:
    """Walk a little-endian binary document, tracking the current offset."""

    def __init__(self, data: bytes, path: Path | str | None = None) -> None:
        self._data = data
        self._path = path
        self.offset = 0

    @classmethod
    def open(cls, path: Path, magic: bytes) -> "BinaryReader":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"Missing binary asset: {path}")
        reader = cls(path.read_bytes(), path)
        reader.expect_magic(magic)
        return reader

    def fail(self, message: str) -> FormatError:
        return FormatError(message, self._path, self.offset)

    def _take(self, size: int) -> bytes:
        if self.offset + size > len(self._data):
            raise self.fail(f"truncated: wanted {size} bytes, {len(self._data) - self.offset} left")
        chunk = self._data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def expect_magic(self, magic: bytes) -> None:
        found = self._take(len(magic))
        if found != magic:
            self.offset -= len(magic)
            raise self.fail(f"bad magic {found!r}, expected {magic!r}")

    def expect_version(self, supported: int) -> int:
        start = self.offset
        version = self.u32()
        if version != supported:
            self.offset = start
            raise self.fail(f"unsupported version {version}")
        return version

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self._take(4))[0]

    def f32_array(self, count: int) -> np.ndarray:
        raw = self._take(4 * count)
        return np.frombuffer(raw, dtype="<f4").astype(np.float64)

    def u32_array(self, count: int) -> np.ndarray:
        raw = self._take(4 * count)
        return np.frombuffer(raw, dtype="<u4").astype(np.int64)

    def text(self) -> str:
        length = self.u32()
        start = self.offset
        raw = self._take(length)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as error:
            self.offset = start
            raise self.fail(f"invalid UTF-8 text: {error}") from error

    def expect_end(self) -> None:
        if self.offset != len(self._data):
            raise self.fail(f"{len(self._data) - self.offset} trailing bytes")


# ---------------------------------------------------------------------------
# JSON


def load_json(path: Path) -> Any:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Missing JSON asset: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as error:
        raise FormatError(f"invalid JSON ({error.msg})", path, error.pos) from error


def save_json(path: Path, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Wavefront OBJ subset: v, vt, f a/b (1-based)


def load_obj(path: Path) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (vertices n×3, uv n×2, triangles m×3) from an OBJ subset.

    Texture coordinates are re-indexed per vertex through the face records;
    a vertex referenced with two different ``vt`` entries keeps the last one.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Missing mesh: {path}")
    positions: List[List[float]] = []
    texcoords: List[List[float]] = []
    faces: List[List[Tuple[int, int]]] = []
    with path.open("r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            fields = line.split()
            if not fields or fields[0].startswith("#"):
                continue
            try:
                if fields[0] == "v":
                    positions.append([float(value) for value in fields[1:4]])
                elif fields[0] == "vt":
                    texcoords.append([float(value) for value in fields[1:3]])
                elif fields[0] == "f":
                    if len(fields) != 4:
                        raise ValueError("only triangular faces are supported")
                    corners = []
                    for token in fields[1:]:
                        parts = token.split("/")
                        vertex = int(parts[0]) - 1
                        uv = int(parts[1]) - 1 if len(parts) > 1 and parts[1] else vertex
                        corners.append((vertex, uv))
                    faces.append(corners)
            except (ValueError, IndexError) as error:
                raise FormatError(f"line {line_number}: {error}", path) from error

    vertices = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    uv = np.zeros((len(vertices), 2), dtype=np.float64)
    triangles = np.zeros((len(faces), 3), dtype=np.int64)
    for face_index, corners in enumerate(faces):
        for corner, (vertex, texcoord) in enumerate(corners):
            if not 0 <= vertex < len(vertices):
                raise FormatError(f"face {face_index} references vertex {vertex + 1}", path)
            triangles[face_index, corner] = vertex
            if texcoords:
                if not 0 <= texcoord < len(texcoords):
                    raise FormatError(f"face {face_index} references uv {texcoord + 1}", path)
                uv[vertex] = texcoords[texcoord]
    return vertices, uv, triangles


def save_obj(path: Path, vertices: np.ndarray, uv: np.ndarray | None, triangles: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in np.asarray(vertices).reshape(-1, 3)]
    if uv is not None:
        lines.extend(f"vt {u:.6f} {v:.6f}" for u, v in np.asarray(uv).reshape(-1, 2))
        lines.extend(f"f {a + 1}/{a + 1} {b + 1}/{b + 1} {c + 1}/{c + 1}" for a, b, c in triangles)
    else:
        lines.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in triangles)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Rasters


def load_image(path: Path) -> np.ndarray:
    """Load an RGB raster as float64 in [0, 1] (PPM via Pillow, PFM via numpy)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Missing image: {path}")
    if path.suffix.lower() == ".pfm":
        return _load_pfm(path)
    with Image.open(path) as image:
        rgb = np.asarray(image.convert("RGB"), dtype=np.float64)
    return rgb / 255.0


def save_image(path: Path, raster: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".pfm":
        return _save_pfm(path, raster)
    quantized = np.clip(np.rint(np.asarray(raster) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quantized).save(path, format="PPM")
    return path


def _save_pfm(path: Path, raster: np.ndarray) -> Path:
    raster = np.asarray(raster, dtype="<f4")
    if raster.ndim == 2:
        kind = "Pf"
    elif raster.ndim == 3 and raster.shape[2] == 3:
        kind = "PF"
    else:
        raise ValueError(f"PFM holds (H, W) or (H, W, 3) rasters, got shape {raster.shape}")
    height, width = raster.shape[:2]
    header = f"{kind}\n{width} {height}\n-1.0\n".encode("ascii")
    # PFM stores scanlines bottom to top
    path.write_bytes(header + np.ascontiguousarray(raster[::-1]).tobytes())
    return path


def _load_pfm(path: Path) -> np.ndarray:
    """Read a PFM file; ``PF`` gives (H, W, 3), ``Pf`` gives (H, W)."""
    data = path.read_bytes()
    lines = data.split(b"\n", 3)
    kind = lines[0].strip() if lines else b""
    if len(lines) < 4 or kind not in (b"PF", b"Pf"):
        raise FormatError("not a PFM file", path, 0)
    channels = 3 if kind == b"PF" else 1
    try:
        width, height = (int(value) for value in lines[1].split())
        scale = float(lines[2])
    except ValueError as error:
        raise FormatError(f"bad PFM header: {error}", path, len(lines[0]) + 1) from error
    offset = len(data) - len(lines[3])
    dtype = "<f4" if scale < 0 else ">f4"
    expected = width * height * channels * 4
    if len(lines[3]) != expected:
        raise FormatError(f"expected {expected} pixel bytes, found {len(lines[3])}", path, offset)
    shape = (height, width, 3) if channels == 3 else (height, width)
    pixels = np.frombuffer(lines[3], dtype=dtype).reshape(shape)
    return pixels[::-1].astype(np.float64)
