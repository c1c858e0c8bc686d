"""Compact latent codes for the mouth region.

A mouth frame is the texture crop of the region of interest plus the 15
shape weights of the tracked face. The reference codec standardizes the
concatenated vector, weights the geometry block by ``alpha`` and projects
onto the leading principal directions. Anything implementing
:class:`MouthCodec` can take its place in synthesis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple, Union, runtime_checkable

import numpy as np

from asset_io import BinaryReader, BinaryWriter
from face_model import ShapeModel


LOGGER = logging.getLogger(__name__)

CODEC_MAGIC = b"VSCM"
CODEC_VERSION = 1
SEQUENCE_MAGIC = b"VSLS"
SEQUENCE_VERSION = 1
DEFAULT_RAM_BUDGET = 4 * 2 ** 30


class RoiError(RuntimeError):
    """Signal that a region of interest does not fit its atlas."""


class DegenerateCodecError(RuntimeError):
    """Signal that the training frames carry no variance to encode."""


@dataclass(frozen=True)
class RoiRect:
    x: int
    y: int
    width: int
    height: int

    def check(self, atlas_shape: Tuple[int, int]) -> None:
        height, width = atlas_shape
        if self.width <= 0 or self.height <= 0:
            raise RoiError(f"Region of interest {self.width}x{self.height} has no area")
        if self.x < 0 or self.y < 0 or self.x + self.width > width or self.y + self.height > height:
            raise RoiError(
                f"Region of interest ({self.x}, {self.y}, {self.width}, {self.height}) "
                f"exceeds the {width}x{height} atlas"
            )


@dataclass(frozen=True)
class MouthRoi:
    rect: RoiRect
    vertex_ids: np.ndarray


@dataclass
class MouthFrame:
    texture: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        self.texture = np.asarray(self.texture, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.texture.reshape(-1), self.weights])


@dataclass
class LatentFrame:
    z: np.ndarray

    def __post_init__(self) -> None:
        self.z = np.asarray(self.z, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.z)):
            raise ValueError("Latent code must be finite")


@dataclass
class CodecConfig:
    latent_dim: int = 1024
    alpha: Optional[float] = None
    roi_x: int = 0
    roi_y: int = 0
    roi_width: int = 480
    roi_height: int = 370

    def __post_init__(self) -> None:
        if self.latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    @property
    def roi(self) -> RoiRect:
        return RoiRect(self.roi_x, self.roi_y, self.roi_width, self.roi_height)


@runtime_checkable
class MouthCodec(Protocol):
    @property
    def latent_dim(self) -> int: ...

    def encode(self, frame: MouthFrame) -> LatentFrame: ...

    def decode(self, latent: LatentFrame) -> MouthFrame: ...


@dataclass(frozen=True)
class StorageLayout:
    roi_width: int
    roi_height: int
    latent_dim: int
    geometry_dim: int = 15


@dataclass(frozen=True)
class CodecModel:
    """Standardize-and-project codec; satisfies :class:`MouthCodec`."""

    mean: np.ndarray
    scale: np.ndarray
    basis: np.ndarray
    alpha: float
    roi: MouthRoi
    geometry_dim: int
    explained_variance: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.basis.shape[0] != self.mean.size or self.scale.size != self.mean.size:
            raise ValueError("Codec mean, scale and basis disagree in input dimension")
        if self.texture_size + self.geometry_dim != self.input_dim:
            raise ValueError(
                f"Input dimension {self.input_dim} does not match ROI {self.roi.rect.width}x{self.roi.rect.height}"
                f" plus {self.geometry_dim} weights"
            )

    @property
    def input_dim(self) -> int:
        return self.mean.size

    @property
    def latent_dim(self) -> int:
        return self.basis.shape[1]

    @property
    def texture_shape(self) -> Tuple[int, int, int]:
        return self.roi.rect.height, self.roi.rect.width, 3

    @property
    def texture_size(self) -> int:
        return self.roi.rect.height * self.roi.rect.width * 3

    def layout(self) -> StorageLayout:
        return StorageLayout(self.roi.rect.width, self.roi.rect.height, self.latent_dim, self.geometry_dim)

    def encode(self, frame: MouthFrame) -> LatentFrame:
        vector = frame.as_vector()
        if vector.size != self.input_dim:
            raise ValueError(f"Frame has {vector.size} values, codec expects {self.input_dim}")
        return LatentFrame(self.basis.T @ ((vector - self.mean) / self.scale))

    def decode(self, latent: LatentFrame) -> MouthFrame:
        if latent.z.size != self.latent_dim:
            raise ValueError(f"Latent has {latent.z.size} values, codec expects {self.latent_dim}")
        vector = self.mean + self.scale * (self.basis @ latent.z)
        texture = np.clip(vector[: self.texture_size], 0.0, 1.0).reshape(self.texture_shape)
        return MouthFrame(texture=texture, weights=vector[self.texture_size:])


# ---------------------------------------------------------------------------
# Region of interest


def roi_vertices(model: ShapeModel, rect: RoiRect, atlas_size: int) -> np.ndarray:
    """Vertices whose texture coordinate falls inside ``rect`` (texel edges on integers)."""
    uv = np.asarray(model.uv, dtype=np.float64)
    valid = np.all(np.isfinite(uv), axis=1) & np.all((uv >= 0.0) & (uv <= 1.0), axis=1)
    position = uv * atlas_size
    inside = (
        (position[:, 0] >= rect.x)
        & (position[:, 0] <= rect.x + rect.width)
        & (position[:, 1] >= rect.y)
        & (position[:, 1] <= rect.y + rect.height)
    )
    return np.flatnonzero(valid & inside)


def extract_roi(atlas: np.ndarray, model: ShapeModel, rect: RoiRect) -> Tuple[np.ndarray, MouthRoi]:
    atlas = np.asarray(atlas, dtype=np.float64)
    if atlas.shape[0] != atlas.shape[1]:
        raise RoiError(f"Atlas must be square, got {atlas.shape[1]}x{atlas.shape[0]}")
    rect.check(atlas.shape[:2])
    crop = atlas[rect.y:rect.y + rect.height, rect.x:rect.x + rect.width].copy()
    return crop, MouthRoi(rect=rect, vertex_ids=roi_vertices(model, rect, atlas.shape[0]))


# ---------------------------------------------------------------------------
# Fitting


def _complete_basis(basis: np.ndarray, size: int) -> np.ndarray:
    """Extend orthonormal columns to ``size`` columns with unit vectors orthogonalized against them."""
    columns = [basis[:, k] for k in range(basis.shape[1])]
    dimension = basis.shape[0]
    for axis in range(dimension):
        if len(columns) >= size:
            break
        candidate = np.zeros(dimension)
        candidate[axis] = 1.0
        for column in columns:
            candidate -= (column @ candidate) * column
        norm = np.linalg.norm(candidate)
        if norm > 0.5:
            columns.append(candidate / norm)
    return np.column_stack(columns) if columns else np.zeros((dimension, 0))


def fit_codec(frames: Sequence[MouthFrame], roi: MouthRoi, latent_dim: int, alpha: Optional[float] = None) -> CodecModel:
    """Principal directions of the standardized training frames via the Gram matrix."""
    if len(frames) < 2:
        raise ValueError(f"Codec fitting needs >= 2 frames, got {len(frames)}")
    if latent_dim > len(frames):
        raise ValueError(f"latent_dim {latent_dim} exceeds the {len(frames)} training frames")
    data = np.stack([frame.as_vector() for frame in frames])
    geometry_dim = frames[0].weights.size
    texture_size = data.shape[1] - geometry_dim
    if texture_size != roi.rect.width * roi.rect.height * 3:
        raise RoiError(f"Frame textures hold {texture_size} values, ROI expects {roi.rect.width * roi.rect.height * 3}")
    if alpha is None:
        alpha = float(np.sqrt(texture_size / max(geometry_dim, 1)))

    mean = data.mean(axis=0)
    scale = data.std(axis=0)
    scale[scale < 1e-12] = 1.0
    scale[texture_size:] /= alpha
    standardized = (data - mean) / scale
    if not np.any(standardized):
        raise DegenerateCodecError(f"All {len(frames)} training frames are identical")

    gram = standardized @ standardized.T
    eigenvalues, eigenvectors = np.linalg.eigh(gram)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues, eigenvectors = eigenvalues[order], eigenvectors[:, order]
    usable = eigenvalues > 1e-10 * eigenvalues[0]
    kept = min(latent_dim, int(usable.sum()))
    components = standardized.T @ eigenvectors[:, :kept] / np.sqrt(eigenvalues[:kept])
    if kept < latent_dim:
        LOGGER.debug("Padding %d zero-variance latent dimension(s)", latent_dim - kept)
        components = _complete_basis(components, latent_dim)
    variance = np.zeros(latent_dim)
    variance[:kept] = eigenvalues[:kept] / len(frames)
    LOGGER.info(
        "Fitted codec: %d frame(s), input %d, latent %d, alpha %.3g", len(frames), data.shape[1], latent_dim, alpha
    )
    return CodecModel(mean=mean, scale=scale, basis=components, alpha=alpha, roi=roi,
                      geometry_dim=geometry_dim, explained_variance=variance)


def encode(model: MouthCodec, frame: MouthFrame) -> LatentFrame:
    return model.encode(frame)


def decode(model: MouthCodec, latent: LatentFrame) -> MouthFrame:
    return model.decode(latent)


def encode_many(model: MouthCodec, frames: Sequence[MouthFrame]) -> np.ndarray:
    if not frames:
        return np.zeros((0, model.latent_dim))
    return np.stack([model.encode(frame).z for frame in frames])


def decode_many(model: MouthCodec, latents: np.ndarray) -> List[MouthFrame]:
    return [model.decode(LatentFrame(z)) for z in np.atleast_2d(latents)]


# ---------------------------------------------------------------------------
# Storage


@dataclass(frozen=True)
class StorageReport:
    raw_bytes_per_frame: int
    latent_bytes_per_frame: int
    ratio: float
    raw_total: int
    latent_total: int
    raw_seconds_in_budget: float
    latent_seconds_in_budget: float

    def summary_lines(self) -> List[str]:
        return [
            f"Raw frame:        {self.raw_bytes_per_frame:,} bytes",
            f"Latent frame:     {self.latent_bytes_per_frame:,} bytes",
            f"Compression:      {self.ratio:.1f}x",
            f"Raw in budget:    {self.raw_seconds_in_budget / 60.0:,.1f} minutes",
            f"Latent in budget: {self.latent_seconds_in_budget / 3600.0:,.1f} hours",
        ]


def storage_report(
    model: Union[CodecModel, StorageLayout],
    frame_count: int,
    fps: float = 25.0,
    budget_bytes: int = DEFAULT_RAM_BUDGET,
) -> StorageReport:
    """Bytes per frame for raw ROI data against 32-bit latent codes."""
    layout = model.layout() if isinstance(model, CodecModel) else model
    raw = layout.roi_width * layout.roi_height * 3 + 4 * layout.geometry_dim
    latent = 4 * layout.latent_dim
    return StorageReport(
        raw_bytes_per_frame=raw,
        latent_bytes_per_frame=latent,
        ratio=raw / latent,
        raw_total=raw * frame_count,
        latent_total=latent * frame_count,
        raw_seconds_in_budget=budget_bytes / raw / fps,
        latent_seconds_in_budget=budget_bytes / latent / fps,
    )


# ---------------------------------------------------------------------------
# Files


def save_codec(path: Path, model: CodecModel) -> Path:
    writer = BinaryWriter(CODEC_MAGIC)
    writer.u32(CODEC_VERSION)
    writer.u32(model.input_dim)
    writer.u32(model.latent_dim)
    writer.f32(model.alpha)
    writer.f32_array(model.mean)
    writer.f32_array(model.scale)
    writer.f32_array(model.basis, order="F")
    rect = model.roi.rect
    for value in (rect.x, rect.y, rect.width, rect.height):
        writer.u32(value)
    writer.u32(model.roi.vertex_ids.size)
    writer.u32_array(model.roi.vertex_ids)
    return writer.write(path)


def load_codec(path: Path) -> CodecModel:
    reader = BinaryReader.open(path, CODEC_MAGIC)
    reader.expect_version(CODEC_VERSION)
    input_dim = reader.u32()
    latent_dim = reader.u32()
    alpha = reader.f32()
    mean = reader.f32_array(input_dim)
    scale = reader.f32_array(input_dim)
    basis = reader.f32_array(input_dim * latent_dim).reshape((input_dim, latent_dim), order="F")
    rect = RoiRect(reader.u32(), reader.u32(), reader.u32(), reader.u32())
    vertex_ids = reader.u32_array(reader.u32()).astype(np.int64)
    reader.expect_end()
    geometry_dim = input_dim - rect.width * rect.height * 3
    if geometry_dim < 0:
        raise reader.fail(f"ROI {rect.width}x{rect.height} is larger than the input dimension {input_dim}")
    return CodecModel(mean=mean, scale=scale, basis=basis, alpha=alpha,
                      roi=MouthRoi(rect, vertex_ids), geometry_dim=geometry_dim)


def save_latent_sequence(path: Path, latents: np.ndarray) -> Path:
    latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    writer = BinaryWriter(SEQUENCE_MAGIC)
    writer.u32(SEQUENCE_VERSION)
    writer.u32(latents.shape[0])
    writer.u32(latents.shape[1])
    writer.f32_array(latents)
    return writer.write(path)


def load_latent_sequence(path: Path) -> np.ndarray:
    reader = BinaryReader.open(path, SEQUENCE_MAGIC)
    reader.expect_version(SEQUENCE_VERSION)
    frames = reader.u32()
    dimension = reader.u32()
    latents = reader.f32_array(frames * dimension).reshape(frames, dimension)
    reader.expect_end()
    return latents
