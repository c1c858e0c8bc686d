"""Linear face model, rigid pose and pinhole cameras.

A deformed face is ``R(rx, ry, rz) (x0 + B b) + (tx, ty, tz)`` with the
rotation composed as Rz·Ry·Rx. Cameras are 3×4 projection matrices whose
third homogeneous coordinate is the depth used for occlusion tests; pixel
centres sit on integer coordinates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from numba import njit
from scipy.ndimage import map_coordinates

from asset_io import BinaryReader, BinaryWriter, FormatError, load_json, load_obj, save_json, save_obj


LOGGER = logging.getLogger(__name__)

SHAPE_WEIGHT_COUNT = 15
BASIS_MAGIC = b"VSBM"
BASIS_VERSION = 1


class BehindCameraError(RuntimeError):
    """Signal that a point has non-positive depth for the camera."""


@dataclass(frozen=True)
class ShapeModel:
    mean: np.ndarray
    basis: np.ndarray
    triangles: np.ndarray
    uv: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        basis = np.asarray(self.basis, dtype=np.float64)
        triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 2)
        if mean.size % 3:
            raise ValueError(f"Mean shape length {mean.size} is not a multiple of 3")
        vertex_count = mean.size // 3
        if basis.ndim != 2 or basis.shape[0] != mean.size:
            raise ValueError(f"Basis shape {basis.shape} does not match {mean.size} coordinates")
        if triangles.size and (triangles.min() < 0 or triangles.max() >= vertex_count):
            raise ValueError("Triangle references a vertex outside the model")
        if uv.shape[0] != vertex_count:
            raise ValueError(f"Expected {vertex_count} uv pairs, got {uv.shape[0]}")
        if np.any(uv < 0) or np.any(uv > 1):
            raise ValueError("uv coordinates must lie in [0, 1]")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "triangles", triangles)
        object.__setattr__(self, "uv", uv)

    @property
    def vertex_count(self) -> int:
        return self.mean.size // 3

    @property
    def weight_count(self) -> int:
        return self.basis.shape[1]

    @property
    def triangle_count(self) -> int:
        return self.triangles.shape[0]

    def adjacency(self) -> List[Tuple[int, int, int, int]]:
        """Triangle pairs sharing an edge as (i, j, vertex_a, vertex_b) with i < j."""
        owners: Dict[Tuple[int, int], List[int]] = {}
        for index, (a, b, c) in enumerate(self.triangles):
            for p, q in ((a, b), (b, c), (c, a)):
                owners.setdefault((min(p, q), max(p, q)), []).append(index)
        pairs = []
        for (p, q), faces in sorted(owners.items()):
            if len(faces) == 2:
                i, j = sorted(faces)
                pairs.append((i, j, int(p), int(q)))
        pairs.sort()
        return pairs


@dataclass(frozen=True)
class PoseShapeParams:
    """Rigid pose ``t = [tx, ty, tz, rx, ry, rz]`` plus shape weights ``b``."""

    t: np.ndarray = field(default_factory=lambda: np.zeros(6))
    b: np.ndarray = field(default_factory=lambda: np.zeros(SHAPE_WEIGHT_COUNT))

    def __post_init__(self) -> None:
        t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if t.size != 6:
            raise ValueError(f"Pose vector must have 6 entries, got {t.size}")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(b))):
            raise ValueError("Pose and shape parameters must be finite")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "b", b)

    @classmethod
    def neutral(cls, weight_count: int = SHAPE_WEIGHT_COUNT) -> "PoseShapeParams":
        return cls(np.zeros(6), np.zeros(weight_count))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.t, self.b])

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> "PoseShapeParams":
        vector = np.asarray(vector, dtype=np.float64)
        return cls(vector[:6], vector[6:])

    def to_json(self) -> Dict[str, List[float]]:
        return {"t": [float(v) for v in self.t], "b": [float(v) for v in self.b]}

    @classmethod
    def from_json(cls, payload: Dict) -> "PoseShapeParams":
        try:
            return cls(payload["t"], payload["b"])
        except KeyError as error:
            raise ValueError(f"Parameter record lacks {error}") from error


@dataclass(frozen=True)
class Landmarks:
    vertex_ids: np.ndarray
    positions: np.ndarray

    def __post_init__(self) -> None:
        ids = np.asarray(self.vertex_ids, dtype=np.int64).reshape(-1)
        positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        if ids.size != positions.shape[0]:
            raise ValueError("Landmark ids and positions differ in length")
        object.__setattr__(self, "vertex_ids", ids)
        object.__setattr__(self, "positions", positions)

    @classmethod
    def empty(cls) -> "Landmarks":
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 2)))

    def __len__(self) -> int:
        return int(self.vertex_ids.size)


@dataclass(frozen=True)
class CameraView:
    projection: np.ndarray
    width: int
    height: int
    image: Optional[np.ndarray] = None
    landmarks: Landmarks = field(default_factory=Landmarks.empty)

    def __post_init__(self) -> None:
        projection = np.asarray(self.projection, dtype=np.float64).reshape(3, 4)
        if np.linalg.matrix_rank(projection) < 3:
            raise ValueError("Projection matrix must have full row rank")
        object.__setattr__(self, "projection", projection)
        if self.image is not None:
            image = np.asarray(self.image, dtype=np.float64)
            if image.shape[:2] != (self.height, self.width):
                raise ValueError(f"Image shape {image.shape[:2]} does not match camera {self.height}x{self.width}")
            object.__setattr__(self, "image", image)

    def with_frame(self, image: Optional[np.ndarray], landmarks: Optional[Landmarks] = None) -> "CameraView":
        return replace(self, image=image, landmarks=landmarks if landmarks is not None else Landmarks.empty())


# ---------------------------------------------------------------------------
# Geometry


def rotation_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    rot_x = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    rot_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rot_z = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rot_z @ rot_y @ rot_x


def deform(model: ShapeModel, params: PoseShapeParams) -> np.ndarray:
    """Vertex positions (n×3) of the model under ``params``."""
    if params.b.size != model.weight_count:
        raise ValueError(f"Expected {model.weight_count} shape weights, got {params.b.size}")
    shape = (model.mean + model.basis @ params.b).reshape(-1, 3)
    rotation = rotation_matrix(*params.t[3:])
    return shape @ rotation.T + params.t[:3]


def project_with_depth(camera: CameraView, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel positions and depths; no check on the sign of the depth."""
    points = np.asarray(points, dtype=np.float64)
    flat = points.reshape(-1, 3)
    homogeneous = flat @ camera.projection[:, :3].T + camera.projection[:, 3]
    depth = homogeneous[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pixels = homogeneous[:, :2] / depth[:, None]
    return pixels.reshape(points.shape[:-1] + (2,)), depth.reshape(points.shape[:-1])


def project(camera: CameraView, points: np.ndarray) -> np.ndarray:
    pixels, depth = project_with_depth(camera, points)
    if np.any(depth <= 0):
        raise BehindCameraError(f"{int(np.sum(depth <= 0))} point(s) at non-positive depth")
    return pixels


def sample_image(image: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Bilinear lookup at (x, y) pixel positions, clamped at the border."""
    image = np.asarray(image, dtype=np.float64)
    pixels = np.asarray(pixels, dtype=np.float64)
    flat = pixels.reshape(-1, 2)
    coordinates = np.vstack([flat[:, 1], flat[:, 0]])
    if image.ndim == 2:
        values = map_coordinates(image, coordinates, order=1, mode="nearest")
        return values.reshape(pixels.shape[:-1])
    channels = [map_coordinates(image[..., c], coordinates, order=1, mode="nearest") for c in range(image.shape[2])]
    return np.stack(channels, axis=-1).reshape(pixels.shape[:-1] + (image.shape[2],))


def camera_center(camera: CameraView) -> np.ndarray:
    rotation_part = camera.projection[:, :3]
    return -np.linalg.solve(rotation_part, camera.projection[:, 3])


@dataclass(frozen=True)
class VisibilityMap:
    visible: np.ndarray
    area: np.ndarray


def visibility_all(
    model: ShapeModel,
    params: PoseShapeParams,
    camera: CameraView,
    vertices: Optional[np.ndarray] = None,
) -> VisibilityMap:
    """Front-facing and centroid depth tests for every triangle at once."""
    if vertices is None:
        vertices = deform(model, params)
    corners = vertices[model.triangles]
    screen, depth = project_with_depth(camera, corners)
    in_front = np.all(depth > 0, axis=1)

    edge_a = screen[:, 1] - screen[:, 0]
    edge_b = screen[:, 2] - screen[:, 0]
    area = 0.5 * np.abs(edge_a[:, 0] * edge_b[:, 1] - edge_a[:, 1] * edge_b[:, 0])
    area = np.where(in_front & np.isfinite(area), area, 0.0)

    normals = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    centroids = corners.mean(axis=1)
    facing = np.einsum("ij,ij->i", normals, camera_center(camera) - centroids) > 0
    candidates = in_front & facing & (area > 0)

    visible = np.zeros(model.triangle_count, dtype=bool)
    if candidates.any():
        centroid_pixels, centroid_depth = project_with_depth(camera, centroids[candidates])
        usable = in_front & (area > 0)
        nearest = _nearest_depths(
            np.ascontiguousarray(screen[usable]),
            np.ascontiguousarray(1.0 / depth[usable]),
            np.ascontiguousarray(centroid_pixels),
        )
        tolerance = 1e-6 * centroid_depth + 1e-9
        visible[np.flatnonzero(candidates)] = centroid_depth <= nearest + tolerance
    return VisibilityMap(visible=visible, area=area)


def visibility(model: ShapeModel, params: PoseShapeParams, camera: CameraView, triangle: int) -> Tuple[bool, float]:
    if not 0 <= triangle < model.triangle_count:
        raise ValueError(f"Triangle {triangle} outside 0..{model.triangle_count - 1}")
    result = visibility_all(model, params, camera)
    return bool(result.visible[triangle]), float(result.area[triangle])


@njit(cache=True)
def _nearest_depths(screen, inverse_depth, points):
    count = points.shape[0]
    nearest = np.full(count, np.inf)
    for tri in range(screen.shape[0]):
        x0, y0 = screen[tri, 0, 0], screen[tri, 0, 1]
        x1, y1 = screen[tri, 1, 0], screen[tri, 1, 1]
        x2, y2 = screen[tri, 2, 0], screen[tri, 2, 1]
        det = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
        if det == 0.0:
            continue
        lo_x, hi_x = min(x0, x1, x2), max(x0, x1, x2)
        lo_y, hi_y = min(y0, y1, y2), max(y0, y1, y2)
        for k in range(count):
            px, py = points[k, 0], points[k, 1]
            if px < lo_x - 1e-9 or px > hi_x + 1e-9 or py < lo_y - 1e-9 or py > hi_y + 1e-9:
                continue
            w0 = ((y1 - y2) * (px - x2) + (x2 - x1) * (py - y2)) / det
            w1 = ((y2 - y0) * (px - x2) + (x0 - x2) * (py - y2)) / det
            w2 = 1.0 - w0 - w1
            if w0 < -1e-9 or w1 < -1e-9 or w2 < -1e-9:
                continue
            inv = w0 * inverse_depth[tri, 0] + w1 * inverse_depth[tri, 1] + w2 * inverse_depth[tri, 2]
            if inv > 0.0:
                depth = 1.0 / inv
                if depth < nearest[k]:
                    nearest[k] = depth
    return nearest


# ---------------------------------------------------------------------------
# Files


def load_shape_model(mesh_path: Path, basis_path: Path) -> ShapeModel:
    vertices, uv, triangles = load_obj(mesh_path)
    reader = BinaryReader.open(basis_path, BASIS_MAGIC)
    reader.expect_version(BASIS_VERSION)
    vertex_count = reader.u32()
    weight_count = reader.u32()
    if vertex_count != len(vertices):
        raise reader.fail(f"basis covers {vertex_count} vertices, mesh has {len(vertices)}")
    mean = reader.f32_array(3 * vertex_count)
    basis = reader.f32_array(3 * vertex_count * weight_count).reshape(3 * vertex_count, weight_count, order="F")
    reader.expect_end()
    if weight_count != SHAPE_WEIGHT_COUNT:
        LOGGER.warning("Shape basis %s has %d columns (expected %d)", basis_path, weight_count, SHAPE_WEIGHT_COUNT)
    return ShapeModel(mean=mean, basis=basis, triangles=triangles, uv=uv)


def save_shape_model(model: ShapeModel, mesh_path: Path, basis_path: Path) -> None:
    save_obj(mesh_path, model.mean.reshape(-1, 3), model.uv, model.triangles)
    writer = BinaryWriter(BASIS_MAGIC)
    writer.u32(BASIS_VERSION)
    writer.u32(model.vertex_count)
    writer.u32(model.weight_count)
    writer.f32_array(model.mean)
    writer.f32_array(model.basis, order="F")
    writer.write(basis_path)


def load_camera(path: Path) -> CameraView:
    payload = load_json(path)
    try:
        projection = np.asarray(payload["P"], dtype=np.float64)
        width, height = int(payload["width"]), int(payload["height"])
    except (KeyError, TypeError, ValueError) as error:
        raise FormatError(f"camera record is malformed ({error})", path) from error
    if projection.size != 12:
        raise FormatError(f"camera 'P' has {projection.size} numbers, expected 12", path)
    return CameraView(projection=projection.reshape(3, 4), width=width, height=height)


def save_camera(path: Path, camera: CameraView) -> Path:
    return save_json(
        path,
        {"P": [float(v) for v in camera.projection.reshape(-1)], "width": camera.width, "height": camera.height},
    )


def load_landmarks(path: Path, camera_count: int) -> List[Landmarks]:
    """Per-camera landmark sets from a JSON list of {camera, vertex, x, y}."""
    records = load_json(path)
    grouped: List[List[Tuple[int, float, float]]] = [[] for _ in range(camera_count)]
    for position, record in enumerate(records):
        try:
            camera = int(record["camera"])
            if not 0 <= camera < camera_count:
                raise IndexError(f"camera {camera} outside 0..{camera_count - 1}")
            grouped[camera].append((int(record["vertex"]), float(record["x"]), float(record["y"])))
        except (KeyError, TypeError, ValueError, IndexError) as error:
            raise FormatError(f"landmark record {position} is malformed ({error})", path) from error
    result = []
    for entries in grouped:
        if entries:
            ids = [entry[0] for entry in entries]
            positions = [(entry[1], entry[2]) for entry in entries]
            result.append(Landmarks(ids, positions))
        else:
            result.append(Landmarks.empty())
    return result


def save_landmarks(path: Path, landmarks: List[Landmarks]) -> Path:
    records = []
    for camera, marks in enumerate(landmarks):
        for vertex, (x, y) in zip(marks.vertex_ids, marks.positions):
            records.append({"camera": camera, "vertex": int(vertex), "x": float(x), "y": float(y)})
    return save_json(path, records)


def load_params(path: Path) -> PoseShapeParams:
    try:
        return PoseShapeParams.from_json(load_json(path))
    except ValueError as error:
        raise FormatError(str(error), path) from error


def save_params(path: Path, params: PoseShapeParams) -> Path:
    return save_json(path, params.to_json())
