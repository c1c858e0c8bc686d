"""Temporally consistent texture stitching from several cameras.

Every triangle of every frame picks one source camera. The choice minimizes

    sum_i D(i, c_i) + smoothness_weight * sum_{i~j} V(i, j)
                    + temporal_weight * sum_i [c_i^t != c_i^{t-1}]

where D prefers cameras that see the triangle large, V is the colour
mismatch of two cameras along a shared edge and the temporal term links a
triangle to itself in the previous frame. The whole sequence is one
alpha-expansion problem.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from numba import njit
from scipy import ndimage

from asset_io import load_json, save_json
from blend_lab import poisson_blend_2d, raster_gradients
from face_model import CameraView, PoseShapeParams, ShapeModel, deform, project_with_depth, sample_image, visibility_all
from mrf_core import INF, MultiLabelProblem, alpha_expand, potts_costs


LOGGER = logging.getLogger(__name__)


class EmptyStitchProblemError(RuntimeError):
    """Signal that a stitch problem has no frames, triangles or cameras."""


@dataclass
class StitchConfig:
    smoothness_weight: float = 1.0
    temporal_weight: float = 0.5
    edge_samples: int = 8
    band_radius: int = 4
    atlas_size: int = 256
    max_sweeps: int = 10

    def __post_init__(self) -> None:
        if self.smoothness_weight < 0 or self.temporal_weight < 0:
            raise ValueError("Stitch weights must be non-negative")
        if self.edge_samples < 2:
            raise ValueError(f"edge_samples must be >= 2, got {self.edge_samples}")
        if self.band_radius < 1:
            raise ValueError(f"band_radius must be >= 1, got {self.band_radius}")
        if self.atlas_size < 1:
            raise ValueError(f"atlas_size must be >= 1, got {self.atlas_size}")


@dataclass
class StitchProblem:
    """Per-frame visibility, areas and edge costs of one tracked sequence.

    ``visible`` and ``area`` have shape (frames, cameras, triangles);
    ``adjacency`` rows are (i, j, va, vb) with i < j sharing edge va-vb;
    ``edge_costs`` has shape (frames, edges, cameras, cameras).
    """

    model: ShapeModel
    vertices: np.ndarray
    visible: np.ndarray
    area: np.ndarray
    adjacency: np.ndarray
    edge_costs: np.ndarray
    edge_samples: int
    _edge_index: Dict[Tuple[int, int], int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if self.visible.shape != self.area.shape:
            raise ValueError("Visibility and area tables differ in shape")
        if np.any(self.area < 0):
            raise ValueError("Projected areas must be non-negative")
        self._edge_index = {(int(row[0]), int(row[1])): index for index, row in enumerate(self.adjacency)}

    @property
    def frame_count(self) -> int:
        return self.visible.shape[0]

    @property
    def camera_count(self) -> int:
        return self.visible.shape[1]

    @property
    def triangle_count(self) -> int:
        return self.visible.shape[2]

    def edge_index(self, i: int, j: int) -> int:
        key = (min(i, j), max(i, j))
        if key not in self._edge_index:
            raise ValueError(f"Triangles {i} and {j} are not adjacent")
        return self._edge_index[key]


@dataclass
class StitchLabeling:
    labels: np.ndarray
    energy: float
    fallbacks: List[Tuple[int, int]]
    sweep_energies: List[float] = field(default_factory=list)


@dataclass
class SeamEdge:
    triangle_i: int
    triangle_j: int
    start: np.ndarray
    end: np.ndarray


@dataclass
class TextureAtlas:
    """Atlas raster with, per texel, the owning triangle and source camera (-1 if empty)."""

    raster: np.ndarray
    triangle_ids: np.ndarray
    texel_labels: np.ndarray

    @property
    def covered(self) -> np.ndarray:
        return self.triangle_ids >= 0


# ---------------------------------------------------------------------------
# Costs


def data_cost_table(visible: np.ndarray, area: np.ndarray) -> np.ndarray:
    """(triangles, cameras) table of ``1 - W`` with W normalized over the seeing cameras."""
    seen_area = np.where(visible, area, 0.0)
    total = seen_area.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        weight = np.where(total > 0, seen_area / total, 0.0)
    return np.where(visible, 1.0 - weight, INF).T


def data_cost(problem: StitchProblem, frame: int, triangle: int, camera: int) -> float:
    table = data_cost_table(problem.visible[frame], problem.area[frame])
    return float(table[triangle, camera])


def edge_cost_table(
    vertices: np.ndarray,
    adjacency: np.ndarray,
    visible: np.ndarray,
    views: Sequence[CameraView],
    samples: int,
) -> np.ndarray:
    """(edges, cameras, cameras) colour mismatch along every shared edge."""
    camera_count = len(views)
    edge_count = len(adjacency)
    table = np.zeros((edge_count, camera_count, camera_count))
    if edge_count == 0:
        return table
    start = vertices[adjacency[:, 2]]
    end = vertices[adjacency[:, 3]]
    length = np.linalg.norm(end - start, axis=1)
    steps = (np.arange(samples) + 0.5) / samples
    points = start[:, None, :] + steps[None, :, None] * (end - start)[:, None, :]

    colours = []
    seen = np.zeros((camera_count, edge_count), dtype=bool)
    for camera_index, view in enumerate(views):
        if view.image is None:
            raise ValueError(f"Camera {camera_index} has no image")
        pixels, depth = project_with_depth(view, points)
        colours.append(sample_image(view.image, np.nan_to_num(pixels)))
        in_front = np.all(depth > 0, axis=1)
        seen[camera_index] = in_front & (visible[camera_index, adjacency[:, 0]] | visible[camera_index, adjacency[:, 1]])

    for a in range(camera_count):
        for b in range(a + 1, camera_count):
            difference = np.linalg.norm(colours[a] - colours[b], axis=-1)
            cost = difference.sum(axis=1) * length / samples
            cost = np.where(seen[a] & seen[b], cost, INF)
            table[:, a, b] = cost
            table[:, b, a] = cost
    return table


def edge_cost(problem: StitchProblem, frame: int, triangle_i: int, triangle_j: int, camera_a: int, camera_b: int) -> float:
    if camera_a == camera_b:
        return 0.0
    return float(problem.edge_costs[frame, problem.edge_index(triangle_i, triangle_j), camera_a, camera_b])


def build_stitch_problem(
    model: ShapeModel,
    params_sequence: Sequence[PoseShapeParams],
    frames: Sequence[Sequence[CameraView]],
    config: StitchConfig,
    threads: int = 1,
) -> StitchProblem:
    """Visibility, areas and edge costs for every frame; frames are built in parallel."""
    if len(params_sequence) != len(frames):
        raise ValueError(f"{len(params_sequence)} parameter sets for {len(frames)} frames")
    adjacency = np.asarray(model.adjacency(), dtype=np.int64).reshape(-1, 4)

    def build_frame(index: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        params, views = params_sequence[index], frames[index]
        vertices = deform(model, params)
        maps = [visibility_all(model, params, view, vertices) for view in views]
        visible = np.array([m.visible for m in maps]).reshape(len(views), model.triangle_count)
        area = np.array([m.area for m in maps]).reshape(len(views), model.triangle_count)
        costs = edge_cost_table(vertices, adjacency, visible, views, config.edge_samples)
        return vertices, visible, area, costs

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        built = list(pool.map(build_frame, range(len(frames))))
    LOGGER.info("Stitch problem: %d frame(s), %d triangle(s), %d edge(s)", len(built), model.triangle_count, len(adjacency))

    camera_count = len(frames[0]) if frames else 0
    if not built:
        empty = np.zeros((0, camera_count, model.triangle_count))
        return StitchProblem(model, np.zeros((0, model.vertex_count, 3)), empty.astype(bool), empty, adjacency,
                             np.zeros((0, len(adjacency), camera_count, camera_count)), config.edge_samples)
    return StitchProblem(
        model=model,
        vertices=np.stack([b[0] for b in built]),
        visible=np.stack([b[1] for b in built]),
        area=np.stack([b[2] for b in built]),
        adjacency=adjacency,
        edge_costs=np.stack([b[3] for b in built]),
        edge_samples=config.edge_samples,
    )


# ---------------------------------------------------------------------------
# Labeling


def labeling_problem(problem: StitchProblem, config: StitchConfig) -> MultiLabelProblem:
    """The spatio-temporal MRF; node ``f * T + i`` is triangle i of frame f.

    Triangles seen by no camera get a zero unary row so they never force an
    infinite energy.
    """
    frames, cameras, triangles = problem.frame_count, problem.camera_count, problem.triangle_count
    unary = np.concatenate([data_cost_table(problem.visible[f], problem.area[f]) for f in range(frames)])
    unary[~problem.visible.transpose(0, 2, 1).reshape(-1, cameras).any(axis=1)] = 0.0

    offsets = np.arange(frames)[:, None] * triangles
    spatial = (problem.adjacency[None, :, :2] + offsets[:, :, None]).reshape(-1, 2)
    spatial_costs = problem.edge_costs.reshape(-1, cameras, cameras)
    temporal = np.stack([np.arange(triangles, frames * triangles) - triangles, np.arange(triangles, frames * triangles)], axis=1)
    temporal_costs = np.broadcast_to(potts_costs(cameras), (len(temporal), cameras, cameras))

    return MultiLabelProblem(
        unary=unary,
        edges=np.concatenate([spatial, temporal]).reshape(-1, 2),
        costs=np.concatenate([spatial_costs, temporal_costs]).reshape(-1, cameras, cameras),
        weights=np.concatenate([np.full(len(spatial), config.smoothness_weight), np.full(len(temporal), config.temporal_weight)]),
    )


def labeling_energy(problem: StitchProblem, labels: np.ndarray, config: StitchConfig) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (problem.frame_count, problem.triangle_count):
        raise ValueError(f"Labeling has shape {labels.shape}, expected {(problem.frame_count, problem.triangle_count)}")
    return labeling_problem(problem, config).energy(labels.reshape(-1))


def solve_labeling(problem: StitchProblem, config: StitchConfig) -> StitchLabeling:
    """Source camera per frame and triangle.

    Triangles occluded in every camera take their previous-frame label, or
    the camera where they project largest on the first frame, and are listed
    in ``fallbacks``.
    """
    if problem.frame_count == 0 or problem.triangle_count == 0 or problem.camera_count == 0:
        raise EmptyStitchProblemError(
            f"Stitch problem is empty ({problem.frame_count} frames, {problem.triangle_count} triangles, "
            f"{problem.camera_count} cameras)"
        )
    mrf = labeling_problem(problem, config)
    result = alpha_expand(mrf, max_sweeps=config.max_sweeps)
    labels = result.labels.reshape(problem.frame_count, problem.triangle_count).copy()

    fallbacks: List[Tuple[int, int]] = []
    hidden = ~problem.visible.any(axis=1)
    for frame in range(problem.frame_count):
        for triangle in np.flatnonzero(hidden[frame]):
            if frame > 0:
                labels[frame, triangle] = labels[frame - 1, triangle]
            else:
                labels[frame, triangle] = int(np.argmax(problem.area[frame, :, triangle]))
            fallbacks.append((frame, int(triangle)))
    total = result.energy
    if fallbacks:
        LOGGER.warning("%d triangle-frame(s) are occluded in every camera and use a fallback source", len(fallbacks))
        total = mrf.energy(labels.reshape(-1))
    LOGGER.info("Stitch labeling energy %.6g after %d sweep(s)", total, len(result.sweep_energies) - 1)
    return StitchLabeling(labels=labels, energy=total, fallbacks=fallbacks, sweep_energies=result.sweep_energies)


# ---------------------------------------------------------------------------
# Atlas


@njit(cache=True)
def _rasterize_uv(corners, width, height, owner, weights):
    for tri in range(corners.shape[0]):
        x0, y0 = corners[tri, 0, 0], corners[tri, 0, 1]
        x1, y1 = corners[tri, 1, 0], corners[tri, 1, 1]
        x2, y2 = corners[tri, 2, 0], corners[tri, 2, 1]
        det = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
        if det == 0.0:
            continue
        lo_x = max(int(np.floor(min(x0, x1, x2))), 0)
        hi_x = min(int(np.ceil(max(x0, x1, x2))), width - 1)
        lo_y = max(int(np.floor(min(y0, y1, y2))), 0)
        hi_y = min(int(np.ceil(max(y0, y1, y2))), height - 1)
        for y in range(lo_y, hi_y + 1):
            for x in range(lo_x, hi_x + 1):
                if owner[y, x] >= 0:
                    continue
                w0 = ((y1 - y2) * (x - x2) + (x2 - x1) * (y - y2)) / det
                w1 = ((y2 - y0) * (x - x2) + (x0 - x2) * (y - y2)) / det
                w2 = 1.0 - w0 - w1
                if w0 < -1e-9 or w1 < -1e-9 or w2 < -1e-9:
                    continue
                owner[y, x] = tri
                weights[y, x, 0] = w0
                weights[y, x, 1] = w1
                weights[y, x, 2] = w2


def uv_to_texel(uv: np.ndarray, size: int) -> np.ndarray:
    """Texel coordinates with centres on integers; rows grow with v."""
    return np.asarray(uv, dtype=np.float64) * size - 0.5


def assemble_texture(
    model: ShapeModel,
    params: PoseShapeParams,
    labels: np.ndarray,
    views: Sequence[CameraView],
    config: StitchConfig,
) -> Tuple[TextureAtlas, List[SeamEdge]]:
    """Sample every covered texel from its triangle's source camera."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (model.triangle_count,):
        raise ValueError(f"Expected one label per triangle, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= len(views)):
        raise ValueError("Label refers to a camera that does not exist")
    size = config.atlas_size
    corners = uv_to_texel(model.uv[model.triangles], size)
    edge_a, edge_b = corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]
    uv_area = 0.5 * np.abs(edge_a[:, 0] * edge_b[:, 1] - edge_a[:, 1] * edge_b[:, 0])
    degenerate = uv_area < 1e-12
    if degenerate.any():
        LOGGER.warning("Skipping %d triangle(s) with degenerate uv footprint", int(degenerate.sum()))
        corners = corners.copy()
        corners[degenerate] = 0.0

    owner = np.full((size, size), -1, dtype=np.int64)
    weights = np.zeros((size, size, 3))
    _rasterize_uv(np.ascontiguousarray(corners), size, size, owner, weights)

    vertices = deform(model, params)
    channels = 3
    for view in views:
        if view.image is not None:
            channels = 1 if view.image.ndim == 2 else view.image.shape[2]
            break
    raster = np.zeros((size, size, channels))
    texel_labels = np.full((size, size), -1, dtype=np.int64)
    ys, xs = np.nonzero(owner >= 0)
    triangle_ids = owner[ys, xs]
    points = np.einsum("sk,skd->sd", weights[ys, xs], vertices[model.triangles[triangle_ids]])
    sources = labels[triangle_ids]
    texel_labels[ys, xs] = sources
    for camera_index in np.unique(sources):
        view = views[camera_index]
        if view.image is None:
            raise ValueError(f"Camera {camera_index} has no image")
        chosen = sources == camera_index
        pixels, _ = project_with_depth(view, points[chosen])
        colours = sample_image(view.image, np.nan_to_num(pixels))
        raster[ys[chosen], xs[chosen]] = colours.reshape(-1, channels)

    seams = []
    for i, j, va, vb in model.adjacency():
        if labels[i] != labels[j]:
            seams.append(SeamEdge(i, j, model.uv[va].copy(), model.uv[vb].copy()))
    return TextureAtlas(raster=raster, triangle_ids=owner, texel_labels=texel_labels), seams


def _seam_band(seams: Sequence[SeamEdge], shape: Tuple[int, int], radius: int, size: int) -> np.ndarray:
    height, width = shape
    band = np.zeros(shape, dtype=bool)
    for seam in seams:
        start, end = uv_to_texel(seam.start, size), uv_to_texel(seam.end, size)
        lo = np.maximum(np.floor(np.minimum(start, end)) - radius, 0).astype(int)
        hi = np.minimum(np.ceil(np.maximum(start, end)) + radius, [width - 1, height - 1]).astype(int)
        if np.any(hi < lo):
            continue
        yy, xx = np.mgrid[lo[1]:hi[1] + 1, lo[0]:hi[0] + 1]
        points = np.stack([xx, yy], axis=-1).astype(np.float64)
        direction = end - start
        span = float(direction @ direction)
        along = np.zeros(yy.shape) if span == 0 else np.clip(((points - start) @ direction) / span, 0.0, 1.0)
        nearest = start + along[..., None] * direction
        distance = np.linalg.norm(points - nearest, axis=-1)
        band[lo[1]:hi[1] + 1, lo[0]:hi[0] + 1] |= distance <= radius
    return band


def _seam_guidance(gradient: np.ndarray, labels: np.ndarray, axis: int) -> np.ndarray:
    """Replace gradients that cross a source change by the mean of the one-sided neighbours."""
    if axis == 0:
        return _seam_guidance(gradient.swapaxes(0, 1), labels.T, 1).swapaxes(0, 1)
    guidance = gradient.copy()
    left, right = labels[:, :-1], labels[:, 1:]
    crossing = (left != right) & (left >= 0) & (right >= 0)
    before = np.zeros(crossing.shape, dtype=bool)
    after = np.zeros(crossing.shape, dtype=bool)
    before[:, 1:] = labels[:, :-2] == labels[:, 1:-1]
    after[:, :-1] = labels[:, 1:-1] == labels[:, 2:]
    total = np.zeros(gradient[:, :-1].shape)
    total[:, 1:] += np.where(before[:, 1:, None], gradient[:, :-2], 0.0)
    total[:, :-1] += np.where(after[:, :-1, None], gradient[:, 1:-1], 0.0)
    count = (before.astype(np.float64) + after)[..., None]
    mean = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    guidance[:, :-1][crossing] = mean[crossing]
    return guidance


def conceal_seams(atlas: TextureAtlas, seams: Sequence[SeamEdge], config: StitchConfig) -> np.ndarray:
    """Gradient-domain blend inside a band around every seam.

    Band texels are re-solved with Dirichlet values from the surrounding
    atlas; texels outside the bands are returned unchanged.
    """
    raster = np.asarray(atlas.raster, dtype=np.float64)
    if not seams:
        return raster.copy()
    image = raster[..., None] if raster.ndim == 2 else raster
    covered = atlas.covered
    band = _seam_band(seams, covered.shape, config.band_radius, config.atlas_size) & covered

    # components without a fixed neighbour would leave the solve undetermined
    components, count = ndimage.label(band)
    ring = ndimage.binary_dilation(band) & covered & ~band
    anchored = np.unique(components[ndimage.binary_dilation(ring) & band])
    isolated = np.setdiff1d(np.arange(1, count + 1), anchored)
    if isolated.size:
        LOGGER.warning("%d seam band region(s) cover whole charts and are left unblended", isolated.size)
        band &= ~np.isin(components, isolated)
    if not band.any():
        return raster.copy()

    gx, gy = raster_gradients(image)
    gx = _seam_guidance(gx, atlas.texel_labels, axis=1)
    gy = _seam_guidance(gy, atlas.texel_labels, axis=0)
    blended = poisson_blend_2d(image, band, gx, gy, boundary=image, domain=covered)
    LOGGER.debug("Concealed %d seam(s) over %d texel(s)", len(seams), int(band.sum()))
    return blended[..., 0] if raster.ndim == 2 else blended


def save_labeling(path: Path, labels: np.ndarray) -> Path:
    return save_json(path, np.asarray(labels, dtype=np.int64).tolist())


def load_labeling(path: Path) -> np.ndarray:
    labels = np.asarray(load_json(path), dtype=np.int64)
    if labels.ndim != 2:
        raise ValueError(f"{path}: labeling must be a [frame][triangle] array")
    return labels
