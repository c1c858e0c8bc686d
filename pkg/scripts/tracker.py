"""Per-frame pose and shape estimation by Gauss-Newton.

The tracking energy of one multi-view frame is

    E = E_img + landmark_weight * E_lm + shape_weight * |b|^2

where ``E_lm`` sums squared pixel distances between projected model vertices
and detected landmarks and ``E_img`` sums squared RGB differences between the
current images and the neutral reference images, evaluated at a fixed set of
barycentric surface samples per visible triangle.

Jacobians come from central finite differences and every step is guarded by
a halving line search, so the energy log of a frame never increases.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from face_model import BehindCameraError, CameraView, PoseShapeParams, ShapeModel, deform, project, sample_image, visibility_all


LOGGER = logging.getLogger(__name__)

MIN_LANDMARKS = 6


class DegenerateConfigurationError(RuntimeError):
    """Signal that the normal equations of a fit are rank deficient."""


class UndefinedEnergyError(RuntimeError):
    """Signal that a frame offers neither landmarks nor visible samples."""


@dataclass
class TrackerConfig:
    landmark_weight: float = 1.0
    shape_weight: float = 0.1
    samples_per_triangle: int = 3
    max_iterations: int = 20
    convergence_threshold: float = 1e-8
    backtracking_steps: int = 10
    finite_difference_step: float = 1e-6

    def __post_init__(self) -> None:
        if self.landmark_weight < 0 or self.shape_weight < 0:
            raise ValueError("Tracker weights must be non-negative")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.samples_per_triangle < 0 or self.backtracking_steps < 0:
            raise ValueError("Sample and backtracking counts must be non-negative")
        if self.finite_difference_step <= 0:
            raise ValueError("finite_difference_step must be positive")


@dataclass(frozen=True)
class ReferenceFrame:
    """Registered neutral parameters and the neutral images of every camera."""

    params: PoseShapeParams
    textures: Tuple[np.ndarray, ...]


@dataclass(frozen=True)
class EnergyTerms:
    total: float
    landmark: float
    image: float
    regularizer: float


@dataclass
class PhotometricSamples:
    camera: np.ndarray
    triangle: np.ndarray
    weights: np.ndarray
    reference: np.ndarray

    def subset(self, keep: np.ndarray) -> "PhotometricSamples":
        return PhotometricSamples(self.camera[keep], self.triangle[keep], self.weights[keep], self.reference[keep])

    def __len__(self) -> int:
        return int(self.camera.size)


@dataclass
class FrameFit:
    params: PoseShapeParams
    energies: List[float] = field(default_factory=list)
    iterations: int = 0


def barycentric_pattern(count: int) -> np.ndarray:
    """``count`` interior barycentric points, centroid first, from a triangular lattice."""
    if count <= 0:
        return np.zeros((0, 3))
    points = [(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)]
    order = 2
    while len(points) < count:
        for i in range(order):
            for j in range(order - i):
                a = (i + 1.0 / 3.0) / order
                b = (j + 1.0 / 3.0) / order
                candidate = (a, b, 1.0 - a - b)
                if all(abs(candidate[0] - p[0]) + abs(candidate[1] - p[1]) > 1e-9 for p in points):
                    points.append(candidate)
        order += 1
    return np.asarray(points[:count])


def surface_points(vertices: np.ndarray, triangles: np.ndarray, triangle_ids: np.ndarray, weights: np.ndarray) -> np.ndarray:
    corners = vertices[triangles[triangle_ids]]
    return np.einsum("sk,skd->sd", weights, corners)


def reference_samples(
    model: ShapeModel,
    reference: ReferenceFrame,
    cameras: Sequence[CameraView],
    config: TrackerConfig,
) -> PhotometricSamples:
    """Surface samples visible in the neutral frame, with their reference colours."""
    pattern = barycentric_pattern(config.samples_per_triangle)
    vertices = deform(model, reference.params)
    cam_ids, tri_ids, weights, colours = [], [], [], []
    for camera_index, camera in enumerate(cameras):
        if pattern.size == 0:
            break
        visible = np.flatnonzero(visibility_all(model, reference.params, camera, vertices).visible)
        if visible.size == 0:
            continue
        triangles = np.repeat(visible, len(pattern))
        bary = np.tile(pattern, (visible.size, 1))
        pixels = project(camera, surface_points(vertices, model.triangles, triangles, bary))
        cam_ids.append(np.full(triangles.size, camera_index))
        tri_ids.append(triangles)
        weights.append(bary)
        colours.append(sample_image(reference.textures[camera_index], pixels))
    if not cam_ids:
        return PhotometricSamples(np.zeros(0, int), np.zeros(0, int), np.zeros((0, 3)), np.zeros((0, 3)))
    return PhotometricSamples(
        np.concatenate(cam_ids), np.concatenate(tri_ids), np.concatenate(weights), np.concatenate(colours)
    )


def _visible_subset(
    model: ShapeModel,
    params: PoseShapeParams,
    cameras: Sequence[CameraView],
    samples: PhotometricSamples,
) -> PhotometricSamples:
    if len(samples) == 0:
        return samples
    vertices = deform(model, params)
    keep = np.zeros(len(samples), dtype=bool)
    for camera_index, camera in enumerate(cameras):
        visible = visibility_all(model, params, camera, vertices).visible
        in_camera = samples.camera == camera_index
        keep |= in_camera & visible[samples.triangle]
    return samples.subset(keep)


class TrackingResiduals:
    """Stacked weighted residual vector over the 6 + k parameter vector."""

    def __init__(
        self,
        model: ShapeModel,
        cameras: Sequence[CameraView],
        samples: Optional[PhotometricSamples],
        landmark_weight: float,
        shape_weight: float,
    ) -> None:
        self.model = model
        self.cameras = list(cameras)
        self.samples = samples if samples is not None and len(samples) else None
        self.landmark_scale = np.sqrt(landmark_weight)
        self.shape_scale = np.sqrt(shape_weight)
        for camera in self.cameras:
            ids = camera.landmarks.vertex_ids
            if ids.size and (ids.min() < 0 or ids.max() >= model.vertex_count):
                raise ValueError("Landmark vertex id outside the model")
        self.landmark_count = sum(len(camera.landmarks) for camera in self.cameras)
        if self.samples is not None:
            for camera_index in np.unique(self.samples.camera):
                if self.cameras[camera_index].image is None:
                    raise ValueError(f"Camera {camera_index} has samples but no image")
        if self.landmark_count == 0 and self.samples is None:
            raise UndefinedEnergyError("No landmarks and no visible photometric samples")

    def parts(self, vector: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        params = PoseShapeParams.from_vector(vector)
        vertices = deform(self.model, params)
        landmark_parts = []
        for camera in self.cameras:
            if len(camera.landmarks):
                projected = project(camera, vertices[camera.landmarks.vertex_ids])
                landmark_parts.append((projected - camera.landmarks.positions).reshape(-1))
        landmark = np.concatenate(landmark_parts) if landmark_parts else np.zeros(0)

        image_parts = []
        if self.samples is not None:
            points = surface_points(vertices, self.model.triangles, self.samples.triangle, self.samples.weights)
            for camera_index in np.unique(self.samples.camera):
                chosen = self.samples.camera == camera_index
                camera = self.cameras[camera_index]
                colours = sample_image(camera.image, project(camera, points[chosen]))
                image_parts.append((colours - self.samples.reference[chosen]).reshape(-1))
        image = np.concatenate(image_parts) if image_parts else np.zeros(0)
        return landmark, image, params.b

    def __call__(self, vector: np.ndarray) -> np.ndarray:
        landmark, image, weights = self.parts(vector)
        return np.concatenate([image, self.landmark_scale * landmark, self.shape_scale * weights])

    def terms(self, vector: np.ndarray) -> EnergyTerms:
        landmark, image, weights = self.parts(vector)
        e_lm, e_img, e_reg = float(landmark @ landmark), float(image @ image), float(weights @ weights)
        total = e_img + self.landmark_scale ** 2 * e_lm + self.shape_scale ** 2 * e_reg
        return EnergyTerms(total=total, landmark=e_lm, image=e_img, regularizer=e_reg)


def energy(
    model: ShapeModel,
    params: PoseShapeParams,
    views: Sequence[CameraView],
    reference: Optional[ReferenceFrame],
    config: TrackerConfig,
) -> EnergyTerms:
    """Tracking energy and its terms; the image term is zero without a reference."""
    samples = None
    if reference is not None and config.samples_per_triangle > 0:
        samples = _visible_subset(model, params, views, reference_samples(model, reference, views, config))
    residuals = TrackingResiduals(model, views, samples, config.landmark_weight, config.shape_weight)
    return residuals.terms(params.as_vector())


def numeric_jacobian(function: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float) -> np.ndarray:
    columns = []
    for index in range(x.size):
        offset = np.zeros_like(x)
        offset[index] = step
        columns.append((function(x + offset) - function(x - offset)) / (2.0 * step))
    return np.column_stack(columns)


def gauss_newton(
    function: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    config: TrackerConfig,
) -> Tuple[np.ndarray, List[float], int]:
    """Minimize ``|function(x)|^2``; returns (x, accepted energies, iterations)."""
    x = np.asarray(x0, dtype=np.float64).copy()
    residual = function(x)
    current = float(residual @ residual)
    energies = [current]
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):
        jacobian = numeric_jacobian(function, x, config.finite_difference_step)
        if np.linalg.matrix_rank(jacobian) < x.size:
            raise DegenerateConfigurationError(
                f"Normal equations are rank deficient ({np.linalg.matrix_rank(jacobian)} < {x.size})"
            )
        step, *_ = np.linalg.lstsq(jacobian, -residual, rcond=None)
        scale = 1.0
        accepted = False
        for _ in range(config.backtracking_steps + 1):
            candidate = x + scale * step
            try:
                candidate_residual = function(candidate)
            except BehindCameraError:
                # a full step can carry vertices behind a camera; shorten it
                scale *= 0.5
                continue
            candidate_energy = float(candidate_residual @ candidate_residual)
            if candidate_energy < current:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            LOGGER.debug("gauss-newton: no decrease after %d halvings", config.backtracking_steps)
            break
        moved = float(np.linalg.norm(scale * step))
        x, residual, current = candidate, candidate_residual, candidate_energy
        energies.append(current)
        LOGGER.debug("gauss-newton iteration %d: energy %.6g step %.3g", iterations, current, moved)
        if moved < config.convergence_threshold:
            break
    return x, energies, iterations


def register_neutral(
    model: ShapeModel,
    views: Sequence[CameraView],
    config: TrackerConfig,
    initial: Optional[PoseShapeParams] = None,
) -> PoseShapeParams:
    """Fit pose and shape to the landmarks of the neutral frame (no image term)."""
    landmark_total = sum(len(view.landmarks) for view in views)
    if landmark_total < MIN_LANDMARKS:
        raise DegenerateConfigurationError(
            f"Neutral registration needs >= {MIN_LANDMARKS} landmarks, got {landmark_total}"
        )
    residuals = TrackingResiduals(model, views, None, 1.0, config.shape_weight)
    start = initial if initial is not None else PoseShapeParams.neutral(model.weight_count)
    solution, energies, iterations = gauss_newton(residuals, start.as_vector(), config)
    LOGGER.info("Neutral registration: energy %.6g -> %.6g in %d iteration(s)", energies[0], energies[-1], iterations)
    return PoseShapeParams.from_vector(solution)


def build_reference(params: PoseShapeParams, views: Sequence[CameraView]) -> ReferenceFrame:
    textures = []
    for index, view in enumerate(views):
        if view.image is None:
            raise ValueError(f"Neutral view {index} has no image")
        textures.append(view.image)
    return ReferenceFrame(params=params, textures=tuple(textures))


def track_frame(
    model: ShapeModel,
    views: Sequence[CameraView],
    reference: ReferenceFrame,
    initial: PoseShapeParams,
    config: TrackerConfig,
    samples: Optional[PhotometricSamples] = None,
) -> FrameFit:
    if samples is None and config.samples_per_triangle > 0:
        samples = reference_samples(model, reference, views, config)
    visible = _visible_subset(model, initial, views, samples) if samples is not None else None
    residuals = TrackingResiduals(model, views, visible, config.landmark_weight, config.shape_weight)
    solution, energies, iterations = gauss_newton(residuals, initial.as_vector(), config)
    return FrameFit(params=PoseShapeParams.from_vector(solution), energies=energies, iterations=iterations)


def track_sequence(
    model: ShapeModel,
    frames: Sequence[Sequence[CameraView]],
    reference: ReferenceFrame,
    config: TrackerConfig,
    on_frame: Optional[Callable[[int, FrameFit], None]] = None,
) -> List[PoseShapeParams]:
    """Track frames in order, warm-starting each from its predecessor."""
    results: List[PoseShapeParams] = []
    previous = reference.params
    samples = None
    for index, views in enumerate(frames):
        if samples is None and config.samples_per_triangle > 0:
            samples = reference_samples(model, reference, views, config)
        try:
            fit = track_frame(model, views, reference, previous, config, samples)
        except (DegenerateConfigurationError, UndefinedEnergyError) as error:
            raise type(error)(f"frame {index}: {error}") from error
        if on_frame is not None:
            on_frame(index, fit)
        results.append(fit.params)
        previous = fit.params
    return results
