"""Gradient-domain machinery shared by seam concealment, synthesis and compositing.

Linear solvers (Thomas elimination, conjugate gradients) sit underneath three
blending operations: windowed 1D blending of latent sequences at junctions,
2D Poisson solves over masked raster regions, and uniform-Laplacian mesh
integration of a replacement vertex region.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numba import njit
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import cg, spsolve


LOGGER = logging.getLogger(__name__)


class ZeroPivotError(RuntimeError):
    """Signal that Thomas elimination met a zero pivot."""


class SolverConvergenceError(RuntimeError):
    """Signal that an iterative solve stopped above its residual tolerance."""

    def __init__(self, message: str, residual: float) -> None:
        super().__init__(message)
        self.residual = residual


class UnderConstrainedError(RuntimeError):
    """Signal that part of a least-squares system has no anchoring constraint."""


# ---------------------------------------------------------------------------
# Linear solvers


@dataclass
class TriDiagSystem:
    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray
    rhs: np.ndarray

    def __post_init__(self) -> None:
        self.lower = np.asarray(self.lower, dtype=np.float64).reshape(-1)
        self.diag = np.asarray(self.diag, dtype=np.float64).reshape(-1)
        self.upper = np.asarray(self.upper, dtype=np.float64).reshape(-1)
        self.rhs = np.asarray(self.rhs, dtype=np.float64)
        size = self.diag.size
        if size == 0:
            raise ValueError("Tridiagonal system is empty")
        if self.lower.size != size - 1 or self.upper.size != size - 1:
            raise ValueError("Off-diagonals must have one entry fewer than the diagonal")
        if self.rhs.shape[0] != size:
            raise ValueError(f"Right-hand side has {self.rhs.shape[0]} rows, expected {size}")

    def dense(self) -> np.ndarray:
        return np.diag(self.diag) + np.diag(self.lower, -1) + np.diag(self.upper, 1)


def solve_tridiag(system: TriDiagSystem) -> np.ndarray:
    """Solve a diagonally dominant tridiagonal system without pivoting.

    ``rhs`` may hold several right-hand sides as columns.
    """
    rhs = system.rhs
    columns = rhs.reshape(rhs.shape[0], -1).copy()
    solution = np.empty_like(columns)
    failed = _thomas(system.lower, system.diag, system.upper, columns, solution)
    if failed >= 0:
        raise ZeroPivotError(f"Zero pivot at row {failed}")
    return solution.reshape(rhs.shape)


@njit(cache=True)
def _thomas(lower, diag, upper, rhs, solution):
    size = diag.shape[0]
    scaled_upper = np.empty(size)
    pivot = diag[0]
    if pivot == 0.0:
        return 0
    if size > 1:
        scaled_upper[0] = upper[0] / pivot
    for column in range(rhs.shape[1]):
        solution[0, column] = rhs[0, column] / pivot
    for row in range(1, size):
        pivot = diag[row] - lower[row - 1] * scaled_upper[row - 1]
        if pivot == 0.0 or not np.isfinite(pivot):
            return row
        if row < size - 1:
            scaled_upper[row] = upper[row] / pivot
        for column in range(rhs.shape[1]):
            solution[row, column] = (rhs[row, column] - lower[row - 1] * solution[row - 1, column]) / pivot
    for row in range(size - 2, -1, -1):
        for column in range(rhs.shape[1]):
            solution[row, column] -= scaled_upper[row] * solution[row + 1, column]
    return -1


@dataclass
class SparseSystem:
    matrix: sparse.spmatrix
    rhs: np.ndarray

    def __post_init__(self) -> None:
        self.matrix = sparse.csr_matrix(self.matrix, dtype=np.float64)
        self.rhs = np.asarray(self.rhs, dtype=np.float64).reshape(-1)
        rows, cols = self.matrix.shape
        if rows != cols or rows != self.rhs.size:
            raise ValueError(f"System of shape {self.matrix.shape} does not match rhs of size {self.rhs.size}")

    @classmethod
    def from_coordinates(cls, rows, cols, values, size: int, rhs) -> "SparseSystem":
        return cls(sparse.coo_matrix((values, (rows, cols)), shape=(size, size)), rhs)


def solve_cg(system: SparseSystem, tolerance: float = 1e-10, max_iterations: Optional[int] = None) -> np.ndarray:
    """Conjugate gradients on a symmetric positive semi-definite system.

    The residual is recomputed after the solve; anything above
    ``tolerance * |rhs|`` (or non-finite) raises ``SolverConvergenceError``.
    """
    rhs_norm = float(np.linalg.norm(system.rhs))
    if rhs_norm == 0.0:
        return np.zeros_like(system.rhs)
    limit = max_iterations if max_iterations is not None else max(10 * system.rhs.size, 100)
    with np.errstate(all="ignore"):
        solution, info = cg(system.matrix, system.rhs, rtol=0.5 * tolerance, atol=0.0, maxiter=limit)
        residual = float(np.linalg.norm(system.rhs - system.matrix @ solution))
    LOGGER.debug("cg: n=%d info=%d residual=%.3e", system.rhs.size, info, residual)
    if not np.isfinite(residual) or residual > tolerance * rhs_norm:
        raise SolverConvergenceError(
            f"Conjugate gradients did not converge: residual {residual:.3e} > {tolerance:.1e} x {rhs_norm:.3e}",
            residual,
        )
    return solution


# ---------------------------------------------------------------------------
# 1D sequence blending


def blend_sequence_1d(frames: np.ndarray, junctions: Sequence[int], radius: int = 5) -> np.ndarray:
    """Smooth concatenation junctions of a frame sequence in the gradient domain.

    ``junctions`` hold the index of the first frame after each splice. Inside
    each window the sequence is re-integrated from its within-sample
    differences; the splice step itself targets the mean of its two flanking
    differences. Frames outside windows are returned untouched.
    """
    frames = np.asarray(frames, dtype=np.float64)
    squeeze = frames.ndim == 1
    data = frames.reshape(frames.shape[0], -1)
    frame_count = data.shape[0]
    junction_list = sorted(set(int(j) for j in junctions))
    for junction in junction_list:
        if not 0 < junction < frame_count:
            raise ValueError(f"Junction {junction} outside 1..{frame_count - 1}")
    if radius < 1:
        raise ValueError(f"Blend radius must be >= 1, got {radius}")

    output = data.copy()
    if not junction_list:
        return output.reshape(frames.shape)

    steps = np.diff(data, axis=0)
    junction_set = set(junction_list)
    for lo, hi, members in _junction_windows(junction_list, frame_count, radius):
        if hi - lo < 2:
            continue
        target = steps[lo:hi].copy()
        for junction in members:
            target[junction - 1 - lo] = _junction_gradient(steps, junction, junction_set)
        unknowns = hi - lo - 1
        rhs = target[:-1] - target[1:]
        rhs[0] += data[lo]
        rhs[-1] += data[hi]
        system = TriDiagSystem(-np.ones(unknowns - 1), 2.0 * np.ones(unknowns), -np.ones(unknowns - 1), rhs)
        output[lo + 1:hi] = solve_tridiag(system)

    return output[:, 0] if squeeze else output.reshape(frames.shape)


def _junction_windows(junctions: List[int], frame_count: int, radius: int) -> List[Tuple[int, int, List[int]]]:
    windows: List[Tuple[int, int, List[int]]] = []
    for index, junction in enumerate(junctions):
        lo = max(0, junction - radius)
        hi = min(frame_count - 1, junction + radius)
        if index > 0:
            lo = max(lo, (junctions[index - 1] + junction) // 2)
        if index + 1 < len(junctions):
            hi = min(hi, (junction + junctions[index + 1]) // 2)
        if windows and lo < windows[-1][1]:
            prev_lo, _, members = windows.pop()
            windows.append((prev_lo, hi, members + [junction]))
        else:
            windows.append((lo, hi, [junction]))
    return windows


def _junction_gradient(steps: np.ndarray, junction: int, junctions: set) -> np.ndarray:
    flanking = []
    if junction - 2 >= 0 and (junction - 1) not in junctions:
        flanking.append(steps[junction - 2])
    if junction < steps.shape[0] and (junction + 1) not in junctions:
        flanking.append(steps[junction])
    if not flanking:
        return np.zeros(steps.shape[1])
    return np.mean(flanking, axis=0)


# ---------------------------------------------------------------------------
# 2D Poisson


_NEIGHBOURS = ((0, 1), (0, -1), (1, 0), (-1, 0))


def poisson_blend_2d(
    raster: np.ndarray,
    mask: np.ndarray,
    guidance_x: np.ndarray,
    guidance_y: np.ndarray,
    boundary: Optional[np.ndarray] = None,
    domain: Optional[np.ndarray] = None,
    tolerance: float = 1e-10,
) -> np.ndarray:
    """Solve the masked 5-point Poisson equation per channel.

    ``guidance_x[y, x]`` is the target for ``u[y, x+1] - u[y, x]`` and
    ``guidance_y[y, x]`` the target for ``u[y+1, x] - u[y, x]``. Neighbours
    outside ``mask`` supply Dirichlet values from ``boundary``; pixels outside
    ``domain`` are ignored (natural boundary).
    """
    raster = np.asarray(raster, dtype=np.float64)
    squeeze = raster.ndim == 2
    image = raster[..., None] if squeeze else raster
    height, width, channels = image.shape
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (height, width):
        raise ValueError(f"Mask shape {mask.shape} does not match raster {(height, width)}")
    domain = np.ones((height, width), dtype=bool) if domain is None else np.asarray(domain, dtype=bool)
    mask = mask & domain
    if not mask.any():
        raise ValueError("Poisson mask is empty")
    gx = np.asarray(guidance_x, dtype=np.float64).reshape(height, width, channels)
    gy = np.asarray(guidance_y, dtype=np.float64).reshape(height, width, channels)
    known = image if boundary is None else np.asarray(boundary, dtype=np.float64).reshape(height, width, channels)

    index = np.full((height, width), -1, dtype=np.int64)
    ys, xs = np.nonzero(mask)
    unknowns = ys.size
    index[ys, xs] = np.arange(unknowns)

    diagonal = np.zeros(unknowns)
    rhs = np.zeros((unknowns, channels))
    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    for dy, dx in _NEIGHBOURS:
        qy, qx = ys + dy, xs + dx
        inside = (qy >= 0) & (qy < height) & (qx >= 0) & (qx < width)
        p = np.flatnonzero(inside)
        qy, qx = qy[inside], qx[inside]
        participating = domain[qy, qx]
        p, qy, qx = p[participating], qy[participating], qx[participating]
        py, px = ys[p], xs[p]
        # target for u_p - u_q
        if dx == 1:
            target = -gx[py, px]
        elif dx == -1:
            target = gx[qy, qx]
        elif dy == 1:
            target = -gy[py, px]
        else:
            target = gy[qy, qx]
        diagonal += np.bincount(p, minlength=unknowns)
        np.add.at(rhs, p, target)
        neighbour = index[qy, qx]
        interior = neighbour >= 0
        rows.append(p[interior])
        cols.append(neighbour[interior])
        np.add.at(rhs, p[~interior], known[qy[~interior], qx[~interior]])

    all_rows = np.concatenate(rows + [np.arange(unknowns)])
    all_cols = np.concatenate(cols + [np.arange(unknowns)])
    values = np.concatenate([-np.ones(sum(r.size for r in rows)), diagonal])
    output = image.copy()
    for channel in range(channels):
        system = SparseSystem.from_coordinates(all_rows, all_cols, values, unknowns, rhs[:, channel])
        output[ys, xs, channel] = solve_cg(system, tolerance=tolerance)
    return output[..., 0] if squeeze else output


def raster_gradients(raster: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Forward differences (zero at the last column/row) matching poisson_blend_2d."""
    raster = np.asarray(raster, dtype=np.float64)
    gx = np.zeros_like(raster)
    gy = np.zeros_like(raster)
    gx[:, :-1] = raster[:, 1:] - raster[:, :-1]
    gy[:-1] = raster[1:] - raster[:-1]
    return gx, gy


# ---------------------------------------------------------------------------
# Laplacian mesh integration


def vertex_adjacency(triangles: np.ndarray, vertex_count: int) -> sparse.csr_matrix:
    triangles = np.asarray(triangles, dtype=np.int64)
    a = triangles[:, [0, 1, 2, 1, 2, 0]].reshape(-1)
    b = triangles[:, [1, 2, 0, 0, 1, 2]].reshape(-1)
    adjacency = sparse.coo_matrix((np.ones(a.size), (a, b)), shape=(vertex_count, vertex_count)).tocsr()
    adjacency.data[:] = 1.0
    return adjacency


def uniform_laplacian(triangles: np.ndarray, vertex_count: int) -> sparse.csr_matrix:
    """L = I - D^-1 A with the combinatorial one-ring adjacency."""
    adjacency = vertex_adjacency(triangles, vertex_count)
    degree = np.asarray(adjacency.sum(axis=1)).reshape(-1)
    inverse = np.divide(1.0, degree, out=np.zeros_like(degree), where=degree > 0)
    return (sparse.identity(vertex_count, format="csr") - sparse.diags(inverse) @ adjacency).tocsr()


def laplacian_mesh_integrate(
    base: np.ndarray,
    replacement: np.ndarray,
    roi: Sequence[int],
    anchors: Sequence[int],
    anchor_weight: float,
    triangles: np.ndarray,
) -> np.ndarray:
    """Merge replacement ROI geometry into a base mesh by Laplacian editing.

    Minimizes ``|L x - L x_rep|^2`` over ROI vertices plus
    ``w^2 |x_a - base_a|^2`` over anchors, where ``x_rep`` is the base mesh
    with its ROI rows taken from ``replacement``. Vertices outside the ROI
    are copied from ``base``.
    """
    base = np.asarray(base, dtype=np.float64)
    replacement = np.asarray(replacement, dtype=np.float64)
    vertex_count = base.shape[0]
    if replacement.shape != base.shape:
        raise ValueError(f"Replacement shape {replacement.shape} does not match base {base.shape}")
    roi = np.unique(np.asarray(roi, dtype=np.int64))
    anchors = np.unique(np.asarray(anchors, dtype=np.int64))
    if roi.size == 0:
        return base.copy()
    if not np.isin(anchors, roi).all():
        raise ValueError("Anchor vertices must belong to the ROI")
    if anchor_weight < 0:
        raise ValueError(f"Anchor weight must be >= 0, got {anchor_weight}")

    adjacency = vertex_adjacency(triangles, vertex_count)
    inside = adjacency[roi][:, roi]
    component_count, component = connected_components(inside, directed=False)
    anchored = np.zeros(component_count, dtype=bool)
    anchored[component[np.searchsorted(roi, anchors)]] = True
    if anchor_weight == 0 or not anchored.all():
        loose = int(np.sum(~anchored)) if anchor_weight > 0 else component_count
        raise UnderConstrainedError(f"{loose} ROI component(s) carry no anchor")

    laplacian = uniform_laplacian(triangles, vertex_count)
    combined = base.copy()
    combined[roi] = replacement[roi]
    delta = (laplacian @ combined)[roi]

    outside = np.setdiff1d(np.arange(vertex_count), roi)
    lap_roi = laplacian[roi][:, roi]
    lap_out = laplacian[roi][:, outside]
    target = delta - lap_out @ base[outside]

    selector = sparse.coo_matrix(
        (np.full(anchors.size, anchor_weight), (np.arange(anchors.size), np.searchsorted(roi, anchors))),
        shape=(anchors.size, roi.size),
    )
    design = sparse.vstack([lap_roi, selector]).tocsr()
    observations = np.vstack([target, anchor_weight * base[anchors]])
    normal = (design.T @ design).tocsc()
    solution = spsolve(normal, design.T @ observations)

    result = base.copy()
    result[roi] = np.asarray(solution).reshape(roi.size, -1)
    return result
