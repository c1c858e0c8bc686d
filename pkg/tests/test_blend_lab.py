import numpy as np
import pytest
from scipy import sparse

from blend_lab import (
    SolverConvergenceError,
    SparseSystem,
    TriDiagSystem,
    UnderConstrainedError,
    ZeroPivotError,
    blend_sequence_1d,
    laplacian_mesh_integrate,
    poisson_blend_2d,
    raster_gradients,
    solve_cg,
    solve_tridiag,
)


def test_tridiag_identity_returns_rhs():
    rhs = np.arange(5.0)
    system = TriDiagSystem(np.zeros(4), np.ones(5), np.zeros(4), rhs)
    np.testing.assert_array_equal(solve_tridiag(system), rhs)


def test_tridiag_harmonic_profile():
    # -x[i-1] + 2x[i] - x[i+1] = 0 with x[-1] = 0, x[n] = 1 gives a straight line
    size = 9
    rhs = np.zeros(size)
    rhs[-1] = 1.0
    system = TriDiagSystem(-np.ones(size - 1), 2 * np.ones(size), -np.ones(size - 1), rhs)
    expected = np.arange(1, size + 1) / (size + 1)
    np.testing.assert_allclose(solve_tridiag(system), expected, atol=1e-12)


def test_tridiag_random_dominant_matches_dense():
    rng = np.random.default_rng(0)
    lower, upper = rng.uniform(-1, 1, 11), rng.uniform(-1, 1, 11)
    diag = 2.5 + rng.uniform(0, 1, 12)
    rhs = rng.normal(size=12)
    system = TriDiagSystem(lower, diag, upper, rhs)
    solution = solve_tridiag(system)
    np.testing.assert_allclose(solution, np.linalg.solve(system.dense(), rhs), atol=1e-9)
    assert np.abs(system.dense() @ solution - rhs).max() <= 1e-9 * np.abs(rhs).max()


def test_tridiag_zero_pivot():
    system = TriDiagSystem([1.0], [0.0, 1.0], [1.0], [1.0, 1.0])
    with pytest.raises(ZeroPivotError):
        solve_tridiag(system)


def test_cg_identity():
    rhs = np.array([1.0, -2.0, 3.0])
    np.testing.assert_allclose(solve_cg(SparseSystem(sparse.identity(3), rhs)), rhs)


def _grid_laplacian(size):
    one_d = sparse.diags([-np.ones(size - 1), 2 * np.ones(size), -np.ones(size - 1)], [-1, 0, 1])
    eye = sparse.identity(size)
    return (sparse.kron(eye, one_d) + sparse.kron(one_d, eye)).tocsr()


def test_cg_grid_laplacian_matches_dense():
    matrix = _grid_laplacian(8)
    rhs = np.random.default_rng(1).normal(size=64)
    solution = solve_cg(SparseSystem(matrix, rhs))
    np.testing.assert_allclose(solution, np.linalg.solve(matrix.toarray(), rhs), atol=1e-6)


def test_cg_inconsistent_singular_system():
    matrix = sparse.diags([1.0, 0.0])
    with pytest.raises(SolverConvergenceError) as error:
        solve_cg(SparseSystem(matrix, np.array([1.0, 1.0])), max_iterations=50)
    assert error.value.residual > 0 or np.isnan(error.value.residual)


def test_blend_identity_on_continuous_input():
    frames = np.linspace(0.0, 3.0, 30)[:, None]
    blended = blend_sequence_1d(frames, [10, 20], radius=5)
    np.testing.assert_allclose(blended, frames, atol=1e-9)


def test_blend_unit_step_shrinks_tenfold():
    frames = np.zeros((40, 1))
    frames[20:] = 1.0
    blended = blend_sequence_1d(frames, [20], radius=5)
    assert abs(blended[20, 0] - blended[19, 0]) <= 0.1 + 1e-12
    np.testing.assert_array_equal(blended[:15], frames[:15])
    np.testing.assert_array_equal(blended[26:], frames[26:])
    assert blended[15, 0] == 0.0 and blended[25, 0] == 1.0


def test_blend_channels_are_separable():
    rng = np.random.default_rng(5)
    frames = np.cumsum(rng.normal(size=(30, 2)), axis=0)
    frames[12:, 0] += 3.0
    frames[12:, 1] -= 1.0
    joint = blend_sequence_1d(frames, [12], radius=4)
    for channel in range(2):
        single = blend_sequence_1d(frames[:, channel], [12], radius=4)
        np.testing.assert_allclose(joint[:, channel], single, atol=1e-12)


def test_blend_keeps_endpoints_and_rejects_bad_junctions():
    frames = np.random.default_rng(2).normal(size=(12, 3))
    blended = blend_sequence_1d(frames, [2, 3, 9], radius=5)
    np.testing.assert_array_equal(blended[0], frames[0])
    np.testing.assert_array_equal(blended[-1], frames[-1])
    with pytest.raises(ValueError):
        blend_sequence_1d(frames, [0])
    with pytest.raises(ValueError):
        blend_sequence_1d(frames, [12])


def test_poisson_constant_boundary_zero_guidance():
    raster = np.full((10, 12, 3), 0.3)
    raster[3:7, 4:9] = np.random.default_rng(0).uniform(size=(4, 5, 3))
    mask = np.zeros((10, 12), dtype=bool)
    mask[3:7, 4:9] = True
    zeros = np.zeros_like(raster)
    blended = poisson_blend_2d(raster, mask, zeros, zeros)
    np.testing.assert_allclose(blended[mask], 0.3, atol=1e-6)
    np.testing.assert_array_equal(blended[~mask], raster[~mask])


def test_poisson_fixed_point_for_own_gradients():
    rng = np.random.default_rng(4)
    raster = rng.uniform(size=(12, 12, 2))
    mask = np.zeros((12, 12), dtype=bool)
    mask[2:10, 3:9] = True
    gx, gy = raster_gradients(raster)
    np.testing.assert_allclose(poisson_blend_2d(raster, mask, gx, gy), raster, atol=1e-6)


def test_poisson_maximum_principle():
    raster = np.random.default_rng(8).uniform(size=(9, 9))
    mask = np.zeros((9, 9), dtype=bool)
    mask[1:-1, 1:-1] = True
    blended = poisson_blend_2d(raster, mask, np.zeros((9, 9)), np.zeros((9, 9)))
    ring = raster[~mask]
    assert blended[mask].min() >= ring.min() - 1e-9
    assert blended[mask].max() <= ring.max() + 1e-9


def test_poisson_matches_dense_least_squares():
    rng = np.random.default_rng(12)
    size = 18
    raster = rng.uniform(size=(size, size))
    mask = np.zeros((size, size), dtype=bool)
    mask[1:17, 1:17] = True
    gx, gy = rng.normal(scale=0.1, size=(2, size, size))
    blended = poisson_blend_2d(raster, mask, gx, gy)

    ids = -np.ones((size, size), dtype=int)
    ids[mask] = np.arange(mask.sum())
    rows, rhs = [], []
    for y in range(size):
        for x in range(size):
            for dy, dx, target in ((0, 1, gx[y, x]), (1, 0, gy[y, x])):
                qy, qx = y + dy, x + dx
                if qy >= size or qx >= size or not (mask[y, x] or mask[qy, qx]):
                    continue
                row = np.zeros(mask.sum())
                value = target
                if mask[qy, qx]:
                    row[ids[qy, qx]] += 1.0
                else:
                    value -= raster[qy, qx]
                if mask[y, x]:
                    row[ids[y, x]] -= 1.0
                else:
                    value += raster[y, x]
                rows.append(row)
                rhs.append(value)
    dense, *_ = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)
    np.testing.assert_allclose(blended[mask], dense, atol=1e-6)


def _strip_mesh(width, height):
    vertices = np.array([[x, y, 0.0] for y in range(height) for x in range(width)], dtype=float)
    triangles = []
    for y in range(height - 1):
        for x in range(width - 1):
            v = y * width + x
            triangles.append([v, v + 1, v + width])
            triangles.append([v + 1, v + width + 1, v + width])
    return vertices, np.array(triangles)


def test_laplacian_fixed_point():
    vertices, triangles = _strip_mesh(6, 6)
    roi = [v for v in range(36) if 1 <= v % 6 <= 4 and 1 <= v // 6 <= 4]
    anchors = [v for v in roi if v % 6 in (1, 4) or v // 6 in (1, 4)]
    result = laplacian_mesh_integrate(vertices, vertices, roi, anchors, 1.0, triangles)
    np.testing.assert_allclose(result, vertices, atol=1e-9)


def test_laplacian_heavy_anchors_pin_ring():
    vertices, triangles = _strip_mesh(7, 7)
    roi = [v for v in range(49) if 1 <= v % 7 <= 5 and 1 <= v // 7 <= 5]
    anchors = [v for v in roi if v % 7 in (1, 5) or v // 7 in (1, 5)]
    lifted = vertices + np.array([0.0, 0.0, 1.0])
    result = laplacian_mesh_integrate(vertices, lifted, roi, anchors, 1e6, triangles)
    np.testing.assert_allclose(result[anchors], vertices[anchors], atol=1e-3)
    outside = np.setdiff1d(np.arange(49), roi)
    np.testing.assert_array_equal(result[outside], vertices[outside])


def test_laplacian_translated_patch_matches_dense_oracle():
    vertices, triangles = _strip_mesh(7, 7)
    count = len(vertices)
    roi = np.array([v for v in range(count) if 1 <= v % 7 <= 5 and 1 <= v // 7 <= 5])
    anchors = np.array([v for v in roi if v % 7 in (1, 5) or v // 7 in (1, 5)])
    lifted = vertices + np.array([0.0, 0.0, 1.0])
    weight = 2.0
    result = laplacian_mesh_integrate(vertices, lifted, roi, anchors, weight, triangles)

    neighbours = [set() for _ in range(count)]
    for a, b, c in triangles:
        for p, q in ((a, b), (b, c), (c, a)):
            neighbours[p].add(q)
            neighbours[q].add(p)
    dense = np.zeros((count, count))
    for v in range(count):
        dense[v, v] = 1.0
        for u in neighbours[v]:
            dense[v, u] -= 1.0 / len(neighbours[v])
    combined = vertices.copy()
    combined[roi] = lifted[roi]
    delta = dense @ combined
    outside = np.setdiff1d(np.arange(count), roi)
    design = np.vstack([dense[np.ix_(roi, roi)], weight * np.eye(count)[np.ix_(anchors, roi)]])
    target = np.vstack([delta[roi] - dense[np.ix_(roi, outside)] @ vertices[outside], weight * vertices[anchors]])
    expected, *_ = np.linalg.lstsq(design, target, rcond=None)
    np.testing.assert_allclose(result[roi], expected, atol=1e-6)


def test_laplacian_unanchored_component():
    vertices, triangles = _strip_mesh(5, 5)
    with pytest.raises(UnderConstrainedError):
        laplacian_mesh_integrate(vertices, vertices, [6, 7, 8], [], 1.0, triangles)
