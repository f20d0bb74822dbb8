import numpy as np
import pytest

from tfempc.simplexsets import (
    EmptySimplexError,
    Simplex,
    dump_vertices_csv,
    flatten_matrix,
    singleton_for,
    unflatten_matrix,
)


def test_standard_simplex_vertices():
    s = Simplex(np.zeros(2), 1.0)
    v = s.vertices()
    expect = {(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)}
    assert {tuple(row) for row in v} == expect
    assert v.shape == (3, 2)


def test_degenerate_scale_collapses_to_point():
    s = Simplex(np.array([1.0, -2.0]), 1.0)  # beta + 1^T alpha = 0
    v = s.vertices()
    assert np.allclose(v, -s.alpha)
    assert s.diameter() == 0.0


def test_translated_scaled_vertices():
    # hand application of the scaling/translation formula
    s = Simplex(np.array([1.0, 1.0]), 4.0)
    v = {tuple(row) for row in s.vertices()}
    assert v == {(-1.0, -1.0), (5.0, -1.0), (-1.0, 5.0)}


def test_empty_simplex_rejected():
    s = Simplex(np.array([-1.0, -1.0]), 1.0)
    assert s.is_empty
    with pytest.raises(EmptySimplexError):
        s.vertices()


def test_vertices_and_centroid_contained():
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = Simplex(rng.normal(size=3), float(rng.uniform(3.5, 6)))
        if s.is_empty:
            continue
        verts = s.vertices()
        for v in verts:
            assert s.contains(v)
        assert s.contains(verts.mean(axis=0))


def test_boundary_violation_excluded():
    s = Simplex(np.array([1.0, 2.0]), 4.0)
    for eps in (1e-6, 1e-3, 1.0):
        x = -s.alpha.copy()
        x[0] -= eps
        assert not s.contains(x, tol=1e-9)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        Simplex(np.zeros(3), 1.0).contains(np.zeros(2))


def test_singleton_for_point():
    pt = np.array([0.3, -1.2, 2.0])
    s = singleton_for(pt)
    assert np.allclose(s.alpha, -pt)
    assert s.beta == pytest.approx(pt.sum())
    assert s.contains(pt)
    for i in range(3):
        bumped = pt.copy()
        bumped[i] += 1e-6
        assert not s.contains(bumped, tol=1e-9)
    assert s.diameter() == 0.0


def test_singleton_for_origin():
    s = singleton_for(np.zeros(2))
    assert np.all(s.alpha == 0.0) and s.beta == 0.0


def test_vertex_affinity_superposition():
    # each vertex coordinate is affine in (alpha, beta)
    rng = np.random.default_rng(1)
    a0, a1 = rng.normal(size=(2, 3))
    b0, b1 = 5.0, 7.0
    v = lambda a, b: Simplex(a, b).vertices()
    mid = v(0.5 * (a0 + a1), 0.5 * (b0 + b1))
    assert np.allclose(mid, 0.5 * (v(a0, b0) + v(a1, b1)), atol=1e-12)


def _barycentric_membership(s, x, tol=1e-9):
    """Exact hull-membership oracle: solve for barycentric coordinates."""
    verts = s.vertices()
    n = s.n
    A = np.vstack([verts.T, np.ones(n + 1)])
    b = np.concatenate([np.asarray(x, dtype=float), [1.0]])
    coeff, *_ = np.linalg.lstsq(A, b, rcond=None)
    if np.linalg.norm(A @ coeff - b) > 1e-8:
        return False
    return bool(np.all(coeff >= -tol))


def test_membership_matches_hull_oracle():
    rng = np.random.default_rng(2)
    for trial in range(30):
        n = int(rng.integers(2, 4))
        s = Simplex(rng.normal(size=n), float(rng.uniform(n, n + 3)))
        if s.scale <= 1e-6:
            continue
        x = rng.normal(scale=2.0, size=n)
        assert s.contains(x, tol=1e-9) == _barycentric_membership(s, x)


def test_convex_quadratic_maximized_at_vertex():
    # grid-search max over the simplex equals the best vertex value
    rng = np.random.default_rng(3)
    for trial in range(10):
        n = int(rng.integers(2, 5))
        s = Simplex(rng.normal(size=n), float(rng.uniform(n, n + 2)))
        if s.scale <= 1e-6:
            continue
        A = rng.normal(size=(n, n))
        b = rng.normal(size=n)
        f = lambda x: float(np.sum((A @ x + b) ** 2))
        verts = s.vertices()
        best_vertex = max(f(v) for v in verts)
        # barycentric grid over the simplex
        from itertools import product

        k = 12
        grid_best = -np.inf
        for weights in product(range(k + 1), repeat=n):
            if sum(weights) > k:
                continue
            lam = np.array(list(weights) + [k - sum(weights)]) / k
            grid_best = max(grid_best, f(lam @ verts))
        assert grid_best <= best_vertex + 1e-6


def test_flatten_convention_row_major():
    m = np.arange(6).reshape(2, 3)
    flat = flatten_matrix(m)
    assert np.array_equal(flat, np.array([0, 1, 2, 3, 4, 5], dtype=float))
    assert np.array_equal(unflatten_matrix(flat, (2, 3)), m)


def test_vertex_csv_dump(tmp_path):
    s = Simplex(np.array([1.0, 1.0]), 4.0)
    path = tmp_path / "verts.csv"
    dump_vertices_csv(path, s)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "x0,x1"
    assert len(lines) == 4
