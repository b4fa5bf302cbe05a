import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atrc.label_space import (
    DegenerateInputError,
    LabelRegionSpec,
    angular_error_deg,
    build_depth_bins,
    convex_hull_sphere,
    decode_facet,
    decode_normal,
    depth_soft_weighted_sum,
    depth_to_region,
    encode_normal_triangular,
    fit_normal_codebook,
    hull_edges,
    regions_from_gt,
)


def unit_rows(rng, n):
    x = rng.normal(size=(n, 3))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture(scope="module")
def codebook():
    return fit_normal_codebook(unit_rows(np.random.default_rng(0), 4000), k=40, seed=0)


# --- depth ----------------------------------------------------------------------

def test_depth_edges_powers_of_two():
    b = build_depth_bins(0.5, 8.0, 4)
    assert b.edges.tolist() == [0.5, 1.0, 2.0, 4.0, 8.0]
    assert b.edges[0] == 0.5 and b.edges[-1] == 8.0


def test_depth_edges_geometric():
    b = build_depth_bins(0.7, 9.3, 40)
    ratios = b.edges[1:] / b.edges[:-1]
    assert np.max(np.abs(ratios - ratios[0])) < 1e-9
    assert np.all(np.diff(b.edges) > 0)
    assert np.allclose(b.centers, np.exp(0.5 * (np.log(b.edges[:-1]) + np.log(b.edges[1:]))))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 10), st.floats(1.01, 100), st.integers(2, 64))
def test_depth_edges_boundaries(lo, ratio, n):
    b = build_depth_bins(lo, lo * ratio, n)
    assert b.edges[0] == lo and b.edges[-1] == lo * ratio
    assert np.all(np.diff(b.edges) > 0)


def test_depth_bins_errors():
    for args in ((0.0, 1.0, 4), (-1.0, 1.0, 4), (2.0, 1.0, 4), (1.0, 2.0, 1)):
        with pytest.raises(ValueError):
            build_depth_bins(*args)


def test_depth_to_region_cases():
    b = build_depth_bins(0.7, 9.3, 40)
    assert depth_to_region(0.7, b) == 0
    assert depth_to_region(b.centers[7], b) == 7
    assert depth_to_region(0.01, b) == 0
    assert depth_to_region(1e6, b) == 39
    with pytest.raises(ValueError):
        depth_to_region(np.array([1.0, np.nan]), b)


def test_depth_to_region_linear_scan_oracle():
    b = build_depth_bins(0.7, 9.3, 40)
    rng = np.random.default_rng(1)
    d = rng.uniform(0.3, 12.0, 1000)

    def scan(x):
        idx = 0
        for r in range(b.n_bins):
            if x >= b.edges[r]:
                idx = r
        return idx

    assert np.array_equal(depth_to_region(d, b), [scan(x) for x in d])


def test_soft_weighted_sum():
    b = build_depth_bins(0.5, 8.0, 4)
    for r in range(4):
        assert depth_soft_weighted_sum(np.eye(4)[r], b) == pytest.approx(b.centers[r], abs=1e-15)
    assert depth_soft_weighted_sum(np.full(4, 0.25), b) == pytest.approx(b.centers.mean())
    rng = np.random.default_rng(2)
    big = build_depth_bins(0.7, 9.3, 40)
    p = rng.dirichlet(np.ones(40))
    assert abs(depth_soft_weighted_sum(p, big) - sum(p[r] * big.centers[r] for r in range(40))) < 1e-9
    out = depth_soft_weighted_sum(rng.dirichlet(np.ones(40), size=50), big)
    assert np.all(out >= big.centers.min()) and np.all(out <= big.centers.max())
    with pytest.raises(ValueError):
        depth_soft_weighted_sum(np.full(4, 0.3), b)
    with pytest.raises(ValueError):
        depth_soft_weighted_sum(np.array([1.2, -0.2, 0.0, 0.0]), b)


# --- hull -------------------------------------------------------------------------

def _check_hull(points, tris):
    edges = hull_edges(tris)
    assert set(edges.values()) == {2}
    v = len(np.unique(tris))
    assert v - len(edges) + len(tris) == 2
    centroid = points.mean(axis=0)
    for a, b, c in tris:
        n = np.cross(points[b] - points[a], points[c] - points[a])
        assert n @ (points[a] - centroid) > 0  # outward
        # no point lies strictly outside the facet plane
        assert np.all((points - points[a]) @ n <= 1e-9 * np.linalg.norm(n))


def test_hull_tetrahedron_and_octahedron():
    tet = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], float) / np.sqrt(3)
    tris = convex_hull_sphere(tet)
    assert len(tris) == 4
    _check_hull(tet, tris)
    octa = np.vstack([np.eye(3), -np.eye(3)])
    tris = convex_hull_sphere(octa)
    assert len(tris) == 8
    _check_hull(octa, tris)


@pytest.mark.parametrize("seed", range(5))
def test_hull_random_sphere_euler(seed):
    pts = unit_rows(np.random.default_rng(seed), 40)
    tris = convex_hull_sphere(pts)
    assert len(tris) == 2 * 40 - 4
    _check_hull(pts, tris)


def test_hull_interior_points_ignored():
    pts = np.vstack([np.vstack([np.eye(3), -np.eye(3)]), [[0.1, 0.1, 0.1], [0, 0, 0]]])
    tris = convex_hull_sphere(pts)
    assert len(tris) == 8 and tris.max() < 6


def test_hull_degenerate():
    with pytest.raises(DegenerateInputError):
        convex_hull_sphere(np.array([[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]], float))
    with pytest.raises(DegenerateInputError):
        convex_hull_sphere(np.ones((5, 3)))


# --- codebook ------------------------------------------------------------------------

def test_codebook_recovers_sites():
    sites = unit_rows(np.random.default_rng(3), 40)
    data = np.repeat(sites, 5, axis=0)
    book = fit_normal_codebook(data, 40, seed=1)
    cos = book.codewords @ sites.T
    # every site is matched by some codeword within 1e-6 rad
    assert np.arccos(np.clip(cos.max(axis=0), -1, 1)).max() < 1e-6


def test_codebook_k1_is_renormalised_mean():
    x = unit_rows(np.random.default_rng(4), 30)
    book = fit_normal_codebook(x, 1)
    m = x.sum(0)
    assert np.allclose(book.codewords[0], m / np.linalg.norm(m), atol=1e-12)


def test_codebook_objective_monotone_and_unit(codebook):
    assert np.all(np.diff(codebook.history) >= -1e-12)
    assert np.abs(np.linalg.norm(codebook.codewords, axis=1) - 1).max() < 1e-6
    assert len(codebook.triangles) == 76
    assert set(hull_edges(codebook.triangles).values()) == {2}


def test_codebook_degenerate():
    with pytest.raises(DegenerateInputError):
        fit_normal_codebook(np.tile([[0.0, 0.0, 1.0]], (50, 1)), 4)
    with pytest.raises(DegenerateInputError):
        fit_normal_codebook(unit_rows(np.random.default_rng(0), 10), 40)


# --- triangular coding ------------------------------------------------------------------

def test_encode_vertex_and_edge(codebook):
    for i in (0, 7, 39):
        w = encode_normal_triangular(codebook.codewords[i], codebook)
        assert w[i] == pytest.approx(1.0, abs=1e-9)
        assert w.sum() == pytest.approx(1.0, abs=1e-9)
    a, b, _ = codebook.triangles[0]
    mid = codebook.codewords[a] + codebook.codewords[b]
    w = encode_normal_triangular(mid / np.linalg.norm(mid), codebook)
    assert w[a] == pytest.approx(0.5, abs=1e-9) and w[b] == pytest.approx(0.5, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_encode_weight_invariants(seed):
    book = _BOOK
    n = unit_rows(np.random.default_rng(seed), 1)[0]
    w = encode_normal_triangular(n, book)
    assert w.min() >= 0 and abs(w.sum() - 1) < 1e-6 and np.count_nonzero(w) <= 3


_BOOK = fit_normal_codebook(unit_rows(np.random.default_rng(0), 4000), k=40, seed=0)


def test_round_trip_uniform_normals(codebook):
    rng = np.random.default_rng(5)
    normals = unit_rows(rng, 500)
    errs = np.array([angular_error_deg(decode_normal(encode_normal_triangular(n, codebook), codebook), n)
                     for n in normals])
    assert errs.mean() < 10.0 and errs.max() < 10.0
    for i in range(40):
        w = encode_normal_triangular(codebook.codewords[i], codebook)
        assert angular_error_deg(decode_normal(w, codebook), codebook.codewords[i]) < 1e-6


def test_round_trip_continuity(codebook):
    rng = np.random.default_rng(6)
    count = 0
    while count < 30:
        n = unit_rows(rng, 1)[0]
        w = encode_normal_triangular(n, codebook)
        if np.count_nonzero(w) < 3 or w[w > 0].min() < 0.05:
            continue  # stay clear of facet boundaries
        axis = np.cross(n, rng.normal(size=3))
        axis /= np.linalg.norm(axis)
        theta = np.radians(1.0)
        m = n * np.cos(theta) + np.cross(axis, n) * np.sin(theta)
        w2 = encode_normal_triangular(m, codebook)
        if set(np.flatnonzero(w2)) != set(np.flatnonzero(w)):
            continue
        d = angular_error_deg(decode_normal(w, codebook), decode_normal(w2, codebook))
        assert d < 5.0
        count += 1


def test_one_hot_decode_exact(codebook):
    for i in range(40):
        p = np.zeros(40)
        p[i] = 1.0
        assert np.array_equal(decode_normal(p, codebook), codebook.codewords[i])


def test_decode_recovers_encoded_triangle(codebook):
    rng = np.random.default_rng(7)
    for n in unit_rows(rng, 100):
        w = encode_normal_triangular(n, codebook)
        f = decode_facet(w, codebook)
        assert set(np.flatnonzero(w)) <= set(codebook.triangles[f])


def test_decode_exhaustive_oracle(codebook):
    rng = np.random.default_rng(8)
    for _ in range(50):
        p = rng.dirichlet(np.ones(40))
        best, best_f = -1.0, -1
        for f, tri in enumerate(codebook.triangles):
            s = p[tri[0]] + p[tri[1]] + p[tri[2]]
            if s > best:
                best, best_f = s, f
        tri = codebook.triangles[best_f]
        w = p[tri] / p[tri].sum()
        vec = w @ codebook.codewords[tri]
        vec /= np.linalg.norm(vec)
        assert decode_facet(p, codebook) == best_f
        assert np.allclose(decode_normal(p, codebook), vec, atol=1e-9)


def test_decode_errors(codebook):
    with pytest.raises(ValueError):
        decode_normal(np.zeros(40), codebook)
    with pytest.raises(ValueError):
        decode_normal(-np.ones(40) / 40, codebook)


# --- ground-truth regions ---------------------------------------------------------------

def test_regions_from_gt_classes_partition():
    spec = LabelRegionSpec("seg", 2, "class")
    labels = np.random.default_rng(9).integers(0, 2, size=(3, 4, 5))
    onehot = regions_from_gt(labels, spec)
    assert onehot.shape == (3, 20, 2)
    assert np.all(onehot.sum(-1) == 1)
    assert np.array_equal(onehot[..., 1].reshape(3, 4, 5), labels)
    with pytest.raises(ValueError):
        regions_from_gt(labels + 5, spec)


def test_regions_from_gt_depth():
    b = build_depth_bins(1.0, 8.0, 10)
    spec = LabelRegionSpec("depth", 10, "depth_bin", binning=b)
    const = regions_from_gt(np.full((1, 4, 4), 3.3), spec)
    assert np.count_nonzero(const.sum(axis=1)) == 1
    d = np.random.default_rng(10).uniform(0.5, 9.0, size=(2, 6, 6))
    onehot = regions_from_gt(d, spec)
    for n in range(2):
        for i in range(6):
            for j in range(6):
                assert np.argmax(onehot[n, i * 6 + j]) == depth_to_region(d[n, i, j], b)


def test_regions_from_gt_normals(codebook):
    spec = LabelRegionSpec("normals", 40, "normal_codeword", codebook=codebook)
    normals = unit_rows(np.random.default_rng(11), 2 * 9).reshape(2, 3, 3, 3)
    field = np.moveaxis(normals, -1, 1)
    onehot = regions_from_gt(field, spec)
    for n in range(2):
        for i in range(3):
            for j in range(3):
                expected = np.argmax(codebook.codewords @ normals[n, i, j])
                assert np.argmax(onehot[n, i * 3 + j]) == expected


def test_region_spec_validation():
    with pytest.raises(ValueError):
        LabelRegionSpec("x", 0, "class")
    with pytest.raises(ValueError):
        LabelRegionSpec("x", 3, "depth_bin")
    with pytest.raises(ValueError):
        LabelRegionSpec("x", 3, "bogus")
