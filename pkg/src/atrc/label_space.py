"""Discretising task label spaces into disjoint regions.

Classification tasks use their classes. Depth uses log-spaced bins; surface
normals use a spherical k-means codebook whose convex hull supplies the
triangles for triangular coding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


# --- depth ----------------------------------------------------------------------

@dataclass(frozen=True)
class DepthBinning:
    d_min: float
    d_max: float
    n_bins: int
    edges: np.ndarray = field(repr=False)
    centers: np.ndarray = field(repr=False)


def build_depth_bins(d_min: float, d_max: float, n_bins: int = 40) -> DepthBinning:
    if not (d_min > 0 and d_max > 0):
        raise ValueError(f"depth bounds must be positive, got ({d_min}, {d_max})")
    if not d_min < d_max:
        raise ValueError(f"need d_min < d_max, got ({d_min}, {d_max})")
    if n_bins < 2:
        raise ValueError("need at least two bins")
    # powers of the ratio stay exact when the ratio is an exact power (e.g. 0.5..8 in 4 bins)
    edges = d_min * (d_max / d_min) ** (np.arange(n_bins + 1) / n_bins)
    edges[0], edges[-1] = d_min, d_max
    log_e = np.log(edges)
    centers = np.exp(0.5 * (log_e[:-1] + log_e[1:]))
    return DepthBinning(float(d_min), float(d_max), int(n_bins), edges, centers)


def depth_binning_from_data(depths: np.ndarray, n_bins: int = 40, margin: float = 0.01) -> DepthBinning:
    """Bins spanning the observed range widened by ``margin`` on both ends."""
    depths = np.asarray(depths)
    return build_depth_bins(float(depths.min()) * (1 - margin), float(depths.max()) * (1 + margin), n_bins)


def depth_to_region(depth, binning: DepthBinning) -> np.ndarray:
    """Bin index per depth value; out-of-range values clamp to the end bins."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.isnan(depth).any():
        raise ValueError("depth_to_region: NaN depth")
    idx = np.searchsorted(binning.edges, depth, side="right") - 1
    return np.clip(idx, 0, binning.n_bins - 1)


def depth_soft_weighted_sum(probs: np.ndarray, binning: DepthBinning, tol: float = 1e-5) -> np.ndarray:
    """Expected depth under bin probabilities (last axis) using log-midpoint centres."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[-1] != binning.n_bins:
        raise ValueError(f"expected {binning.n_bins} bin probabilities, got {probs.shape[-1]}")
    if (probs < 0).any() or np.abs(probs.sum(axis=-1) - 1).max() > tol:
        raise ValueError("depth_soft_weighted_sum: probabilities are not on the simplex")
    return probs @ binning.centers


# --- spherical geometry --------------------------------------------------------

class DegenerateInputError(ValueError):
    pass


def convex_hull_sphere(points: np.ndarray, eps: float = 1e-10) -> np.ndarray:
    """Triangular facets of the 3-D convex hull, outward-oriented (incremental).

    Returns an F x 3 integer array of point indices. Points strictly inside
    the hull (or on a facet plane) do not appear as vertices.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 4:
        raise DegenerateInputError("convex_hull_sphere needs at least 4 points in 3-D")
    scale = max(float(np.abs(pts).max()), 1e-300)
    tol = eps * scale

    i0 = 0
    i1 = int(np.argmax(np.linalg.norm(pts - pts[i0], axis=1)))
    if np.linalg.norm(pts[i1] - pts[i0]) <= tol:
        raise DegenerateInputError("all points coincide")
    line = (pts[i1] - pts[i0]) / np.linalg.norm(pts[i1] - pts[i0])
    rel = pts - pts[i0]
    dist_line = np.linalg.norm(rel - np.outer(rel @ line, line), axis=1)
    i2 = int(np.argmax(dist_line))
    if dist_line[i2] <= tol:
        raise DegenerateInputError("all points are collinear")
    normal = np.cross(pts[i1] - pts[i0], pts[i2] - pts[i0])
    normal /= np.linalg.norm(normal)
    dist_plane = rel @ normal
    i3 = int(np.argmax(np.abs(dist_plane)))
    if abs(dist_plane[i3]) <= tol:
        raise DegenerateInputError("all points are coplanar")

    faces: dict[int, tuple[int, int, int]] = {}
    next_id = 0
    interior = pts[[i0, i1, i2, i3]].mean(axis=0)

    def oriented(a, b, c):
        n = np.cross(pts[b] - pts[a], pts[c] - pts[a])
        return (a, b, c) if n @ (pts[a] - interior) > 0 else (a, c, b)

    for tri in ((i0, i1, i2), (i0, i1, i3), (i0, i2, i3), (i1, i2, i3)):
        faces[next_id] = oriented(*tri)
        next_id += 1

    def plane(face):
        a, b, c = face
        n = np.cross(pts[b] - pts[a], pts[c] - pts[a])
        return n, n @ pts[a]

    used = {i0, i1, i2, i3}
    for p in range(len(pts)):
        if p in used:
            continue
        visible = []
        for fid, face in faces.items():
            n, off = plane(face)
            nn = np.linalg.norm(n)
            if nn > 0 and (n @ pts[p] - off) / nn > tol:
                visible.append(fid)
        if not visible:
            continue
        directed = set()
        for fid in visible:
            a, b, c = faces[fid]
            directed.update(((a, b), (b, c), (c, a)))
        horizon = [(a, b) for (a, b) in directed if (b, a) not in directed]
        for fid in visible:
            del faces[fid]
        for a, b in horizon:
            faces[next_id] = (a, b, p)
            next_id += 1
        used.add(p)
    return np.array(sorted(faces.values(), key=lambda f: tuple(sorted(f))), dtype=np.int64)


def hull_edges(triangles: np.ndarray) -> dict[tuple[int, int], int]:
    """Undirected edge -> number of incident facets."""
    counts: dict[tuple[int, int], int] = {}
    for a, b, c in triangles:
        for u, v in ((a, b), (b, c), (c, a)):
            key = (min(u, v), max(u, v))
            counts[key] = counts.get(key, 0) + 1
    return counts


@dataclass
class NormalCodebook:
    codewords: np.ndarray          # K x 3, unit rows
    triangles: np.ndarray          # F x 3 indices into codewords
    history: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._inverse = _facet_inverses(self.codewords, self.triangles)

    @property
    def k(self) -> int:
        return len(self.codewords)

    def nearest(self, normals: np.ndarray) -> np.ndarray:
        """Index of the codeword with maximal cosine similarity (last axis = xyz)."""
        flat = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        return np.argmax(flat @ self.codewords.T, axis=1).reshape(np.shape(normals)[:-1])


def _facet_inverses(codewords: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    inv = np.full((len(triangles), 3, 3), np.nan)
    for f, tri in enumerate(triangles):
        m = codewords[tri].T  # columns are the three vertices
        if abs(np.linalg.det(m)) > 1e-12:
            inv[f] = np.linalg.inv(m)
    return inv


def fit_normal_codebook(normals: np.ndarray, k: int = 40, seed: int = 0, max_iter: int = 50) -> NormalCodebook:
    """Spherical k-means with farthest-first initialisation.

    Assignment maximises cosine similarity; centroids are renormalised means;
    an empty cluster is reseeded at the point worst served by its codeword.
    """
    x = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    uniq = np.unique(np.round(x, 12), axis=0)
    if len(uniq) < 2 and k > 1 or len(uniq) < 1:
        raise DegenerateInputError("fit_normal_codebook: inputs are all identical")
    if len(uniq) < k:
        raise DegenerateInputError(f"fit_normal_codebook: {len(uniq)} distinct inputs for k={k}")

    rng = np.random.default_rng(seed)
    centers = [uniq[rng.integers(len(uniq))]]
    best = uniq @ centers[0]
    for _ in range(1, k):
        i = int(np.argmin(best))
        centers.append(uniq[i])
        best = np.maximum(best, uniq @ uniq[i])
    c = np.array(centers)

    history: list[float] = []
    assign = None
    for _ in range(max_iter):
        sims = x @ c.T
        new_assign = np.argmax(sims, axis=1)
        history.append(float(sims[np.arange(len(x)), new_assign].mean()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        served = sims[np.arange(len(x)), assign]
        for j in range(k):
            members = assign == j
            if members.any():
                s = x[members].sum(axis=0)
                norm = np.linalg.norm(s)
                if norm > 1e-12:
                    c[j] = s / norm
            else:
                far = int(np.argmin(served))
                c[j] = x[far]
                assign[far] = j
                served[far] = 1.0
    sims = x @ c.T
    history.append(float(sims.max(axis=1).mean()))
    tris = convex_hull_sphere(c) if k >= 4 else np.zeros((0, 3), dtype=np.int64)
    return NormalCodebook(c, tris, history)


def _cone_coefficients(n: np.ndarray, codebook: NormalCodebook) -> np.ndarray:
    """F x 3 coefficients lambda with n = sum lambda_i c_i per facet (NaN for degenerate facets)."""
    return np.einsum("fij,j->fi", codebook._inverse, n)


def encode_normal_triangular(n: np.ndarray, codebook: NormalCodebook, tol: float = 1e-9) -> np.ndarray:
    """Sparse weights over codewords: barycentric coordinates in the containing facet.

    The facet is the one whose cone from the origin contains ``n``; weights are
    the barycentric coordinates of the ray/facet intersection. When no facet
    contains ``n`` (numerics, or a codebook not enclosing the origin) the facet
    with the least-negative coefficient is used.
    """
    n = np.asarray(n, dtype=np.float64)
    n = n / np.linalg.norm(n)
    lam = _cone_coefficients(n, codebook)
    ok = np.isfinite(lam).all(axis=1)
    if not ok.any():
        raise DegenerateInputError("codebook has no usable facets")
    worst = np.where(ok, lam.min(axis=1), -np.inf)
    inside = np.flatnonzero(ok & (worst >= -tol) & (lam.sum(axis=1) > 0))
    f = int(inside[0]) if len(inside) else int(np.argmax(worst))
    coeff = np.clip(lam[f], 0.0, None)
    if coeff.sum() <= 0:
        coeff = np.ones(3)
    weights = np.zeros(codebook.k)
    weights[codebook.triangles[f]] = coeff / coeff.sum()
    return weights


def decode_normal(probs: np.ndarray, codebook: NormalCodebook) -> np.ndarray:
    """Facet with the largest summed vertex probability, then the renormalised blend."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (codebook.k,):
        raise ValueError(f"expected {codebook.k} probabilities, got shape {probs.shape}")
    if (probs < 0).any():
        raise ValueError("decode_normal: negative probabilities")
    if probs.sum() <= 0:
        raise ValueError("decode_normal: all probabilities are zero")
    f = decode_facet(probs, codebook)
    tri = codebook.triangles[f]
    w = probs[tri]
    if w.sum() <= 0:
        # winning facet has no mass only when the book has no triangles with mass
        return codebook.codewords[int(np.argmax(probs))].copy()
    w = w / w.sum()
    if np.count_nonzero(w) == 1:
        return codebook.codewords[tri[int(np.argmax(w))]].copy()
    vec = w @ codebook.codewords[tri]
    return vec / np.linalg.norm(vec)


def decode_facet(probs: np.ndarray, codebook: NormalCodebook) -> int:
    scores = probs[codebook.triangles].sum(axis=1)
    return int(np.argmax(scores))


def angular_error_deg(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cos = (a * b).sum(axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


# --- region specifications -------------------------------------------------------

REGION_KINDS = ("class", "depth_bin", "normal_codeword")


@dataclass
class LabelRegionSpec:
    task: str
    n_regions: int
    kind: str
    binning: DepthBinning | None = None
    codebook: NormalCodebook | None = None

    def __post_init__(self):
        if self.kind not in REGION_KINDS:
            raise ValueError(f"unknown region kind {self.kind!r}")
        if self.n_regions < 1:
            raise ValueError("a label region spec needs at least one region")
        if self.kind == "depth_bin" and (self.binning is None or self.binning.n_bins != self.n_regions):
            raise ValueError("depth regions need a binning with matching bin count")
        if self.kind == "normal_codeword" and (self.codebook is None or self.codebook.k != self.n_regions):
            raise ValueError("normal regions need a codebook with matching size")


def region_indices(labels: np.ndarray, spec: LabelRegionSpec) -> np.ndarray:
    """Hard region index per pixel.

    Class labels: N x H x W ints. Depth: N x H x W (or N x 1 x H x W). Normals: N x 3 x H x W.
    """
    labels = np.asarray(labels)
    if spec.kind == "class":
        if labels.ndim == 4 and labels.shape[1] == 1:
            labels = labels[:, 0]
        idx = labels.astype(np.int64)
        if idx.min() < 0 or idx.max() >= spec.n_regions:
            raise ValueError(f"{spec.task}: class labels outside [0, {spec.n_regions})")
        return idx
    if spec.kind == "depth_bin":
        if labels.ndim == 4:
            labels = labels[:, 0]
        return depth_to_region(labels, spec.binning)
    if labels.ndim != 4 or labels.shape[1] != 3:
        raise ValueError(f"{spec.task}: normal labels must be N x 3 x H x W")
    return spec.codebook.nearest(np.moveaxis(labels, 1, -1))


def regions_from_gt(labels: np.ndarray, spec: LabelRegionSpec) -> np.ndarray:
    """One-hot region membership, N x L x R (float32)."""
    idx = region_indices(labels, spec)
    n = idx.shape[0]
    flat = idx.reshape(n, -1)
    onehot = np.zeros(flat.shape + (spec.n_regions,), dtype=np.float32)
    np.put_along_axis(onehot, flat[..., None], 1.0, axis=-1)
    return onehot
