"""Random Delaunay meshes on the unit square and piecewise-constant subspaces.

A mesh is built by incremental Bowyer-Watson insertion. The four square
corners are always part of the vertex set, so every mesh tiles the full
domain. Rasterizing a mesh on a pixel grid yields an orthonormal basis of
normalized triangle indicators; the linear span is the model subspace used
throughout the package.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import sparse

from .core import FormatError, Grid, Image, Seed

__all__ = [
    "StackedBasis",
    "SubspaceBasis",
    "TriMesh",
    "delaunay_triangulate",
    "delaunay_violations",
    "gaussian_subspace_projector",
    "load_basis",
    "load_mesh",
    "mesh_with_k_triangles",
    "rasterize",
    "sample_poisson_points",
    "save_basis",
    "save_mesh",
]

_CORNERS = ((0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0))


# ---------------------------------------------------------------------------
# geometric predicates

def _orient(ax, ay, bx, by, cx, cy) -> int:
    """Sign of the cross product (b-a) x (c-a): +1 CCW, -1 CW, 0 collinear.

    Uses floating point with an error-bound filter and falls back to exact
    rational arithmetic on near-degenerate input.
    """
    t1 = (bx - ax) * (cy - ay)
    t2 = (by - ay) * (cx - ax)
    det = t1 - t2
    bound = 1e-12 * (abs(t1) + abs(t2))
    if abs(det) > bound:
        return 1 if det > 0.0 else -1
    det = (Fraction(bx) - Fraction(ax)) * (Fraction(cy) - Fraction(ay)) - (
        Fraction(by) - Fraction(ay)
    ) * (Fraction(cx) - Fraction(ax))
    if det > 0:
        return 1
    if det < 0:
        return -1
    return 0


def _incircle_exact(a, b, c, d) -> int:
    """Exact sign of the in-circle determinant for CCW (a, b, c) and query d.

    +1 when d lies strictly inside the circumcircle, 0 on it, -1 outside.
    """
    adx = Fraction(a[0]) - Fraction(d[0])
    ady = Fraction(a[1]) - Fraction(d[1])
    bdx = Fraction(b[0]) - Fraction(d[0])
    bdy = Fraction(b[1]) - Fraction(d[1])
    cdx = Fraction(c[0]) - Fraction(d[0])
    cdy = Fraction(c[1]) - Fraction(d[1])
    ad = adx * adx + ady * ady
    bd = bdx * bdx + bdy * bdy
    cd = cdx * cdx + cdy * cdy
    det = (
        adx * (bdy * cd - cdy * bd)
        - ady * (bdx * cd - cdx * bd)
        + ad * (bdx * cdy - cdx * bdy)
    )
    if det > 0:
        return 1
    if det < 0:
        return -1
    return 0


def _incircle_stat(a, b, c, d):
    """(det, permanent) of the in-circle determinant in floating point.

    det > 0 means d strictly inside the circumcircle of CCW (a, b, c); the
    permanent bounds the magnitude of the terms, for normalization.
    """
    adx, ady = a[0] - d[0], a[1] - d[1]
    bdx, bdy = b[0] - d[0], b[1] - d[1]
    cdx, cdy = c[0] - d[0], c[1] - d[1]
    ad = adx * adx + ady * ady
    bd = bdx * bdx + bdy * bdy
    cd = cdx * cdx + cdy * cdy
    t1 = adx * (bdy * cd - cdy * bd)
    t2 = ady * (bdx * cd - cdx * bd)
    t3 = ad * (bdx * cdy - cdx * bdy)
    det = t1 - t2 + t3
    perm = abs(t1) + abs(t2) + abs(t3)
    return det, perm


def _circumcircle(a, b, c):
    """Circumcenter (ux, uy) and squared radius of triangle (a, b, c)."""
    ax, ay = a
    bx, by = b
    cx, cy = c
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    a2 = ax * ax + ay * ay
    b2 = bx * bx + by * by
    c2 = cx * cx + cy * cy
    ux = (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / d
    uy = (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / d
    r2 = (ax - ux) ** 2 + (ay - uy) ** 2
    return ux, uy, r2


# ---------------------------------------------------------------------------
# mesh type

@dataclass
class TriMesh:
    """Triangulation of the unit square: vertices (V, 2) and CCW triangles (T, 3)."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValueError("triangle indices out of range")

    @property
    def triangle_count(self) -> int:
        return len(self.triangles)

    def areas(self) -> np.ndarray:
        v = self.vertices
        a, b, c = (v[self.triangles[:, i]] for i in range(3))
        return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                      - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))

    def to_dict(self) -> dict:
        return {
            "vertices": [[float(x), float(y)] for x, y in self.vertices],
            "triangles": [[int(a), int(b), int(c)] for a, b, c in self.triangles],
        }

    @staticmethod
    def from_dict(obj: dict) -> "TriMesh":
        if not isinstance(obj, dict) or "vertices" not in obj or "triangles" not in obj:
            raise FormatError("mesh JSON must contain 'vertices' and 'triangles'")
        return TriMesh(np.array(obj["vertices"], dtype=np.float64),
                       np.array(obj["triangles"], dtype=np.int64))


def save_mesh(mesh: TriMesh, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump(mesh.to_dict(), fh, separators=(",", ":"))
        fh.write("\n")


def load_mesh(path) -> TriMesh:
    with open(path, "r", encoding="ascii") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: unparseable mesh JSON: {exc}") from exc
    try:
        return TriMesh.from_dict(obj)
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Bowyer-Watson triangulation

class _Triangulation:
    """Incremental Bowyer-Watson state over a fixed vertex list.

    Starts from the two-triangle tiling of the unit square spanned by the
    corner vertices, so every insertion point (anywhere in [0,1]^2) lies
    inside the current hull and no super-triangle is needed.
    """

    def __init__(self, verts, corner_ids):
        self.verts = verts
        c00, c10, c01, c11 = corner_ids
        self.tris = []
        self.circ = []
        self._add_tri(c00, c10, c11)
        self._add_tri(c00, c11, c01)

    def _add_tri(self, a, b, c) -> bool:
        pa, pb, pc = self.verts[a], self.verts[b], self.verts[c]
        s = _orient(pa[0], pa[1], pb[0], pb[1], pc[0], pc[1])
        if s == 0:
            return False  # degenerate sliver: skip (arises when a point sits on an edge)
        if s < 0:
            b, c = c, b
            pb, pc = pc, pb
        self.tris.append((a, b, c))
        self.circ.append(_circumcircle(pa, pb, pc))
        return True

    def _in_circum(self, idx: int, p) -> bool:
        ux, uy, r2 = self.circ[idx]
        dx = p[0] - ux
        dy = p[1] - uy
        dd = dx * dx + dy * dy
        band = 1e-12 * (1.0 + r2)
        if dd < r2 - band:
            return True
        if dd > r2 + band:
            return False
        a, b, c = self.tris[idx]
        return _incircle_exact(self.verts[a], self.verts[b], self.verts[c], p) > 0

    def insert(self, pi: int) -> None:
        p = self.verts[pi]
        bad = [i for i in range(len(self.tris)) if self._in_circum(i, p)]
        if not bad:
            raise ValueError(f"point {tuple(p)} coincides with an existing vertex")
        # Directed cavity boundary: shared edges of bad triangles cancel in pairs.
        edges = {}
        for i in bad:
            a, b, c = self.tris[i]
            for u, v in ((a, b), (b, c), (c, a)):
                if (v, u) in edges:
                    del edges[(v, u)]
                else:
                    edges[(u, v)] = None
        bad_set = set(bad)
        keep = [i for i in range(len(self.tris)) if i not in bad_set]
        self.tris = [self.tris[i] for i in keep]
        self.circ = [self.circ[i] for i in keep]
        for u, v in edges:
            self._add_tri(u, v, pi)

    def mesh(self) -> TriMesh:
        return TriMesh(np.array(self.verts, dtype=np.float64),
                       np.array(self.tris, dtype=np.int64))


def _prepare_vertices(points):
    """Deduplicated vertex list with the four corners appended if absent."""
    verts = []
    seen = {}
    for p in points:
        x, y = float(p[0]), float(p[1])
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise ValueError(f"point ({x}, {y}) lies outside the unit square")
        key = (x, y)
        if key not in seen:
            seen[key] = len(verts)
            verts.append(key)
    for c in _CORNERS:
        if c not in seen:
            seen[c] = len(verts)
            verts.append(c)
    corner_ids = [seen[c] for c in _CORNERS]
    return verts, corner_ids


def delaunay_triangulate(points) -> TriMesh:
    """Delaunay triangulation of ``points`` plus the four square corners.

    Points are deduplicated exactly; insertion order is the input order, so
    the result is deterministic. Every triangle is CCW and the triangulation
    tiles the unit square.
    """
    verts, corner_ids = _prepare_vertices(points)
    tri = _Triangulation(verts, corner_ids)
    corner_set = set(corner_ids)
    for idx in range(len(verts)):
        if idx not in corner_set:
            tri.insert(idx)
    return tri.mesh()


def delaunay_violations(mesh: TriMesh, tol: float = 1e-9) -> int:
    """Number of (triangle, vertex) pairs violating the empty-circumcircle property.

    A violation is a vertex strictly inside a circumcircle by more than
    ``tol`` in the normalized in-circle determinant.
    """
    count = 0
    verts = [tuple(v) for v in mesh.vertices]
    for a, b, c in mesh.triangles:
        ta, tb, tc = verts[a], verts[b], verts[c]
        for vi, v in enumerate(verts):
            if vi in (a, b, c):
                continue
            det, perm = _incircle_stat(ta, tb, tc, v)
            if perm > 0 and det / perm > tol:
                count += 1
    return count


def sample_poisson_points(intensity: float, seed: Seed) -> np.ndarray:
    """Poisson(intensity)-many iid uniform points in the unit square, as (n, 2)."""
    if not (intensity > 0 and np.isfinite(intensity)):
        raise ValueError(f"intensity must be positive and finite, got {intensity}")
    rng = seed.rng()
    count = int(rng.poisson(intensity))
    return rng.random((count, 2))


def mesh_with_k_triangles(k: int, seed: Seed) -> TriMesh:
    """Random Delaunay mesh with exactly ``k`` triangles.

    Poisson points of intensity k/2 seed the mesh; uniform points are then
    appended (or the most recently added non-corner points dropped) until the
    triangle count is exactly k. Odd k needs one point on the square boundary,
    since interior insertions change the count in steps of two.
    """
    if not isinstance(k, (int, np.integer)) or k < 2:
        raise ValueError(f"k must be an integer >= 2, got {k!r}")
    k = int(k)
    rng = seed.rng()
    history = []
    if k % 2 == 1:
        edge = int(rng.integers(4))
        u = float(rng.random())
        x, y = {0: (u, 0.0), 1: (1.0, u), 2: (u, 1.0), 3: (0.0, u)}[edge]
        history.append((x, y))
    count = int(rng.poisson(k / 2.0))
    for _ in range(count):
        pt = rng.random(2)
        history.append((float(pt[0]), float(pt[1])))
    # With b boundary points and i interior points the square triangulates into
    # 2i + b + 2 triangles, so trim or extend the history to the exact target.
    interior_target = (k - 2 - (k % 2)) // 2
    base = k % 2
    while len(history) - base > interior_target:
        history.pop()
    while len(history) - base < interior_target:
        pt = rng.random(2)
        history.append((float(pt[0]), float(pt[1])))
    mesh = delaunay_triangulate(history)
    # Degenerate configurations (points exactly on edges) can shift the count;
    # adjust one point at a time.
    guard = 0
    while mesh.triangle_count != k:
        if mesh.triangle_count < k:
            pt = rng.random(2)
            history.append((float(pt[0]), float(pt[1])))
        else:
            history.pop()
        mesh = delaunay_triangulate(history)
        guard += 1
        if guard > 10_000:
            raise RuntimeError(f"failed to reach {k} triangles")
    return mesh


# ---------------------------------------------------------------------------
# rasterized subspace bases

@dataclass
class SubspaceBasis:
    """Orthonormal basis of normalized triangle indicators on a pixel grid.

    Column k is the indicator of the pixels assigned to (kept) triangle k,
    scaled by 1/sqrt(pixel count). Triangles that received no pixel center
    are dropped; ``kept`` maps columns back to mesh triangle indices.
    """

    mesh: TriMesh
    grid: Grid
    assignment: np.ndarray  # (N,) column index per pixel
    counts: np.ndarray      # (K,) pixels per column
    kept: np.ndarray        # (K,) original triangle index per column

    @property
    def k(self) -> int:
        return len(self.counts)

    def coeffs(self, img: Image) -> np.ndarray:
        """B^T x: per-triangle pixel sums scaled by 1/sqrt(count)."""
        self._check_grid(img)
        sums = np.bincount(self.assignment, weights=img.values, minlength=self.k)
        return sums / np.sqrt(self.counts)

    def synthesize(self, q: np.ndarray) -> Image:
        """B q: the piecewise-constant image with the given coefficients."""
        q = np.asarray(q, dtype=np.float64).reshape(-1)
        if q.size != self.k:
            raise ValueError(f"expected {self.k} coefficients, got {q.size}")
        values = (q / np.sqrt(self.counts))[self.assignment]
        return Image(self.grid, values)

    def project(self, img: Image) -> Image:
        """B B^T x: replace each pixel by the mean over its triangle."""
        self._check_grid(img)
        sums = np.bincount(self.assignment, weights=img.values, minlength=self.k)
        means = sums / self.counts
        return Image(self.grid, means[self.assignment])

    def to_sparse(self) -> sparse.csr_matrix:
        n = self.grid.n_pixels
        data = 1.0 / np.sqrt(self.counts)[self.assignment]
        return sparse.csr_matrix(
            (data, (np.arange(n), self.assignment)), shape=(n, self.k)
        )

    def _check_grid(self, img: Image) -> None:
        if img.grid != self.grid:
            raise ValueError(
                f"image grid side {img.grid.side} != basis grid side {self.grid.side}"
            )


def rasterize(mesh: TriMesh, grid: Grid) -> SubspaceBasis:
    """Assign each pixel center to a triangle and build the indicator basis.

    A center on a shared edge or vertex goes to the lowest-index incident
    triangle. Triangles containing no center are dropped from the basis.
    """
    centers = grid.centers()
    v = mesh.vertices
    tri = mesh.triangles
    a, b, c = v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]]  # (T, 2) each
    px = centers[:, 0][:, None]
    py = centers[:, 1][:, None]
    s0 = (b[:, 0] - a[:, 0]) * (py - a[:, 1]) - (b[:, 1] - a[:, 1]) * (px - a[:, 0])
    s1 = (c[:, 0] - b[:, 0]) * (py - b[:, 1]) - (c[:, 1] - b[:, 1]) * (px - b[:, 0])
    s2 = (a[:, 0] - c[:, 0]) * (py - c[:, 1]) - (a[:, 1] - c[:, 1]) * (px - c[:, 0])
    worst = np.minimum(np.minimum(s0, s1), s2)  # (N, T)
    inside = worst >= -1e-12
    assign = np.argmax(inside, axis=1)  # first (lowest-index) containing triangle
    stragglers = ~inside.any(axis=1)
    if stragglers.any():
        # Round-off stragglers: take the triangle whose worst edge test is best.
        assign[stragglers] = np.argmax(worst[stragglers], axis=1)
    present = np.unique(assign)
    col_of = np.full(mesh.triangle_count, -1, dtype=np.int64)
    col_of[present] = np.arange(len(present))
    assignment = col_of[assign]
    counts = np.bincount(assignment, minlength=len(present))
    return SubspaceBasis(mesh, grid, assignment, counts.astype(np.int64), present)


@dataclass
class StackedBasis:
    """Horizontal stack [B_1 ... B_L] of per-mesh bases on a common grid."""

    bases: list

    def __post_init__(self):
        if not self.bases:
            raise ValueError("stacked basis needs at least one basis")
        g = self.bases[0].grid
        for b in self.bases:
            if b.grid != g:
                raise ValueError("all stacked bases must share one grid")

    @property
    def grid(self) -> Grid:
        return self.bases[0].grid

    @property
    def total_k(self) -> int:
        return sum(b.k for b in self.bases)

    @property
    def offsets(self) -> list:
        """Start offset of each basis's coefficient block."""
        out, acc = [], 0
        for b in self.bases:
            out.append(acc)
            acc += b.k
        return out

    def coeffs(self, img: Image) -> np.ndarray:
        return np.concatenate([b.coeffs(img) for b in self.bases])

    def split(self, q: np.ndarray) -> list:
        q = np.asarray(q, dtype=np.float64).reshape(-1)
        if q.size != self.total_k:
            raise ValueError(f"expected {self.total_k} coefficients, got {q.size}")
        out, acc = [], 0
        for b in self.bases:
            out.append(q[acc : acc + b.k])
            acc += b.k
        return out

    def synthesize(self, q: np.ndarray) -> Image:
        parts = self.split(q)
        values = np.zeros(self.grid.n_pixels)
        for b, qb in zip(self.bases, parts):
            values += b.synthesize(qb).values
        return Image(self.grid, values)

    def to_sparse(self) -> sparse.csr_matrix:
        return sparse.hstack([b.to_sparse() for b in self.bases], format="csr")


def save_basis(basis: SubspaceBasis, path) -> None:
    """Persist a basis as mesh + grid side; the assignment is recomputed on load."""
    obj = {"grid_side": basis.grid.side, "mesh": basis.mesh.to_dict()}
    with open(path, "w", encoding="ascii") as fh:
        json.dump(obj, fh, separators=(",", ":"))
        fh.write("\n")


def load_basis(path) -> SubspaceBasis:
    with open(path, "r", encoding="ascii") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: unparseable basis JSON: {exc}") from exc
    if "grid_side" not in obj or "mesh" not in obj:
        raise FormatError(f"{path}: basis JSON must contain 'grid_side' and 'mesh'")
    return rasterize(TriMesh.from_dict(obj["mesh"]), Grid(int(obj["grid_side"])))


def gaussian_subspace_projector(n: int, k: int, seed: Seed) -> np.ndarray:
    """Orthogonal projector onto the span of an n x k iid standard Gaussian matrix.

    Dense n x n output; intended for small comparison experiments (n <= 256).
    """
    if not (isinstance(n, (int, np.integer)) and isinstance(k, (int, np.integer))):
        raise ValueError("n and k must be integers")
    if n > 256:
        raise ValueError(f"n must be <= 256 (dense projector), got {n}")
    if not (1 <= k < n):
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    w = seed.rng().standard_normal((int(n), int(k)))
    q, _ = np.linalg.qr(w)
    return q @ q.T
