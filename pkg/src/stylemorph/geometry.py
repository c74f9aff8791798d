"""Landmark geometry: averaging, Delaunay meshes, piecewise-affine warping,
convex-hull masks and feathered paste-back compositing.

Coordinates are (x, y) pixels, origin top-left, pixel centers on the integer
grid. Images are HxWxC float arrays in [0,1].
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.ndimage
import scipy.spatial

from .tensor import bilinear_resize_array

COCIRCULAR_EPS = 1e-9


class GeometryError(ValueError):
    pass


def average_landmarks(l1: np.ndarray, l2: np.ndarray) -> np.ndarray:
    """Per-index midpoint of two equally long landmark sets."""
    a = np.asarray(l1, dtype=np.float64)
    b = np.asarray(l2, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 2:
        raise GeometryError(f"landmark sets must share shape (n,2): {a.shape} vs {b.shape}")
    return 0.5 * (a + b)


def boundary_points(height: int, width: int) -> np.ndarray:
    """Four corners plus four edge midpoints of the pixel-center rectangle."""
    x1, y1 = width - 1.0, height - 1.0
    xm, ym = x1 / 2.0, y1 / 2.0
    return np.array([(0, 0), (x1, 0), (0, y1), (x1, y1),
                     (xm, 0), (xm, y1), (0, ym), (x1, ym)], dtype=np.float64)


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray       # (n, 2)
    triangles: np.ndarray      # (t, 3) int indices


def _circumcircle(p: np.ndarray):
    """Center and squared radius of the circle through three points."""
    ax, ay = p[0]
    bx, by = p[1]
    cx, cy = p[2]
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if d == 0.0:
        return None
    ux = ((ax**2 + ay**2) * (by - cy) + (bx**2 + by**2) * (cy - ay)
          + (cx**2 + cy**2) * (ay - by)) / d
    uy = ((ax**2 + ay**2) * (cx - bx) + (bx**2 + by**2) * (ax - cx)
          + (cx**2 + cy**2) * (bx - ax)) / d
    r2 = (ax - ux) ** 2 + (ay - uy) ** 2
    return np.array([ux, uy]), r2


def _area2(tri: np.ndarray) -> float:
    (ax, ay), (bx, by), (cx, cy) = tri
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def _triangle_area2(pts: np.ndarray, tri) -> float:
    return _area2(pts[list(tri)])


def delaunay_triangulate(points: np.ndarray) -> TriangleMesh:
    """Delaunay triangulation of the convex hull of the given points.

    Qhull does the heavy lifting; cocircular configurations are then
    canonicalized by edge flips toward the lexicographically smallest sorted
    triangle list, so exactly symmetric inputs (e.g. square corners)
    triangulate deterministically.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise GeometryError("triangulation needs at least 3 (x,y) points")
    try:
        tri = scipy.spatial.Delaunay(pts)
    except scipy.spatial.QhullError as e:
        raise GeometryError(f"degenerate point set: {e}") from e
    simplices = [tuple(sorted(s)) for s in tri.simplices
                 if abs(_triangle_area2(pts, s)) > 1e-12]
    if not simplices:
        raise GeometryError("all points collinear")
    simplices = _canonicalize_cocircular(pts, simplices)
    return TriangleMesh(pts, np.array(sorted(simplices), dtype=np.intp))


def _canonicalize_cocircular(pts, simplices):
    tris = set(simplices)
    changed = True
    while changed:
        changed = False
        edges: dict[tuple[int, int], list[tuple[int, ...]]] = {}
        for t in tris:
            for e in ((t[0], t[1]), (t[0], t[2]), (t[1], t[2])):
                edges.setdefault(e, []).append(t)
        for e, owners in edges.items():
            if len(owners) != 2:
                continue
            t1, t2 = owners
            o1 = next(v for v in t1 if v not in e)
            o2 = next(v for v in t2 if v not in e)
            cc = _circumcircle(pts[list(t1)])
            if cc is None:
                continue
            center, r2 = cc
            d2 = float(np.sum((pts[o2] - center) ** 2))
            if abs(d2 - r2) > COCIRCULAR_EPS * max(r2, 1.0):
                continue  # not cocircular: the Delaunay edge is forced
            alt1 = tuple(sorted((o1, o2, e[0])))
            alt2 = tuple(sorted((o1, o2, e[1])))
            if abs(_triangle_area2(pts, alt1)) < 1e-12 or \
               abs(_triangle_area2(pts, alt2)) < 1e-12:
                continue
            cur = sorted((t1, t2))
            alt = sorted((alt1, alt2))
            if alt < cur:
                tris.discard(t1)
                tris.discard(t2)
                tris.add(alt1)
                tris.add(alt2)
                changed = True
                break
    return tris


def circumcircle_violations(mesh: TriangleMesh, eps: float = COCIRCULAR_EPS) -> int:
    """Count (triangle, point) pairs with a point strictly inside a circumcircle."""
    bad = 0
    for tri in mesh.triangles:
        cc = _circumcircle(mesh.vertices[tri])
        if cc is None:
            continue
        center, r2 = cc
        d2 = np.sum((mesh.vertices - center) ** 2, axis=1)
        inside = d2 < r2 - eps * max(r2, 1.0)
        inside[tri] = False
        bad += int(np.count_nonzero(inside))
    return bad


def _affine_from_triangles(dst: np.ndarray, src: np.ndarray):
    """2x3 matrix mapping dst triangle coords to src coords, or None."""
    d = np.column_stack([dst, np.ones(3)])
    det = np.linalg.det(d)
    if abs(det) < 1e-12:
        return None
    try:
        m = np.linalg.solve(d, src)   # (3,2): [x 1] @ m = src
    except np.linalg.LinAlgError:
        return None
    return m


def sample_bilinear(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample an HxWxC image at float (x, y) positions, clamped at borders."""
    h, w = image.shape[:2]
    x = np.clip(xs, 0.0, w - 1.0)
    y = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def warp_piecewise_affine(image: np.ndarray, src: np.ndarray,
                          dst: np.ndarray) -> np.ndarray:
    """Warp so the neighborhoods of ``src`` points land on ``dst`` points.

    The destination point set is Delaunay-triangulated; each destination
    triangle pulls pixels from the matching source triangle through the
    inverse affine map with bilinear sampling. Pixels outside the destination
    hull keep their input values. A source triangle degenerate under the
    correspondence is skipped with a warning and its area filled from the
    nearest warped pixel.
    """
    img = np.asarray(image, dtype=np.float64)
    sp = np.asarray(src, dtype=np.float64)
    dp = np.asarray(dst, dtype=np.float64)
    if sp.shape != dp.shape:
        raise GeometryError(f"src/dst length mismatch: {sp.shape} vs {dp.shape}")
    h, w = img.shape[:2]
    mesh = delaunay_triangulate(dp)
    out = img.copy()
    assigned = np.zeros((h, w), dtype=bool)
    skipped = False
    ys_all, xs_all = np.mgrid[0:h, 0:w]
    for tri in mesh.triangles:
        dtri = dp[tri]
        stri = sp[tri]
        x0 = max(int(np.floor(dtri[:, 0].min())), 0)
        x1 = min(int(np.ceil(dtri[:, 0].max())), w - 1)
        y0 = max(int(np.floor(dtri[:, 1].min())), 0)
        y1 = min(int(np.ceil(dtri[:, 1].max())), h - 1)
        if x1 < x0 or y1 < y0:
            continue
        gx = xs_all[y0:y1 + 1, x0:x1 + 1].astype(np.float64)
        gy = ys_all[y0:y1 + 1, x0:x1 + 1].astype(np.float64)
        bary = _barycentric(dtri, gx, gy)
        if bary is None:
            continue
        inside = (bary >= -1e-9).all(axis=0) & ~assigned[y0:y1 + 1, x0:x1 + 1]
        if not inside.any():
            continue
        m = _affine_from_triangles(dtri, stri)
        if m is None or abs(_area2(stri)) < 1e-9:
            skipped = True
            warnings.warn("degenerate source triangle skipped during warp",
                          stacklevel=2)
            continue
        sx = gx * m[0, 0] + gy * m[1, 0] + m[2, 0]
        sy = gx * m[0, 1] + gy * m[1, 1] + m[2, 1]
        vals = sample_bilinear(img, sx[inside], sy[inside])
        block = out[y0:y1 + 1, x0:x1 + 1]
        block[inside] = vals
        assigned[y0:y1 + 1, x0:x1 + 1] |= inside
    if skipped and assigned.any() and not assigned.all():
        _, (iy, ix) = scipy.ndimage.distance_transform_edt(
            ~assigned, return_indices=True)
        hole = ~assigned
        out[hole] = out[iy[hole], ix[hole]]
    return out


def _barycentric(tri: np.ndarray, gx: np.ndarray, gy: np.ndarray):
    (x1, y1), (x2, y2), (x3, y3) = tri
    det = (y2 - y3) * (x1 - x3) + (x3 - x2) * (y1 - y3)
    if abs(det) < 1e-12:
        return None
    l1 = ((y2 - y3) * (gx - x3) + (x3 - x2) * (gy - y3)) / det
    l2 = ((y3 - y1) * (gx - x3) + (x1 - x3) * (gy - y3)) / det
    return np.stack([l1, l2, 1.0 - l1 - l2])


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise hull vertices (Andrew's monotone chain)."""
    pts = sorted({(float(x), float(y)) for x, y in np.asarray(points)})
    if len(pts) < 3:
        raise GeometryError("hull needs at least 3 distinct points")

    def half(seq):
        chain = []
        for p in seq:
            while len(chain) >= 2:
                (ox, oy), (ax, ay) = chain[-2], chain[-1]
                if (ax - ox) * (p[1] - oy) - (ay - oy) * (p[0] - ox) <= 0:
                    chain.pop()
                else:
                    break
            chain.append(p)
        return chain

    lower = half(pts)
    upper = half(reversed(pts))
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise GeometryError("all points collinear; hull is empty")
    return np.array(hull, dtype=np.float64)


def convex_hull_mask(landmarks: np.ndarray, boundary: np.ndarray | None,
                     size: tuple[int, int],
                     forehead_extension_px: float = 0.0) -> np.ndarray:
    """Binary HxW mask of the convex hull of landmarks plus boundary points.

    ``forehead_extension_px`` shifts copies of the upper half of the landmark
    set upward before hulling, a knob for covering the forehead the landmark
    model stops below.
    """
    h, w = size
    pts = np.asarray(landmarks, dtype=np.float64)
    if forehead_extension_px > 0:
        mid_y = np.median(pts[:, 1])
        upper = pts[pts[:, 1] <= mid_y].copy()
        upper[:, 1] -= forehead_extension_px
        pts = np.vstack([pts, upper])
    if boundary is not None and len(boundary):
        pts = np.vstack([pts, np.asarray(boundary, dtype=np.float64)])
    hull = convex_hull(pts)
    ys, xs = np.mgrid[0:h, 0:w]
    inside = np.ones((h, w), dtype=bool)
    n = len(hull)
    for i in range(n):
        x0, y0 = hull[i]
        x1, y1 = hull[(i + 1) % n]
        cross = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
        inside &= cross >= -1e-9
    return inside.astype(np.float64)


def paste_composite(background: np.ndarray, patch: np.ndarray,
                    mask: np.ndarray, feather_px: float = 0.0) -> np.ndarray:
    """Blend ``patch`` over ``background`` through a feathered mask.

    The mask is Gaussian-blurred with sigma = feather_px (0 keeps it hard),
    then out = m*patch + (1-m)*background.
    """
    bg = np.asarray(background, dtype=np.float64)
    pt = np.asarray(patch, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if bg.shape != pt.shape or m.shape != bg.shape[:2]:
        raise GeometryError(
            f"shape mismatch: bg {bg.shape}, patch {pt.shape}, mask {m.shape}")
    if feather_px < 0:
        raise GeometryError("feather_px must be >= 0")
    if feather_px > 0:
        m = scipy.ndimage.gaussian_filter(m, sigma=feather_px)
    m3 = m[..., None]
    return m3 * pt + (1.0 - m3) * bg


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear image resize (HxW or HxWxC); the graph-op twin lives in tensor."""
    if out_h < 1 or out_w < 1:
        raise GeometryError("target dimensions must be >= 1")
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 2:
        return bilinear_resize_array(a, out_h, out_w)
    if a.ndim == 3:
        chw = np.moveaxis(a, 2, 0)
        return np.moveaxis(bilinear_resize_array(chw, out_h, out_w), 0, 2)
    raise GeometryError(f"expected HxW or HxWxC image, got {a.shape}")
