"""Planar geometry kernels used by the scene generator and the rule engine.

Polygons are ``(V, 2)`` float arrays listing vertices in order; the closing
edge from the last vertex back to the first is implicit. Polylines are
``(n, 2)`` arrays. All predicates are boundary-inclusive within ``TOL``.
"""
from __future__ import annotations

import numpy as np

TOL = 1e-9


class DegeneratePolygonError(ValueError):
    pass


def as_polygon(poly) -> np.ndarray:
    poly = np.asarray(poly, dtype=np.float64)
    if poly.ndim != 2 or poly.shape[1] != 2 or poly.shape[0] < 3:
        raise DegeneratePolygonError(f"polygon needs >= 3 vertices, got shape {poly.shape}")
    if np.allclose(poly[0], poly[-1]) and poly.shape[0] > 3:
        poly = poly[:-1]
    if abs(signed_area(poly)) <= TOL:
        raise DegeneratePolygonError("polygon has zero area")
    return poly


def signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def rotation_matrix(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def to_global(points, translation, rotation: float) -> np.ndarray:
    """Rotate local points by ``rotation`` then translate."""
    pts = np.asarray(points, dtype=np.float64)
    return pts @ rotation_matrix(rotation).T + np.asarray(translation, dtype=np.float64)


def to_local(points, translation, rotation: float) -> np.ndarray:
    """Inverse of :func:`to_global`."""
    pts = np.asarray(points, dtype=np.float64) - np.asarray(translation, dtype=np.float64)
    return pts @ rotation_matrix(rotation)


def _edges(poly: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return poly, np.concatenate((poly[1:], poly[:1]))


def point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances between every point ``(P, 2)`` and every segment ``a[j]-b[j]``.

    Returns a ``(P, S)`` array.
    """
    points = np.asarray(points, dtype=np.float64)
    ab = b - a
    ap = points[:, None, :] - a[None, :, :]
    denom = np.einsum("sk,sk->s", ab, ab)
    t = np.einsum("psk,sk->ps", ap, ab) / np.where(denom > 0, denom, 1.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1)


def winding_numbers(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Winding number of ``poly`` around each point (vectorised over points)."""
    points = np.asarray(points, dtype=np.float64)
    a, b = _edges(poly)
    px = points[:, 0:1]
    py = points[:, 1:2]
    is_left = (b[:, 0] - a[:, 0]) * (py - a[:, 1]) - (px - a[:, 0]) * (b[:, 1] - a[:, 1])
    up = (a[:, 1] <= py) & (b[:, 1] > py) & (is_left > 0)
    down = (a[:, 1] > py) & (b[:, 1] <= py) & (is_left < 0)
    return up.sum(axis=1) - down.sum(axis=1)


def points_in_polygon(points, poly, tol: float = TOL) -> np.ndarray:
    """Boundary-inclusive containment test for each point."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    poly = np.asarray(poly, dtype=np.float64)
    lo_box = poly.min(axis=0) - tol
    hi_box = poly.max(axis=0) + tol
    cand = (points[:, 0] >= lo_box[0]) & (points[:, 0] <= hi_box[0]) & (points[:, 1] >= lo_box[1]) & (points[:, 1] <= hi_box[1])
    if not cand.all():
        result = np.zeros(len(points), dtype=bool)
        if cand.any():
            result[cand] = points_in_polygon(points[cand], poly, tol)
        return result
    inside = winding_numbers(points, poly) != 0
    if inside.all():
        return inside
    a, b = _edges(poly)
    out = points[~inside]
    lo = np.minimum(a, b) - tol
    hi = np.maximum(a, b) + tol
    near = (
        (out[:, None, 0] >= lo[None, :, 0])
        & (out[:, None, 0] <= hi[None, :, 0])
        & (out[:, None, 1] >= lo[None, :, 1])
        & (out[:, None, 1] <= hi[None, :, 1])
    )
    pi, si = np.nonzero(near)
    on_edge = np.zeros(len(out), dtype=bool)
    if pi.size:
        ab = b[si] - a[si]
        ap = out[pi] - a[si]
        denom = np.einsum("ij,ij->i", ab, ab)
        t = np.clip(np.einsum("ij,ij->i", ap, ab) / np.where(denom > 0, denom, 1.0), 0.0, 1.0)
        dist = np.linalg.norm(ap - t[:, None] * ab, axis=1)
        np.logical_or.at(on_edge, pi, dist <= tol)
    inside[~inside] = on_edge
    return inside


def point_in_polygon(point, poly, tol: float = TOL) -> bool:
    return bool(points_in_polygon(np.asarray(point, dtype=np.float64)[None], poly, tol)[0])


def _orient(p, q, r):
    return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0])


def segments_hit_edges(p1: np.ndarray, p2: np.ndarray, poly: np.ndarray, tol: float = TOL) -> np.ndarray:
    """For each segment ``p1[i]-p2[i]`` report whether it meets any polygon edge."""
    q1, q2 = _edges(poly)
    P1, P2 = p1[:, None, :], p2[:, None, :]
    Q1, Q2 = q1[None], q2[None]
    d1 = _orient(Q1, Q2, P1)
    d2 = _orient(Q1, Q2, P2)
    d3 = _orient(P1, P2, Q1)
    d4 = _orient(P1, P2, Q2)
    proper = ((d1 > 0) & (d2 < 0) | (d1 < 0) & (d2 > 0)) & ((d3 > 0) & (d4 < 0) | (d3 < 0) & (d4 > 0))
    hit = proper.any(axis=1)
    if hit.all():
        return hit
    # touching / collinear cases: some endpoint lies on the other segment
    rest = ~hit
    s1, s2 = p1[rest], p2[rest]
    near = (
        (point_segment_distance(s1, q1, q2) <= tol).any(axis=1)
        | (point_segment_distance(s2, q1, q2) <= tol).any(axis=1)
    )
    for j in range(q1.shape[0]):
        if near.all():
            break
        d = point_segment_distance(q1[j : j + 1], s1, s2)[0]
        near |= d <= tol
    hit[rest] = near
    return hit


def polylines_intersect_polygon(polylines, poly, tol: float = TOL) -> np.ndarray:
    """Intersects test for a batch of polylines ``(T, n, 2)`` against one polygon.

    A polyline intersects when any vertex is inside/on the polygon or any of
    its segments meets a polygon edge.
    """
    lines = np.asarray(polylines, dtype=np.float64)
    if lines.ndim == 2:
        lines = lines[None]
    T, n, _ = lines.shape
    # cheap bounding-box rejection
    lo, hi = poly.min(axis=0) - tol, poly.max(axis=0) + tol
    out = np.zeros(T, dtype=bool)
    box = (lines.max(axis=1) >= lo).all(axis=1) & (lines.min(axis=1) <= hi).all(axis=1)
    if not box.any():
        return out
    idx = np.flatnonzero(box)
    sub = lines[idx]
    inside = points_in_polygon(sub.reshape(-1, 2), poly, tol).reshape(len(idx), n).any(axis=1)
    out[idx] = inside
    todo = idx[~inside]
    if todo.size and n > 1:
        seg = lines[todo]
        a = seg[:, :-1].reshape(-1, 2)
        b = seg[:, 1:].reshape(-1, 2)
        out[todo] = segments_hit_edges(a, b, poly, tol).reshape(len(todo), n - 1).any(axis=1)
    return out


def polyline_intersects_polygon(polyline, poly, tol: float = TOL) -> bool:
    return bool(polylines_intersect_polygon(np.asarray(polyline)[None], as_polygon(poly), tol)[0])


def point_polygon_distance(point, poly) -> float:
    """Euclidean distance from a point to a polygon region (0 when inside)."""
    point = np.asarray(point, dtype=np.float64)[None]
    if points_in_polygon(point, poly)[0]:
        return 0.0
    a, b = _edges(poly)
    return float(point_segment_distance(point, a, b).min())


def _ray_edge_params(origin, direction, poly) -> np.ndarray:
    a, b = _edges(poly)
    e = b - a
    denom = direction[0] * e[:, 1] - direction[1] * e[:, 0]
    ok = np.abs(denom) > 1e-15
    diff = a - origin
    t = (diff[:, 0] * e[:, 1] - diff[:, 1] * e[:, 0]) / np.where(ok, denom, 1.0)
    s = (diff[:, 0] * direction[1] - diff[:, 1] * direction[0]) / np.where(ok, denom, 1.0)
    hit = ok & (t >= 0) & (s >= -TOL) & (s <= 1 + TOL)
    return t[hit]


def _covered(pts: np.ndarray, polygons) -> np.ndarray:
    out = np.zeros(len(pts), dtype=bool)
    for poly in polygons:
        todo = ~out
        if not todo.any():
            break
        out[todo] = points_in_polygon(pts[todo], poly)
    return out


def ray_exit_distances(origin, directions, polygons, max_dist: float) -> np.ndarray:
    """:func:`ray_exit_distance` for several directions from one origin."""
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    dirs = np.stack([d / np.linalg.norm(d) for d in dirs])
    out = np.full(len(dirs), float(max_dist))
    if not _covered(origin[None], polygons)[0]:
        return np.zeros(len(dirs))
    per_ray = []
    for d in dirs:
        ts = np.concatenate([_ray_edge_params(origin, d, poly) for poly in polygons] + [np.empty(0)])
        per_ray.append(np.unique(ts[ts <= max_dist]))
    sizes = [len(ts) for ts in per_ray]
    if sum(sizes):
        t_all = np.concatenate(per_ray)
        d_all = np.repeat(dirs, sizes, axis=0)
        outside = ~_covered(origin + (t_all[:, None] + 1e-7) * d_all, polygons)
        start = 0
        for k, n in enumerate(sizes):
            seg = outside[start : start + n]
            if seg.any():
                out[k] = float(per_ray[k][np.argmax(seg)])
            start += n
    return out


def ray_exit_distance(origin, direction, polygons, max_dist: float) -> float:
    """Distance along a ray until it leaves the union of ``polygons``.

    Returns 0 if the origin lies outside every polygon; clamped at ``max_dist``.
    """
    return float(ray_exit_distances(origin, [direction], polygons, max_dist)[0])


def ray_hit_distance(origin, direction, polygons, max_dist: float) -> float:
    """Distance along a ray to the first polygon it touches, clamped at ``max_dist``."""
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    direction = direction / np.linalg.norm(direction)
    best = float(max_dist)
    for poly in polygons:
        if point_in_polygon(origin, poly):
            return 0.0
        ts = _ray_edge_params(origin, direction, poly)
        if ts.size:
            best = min(best, float(ts.min()))
    return best


def polygon_is_simple(poly: np.ndarray) -> bool:
    """True when no two non-adjacent edges meet."""
    a, b = _edges(poly)
    V = len(poly)
    for i in range(V):
        for j in range(i + 1, V):
            if j == i + 1 or (i == 0 and j == V - 1):
                continue
            hit = segments_hit_edges(a[i : i + 1], b[i : i + 1], np.array([a[j], b[j]]), tol=0.0)
            if hit[0]:
                return False
    return True
