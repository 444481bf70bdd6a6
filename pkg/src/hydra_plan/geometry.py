"""Planar geometry kernels: oriented rectangles, simple polygons, polylines.

Everything here is vectorized over leading batch dimensions and uses float64
throughout, so repeated calls are bit-reproducible.  Conventions:

- a pose is (x, y, heading) with heading in radians;
- a rectangle is a pose plus half extents (half_length along heading,
  half_width across it);
- polygons are (E, 2) vertex arrays, implicitly closed, CCW for areas > 0;
- polylines are (M, 2) vertex arrays with M >= 2.
"""

from __future__ import annotations

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angle(theta):
    """Normalize angles into (-pi, pi]; values already in range pass through
    bit-exactly."""
    theta = np.asarray(theta, dtype=float)
    wrapped = np.pi - np.mod(np.pi - theta, TWO_PI)
    return np.where((theta > -np.pi) & (theta <= np.pi), theta, wrapped)


def rect_corners(poses, half_length, half_width):
    """Corners of oriented rectangles.

    poses: (..., 3) array of (x, y, heading).  Returns (..., 4, 2) corners in
    order front-left, front-right, rear-right, rear-left.
    """
    poses = np.asarray(poses, dtype=float)
    c = np.cos(poses[..., 2])
    s = np.sin(poses[..., 2])
    # body-frame corner offsets, one row per corner
    lx = np.array([half_length, half_length, -half_length, -half_length])
    wy = np.array([half_width, -half_width, -half_width, half_width])
    x = poses[..., 0:1] + lx * c[..., None] - wy * s[..., None]
    y = poses[..., 1:2] + lx * s[..., None] + wy * c[..., None]
    return np.stack([x, y], axis=-1)


def rects_overlap(poses_a, dims_a, poses_b, dims_b):
    """Separating-axis overlap test for pairs of oriented rectangles.

    poses_a/poses_b broadcast against each other over leading dims; dims are
    (half_length, half_width) scalars or arrays broadcasting likewise.
    Touching rectangles (zero gap on some axis) count as overlapping.
    """
    poses_a = np.asarray(poses_a, dtype=float)
    poses_b = np.asarray(poses_b, dtype=float)
    la, wa = dims_a
    lb, wb = dims_b
    ca, sa = np.cos(poses_a[..., 2]), np.sin(poses_a[..., 2])
    cb, sb = np.cos(poses_b[..., 2]), np.sin(poses_b[..., 2])
    dx = poses_b[..., 0] - poses_a[..., 0]
    dy = poses_b[..., 1] - poses_a[..., 1]
    # |cos/sin| of the relative orientation give the projected extents of one
    # rectangle onto the other's axes
    rc = np.abs(ca * cb + sa * sb)
    rs = np.abs(ca * sb - sa * cb)
    sep = (np.abs(ca * dx + sa * dy) > la + rc * lb + rs * wb)
    sep |= np.abs(sa * dx - ca * dy) > wa + rs * lb + rc * wb
    sep |= np.abs(cb * dx + sb * dy) > lb + rc * la + rs * wa
    sep |= np.abs(sb * dx - cb * dy) > wb + rs * la + rc * wa
    return ~sep


def points_in_polygon(points, polygon):
    """Crossing-number inside test, vectorized over points.

    points: (..., 2); polygon: (E, 2) simple, implicitly closed.  Points on
    the boundary are classified by the half-open edge rule, which is
    deterministic but not guaranteed inclusive; callers needing an inclusive
    boundary should combine with `points_polygon_clearance`.
    """
    points = np.asarray(points, dtype=float)
    poly = np.asarray(polygon, dtype=float)
    px = points[..., 0][..., None]
    py = points[..., 1][..., None]
    x1, y1 = poly[:, 0], poly[:, 1]
    x2, y2 = np.roll(poly[:, 0], -1), np.roll(poly[:, 1], -1)
    dy = y2 - y1
    # guard horizontal edges; they never satisfy the straddle condition
    dy_safe = np.where(dy == 0.0, 1.0, dy)
    straddle = (y1 > py) != (y2 > py)
    x_cross = x1 + (py - y1) * (x2 - x1) / dy_safe
    crossings = straddle & (px < x_cross)
    return np.sum(crossings, axis=-1) % 2 == 1


def polygon_area(polygon):
    """Signed shoelace area; positive for CCW."""
    p = np.asarray(polygon, dtype=float)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


def polygon_self_intersects(polygon):
    """True if any two non-adjacent edges of the closed polygon cross."""
    p = np.asarray(polygon, dtype=float)
    n = len(p)
    a = p
    b = np.roll(p, -1, axis=0)
    i_idx, j_idx = np.triu_indices(n, k=2)
    # wrap-around: last edge is adjacent to the first
    keep = ~((i_idx == 0) & (j_idx == n - 1))
    i_idx, j_idx = i_idx[keep], j_idx[keep]
    p1, p2 = a[i_idx], b[i_idx]
    p3, p4 = a[j_idx], b[j_idx]
    d1 = _cross(p4 - p3, p1 - p3)
    d2 = _cross(p4 - p3, p2 - p3)
    d3 = _cross(p2 - p1, p3 - p1)
    d4 = _cross(p2 - p1, p4 - p1)
    proper = ((d1 > 0) != (d2 > 0)) & ((d3 > 0) != (d4 > 0))
    return bool(np.any(proper))


def _cross(u, v):
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def points_segments_distance(points, seg_a, seg_b):
    """Distance from each point to each segment.

    points: (N, 2); seg_a/seg_b: (E, 2).  Returns (N, E).
    """
    points = np.asarray(points, dtype=float)
    seg_a = np.asarray(seg_a, dtype=float)
    seg_b = np.asarray(seg_b, dtype=float)
    d = seg_b - seg_a  # (E, 2)
    len2 = np.sum(d * d, axis=1)
    len2_safe = np.where(len2 == 0.0, 1.0, len2)
    rel = points[:, None, :] - seg_a[None, :, :]  # (N, E, 2)
    t = np.clip(np.sum(rel * d[None, :, :], axis=2) / len2_safe, 0.0, 1.0)
    t = np.where(len2[None, :] == 0.0, 0.0, t)
    closest = seg_a[None, :, :] + t[..., None] * d[None, :, :]
    diff = points[:, None, :] - closest
    return np.hypot(diff[..., 0], diff[..., 1])


def points_polygon_clearance(points, polygon):
    """Signed distance to the polygon boundary: positive inside, negative outside."""
    points = np.asarray(points, dtype=float)
    poly = np.asarray(polygon, dtype=float)
    flat = points.reshape(-1, 2)
    dist = points_segments_distance(flat, poly, np.roll(poly, -1, axis=0)).min(axis=1)
    inside = points_in_polygon(flat, poly)
    signed = np.where(inside, dist, -dist)
    return signed.reshape(points.shape[:-1])


def segments_segments_distance(a1, a2, b1, b2):
    """Minimum distance between two segment sets, elementwise broadcast.

    All inputs (..., 2).  Intersecting segments have distance 0.
    """
    a1, a2 = np.asarray(a1, dtype=float), np.asarray(a2, dtype=float)
    b1, b2 = np.asarray(b1, dtype=float), np.asarray(b2, dtype=float)
    d1 = _cross(b2 - b1, a1 - b1)
    d2 = _cross(b2 - b1, a2 - b1)
    d3 = _cross(a2 - a1, b1 - a1)
    d4 = _cross(a2 - a1, b2 - a1)
    crossing = ((d1 > 0) != (d2 > 0)) & ((d3 > 0) != (d4 > 0))
    dists = np.stack(
        [
            _point_segment_distance(a1, b1, b2),
            _point_segment_distance(a2, b1, b2),
            _point_segment_distance(b1, a1, a2),
            _point_segment_distance(b2, a1, a2),
        ],
        axis=-1,
    ).min(axis=-1)
    return np.where(crossing, 0.0, dists)


def _point_segment_distance(p, a, b):
    d = b - a
    len2 = np.sum(d * d, axis=-1)
    len2_safe = np.where(len2 == 0.0, 1.0, len2)
    t = np.clip(np.sum((p - a) * d, axis=-1) / len2_safe, 0.0, 1.0)
    t = np.where(len2 == 0.0, 0.0, t)
    diff = p - (a + t[..., None] * d)
    return np.hypot(diff[..., 0], diff[..., 1])


def rects_clearance(poses_a, dims_a, poses_b, dims_b):
    """Signed clearance between rectangle pairs: Euclidean gap when separated,
    negative penetration depth (SAT estimate) when overlapping.

    poses broadcast over leading dims like `rects_overlap`.
    """
    poses_a = np.asarray(poses_a, dtype=float)
    poses_b = np.asarray(poses_b, dtype=float)
    poses_a, poses_b = np.broadcast_arrays(poses_a, poses_b)
    overlap = rects_overlap(poses_a, dims_a, poses_b, dims_b)
    ca = rect_corners(poses_a, *dims_a)  # (..., 4, 2)
    cb = rect_corners(poses_b, *dims_b)
    ea1 = ca
    ea2 = np.roll(ca, -1, axis=-2)
    eb1 = cb
    eb2 = np.roll(cb, -1, axis=-2)
    # all 16 edge pairs
    d = segments_segments_distance(
        ea1[..., :, None, :], ea2[..., :, None, :], eb1[..., None, :, :], eb2[..., None, :, :]
    )
    gap = d.min(axis=(-1, -2))
    pen = _sat_penetration(poses_a, dims_a, poses_b, dims_b)
    return np.where(overlap, -pen, gap)


def _sat_penetration(poses_a, dims_a, poses_b, dims_b):
    la, wa = dims_a
    lb, wb = dims_b
    ca, sa = np.cos(poses_a[..., 2]), np.sin(poses_a[..., 2])
    cb, sb = np.cos(poses_b[..., 2]), np.sin(poses_b[..., 2])
    dx = poses_b[..., 0] - poses_a[..., 0]
    dy = poses_b[..., 1] - poses_a[..., 1]
    rc = np.abs(ca * cb + sa * sb)
    rs = np.abs(ca * sb - sa * cb)
    g1 = la + rc * lb + rs * wb - np.abs(ca * dx + sa * dy)
    g2 = wa + rs * lb + rc * wb - np.abs(sa * dx - ca * dy)
    g3 = lb + rc * la + rs * wa - np.abs(cb * dx + sb * dy)
    g4 = wb + rs * la + rc * wa - np.abs(sb * dx - cb * dy)
    return np.minimum(np.minimum(g1, g2), np.minimum(g3, g4))


def polyline_arclength(polyline):
    """Cumulative arc length at each vertex, starting at 0."""
    p = np.asarray(polyline, dtype=float)
    seg = np.hypot(*(np.diff(p, axis=0).T))
    return np.concatenate([[0.0], np.cumsum(seg)])


def resample_polyline(polyline, spacing):
    """Resample a polyline at ~uniform arc-length spacing, keeping endpoints."""
    p = np.asarray(polyline, dtype=float)
    s = polyline_arclength(p)
    total = s[-1]
    n = max(2, int(np.ceil(total / spacing)) + 1)
    si = np.linspace(0.0, total, n)
    x = np.interp(si, s, p[:, 0])
    y = np.interp(si, s, p[:, 1])
    return np.stack([x, y], axis=1)


def project_to_polyline(points, polyline):
    """Project points onto a polyline.

    Returns (arc, lateral): arc length of the closest point measured along the
    polyline and the signed lateral offset (positive to the left of the local
    direction of travel).  points: (..., 2).
    """
    points = np.asarray(points, dtype=float)
    line = np.asarray(polyline, dtype=float)
    flat = points.reshape(-1, 2)
    a = line[:-1]
    b = line[1:]
    d = b - a
    len2 = np.sum(d * d, axis=1)
    len2_safe = np.where(len2 == 0.0, 1.0, len2)
    rel = flat[:, None, :] - a[None, :, :]
    t = np.clip(np.sum(rel * d[None, :, :], axis=2) / len2_safe, 0.0, 1.0)
    closest = a[None, :, :] + t[..., None] * d[None, :, :]
    diff = flat[:, None, :] - closest
    dist2 = np.sum(diff * diff, axis=2)
    seg = np.argmin(dist2, axis=1)
    rows = np.arange(len(flat))
    t_best = t[rows, seg]
    base_s = polyline_arclength(line)[:-1]
    arc = base_s[seg] + t_best * np.sqrt(len2[seg])
    dvec = d[seg]
    rvec = flat - (a[seg] + t_best[:, None] * dvec)
    lateral = (dvec[:, 0] * rvec[:, 1] - dvec[:, 1] * rvec[:, 0]) / np.sqrt(len2_safe[seg])
    shape = points.shape[:-1]
    return arc.reshape(shape), lateral.reshape(shape)


def transform_to_world(poses, frame_pose):
    """Map poses expressed in an ego frame into the world frame.

    frame_pose is the (x, y, heading) of the ego frame origin in world
    coordinates.  poses: (..., 3).
    """
    poses = np.asarray(poses, dtype=float)
    fx, fy, fh = frame_pose
    c, s = np.cos(fh), np.sin(fh)
    out = np.empty_like(poses)
    out[..., 0] = fx + poses[..., 0] * c - poses[..., 1] * s
    out[..., 1] = fy + poses[..., 0] * s + poses[..., 1] * c
    out[..., 2] = wrap_angle(poses[..., 2] + fh)
    return out


def transform_to_frame(poses, frame_pose):
    """Inverse of `transform_to_world`."""
    poses = np.asarray(poses, dtype=float)
    fx, fy, fh = frame_pose
    c, s = np.cos(fh), np.sin(fh)
    dx = poses[..., 0] - fx
    dy = poses[..., 1] - fy
    out = np.empty_like(poses)
    out[..., 0] = dx * c + dy * s
    out[..., 1] = -dx * s + dy * c
    out[..., 2] = wrap_angle(poses[..., 2] - fh)
    return out
