"""Projective lifting, kinematic-manifold fitting, and per-step drift.

Pinhole projection works in normalized [0,1]^2 image coordinates. Manifold
fits recover the circle (revolute) or line (prismatic) a tracked point
moves on; drift is the distance between a point and the manifold position
extrapolated from its predecessor by the window's median parameter step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GeometryError(Exception):
    pass


def rodrigues(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rotation matrix for a rotation of ``angle`` radians about a unit axis."""
    axis = np.asarray(axis, dtype=np.float64)
    kx, ky, kz = axis
    k_cross = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    return (
        np.eye(3)
        + np.sin(angle) * k_cross
        + (1.0 - np.cos(angle)) * (k_cross @ k_cross)
    )


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> tuple:
    """World->camera rotation and translation for a camera at ``eye``
    looking toward ``target`` (camera z forward, y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])  # rows: camera axes in world coords
    return rot, -rot @ eye


@dataclass
class Camera:
    """Static pinhole camera: intrinsics in pixels, world->camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        self.rot = np.asarray(self.rot, dtype=np.float64)
        self.trans = np.asarray(self.trans, dtype=np.float64)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rot.T + self.trans

    def to_world(self, points_cam: np.ndarray) -> np.ndarray:
        return (np.asarray(points_cam) - self.trans) @ self.rot


def project(point: np.ndarray, cam: Camera, eps: float = 1e-9):
    """World point -> (normalized 2-point, depth). Supports (...,3) stacks.

    u = (fx*X/Z + cx)/W, v = (fy*Y/Z + cy)/H with Z the camera-frame depth.
    Raises if any point is at or behind the camera plane.
    """
    pc = cam.to_camera(point)
    z = pc[..., 2]
    if np.any(z <= eps):
        raise GeometryError("point behind camera (z <= eps)")
    u = (cam.fx * pc[..., 0] / z + cam.cx) / cam.width
    v = (cam.fy * pc[..., 1] / z + cam.cy) / cam.height
    return np.stack([u, v], axis=-1), z


def backproject(uv: np.ndarray, depth, cam: Camera) -> np.ndarray:
    """Exact inverse of project: normalized 2-point + depth -> world point."""
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise GeometryError("backproject requires positive depth")
    x = (uv[..., 0] * cam.width - cam.cx) * depth / cam.fx
    y = (uv[..., 1] * cam.height - cam.cy) * depth / cam.fy
    return cam.to_world(np.stack([x, y, depth], axis=-1))


# ---------------------------------------------------------------------------
# manifold fitting


@dataclass
class ManifoldFit:
    """Circle or line fit of a short 3D trajectory window.

    Circle params: (center, axis, radius); line params: (point, direction).
    ``median_step`` is the median signed parameter advance per frame over
    consecutive valid pairs (radians for circles, meters for lines); None
    when fewer than two consecutive valid pairs exist.
    """

    kind: str  # "circle" | "line"
    center: np.ndarray
    axis: np.ndarray
    radius: float
    residual_rms: float
    median_step: float | None = None


def _fit_line(points: np.ndarray) -> ManifoldFit:
    centroid = points.mean(axis=0)
    centered = points - centroid
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    direction = vt[0]
    along = centered @ direction
    perp = centered - np.outer(along, direction)
    rms = float(np.sqrt(np.mean(np.sum(perp**2, axis=1))))
    return ManifoldFit("line", centroid, direction, 0.0, rms)


def _fit_circle(points: np.ndarray) -> ManifoldFit | None:
    centroid = points.mean(axis=0)
    centered = points - centroid
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    normal = vt[2]
    e1, e2 = vt[0], vt[1]
    x = centered @ e1
    y = centered @ e2
    off_plane = centered @ normal

    # Kasa algebraic fit: 2*a*x + 2*b*y + c = x^2 + y^2
    design = np.stack([2 * x, 2 * y, np.ones_like(x)], axis=1)
    rhs = x**2 + y**2
    sol, *_ = np.linalg.lstsq(design, rhs, rcond=None)
    a, b, c = sol
    r_sq = c + a**2 + b**2
    if not np.isfinite(r_sq) or r_sq <= 0:
        return None
    r = float(np.sqrt(r_sq))

    # one Gauss-Newton step on (a, b, r) for the geometric residual
    dx, dy = x - a, y - b
    dist = np.hypot(dx, dy)
    if np.any(dist < 1e-12):
        return None
    res = dist - r
    jac = np.stack([-dx / dist, -dy / dist, -np.ones_like(dist)], axis=1)
    delta, *_ = np.linalg.lstsq(jac, -res, rcond=None)
    a2, b2, r2 = a + delta[0], b + delta[1], r + delta[2]
    if np.isfinite(r2) and r2 > 0:
        new_res = np.hypot(x - a2, y - b2) - r2
        if np.sum(new_res**2) <= np.sum(res**2):
            a, b, r, res = a2, b2, float(r2), new_res

    center = centroid + a * e1 + b * e2
    rms = float(np.sqrt(np.mean(res**2 + off_plane**2)))
    return ManifoldFit("circle", center, normal, r, rms)


def _param_of(fit: ManifoldFit, point: np.ndarray) -> float | None:
    """Manifold parameter of a point's projection (angle or arc-length)."""
    if fit.kind == "line":
        return float((point - fit.center) @ fit.axis)
    w = point - fit.center
    w_in = w - (w @ fit.axis) * fit.axis
    n = np.linalg.norm(w_in)
    if n < 1e-12:
        return None  # on the rotation axis: angle undefined
    # angle measured from a fixed reference direction in the circle plane
    ref = _plane_reference(fit.axis)
    e2 = np.cross(fit.axis, ref)
    return float(np.arctan2(w_in @ e2, w_in @ ref))


def _plane_reference(axis: np.ndarray) -> np.ndarray:
    helper = np.array([1.0, 0.0, 0.0])
    if abs(axis @ helper) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    ref = np.cross(axis, helper)
    return ref / np.linalg.norm(ref)


def manifold_point(fit: ManifoldFit, param: float) -> np.ndarray:
    """Point on the fitted manifold at the given parameter value."""
    if fit.kind == "line":
        return fit.center + param * fit.axis
    ref = _plane_reference(fit.axis)
    e2 = np.cross(fit.axis, ref)
    return fit.center + fit.radius * (np.cos(param) * ref + np.sin(param) * e2)


def point_to_manifold_distance(fit: ManifoldFit, point: np.ndarray) -> float:
    if fit.kind == "line":
        w = point - fit.center
        return float(np.linalg.norm(w - (w @ fit.axis) * fit.axis))
    w = point - fit.center
    h = w @ fit.axis
    w_in = w - h * fit.axis
    return float(np.hypot(np.linalg.norm(w_in) - fit.radius, h))


def _wrap_angle(a: np.ndarray) -> np.ndarray:
    return (a + np.pi) % (2 * np.pi) - np.pi


def fit_manifold(points: np.ndarray, valid=None) -> ManifoldFit:
    """Fit a circle or line to >= 4 valid points; pick the smaller residual.

    The joint type is never an input: collinear windows fall out as lines
    because their line residual vanishes while the circle fit degenerates.
    The fit also records the median per-frame parameter step used by
    drift_step for arc-length continuation.
    """
    points = np.asarray(points, dtype=np.float64)
    if valid is None:
        valid = np.ones(len(points), dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    sel = points[valid]
    if len(sel) < 4:
        raise GeometryError(f"manifold fit needs >= 4 valid points, got {len(sel)}")

    line = _fit_line(sel)
    circle = _fit_circle(sel)
    fit = line if circle is None or line.residual_rms <= circle.residual_rms else circle

    # median signed parameter step over consecutive valid frames
    idx = np.flatnonzero(valid)
    steps = []
    for i, j in zip(idx[:-1], idx[1:]):
        if j != i + 1:
            continue
        pi, pj = _param_of(fit, points[i]), _param_of(fit, points[j])
        if pi is None or pj is None:
            continue
        d = pj - pi
        if fit.kind == "circle":
            d = float(_wrap_angle(np.array(d)))
        steps.append(d)
    if steps:
        fit.median_step = float(np.median(steps))
    return fit


def drift_step(x_t: np.ndarray, x_prev: np.ndarray, fit: ManifoldFit):
    """Distance from x_t to the manifold's continuation of x_prev.

    Returns (distance_m, continued). The continuation target is the
    manifold point at x_prev's parameter advanced by fit.median_step; when
    no step estimate exists the plain point-to-manifold distance is
    returned with continued=False.
    """
    target = continuation_target(x_prev, fit)
    if target is None:
        return point_to_manifold_distance(fit, np.asarray(x_t)), False
    return float(np.linalg.norm(np.asarray(x_t) - target)), True


def continuation_target(x_prev: np.ndarray, fit: ManifoldFit):
    """Manifold point one median step ahead of x_prev, or None."""
    if fit.median_step is None:
        return None
    p = _param_of(fit, np.asarray(x_prev))
    if p is None:
        return None
    return manifold_point(fit, p + fit.median_step)
