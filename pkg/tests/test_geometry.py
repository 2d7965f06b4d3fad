"""Projection, circle/line fitting, and drift-step checks.

DERIVED values come from independent oracles: projection roundtrips,
constructed circles, Monte Carlo noise statistics, and a brute-force
discretized nearest-arc search for drift_step.
"""

import numpy as np
import pytest

from quest import geometry as geo


def make_camera(width=64, height=64, f=80.0, eye=(0.0, -2.0, 0.5)):
    rot, trans = geo.look_at(np.array(eye), np.array([0.0, 0.0, 0.5]))
    return geo.Camera(fx=f, fy=f, cx=width / 2, cy=height / 2,
                      width=width, height=height, rot=rot, trans=trans)


# ---------------------------------------------------------------------------
# projection


def test_project_principal_point():
    cam = geo.Camera(fx=50, fy=50, cx=32, cy=32, width=64, height=64)
    uv, depth = geo.project(np.array([0.0, 0.0, 3.0]), cam)
    np.testing.assert_allclose(uv, [0.5, 0.5])
    assert depth == 3.0


def test_project_depth_scaling():
    cam = geo.Camera(fx=50, fy=50, cx=32, cy=32, width=64, height=64)
    uv1, _ = geo.project(np.array([0.2, 0.1, 1.0]), cam)
    uv2, _ = geo.project(np.array([0.2, 0.1, 2.0]), cam)
    off1 = uv1 - 0.5
    off2 = uv2 - 0.5
    np.testing.assert_allclose(off2, off1 / 2, atol=1e-15)


def test_project_behind_camera_raises():
    cam = geo.Camera(fx=50, fy=50, cx=32, cy=32, width=64, height=64)
    with pytest.raises(geo.GeometryError):
        geo.project(np.array([0.0, 0.0, -1.0]), cam)


def test_backproject_identity_pose():
    cam = geo.Camera(fx=50, fy=50, cx=32, cy=32, width=64, height=64)
    out = geo.backproject(np.array([0.5, 0.5]), 1.0, cam)
    np.testing.assert_allclose(out, [0.0, 0.0, 1.0], atol=1e-15)


def test_backproject_rejects_nonpositive_depth():
    cam = geo.Camera(fx=50, fy=50, cx=32, cy=32, width=64, height=64)
    with pytest.raises(geo.GeometryError):
        geo.backproject(np.array([0.5, 0.5]), 0.0, cam)


def test_project_backproject_roundtrip():
    cam = make_camera()
    rng = np.random.default_rng(3)
    pts = rng.uniform(-0.4, 0.4, (1000, 3)) + [0.0, 0.0, 0.5]
    uv, depth = geo.project(pts, cam)
    back = geo.backproject(uv, depth, cam)
    assert np.max(np.abs(back - pts)) < 1e-9


# ---------------------------------------------------------------------------
# manifold fitting


def circle_points(center, axis, radius, angles, ref=None):
    axis = np.asarray(axis) / np.linalg.norm(axis)
    if ref is None:
        ref = geo._plane_reference(axis)
    e2 = np.cross(axis, ref)
    return np.asarray(center) + radius * (
        np.cos(angles)[:, None] * ref + np.sin(angles)[:, None] * e2
    )


def test_fit_exact_circle():
    angles = np.linspace(0.3, 2.1, 12)
    pts = circle_points([0.2, -0.1, 0.5], [1.0, 2.0, 0.5], 0.35, angles)
    fit = geo.fit_manifold(pts)
    assert fit.kind == "circle"
    assert fit.residual_rms < 1e-8
    assert abs(fit.radius - 0.35) < 1e-8
    np.testing.assert_allclose(fit.center, [0.2, -0.1, 0.5], atol=1e-8)


def test_fit_collinear_falls_back_to_line():
    t = np.linspace(0.0, 1.0, 8)
    pts = np.outer(t, [1.0, 2.0, -0.5]) + [0.1, 0.1, 0.1]
    fit = geo.fit_manifold(pts)
    assert fit.kind == "line"
    assert fit.residual_rms < 1e-9


def test_fit_requires_four_valid_points():
    with pytest.raises(geo.GeometryError):
        geo.fit_manifold(np.zeros((6, 3)), valid=[True, True, True, False, False, False])


def test_fit_noisy_circle_residual_band():
    # Monte Carlo oracle: per-axis Gaussian noise sigma leaves an rms
    # residual near sigma*sqrt(2) (two constrained local directions);
    # the 50-seed mean must sit inside [0.5, 1.5]*sigma.
    sigma = 0.01
    angles = np.linspace(0.0, 2 * np.pi, 30, endpoint=False)
    clean = circle_points([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], 0.5, angles)
    residuals = []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        fit = geo.fit_manifold(clean + rng.normal(0, sigma, clean.shape))
        assert fit.kind == "circle"
        residuals.append(fit.residual_rms)
    mean_rms = np.mean(residuals)
    assert 0.5 * sigma < mean_rms < 1.5 * sigma


def test_fit_rigid_transform_invariance():
    rng = np.random.default_rng(11)
    angles = np.sort(rng.uniform(0, 2, 10))
    pts = circle_points([0.1, 0.2, 0.3], [0.0, 1.0, 0.3], 0.4, angles)
    pts += rng.normal(0, 0.005, pts.shape)
    fit0 = geo.fit_manifold(pts)
    rot = geo.rodrigues(np.array([0.3, 0.5, 0.8]) / np.linalg.norm([0.3, 0.5, 0.8]), 1.2)
    moved = pts @ rot.T + np.array([3.0, -1.0, 2.0])
    fit1 = geo.fit_manifold(moved)
    assert abs(fit0.residual_rms - fit1.residual_rms) < 1e-9


# ---------------------------------------------------------------------------
# drift_step


def brute_force_drift(x_t, x_prev, fit, n_samples=10_000):
    """Discretized oracle: nearest manifold point to x_prev by brute-force
    scan refined with ternary search, advanced by the median step using
    raw rotations/translations (independent of the analytic projection)."""
    if fit.kind == "circle":
        ref = geo._plane_reference(fit.axis)
        e2 = np.cross(fit.axis, ref)

        def at(theta):
            return fit.center + fit.radius * (np.cos(theta) * ref + np.sin(theta) * e2)

        thetas = np.linspace(-np.pi, np.pi, n_samples, endpoint=False)
        d = np.linalg.norm(at(thetas[:, None]).reshape(n_samples, 3) - x_prev, axis=1)
        best = thetas[np.argmin(d)]
        lo, hi = best - 2 * np.pi / n_samples, best + 2 * np.pi / n_samples
        for _ in range(80):
            m1, m2 = lo + (hi - lo) / 3, hi - (hi - lo) / 3
            if np.linalg.norm(at(m1) - x_prev) < np.linalg.norm(at(m2) - x_prev):
                hi = m2
            else:
                lo = m1
        proj = at((lo + hi) / 2)
        target = fit.center + geo.rodrigues(fit.axis, fit.median_step) @ (proj - fit.center)
        return float(np.linalg.norm(x_t - target))
    # line
    span = np.linspace(-10, 10, n_samples)
    cand = fit.center + span[:, None] * fit.axis
    best = span[np.argmin(np.linalg.norm(cand - x_prev, axis=1))]
    lo, hi = best - 20 / n_samples, best + 20 / n_samples
    for _ in range(80):
        m1, m2 = lo + (hi - lo) / 3, hi - (hi - lo) / 3
        d1 = np.linalg.norm(fit.center + m1 * fit.axis - x_prev)
        d2 = np.linalg.norm(fit.center + m2 * fit.axis - x_prev)
        lo, hi = (lo, m2) if d1 < d2 else (m1, hi)
    proj = fit.center + ((lo + hi) / 2 + fit.median_step) * fit.axis
    return float(np.linalg.norm(x_t - proj))


def arc_fit(step=0.15, n=9):
    angles = np.arange(n) * step
    pts = circle_points([0.1, 0.0, 0.4], [0.2, -0.3, 1.0], 0.3, angles)
    return pts, geo.fit_manifold(pts)


def test_drift_step_zero_on_continuation():
    pts, fit = arc_fit()
    d, continued = geo.drift_step(pts[5], pts[4], fit)
    assert continued
    assert d < 1e-9


def test_drift_step_lower_bounded_by_normal_offset():
    pts, fit = arc_fit()
    offset = 0.07
    displaced = pts[5] + offset * fit.axis
    d, _ = geo.drift_step(displaced, pts[4], fit)
    assert d >= offset - 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_drift_step_matches_discretized_oracle(seed):
    rng = np.random.default_rng(seed)
    pts, fit = arc_fit(step=0.1 + 0.05 * rng.random())
    x_prev = pts[4] + rng.normal(0, 0.03, 3)
    x_t = pts[5] + rng.normal(0, 0.03, 3)
    d, continued = geo.drift_step(x_t, x_prev, fit)
    assert continued
    assert abs(d - brute_force_drift(x_t, x_prev, fit)) < 1e-6


def test_drift_step_line_matches_oracle():
    t = np.linspace(0, 1, 8)
    pts = np.outer(t, [0.3, 0.1, 0.8]) + [0.0, 0.2, 0.0]
    fit = geo.fit_manifold(pts)
    rng = np.random.default_rng(5)
    x_prev = pts[3] + rng.normal(0, 0.02, 3)
    x_t = pts[4] + rng.normal(0, 0.02, 3)
    d, continued = geo.drift_step(x_t, x_prev, fit)
    assert continued
    assert abs(d - brute_force_drift(x_t, x_prev, fit)) < 1e-6


def test_drift_step_without_step_estimate_flags():
    pts, fit = arc_fit()
    fit.median_step = None
    d, continued = geo.drift_step(pts[5], pts[4], fit)
    assert not continued
    assert abs(d - geo.point_to_manifold_distance(fit, pts[5])) < 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_drift_at_least_point_to_manifold(seed):
    rng = np.random.default_rng(seed)
    pts, fit = arc_fit()
    x_t = pts[5] + rng.normal(0, 0.1, 3)
    d, _ = geo.drift_step(x_t, pts[4], fit)
    assert d >= geo.point_to_manifold_distance(fit, x_t) - 1e-12
