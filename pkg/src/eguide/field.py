"""Closed-form electrostatics for gapless planar electrode layouts.

A patch held at voltage V in an otherwise grounded z = 0 plane produces the
half-space potential phi(r) = V * Omega(r) / (2*pi), where Omega is the
solid angle the patch subtends at r.  For 2D strips this reduces to the
familiar arctan expression; for polygons the solid angle is evaluated by
fan triangulation and its gradient (hence E) by a closed-form line integral
around the polygon boundary.  The drive's time dependence enters only as a
global cos(Omega_drive * t + phase) factor (quasistatic approximation).
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .constants import TWO_PI
from .geometry import RF, PolygonLayout, StripLayout


# --- 2D strip closed forms ---------------------------------------------------

def _check_z_positive(z):
    if np.any(np.asarray(z) <= 0.0):
        raise ValueError("field evaluation requires z > 0 (above the electrode plane)")


def strip_potential(x, z, a, b, voltage=1.0):
    """Potential of the strip [a, b] at ``voltage`` in a grounded plane.

    phi(x, z) = V/pi * (arctan((b - x)/z) - arctan((a - x)/z)); harmonic for
    z > 0, -> V on the strip surface and -> 0 on the grounded remainder.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    _check_z_positive(z)
    return (voltage / math.pi) * (np.arctan2(b - x, z) - np.arctan2(a - x, z))


def strip_field(x, z, a, b, voltage=1.0):
    """In-plane field (Ex, Ez) of the strip [a, b]; analytic derivatives."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    _check_z_positive(z)
    db = z * z + (b - x) ** 2
    da = z * z + (a - x) ** 2
    ex = (voltage / math.pi) * (z / db - z / da)
    ez = (voltage / math.pi) * ((b - x) / db - (a - x) / da)
    return ex, ez


def strip_field_gradient(x, z, a, b, voltage=1.0):
    """Analytic field gradient (dEx/dx, dEx/dz) of the strip [a, b].

    The static field is curl-free and source-free above the plane, so the
    full tensor is symmetric and traceless: dEz/dx = dEx/dz and
    dEz/dz = -dEx/dx.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    _check_z_positive(z)
    ub = b - x
    ua = a - x
    db = z * z + ub * ub
    da = z * z + ua * ua
    dex_dx = (voltage / math.pi) * (2.0 * z * ub / db**2 - 2.0 * z * ua / da**2)
    dex_dz = (voltage / math.pi) * ((ub * ub - z * z) / db**2 - (ua * ua - z * z) / da**2)
    return dex_dx, dex_dz


# --- 3D rectangle and polygon closed forms ------------------------------------

def rect_potential(points, x0, x1, y0, y1, voltage=1.0):
    """Potential of the rectangle [x0,x1] x [y0,y1] in the grounded plane.

    Four-corner signed arctan (solid-angle) formula; -> V just above the
    rectangle interior, -> 0 just above the grounded remainder.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    _check_z_positive(pts[:, 2])
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    total = np.zeros(len(pts))
    for i, xi in enumerate((x0, x1)):
        for j, yj in enumerate((y0, y1)):
            dx = xi - x
            dy = yj - y
            r = np.sqrt(dx * dx + dy * dy + z * z)
            total += (-1.0) ** (i + j) * np.arctan2(dx * dy, z * r)
    out = (voltage / TWO_PI) * total
    return out if np.asarray(points).ndim > 1 else float(out[0])


def _fan_triangles(vertices):
    """(T, 3, 2) fan triangulation of a simple polygon around vertex 0."""
    v = np.asarray(vertices, dtype=float)
    t = len(v) - 2
    tri = np.empty((t, 3, 2))
    tri[:, 0] = v[0]
    tri[:, 1] = v[1:-1]
    tri[:, 2] = v[2:]
    return tri


def _solid_angle_triangles(tri, points):
    """Signed solid angle sum of triangles (T,3,2 in z=0) at points (M,3)."""
    pts = np.atleast_2d(points)
    # r_i: vectors from each point to each triangle vertex, shape (M, T, 3, 3)
    verts = np.concatenate([tri, np.zeros(tri.shape[:2] + (1,))], axis=-1)
    r = verts[None, :, :, :] - pts[:, None, None, :]
    n = np.linalg.norm(r, axis=-1)
    r1, r2, r3 = r[..., 0, :], r[..., 1, :], r[..., 2, :]
    n1, n2, n3 = n[..., 0], n[..., 1], n[..., 2]
    num = np.einsum("...i,...i->...", r1, np.cross(r2, r3))
    den = (
        n1 * n2 * n3
        + np.einsum("...i,...i->...", r1, r2) * n3
        + np.einsum("...i,...i->...", r2, r3) * n1
        + np.einsum("...i,...i->...", r3, r1) * n2
    )
    return np.sum(2.0 * np.arctan2(num, den), axis=1)


def polygon_potential(points, vertices, voltage=1.0):
    """Potential of a simple polygon patch in the grounded plane."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    _check_z_positive(pts[:, 2])
    omega = _solid_angle_triangles(_fan_triangles(vertices), pts)
    out = (voltage / TWO_PI) * np.abs(omega)
    return out if np.asarray(points).ndim > 1 else float(out[0])


def _edge_arrays(vertices):
    v = np.asarray(vertices, dtype=float)
    starts = np.concatenate([v, np.zeros((len(v), 1))], axis=1)
    ends = np.roll(starts, -1, axis=0)
    return starts, ends


def _grad_solid_angle_edges(starts, ends, points):
    """Gradient of the polygon solid angle at points (M,3) via the closed-form
    line integral around the boundary (edges given as (K,3) start/end)."""
    pts = np.atleast_2d(points)
    a = starts[None, :, :] - pts[:, None, :]
    b = ends[None, :, :] - pts[:, None, :]
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    cross = np.cross(a, b)
    denom = na * nb * (na * nb + np.einsum("...i,...i->...", a, b))
    coef = (na + nb) / denom
    return np.einsum("mk,mki->mi", coef, cross)


def polygon_field(points, vertices, voltage=1.0):
    """Field E = -grad(phi) of a polygon patch, closed form via edge sums.

    For the counter-clockwise (positively oriented) polygons produced by the
    geometry module the gradient of the solid angle above the plane is the
    negative of the boundary line integral, hence E = +V/(2*pi) * integral.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    _check_z_positive(pts[:, 2])
    starts, ends = _edge_arrays(vertices)
    grad = _grad_solid_angle_edges(starts, ends, pts)
    e = (voltage / TWO_PI) * grad
    return e if np.asarray(points).ndim > 1 else e[0]


# --- layout evaluators ---------------------------------------------------------

class StripSetEvaluator:
    """Unit-amplitude spatial field of a 2D strip layout (rf strips at 1 V)."""

    def __init__(self, layout):
        rails = layout.rf_strips
        self._a = np.array([s.x_min for s in rails])
        self._b = np.array([s.x_max for s in rails])

    def unit_potential_xz(self, x, z):
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        _check_z_positive(z)
        phi = np.zeros(np.broadcast(x, z).shape)
        for a, b in zip(self._a, self._b):
            phi = phi + (1.0 / math.pi) * (np.arctan2(b - x, z) - np.arctan2(a - x, z))
        return phi

    def unit_field_xz(self, x, z):
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        _check_z_positive(z)
        shape = np.broadcast(x, z).shape
        ex = np.zeros(shape)
        ez = np.zeros(shape)
        for a, b in zip(self._a, self._b):
            ub = b - x
            ua = a - x
            db = z * z + ub * ub
            da = z * z + ua * ua
            ex = ex + (1.0 / math.pi) * (z / db - z / da)
            ez = ez + (1.0 / math.pi) * (ub / db - ua / da)
        return ex, ez

    def unit_gradient_xz(self, x, z):
        """(dEx/dx, dEx/dz); tensor completed by symmetry and zero trace."""
        gxx = np.zeros(np.broadcast(np.asarray(x), np.asarray(z)).shape)
        gxz = np.zeros_like(gxx)
        for a, b in zip(self._a, self._b):
            dxx, dxz = strip_field_gradient(x, z, a, b)
            gxx = gxx + dxx
            gxz = gxz + dxz
        return gxx, gxz

    # 3-vector interface shared with the polygon evaluator (y is ignored
    # for strips: the cross-section is translation invariant).
    def unit_potential(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return self.unit_potential_xz(pts[:, 0], pts[:, 2])

    def unit_field(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ex, ez = self.unit_field_xz(pts[:, 0], pts[:, 2])
        return np.stack([ex, np.zeros_like(ex), ez], axis=-1)


class PolygonSetEvaluator:
    """Unit-amplitude spatial field of a polygon layout (rf patches at 1 V)."""

    def __init__(self, layout, chunk=2048):
        rf = layout.rf_patches
        if not rf:
            raise ValueError("layout has no rf patches")
        tri = [_fan_triangles(p.vertices) for p in rf]
        self._triangles = np.concatenate(tri, axis=0)
        starts = []
        ends = []
        for p in rf:
            s, e = _edge_arrays(p.vertices)
            starts.append(s)
            ends.append(e)
        self._starts = np.concatenate(starts, axis=0)
        self._ends = np.concatenate(ends, axis=0)
        self._chunk = int(chunk)

    def unit_potential(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        _check_z_positive(pts[:, 2])
        out = np.empty(len(pts))
        for lo in range(0, len(pts), self._chunk):
            sl = slice(lo, lo + self._chunk)
            out[sl] = _solid_angle_triangles(self._triangles, pts[sl]) / TWO_PI
        return np.abs(out)

    def unit_field(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        _check_z_positive(pts[:, 2])
        out = np.empty((len(pts), 3))
        for lo in range(0, len(pts), self._chunk):
            sl = slice(lo, lo + self._chunk)
            out[sl] = _grad_solid_angle_edges(self._starts, self._ends, pts[sl]) / TWO_PI
        return out


class SyntheticQuadrupole:
    """Analytically ideal 2D quadrupole used to cross-check the numeric
    machinery against closed-form relations.

    Per volt of applied amplitude the field is u / R^2 with
    u = (x, 0, -(z - height)) inside the core radius R, i.e. a pure linear
    quadrupole whose gradient is 1/R^2; outside the core it decays as
    R / r^2 along the same direction pattern, which caps the pseudopotential
    exactly at radius R (the ideal-quadrupole depth).  ``unit_potential`` is
    only meaningful inside the core.
    """

    def __init__(self, core_radius, height=None):
        if core_radius <= 0:
            raise ValueError("core radius must be > 0")
        self.core_radius = float(core_radius)
        self.height = float(core_radius if height is None else height)
        self.length_scale = self.height

    def _uvr(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ux = pts[:, 0]
        uz = -(pts[:, 2] - self.height)
        r = np.hypot(ux, uz)
        return ux, uz, r

    def unit_field(self, points):
        ux, uz, r = self._uvr(points)
        rr = self.core_radius
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(r <= rr, 1.0 / rr**2, rr / np.where(r > 0, r, 1.0) ** 3)
        return np.stack([ux * scale, np.zeros_like(ux), uz * scale], axis=-1)

    def unit_field_xz(self, x, z):
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        ux = x
        uz = -(z - self.height)
        r = np.hypot(ux, uz)
        rr = self.core_radius
        scale = np.where(r <= rr, 1.0 / rr**2, rr / np.where(r > 0, r, 1.0) ** 3)
        return ux * scale, uz * scale

    def unit_potential(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        x = pts[:, 0]
        zp = pts[:, 2] - self.height
        return -0.5 * (x**2 - zp**2) / self.core_radius**2


def evaluator_for(layout):
    """Unit-field evaluator appropriate for the layout type.

    Any object already exposing ``unit_potential``/``unit_field`` (for
    example a synthetic test field) is passed through unchanged.
    """
    if isinstance(layout, StripLayout):
        return StripSetEvaluator(layout)
    if isinstance(layout, PolygonLayout):
        return PolygonSetEvaluator(layout)
    if hasattr(layout, "unit_field") and hasattr(layout, "unit_potential"):
        return layout
    raise TypeError(f"no field evaluator for layout type {type(layout).__name__}")


# --- probing -------------------------------------------------------------------

@dataclass(frozen=True)
class FieldProbe:
    """Potential, field, and (optionally) the field gradient at one point."""

    potential: float
    field: np.ndarray
    gradient: np.ndarray = None


def _jacobian_fd(unit_field, point, h):
    """Central-difference Jacobian dE_i/dx_j of the unit field."""
    probes = []
    for j in range(3):
        step = np.zeros(3)
        step[j] = h
        probes.append(point + step)
        probes.append(point - step)
    e = unit_field(np.array(probes))
    jac = np.empty((3, 3))
    for j in range(3):
        jac[:, j] = (e[2 * j] - e[2 * j + 1]) / (2.0 * h)
    return jac


def field_jacobian(evaluator, point, h, richardson_tol=1e-3):
    """Richardson-checked central-difference Jacobian of the unit field.

    Evaluates at steps h and h/2 and returns the h/2 result after verifying
    the two agree to ``richardson_tol`` relative (scaled by the largest
    entry), which guards against a badly chosen step.
    """
    point = np.asarray(point, dtype=float)
    j1 = _jacobian_fd(evaluator.unit_field, point, h)
    j2 = _jacobian_fd(evaluator.unit_field, point, 0.5 * h)
    scale = max(np.max(np.abs(j2)), 1e-300)
    if np.max(np.abs(j1 - j2)) > richardson_tol * scale:
        raise ValueError("field gradient differencing failed its Richardson consistency check")
    return j2


def layout_field(layout, point, drive, t=0.0, with_gradient=False, gradient_step=None):
    """Instantaneous potential and field of a driven layout at one point.

    The spatial part is the superposition of the per-patch closed forms with
    rf patches at the drive amplitude and grounded patches at zero; the
    instantaneous value is the spatial part times cos(Omega t + phase0).

    Parameters
    ----------
    layout : StripLayout or PolygonLayout
    point : (3,) array-like, strictly above the electrode plane
    drive : DriveParams
    t : float
    with_gradient : bool
        Also evaluate the field-gradient tensor: analytic for 2D strip
        layouts, Richardson-checked central differences (default step
        1e-4 times the probe height) for polygon layouts.

    Returns
    -------
    FieldProbe
    """
    point = np.asarray(point, dtype=float).reshape(3)
    _check_z_positive(point[2])
    ev = evaluator_for(layout)
    factor = drive.amplitude_v * drive.instantaneous_factor(t)
    phi = float(ev.unit_potential(point[None, :])[0]) * factor
    e = ev.unit_field(point[None, :])[0] * factor
    grad = None
    if with_gradient:
        if isinstance(ev, StripSetEvaluator):
            gxx, gxz = ev.unit_gradient_xz(point[0], point[2])
            grad = np.array([
                [float(gxx), 0.0, float(gxz)],
                [0.0, 0.0, 0.0],
                [float(gxz), 0.0, -float(gxx)],
            ]) * factor
        else:
            h = gradient_step if gradient_step is not None else 1e-4 * point[2]
            grad = field_jacobian(ev, point, h) * factor
    return FieldProbe(potential=phi, field=e, gradient=grad)


FIELD_MAP_HEADER = ["x", "y", "z", "phi", "Ex", "Ey", "Ez"]


def write_field_map(fp, layout, drive, points, t=0.0):
    """Write a CSV field map (SI columns x,y,z,phi,Ex,Ey,Ez) at time t."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    ev = evaluator_for(layout)
    factor = drive.amplitude_v * drive.instantaneous_factor(t)
    phi = ev.unit_potential(pts) * factor
    e = ev.unit_field(pts) * factor
    writer = csv.writer(fp)
    writer.writerow(FIELD_MAP_HEADER)
    for p, v, row in zip(pts, phi, e):
        writer.writerow([repr(float(c)) for c in (*p, v, *row)])
