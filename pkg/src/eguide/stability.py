"""Pseudopotential construction, trap characterization, and exact Mathieu
stability via Floquet monodromy.

The time-averaged (pseudo)potential of a particle with charge magnitude e in
the oscillating field E(r) cos(Omega t) is Phi = e^2 |E(r)|^2 / (4 m Omega^2);
it is independent of the drive phase and of the charge sign.  Quantities
derived here follow the planar-guide conventions:

    q   = sqrt(8) * omega / Omega = eta * 2 (e/m) V / (Omega^2 R^2)
    U   = u * e^2 V^2 / (4 m Omega^2 R^2)
    omega = q / sqrt(8) * Omega,  U_ideal = q/8 * V

with R the height of the field null above the plane, eta the transverse
frequency reduction relative to an ideal quadrupole, and u the corresponding
depth reduction.  The depth formula's denominator is 4m: that is the only
reading that reproduces the demonstrated guide's 41 meV depth from
u = 0.0079 at the quoted drive, and it is what this module implements.
"""

import math
from dataclasses import dataclass

import numpy as np

from .constants import EV, E_CHARGE, M_E, TWO_PI
from .field import evaluator_for
from .geometry import StripLayout


class UnconfinedLayoutError(RuntimeError):
    """No pseudopotential minimum exists above the layout."""


class OpenPotentialError(RuntimeError):
    """The on-axis saddle search left the trapping region without a maximum."""


@dataclass(frozen=True)
class TrapCharacterization:
    """Geometry-derived guide properties at a specific drive."""

    guide_height: float          # m, distance from the plane to the field null
    minimum_position: tuple      # m, 3-vector
    omega_1: float               # rad/s, transverse secular frequencies
    omega_2: float
    depth_ev: float              # eV, saddle minus minimum
    saddle_position: tuple       # m, 3-vector
    eta: float                   # transverse-frequency reduction factor
    u_factor: float              # depth reduction factor
    q: float                     # dimensionless stability parameter

    def __post_init__(self):
        # Both factors equal 1 for an ideal quadrupole and are smaller for
        # any planar layout.
        if not (0.0 < self.eta <= 1.0):
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        if not (0.0 < self.u_factor <= 1.0):
            raise ValueError(f"u must lie in (0, 1], got {self.u_factor}")

    @property
    def omega_mean(self):
        return math.sqrt(self.omega_1 * self.omega_2)

    def to_dict(self):
        return {
            "guide_height_m": self.guide_height,
            "minimum_position_m": list(self.minimum_position),
            "omega_1_rad_per_s": self.omega_1,
            "omega_2_rad_per_s": self.omega_2,
            "omega_1_over_2pi_MHz": self.omega_1 / TWO_PI / 1e6,
            "omega_2_over_2pi_MHz": self.omega_2 / TWO_PI / 1e6,
            "depth_eV": self.depth_ev,
            "depth_meV": 1e3 * self.depth_ev,
            "saddle_position_m": list(self.saddle_position),
            "eta": self.eta,
            "u_factor": self.u_factor,
            "q": self.q,
        }


class PseudoPotentialField:
    """Evaluator of the pseudopotential (in eV) of a driven layout."""

    def __init__(self, layout, drive):
        self.layout = layout
        self.drive = drive
        self._evaluator = evaluator_for(layout)
        if drive.omega <= 0:
            raise ValueError("pseudopotential requires a positive drive frequency")
        # e |E|^2 / (4 m Omega^2) gives eV directly for E in V/m
        self._prefactor_ev = E_CHARGE * drive.amplitude_v**2 / (4.0 * M_E * drive.omega**2)

    def value(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        e = self._evaluator.unit_field(pts)
        out = self._prefactor_ev * np.einsum("ij,ij->i", e, e)
        return out if np.asarray(points).ndim > 1 else float(out[0])

    def value_xz(self, x, z):
        """Cross-section evaluation (vectorized over x, z)."""
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        if hasattr(self._evaluator, "unit_field_xz"):
            ex, ez = self._evaluator.unit_field_xz(x, z)
        else:
            pts = np.stack(np.broadcast_arrays(x, np.zeros_like(x), z), axis=-1).reshape(-1, 3)
            e = self._evaluator.unit_field(pts)
            ex = e[:, 0].reshape(np.shape(x))
            ez = e[:, 2].reshape(np.shape(x))
        return self._prefactor_ev * (ex * ex + ez * ez)

    def gradient_xz(self, x, z, step):
        gx = (self.value_xz(x + step, z) - self.value_xz(x - step, z)) / (2 * step)
        gz = (self.value_xz(x, z + step) - self.value_xz(x, z - step)) / (2 * step)
        return np.array([gx, gz])

    def hessian_xz(self, x, z, step):
        f0 = self.value_xz(x, z)
        fxx = (self.value_xz(x + step, z) - 2 * f0 + self.value_xz(x - step, z)) / step**2
        fzz = (self.value_xz(x, z + step) - 2 * f0 + self.value_xz(x, z - step)) / step**2
        fxz = (
            self.value_xz(x + step, z + step)
            - self.value_xz(x + step, z - step)
            - self.value_xz(x - step, z + step)
            + self.value_xz(x - step, z - step)
        ) / (4 * step**2)
        return np.array([[fxx, fxz], [fxz, fzz]])


def pseudopotential(layout, drive, points):
    """Pseudopotential in eV at the given point(s) above the plane."""
    return PseudoPotentialField(layout, drive).value(points)


def _golden_minimize(f, lo, hi, tol):
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def _layout_scale(layout):
    if isinstance(layout, StripLayout):
        return max(abs(s.x_max) for s in layout.rf_strips)
    if hasattr(layout, "length_scale"):
        return float(layout.length_scale)
    raise TypeError("cannot infer a length scale for this layout; characterize 2D strip layouts")


def characterize_trap(layout, drive, position_tol=1e-9, saddle_span_factor=10.0):
    """Locate the guide minimum and saddle and derive (omega, U, eta, u, q).

    The minimum is bracketed on the symmetry axis with a golden-section
    search and refined by Newton steps in the cross-section plane; the
    transverse frequencies come from the eigenvalues of the pseudopotential
    Hessian (central differences, step 1e-3 R).  The escape saddle is
    located by ascending the vertical axis above the minimum and verified by
    its Hessian signature.

    Raises
    ------
    UnconfinedLayoutError
        If no on-axis minimum exists.
    OpenPotentialError
        If no on-axis field maximum is found below ``saddle_span_factor`` R.
    """
    pp = PseudoPotentialField(layout, drive)
    w = _layout_scale(layout)

    z_grid = np.geomspace(0.02 * w, 6.0 * w, 400)
    values = pp.value_xz(np.zeros_like(z_grid), z_grid)
    k = int(np.argmin(values))
    if k == 0 or k == len(z_grid) - 1:
        raise UnconfinedLayoutError("no pseudopotential minimum found on the symmetry axis")
    z_min = _golden_minimize(lambda z: pp.value_xz(0.0, z), z_grid[k - 1], z_grid[k + 1], position_tol)

    # Newton refinement in the cross-section plane.
    x_min = 0.0
    for _ in range(40):
        step = 1e-3 * z_min
        g = pp.gradient_xz(x_min, z_min, step)
        h = pp.hessian_xz(x_min, z_min, step)
        try:
            delta = np.linalg.solve(h, -g)
        except np.linalg.LinAlgError as exc:
            raise UnconfinedLayoutError("singular pseudopotential Hessian at the minimum") from exc
        delta = np.clip(delta, -0.1 * z_min, 0.1 * z_min)
        x_min += float(delta[0])
        z_min += float(delta[1])
        if np.max(np.abs(delta)) < position_tol:
            break

    r_height = z_min
    hess = pp.hessian_xz(x_min, z_min, 1e-3 * r_height)
    eigvals = np.linalg.eigvalsh(hess)
    if np.any(eigvals <= 0):
        raise UnconfinedLayoutError(f"pseudopotential minimum is not a true minimum (curvatures {eigvals})")
    # eigenvalues are eV/m^2; omega = sqrt(curvature_J / m)
    omega_1, omega_2 = np.sqrt(eigvals * EV / M_E)

    # Saddle: first on-axis maximum above the minimum.
    span = saddle_span_factor * r_height
    zs_grid = np.linspace(z_min * 1.001, span, 800)
    vs = pp.value_xz(np.zeros_like(zs_grid), zs_grid)
    peaks = np.where((vs[1:-1] >= vs[:-2]) & (vs[1:-1] >= vs[2:]))[0]
    if len(peaks) == 0:
        raise OpenPotentialError(
            f"no on-axis pseudopotential maximum below {saddle_span_factor:g} R; potential is open"
        )
    j = int(peaks[0]) + 1
    z_saddle = _golden_minimize(
        lambda z: -pp.value_xz(0.0, z), zs_grid[j - 1], zs_grid[j + 1], position_tol
    )
    saddle_hess = pp.hessian_xz(0.0, z_saddle, 1e-3 * r_height)
    saddle_eigs = np.linalg.eigvalsh(saddle_hess)
    if not (saddle_eigs[0] < 0.0 and saddle_eigs[1] > 0.3 * saddle_eigs[0]):
        raise OpenPotentialError(f"on-axis stationary point is not a saddle (curvatures {saddle_eigs})")

    phi_min = pp.value_xz(x_min, z_min)
    depth_ev = float(pp.value_xz(0.0, z_saddle) - phi_min)

    omega_mean = math.sqrt(omega_1 * omega_2)
    q = math.sqrt(8.0) * omega_mean / drive.omega
    v = drive.amplitude_v
    eta = q * M_E * drive.omega**2 * r_height**2 / (2.0 * E_CHARGE * v)
    u_factor = depth_ev * EV * 4.0 * M_E * drive.omega**2 * r_height**2 / (E_CHARGE * v) ** 2

    return TrapCharacterization(
        guide_height=r_height,
        minimum_position=(x_min, 0.0, z_min),
        omega_1=float(omega_1),
        omega_2=float(omega_2),
        depth_ev=depth_ev,
        saddle_position=(0.0, 0.0, z_saddle),
        eta=eta,
        u_factor=u_factor,
        q=q,
    )


def q_parameter(drive, guide_height, eta=1.0):
    """q = eta * 2 (e/m) V / (Omega^2 R^2)."""
    if guide_height <= 0:
        raise ValueError("guide height must be > 0")
    return eta * 2.0 * (E_CHARGE / M_E) * drive.amplitude_v / (drive.omega**2 * guide_height**2)


def ideal_relations(q, drive):
    """Harmonic pseudopotential frequency and ideal-quadrupole depth.

    Returns (omega, U_ideal) with omega = q/sqrt(8) Omega in rad/s and
    U_ideal = q/8 * V in eV (electron charge assumed).
    """
    omega = q / math.sqrt(8.0) * drive.omega
    u_ideal_ev = q / 8.0 * drive.amplitude_v
    return omega, u_ideal_ev


def depth_from_u(u_factor, drive, guide_height):
    """Trap depth in eV from the geometric depth factor u."""
    u_j = u_factor * (E_CHARGE * drive.amplitude_v) ** 2 / (
        4.0 * M_E * drive.omega**2 * guide_height**2
    )
    return u_j / EV


def drive_for_q_u(q, depth_ev, eta, u_factor, guide_height, phase0=0.0):
    """Drive (V, Omega) that realizes a target (q, U) for a characterized layout.

    Inverts q = eta 2 e V / (m Omega^2 R^2) and U = u e^2 V^2 / (4 m Omega^2 R^2):
    V = 8 eta U / (u e q) and Omega = sqrt(2 eta e V / (q m R^2)).
    """
    from .constants import DriveParams

    if q <= 0 or depth_ev <= 0:
        raise ValueError("q and depth must be > 0")
    u_j = depth_ev * EV
    volts = 8.0 * eta * u_j / (u_factor * E_CHARGE * q)
    omega = math.sqrt(2.0 * eta * E_CHARGE * volts / (q * M_E * guide_height**2))
    return DriveParams(amplitude_v=volts, omega=omega, phase0=phase0)


# --- Mathieu / Floquet stability -------------------------------------------------

@dataclass(frozen=True)
class MathieuResult:
    """Outcome of the one-period Floquet analysis of u'' + (a - 2q cos 2t) u = 0."""

    stable: bool
    trace: float
    exponent: float   # growth rate per period pi when unstable, else 0
    marginal: bool    # |trace| within tolerance of the stability boundary


def _monodromy_trace(q, a, steps):
    """Trace of the state-transition matrix over one period (pi) by RK4."""
    h = math.pi / steps
    y = np.array([[1.0, 0.0], [0.0, 1.0]])  # rows: (u, u'); columns: two ICs

    def rhs(t, y):
        return np.array([y[1], -(a - 2.0 * q * math.cos(2.0 * t)) * y[0]])

    t = 0.0
    for _ in range(steps):
        k1 = rhs(t, y)
        k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = rhs(t + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t += h
    return y[0, 0] + y[1, 1]


def mathieu_stable(q, a=0.0, steps=1024, boundary_tol=1e-9):
    """Exact stability of the Mathieu equation by monodromy trace.

    Integrates over one period for two independent initial conditions;
    the motion is stable iff |trace| <= 2.  q = 0 (and any point exactly on
    the boundary) is flagged ``marginal`` and reported stable by the open
    interval convention.
    """
    if q < 0:
        raise ValueError("q must be >= 0")
    trace = _monodromy_trace(float(q), float(a), steps)
    marginal = abs(abs(trace) - 2.0) <= boundary_tol
    stable = abs(trace) <= 2.0 or marginal
    exponent = 0.0 if stable else math.acosh(abs(trace) / 2.0)
    return MathieuResult(stable=stable, trace=float(trace), exponent=exponent, marginal=marginal)


def mathieu_boundary(bracket=(0.7, 1.1), a=0.0, tol=1e-6, steps=1024):
    """First instability onset in q at fixed a, located by bisection."""
    lo, hi = bracket
    if not mathieu_stable(lo, a, steps).stable:
        raise ValueError("lower bracket is already unstable")
    if mathieu_stable(hi, a, steps).stable:
        raise ValueError("upper bracket is still stable")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mathieu_stable(mid, a, steps).stable:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
