"""Nelder-Mead shape optimization of the coupling-end electrodes.

The goal is a smooth extension of the guiding minimum past the substrate
edge: the twelve movable edge points of the signal rails (six free
parameters under mirror symmetry) are displaced laterally to minimize the
largest transverse field magnitude sampled along the guide axis, from deep
inside the guide to beyond the gun aperture plate.
"""

import math
from dataclasses import dataclass

import numpy as np

from .field import PolygonSetEvaluator
from .geometry import CouplingEndGeometry, CouplingEndShape, apply_coupling_shape

SHAPE_PENALTY = 1e6  # V/m, returned for invalid or out-of-bounds shapes


@dataclass(frozen=True)
class NelderMeadConfig:
    """Standard simplex coefficients plus termination controls."""

    reflection: float = 1.0
    expansion: float = 2.0
    contraction: float = 0.5
    shrink: float = 0.5
    initial_scale: float = 2e-5
    tolerance: float = 1e-3
    max_iterations: int = 400

    def __post_init__(self):
        if min(self.reflection, self.expansion, self.contraction, self.shrink) <= 0:
            raise ValueError("simplex coefficients must be positive")
        if self.expansion <= self.reflection:
            raise ValueError("expansion coefficient must exceed reflection")


@dataclass(frozen=True)
class NelderMeadResult:
    best_params: np.ndarray
    best_value: float
    trace: tuple          # (iteration, best value, objective spread) per accepted step
    n_evaluations: int
    converged: bool


def nelder_mead(objective, x0, config=NelderMeadConfig()):
    """Minimize ``objective`` from ``x0`` with the standard simplex moves.

    Reflect/expand/contract/shrink with the textbook coefficients;
    terminates when the simplex objective spread falls below
    ``config.tolerance`` or at ``config.max_iterations``.  The returned
    trace records the best value and spread after every iteration, and the
    best-so-far value is monotone non-increasing by construction.
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    simplex = [x0.copy()]
    for k in range(n):
        v = x0.copy()
        v[k] += config.initial_scale
        simplex.append(v)
    values = [float(objective(v)) for v in simplex]
    n_eval = n + 1
    trace = []
    converged = False

    for iteration in range(config.max_iterations):
        order = np.argsort(values)
        simplex = [simplex[i] for i in order]
        values = [values[i] for i in order]
        spread = values[-1] - values[0]
        trace.append((iteration, values[0], spread))
        if spread < config.tolerance:
            converged = True
            break

        centroid = np.mean(simplex[:-1], axis=0)
        worst = simplex[-1]
        reflected = centroid + config.reflection * (centroid - worst)
        f_r = float(objective(reflected))
        n_eval += 1
        if f_r < values[0]:
            expanded = centroid + config.expansion * (centroid - worst)
            f_e = float(objective(expanded))
            n_eval += 1
            if f_e < f_r:
                simplex[-1], values[-1] = expanded, f_e
            else:
                simplex[-1], values[-1] = reflected, f_r
        elif f_r < values[-2]:
            simplex[-1], values[-1] = reflected, f_r
        else:
            contracted = centroid + config.contraction * (worst - centroid)
            f_c = float(objective(contracted))
            n_eval += 1
            if f_c < values[-1]:
                simplex[-1], values[-1] = contracted, f_c
            else:
                best = simplex[0]
                for k in range(1, n + 1):
                    simplex[k] = best + config.shrink * (simplex[k] - best)
                    values[k] = float(objective(simplex[k]))
                n_eval += n

    order = np.argsort(values)
    return NelderMeadResult(
        best_params=simplex[order[0]].copy(),
        best_value=values[order[0]],
        trace=tuple(trace),
        n_evaluations=n_eval,
        converged=converged,
    )


@dataclass(frozen=True)
class AperturePlate:
    """Grounded aperture plate in front of the substrate edge.

    The plate is modeled as a grounded plane perpendicular to the guide axis
    at ``distance`` past the substrate edge.  Its effect on the field before
    the plate is captured exactly by the image construction in
    :func:`shielded_axis_field`: every signal patch acquires a mirror patch
    at negated voltage, which enforces zero potential on the plate plane
    while leaving the substrate-plane boundary values untouched.  The hole
    (side defaulting to the 20 um gun exit aperture, configurable) is small
    against every other length and its field leakage is neglected; the
    region beyond the plate is treated as field-free.  ``rectangles`` gives
    the grounded rectangle primitives (plate-plane coordinates) that tile
    the plate around its square hole, for serialization and drawings.
    """

    distance: float = 500e-6
    hole_side: float = 20e-6
    half_extent: float = 3e-3

    def rectangles(self):
        h = self.half_extent
        s = 0.5 * self.hole_side
        return (
            (-h, -s, -h, h),   # left slab:  u in [-h, -s], v in [-h, h]
            (s, h, -h, h),     # right slab
            (-s, s, s, h),     # top slab
            (-s, s, -h, -s),   # bottom slab
        )


@dataclass(frozen=True)
class CouplingProblem:
    """Objective definition for the coupling-end shape optimization."""

    geometry: CouplingEndGeometry = CouplingEndGeometry()
    aperture: AperturePlate = AperturePlate()
    drive_amplitude_v: float = 33.0
    axis_span_inside: float = 2e-3
    axis_span_beyond: float = 1e-3
    n_axis_samples: int = 50
    bound_fraction: float = 0.8

    @property
    def bound(self):
        """Per-parameter lateral bound, a fraction of the fabrication gap."""
        return self.bound_fraction * self.geometry.cross_section.gap

    @property
    def guide_height(self):
        cs = self.geometry.cross_section
        return math.sqrt(cs.rail_inner_edge * cs.rail_outer_edge)

    def axis_points(self):
        y = np.linspace(
            -self.axis_span_inside,
            self.aperture.distance + self.axis_span_beyond,
            self.n_axis_samples,
        )
        pts = np.zeros((self.n_axis_samples, 3))
        pts[:, 1] = y
        pts[:, 2] = self.guide_height
        return pts


def shaped_layout(problem, params):
    """Coupling-end layout for a 6-vector of free lateral offsets."""
    shape = CouplingEndShape.from_free_offsets(params)
    return apply_coupling_shape(problem.geometry, shape)


def _mirrored_layout(layout, plane_y):
    """Signal patches mirrored across the vertical plane y = plane_y."""
    from .geometry import PolygonLayout, PolygonPatch, RF

    patches = []
    for p in layout.rf_patches:
        verts = np.array(p.vertices, dtype=float)
        verts[:, 1] = 2.0 * plane_y - verts[:, 1]
        patches.append(PolygonPatch(verts, RF))
    return PolygonLayout(tuple(patches))


def shielded_axis_field(problem, layout, points):
    """Field at points before the aperture plate, with the plate's shielding
    included by the image construction (mirror patches at -V); points at or
    beyond the plate plane are reported as field-free."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    plane_y = problem.aperture.distance
    before = pts[:, 1] < plane_y
    out = np.zeros((len(pts), 3))
    if np.any(before):
        ev = PolygonSetEvaluator(layout)
        ev_img = PolygonSetEvaluator(_mirrored_layout(layout, plane_y))
        e = ev.unit_field(pts[before]) - ev_img.unit_field(pts[before])
        out[before] = e * problem.drive_amplitude_v
    return out


def objective_emax(problem, params):
    """Largest transverse field magnitude on the guide axis, in V/m.

    Builds the shaped layout and evaluates |E_transverse| (the components
    perpendicular to the guide axis) at the axis sample points at the
    unperturbed guide height, with the grounded aperture plate shielding
    included.  Out-of-bounds or self-intersecting shapes yield a large
    penalty scaled by the bound violation.
    """
    params = np.asarray(params, dtype=float)
    if params.shape != (6,):
        raise ValueError("expected 6 free shape parameters")
    excess = np.maximum(np.abs(params) - problem.bound, 0.0)
    if np.any(excess > 0):
        return SHAPE_PENALTY * (1.0 + float(np.sum(excess) / problem.bound))
    try:
        layout = shaped_layout(problem, params)
    except ValueError:
        return SHAPE_PENALTY
    e = shielded_axis_field(problem, layout, problem.axis_points())
    e_t = np.hypot(e[:, 0], e[:, 2])
    return float(np.max(e_t))


def optimize_coupling(problem, config=None, x0=None):
    """Run the simplex optimization of the coupling-end shape.

    Returns (result, baseline) where baseline is the straight-end objective
    value (all offsets zero), the reference for the achieved reduction.
    """
    if config is None:
        config = NelderMeadConfig(
            initial_scale=0.25 * problem.bound,
            tolerance=1e-3,
            max_iterations=400,
        )
    if x0 is None:
        x0 = np.zeros(6)
    baseline = objective_emax(problem, np.zeros(6))
    result = nelder_mead(lambda p: objective_emax(problem, p), x0, config)
    return result, baseline


OPTIMIZE_TRACE_HEADER = ["iteration", "E_max", "simplex_spread"]


def write_optimize_trace(fp, result):
    import csv as _csv

    writer = _csv.writer(fp)
    writer.writerow(OPTIMIZE_TRACE_HEADER)
    for iteration, best, spread in result.trace:
        writer.writerow([iteration, repr(float(best)), repr(float(spread))])
