"""Planar electrode layouts: the straight five-wire cross-section, the bent
guide swept into 3D polygons, and the parametrized coupling-end shape.

All electrodes live in the z = 0 plane.  The gapless-plane convention is
used throughout: each fabrication gap is split at its midpoint between the
neighbouring electrodes so that the electrode roles tile the entire plane.
Anything not covered by a signal ("rf") patch is grounded.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Polygon as _ShapelyPolygon

RF = "rf"
GROUND = "ground"

LAYOUT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class FiveWireCrossSection:
    """Transverse dimensions of the five-wire guide (metres).

    Defaults are the demonstrated geometry: 350 um centre electrode, 750 um
    signal rails, 110 um gaps.
    """

    center_width: float = 350e-6
    rf_rail_width: float = 750e-6
    gap: float = 110e-6

    def __post_init__(self):
        if self.center_width <= 0 or self.rf_rail_width <= 0:
            raise ValueError("electrode widths must be > 0")
        if self.gap < 0:
            raise ValueError("gap must be >= 0")

    @property
    def rail_inner_edge(self):
        """Inner edge of the signal rail after gap-midpoint assignment."""
        return 0.5 * self.center_width + 0.5 * self.gap

    @property
    def rail_outer_edge(self):
        """Outer edge of the signal rail after gap-midpoint assignment."""
        return self.rail_inner_edge + self.rf_rail_width + self.gap


@dataclass(frozen=True)
class Strip:
    """Half-open electrode strip [x_min, x_max] in the z = 0 plane."""

    x_min: float
    x_max: float
    role: str

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise ValueError(f"strip requires x_min < x_max, got [{self.x_min}, {self.x_max}]")
        if self.role not in (RF, GROUND):
            raise ValueError(f"unknown electrode role {self.role!r}")


@dataclass(frozen=True)
class StripLayout:
    """2D cross-section layout: strips tiling the whole x-axis."""

    strips: tuple

    def __post_init__(self):
        strips = tuple(self.strips)
        if not strips:
            raise ValueError("layout needs at least one strip")
        ordered = sorted(strips, key=lambda s: s.x_min)
        if not math.isinf(ordered[0].x_min) or not math.isinf(ordered[-1].x_max):
            raise ValueError("strip tiling must cover the whole axis (outermost strips extend to infinity)")
        for left, right in zip(ordered[:-1], ordered[1:]):
            if not math.isclose(left.x_max, right.x_min, rel_tol=0.0, abs_tol=1e-15):
                raise ValueError(f"strips must tile without gaps or overlap near x = {left.x_max}")
        if not any(s.role == RF for s in ordered):
            raise ValueError("layout needs at least one rf strip")
        for s in ordered:
            if s.role == RF and (math.isinf(s.x_min) or math.isinf(s.x_max)):
                raise ValueError("rf strips must be finite")
        object.__setattr__(self, "strips", ordered and tuple(ordered))

    @property
    def rf_strips(self):
        return tuple(s for s in self.strips if s.role == RF)

    def reflected(self):
        """Layout mirrored through x = 0."""
        return StripLayout(tuple(Strip(-s.x_max, -s.x_min, s.role) for s in self.strips))


def build_five_wire(cross_section):
    """Strip layout of the five-wire guide under the gapless convention.

    The signal rails span [a, b] and [-b, -a] with a = center/2 + gap/2 and
    b = a + rail_width + gap; everything else is ground.
    """
    a = cross_section.rail_inner_edge
    b = cross_section.rail_outer_edge
    return StripLayout((
        Strip(-math.inf, -b, GROUND),
        Strip(-b, -a, RF),
        Strip(-a, a, GROUND),
        Strip(a, b, RF),
        Strip(b, math.inf, GROUND),
    ))


@dataclass(frozen=True)
class GuidePath:
    """Plan-view centerline: straight lead-in, circular arc, straight lead-out.

    The path starts at the origin heading along +y; the arc turns towards
    -x, so the outward (centrifugal) normal of the bend is the +x side of
    the comoving cross-section.
    """

    straight_lead_in: float
    arc_radius: float
    arc_angle: float
    straight_lead_out: float = None

    def __post_init__(self):
        if self.arc_radius <= 0:
            raise ValueError(f"arc radius must be > 0, got {self.arc_radius}")
        if self.arc_angle < 0:
            raise ValueError("arc angle must be >= 0")
        if self.straight_lead_in < 0:
            raise ValueError("lead-in length must be >= 0")
        lead_out = self.straight_lead_in if self.straight_lead_out is None else self.straight_lead_out
        if lead_out < 0:
            raise ValueError("lead-out length must be >= 0")
        object.__setattr__(self, "straight_lead_out", float(lead_out))

    @classmethod
    def paper_guide(cls, total_length=37e-3, arc_radius=40e-3, arc_angle=math.radians(30.0)):
        """Demonstrated guide: 40 mm bend radius over 30 degrees, padded by
        equal straight lead-in/out sections to the quoted 37 mm total."""
        arc_len = arc_radius * arc_angle
        if total_length < arc_len:
            raise ValueError("total length shorter than the arc itself")
        lead = 0.5 * (total_length - arc_len)
        return cls(straight_lead_in=lead, arc_radius=arc_radius, arc_angle=arc_angle)

    @property
    def arc_length(self):
        return self.arc_radius * self.arc_angle

    @property
    def total_length(self):
        return self.straight_lead_in + self.arc_length + self.straight_lead_out

    @property
    def arc_start(self):
        return self.straight_lead_in

    @property
    def arc_end(self):
        return self.straight_lead_in + self.arc_length

    def _frames(self, s):
        """Centerline point, tangent, and outward normal at arc length s."""
        s = np.asarray(s, dtype=float)
        theta = np.clip((s - self.arc_start) / self.arc_radius, 0.0, self.arc_angle)
        cx = -self.arc_radius
        cy = self.arc_start
        px = cx + self.arc_radius * np.cos(theta)
        py = cy + self.arc_radius * np.sin(theta)
        # before the arc: straight along +y; after: straight along exit tangent
        pre = s < self.arc_start
        post = s > self.arc_end
        px = np.where(pre, 0.0, px)
        py = np.where(pre, s, py)
        tx = -np.sin(theta)
        ty = np.cos(theta)
        ex = px + np.where(post, (s - self.arc_end) * tx, 0.0)
        ey = py + np.where(post, (s - self.arc_end) * ty, 0.0)
        nx = np.cos(theta)
        ny = np.sin(theta)
        return np.stack([ex, ey], -1), np.stack([tx, ty], -1), np.stack([nx, ny], -1)

    def center(self, s):
        return self._frames(s)[0]

    def tangent(self, s):
        return self._frames(s)[1]

    def normal(self, s):
        """Outward normal of the bend (+x in the comoving cross-section)."""
        return self._frames(s)[2]


def _polygon_area(vertices):
    x = vertices[:, 0]
    y = vertices[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


@dataclass(frozen=True, eq=False)
class PolygonPatch:
    """Planar electrode polygon in the z = 0 plane (plan coordinates)."""

    vertices: np.ndarray
    role: str

    def __post_init__(self):
        verts = np.array(self.vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[1] != 2 or verts.shape[0] < 3:
            raise ValueError("polygon needs an (n, 2) vertex array with n >= 3")
        if not np.all(np.isfinite(verts)):
            raise ValueError("polygon vertices must be finite")
        if _polygon_area(verts) < 0.0:
            verts = verts[::-1].copy()
        verts.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        if self.role not in (RF, GROUND):
            raise ValueError(f"unknown electrode role {self.role!r}")

    def is_simple(self):
        return _ShapelyPolygon(self.vertices).is_valid


@dataclass(frozen=True, eq=False)
class PolygonLayout:
    """3D-capable layout: polygon patches in z = 0; the rest of the plane is
    implicitly grounded (gapless convention)."""

    patches: tuple

    def __post_init__(self):
        patches = tuple(self.patches)
        if not any(p.role == RF for p in patches):
            raise ValueError("layout needs at least one rf patch")
        object.__setattr__(self, "patches", patches)

    @property
    def rf_patches(self):
        return tuple(p for p in self.patches if p.role == RF)

    def validate_no_overlap(self, tolerance_area=0.0):
        """Raise if any two patches overlap by more than tolerance_area."""
        polys = [_ShapelyPolygon(p.vertices) for p in self.patches]
        for i in range(len(polys)):
            for j in range(i + 1, len(polys)):
                inter = polys[i].intersection(polys[j]).area
                if inter > tolerance_area:
                    raise ValueError(f"patches {i} and {j} overlap (area {inter:g} m^2)")


def _sweep_strip(path, u_lo, u_hi, stations, role):
    """Sweep a cross-section interval [u_lo, u_hi] along path stations into
    quadrilateral patches."""
    centers, _, normals = path._frames(np.asarray(stations, dtype=float))
    lo = centers + u_lo * normals
    hi = centers + u_hi * normals
    patches = []
    for k in range(len(stations) - 1):
        quad = np.array([lo[k], hi[k], hi[k + 1], lo[k + 1]])
        patches.append(PolygonPatch(quad, role))
    return patches


def discretize_arc_layout(cross_section, path, segments_per_arc=64, ground_margin_factor=3.0):
    """Sweep the five-wire cross-section along the guide path.

    The arc is tessellated into ``segments_per_arc`` planar trapezoids per
    strip; straight sections are exact single quadrilaterals.  Grounded
    strips are included out to ``ground_margin_factor`` times the rail outer
    edge for completeness; they carry no field under the gapless convention.
    """
    if segments_per_arc < 8:
        raise ValueError("segments_per_arc must be >= 8")
    a = cross_section.rail_inner_edge
    b = cross_section.rail_outer_edge
    margin = ground_margin_factor * b

    stations = [0.0]
    if path.straight_lead_in > 0:
        stations.append(path.arc_start)
    if path.arc_angle > 0:
        arc_s = path.arc_start + path.arc_length * np.arange(1, segments_per_arc + 1) / segments_per_arc
        stations.extend(arc_s.tolist())
    if path.straight_lead_out > 0:
        stations.append(path.total_length)
    stations = np.array(stations, dtype=float)

    patches = []
    for (u_lo, u_hi, role) in (
        (-margin, -b, GROUND),
        (-b, -a, RF),
        (-a, a, GROUND),
        (a, b, RF),
        (b, margin, GROUND),
    ):
        patches.extend(_sweep_strip(path, u_lo, u_hi, stations, role))
    return PolygonLayout(tuple(patches))


def extruded_straight_layout(cross_section, length, ground_margin_factor=3.0):
    """Straight guide of the given length extruded along +y (rectangles)."""
    path = GuidePath(straight_lead_in=length, arc_radius=1.0, arc_angle=0.0, straight_lead_out=0.0)
    a = cross_section.rail_inner_edge
    b = cross_section.rail_outer_edge
    margin = ground_margin_factor * b
    stations = np.array([0.0, length])
    patches = []
    for (u_lo, u_hi, role) in (
        (-margin, -b, GROUND),
        (-b, -a, RF),
        (-a, a, GROUND),
        (a, b, RF),
        (b, margin, GROUND),
    ):
        patches.extend(_sweep_strip(path, u_lo, u_hi, stations, role))
    return PolygonLayout(tuple(patches))


@dataclass(frozen=True)
class CouplingEndShape:
    """Lateral displacements of the twelve control points at the coupling end.

    The twelve points are the inner- and outer-edge vertices of both signal
    rails at ``n_stations`` longitudinal stations.  Mirror symmetry through
    the guide's vertical mid-plane is an invariant: the offsets of the -x
    rail must be the negated offsets of the +x rail, so only six parameters
    are free.
    """

    offsets: tuple

    def __post_init__(self):
        offs = tuple(float(v) for v in self.offsets)
        if len(offs) != 12:
            raise ValueError(f"expected 12 control-point offsets, got {len(offs)}")
        if not all(math.isfinite(v) for v in offs):
            raise ValueError("offsets must be finite")
        plus, minus = offs[:6], offs[6:]
        for k, (p, mi) in enumerate(zip(plus, minus)):
            if not math.isclose(mi, -p, rel_tol=0.0, abs_tol=1e-15):
                raise ValueError(
                    f"mirror symmetry violated at control point {k}: {mi} != {-p}"
                )
        object.__setattr__(self, "offsets", offs)

    @classmethod
    def from_free_offsets(cls, free):
        """Expand the 6 free offsets of the +x rail to the full 12-vector."""
        free = tuple(float(v) for v in free)
        if len(free) != 6:
            raise ValueError(f"expected 6 free offsets, got {len(free)}")
        return cls(free + tuple(-v for v in free))

    @property
    def free_offsets(self):
        return self.offsets[:6]


@dataclass(frozen=True)
class CouplingEndGeometry:
    """Straight guide section ending at the substrate edge (y = 0), whose
    final ``control_span`` carries the movable edge vertices."""

    cross_section: FiveWireCrossSection = FiveWireCrossSection()
    guide_length: float = 10e-3
    control_span: float = 2e-3
    n_stations: int = 3

    def __post_init__(self):
        if not 0 < self.control_span < self.guide_length:
            raise ValueError("control span must be positive and shorter than the guide")
        if self.n_stations < 2:
            raise ValueError("need at least 2 control stations per edge")

    @property
    def station_y(self):
        """Longitudinal positions of the control stations (guide ends at 0)."""
        return tuple(-self.control_span + self.control_span * k / (self.n_stations - 1)
                     for k in range(self.n_stations))


def build_coupling_end(geometry):
    """Unshaped coupling-end layout (all control offsets zero)."""
    return apply_coupling_shape(geometry, CouplingEndShape.from_free_offsets((0.0,) * 6))


def apply_coupling_shape(geometry, shape):
    """Coupling-end layout with the control points displaced laterally.

    Offsets are grouped per rail as [inner stations..., outer stations...]
    ordered from deepest station to the substrate edge.  Shapes whose
    polygons self-intersect, or whose offsets reach the neighbouring
    electrode (|offset| >= gap), are rejected.
    """
    cs = geometry.cross_section
    a = cs.rail_inner_edge
    b = cs.rail_outer_edge
    n = geometry.n_stations
    gap = cs.gap
    for v in shape.offsets:
        if abs(v) >= gap:
            raise ValueError(f"control offset {v:g} m reaches the neighbouring electrode (gap {gap:g} m)")

    ys = geometry.station_y
    y_deep = -geometry.guide_length

    def rail(sign, inner_offsets, outer_offsets):
        # offsets are displacements along +x; mirror symmetry of the shape
        # vector guarantees the two rails stay reflections of each other
        inner = [(sign * a, y_deep)]
        inner += [(sign * a + d, y) for d, y in zip(inner_offsets, ys)]
        outer = [(sign * b, y_deep)]
        outer += [(sign * b + d, y) for d, y in zip(outer_offsets, ys)]
        verts = np.array(inner + outer[::-1], dtype=float)
        return PolygonPatch(verts, RF)

    plus = rail(+1.0, shape.offsets[0:n], shape.offsets[n:2 * n])
    minus = rail(-1.0, shape.offsets[2 * n:3 * n], shape.offsets[3 * n:4 * n])
    # The grounded centre region follows the shaped inner rail edges so the
    # plane stays tiled without overlap.
    inner_plus = shape.offsets[0:n]
    left = [(-a, y_deep)] + [(-a - d, y) for d, y in zip(inner_plus, ys)]
    right = [(a + d, y) for d, y in zip(inner_plus, ys)][::-1] + [(a, y_deep)]
    center = PolygonPatch(np.array(left + right, dtype=float), GROUND)

    for patch, name in ((plus, "+x rail"), (minus, "-x rail")):
        if not patch.is_simple():
            raise ValueError(f"shaped {name} polygon is self-intersecting")
    layout = PolygonLayout((minus, center, plus))
    layout.validate_no_overlap()
    return layout


# --- JSON serialization -----------------------------------------------------

def _strip_to_json(strip):
    return {
        "x_min": None if math.isinf(strip.x_min) else strip.x_min,
        "x_max": None if math.isinf(strip.x_max) else strip.x_max,
        "role": strip.role,
    }


def layout_to_json(layout):
    """Serialize a layout to a JSON-compatible dict (schema version 1)."""
    if isinstance(layout, StripLayout):
        return {
            "schema_version": LAYOUT_SCHEMA_VERSION,
            "kind": "strips",
            "unit": "m",
            "strips": [_strip_to_json(s) for s in layout.strips],
        }
    if isinstance(layout, PolygonLayout):
        return {
            "schema_version": LAYOUT_SCHEMA_VERSION,
            "kind": "polygons",
            "unit": "m",
            "polygons": [
                {"role": p.role, "vertices": np.asarray(p.vertices).tolist()}
                for p in layout.patches
            ],
        }
    raise TypeError(f"cannot serialize layout of type {type(layout).__name__}")


def layout_from_json(doc):
    """Inverse of :func:`layout_to_json`."""
    version = doc.get("schema_version")
    if version != LAYOUT_SCHEMA_VERSION:
        raise ValueError(f"unsupported layout schema version {version!r}")
    kind = doc.get("kind")
    if kind == "strips":
        strips = tuple(
            Strip(
                -math.inf if s["x_min"] is None else float(s["x_min"]),
                math.inf if s["x_max"] is None else float(s["x_max"]),
                s["role"],
            )
            for s in doc["strips"]
        )
        return StripLayout(strips)
    if kind == "polygons":
        patches = tuple(
            PolygonPatch(np.array(p["vertices"], dtype=float), p["role"])
            for p in doc["polygons"]
        )
        return PolygonLayout(patches)
    raise ValueError(f"unknown layout kind {kind!r}")


def dump_layout(layout, fp):
    json.dump(layout_to_json(layout), fp, indent=2)


def load_layout(fp):
    return layout_from_json(json.load(fp))
