"""Procedural worlds: closed ground tracks and 3D gate courses."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.interpolate import CubicSpline

from equinav.worldsim.vehicle import VehicleState

# Pure pursuit at full lock turns with radius speed / k_steer = 10 m; keep tracks well inside that.
MAX_TRACK_CURVATURE = 1.0 / 14.0
TRACK_RETRIES = 50
RADIAL_HARMONICS = 3


class TrackGenerationError(RuntimeError):
    def __init__(self, seed, reason):
        super().__init__(f"could not generate a valid track for seed={seed}: {reason}")
        self.seed = seed


class ClosedPolyline:
    """Closed polyline with arc-length bookkeeping and nearest-point queries."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=float)
        if self.points.ndim != 2 or len(self.points) < 3:
            raise ValueError("a closed polyline needs at least 3 points")
        self.seg_start = self.points
        self.seg_vec = np.roll(self.points, -1, axis=0) - self.points
        self.seg_len = np.linalg.norm(self.seg_vec, axis=1)
        if np.any(self.seg_len <= 0):
            raise ValueError("polyline has repeated consecutive points")
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.cum[-1])

    def project(self, q):
        """Return (distance, segment index, fraction along segment, arc length)."""
        q = np.asarray(q, dtype=float)
        rel = q - self.seg_start
        t = np.einsum("ij,ij->i", rel, self.seg_vec) / self.seg_len**2
        t = np.clip(t, 0.0, 1.0)
        diff = rel - t[:, None] * self.seg_vec
        d2 = np.einsum("ij,ij->i", diff, diff)
        i = int(np.argmin(d2))
        return float(np.sqrt(d2[i])), i, float(t[i]), float(self.cum[i] + t[i] * self.seg_len[i])

    def distance(self, q) -> float:
        return self.project(q)[0]

    def point_at(self, s):
        s = float(s) % self.length
        i = int(np.searchsorted(self.cum, s, side="right") - 1)
        i = min(i, len(self.seg_len) - 1)
        t = (s - self.cum[i]) / self.seg_len[i]
        return self.seg_start[i] + t * self.seg_vec[i]

    def tangent_at(self, s):
        s = float(s) % self.length
        i = min(int(np.searchsorted(self.cum, s, side="right") - 1), len(self.seg_len) - 1)
        return self.seg_vec[i] / self.seg_len[i]


def _resample_closed(curve, spacing):
    """Resample a densely sampled closed curve (no repeated endpoint) to near-uniform arc spacing."""
    closed = np.vstack([curve, curve[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(8, int(round(cum[-1] / spacing)))
    s = np.linspace(0.0, cum[-1], n, endpoint=False)
    return np.column_stack([np.interp(s, cum, closed[:, k]) for k in range(closed.shape[1])])


def _segments_intersect(p, p2, q, q2):
    """Boolean matrix: does segment p[i]->p2[i] properly cross q[j]->q2[j]."""
    def orient(a, b, c):
        return np.sign((b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1])
                       - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0]))
    P, P2 = p[:, None, :], p2[:, None, :]
    Q, Q2 = q[None, :, :], q2[None, :, :]
    o1 = orient(P, P2, Q)
    o2 = orient(P, P2, Q2)
    o3 = orient(Q, Q2, P)
    o4 = orient(Q, Q2, P2)
    return (o1 * o2 < 0) & (o3 * o4 < 0)


@dataclass(frozen=True, eq=False)
class Track:
    """Closed ground track; ``waypoints`` is the densified lane centerline."""

    waypoints: np.ndarray
    lane_half_width: float = 1.75
    closed: bool = True
    texture_seed: int = 0

    def __post_init__(self):
        wp = np.asarray(self.waypoints, dtype=float)
        if wp.ndim != 2 or wp.shape[1] != 2:
            raise ValueError("track waypoints must have shape (n, 2)")
        if len(wp) < 8:
            raise ValueError("a track needs at least 8 waypoints")
        if self.lane_half_width <= 0:
            raise ValueError("lane_half_width must be positive")
        object.__setattr__(self, "waypoints", wp)

    @cached_property
    def centerline(self) -> ClosedPolyline:
        return ClosedPolyline(self.waypoints)

    @cached_property
    def vertex_right(self):
        # right-hand normal in the (x north, y east) frame is (-t_y, t_x)
        seg = self.centerline.seg_vec / self.centerline.seg_len[:, None]
        tangent = seg + np.roll(seg, 1, axis=0)
        tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
        return np.column_stack([-tangent[:, 1], tangent[:, 0]])

    @cached_property
    def edges(self):
        """(left edge, right edge) polylines of the lane corridor."""
        off = self.lane_half_width * self.vertex_right
        return self.waypoints - off, self.waypoints + off

    @cached_property
    def bounds(self):
        left, right = self.edges
        pts = np.vstack([left, right])
        return pts.min(axis=0), pts.max(axis=0)

    def curvature(self):
        seg = self.centerline.seg_vec / self.centerline.seg_len[:, None]
        prev = np.roll(seg, 1, axis=0)
        turn = np.arctan2(prev[:, 0] * seg[:, 1] - prev[:, 1] * seg[:, 0],
                          np.einsum("ij,ij->i", prev, seg))
        ds = 0.5 * (self.centerline.seg_len + np.roll(self.centerline.seg_len, 1))
        return turn / ds

    def corridor_self_intersects(self) -> bool:
        """Brute-force test over every pair of non-adjacent corridor edge segments."""
        for edge in self.edges:
            a, b = edge, np.roll(edge, -1, axis=0)
            hits = _segments_intersect(a, b, a, b)
            n = len(a)
            idx = np.arange(n)
            gap = np.abs(idx[:, None] - idx[None, :])
            adjacent = (gap <= 1) | (gap >= n - 1)
            if np.any(hits & ~adjacent):
                return True
        left, right = self.edges
        hits = _segments_intersect(left, np.roll(left, -1, axis=0), right, np.roll(right, -1, axis=0))
        return bool(np.any(hits))

    def start_state(self, s=0.0, speed=5.0, lateral=0.0, heading_error=0.0) -> VehicleState:
        """State on the centerline at arc length ``s`` heading along the track."""
        line = self.centerline
        p = line.point_at(s)
        t = line.tangent_at(s)
        right = np.array([-t[1], t[0]])
        p = p + lateral * right
        yaw = float(np.arctan2(t[1], t[0])) + heading_error
        return VehicleState(x=float(p[0]), y=float(p[1]), yaw=yaw, speed=speed)

    def to_dict(self):
        return {
            "kind": "track",
            "waypoints": self.waypoints.tolist(),
            "lane_half_width": self.lane_half_width,
            "closed": self.closed,
            "texture_seed": self.texture_seed,
        }


def generate_track(seed: int, n_waypoints: int = 12, curvature_scale: float = 0.3, *,
                   radius: float = 30.0, lane_half_width: float = 1.75,
                   spacing: float = 2.0) -> Track:
    """Star-shaped closed loop from ``n_waypoints`` random radial control points.

    The control radii are low-pass filtered (first few Fourier harmonics) in polar
    form and the curve is resampled to ``spacing`` meters. Candidates whose curvature exceeds what the
    expert can follow, or whose corridor self-intersects, are redrawn from a
    derived seed stream a bounded number of times.
    """
    if n_waypoints < 8:
        raise ValueError("n_waypoints must be >= 8")
    if curvature_scale <= 0:
        raise ValueError("curvature_scale must be positive")
    if not 1.0 <= spacing <= 10.0:
        raise ValueError("waypoint spacing must lie in [1, 10] m")
    reason = "unknown"
    for attempt in range(TRACK_RETRIES):
        rng = np.random.default_rng([seed, attempt])
        r = radius * (1.0 + curvature_scale * rng.uniform(-1.0, 1.0, n_waypoints))
        # low-pass the control radii so the loop stays drivable
        coef = np.fft.rfft(r) / n_waypoints
        fine = np.linspace(0.0, 2 * np.pi, 4000, endpoint=False)
        rf = np.full_like(fine, coef[0].real)
        for k in range(1, min(RADIAL_HARMONICS, len(coef) - 1) + 1):
            rf += 2 * (coef[k].real * np.cos(k * fine) - coef[k].imag * np.sin(k * fine))
        if np.any(rf <= 2 * lane_half_width):
            reason = "radius collapsed"
            continue
        curve = np.column_stack([rf * np.cos(fine), rf * np.sin(fine)])
        track = Track(_resample_closed(curve, spacing), lane_half_width=lane_half_width,
                      texture_seed=int(rng.integers(0, 2**31 - 1)))
        if np.max(np.abs(track.curvature())) > MAX_TRACK_CURVATURE:
            reason = "curvature exceeds expert turning limit"
            continue
        if track.corridor_self_intersects():
            reason = "corridor self-intersection"
            continue
        return track
    raise TrackGenerationError(seed, reason)


def straight_track(length=200.0, spacing=2.0, lane_half_width=1.75, texture_seed=0) -> Track:
    """Long thin closed loop whose outbound leg runs along +x at y = 0."""
    n = int(round(length / spacing))
    out = np.column_stack([np.arange(n) * spacing, np.zeros(n)])
    back = np.column_stack([out[::-1, 0], np.full(n, -40.0)])
    # connect legs with half circles of radius 20 m
    k = 24
    ang = np.linspace(np.pi / 2, -np.pi / 2, k + 2)[1:-1]
    cap_end = np.column_stack([out[-1, 0] + 20 * np.cos(ang), -20 + 20 * np.sin(ang)])
    cap_start = np.column_stack([-20 * np.cos(ang), -20 - 20 * np.sin(ang)])
    pts = np.vstack([out, cap_end, back, cap_start])
    return Track(pts, lane_half_width=lane_half_width, texture_seed=texture_seed)


@dataclass(frozen=True, eq=False)
class GateCourse:
    """Closed 3D course; coordinates are north/east/down, so altitude is ``-z``."""

    centers: np.ndarray
    yaws: np.ndarray
    sizes: np.ndarray
    reference_path: np.ndarray
    texture_seed: int = 0

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float)
        if c.ndim != 2 or c.shape[1] != 3:
            raise ValueError("gate centers must have shape (n, 3)")
        if len(c) < 5:
            raise ValueError("a gate course needs at least 5 gates")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "yaws", np.asarray(self.yaws, dtype=float))
        object.__setattr__(self, "sizes", np.asarray(self.sizes, dtype=float))
        object.__setattr__(self, "reference_path", np.asarray(self.reference_path, dtype=float))

    @cached_property
    def path(self) -> ClosedPolyline:
        return ClosedPolyline(self.reference_path)

    @cached_property
    def bounds(self):
        pts = self.reference_path[:, :2]
        return pts.min(axis=0), pts.max(axis=0)

    def gate_corners(self):
        """(n_gates, 4, 3) corner coordinates, ordered around each frame."""
        right = np.column_stack([-np.sin(self.yaws), np.cos(self.yaws), np.zeros(len(self.yaws))])
        down = np.array([0.0, 0.0, 1.0])
        hw = self.sizes[:, 0:1] / 2
        hh = self.sizes[:, 1:2] / 2
        c = self.centers
        corners = [c - hw * right - hh * down, c + hw * right - hh * down,
                   c + hw * right + hh * down, c - hw * right + hh * down]
        return np.stack(corners, axis=1)

    def start_state(self, s=0.0, speed=3.0, lateral=0.0, vertical=0.0, heading_error=0.0):
        p = self.path.point_at(s)
        t = self.path.tangent_at(s)
        yaw = float(np.arctan2(t[1], t[0])) + heading_error
        right = np.array([-np.sin(yaw), np.cos(yaw)])
        xy = p[:2] + lateral * right
        return VehicleState(x=float(xy[0]), y=float(xy[1]), yaw=yaw, speed=speed,
                            z=float(p[2] + vertical))

    def to_dict(self):
        return {
            "kind": "gates",
            "centers": self.centers.tolist(),
            "yaws": self.yaws.tolist(),
            "sizes": self.sizes.tolist(),
            "reference_path": self.reference_path.tolist(),
            "texture_seed": self.texture_seed,
        }


def generate_gate_course(seed: int, n_gates: int = 8, *, radius: float = 25.0,
                         spacing: float = 0.5) -> GateCourse:
    if n_gates < 5:
        raise ValueError("n_gates must be >= 5")
    for attempt in range(TRACK_RETRIES):
        rng = np.random.default_rng([seed, attempt, 1])
        theta = 2 * np.pi * (np.arange(n_gates) + rng.uniform(-0.2, 0.2, n_gates)) / n_gates
        r = radius * (1.0 + 0.15 * rng.uniform(-1, 1, n_gates))
        altitude = rng.uniform(3.0, 6.0, n_gates)
        centers = np.column_stack([r * np.cos(theta), r * np.sin(theta), -altitude])
        d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        if np.min(d[np.triu_indices(n_gates, 1)]) < 3.0:
            continue
        closed = np.vstack([centers, centers[:1]])
        chord = np.linalg.norm(np.diff(closed, axis=0), axis=1)
        u = np.concatenate([[0.0], np.cumsum(chord)])
        spline = CubicSpline(u, closed, bc_type="periodic")
        fine = np.linspace(0.0, u[-1], int(u[-1] / spacing) * 4, endpoint=False)
        dense = spline(fine)
        # keep exact gate centers on the path
        path = _resample_closed(dense, spacing)
        knots = [int(np.argmin(np.linalg.norm(path - c, axis=1))) for c in centers]
        path[knots] = centers
        deriv = spline(u[:-1], 1)
        yaws = np.arctan2(deriv[:, 1], deriv[:, 0])
        sizes = np.tile([2.0, 1.6], (n_gates, 1))
        return GateCourse(centers, yaws, sizes, path, texture_seed=int(rng.integers(0, 2**31 - 1)))
    raise TrackGenerationError(seed, "gate spacing constraint")


def world_from_dict(d):
    kind = d.get("kind")
    if kind == "track":
        return Track(np.array(d["waypoints"]), lane_half_width=d["lane_half_width"],
                     closed=d["closed"], texture_seed=d["texture_seed"])
    if kind == "gates":
        return GateCourse(np.array(d["centers"]), np.array(d["yaws"]), np.array(d["sizes"]),
                          np.array(d["reference_path"]), texture_seed=d["texture_seed"])
    raise ValueError(f"unknown world kind {kind!r}")


def cross_track_error(state: VehicleState, world) -> float:
    """Unsigned distance to the track centerline (ground) or 3D reference path (air)."""
    if isinstance(world, Track):
        return world.centerline.distance([state.x, state.y])
    if isinstance(world, GateCourse):
        return world.path.distance([state.x, state.y, state.z])
    raise TypeError(f"unsupported world type {type(world).__name__}")


def signed_lateral_offset(state: VehicleState, track: Track) -> float:
    """Distance to the centerline, positive when the vehicle is right of the driving direction."""
    dist, i, _, _ = track.centerline.project([state.x, state.y])
    seg = track.centerline.seg_vec[i]
    rel = np.array([state.x, state.y]) - track.centerline.seg_start[i]
    cross = seg[0] * rel[1] - seg[1] * rel[0]
    return dist if cross >= 0 else -dist
