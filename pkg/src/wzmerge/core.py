"""Domain types and lane geometry.

Positions are planar (x, y) metres.  Lanes are polyline centrelines; the
synthetic motorway network built here is a set of straight parallel lanes
along +x, lane 0 leftmost at y = 0, lane i at y = -i * lane_width, so travel
direction is +x and "left" is +y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Sequence

import numpy as np

Vec2 = tuple[float, float]

SIM_DT = 0.1            # s, fixed integration and sampling step
EMERGENCY_DECEL = 9.0   # m/s^2, physical braking floor
TRAJECTORY_SPEED_SLACK = 1.0  # m/s, consistency-band allowance


class AutomationLevel(Enum):
    L2 = "l2"
    L4 = "l4"


class Manoeuvre(Enum):
    PROCEED = "proceed"
    WAIT = "wait"
    MERGE = "merge"


def smoothstep(u):
    """Cubic ease 3u^2 - 2u^3, clamped to [0, 1]. Accepts scalars or arrays."""
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def normalize_heading(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.remainder(theta, math.tau)
    if wrapped <= -math.pi:
        wrapped += math.tau
    return wrapped


@dataclass(frozen=True)
class VehicleState:
    """Kinematic snapshot of one vehicle.

    ``speed`` is the magnitude of the planar velocity (longitudinal and
    lateral rates combined); ``heading`` is its direction.  During pure
    car-following the heading is the lane direction and speed equals the
    longitudinal rate.
    """

    vehicle_id: int
    position: Vec2
    speed: float
    heading: float
    lane_index: int
    length: float
    level: AutomationLevel

    def __post_init__(self):
        if not (self.speed >= 0.0 and math.isfinite(self.speed)):
            raise ValueError(f"speed must be finite and >= 0, got {self.speed}")
        if self.length <= 0.0:
            raise ValueError(f"length must be positive, got {self.length}")
        if not (math.isfinite(self.position[0]) and math.isfinite(self.position[1])):
            raise ValueError(f"position must be finite, got {self.position}")
        object.__setattr__(self, "heading", normalize_heading(self.heading))


@dataclass
class LaneGeometry:
    """A lane centreline polyline plus width and an optional closed interval.

    ``closed_interval`` is an [start, end) arc-length range that traffic may
    not occupy (a work-zone closure).
    """

    index: int
    centreline: Sequence[Vec2]
    width: float
    closed_interval: tuple[float, float] | None = None

    _points: np.ndarray = field(init=False, repr=False)
    _seg_lengths: np.ndarray = field(init=False, repr=False)
    _cum_lengths: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.asarray(self.centreline, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise ValueError("centreline needs at least two 2-D points")
        seg = np.diff(pts, axis=0)
        lengths = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(lengths <= 0.0):
            raise ValueError("degenerate centreline segment")
        self._points = pts
        self._seg_lengths = lengths
        self._cum_lengths = np.concatenate(([0.0], np.cumsum(lengths)))

    @property
    def length(self) -> float:
        return float(self._cum_lengths[-1])

    def is_closed_at(self, arc: float) -> bool:
        if self.closed_interval is None:
            return False
        start, end = self.closed_interval
        return start <= arc < end


def _project(lane: LaneGeometry, point: Vec2) -> tuple[float, float, int, float]:
    """Return (arc, signed_offset, segment_index, t) of the closest foot point.

    Distance ties are broken toward the smaller arc length.
    """
    p = np.asarray(point, dtype=float)
    pts = lane._points
    best = None  # (dist_sq, arc, seg_idx, t)
    for i in range(len(pts) - 1):
        a = pts[i]
        d = pts[i + 1] - a
        seg_len = lane._seg_lengths[i]
        t = ((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / (seg_len * seg_len)
        t = min(max(t, 0.0), 1.0)
        foot = a + t * d
        w = p - foot
        dist_sq = float(w[0] * w[0] + w[1] * w[1])
        arc = float(lane._cum_lengths[i] + t * seg_len)
        if best is None or dist_sq < best[0]:
            best = (dist_sq, arc, i, t)
    _, arc, seg_idx, t = best
    # signed offset: positive when the point lies left of the travel direction
    a = pts[seg_idx]
    d = pts[seg_idx + 1] - a
    foot = a + t * d
    w = p - foot
    cross = d[0] * w[1] - d[1] * w[0]
    if cross == 0.0:
        offset = 0.0  # on the axis (possibly beyond an endpoint)
    else:
        offset = math.copysign(math.hypot(w[0], w[1]), cross)
    return arc, offset, seg_idx, t


def arc_position(lane: LaneGeometry, point: Vec2) -> float:
    """Arc length of the closest point on the centreline to ``point``."""
    return _project(lane, point)[0]


def lateral_offset(lane: LaneGeometry, point: Vec2) -> float:
    """Signed perpendicular distance to the centreline; positive to the left
    of the travel direction."""
    return _project(lane, point)[1]


def tangent_heading(lane: LaneGeometry, point: Vec2) -> float:
    """Heading of the centreline segment closest to ``point``."""
    seg_idx = _project(lane, point)[2]
    d = lane._points[seg_idx + 1] - lane._points[seg_idx]
    return math.atan2(d[1], d[0])


def project_points(lane: LaneGeometry,
                   points: np.ndarray) -> tuple[np.ndarray, np.ndarray,
                                                np.ndarray]:
    """Project many points onto the centreline in one call.

    Returns (arcs, signed_offsets, segment_indices).  Results are
    bit-identical to calling ``_project`` per point; the per-segment
    arithmetic mirrors the scalar routine exactly.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    n = p.shape[0]
    if n == 0:
        return (np.empty(0), np.empty(0), np.empty(0, dtype=np.intp))
    pts = lane._points
    a = pts[:-1]                                   # (S, 2)
    d = pts[1:] - pts[:-1]                         # (S, 2)
    seg_len = lane._seg_lengths                    # (S,)
    w0x = p[:, None, 0] - a[None, :, 0]
    w0y = p[:, None, 1] - a[None, :, 1]
    t = (w0x * d[None, :, 0] + w0y * d[None, :, 1]) / (seg_len * seg_len)
    t = np.minimum(np.maximum(t, 0.0), 1.0)
    wx = p[:, None, 0] - (a[None, :, 0] + t * d[None, :, 0])
    wy = p[:, None, 1] - (a[None, :, 1] + t * d[None, :, 1])
    dist_sq = wx * wx + wy * wy
    seg = np.argmin(dist_sq, axis=1)               # first minimum wins ties
    rows = np.arange(n)
    arcs = lane._cum_lengths[seg] + t[rows, seg] * seg_len[seg]
    offsets = np.empty(n)
    for k in range(n):
        ux, uy = wx[k, seg[k]], wy[k, seg[k]]
        cross = d[seg[k], 0] * uy - d[seg[k], 1] * ux
        offsets[k] = (0.0 if cross == 0.0
                      else math.copysign(math.hypot(ux, uy), cross))
    return arcs, offsets, seg


def point_at(lane: LaneGeometry, arc: float,
             offset: float = 0.0) -> tuple[float, float, float]:
    """Planar point (x, y) and tangent heading at an (arc, offset) pair.

    The inverse of projection for points whose foot lies inside a segment.
    ``arc`` is clamped to the centreline extent; ``offset`` is measured to
    the left of the travel direction.
    """
    cum = lane._cum_lengths
    seg = int(np.searchsorted(cum, arc, side="right")) - 1
    seg = min(max(seg, 0), len(lane._seg_lengths) - 1)
    a = lane._points[seg]
    d = lane._points[seg + 1] - a
    ux = d[0] / lane._seg_lengths[seg]
    uy = d[1] / lane._seg_lengths[seg]
    along = arc - cum[seg]
    x = a[0] + along * ux - offset * uy
    y = a[1] + along * uy + offset * ux
    return float(x), float(y), math.atan2(uy, ux)


def longitudinal_gap(leader: VehicleState, follower: VehicleState,
                     lane: LaneGeometry) -> float:
    """Bumper-to-bumper gap along the lane: arc(leader) - arc(follower) -
    leader.length.  Negative values mean overlap."""
    return (arc_position(lane, leader.position)
            - arc_position(lane, follower.position)
            - leader.length)


def build_straight_network(lane_count: int, segment_length: float,
                           lane_width: float,
                           closure: tuple[int, float, float] | None = None,
                           ) -> list[LaneGeometry]:
    """Straight parallel lanes along +x.  ``closure`` is (lane_index, start,
    end) in arc metres."""
    lanes = []
    for i in range(lane_count):
        y = -lane_width * i
        closed = None
        if closure is not None and closure[0] == i:
            closed = (closure[1], closure[2])
        lanes.append(LaneGeometry(index=i,
                                  centreline=[(0.0, y), (segment_length, y)],
                                  width=lane_width, closed_interval=closed))
    return lanes


@dataclass(frozen=True)
class Trajectory:
    """A time-stamped state sequence for one vehicle.

    Timestamps are implicit: state k is at ``t0 + k * dt``.  ``dt`` is fixed
    at the simulation step.  The constructor enforces kinematic consistency:
    speeds are non-negative and consecutive positions move by at most
    (max(v_k, v_k+1) + 1 m/s) * dt.
    """

    t0: float
    dt: float
    manoeuvre: Manoeuvre
    vehicle_id: int
    length: float
    level: AutomationLevel
    xs: np.ndarray
    ys: np.ndarray
    speeds: np.ndarray
    headings: np.ndarray
    lanes: np.ndarray

    def __post_init__(self):
        if self.dt != SIM_DT:
            raise ValueError(f"trajectory dt must be {SIM_DT}, got {self.dt}")
        n = len(self.xs)
        if n < 2:
            raise ValueError("trajectory needs at least two states")
        for name in ("ys", "speeds", "headings", "lanes"):
            if len(getattr(self, name)) != n:
                raise ValueError("trajectory arrays must share one length")
        if np.any(self.speeds < 0.0) or not np.all(np.isfinite(self.speeds)):
            raise ValueError("trajectory speeds must be finite and >= 0")
        step = np.hypot(np.diff(self.xs), np.diff(self.ys))
        bound = (np.maximum(self.speeds[:-1], self.speeds[1:])
                 + TRAJECTORY_SPEED_SLACK) * self.dt
        if np.any(step > bound + 1e-9):
            k = int(np.argmax(step - bound))
            raise ValueError(
                f"kinematic consistency violated at step {k}: "
                f"moved {step[k]:.3f} m, bound {bound[k]:.3f} m")

    def __len__(self) -> int:
        return len(self.xs)

    def time_at(self, k: int) -> float:
        return self.t0 + k * self.dt

    @cached_property
    def positions(self) -> np.ndarray:
        """(n, 2) array of planar positions."""
        return np.column_stack((self.xs, self.ys))

    @cached_property
    def path_length(self) -> float:
        """Total Euclidean path length."""
        return float(np.sum(np.hypot(np.diff(self.xs), np.diff(self.ys))))

    @cached_property
    def states(self) -> tuple[VehicleState, ...]:
        return tuple(
            VehicleState(vehicle_id=self.vehicle_id,
                         position=(float(self.xs[k]), float(self.ys[k])),
                         speed=float(self.speeds[k]),
                         heading=float(self.headings[k]),
                         lane_index=int(self.lanes[k]),
                         length=self.length, level=self.level)
            for k in range(len(self.xs)))
