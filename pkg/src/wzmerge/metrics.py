"""Surrogate safety measures extracted from simulation state.

Longitudinal risk is measured by time-to-collision samples taken for every
same-lane leader-follower pair; lateral risk by near-miss events recorded
while a vehicle is between lane centrelines.  Distribution summaries
(percentiles, kernel density, empirical CDF, risk-region shares) operate on
the pooled TTC samples of one run.
"""

import enum
import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Sized, Tuple

import numpy as np

from .core import (
    AutomationLevel,
    LaneGeometry,
    VehicleState,
    arc_position,
    point_at,
    project_points,
    tangent_heading,
)

LATERAL_TTC_THRESHOLD = 2.0   # s, lateral near-miss time threshold
LATERAL_GAP_THRESHOLD = 1.0   # m, lateral near-miss distance threshold

_log = logging.getLogger(__name__)


class ConflictKind(enum.Enum):
    LATERAL_TTC = "lateral_ttc"
    LATERAL_GAP = "lateral_gap"


@dataclass(frozen=True)
class TtcSample:
    """One time-to-collision observation for a same-lane pair."""

    time: float
    follower_id: int
    leader_id: int
    ttc: float
    lane_index: int

    def __post_init__(self):
        if not (math.isfinite(self.ttc) and self.ttc > 0.0):
            raise ValueError(f"ttc must be finite and positive, got {self.ttc}")


@dataclass(frozen=True)
class ConflictEvent:
    """A lateral near-miss recorded for one mid-lane-change vehicle."""

    time: float
    ego_id: int
    other_id: int
    kind: ConflictKind
    value: float

    def __post_init__(self):
        limit = (LATERAL_TTC_THRESHOLD if self.kind is ConflictKind.LATERAL_TTC
                 else LATERAL_GAP_THRESHOLD)
        if not self.value < limit:
            raise ValueError(f"{self.kind.value} value {self.value} is not "
                             f"below its threshold {limit}")


@dataclass(frozen=True)
class RiskShares:
    """TTC sample mass in the high / moderate / safe regions."""

    high: float       # ttc < 2 s
    moderate: float   # 2 s <= ttc <= 3 s
    safe: float       # ttc > 3 s

    def __post_init__(self):
        for name in ("high", "moderate", "safe"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} share {v} outside [0, 1]")
        if abs(self.high + self.moderate + self.safe - 1.0) > 1e-9:
            raise ValueError("shares must sum to 1")


def _longitudinal_speed(state: VehicleState, lane: LaneGeometry) -> float:
    return state.speed * math.cos(state.heading
                                  - tangent_heading(lane, state.position))


def ttc(leader: VehicleState, follower: VehicleState,
        lane: LaneGeometry) -> Optional[float]:
    """Time to collision: gap over closing speed, defined only while the
    follower is actually closing on a positive gap."""
    gap = (arc_position(lane, leader.position)
           - arc_position(lane, follower.position) - leader.length)
    if gap < 0.0:
        _log.warning("overlapping pair %d behind %d: gap %.3f m",
                     follower.vehicle_id, leader.vehicle_id, gap)
        return None
    closing = (_longitudinal_speed(follower, lane)
               - _longitudinal_speed(leader, lane))
    if gap <= 0.0 or closing <= 0.0:
        return None
    return gap / closing


def ttc_samples_for_lane(time: float, lane_index: int, ids: np.ndarray,
                         xs: np.ndarray, vs: np.ndarray, lengths: np.ndarray,
                         zone: Optional[Tuple[float, float]]) -> List[TtcSample]:
    """Vectorized per-step TTC sweep over one lane's adjacent pairs.

    Arrays must be ordered by increasing arc position with longitudinal
    speeds; ``zone`` restricts to pairs whose follower sits inside it.
    """
    if ids.size < 2:
        return []
    gap = xs[1:] - lengths[1:] - xs[:-1]
    closing = vs[:-1] - vs[1:]
    mask = (gap > 0.0) & (closing > 0.0)
    if zone is not None:
        mask &= (xs[:-1] >= zone[0]) & (xs[:-1] <= zone[1])
    out = []
    for i in np.nonzero(mask)[0]:
        out.append(TtcSample(time=time, follower_id=int(ids[i]),
                             leader_id=int(ids[i + 1]),
                             ttc=float(gap[i] / closing[i]),
                             lane_index=lane_index))
    return out


def detect_lateral_conflicts(time: float, states: Sequence[VehicleState],
                             network: Sequence[LaneGeometry],
                             eps: float = 1e-9) -> List[ConflictEvent]:
    """Near-miss events for vehicles that are between lane centrelines.

    Each mid-lane-change vehicle is checked against its nearest leader and
    follower on its (target) lane: a closing pair with TTC below 2 s emits
    a LATERAL_TTC event, a longitudinal gap below 1 m a LATERAL_GAP event.
    At most one event per unordered pair and kind per call.
    """
    by_lane = {}
    for s in states:
        by_lane.setdefault(s.lane_index, []).append(s)
    events: List[ConflictEvent] = []
    seen = set()

    for lane_index in sorted(by_lane):
        lane = network[lane_index]
        group = by_lane[lane_index]
        pts = np.array([s.position for s in group], dtype=float)
        arcs, offs, segs = project_points(lane, pts)
        order = np.argsort(arcs, kind="stable")
        row = [group[i] for i in order]
        arc_r, off_r, seg_r = arcs[order], offs[order], segs[order]
        v_cache: dict = {}

        def v_long(k):
            if k not in v_cache:
                d = lane._points[seg_r[k] + 1] - lane._points[seg_r[k]]
                v_cache[k] = row[k].speed * math.cos(
                    row[k].heading - math.atan2(d[1], d[0]))
            return v_cache[k]

        def relate(k_ego, k_leader, k_follower):
            ego, leader = row[k_ego], row[k_leader]
            gap = arc_r[k_leader] - arc_r[k_follower] - leader.length
            other = leader if k_follower == k_ego else row[k_follower]
            lo, hi = sorted((ego.vehicle_id, other.vehicle_id))
            if gap > 0.0:
                closing = v_long(k_follower) - v_long(k_leader)
                if (closing > 0.0
                        and gap / closing < LATERAL_TTC_THRESHOLD
                        and (lo, hi, ConflictKind.LATERAL_TTC) not in seen):
                    seen.add((lo, hi, ConflictKind.LATERAL_TTC))
                    events.append(ConflictEvent(
                        time=time, ego_id=ego.vehicle_id,
                        other_id=other.vehicle_id,
                        kind=ConflictKind.LATERAL_TTC, value=gap / closing))
            if (gap < LATERAL_GAP_THRESHOLD
                    and (lo, hi, ConflictKind.LATERAL_GAP) not in seen):
                seen.add((lo, hi, ConflictKind.LATERAL_GAP))
                events.append(ConflictEvent(
                    time=time, ego_id=ego.vehicle_id,
                    other_id=other.vehicle_id,
                    kind=ConflictKind.LATERAL_GAP, value=gap))

        for k in range(len(row)):
            if abs(off_r[k]) <= eps:
                continue
            if k + 1 < len(row):
                relate(k, k + 1, k)
            if k > 0:
                relate(k, k, k - 1)
    return events


def states_from_frame(frame: dict, network: Sequence[LaneGeometry],
                      vehicle_length: float = 5.0,
                      rows: Optional[np.ndarray] = None) -> List[VehicleState]:
    """Rebuild vehicle snapshots from one per-step log record.

    The log stores lane coordinates (arc position, lateral offset) and the
    longitudinal speed; planar position and heading are recovered from the
    lane geometry.  Automation level is not recorded and none of the
    measures read it, so a fixed placeholder is used.
    """
    lanes = np.asarray(frame["lane"])
    arcs = np.asarray(frame["arc_position"], dtype=float)
    offs = np.asarray(frame["lateral_offset"], dtype=float)
    vs = np.asarray(frame["speed"], dtype=float)
    ids = np.asarray(frame["vehicle_id"])
    if rows is None:
        rows = np.arange(len(ids))
    out = []
    for i in rows:
        lane = network[int(lanes[i])]
        x, y, heading = point_at(lane, float(arcs[i]), float(offs[i]))
        out.append(VehicleState(vehicle_id=int(ids[i]), position=(x, y),
                                speed=float(vs[i]), heading=heading,
                                lane_index=int(lanes[i]),
                                length=vehicle_length,
                                level=AutomationLevel.L2))
    return out


def frame_conflicts(frame: dict, network: Sequence[LaneGeometry],
                    vehicle_length: float = 5.0,
                    eps: float = 1e-9) -> List[ConflictEvent]:
    """Lateral near-miss events for one log record.

    Only lanes that currently host a mid-lane-change vehicle can produce
    events, so state reconstruction is restricted to those; the result is
    identical to running detection over the full snapshot.
    """
    offs = np.asarray(frame["lateral_offset"], dtype=float)
    if offs.size == 0:
        return []
    lanes = np.asarray(frame["lane"])
    active = np.unique(lanes[np.abs(offs) > eps])
    if active.size == 0:
        return []
    rows = np.nonzero(np.isin(lanes, active))[0]
    states = states_from_frame(frame, network, vehicle_length, rows)
    return detect_lateral_conflicts(float(frame["time"]), states, network, eps)


def frame_ttc_samples(frame: dict, network: Sequence[LaneGeometry],
                      zone: Optional[Tuple[float, float]],
                      vehicle_length: float = 5.0) -> List[TtcSample]:
    """Same-lane TTC sweep over one log record."""
    lanes = np.asarray(frame["lane"])
    if lanes.size == 0:
        return []
    arcs = np.asarray(frame["arc_position"], dtype=float)
    vs = np.asarray(frame["speed"], dtype=float)
    ids = np.asarray(frame["vehicle_id"])
    time = float(frame["time"])
    out: List[TtcSample] = []
    for lane_index in np.unique(lanes):
        rows = np.nonzero(lanes == lane_index)[0]
        order = rows[np.argsort(arcs[rows], kind="stable")]
        out.extend(ttc_samples_for_lane(
            time, int(lane_index), ids[order], arcs[order], vs[order],
            np.full(order.size, vehicle_length), zone))
    return out


def conflicts_per_minute(events: Sized, duration_after_warmup: float) -> float:
    """Event count normalized to events per minute."""
    if duration_after_warmup <= 0.0:
        raise ValueError("duration must be positive")
    return len(events) / (duration_after_warmup / 60.0)


def percentile(values: Iterable[float], p: float) -> float:
    """Linear-interpolation quantile (inclusive convention)."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("empty sample")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    return float(np.quantile(arr, p))


def _bandwidth(arr: np.ndarray) -> float:
    sd = float(np.std(arr, ddof=1))
    if sd == 0.0:
        raise ValueError("zero-variance sample has no density estimate")
    q75, q25 = np.percentile(arr, [75.0, 25.0])
    iqr = float(q75 - q25)
    # heavily tied samples can have IQR 0 with positive variance
    scale = min(sd, iqr / 1.34) if iqr > 0.0 else sd
    return 0.9 * scale * arr.size ** (-0.2)


def density_grid(values: Iterable[float], points: int = 513) -> np.ndarray:
    """Evenly spaced grid spanning the sample plus three bandwidths."""
    arr = np.asarray(values, dtype=float)
    if arr.size < 2:
        raise ValueError("need at least two values")
    h = _bandwidth(arr)
    return np.linspace(float(arr.min()) - 3.0 * h,
                       float(arr.max()) + 3.0 * h, points)


def kde_pdf(values: Iterable[float], grid: np.ndarray) -> np.ndarray:
    """Gaussian kernel density with Silverman bandwidth, renormalized so
    trapezoidal integration over ``grid`` is exactly one."""
    arr = np.asarray(values, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if arr.size < 2:
        raise ValueError("need at least two values")
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0.0):
        raise ValueError("grid must be 1-D and strictly increasing")
    h = _bandwidth(arr)
    z = (grid[:, None] - arr[None, :]) / h
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (arr.size * h * math.sqrt(2.0 * math.pi))
    return dens / np.trapezoid(dens, grid)


def ecdf(values: Iterable[float], grid: np.ndarray) -> np.ndarray:
    """Empirical distribution function evaluated on a grid."""
    arr = np.sort(np.asarray(values, dtype=float))
    if arr.size == 0:
        raise ValueError("empty sample")
    grid = np.asarray(grid, dtype=float)
    return np.searchsorted(arr, grid, side="right") / arr.size


def risk_shares(ttc_values: Iterable[float]) -> RiskShares:
    """Sample mass below 2 s, within [2, 3] s, and above 3 s."""
    arr = np.asarray(ttc_values, dtype=float)
    if arr.size == 0:
        raise ValueError("empty sample")
    high = float(np.mean(arr < 2.0))
    moderate = float(np.mean((arr >= 2.0) & (arr <= 3.0)))
    return RiskShares(high=high, moderate=moderate,
                      safe=float(1.0 - high - moderate))
