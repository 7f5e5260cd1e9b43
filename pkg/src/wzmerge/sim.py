"""Microscopic motorway simulation with a lane-closure work zone.

Vehicles follow one of two longitudinal laws (IDM for the highly automated
fleet, a constant-time-headway ACC controller for the partially automated
one), change lanes under a gap-acceptance rule when their lane is closed
ahead, and can be taken over by externally planned trajectories.  State is
kept per lane in parallel numpy arrays sorted by arc position so the
car-following update is a handful of vectorised operations per lane; the
scalar law functions below are the reference semantics and the arrays must
agree with them (see tests).

Update order within one 0.1 s step: spawn, lane-change decisions, the
longitudinal update (semi-implicit Euler: speed first, position with the
new speed), lateral progression of active lane changes, application of
override buffers, despawning past the segment end, collision bookkeeping.
"""

from __future__ import annotations

import enum
import math
import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .core import (
    EMERGENCY_DECEL,
    SIM_DT,
    AutomationLevel,
    LaneGeometry,
    Trajectory,
    VehicleState,
    smoothstep,
)

# gains of the constant-time-headway controller: gap term, speed-difference
# term, free-flow speed-tracking term
K_GAP = 0.23
K_SPEED = 0.07
K_FREE = 0.4

LANE_CHANGE_DURATION = 3.0
DEFAULT_VEHICLE_LENGTH = 5.0
DEFAULT_VEHICLE_WIDTH = 1.8

# slower entering traffic keeps at least a sliver of its desired speed
MIN_SPEED_FACTOR = 0.1


class CarFollowingModel(enum.Enum):
    IDM = 0
    CTH_ACC = 1


class LaneChangeDecision(enum.Enum):
    STAY = "stay"
    CHANGE_LEFT = "change_left"
    CHANGE_RIGHT = "change_right"


@dataclass(frozen=True)
class CarFollowingParams:
    """Longitudinal-law parameters for one automation level."""

    model: CarFollowingModel
    desired_speed: float
    max_accel: float
    comfort_decel: float
    headway: float
    min_gap: float
    sigma: float = 0.0
    speed_deviation: float = 0.0
    accel_exponent: float = 4.0

    def __post_init__(self):
        if self.desired_speed <= 0 or self.max_accel <= 0 or self.comfort_decel <= 0:
            raise ValueError("desired_speed, max_accel, comfort_decel must be positive")
        if self.headway < 0 or self.min_gap < 0 or self.sigma < 0 or self.speed_deviation < 0:
            raise ValueError("headway, min_gap, sigma, speed_deviation must be non-negative")


@dataclass(frozen=True)
class LaneChangeParams:
    cooperation: float
    politeness: float
    accept_decel_threshold: float
    urgency_distance: float

    def __post_init__(self):
        if not 0.0 <= self.cooperation <= 1.0:
            raise ValueError("cooperation must lie in [0, 1]")
        if self.accept_decel_threshold <= 0 or self.urgency_distance <= 0:
            raise ValueError("accept_decel_threshold and urgency_distance must be positive")


def _emergency_warning(gap: float) -> None:
    warnings.warn(f"non-positive gap {gap:.3f} m, emergency braking", RuntimeWarning,
                  stacklevel=3)


def idm_acceleration(speed: float, params: CarFollowingParams, gap: Optional[float] = None,
                     leader_speed: Optional[float] = None,
                     desired_speed: Optional[float] = None,
                     leader_accel: Optional[float] = None) -> float:
    """Intelligent-driver-model acceleration, clamped to [-9, max_accel].

    Without a leader only the free-flow term applies.  A non-positive gap
    triggers emergency braking and a runtime warning.
    """
    v0 = params.desired_speed if desired_speed is None else desired_speed
    a = params.max_accel
    free = a * (1.0 - (speed / v0) ** params.accel_exponent)
    if gap is None:
        acc = free
    elif gap <= 0.0:
        _emergency_warning(gap)
        return -EMERGENCY_DECEL
    else:
        dv = speed - float(leader_speed)
        s_star = params.min_gap + speed * params.headway + speed * dv / (
            2.0 * math.sqrt(a * params.comfort_decel))
        acc = free - a * (s_star / gap) ** 2
    return min(max(acc, -EMERGENCY_DECEL), a)


# a leader decelerating harder than this counts as braking for the
# anticipation envelope; acceleration noise stays well below it
BRAKING_LEADER_THRESHOLD = -0.5


def cth_acc_acceleration(speed: float, params: CarFollowingParams, gap: Optional[float] = None,
                         leader_speed: Optional[float] = None,
                         desired_speed: Optional[float] = None,
                         leader_accel: Optional[float] = None) -> float:
    """Constant-time-headway ACC acceleration, clamped to [-9, max_accel].

    Gap-regulation command k_g*(gap - s0 - tau*v) + k_v*(v_lead - v), taken
    as the minimum with the speed-tracking command k_f*(v0 - v) so a distant
    leader never drags the vehicle past its desired speed.  The linear gains
    alone can neither stop from free flow behind a standing queue nor absorb
    a braking shockwave, so a kinematic envelope takes over whenever closing
    the speed difference within the gap, or stopping behind the projected
    stopping point of a braking leader, needs more than comfortable
    deceleration.
    """
    v0 = params.desired_speed if desired_speed is None else desired_speed
    free = K_FREE * (v0 - speed)
    if gap is None:
        acc = free
    elif gap <= 0.0:
        _emergency_warning(gap)
        return -EMERGENCY_DECEL
    else:
        vl = float(leader_speed)
        regulate = K_GAP * (gap - params.min_gap - params.headway * speed) + K_SPEED * (vl - speed)
        acc = min(free, regulate)
        needed = math.inf
        approach = speed - vl
        if approach > 0.0:
            needed = -(approach * approach) / (2.0 * max(gap - params.min_gap, 0.1))
        if leader_accel is not None and leader_accel < BRAKING_LEADER_THRESHOLD:
            avail = gap - params.min_gap + vl * vl / (2.0 * -leader_accel)
            needed = min(needed, -(speed * speed) / (2.0 * max(avail, 0.1)))
        if needed <= -params.comfort_decel:
            acc = min(acc, needed)
    return min(max(acc, -EMERGENCY_DECEL), params.max_accel)


def acceleration(speed: float, params: CarFollowingParams, gap: Optional[float] = None,
                 leader_speed: Optional[float] = None,
                 desired_speed: Optional[float] = None,
                 leader_accel: Optional[float] = None) -> float:
    """Dispatch to the vehicle's longitudinal law."""
    fn = idm_acceleration if params.model is CarFollowingModel.IDM else cth_acc_acceleration
    return fn(speed, params, gap=gap, leader_speed=leader_speed, desired_speed=desired_speed,
              leader_accel=leader_accel)


# --------------------------------------------------------------------------
# per-lane state arrays


class _LaneArrays:
    """Struct-of-arrays vehicle store for one lane, sorted by arc position."""

    FLOAT_FIELDS = ("x", "v", "y", "vy", "length", "v0", "a", "b", "tau", "s0",
                    "delta", "sig", "acc")

    def __init__(self):
        for name in self.FLOAT_FIELDS:
            setattr(self, name, np.empty(0, dtype=np.float64))
        self.ids = np.empty(0, dtype=np.int64)
        self.model = np.empty(0, dtype=np.int8)
        self.overridden = np.empty(0, dtype=bool)

    def __len__(self) -> int:
        return self.ids.size

    def slot_of(self, vid: int) -> int:
        hits = np.nonzero(self.ids == vid)[0]
        if hits.size != 1:
            raise KeyError(f"vehicle {vid} not on this lane")
        return int(hits[0])

    def insert(self, slot: int, *, vid: int, model: int, overridden: bool = False,
               **floats: float) -> None:
        for name in self.FLOAT_FIELDS:
            setattr(self, name, np.insert(getattr(self, name), slot, floats.get(name, 0.0)))
        self.ids = np.insert(self.ids, slot, vid)
        self.model = np.insert(self.model, slot, model)
        self.overridden = np.insert(self.overridden, slot, overridden)

    def remove(self, slots: Sequence[int]) -> None:
        for name in self.FLOAT_FIELDS + ("ids", "model", "overridden"):
            setattr(self, name, np.delete(getattr(self, name), slots))

    def resort(self) -> None:
        order = np.argsort(self.x, kind="stable")
        if np.array_equal(order, np.arange(len(self))):
            return
        for name in self.FLOAT_FIELDS + ("ids", "model", "overridden"):
            setattr(self, name, getattr(self, name)[order])


@dataclass
class _LateralSchedule:
    start_step: int
    y0: float
    y1: float
    duration_steps: int


@dataclass
class _VehicleMeta:
    level: AutomationLevel
    lane_index: int
    length: float
    v0_eff: float
    buffer: deque = field(default_factory=deque)
    lateral: Optional[_LateralSchedule] = None
    entered_step: int = 0
    diverged: bool = False


@dataclass(frozen=True)
class CollisionEvent:
    time: float
    follower_id: int
    leader_id: int
    overlap: float


def _coupled_accelerations(x: np.ndarray, v: np.ndarray, length: np.ndarray,
                           model: np.ndarray, v0: np.ndarray, delta: np.ndarray,
                           a: np.ndarray, b: np.ndarray, s0: np.ndarray,
                           tau: np.ndarray, leader_acc: np.ndarray,
                           wall_start: Optional[float]) -> np.ndarray:
    """Raw car-following accelerations for one lane, ordered by increasing
    arc (index i follows index i+1).  Free term per model, leader coupling,
    braking-leader stopping envelope and the closure wall; noise and the
    final clamp are the caller's concern."""
    n = x.size
    idm = model == CarFollowingModel.IDM.value
    free_idm = a * (1.0 - (v / v0) ** delta)
    free_cth = K_FREE * (v0 - v)
    acc = np.where(idm, free_idm, free_cth)
    if n >= 2:
        gap = x[1:] - x[:-1] - length[1:]
        vf, vl = v[:-1], v[1:]
        safe_gap = np.where(gap > 0.0, gap, 1.0)
        s_star = s0[:-1] + vf * tau[:-1] + vf * (vf - vl) / (
            2.0 * np.sqrt(a[:-1] * b[:-1]))
        with_idm = acc[:-1] - a[:-1] * (s_star / safe_gap) ** 2
        with_cth = np.minimum(
            free_cth[:-1],
            K_GAP * (gap - s0[:-1] - tau[:-1] * vf) + K_SPEED * (vl - vf))
        approach = vf - vl
        env_close = -(approach * approach) / (2.0 * np.maximum(gap - s0[:-1], 0.1))
        needed = np.where(approach > 0.0, env_close, np.inf)
        al = leader_acc[1:]
        avail = gap - s0[:-1] + vl * vl / (2.0 * np.maximum(-al, 1e-9))
        env_stop = -(vf * vf) / (2.0 * np.maximum(avail, 0.1))
        needed = np.where(al < BRAKING_LEADER_THRESHOLD,
                          np.minimum(needed, env_stop), needed)
        binding = needed <= -b[:-1]
        with_cth = np.where(binding, np.minimum(with_cth, needed), with_cth)
        coupled = np.where(idm[:-1], with_idm, with_cth)
        acc[:-1] = np.where(gap <= 0.0, -EMERGENCY_DECEL, coupled)
    if wall_start is not None:
        ahead = x < wall_start
        if np.any(ahead):
            gap_w = np.where(ahead, wall_start - x, 1.0)
            s_star_w = s0 + v * tau + v * v / (2.0 * np.sqrt(a * b))
            wall_idm = a * (1.0 - (v / v0) ** delta) - a * (s_star_w / gap_w) ** 2
            wall_cth = np.minimum(
                free_cth, K_GAP * (gap_w - s0 - tau * v) - K_SPEED * v)
            wall_needed = -(v * v) / (2.0 * np.maximum(gap_w - s0, 0.1))
            wall_bind = (v > 0.0) & (wall_needed <= -b)
            wall_cth = np.where(wall_bind, np.minimum(wall_cth, wall_needed),
                                wall_cth)
            wall = np.where(idm, wall_idm, wall_cth)
            acc = np.where(ahead, np.minimum(acc, wall), acc)
    return acc


class World:
    """Simulation state: network, vehicles, RNG streams and event logs.

    Two independent generators are spawned from the seed, one feeding
    arrivals and one feeding acceleration noise, so the arrival stream is
    identical across runs that differ only in planner activity.  Per lane
    and step the arrival stream always consumes one uniform, plus one
    uniform and one standard normal per arrival, whether or not the
    insertion succeeds.
    """

    def __init__(self, network: Sequence[LaneGeometry],
                 cf_params: Mapping[AutomationLevel, CarFollowingParams],
                 lc_params: Mapping[AutomationLevel, LaneChangeParams],
                 demand_per_lane: float = 0.0,
                 automation_mix: Optional[Mapping[AutomationLevel, float]] = None,
                 seed: int = 0,
                 baseline_lane_changes: bool = True):
        self.network = list(network)
        self.cf_params = dict(cf_params)
        self.lc_params = dict(lc_params)
        self.demand_per_lane = float(demand_per_lane)
        mix = dict(automation_mix or {AutomationLevel.L2: 1.0})
        total = sum(mix.values())
        if total <= 0:
            raise ValueError("automation mix must have positive mass")
        self._l2_share = mix.get(AutomationLevel.L2, 0.0) / total
        self.baseline_lane_changes = baseline_lane_changes
        ss = np.random.SeedSequence(seed)
        spawn_ss, noise_ss = ss.spawn(2)
        self._spawn_rng = np.random.Generator(np.random.PCG64(spawn_ss))
        self._noise_rng = np.random.Generator(np.random.PCG64(noise_ss))
        self._noise_enabled = any(p.sigma > 0.0 for p in self.cf_params.values())
        self._lanes: List[_LaneArrays] = [_LaneArrays() for _ in self.network]
        self._centre_y = [float(np.asarray(g.centreline, dtype=float)[0][1]) for g in self.network]
        self._registry: Dict[int, _VehicleMeta] = {}
        self._next_id = 0
        self._step_index = 0
        self.total_spawned = 0
        self.spawn_log: List[Tuple[int, int, int, float]] = []
        self.collision_events: List[CollisionEvent] = []
        self._overlapping: set = set()
        self._forecast_cache: Dict[Tuple[int, int], tuple] = {}
        self._forecast_step = -1

    # ------------------------------------------------------------- queries

    @property
    def time(self) -> float:
        return self._step_index / 10.0

    @property
    def step_index(self) -> int:
        return self._step_index

    @property
    def vehicle_count(self) -> int:
        return len(self._registry)

    def vehicle_ids(self) -> List[int]:
        return list(self._registry)

    def contains(self, vid: int) -> bool:
        return vid in self._registry

    def level_of(self, vid: int) -> AutomationLevel:
        return self._registry[vid].level

    def lane_of(self, vid: int) -> int:
        return self._registry[vid].lane_index

    def length_of(self, vid: int) -> float:
        return self._registry[vid].length

    def effective_desired_speed(self, vid: int) -> float:
        return self._registry[vid].v0_eff

    def params_of(self, vid: int) -> CarFollowingParams:
        return self.cf_params[self._registry[vid].level]

    def lane_change_params_of(self, vid: int) -> LaneChangeParams:
        return self.lc_params[self._registry[vid].level]

    def is_overridden(self, vid: int) -> bool:
        return len(self._registry[vid].buffer) > 0

    def is_mid_lane_change(self, vid: int) -> bool:
        meta = self._registry[vid]
        if meta.lateral is not None:
            return True
        arr = self._lanes[meta.lane_index]
        slot = arr.slot_of(vid)
        return abs(arr.y[slot] - self._centre_y[meta.lane_index]) > 1e-6

    def state_of(self, vid: int) -> VehicleState:
        meta = self._registry[vid]
        arr = self._lanes[meta.lane_index]
        slot = arr.slot_of(vid)
        v, vy = float(arr.v[slot]), float(arr.vy[slot])
        return VehicleState(vehicle_id=vid,
                            position=(float(arr.x[slot]), float(arr.y[slot])),
                            speed=math.hypot(v, vy),
                            heading=math.atan2(vy, v) if (v or vy) else 0.0,
                            lane_index=meta.lane_index,
                            length=meta.length,
                            level=meta.level)

    def longitudinal_state_of(self, vid: int) -> Tuple[float, float]:
        """(arc position, longitudinal speed) without trigonometry."""
        meta = self._registry[vid]
        arr = self._lanes[meta.lane_index]
        slot = arr.slot_of(vid)
        return float(arr.x[slot]), float(arr.v[slot])

    def neighbours(self, lane_index: int, arc: float,
                   exclude: Optional[int] = None) -> Tuple[Optional[int], Optional[int]]:
        """(leader id, follower id) around an arc position on one lane."""
        arr = self._lanes[lane_index]
        if len(arr) == 0:
            return None, None
        xs, ids = arr.x, arr.ids
        if exclude is not None:
            keep = ids != exclude
            xs, ids = xs[keep], ids[keep]
            if xs.size == 0:
                return None, None
        i = int(np.searchsorted(xs, arc, side="left"))
        leader = int(ids[i]) if i < xs.size else None
        follower = int(ids[i - 1]) if i > 0 else None
        return leader, follower

    def leader_of(self, vid: int) -> Optional[int]:
        meta = self._registry[vid]
        arr = self._lanes[meta.lane_index]
        slot = arr.slot_of(vid)
        return int(arr.ids[slot + 1]) if slot + 1 < len(arr) else None

    def acceleration_of(self, vid: int) -> float:
        meta = self._registry[vid]
        arr = self._lanes[meta.lane_index]
        return float(arr.acc[arr.slot_of(vid)])

    def lane_centre_y(self, lane_index: int) -> float:
        return self._centre_y[lane_index]

    def vehicles_on_lane(self, lane_index: int) -> List[int]:
        """Vehicle ids on one lane ordered by increasing arc position."""
        return [int(v) for v in self._lanes[lane_index].ids]

    def lane_occupancy(self, lane_index: int) -> Tuple[np.ndarray, np.ndarray,
                                                       np.ndarray, np.ndarray]:
        """(ids, arc, speed, length) copies for one lane, ordered by arc."""
        arr = self._lanes[lane_index]
        return arr.ids.copy(), arr.x.copy(), arr.v.copy(), arr.length.copy()

    # -------------------------------------------------------- construction

    def add_vehicle(self, lane_index: int, arc: float, speed: float,
                    level: AutomationLevel = AutomationLevel.L2,
                    desired_speed: Optional[float] = None,
                    length: float = DEFAULT_VEHICLE_LENGTH) -> int:
        params = self.cf_params[level]
        v0 = params.desired_speed if desired_speed is None else desired_speed
        vid = self._next_id
        self._next_id += 1
        arr = self._lanes[lane_index]
        slot = int(np.searchsorted(arr.x, arc, side="left"))
        arr.insert(slot, vid=vid, model=params.model.value,
                   x=arc, v=speed, y=self._centre_y[lane_index], vy=0.0,
                   length=length, v0=v0, a=params.max_accel, b=params.comfort_decel,
                   tau=params.headway, s0=params.min_gap, delta=params.accel_exponent,
                   sig=params.sigma * params.max_accel, acc=0.0)
        self._registry[vid] = _VehicleMeta(level=level, lane_index=lane_index,
                                           length=length, v0_eff=v0,
                                           entered_step=self._step_index)
        return vid

    # ------------------------------------------------------------ stepping

    def step(self) -> None:
        self._spawn_vehicles()
        if self.baseline_lane_changes:
            self._decide_lane_changes()
        self._advance_dynamics()
        self._advance_lateral()
        self._apply_overrides()
        self._despawn()
        self._step_index += 1
        self._detect_collisions()

    # stage 1: arrivals

    def _spawn_vehicles(self) -> None:
        if self.demand_per_lane <= 0.0:
            return
        p = min(1.0, self.demand_per_lane * SIM_DT / 3600.0)
        draws = self._spawn_rng.random(len(self._lanes))
        for lane_index, lane in enumerate(self.network):
            if draws[lane_index] >= p:
                continue
            level_u = self._spawn_rng.random()
            z = self._spawn_rng.standard_normal()
            level = AutomationLevel.L2 if level_u < self._l2_share else AutomationLevel.L4
            params = self.cf_params[level]
            factor = max(MIN_SPEED_FACTOR, 1.0 + params.speed_deviation * z)
            v0_eff = params.desired_speed * factor
            if lane.is_closed_at(0.0):
                continue
            arr = self._lanes[lane_index]
            if len(arr):
                entry_gap = float(arr.x[0] - arr.length[0])
                dv = v0_eff - float(arr.v[0])
                s_star = params.min_gap + v0_eff * params.headway + v0_eff * dv / (
                    2.0 * math.sqrt(params.max_accel * params.comfort_decel))
                if entry_gap < max(s_star, params.min_gap):
                    continue
            vid = self.add_vehicle(lane_index, 0.0, v0_eff, level=level,
                                   desired_speed=v0_eff)
            self.total_spawned += 1
            self.spawn_log.append((self._step_index, lane_index, vid, v0_eff))

    # stage 1b: gap-acceptance lane changing off the closed lane

    def _decide_lane_changes(self) -> None:
        for lane_index, lane in enumerate(self.network):
            if lane.closed_interval is None:
                continue
            arr = self._lanes[lane_index]
            if len(arr) == 0:
                continue
            # furthest downstream first so upstream vehicles see freed space
            for vid in [int(i) for i in arr.ids[::-1]]:
                decision = baseline_lane_change_decision(self, vid)
                if decision is LaneChangeDecision.STAY:
                    continue
                delta = 1 if decision is LaneChangeDecision.CHANGE_RIGHT else -1
                self.begin_lane_change(vid, self._registry[vid].lane_index + delta)

    def begin_lane_change(self, vid: int, target_lane: int) -> None:
        """Re-home the vehicle to the target lane and start the 3 s lateral
        transition; the logged lane flips at onset."""
        meta = self._registry[vid]
        arr = self._lanes[meta.lane_index]
        slot = arr.slot_of(vid)
        record = {name: float(getattr(arr, name)[slot]) for name in _LaneArrays.FLOAT_FIELDS}
        model = int(arr.model[slot])
        overridden = bool(arr.overridden[slot])
        arr.remove([slot])
        target = self._lanes[target_lane]
        tslot = int(np.searchsorted(target.x, record["x"], side="left"))
        target.insert(tslot, vid=vid, model=model, overridden=overridden, **record)
        meta.lane_index = target_lane
        meta.lateral = _LateralSchedule(start_step=self._step_index, y0=record["y"],
                                        y1=self._centre_y[target_lane],
                                        duration_steps=round(LANE_CHANGE_DURATION / SIM_DT))

    # stage 2: longitudinal dynamics

    def _advance_dynamics(self) -> None:
        for lane_index, lane in enumerate(self.network):
            arr = self._lanes[lane_index]
            n = len(arr)
            if n == 0:
                continue
            v, x = arr.v, arr.x
            wall_start = (None if lane.closed_interval is None
                          else lane.closed_interval[0])
            acc = _coupled_accelerations(
                x, v, arr.length, arr.model, arr.v0, arr.delta, arr.a, arr.b,
                arr.s0, arr.tau, arr.acc, wall_start)
            if self._noise_enabled:
                acc = acc + arr.sig * self._noise_rng.uniform(-1.0, 1.0, n)
            acc = np.clip(acc, -EMERGENCY_DECEL, arr.a)
            keep = arr.overridden
            v_new = np.maximum(v + acc * SIM_DT, 0.0)
            arr.v = np.where(keep, v, v_new)
            arr.x = np.where(keep, x, x + v_new * SIM_DT)
            arr.acc = np.where(keep, arr.acc, (arr.v - v) / SIM_DT)

    def forecast_lane(self, lane_index: int,
                      n: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray,
                                       np.ndarray]:
        """Noise-free car-following rollout of one lane's occupants over n
        steps, ignoring arrivals.

        Vehicles with a pending override buffer follow their buffered states
        for as long as the buffer lasts (those motions are already decided,
        so predicting them with car-following would be wrong exactly where
        it matters most), then continue under car-following; everyone else
        reacts to them normally.  Returns (ids, positions, speeds, lengths)
        with positions and speeds of shape (vehicles, n) ordered by
        increasing arc.  Unlike a constant-speed extrapolation this
        propagates queue discharge waves, so a planner consulting it sees
        gaps that are about to open or close.  Results are cached per step;
        callers must treat them as read-only.
        """
        if self._forecast_step != self._step_index:
            self._forecast_cache.clear()
            self._forecast_step = self._step_index
        cached = self._forecast_cache.get((lane_index, n))
        if cached is not None:
            return cached
        arr = self._lanes[lane_index]
        m = len(arr)
        xs = np.empty((m, n))
        vs = np.empty((m, n))
        if m > 0:
            lane = self.network[lane_index]
            wall_start = (None if lane.closed_interval is None
                          else lane.closed_interval[0])
            buffers = {}
            for i, vid in enumerate(arr.ids):
                meta = self._registry[int(vid)]
                if meta.buffer:
                    buffers[i] = list(meta.buffer)
            x, v, prev = arr.x.copy(), arr.v.copy(), arr.acc.copy()
            xs[:, 0], vs[:, 0] = x, v
            for k in range(1, n):
                acc = _coupled_accelerations(
                    x, v, arr.length, arr.model, arr.v0, arr.delta, arr.a,
                    arr.b, arr.s0, arr.tau, prev, wall_start)
                acc = np.clip(acc, -EMERGENCY_DECEL, arr.a)
                v_new = np.maximum(v + acc * SIM_DT, 0.0)
                x_new = x + v_new * SIM_DT
                for i, buf in buffers.items():
                    if k - 1 < len(buf) and buf[k - 1][4] == lane_index:
                        x_new[i] = buf[k - 1][0]
                        v_new[i] = buf[k - 1][2]
                prev = (v_new - v) / SIM_DT
                x, v = x_new, v_new
                xs[:, k], vs[:, k] = x, v
        result = (arr.ids.copy(), xs, vs, arr.length.copy())
        self._forecast_cache[(lane_index, n)] = result
        return result

    # stage 3: lateral progression of vehicle-owned lane changes

    def _advance_lateral(self) -> None:
        for vid, meta in list(self._registry.items()):
            sched = meta.lateral
            if sched is None or len(meta.buffer) > 0:
                continue
            arr = self._lanes[meta.lane_index]
            slot = arr.slot_of(vid)
            steps_since = self._step_index - sched.start_step + 1
            y_old = float(arr.y[slot])
            if steps_since >= sched.duration_steps:
                y_new = sched.y1
                meta.lateral = None
            else:
                u = steps_since * SIM_DT / (sched.duration_steps * SIM_DT)
                y_new = sched.y0 + (sched.y1 - sched.y0) * float(smoothstep(u))
            arr.y[slot] = y_new
            arr.vy[slot] = 0.0 if meta.lateral is None else (y_new - y_old) / SIM_DT

    # stage 4: externally planned trajectories

    def apply_external_trajectory(self, vid: int, trajectory: Trajectory) -> None:
        """Queue a planned trajectory; while buffered states remain they
        replace the vehicle's own dynamics.  Re-applying replaces the queue.
        """
        if vid not in self._registry:
            raise KeyError(f"unknown vehicle {vid}")
        if trajectory.vehicle_id != vid:
            raise ValueError("trajectory vehicle id mismatch")
        if abs(trajectory.t0 - self.time) > 1e-9:
            raise ValueError(
                f"trajectory starts at t={trajectory.t0}, world time is {self.time}")
        meta = self._registry[vid]
        states = []
        for k in range(1, len(trajectory)):
            speed = float(trajectory.speeds[k])
            heading = float(trajectory.headings[k])
            states.append((float(trajectory.xs[k]), float(trajectory.ys[k]),
                           speed * math.cos(heading), speed * math.sin(heading),
                           int(trajectory.lanes[k])))
        meta.buffer = deque(states)
        meta.diverged = False
        arr = self._lanes[meta.lane_index]
        arr.overridden[arr.slot_of(vid)] = len(states) > 0

    def release_override(self, vid: int, settle_duration: float = 0.5) -> None:
        """Drop any buffered plan and, if the vehicle sits off-centre, glide
        it back to the lane centreline over a short vehicle-owned schedule."""
        meta = self._registry[vid]
        meta.buffer.clear()
        arr = self._lanes[meta.lane_index]
        slot = arr.slot_of(vid)
        arr.overridden[slot] = False
        y = float(arr.y[slot])
        centre = self._centre_y[meta.lane_index]
        if abs(y - centre) > 1e-9:
            meta.lateral = _LateralSchedule(start_step=self._step_index, y0=y, y1=centre,
                                            duration_steps=max(1, round(settle_duration / SIM_DT)))
        else:
            meta.lateral = None
            arr.vy[slot] = 0.0

    def _apply_overrides(self) -> None:
        # front-to-back so the hard floor compares same-instant positions:
        # a leader's own buffered advance must land before its follower's
        # floor check, otherwise the follower is pinned against a leader
        # position one full step stale (12 m of phantom overlap at 30 m/s)
        pending = [vid for vid, meta in self._registry.items() if meta.buffer]
        def _arc(vid: int) -> float:
            meta = self._registry[vid]
            arr = self._lanes[meta.lane_index]
            return float(arr.x[arr.slot_of(vid)])
        pending.sort(key=_arc, reverse=True)
        for vid in pending:
            meta = self._registry[vid]
            x, y, v_long, vy, lane_target = meta.buffer.popleft()
            if lane_target != meta.lane_index:
                self._move_lane(vid, lane_target)
            arr = self._lanes[meta.lane_index]
            slot = arr.slot_of(vid)
            v_old = float(arr.v[slot])
            plan_v, plan_x = v_long, x
            # once a guard has cut the realized speed below the plan, later
            # buffer states sit far above it; recover toward the plan at a
            # physical rate instead of snapping back.  Clean executions
            # (no guard has fired since the plan was applied) are exempt so
            # buffered states pass through verbatim.
            if meta.diverged:
                v_allow = v_old + max(self.cf_params[meta.level].max_accel,
                                      1.0) * SIM_DT
                if v_long > v_allow:
                    v_long = v_allow
                    x = min(x, float(arr.x[slot]) + v_long * SIM_DT)
            # emergency floor: the plan is applied verbatim unless the
            # car-following law demands harder-than-comfort braking against
            # the live leader or wall, in which case physics wins
            guard = self._guard_accel(meta, arr, slot)
            if guard is not None and guard <= -self.cf_params[meta.level].comfort_decel:
                v_lim = max(v_old + guard * SIM_DT, 0.0)
                if v_lim < v_long:
                    v_long = v_lim
                    x = min(x, float(arr.x[slot]) + v_long * SIM_DT)
            if slot + 1 < len(arr):
                # hard floor: the front may never advance past the current
                # leader's rear, whatever the plan says
                x_cap = float(arr.x[slot + 1] - arr.length[slot + 1]) \
                    - 0.5 * self.cf_params[meta.level].min_gap
                if x > x_cap:
                    x = max(x_cap, float(arr.x[slot]))
                    v_long = min(v_long,
                                 max((x - float(arr.x[slot])) / SIM_DT, 0.0))
            if v_long != plan_v or x != plan_x:
                meta.diverged = True
            arr.acc[slot] = (v_long - v_old) / SIM_DT
            arr.x[slot] = x
            arr.y[slot] = y
            arr.v[slot] = v_long
            arr.vy[slot] = vy
            arr.overridden[slot] = len(meta.buffer) > 0
            arr.resort()

    def _guard_accel(self, meta: "_VehicleMeta", arr: _LaneArrays,
                     slot: int) -> Optional[float]:
        """Car-following response of an overridden vehicle to its live
        leader and the closure wall; None when unconstrained."""
        params = self.cf_params[meta.level]
        speed = float(arr.v[slot])
        x = float(arr.x[slot])
        out = None
        if slot + 1 < len(arr):
            gap = float(arr.x[slot + 1] - arr.length[slot + 1] - x)
            if gap <= 0.0:
                return -EMERGENCY_DECEL
            out = acceleration(speed, params, gap=gap,
                               leader_speed=float(arr.v[slot + 1]),
                               desired_speed=meta.v0_eff,
                               leader_accel=float(arr.acc[slot + 1]))
        lane = self.network[meta.lane_index]
        if lane.closed_interval is not None and x < lane.closed_interval[0]:
            wall = acceleration(speed, params, gap=lane.closed_interval[0] - x,
                                leader_speed=0.0, desired_speed=meta.v0_eff,
                                leader_accel=0.0)
            out = wall if out is None else min(out, wall)
        return out

    def _move_lane(self, vid: int, target_lane: int) -> None:
        meta = self._registry[vid]
        arr = self._lanes[meta.lane_index]
        slot = arr.slot_of(vid)
        record = {name: float(getattr(arr, name)[slot]) for name in _LaneArrays.FLOAT_FIELDS}
        model = int(arr.model[slot])
        overridden = bool(arr.overridden[slot])
        arr.remove([slot])
        target = self._lanes[target_lane]
        tslot = int(np.searchsorted(target.x, record["x"], side="left"))
        target.insert(tslot, vid=vid, model=model, overridden=overridden, **record)
        meta.lane_index = target_lane

    # stage 5: exits

    def _despawn(self) -> None:
        for lane_index, lane in enumerate(self.network):
            arr = self._lanes[lane_index]
            if len(arr) == 0:
                continue
            gone = np.nonzero(arr.x > lane.length)[0]
            if gone.size == 0:
                continue
            for slot in gone:
                self._registry.pop(int(arr.ids[slot]))
            arr.remove(list(gone))

    # collision bookkeeping: bounding boxes overlapping by more than 0.5 m
    # along the lane are recorded once at onset; a vehicle still mostly in
    # its source lane during a change does not touch, hence the lateral
    # separation test.  The simulation keeps running either way.

    def _detect_collisions(self) -> None:
        current = set()
        for arr in self._lanes:
            if len(arr) < 2:
                continue
            gap = arr.x[1:] - arr.x[:-1] - arr.length[1:]
            lateral = np.abs(arr.y[1:] - arr.y[:-1])
            gap = np.where(lateral < DEFAULT_VEHICLE_WIDTH, gap, np.inf)
            for i in np.nonzero(gap < -0.5)[0]:
                pair = (int(arr.ids[i]), int(arr.ids[i + 1]))
                current.add(pair)
                if pair not in self._overlapping:
                    self.collision_events.append(CollisionEvent(
                        time=self.time, follower_id=pair[0], leader_id=pair[1],
                        overlap=float(-gap[i])))
        self._overlapping = current

    # ------------------------------------------------------------- logging

    def frame(self) -> Dict[str, np.ndarray]:
        """Per-vehicle log columns for the current instant, ordered by lane
        then arc position."""
        ids, lanes, xs, lats, speeds, accs, overs = [], [], [], [], [], [], []
        for lane_index, arr in enumerate(self._lanes):
            n = len(arr)
            if n == 0:
                continue
            ids.append(arr.ids)
            lanes.append(np.full(n, lane_index, dtype=np.int64))
            xs.append(arr.x)
            lats.append(arr.y - self._centre_y[lane_index])
            speeds.append(arr.v)
            accs.append(arr.acc)
            overs.append(arr.overridden)
        if not ids:
            empty_f = np.empty(0, dtype=np.float64)
            return {"time": self.time, "vehicle_id": np.empty(0, dtype=np.int64),
                    "lane": np.empty(0, dtype=np.int64), "arc_position": empty_f,
                    "lateral_offset": empty_f, "speed": empty_f,
                    "acceleration": empty_f, "override": np.empty(0, dtype=bool)}
        return {"time": self.time,
                "vehicle_id": np.concatenate(ids),
                "lane": np.concatenate(lanes),
                "arc_position": np.concatenate(xs),
                "lateral_offset": np.concatenate(lats),
                "speed": np.concatenate(speeds),
                "acceleration": np.concatenate(accs),
                "override": np.concatenate(overs)}


# --------------------------------------------------------------------------
# baseline lane changing


def baseline_lane_change_decision(world: World, vid: int) -> LaneChangeDecision:
    """Gap-acceptance decision for a vehicle on a closed lane.

    Pure with respect to the world.  A change is considered only when the
    closure lies ahead within the urgency distance.  A target lane is
    accepted when neither the vehicle itself behind its would-be leader nor
    the would-be follower behind the vehicle would need to brake harder
    than the acceptance threshold; the follower's threshold is relaxed by
    its cooperation factor.  Adjacent lanes are tried right first.
    """
    meta = world._registry[vid]
    if meta.lateral is not None or len(meta.buffer) > 0:
        return LaneChangeDecision.STAY
    lane = world.network[meta.lane_index]
    if lane.closed_interval is None:
        return LaneChangeDecision.STAY
    arr = world._lanes[meta.lane_index]
    slot = arr.slot_of(vid)
    x = float(arr.x[slot])
    v = float(arr.v[slot])
    start = lane.closed_interval[0]
    urgency = world.lc_params[meta.level].urgency_distance
    if x >= start or start - x > urgency:
        return LaneChangeDecision.STAY
    my_params = world.cf_params[meta.level]
    my_thr = world.lc_params[meta.level].accept_decel_threshold
    for target_index in (meta.lane_index + 1, meta.lane_index - 1):
        if not 0 <= target_index < len(world.network):
            continue
        target = world.network[target_index]
        if target.is_closed_at(x) or (target.closed_interval is not None
                                      and x < target.closed_interval[0] <= start):
            continue
        leader_id, follower_id = world.neighbours(target_index, x, exclude=vid)
        ok = True
        if leader_id is not None:
            lx, lv = world.longitudinal_state_of(leader_id)
            lead_gap = lx - x - world.length_of(leader_id)
            if lead_gap <= 0.0:
                ok = False
            else:
                larr = world._lanes[target_index]
                l_acc = float(larr.acc[larr.slot_of(leader_id)])
                my_acc = acceleration(v, my_params, gap=lead_gap, leader_speed=lv,
                                      desired_speed=meta.v0_eff, leader_accel=l_acc)
                if my_acc < -my_thr:
                    ok = False
        if ok and follower_id is not None:
            fx, fv = world.longitudinal_state_of(follower_id)
            foll_gap = x - fx - meta.length
            if foll_gap <= 0.0:
                ok = False
            else:
                f_meta = world._registry[follower_id]
                f_params = world.cf_params[f_meta.level]
                f_lc = world.lc_params[f_meta.level]
                f_acc = acceleration(fv, f_params, gap=foll_gap, leader_speed=v,
                                     desired_speed=f_meta.v0_eff,
                                     leader_accel=float(arr.acc[slot]))
                if f_acc < -f_lc.accept_decel_threshold * (1.0 + f_lc.cooperation):
                    ok = False
        if ok:
            return (LaneChangeDecision.CHANGE_RIGHT if target_index > meta.lane_index
                    else LaneChangeDecision.CHANGE_LEFT)
    return LaneChangeDecision.STAY
