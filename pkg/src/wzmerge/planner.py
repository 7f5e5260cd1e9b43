"""Two-agent merge game: trajectory sampling, payoffs, equilibria, execution.

A vehicle that must leave a closed lane (the ego) is paired with the nearest
vehicle behind it on the target lane (the follower).  Each agent gets a small
menu of candidate trajectories over a 6 s horizon; a bimatrix game over the
menus is solved for pure Nash equilibria and the selected joint plan is pushed
into the simulation as overrides for one 2 s replan interval.  The pair is
dissolved once the ego sits within ``merge_completion_epsilon`` of the target
centreline at a replan boundary.

Utilities are affine combinations of three normalized components: a safety
term driven by the minimum pairwise distance, a progress term driven by own
path length, and a traffic-disruption term driven by own worst speed drop.
Candidate longitudinal profiles are capped against the closure wall and a
constant-speed prediction of the relevant non-game leader before payoffs are
computed, so the menus never contain plans that drive through other traffic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    EMERGENCY_DECEL,
    SIM_DT,
    LaneGeometry,
    Manoeuvre,
    Trajectory,
    VehicleState,
    lateral_offset,
    smoothstep,
)
from .sim import DEFAULT_VEHICLE_WIDTH, LANE_CHANGE_DURATION, World

PROCEED_ACCELS = (0.0, 1.0, -1.0)    # m/s^2 menu for Proceed and Merge
WAIT_DECELS = (-1.5, -2.5, -4.0)     # m/s^2 menu for Wait
ALIGN_DRIFT = 1.0                    # m/s slowdown below the stream to unbox


# ------------------------------------------------------------------- types

@dataclass(frozen=True)
class UtilityWeights:
    """Affine payoff scaling: utility = base * (w . components)."""

    base: float = 10.0
    w_safety: float = 0.5
    w_progress: float = 0.2
    w_traffic: float = 0.3

    def __post_init__(self):
        if self.base <= 0.0:
            raise ValueError(f"base must be positive, got {self.base}")
        if min(self.w_safety, self.w_progress, self.w_traffic) < 0.0:
            raise ValueError("component weights must be non-negative")
        total = self.w_safety + self.w_progress + self.w_traffic
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"component weights must sum to 1, got {total}")


@dataclass(frozen=True)
class SafetyParams:
    d_buffer: float = 5.0   # m, distance at or below which safety is zero
    d_thr: float = 10.0     # m, ramp width up to full safety credit

    def __post_init__(self):
        if self.d_buffer < 0.0 or self.d_thr <= 0.0:
            raise ValueError("d_buffer must be >= 0 and d_thr > 0")


@dataclass(frozen=True)
class ProgressParams:
    p_thr: float = math.log(121.0)  # saturates at 120 m of path

    def __post_init__(self):
        if self.p_thr <= 0.0:
            raise ValueError("p_thr must be positive")


@dataclass(frozen=True)
class TrafficParams:
    speed_thr: float = 25.0  # (m/s)^2, quadratic penalty scale on speed drop

    def __post_init__(self):
        if self.speed_thr <= 0.0:
            raise ValueError("speed_thr must be positive")


@dataclass(frozen=True)
class PlannerParams:
    horizon: float = 6.0
    replan_interval: float = 2.0
    samples_per_manoeuvre: int = 3
    merge_completion_epsilon: float = 0.2

    def __post_init__(self):
        if self.horizon <= 0.0 or self.replan_interval <= 0.0:
            raise ValueError("horizon and replan_interval must be positive")
        if self.replan_interval > self.horizon:
            raise ValueError("replan_interval cannot exceed the horizon")
        if not 1 <= self.samples_per_manoeuvre <= 3:
            raise ValueError("samples_per_manoeuvre must be 1..3")
        if self.merge_completion_epsilon <= 0.0:
            raise ValueError("merge_completion_epsilon must be positive")

    @property
    def horizon_steps(self) -> int:
        return int(round(self.horizon / SIM_DT))

    @property
    def replan_steps(self) -> int:
        return int(round(self.replan_interval / SIM_DT))


@dataclass(frozen=True)
class PlannerSettings:
    """Bundle of everything one game solve needs."""

    params: PlannerParams = field(default_factory=PlannerParams)
    weights: UtilityWeights = field(default_factory=UtilityWeights)
    safety: SafetyParams = field(default_factory=SafetyParams)
    progress: ProgressParams = field(default_factory=ProgressParams)
    traffic: TrafficParams = field(default_factory=TrafficParams)


@dataclass
class PayoffTable:
    """Bimatrix payoffs; row player is the ego, column player the follower.

    Trajectory lists are optional so tables can also carry bare matrices
    (hand-built games, replay of logged games); when present their lengths
    must match the matrix shape.
    """

    ego_trajectories: Optional[List[Trajectory]]
    follower_trajectories: Optional[List[Trajectory]]
    u_ego: np.ndarray
    u_follower: np.ndarray
    d_min: Optional[np.ndarray] = None  # pairwise clearance per cell, metres

    def __post_init__(self):
        self.u_ego = np.asarray(self.u_ego, dtype=float)
        self.u_follower = np.asarray(self.u_follower, dtype=float)
        if self.u_ego.ndim != 2 or self.u_ego.shape != self.u_follower.shape:
            raise ValueError("payoff matrices must be 2-D with equal shapes")
        if min(self.u_ego.shape) < 1:
            raise ValueError("payoff matrices must be non-empty")
        if not (np.all(np.isfinite(self.u_ego)) and np.all(np.isfinite(self.u_follower))):
            raise ValueError("payoff entries must be finite")
        if self.ego_trajectories is not None and \
                len(self.ego_trajectories) != self.u_ego.shape[0]:
            raise ValueError("ego trajectory count must match matrix rows")
        if self.follower_trajectories is not None and \
                len(self.follower_trajectories) != self.u_ego.shape[1]:
            raise ValueError("follower trajectory count must match matrix columns")
        if self.d_min is not None:
            self.d_min = np.asarray(self.d_min, dtype=float)
            if self.d_min.shape != self.u_ego.shape:
                raise ValueError("d_min must match the payoff matrix shape")


@dataclass
class InteractionPair:
    """One ego/follower engagement; lives from pairing until merge completion
    or despawn of the ego."""

    ego_id: int
    follower_id: Optional[int]
    target_lane_index: int
    created_step: int
    active: bool = True
    merge_start_step: Optional[int] = None  # set when a Merge plan first runs
    merge_y0: float = 0.0                   # lateral position at merge onset
    origin_lane_index: Optional[int] = None  # ego lane at pairing time

    def __post_init__(self):
        if self.follower_id is not None and self.follower_id == self.ego_id:
            raise ValueError("ego and follower must be distinct vehicles")

    @property
    def created_at(self) -> float:
        return self.created_step * SIM_DT


@dataclass
class PlanRecord:
    """Outcome of one solve: the table, the equilibrium set, the choice.

    ``executed`` is False when the clearance veto rejected the selected cell
    and both agents were left under car-following for the interval.
    """

    time: float
    ego_id: int
    follower_id: Optional[int]
    table: PayoffTable
    equilibria: List[Tuple[int, int]]
    selected: Tuple[int, int]
    executed: bool = True


# --------------------------------------------------------------- utilities

def min_distance(t1: Trajectory, t2: Trajectory) -> float:
    """Minimum instantaneous Euclidean distance between two synchronized
    trajectories."""
    if len(t1) != len(t2):
        raise ValueError(f"trajectory lengths differ: {len(t1)} vs {len(t2)}")
    if abs(t1.t0 - t2.t0) > 1e-9 or t1.dt != t2.dt:
        raise ValueError("trajectories must share t0 and dt")
    d = np.hypot(t1.xs - t2.xs, t1.ys - t2.ys)
    return float(np.min(d))


def safety_utility(t1: Trajectory, t2: Trajectory, params: SafetyParams) -> float:
    """0 at or inside the buffer distance, ramping linearly to 1 over d_thr."""
    d = min_distance(t1, t2)
    if d <= params.d_buffer:
        return 0.0
    return min(1.0, (d - params.d_buffer) / params.d_thr)


def progress_utility(trajectory: Trajectory, params: ProgressParams) -> float:
    """Log-saturating credit for own path length."""
    return min(1.0, math.log(trajectory.path_length + 1.0) / params.p_thr)


def traffic_utility(trajectory: Trajectory, params: TrafficParams) -> float:
    """Quadratic penalty on the worst speed drop below the initial speed."""
    drop = max(0.0, float(trajectory.speeds[0]) - float(np.min(trajectory.speeds)))
    return 1.0 - min(1.0, drop * drop / params.speed_thr)


def total_utility(safety: float, progress: float, traffic: float,
                  weights: UtilityWeights) -> float:
    """Affine combination of the three normalized components."""
    for name, value in (("safety", safety), ("progress", progress),
                        ("traffic", traffic)):
        if not -1e-12 <= value <= 1.0 + 1e-12:
            raise ValueError(f"{name} component outside [0, 1]: {value}")
    return weights.base * (weights.w_safety * safety
                           + weights.w_progress * progress
                           + weights.w_traffic * traffic)


# ---------------------------------------------------------------- sampling

def _accel_menu(manoeuvre: Manoeuvre, samples: int) -> Tuple[float, ...]:
    menu = WAIT_DECELS if manoeuvre is Manoeuvre.WAIT else PROCEED_ACCELS
    return menu[:samples]


def _longitudinal_profile(x0: float, v0: float, accel: float, v_cap: float,
                          n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Constant-accel speed profile clamped to [0, v_cap], integrated
    semi-implicitly (position uses the updated speed).  The speed law is the
    closed form clip(v0 + a*k*dt) so clamp times land exactly."""
    v = np.clip(v0 + accel * SIM_DT * np.arange(n), 0.0, v_cap)
    v[0] = v0  # the current state is never reshaped by the cap
    x = np.empty(n)
    x[0] = x0
    x[1:] = x0 + np.cumsum(v[1:] * SIM_DT)
    return x, v


def _compose(vehicle_id: int, length: float, level, manoeuvre: Manoeuvre,
             t0: float, xs: np.ndarray, ys: np.ndarray, v_long: np.ndarray,
             speed0: float, heading0: float, lane_index: int) -> Trajectory:
    """Package longitudinal and lateral profiles into a trajectory; planar
    speed and heading are recovered from the displacement rates."""
    n = len(xs)
    vy = np.concatenate(([0.0], np.diff(ys) / SIM_DT))
    speeds = np.hypot(v_long, vy)
    headings = np.arctan2(vy, v_long)
    speeds[0] = speed0
    headings[0] = heading0
    return Trajectory(t0=t0, dt=SIM_DT, manoeuvre=manoeuvre,
                      vehicle_id=vehicle_id, length=length, level=level,
                      xs=xs, ys=ys, speeds=speeds, headings=headings,
                      lanes=np.full(n, lane_index, dtype=int))


def _merge_lateral(y0: float, y1: float, n: int, offset_steps: int = 0) -> np.ndarray:
    """Smoothstep ramp from y0 to y1 over the lane-change duration; the ramp
    started ``offset_steps`` steps in the past for committed merges."""
    k = np.arange(n) + offset_steps
    u = k * SIM_DT / LANE_CHANGE_DURATION
    ys = y0 + (y1 - y0) * smoothstep(u)
    ys[u >= 1.0] = y1
    return ys


def _ramp_elapsed_steps(progress: float) -> int:
    """Steps into the lane-change ramp that correspond to a given fraction of
    completed lateral travel (inverse of the smoothstep schedule).  Anchoring
    the continued ramp on realized lateral progress rather than wall-clock
    time lets a merge that was held up resume from where it actually is."""
    p = min(max(progress, 0.0), 1.0)
    lo, hi = 0.0, 1.0
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        if mid * mid * (3.0 - 2.0 * mid) < p:
            lo = mid
        else:
            hi = mid
    return int(round(0.5 * (lo + hi) * LANE_CHANGE_DURATION / SIM_DT))


def sample_trajectories(agent: VehicleState, manoeuvre: Manoeuvre,
                        reference_lane: LaneGeometry, params: PlannerParams,
                        desired_speed: Optional[float] = None,
                        t0: float = 0.0) -> List[Trajectory]:
    """Candidate trajectories for one manoeuvre class.

    Proceed and Wait stay at the agent's current lateral position; Merge adds
    a smoothstep ramp onto the centreline of ``reference_lane`` over the
    first 3 s and tags every state with the target lane.  ``desired_speed``
    caps accelerating profiles; omit it for an uncapped menu.
    """
    n = params.horizon_steps + 1
    x0, y0 = agent.position
    v_long = agent.speed * math.cos(agent.heading)
    v_cap = math.inf if desired_speed is None else desired_speed
    if manoeuvre is Manoeuvre.MERGE:
        y1 = float(np.asarray(reference_lane.centreline, dtype=float)[0][1])
        ys = _merge_lateral(y0, y1, n)
        lane_index = reference_lane.index
    else:
        ys = np.full(n, y0)
        lane_index = agent.lane_index
    out = []
    for accel in _accel_menu(manoeuvre, params.samples_per_manoeuvre):
        xs, v = _longitudinal_profile(x0, v_long, accel, v_cap, n)
        out.append(_compose(agent.vehicle_id, agent.length, agent.level,
                            manoeuvre, t0, xs, ys.copy(), v,
                            agent.speed, agent.heading, lane_index))
    return out


def _hold_lateral_sample(agent: VehicleState, v_long: float,
                         params: PlannerParams, t0: float,
                         lane_index: int) -> Trajectory:
    """Braking profile that freezes the lateral position: the paused state of
    a committed merge whose continued ramp would cut into occupied space."""
    n = params.horizon_steps + 1
    xs, v = _longitudinal_profile(agent.position[0], v_long, WAIT_DECELS[1],
                                  math.inf, n)
    ys = np.full(n, agent.position[1])
    return _compose(agent.vehicle_id, agent.length, agent.level,
                    Manoeuvre.MERGE, t0, xs, ys, v,
                    agent.speed, agent.heading, lane_index)


def _committed_merge_samples(agent: VehicleState, v_long: float,
                             target_lane: LaneGeometry, params: PlannerParams,
                             desired_speed: float, t0: float, y0: float,
                             elapsed_steps: int) -> List[Trajectory]:
    """Mid-change menu: the lateral ramp committed at merge onset continues
    on its original absolute timetable; only the longitudinal profile varies
    (all Proceed and Wait accel levels)."""
    n = params.horizon_steps + 1
    y1 = float(np.asarray(target_lane.centreline, dtype=float)[0][1])
    ys = _merge_lateral(y0, y1, n, offset_steps=elapsed_steps)
    out = []
    for accel in PROCEED_ACCELS + WAIT_DECELS:
        xs, v = _longitudinal_profile(agent.position[0], v_long, accel,
                                      desired_speed, n)
        out.append(_compose(agent.vehicle_id, agent.length, agent.level,
                            Manoeuvre.MERGE, t0, xs, ys.copy(), v,
                            agent.speed, agent.heading, target_lane.index))
    return out


# ----------------------------------------------------------------- pairing

def find_follower(ego: VehicleState, candidates: Iterable[VehicleState],
                  target_lane: LaneGeometry) -> Optional[int]:
    """Nearest target-lane vehicle strictly behind the ego.

    "Behind" projects the relative position onto the ego heading; abreast
    vehicles (zero projection) are excluded.  Returns a vehicle id or None.
    """
    ux, uy = math.cos(ego.heading), math.sin(ego.heading)
    best: Optional[Tuple[float, int]] = None
    for cand in candidates:
        if cand.lane_index != target_lane.index or cand.vehicle_id == ego.vehicle_id:
            continue
        dx = cand.position[0] - ego.position[0]
        dy = cand.position[1] - ego.position[1]
        if dx * ux + dy * uy >= 0.0:
            continue
        key = (math.hypot(dx, dy), cand.vehicle_id)
        if best is None or key < best:
            best = key
    return None if best is None else best[1]


# ---------------------------------------------------------- payoffs / Nash

def build_payoff_table(ego_trajectories: Sequence[Trajectory],
                       follower_trajectories: Sequence[Trajectory],
                       weights: UtilityWeights, safety: SafetyParams,
                       progress: ProgressParams, traffic: TrafficParams,
                       ) -> PayoffTable:
    """Evaluate the bimatrix game: the safety component is shared per cell
    while progress and traffic depend only on each agent's own trajectory."""
    ego_trajectories = list(ego_trajectories)
    follower_trajectories = list(follower_trajectories)
    if not ego_trajectories or not follower_trajectories:
        raise ValueError("both trajectory menus must be non-empty")
    ref = ego_trajectories[0]
    for t in ego_trajectories + follower_trajectories:
        if len(t) != len(ref) or abs(t.t0 - ref.t0) > 1e-9:
            raise ValueError("all menu trajectories must share t0 and horizon")
    xe = np.stack([t.xs for t in ego_trajectories])
    ye = np.stack([t.ys for t in ego_trajectories])
    xf = np.stack([t.xs for t in follower_trajectories])
    yf = np.stack([t.ys for t in follower_trajectories])
    d = np.hypot(xe[:, None, :] - xf[None, :, :], ye[:, None, :] - yf[None, :, :])
    d_min = d.min(axis=2)
    s_mat = np.where(d_min <= safety.d_buffer, 0.0,
                     np.minimum(1.0, (d_min - safety.d_buffer) / safety.d_thr))
    prog_e = np.array([progress_utility(t, progress) for t in ego_trajectories])
    traf_e = np.array([traffic_utility(t, traffic) for t in ego_trajectories])
    prog_f = np.array([progress_utility(t, progress) for t in follower_trajectories])
    traf_f = np.array([traffic_utility(t, traffic) for t in follower_trajectories])
    w = weights
    u_ego = w.base * (w.w_safety * s_mat + w.w_progress * prog_e[:, None]
                      + w.w_traffic * traf_e[:, None])
    u_fol = w.base * (w.w_safety * s_mat + w.w_progress * prog_f[None, :]
                      + w.w_traffic * traf_f[None, :])
    return PayoffTable(ego_trajectories, follower_trajectories, u_ego, u_fol,
                       d_min=d_min)


def find_pure_nash(table: PayoffTable) -> List[Tuple[int, int]]:
    """All cells where each payoff is a weak best response to the other
    agent's strategy, in lexicographic (row, column) order."""
    ue, uf = table.u_ego, table.u_follower
    ego_best = ue >= ue.max(axis=0, keepdims=True)
    fol_best = uf >= uf.max(axis=1, keepdims=True)
    return [(int(i), int(j)) for i, j in np.argwhere(ego_best & fol_best)]


def select_equilibrium(equilibria: Sequence[Tuple[int, int]],
                       table: PayoffTable) -> Tuple[int, int]:
    """Highest joint welfare, then highest ego payoff, then lexicographic
    order.  An empty equilibrium set falls back to maximin strategies for
    both agents (ties again lexicographic)."""
    ue, uf = table.u_ego, table.u_follower
    if equilibria:
        best_cell = None
        best_key = None
        for i, j in equilibria:
            key = (ue[i, j] + uf[i, j], ue[i, j])
            if best_key is None or key > best_key:
                best_key, best_cell = key, (i, j)
        return best_cell
    return int(np.argmax(ue.min(axis=1))), int(np.argmax(uf.min(axis=0)))


# ----------------------------------------------------- capping predictions

def _leader_rear_profile(world: World, lane_index: int, x_from: float,
                         exclude: set,
                         n: int) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """(rear-bumper arc, speed) of the nearest non-game vehicle ahead over
    the horizon, read from a car-following rollout of the whole lane.  The
    rollout propagates queue discharge waves, so a slot that is about to
    open ahead of a creeping leader is visible to the caps rather than
    pessimistically assumed shut."""
    ids, xs, vs, lengths = world.forecast_lane(lane_index, n)
    # inclusive so a vehicle dead level with x_from still binds as leader;
    # stopped queues produce exact arc ties
    for i in np.nonzero(xs[:, 0] >= x_from)[0]:  # ordered by arc, nearest first
        if int(ids[i]) in exclude:
            continue
        return xs[i] - lengths[i], vs[i].copy()
    return None


def _neighbour_prediction(world: World, vehicle_id: Optional[int], n: int,
                          t0: float) -> Optional[Trajectory]:
    """Car-following forecast of a vehicle that is not being overridden,
    taken from its lane's rollout, at its current lateral position.  Used
    to adjudicate merges against the motion a neighbour will actually make
    rather than a game column it is not executing."""
    if vehicle_id is None or not world.contains(vehicle_id):
        return None
    state = world.state_of(vehicle_id)
    ids, xs, vs, _ = world.forecast_lane(state.lane_index, n)
    row = int(np.nonzero(ids == vehicle_id)[0][0])
    ys = np.full(n, state.position[1])
    # speeds from displacements: a rollout of an overridden vehicle that has
    # diverged from its buffer snaps to the buffered position on the first
    # step, and only the implied speed keeps the profile self-consistent
    v_long = np.concatenate(([float(vs[row, 0])], np.diff(xs[row]) / SIM_DT))
    return _compose(vehicle_id, state.length, state.level, Manoeuvre.PROCEED,
                    t0, xs[row].copy(), ys, v_long, state.speed,
                    state.heading, state.lane_index)


def _predicts_contact(t1: Trajectory, t2: Trajectory) -> bool:
    """True when two plans enter bounding-box conflict at any horizon step:
    longitudinal spacing under a vehicle length plus margin while laterally
    overlapped.  Mirrors the simulation's collision geometry, so a vetoed
    cell is exactly one predicting a logged collision."""
    dx_thr = max(t1.length, t2.length) + 0.5
    return bool(np.any((np.abs(t1.xs - t2.xs) < dx_thr)
                       & (np.abs(t1.ys - t2.ys) < DEFAULT_VEHICLE_WIDTH)))


def _respects_bound(traj: Trajectory,
                    rear: Optional[Tuple[np.ndarray, np.ndarray]],
                    min_gap: float) -> bool:
    """True when a capped plan actually stays behind the leader-rear bound.
    Capping guarantees this except when the emergency-rate floor wins, i.e.
    the plan cannot physically stop in the room it has; such a plan must not
    be trusted by anything that compares predicted positions, because the
    execution guards will rewrite it and the realized motion will sit metres
    short of the planned one."""
    if rear is None:
        return True
    return bool(np.all(traj.xs <= rear[0] - min_gap + 0.3))


def _wall_ahead(world: World, lane_index: int, x_from: float) -> Optional[float]:
    lane = world.network[lane_index]
    if lane.closed_interval is not None and x_from < lane.closed_interval[0]:
        return lane.closed_interval[0]
    return None


def _cap_trajectory(traj: Trajectory,
                    rear: Optional[Tuple[np.ndarray, np.ndarray]],
                    wall: Optional[float], min_gap: float, headway: float,
                    max_accel: float,
                    comfort_decel: float = 2.0,
                    drift_floor: float = 0.0) -> Trajectory:
    """Clip a candidate against the predicted leader and the closure wall.

    Two constraints per step: a hard non-overlap bound (never closer than
    min_gap to the leader's rear, never past wall - min_gap) and a comfort
    approach envelope v <= sqrt(v_lead^2 + 2 b h), where h is the headroom
    to the speed-dependent following margin (min_gap + headway * v).  The
    envelope carries inevitable deceleration into the horizon: a plan may
    never hold more speed toward slower traffic or the closure than it can
    shed at comfortable braking, even when the contact point lies beyond
    the horizon end.

    ``drift_floor`` > 0 softens the leader constraint for alignment against
    a vehicle in an adjacent lane: the clamp never forces the plan more than
    ``drift_floor`` below the leader's own speed, so a plan starting level
    with (or inside the margin of) the reference vehicle falls back at a
    bounded relative rate instead of braking to a halt.  Only meaningful
    with wall=None; physical leaders in the plan's own lane use the default
    hard behaviour.

    The capped profile is planned as speeds, not positions: recovery after
    a clamp is limited to ``max_accel`` and braking is floored at the
    physical emergency rate, so the result stays kinematically sane."""
    if rear is None and wall is None:
        return traj
    xs, speeds = traj.xs, traj.speeds
    sv = np.diff(xs) / SIM_DT
    v0 = float(speeds[0]) * math.cos(float(traj.headings[0]))
    vprev = np.concatenate(([v0], sv[:-1]))
    two_b = 2.0 * comfort_decel
    ok = True
    if wall is not None:
        head = (wall - min_gap) - xs[:-1]
        ok = bool(np.all(sv * SIM_DT <= head + 1e-12)
                  and np.all(sv * sv <= two_b * np.maximum(head, 0.0) + 1e-9))
    if ok and rear is not None:
        rear_x, rear_v = rear
        hard = rear_x[1:] - min_gap - xs[:-1]
        margin_head = hard - headway * vprev
        env_sq = rear_v[1:] * rear_v[1:] + two_b * np.maximum(margin_head, 0.0)
        ok = bool(np.all(sv * SIM_DT <= hard + 1e-12)
                  and np.all(sv * sv <= env_sq + 1e-9))
    if ok:
        return traj
    n = len(xs)
    a_rec = max(max_accel, max(PROCEED_ACCELS))  # never clips planned accels
    wall_bound = math.inf if wall is None else wall - min_gap
    new_x = np.empty(n)
    new_x[0] = xs[0]
    v_prev = v0
    for k in range(1, n):
        v_plan = (xs[k] - xs[k - 1]) / SIM_DT
        v_k = min(v_plan, v_prev + a_rec * SIM_DT)
        if math.isfinite(wall_bound):
            v_k = min(v_k, (wall_bound - new_x[k - 1]) / SIM_DT,
                      math.sqrt(two_b * max(wall_bound - new_x[k - 1], 0.0)))
        if rear is not None:
            rear_x, rear_v = rear
            hard = rear_x[k] - min_gap - new_x[k - 1]
            v_k = min(v_k, hard / SIM_DT)
            head = hard - headway * v_prev
            v_k = min(v_k, math.sqrt(rear_v[k] * rear_v[k]
                                     + two_b * max(head, 0.0)))
            if drift_floor > 0.0:
                v_k = max(v_k, min(v_plan, v_prev + a_rec * SIM_DT,
                                   max(rear_v[k] - drift_floor, 0.0)))
        v_k = max(v_k, v_prev - EMERGENCY_DECEL * SIM_DT, 0.0)
        new_x[k] = new_x[k - 1] + v_k * SIM_DT
        v_prev = v_k
    v_long = np.concatenate(([speeds[0]], np.diff(new_x) / SIM_DT))
    return _compose(traj.vehicle_id, traj.length, traj.level, traj.manoeuvre,
                    traj.t0, new_x, traj.ys.copy(), v_long,
                    float(speeds[0]), float(traj.headings[0]),
                    int(traj.lanes[0]))


# -------------------------------------------------------------- plan cycle

def _truncate(traj: Trajectory, n_states: int) -> Trajectory:
    if n_states >= len(traj):
        return traj
    return Trajectory(t0=traj.t0, dt=traj.dt, manoeuvre=traj.manoeuvre,
                      vehicle_id=traj.vehicle_id, length=traj.length,
                      level=traj.level, xs=traj.xs[:n_states],
                      ys=traj.ys[:n_states], speeds=traj.speeds[:n_states],
                      headings=traj.headings[:n_states],
                      lanes=traj.lanes[:n_states])


def _release_pair(world: World, pair: InteractionPair) -> None:
    if world.contains(pair.ego_id):
        world.release_override(pair.ego_id)
    if pair.follower_id is not None and world.contains(pair.follower_id):
        world.release_override(pair.follower_id)


def plan_and_execute(world: World, pair: InteractionPair,
                     settings: PlannerSettings) -> Optional[PlanRecord]:
    """Run one receding-horizon cycle for a pair at the current sim time.

    Checks merge completion, samples both menus, caps them against non-game
    traffic and the closure wall, solves the game, and pushes the selected
    joint plan into the world for one replan interval.  A contact veto
    refuses to execute any joint plan that predicts bounding-box overlap
    between the agents; they then stay under car-following until the next
    boundary.  Returns the solve record, or None when the pair
    ended (completion, ego despawn, or the follower overtook a not-yet
    merging ego).
    """
    if not pair.active:
        return None
    if not world.contains(pair.ego_id):
        pair.active = False
        if pair.follower_id is not None and world.contains(pair.follower_id):
            world.release_override(pair.follower_id)
        return None
    if pair.follower_id is not None and not world.contains(pair.follower_id):
        pair.follower_id = None  # continue as a single-agent plan

    params = settings.params
    t0 = world.time
    ego_state = world.state_of(pair.ego_id)
    target_lane = world.network[pair.target_lane_index]

    if pair.merge_start_step is not None:
        off = lateral_offset(target_lane, ego_state.position)
        if abs(off) < params.merge_completion_epsilon:
            pair.active = False
            _release_pair(world, pair)
            return None
    else:
        behind = world.neighbours(pair.target_lane_index,
                                  world.longitudinal_state_of(pair.ego_id)[0],
                                  exclude=pair.ego_id)[1]
        if pair.follower_id is not None and behind != pair.follower_id:
            # the vehicle actually behind the merge point changed (overtake,
            # despawn, or a new arrival); dissolve and re-pair next step
            pair.active = False
            _release_pair(world, pair)
            return None

    exclude = {pair.ego_id}
    if pair.follower_id is not None:
        exclude.add(pair.follower_id)
    n = params.horizon_steps + 1
    ego_x, ego_vlong = world.longitudinal_state_of(pair.ego_id)
    ego_v0 = world.effective_desired_speed(pair.ego_id)
    ego_cf = world.params_of(pair.ego_id)
    target_rear = _leader_rear_profile(world, target_lane.index, ego_x, exclude, n)

    if pair.merge_start_step is None:
        own_lane = world.network[ego_state.lane_index]
        proceed = sample_trajectories(ego_state, Manoeuvre.PROCEED, own_lane,
                                      params, desired_speed=ego_v0, t0=t0)
        wait = sample_trajectories(ego_state, Manoeuvre.WAIT, own_lane,
                                   params, desired_speed=ego_v0, t0=t0)
        own_rear = _leader_rear_profile(world, ego_state.lane_index, ego_x,
                                        exclude, n)
        own_wall = _wall_ahead(world, ego_state.lane_index, ego_x)
        ego_trajs = []
        # merging is only on the menu while the ego is still clear of the
        # target-lane leader's protected zone; capping cannot retreat, so a
        # merge that starts inside it would slide into the leader's flank.
        # The zone widens with the ego's closing speed: the ego must be able
        # to come down to the leader's speed within the gap at the strongest
        # decel on its own menu, whatever the discharge forecast promises
        merge_open = True
        if target_rear is not None:
            lead_closing = max(ego_vlong - target_rear[1][0], 0.0)
            merge_open = ego_x <= (
                target_rear[0][0] - ego_cf.min_gap
                - lead_closing * lead_closing / (2.0 * -WAIT_DECELS[-1]))
        if merge_open:
            # the slot must also clear whoever sits behind it: an inserted
            # body inside the execution floor margin position-pins that
            # vehicle at whatever speed it carries, and the floor reads a
            # leader state one application step stale, hence the rv term.
            # A closing vehicle must additionally be able to come down to
            # the insertion speed within the gap at the strongest yield the
            # game ever asks for, or the pin happens a moment later anyway
            # and the chain behind it cannot absorb the stop
            rear_id = world.neighbours(target_lane.index, ego_x,
                                       exclude=pair.ego_id)[1]
            if rear_id is not None:
                rx, rv = world.longitudinal_state_of(rear_id)
                closing = max(rv - ego_vlong, 0.0)
                rear_margin = (0.5 * world.params_of(rear_id).min_gap
                               + SIM_DT * rv + 0.5
                               + closing * closing / (2.0 * -WAIT_DECELS[-1]))
                merge_open = rx <= ego_x - ego_state.length - rear_margin
        if merge_open:
            merge = sample_trajectories(ego_state, Manoeuvre.MERGE, target_lane,
                                        params, desired_speed=ego_v0, t0=t0)
            capped = [_cap_trajectory(t, target_rear, None, ego_cf.min_gap,
                                      ego_cf.headway, ego_cf.max_accel,
                                      ego_cf.comfort_decel)
                      for t in merge]
            # a merge the ego cannot brake into is off the menu: its planned
            # positions overrun the bound, so every prediction made from
            # them (contact veto included) would be fiction
            ego_trajs += [t for t in capped
                          if _respects_bound(t, target_rear, ego_cf.min_gap)]
        own_rows = [_cap_trajectory(t, own_rear, own_wall, ego_cf.min_gap,
                                    ego_cf.headway, ego_cf.max_accel,
                                    ego_cf.comfort_decel)
                    for t in proceed + wait]
        # own-lane rows are additionally aligned behind the target-lane
        # leader (soft drift when starting level with it), but only while
        # that stream is congested: racing a creeping queue in the emptying
        # lane just wedges the ego at the closure, whereas a free-flowing
        # stream is acquired by sliding forward into a slot at the ego's
        # own preferred speed
        if target_rear is not None and target_rear[1][0] < 0.5 * ego_v0:
            own_rows = [_cap_trajectory(t, target_rear, None, ego_cf.min_gap,
                                        ego_cf.headway, ego_cf.max_accel,
                                        ego_cf.comfort_decel,
                                        drift_floor=ALIGN_DRIFT)
                        for t in own_rows]
        ego_trajs += own_rows
    else:
        y_target = float(np.asarray(target_lane.centreline, dtype=float)[0][1])
        span = y_target - pair.merge_y0
        progress = 0.0 if span == 0.0 else \
            (ego_state.position[1] - pair.merge_y0) / span
        menu = _committed_merge_samples(ego_state, ego_vlong, target_lane,
                                        params, ego_v0, t0, pair.merge_y0,
                                        _ramp_elapsed_steps(progress))
        cap_passes = [(target_rear, None)]
        if pair.origin_lane_index is not None:
            origin = world.network[pair.origin_lane_index]
            oy = float(np.asarray(origin.centreline, dtype=float)[0][1])
            if abs(ego_state.position[1] - oy) < DEFAULT_VEHICLE_WIDTH + 0.4:
                # still laterally over the origin lane: its leader and its
                # closure constrain the plan until the box has cleared
                cap_passes.append((_leader_rear_profile(world, origin.index,
                                                        ego_x, exclude, n),
                                   _wall_ahead(world, origin.index, ego_x)))
        ego_trajs = menu
        for rear_i, wall_i in cap_passes:
            ego_trajs = [_cap_trajectory(t, rear_i, wall_i, ego_cf.min_gap,
                                         ego_cf.headway, ego_cf.max_accel,
                                         ego_cf.comfort_decel)
                         for t in ego_trajs]

    if pair.follower_id is not None:
        fol_state = world.state_of(pair.follower_id)
        fol_v0 = world.effective_desired_speed(pair.follower_id)
        fol_cf = world.params_of(pair.follower_id)
        fol_lane = world.network[fol_state.lane_index]
        fol_menu = (sample_trajectories(fol_state, Manoeuvre.PROCEED, fol_lane,
                                        params, desired_speed=fol_v0, t0=t0)
                    + sample_trajectories(fol_state, Manoeuvre.WAIT, fol_lane,
                                          params, desired_speed=fol_v0, t0=t0))
        fol_x, _ = world.longitudinal_state_of(pair.follower_id)
        fol_rear = _leader_rear_profile(world, fol_state.lane_index, fol_x,
                                        exclude, n)
        fol_wall = _wall_ahead(world, fol_state.lane_index, fol_x)
        fol_trajs = [_cap_trajectory(t, fol_rear, fol_wall, fol_cf.min_gap,
                                     fol_cf.headway, fol_cf.max_accel,
                                     fol_cf.comfort_decel)
                     for t in fol_menu]
        table = build_payoff_table(ego_trajs, fol_trajs, settings.weights,
                                   settings.safety, settings.progress,
                                   settings.traffic)
    else:
        # degenerate single-agent game: full safety credit, one dummy column
        u_col = np.array([[total_utility(1.0, progress_utility(t, settings.progress),
                                         traffic_utility(t, settings.traffic),
                                         settings.weights)] for t in ego_trajs])
        table = PayoffTable(ego_trajs, None, u_col, np.zeros_like(u_col))

    equilibria = find_pure_nash(table)
    selected = select_equilibrium(equilibria, table)

    sel_ego = table.ego_trajectories[selected[0]]
    if table.follower_trajectories is not None:
        safe_cell = not _predicts_contact(
            sel_ego, table.follower_trajectories[selected[1]])
    elif sel_ego.manoeuvre is Manoeuvre.MERGE:
        # single-agent menus still steer toward traffic: judge the selected
        # row against a car-following forecast of whichever vehicle actually
        # sits behind the merge point (typically a partner engaged in
        # another pair, which is why this one has no follower)
        shadow = world.neighbours(target_lane.index, ego_x,
                                  exclude=pair.ego_id)[1]
        pred = _neighbour_prediction(world, shadow, n, t0)
        safe_cell = pred is None or not _predicts_contact(sel_ego, pred)
    else:
        safe_cell = True
    n_exec = params.replan_steps + 1
    executed = False
    fol_plan = None
    if safe_cell:
        ego_plan = _truncate(sel_ego, n_exec)
        if pair.follower_id is not None:
            fol_plan = _truncate(table.follower_trajectories[selected[1]], n_exec)
            if ego_plan.manoeuvre is Manoeuvre.MERGE:
                # the follower's menu was capped against its own lane only;
                # an executed merge makes the ego's body a live leader there,
                # and a buffer blind to it would be position-pinned by the
                # execution floor at whatever speed it carries.  Cap the
                # applied row against the planned insertion; if even
                # emergency braking cannot respect that bound, the
                # insertion is infeasible and must not run
                ins = (ego_plan.xs - ego_state.length,
                       ego_plan.speeds * np.cos(ego_plan.headings))
                fol_plan = _cap_trajectory(fol_plan, ins, None,
                                           fol_cf.min_gap, fol_cf.headway,
                                           fol_cf.max_accel,
                                           fol_cf.comfort_decel)
                if not _respects_bound(fol_plan, ins, fol_cf.min_gap):
                    safe_cell = False
    if safe_cell:
        world.apply_external_trajectory(pair.ego_id, ego_plan)
        if fol_plan is not None:
            world.apply_external_trajectory(pair.follower_id, fol_plan)
        if ego_plan.manoeuvre is Manoeuvre.MERGE and pair.merge_start_step is None:
            pair.merge_start_step = world.step_index
            pair.merge_y0 = ego_state.position[1]
        executed = True
    elif pair.merge_start_step is not None:
        # the lateral motion is committed but the game cell is unsafe: the
        # follower stays under car-following, so judge the ego's rows against
        # a car-following forecast of the follower rather than the phantom
        # game column it will not execute.  Steer the clearance-maximizing
        # row; when even that row predicts contact, pause the ramp (hold the
        # lateral position, brake) and let a later cycle resume it from the
        # realized progress
        pred_id = pair.follower_id
        if pred_id is None:
            pred_id = world.neighbours(target_lane.index, ego_x,
                                       exclude=pair.ego_id)[1]
        pred = _neighbour_prediction(world, pred_id, n, t0)
        if pred is None:
            cand = table.ego_trajectories[int(np.argmax(table.d_min[:, selected[1]]))]
            blocked = False
        else:
            clearances = [min_distance(t, pred) for t in table.ego_trajectories]
            cand = table.ego_trajectories[int(np.argmax(clearances))]
            blocked = _predicts_contact(cand, pred)
        if blocked:
            cand = _hold_lateral_sample(ego_state, ego_vlong, params, t0,
                                        target_lane.index)
            for rear_i, wall_i in cap_passes:
                cand = _cap_trajectory(cand, rear_i, wall_i, ego_cf.min_gap,
                                       ego_cf.headway, ego_cf.max_accel,
                                       ego_cf.comfort_decel)
        world.apply_external_trajectory(pair.ego_id, _truncate(cand, n_exec))
        executed = True
    else:
        # vetoed before commitment: the ego must not fall back to blind
        # car-following (its own lane is emptying, so nothing ahead would
        # slow it); run the aligned own-lane cruise row for this interval
        hold = table.ego_trajectories[len(table.ego_trajectories) - 6]
        world.apply_external_trajectory(pair.ego_id, _truncate(hold, n_exec))
        executed = True
    return PlanRecord(time=t0, ego_id=pair.ego_id, follower_id=pair.follower_id,
                      table=table, equilibria=equilibria, selected=selected,
                      executed=executed)


# ------------------------------------------------------------- controller

class GamePlanner:
    """Pairs merging vehicles with target-lane followers and replans each
    pair on a fixed 2 s cadence.

    Call :meth:`update` once per loop iteration, before ``world.step()``.
    One game per ego; a vehicle engaged as a follower is excluded from other
    games until released.  When several pairs are due at the same boundary
    the furthest-downstream ego plans first.
    """

    def __init__(self, settings: Optional[PlannerSettings] = None,
                 dump_path: Optional[str] = None):
        self.settings = settings or PlannerSettings()
        self.dump_path = dump_path
        self._pairs: Dict[int, InteractionPair] = {}

    def active_pairs(self) -> List[InteractionPair]:
        return [p for p in self._pairs.values() if p.active]

    def engaged_ids(self) -> set:
        out = set(self._pairs)
        out.update(p.follower_id for p in self._pairs.values()
                   if p.follower_id is not None)
        return out

    def update(self, world: World) -> List[Tuple[float, PlanRecord]]:
        step = world.step_index
        for ego_id in list(self._pairs):
            pair = self._pairs[ego_id]
            if not pair.active:
                del self._pairs[ego_id]
            elif not world.contains(ego_id):
                if pair.follower_id is not None and world.contains(pair.follower_id):
                    world.release_override(pair.follower_id)
                del self._pairs[ego_id]
        # refresh not-yet-committed pairs whose counterpart answer changed:
        # a pair planned around a stand-in (follower None because the real
        # vehicle behind was engaged elsewhere) upgrades the moment that
        # vehicle frees up, and an overtake or new arrival re-pairs at once
        # instead of waiting for the next replan boundary
        engaged = self.engaged_ids()
        for ego_id in list(self._pairs):
            pair = self._pairs[ego_id]
            if pair.merge_start_step is not None:
                continue
            ego_x = world.longitudinal_state_of(ego_id)[0]
            behind = world.neighbours(pair.target_lane_index, ego_x,
                                      exclude=ego_id)[1]
            if behind is not None and behind != pair.follower_id \
                    and behind in engaged:
                behind = None
            if behind != pair.follower_id:
                pair.active = False
                _release_pair(world, pair)
                del self._pairs[ego_id]
        self._create_pairs(world, step)
        due = [p for p in self._pairs.values()
               if (step - p.created_step) % self.settings.params.replan_steps == 0]
        due.sort(key=lambda p: (-world.longitudinal_state_of(p.ego_id)[0],
                                p.ego_id))
        made = []
        for pair in due:
            record = plan_and_execute(world, pair, self.settings)
            if record is not None:
                made.append((world.time, record))
                if self.dump_path is not None:
                    self._dump(record)
            if not pair.active:
                self._pairs.pop(pair.ego_id, None)
        return made

    def _create_pairs(self, world: World, step: int) -> None:
        engaged = self.engaged_ids()
        for lane in world.network:
            if lane.closed_interval is None:
                continue
            start = lane.closed_interval[0]
            target_index = self._target_lane(world, lane.index)
            if target_index is None:
                continue
            ids, xs, _, _ = world.lane_occupancy(lane.index)
            if ids.size == 0:
                continue
            urgency = world.lane_change_params_of(int(ids[0])).urgency_distance
            in_zone = np.nonzero((xs < start) & (xs >= start - urgency))[0]
            for idx in in_zone[::-1]:  # furthest downstream first
                ego_id = int(ids[idx])
                if ego_id in engaged:
                    continue
                follower = world.neighbours(target_index, float(xs[idx]),
                                            exclude=ego_id)[1]
                if follower is not None and follower in engaged:
                    # the vehicle behind the merge point belongs to another
                    # pair: rather than leaving this ego unplanned at full
                    # speed, run it single-agent (capped and aligned, merge
                    # vetoed against a forecast of that vehicle) until the
                    # partner frees up and the pair upgrades
                    follower = None
                pair = InteractionPair(ego_id=ego_id, follower_id=follower,
                                       target_lane_index=target_index,
                                       created_step=step,
                                       origin_lane_index=lane.index)
                self._pairs[ego_id] = pair
                engaged.add(ego_id)
                if follower is not None:
                    engaged.add(follower)

    @staticmethod
    def _target_lane(world: World, lane_index: int) -> Optional[int]:
        for cand in (lane_index + 1, lane_index - 1):
            if 0 <= cand < len(world.network) and \
                    world.network[cand].closed_interval is None:
                return cand
        return None

    def _dump(self, record: PlanRecord) -> None:
        table = record.table
        payload = {
            "time": record.time,
            "ego": record.ego_id,
            "follower": record.follower_id,
            "ego_manoeuvres": [t.manoeuvre.value for t in table.ego_trajectories],
            "follower_manoeuvres": (
                None if table.follower_trajectories is None
                else [t.manoeuvre.value for t in table.follower_trajectories]),
            "u_ego": table.u_ego.tolist(),
            "u_follower": table.u_follower.tolist(),
            "equilibria": [list(c) for c in record.equilibria],
            "selected": list(record.selected),
        }
        with open(self.dump_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(payload) + "\n")
