"""Game-theoretic merge planner: utilities, equilibria, closed-loop execution.

Hand-frozen oracle values: safety (10-5)/10 = 0.5; progress ln(121)/ln(121)
= 1 at 120 m of path; traffic 1 - 6.25/25 = 0.75 at a 2.5 m/s drop; total
10*(0.5*0.5 + 0.2*1 + 0.3*1) = 7.5.  The 2x2 bimatrix ego [[3,0],[2,1]] /
follower [[3,2],[0,1]] has weak-best-response equilibria {(0,0),(1,1)} with
welfare 6 vs 2, so selection returns (0,0).
"""

import json
import math

import numpy as np
import pytest

from wzmerge.core import (
    AutomationLevel,
    Manoeuvre,
    Trajectory,
    VehicleState,
    build_straight_network,
    lateral_offset,
    SIM_DT,
)
from wzmerge.planner import (
    GamePlanner,
    InteractionPair,
    PayoffTable,
    PlannerParams,
    PlannerSettings,
    ProgressParams,
    SafetyParams,
    TrafficParams,
    UtilityWeights,
    build_payoff_table,
    find_follower,
    find_pure_nash,
    min_distance,
    plan_and_execute,
    progress_utility,
    safety_utility,
    sample_trajectories,
    select_equilibrium,
    total_utility,
    traffic_utility,
)
from wzmerge.sim import World

from test_sim import cth_params, idm_params, lc_params, make_world

L2 = AutomationLevel.L2


def state(vid=0, x=0.0, y=0.0, speed=20.0, heading=0.0, lane=0):
    return VehicleState(vehicle_id=vid, position=(x, y), speed=speed,
                        heading=heading, lane_index=lane, length=5.0, level=L2)


def straight_trajectory(vid, x0, v, y=0.0, lane=0, n=61, t0=0.0):
    xs = x0 + v * SIM_DT * np.arange(n)
    return Trajectory(t0=t0, dt=SIM_DT, manoeuvre=Manoeuvre.PROCEED, vehicle_id=vid,
                      length=5.0, level=L2, xs=xs, ys=np.full(n, y),
                      speeds=np.full(n, float(v)), headings=np.zeros(n),
                      lanes=np.full(n, lane, dtype=int))


NETWORK = build_straight_network(2, 7000.0, 3.2, (0, 5000.0, 6000.0))


# ------------------------------------------------------------- weights type

def test_weights_must_sum_to_one():
    UtilityWeights(base=10.0, w_safety=0.5, w_progress=0.2, w_traffic=0.3)
    with pytest.raises(ValueError):
        UtilityWeights(base=10.0, w_safety=0.5, w_progress=0.2, w_traffic=0.4)
    with pytest.raises(ValueError):
        UtilityWeights(base=10.0, w_safety=-0.1, w_progress=0.6, w_traffic=0.5)


# --------------------------------------------------------------- utilities

def test_safety_utility_frozen_points():
    p = SafetyParams(d_buffer=5.0, d_thr=10.0)
    a = straight_trajectory(0, 0.0, 10.0, y=0.0)
    for sep, expected in ((5.0, 0.0), (10.0, 0.5), (15.0, 1.0), (40.0, 1.0), (2.0, 0.0)):
        b = straight_trajectory(1, 0.0, 10.0, y=sep)
        assert safety_utility(a, b, p) == pytest.approx(expected, abs=1e-9)


def test_safety_utility_monotone_in_distance():
    p = SafetyParams(d_buffer=5.0, d_thr=10.0)
    a = straight_trajectory(0, 0.0, 10.0)
    vals = [safety_utility(a, straight_trajectory(1, 0.0, 10.0, y=sep), p)
            for sep in np.linspace(0.0, 20.0, 41)]
    assert all(v2 >= v1 for v1, v2 in zip(vals, vals[1:]))


def test_progress_utility_frozen_points():
    p = ProgressParams(p_thr=math.log(121.0))
    standing = straight_trajectory(0, 0.0, 0.0)
    assert progress_utility(standing, p) == pytest.approx(0.0, abs=1e-12)
    cruising = straight_trajectory(0, 0.0, 20.0)  # 120 m over the horizon
    assert progress_utility(cruising, p) == pytest.approx(1.0, abs=1e-9)
    half = straight_trajectory(0, 0.0, 10.0 / 6.0)  # path 10 m -> ln(11)/ln(121) = 1/2
    assert progress_utility(half, p) == pytest.approx(0.5, abs=1e-9)


def test_traffic_utility_frozen_points():
    p = TrafficParams(speed_thr=25.0)
    const = straight_trajectory(0, 0.0, 20.0)
    assert traffic_utility(const, p) == pytest.approx(1.0, abs=1e-12)

    def dropping(drop):
        n = 61
        speeds = np.linspace(20.0, 20.0 - drop, n)
        xs = np.concatenate([[0.0], np.cumsum(speeds[1:] * SIM_DT)])
        return Trajectory(t0=0.0, dt=SIM_DT, manoeuvre=Manoeuvre.WAIT, vehicle_id=0,
                          length=5.0, level=L2, xs=xs, ys=np.zeros(n),
                          speeds=speeds, headings=np.zeros(n),
                          lanes=np.zeros(n, dtype=int))

    assert traffic_utility(dropping(2.5), p) == pytest.approx(0.75, abs=1e-9)
    assert traffic_utility(dropping(5.0), p) == pytest.approx(0.0, abs=1e-12)
    assert traffic_utility(dropping(9.0), p) == pytest.approx(0.0, abs=1e-12)


def test_traffic_utility_non_increasing_in_drop():
    p = TrafficParams(speed_thr=25.0)
    n = 61
    prev = 1.0
    for drop in np.linspace(0.0, 6.0, 25):
        speeds = np.linspace(20.0, 20.0 - drop, n)
        xs = np.concatenate([[0.0], np.cumsum(speeds[1:] * SIM_DT)])
        t = Trajectory(t0=0.0, dt=SIM_DT, manoeuvre=Manoeuvre.WAIT, vehicle_id=0,
                       length=5.0, level=L2, xs=xs, ys=np.zeros(n), speeds=speeds,
                       headings=np.zeros(n), lanes=np.zeros(n, dtype=int))
        val = traffic_utility(t, p)
        assert val <= prev + 1e-12
        prev = val


def test_total_utility_frozen_points():
    w = UtilityWeights()
    assert total_utility(1.0, 1.0, 1.0, w) == pytest.approx(10.0, abs=1e-9)
    assert total_utility(0.0, 0.0, 0.0, w) == pytest.approx(0.0, abs=1e-12)
    assert total_utility(0.5, 1.0, 1.0, w) == pytest.approx(7.5, abs=1e-9)


def test_total_utility_rejects_unnormalized_components():
    w = UtilityWeights()
    for bad in ((1.2, 0.5, 0.5), (0.5, -0.1, 0.5), (0.5, 0.5, 1.0001)):
        with pytest.raises(ValueError):
            total_utility(*bad, w)


# ------------------------------------------------------------ min distance

def test_min_distance_identical_zero():
    a = straight_trajectory(0, 0.0, 15.0)
    assert min_distance(a, a) == 0.0


def test_min_distance_parallel_lateral():
    a = straight_trajectory(0, 0.0, 15.0, y=0.0)
    b = straight_trajectory(1, 0.0, 15.0, y=3.2)
    assert min_distance(a, b) == pytest.approx(3.2, abs=1e-12)


def test_min_distance_closing_matches_brute_force():
    a = straight_trajectory(0, 0.0, 20.0)
    b = straight_trajectory(1, 50.0, 5.0, y=1.0)
    expected = min(math.hypot(a.xs[k] - b.xs[k], a.ys[k] - b.ys[k]) for k in range(61))
    assert min_distance(a, b) == pytest.approx(expected, abs=1e-12)


def test_min_distance_rejects_mismatched_horizons():
    a = straight_trajectory(0, 0.0, 20.0)
    b = straight_trajectory(1, 0.0, 20.0, n=31)
    with pytest.raises(ValueError):
        min_distance(a, b)
    c = straight_trajectory(1, 0.0, 20.0, t0=2.0)
    with pytest.raises(ValueError):
        min_distance(a, c)


# --------------------------------------------------------------- sampling

def test_proceed_samples_constant_speed_profile():
    agent = state(x=100.0, speed=20.0, lane=0)
    trajs = sample_trajectories(agent, Manoeuvre.PROCEED, NETWORK[0], PlannerParams(),
                                desired_speed=33.0)
    assert len(trajs) == 3
    zero = trajs[0]  # accel ordering (0, +1, -1)
    assert len(zero) == 61
    for k in range(61):
        assert zero.xs[k] == pytest.approx(100.0 + 20.0 * k * 0.1, abs=1e-9)
        assert zero.ys[k] == 0.0
    assert all(t.manoeuvre is Manoeuvre.PROCEED for t in trajs)


def test_proceed_speed_clamped_at_desired():
    agent = state(x=0.0, speed=30.0)
    trajs = sample_trajectories(agent, Manoeuvre.PROCEED, NETWORK[0], PlannerParams(),
                                desired_speed=33.0)
    accel = trajs[1]
    assert np.max(accel.speeds) == pytest.approx(33.0, abs=1e-12)
    assert np.all(accel.speeds <= 33.0 + 1e-12)


def test_wait_sample_reaches_standstill():
    agent = state(x=50.0, speed=2.0)
    trajs = sample_trajectories(agent, Manoeuvre.WAIT, NETWORK[0], PlannerParams(),
                                desired_speed=33.0)
    assert len(trajs) == 3
    hard = trajs[2]  # decel ordering (-1.5, -2.5, -4.0)
    assert hard.speeds[5] == pytest.approx(0.0, abs=1e-12)  # 2/4 = 0.5 s
    assert np.all(hard.speeds[5:] == 0.0)
    assert np.all(hard.xs[5:] == hard.xs[5])
    assert np.all(hard.speeds >= 0.0)


def test_merge_sample_follows_smoothstep_lateral():
    agent = state(x=4600.0, y=0.0, speed=25.0, lane=0)
    target = NETWORK[1]
    trajs = sample_trajectories(agent, Manoeuvre.MERGE, target, PlannerParams(),
                                desired_speed=33.0)
    zero = trajs[0]
    for k in range(61):
        u = min(1.0, k * SIM_DT / 3.0)
        expected_y = 0.0 + (-3.2 - 0.0) * (3 * u * u - 2 * u ** 3)
        assert zero.ys[k] == pytest.approx(expected_y, abs=1e-9)
    assert np.all(zero.ys[30:] == -3.2)
    assert np.all(zero.lanes == 1)
    # planar speed never below the longitudinal component
    assert np.all(zero.speeds >= 25.0 - 1e-9)


def test_samples_kinematically_feasible():
    agent = state(x=100.0, speed=31.0)
    for manoeuvre, lane in ((Manoeuvre.PROCEED, NETWORK[0]), (Manoeuvre.WAIT, NETWORK[0]),
                            (Manoeuvre.MERGE, NETWORK[1])):
        for t in sample_trajectories(agent, manoeuvre, lane, PlannerParams(),
                                     desired_speed=33.0):
            assert np.all(t.speeds >= 0.0)
            assert np.all(np.abs(np.diff(t.speeds)) <= 9.0 * SIM_DT + 1e-9)


# ---------------------------------------------------------------- pairing

def test_find_follower_ignores_vehicles_ahead():
    ego = state(0, x=100.0, y=0.0, heading=0.0)
    cands = [state(1, x=120.0, y=-3.2, lane=1), state(2, x=101.0, y=-3.2, lane=1)]
    assert find_follower(ego, cands, NETWORK[1]) is None


def test_find_follower_picks_nearest_behind():
    ego = state(0, x=100.0, y=0.0)
    cands = [state(1, x=90.0, y=-3.2, lane=1), state(2, x=80.0, y=-3.2, lane=1)]
    assert find_follower(ego, cands, NETWORK[1]) == 1


def test_find_follower_excludes_abreast():
    ego = state(0, x=100.0, y=0.0)
    cands = [state(1, x=100.0, y=-3.2, lane=1)]
    assert find_follower(ego, cands, NETWORK[1]) is None
    behind = [state(2, x=99.999, y=-3.2, lane=1)]
    assert find_follower(ego, behind, NETWORK[1]) == 2


# ------------------------------------------------------- payoffs and Nash

def table_from(u_ego, u_follower):
    return PayoffTable(ego_trajectories=None, follower_trajectories=None,
                       u_ego=np.asarray(u_ego, dtype=float),
                       u_follower=np.asarray(u_follower, dtype=float))


def exhaustive_nash(u_ego, u_follower):
    rows, cols = u_ego.shape
    out = []
    for i in range(rows):
        for j in range(cols):
            if all(u_ego[i][j] >= u_ego[k][j] for k in range(rows)) and \
               all(u_follower[i][j] >= u_follower[i][l] for l in range(cols)):
                out.append((i, j))
    return out


def test_nash_two_by_two_example():
    t = table_from([[3.0, 0.0], [2.0, 1.0]], [[3.0, 2.0], [0.0, 1.0]])
    assert find_pure_nash(t) == [(0, 0), (1, 1)]
    assert select_equilibrium(find_pure_nash(t), t) == (0, 0)  # welfare 6 vs 2


def test_nash_constant_table_all_cells():
    t = table_from(np.full((2, 3), 4.0), np.full((2, 3), 1.0))
    assert find_pure_nash(t) == [(i, j) for i in range(2) for j in range(3)]


def test_nash_matching_pennies_empty():
    t = table_from([[1.0, 0.0], [0.0, 1.0]], [[0.0, 1.0], [1.0, 0.0]])
    assert find_pure_nash(t) == []
    assert select_equilibrium([], t) == (0, 0)  # maximin with lexicographic ties


def test_nash_matches_exhaustive_scan_on_random_tables():
    rng = np.random.default_rng(11)
    for _ in range(60):
        rows = int(rng.integers(2, 9))
        cols = int(rng.integers(2, 9))
        ue = rng.uniform(0.0, 10.0, (rows, cols))
        uf = rng.uniform(0.0, 10.0, (rows, cols))
        t = table_from(ue, uf)
        assert find_pure_nash(t) == exhaustive_nash(ue, uf)


def test_select_prefers_higher_welfare():
    # equilibria at (0,0) welfare 12 and (1,1) welfare 15
    t = table_from([[6.0, 0.0], [0.0, 8.0]], [[6.0, 0.0], [0.0, 7.0]])
    cells = find_pure_nash(t)
    assert set(cells) == {(0, 0), (1, 1)}
    assert select_equilibrium(cells, t) == (1, 1)


def test_select_breaks_welfare_tie_by_ego_payoff():
    t = table_from([[7.0, 0.0], [0.0, 5.0]], [[3.0, 0.0], [0.0, 5.0]])
    cells = find_pure_nash(t)
    assert set(cells) == {(0, 0), (1, 1)}
    assert select_equilibrium(cells, t) == (0, 0)  # both welfare 10, ego 7 > 5


def test_selection_invariant_under_affine_rescaling():
    rng = np.random.default_rng(5)
    for _ in range(30):
        ue = rng.uniform(0.0, 10.0, (4, 5))
        uf = rng.uniform(0.0, 10.0, (4, 5))
        base = table_from(ue, uf)
        chosen = select_equilibrium(find_pure_nash(base), base)
        for alpha in (0.1, 1.0, 10.0):
            for beta in (0.0, 5.0):
                t = table_from(alpha * ue + beta, alpha * uf + beta)
                assert find_pure_nash(t) == find_pure_nash(base)
                assert select_equilibrium(find_pure_nash(t), t) == chosen


def test_build_payoff_table_shapes_and_spot_check():
    ego = state(0, x=4600.0, y=0.0, speed=25.0, lane=0)
    follower = state(1, x=4560.0, y=-3.2, speed=25.0, lane=1)
    pp = PlannerParams()
    ego_trajs = (sample_trajectories(ego, Manoeuvre.MERGE, NETWORK[1], pp, desired_speed=33.0)
                 + sample_trajectories(ego, Manoeuvre.PROCEED, NETWORK[0], pp, desired_speed=33.0)
                 + sample_trajectories(ego, Manoeuvre.WAIT, NETWORK[0], pp, desired_speed=33.0))
    fol_trajs = (sample_trajectories(follower, Manoeuvre.PROCEED, NETWORK[1], pp, desired_speed=33.0)
                 + sample_trajectories(follower, Manoeuvre.WAIT, NETWORK[1], pp, desired_speed=33.0))
    w, sp, pr, tr = UtilityWeights(), SafetyParams(), ProgressParams(), TrafficParams()
    table = build_payoff_table(ego_trajs, fol_trajs, w, sp, pr, tr)
    assert table.u_ego.shape == (9, 6) and table.u_follower.shape == (9, 6)
    assert np.all(table.u_ego >= 0.0) and np.all(table.u_ego <= 10.0 + 1e-12)
    assert np.all(table.u_follower >= 0.0) and np.all(table.u_follower <= 10.0 + 1e-12)
    i, j = 4, 2
    expect_ego = total_utility(safety_utility(ego_trajs[i], fol_trajs[j], sp),
                               progress_utility(ego_trajs[i], pr),
                               traffic_utility(ego_trajs[i], tr), w)
    expect_fol = total_utility(safety_utility(ego_trajs[i], fol_trajs[j], sp),
                               progress_utility(fol_trajs[j], pr),
                               traffic_utility(fol_trajs[j], tr), w)
    assert table.u_ego[i, j] == pytest.approx(expect_ego, abs=1e-12)
    assert table.u_follower[i, j] == pytest.approx(expect_fol, abs=1e-12)


def test_build_payoff_table_rejects_empty():
    with pytest.raises(ValueError):
        build_payoff_table([], [straight_trajectory(1, 0.0, 10.0)], UtilityWeights(),
                           SafetyParams(), ProgressParams(), TrafficParams())


# ------------------------------------------------------ closed-loop planning

def planner_world(**kw):
    kw.setdefault("baseline_changes", False)
    kw.setdefault("lane_count", 2)
    return make_world(**kw)


def test_far_follower_equilibrium_is_merge_at_zero_accel():
    w = planner_world()
    ego = w.add_vehicle(lane_index=0, arc=4700.0, speed=25.0, desired_speed=33.0)
    fol = w.add_vehicle(lane_index=1, arc=4400.0, speed=25.0, desired_speed=33.0)
    pair = InteractionPair(ego_id=ego, follower_id=fol, target_lane_index=1,
                           created_step=0)
    settings = PlannerSettings()
    record = plan_and_execute(w, pair, settings)
    assert record is not None
    sel_ego = record.table.ego_trajectories[record.selected[0]]
    sel_fol = record.table.follower_trajectories[record.selected[1]]
    assert sel_ego.manoeuvre is Manoeuvre.MERGE
    assert sel_fol.manoeuvre is Manoeuvre.PROCEED
    assert record.selected == (0, 0)
    assert w.is_overridden(ego) and w.is_overridden(fol)
    # executed world prefix equals the equilibrium trajectory prefix
    for k in range(1, 21):
        w.step()
        assert w.state_of(ego).position[0] == sel_ego.xs[k]
        assert w.state_of(fol).position[0] == sel_fol.xs[k]


def test_no_follower_runs_degenerate_game():
    w = planner_world()
    ego = w.add_vehicle(lane_index=0, arc=4700.0, speed=25.0, desired_speed=33.0)
    pair = InteractionPair(ego_id=ego, follower_id=None, target_lane_index=1,
                           created_step=0)
    record = plan_and_execute(w, pair, PlannerSettings())
    assert record.table.u_ego.shape[1] == 1
    assert record.table.ego_trajectories[record.selected[0]].manoeuvre is Manoeuvre.MERGE
    assert w.is_overridden(ego)


def test_game_controller_completes_merge_and_settles():
    w = planner_world()
    ego = w.add_vehicle(lane_index=0, arc=4650.0, speed=25.0, desired_speed=33.0)
    fol = w.add_vehicle(lane_index=1, arc=4500.0, speed=25.0, desired_speed=33.0)
    gp = GamePlanner(PlannerSettings())
    plan_times = []
    for _ in range(120):
        made = gp.update(w)
        plan_times.extend(t for t, *_ in made)
        w.step()
    assert w.lane_of(ego) == 1
    assert abs(w.state_of(ego).position[1] - (-3.2)) < 1e-9
    assert not gp.active_pairs()
    assert len(w.collision_events) == 0
    # receding-horizon bookkeeping: replans land on the 2 s grid
    assert len(plan_times) >= 2
    assert all(abs((t * 10) % 20) < 1e-9 for t in plan_times)


def test_completion_epsilon_honoured():
    w = planner_world()
    ego = w.add_vehicle(lane_index=0, arc=4650.0, speed=25.0, desired_speed=33.0)
    w.add_vehicle(lane_index=1, arc=4500.0, speed=25.0, desired_speed=33.0)
    gp = GamePlanner(PlannerSettings())
    completed_at = None
    for _ in range(120):
        gp.update(w)
        if not gp.active_pairs() and completed_at is None:
            completed_at = w.time
            off = lateral_offset(NETWORK[1], w.state_of(ego).position)
            assert abs(off) < PlannerParams().merge_completion_epsilon
        w.step()
    assert completed_at is not None


def test_selected_cells_are_unilateral_deviation_proof(tmp_path):
    dump = tmp_path / "plans.jsonl"
    w = planner_world(demand=1200.0, seed=3)
    rng = np.random.default_rng(17)
    for k in range(8):  # seed traffic approaching the closure on both lanes
        w.add_vehicle(lane_index=0, arc=4050.0 + 110.0 * k,
                      speed=float(rng.uniform(18.0, 28.0)), desired_speed=33.0)
        w.add_vehicle(lane_index=1, arc=4000.0 + 115.0 * k,
                      speed=float(rng.uniform(18.0, 28.0)), desired_speed=33.0)
    gp = GamePlanner(PlannerSettings(), dump_path=str(dump))
    for _ in range(1500):
        gp.update(w)
        w.step()
    records = [json.loads(line) for line in dump.read_text().splitlines()]
    assert records, "no games were solved in the scenario"
    checked = 0
    for rec in records:
        ue = np.asarray(rec["u_ego"])
        uf = np.asarray(rec["u_follower"])
        assert exhaustive_nash(ue, uf) == [tuple(c) for c in rec["equilibria"]]
        if rec["equilibria"]:
            i, j = rec["selected"]
            assert np.all(ue[i, j] >= ue[:, j] - 1e-12)
            assert np.all(uf[i, j] >= uf[i, :] - 1e-12)
            checked += 1
    assert checked > 0


# ------------------------------------------------ leader rear prediction

def test_leader_profile_matches_plain_stepping():
    # the forecast contract: with noise off, the rollout reproduces what the
    # lane would actually do if left alone, including a braking chain
    from wzmerge.planner import _leader_rear_profile
    w = make_world()
    w.add_vehicle(lane_index=1, arc=207.0, speed=0.0)
    vid = w.add_vehicle(lane_index=1, arc=200.0, speed=10.0)
    w.step()
    prof, v_prof = _leader_rear_profile(w, 1, 0.0, set(), 61)
    rears, speeds = [], []
    for _ in range(61):
        x, v = w.longitudinal_state_of(vid)
        rears.append(x - 5.0)
        speeds.append(v)
        w.step()
    assert prof == pytest.approx(rears, abs=1e-9)
    assert v_prof == pytest.approx(speeds, abs=1e-9)


def test_leader_profile_sees_queue_discharge_wave():
    # a stopped tail vehicle moves within the horizon once the vehicle ahead
    # of it pulls away; a constant-speed extrapolation would keep it parked
    from wzmerge.planner import _leader_rear_profile
    w = make_world()
    w.add_vehicle(lane_index=1, arc=300.0, speed=0.0)
    w.add_vehicle(lane_index=1, arc=292.0, speed=0.0)
    prof, v_prof = _leader_rear_profile(w, 1, 0.0, set(), 61)
    assert prof[0] == pytest.approx(287.0)
    assert prof[-1] > prof[0] + 1.0
    assert v_prof[0] == 0.0 and v_prof[-1] > 0.0
    assert np.all(np.diff(prof) >= -1e-12)


def test_leader_profile_skips_excluded_and_handles_empty():
    from wzmerge.planner import _leader_rear_profile
    w = make_world()
    a = w.add_vehicle(lane_index=1, arc=200.0, speed=30.0)
    assert _leader_rear_profile(w, 1, 0.0, {a}, 61) is None
    assert _leader_rear_profile(w, 1, 300.0, set(), 61) is None
