import math

import numpy as np
import pytest

from drarl.core import DT, Frame, KinematicState, ObjectRecord
from drarl.sim import (
    ActorBinding,
    EgoTransition,
    InteractiveModelParams,
    ReplayExhausted,
    detect_collision,
    detect_stuck,
    ego_footprint,
    idm_accel,
    pedestrian_accel,
    project_polyline,
    rectangle_corners,
    rectangles_overlap,
    replay_world,
    step_ego,
    step_pedestrian,
    step_replay,
    step_vehicle,
)

LINE = ((0.0, 0.0), (400.0, 0.0))


# ---------------------------------------------------------------------------
# ego integrator


def test_step_ego_exact_double_integrator():
    limits = EgoTransition()
    q = KinematicState(10.0, 4.0, 0.0, 0.0, 0.0)
    out = step_ego(q, (2.0, 1.0), limits)
    # v' = v + a dt, p' = p + (v + v') dt / 2
    assert out.vx == pytest.approx(5.0)
    assert out.vy == pytest.approx(0.5)
    assert out.x == pytest.approx(10.0 + 0.5 * (4.0 + 5.0) * DT)
    assert out.y == pytest.approx(0.5 * (0.0 + 0.5) * DT)


def test_step_ego_clips_action_and_velocity():
    limits = EgoTransition()
    q = KinematicState(0.0, 9.4, 0.0, 0.0, 0.0)
    out = step_ego(q, (50.0, 0.0), limits)
    # accel clipped to 4, then vx capped
    assert out.vx == pytest.approx(limits.speed_cap)
    assert out.x == pytest.approx(0.5 * (9.4 + limits.speed_cap) * DT)

    stopped = step_ego(KinematicState(0.0, 1.0, 0.0, 0.0, 0.0), (-4.0, 0.0), limits)
    assert stopped.vx == 0.0  # no reversing

    swerve = step_ego(KinematicState(0.0, 5.0, 0.0, 2.9, 0.0), (0.0, 4.0), limits)
    assert swerve.vy == pytest.approx(limits.lateral_cap)


def test_step_ego_rejects_bad_input():
    with pytest.raises(ValueError):
        step_ego(KinematicState(0, 1, 0, 0, 0), (math.nan, 0.0), EgoTransition())
    with pytest.raises(ValueError):
        EgoTransition(dt=0.25)
    with pytest.raises(ValueError):
        EgoTransition(speed_cap=-1.0)


def test_action_recovery_inverts_integration():
    """Finite differencing the velocities recovers the commanded accel."""
    limits = EgoTransition()
    rng = np.random.default_rng(3)
    q = KinematicState(0.0, 5.0, 0.0, 0.0, 0.0)
    for _ in range(60):
        # stay away from the caps so no clipping binds
        ax = float(rng.uniform(-0.8, 0.8))
        ay = float(rng.uniform(-0.8, 0.8))
        nxt = step_ego(q, (ax, ay), limits)
        assert (nxt.vx - q.vx) / DT == pytest.approx(ax, rel=1e-9, abs=1e-12)
        assert (nxt.vy - q.vy) / DT == pytest.approx(ay, rel=1e-9, abs=1e-12)
        assert nxt.x - q.x == pytest.approx(0.5 * (q.vx + nxt.vx) * DT, rel=1e-12)
        q = nxt


# ---------------------------------------------------------------------------
# car following


def test_idm_accel_matches_hand_computation():
    p = InteractiveModelParams()  # v0=8, T=1.5, s0=2, a_max=2, b=2, delta=4
    # s* = 2 + 5*1.5 + 5*(5-3)/(2*sqrt(4)) = 12; a = 2*(1 - (5/8)^4 - (12/20)^2)
    out = idm_accel(5.0, 20.0, 3.0, p)
    assert out.accel == pytest.approx(0.97482421875, rel=1e-12)
    assert not out.emergency


def test_idm_accel_limits():
    p = InteractiveModelParams()
    hard = idm_accel(5.0, -0.5, 3.0, p)
    assert hard.accel == -2.0 * p.idm_b
    assert hard.emergency
    # closing fast on a stopped leader saturates at the hard brake
    assert idm_accel(8.0, 3.0, 0.0, p).accel == -2.0 * p.idm_b
    # free-road limit from rest approaches a_max
    assert idm_accel(0.0, 1e9, 0.0, p).accel == pytest.approx(p.idm_a_max, rel=1e-6)


def test_interactive_params_validation():
    with pytest.raises(ValueError):
        InteractiveModelParams(idm_v0=0.0)
    with pytest.raises(ValueError):
        InteractiveModelParams(ped_speed=-1.0)


def test_step_vehicle_free_road_converges_to_v0():
    p = InteractiveModelParams(idm_v0=6.0)
    q = KinematicState(0.0, 0.0, 0.0, 0.0, 0.0)
    for _ in range(80):
        q = step_vehicle(q, LINE, p, None)
    assert q.speed == pytest.approx(6.0, rel=1e-2)
    assert abs(q.y) < 1e-6


def test_step_vehicle_brakes_behind_leader():
    p = InteractiveModelParams()
    q = KinematicState(0.0, 8.0, 0.0, 0.0, 0.0)
    out = step_vehicle(q, LINE, p, (4.0, 0.0))
    assert out.speed < q.speed


def test_step_vehicle_steers_back_to_line():
    p = InteractiveModelParams(idm_v0=5.0)
    q = KinematicState(0.0, 5.0, 1.2, 0.0, 0.0)
    lats = []
    for _ in range(60):
        q = step_vehicle(q, LINE, p, None)
        lats.append(q.y)
    assert abs(q.y) < 0.05
    assert min(lats) > -0.8  # damped, no wild overshoot


def test_step_vehicle_hold_and_no_spin():
    p = InteractiveModelParams(hold=True)
    q = KinematicState(3.0, 2.0, 1.0, 0.0, 0.4)
    held = step_vehicle(q, LINE, p, None)
    assert (held.x, held.y, held.speed, held.heading) == (3.0, 1.0, 0.0, 0.4)

    crawling = KinematicState(0.0, 0.05, 2.0, 0.0, 0.3)
    out = step_vehicle(crawling, LINE, InteractiveModelParams(), None)
    assert out.heading == pytest.approx(0.3, abs=1e-12)  # too slow to steer


def test_step_vehicle_noise_is_seeded():
    p = InteractiveModelParams(noise_std=0.3)
    q = KinematicState(0.0, 4.0, 0.0, 0.0, 0.0)
    a = step_vehicle(q, LINE, p, None, np.random.default_rng(11))
    b = step_vehicle(q, LINE, p, None, np.random.default_rng(11))
    c = step_vehicle(q, LINE, p, None, np.random.default_rng(12))
    assert a == b
    assert a != c


# ---------------------------------------------------------------------------
# pedestrians


def test_pedestrian_walks_to_goal_and_stops():
    p = InteractiveModelParams(ped_speed=1.4, ped_goal=(20.0, 0.0))
    q = KinematicState(0.0, 0.0, 0.0, 0.0, 0.0)
    ego = KinematicState(-100.0, 0.0, -50.0, 0.0, 0.0)  # far away, irrelevant
    speeds = []
    for _ in range(100):
        q = step_pedestrian(q, ego, p)
        speeds.append(q.speed)
    assert max(speeds) <= 1.4 * 1.5 + 1e-9
    assert abs(q.x - 20.0) < 0.5
    assert q.speed < 0.2  # settled at the goal


def test_pedestrian_yields_to_close_ego():
    p = InteractiveModelParams(ped_speed=1.4, ped_goal=(10.0, 10.0), ped_yield_gap=3.5)
    walker = KinematicState(10.0, 0.0, 0.0, 0.0, 1.57)
    ego = KinematicState(0.0, 8.0, 0.0, 0.0, 0.0)  # 10 m away, ttc 1.25 s
    ax, ay = pedestrian_accel(walker, ego, p)
    assert math.hypot(ax, ay) < 1e-9  # desired velocity zeroed, already at rest

    # same geometry but the ego is creeping: no yield
    slow_ego = KinematicState(0.0, 0.3, 0.0, 0.0, 0.0)
    ax, ay = pedestrian_accel(walker, slow_ego, p)
    assert math.hypot(ax, ay) > 0.5

    # committed walker with no yield gap ignores the ego
    bold = InteractiveModelParams(ped_speed=1.4, ped_goal=(10.0, 10.0), ped_yield_gap=0.0)
    ax, ay = pedestrian_accel(walker, ego, bold)
    assert math.hypot(ax, ay) > 0.5


def test_pedestrian_behind_ego_does_not_yield():
    p = InteractiveModelParams(ped_speed=1.4, ped_goal=(0.0, 10.0))
    walker = KinematicState(-5.0, 0.0, 0.0, 0.0, 1.57)
    ego = KinematicState(0.0, 8.0, 0.0, 0.0, 0.0)
    ax, ay = pedestrian_accel(walker, ego, p)
    assert math.hypot(ax, ay) > 0.5


# ---------------------------------------------------------------------------
# geometry


def test_project_polyline_multi_segment():
    bent = ((0.0, 0.0), (10.0, 0.0), (10.0, 10.0))
    s, lat, hd = project_polyline(bent, 11.0, 4.0)
    assert s == pytest.approx(14.0)
    assert lat == pytest.approx(-1.0)  # right of the northbound leg
    assert hd == pytest.approx(math.pi / 2.0)


def test_rectangles_overlap_cases():
    a = rectangle_corners(0.0, 0.0, 0.0, 4.0, 2.0)
    assert rectangles_overlap(a, rectangle_corners(3.0, 0.0, 0.0, 4.0, 2.0))
    assert not rectangles_overlap(a, rectangle_corners(6.0, 0.0, 0.0, 4.0, 2.0))
    # rotation matters: a long diagonal bar reaches, an axis-aligned one does not
    far = rectangle_corners(4.0, 4.0, math.atan2(-4, -4), 8.0, 0.5)
    assert rectangles_overlap(a, far)
    assert not rectangles_overlap(a, rectangle_corners(4.0, 4.0, 0.0, 8.0, 0.5))


def test_detect_collision_frame():
    ego = KinematicState(0.0, 5.0, 0.0, 0.0, 0.0)
    hit = ObjectRecord(1, "vehicle", KinematicState(4.0, 0.0, 0.0, 0.0, 0.0), 4.4, 1.8)
    missed = ObjectRecord(2, "vehicle", KinematicState(4.0, 0.0, 3.5, 0.0, 0.0), 4.4, 1.8)
    assert detect_collision(Frame(0, ego, (hit,)))
    assert not detect_collision(Frame(0, ego, (missed,)))
    assert not detect_collision(Frame(0, ego))


def test_footprints_match_dimensions():
    box = ego_footprint(KinematicState(2.0, 0.0, 1.0, 0.0, 0.0))
    assert box[:, 0].max() - box[:, 0].min() == pytest.approx(4.6)
    assert box[:, 1].max() - box[:, 1].min() == pytest.approx(1.8)


def test_detect_stuck_window():
    assert not detect_stuck([0.0] * 19)
    assert detect_stuck([0.0] * 20)
    assert detect_stuck([5.0] * 30 + [0.05] * 20)
    assert not detect_stuck([0.0] * 30 + [0.5] + [0.0] * 10)


# ---------------------------------------------------------------------------
# replay


def _recording():
    frames = []
    for t in range(6):
        ego = KinematicState(float(t), 2.0, 0.0, 0.0, 0.0)
        objs = [ObjectRecord(1, "vehicle", KinematicState(10.0 + t, 2.0, 0.0, 0.0, 0.0), 4.4, 1.8)]
        if t >= 2:  # enters late
            objs.append(ObjectRecord(2, "pedestrian", KinematicState(20.0, 0.0, 4.0, 0.0, 0.0), 0.5, 0.5))
        frames.append(Frame(t, ego, tuple(objs)))
    return frames


def test_replay_world_is_bit_exact():
    frames = _recording()
    assert replay_world(frames) == frames


def test_actor_binding_schedule():
    traj = {t: KinematicState(float(t), 1.0, 0.0, 0.0, 0.0) for t in range(5)}
    b = ActorBinding(1, "vehicle", 4.4, 1.8, dict(traj), interactive_from=3)
    assert b.mode_at(2) == "replay"
    assert b.mode_at(3) == "interactive"
    assert step_replay(b, 2) == traj[2]
    with pytest.raises(ReplayExhausted):
        step_replay(b, 99)

    gappy = {0: traj[0], 2: traj[2]}
    with pytest.raises(ValueError):
        ActorBinding(1, "vehicle", 4.4, 1.8, gappy, interactive_from=2)
