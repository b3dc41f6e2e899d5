"""Deterministic 2D kinematics: integrators, car-following and pedestrian
models, log replay, oriented-rectangle collision and stuck detection.

Every update runs at the fixed 0.5 s frame step.  Positions advance with the
trapezoid rule on velocity, so finite-difference action recovery and forward
integration invert each other exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from .core import (
    DT,
    HEADING_SPEED_MIN,
    KinematicState,
    ObjectRecord,
    Frame,
    Polyline,
    wrap_angle,
)

EGO_LENGTH = 4.6
EGO_WIDTH = 1.8

STUCK_SPEED = 0.1     # m/s
STUCK_FRAMES = 20     # consecutive frames below STUCK_SPEED


class SimError(Exception):
    pass


class ReplayExhausted(SimError):
    """Requested a replayed state beyond the recorded horizon."""


@dataclass(frozen=True)
class EgoTransition:
    """Ego double-integrator limits.  Acceleration is clipped per axis; the
    longitudinal velocity stays in [0, speed_cap] and the lateral velocity in
    [-lateral_cap, lateral_cap]."""

    accel_limit: float = 4.0
    speed_cap: float = 9.5
    lateral_cap: float = 3.0
    dt: float = DT

    def __post_init__(self):
        if self.accel_limit <= 0 or self.speed_cap <= 0 or self.lateral_cap <= 0:
            raise ValueError("ego transition limits must be positive")
        if self.dt != DT:
            raise ValueError(f"frame step is fixed at {DT} s")


def step_ego(q: KinematicState, action: Sequence[float], limits: EgoTransition) -> KinematicState:
    """Advance the ego one frame under a clipped (ax, ay) command.

    v' = clip(v + a*dt); the position uses the effective acceleration after
    clipping, p' = p + v*dt + 0.5*a_eff*dt^2, which equals the exact
    double-integrator update whenever no cap binds.
    """
    ax, ay = float(action[0]), float(action[1])
    if not (math.isfinite(ax) and math.isfinite(ay)):
        raise ValueError("non-finite ego action")
    ax = min(max(ax, -limits.accel_limit), limits.accel_limit)
    ay = min(max(ay, -limits.accel_limit), limits.accel_limit)
    dt = limits.dt
    vx = min(max(q.vx + ax * dt, 0.0), limits.speed_cap)
    vy = min(max(q.vy + ay * dt, -limits.lateral_cap), limits.lateral_cap)
    x = q.x + 0.5 * (q.vx + vx) * dt
    y = q.y + 0.5 * (q.vy + vy) * dt
    return KinematicState(x, vx, y, vy, q.heading).with_heading_from_velocity()


@dataclass(frozen=True)
class InteractiveModelParams:
    """Principle-based surrounding models: IDM car following plus a
    goal-seeking pedestrian with a time-to-conflict yield rule."""

    # car following
    idm_v0: float = 8.0        # desired speed (m/s)
    idm_T: float = 1.5         # desired time headway (s)
    idm_s0: float = 2.0        # jam distance (m)
    idm_a_max: float = 2.0     # max acceleration (m/s^2)
    idm_b: float = 2.0         # comfortable deceleration (m/s^2)
    idm_delta: float = 4.0
    # pedestrian
    ped_speed: float = 1.4            # desired walking speed (m/s)
    ped_goal: tuple[float, float] = (0.0, 0.0)
    ped_yield_gap: float = 3.5        # yield when ego conflict is closer (s)
    ped_accel_gain: float = 1.5       # accel toward desired velocity (1/s)
    ped_accel_max: float = 2.5        # m/s^2
    # shared
    noise_std: float = 0.0            # accel noise (m/s^2)
    hold: bool = False                # stand still instead of moving
    go_dist: float = math.inf         # stand still until the ego is this close (m)
    go_time: float = math.inf         # or until the ego is this close (s)
    # overtake-and-cut-in maneuver of a redrawn reason vehicle
    cut_in: bool = False
    cut_gain: float = 3.0             # speed over the ego while passing (m/s)
    cut_gap: float = 9.0              # lead over the ego at which it merges back (m)

    def __post_init__(self):
        if min(self.idm_v0, self.idm_T, self.idm_s0, self.idm_a_max, self.idm_b) <= 0:
            raise ValueError("IDM parameters must be positive")
        if self.ped_speed <= 0 or self.ped_yield_gap < 0 or self.noise_std < 0:
            raise ValueError("pedestrian parameters out of range")


class IdmAccel(NamedTuple):
    accel: float
    emergency: bool


def idm_accel(v: float, gap: float, v_lead: float, p: InteractiveModelParams) -> IdmAccel:
    """Car-following acceleration; emergency flag when contact is imminent.

    a = a_max * (1 - (v/v0)^delta - (s*/gap)^2) with
    s* = s0 + v*T + v*(v - v_lead) / (2*sqrt(a_max*b)), clipped to
    [-2b, a_max]; a non-positive gap returns the hard stop -2b.
    """
    b_hard = 2.0 * p.idm_b
    if gap <= 0.0:
        return IdmAccel(-b_hard, True)
    s_star = p.idm_s0 + v * p.idm_T + v * (v - v_lead) / (2.0 * math.sqrt(p.idm_a_max * p.idm_b))
    a = p.idm_a_max * (1.0 - (v / p.idm_v0) ** p.idm_delta - (s_star / gap) ** 2)
    return IdmAccel(min(max(a, -b_hard), p.idm_a_max), False)


def _advance_point(q: KinematicState, vx: float, vy: float, dt: float) -> tuple[float, float]:
    return q.x + 0.5 * (q.vx + vx) * dt, q.y + 0.5 * (q.vy + vy) * dt


def pedestrian_accel(
    q: KinematicState,
    ego: KinematicState,
    p: InteractiveModelParams,
) -> tuple[float, float]:
    """Deterministic part of the walker's acceleration toward its goal,
    dropping the desired speed to zero while yielding to the ego."""
    gx, gy = p.ped_goal
    dx, dy = gx - q.x, gy - q.y
    dist = math.hypot(dx, dy)
    if dist < 0.3:
        vdes = (0.0, 0.0)
    else:
        vdes = (dx / dist * p.ped_speed, dy / dist * p.ped_speed)
    if _ego_conflict_imminent(q, ego, p.ped_yield_gap):
        vdes = (0.0, 0.0)
    ax = p.ped_accel_gain * (vdes[0] - q.vx)
    ay = p.ped_accel_gain * (vdes[1] - q.vy)
    norm = math.hypot(ax, ay)
    if norm > p.ped_accel_max:
        ax, ay = ax / norm * p.ped_accel_max, ay / norm * p.ped_accel_max
    return ax, ay


def _ego_conflict_imminent(q: KinematicState, ego: KinematicState, yield_gap: float) -> bool:
    """True when the ego reaches the walker's roadway neighborhood within the
    yield gap and the walker is on or heading into the ego's swept corridor."""
    ego_speed = ego.speed
    if ego_speed < 0.5 or yield_gap <= 0.0:
        return False
    ux, uy = math.cos(ego.heading), math.sin(ego.heading)
    rx, ry = q.x - ego.x, q.y - ego.y
    along = rx * ux + ry * uy
    if along < 0.0:
        return False
    ttc = along / ego_speed
    if ttc >= yield_gap:
        return False
    lateral = -rx * uy + ry * ux
    corridor = 0.5 * EGO_WIDTH + 1.2
    if abs(lateral) <= corridor:
        return True
    # closing on the corridor fast enough to be inside it at conflict time
    lat_vel = -q.vx * uy + q.vy * ux
    closing = -lat_vel if lateral > 0 else lat_vel
    return closing > 0.0 and abs(lateral) - corridor < closing * ttc


def step_pedestrian(
    q: KinematicState,
    ego: KinematicState,
    p: InteractiveModelParams,
    rng: np.random.Generator | None = None,
    speed_cap: float | None = None,
) -> KinematicState:
    """Advance a goal-seeking walker one frame, with optional accel noise."""
    ax, ay = pedestrian_accel(q, ego, p)
    if rng is not None and p.noise_std > 0.0:
        noise = rng.normal(0.0, p.noise_std, size=2)
        ax += noise[0]
        ay += noise[1]
    cap = p.ped_speed * 1.5 if speed_cap is None else speed_cap
    vx = q.vx + ax * DT
    vy = q.vy + ay * DT
    speed = math.hypot(vx, vy)
    if speed > cap:
        vx, vy = vx / speed * cap, vy / speed * cap
    x, y = _advance_point(q, vx, vy, DT)
    return KinematicState(x, vx, y, vy, q.heading).with_heading_from_velocity()


def step_vehicle(
    q: KinematicState,
    line: Polyline,
    p: InteractiveModelParams,
    leader: tuple[float, float] | None,
    rng: np.random.Generator | None = None,
) -> KinematicState:
    """Advance an IDM vehicle along its reference line.

    leader is (gap, lead_speed) measured bumper to bumper along the lane, or
    None on a free road.  Steering is a proportional controller on lateral
    offset and heading error, so the velocity always points along the heading.
    """
    if p.hold:
        return KinematicState(q.x, 0.0, q.y, 0.0, q.heading)
    speed = q.speed if q.speed > HEADING_SPEED_MIN else 0.0
    if leader is None:
        a = p.idm_a_max * (1.0 - (speed / p.idm_v0) ** p.idm_delta)
        a = min(max(a, -2.0 * p.idm_b), p.idm_a_max)
    else:
        a = idm_accel(speed, leader[0], leader[1], p).accel
    if rng is not None and p.noise_std > 0.0:
        a += rng.normal(0.0, p.noise_std)
    s_lat, lat, line_heading = project_polyline(line, q.x, q.y)
    hd_err = wrap_angle(q.heading - line_heading)
    omega = -(0.25 * lat + 1.2 * hd_err)
    omega = min(max(omega, -0.6), 0.6)
    if speed < 0.3:
        omega = 0.0  # do not spin in place
    new_speed = max(speed + a * DT, 0.0)
    heading = wrap_angle(q.heading + omega * DT)
    vx, vy = new_speed * math.cos(heading), new_speed * math.sin(heading)
    x, y = _advance_point(q, vx, vy, DT)
    return KinematicState(x, vx, y, vy, heading)


def project_polyline(line: Polyline, x: float, y: float) -> tuple[float, float, float]:
    best = None
    s_start = 0.0
    for (x0, y0), (x1, y1) in zip(line[:-1], line[1:]):
        dx, dy = x1 - x0, y1 - y0
        seg = math.hypot(dx, dy)
        if seg == 0.0:
            continue
        ux, uy = dx / seg, dy / seg
        proj = (x - x0) * ux + (y - y0) * uy
        clamped = min(max(proj, 0.0), seg)
        px, py = x0 + clamped * ux, y0 + clamped * uy
        dist = math.hypot(x - px, y - py)
        lat = -(x - px) * uy + (y - py) * ux
        cand = (dist, s_start + clamped, lat, math.atan2(uy, ux))
        if best is None or cand[0] < best[0]:
            best = cand
        s_start += seg
    assert best is not None
    return best[1], best[2], best[3]


@dataclass
class ActorBinding:
    """Replay/interactive schedule for one object in a rebuilt world.

    interactive_from is the first frame stepped by the interactive model;
    None means the object replays for the whole recorded horizon.
    """

    uid: int
    kind: str
    length: float
    width: float
    replay: dict[int, KinematicState]
    interactive_from: int | None = None

    def __post_init__(self):
        if self.interactive_from is not None:
            first = min(self.replay) if self.replay else None
            if first is not None and self.interactive_from > first:
                needed = range(first, self.interactive_from)
                if any(t not in self.replay for t in needed):
                    raise ValueError(
                        f"replay source for uid {self.uid} does not cover its replay schedule"
                    )

    def mode_at(self, t: int) -> str:
        if self.interactive_from is not None and t >= self.interactive_from:
            return "interactive"
        return "replay"


def step_replay(binding: ActorBinding, t: int) -> KinematicState:
    """Recorded state at frame t, exactly as logged."""
    try:
        return binding.replay[t]
    except KeyError:
        raise ReplayExhausted(f"uid {binding.uid} has no recorded state at frame {t}") from None


def rectangle_corners(cx: float, cy: float, heading: float, length: float, width: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def rectangles_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test on two corner arrays; touching counts as overlap."""
    for rect in (a, b):
        for i in range(2):
            edge = rect[(i + 1) % 4] - rect[i]
            axis = np.array([-edge[1], edge[0]])
            pa = a @ axis
            pb = b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def footprint(rec: ObjectRecord, inflate: float = 0.0) -> np.ndarray:
    return rectangle_corners(
        rec.state.x, rec.state.y, rec.state.heading, rec.length + 2 * inflate, rec.width + 2 * inflate
    )


def ego_footprint(ego: KinematicState, inflate: float = 0.0) -> np.ndarray:
    return rectangle_corners(ego.x, ego.y, ego.heading, EGO_LENGTH + 2 * inflate, EGO_WIDTH + 2 * inflate)


def detect_collision(frame: Frame) -> bool:
    """True when the ego footprint overlaps any object footprint (closed)."""
    ego_box = ego_footprint(frame.ego)
    ex, ey = frame.ego.x, frame.ego.y
    reach = 0.5 * math.hypot(EGO_LENGTH, EGO_WIDTH)
    for rec in frame.objects:
        # cheap circle rejection before the axis test
        r = reach + 0.5 * math.hypot(rec.length, rec.width)
        if math.hypot(rec.state.x - ex, rec.state.y - ey) > r:
            continue
        if rectangles_overlap(ego_box, footprint(rec)):
            return True
    return False


def detect_stuck(speeds: Sequence[float]) -> bool:
    """True when the last STUCK_FRAMES speeds all sit below STUCK_SPEED."""
    if len(speeds) < STUCK_FRAMES:
        return False
    return all(v < STUCK_SPEED for v in list(speeds)[-STUCK_FRAMES:])


def replay_world(case_frames: Sequence[Frame]) -> list[Frame]:
    """Re-emit a recording through the replay path; bit-exact by design."""
    bindings = {}
    for fr in case_frames:
        for rec in fr.objects:
            b = bindings.get(rec.uid)
            if b is None:
                bindings[rec.uid] = ActorBinding(
                    rec.uid, rec.kind, rec.length, rec.width, {fr.t: rec.state}
                )
            else:
                b.replay[fr.t] = rec.state
    out = []
    for fr in case_frames:
        objs = []
        for uid in sorted(bindings):
            b = bindings[uid]
            if fr.t in b.replay:
                objs.append(ObjectRecord(uid, b.kind, step_replay(b, fr.t), b.length, b.width))
        out.append(Frame(fr.t, fr.ego, tuple(objs)))
    return out
