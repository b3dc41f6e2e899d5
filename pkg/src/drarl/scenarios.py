"""Scenario families, scripted actors, the pseudo-driver and closed-loop worlds.

Four families on a straight two-way road: a pedestrian dashing across in front
of the ego, a tailing vehicle overtaking across the double-yellow line and
cutting back in, casual frames from nominal traffic, and a static obstacle
that forces a pseudo-driver stop.  Generation drives the ego with a scripted
cruiser and cuts the recording at the first pseudo-driver intervention; the
same worlds run closed-loop for policy evaluation, with anomalies triggered by
live ego proximity rather than by recorded time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    DT,
    DisengagementCase,
    Frame,
    KinematicState,
    ObjectRecord,
    ScenarioMap,
)
from .sim import (
    EGO_LENGTH,
    EGO_WIDTH,
    EgoTransition,
    InteractiveModelParams,
    detect_collision,
    footprint,
    idm_accel,
    rectangle_corners,
    rectangles_overlap,
    step_ego,
    step_pedestrian,
    step_vehicle,
)

FAMILIES = ("dash", "cutin", "casual", "nonpolicy", "nominal")

LANE_Y = 0.0
OPPOSITE_Y = 3.5
LANE_WIDTH = 3.5
CURB_SOUTH = -1.9     # ego lateral wall (kerb)
CURB_NORTH = 5.25     # far edge of the opposite lane
SIDEWALK_SOUTH = -3.6
SIDEWALK_NORTH = 5.8
PARKED_Y = -2.9

RECORD_FRAMES = 40    # dash / cut-in / obstacle-stop recordings
FRAME_CASE_LEN = 16   # casual frame recordings

VEH_LENGTH = 4.4
VEH_WIDTH = 1.8
PED_SIZE = 0.6
OBSTACLE_SIZE = 1.0


class ScenarioError(Exception):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    """Family, seed and the perturbed-variant switch; all parameter draws
    derive from the seed, so a spec names a world completely."""

    family: str
    seed: int
    perturbed: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ScenarioError(f"unknown family {self.family!r}")


ROAD_BACK = -40.0  # lane polylines start behind the ego spawn


def make_map(route_len: float, crosswalk_x: float | None = None) -> ScenarioMap:
    lines = (
        ((ROAD_BACK, LANE_Y), (route_len, LANE_Y)),
        ((route_len, OPPOSITE_Y), (ROAD_BACK, OPPOSITE_Y)),
    )
    crosswalks = ()
    if crosswalk_x is not None:
        crosswalks = (((crosswalk_x, -6.0), (crosswalk_x, 6.0)),)
    return ScenarioMap(lines, LANE_WIDTH, crosswalks, drivable_margin=3.5)


def pseudo_driver(
    frame: Frame,
    lookahead: float = 12.0,
    inflation: float = 0.5,
    closing_min: float = 0.5,
) -> bool:
    """Safety-driver intervention rule.

    Intervene when the corridor swept by the ego over the next lookahead
    metres intersects an object's footprint inflated by 0.5 m while the object
    closes on the ego faster than the threshold.
    """
    ego = frame.ego
    ux, uy = math.cos(ego.heading), math.sin(ego.heading)
    front = 0.5 * EGO_LENGTH
    cx = ego.x + (front + 0.5 * lookahead) * ux
    cy = ego.y + (front + 0.5 * lookahead) * uy
    corridor = rectangle_corners(cx, cy, ego.heading, lookahead, EGO_WIDTH)
    for rec in frame.objects:
        rx, ry = rec.state.x - ego.x, rec.state.y - ego.y
        dist = math.hypot(rx, ry)
        if dist > lookahead + front + 0.5 * math.hypot(rec.length, rec.width) + inflation:
            continue
        rvx, rvy = rec.state.vx - ego.vx, rec.state.vy - ego.vy
        closing = -(rx * rvx + ry * rvy) / max(dist, 1e-6)
        if closing <= closing_min:
            continue
        if rectangles_overlap(corridor, footprint(rec, inflate=inflation)):
            return True
    return False


# ---------------------------------------------------------------------------
# scripted actors


class Actor:
    """Scripted traffic participant; subclasses fill in behavior."""

    kind = "vehicle"
    length = VEH_LENGTH
    width = VEH_WIDTH

    def __init__(self, uid: int, state: KinematicState, spawn_t: int = 0):
        self.uid = uid
        self.state = state
        self.spawn_t = spawn_t
        self.gone = False

    def active(self, t: int) -> bool:
        return t >= self.spawn_t and not self.gone

    def step(self, world: "ScenarioWorld") -> None:
        raise NotImplementedError


class ParkedVehicle(Actor):
    def step(self, world):
        pass


class StaticObstacle(Actor):
    kind = "static_obstacle"
    length = OBSTACLE_SIZE
    width = OBSTACLE_SIZE

    def step(self, world):
        pass


class LaneVehicle(Actor):
    """IDM vehicle bound to a lane, travelling in a fixed direction.

    slowdown, when given, is (t_start, factor, t_end): between those frames
    the desired speed drops to factor * v0, so cruising traffic brakes and
    later picks speed back up the way ordinary drivers do.
    """

    def __init__(self, uid, state, lane_y: float, direction: int, v0: float,
                 spawn_t: int = 0, noise_std: float = 0.22,
                 slowdown: tuple[int, float, int] | None = None):
        super().__init__(uid, state, spawn_t)
        self.lane_y = lane_y
        self.direction = direction
        self.v0 = v0
        self.slowdown = slowdown
        self.params = InteractiveModelParams(idm_v0=v0, noise_std=noise_std)

    def _line(self, world):
        L = world.route_len
        if self.direction > 0:
            return ((0.0, self.lane_y), (L, self.lane_y))
        return ((L, self.lane_y), (0.0, self.lane_y))

    def step(self, world):
        if self.slowdown is not None:
            t0, factor, t1 = self.slowdown
            scale = factor if t0 <= world.t < t1 else 1.0
            self.params = replace(self.params, idm_v0=self.v0 * scale)
        leader = world.leader_for(self)
        self.state = step_vehicle(self.state, self._line(world), self.params,
                                  leader, world.rng_for(self.uid))


class Walker(Actor):
    """Goal-seeking pedestrian with the time-to-conflict yield rule."""

    kind = "pedestrian"
    length = PED_SIZE
    width = PED_SIZE

    def __init__(self, uid, state, goal, speed: float, spawn_t: int = 0,
                 yield_gap: float = 3.5, noise_std: float = 0.08):
        super().__init__(uid, state, spawn_t)
        self.params = InteractiveModelParams(
            ped_speed=speed, ped_goal=goal, ped_yield_gap=yield_gap, noise_std=noise_std
        )

    def step(self, world):
        self.state = step_pedestrian(self.state, world.ego, self.params,
                                     world.rng_for(self.uid))


class DashWalker(Walker):
    """Loiters at the kerb, then sprints across once the ego is close.

    The sprint ignores the ego entirely and uses an out-of-distribution
    acceleration envelope; its first frame is the anomaly onset.
    """

    def __init__(self, uid, state, cross_x: float, trigger_dist: float,
                 dash_speed: float, spawn_t: int = 0):
        super().__init__(uid, state, (state.x, state.y), speed=0.4,
                         spawn_t=spawn_t, yield_gap=0.0, noise_std=0.03)
        self.cross_x = cross_x
        self.trigger_dist = trigger_dist
        self.dash_speed = dash_speed
        self.onset_t: int | None = None

    def step(self, world):
        gap = self.cross_x - (world.ego.x + 0.5 * EGO_LENGTH)
        if self.onset_t is None and 0.0 < gap <= self.trigger_dist:
            self.onset_t = world.t + 1  # first frame moved by the sprint
            self.params = InteractiveModelParams(
                ped_speed=self.dash_speed,
                ped_goal=(self.state.x, SIDEWALK_NORTH + 6.0),
                ped_yield_gap=0.0,
                ped_accel_gain=4.0,
                ped_accel_max=7.0,
                noise_std=0.03,
            )
        self.state = step_pedestrian(
            self.state, world.ego, self.params, world.rng_for(self.uid),
            speed_cap=max(self.dash_speed, 1.0),
        )


class NudgeWalker(Walker):
    """Benign lookalike for perturbed suites: lunges toward the kerb when the
    ego approaches, then holds at the road edge and crosses only once the ego
    has passed.  A replayed nominal ego trajectory still passes this scene."""

    def __init__(self, uid, state, cross_x: float, trigger_dist: float, spawn_t: int = 0):
        super().__init__(uid, state, (state.x, state.y), speed=0.4,
                         spawn_t=spawn_t, yield_gap=0.0, noise_std=0.03)
        self.cross_x = cross_x
        self.trigger_dist = trigger_dist
        self.phase = "loiter"

    def step(self, world):
        gap = self.cross_x - (world.ego.x + 0.5 * EGO_LENGTH)
        if self.phase == "loiter" and 0.0 < gap <= self.trigger_dist:
            self.phase = "edge"
        if self.phase == "edge":
            # hold just outside the travelled lane, facing it
            self.params = replace(
                self.params, ped_speed=1.8, ped_goal=(self.state.x, CURB_SOUTH - 0.45),
                ped_yield_gap=0.0,
            )
            if gap < -2.0:
                self.phase = "cross"
        if self.phase == "cross":
            self.params = replace(
                self.params, ped_speed=1.4,
                ped_goal=(self.state.x, SIDEWALK_NORTH + 6.0), ped_yield_gap=3.5,
            )
        self.state = step_pedestrian(self.state, world.ego, self.params,
                                     world.rng_for(self.uid))


class TailingVehicle(LaneVehicle):
    """Follows the ego at an IDM gap; the cut-in variant overtakes."""

    def __init__(self, uid, state, v0, gap0: float, noise_std: float = 0.22):
        super().__init__(uid, state, LANE_Y, +1, v0, 0, noise_std)
        self.gap0 = gap0

    def step(self, world):
        gap = (world.ego.x - 0.5 * EGO_LENGTH) - (self.state.x + 0.5 * self.length)
        lead = (gap, world.ego.speed)
        self.state = step_vehicle(self.state, self._line(world), self.params,
                                  lead, world.rng_for(self.uid))


class CutInVehicle(TailingVehicle):
    """Tails the ego, pulls out across the double-yellow line, passes, and
    cuts back in sharply ahead of the ego while shedding speed."""

    def __init__(self, uid, state, v0, gap0, trigger_t: int, speed_gain: float,
                 cutback_gap: float):
        super().__init__(uid, state, v0, gap0, noise_std=0.05)
        self.trigger_t = trigger_t
        self.speed_gain = speed_gain
        self.cutback_gap = cutback_gap
        self.phase = "follow"
        self.onset_t: int | None = None
        self.crossed_line = False

    def step(self, world):
        rng = world.rng_for(self.uid)
        if self.phase == "follow":
            if world.t + 1 >= self.trigger_t:
                self.phase = "pass"
                self.onset_t = world.t + 1
            else:
                gap = (world.ego.x - 0.5 * EGO_LENGTH) - (self.state.x + 0.5 * self.length)
                self.state = step_vehicle(self.state, self._line(world), self.params,
                                          (gap, world.ego.speed), rng)
                return
        if self.phase == "pass":
            lead_gap = (self.state.x - 0.5 * self.length) - (world.ego.x + 0.5 * EGO_LENGTH)
            if lead_gap >= self.cutback_gap:
                self.phase = "cutback"
            else:
                line = ((0.0, OPPOSITE_Y), (world.route_len, OPPOSITE_Y))
                p = replace(self.params, idm_v0=world.ego.speed + self.speed_gain,
                            idm_a_max=2.5)
                self.state = step_vehicle(self.state, line, p, None, rng)
                if abs(self.state.y) > 0.5 * LANE_WIDTH:
                    self.crossed_line = True
                return
        if self.phase == "cutback":
            line = ((0.0, LANE_Y), (world.route_len, LANE_Y))
            if abs(self.state.y - LANE_Y) < 0.4:
                self.phase = "settle"
            p = replace(self.params, idm_v0=max(world.ego.speed - 2.0, 2.0))
            self.state = step_vehicle(self.state, line, p, None, rng)
            return
        # settle: drive on ahead in the ego lane
        leader = world.leader_for(self)
        p = replace(self.params, idm_v0=self.params.idm_v0 + self.speed_gain)
        self.state = step_vehicle(self.state, self._line(world), p, leader, rng)


class WigglingVehicle(TailingVehicle):
    """Perturbed-suite follower: drifts half a metre inside its own lane as it
    closes on the ego, never crossing the lane line."""

    def __init__(self, uid, state, v0, gap0, trigger_t: int):
        super().__init__(uid, state, v0, gap0, noise_std=0.05)
        self.trigger_t = trigger_t

    def step(self, world):
        t = world.t + 1
        offset = 0.0
        if t >= self.trigger_t:
            offset = 0.5 * math.sin(0.45 * (t - self.trigger_t))
        gap = (world.ego.x - 0.5 * EGO_LENGTH) - (self.state.x + 0.5 * self.length)
        line = ((0.0, LANE_Y + offset), (world.route_len, LANE_Y + offset))
        self.state = step_vehicle(self.state, line, self.params,
                                  (gap, world.ego.speed), world.rng_for(self.uid))


# ---------------------------------------------------------------------------
# the world


class ScenarioWorld:
    """Closed-loop world: scripted actors plus an ego driven from outside."""

    def __init__(self, smap: ScenarioMap, ego: KinematicState, actors: list[Actor],
                 seed: int, route_len: float):
        self.smap = smap
        self.ego = ego
        self.actors = actors
        self.route_len = route_len
        self.t = 0
        self._seed = seed
        self._rngs = {
            a.uid: np.random.default_rng(np.random.SeedSequence([seed, a.uid]))
            for a in actors
        }
        self.ego_limits = EgoTransition()
        self.frames = [self.frame()]

    def rng_for(self, uid: int) -> np.random.Generator:
        return self._rngs[uid]

    def frame(self) -> Frame:
        recs = tuple(
            ObjectRecord(a.uid, a.kind, a.state, a.length, a.width)
            for a in sorted(self.actors, key=lambda a: a.uid)
            if a.active(self.t)
        )
        return Frame(self.t, self.ego, recs)

    def leader_for(self, actor: Actor) -> tuple[float, float] | None:
        """Nearest participant ahead of the actor in its travel direction."""
        st = actor.state
        ux, uy = math.cos(st.heading), math.sin(st.heading)
        best = None
        others: list[tuple[KinematicState, float, float]] = [
            (self.ego, EGO_LENGTH, EGO_WIDTH)
        ]
        for a in self.actors:
            if a.uid != actor.uid and a.active(self.t):
                others.append((a.state, a.length, a.width))
        for other, length, _w in others:
            rx, ry = other.x - st.x, other.y - st.y
            along = rx * ux + ry * uy
            lat = -rx * uy + ry * ux
            if along <= 0.0 or abs(lat) > 0.6 * LANE_WIDTH:
                continue
            gap = along - 0.5 * (actor.length + length)
            speed_along = other.vx * ux + other.vy * uy
            if best is None or gap < best[0]:
                best = (gap, max(speed_along, 0.0))
        return best

    def ego_leader(self) -> tuple[float, float] | None:
        """Nearest object blocking the ego lane ahead, for the cruiser."""
        best = None
        for a in self.actors:
            if not a.active(self.t):
                continue
            st = a.state
            along = st.x - self.ego.x
            if along <= 0.0:
                continue
            if abs(st.y - LANE_Y) > 0.5 * LANE_WIDTH + 0.2 * a.width:
                continue
            gap = along - 0.5 * (EGO_LENGTH + a.length)
            if best is None or gap < best[0]:
                best = (gap, max(st.vx, 0.0))
        return best

    def step(self, ego_action) -> Frame:
        """Advance one frame: actors react to the ego at the current frame,
        then the ego moves, then time advances."""
        ego_next = step_ego(self.ego, ego_action, self.ego_limits)
        # kerbs: the ego cannot leave the paved road sideways
        if ego_next.y < CURB_SOUTH:
            ego_next = replace(ego_next, y=CURB_SOUTH, vy=max(ego_next.vy, 0.0))
        elif ego_next.y > CURB_NORTH:
            ego_next = replace(ego_next, y=CURB_NORTH, vy=min(ego_next.vy, 0.0))
        for a in sorted(self.actors, key=lambda a: a.uid):
            if a.spawn_t <= self.t and not a.gone:
                a.step(self)
                if not self.smap.is_drivable(a.state.x, a.state.y):
                    a.gone = True
        self.ego = ego_next
        self.t += 1
        fr = self.frame()
        self.frames.append(fr)
        return fr

    def collided(self) -> bool:
        return detect_collision(self.frames[-1])


# ---------------------------------------------------------------------------
# world builders


@dataclass
class Cruiser:
    """Scripted recording driver: car-following along the lane plus a lateral
    PD pull back to the lane centre."""

    v0: float
    params: InteractiveModelParams = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.params is None:
            self.params = InteractiveModelParams(idm_v0=self.v0)

    def action(self, world: ScenarioWorld) -> tuple[float, float]:
        ego = world.ego
        v = max(ego.vx, 0.0)
        leader = world.ego_leader()
        if leader is None:
            p = self.params
            ax = p.idm_a_max * (1.0 - (v / p.idm_v0) ** p.idm_delta)
            ax = min(max(ax, -2.0 * p.idm_b), p.idm_a_max)
        else:
            ax = idm_accel(v, leader[0], leader[1], self.params).accel
        ay = float(np.clip(-0.9 * ego.y - 1.8 * ego.vy, -2.0, 2.0))
        return (ax, ay)


class BrakeTester(Cruiser):
    """Salvageability probe: cruise, then brake hard once a wide-lookahead
    intervention check fires.  A draw is kept only if this driver survives."""

    def action(self, world):
        fr = world.frames[-1]
        if pseudo_driver(fr, lookahead=18.0, inflation=0.6, closing_min=0.3):
            return (-4.0, float(np.clip(-0.9 * world.ego.y - 1.8 * world.ego.vy, -2.0, 2.0)))
        return super().action(world)


@dataclass
class BuiltWorld:
    world: ScenarioWorld
    cruiser_v0: float
    route_len: float
    horizon: int
    anomalous_uid: int | None
    anomalous: Actor | None


def _nominal_furniture(rng, uid: int, route_len: float, actors: list[Actor],
                       lead_p=0.7, follow_p=0.6, oncoming_p=0.8, parked_max=3,
                       crosser_p=0.6, loiter_p=0.5, obstacle_p=0.3,
                       keep_clear: tuple[float, float] | None = None):
    """Shared nominal traffic; returns the next free uid.

    keep_clear masks an x interval from in-lane and oncoming placements so a
    family's scripted conflict is not pre-empted by furniture.
    """

    def clear_of(x):
        return keep_clear is None or not (keep_clear[0] <= x <= keep_clear[1])

    def maybe_slowdown():
        # early enough that the recovery leg also lands inside short episodes
        if rng.random() >= 0.75:
            return None
        t0 = int(rng.integers(2, 11))
        return (t0, float(rng.uniform(0.35, 0.75)), t0 + int(rng.integers(5, 11)))

    if rng.random() < lead_p:
        x0 = float(rng.uniform(35.0, 70.0))
        if clear_of(x0):
            v0 = float(rng.uniform(6.0, 9.0))
            # spawn off the IDM equilibrium so cruise speeds drift mid-episode
            v_init = v0 * float(rng.uniform(0.5, 1.35))
            st = KinematicState(x0, v_init, LANE_Y, 0.0, 0.0)
            actors.append(LaneVehicle(uid, st, LANE_Y, +1, v0,
                                      slowdown=maybe_slowdown()))
            uid += 1
    if rng.random() < follow_p:
        gap0 = float(rng.uniform(10.0, 18.0))
        x0 = 4.0 - gap0 - 0.5 * (EGO_LENGTH + VEH_LENGTH)
        v0 = float(rng.uniform(6.0, 8.5))
        st = KinematicState(x0, v0, LANE_Y, 0.0, 0.0)
        actors.append(TailingVehicle(uid, st, v0, gap0))
        uid += 1
    if rng.random() < oncoming_p:
        x0 = float(rng.uniform(0.55 * route_len, route_len - 15.0))
        if clear_of(x0):
            v0 = float(rng.uniform(5.0, 9.0))
            v_init = v0 * float(rng.uniform(0.5, 1.35))
            st = KinematicState(x0, -v_init, OPPOSITE_Y, 0.0, math.pi)
            actors.append(LaneVehicle(uid, st, OPPOSITE_Y, -1, v0,
                                      slowdown=maybe_slowdown()))
            uid += 1
    for _ in range(int(rng.integers(0, parked_max + 1))):
        x0 = float(rng.uniform(0.25 * route_len, route_len - 40.0))
        st = KinematicState(x0, 0.0, PARKED_Y, 0.0, 0.0)
        actors.append(ParkedVehicle(uid, st))
        uid += 1
    if rng.random() < crosser_p:
        xw = float(rng.uniform(0.3 * route_len, route_len - 50.0))
        if clear_of(xw):
            speed = float(rng.uniform(1.0, 1.6))
            st = KinematicState(xw, 0.0, SIDEWALK_SOUTH, 0.0, math.pi / 2)
            actors.append(Walker(uid, st, (xw, SIDEWALK_NORTH + 4.0), speed))
            uid += 1
    if rng.random() < loiter_p:
        xw = float(rng.uniform(40.0, route_len - 30.0))
        st = KinematicState(xw, 0.0, SIDEWALK_NORTH, 0.0, 0.0)
        actors.append(Walker(uid, st, (xw + 0.5, SIDEWALK_NORTH), 0.3, noise_std=0.03))
        uid += 1
    if rng.random() < obstacle_p:
        x0 = float(rng.uniform(0.3 * route_len, route_len - 40.0))
        st = KinematicState(x0, 0.0, float(rng.uniform(-3.2, -2.6)), 0.0, 0.0)
        actors.append(StaticObstacle(uid, st))
        uid += 1
    return uid


def build_world(spec: ScenarioSpec, attempt: int = 0) -> BuiltWorld:
    """Deterministically build the world named by (spec, attempt)."""
    fam = FAMILIES.index(spec.family)
    rng = np.random.default_rng(
        np.random.SeedSequence([fam, spec.seed & 0x7FFFFFFF, attempt, int(spec.perturbed)])
    )
    seed_actors = int(rng.integers(1 << 30))
    v0 = float(rng.uniform(7.5, 9.0))
    actors: list[Actor] = []
    anomalous: Actor | None = None

    if spec.family == "dash":
        route_len = 200.0
        cross_x = float(rng.uniform(150.0, 170.0))
        uid = _nominal_furniture(rng, 1, route_len, actors, lead_p=0.5,
                                 follow_p=0.4, oncoming_p=0.6, parked_max=3,
                                 crosser_p=0.0, obstacle_p=0.2,
                                 keep_clear=(cross_x - 25.0, cross_x + 25.0))
        # a real run: casual crossers top out near 1.6 m/s, so stay well above
        dash_speed = float(rng.uniform(3.2, 6.0))
        onset_dist = float(rng.uniform(8.0, 25.0))
        sensor = float(rng.uniform(65.0, 85.0))
        spawn_t = max(1, int((cross_x - sensor - 4.0) / (v0 * DT)))
        px = cross_x + float(rng.uniform(-0.5, 0.5))
        st = KinematicState(px, 0.0, SIDEWALK_SOUTH, 0.0, math.pi / 2)
        if spec.perturbed:
            anomalous = NudgeWalker(uid, st, cross_x, float(rng.uniform(12.0, 22.0)),
                                    spawn_t=spawn_t)
        else:
            anomalous = DashWalker(uid, st, cross_x, onset_dist, dash_speed,
                                   spawn_t=spawn_t)
        actors.append(anomalous)
        smap = make_map(route_len, crosswalk_x=cross_x)
    elif spec.family == "cutin":
        route_len = 260.0
        uid = _nominal_furniture(rng, 1, route_len, actors, lead_p=0.0,
                                 follow_p=0.0, oncoming_p=0.0, parked_max=2,
                                 crosser_p=0.0, loiter_p=0.6, obstacle_p=0.4)
        for _ in range(4 - sum(1 for a in actors if isinstance(a, ParkedVehicle))):
            x0 = float(rng.uniform(50.0, route_len - 40.0))
            actors.append(ParkedVehicle(uid, KinematicState(x0, 0.0, PARKED_Y, 0.0, 0.0)))
            uid += 1
        gap0 = float(rng.uniform(8.0, 16.0))
        x0 = 4.0 - gap0 - 0.5 * (EGO_LENGTH + VEH_LENGTH)
        st = KinematicState(x0, v0, LANE_Y, 0.0, 0.0)
        if spec.perturbed:
            anomalous = WigglingVehicle(uid, st, v0, gap0,
                                        trigger_t=int(rng.integers(26, 34)))
        else:
            anomalous = CutInVehicle(uid, st, v0, gap0,
                                     trigger_t=int(rng.integers(26, 34)),
                                     speed_gain=float(rng.uniform(2.0, 5.0)),
                                     cutback_gap=float(rng.uniform(7.0, 12.0)))
        actors.append(anomalous)
        smap = make_map(route_len)
    elif spec.family == "nonpolicy":
        route_len = 200.0
        x_g = float(rng.uniform(150.0, 180.0))
        uid = _nominal_furniture(rng, 1, route_len, actors, lead_p=0.0,
                                 follow_p=0.5, oncoming_p=0.7, parked_max=3,
                                 crosser_p=0.0, loiter_p=0.5, obstacle_p=0.0,
                                 keep_clear=(x_g - 30.0, x_g + 30.0))
        st = KinematicState(x_g, 0.0, float(rng.uniform(-0.5, 0.5)), 0.0, 0.0)
        anomalous = StaticObstacle(uid, st)
        actors.append(anomalous)
        smap = make_map(route_len)
    elif spec.family == "casual":
        route_len = 200.0
        v0 = float(rng.uniform(6.5, 9.0))
        _nominal_furniture(rng, 1, route_len, actors)
        smap = make_map(route_len)
    else:  # nominal pretraining worlds
        route_len = 200.0
        v0 = float(rng.uniform(6.0, 8.5))
        _nominal_furniture(rng, 1, route_len, actors, lead_p=0.6, follow_p=0.5,
                           oncoming_p=0.7, parked_max=2, crosser_p=0.6,
                           loiter_p=0.4, obstacle_p=0.3)
        smap = make_map(route_len)

    ego = KinematicState(4.0, v0, LANE_Y, 0.0, 0.0)
    world = ScenarioWorld(smap, ego, actors, seed_actors, route_len)
    horizon = int((route_len - 4.0) / (3.0 * DT))
    anomalous_uid = anomalous.uid if anomalous is not None else None
    return BuiltWorld(world, v0, route_len, horizon, anomalous_uid, anomalous)


# ---------------------------------------------------------------------------
# recording


def _rebased_case(frames: list[Frame], offset: int, smap: ScenarioMap,
                  meta: dict) -> DisengagementCase:
    window = frames[offset:]
    rebased = tuple(
        Frame(i, fr.ego, fr.objects) for i, fr in enumerate(window)
    )
    return DisengagementCase(rebased, len(rebased) - 1, smap, meta)


def _roll_cruiser(built: BuiltWorld, max_frames: int, stop_on_fire: bool):
    """Drive the recording ego; returns the intervention frame or None."""
    world = built.world
    driver = Cruiser(built.cruiser_v0)
    fire_t = None
    for _ in range(max_frames):
        fr = world.step(driver.action(world))
        if world.collided():
            return None, True
        if stop_on_fire and pseudo_driver(fr):
            fire_t = world.t
            break
    return fire_t, False


def _salvageable(spec: ScenarioSpec, attempt: int, horizon: int) -> bool:
    built = build_world(spec, attempt)
    driver = BrakeTester(built.cruiser_v0)
    for _ in range(horizon):
        world = built.world
        world.step(driver.action(world))
        if world.collided():
            return False
        if world.ego.x >= built.route_len - 0.5:
            break
    return True


def gen_scenario(spec: ScenarioSpec, max_attempts: int = 40) -> DisengagementCase:
    """Record one disengagement case for the spec's family.

    Draws that never trigger an intervention, collide during recording, or
    fail the brake-test salvageability probe are retried under new attempt
    indices; the accepted attempt is stored in the case metadata so the same
    world can be rebuilt for closed-loop evaluation.
    """
    if spec.perturbed:
        raise ScenarioError("perturbed variants are evaluation worlds only")
    if spec.family == "nominal":
        raise ScenarioError("nominal worlds are for pretraining, not recording")

    for attempt in range(max_attempts):
        built = build_world(spec, attempt)
        meta = {
            "family": spec.family,
            "seed": spec.seed,
            "attempt": attempt,
            "truth": {"uid": built.anomalous_uid, "onset": None},
        }
        if spec.family == "casual":
            fire_t, crashed = _roll_cruiser(built, FRAME_CASE_LEN + 24, stop_on_fire=False)
            world = built.world
            bad = crashed or any(
                pseudo_driver(fr) for fr in world.frames
            )
            if bad:
                continue
            rng = np.random.default_rng(np.random.SeedSequence(
                [FAMILIES.index("casual"), spec.seed & 0x7FFFFFFF, attempt, 7]
            ))
            end = int(rng.integers(FRAME_CASE_LEN - 1, len(world.frames)))
            meta["truth"] = {"uid": None, "onset": None}
            return _rebased_case(world.frames[: end + 1], end - (FRAME_CASE_LEN - 1),
                                 built.world.smap, meta)

        fire_t, crashed = _roll_cruiser(built, 100, stop_on_fire=True)
        if crashed or fire_t is None or fire_t < RECORD_FRAMES - 1:
            continue
        offset = fire_t - (RECORD_FRAMES - 1)
        onset = getattr(built.anomalous, "onset_t", None)
        if spec.family in ("dash", "cutin"):
            if onset is None or onset <= offset:
                continue
            if not _salvageable(spec, attempt, built.horizon):
                continue
            meta["truth"] = {"uid": built.anomalous_uid, "onset": onset - offset}
        return _rebased_case(built.world.frames, offset, built.world.smap, meta)
    raise ScenarioError(
        f"no acceptable recording for {spec.family} seed {spec.seed} "
        f"after {max_attempts} attempts"
    )
