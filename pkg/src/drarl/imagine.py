"""Reason-augmented training environment rebuilt from a disengagement case.

Each episode replays the recording and hands reason objects over to
interactive models.  Two episode modes are drawn uniformly: Diversify switches
a reason object to an interactive model from the start of its reason window,
with behavior redrawn every episode (usually nominal, sometimes a variant of
the recorded move, so the anomaly rarely recurs but can never be dodged by
timing alone); Reproduce replays everything through the takeover frame and
only then goes interactive, so the anomaly recurs exactly as logged.  The
Diversify switch is anchored to where the recorded ego was when the window
opened, not just to the frame clock, so a policy that drives faster than the
recording meets the interactive object all the same.  Objects that are not
part of the reason always replay; when their log runs out they leave the
scene, as in log resimulation.
"""

from __future__ import annotations

import copy
import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    DT,
    DisengagementCase,
    Frame,
    KinematicState,
    ObjectRecord,
    ReasonSet,
    ScenarioMap,
    wrap_angle,
)
from .features import featurize
from .sim import (
    EGO_LENGTH,
    ActorBinding,
    EgoTransition,
    InteractiveModelParams,
    detect_collision,
    detect_stuck,
    project_polyline,
    step_ego,
    step_pedestrian,
    step_replay,
    step_vehicle,
)


class ImagineError(Exception):
    pass


class EpisodeMode(enum.Enum):
    DIVERSIFY = "diversify"
    REPRODUCE = "reproduce"


@dataclass(frozen=True)
class RewardConfig:
    """r = speed_coef * v_forward + progress_coef * progress gain + collision.

    The speed term uses the velocity component along the route so sideways
    motion earns nothing.
    """

    speed_coef: float = 0.01       # per m/s of forward ego speed
    progress_coef: float = 0.1     # per metre of route progress
    collision_penalty: float = -1.0

    def __post_init__(self):
        if self.speed_coef <= 0 or self.progress_coef <= 0 or self.collision_penalty >= 0:
            raise ValueError("reward coefficients out of range")


def step_reward(cfg: RewardConfig, smap: ScenarioMap, ego: KinematicState,
                progress_gain: float, collided: bool) -> float:
    hd = smap.route_heading(ego.x, ego.y)
    v_forward = ego.vx * math.cos(hd) + ego.vy * math.sin(hd)
    r = cfg.speed_coef * v_forward + cfg.progress_coef * progress_gain
    if collided:
        r += cfg.collision_penalty
    return r


@dataclass(frozen=True)
class ImagineConfig:
    reward: RewardConfig = field(default_factory=RewardConfig)
    horizon_extra: int = 30              # frames allowed past the recording
    ego: EgoTransition = field(default_factory=EgoTransition)
    interactive_noise_std: float = 0.15  # accel noise of interactive models
    goal_margin: float = 0.5             # metres short of the route end
    reappear_p: float = 0.4              # chance a Diversify draw acts out again


def _derive_ped_params(traj: dict[int, KinematicState], noise_std: float) -> InteractiveModelParams:
    ts = sorted(traj)
    first, last = traj[ts[0]], traj[ts[-1]]
    disp = (last.x - first.x, last.y - first.y)
    speeds = [traj[t].speed for t in ts]
    walk = float(np.median([s for s in speeds if s > 0.2] or [1.2]))
    walk = min(max(walk, 0.8), 6.5)
    norm = math.hypot(*disp)
    if norm < 0.5:
        # loiterer: head across the road the way it is facing
        hx, hy = math.cos(last.heading), math.sin(last.heading)
        goal = (last.x + 12.0 * hx, last.y + 12.0 * hy)
    else:
        goal = (last.x + disp[0] / norm * 12.0, last.y + disp[1] / norm * 12.0)
    return InteractiveModelParams(ped_speed=walk, ped_goal=goal, noise_std=noise_std)


def _derive_vehicle_params(traj: dict[int, KinematicState], noise_std: float) -> InteractiveModelParams:
    speeds = [st.speed for st in traj.values()]
    v0 = max(3.0, float(np.median(speeds)))
    return InteractiveModelParams(idm_v0=v0, noise_std=noise_std)


@dataclass
class _LiveObject:
    uid: int
    kind: str
    length: float
    width: float
    binding: ActorBinding
    params: InteractiveModelParams
    state: KinematicState | None = None   # None before spawn or after despawn
    exhausted: bool = False
    despawned: bool = False
    anchor: tuple[float, float] | None = None  # first seen position

    @property
    def last_recorded(self) -> int:
        return max(self.binding.replay)


class ImaginationEnv:
    """Gym-style environment: reset(seed) -> obs, step(a) -> (obs, r, done, info)."""

    def __init__(
        self,
        case: DisengagementCase,
        reason: ReasonSet,
        mode_rng: np.random.Generator | None = None,
        config: ImagineConfig | None = None,
        replay_only: bool = False,
    ):
        if not replay_only and reason.empty:
            raise ImagineError("casual disengagement: no training environment to build")
        self.case = case
        self.reason = reason
        self.config = config or ImagineConfig()
        self._mode_rng = mode_rng or np.random.default_rng(0)
        self.replay_only = replay_only
        self.smap = case.smap
        self._route_len = self.smap.route_length()
        d = case.disengagement_t
        self.disengagement_t = d
        self._switch: dict[int, int] = {e.uid: e.start_frame for e in reason.elements}
        # route position of the recorded ego when each window opened; a live
        # ego that gets there ahead of the log clock must not outrun the switch
        self._switch_progress: dict[int, float] = {
            e.uid: self.smap.progress_of(case.frames[e.start_frame].ego.x,
                                         case.frames[e.start_frame].ego.y)
            for e in reason.elements
            if 0 <= e.start_frame < len(case.frames)
        }
        if replay_only:
            self.t0 = case.frames[0].t
        else:
            spawns = []
            for e in reason.elements:
                rng_ = case.presence_range(e.uid)
                if rng_ is None:
                    raise ImagineError(f"reason object {e.uid} never appears in the case")
                spawns.append(rng_[0])
            self.t0 = min(spawns)
        self.max_steps = (d - self.t0) + self.config.horizon_extra
        self._objects_template = self._build_objects()
        # episode state
        self.mode: EpisodeMode | None = None
        self.t = self.t0
        self.done = True
        self.outcome: str | None = None

    # construction ---------------------------------------------------------

    def _build_objects(self) -> dict[int, _LiveObject]:
        out: dict[int, _LiveObject] = {}
        noise = self.config.interactive_noise_std
        for uid in self.case.object_uids():
            traj = self.case.trajectory_of(uid)
            rec = self.case.record_of(uid)
            binding = ActorBinding(uid, rec.kind, rec.length, rec.width, dict(traj))
            if rec.kind in ("pedestrian", "cyclist"):
                params = _derive_ped_params(traj, noise)
            elif rec.kind == "vehicle":
                params = _derive_vehicle_params(traj, noise)
            else:
                params = InteractiveModelParams(noise_std=0.0)
            out[uid] = _LiveObject(uid, rec.kind, rec.length, rec.width, binding, params)
        return out

    def _interactive_from(self, uid: int) -> int | None:
        if self.replay_only or uid not in self._switch:
            return None
        if self.mode is EpisodeMode.DIVERSIFY:
            return self._switch[uid]
        return self.disengagement_t + 1

    # episode control --------------------------------------------------------

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is None:
            seed = int(self._mode_rng.integers(0, 2**63 - 1))
        self._rng = np.random.default_rng(seed)
        self.mode = EpisodeMode.DIVERSIFY if self._rng.integers(2) == 0 else EpisodeMode.REPRODUCE
        self.t = self.t0
        self.steps = 0
        self.done = False
        self.outcome = None
        self.ego = self.case.frames[self.t0].ego
        self._start_progress = self.smap.progress_of(self.ego.x, self.ego.y)
        self._progress = self._start_progress
        self._speed_history: list[float] = [self.ego.speed]
        self.objects = copy.deepcopy(self._objects_template)
        for uid in sorted(self.objects):
            obj = self.objects[uid]
            obj.binding.interactive_from = self._interactive_from(uid)
            obj.state = obj.binding.replay.get(self.t0)
            obj.exhausted = False
            obj.despawned = False
            if self.mode is EpisodeMode.DIVERSIFY and obj.binding.interactive_from is not None:
                obj.params = self._episode_params(obj)
        return self._observation()

    def _episode_params(self, obj: _LiveObject) -> InteractiveModelParams:
        """Per-episode behavior draw for a reason object in Diversify mode.

        Most episodes the object behaves like everyone else; sometimes it
        repeats a variant of the recorded move.  A policy that merely dodges
        one fixed trajectory earns nothing here, because the move never comes
        back at the same moment twice.
        """
        rng = self._rng
        base = obj.params
        if obj.kind in ("pedestrian", "cyclist"):
            if rng.random() < self.config.reappear_p:
                speed = min(base.ped_speed * float(rng.uniform(0.8, 1.25)), 6.5)
                return replace(base, ped_speed=speed,
                               ped_yield_gap=float(rng.uniform(0.0, 0.3)),
                               ped_accel_gain=float(rng.uniform(2.5, 4.5)),
                               ped_accel_max=float(rng.uniform(4.0, 7.0)),
                               go_dist=float(rng.uniform(8.0, 25.0)))
            return replace(base, ped_speed=float(rng.uniform(0.9, 1.7)))
        if obj.kind == "vehicle":
            if rng.random() < self.config.reappear_p:
                if base.idm_v0 <= 3.0:
                    # observed mostly standing: pulls out when the ego is near
                    return replace(base, idm_v0=float(rng.uniform(2.5, 5.0)),
                                   idm_T=float(rng.uniform(0.6, 1.0)),
                                   go_dist=float(rng.uniform(8.0, 28.0)))
                return replace(base, cut_in=True,
                               cut_gain=float(rng.uniform(3.0, 6.0)),
                               cut_gap=float(rng.uniform(7.0, 13.0)))
            if base.idm_v0 <= 3.0:
                # observed mostly standing, so the nominal draw stays put
                return replace(base, hold=True)
            return base
        return base

    def _frame(self) -> Frame:
        recs = []
        for uid in sorted(self.objects):
            obj = self.objects[uid]
            if obj.state is not None and not obj.despawned:
                recs.append(ObjectRecord(uid, obj.kind, obj.state, obj.length, obj.width))
        return Frame(self.t, self.ego, tuple(recs))

    def _observation(self) -> np.ndarray:
        return featurize(self._frame(), self.smap)

    def _step_object(self, obj: _LiveObject, t_next: int, ego_now: KinematicState,
                     frame_now: Frame) -> None:
        if obj.despawned:
            return
        if obj.state is not None and obj.anchor is None:
            obj.anchor = (obj.state.x, obj.state.y)
        if (self.mode is EpisodeMode.DIVERSIFY
                and obj.binding.interactive_from is not None
                and self._progress >= self._switch_progress.get(obj.uid, math.inf)):
            # the ego reached the spot where the window opened in the log
            obj.binding.interactive_from = min(obj.binding.interactive_from, t_next)
        mode = obj.binding.mode_at(t_next)
        if mode == "replay":
            if t_next in obj.binding.replay:
                obj.state = step_replay(obj.binding, t_next)
                return
            if obj.state is None:
                return  # not yet spawned and never will be
            # log ran out (or a gap inside it): a replayed object has no more
            # data, so it leaves the scene the way log resimulation does
            obj.exhausted = True
            obj.despawned = True
            obj.state = None
            return
        else:
            if obj.state is None:
                return
            p = obj.params
            if (p.go_dist < math.inf or p.go_time < math.inf) and obj.anchor is not None:
                moved = math.hypot(obj.state.x - obj.anchor[0], obj.state.y - obj.anchor[1])
                # distance left along the route, bumper to crossing point; a
                # time trigger scales with the ego's speed so driving faster
                # shortens the fuse instead of outrunning it
                s_obj = self.smap.progress_of(obj.state.x, obj.state.y)
                gap = s_obj - self._progress - 0.5 * EGO_LENGTH
                limit = p.go_dist
                if p.go_time < math.inf:
                    limit = max(ego_now.speed, 1.0) * p.go_time
                if moved < 0.6 and gap > limit:
                    # waits for its moment: the redrawn move keys off the ego's approach
                    if obj.state.speed > 0.0:
                        obj.state = KinematicState(obj.state.x, 0.0, obj.state.y, 0.0,
                                                   obj.state.heading)
                    return
            rng = self._rng
            if obj.kind in ("pedestrian", "cyclist"):
                obj.state = step_pedestrian(obj.state, ego_now, obj.params, rng)
            elif obj.kind == "vehicle":
                if obj.params.cut_in:
                    obj.state = self._step_cut_in(obj, ego_now, frame_now, rng)
                else:
                    leader = self._leader_for(obj, frame_now)
                    line = self._line_for(obj)
                    obj.state = step_vehicle(obj.state, line, obj.params, leader, rng)
            # static obstacles hold their pose
        if obj.state is not None and not self.smap.is_drivable(obj.state.x, obj.state.y):
            obj.despawned = True
            obj.state = None

    def _step_cut_in(self, obj: _LiveObject, ego: KinematicState, frame: Frame,
                     rng) -> KinematicState:
        """Overtake-and-cut-in maneuver for a redrawn reason vehicle.

        The phase is read off the geometry every step: push down the passing
        lane until the merge gap opens, swing into the ego lane shedding
        speed, then settle into plain following.  Each phase is keyed off the
        live ego, so the move lands wherever the ego actually is.
        """
        p = obj.params
        st = obj.state
        ego_line = self.smap.reference_lines[0]
        # passing lane, driven in the ego's direction (the oncoming reference
        # line points the other way and would steer the car off the road)
        off = self.smap.lane_width
        pass_line = tuple((x, y + off) for x, y in ego_line)
        gap_ahead = (st.x - 0.5 * obj.length) - (ego.x + 0.5 * EGO_LENGTH)
        _, lat, _ = project_polyline(ego_line, st.x, st.y)
        if gap_ahead >= p.cut_gap or (gap_ahead > 0.0 and abs(lat) < 0.4):
            if abs(lat) < 0.4:
                leader = self._leader_for(obj, frame)
                return step_vehicle(st, ego_line, p, leader, rng)
            merge = replace(p, idm_v0=max(ego.speed - 2.0, 2.0))
            return step_vehicle(st, ego_line, merge, None, rng)
        # replaying the pre-window log can leave the car well behind the live
        # ego, so the push speed grows with the distance still to make up
        catch_up = min(max(-gap_ahead, 0.0) / 8.0, 8.0)
        push = replace(p, idm_v0=ego.speed + p.cut_gain + catch_up, idm_a_max=2.5)
        return step_vehicle(st, pass_line, push, None, rng)

    def _line_for(self, obj: _LiveObject):
        st = obj.state
        best = None
        for line in self.smap.reference_lines:
            for candidate in (line, tuple(reversed(line))):
                s, lat, hd = project_polyline(candidate, st.x, st.y)
                err = abs(lat) + 4.0 * abs(wrap_angle(st.heading - hd))
                if best is None or err < best[0]:
                    best = (err, candidate)
        return best[1]

    def _leader_for(self, obj: _LiveObject, frame: Frame) -> tuple[float, float] | None:
        st = obj.state
        ux, uy = math.cos(st.heading), math.sin(st.heading)
        best: tuple[float, float] | None = None
        candidates: list[tuple[KinematicState, float]] = [(frame.ego, 4.6)]
        for rec in frame.objects:
            if rec.uid != obj.uid:
                candidates.append((rec.state, rec.length))
        for other, length in candidates:
            rx, ry = other.x - st.x, other.y - st.y
            along = rx * ux + ry * uy
            lat = -rx * uy + ry * ux
            if along <= 0.0 or abs(lat) > 0.7 * self.smap.lane_width:
                continue
            gap = along - 0.5 * (obj.length + length)
            lead_speed = other.vx * ux + other.vy * uy
            if best is None or gap < best[0]:
                best = (gap, max(lead_speed, 0.0))
        return best

    def step(self, action) -> tuple[np.ndarray, float, bool, dict]:
        if self.done:
            raise ImagineError("step after episode end; call reset")
        ego_now = self.ego
        frame_now = self._frame()
        t_next = self.t + 1
        self.ego = step_ego(ego_now, action, self.config.ego)
        for uid in sorted(self.objects):
            self._step_object(self.objects[uid], t_next, ego_now, frame_now)
        self.t = t_next
        self.steps += 1
        frame = self._frame()
        new_progress = self.smap.progress_of(self.ego.x, self.ego.y)
        gain = new_progress - self._progress
        self._progress = new_progress
        collided = detect_collision(frame)
        reward = step_reward(self.config.reward, self.smap, self.ego, gain, collided)
        self._speed_history.append(self.ego.speed)
        info: dict = {"t": self.t, "mode": self.mode.value if self.mode else None,
                      "progress": new_progress}
        if collided:
            self.done = True
            self.outcome = "collision"
        elif new_progress >= self._route_len - self.config.goal_margin:
            self.done = True
            self.outcome = "passed"
        elif detect_stuck(self._speed_history):
            self.done = True
            self.outcome = "stuck"
        elif self.steps >= self.max_steps:
            self.done = True
            self.outcome = "timeout"
        if self.done:
            info["outcome"] = self.outcome
        return self._observation(), reward, self.done, info

    # snapshot/restore -------------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "t": self.t,
            "steps": self.steps,
            "done": self.done,
            "outcome": self.outcome,
            "mode": self.mode,
            "ego": self.ego,
            "progress": self._progress,
            "start_progress": self._start_progress,
            "speed_history": list(self._speed_history),
            "objects": copy.deepcopy(self.objects),
            "rng_state": copy.deepcopy(self._rng.bit_generator.state),
        }

    def restore(self, snap: dict) -> None:
        self.t = snap["t"]
        self.steps = snap["steps"]
        self.done = snap["done"]
        self.outcome = snap["outcome"]
        self.mode = snap["mode"]
        self.ego = snap["ego"]
        self._progress = snap["progress"]
        self._start_progress = snap["start_progress"]
        self._speed_history = list(snap["speed_history"])
        self.objects = copy.deepcopy(snap["objects"])
        self._rng = np.random.default_rng(0)
        self._rng.bit_generator.state = copy.deepcopy(snap["rng_state"])


def build_env(
    case: DisengagementCase,
    reason: ReasonSet,
    mode_rng: np.random.Generator | None = None,
    config: ImagineConfig | None = None,
) -> ImaginationEnv:
    """Reason-augmented environment; rejects an empty reason set."""
    return ImaginationEnv(case, reason, mode_rng, config)


def build_replay_env(
    case: DisengagementCase,
    mode_rng: np.random.Generator | None = None,
    config: ImagineConfig | None = None,
) -> ImaginationEnv:
    """Pure log-replay environment (no reasoning), for the replay baseline."""
    return ImaginationEnv(case, ReasonSet(), mode_rng, config, replay_only=True)
