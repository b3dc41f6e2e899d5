"""Domain types for disengagement recordings and their JSON-lines persistence.

A recording is a sequence of frames at a fixed 0.5 s step.  Each frame holds
the ego vehicle state plus every tracked surrounding object.  A disengagement
case is such a recording whose last frame is the takeover moment; a reason set
names the objects (and frame windows) that explain the takeover.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import IO, Iterable

DT = 0.5                # seconds per frame, fixed across the whole pipeline
SPEED_CAP = 30.0        # domain-wide |vx|, |vy| bound (m/s)
HEADING_SPEED_MIN = 0.1  # below this speed a state keeps its previous heading

VALID_KINDS = ("vehicle", "pedestrian", "cyclist", "static_obstacle")

CASE_SCHEMA = "disengagement-case-v1"
BUFFER_SCHEMA = "replay-buffer-v1"


class CaseError(Exception):
    """Base class for recording persistence and validation failures."""


class CaseIOError(CaseError):
    """Underlying stream or filesystem failure while reading or writing."""


class CaseParseError(CaseError):
    """Malformed input; carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CaseValidationError(CaseError):
    """A domain invariant does not hold; the message names the invariant."""


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class KinematicState:
    """Planar state (x, vx, y, vy) plus a heading that survives standstill."""

    x: float
    vx: float
    y: float
    vy: float
    heading: float = 0.0

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)

    def with_heading_from_velocity(self) -> "KinematicState":
        """Refresh heading from velocity; keep the old one at standstill."""
        if self.speed > HEADING_SPEED_MIN:
            return replace(self, heading=math.atan2(self.vy, self.vx))
        return self

    def to_list(self) -> list[float]:
        return [self.x, self.vx, self.y, self.vy, self.heading]

    @classmethod
    def from_list(cls, vals: Iterable[float]) -> "KinematicState":
        x, vx, y, vy, heading = vals
        return cls(float(x), float(vx), float(y), float(vy), float(heading))


@dataclass(frozen=True)
class ObjectRecord:
    """One tracked object in one frame."""

    uid: int
    kind: str
    state: KinematicState
    length: float
    width: float

    def to_dict(self) -> dict:
        return {
            "uid": self.uid,
            "kind": self.kind,
            "state": self.state.to_list(),
            "length": self.length,
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectRecord":
        return cls(
            uid=int(d["uid"]),
            kind=str(d["kind"]),
            state=KinematicState.from_list(d["state"]),
            length=float(d["length"]),
            width=float(d["width"]),
        )


@dataclass(frozen=True)
class Frame:
    """Ego state plus all tracked objects at one timestep."""

    t: int
    ego: KinematicState
    objects: tuple[ObjectRecord, ...] = ()

    def get(self, uid: int) -> ObjectRecord | None:
        for rec in self.objects:
            if rec.uid == uid:
                return rec
        return None

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "ego": self.ego.to_list(),
            "objects": [rec.to_dict() for rec in self.objects],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Frame":
        return cls(
            t=int(d["t"]),
            ego=KinematicState.from_list(d["ego"]),
            objects=tuple(ObjectRecord.from_dict(o) for o in d["objects"]),
        )


Polyline = tuple[tuple[float, float], ...]


def _polyline_lengths(line: Polyline) -> list[float]:
    out = []
    for (x0, y0), (x1, y1) in zip(line[:-1], line[1:]):
        out.append(math.hypot(x1 - x0, y1 - y0))
    return out


@dataclass(frozen=True)
class ScenarioMap:
    """Reference lines, lane width, crosswalk segments and a drivable test.

    The first reference line is the ego route by convention.  Progress and
    lateral offset are measured against it.
    """

    reference_lines: tuple[Polyline, ...]
    lane_width: float = 3.5
    crosswalks: tuple[tuple[tuple[float, float], tuple[float, float]], ...] = ()
    drivable_margin: float = 2.0  # shoulder beyond lane edges still drivable

    @property
    def ego_line(self) -> Polyline:
        return self.reference_lines[0]

    def route_length(self) -> float:
        return sum(_polyline_lengths(self.ego_line))

    def _project(self, line: Polyline, x: float, y: float) -> tuple[float, float, float]:
        """Return (arclength, signed lateral offset, segment heading)."""
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
            # left of travel direction is positive
            lat = -(x - px) * uy + (y - py) * ux
            cand = (dist, s_start + clamped, lat, math.atan2(uy, ux))
            if best is None or cand[0] < best[0]:
                best = cand
            s_start += seg
        assert best is not None
        return best[1], best[2], best[3]

    def progress_of(self, x: float, y: float) -> float:
        return self._project(self.ego_line, x, y)[0]

    def lateral_offset(self, x: float, y: float) -> float:
        return self._project(self.ego_line, x, y)[1]

    def route_heading(self, x: float, y: float) -> float:
        return self._project(self.ego_line, x, y)[2]

    def frenet(self, x: float, y: float) -> tuple[float, float, float]:
        return self._project(self.ego_line, x, y)

    def project_onto(self, line_index: int, x: float, y: float) -> tuple[float, float, float]:
        return self._project(self.reference_lines[line_index], x, y)

    def is_drivable(self, x: float, y: float) -> bool:
        """Inside the corridor of any reference line, with shoulder margin."""
        half = 0.5 * self.lane_width + self.drivable_margin
        for line in self.reference_lines:
            s, lat, _ = self._project(line, x, y)
            length = sum(_polyline_lengths(line))
            if abs(lat) <= half and -1e-9 <= s <= length + 1e-9:
                # reject points beyond the line ends
                (x0, y0), (xn, yn) = line[0], line[-1]
                end_dist = min(math.hypot(x - x0, y - y0), math.hypot(x - xn, y - yn))
                if 0.0 < s < length or end_dist <= half:
                    return True
        return False

    def translated(self, dx: float, dy: float) -> "ScenarioMap":
        lines = tuple(tuple((x + dx, y + dy) for x, y in line) for line in self.reference_lines)
        cws = tuple(((a[0] + dx, a[1] + dy), (b[0] + dx, b[1] + dy)) for a, b in self.crosswalks)
        return ScenarioMap(lines, self.lane_width, cws, self.drivable_margin)

    def to_dict(self) -> dict:
        return {
            "reference_lines": [[list(p) for p in line] for line in self.reference_lines],
            "lane_width": self.lane_width,
            "crosswalks": [[list(a), list(b)] for a, b in self.crosswalks],
            "drivable_margin": self.drivable_margin,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioMap":
        return cls(
            reference_lines=tuple(
                tuple((float(x), float(y)) for x, y in line) for line in d["reference_lines"]
            ),
            lane_width=float(d["lane_width"]),
            crosswalks=tuple(
                ((float(a[0]), float(a[1])), (float(b[0]), float(b[1])))
                for a, b in d["crosswalks"]
            ),
            drivable_margin=float(d.get("drivable_margin", 2.0)),
        )


@dataclass(frozen=True)
class ReasonElement:
    """One reason object with its anomalous frame window [start, end]."""

    uid: int
    start_frame: int
    end_frame: int


@dataclass(frozen=True)
class ReasonSet:
    """The identified explanation of a takeover; may be empty (casual)."""

    elements: tuple[ReasonElement, ...] = ()

    @property
    def empty(self) -> bool:
        return not self.elements

    def uids(self) -> tuple[int, ...]:
        return tuple(e.uid for e in self.elements)

    def to_dict(self) -> dict:
        return {
            "elements": [
                {"uid": e.uid, "start_frame": e.start_frame, "end_frame": e.end_frame}
                for e in self.elements
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReasonSet":
        return cls(
            tuple(
                ReasonElement(int(e["uid"]), int(e["start_frame"]), int(e["end_frame"]))
                for e in d["elements"]
            )
        )


@dataclass(frozen=True)
class DisengagementCase:
    """A takeover recording: frames, the takeover index, map and metadata."""

    frames: tuple[Frame, ...]
    disengagement_t: int
    smap: ScenarioMap
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)

    def object_uids(self) -> list[int]:
        seen: dict[int, None] = {}
        for fr in self.frames:
            for rec in fr.objects:
                seen.setdefault(rec.uid, None)
        return sorted(seen)

    def presence_range(self, uid: int) -> tuple[int, int] | None:
        """First and last frame index where the object appears."""
        ts = [fr.t for fr in self.frames if fr.get(uid) is not None]
        if not ts:
            return None
        return min(ts), max(ts)

    def trajectory_of(self, uid: int) -> dict[int, KinematicState]:
        out = {}
        for fr in self.frames:
            rec = fr.get(uid)
            if rec is not None:
                out[fr.t] = rec.state
        return out

    def record_of(self, uid: int) -> ObjectRecord:
        for fr in self.frames:
            rec = fr.get(uid)
            if rec is not None:
                return rec
        raise KeyError(uid)


@dataclass(frozen=True)
class ReplayBuffer:
    """Episodes of frames drawn from the original policy's training runs."""

    episodes: tuple[tuple[Frame, ...], ...] = ()

    def __len__(self) -> int:
        return len(self.episodes)


def _check_state(tag: str, st: KinematicState, violations: list[str]) -> None:
    vals = (st.x, st.vx, st.y, st.vy, st.heading)
    if not all(math.isfinite(v) for v in vals):
        violations.append(f"state bounds: {tag} has non-finite values")
        return
    if abs(st.vx) > SPEED_CAP + 1e-9 or abs(st.vy) > SPEED_CAP + 1e-9:
        violations.append(f"state bounds: {tag} exceeds the {SPEED_CAP} m/s velocity cap")
    if st.speed > HEADING_SPEED_MIN:
        want = math.atan2(st.vy, st.vx)
        if abs(wrap_angle(st.heading - want)) > 1e-6:
            violations.append(f"heading consistency: {tag} heading disagrees with velocity")


def validate_frames(frames: tuple[Frame, ...]) -> list[str]:
    """Frame-sequence invariants shared by cases and buffer episodes."""
    violations: list[str] = []
    if not frames:
        violations.append("frame sequence: empty recording")
        return violations
    for i, fr in enumerate(frames):
        if fr.t != frames[0].t + i:
            violations.append("timestamp continuity: frame timestamps must be consecutive")
            break
    _check_state("ego", frames[0].ego, violations)
    for fr in frames:
        _check_state(f"ego@{fr.t}", fr.ego, violations) if fr is not frames[0] else None
        seen = set()
        for rec in fr.objects:
            if rec.uid in seen:
                violations.append(f"object id uniqueness: uid {rec.uid} repeats in frame {fr.t}")
            seen.add(rec.uid)
            if rec.kind not in VALID_KINDS:
                violations.append(f"object kind: unknown kind {rec.kind!r}")
            if rec.length <= 0.0 or rec.width <= 0.0:
                violations.append(f"footprint positive: uid {rec.uid} has a degenerate footprint")
            _check_state(f"object {rec.uid}@{fr.t}", rec.state, violations)
    # presence must be one contiguous run per object
    presence: dict[int, list[int]] = {}
    for i, fr in enumerate(frames):
        for rec in fr.objects:
            presence.setdefault(rec.uid, []).append(i)
    for uid, idxs in presence.items():
        if idxs[-1] - idxs[0] + 1 != len(idxs):
            violations.append(f"object continuity: uid {uid} has gaps in its track")
    return violations


def validate_case(case: DisengagementCase) -> list[str]:
    """Return a list of violated invariants, empty when the case is sound."""
    violations = validate_frames(case.frames)
    if case.frames:
        if case.frames[0].t != 0:
            violations.append("timestamp continuity: recordings start at t = 0")
        if case.disengagement_t != case.frames[-1].t:
            violations.append("disengagement index: disengagement_t must be the last frame")
    if not case.smap.reference_lines or any(
        len(line) < 2 for line in case.smap.reference_lines
    ):
        violations.append("map geometry: reference lines need at least two points")
    if case.smap.lane_width <= 0.0:
        violations.append("map geometry: lane width must be positive")
    for e in case.meta.get("reason", []):
        b, d = int(e["start_frame"]), int(e["end_frame"])
        if not (0 <= b < d <= case.disengagement_t):
            violations.append(
                "reason window: requires 0 <= start < end <= disengagement_t"
            )
    return violations


def _dump_line(obj: dict, sink: IO[str]) -> None:
    sink.write(json.dumps(obj, separators=(",", ":")))
    sink.write("\n")


def _open_sink(sink):
    if hasattr(sink, "write"):
        return sink, False
    try:
        return open(sink, "w", encoding="utf-8"), True
    except OSError as exc:
        raise CaseIOError(f"cannot open {sink!r} for writing: {exc}") from exc


def _open_source(source):
    if hasattr(source, "read"):
        return source, False
    try:
        return open(source, "r", encoding="utf-8"), True
    except OSError as exc:
        raise CaseIOError(f"cannot open {source!r} for reading: {exc}") from exc


def save_case(case: DisengagementCase, sink) -> None:
    """Write a validated case as JSON lines; rejects invariant violations."""
    violations = validate_case(case)
    if violations:
        raise CaseValidationError(violations[0])
    out, owned = _open_sink(sink)
    try:
        header = {
            "schema": CASE_SCHEMA,
            "dt": DT,
            "disengagement_t": case.disengagement_t,
            "map": case.smap.to_dict(),
            "meta": case.meta,
        }
        _dump_line(header, out)
        for fr in case.frames:
            _dump_line(fr.to_dict(), out)
    except OSError as exc:
        raise CaseIOError(f"write failed: {exc}") from exc
    finally:
        if owned:
            out.close()


def load_case(source) -> DisengagementCase:
    """Parse a JSON-lines case; raises CaseParseError with a line number."""
    inp, owned = _open_source(source)
    try:
        try:
            lines = inp.read().splitlines()
        except OSError as exc:
            raise CaseIOError(f"read failed: {exc}") from exc
    finally:
        if owned:
            inp.close()
    if not lines:
        raise CaseParseError("empty stream, expected a case header", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CaseParseError(f"bad JSON: {exc.msg}", line=1) from exc
    if not isinstance(header, dict) or header.get("schema") != CASE_SCHEMA:
        raise CaseParseError(f"expected schema {CASE_SCHEMA!r}", line=1)
    frames = []
    for i, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            frames.append(Frame.from_dict(json.loads(raw)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CaseParseError(f"bad frame record: {exc}", line=i) from exc
    case = DisengagementCase(
        frames=tuple(frames),
        disengagement_t=int(header["disengagement_t"]),
        smap=ScenarioMap.from_dict(header["map"]),
        meta=header.get("meta", {}),
    )
    violations = validate_case(case)
    if violations:
        raise CaseValidationError(violations[0])
    return case


def save_buffer(buffer: ReplayBuffer, sink) -> None:
    """Write a replay buffer as JSON lines, one episode delimiter per episode."""
    out, owned = _open_sink(sink)
    try:
        _dump_line({"schema": BUFFER_SCHEMA, "dt": DT, "episodes": len(buffer.episodes)}, out)
        for i, episode in enumerate(buffer.episodes):
            _dump_line({"episode": i, "frames": len(episode)}, out)
            for fr in episode:
                _dump_line(fr.to_dict(), out)
    except OSError as exc:
        raise CaseIOError(f"write failed: {exc}") from exc
    finally:
        if owned:
            out.close()


def load_buffer(source) -> ReplayBuffer:
    inp, owned = _open_source(source)
    try:
        try:
            lines = inp.read().splitlines()
        except OSError as exc:
            raise CaseIOError(f"read failed: {exc}") from exc
    finally:
        if owned:
            inp.close()
    if not lines:
        raise CaseParseError("empty stream, expected a buffer header", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CaseParseError(f"bad JSON: {exc.msg}", line=1) from exc
    if not isinstance(header, dict) or header.get("schema") != BUFFER_SCHEMA:
        raise CaseParseError(f"expected schema {BUFFER_SCHEMA!r}", line=1)
    episodes: list[tuple[Frame, ...]] = []
    current: list[Frame] | None = None
    for i, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            d = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise CaseParseError(f"bad JSON: {exc.msg}", line=i) from exc
        if "episode" in d:
            if current is not None:
                episodes.append(tuple(current))
            current = []
        else:
            if current is None:
                raise CaseParseError("frame before the first episode delimiter", line=i)
            try:
                current.append(Frame.from_dict(d))
            except (KeyError, TypeError, ValueError) as exc:
                raise CaseParseError(f"bad frame record: {exc}", line=i) from exc
    if current is not None:
        episodes.append(tuple(current))
    if len(episodes) != int(header["episodes"]):
        raise CaseParseError("episode count disagrees with the header", line=1)
    return ReplayBuffer(tuple(episodes))
