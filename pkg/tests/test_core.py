import io
import math

import numpy as np
import pytest

from drarl.core import (
    DT,
    CaseParseError,
    CaseValidationError,
    DisengagementCase,
    Frame,
    KinematicState,
    ObjectRecord,
    ReasonElement,
    ReasonSet,
    ReplayBuffer,
    ScenarioMap,
    load_buffer,
    load_case,
    save_buffer,
    save_case,
    validate_case,
    validate_frames,
    wrap_angle,
)


def make_map(length=100.0):
    lines = (
        ((0.0, 0.0), (length, 0.0)),
        ((length, 3.5), (0.0, 3.5)),
    )
    return ScenarioMap(reference_lines=lines)


def make_case(n_frames=4):
    frames = []
    for t in range(n_frames):
        ego = KinematicState(4.0 + 5.0 * DT * t, 5.0, 0.0, 0.0, 0.0)
        objects = (
            ObjectRecord(1, "pedestrian", KinematicState(20.0, 0.0, 4.0, 0.0, -1.5), 0.5, 0.5),
            ObjectRecord(2, "vehicle", KinematicState(30.0 + 3.0 * DT * t, 3.0, 0.0, 0.0, 0.0), 4.4, 1.8),
        )
        frames.append(Frame(t, ego, objects))
    return DisengagementCase(tuple(frames), n_frames - 1, make_map(), {"family": "test"})


def test_wrap_angle_range():
    rng = np.random.default_rng(0)
    for a in rng.uniform(-50.0, 50.0, size=500):
        w = wrap_angle(float(a))
        assert -math.pi < w <= math.pi
        # same direction up to a full turn
        assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-12)
        assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-12)


def test_wrap_angle_boundary():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3.0 * math.pi / 2.0) == pytest.approx(-math.pi / 2.0)
    assert wrap_angle(0.0) == 0.0


def test_state_speed_and_heading_refresh():
    st = KinematicState(0.0, 3.0, 0.0, 4.0, 0.0)
    assert st.speed == pytest.approx(5.0)
    assert st.with_heading_from_velocity().heading == pytest.approx(math.atan2(4.0, 3.0))
    # standstill keeps the old heading instead of snapping to atan2(0, 0)
    still = KinematicState(1.0, 0.0, 2.0, 0.0, 0.7)
    assert still.with_heading_from_velocity().heading == 0.7


def test_state_list_roundtrip():
    st = KinematicState(1.0, 2.0, 3.0, 4.0, 0.5)
    assert KinematicState.from_list(st.to_list()) == st


def test_frame_get_and_roundtrip():
    case = make_case()
    fr = case.frames[0]
    assert fr.get(1).kind == "pedestrian"
    assert fr.get(99) is None
    assert Frame.from_dict(fr.to_dict()) == fr


def test_map_progress_and_lateral_sign():
    smap = make_map()
    assert smap.route_length() == pytest.approx(100.0)
    assert smap.progress_of(40.0, 0.0) == pytest.approx(40.0)
    # left of the direction of travel is positive
    assert smap.lateral_offset(40.0, 1.0) == pytest.approx(1.0)
    assert smap.lateral_offset(40.0, -1.0) == pytest.approx(-1.0)
    assert smap.route_heading(40.0, 0.2) == pytest.approx(0.0)


def test_map_progress_clamps_at_ends():
    smap = make_map()
    assert smap.progress_of(-5.0, 0.0) == pytest.approx(0.0)
    assert smap.progress_of(130.0, 0.0) == pytest.approx(100.0)


def test_map_drivable_band():
    smap = make_map()
    # half lane plus shoulder margin: 1.75 + 2.0
    assert smap.is_drivable(50.0, 0.0)
    assert smap.is_drivable(50.0, -3.7)
    assert not smap.is_drivable(50.0, -3.8)
    assert smap.is_drivable(50.0, 3.5)  # oncoming line corridor
    assert not smap.is_drivable(50.0, 9.0)
    assert not smap.is_drivable(150.0, 0.0)  # beyond the route end


def test_map_translated_consistency():
    smap = make_map()
    moved = smap.translated(10.0, -2.0)
    assert moved.progress_of(50.0, -2.0) == pytest.approx(smap.progress_of(40.0, 0.0))
    assert moved.lateral_offset(50.0, -1.0) == pytest.approx(smap.lateral_offset(40.0, 1.0))
    assert ScenarioMap.from_dict(moved.to_dict()) == moved


def test_reason_set_basics():
    empty = ReasonSet()
    assert empty.empty
    rs = ReasonSet((ReasonElement(3, 5, 11),))
    assert not rs.empty
    assert rs.uids() == (3,)
    assert ReasonSet.from_dict(rs.to_dict()) == rs


def test_case_helpers():
    case = make_case()
    assert case.object_uids() == [1, 2]
    assert case.presence_range(1) == (0, 3)
    assert case.presence_range(42) is None
    traj = case.trajectory_of(2)
    assert sorted(traj) == [0, 1, 2, 3]
    assert traj[2].x == pytest.approx(33.0)
    assert case.record_of(1).width == 0.5
    with pytest.raises(KeyError):
        case.record_of(42)


def test_validate_clean_case():
    assert validate_case(make_case()) == []


def test_validate_flags_bad_timestamps():
    case = make_case()
    frames = list(case.frames)
    frames[2] = Frame(5, frames[2].ego, frames[2].objects)
    out = validate_frames(tuple(frames))
    assert any("timestamp continuity" in v for v in out)


def test_validate_flags_duplicate_uid():
    fr = Frame(0, KinematicState(0, 1, 0, 0, 0), (
        ObjectRecord(7, "vehicle", KinematicState(5, 1, 0, 0, 0), 4.4, 1.8),
        ObjectRecord(7, "vehicle", KinematicState(9, 1, 0, 0, 0), 4.4, 1.8),
    ))
    out = validate_frames((fr,))
    assert any("uniqueness" in v for v in out)


def test_validate_flags_bad_kind_and_footprint():
    fr = Frame(0, KinematicState(0, 1, 0, 0, 0), (
        ObjectRecord(1, "dragon", KinematicState(5, 0, 0, 0, 0), 4.4, 1.8),
        ObjectRecord(2, "vehicle", KinematicState(9, 0, 0, 0, 0), 0.0, 1.8),
    ))
    out = validate_frames((fr,))
    assert any("kind" in v for v in out)
    assert any("footprint" in v for v in out)


def test_validate_flags_speed_cap_and_heading():
    fast = Frame(0, KinematicState(0, 31.0, 0, 0, 0), ())
    assert any("velocity cap" in v for v in validate_frames((fast,)))
    skewed = Frame(0, KinematicState(0, 5.0, 0, 0.0, 1.0), ())
    assert any("heading" in v for v in validate_frames((skewed,)))


def test_validate_flags_presence_gap():
    ego = KinematicState(0, 1, 0, 0, 0)
    rec = ObjectRecord(4, "vehicle", KinematicState(5, 1, 0, 0, 0), 4.4, 1.8)
    frames = (Frame(0, ego, (rec,)), Frame(1, ego), Frame(2, ego, (rec,)))
    assert any("continuity: uid 4" in v for v in validate_frames(frames))


def test_validate_case_specifics():
    case = make_case()
    shifted = DisengagementCase(
        tuple(Frame(fr.t + 1, fr.ego, fr.objects) for fr in case.frames),
        case.disengagement_t + 1, case.smap, {})
    assert any("start at t = 0" in v for v in validate_case(shifted))

    wrong_d = DisengagementCase(case.frames, 99, case.smap, {})
    assert any("disengagement index" in v for v in validate_case(wrong_d))

    bad_map = DisengagementCase(case.frames, case.disengagement_t,
                                ScenarioMap((((0.0, 0.0),),)), {})
    assert any("map geometry" in v for v in validate_case(bad_map))

    bad_reason = DisengagementCase(case.frames, case.disengagement_t, case.smap,
                                   {"reason": [{"start_frame": 2, "end_frame": 2}]})
    assert any("reason window" in v for v in validate_case(bad_reason))


def test_case_roundtrip_stream_and_file(tmp_path):
    case = make_case()
    buf = io.StringIO()
    save_case(case, buf)
    loaded = load_case(io.StringIO(buf.getvalue()))
    assert loaded == case

    path = tmp_path / "case.jsonl"
    save_case(case, str(path))
    assert load_case(str(path)) == case


def test_save_rejects_invalid_case():
    case = make_case()
    broken = DisengagementCase(case.frames, 99, case.smap, {})
    with pytest.raises(CaseValidationError):
        save_case(broken, io.StringIO())


def test_load_errors_carry_line_numbers():
    with pytest.raises(CaseParseError) as exc:
        load_case(io.StringIO(""))
    assert exc.value.line == 1

    with pytest.raises(CaseParseError):
        load_case(io.StringIO('{"schema":"something-else"}\n'))

    case = make_case()
    buf = io.StringIO()
    save_case(case, buf)
    lines = buf.getvalue().splitlines()
    lines[2] = "{not json"
    with pytest.raises(CaseParseError) as exc:
        load_case(io.StringIO("\n".join(lines)))
    assert exc.value.line == 3


def test_buffer_roundtrip(tmp_path):
    case = make_case()
    other = tuple(Frame(fr.t, fr.ego) for fr in case.frames[:2])
    buffer = ReplayBuffer((case.frames, other))
    path = tmp_path / "buffer.jsonl"
    save_buffer(buffer, str(path))
    loaded = load_buffer(str(path))
    assert loaded == buffer
    assert len(loaded) == 2


def test_buffer_parse_errors():
    with pytest.raises(CaseParseError):
        load_buffer(io.StringIO('{"schema":"replay-buffer-v1","dt":0.5,"episodes":3}\n'))
    bad = (
        '{"schema":"replay-buffer-v1","dt":0.5,"episodes":1}\n'
        '{"t":0,"ego":[0,0,0,0,0],"objects":[]}\n'
    )
    with pytest.raises(CaseParseError) as exc:
        load_buffer(io.StringIO(bad))
    assert "delimiter" in str(exc.value)
