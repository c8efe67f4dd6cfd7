import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vatrace.codec import (
    CodecConfig,
    InstructionPrompt,
    MalformedPrompt,
    MalformedResponse,
    Response,
    encode_response,
    pad_history,
    parse_prompt,
    parse_response,
    quantize_response,
    render_prompt,
)
from vatrace.domain import Action, ControlMode, ProprioState, RobotType, VisualTrace, all_control_modes

FRANKA = RobotType("Franka")
DELTA_VEL = ControlMode("joint_velocity", "delta")


def states(k, d_j=7):
    return tuple(ProprioState([0.1 * i + 0.01 * j for j in range(d_j)], 1.0) for i in range(k))


def test_prompt_template_prefix():
    p = InstructionPrompt(FRANKA, DELTA_VEL, "open the drawer", states(5), h=5, n=1)
    text = render_prompt(p)
    assert text.startswith(
        "You are a Franka robot using delta joint velocity control. The task is open the drawer,"
    )
    assert text.endswith("Can you predict the trajectory of the end-effector and the action of the next 1 steps?")
    assert "\n" not in text


def test_prompt_exact_text():
    p = InstructionPrompt(FRANKA, ControlMode("joint_position", "delta"), "pick cube",
                          (ProprioState((0.1, -0.25), 0.7),), h=2, n=3)
    assert render_prompt(p, CodecConfig(decimals=2)) == (
        "You are a Franka robot using delta joint position control. The task is pick cube, "
        "and the previous 2 steps are (0.10, -0.25, 0.70); (0.10, -0.25, 0.70). "
        "Can you predict the trajectory of the end-effector and the action of the next 3 steps?"
    )


def test_short_history_left_padded():
    hist = (ProprioState((1.0,), 0.0), ProprioState((2.0,), 1.0))
    text = render_prompt(InstructionPrompt(FRANKA, DELTA_VEL, "x", hist, h=5, n=1))
    assert parse_prompt(text).states == ((1.0, 0.0),) * 4 + ((2.0, 1.0),)


def test_history_without_gripper():
    hist = (ProprioState((1.0, 2.0), 0.3),)
    text = render_prompt(InstructionPrompt(FRANKA, DELTA_VEL, "x", hist, h=1, n=1),
                         CodecConfig(history_includes_gripper=False))
    assert "(1.000, 2.000)" in text


def test_horizon_sixteen():
    text = render_prompt(InstructionPrompt(FRANKA, DELTA_VEL, "x", states(3), h=16, n=16))
    assert text.endswith("the next 16 steps?")


def test_prompt_rejects_overlong_history():
    with pytest.raises(ValueError):
        InstructionPrompt(FRANKA, DELTA_VEL, "x", states(6), h=5, n=1)


def test_parse_prompt_recovers_fields():
    mode = ControlMode("end_effector_pose", "absolute")
    text = render_prompt(InstructionPrompt(RobotType("Google Robot"), mode, "x, and the previous 2 steps are (1.0)",
                                           states(2, 3), h=2, n=4))
    f = parse_prompt(text)
    assert (f.robot, f.mode, f.instruction, f.h, f.n) == (
        "Google Robot", mode, "x, and the previous 2 steps are (1.0)", 2, 4)


@pytest.mark.parametrize("text", [
    "hello",
    "You are a Franka robot using warp control. The task is x, and the previous 1 steps are (1.0). "
    "Can you predict the trajectory of the end-effector and the action of the next 1 steps?",
    "You are a Franka robot using delta joint velocity control. The task is x, and the previous 2 steps are (1.0). "
    "Can you predict the trajectory of the end-effector and the action of the next 1 steps?",
])
def test_parse_prompt_rejects(text):
    with pytest.raises(MalformedPrompt):
        parse_prompt(text)


prompt_inputs = st.tuples(
    st.sampled_from(["Franka", "Sawyer", "xArm", "Google Robot"]),
    st.sampled_from(all_control_modes()),
    st.text(alphabet=st.characters(blacklist_categories=("Cs", "Cc")), min_size=1, max_size=30),
    st.integers(1, 4),
    st.integers(1, 20),
    st.lists(st.lists(st.integers(-5000, 5000), min_size=2, max_size=2), min_size=1, max_size=4),
)


@settings(max_examples=200, deadline=None)
@given(a=prompt_inputs, b=prompt_inputs)
def test_render_prompt_injective(a, b):
    def build(args):
        robot, mode, instr, h, n, raw = args
        hist = [ProprioState((x / 1000.0,), (y % 1001) / 1000.0) for x, y in raw][-h:]
        return InstructionPrompt(RobotType(robot), mode, instr, hist, h, n)

    pa, pb = build(a), build(b)
    # states are exact at 3 decimals, so equal padded histories render equally
    key = lambda p: (p.robot, p.mode, p.instruction, p.h, p.n, tuple(pad_history(p.history, p.h)))
    if key(pa) != key(pb):
        assert render_prompt(pa) != render_prompt(pb)
    f = parse_prompt(render_prompt(pa))
    assert (f.robot, f.mode, f.instruction, f.h, f.n) == (pa.robot.name, pa.mode, pa.instruction, pa.h, pa.n)


# -- responses ------------------------------------------------------------------------

def test_encode_example():
    r = Response([Action((0.1, -0.2, 0.0, 0.73))], VisualTrace([(64, 64)], 1))
    assert encode_response(r) == "ACTIONS: [0.100, -0.200, 0.000, 1] TRACE: [(64, 64)]"


def test_encode_without_trace():
    r = Response([Action((0.1, 0.2))], VisualTrace([(64, 64)], 1))
    text = encode_response(r, CodecConfig(include_trace=False))
    assert "TRACE:" not in text
    assert not re.search(r"\(\s*\d+\s*,\s*\d+\s*\)", text)


def test_normalized_trace_format():
    cfg = CodecConfig(trace_coord_format="normalized_3dp", image_size=(128, 64))
    r = Response([Action((0.5, 0.2))], VisualTrace([(64, 16), (127, 63)], 1))
    text = encode_response(r, cfg)
    assert text.endswith("TRACE: [(0.500, 0.250), (0.992, 0.984)]")
    back = parse_response(text, 1, cfg)
    assert back.trace.points == ((64.0, 16.0), (0.992 * 128, 0.984 * 64))


def test_negative_zero_is_canonical():
    r = Response([Action((-0.0001, 0.0))])
    assert encode_response(r, CodecConfig(include_trace=False)) == "ACTIONS: [0.000, 0]"


def test_whitespace_tolerance():
    text = "  ACTIONS:[ 0.1 ,-0.2;\n0.3,  0.4 ]TRACE:[ (1 ,2),(3, 4) ]  "
    r = parse_response(text, 2, expected_arity=2)
    assert [a.values for a in r.actions] == [(0.1, 0.0), (0.3, 0.0)]
    assert r.trace.points == ((1.0, 2.0), (3.0, 4.0))


def test_requantizes_on_parse():
    r = parse_response("ACTIONS: [0.12345, 0.9]", 1, CodecConfig(include_trace=False))
    assert r.actions[0].values == (0.123, 1.0)


MALFORMED = [
    ("hello world", "missing_header"),
    ("ACTIONS: [0.1, 0.2]", "arity"),
    ("ACTIONS: [0.1, 0.2, 0.3, 1; 0.1, 0.2, 0.3, 1]", "action_count"),
    ("ACTIONS: [0.1, abc, 0.3, 1]", "non_numeric"),
    ("ACTIONS: [0.1, 0.2, 0.3, 1", "unclosed_bracket"),
    ("ACTIONS: [0.1, 0.2, 0.3, 1] TRACE: [(1, 2)]", "unexpected_trace"),
    ("ACTIONS: [0.1, 0.2, 0.3, nan]", "non_numeric"),
    ("ACTIONS: [0.1, 0.2, 0.3, 1] extra", "trailing_text"),
    ("ACTIONS: []", "non_numeric"),
    ("", "missing_header"),
]


@pytest.mark.parametrize("text, reason", MALFORMED)
def test_malformed_inputs(text, reason):
    with pytest.raises(MalformedResponse) as exc:
        parse_response(text, 1, CodecConfig(include_trace=False), expected_arity=4)
    assert exc.value.reason == reason


@pytest.mark.parametrize("text, reason", [
    ("ACTIONS: [0.1, 1]", "missing_trace"),
    ("ACTIONS: [0.1, 1] TRACE: [(1, 2, 3)]", "arity"),
    ("ACTIONS: [0.1, 1] TRACE: [(1, 2)", "unclosed_bracket"),
    ("ACTIONS: [0.1, 1] TRACE: (1, 2)", "missing_bracket"),
])
def test_malformed_trace(text, reason):
    with pytest.raises(MalformedResponse) as exc:
        parse_response(text, 1, CodecConfig(include_trace=True))
    assert exc.value.reason == reason


def test_mixed_arity_without_expected():
    with pytest.raises(MalformedResponse) as exc:
        parse_response("ACTIONS: [0.1, 1; 0.2, 0.3, 1]", 2, CodecConfig(include_trace=False))
    assert exc.value.reason == "arity"


@st.composite
def responses(draw):
    n = draw(st.integers(1, 6))
    arity = draw(st.integers(1, 9))
    reals = st.floats(-50, 50, allow_nan=False)
    actions = [
        Action(tuple(draw(reals) for _ in range(arity - 1)) + (draw(st.floats(0, 1)),))
        for _ in range(n)
    ]
    with_trace = draw(st.booleans())
    trace = None
    if with_trace:
        pts = draw(st.lists(st.tuples(st.floats(0, 127), st.floats(0, 127)), min_size=1, max_size=20))
        trace = VisualTrace(pts, draw(st.integers(1, 30)))
    cfg = CodecConfig(
        decimals=draw(st.integers(1, 6)),
        include_trace=with_trace,
        trace_coord_format=draw(st.sampled_from(["pixel_int", "normalized_3dp"])),
        image_size=(128, 128),
    )
    return Response(actions, trace), cfg, arity


@settings(max_examples=300, deadline=None)
@given(case=responses())
def test_roundtrip_and_idempotence(case):
    r, cfg, arity = case
    text = encode_response(r, cfg)
    start = r.trace.start_t if r.trace else 1
    back = parse_response(text, len(r.actions), cfg, expected_arity=arity, trace_start=start)
    assert back == quantize_response(r, cfg)
    assert encode_response(back, cfg) == text
