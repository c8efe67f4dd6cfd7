"""Instruction prompt rendering and the canonical action/trace response text.

Response grammar (whitespace between tokens is free)::

    response  = "ACTIONS:" "[" action { ";" action } "]" [ "TRACE:" trace ]
    action    = number { "," number }
    trace     = "[" point { "," point } "]"
    point     = "(" number "," number ")"
    number    = [ "-" | "+" ] digits [ "." digits ] [ exponent ]

The last number of every action is the gripper command, written as 0 or 1.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .domain import Action, ControlMode, ProprioState, RobotType, VisualTrace


class TraceFormat(str, enum.Enum):
    PIXEL_INT = "pixel_int"
    NORMALIZED_3DP = "normalized_3dp"


@dataclass(frozen=True)
class CodecConfig:
    decimals: int = 3
    gripper_threshold: float = 0.5
    include_trace: bool = True
    trace_coord_format: TraceFormat = TraceFormat.PIXEL_INT
    # (width, height); required by the normalized trace format
    image_size: Optional[tuple[int, int]] = None
    history_includes_gripper: bool = True

    def __post_init__(self):
        if not 1 <= self.decimals <= 6:
            raise ValueError("decimals must be in 1..6")
        object.__setattr__(self, "trace_coord_format", TraceFormat(self.trace_coord_format))
        if self.image_size is not None:
            object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))


@dataclass(frozen=True)
class InstructionPrompt:
    robot: RobotType
    mode: ControlMode
    instruction: str
    history: tuple[ProprioState, ...]
    h: int
    n: int

    def __post_init__(self):
        object.__setattr__(self, "history", tuple(self.history))
        if self.h < 1 or self.n < 1:
            raise ValueError("h and n must be >= 1")
        if not 1 <= len(self.history) <= self.h:
            raise ValueError(f"history must hold 1..{self.h} states, got {len(self.history)}")
        if "\n" in self.instruction:
            raise ValueError("instruction must be a single line")


@dataclass(frozen=True)
class Response:
    actions: tuple[Action, ...]
    trace: Optional[VisualTrace] = None
    include_trace: bool = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))
        if self.include_trace is None:
            object.__setattr__(self, "include_trace", self.trace is not None)
        if (self.trace is not None) != self.include_trace:
            raise ValueError("trace must be present iff include_trace")
        if not self.actions:
            raise ValueError("a response needs at least one action")


class MalformedResponse(ValueError):
    def __init__(self, position: int, reason: str, detail: str = ""):
        self.position = position
        self.reason = reason
        self.detail = detail
        msg = f"malformed response at offset {position}: {reason}"
        super().__init__(msg + (f" ({detail})" if detail else ""))


class MalformedPrompt(ValueError):
    pass


# -- numbers ------------------------------------------------------------------

def format_real(x: float, decimals: int) -> str:
    s = f"{x:.{decimals}f}"
    if float(s) == 0.0:
        s = f"{0.0:.{decimals}f}"
    return s


def quantize(x: float, decimals: int) -> float:
    return float(format_real(x, decimals))


def binarize(g: float, threshold: float = 0.5) -> int:
    return 1 if g >= threshold else 0


# -- prompt -------------------------------------------------------------------

_PROMPT_HEAD = "You are a "
_PROMPT_ROBOT_TAIL = " robot using "
_PROMPT_MODE_TAIL = " control. The task is "
_PROMPT_HISTORY = ", and the previous "
_PROMPT_STEPS_ARE = " steps are "
_PROMPT_QUESTION = ". Can you predict the trajectory of the end-effector and the action of the next "
_PROMPT_END = " steps?"


def pad_history(history: Sequence[ProprioState], h: int) -> list[ProprioState]:
    """Left-pad with the earliest state up to ``h`` entries."""
    history = list(history)
    if len(history) > h:
        raise ValueError(f"history longer than window h={h}")
    return [history[0]] * (h - len(history)) + history


def render_state(s: ProprioState, cfg: CodecConfig) -> str:
    vals = [format_real(v, cfg.decimals) for v in s.joints]
    if cfg.history_includes_gripper:
        vals.append(format_real(s.gripper, cfg.decimals))
    return "(" + ", ".join(vals) + ")"


def render_prompt(p: InstructionPrompt, cfg: CodecConfig = CodecConfig()) -> str:
    states = "; ".join(render_state(s, cfg) for s in pad_history(p.history, p.h))
    return (
        f"{_PROMPT_HEAD}{p.robot.name}{_PROMPT_ROBOT_TAIL}{p.mode.describe()}{_PROMPT_MODE_TAIL}"
        f"{p.instruction}{_PROMPT_HISTORY}{p.h}{_PROMPT_STEPS_ARE}{states}"
        f"{_PROMPT_QUESTION}{p.n}{_PROMPT_END}"
    )


@dataclass(frozen=True)
class PromptFields:
    """Fields recovered from a rendered prompt; states are the padded history."""

    robot: str
    mode: ControlMode
    instruction: str
    h: int
    n: int
    states: tuple[tuple[float, ...], ...]


_TAIL_RE = re.compile(
    re.escape(_PROMPT_HISTORY) + r"(\d+)" + re.escape(_PROMPT_STEPS_ARE)
    + r"(\([^A-Za-z]*\))" + re.escape(_PROMPT_QUESTION) + r"(\d+)" + re.escape(_PROMPT_END) + r"\Z"
)
_STATE_RE = re.compile(r"\(([^()]*)\)")


def parse_prompt(text: str) -> PromptFields:
    """Inverse of :func:`render_prompt`; the tail is matched from the right so
    free-form instructions cannot confuse the split."""
    if not text.startswith(_PROMPT_HEAD):
        raise MalformedPrompt("prompt does not start with the template head")
    m = _TAIL_RE.search(text)
    if m is None:
        raise MalformedPrompt("prompt tail does not match the template")
    h, states_text, n = int(m.group(1)), m.group(2), int(m.group(3))
    head = text[len(_PROMPT_HEAD):m.start()]
    robot_end = head.find(_PROMPT_ROBOT_TAIL)
    if robot_end <= 0:
        raise MalformedPrompt("missing robot type")
    robot = head[:robot_end]
    rest = head[robot_end + len(_PROMPT_ROBOT_TAIL):]
    mode_end = rest.find(_PROMPT_MODE_TAIL)
    if mode_end < 0:
        raise MalformedPrompt("missing control mode")
    try:
        mode = ControlMode.from_description(rest[:mode_end])
    except ValueError as exc:
        raise MalformedPrompt(str(exc)) from exc
    instruction = rest[mode_end + len(_PROMPT_MODE_TAIL):]

    chunks = [c.strip() for c in states_text.split(";")]
    states = []
    for chunk in chunks:
        sm = _STATE_RE.fullmatch(chunk)
        if sm is None:
            raise MalformedPrompt(f"bad state tuple {chunk!r}")
        try:
            states.append(tuple(float(v) for v in sm.group(1).split(",")))
        except ValueError as exc:
            raise MalformedPrompt(f"bad state value in {chunk!r}") from exc
    if len(states) != h:
        raise MalformedPrompt(f"expected {h} states, found {len(states)}")
    return PromptFields(robot, mode, instruction, h, n, tuple(states))


# -- response encoding -----------------------------------------------------------

def _encode_point(x: float, y: float, cfg: CodecConfig) -> str:
    if cfg.trace_coord_format is TraceFormat.PIXEL_INT:
        return f"({max(0, round(x))}, {max(0, round(y))})"
    if cfg.image_size is None:
        raise ValueError("normalized trace format needs cfg.image_size")
    w, h = cfg.image_size
    return f"({format_real(x / w, 3)}, {format_real(y / h, 3)})"


def encode_action(a: Action, cfg: CodecConfig) -> str:
    body = [format_real(v, cfg.decimals) for v in a.values[:-1]]
    body.append(str(binarize(a.values[-1], cfg.gripper_threshold)))
    return ", ".join(body)


def encode_response(r: Response, cfg: CodecConfig = CodecConfig()) -> str:
    text = "ACTIONS: [" + "; ".join(encode_action(a, cfg) for a in r.actions) + "]"
    if cfg.include_trace and r.trace is not None:
        pts = ", ".join(_encode_point(x, y, cfg) for x, y in r.trace.points)
        text += " TRACE: [" + pts + "]"
    return text


def quantize_response(r: Response, cfg: CodecConfig = CodecConfig()) -> Response:
    """What :func:`parse_response` recovers from ``encode_response(r, cfg)``."""
    actions = tuple(
        Action(tuple(quantize(v, cfg.decimals) for v in a.values[:-1])
               + (float(binarize(a.values[-1], cfg.gripper_threshold)),))
        for a in r.actions
    )
    trace = None
    if cfg.include_trace and r.trace is not None:
        trace = VisualTrace(
            tuple(_dequantize_point(_quantize_point(x, y, cfg), cfg) for x, y in r.trace.points),
            r.trace.start_t,
        )
    return Response(actions, trace, trace is not None)


def _quantize_point(x: float, y: float, cfg: CodecConfig) -> tuple[float, float]:
    if cfg.trace_coord_format is TraceFormat.PIXEL_INT:
        return float(max(0, round(x))), float(max(0, round(y)))
    w, h = cfg.image_size  # type: ignore[misc]
    return quantize(x / w, 3), quantize(y / h, 3)


def _dequantize_point(q: tuple[float, float], cfg: CodecConfig) -> tuple[float, float]:
    if cfg.trace_coord_format is TraceFormat.PIXEL_INT:
        return q
    if cfg.image_size is None:
        raise ValueError("normalized trace format needs cfg.image_size")
    w, h = cfg.image_size
    return q[0] * w, q[1] * h


# -- response parsing ------------------------------------------------------------

_NUMBER = r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?"
_TOKEN_RE = re.compile(
    r"\s*(?:(?P<header>ACTIONS:|TRACE:)|(?P<num>" + _NUMBER + r")(?![\w.])|(?P<punct>[\[\];,()])|(?P<other>\S+?(?=[\s\[\];,()]|\Z)))"
)


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(text, pos)
        if m is None:  # pragma: no cover - the "other" branch matches any non-space run
            raise MalformedResponse(pos, "non_numeric")
        kind = m.lastgroup
        start = m.start(kind)
        toks.append(_Tok(kind, m.group(kind), start))
        pos = m.end()
    toks.append(_Tok("eof", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def take(self) -> _Tok:
        tok = self.toks[self.i]
        if tok.kind != "eof":
            self.i += 1
        return tok

    def expect_punct(self, ch: str, reason: str) -> _Tok:
        tok = self.peek()
        if tok.kind == "punct" and tok.text == ch:
            return self.take()
        if tok.kind == "eof" and ch in "])":
            raise MalformedResponse(tok.pos, "unclosed_bracket", f"expected {ch!r}")
        if tok.kind == "other":
            raise MalformedResponse(tok.pos, "non_numeric", tok.text)
        raise MalformedResponse(tok.pos, reason, f"expected {ch!r}, found {tok.text or 'end of text'!r}")

    def number(self) -> float:
        tok = self.peek()
        if tok.kind == "num":
            self.take()
            return float(tok.text)
        if tok.kind == "eof":
            raise MalformedResponse(tok.pos, "unclosed_bracket", "text ended inside a list")
        raise MalformedResponse(tok.pos, "non_numeric", tok.text)

    def number_list(self) -> list[float]:
        vals = [self.number()]
        while True:
            tok = self.peek()
            if tok.kind == "punct" and tok.text == ",":
                self.take()
                vals.append(self.number())
            else:
                return vals


def parse_response(
    text: str,
    expected_n: int,
    cfg: CodecConfig = CodecConfig(),
    expected_arity: Optional[int] = None,
    trace_start: int = 1,
) -> Response:
    """Parse response text; raises :class:`MalformedResponse` on any structural error."""
    p = _Parser(text)
    head = p.peek()
    if not (head.kind == "header" and head.text == "ACTIONS:"):
        raise MalformedResponse(head.pos, "missing_header", "expected 'ACTIONS:'")
    p.take()
    p.expect_punct("[", "missing_bracket")

    rows: list[tuple[int, list[float]]] = []
    while True:
        start = p.peek().pos
        rows.append((start, p.number_list()))
        tok = p.peek()
        if tok.kind == "punct" and tok.text == ";":
            p.take()
            continue
        p.expect_punct("]", "unexpected_token")
        break

    arity = expected_arity if expected_arity is not None else len(rows[0][1])
    for pos, vals in rows:
        if len(vals) != arity:
            raise MalformedResponse(pos, "arity", f"expected {arity} values, got {len(vals)}")
    if len(rows) != expected_n:
        raise MalformedResponse(rows[-1][0], "action_count", f"expected {expected_n} actions, got {len(rows)}")
    for pos, vals in rows:
        if not all(math.isfinite(v) for v in vals):
            raise MalformedResponse(pos, "non_numeric", "non-finite value")

    actions = tuple(
        Action(tuple(quantize(v, cfg.decimals) for v in vals[:-1])
               + (float(binarize(vals[-1], cfg.gripper_threshold)),))
        for _, vals in rows
    )

    trace = None
    tok = p.peek()
    if tok.kind == "header" and tok.text == "TRACE:":
        if not cfg.include_trace:
            raise MalformedResponse(tok.pos, "unexpected_trace", "trace present but disabled")
        p.take()
        p.expect_punct("[", "missing_bracket")
        points = []
        while True:
            p.expect_punct("(", "unexpected_token")
            ppos = p.peek().pos
            xy = p.number_list()
            p.expect_punct(")", "unexpected_token")
            if len(xy) != 2:
                raise MalformedResponse(ppos, "arity", f"trace point needs 2 coordinates, got {len(xy)}")
            if not all(math.isfinite(v) for v in xy):
                raise MalformedResponse(ppos, "non_numeric", "non-finite coordinate")
            if cfg.trace_coord_format is TraceFormat.PIXEL_INT:
                q = (float(max(0, round(xy[0]))), float(max(0, round(xy[1]))))
            else:
                q = (quantize(xy[0], 3), quantize(xy[1], 3))
            points.append(_dequantize_point(q, cfg))
            nxt = p.peek()
            if nxt.kind == "punct" and nxt.text == ",":
                p.take()
                continue
            p.expect_punct("]", "unexpected_token")
            break
        trace = VisualTrace(tuple(points), trace_start)
    elif cfg.include_trace:
        raise MalformedResponse(tok.pos, "missing_trace", "expected 'TRACE:'")

    end = p.peek()
    if end.kind != "eof":
        raise MalformedResponse(end.pos, "trailing_text", end.text)
    return Response(actions, trace, trace is not None)
