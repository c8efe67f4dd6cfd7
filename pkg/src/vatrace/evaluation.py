"""Closed-loop policy evaluation and sequence negative log-likelihood."""

from __future__ import annotations

import math
import queue
import shlex
import subprocess
import threading
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Optional, Protocol, Sequence

import numpy as np

from .codec import (
    CodecConfig,
    InstructionPrompt,
    MalformedResponse,
    Response,
    encode_response,
    parse_response,
    render_prompt,
)
from .domain import Action, Actuation, ControlFrame, ControlMode, ProprioState, VisualTrace
from .sim import DEFAULT_MODE, LINK_LENGTHS, PlanarArmEnv, SceneState, TaskKind, generate_demo
from .trace import TraceSource, build_trace, project_point

REPORT_SCHEMA_VERSION = 1

SUCCESS = 100
FAILURE = 0

REASON_SUCCESS = "success"
REASON_MALFORMED = "malformed_response"
REASON_BUDGET = "step_budget_exhausted"
REASON_UNMET = "task_predicate_unmet"
REASON_POLICY_ERROR = "policy_error"


@dataclass(frozen=True)
class EvalConfig:
    tasks: tuple[str, ...] = ("reach",)
    h: int = 5
    n: int = 1
    episodes_per_task: int = 25
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    max_steps: int = 300
    codec: CodecConfig = CodecConfig()
    mode: ControlMode = DEFAULT_MODE

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(TaskKind(t).value for t in self.tasks))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.episodes_per_task < 1:
            raise ValueError("episodes_per_task must be >= 1")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.h < 1 or self.n < 1:
            raise ValueError("h and n must be >= 1")


@dataclass(frozen=True)
class EpisodeInfo:
    task: str
    seed: int
    mode: ControlMode
    h: int
    n: int
    codec: CodecConfig


@dataclass
class Observation:
    scene: SceneState
    env: PlanarArmEnv

    @property
    def state(self) -> ProprioState:
        return ProprioState(self.scene.arm.joints, self.scene.arm.gripper)

    def image(self) -> np.ndarray:
        from .sim import render

        return render(self.scene, self.env.camera)


class EpisodeDone(Exception):
    """Raised by a policy that has nothing more to do in the current episode."""


class PolicyError(RuntimeError):
    pass


class Policy(Protocol):
    def begin_episode(self, info: EpisodeInfo) -> None: ...

    def __call__(self, observation: Observation, prompt: str) -> str: ...


def _hold_action(mode: ControlMode, state: ProprioState, gripper: float) -> Action:
    if mode.actuation is Actuation.JOINT_POSITION and mode.frame is ControlFrame.ABSOLUTE:
        return Action(state.joints + (gripper,))
    return Action((0.0,) * len(state.joints) + (gripper,))


class ReplayPolicy:
    """Re-emits the scripted demonstration generated from the episode seed."""

    parallel_safe = True

    def __init__(self, link_lengths: Sequence[float] = LINK_LENGTHS,
                 trace_source: TraceSource = TraceSource()):
        self.link_lengths = tuple(link_lengths)
        self.trace_source = trace_source
        self.info: Optional[EpisodeInfo] = None

    def begin_episode(self, info: EpisodeInfo) -> None:
        self.info = info
        demo = generate_demo(info.task, info.seed, mode=info.mode, link_lengths=self.link_lengths,
                             decimals=info.codec.decimals)
        self.episode = demo.episode
        self.actions = demo.actions
        self.cursor = 0

    def __call__(self, observation: Observation, prompt: str) -> str:
        info = self.info
        assert info is not None, "begin_episode() not called"
        if self.cursor >= len(self.actions):
            raise EpisodeDone()
        chunk = list(self.actions[self.cursor:self.cursor + info.n])
        last = self.episode.frames[-1]
        while len(chunk) < info.n:
            chunk.append(_hold_action(info.mode, last.state, chunk[-1].gripper))
        trace = None
        if info.codec.include_trace:
            trace = build_trace(self.episode, self.cursor + 1, self.trace_source)
        self.cursor += info.n
        return encode_response(Response(chunk, trace), info.codec)


class ZeroPolicy:
    """Commands no motion; the trace is the current end-effector keypoint."""

    parallel_safe = True

    def begin_episode(self, info: EpisodeInfo) -> None:
        self.info = info

    def __call__(self, observation: Observation, prompt: str) -> str:
        info = self.info
        k = len(observation.scene.arm.joints)
        actions = [Action((0.0,) * (k + 1)) for _ in range(info.n)]
        trace = None
        if info.codec.include_trace:
            ee = observation.scene.arm.ee
            pt = project_point((ee[0], ee[1], 0.0), observation.env.camera)
            trace = VisualTrace((pt,), 1)
        return encode_response(Response(actions, trace), info.codec)


class SubprocessPolicy:
    """External policy speaking one prompt line in, one response line out."""

    parallel_safe = False

    def __init__(self, command: str, timeout: Optional[float] = 30.0):
        self.command = command
        self.timeout = timeout
        try:
            self.proc = subprocess.Popen(
                shlex.split(command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        except OSError as exc:
            raise PolicyError(f"could not start policy {command!r}: {exc}") from exc
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self):
        assert self.proc.stdout is not None
        for line in self.proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def begin_episode(self, info: EpisodeInfo) -> None:
        pass

    def __call__(self, observation: Observation, prompt: str) -> str:
        if self.proc.poll() is not None and self._lines.empty():
            raise PolicyError(f"policy process exited with code {self.proc.returncode}")
        try:
            assert self.proc.stdin is not None
            self.proc.stdin.write(prompt + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise PolicyError(f"policy process closed its input: {exc}") from exc
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty as exc:
            raise PolicyError("policy did not respond in time") from exc
        if line is None:
            raise PolicyError("policy process closed its output")
        return line.rstrip("\r\n")

    def close(self):
        if self.proc.stdin and not self.proc.stdin.closed:
            self.proc.stdin.close()
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- rollouts -------------------------------------------------------------------

@dataclass
class TranscriptEntry:
    step: int
    prompt: str
    response: str
    states: list[ProprioState] = field(default_factory=list)


@dataclass
class RolloutResult:
    outcome: int
    reason: str
    steps: int
    transcript: list[TranscriptEntry]
    states: list[ProprioState]


def rollout(env: PlanarArmEnv, policy: Policy, cfg: EvalConfig, seed: int) -> RolloutResult:
    """One closed-loop episode; every policy failure scores 0 rather than raising."""
    env.reset(seed)
    info = EpisodeInfo(env.task.value, seed, env.mode, cfg.h, cfg.n, cfg.codec)
    policy.begin_episode(info)
    arity = len(env.scene.arm.joints) + 1
    states = [env.proprio()]
    transcript: list[TranscriptEntry] = []

    def done(outcome, reason):
        return RolloutResult(outcome, reason, env.scene.step_count, transcript, states)

    if env.success():
        return done(SUCCESS, REASON_SUCCESS)
    while env.scene.step_count < cfg.max_steps:
        prompt = render_prompt(
            InstructionPrompt(env.robot, env.mode, env.instruction, states[-cfg.h:], cfg.h, cfg.n),
            cfg.codec,
        )
        entry = TranscriptEntry(env.scene.step_count, prompt, "")
        transcript.append(entry)
        try:
            entry.response = policy(Observation(env.scene, env), prompt)
        except EpisodeDone:
            return done(FAILURE, REASON_UNMET)
        except PolicyError:
            return done(FAILURE, REASON_POLICY_ERROR)
        try:
            resp = parse_response(entry.response, cfg.n, cfg.codec, expected_arity=arity)
        except MalformedResponse:
            return done(FAILURE, REASON_MALFORMED)
        for action in resp.actions:
            env.step(action)
            states.append(env.proprio())
            entry.states.append(states[-1])
            if env.success():
                return done(SUCCESS, REASON_SUCCESS)
            if env.scene.step_count >= cfg.max_steps:
                break
    return done(FAILURE, REASON_BUDGET)


def derive_seed(seed: int, episode_index: int) -> int:
    """Reproducible, decorrelated per-episode seed."""
    return int(np.random.SeedSequence([int(seed), int(episode_index)]).generate_state(1, dtype=np.uint32)[0])


@dataclass
class EpisodeOutcome:
    task: str
    seed: int
    episode: int
    sub_seed: int
    outcome: int
    reason: str
    steps: int


@dataclass
class EvalReport:
    outcomes: list[EpisodeOutcome]
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def tasks(self) -> list[str]:
        return list(dict.fromkeys(o.task for o in self.outcomes))

    def mean(self, task: Optional[str] = None, seed: Optional[int] = None) -> float:
        vals = [o.outcome for o in self.outcomes
                if (task is None or o.task == task) and (seed is None or o.seed == seed)]
        return float(sum(vals)) / len(vals) if vals else 0.0

    def per_task(self) -> dict[str, float]:
        return {t: self.mean(t) for t in self.tasks}

    def per_seed(self, task: str) -> dict[int, float]:
        seeds = dict.fromkeys(o.seed for o in self.outcomes if o.task == task)
        return {s: self.mean(task, s) for s in seeds}

    def failure_reasons(self, task: Optional[str] = None) -> dict[str, int]:
        counts: dict[str, int] = {}
        for o in self.outcomes:
            if o.outcome == FAILURE and (task is None or o.task == task):
                counts[o.reason] = counts.get(o.reason, 0) + 1
        return dict(sorted(counts.items()))

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "config": self.config,
            "tasks": {
                t: {
                    "mean": self.mean(t),
                    "per_seed": {str(s): m for s, m in self.per_seed(t).items()},
                    "failure_reasons": self.failure_reasons(t),
                }
                for t in self.tasks
            },
            "mean": self.mean(),
            "outcomes": [asdict(o) for o in self.outcomes],
        }


def format_report(report: EvalReport) -> str:
    lines = [f"{'task':<10} {'mean':>7}  per-seed"]
    for t in report.tasks:
        seeds = "  ".join(f"{s}:{m:.1f}" for s, m in report.per_seed(t).items())
        lines.append(f"{t:<10} {report.mean(t):>7.1f}  {seeds}")
        reasons = report.failure_reasons(t)
        if reasons:
            lines.append("           failures: " + ", ".join(f"{k}={v}" for k, v in reasons.items()))
    return "\n".join(lines)


EnvFactory = Callable[[str], PlanarArmEnv]


def default_env_factory(task: str) -> PlanarArmEnv:
    return PlanarArmEnv(task)


@dataclass(frozen=True)
class ModeEnvFactory:
    """Picklable env factory binding a control mode."""

    mode: ControlMode = DEFAULT_MODE

    def __call__(self, task: str) -> PlanarArmEnv:
        return PlanarArmEnv(task, mode=self.mode)


def _run_one(args) -> EpisodeOutcome:
    env_factory, policy, cfg, task, seed, index = args
    sub = derive_seed(seed, index)
    res = rollout(env_factory(task), policy, cfg, sub)
    return EpisodeOutcome(task, seed, index, sub, res.outcome, res.reason, res.steps)


def evaluate(env_factory: EnvFactory, policy: Policy, cfg: EvalConfig, jobs: int = 1) -> EvalReport:
    work = [
        (env_factory, policy, cfg, task, seed, index)
        for task in cfg.tasks
        for seed in cfg.seeds
        for index in range(cfg.episodes_per_task)
    ]
    if jobs > 1 and getattr(policy, "parallel_safe", False):
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_one, work, chunksize=max(1, len(work) // (4 * jobs))))
    else:
        outcomes = [_run_one(w) for w in work]
    config = {
        "tasks": list(cfg.tasks),
        "h": cfg.h,
        "n": cfg.n,
        "episodes_per_task": cfg.episodes_per_task,
        "seeds": list(cfg.seeds),
        "max_steps": cfg.max_steps,
        "include_trace": cfg.codec.include_trace,
    }
    return EvalReport(outcomes, config)


# -- scoring --------------------------------------------------------------------

def _check_inputs(target_ids: Sequence[int], dists: Sequence[Sequence[float]]) -> list[np.ndarray]:
    if len(target_ids) != len(dists):
        raise ValueError(f"length mismatch: {len(target_ids)} targets vs {len(dists)} distributions")
    out = []
    for i, (tid, d) in enumerate(zip(target_ids, dists)):
        arr = np.asarray(d, dtype=float)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError(f"distribution {i} must be a non-empty vector")
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise ValueError(f"distribution {i} has negative or non-finite entries")
        if abs(math.fsum(arr) - 1.0) > 1e-9:
            raise ValueError(f"distribution {i} sums to {math.fsum(arr)!r}, not 1")
        if not 0 <= int(tid) < arr.size:
            raise ValueError(f"target {i} index {tid} outside vocabulary of size {arr.size}")
        out.append(arr)
    return out


def first_zero_target(target_ids: Sequence[int], dists: Sequence[Sequence[float]]) -> Optional[int]:
    """Position of the first target token with zero probability, if any."""
    for i, (tid, d) in enumerate(zip(target_ids, dists)):
        if d[int(tid)] == 0:
            return i
    return None


def sequence_nll(target_ids: Sequence[int], dists: Sequence[Sequence[float]]) -> float:
    """Negative log-probability of a target token sequence under per-position
    categorical distributions. Returns ``inf`` (with a warning naming the
    position) when a target has zero probability."""
    arrays = _check_inputs(target_ids, dists)
    total = 0.0
    for i, (tid, arr) in enumerate(zip(target_ids, arrays)):
        p = arr[int(tid)]
        if p == 0:
            warnings.warn(f"target {i} (token {tid}) has zero probability", RuntimeWarning, stacklevel=2)
            return math.inf
        total -= math.log(p)
    return total
