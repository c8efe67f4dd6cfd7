"""Command-line entry point: gen, compile, eval, validate, score.

Exit codes: 0 success, 1 data or runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Optional, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .codec import CodecConfig
from .compiler import (
    AllowedModes,
    CompileConfig,
    ExcludeSubsets,
    MinResolution,
    compile_corpus,
    format_stats,
)
from .domain import (
    ControlMode,
    EpisodeFormatError,
    Manifest,
    all_control_modes,
    iter_episode_paths,
    load_episode,
    validate_episode,
)
from .evaluation import (
    EvalConfig,
    ModeEnvFactory,
    PolicyError,
    ReplayPolicy,
    SubprocessPolicy,
    ZeroPolicy,
    derive_seed,
    evaluate,
    first_zero_target,
    format_report,
    sequence_nll,
)
from .sim import DEFAULT_MODE, InfeasibleTask, TaskKind, generate_demo, write_demo
from .trace import TraceSource

log = logging.getLogger("vatrace")

TASKS = [k.value for k in TaskKind]
MODES = [m.describe() for m in all_control_modes()]


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _resolution(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vatrace", description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, help="TOML or JSON overlay file; flags take precedence")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate scripted simulator episodes")
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--episodes", type=_positive, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mode", choices=MODES, default=DEFAULT_MODE.describe())
    p.add_argument("--jobs", type=_positive, default=1)

    p = sub.add_parser("compile", help="compile a corpus into JSONL shards")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--h", type=_positive, default=5)
    p.add_argument("--n", type=_positive, default=1)
    p.add_argument("--no-trace", action="store_true")
    p.add_argument("--seed", type=int, default=0, help="0 keeps sorted order")
    p.add_argument("--shard-size", type=_positive, default=1000)
    p.add_argument("--decimals", type=int, choices=range(1, 7), default=3)
    p.add_argument("--trace-source", choices=["bbox_centers", "projection"], default="bbox_centers")
    p.add_argument("--oob", choices=["clamp", "reject", "keep"], default="clamp")
    p.add_argument("--trace-format", choices=["pixel_int", "normalized_3dp"], default="pixel_int")
    p.add_argument("--exclude-subset", action="append", default=[])
    p.add_argument("--allowed-mode", action="append", choices=MODES, default=[])
    p.add_argument("--min-resolution", type=_resolution)
    p.add_argument("--strict", action="store_true", help="exit 1 if any episode is rejected")
    p.add_argument("--jobs", type=_positive, default=1)

    p = sub.add_parser("eval", help="closed-loop evaluation in the simulator")
    p.add_argument("--task", choices=TASKS, action="append", required=True)
    p.add_argument("--policy", required=True, help="replay | zero | subprocess:CMD")
    p.add_argument("--episodes", type=_positive, default=25)
    p.add_argument("--seeds", type=_positive, default=5, help="number of seeds (0..seeds-1)")
    p.add_argument("--h", type=_positive, default=5)
    p.add_argument("--n", type=_positive, default=1)
    p.add_argument("--max-steps", type=_positive, default=300)
    p.add_argument("--mode", choices=MODES, default=DEFAULT_MODE.describe())
    p.add_argument("--no-trace", action="store_true")
    p.add_argument("--report", type=Path, help="also write the JSON report here")
    p.add_argument("--responses-out", type=Path, help="write every policy response, one per line")
    p.add_argument("--timeout", type=float, default=30.0, help="per-query timeout for subprocess policies")
    p.add_argument("--jobs", type=_positive, default=1)

    p = sub.add_parser("validate", help="report episode invariant violations")
    p.add_argument("--corpus", type=Path, required=True)

    p = sub.add_parser("score", help="sequence negative log-likelihood")
    p.add_argument("--targets", type=Path, required=True, help="whitespace-separated token ids")
    p.add_argument("--dists", type=Path, required=True, help="one distribution per line")
    return parser


def load_config_file(path: Path, command: Optional[str] = None) -> dict[str, Any]:
    """Read a TOML or JSON overlay; a table named after the command is merged on top."""
    try:
        if path.suffix == ".json":
            doc = json.loads(path.read_text(encoding="utf-8"))
        else:
            doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config must be a table of key = value pairs")
    out = {k: v for k, v in doc.items() if not (k in COMMANDS and isinstance(v, dict))}
    if command is not None and isinstance(doc.get(command), dict):
        out.update(doc[command])
    return out


def _apply_config(parser: argparse.ArgumentParser, command: str, config: dict[str, Any]) -> None:
    """Install config values as subcommand defaults so explicit flags still win."""
    subparser = parser._subparsers._group_actions[0].choices[command]  # type: ignore[union-attr]
    dests = {a.dest: a for a in subparser._actions if a.dest != "help"}
    defaults = {}
    for key, value in config.items():
        dest = key.replace("-", "_")
        if dest not in dests:
            raise UsageError(f"unknown config key {key!r} for '{command}'")
        action = dests[dest]
        if action.type is Path and value is not None:
            value = Path(value)
        defaults[dest] = value
        action.required = False
    subparser.set_defaults(**defaults)


def _gen_one(args):
    task, seed, out, mode = args
    demo = generate_demo(task, seed, mode=mode)
    write_demo(demo, out)
    return demo.episode.subset


def cmd_gen(args) -> int:
    mode = ControlMode.from_description(args.mode)
    seeds = [derive_seed(args.seed, i) for i in range(args.episodes)]
    work = [(args.task, s, args.out, mode) for s in seeds]
    try:
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                subsets = list(pool.map(_gen_one, work))
        else:
            subsets = [_gen_one(w) for w in work]
    except InfeasibleTask as exc:
        raise DataError(f"task {args.task!r} infeasible: {exc}") from exc
    manifest = Manifest.load(args.out)
    manifest.subsets = sorted(set(manifest.subsets) | set(subsets))
    manifest.dump(args.out)
    print(f"wrote {len(work)} episodes to {args.out}")
    return 0


def cmd_compile(args) -> int:
    filters = []
    if args.exclude_subset:
        filters.append(ExcludeSubsets(frozenset(args.exclude_subset)))
    if args.allowed_mode:
        filters.append(AllowedModes(frozenset(args.allowed_mode)))
    if args.min_resolution:
        filters.append(MinResolution(*args.min_resolution))
    cfg = CompileConfig(
        h=args.h,
        n=args.n,
        codec=CodecConfig(decimals=args.decimals, include_trace=not args.no_trace,
                          trace_coord_format=args.trace_format),
        trace_source=TraceSource(args.trace_source, args.oob),
        subset_filters=tuple(filters),
        shard_size=args.shard_size,
        seed=args.seed,
    )
    if not args.corpus.is_dir():
        raise DataError(f"corpus directory {args.corpus} does not exist")
    shards, stats = compile_corpus(args.corpus, cfg, args.out, jobs=args.jobs)
    print(format_stats(stats))
    print(f"wrote {stats.total_records} records in {len(shards)} shard(s) to {args.out}")
    if args.strict and stats.rejected:
        print(f"{sum(stats.rejected.values())} episode(s) rejected", file=sys.stderr)
        return 1
    return 0


def _make_policy(spec: str, timeout: float):
    if spec == "replay":
        return ReplayPolicy()
    if spec == "zero":
        return ZeroPolicy()
    if spec.startswith("subprocess:") and spec[len("subprocess:"):].strip():
        return SubprocessPolicy(spec[len("subprocess:"):], timeout=timeout)
    raise UsageError(f"invalid policy spec {spec!r}; expected replay, zero or subprocess:CMD")


class _Recorder:
    """Wraps a policy and keeps every response it returns."""

    parallel_safe = False

    def __init__(self, inner):
        self.inner = inner
        self.responses: list[str] = []

    def begin_episode(self, info):
        self.inner.begin_episode(info)

    def __call__(self, observation, prompt):
        text = self.inner(observation, prompt)
        self.responses.append(text)
        return text


def cmd_eval(args) -> int:
    mode = ControlMode.from_description(args.mode)
    cfg = EvalConfig(
        tasks=tuple(dict.fromkeys(args.task)),
        h=args.h,
        n=args.n,
        episodes_per_task=args.episodes,
        seeds=tuple(range(args.seeds)),
        max_steps=args.max_steps,
        codec=CodecConfig(include_trace=not args.no_trace),
        mode=mode,
    )
    try:
        policy = _make_policy(args.policy, args.timeout)
    except PolicyError as exc:
        raise DataError(str(exc)) from exc
    recorder = _Recorder(policy) if args.responses_out else None
    try:
        report = evaluate(ModeEnvFactory(mode), recorder or policy, cfg, jobs=args.jobs)
    finally:
        if isinstance(policy, SubprocessPolicy):
            policy.close()
    doc = report.to_dict()
    print(format_report(report))
    print(json.dumps(doc, indent=2))
    if args.report:
        args.report.parent.mkdir(parents=True, exist_ok=True)
        args.report.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    if recorder is not None:
        args.responses_out.parent.mkdir(parents=True, exist_ok=True)
        args.responses_out.write_text("".join(r + "\n" for r in recorder.responses), encoding="utf-8")
    return 0


def cmd_validate(args) -> int:
    if not args.corpus.is_dir():
        raise DataError(f"corpus directory {args.corpus} does not exist")
    total = 0
    paths = iter_episode_paths(args.corpus)
    for path in paths:
        try:
            violations = [str(v) for v in validate_episode(load_episode(path))]
        except (OSError, EpisodeFormatError, UnicodeDecodeError) as exc:
            violations = [f"unreadable: {exc}"]
        for v in violations:
            print(f"{path}: {v}")
        total += len(violations)
    print(f"{len(paths)} episodes, {total} violations")
    return 0 if total == 0 else 1


def _read_numbers(path: Path, cast) -> list[list]:
    rows = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.replace(",", " ").strip()
        if not line or line.startswith("#"):
            continue
        try:
            rows.append([cast(tok) for tok in line.split()])
        except ValueError:
            raise DataError(f"{path}:{lineno}: cannot parse {raw.strip()!r}") from None
    return rows


def cmd_score(args) -> int:
    targets = [t for row in _read_numbers(args.targets, int) for t in row]
    dists = _read_numbers(args.dists, float)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # reported below instead
            value = sequence_nll(targets, dists)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if value == float("inf"):
        print(f"inf (target {first_zero_target(targets, dists)} has zero probability)")
    else:
        print(repr(value))
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "compile": cmd_compile,
    "eval": cmd_eval,
    "validate": cmd_validate,
    "score": cmd_score,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    try:
        known, _ = pre.parse_known_args(argv)
        command = next((tok for tok in argv if tok in COMMANDS), None)
        if known.config is not None and command is not None:
            _apply_config(parser, command, load_config_file(known.config, command))
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, OSError, json.JSONDecodeError) as exc:
        print(f"vatrace: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"vatrace: error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError, ValueError) as exc:
        print(f"vatrace: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
