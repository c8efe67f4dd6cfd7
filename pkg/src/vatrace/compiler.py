"""Compile episode corpora into sharded JSONL instruction-tuning records."""

from __future__ import annotations

import json
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

import numpy as np

from .codec import (
    CodecConfig,
    InstructionPrompt,
    Response,
    encode_response,
    parse_prompt,
    parse_response,
    render_prompt,
)
from .domain import Episode, EpisodeFormatError, iter_episode_paths, load_episode, validate_episode
from .trace import TraceError, TraceSource, build_trace

log = logging.getLogger(__name__)

STATS_SCHEMA_VERSION = 1
STATS_NAME = "stats.json"


def shard_name(index: int) -> str:
    return f"shard-{index:05}.jsonl"


# -- filters ------------------------------------------------------------------
# Each filter returns None to keep an episode or a rejection reason.

@dataclass(frozen=True)
class MinResolution:
    width: int
    height: int

    def __call__(self, e: Episode) -> Optional[str]:
        if e.camera is None:
            return "image resolution unknown"
        if e.camera.width < self.width or e.camera.height < self.height:
            return f"resolution {e.camera.width}x{e.camera.height} below {self.width}x{self.height}"
        return None


@dataclass(frozen=True)
class AllowedModes:
    modes: frozenset[str]

    def __call__(self, e: Episode) -> Optional[str]:
        if e.mode.describe() not in self.modes:
            return f"control mode {e.mode.describe()!r} not allowed"
        return None


@dataclass(frozen=True)
class ExcludeSubsets:
    names: frozenset[str]

    def __call__(self, e: Episode) -> Optional[str]:
        if e.subset in self.names:
            return f"subset {e.subset!r} excluded"
        return None


@dataclass(frozen=True)
class CompileConfig:
    h: int = 5
    n: int = 1
    codec: CodecConfig = CodecConfig()
    trace_source: TraceSource = TraceSource()
    subset_filters: tuple = ()
    shard_size: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.h < 1 or self.n < 1 or self.shard_size < 1:
            raise ValueError("h, n and shard_size must all be >= 1")
        object.__setattr__(self, "subset_filters", tuple(self.subset_filters))


@dataclass(frozen=True)
class DatasetRecord:
    prompt: str
    target: str
    image_ref: str
    meta: dict[str, Any]

    def to_json(self) -> str:
        return json.dumps(
            {"prompt": self.prompt, "target": self.target, "image_ref": self.image_ref, "meta": self.meta},
            ensure_ascii=False,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "DatasetRecord":
        doc = json.loads(line)
        return cls(doc["prompt"], doc["target"], doc["image_ref"], doc["meta"])

    def sort_key(self) -> tuple:
        return (self.meta["subset"], self.meta["episode_id"], self.meta["t"])


@dataclass
class CorpusStats:
    total_records: int = 0
    per_subset: dict[str, int] = field(default_factory=dict)
    per_robot: dict[str, int] = field(default_factory=dict)
    per_mode: dict[str, int] = field(default_factory=dict)
    episodes: dict[str, int] = field(default_factory=dict)
    rejected: dict[str, int] = field(default_factory=dict)
    rejections: list[dict[str, str]] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: Iterable[DatasetRecord]) -> "CorpusStats":
        subsets: Counter = Counter()
        robots: Counter = Counter()
        modes: Counter = Counter()
        episodes: dict[str, set] = {}
        for rec in records:
            m = rec.meta
            subsets[m["subset"]] += 1
            robots[m["robot"]] += 1
            modes[m["mode"]] += 1
            episodes.setdefault(m["subset"], set()).add(m["episode_id"])
        return cls(
            total_records=sum(subsets.values()),
            per_subset=dict(sorted(subsets.items())),
            per_robot=dict(sorted(robots.items())),
            per_mode=dict(sorted(modes.items())),
            episodes={k: len(v) for k, v in sorted(episodes.items())},
        )

    def counts(self) -> dict[str, Any]:
        """The part of the stats that can be recomputed from shards alone."""
        return {
            "total_records": self.total_records,
            "per_subset": self.per_subset,
            "per_robot": self.per_robot,
            "per_mode": self.per_mode,
            "episodes": self.episodes,
        }

    def to_dict(self) -> dict[str, Any]:
        return {"schema_version": STATS_SCHEMA_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "CorpusStats":
        doc = dict(doc)
        doc.pop("schema_version", None)
        return cls(**doc)


def format_stats(stats: CorpusStats) -> str:
    lines = [f"{'subset':<28} {'episodes':>8} {'records':>10} {'rejected':>8}"]
    names = sorted(set(stats.per_subset) | set(stats.rejected))
    for name in names:
        lines.append(
            f"{name:<28} {stats.episodes.get(name, 0):>8} {stats.per_subset.get(name, 0):>10} "
            f"{stats.rejected.get(name, 0):>8}"
        )
    lines.append(f"{'total':<28} {sum(stats.episodes.values()):>8} {stats.total_records:>10} "
                 f"{sum(stats.rejected.values()):>8}")
    for title, hist in (("robot", stats.per_robot), ("mode", stats.per_mode)):
        for key, count in hist.items():
            lines.append(f"  {title}: {key:<24} {count:>10}")
    return "\n".join(lines)


# -- per-episode record emission --------------------------------------------------

def eligible_timesteps(e: Episode, cfg: CompileConfig) -> list[int]:
    """Timesteps whose full ``n``-step action target is available."""
    return list(range(1, e.num_actions - cfg.n + 2))


def _episode_codec(e: Episode, codec: CodecConfig) -> CodecConfig:
    if codec.image_size is None and e.camera is not None:
        return replace(codec, image_size=(e.camera.width, e.camera.height))
    return codec


def emit_record(e: Episode, t: int, cfg: CompileConfig) -> DatasetRecord:
    if t not in range(1, e.num_actions - cfg.n + 2):
        raise ValueError(f"timestep {t} is not eligible for n={cfg.n} on episode {e.id}")
    codec = _episode_codec(e, cfg.codec)
    history = [e.frames[i - 1].state for i in range(max(1, t - cfg.h + 1), t + 1)]
    prompt = render_prompt(InstructionPrompt(e.robot, e.mode, e.instruction, history, cfg.h, cfg.n), codec)
    actions = [e.frames[i - 1].action for i in range(t, t + cfg.n)]
    trace = build_trace(e, t, cfg.trace_source) if codec.include_trace else None
    target = encode_response(Response(actions, trace), codec)
    meta = {
        "subset": e.subset,
        "episode_id": e.id,
        "t": t,
        "robot": e.robot.name,
        "mode": e.mode.describe(),
    }
    return DatasetRecord(prompt, target, e.frames[t - 1].image_ref, meta)


def _self_check(rec: DatasetRecord, e: Episode, cfg: CompileConfig) -> None:
    codec = _episode_codec(e, cfg.codec)
    parse_prompt(rec.prompt)
    arity = len(e.frames[0].action.values)  # type: ignore[union-attr]
    parse_response(rec.target, cfg.n, codec, expected_arity=arity)


def episode_records(e: Episode, cfg: CompileConfig) -> list[DatasetRecord]:
    records = []
    for t in eligible_timesteps(e, cfg):
        rec = emit_record(e, t, cfg)
        _self_check(rec, e, cfg)
        records.append(rec)
    return records


@dataclass
class _Outcome:
    path: str
    subset: str
    episode_id: str
    records: list[DatasetRecord]
    reason: Optional[str] = None


def _process(path: Path, cfg: CompileConfig) -> _Outcome:
    try:
        e = load_episode(path)
    except (OSError, EpisodeFormatError, UnicodeDecodeError) as exc:
        return _Outcome(str(path), "<unreadable>", path.stem, [], f"unreadable: {exc}")
    violations = validate_episode(e)
    if violations:
        return _Outcome(str(path), e.subset, e.id, [], "invalid: " + "; ".join(map(str, violations[:3])))
    for flt in cfg.subset_filters:
        reason = flt(e)
        if reason:
            return _Outcome(str(path), e.subset, e.id, [], f"filtered: {reason}")
    try:
        return _Outcome(str(path), e.subset, e.id, episode_records(e, cfg))
    except TraceError as exc:
        return _Outcome(str(path), e.subset, e.id, [], f"trace: {exc}")


def _process_star(args):
    return _process(*args)


def compile_records(corpus: Union[Path, str, Sequence[Path]], cfg: CompileConfig,
                    jobs: int = 1) -> tuple[list[DatasetRecord], CorpusStats]:
    """Records in final (sorted, then optionally shuffled) order plus stats."""
    paths = iter_episode_paths(corpus) if isinstance(corpus, (str, Path)) else sorted(map(Path, corpus))
    work = [(p, cfg) for p in paths]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_process_star, work, chunksize=max(1, len(work) // (4 * jobs))))
    else:
        outcomes = [_process_star(w) for w in work]

    records: list[DatasetRecord] = []
    rejected: Counter = Counter()
    rejections = []
    for out in outcomes:
        if out.reason is not None:
            log.warning("skipping %s: %s", out.path, out.reason)
            rejected[out.subset] += 1
            rejections.append({"path": out.path, "subset": out.subset, "episode_id": out.episode_id,
                               "reason": out.reason})
        records.extend(out.records)

    records.sort(key=DatasetRecord.sort_key)
    if cfg.seed:
        order = np.random.default_rng(cfg.seed).permutation(len(records))
        records = [records[i] for i in order]

    stats = CorpusStats.from_records(records)
    stats.rejected = dict(sorted(rejected.items()))
    stats.rejections = sorted(rejections, key=lambda r: r["path"])
    return records, stats


def write_shards(records: Sequence[DatasetRecord], out_dir: Union[Path, str], shard_size: int) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for stale in out.glob("shard-*.jsonl"):
        stale.unlink()
    paths = []
    for index, start in enumerate(range(0, len(records), shard_size)):
        path = out / shard_name(index)
        chunk = records[start:start + shard_size]
        path.write_text("".join(r.to_json() + "\n" for r in chunk), encoding="utf-8")
        paths.append(path)
    return paths


def compile_corpus(corpus: Union[Path, str], cfg: CompileConfig, out_dir: Union[Path, str],
                   jobs: int = 1) -> tuple[list[Path], CorpusStats]:
    records, stats = compile_records(corpus, cfg, jobs)
    shards = write_shards(records, out_dir, cfg.shard_size)
    stats_path = Path(out_dir) / STATS_NAME
    stats_path.write_text(json.dumps(stats.to_dict(), indent=2) + "\n", encoding="utf-8")
    return shards, stats


class ShardError(ValueError):
    pass


def read_shard(path: Union[Path, str]) -> list[DatasetRecord]:
    path = Path(path)
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                records.append(DatasetRecord.from_json(line))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ShardError(f"{path.name}:{lineno}: corrupt record ({exc})") from exc
    return records


def stats_report(shards: Iterable[Union[Path, str]]) -> CorpusStats:
    """Recount record statistics from written shards."""
    def records():
        for p in shards:
            yield from read_shard(p)
    return CorpusStats.from_records(records())
