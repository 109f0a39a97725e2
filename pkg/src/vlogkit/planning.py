"""Top-down planning: story -> scheduled script -> actors -> protagonists."""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from enum import IntEnum
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, NamedTuple

import numpy as np

from .backends import DirectorRequest, Kind, director_call, resolve
from .errors import DomainError, ParseError, ShapeError, StageOrderError, VlogError

log = logging.getLogger(__name__)

FPS = 8
ID_KEY = "video fragment id"
DESC_KEY = "video fragment description"
TIME_KEY = "time"


class ScriptStage(IntEnum):
    ROUGH = 1
    DETAILED = 2
    COMPLETED = 3
    SCHEDULED = 4

    @property
    def label(self) -> str:
        return self.name.capitalize()


@dataclass(frozen=True)
class Story:
    text: str

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise DomainError("story is empty")


@dataclass(frozen=True)
class Scene:
    fragment_id: int
    description: str
    duration_seconds: float | None = None


@dataclass(frozen=True)
class Script:
    stage: ScriptStage
    scenes: tuple[Scene, ...]

    def __post_init__(self):
        object.__setattr__(self, "scenes", tuple(self.scenes))
        if not self.scenes:
            raise DomainError("a script needs at least one scene")
        ids = [s.fragment_id for s in self.scenes]
        if ids != list(range(1, len(ids) + 1)):
            raise DomainError(f"fragment ids must run 1..N, got {ids}")
        scheduled = self.stage is ScriptStage.SCHEDULED
        for s in self.scenes:
            if (s.duration_seconds is not None) != scheduled:
                raise DomainError(f"scene {s.fragment_id}: duration must be set iff the script is Scheduled")

    @property
    def total_seconds(self) -> float:
        return sum(s.duration_seconds or 0.0 for s in self.scenes)

    def to_records(self) -> list[dict[str, Any]]:
        out = []
        for s in self.scenes:
            rec: dict[str, Any] = {ID_KEY: s.fragment_id, DESC_KEY: s.description}
            if s.duration_seconds is not None:
                rec[TIME_KEY] = s.duration_seconds
            out.append(rec)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_records(), ensure_ascii=False, indent=1)

    @classmethod
    def from_json(cls, text: str, stage: ScriptStage | None = None) -> "Script":
        frags = parse_fragments(text)
        if stage is None:
            stage = ScriptStage.SCHEDULED if all(f.time is not None for f in frags) else ScriptStage.COMPLETED
        keep_time = stage is ScriptStage.SCHEDULED
        return cls(stage, [Scene(f.fragment_id, f.description, f.time if keep_time else None) for f in frags])

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path, stage: ScriptStage | None = None) -> "Script":
        return cls.from_json(Path(path).read_text(encoding="utf-8"), stage)


@dataclass(frozen=True)
class ActorSpec:
    actor_id: str
    description: str


@dataclass
class ActorImageSet:
    images: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, actor_id: str) -> np.ndarray:
        return self.images[actor_id]


@dataclass(frozen=True)
class ProtagonistDoc:
    assignments: dict[int, str | None]

    def to_json(self) -> str:
        return json.dumps({str(k): v for k, v in sorted(self.assignments.items())}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ProtagonistDoc":
        return cls({int(k): v for k, v in json.loads(text).items()})


@dataclass
class PlanningConfig:
    min_scene_s: float = 2.0
    max_scene_s: float = 60.0
    default_scene_s: float = 2.0
    fps: int = FPS
    resolution: tuple[int, int] = (64, 64)
    max_retries: int = 2
    timeout: float = 60.0
    templates_dir: Path | None = None

    def __post_init__(self):
        if not 0 < self.min_scene_s <= self.max_scene_s:
            raise DomainError("need 0 < min_scene_s <= max_scene_s")

    def template(self, name: str) -> str:
        if self.templates_dir is not None:
            return (Path(self.templates_dir) / f"{name}.txt").read_text(encoding="utf-8")
        return resources.files("vlogkit").joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")


# --------------------------------------------------------------------------- parsing


class Fragment(NamedTuple):
    fragment_id: int
    description: str
    time: float | None = None


_TRAILING_COMMA = re.compile(r",\s*([}\]])")
_SMART_QUOTES = str.maketrans({"“": '"', "”": '"', "‘": "'", "’": "'"})


def _balanced_spans(text: str, open_ch: str, close_ch: str) -> Iterable[str]:
    """Yield every balanced ``open_ch ... close_ch`` substring, outermost first, honouring JSON strings."""
    start = 0
    while (i := text.find(open_ch, start)) != -1:
        depth, in_str, esc = 0, False, False
        for j in range(i, len(text)):
            c = text[j]
            if in_str:
                if esc:
                    esc = False
                elif c == "\\":
                    esc = True
                elif c == '"':
                    in_str = False
            elif c == '"':
                in_str = True
            elif c == open_ch:
                depth += 1
            elif c == close_ch:
                depth -= 1
                if depth == 0:
                    yield text[i : j + 1]
                    break
        start = i + 1


def _loads_lenient(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return json.loads(_TRAILING_COMMA.sub(r"\1", text.translate(_SMART_QUOTES)))


def extract_json(reply: str, kind: type) -> Any:
    """Strict parse first, then the first balanced ``[...]``/``{...}`` substring that parses."""
    try:
        value = _loads_lenient(reply.strip())
        if isinstance(value, kind):
            return value
    except json.JSONDecodeError:
        pass
    brackets = ("[", "]") if kind is list else ("{", "}")
    cleaned = reply.translate(_SMART_QUOTES)
    for span in _balanced_spans(cleaned, *brackets):
        try:
            value = _loads_lenient(span)
        except json.JSONDecodeError:
            continue
        if isinstance(value, kind):
            return value
    raise ParseError(f"no JSON {kind.__name__} found in reply: {reply[:120]!r}")


def _get(rec: dict, *keys: str) -> Any:
    for k in keys:
        if k in rec:
            return rec[k]
    return None


def parse_fragments(reply: str) -> list[Fragment]:
    items = extract_json(reply, list)
    if not items:
        raise ParseError("reply holds an empty fragment list")
    frags = []
    for pos, rec in enumerate(items, start=1):
        if not isinstance(rec, dict):
            raise ParseError(f"fragment {pos} is not an object: {rec!r}")
        fid = _get(rec, ID_KEY, "id", "fragment_id")
        desc = _get(rec, DESC_KEY, "description")
        t = _get(rec, TIME_KEY, "duration")
        try:
            fid = int(fid) if fid is not None else pos
            t = float(t) if t is not None else None
        except (TypeError, ValueError) as exc:
            raise ParseError(f"fragment {pos}: bad id or time ({exc})") from exc
        frags.append(Fragment(fid, str(desc).strip() if desc is not None else "", t))
    if [f.fragment_id for f in frags] != list(range(1, len(frags) + 1)):
        log.warning("re-sequencing fragment ids %s", [f.fragment_id for f in frags])
        frags = [f._replace(fragment_id=i) for i, f in enumerate(frags, start=1)]
    return frags


def serialize_fragments(frags: Iterable[Fragment]) -> str:
    out = []
    for f in frags:
        rec: dict[str, Any] = {ID_KEY: f.fragment_id, DESC_KEY: f.description}
        if f.time is not None:
            rec[TIME_KEY] = f.time
        out.append(rec)
    return json.dumps(out, ensure_ascii=False)


def seconds_to_frames(duration: float, fps: float = FPS) -> int:
    if duration < 0:
        raise DomainError(f"negative duration {duration}")
    if fps <= 0:
        raise DomainError(f"fps must be positive, got {fps}")
    # guard against 0.3 * 10 = 3.0000000000000004 style round-up
    return int(math.ceil(duration * fps - 1e-9))


# --------------------------------------------------------------------------- director stages

_TEMPLATE_FOR = {
    ScriptStage.ROUGH: "script_rough",
    ScriptStage.DETAILED: "script_detailed",
    ScriptStage.COMPLETED: "script_completed",
    ScriptStage.SCHEDULED: "script_scheduled",
}


def _render(template: str, **fields: str) -> str:
    for k, v in fields.items():
        template = template.replace("{" + k + "}", v)
    return template


def _ask(backend, cfg: PlanningConfig, task: str, template: str, payload: dict[str, Any], **fields: str) -> str:
    req = DirectorRequest(
        system_preamble=cfg.template("preamble"),
        user_message=_render(cfg.template(template), **fields),
        max_retries=cfg.max_retries,
        timeout=cfg.timeout,
        task=task,
        payload=payload,
    )
    return director_call(req, backend)


def _clamp(t: float | None, fid: int, cfg: PlanningConfig) -> float:
    if t is None:
        log.warning("scene %d: no time allocated, using %.1f s", fid, cfg.default_scene_s)
        return cfg.default_scene_s
    clamped = min(max(t, cfg.min_scene_s), cfg.max_scene_s)
    if clamped != t:
        log.warning("scene %d: time %.2f s clamped to %.2f s", fid, t, clamped)
    return clamped


def refine_script(
    backend,
    story: Story,
    prev: Script | None,
    stage: ScriptStage,
    cfg: PlanningConfig | None = None,
) -> Script:
    cfg = cfg or PlanningConfig()
    stage = ScriptStage(stage)
    if stage is ScriptStage.ROUGH:
        if prev is not None:
            raise StageOrderError("the Rough stage starts from the story alone")
    elif prev is None or prev.stage != stage - 1:
        got = prev.stage.label if prev is not None else "nothing"
        raise StageOrderError(f"{stage.label} must follow {ScriptStage(stage - 1).label}, got {got}")

    records = prev.to_records() if prev is not None else []
    reply = _ask(
        backend,
        cfg,
        stage.name.lower(),
        _TEMPLATE_FOR[stage],
        {"story": story.text, "script": records},
        story=story.text,
        script=json.dumps(records, ensure_ascii=False),
    )
    frags = parse_fragments(reply)

    if stage is ScriptStage.SCHEDULED:
        times = {f.fragment_id: f.time for f in frags}
        if len(frags) != len(prev.scenes):
            log.warning("schedule lists %d fragments for %d scenes", len(frags), len(prev.scenes))
        scenes = [
            Scene(s.fragment_id, s.description, _clamp(times.get(s.fragment_id), s.fragment_id, cfg))
            for s in prev.scenes
        ]
        return Script(stage, scenes)

    empty = [f.fragment_id for f in frags if not f.description]
    if empty:
        raise ParseError(f"fragments {empty} have no description")
    return Script(stage, [Scene(f.fragment_id, f.description) for f in frags])


def plan_script(
    backend,
    story: Story | str,
    cfg: PlanningConfig | None = None,
    history: list[Script] | None = None,
) -> Script:
    """Run all four refinement stages; intermediate scripts go to ``history``."""
    story = Story(story) if isinstance(story, str) else story
    backend = resolve(backend, Kind.DIRECTOR)
    script = None
    for stage in ScriptStage:
        try:
            script = refine_script(backend, story, script, stage, cfg)
        except VlogError as exc:
            raise exc.with_stage(stage.label)
        if history is not None:
            history.append(script)
    return script


def summarize_actors(backend, script: Script, cfg: PlanningConfig | None = None) -> list[ActorSpec]:
    cfg = cfg or PlanningConfig()
    if script.stage < ScriptStage.COMPLETED:
        raise StageOrderError(f"actors are summarized from a Completed script, got {script.stage.label}")
    records = script.to_records()
    reply = _ask(
        backend, cfg, "actors", "actors", {"script": records}, script=json.dumps(records, ensure_ascii=False)
    )
    actors: dict[str, ActorSpec] = {}
    for rec in extract_json(reply, list):
        if not isinstance(rec, dict):
            raise ParseError(f"actor entry is not an object: {rec!r}")
        aid = str(_get(rec, "actor id", "id", "actor_id") or "").strip()
        desc = str(_get(rec, "description") or "").strip()
        if not aid or not desc:
            log.warning("dropping actor entry without id or description: %r", rec)
            continue
        if aid in actors:
            log.warning("duplicate actor id %r ignored", aid)
            continue
        actors[aid] = ActorSpec(aid, desc)
    return list(actors.values())


def design_actor_images(image_backend, actors: list[ActorSpec], cfg: PlanningConfig | None = None) -> ActorImageSet:
    cfg = cfg or PlanningConfig()
    backend = resolve(image_backend, Kind.IMAGE_GEN)
    out = ActorImageSet()
    for a in actors:
        if not a.description.strip():
            raise DomainError(f"actor {a.actor_id!r} has an empty description")
        img = np.asarray(backend.generate(a.description), dtype=np.float32)
        if img.shape != (3, *cfg.resolution):
            raise ShapeError(f"actor {a.actor_id!r}: image shape {img.shape}, expected {(3, *cfg.resolution)}")
        out.images[a.actor_id] = np.clip(img, 0.0, 1.0)
    return out


def assign_protagonists(
    backend, script: Script, actors: list[ActorSpec], cfg: PlanningConfig | None = None
) -> ProtagonistDoc:
    cfg = cfg or PlanningConfig()
    if script.stage is not ScriptStage.SCHEDULED:
        raise StageOrderError("protagonists are assigned on the Scheduled script")
    known = {a.actor_id for a in actors}
    if not known:
        return ProtagonistDoc({s.fragment_id: None for s in script.scenes})
    records = script.to_records()
    actor_recs = [{"actor id": a.actor_id, "description": a.description} for a in actors]
    reply = _ask(
        backend,
        cfg,
        "protagonists",
        "protagonists",
        {"script": records, "actors": actor_recs},
        script=json.dumps(records, ensure_ascii=False),
        actors=json.dumps(actor_recs, ensure_ascii=False),
    )
    raw = extract_json(reply, dict)
    parsed: dict[int, Any] = {}
    for k, v in raw.items():
        try:
            parsed[int(k)] = v
        except ValueError:
            log.warning("ignoring non-integer fragment key %r", k)
    assignments: dict[int, str | None] = {}
    for s in script.scenes:
        v = parsed.get(s.fragment_id)
        if v is not None and str(v) not in known:
            log.warning("scene %d: unknown actor %r coerced to none", s.fragment_id, v)
            v = None
        assignments[s.fragment_id] = None if v is None else str(v)
    extra = set(parsed) - set(assignments)
    if extra:
        log.warning("ignoring assignments for unknown fragments %s", sorted(extra))
    return ProtagonistDoc(assignments)


def save_actors(actors: list[ActorSpec], path: Path) -> None:
    recs = [{"actor id": a.actor_id, "description": a.description} for a in actors]
    Path(path).write_text(json.dumps(recs, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")


def load_actors(path: Path) -> list[ActorSpec]:
    return [ActorSpec(r["actor id"], r["description"]) for r in json.loads(Path(path).read_text(encoding="utf-8"))]


def with_durations(script: Script, seconds: Iterable[float]) -> Script:
    """Scheduled copy of ``script`` with the given per-scene durations."""
    scenes = [replace(s, duration_seconds=float(t)) for s, t in zip(script.scenes, seconds, strict=True)]
    return Script(ScriptStage.SCHEDULED, scenes)
