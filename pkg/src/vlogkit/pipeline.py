"""Stage functions behind the CLI.

Each stage reads only the artifacts persisted by earlier stages under
``cfg.out``, so any stage can be deleted and rerun on its own::

    script.json (+ script_<stage>.json)   plan
    actors.json, actors/*.png,
    protagonists.json                     actors
    snippets/scene_NNN/                   shoot
    audio/scene_NNN.wav                   voice
    vlog_manifest.json, manifest.sha256   assemble
"""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from .backends import Kind, build_backend, embed_image, embed_text
from .config import PipelineConfig, sub_seed
from .diffusion.model import load_checkpoint
from .diffusion.sampler import SamplerConfig
from .errors import ConfigError, VlogError
from .evalkit import FeatureSet, MetricReport, cosine_image_video, cosine_text_video, frechet_distance
from .planning import (
    ActorImageSet,
    PlanningConfig,
    ProtagonistDoc,
    Script,
    ScriptStage,
    assign_protagonists,
    design_actor_images,
    load_actors,
    plan_script,
    save_actors,
    summarize_actors,
)
from .shooting import SNIPPET_MANIFEST, load_snippet, save_snippet, shoot_scene, to_uint8
from .voicing import (
    MANIFEST_NAME,
    SceneVideo,
    VlogManifest,
    assemble,
    fit_audio,
    mux,
    read_wav,
    synth_speech,
    write_wav,
)

log = logging.getLogger(__name__)

SCRIPT_FILE = "script.json"
ACTORS_FILE = "actors.json"
PROTAGONISTS_FILE = "protagonists.json"
DIGEST_FILE = "manifest.sha256"


def _stage(name: str):
    """Tag any pipeline error raised inside the stage with its name."""
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except VlogError as exc:
                raise exc.with_stage(name)
        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner
    return wrap


def _require(path: Path, made_by: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing {path.name}; run `{made_by}` first")
    return path


def scene_dir(i: int) -> str:
    return f"scene_{i:03d}"


def planning_config(cfg: PipelineConfig, resolution=(64, 64)) -> PlanningConfig:
    return PlanningConfig(min_scene_s=cfg.min_scene_s, max_scene_s=cfg.max_scene_s,
                          default_scene_s=cfg.default_scene_s, fps=cfg.fps, resolution=resolution)


@_stage("plan")
def stage_plan(cfg: PipelineConfig) -> Script:
    cfg.out.mkdir(parents=True, exist_ok=True)
    history: list[Script] = []
    director = build_backend(cfg.descriptor(Kind.DIRECTOR))
    script = plan_script(director, cfg.story_text(), planning_config(cfg), history)
    for s in history:
        s.save(cfg.out / f"script_{s.stage.name.lower()}.json")
    script.save(cfg.out / SCRIPT_FILE)
    return script


@_stage("actors")
def stage_actors(cfg: PipelineConfig) -> ProtagonistDoc:
    script = Script.load(_require(cfg.out / SCRIPT_FILE, "plan"), ScriptStage.SCHEDULED)
    pcfg = planning_config(cfg)
    director = build_backend(cfg.descriptor(Kind.DIRECTOR))
    actors = summarize_actors(director, script, pcfg)
    images = design_actor_images(build_backend(cfg.descriptor(Kind.IMAGE_GEN)), actors, pcfg)
    doc = assign_protagonists(director, script, actors, pcfg)
    save_actors(actors, cfg.out / ACTORS_FILE)
    (cfg.out / "actors").mkdir(exist_ok=True)
    for aid, img in images.images.items():
        Image.fromarray(to_uint8(img[None])[0]).save(cfg.out / "actors" / f"{aid}.png")
    (cfg.out / PROTAGONISTS_FILE).write_text(doc.to_json() + "\n", encoding="utf-8")
    return doc


def load_actor_images(cfg: PipelineConfig) -> ActorImageSet:
    out = ActorImageSet()
    for a in load_actors(_require(cfg.out / ACTORS_FILE, "actors")):
        img = np.asarray(Image.open(cfg.out / "actors" / f"{a.actor_id}.png").convert("RGB"), dtype=np.float32)
        out.images[a.actor_id] = img.transpose(2, 0, 1) / 255.0
    return out


def _fit_frame(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape[1:] == (size, size):
        return img
    pil = Image.fromarray(to_uint8(img[None])[0]).resize((size, size), Image.BILINEAR)
    return np.asarray(pil, dtype=np.float32).transpose(2, 0, 1) / 255.0


@_stage("shoot")
def stage_shoot(cfg: PipelineConfig) -> list[Path]:
    if cfg.checkpoint is None or not cfg.checkpoint.is_file():
        raise ConfigError(f"checkpoint not found: {cfg.checkpoint}")
    script = Script.load(_require(cfg.out / SCRIPT_FILE, "plan"), ScriptStage.SCHEDULED)
    doc = ProtagonistDoc.from_json(_require(cfg.out / PROTAGONISTS_FILE, "actors").read_text(encoding="utf-8"))
    images = load_actor_images(cfg)
    model = load_checkpoint(cfg.checkpoint).model
    net = model.config.net
    text_backend = build_backend(cfg.descriptor(Kind.TEXT_EMBEDDER, dim=net.text_dim))
    image_backend = build_backend(cfg.descriptor(Kind.IMAGE_EMBEDDER, dim=net.actor_dim))
    sampler = SamplerConfig(cfg.steps, cfg.guidance_scale, cfg.sampler, cfg.beta)

    def one(scene) -> Path:
        aid = doc.assignments.get(scene.fragment_id)
        actor = _fit_frame(images[aid], model.config.frame_size) if aid else None
        seed = sub_seed(cfg.seed, "shoot-scene", scene.fragment_id)
        snip = shoot_scene(model, scene, actor, cfg.k, sampler, np.random.default_rng(seed),
                           text_backend, image_backend, cfg.fps)
        log.info("scene %d: %d frames from %d clips", scene.fragment_id, snip.frame_count, len(snip.clips))
        return save_snippet(snip, cfg.out / "snippets" / scene_dir(scene.fragment_id), cfg.fps, seed, cfg.k)

    if cfg.workers == 1:
        return [one(s) for s in script.scenes]
    with ThreadPoolExecutor(cfg.workers) as pool:
        return list(pool.map(one, script.scenes))


def _snippet_record(cfg: PipelineConfig, fid: int) -> dict:
    path = _require(cfg.out / "snippets" / scene_dir(fid) / SNIPPET_MANIFEST, "shoot")
    return json.loads(path.read_text())


@_stage("voice")
def stage_voice(cfg: PipelineConfig) -> list[Path]:
    script = Script.load(_require(cfg.out / SCRIPT_FILE, "plan"), ScriptStage.SCHEDULED)
    tts = build_backend(cfg.descriptor(Kind.TTS))
    paths = []
    for scene in script.scenes:
        rec = _snippet_record(cfg, scene.fragment_id)
        audio = fit_audio(synth_speech(tts, scene.description), rec["frame_count"] / rec["fps"])
        paths.append(write_wav(audio, cfg.out / "audio" / f"{scene_dir(scene.fragment_id)}.wav"))
    return paths


@_stage("assemble")
def stage_assemble(cfg: PipelineConfig) -> VlogManifest:
    script = Script.load(_require(cfg.out / SCRIPT_FILE, "plan"), ScriptStage.SCHEDULED)
    videos: list[SceneVideo] = []
    for scene in script.scenes:
        rec = _snippet_record(cfg, scene.fragment_id)
        frames_dir = f"snippets/{scene_dir(scene.fragment_id)}"
        audio_file = f"audio/{scene_dir(scene.fragment_id)}.wav"
        audio = read_wav(_require(cfg.out / audio_file, "voice"))
        videos.append(mux(scene.fragment_id, rec["frame_count"], audio, rec["fps"], frames_dir, audio_file))
    manifest = assemble(videos)
    path = manifest.save(cfg.out / MANIFEST_NAME)
    (cfg.out / DIGEST_FILE).write_text(manifest_digest(path) + "\n")
    return manifest


def run_pipeline(cfg: PipelineConfig) -> VlogManifest:
    stage_plan(cfg)
    stage_actors(cfg)
    stage_shoot(cfg)
    stage_voice(cfg)
    return stage_assemble(cfg)


def manifest_digest(manifest_path: Path) -> str:
    """sha256 over the manifest and every file it references, in a fixed order."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    h = hashlib.sha256()
    h.update(manifest_path.read_bytes())
    for s in json.loads(manifest_path.read_text())["scenes"]:
        for f in sorted((root / s["frames_dir"]).iterdir()):
            h.update(f.name.encode())
            h.update(f.read_bytes())
        h.update(s["audio_file"].encode())
        h.update((root / s["audio_file"]).read_bytes())
    return h.hexdigest()


@_stage("eval")
def stage_eval(cfg: PipelineConfig, reference: Path | None = None) -> list[MetricReport]:
    """Text/actor agreement of the shot snippets, plus a Fréchet score against a reference run."""
    script = Script.load(_require(cfg.out / SCRIPT_FILE, "plan"), ScriptStage.SCHEDULED)
    text_desc = cfg.descriptor(Kind.TEXT_EMBEDDER)
    image_desc = cfg.descriptor(Kind.IMAGE_EMBEDDER)
    text_backend, image_backend = build_backend(text_desc), build_backend(image_desc)
    doc = ProtagonistDoc.from_json(_require(cfg.out / PROTAGONISTS_FILE, "actors").read_text(encoding="utf-8"))
    images = load_actor_images(cfg)
    text_scores, actor_scores, feats = [], [], []
    for scene in script.scenes:
        snip, _ = load_snippet(_require(cfg.out / "snippets" / scene_dir(scene.fragment_id), "shoot"))
        embs = [embed_image(f, image_backend) for f in snip.frames]
        feats.extend(e.values.mean(0) for e in embs)
        text_scores.append(cosine_text_video(embed_text(scene.description, text_backend), embs))
        aid = doc.assignments.get(scene.fragment_id)
        if aid:
            ref = embed_image(_fit_frame(images[aid], snip.frames.shape[-1]), image_backend)
            actor_scores.append(cosine_image_video(ref, embs))
    embedder = f"{image_desc.mode.value}:{image_desc.seed}"
    reports = [MetricReport("clipsim", float(np.mean(text_scores)), len(text_scores),
                            f"{text_desc.mode.value}:{text_desc.seed}", cfg.seed)]
    if actor_scores:
        reports.append(MetricReport("clip_i", float(np.mean(actor_scores)), len(actor_scores), embedder, cfg.seed))
    if reference is not None:
        ref_feats = []
        for d in sorted(Path(reference).glob("snippets/scene_*")):
            snip, _ = load_snippet(d)
            ref_feats.extend(embed_image(f, image_backend).values.mean(0) for f in snip.frames)
        fd = frechet_distance(FeatureSet.from_features(feats), FeatureSet.from_features(ref_feats))
        reports.append(MetricReport("frechet", fd, len(feats), embedder, cfg.seed))
    out = cfg.out / "eval"
    out.mkdir(exist_ok=True)
    for r in reports:
        r.save(out / f"{r.metric}.json")
    return reports
