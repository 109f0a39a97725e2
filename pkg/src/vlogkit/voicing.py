"""Narration, per-scene audio/video pairing and the final vlog manifest."""
from __future__ import annotations

import json
import shutil
import subprocess
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .backends import Kind, resolve
from .errors import ConfigError, DomainError, NonFiniteError, OrderError, ShapeError
from .planning import FPS

MANIFEST_NAME = "vlog_manifest.json"


@dataclass(eq=False)
class AudioTrack:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise DomainError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.isfinite(self.samples).all():
            raise NonFiniteError("audio contains non-finite samples")
        self.samples = np.clip(self.samples, -1.0, 1.0)

    @property
    def seconds(self) -> float:
        return len(self.samples) / self.sample_rate


def synth_speech(tts_backend, text: str) -> AudioTrack:
    if not text or not text.strip():
        raise DomainError("cannot voice empty text")
    samples, rate = resolve(tts_backend, Kind.TTS).synth(text)
    return AudioTrack(samples, rate)


def fit_audio(audio: AudioTrack, target_seconds: float) -> AudioTrack:
    """Pad with trailing silence or truncate to the target length."""
    if target_seconds <= 0:
        raise DomainError(f"target_seconds must be positive, got {target_seconds}")
    n = int(round(target_seconds * audio.sample_rate))
    have = len(audio.samples)
    if have == n:
        return audio
    if have > n:
        return AudioTrack(audio.samples[:n].copy(), audio.sample_rate)
    return AudioTrack(np.concatenate([audio.samples, np.zeros(n - have)]), audio.sample_rate)


def write_wav(audio: AudioTrack, path: Path) -> Path:
    """16-bit mono PCM."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.round(audio.samples * 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate)
        w.writeframes(pcm.tobytes())
    return path


def read_wav(path: Path) -> AudioTrack:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ConfigError(f"{path}: expected 16-bit mono audio")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    return AudioTrack(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767, rate)


@dataclass(eq=False)
class SceneVideo:
    fragment_id: int
    frame_count: int
    audio: AudioTrack
    fps: float = FPS
    frames_dir: str = ""
    audio_file: str = ""

    @property
    def duration_s(self) -> float:
        return self.frame_count / self.fps


def mux(fragment_id: int, frames: np.ndarray, audio: AudioTrack, fps: float = FPS, frames_dir: str = "",
        audio_file: str = "") -> SceneVideo:
    """Pair a snippet with its narration; the audio must already match the video length."""
    n = int(frames.shape[0]) if hasattr(frames, "shape") else int(frames)
    video_s = n / fps
    if abs(audio.seconds - video_s) > 1.0 / audio.sample_rate + 1e-12:
        raise ShapeError(f"scene {fragment_id}: audio {audio.seconds:.4f}s vs video {video_s:.4f}s; fit it first")
    return SceneVideo(fragment_id, n, audio, fps, frames_dir, audio_file)


@dataclass(eq=False)
class VlogManifest:
    scenes: list[SceneVideo]
    fps: float

    def __post_init__(self):
        ids = [s.fragment_id for s in self.scenes]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise OrderError(f"scenes out of script order: {ids}")

    @property
    def total_duration_s(self) -> float:
        return sum(s.frame_count for s in self.scenes) / self.fps

    def to_dict(self) -> dict:
        return {
            "scenes": [
                {"fragment_id": s.fragment_id, "frames_dir": s.frames_dir, "audio_file": s.audio_file,
                 "duration_s": s.duration_s}
                for s in self.scenes
            ],
            "fps": self.fps,
            "total_duration_s": self.total_duration_s,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8")
        return path


def assemble(scene_videos: Sequence[SceneVideo]) -> VlogManifest:
    if not scene_videos:
        raise DomainError("no scenes to assemble")
    fps = {s.fps for s in scene_videos}
    if len(fps) != 1:
        raise ShapeError(f"scenes disagree on fps: {sorted(fps)}")
    return VlogManifest(list(scene_videos), fps.pop())


def export_video(manifest_path: Path, out_file: Path, ffmpeg: str = "ffmpeg") -> Path:
    """Mux the manifest into one file with an external ffmpeg, if installed."""
    exe = shutil.which(ffmpeg)
    if exe is None:
        raise ConfigError(f"{ffmpeg} not found on PATH")
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    data = json.loads(manifest_path.read_text())
    parts = []
    for i, s in enumerate(data["scenes"]):
        part = out_file.parent / f".part_{i:03d}.mp4"
        subprocess.run([
            exe, "-y", "-loglevel", "error", "-framerate", str(data["fps"]),
            "-i", str(root / s["frames_dir"] / "frame_%05d.png"), "-i", str(root / s["audio_file"]),
            "-c:v", "libx264", "-pix_fmt", "yuv420p", "-c:a", "aac", "-shortest", str(part),
        ], check=True)
        parts.append(part)
    listing = out_file.parent / ".parts.txt"
    listing.write_text("".join(f"file '{p.name}'\n" for p in parts))
    subprocess.run([exe, "-y", "-loglevel", "error", "-f", "concat", "-safe", "0", "-i", str(listing),
                    "-c", "copy", str(out_file)], check=True)
    for p in [*parts, listing]:
        p.unlink()
    return out_file
