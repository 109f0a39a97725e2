"""Pluggable generative backends: director LLM, actor designer, voicer, embedders.

Every backend comes in two flavours. ``mock`` backends are seeded, in-process
and pure, so the whole pipeline runs offline and reproducibly. ``remote``
backends speak a single HTTP POST protocol::

    request  {"preamble": str, "message": str}
    reply    {"text": str}

Non-text payloads (embeddings, images, audio) travel JSON-encoded inside the
``text`` field of the reply.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Any, Mapping

import httpx
import numpy as np

from .errors import DimMismatch, DomainError, EmptyReply, NonFiniteError, ShapeError, TransportError

log = logging.getLogger(__name__)

TOKEN_ENV = "VLOG_BACKEND_TOKEN"


class Kind(str, Enum):
    DIRECTOR = "director"
    IMAGE_GEN = "image_gen"
    TTS = "tts"
    TEXT_EMBEDDER = "text_embedder"
    IMAGE_EMBEDDER = "image_embedder"


class Mode(str, Enum):
    MOCK = "mock"
    REMOTE = "remote"


@dataclass(frozen=True)
class BackendDescriptor:
    kind: Kind
    mode: Mode = Mode.MOCK
    endpoint: str | None = None
    seed: int = 0
    dim: int = 64
    timeout: float = 30.0
    max_retries: int = 2
    options: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.mode is Mode.REMOTE and not self.endpoint:
            raise DomainError(f"remote {self.kind.value} backend needs an endpoint")
        if self.timeout <= 0:
            raise DomainError("timeout must be positive")
        if self.max_retries < 0:
            raise DomainError("max_retries must be >= 0")

    @classmethod
    def from_dict(cls, kind: str | Kind, d: Mapping[str, Any] | None) -> "BackendDescriptor":
        d = dict(d or {})
        known = {"mode", "endpoint", "seed", "dim", "timeout", "max_retries"}
        options = {k: v for k, v in d.items() if k not in known}
        return cls(kind=Kind(kind), options=options, **{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class DirectorRequest:
    """One director turn.

    ``task`` and ``payload`` are hints for the mock director only; the remote
    protocol sends nothing but the preamble and the rendered message.
    """

    system_preamble: str
    user_message: str
    max_retries: int = 2
    timeout: float = 30.0
    task: str = ""
    payload: Mapping[str, Any] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.max_retries < 0:
            raise DomainError("max_retries must be >= 0")
        if self.timeout <= 0:
            raise DomainError("timeout must be positive")


@dataclass(frozen=True, eq=False)
class Embedding:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise ShapeError(f"embedding must be rank-2 [tokens x dim], got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("embedding contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def tokens(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def is_null(self) -> bool:
        return not self.values.any()

    @classmethod
    def null(cls, dim: int) -> "Embedding":
        return cls(np.zeros((1, dim), dtype=np.float32))


def stable_seed(*parts: Any) -> int:
    """Process-independent 63-bit seed from arbitrary printable parts."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little") >> 1


# --------------------------------------------------------------------------- remote


def _post(endpoint: str, preamble: str, message: str, timeout: float, max_retries: int) -> str:
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(TOKEN_ENV)
    if token:
        headers["Authorization"] = f"Bearer {token}"
    body = {"preamble": preamble, "message": message}
    last: Exception | None = None
    for attempt in range(max_retries + 1):
        try:
            r = httpx.post(endpoint, json=body, headers=headers, timeout=timeout)
            if r.status_code >= 500:
                raise httpx.HTTPStatusError(f"server error {r.status_code}", request=r.request, response=r)
            r.raise_for_status()
            text = r.json().get("text")
        except (httpx.HTTPError, ValueError) as exc:
            last = exc
            log.warning("backend POST %s failed (attempt %d/%d): %s", endpoint, attempt + 1, max_retries + 1, exc)
            continue
        if text is None or not str(text).strip():
            raise EmptyReply(f"blank reply from {endpoint}")
        return str(text)
    raise TransportError(f"{endpoint}: {max_retries + 1} attempts failed ({last})")


# --------------------------------------------------------------------------- director

_SENTENCE = re.compile(r"(?<=[.!?])\s+")
_CLAUSE = re.compile(r"\s*(?:[,;:]|\band then\b|\band\b)\s*")
_NAMED = re.compile(r"\b(?:an?|the|his|her)\s+((?:[\w'-]+\s+){0,3}?[\w'-]+)\s+named\s+([A-Z][\w'-]*)")
_SHOTS = ("wide shot", "close-up", "medium shot", "tracking shot", "aerial view", "low angle")


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE.split(text.strip()) if s.strip()]


def _split_clauses(description: str) -> list[str]:
    """Split a description into short clauses, folding fragments under 3 words."""
    pieces = [p.strip(" .") for p in _CLAUSE.split(description) if p.strip(" .")]
    out: list[str] = []
    for p in pieces:
        if out and len(p.split()) < 3:
            out[-1] = f"{out[-1]}, {p}"
        elif not out or len(out[-1].split()) >= 3:
            out.append(p)
        else:
            out[-1] = f"{out[-1]}, {p}"
    return [o[0].upper() + o[1:] + "." for o in out] or [description]


class MockDirector:
    """Seeded template engine standing in for a chat LLM.

    It answers in the fragment-JSON format the real director is instructed to
    use. The seed picks the camera shot annotated on each fragment and the
    per-scene durations, so different seeds give different replies.
    """

    def __init__(self, descriptor: BackendDescriptor):
        self.descriptor = descriptor
        lo, hi = descriptor.options.get("time_range", (5, 10))
        self.time_range = (int(lo), int(hi))

    def _shot(self, *key: Any) -> str:
        rng = np.random.default_rng(stable_seed(self.descriptor.seed, "shot", *key))
        return _SHOTS[int(rng.integers(len(_SHOTS)))]

    def _fragments(self, descriptions: list[str]) -> str:
        return json.dumps(
            [
                {"video fragment id": i, "video fragment description": d, "shot": self._shot(i, d)}
                for i, d in enumerate(descriptions, start=1)
            ],
            ensure_ascii=False,
        )

    def complete(self, req: DirectorRequest) -> str:
        payload = dict(req.payload or {})
        task = req.task
        script = payload.get("script") or []
        descriptions = [s["video fragment description"] for s in script]
        if task == "rough":
            return self._fragments(split_sentences(payload.get("story", req.user_message)))
        if task == "detailed":
            return self._fragments([c for d in descriptions for c in _split_clauses(d)])
        if task == "completed":
            return self._fragments(descriptions)
        if task == "scheduled":
            rng = np.random.default_rng(stable_seed(self.descriptor.seed, "time", payload.get("story", "")))
            lo, hi = self.time_range
            times = rng.integers(lo, hi + 1, size=len(script))
            return json.dumps(
                [{"video fragment id": s["video fragment id"], "time": int(t)} for s, t in zip(script, times)]
            )
        if task == "actors":
            return json.dumps(self._actors(descriptions), ensure_ascii=False)
        if task == "protagonists":
            return json.dumps(self._protagonists(script, payload.get("actors") or []))
        return self._fragments(split_sentences(req.user_message))

    @staticmethod
    def _actors(descriptions: list[str]) -> list[dict[str, str]]:
        found: dict[str, str] = {}
        for d in descriptions:
            for m in _NAMED.finditer(d):
                name = m.group(2)
                found.setdefault(name.lower(), f"a {m.group(1).lower()} named {name}")
        return [{"actor id": k, "description": v} for k, v in found.items()]

    @staticmethod
    def _protagonists(script: list[Mapping], actors: list[Mapping]) -> dict[str, str | None]:
        out: dict[str, str | None] = {}
        last = None
        for s in script:
            words = set(re.findall(r"[\w']+", s["video fragment description"].lower()))
            words |= {w[:-2] for w in words if w.endswith("'s")}
            hit = next((a["actor id"] for a in actors if str(a["actor id"]).lower() in words), None)
            if hit is None and words & {"he", "she", "his", "her", "him"}:
                hit = last
            out[str(s["video fragment id"])] = hit
            last = hit or last
        return out


class RemoteDirector:
    def __init__(self, descriptor: BackendDescriptor):
        self.descriptor = descriptor

    def complete(self, req: DirectorRequest) -> str:
        return _post(self.descriptor.endpoint, req.system_preamble, req.user_message, req.timeout, req.max_retries)


def director_call(req: DirectorRequest, backend) -> str:
    backend = resolve(backend, Kind.DIRECTOR)
    text = backend.complete(req)
    if not text or not text.strip():
        raise EmptyReply("director returned a blank reply")
    return text


# --------------------------------------------------------------------------- embedders

_WORD = re.compile(r"[\w']+")


class MockTextEmbedder:
    """Hashes each lower-cased word to a seeded Gaussian vector."""

    def __init__(self, descriptor: BackendDescriptor):
        self.descriptor = descriptor
        self.dim = descriptor.dim

    def embed(self, text: str) -> Embedding:
        words = _WORD.findall(text.lower())
        if not words:
            return Embedding.null(self.dim)
        rows = [
            np.random.default_rng(stable_seed(self.descriptor.seed, "tok", w)).standard_normal(self.dim)
            for w in words
        ]
        return Embedding(np.stack(rows))


class MockImageEmbedder:
    """Projects each cell of a 4x4 patch grid with its own seeded matrix.

    No bias term, so an all-black frame maps to the null embedding; per-cell
    matrices make the embedding sensitive to where content sits in the frame.
    """

    grid = 4

    def __init__(self, descriptor: BackendDescriptor):
        self.descriptor = descriptor
        self.dim = descriptor.dim

    @lru_cache(maxsize=64)
    def _projection(self, cell: int, in_dim: int) -> np.ndarray:
        rng = np.random.default_rng(stable_seed(self.descriptor.seed, "patch", cell, in_dim))
        return rng.standard_normal((in_dim, self.dim)) * (4.0 / math.sqrt(in_dim))

    def embed(self, frame: np.ndarray) -> Embedding:
        frame = np.asarray(frame, dtype=np.float64)
        if frame.ndim != 3:
            raise ShapeError(f"frame must be rank-3 [C x H x W], got shape {frame.shape}")
        if frame.size and (frame.min() < 0 or frame.max() > 1):
            raise DomainError("frame values must lie in [0, 1]")
        if not frame.any():
            return Embedding.null(self.dim)
        tokens = []
        cell = 0
        for rows in np.array_split(np.arange(frame.shape[1]), self.grid):
            for cols in np.array_split(np.arange(frame.shape[2]), self.grid):
                patch = frame[:, rows[:, None], cols[None, :]].ravel()
                tokens.append(patch @ self._projection(cell, patch.size))
                cell += 1
        return Embedding(np.stack(tokens))


class _RemoteEmbedder:
    def __init__(self, descriptor: BackendDescriptor):
        self.descriptor = descriptor
        self.dim = descriptor.dim

    def _call(self, preamble: str, message: str) -> Embedding:
        d = self.descriptor
        arr = np.asarray(json.loads(_post(d.endpoint, preamble, message, d.timeout, d.max_retries)), dtype=np.float32)
        return Embedding(arr[None, :] if arr.ndim == 1 else arr)


class RemoteTextEmbedder(_RemoteEmbedder):
    def embed(self, text: str) -> Embedding:
        if not text.strip():
            return Embedding.null(self.dim)
        return _checked(self._call("embed_text", text), self.dim)


class RemoteImageEmbedder(_RemoteEmbedder):
    def embed(self, frame: np.ndarray) -> Embedding:
        frame = np.asarray(frame, dtype=np.float64)
        if frame.ndim != 3:
            raise ShapeError(f"frame must be rank-3 [C x H x W], got shape {frame.shape}")
        if not frame.any():
            return Embedding.null(self.dim)
        msg = json.dumps({"shape": list(frame.shape), "data": frame.ravel().round(6).tolist()})
        return _checked(self._call("embed_image", msg), self.dim)


def _checked(emb: Embedding, dim: int) -> Embedding:
    if emb.dim != dim:
        raise DimMismatch(f"backend returned dim {emb.dim}, expected {dim}")
    return emb


def embed_text(text: str, backend, expect_dim: int | None = None) -> Embedding:
    backend = resolve(backend, Kind.TEXT_EMBEDDER)
    emb = backend.embed(text)
    if expect_dim is not None and emb.dim != expect_dim:
        raise DimMismatch(f"text embedder produced dim {emb.dim}, run expects {expect_dim}")
    return emb


def embed_image(frame: np.ndarray, backend, expect_dim: int | None = None) -> Embedding:
    backend = resolve(backend, Kind.IMAGE_EMBEDDER)
    emb = backend.embed(frame)
    if expect_dim is not None and emb.dim != expect_dim:
        raise DimMismatch(f"image embedder produced dim {emb.dim}, run expects {expect_dim}")
    return emb


# --------------------------------------------------------------------------- designer / voicer


class MockImageGen:
    """Paints a seeded background gradient and a coloured ellipse per description."""

    def __init__(self, descriptor: BackendDescriptor):
        self.descriptor = descriptor
        self.resolution = tuple(descriptor.options.get("resolution", (64, 64)))

    def generate(self, description: str) -> np.ndarray:
        h, w = self.resolution
        rng = np.random.default_rng(stable_seed(self.descriptor.seed, "actor", description))
        top, bottom, body = rng.uniform(0.05, 0.95, size=(3, 3))
        ramp = np.linspace(0.0, 1.0, h)[None, :, None]
        img = top[:, None, None] * (1 - ramp) + bottom[:, None, None] * ramp
        img = np.broadcast_to(img, (3, h, w)).copy()
        cy, cx = rng.uniform(0.3, 0.7, size=2) * (h, w)
        ry, rx = rng.uniform(0.15, 0.3, size=2) * (h, w)
        yy, xx = np.mgrid[0:h, 0:w]
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img[:, inside] = body[:, None]
        return img.astype(np.float32)


class RemoteImageGen:
    def __init__(self, descriptor: BackendDescriptor):
        self.descriptor = descriptor

    def generate(self, description: str) -> np.ndarray:
        d = self.descriptor
        reply = json.loads(_post(d.endpoint, "design_actor", description, d.timeout, d.max_retries))
        img = np.asarray(reply["data"], dtype=np.float32).reshape(reply["shape"])
        return np.clip(img, 0.0, 1.0)


SECONDS_PER_CHAR = 0.06
MOCK_SAMPLE_RATE = 16_000


class MockTTS:
    """One short tone per character; whitespace and punctuation are silent."""

    def __init__(self, descriptor: BackendDescriptor):
        self.descriptor = descriptor
        self.sample_rate = int(descriptor.options.get("sample_rate", MOCK_SAMPLE_RATE))

    def synth(self, text: str) -> tuple[np.ndarray, int]:
        n = int(round(SECONDS_PER_CHAR * self.sample_rate))
        t = np.arange(n) / self.sample_rate
        env = np.sin(np.pi * np.arange(n) / n)
        base = 110.0 * (1 + (stable_seed(self.descriptor.seed, "voice") % 100) / 100.0)
        chunks = []
        for ch in text:
            if not ch.isalnum():
                chunks.append(np.zeros(n))
                continue
            freq = base * 2 ** ((ord(ch.lower()) % 24) / 12.0)
            chunks.append(0.3 * env * np.sin(2 * np.pi * freq * t))
        return np.concatenate(chunks), self.sample_rate


class RemoteTTS:
    def __init__(self, descriptor: BackendDescriptor):
        self.descriptor = descriptor

    def synth(self, text: str) -> tuple[np.ndarray, int]:
        d = self.descriptor
        reply = json.loads(_post(d.endpoint, "synth_speech", text, d.timeout, d.max_retries))
        return np.clip(np.asarray(reply["samples"], dtype=np.float64), -1, 1), int(reply["sample_rate"])


_REGISTRY = {
    (Kind.DIRECTOR, Mode.MOCK): MockDirector,
    (Kind.DIRECTOR, Mode.REMOTE): RemoteDirector,
    (Kind.TEXT_EMBEDDER, Mode.MOCK): MockTextEmbedder,
    (Kind.TEXT_EMBEDDER, Mode.REMOTE): RemoteTextEmbedder,
    (Kind.IMAGE_EMBEDDER, Mode.MOCK): MockImageEmbedder,
    (Kind.IMAGE_EMBEDDER, Mode.REMOTE): RemoteImageEmbedder,
    (Kind.IMAGE_GEN, Mode.MOCK): MockImageGen,
    (Kind.IMAGE_GEN, Mode.REMOTE): RemoteImageGen,
    (Kind.TTS, Mode.MOCK): MockTTS,
    (Kind.TTS, Mode.REMOTE): RemoteTTS,
}


def build_backend(descriptor: BackendDescriptor):
    return _REGISTRY[(descriptor.kind, descriptor.mode)](descriptor)


def resolve(backend, kind: Kind):
    """Accept either a descriptor or a constructed backend of the right kind."""
    if isinstance(backend, BackendDescriptor):
        backend = build_backend(backend)
    desc = getattr(backend, "descriptor", None)
    if desc is not None and desc.kind is not kind:
        raise DomainError(f"expected a {kind.value} backend, got {desc.kind.value}")
    return backend
