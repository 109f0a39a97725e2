"""``vlogkit`` command line.

Exit codes: 0 success, 2 config error, 3 backend error, 4 numerical error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .backends import Kind
from .config import PipelineConfig
from .errors import ConfigError, VlogError

log = logging.getLogger("vlogkit")

STAGES = ("plan", "actors", "shoot", "voice", "assemble", "train", "eval", "run")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, required=True, help="pipeline YAML")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--k", type=int, help="context frames carried between clips")
    common.add_argument("--guidance", type=float, help="classifier-free guidance scale")
    common.add_argument("--steps", type=int, help="sampler steps")
    common.add_argument("--workers", type=int, help="scenes shot in parallel")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vlogkit", description="Story-to-vlog pipeline with a toy video diffusion model.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sp = sub.add_parser(name, parents=[common])
        if name == "train":
            sp.add_argument("--resume", type=Path, help="checkpoint to continue from")
        if name == "eval":
            sp.add_argument("--reference", type=Path, help="another run directory for the Fréchet score")
    return p


def load_config(args) -> PipelineConfig:
    return PipelineConfig.from_yaml(
        args.config, seed=args.seed, k=args.k, guidance_scale=args.guidance, steps=args.steps,
        workers=args.workers, out=args.out,
    )


def cmd_train(cfg: PipelineConfig, resume: Path | None) -> Path:
    from .diffusion.model import ModelConfig, VideoModel
    from .toydata import ToySpec, make_toy_dataset
    from .training import TrainConfig, train

    try:
        mcfg = ModelConfig.from_dict(cfg.model)
        toy = ToySpec(**{"size": mcfg.frame_size, "frames": mcfg.clip_len, **cfg.toy})
        tcfg = TrainConfig(**{"seed": cfg.seed, **cfg.train})
    except TypeError as exc:
        raise ConfigError(str(exc)).with_stage("train") from exc
    samples = make_toy_dataset(toy, seed=cfg.seed)
    model = VideoModel(mcfg, seed=cfg.seed)
    try:
        return train(tcfg, samples, model, cfg.out / "train", resume=resume,
                     text_backend=cfg.descriptor(Kind.TEXT_EMBEDDER, dim=mcfg.net.text_dim),
                     image_backend=cfg.descriptor(Kind.IMAGE_EMBEDDER, dim=mcfg.net.actor_dim))
    except VlogError as exc:
        raise exc.with_stage("train")


def dispatch(args) -> str:
    cfg = load_config(args)
    cmd = args.command
    if cmd == "plan":
        script = pipeline.stage_plan(cfg)
        return f"{len(script.scenes)} scenes, {script.total_seconds:.1f} s"
    if cmd == "actors":
        doc = pipeline.stage_actors(cfg)
        return f"{sum(v is not None for v in doc.assignments.values())} scenes with a protagonist"
    if cmd == "shoot":
        return f"{len(pipeline.stage_shoot(cfg))} snippets"
    if cmd == "voice":
        return f"{len(pipeline.stage_voice(cfg))} audio tracks"
    if cmd in ("assemble", "run"):
        manifest = pipeline.run_pipeline(cfg) if cmd == "run" else pipeline.stage_assemble(cfg)
        digest = (cfg.out / pipeline.DIGEST_FILE).read_text().strip()
        return f"{len(manifest.scenes)} scenes, {manifest.total_duration_s:.2f} s, digest {digest}"
    if cmd == "train":
        return str(cmd_train(cfg, args.resume))
    if cmd == "eval":
        return "\n".join(r.to_json() for r in pipeline.stage_eval(cfg, args.reference))
    raise ConfigError(f"unknown command {cmd!r}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        print(dispatch(args))
    except VlogError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
