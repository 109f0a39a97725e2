from __future__ import annotations

import json
import shutil

import pytest
import torch
import yaml

from conftest import tiny_model
from vlogkit import pipeline
from vlogkit.cli import main
from vlogkit.config import PipelineConfig
from vlogkit.diffusion import save_checkpoint
from vlogkit.errors import ConfigError

STORY = "A bear named Teddy walks in the forest. Teddy finds a jar of honey."


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    torch.manual_seed(0)
    model = tiny_model(frame_size=8, factor=2, clip_len=16, width=8)
    with torch.no_grad():
        for p in model.denoiser.parameters():
            p.add_(torch.randn_like(p) * 0.02)
    return save_checkpoint(tmp_path_factory.mktemp("ckpt") / "model.safetensors", model)


def write_config(tmp_path, checkpoint, **extra):
    raw = {"story": STORY, "checkpoint": str(checkpoint), "out": "out", "steps": 2, "guidance_scale": 1.0,
           "backends": {"director": {"time_range": [2, 3]}}, **extra}
    path = tmp_path / "vlog.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def test_run_and_stage_isolation(tmp_path, checkpoint, capsys):
    cfg_path = write_config(tmp_path, checkpoint)
    assert main(["run", "--config", str(cfg_path)]) == 0
    out = tmp_path / "out"
    scheduled = [s["time"] for s in json.loads((out / "script.json").read_text())]
    manifest = json.loads((out / "vlog_manifest.json").read_text())
    assert len(manifest["scenes"]) == len(scheduled) >= 2
    assert [s["duration_s"] for s in manifest["scenes"]] == pytest.approx(scheduled)
    assert manifest["total_duration_s"] == pytest.approx(sum(scheduled))
    cfg = PipelineConfig.from_yaml(cfg_path)
    digest = (out / "manifest.sha256").read_text().strip()
    assert digest in capsys.readouterr().out

    # later stages only read persisted artifacts, so they can be rerun in isolation
    shutil.rmtree(out / "audio")
    (out / "vlog_manifest.json").unlink()
    assert main(["voice", "--config", str(cfg_path)]) == 0
    assert main(["assemble", "--config", str(cfg_path)]) == 0
    assert (out / "manifest.sha256").read_text().strip() == digest
    shutil.rmtree(out / "snippets")
    pipeline.stage_shoot(cfg)
    pipeline.stage_assemble(cfg)
    assert (out / "manifest.sha256").read_text().strip() == digest


def test_workers_do_not_change_output(tmp_path, checkpoint):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a, b = write_config(tmp_path / "a", checkpoint), write_config(tmp_path / "b", checkpoint)
    assert main(["run", "--config", str(a)]) == 0
    assert main(["run", "--config", str(b), "--workers", "2"]) == 0
    assert (tmp_path / "a/out/manifest.sha256").read_text() == (tmp_path / "b/out/manifest.sha256").read_text()


def test_seed_changes_output(tmp_path, checkpoint):
    cfg_path = write_config(tmp_path, checkpoint)
    assert main(["run", "--config", str(cfg_path), "--seed", "1"]) == 0
    first = (tmp_path / "out/manifest.sha256").read_text()
    assert main(["run", "--config", str(cfg_path), "--seed", "2", "--out", str(tmp_path / "o2")]) == 0
    assert (tmp_path / "o2/manifest.sha256").read_text() != first


def test_flag_overrides(tmp_path, checkpoint):
    cfg_path = write_config(tmp_path, checkpoint)
    cfg = PipelineConfig.from_yaml(cfg_path, k=3, guidance_scale=2.0, steps=7, workers=2, out=tmp_path / "x")
    assert (cfg.k, cfg.guidance_scale, cfg.steps, cfg.workers, cfg.out) == (3, 2.0, 7, 2, tmp_path / "x")
    assert PipelineConfig.from_yaml(cfg_path, k=None).k == 1
    assert cfg.checkpoint == checkpoint


def test_missing_checkpoint_fails_in_shoot_before_sampling(tmp_path, capsys):
    cfg_path = write_config(tmp_path, tmp_path / "nope.safetensors")
    assert main(["plan", "--config", str(cfg_path)]) == 0
    assert main(["actors", "--config", str(cfg_path)]) == 0
    capsys.readouterr()
    assert main(["shoot", "--config", str(cfg_path)]) == 2
    assert "shoot" in capsys.readouterr().err
    with pytest.raises(ConfigError) as info:
        pipeline.stage_shoot(PipelineConfig.from_yaml(cfg_path))
    assert info.value.stage == "shoot"
    assert not (tmp_path / "out" / "snippets").exists()


def test_exit_codes(tmp_path, checkpoint):
    assert main(["plan", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert main(["run", "--config", str(write_config(tmp_path, checkpoint)), "--k", "0"]) == 2

    remote = write_config(tmp_path, checkpoint, backends={
        "director": {"mode": "remote", "endpoint": "http://127.0.0.1:9", "timeout": 0.5, "max_retries": 0}})
    assert main(["plan", "--config", str(remote)]) == 3

    model = tiny_model(frame_size=8, factor=2, clip_len=16, width=8)
    with torch.no_grad():
        model.denoiser.conv_out.bias.fill_(float("nan"))
    bad = save_checkpoint(tmp_path / "nan.safetensors", model)
    assert main(["run", "--config", str(write_config(tmp_path, bad))]) == 4


def test_train_and_eval_commands(tmp_path, capsys):
    cfg_path = write_config(tmp_path, "out/train/ckpt_000003.safetensors",
                            model={"frame_size": 8, "factor": 2, "clip_len": 16, "net": {"width": 8}},
                            toy={"n_samples": 2}, train={"steps": 3, "batch_size": 1, "log_every": 0})
    assert main(["train", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "out/train/ckpt_000003.safetensors").is_file()
    assert main(["run", "--config", str(cfg_path)]) == 0
    assert main(["run", "--config", str(cfg_path), "--seed", "5", "--out", str(tmp_path / "ref")]) == 0
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg_path), "--reference", str(tmp_path / "ref")]) == 0
    names = {json.loads(line)["metric"] for line in capsys.readouterr().out.splitlines() if line.startswith("{")}
    assert {"clipsim", "frechet"} <= names
    for name in names:
        rep = json.loads((tmp_path / "out/eval" / f"{name}.json").read_text())
        assert set(rep) == {"metric", "value", "n_samples", "embedder_id", "seed"}
