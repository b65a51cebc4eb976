import json
import subprocess
import sys

import numpy as np
import pytest

import hashmoe.trainer as trainer_mod
from hashmoe.cli import EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, TRAIN_KEYS, main, read_config
from hashmoe.errors import ConfigError, DivergenceError
from hashmoe.render import read_raw
from hashmoe.trainer import load_checkpoint

from conftest import CACHE

SCENE = "synthetic:0:4:16"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--scene", SCENE, "--cache", str(CACHE), "--steps", "3", "--experts", "2", "--batch", "16",
                 "--out", str(out), "--log-every", "1"])
    assert code == 0
    return out


def test_train_writes_run_directory(trained, capsys):
    ckpt = trained / "checkpoint.hmoe"
    assert ckpt.exists() and (trained / "config.json").exists()
    lines = (trained / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(l)["step"] for l in lines] == [1, 2, 3]
    state = load_checkpoint(ckpt)
    assert state.step == 3 and state.meta["scene"] == SCENE
    assert state.model.cfg.n_experts == 2 and state.config.rays_per_batch == 16


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# toy run\nscene = {SCENE}\nexperts = 3\nsteps = 2\nbatch = 8\ncache = {CACHE}\n"
                   f"out = {tmp_path / 'from_file'}\nheterogeneous = false\ndispatch = full\n")
    opts = read_config(cfg)
    assert opts["experts"] == 3 and opts["heterogeneous"] is False and opts["dispatch"] == "full"
    assert main(["train", "--config", str(cfg), "--experts", "2", "--out", str(tmp_path / "flag")]) == 0
    state = load_checkpoint(tmp_path / "flag" / "checkpoint.hmoe")
    assert state.model.cfg.n_experts == 2  # flag wins
    assert state.step == 2 and not state.model.cfg.heterogeneous and state.config.strategy == "full"
    assert not (tmp_path / "from_file").exists()


def test_near_far_and_radius_flags(tmp_path, capsys):
    out = tmp_path / "nf"
    args = ["train", "--scene", SCENE, "--cache", str(CACHE), "--steps", "1", "--experts", "2", "--batch", "8",
            "--out", str(out), "--near", "0.05", "--bg-far", "40", "--scene-radius", "5.0"]
    assert main(args) == 0
    state = load_checkpoint(out / "checkpoint.hmoe")
    assert state.config.sampling.near == 0.05 and state.config.sampling.bg_far == 40.0
    assert state.meta["scene_bound"]["radius"] == 5.0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "checkpoint.hmoe"), "--cache", str(CACHE), "--limit", "1"]) == 0
    assert json.loads(capsys.readouterr().out)["max_conservation_error"] < 1e-6
    # a radius that leaves cameras outside the foreground is a data error
    assert main(args[:-1] + ["0.5"]) == EXIT_DATA


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("expertz = 3\n")
    with pytest.raises(ConfigError, match="unknown key"):
        read_config(bad)
    bad.write_text("experts = many\n")
    with pytest.raises(ConfigError, match="bad value"):
        read_config(bad)
    bad.write_text("experts 3\n")
    with pytest.raises(ConfigError):
        read_config(bad)
    bad.write_text("heterogeneous = maybe\n")
    with pytest.raises(ConfigError):
        read_config(bad)
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG
    assert main(["train", "--scene", SCENE, "--cache", str(CACHE), "--preset", "full", "--experts", "0",
                 "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert set(TRAIN_KEYS) >= {"scene", "experts", "topk", "capacity", "dispatch", "heterogeneous", "steps", "seed",
                               "out"}


def test_data_error_exit_code(tmp_path, capsys):
    assert main(["train", "--scene", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert "does not exist" in capsys.readouterr().err


def test_divergence_exit_code(tmp_path, monkeypatch):
    def boom(state, *a, **k):
        raise DivergenceError("non-finite loss (nan)", step=state.step, details={"loss": float("nan")})

    monkeypatch.setattr(trainer_mod, "train_step", boom)
    code = main(["train", "--scene", SCENE, "--cache", str(CACHE), "--steps", "2", "--experts", "2",
                 "--batch", "8", "--out", str(tmp_path / "d")])
    assert code == EXIT_DIVERGENCE
    assert (tmp_path / "d" / "divergence_step0.npz").exists()


def test_render_eval_export(trained, tmp_path, capsys):
    ckpt = str(trained / "checkpoint.hmoe")
    assert main(["render", "--checkpoint", ckpt, "--camera-index", "1", "--out", str(tmp_path / "r"),
                 "--format", "raw", "--cache", str(CACHE)]) == 0
    img = read_raw(tmp_path / "r" / "view_0001.raw")
    assert img.shape == (16, 16, 3) and np.all((img >= 0) & (img <= 1))
    assert main(["render", "--checkpoint", ckpt, "--orbit", "2", "--out", str(tmp_path / "o"),
                 "--cache", str(CACHE)]) == 0
    assert sorted(p.name for p in (tmp_path / "o").iterdir()) == ["orbit_000.png", "orbit_001.png"]
    assert main(["render", "--checkpoint", ckpt, "--camera-index", "9", "--cache", str(CACHE),
                 "--out", str(tmp_path / "r")]) == EXIT_DATA
    capsys.readouterr()
    assert main(["eval", "--checkpoint", ckpt, "--out", str(tmp_path / "e.json"), "--cache", str(CACHE)]) == 0
    report = json.loads((tmp_path / "e.json").read_text())
    assert len(report["images"]) == 1 and report["max_conservation_error"] < 1e-6
    assert main(["export-decomposition", "--checkpoint", ckpt, "--out", str(tmp_path / "d.ply"), "--min-alpha", "0",
                 "--cache", str(CACHE)]) == 0
    assert (tmp_path / "d.ply").read_bytes().startswith(b"ply\n")


def test_gen_synthetic(tmp_path):
    from hashmoe.scene import load_dataset

    assert main(["gen-synthetic", "--views", "3", "--resolution", "8", "--layout", "sphere",
                 "--out", str(tmp_path / "s")]) == 0
    ds = load_dataset(tmp_path / "s")
    assert len(ds.cameras) == 3 and ds.cameras[0].width == 8


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "hashmoe", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("train", "render", "eval", "export-decomposition", "gen-synthetic"):
        assert cmd in res.stdout
    res = subprocess.run([sys.executable, "-m", "hashmoe", "train", "--topk", "3"], capture_output=True, text=True)
    assert res.returncode == 2
