"""End-to-end command-line flows on a miniature scene."""

import json
import os

import numpy as np
import pytest

from uvx.cli import main
from uvx.oracle import default_scene_spec


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("cli") / "scene")
    spec = default_scene_spec()
    spec.update(resolution=24, n_train=3, n_val=2, quadrature=32)
    spec_path = root + "_spec.json"
    with open(spec_path, "w") as f:
        json.dump(spec, f)
    assert main(["make-oracle", spec_path, "--out", root]) == 0
    return root


@pytest.fixture(scope="module")
def run_dir(scene_dir, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run"))
    cfg_path = os.path.join(out, "config.txt")
    with open(cfg_path, "w") as f:
        f.write(f"""# tiny smoke config
dataset = {scene_dir}
out_dir = {out}
coarse_res = 12
fine_res = 16
coarse_iters = 3
fine_iters = 3
batch = 64
sem_channels = 4
mlp_hidden = 8
mlp_depth = 1
k_lobes = 3
n_quad = 16
checkpoint_every = 1000
log_every = 1000
""")
    assert main(["train", cfg_path, "--seed", "1"]) == 0
    return out


def test_train_produces_checkpoints_and_log(run_dir):
    assert os.path.exists(os.path.join(run_dir, "ckpt_final.uvx"))
    assert os.path.exists(os.path.join(run_dir, "ckpt_coarse_done.uvx"))
    assert os.path.exists(os.path.join(run_dir, "train_log.jsonl"))


def test_render_with_aux_dumps(run_dir):
    ckpt = os.path.join(run_dir, "ckpt_final.uvx")
    out = os.path.join(run_dir, "render_val")
    assert main(["render", ckpt, "--views", "val", "--out", out,
                 "--dump-aux", "--dump-raw", "--chunk", "512"]) == 0
    for suffix in (".png", ".npy", "_weight.npy", "_albedo.npy", "_normal.npy",
                   "_roughness.npy", "_depth.npy", "_rad.png", "_normal.png"):
        assert os.path.exists(os.path.join(out, "val_000" + suffix)), suffix
    n = np.load(os.path.join(out, "val_000_normal.npy"))
    assert n.shape[-1] == 3


def test_relight_command(run_dir, scene_dir):
    ckpt = os.path.join(run_dir, "ckpt_final.uvx")
    out = os.path.join(run_dir, "relight")
    env = os.path.join(scene_dir, "envmap_relight.uvxe")
    assert main(["relight", ckpt, "--envmap", env, "--views", "val",
                 "--out", out, "--chunk", "512"]) == 0
    assert os.path.exists(os.path.join(out, "val_000.png"))


def test_relight_missing_envmap_is_validation_error(run_dir):
    ckpt = os.path.join(run_dir, "ckpt_final.uvx")
    assert main(["relight", ckpt, "--envmap", "/nonexistent.uvxe"]) == 2


def test_materials_command(run_dir):
    ckpt = os.path.join(run_dir, "ckpt_final.uvx")
    out = os.path.join(run_dir, "materials")
    assert main(["materials", ckpt, "--views", "val", "--out", out,
                 "--chunk", "512"]) == 0
    assert os.path.exists(os.path.join(out, "val_000_albedo.npy"))


def test_metrics_command(run_dir, scene_dir, capsys):
    out = os.path.join(run_dir, "render_val")
    ref = os.path.join(scene_dir, "val")
    json_path = os.path.join(run_dir, "metrics.json")
    assert main(["metrics", out, ref, "--json", json_path]) == 0
    table = capsys.readouterr().out
    assert "psnr" in table and "mean" in table
    with open(json_path) as f:
        data = json.load(f)
    assert data["summary"]["count"] >= 2


def test_bad_config_key_is_validation_error(run_dir, scene_dir, tmp_path):
    cfg = tmp_path / "bad.txt"
    cfg.write_text(f"dataset = {scene_dir}\nnot_a_key = 3\n")
    assert main(["train", str(cfg)]) == 2


def test_bad_override_flag_is_validation_error(run_dir, scene_dir, tmp_path):
    cfg = tmp_path / "ok.txt"
    cfg.write_text(f"dataset = {scene_dir}\n")
    assert main(["train", str(cfg), "--no-such-key", "1"]) == 2


def test_metrics_mismatched_dirs_is_validation_error(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(); b.mkdir()
    assert main(["metrics", str(a), str(b)]) == 2


def test_config_fully_determines_run(scene_dir, tmp_path):
    """Same config + seed twice -> identical metric tables."""
    from uvx import metrics as M

    def run(tag):
        out = str(tmp_path / tag)
        cfg = str(tmp_path / f"{tag}.txt")
        with open(cfg, "w") as f:
            f.write(f"dataset = {scene_dir}\nout_dir = {out}\n"
                    "coarse_res = 12\nfine_res = 16\ncoarse_iters = 2\n"
                    "fine_iters = 2\nbatch = 48\nsem_channels = 4\n"
                    "mlp_hidden = 8\nmlp_depth = 1\nk_lobes = 3\nn_quad = 16\n"
                    "checkpoint_every = 1000\nlog_every = 1000\nseed = 7\n")
        assert main(["train", cfg]) == 0
        rend = os.path.join(out, "r")
        assert main(["render", os.path.join(out, "ckpt_final.uvx"),
                     "--views", "val", "--out", rend, "--chunk", "512",
                     "--dump-raw"]) == 0
        rows = M.compare_dirs(rend, os.path.join(scene_dir, "val"))
        return json.dumps(rows)

    assert run("x") == run("y")
