"""Trainer behaviour: checkpoint fidelity, parameter-group routing, the
view embedding, reproducibility and the worker-shard reduction."""

import json
import os

import numpy as np
import pytest

from uvx.config import TrainConfig
from uvx.dataset import Dataset, View, load_dataset
from uvx.oracle import default_scene_spec, make_oracle
from uvx.render import Camera, ScenePipeline
from uvx.train import Trainer, load_run, make_optimizer, stage_lrs


@pytest.fixture(scope="module")
def tiny_scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    spec = default_scene_spec()
    spec.update(resolution=24, n_train=3, n_val=2, quadrature=32)
    make_oracle(spec, str(root), verbose=False)
    return str(root)


def tiny_cfg(tiny_scene, tmp_path, **kw):
    base = dict(dataset=tiny_scene, out_dir=str(tmp_path / "run"),
                coarse_res=12, fine_res=16, coarse_iters=4, fine_iters=4,
                batch=64, sem_channels=4, mlp_hidden=8, mlp_depth=1,
                k_lobes=3, n_quad=16, seed=0, checkpoint_every=1000,
                log_every=1000)
    base.update(kw)
    return TrainConfig(**base)


def test_default_config_matches_published_schedule():
    cfg = TrainConfig()
    assert cfg.coarse_res == 96 and cfg.fine_res == 160
    assert cfg.coarse_iters == 10000 and cfg.fine_iters == 10000
    assert cfg.batch == 8192
    assert cfg.k_lobes == 16 and cfg.n_quad == 128
    assert cfg.sem_channels == 6 and cfg.mlp_hidden == 192 and cfg.mlp_depth == 3
    assert cfg.view_embed_dim == 6
    assert cfg.lr_mlp == 1e-3 and cfg.lr_grid == 0.1 and cfg.lr_sdf_fine == 0.005
    assert cfg.lr_hash == 0.01 and cfg.weight_decay_hash == 0.01
    assert cfg.hash_levels == 16 and cfg.hash_coarsest == 32
    assert cfg.hash_finest == 2048 and cfg.hash_table_log2 == 19


def test_sdf_learning_rate_drops_in_fine_stage():
    cfg = TrainConfig()
    assert stage_lrs(cfg, "coarse")["grid_sdf"] == 0.1
    assert stage_lrs(cfg, "fine")["grid_sdf"] == 0.005


def test_stage_transition_upscales_grids(tiny_scene, tmp_path):
    cfg = tiny_cfg(tiny_scene, tmp_path)
    tr = Trainer(cfg, load_dataset(tiny_scene))
    assert tr.pipe.sdf_grid.res == (12, 12, 12)
    tr.step("coarse")
    tr.run_stage("fine", 1)
    assert tr.pipe.sdf_grid.res == (16, 16, 16)
    assert tr.pipe.sem_grid.res == (16, 16, 16)


def test_coarse_stage_never_touches_material_params(tiny_scene, tmp_path):
    cfg = tiny_cfg(tiny_scene, tmp_path)
    tr = Trainer(cfg, load_dataset(tiny_scene))
    mats = {p.name: p.data.copy() for p in tr.pipe.param_groups()["decoders_mat"]}
    geo_before = tr.pipe.radiance_mlp.weights[0].data.copy()
    for _ in range(3):
        tr.step("coarse")
    for p in tr.pipe.param_groups()["decoders_mat"]:
        assert np.array_equal(p.data, mats[p.name]), p.name
    assert not np.array_equal(tr.pipe.radiance_mlp.weights[0].data, geo_before)


def test_checkpoint_round_trip_identical_next_loss(tiny_scene, tmp_path):
    cfg = tiny_cfg(tiny_scene, tmp_path)
    ds = load_dataset(tiny_scene)
    tr = Trainer(cfg, ds)
    for _ in range(2):
        tr.step("coarse")
    path = str(tmp_path / "ck.uvx")
    tr.save(path, "coarse")
    next_a = tr.step("coarse")["total"]

    cfg2 = tiny_cfg(tiny_scene, tmp_path, out_dir=str(tmp_path / "run2"))
    tr2 = Trainer(cfg2, ds)
    tr2.load(path)
    next_b = tr2.step("coarse")["total"]
    assert next_a == next_b


def test_checkpoint_alone_rebuilds_renderer(tiny_scene, tmp_path):
    cfg = tiny_cfg(tiny_scene, tmp_path)
    ds = load_dataset(tiny_scene)
    tr = Trainer(cfg, ds)
    tr.step("coarse")
    tr.run_stage("fine", 2)
    path = os.path.join(tr.out_dir, "ckpt_fine_done.uvx")
    cam = ds.views("val")[0].camera
    want = tr.pipe.render_image(cam, chunk=512)["pbr"]

    cfg2, pipe2, meta = load_run(path)
    got = pipe2.render_image(cam, chunk=512)["pbr"]
    assert np.array_equal(want, got)


def test_seed_reproducibility(tiny_scene, tmp_path):
    ds = load_dataset(tiny_scene)

    def run(out):
        cfg = tiny_cfg(tiny_scene, tmp_path, out_dir=str(tmp_path / out))
        tr = Trainer(cfg, ds)
        return [tr.step("coarse")["total"] for _ in range(3)]

    assert run("a") == run("b")


def test_worker_shards_bit_exact(tiny_scene, tmp_path, monkeypatch):
    ds = load_dataset(tiny_scene)

    def run(threads, out):
        if threads is None:
            monkeypatch.delenv("UVX_THREADS", raising=False)
        else:
            monkeypatch.setenv("UVX_THREADS", str(threads))
        cfg = tiny_cfg(tiny_scene, tmp_path, out_dir=str(tmp_path / out), n_shards=4)
        tr = Trainer(cfg, ds)
        losses = [tr.step("coarse")["total"] for _ in range(3)]
        params = {p.name: p.data.copy() for p in tr.pipe.parameters()}
        return losses, params

    l1, p1 = run(None, "w1")
    l2, p2 = run(4, "w4")
    assert l1 == l2
    for name in p1:
        assert np.array_equal(p1[name], p2[name]), name


def test_training_log_has_per_term_lines(tiny_scene, tmp_path):
    cfg = tiny_cfg(tiny_scene, tmp_path)
    tr = Trainer(cfg, load_dataset(tiny_scene))
    tr.run_stage("coarse", cfg.coarse_iters)
    with open(os.path.join(tr.out_dir, "train_log.jsonl")) as f:
        records = [json.loads(line) for line in f]
    steps = {r["step"] for r in records}
    assert steps == set(range(cfg.coarse_iters))
    for r in records:
        assert {"step", "term", "value", "wall"} <= set(r)
    terms_step0 = {r["term"] for r in records if r["step"] == 0}
    assert {"rad", "total", "sharpness"} <= terms_step0


def test_view_embedding_rows_and_mean_fallback(tiny_scene, tmp_path):
    cfg = tiny_cfg(tiny_scene, tmp_path, varying_illumination=True)
    ds = load_dataset(tiny_scene)
    tr = Trainer(cfg, ds)
    emb = tr.pipe.view_embed
    assert emb.data.shape == (ds.n_train, 6)      # C_v = 6
    rows = tr.pipe.view_rows(np.array([0, 1]))
    assert not np.allclose(rows.data[0], rows.data[1])
    mean_row = tr.pipe.view_rows(np.array([-1]))
    assert np.allclose(mean_row.data[0], emb.data.mean(axis=0), atol=1e-7)
    # the embedding trains in the fine stage
    tr.run_stage("fine", 3)
    assert not np.allclose(emb.data, tr.pipe.view_rows(np.array([-1])).data)


def test_disabled_flag_decodes_without_embedding(tiny_scene, tmp_path):
    cfg = tiny_cfg(tiny_scene, tmp_path, varying_illumination=False)
    tr = Trainer(cfg, load_dataset(tiny_scene))
    assert tr.pipe.view_embed is None
    assert tr.pipe.view_rows(np.array([0])) is None


def test_nan_loss_is_a_hard_error(tiny_scene, tmp_path):
    from uvx.autodiff import NumericsError
    cfg = tiny_cfg(tiny_scene, tmp_path)
    tr = Trainer(cfg, load_dataset(tiny_scene))
    tr.pipe.radiance_mlp.weights[0].data[:] = np.nan
    with pytest.raises(NumericsError):
        tr.step("coarse")
