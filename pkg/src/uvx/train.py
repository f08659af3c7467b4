"""Two-stage coarse-to-fine optimization.

The coarse stage optimizes only the radiance branch (plus the geometry
regularizers); the fine stage enables the physically based branch, the
light field and the material losses, after resampling the dense grids onto
the fine lattice.

Worker model: every step partitions the ray batch into a fixed number of
logical shards (config n_shards, independent of thread count). Each shard
records its own tape and produces a private gradient buffer; buffers are
reduced in shard order, so results are bit-identical for any UVX_THREADS
value. Per-shard randomness comes from counter-based generators keyed by
(seed, step, shard).
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import autodiff as ad
from . import checkpoint, losses, metrics
from .autodiff import NumericsError
from .config import TrainConfig, parse_config_text
from .optim import Adam
from .render import ScenePipeline, StepPlan


def worker_count(n_shards: int) -> int:
    env = os.environ.get("UVX_THREADS", "")
    if not env:
        return 1
    return max(1, min(int(env), n_shards))


def step_rng(seed: int, step: int, shard: int) -> np.random.Generator:
    # counter-based: deterministic per (seed, step, shard), thread-safe
    key = [np.uint64(seed), np.uint64(((step & 0xFFFFFFFFF) << 24) | (shard & 0xFFFFFF))]
    return np.random.Generator(np.random.Philox(key=key))


def stage_lrs(cfg: TrainConfig, stage: str) -> dict:
    if cfg.mode == "hash":
        return {"grid_hash": cfg.lr_hash, "decoders_geo": cfg.lr_hash,
                "decoders_mat": cfg.lr_hash, "sharpness": cfg.lr_sharpness}
    sdf_lr = cfg.lr_grid if stage == "coarse" else cfg.lr_sdf_fine
    return {"grid_sdf": sdf_lr, "grid_sem": cfg.lr_grid,
            "decoders_geo": cfg.lr_mlp, "decoders_mat": cfg.lr_mlp,
            "sharpness": cfg.lr_sharpness}


def make_optimizer(pipe: ScenePipeline, cfg: TrainConfig, stage: str) -> Adam:
    lrs = stage_lrs(cfg, stage)
    groups = {name: {"params": params, "lr": lrs[name]}
              for name, params in pipe.param_groups().items()}
    wd = cfg.weight_decay_hash if cfg.mode == "hash" else 0.0
    opt = Adam(groups, weight_decay=wd)
    opt.set_enabled(pipe.active_groups(stage))
    return opt


class _ReducedGrads:
    def __init__(self, acc):
        self.acc = acc

    def get(self, param):
        g = self.acc.get(param)
        return np.zeros_like(param.data) if g is None else g


class TrainLogger:
    """Line-delimited JSON: one record per loss term per step."""

    def __init__(self, path):
        self.f = open(path, "a", buffering=1)
        self.t0 = time.time()

    def log(self, step, values: dict):
        wall = time.time() - self.t0
        for term, value in values.items():
            self.f.write(json.dumps(
                {"step": step, "term": term, "value": float(value),
                 "wall": round(wall, 4)}) + "\n")

    def close(self):
        self.f.close()


class Trainer:
    def __init__(self, cfg: TrainConfig, dataset, out_dir=None):
        cfg.validate()
        self.cfg = cfg
        self.dataset = dataset
        self.out_dir = out_dir or cfg.out_dir
        os.makedirs(self.out_dir, exist_ok=True)
        views = dataset.views("train")
        self.pipe = ScenePipeline(cfg, n_views=len(views), stage="coarse")
        self.opt = make_optimizer(self.pipe, cfg, "coarse")
        self.logger = TrainLogger(os.path.join(self.out_dir, "train_log.jsonl"))
        self.global_step = 0
        self._fine_step = 0
        self._build_pixel_pool(views)

    def _build_pixel_pool(self, views):
        self.images = np.stack([v.image for v in views]).astype(np.float32)
        self.cameras = [v.camera for v in views]
        V, H, W, _ = self.images.shape
        self.pool_shape = (V, H, W)
        self.gt_flat = self.images.reshape(-1, 3)

    def _rays_for(self, flat_idx):
        V, H, W = self.pool_shape
        vid = flat_idx // (H * W)
        rem = flat_idx % (H * W)
        py, px = rem // W, rem % W
        o = np.empty((len(flat_idx), 3))
        d = np.empty((len(flat_idx), 3))
        for v in np.unique(vid):
            sel = vid == v
            o[sel], d[sel] = self.cameras[v].rays(px[sel], py[sel])
        return o, d, self.gt_flat[flat_idx], vid

    # -- one optimization step -------------------------------------------

    def step(self, stage: str) -> dict:
        cfg = self.cfg
        step_id = self.global_step
        weights = cfg.loss_weights()
        rng = step_rng(cfg.seed, step_id, 0xFFFF)
        idx = rng.integers(0, self.gt_flat.shape[0], size=cfg.batch)
        o, d, gt, vid = self._rays_for(idx)

        n_shards = min(cfg.n_shards, cfg.batch)
        edges = np.linspace(0, cfg.batch, n_shards + 1).astype(int)

        def run_shard(s):
            lo, hi = edges[s], edges[s + 1]
            tape = ad.Tape()
            plan = StepPlan(step_rng(cfg.seed, step_id, s))
            out = self.pipe.forward_rays(
                o[lo:hi], d[lo:hi], tape=tape, gt=gt[lo:hi], view_ids=vid[lo:hi],
                stage=stage, plan=plan, weights=weights)
            return tape, out

        threads = worker_count(n_shards)
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                shard_outs = list(ex.map(run_shard, range(n_shards)))
        else:
            shard_outs = [run_shard(s) for s in range(n_shards)]

        # global per-term counts, then one backward per shard
        counts = {}
        for _, out in shard_outs:
            for name, (_, c) in out.terms.items():
                counts[name] = counts.get(name, 0) + c

        term_values = {}
        for _, out in shard_outs:
            for name, (s_t, _) in out.terms.items():
                term_values[name] = term_values.get(name, 0.0) + float(s_t.data)
        for name in term_values:
            term_values[name] /= max(counts[name], 1)

        total_value = losses.total_value(term_values, weights)
        if not np.isfinite(total_value):
            raise NumericsError(
                f"non-finite loss at step {step_id}; last periodic checkpoint is the "
                f"most recent good state")

        def backward_shard(pair):
            tape, out = pair
            shard_total = None
            for name, (s_t, _) in out.terms.items():
                w = weights.get(name)
                if w == 0.0 or counts[name] == 0:
                    continue
                piece = ad.mul(s_t, w / counts[name])
                shard_total = piece if shard_total is None else ad.add(shard_total, piece)
            if shard_total is None:
                return None
            return tape.backward(shard_total)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                shard_grads = list(ex.map(backward_shard, shard_outs))
        else:
            shard_grads = [backward_shard(p) for p in shard_outs]

        acc = {}
        for grads in shard_grads:          # fixed shard order
            if grads is None:
                continue
            for param, g in grads.by_param.items():
                prev = acc.get(param)
                acc[param] = g if prev is None else prev + g

        skipped = self.opt.step(_ReducedGrads(acc))
        self._apply_sharpness_floor(stage)

        for _, out in shard_outs:
            for k, v in out.stats.items():
                self.pipe.stats[k] = self.pipe.stats.get(k, 0) + v

        log = dict(term_values)
        log["total"] = total_value
        log["sharpness"] = float(self.pipe.sharpness().data[0])
        if skipped:
            log["skipped_params"] = skipped
        self.logger.log(step_id, log)
        self.global_step += 1
        return log

    def _apply_sharpness_floor(self, stage):
        cfg = self.cfg
        floor = cfg.sharpness_floor
        if cfg.sharpness_anneal_to is not None:
            # reach the target by the end of the coarse stage, hold after
            total = max(cfg.coarse_iters - 1, 1)
            frac = min(self.global_step / total, 1.0)
            floor = floor * (cfg.sharpness_anneal_to / floor) ** frac
        p = self.pipe.sharpness_raw.data
        np.maximum(p, np.log(floor) / 10.0, out=p)

    # -- stages -------------------------------------------------------------

    def run_stage(self, stage: str, iters: int):
        if stage == "fine" and self.pipe.stage != "fine":
            self.pipe.to_fine()
            self.opt = make_optimizer(self.pipe, self.cfg, "fine")
        self.opt.set_enabled(self.pipe.active_groups(stage))
        t0 = time.time()
        for i in range(iters):
            if stage == "fine":
                self._fine_step += 1
            log = self.step(stage)
            if (i + 1) % self.cfg.log_every == 0 or i == 0:
                rate = (i + 1) / (time.time() - t0)
                print(f"[{stage}] step {i + 1}/{iters} total={log['total']:.5f} "
                      f"({rate:.1f} it/s)", flush=True)
            if (i + 1) % self.cfg.checkpoint_every == 0:
                self.save(os.path.join(self.out_dir, f"ckpt_{stage}_{i + 1:06d}.uvx"), stage)
        path = os.path.join(self.out_dir, f"ckpt_{stage}_done.uvx")
        self.save(path, stage)
        return path

    def run(self):
        self.run_stage("coarse", self.cfg.coarse_iters)
        self.run_stage("fine", self.cfg.fine_iters)
        final = os.path.join(self.out_dir, "ckpt_final.uvx")
        self.save(final, "fine")
        return final

    # -- checkpoints ----------------------------------------------------------

    def save(self, path, stage):
        blobs = dict(self.pipe.state_blobs())
        blobs.update(self.opt.state_blobs())
        meta = {
            "stage": stage, "step": self.global_step,
            "n_views": len(self.cameras), "config": self.cfg.to_text(),
            "stats": self.pipe.stats,
        }
        blobs["meta/json"] = json.dumps(meta).encode("utf-8")
        checkpoint.save_blobs(path, blobs)

    def load(self, path):
        blobs = checkpoint.load_blobs(path)
        meta = json.loads(blobs["meta/json"].decode("utf-8"))
        if meta["stage"] == "fine" and self.pipe.stage != "fine":
            self.pipe.to_fine()
            self.opt = make_optimizer(self.pipe, self.cfg, "fine")
        self.pipe.load_state_blobs(blobs)
        self.opt.load_state_blobs(blobs)
        self.opt.set_enabled(self.pipe.active_groups(meta["stage"]))
        self.global_step = meta["step"]
        return meta


def load_run(path):
    """Rebuild a pipeline (and its config) from a checkpoint file alone."""
    blobs = checkpoint.load_blobs(path)
    meta = json.loads(blobs["meta/json"].decode("utf-8"))
    cfg = parse_config_text(meta["config"]).validate()
    pipe = ScenePipeline(cfg, n_views=meta["n_views"], stage=meta["stage"])
    pipe.load_state_blobs(blobs)
    return cfg, pipe, meta


def eval_split_psnr(pipe, views, branch="pbr", limit=None, chunk=8192):
    """Mean PSNR of rendered views against their stored images."""
    views = views[:limit] if limit else views
    vals = []
    for view in views:
        maps = pipe.render_image(view.camera, chunk=chunk,
                                 want_materials=(branch == "pbr"))
        vals.append(metrics.psnr(metrics.mse(maps[branch], view.image)))
    return float(np.mean(vals)), vals
