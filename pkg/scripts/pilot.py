"""Pilot convergence run at reduced iteration counts (dev aid)."""
import json
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from uvx.config import TrainConfig
from uvx.dataset import load_dataset
from uvx.oracle import default_scene_spec, make_oracle
from uvx.train import Trainer, eval_split_psnr
from uvx import metrics

root = sys.argv[1] if len(sys.argv) > 1 else "/tmp/pilot"
coarse_iters = int(sys.argv[2]) if len(sys.argv) > 2 else 800
fine_iters = int(sys.argv[3]) if len(sys.argv) > 3 else 1200
scene = os.path.join(root, "scene")

if not os.path.exists(os.path.join(scene, "transforms_train.json")):
    t0 = time.time()
    make_oracle(default_scene_spec(), scene)
    print(f"oracle: {time.time()-t0:.0f}s")

ds = load_dataset(scene)
cfg = TrainConfig(dataset=scene, out_dir=os.path.join(root, "run"),
                  coarse_res=64, fine_res=96,
                  coarse_iters=coarse_iters, fine_iters=fine_iters,
                  batch=512, mlp_hidden=64, mlp_depth=2, n_quad=128,
                  seed=3, decode_topk=48, log_every=100)
tr = Trainer(cfg, ds)
t0 = time.time()
tr.run_stage("coarse", cfg.coarse_iters)
print(f"coarse done in {(time.time()-t0)/60:.1f} min")
rad_psnr, _ = eval_split_psnr(tr.pipe, ds.views("train")[:6], branch="rad", chunk=8192)
print(f"coarse radiance PSNR (6 train views): {rad_psnr:.2f}")

t0 = time.time()
tr.run_stage("fine", cfg.fine_iters)
print(f"fine done in {(time.time()-t0)/60:.1f} min; sharpness={float(tr.pipe.sharpness().data[0]):.1f}")

# evaluate on a few val views
vals = ds.views("val")[:4]
pb, rd, mae, alb = [], [], [], []
for v in vals:
    maps = tr.pipe.render_image(v.camera, chunk=8192)
    pb.append(metrics.psnr(metrics.mse(maps["pbr"], v.image)))
    rd.append(metrics.psnr(metrics.mse(maps["rad"], v.image)))
    gtn = np.load(os.path.join(scene, "gt", v.name + "_normal.npy"))
    gtm = np.load(os.path.join(scene, "gt", v.name + "_depth.npy"))[..., 0] > 0
    from uvx.dataset import load_values
    gtmask = load_values(os.path.join(scene, "gt", v.name + "_mask.png"))[..., 0] > 0.5
    mae.append(metrics.angular_error_deg(maps["normal"], gtn, gtmask))
    gta = np.load(os.path.join(scene, "gt", v.name + "_albedo.npy"))
    alb.append(metrics.pair_metrics(maps["albedo"], gta, gtmask, align=True)["psnr"])
print(f"val PBR PSNR: {np.mean(pb):.2f}  rad PSNR: {np.mean(rd):.2f}  "
      f"normal MAE: {np.mean(mae):.2f} deg  albedo PSNR(aligned): {np.mean(alb):.2f}")
print(json.dumps({"pbr": np.mean(pb), "rad": np.mean(rd),
                  "mae": np.mean(mae), "albedo": np.mean(alb)}))
