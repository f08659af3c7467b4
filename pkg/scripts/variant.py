"""One pilot variant: override selected config keys, report metrics."""
import json, os, sys, time
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))
import numpy as np
from uvx.config import TrainConfig
from uvx.dataset import load_dataset, load_values
from uvx.train import Trainer, eval_split_psnr
from uvx import metrics

scene = sys.argv[1]
out = sys.argv[2]
overrides = json.loads(sys.argv[3]) if len(sys.argv) > 3 else {}

ds = load_dataset(scene)
kw = dict(dataset=scene, out_dir=out, coarse_res=64, fine_res=96,
          coarse_iters=600, fine_iters=900, batch=512, mlp_hidden=64,
          mlp_depth=2, n_quad=128, seed=3, decode_topk=48, log_every=200)
kw.update(overrides)
cfg = TrainConfig(**kw)
tr = Trainer(cfg, ds)
t0 = time.time()
tr.run_stage("coarse", cfg.coarse_iters)
print(f"coarse {(time.time()-t0)/60:.1f}min sharp={float(tr.pipe.sharpness().data[0]):.1f}")
rad_psnr, _ = eval_split_psnr(tr.pipe, ds.views("train")[:5], branch="rad", chunk=8192)
print(f"coarse rad PSNR: {rad_psnr:.2f}")
t0 = time.time()
tr.run_stage("fine", cfg.fine_iters)
print(f"fine {(time.time()-t0)/60:.1f}min sharp={float(tr.pipe.sharpness().data[0]):.1f}")
vals = ds.views("val")[:4]
pb, rd, mae, alb = [], [], [], []
for v in vals:
    maps = tr.pipe.render_image(v.camera, chunk=8192)
    pb.append(metrics.psnr(metrics.mse(maps["pbr"], v.image)))
    rd.append(metrics.psnr(metrics.mse(maps["rad"], v.image)))
    gtn = np.load(os.path.join(scene, "gt", v.name + "_normal.npy"))
    gm = load_values(os.path.join(scene, "gt", v.name + "_mask.png"))[..., 0] > 0.5
    mae.append(metrics.angular_error_deg(maps["normal"], gtn, gm))
    gta = np.load(os.path.join(scene, "gt", v.name + "_albedo.npy"))
    alb.append(metrics.pair_metrics(maps["albedo"], gta, gm, align=True)["psnr"])
print(f"RESULT pbr={np.mean(pb):.2f} rad={np.mean(rd):.2f} mae={np.mean(mae):.2f} alb={np.mean(alb):.2f}")
