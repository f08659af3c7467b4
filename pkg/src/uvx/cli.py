"""Command-line interface.

    uvx train <config> [--key value ...]      optimize a scene
    uvx render <ckpt> [--views val] [--dump-aux] [--dump-raw]
    uvx relight <ckpt> --envmap <file>
    uvx materials <ckpt>                      albedo/roughness/normal maps
    uvx metrics <rendered> <reference>        PSNR/MSE table
    uvx make-oracle <spec.json|default>       generate a synthetic dataset
    uvx gradcheck                             finite-difference suites

Train-config keys can be overridden with flags named exactly like the keys
(`--batch 512`). Exit codes: 0 success, 2 validation error, 3 numerical
failure. UVX_THREADS caps the worker threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from . import dataset as dsio
from . import gradcheck, metrics, oracle
from .autodiff import NumericsError
from .config import ValidationError, load_config
from .dataset import load_dataset
from .shading import envmap_lookup
from .train import Trainer, load_run


def _overrides(pairs):
    if len(pairs) % 2:
        raise ValidationError(f"dangling override flag: {pairs[-1]!r}")
    out = {}
    for flag, value in zip(pairs[::2], pairs[1::2]):
        if not flag.startswith("--"):
            raise ValidationError(f"expected --key value pairs, got {flag!r}")
        out[flag[2:].replace("-", "_")] = value
    return out


def cmd_train(args):
    cfg = load_config(args.config, _overrides(args.overrides))
    ds = load_dataset(cfg.dataset, background=cfg.background_value)
    trainer = Trainer(cfg, ds)
    if args.resume:
        meta = trainer.load(args.resume)
        print(f"resumed from {args.resume} at step {meta['step']} ({meta['stage']})")
    final = trainer.run()
    print(f"final checkpoint: {final}")
    return 0


def _render_views(pipe, cfg, views, out_dir, dump_aux=False, dump_raw=False,
                  relight=None, chunk=4096, branch="pbr"):
    os.makedirs(out_dir, exist_ok=True)
    for view in views:
        vid = view.illumination if pipe.view_embed is not None else -1
        maps = pipe.render_image(view.camera, view_id=-1 if relight else vid,
                                 chunk=chunk, relight=relight)
        stem = os.path.join(out_dir, view.name)
        img = np.clip(maps.get(branch, maps["rad"]), 0.0, 1.0)
        dsio.save_image(stem + ".png", img)
        if dump_raw:
            dsio.save_raw(stem + ".npy", img)
        dsio.save_raw(stem + "_weight.npy", maps["weight"])
        if dump_aux:
            dsio.save_image(stem + "_rad.png", np.clip(maps["rad"], 0.0, 1.0))
            for key in ("albedo", "roughness", "normal", "depth"):
                if key in maps:
                    dsio.save_raw(f"{stem}_{key}.npy", maps[key])
            if "normal" in maps:
                dsio.save_image(stem + "_normal.png", (maps["normal"] + 1.0) / 2.0)
            if "albedo" in maps:
                dsio.save_image(stem + "_albedo.png", np.clip(maps["albedo"], 0.0, 1.0))
        print(f"rendered {view.name}", flush=True)


def cmd_render(args):
    cfg, pipe, meta = load_run(args.ckpt)
    ds = load_dataset(args.dataset or cfg.dataset, background=cfg.background_value)
    out = args.out or os.path.join(os.path.dirname(args.ckpt) or ".", f"render_{args.views}")
    _render_views(pipe, cfg, ds.views(args.views), out,
                  dump_aux=args.dump_aux, dump_raw=args.dump_raw, chunk=args.chunk)
    print(f"wrote {out}")
    return 0


def cmd_relight(args):
    cfg, pipe, meta = load_run(args.ckpt)
    if not os.path.exists(args.envmap):
        raise ValidationError(f"missing environment map {args.envmap}")
    env = dsio.load_envmap(args.envmap).astype(pipe.dtype)
    env_fn = lambda dirs: envmap_lookup(env, dirs)
    ds = load_dataset(args.dataset or cfg.dataset, background=cfg.background_value)
    out = args.out or os.path.join(os.path.dirname(args.ckpt) or ".", "relight")
    _render_views(pipe, cfg, ds.views(args.views), out, chunk=args.chunk,
                  relight=(env_fn, cfg.relight_roughness_power))
    print(f"wrote {out}")
    return 0


def cmd_materials(args):
    cfg, pipe, meta = load_run(args.ckpt)
    ds = load_dataset(args.dataset or cfg.dataset, background=cfg.background_value)
    out = args.out or os.path.join(os.path.dirname(args.ckpt) or ".", "materials")
    _render_views(pipe, cfg, ds.views(args.views), out, dump_aux=True, chunk=args.chunk)
    print(f"wrote {out}")
    return 0


def cmd_metrics(args):
    rows = metrics.compare_dirs(args.rendered, args.reference)
    summary = metrics.summarize(rows)
    print(metrics.format_table(rows, summary))
    if args.json:
        with open(args.json, "w") as f:
            json.dump({"rows": rows, "summary": summary}, f, indent=1)
    return 0


def cmd_make_oracle(args):
    if args.spec == "default":
        spec = oracle.default_scene_spec()
    else:
        with open(args.spec) as f:
            spec = json.load(f)
    out = args.out or spec.get("name", "oracle_scene")
    oracle.make_oracle(spec, out)
    print(f"wrote {out}")
    return 0


def cmd_gradcheck(args):
    ad.set_nan_mode("raise")
    try:
        ok, report = gradcheck.run_op_suite(seed=args.seed)
        for name, err, passed in report:
            print(f"{name:24s} max rel err {err:10.3e}  {'ok' if passed else 'FAIL'}")
        ok2, worst, checked = gradcheck.run_end_to_end(seed=args.seed)
        print(f"{'end-to-end chain':24s} max rel err {worst:10.3e}  "
              f"{'ok' if ok2 else 'FAIL'} ({len(checked)} entries)")
    finally:
        ad.set_nan_mode("propagate")
    if not (ok and ok2):
        raise NumericsError("gradient check failed")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="uvx", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="optimize a scene from a config file")
    t.add_argument("config")
    t.add_argument("--resume", default=None)
    t.set_defaults(fn=cmd_train)

    def add_render_args(sp):
        sp.add_argument("ckpt")
        sp.add_argument("--views", default="val", choices=["train", "val"])
        sp.add_argument("--out", default=None)
        sp.add_argument("--dataset", default=None)
        sp.add_argument("--chunk", type=int, default=4096)

    r = sub.add_parser("render", help="render checkpoint views")
    add_render_args(r)
    r.add_argument("--dump-aux", action="store_true")
    r.add_argument("--dump-raw", action="store_true")
    r.set_defaults(fn=cmd_render)

    rl = sub.add_parser("relight", help="re-render under a new environment map")
    add_render_args(rl)
    rl.add_argument("--envmap", required=True)
    rl.set_defaults(fn=cmd_relight)

    m = sub.add_parser("materials", help="dump albedo/roughness/normal maps")
    add_render_args(m)
    m.set_defaults(fn=cmd_materials)

    me = sub.add_parser("metrics", help="PSNR/MSE between two image directories")
    me.add_argument("rendered")
    me.add_argument("reference")
    me.add_argument("--json", default=None)
    me.set_defaults(fn=cmd_metrics)

    mo = sub.add_parser("make-oracle", help="generate a synthetic scene dataset")
    mo.add_argument("spec", help="scene spec JSON path, or 'default'")
    mo.add_argument("--out", default=None)
    mo.set_defaults(fn=cmd_make_oracle)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    args.overrides = extra
    try:
        if extra and args.cmd != "train":
            raise ValidationError(f"unexpected arguments: {extra}")
        return args.fn(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericsError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
