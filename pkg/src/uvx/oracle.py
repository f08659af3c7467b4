"""Analytic test scenes with a renderer-independent forward ray tracer.

The oracle renders posed images of sphere/box scenes by sphere tracing the
exact SDF and shading hits with direct lighting - deliberately sharing
nothing with the engine's volume-rendering path except the BRDF formula and
the hemisphere quadrature rule (shared so that material recovery is
well-posed). Light evaluation here has its own small implementations of the
spherical-Gaussian sum and the equirect lookup.

make_oracle writes a complete NeRF-style dataset: train/val images and
manifests, per-view ground-truth maps (albedo, roughness, normal, depth,
mask), a relighting environment map file and the relit reference images.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .config import ValidationError
from .dataset import save_envmap, save_image, save_raw
from .render import Camera, fibonacci_hemisphere
from .shading import brdf

TRACE_STEPS = 128
TRACE_TOL = 1e-5
TRACE_TMAX = 12.0


def default_scene_spec() -> dict:
    return {
        "name": "sphere_box",
        "resolution": 128,
        "n_train": 50,
        "n_val": 10,
        "camera_radius": 3.0,
        "fov_deg": 42.0,
        "bounds": 1.0,
        "seed": 0,
        "quadrature": 512,
        "visibility_in_dataset": False,
        "visibility_in_relight": True,
        "varying": False,
        "primitives": [
            {"kind": "sphere", "center": [-0.34, 0.0, 0.02], "radius": 0.3,
             "albedo": [0.80, 0.32, 0.24], "roughness": 0.6},
            {"kind": "box", "center": [0.34, 0.02, -0.04], "half": [0.25, 0.25, 0.25],
             "albedo": [0.24, 0.48, 0.80], "roughness": 0.6},
        ],
        "lights": [
            {"amplitude": [2.1, 2.05, 1.95], "sharpness": 5.0, "axis": [0.45, 0.3, 0.85]},
            {"amplitude": [0.55, 0.55, 0.62], "sharpness": 1.2, "axis": [-0.55, -0.4, -0.3]},
            {"amplitude": [0.38, 0.38, 0.38], "sharpness": 0.01, "axis": [0.0, 0.0, 1.0]},
        ],
        "relight_lights": [
            {"amplitude": [2.7, 2.2, 1.5], "sharpness": 7.0, "axis": [-0.8, 0.2, 0.56]},
            {"amplitude": [0.25, 0.32, 0.55], "sharpness": 1.0, "axis": [0.4, -0.3, 0.86]},
            {"amplitude": [0.30, 0.30, 0.30], "sharpness": 0.01, "axis": [0.0, 0.0, 1.0]},
        ],
    }


def sg_radiance(lights, dirs):
    """Sum of global SG lobes at unit directions (oracle-side evaluation)."""
    out = np.zeros(dirs.shape[:-1] + (3,), dtype=np.float64)
    for lob in lights:
        a = np.asarray(lob["amplitude"], dtype=np.float64)
        lam = float(lob["sharpness"])
        mu = np.asarray(lob["axis"], dtype=np.float64)
        mu = mu / np.linalg.norm(mu)
        cos = dirs @ mu
        out += a * np.exp(lam * (cos - 1.0))[..., None]
    return out


def envmap_radiance(envmap, dirs):
    """Nearest-texel equirect lookup (independent of the engine's bilinear)."""
    H, W, _ = envmap.shape
    theta = np.arccos(np.clip(dirs[..., 2], -1.0, 1.0))
    phi = np.arctan2(dirs[..., 1], dirs[..., 0])
    i = np.clip((theta / np.pi * H).astype(int), 0, H - 1)
    j = ((phi / (2 * np.pi) + 0.5) * W).astype(int) % W
    return envmap[i, j]


def render_envmap_from_lights(lights, height=128, width=256):
    ii, jj = np.mgrid[0:height, 0:width]
    theta = (ii + 0.5) / height * np.pi
    phi = ((jj + 0.5) / width - 0.5) * 2 * np.pi
    dirs = np.stack([np.sin(theta) * np.cos(phi),
                     np.sin(theta) * np.sin(phi),
                     np.cos(theta)], axis=-1)
    return sg_radiance(lights, dirs)


class OracleScene:
    def __init__(self, spec: dict):
        self.spec = spec
        self.prims = spec["primitives"]
        for p in self.prims:
            if p["kind"] not in ("sphere", "box"):
                raise ValidationError(f"unknown primitive kind {p['kind']!r}")

    def prim_sdf(self, p, x):
        c = np.asarray(p["center"])
        if p["kind"] == "sphere":
            return np.linalg.norm(x - c, axis=-1) - p["radius"]
        q = np.abs(x - c) - np.asarray(p["half"])
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def sdf(self, x):
        vals = np.stack([self.prim_sdf(p, x) for p in self.prims], axis=-1)
        return vals.min(axis=-1), vals.argmin(axis=-1)

    def normal(self, x, h=1e-5):
        n = np.empty_like(x)
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            n[..., a] = self.sdf(x + e)[0] - self.sdf(x - e)[0]
        return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)

    def trace(self, o, d, tmax=TRACE_TMAX):
        """Sphere tracing; returns (hit mask, t, hit points)."""
        t = np.zeros(o.shape[0])
        alive = np.ones(o.shape[0], dtype=bool)
        for _ in range(TRACE_STEPS):
            if not alive.any():
                break
            x = o[alive] + t[alive, None] * d[alive]
            s, _ = self.sdf(x)
            t[alive] = t[alive] + s
            still = (np.abs(s) > TRACE_TOL) & (t[alive] < tmax)
            idx = np.flatnonzero(alive)
            alive[idx[~still]] = False
        hit = t < tmax
        x = o + t[:, None] * d
        s, _ = self.sdf(x)
        hit &= np.abs(s) < 1e-3
        return hit, t, x

    def shadow(self, x, dirs, offset=2e-3):
        """Hard visibility by sphere tracing one secondary ray per direction."""
        Q, N, _ = dirs.shape
        o2 = np.repeat(x, N, axis=0) + dirs.reshape(-1, 3) * offset
        hit, _, _ = self.trace(o2, dirs.reshape(-1, 3), tmax=4.0)
        return (~hit).astype(np.float64).reshape(Q, N)

    def materials_at(self, x):
        _, pid = self.sdf(x)
        albedo = np.asarray([p["albedo"] for p in self.prims])[pid]
        rough = np.asarray([[p["roughness"]] for p in self.prims])[pid]
        return albedo, rough

    def shade(self, x, n, wo, radiance_fn, n_quad, visibility):
        """Direct lighting integral at exact surface points."""
        kappa, zeta = self.materials_at(x)
        dirs = fibonacci_hemisphere(n, n_quad)
        light = radiance_fn(dirs)
        if visibility:
            light = light * self.shadow(x, dirs)[..., None]
        fr = brdf(kappa[:, None, :], zeta[:, None, :], n[:, None, :],
                  dirs, wo[:, None, :],
                  f0=self.spec.get("specular_f0", 0.04)).data
        cos = np.maximum((dirs * n[:, None, :]).sum(-1, keepdims=True), 0.0)
        return (light * fr * cos).sum(axis=1) * (2.0 * np.pi / n_quad)

    def render_view(self, camera: Camera, radiance_fn=None, n_quad=None,
                    visibility=None, background=1.0):
        spec = self.spec
        n_quad = n_quad or spec["quadrature"]
        if radiance_fn is None:
            radiance_fn = lambda d: sg_radiance(spec["lights"], d)
        if visibility is None:
            visibility = spec["visibility_in_dataset"]
        o, d = camera.all_rays()
        hit, t, x = self.trace(o, d)
        H, W = camera.height, camera.width

        img = np.full((o.shape[0], 3), background)
        albedo = np.zeros((o.shape[0], 3))
        rough = np.zeros((o.shape[0], 1))
        nmap = np.zeros((o.shape[0], 3))
        depth = np.zeros((o.shape[0], 1))
        if hit.any():
            xh = x[hit]
            nh = self.normal(xh)
            img[hit] = self.shade(xh, nh, -d[hit], radiance_fn, n_quad, visibility)
            albedo[hit], rough[hit] = self.materials_at(xh)
            nmap[hit] = nh
            depth[hit, 0] = t[hit]
        reshape = lambda a: a.reshape(H, W, -1)
        return {
            "image": reshape(img), "albedo": reshape(albedo),
            "roughness": reshape(rough), "normal": reshape(nmap),
            "depth": reshape(depth), "mask": reshape(hit.astype(np.float64)),
        }


def camera_ring(n, radius, fov_deg, resolution, seed=0, start=0):
    """Deterministic all-around camera rig (golden-angle azimuths)."""
    cams = []
    for i in range(n):
        k = start + i
        az = k * np.pi * (3.0 - np.sqrt(5.0))
        el = np.arcsin(-0.25 + 0.9 * ((k * 7919) % 97) / 96.0)
        eye = radius * np.array([np.cos(el) * np.cos(az),
                                 np.cos(el) * np.sin(az),
                                 np.sin(el)])
        z = eye / np.linalg.norm(eye)             # camera looks along -z
        up = np.array([0.0, 0.0, 1.0])
        xaxis = np.cross(up, z)
        xaxis /= np.linalg.norm(xaxis)
        yaxis = np.cross(z, xaxis)
        c2w = np.eye(4)
        c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = xaxis, yaxis, z, eye
        cams.append(Camera.from_fov(resolution, resolution,
                                    np.radians(fov_deg), c2w))
    return cams


def make_oracle(spec: dict, out_dir: str, verbose=True):
    """Generate a full dataset plus ground truth from a scene spec."""
    scene = OracleScene(spec)
    res = spec["resolution"]
    os.makedirs(out_dir, exist_ok=True)
    gt_dir = os.path.join(out_dir, "gt")
    relight_dir = os.path.join(out_dir, "gt_relight")
    for d in (gt_dir, relight_dir, os.path.join(out_dir, "train"), os.path.join(out_dir, "val")):
        os.makedirs(d, exist_ok=True)

    light_sets = [spec["lights"]]
    if spec.get("varying"):
        light_sets.append(spec.get("lights_alt") or spec["relight_lights"])

    splits = {"train": spec["n_train"], "val": spec["n_val"]}
    start = 0
    for split, count in splits.items():
        cams = camera_ring(count, spec["camera_radius"], spec["fov_deg"], res,
                           spec["seed"], start=start)
        start += count
        frames = []
        for i, cam in enumerate(cams):
            name = f"{split}_{i:03d}"
            illum = i % len(light_sets)
            out = scene.render_view(
                cam, radiance_fn=lambda d, s=light_sets[illum]: sg_radiance(s, d))
            save_image(os.path.join(out_dir, split, name + ".png"),
                       np.clip(out["image"], 0.0, 1.0))
            save_raw(os.path.join(gt_dir, name + "_albedo.npy"), out["albedo"])
            save_raw(os.path.join(gt_dir, name + "_roughness.npy"), out["roughness"])
            save_raw(os.path.join(gt_dir, name + "_normal.npy"), out["normal"])
            save_raw(os.path.join(gt_dir, name + "_depth.npy"), out["depth"])
            save_image(os.path.join(gt_dir, name + "_mask.png"),
                       np.repeat(out["mask"], 3, axis=-1))
            frame = {"file_path": f"{split}/{name}",
                     "transform_matrix": cam.c2w.tolist()}
            if spec.get("varying"):
                frame["illumination"] = illum
            frames.append(frame)
            if verbose and (i + 1) % 10 == 0:
                print(f"  {split}: {i + 1}/{count} views", flush=True)
        manifest = {"camera_angle_x": float(np.radians(spec["fov_deg"])), "frames": frames}
        with open(os.path.join(out_dir, f"transforms_{split}.json"), "w") as f:
            json.dump(manifest, f, indent=1)

    # relighting reference under the second light set
    env = render_envmap_from_lights(spec["relight_lights"])
    save_envmap(os.path.join(out_dir, "envmap_relight.uvxe"), env)
    save_image(os.path.join(out_dir, "envmap_relight.png"), np.clip(env, 0.0, 1.0))
    cams = camera_ring(spec["n_val"], spec["camera_radius"], spec["fov_deg"], res,
                       spec["seed"], start=spec["n_train"])
    for i, cam in enumerate(cams):
        name = f"val_{i:03d}"
        out = scene.render_view(
            cam, radiance_fn=lambda d: sg_radiance(spec["relight_lights"], d),
            visibility=spec["visibility_in_relight"])
        save_image(os.path.join(relight_dir, name + ".png"),
                   np.clip(out["image"], 0.0, 1.0))
        save_image(os.path.join(relight_dir, name + "_mask.png"),
                   np.repeat(out["mask"], 3, axis=-1))

    with open(os.path.join(out_dir, "scene.json"), "w") as f:
        json.dump(spec, f, indent=1)
    return out_dir
