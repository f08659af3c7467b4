"""Differentiable rendering of the voxel scene.

One training step marches camera rays against the SDF field, converts SDF
sample pairs into opacities, composites per-sample quantities with
transmittance weights, and shades each foreground ray by hemisphere
quadrature of the rendering equation at its composited aggregates
(albedo, roughness, normal, light-field parameters).

Sampling decisions that are not differentiated (depth jitter, the decode
subset, quadrature directions, smoothness offsets, the surface set) live in
a StepPlan: training rebuilds it every step from the current state, while
the finite-difference checks freeze one plan so both FD sides evaluate the
same computational graph.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import fields, losses, shading
from .autodiff import Tensor
from .config import TrainConfig, ValidationError
from .fields import DenseGrid, HashGrid, SceneBounds
from .optim import Parameter
from .shading import MLP, MaterialDecoder

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))
ALPHA_MAX = 1.0 - 1e-6   # keep transmittance factors strictly positive
SIGMA_EPS = 1e-12        # guards (sigma_i - sigma_j) / sigma_i deep inside


# ---------------------------------------------------------------------------
# cameras and rays

class Camera:
    """Pinhole camera, OpenGL/NeRF convention: looks along -z, y up."""

    def __init__(self, fx, fy, cx, cy, width, height, c2w, check=True):
        self.fx, self.fy, self.cx, self.cy = float(fx), float(fy), float(cx), float(cy)
        self.width, self.height = int(width), int(height)
        self.c2w = np.asarray(c2w, dtype=np.float64).reshape(4, 4)
        self.rot = self.c2w[:3, :3]
        self.origin = self.c2w[:3, 3]
        if check:
            err = np.linalg.norm(self.rot @ self.rot.T - np.eye(3))
            if not err <= 1e-4:    # rejects NaN poses too
                raise ValidationError(f"camera rotation not orthonormal (|RRt-I|={err:.2e})")

    @classmethod
    def from_fov(cls, width, height, camera_angle_x, c2w, check=True):
        fx = 0.5 * width / np.tan(0.5 * camera_angle_x)
        return cls(fx, fx, width / 2.0, height / 2.0, width, height, c2w, check)

    def rays(self, px, py):
        """Pixel coords (float, top-left origin) -> unit world rays (o, d)."""
        px = np.asarray(px, dtype=np.float64)
        py = np.asarray(py, dtype=np.float64)
        x = (px + 0.5 - self.cx) / self.fx
        y = -(py + 0.5 - self.cy) / self.fy
        z = -np.ones_like(x)
        d_cam = np.stack([x, y, z], axis=-1)
        d = d_cam @ self.rot.T
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(self.origin, d.shape).copy()
        return o, d

    def all_rays(self):
        py, px = np.mgrid[0:self.height, 0:self.width]
        return self.rays(px.reshape(-1), py.reshape(-1))

    def project(self, pts):
        """World points -> (px, py) pixel coords (NeRF convention)."""
        p_cam = (np.asarray(pts) - self.origin) @ self.rot
        z = -p_cam[..., 2]
        px = self.cx + self.fx * p_cam[..., 0] / z - 0.5
        py = self.cy - self.fy * p_cam[..., 1] / z - 0.5
        return px, py


def ray_aabb(o, d, lo, hi):
    """Entry/exit distances of rays against an AABB; miss -> tfar <= tnear."""
    safe_d = np.where(np.abs(d) < 1e-12, np.where(d < 0, -1e-12, 1e-12), d)
    t1 = (lo - o) / safe_d
    t2 = (hi - o) / safe_d
    tnear = np.maximum(np.minimum(t1, t2).max(axis=-1), 0.0)
    tfar = np.maximum(t1, t2).min(axis=-1)
    return tnear, tfar


def sample_depths(tnear, tfar, step, offsets):
    """Uniform depths t = tnear + (i + offset) * step while t < tfar.

    Returns (t (R, P), valid (R, P)) padded to the longest ray; padded
    entries repeat tnear so their positions stay inside the bounds.
    """
    span = np.maximum(tfar - tnear, 0.0)
    counts = np.maximum(np.ceil(span / step - offsets), 0.0).astype(np.int64)
    P = max(int(counts.max()), 2)
    i = np.arange(P)
    t = tnear[:, None] + (i[None, :] + offsets[:, None]) * step
    valid = i[None, :] < counts[:, None]
    t = np.where(valid, t, tnear[:, None])
    return t, valid


# ---------------------------------------------------------------------------
# quadrature

def hemisphere_basis(n):
    """Branchless orthonormal basis (t1, t2, n) for unit normals (..., 3)."""
    nx, ny, nz = n[..., 0], n[..., 1], n[..., 2]
    s = np.where(nz >= 0.0, 1.0, -1.0)
    a = -1.0 / (s + nz)
    b = nx * ny * a
    t1 = np.stack([1.0 + s * nx * nx * a, s * b, -s * nx], axis=-1)
    t2 = np.stack([b, s + ny * ny * a, -ny], axis=-1)
    return t1, t2


def fibonacci_hemisphere(n, count=128):
    """Equal-area Fibonacci directions on the hemisphere around each normal.

    n: (..., 3) unit normals. Returns (..., count, 3) unit directions with
    positive cosine against n; the quadrature weight per direction is
    2*pi/count. Deterministic for a fixed n.
    """
    n = np.asarray(n)
    i = np.arange(count)
    z = (i + 0.5) / count
    r = np.sqrt(1.0 - z * z)
    phi = i * GOLDEN_ANGLE
    canon = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
    t1, t2 = hemisphere_basis(n)
    dirs = (canon[..., 0:1] * t1[..., None, :]
            + canon[..., 1:2] * t2[..., None, :]
            + canon[..., 2:3] * n[..., None, :])
    return dirs


# ---------------------------------------------------------------------------
# opacity and compositing

def neus_alpha(s_i, s_next, sharpness):
    """Opacity of one ray section from its SDF endpoints (clamped at 0).

    alpha = max((sig(d*s_i) - sig(d*s_next)) / sig(d*s_i), 0); zero whenever
    the SDF is non-decreasing across the section.
    """
    si = ad.sigmoid(ad.mul(s_i, sharpness))
    sn = ad.sigmoid(ad.mul(s_next, sharpness))
    return ad.maximum_const(ad.div(ad.sub(si, sn), ad.add(si, SIGMA_EPS)), 0.0)


def transmittance(alpha: Tensor) -> Tensor:
    """T_i = prod_{j<i} (1 - alpha_j) along axis 1; T_0 = 1."""
    R = alpha.shape[0]
    ones = np.ones((R, 1), dtype=alpha.dtype)
    factors = ad.concat([Tensor(ones), ad.sub(1.0, alpha[:, :-1])], axis=1)
    return ad.cumprod(factors, axis=1)


def volume_render(alpha: Tensor, q: Tensor):
    """Composite per-sample quantities: sum_i T_i alpha_i q_i.

    alpha: (R, P); q: (R, P, C). Returns (composited (R, C), weight sum
    (R, 1)). Callers re-normalize composited normals / lobe axes.
    """
    T = transmittance(alpha)
    w = ad.mul(T, alpha)
    comp = ad.sum_(ad.mul(ad.reshape(w, w.shape + (1,)), q), axis=1)
    return comp, ad.sum_(w, axis=1, keepdims=True)


def visibility_from_alpha(alpha: np.ndarray) -> np.ndarray:
    """Light visibility 1 - sum_i alpha_i prod_{j<i}(1 - alpha_j), (Q, L) -> (Q,)."""
    T = np.cumprod(np.concatenate(
        [np.ones((alpha.shape[0], 1), dtype=alpha.dtype), 1.0 - alpha[:, :-1]], axis=1), axis=1)
    return 1.0 - (T * alpha).sum(axis=1)


def surface_points(o, d, t_sections, w, w_min=0.05):
    """Expected ray termination points for rays with enough opacity.

    Returns (kept ray indices, x_surf, depth). Rays with weight sum <= w_min
    are excluded from all surface-loss sets.
    """
    W = w.sum(axis=1)
    keep = np.flatnonzero(W > w_min)
    depth = (w[keep] * t_sections[keep]).sum(axis=1) / W[keep]
    x = o[keep] + depth[:, None] * d[keep]
    return keep, x, depth


def shade_pbr(kappa, zeta, n, wo, radiance_fn, dirs, f0=shading.F0_DIELECTRIC):
    """Quadrature of the rendering equation at per-ray aggregates.

    C = (2 pi / N) * sum_j L(omega_j) f_r(omega_j, wo) max(omega_j . n, 0)
    with L supplied by radiance_fn(dirs). kappa (R,3), zeta (R,1), n (R,3),
    wo (R,3) unit view direction (surface -> eye), dirs (R,N,3).
    """
    N = dirs.shape[-2]
    L = radiance_fn(dirs)
    k1 = ad.reshape(kappa, (kappa.shape[0], 1, 3))
    z1 = ad.reshape(zeta, (zeta.shape[0], 1, 1))
    n1 = ad.reshape(n, (n.shape[0], 1, 3))
    wo1 = wo.reshape(-1, 1, 3) if isinstance(wo, np.ndarray) else ad.reshape(wo, (-1, 1, 3))
    fr = shading.brdf(k1, z1, n1, dirs, wo1, f0=f0)
    cos = ad.maximum_const(ad.dot(n1, dirs, keepdims=True), 0.0)
    integrand = ad.mul(ad.mul(L, fr), cos)
    return ad.mul(ad.sum_(integrand, axis=1), 2.0 * np.pi / N), L


# ---------------------------------------------------------------------------
# per-step sampling decisions

class StepPlan:
    """Lazily built record of one step's non-differentiated choices."""

    def __init__(self, rng=None):
        self.rng = rng or np.random.default_rng(0)
        self.slots = {}

    def take(self, key, build):
        if key not in self.slots:
            self.slots[key] = build()
        return self.slots[key]


def select_decode_subset(w, threshold, topk):
    """Flat indices of ray sections worth decoding, row-major (sorted).

    Sections must clear the weight threshold; at most `topk` per ray are
    kept (the heaviest ones). topk <= 0 disables the cap.
    """
    mask = w > threshold
    if topk > 0 and w.shape[1] > topk:
        part = np.argpartition(-w, topk - 1, axis=1)[:, :topk]
        capped = np.zeros_like(mask)
        np.put_along_axis(capped, part, True, axis=1)
        mask &= capped
    return np.flatnonzero(mask.reshape(-1))


class RayOutputs:
    """Everything one forward pass produced for a ray batch."""

    def __init__(self):
        self.terms = {}        # {name: (sum Tensor, count)}
        self.aux = {}          # per-ray arrays/tensors for image assembly
        self.stats = {}
        self.plan = None


# ---------------------------------------------------------------------------
# the scene pipeline

class ScenePipeline:
    """Owns the fields, decoders and illumination model; renders ray batches."""

    def __init__(self, cfg: TrainConfig, n_views: int = 1, stage: str = "coarse"):
        cfg.validate()
        self.cfg = cfg
        self.stage = stage
        self.n_views = n_views
        self.dtype = cfg.dtype
        self.bounds = SceneBounds([cfg.bounds_min] * 3, [cfg.bounds_max] * 3)
        rng = np.random.default_rng(cfg.seed)

        self.mode = cfg.mode
        self.sphere_center = self.bounds.center
        self.sphere_radius = 0.4 * self.bounds.half_extent

        if self.mode == "dense":
            res = cfg.coarse_res if stage == "coarse" else cfg.fine_res
            sdf0 = fields.sphere_grid_values(self.bounds, (res,) * 3,
                                             self.sphere_center, self.sphere_radius)
            self.sdf_grid = DenseGrid("fields/sdf", 1, res, self.bounds,
                                      init=sdf0, dtype=self.dtype, group="grid_sdf")
            sem0 = rng.uniform(-1e-2, 1e-2, size=(cfg.sem_channels,) + (res,) * 3)
            self.sem_grid = DenseGrid("fields/sem", cfg.sem_channels, res, self.bounds,
                                      init=sem0, dtype=self.dtype, group="grid_sem")
            self.hash_grid = None
            self.sdf_mlp = None
            feat_dim = cfg.sem_channels
            self.use_position = True
            hidden, depth = cfg.mlp_hidden, cfg.mlp_depth
        else:
            self.sdf_grid = None
            self.sem_grid = None
            self.hash_grid = HashGrid("fields/hash", self.bounds,
                                      levels=cfg.hash_levels, coarsest=cfg.hash_coarsest,
                                      finest=cfg.hash_finest, features=cfg.hash_features,
                                      table_log2=cfg.hash_table_log2,
                                      dtype=self.dtype, rng=rng, group="grid_hash")
            feat_dim = self.hash_grid.out_dim
            self.use_position = False
            hidden, depth = cfg.hash_mlp_hidden, cfg.hash_mlp_depth
            self.sdf_mlp = MLP("decoder/sdf", feat_dim, cfg.hash_mlp_hidden,
                               cfg.hash_sdf_depth, 1, rng, self.dtype, group="decoders_geo")

        self.feat_dim = feat_dim
        rad_in = feat_dim + (3 if self.use_position else 0) + 6  # + normal + view dir
        self.radiance_mlp = MLP("decoder/radiance", rad_in, hidden, depth, 3,
                                rng, self.dtype, group="decoders_geo")
        self.materials = MaterialDecoder("decoder/material", feat_dim,
                                         self.use_position, hidden, depth, rng,
                                         self.dtype, group="decoders_mat")

        view_dim = cfg.view_embed_dim if cfg.varying_illumination else 0
        illum = cfg.illumination
        if illum == "sg":
            self.light = shading.SGLightField(feat_dim, self.use_position, cfg.k_lobes,
                                              hidden, depth, rng, self.dtype,
                                              view_dim=view_dim, group="decoders_mat")
        elif illum in ("sh3", "sh4"):
            order = int(illum[2])
            self.light = shading.SHLightField(feat_dim, self.use_position, order,
                                              hidden, depth, rng, self.dtype,
                                              group="decoders_mat")
        elif illum == "envmap_tex":
            self.light = shading.EnvmapTexture(dtype=self.dtype, group="decoders_mat")
        else:
            self.light = shading.EnvmapSGMixture(k=128, rng=rng, dtype=self.dtype,
                                                 group="decoders_mat")

        if cfg.varying_illumination and illum != "sg":
            raise ValidationError("varying_illumination requires the sg back-end")
        self.view_embed = None
        if cfg.varying_illumination:
            emb = rng.normal(0.0, 0.01, size=(n_views, cfg.view_embed_dim))
            self.view_embed = Parameter("render/view_embed", emb.astype(self.dtype),
                                        "decoders_mat")

        p0 = np.log(cfg.sharpness_init) / 10.0
        self.sharpness_raw = Parameter("render/sharpness",
                                       np.asarray([p0], dtype=self.dtype), "sharpness")
        self.stats = {}

    # -- geometry / field access ----------------------------------------

    @property
    def voxel_size(self) -> float:
        if self.mode == "dense":
            return float(np.min(self.sdf_grid.meta.voxel))
        return self.bounds.max_extent / (self.cfg.hash_step_res - 1)

    @property
    def step_size(self) -> float:
        return self.voxel_size / 2.0   # half of the voxel size

    def sharpness(self, tape=None) -> Tensor:
        p = tape.param(self.sharpness_raw) if tape is not None else Tensor(self.sharpness_raw.data)
        return ad.exp(ad.mul(p, 10.0))

    def _leaf(self, tape, param):
        return tape.param(param) if tape is not None else None

    def sdf_at(self, x, tape=None, stats=None, feats=None) -> Tensor:
        if self.mode == "dense":
            return self.sdf_grid.query(x, self._leaf(tape, self.sdf_grid.values), stats=stats)
        if feats is None:
            feats = self.hash_grid.query(x, self._leaf(tape, self.hash_grid.tables), stats=stats)
        raw = self.sdf_mlp.apply(feats, tape)
        prior = fields.sphere_sdf(x, self.sphere_center, self.sphere_radius)
        return ad.add(raw, prior[:, None].astype(self.dtype))

    def features_at(self, x, tape=None, stats=None) -> Tensor:
        if self.mode == "dense":
            return self.sem_grid.query(x, self._leaf(tape, self.sem_grid.values), stats=stats)
        return self.hash_grid.query(x, self._leaf(tape, self.hash_grid.tables), stats=stats)

    def sdf_grad_at(self, x, tape=None, stats=None) -> Tensor:
        """Central differences of the SDF with a one-voxel step (one-sided
        against the domain boundary); all six stencil arms in one query."""
        stacked, denoms = fields.gradient_stencil(
            x, self.voxel_size, self.bounds.lo, self.bounds.hi)
        s = self.sdf_at(stacked, tape, stats)
        return fields.combine_stencil(s, denoms, self.dtype)

    # -- parameters ------------------------------------------------------

    def param_groups(self) -> dict:
        groups = {}
        if self.mode == "dense":
            groups["grid_sdf"] = [self.sdf_grid.values]
            groups["grid_sem"] = [self.sem_grid.values]
        else:
            groups["grid_hash"] = [self.hash_grid.tables]
        geo = list(self.radiance_mlp.params())
        if self.sdf_mlp is not None:
            geo += self.sdf_mlp.params()
        groups["decoders_geo"] = geo
        groups["sharpness"] = [self.sharpness_raw]
        mat = list(self.materials.params()) + list(self.light.params())
        if self.view_embed is not None:
            mat.append(self.view_embed)
        groups["decoders_mat"] = mat
        return groups

    def parameters(self) -> list:
        return [p for ps in self.param_groups().values() for p in ps]

    def active_groups(self, stage=None) -> set:
        stage = stage or self.stage
        if stage == "coarse":
            base = {"decoders_geo", "sharpness"}
            base |= {"grid_sdf", "grid_sem"} if self.mode == "dense" else {"grid_hash"}
            return base
        return set(self.param_groups())

    def to_fine(self) -> None:
        """Coarse -> fine stage transition (dense grids are resampled)."""
        if self.stage == "fine":
            return
        if self.mode == "dense":
            res = self.cfg.fine_res
            self.sdf_grid = self.sdf_grid.upscaled((res,) * 3)
            self.sem_grid = self.sem_grid.upscaled((res,) * 3)
        self.stage = "fine"

    def view_rows(self, view_ids, tape=None) -> Tensor | None:
        """Embedding rows for per-sample view ids; None when disabled.

        view_ids == -1 selects the mean embedding (novel views)."""
        if self.view_embed is None:
            return None
        table = tape.param(self.view_embed) if tape is not None else Tensor(self.view_embed.data)
        ids = np.asarray(view_ids)
        if np.any(ids < 0):
            mean = ad.mean_(table, axis=0, keepdims=True)
            return ad.add(ad.mul(ad.gather(table, np.maximum(ids, 0)), 0.0), mean)
        return ad.gather(table, ids)

    # -- the forward pass --------------------------------------------------

    def forward_rays(self, o, d, tape=None, gt=None, view_ids=None,
                     stage=None, plan=None, weights=None, relight=None,
                     want_materials=None) -> RayOutputs:
        """March, decode, composite and (optionally) score one ray batch.

        relight: optional (radiance_fn(dirs)->Tensor, roughness_power) pair;
        replaces the learned light field with an external environment map
        attenuated by marched visibility (inference only).
        """
        cfg = self.cfg
        stage = stage or self.stage
        out = RayOutputs()
        stats = out.stats
        plan = plan or StepPlan()
        out.plan = plan
        R = o.shape[0]
        dt = self.dtype
        bg = cfg.background_value

        tn, tf = ray_aabb(o, d, self.bounds.lo, self.bounds.hi)
        offs = plan.take("jitter", lambda: plan.rng.uniform(0.0, 1.0, size=R))
        t, valid = sample_depths(tn, tf, self.step_size, offs)
        P = t.shape[1]
        x = (o[:, None, :] + t[:, :, None] * d[:, None, :]).astype(dt)

        # query the SDF at valid samples only; padding gets a large positive
        # value so its (masked anyway) sections carry zero opacity
        flat_valid = np.flatnonzero(valid.reshape(-1))
        xv = x.reshape(-1, 3)[flat_valid]
        feats_all = None
        if self.mode == "hash":
            feats_all = self.features_at(xv, tape, stats)
            s_v = self.sdf_at(xv, tape, stats, feats=feats_all)
        else:
            s_v = self.sdf_at(xv, tape, stats)
        pad = (~valid.reshape(-1, 1)) * np.asarray(1e3, dtype=dt)
        s = ad.reshape(ad.add(ad.scatter_add(s_v, flat_valid, R * P), pad), (R, P))

        sharp = self.sharpness(tape)
        alpha = neus_alpha(s[:, :-1], s[:, 1:], sharp)
        pair_ok = (valid[:, :-1] & valid[:, 1:]).astype(dt)
        alpha = ad.minimum_const(ad.mul(alpha, pair_ok), ALPHA_MAX)

        T = transmittance(alpha)
        w = ad.mul(T, alpha)                                   # (R, P-1)
        W = ad.sum_(w, axis=1, keepdims=True)                  # (R, 1)
        out.aux["weight"] = W

        # decode only where the compositing weight matters
        sel = plan.take("subset", lambda: select_decode_subset(
            w.data, cfg.decode_threshold, cfg.decode_topk))
        rows = sel // (P - 1)
        cols = sel % (P - 1)
        xs = x[rows, cols]
        w_sel = ad.gather(ad.reshape(w, (R * (P - 1),)), sel)  # (M,)
        w_col = ad.reshape(w_sel, (len(sel), 1))

        # surface set, shared by the PBR shading and the smoothness losses
        keep, x_surf, depth = plan.take("surface", lambda: surface_points(
            o, d, t[:, :-1], w.data, cfg.surface_w_min))
        out.aux["depth_partial"] = (keep, depth)
        Rf = len(keep)

        do_terms = gt is not None and weights is not None
        do_n = do_terms and weights.n > 0.0 and Rf > 0
        fine_mats = stage == "fine" and (True if want_materials is None else want_materials)
        smooth_tags = []
        if fine_mats and do_terms and Rf > 0:
            if weights.kappa > 0.0:
                smooth_tags.append("kappa")
            if weights.zeta > 0.0:
                smooth_tags.append("zeta")
            if weights.sg > 0.0 and self.light.per_point:
                smooth_tags.append("sg")

        # every stencil / feature position of this step rides in one fused
        # query per grid (dense: one per field; hash: a single table lookup)
        sten_sel, den_sel = fields.gradient_stencil(
            xs, self.voxel_size, self.bounds.lo, self.bounds.hi)
        sdf_parts = [("sten_sel", sten_sel)]
        if do_n:
            xn = self._clamp_pts(x_surf + self._eps(plan, "eps_n", Rf))
            sten_surf, den_surf = fields.gradient_stencil(
                np.concatenate([x_surf, xn], axis=0),
                self.voxel_size, self.bounds.lo, self.bounds.hi)
            sdf_parts.append(("sten_surf", sten_surf))

        feat_parts = []
        if self.mode == "dense":
            feat_parts.append(("f_sel", xs))
        if smooth_tags:
            feat_parts.append(("f_surf", x_surf))
            for tag in smooth_tags:
                feat_parts.append((
                    "f_" + tag,
                    self._clamp_pts(x_surf + self._eps(plan, "eps_" + tag, Rf))))

        def split(block, parts):
            views, at = {}, 0
            for key, pts in parts:
                views[key] = block[at:at + len(pts)]
                at += len(pts)
            return views

        if self.mode == "dense":
            s_block = self.sdf_grid.query(
                np.concatenate([p for _, p in sdf_parts], axis=0),
                self._leaf(tape, self.sdf_grid.values), stats=stats)
            sdf_views = split(s_block, sdf_parts)
            if feat_parts:
                f_block = self.sem_grid.query(
                    np.concatenate([p for _, p in feat_parts], axis=0),
                    self._leaf(tape, self.sem_grid.values), stats=stats)
                feat_views = split(f_block, feat_parts)
            f_sel = feat_views["f_sel"]
        else:
            all_parts = sdf_parts + feat_parts
            h_block = self.hash_grid.query(
                np.concatenate([p for _, p in all_parts], axis=0),
                self._leaf(tape, self.hash_grid.tables), stats=stats)
            n_sdf = sum(len(p) for _, p in sdf_parts)
            raw = self.sdf_mlp.apply(h_block[:n_sdf], tape)
            prior = fields.sphere_sdf(
                np.concatenate([p for _, p in sdf_parts], axis=0),
                self.sphere_center, self.sphere_radius)[:, None].astype(dt)
            sdf_views = split(ad.add(raw, prior), sdf_parts)
            feat_views = split(h_block[n_sdf:], feat_parts)
            compact = np.full(R * P, -1, dtype=np.int64)
            compact[flat_valid] = np.arange(len(flat_valid))
            f_sel = ad.gather(feats_all, compact[rows * P + cols])

        grad_sel = fields.combine_stencil(sdf_views["sten_sel"], den_sel, dt)
        n_sel = fields.normal_from_gradient(grad_sel, stats)

        def composite(q):
            return ad.scatter_add(ad.mul(w_col, q), rows, R)

        # radiance branch (kept through both stages)
        rad_parts = [f_sel]
        if self.use_position:
            rad_parts.append(Tensor(xs.astype(dt)))
        rad_parts += [n_sel, Tensor(d[rows].astype(dt))]
        rgb_sel = ad.sigmoid(self.radiance_mlp.apply(ad.concat(rad_parts, axis=1), tape))
        c_rad = ad.add(composite(rgb_sel), ad.mul(ad.sub(1.0, W), bg))
        out.aux["rad"] = c_rad

        if gt is not None:
            out.terms["rad"] = losses.loss_rec_sq(c_rad, gt.astype(dt))
        if weights is not None and weights.eik > 0.0:
            out.terms["eik"] = losses.loss_eikonal_sum(grad_sel)
        if do_n:
            n_all = fields.normal_from_gradient(
                fields.combine_stencil(sdf_views["sten_surf"], den_surf, dt), stats)
            out.terms["n"] = losses.loss_smooth_pair(n_all[:Rf], n_all[Rf:])

        if stage == "coarse" or not fine_mats:
            return out

        # ---- physically based branch (fine stage) ----
        kap_sel, zet_sel = self.materials.decode(f_sel, xs, tape)
        kap_r = composite(kap_sel)
        zet_r = composite(zet_sel)
        n_r = shading.safe_unit(composite(n_sel), stats)
        out.aux["albedo"] = kap_r
        out.aux["roughness"] = zet_r
        out.aux["normal"] = n_r

        latent_r = None
        if self.light.per_point and relight is None:
            e_rows = None
            if self.view_embed is not None:
                e_rows = self.view_rows(np.asarray(view_ids)[rows], tape)
            latent_sel = self.light.decode(f_sel, xs, e_rows, tape, stats)
            latent_r = composite(latent_sel)

        if Rf == 0:
            c_pbr = ad.mul(ad.sub(1.0, W), np.full(3, bg, dtype=dt))
            out.aux["pbr"] = c_pbr
            if gt is not None:
                out.terms["pbr"] = losses.loss_rec_sq(c_pbr, gt.astype(dt))
            return out

        kap_f = ad.gather(kap_r, keep)
        zet_f = ad.gather(zet_r, keep)
        n_f = ad.gather(n_r, keep)
        wo = -d[keep].astype(dt)
        dirs = plan.take("quad_dirs",
                         lambda: fibonacci_hemisphere(n_f.data, cfg.n_quad).astype(dt))

        if relight is not None:
            env_fn, rough_pow = relight
            vis = self._march_visibility(x_surf, dirs)          # (Rf, N, 1)
            zet_f = ad.power(zet_f, rough_pow)
            radiance_fn = lambda dd: ad.mul(env_fn(dd), vis)
        elif self.light.per_point:
            h_f = ad.gather(latent_r, keep)
            radiance_fn = lambda dd: self.light.radiance(h_f, dd, stats=stats)
        else:
            radiance_fn = lambda dd: self.light.radiance(None, dd, tape=tape, stats=stats)

        c_fg, L = shade_pbr(kap_f, zet_f, n_f, wo, radiance_fn, dirs)
        c_pbr = ad.add(ad.scatter_add(c_fg, keep, R), ad.mul(ad.sub(1.0, W), bg))
        out.aux["pbr"] = c_pbr

        if gt is not None:
            out.terms["pbr"] = losses.loss_rec_sq(c_pbr, gt.astype(dt))
            if weights is not None and weights.white > 0.0 and relight is None:
                out.terms["white"] = losses.loss_white_sum(L)
        if smooth_tags:
            f0 = feat_views["f_surf"]
            for tag in smooth_tags:
                fj = feat_views["f_" + tag]
                xj = dict(feat_parts)["f_" + tag]
                if tag == "kappa":
                    pair = (self.materials.decode_kappa(f0, x_surf, tape),
                            self.materials.decode_kappa(fj, xj, tape))
                elif tag == "zeta":
                    pair = (self.materials.decode_zeta(f0, x_surf, tape),
                            self.materials.decode_zeta(fj, xj, tape))
                else:
                    eid = np.asarray(view_ids)[keep] if self.view_embed is not None else None
                    e = self.view_rows(eid, tape) if eid is not None else None
                    pair = (self.light.decode(f0, x_surf, e, tape, stats),
                            self.light.decode(fj, xj, e, tape, stats))
                out.terms[tag] = losses.loss_smooth_pair(*pair)
        return out

    # -- smoothness helpers ----------------------------------------------

    def _eps(self, plan, key, n):
        scale = self.cfg.smooth_eps_frac * self.bounds.max_extent
        return plan.take(key, lambda: plan.rng.normal(0.0, scale, size=(n, 3)))

    def _clamp_pts(self, x):
        return np.clip(x, self.bounds.lo, self.bounds.hi)

    # -- relighting --------------------------------------------------------

    def _march_visibility(self, x0, dirs, slab=40000):
        """Eq.-style visibility of secondary rays, marched with the primary
        step rule from just off the surface to the bounds exit (no grad)."""
        Rf, N, _ = dirs.shape
        o2 = np.repeat(x0, N, axis=0)
        d2 = dirs.reshape(-1, 3)
        sharp = float(self.sharpness().data[0])
        step = self.step_size
        t0 = 2.0 * step
        vis = np.empty(Rf * N, dtype=self.dtype)
        self.stats["relight_secondary_rays"] = \
            self.stats.get("relight_secondary_rays", 0) + Rf * N
        for lo in range(0, Rf * N, slab):
            hi = min(lo + slab, Rf * N)
            o_s, d_s = o2[lo:hi], d2[lo:hi]
            tn, tf = ray_aabb(o_s, d_s, self.bounds.lo, self.bounds.hi)
            tn = np.maximum(tn, t0)
            t, valid = sample_depths(tn, tf, step, np.full(hi - lo, 0.5))
            pts = (o_s[:, None, :] + t[:, :, None] * d_s[:, None, :]).astype(self.dtype)
            s = self.sdf_at(pts.reshape(-1, 3)).data.reshape(t.shape)
            sig = ad.sigmoid_np(sharp * s)
            a = np.maximum((sig[:, :-1] - sig[:, 1:]) / (sig[:, :-1] + SIGMA_EPS), 0.0)
            a *= (valid[:, :-1] & valid[:, 1:])
            vis[lo:hi] = visibility_from_alpha(np.minimum(a, ALPHA_MAX))
            self.stats["relight_max_secondary_samples"] = max(
                self.stats.get("relight_max_secondary_samples", 0), t.shape[1])
        return Tensor(np.clip(vis, 0.0, 1.0).reshape(Rf, N, 1))

    # -- image-level helpers ------------------------------------------------

    def render_image(self, camera: Camera, view_id=-1, chunk=4096, relight=None,
                     want_materials=True, stage=None):
        """Full-frame inference; returns a dict of (H, W, C) float maps."""
        H, W = camera.height, camera.width
        o, d = camera.all_rays()
        n = o.shape[0]
        bufs = {}
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            plan = StepPlan(np.random.default_rng(0))
            plan.slots["jitter"] = np.full(hi - lo, 0.5)
            out = self.forward_rays(o[lo:hi], d[lo:hi], tape=None,
                                    view_ids=np.full(hi - lo, view_id),
                                    stage=stage, plan=plan, relight=relight,
                                    want_materials=want_materials)
            got = {}
            for key in ("pbr", "rad", "albedo", "roughness", "normal", "weight"):
                if key in out.aux:
                    got[key] = out.aux[key].data
            keep, depth = out.aux["depth_partial"]
            dep = np.zeros((hi - lo, 1), dtype=self.dtype)
            dep[keep, 0] = depth
            got["depth"] = dep
            for key, val in got.items():
                bufs.setdefault(key, []).append(val)
            for k, v in out.stats.items():
                self.stats[k] = self.stats.get(k, 0) + v
        return {k: np.concatenate(v, axis=0).reshape(H, W, -1) for k, v in bufs.items()}

    # -- checkpoint blobs ----------------------------------------------------

    def state_blobs(self) -> dict:
        blobs = {}
        if self.mode == "dense":
            blobs["fields/sdf"] = self.sdf_grid.values.data
            blobs["fields/sem"] = self.sem_grid.values.data
        else:
            blobs.update(self.hash_grid.level_blobs())
        for group in self.param_groups().values():
            for p in group:
                if not p.name.startswith("fields/"):
                    blobs[p.name] = p.data
        return blobs

    def load_state_blobs(self, blobs: dict) -> None:
        if self.mode == "dense":
            self.sdf_grid.values.data = blobs["fields/sdf"].astype(self.dtype)
            self.sem_grid.values.data = blobs["fields/sem"].astype(self.dtype)
        else:
            T = self.hash_grid.meta.table_size
            for l in range(self.hash_grid.meta.levels):
                self.hash_grid.tables.data[l * T:(l + 1) * T] = \
                    blobs[f"fields/hash/level{l}"].astype(self.dtype)
        for group in self.param_groups().values():
            for p in group:
                if p.name in blobs:
                    p.data = blobs[p.name].reshape(p.data.shape).astype(self.dtype)


# ---------------------------------------------------------------------------
# end-to-end gradcheck scene

class EndToEndCase:
    def __init__(self, pipeline, o, d, gt, weights, seed):
        self.pipeline = pipeline
        self.o, self.d, self.gt = o, d, gt
        self.weights = weights
        self.plan = StepPlan(np.random.default_rng(seed))

    def _forward(self, tape):
        out = self.pipeline.forward_rays(self.o, self.d, tape=tape, gt=self.gt,
                                         stage="fine", plan=self.plan,
                                         weights=self.weights)
        return losses.total_loss(out.terms, self.weights)

    def loss_and_grads(self):
        tape = ad.Tape()
        total = self._forward(tape)
        return float(total.data), tape.backward(total)

    def loss_only(self) -> float:
        return float(self._forward(None).data)

    def check_params(self):
        p = self.pipeline
        picks = [("fields/sdf", p.sdf_grid.values), ("fields/sem", p.sem_grid.values),
                 ("radiance/w0", p.radiance_mlp.weights[0]),
                 ("kappa/w0", p.materials.kappa_mlp.weights[0]),
                 ("light/w0", p.light.mlp.weights[0]),
                 ("sharpness", p.sharpness_raw)]
        return picks


def build_e2e_case(seed=0) -> EndToEndCase:
    """A 16-cube scene whose full loss is finite-difference checkable."""
    cfg = TrainConfig(mode="dense", coarse_res=8, fine_res=16, sem_channels=6,
                      mlp_hidden=16, mlp_depth=1, k_lobes=4, n_quad=16,
                      precision="float64", decode_threshold=0.0,
                      lambda_eik=0.01, seed=seed)
    pipe = ScenePipeline(cfg, n_views=1, stage="fine")
    rng = np.random.default_rng(seed + 7)
    # roughen the fields so every chain carries signal
    pipe.sem_grid.values.data += rng.normal(0.0, 0.5, pipe.sem_grid.values.data.shape)
    pipe.sdf_grid.values.data += rng.normal(0.0, 0.02, pipe.sdf_grid.values.data.shape)

    pose = np.eye(4)
    pose[:3, 3] = (0.0, 0.0, 2.2)
    cam = Camera.from_fov(8, 8, 0.7, pose)
    px = np.array([3.5, 4.2, 2.8, 4.9, 3.1, 4.6])
    py = np.array([3.5, 3.0, 4.4, 4.0, 2.6, 4.8])
    o, d = cam.rays(px, py)
    gt = rng.uniform(0.0, 1.0, size=(len(px), 3))
    return EndToEndCase(pipe, o, d, gt, cfg.loss_weights(), seed)
