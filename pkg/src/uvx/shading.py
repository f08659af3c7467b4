"""Material and illumination decoding.

Small ReLU MLPs decode albedo, roughness and per-point light parameters from
interpolated field features. Three interchangeable illumination back-ends
run through the identical rendering path:

* "sg"            - a local incident light field of k spherical-Gaussian
                    lobes decoded per sample point (the primary model);
* "sh3" / "sh4"   - per-point spherical-harmonic coefficients;
* "envmap_tex" / "envmap_sg128" - a global learnable environment map
                    (equirectangular texture, or a mixture of 128 lobes).

The BRDF is a diffuse albedo/pi term plus an isotropic GGX specular lobe
with separable Smith shadowing and Schlick Fresnel at fixed F0 = 0.04,
alpha = roughness^2.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatch, Tensor
from .optim import Parameter

SG_SHARPNESS_FLOOR = 0.1
F0_DIELECTRIC = 0.04
_DOT_EPS = 1e-4


def safe_unit(vec: Tensor, stats=None, counter="degenerate_axes") -> Tensor:
    """Normalize (..., 3) vectors; near-zero inputs become +z and are counted."""
    norms = np.linalg.norm(vec.data, axis=-1, keepdims=True)
    bad = norms < 1e-9
    out = ad.normalize(vec)
    if bad.any():
        if stats is not None:
            stats[counter] = stats.get(counter, 0) + int(bad.sum())
        zaxis = np.zeros_like(vec.data)
        zaxis[..., 2] = 1.0
        out = ad.add(ad.mul(out, (~bad).astype(vec.dtype)), zaxis * bad)
    return out


class MLP:
    """Fully-connected ReLU network; output activations are the caller's job."""

    def __init__(self, name, in_dim, hidden, depth, out_dim, rng,
                 dtype=np.float32, group="mlps"):
        sizes = [in_dim] + [hidden] * depth + [out_dim]
        self.weights = []
        self.biases = []
        for i, (m, n) in enumerate(zip(sizes[:-1], sizes[1:])):
            a = np.sqrt(6.0 / (m + n))
            w = rng.uniform(-a, a, size=(m, n)).astype(dtype)
            self.weights.append(Parameter(f"{name}/w{i}", w, group))
            self.biases.append(Parameter(f"{name}/b{i}", np.zeros(n, dtype=dtype), group))

    def params(self):
        return self.weights + self.biases

    def apply(self, x: Tensor, tape=None) -> Tensor:
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            wt = tape.param(w) if tape is not None else Tensor(w.data)
            bt = tape.param(b) if tape is not None else Tensor(b.data)
            x = ad.add(ad.matmul(x, wt), bt)
            if i != last:
                x = ad.relu(x)
        return x


class MaterialDecoder:
    """Albedo and roughness heads (sigmoid outputs in (0,1))."""

    def __init__(self, name, feat_dim, use_position, hidden, depth, rng,
                 dtype=np.float32, group="decoders_mat"):
        in_dim = feat_dim + (3 if use_position else 0)
        self.use_position = use_position
        self.kappa_mlp = MLP(f"{name}/kappa", in_dim, hidden, depth, 3, rng, dtype, group)
        self.zeta_mlp = MLP(f"{name}/zeta", in_dim, hidden, depth, 1, rng, dtype, group)

    def params(self):
        return self.kappa_mlp.params() + self.zeta_mlp.params()

    def _input(self, f: Tensor, x):
        if not self.use_position:
            return f
        return ad.concat([f, Tensor(np.asarray(x, dtype=f.dtype))], axis=1)

    def decode_kappa(self, f: Tensor, x, tape=None) -> Tensor:
        return ad.sigmoid(self.kappa_mlp.apply(self._input(f, x), tape))

    def decode_zeta(self, f: Tensor, x, tape=None) -> Tensor:
        return ad.sigmoid(self.zeta_mlp.apply(self._input(f, x), tape))

    def decode(self, f: Tensor, x, tape=None):
        inp = self._input(f, x)
        kappa = ad.sigmoid(self.kappa_mlp.apply(inp, tape))
        zeta = ad.sigmoid(self.zeta_mlp.apply(inp, tape))
        return kappa, zeta


# ---------------------------------------------------------------------------
# spherical Gaussians

class SGLobes:
    """A batch of lobe sets: amplitudes >= 0, sharpness > 0, unit axes."""

    __slots__ = ("a", "lam", "mu")

    def __init__(self, a: Tensor, lam: Tensor, mu: Tensor):
        self.a = a          # (..., k, 3)
        self.lam = lam      # (..., k, 1)
        self.mu = mu        # (..., k, 3)

    @property
    def k(self):
        return self.a.shape[-2]


def lobes_to_flat(lobes: SGLobes) -> Tensor:
    """(..., k, *) lobe params -> (..., 7k) vector [a | lambda | mu]."""
    lead = lobes.a.shape[:-2]
    k = lobes.a.shape[-2]
    return ad.concat([
        ad.reshape(lobes.a, lead + (3 * k,)),
        ad.reshape(lobes.lam, lead + (k,)),
        ad.reshape(lobes.mu, lead + (3 * k,)),
    ], axis=-1)


def lobes_from_flat(flat: Tensor, k, renorm_axes=True, stats=None) -> SGLobes:
    """Inverse of lobes_to_flat; optionally re-normalizes the axes (needed
    after volume compositing, which scales and mixes them)."""
    lead = flat.shape[:-1]
    a = ad.reshape(flat[..., :3 * k], lead + (k, 3))
    lam = ad.reshape(flat[..., 3 * k:4 * k], lead + (k, 1))
    mu = ad.reshape(flat[..., 4 * k:], lead + (k, 3))
    if renorm_axes:
        mu = safe_unit(mu, stats)
    return SGLobes(a, lam, mu)


def eval_sg(lobes: SGLobes, dirs) -> Tensor:
    """Sum of lobes a * exp(lambda * (mu . omega - 1)) at unit directions.

    lobes: (..., k, *); dirs: (..., N, 3) raw array or Tensor. Broadcasts the
    leading dims; returns (..., N, 3). An empty lobe set gives zeros.
    """
    d = dirs.data if isinstance(dirs, Tensor) else np.asarray(dirs)
    if lobes.k == 0:
        tgt = d.shape[:-1] + (3,)
        return Tensor(np.zeros(tgt, dtype=lobes.a.dtype))
    mu = ad.reshape(lobes.mu, lobes.mu.shape[:-2] + (1,) + lobes.mu.shape[-2:])
    a = ad.reshape(lobes.a, lobes.a.shape[:-2] + (1,) + lobes.a.shape[-2:])
    lam = ad.reshape(lobes.lam, lobes.lam.shape[:-2] + (1,) + lobes.lam.shape[-2:])
    dd = d[..., :, None, :]                                   # (..., N, 1, 3)
    cos = ad.sum_(ad.mul(mu, dd), axis=-1, keepdims=True)     # (..., N, k, 1)
    g = ad.exp(ad.mul(lam, ad.sub(cos, 1.0)))
    return ad.sum_(ad.mul(a, g), axis=-2)                     # (..., N, 3)


def decode_sg_raw(raw: Tensor, k, stats=None) -> SGLobes:
    """Map raw MLP outputs (M, 7k) onto valid lobe parameters.

    amplitude = softplus, sharpness = softplus + floor, axis = normalized
    raw 3-vector (+z fallback for near-zero axes, counted).
    """
    M = raw.shape[0]
    a = ad.reshape(ad.softplus(raw[:, :3 * k]), (M, k, 3))
    lam = ad.add(ad.reshape(ad.softplus(raw[:, 3 * k:4 * k]), (M, k, 1)),
                 SG_SHARPNESS_FLOOR)
    mu = safe_unit(ad.reshape(raw[:, 4 * k:], (M, k, 3)), stats)
    return SGLobes(a, lam, mu)


# ---------------------------------------------------------------------------
# real spherical harmonics (graphics convention, up to l = 4)

def sh_basis(dirs, order) -> np.ndarray:
    """Real SH basis values at unit directions, (..., (order+1)^2)."""
    if order > 4:
        raise ValueError("sh_basis supports order <= 4")
    d = np.asarray(dirs)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = [np.full_like(x, 0.5 * np.sqrt(1.0 / np.pi))]
    if order >= 1:
        c1 = np.sqrt(3.0 / (4.0 * np.pi))
        out += [c1 * y, c1 * z, c1 * x]
    if order >= 2:
        c2a = 0.5 * np.sqrt(15.0 / np.pi)
        c2b = 0.25 * np.sqrt(5.0 / np.pi)
        out += [c2a * x * y, c2a * y * z, c2b * (3 * z * z - 1),
                c2a * x * z, 0.5 * c2a * (x * x - y * y)]
    if order >= 3:
        out += [
            np.sqrt(35.0 / (32 * np.pi)) * y * (3 * x * x - y * y),
            np.sqrt(105.0 / (4 * np.pi)) * x * y * z,
            np.sqrt(21.0 / (32 * np.pi)) * y * (5 * z * z - 1),
            np.sqrt(7.0 / (16 * np.pi)) * z * (5 * z * z - 3),
            np.sqrt(21.0 / (32 * np.pi)) * x * (5 * z * z - 1),
            np.sqrt(105.0 / (16 * np.pi)) * z * (x * x - y * y),
            np.sqrt(35.0 / (32 * np.pi)) * x * (x * x - 3 * y * y),
        ]
    if order >= 4:
        out += [
            np.sqrt(315.0 / (16 * np.pi)) * x * y * (x * x - y * y),
            np.sqrt(315.0 / (32 * np.pi)) * y * z * (3 * x * x - y * y),
            np.sqrt(45.0 / (16 * np.pi)) * x * y * (7 * z * z - 1),
            np.sqrt(45.0 / (32 * np.pi)) * y * z * (7 * z * z - 3),
            (3.0 / (16 * np.sqrt(np.pi))) * (35 * z ** 4 - 30 * z * z + 3),
            np.sqrt(45.0 / (32 * np.pi)) * x * z * (7 * z * z - 3),
            np.sqrt(45.0 / (64 * np.pi)) * (x * x - y * y) * (7 * z * z - 1),
            np.sqrt(315.0 / (32 * np.pi)) * x * z * (x * x - 3 * y * y),
            np.sqrt(315.0 / (256 * np.pi)) * (x ** 4 - 6 * x * x * y * y + y ** 4),
        ]
    return np.stack(out, axis=-1)


def sh_coeff_count(order) -> int:
    return (order + 1) ** 2


def eval_sh(coeffs: Tensor, dirs, order) -> Tensor:
    """Radiance from per-channel SH coefficients, (..., n, 3) x (..., N, 3).

    Returns the raw (possibly negative) reconstruction; render paths clamp
    at zero where the value enters the lighting integral.
    """
    n = sh_coeff_count(order)
    if coeffs.shape[-2] != n or coeffs.shape[-1] != 3:
        raise ShapeMismatch(
            f"eval_sh: order {order} needs (..., {n}, 3) coefficients, "
            f"got {tuple(coeffs.shape)}")
    d = dirs.data if isinstance(dirs, Tensor) else np.asarray(dirs)
    basis = sh_basis(d, order).astype(coeffs.dtype)          # (..., N, n)
    c = ad.reshape(coeffs, coeffs.shape[:-2] + (1, n, 3))
    return ad.sum_(ad.mul(c, basis[..., None]), axis=-2)     # (..., N, 3)


# ---------------------------------------------------------------------------
# equirectangular environment maps

def envmap_lookup(envmap, dirs) -> Tensor:
    """Bilinear fetch from an equirect (H, W, 3) map at unit directions.

    Rows span polar angle theta in [0, pi] (row 0 holds +z), columns wrap in
    azimuth. Differentiable w.r.t. the map; directions are treated as
    constants.
    """
    env = envmap if isinstance(envmap, Tensor) else Tensor(np.asarray(envmap))
    H, W, _ = env.shape
    d = dirs.data if isinstance(dirs, Tensor) else np.asarray(dirs)
    lead = d.shape[:-1]
    dd = d.reshape(-1, 3)
    theta = np.arccos(np.clip(dd[:, 2], -1.0, 1.0))
    phi = np.arctan2(dd[:, 1], dd[:, 0])

    r = np.clip(theta / np.pi * H - 0.5, 0.0, H - 1.0)
    c = (phi / (2.0 * np.pi) + 0.5) * W - 0.5
    i0 = np.minimum(r.astype(np.int64), H - 2)
    fr = r - i0
    cf = np.floor(c)
    fc = c - cf
    j0 = cf.astype(np.int64) % W
    j1 = (j0 + 1) % W

    rows = np.stack([i0 * W + j0, i0 * W + j1,
                     (i0 + 1) * W + j0, (i0 + 1) * W + j1], axis=1)   # (M, 4)
    w4 = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc,
                   fr * (1 - fc), fr * fc], axis=1).astype(env.dtype)

    flat = env.data.reshape(-1, 3)
    gathered = flat[rows]                                             # (M, 4, 3)
    out = np.einsum("mkc,mk->mc", gathered, w4).reshape(lead + (3,))

    def vjp_map(g):
        gm = g.reshape(-1, 3)
        acc = np.zeros((H * W, 3), dtype=env.dtype)
        fl_rows = rows.reshape(-1)
        wg = (w4[:, :, None] * gm[:, None, :]).reshape(-1, 3)
        for ch in range(3):
            acc[:, ch] += np.bincount(fl_rows, weights=wg[:, ch], minlength=H * W)
        return acc.reshape(H, W, 3)

    return ad.make_op("envmap_bilinear", out, [(env, vjp_map)])


# ---------------------------------------------------------------------------
# BRDF

def brdf(kappa, zeta, n, wi, wo, f0=F0_DIELECTRIC):
    """Simplified Disney BRDF: kappa/pi diffuse + GGX specular.

    kappa (..., 3), zeta (..., 1), n / wo (..., 3) broadcast against the
    incident directions wi (..., N, 3). f0 = 0 disables the specular lobe
    entirely (the Lambertian-only mode used by the furnace checks).
    """
    diffuse = ad.mul(kappa, 1.0 / np.pi)
    if f0 == 0.0:
        return diffuse

    half_raw = ad.add(wi, wo)
    # omega_i == -omega_o has no half vector: kill the specular term there
    ok = np.linalg.norm(half_raw.data, axis=-1, keepdims=True) > 1e-6
    h = ad.normalize(half_raw)

    nl = ad.maximum_const(ad.dot(n, wi, keepdims=True), _DOT_EPS)
    nv = ad.maximum_const(ad.dot(n, wo, keepdims=True), _DOT_EPS)
    nh = ad.maximum_const(ad.dot(n, h, keepdims=True), 0.0)
    hv = ad.maximum_const(ad.dot(h, wo, keepdims=True), 0.0)

    a2 = ad.power(zeta, 4.0)                       # alpha^2 with alpha = zeta^2
    nh2 = ad.mul(nh, nh)
    dterm = ad.div(a2, ad.mul(np.pi, ad.power(
        ad.add(ad.mul(nh2, ad.sub(a2, 1.0)), 1.0), 2.0)))

    def g1(c):
        root = ad.power(ad.add(a2, ad.mul(ad.sub(1.0, a2), ad.mul(c, c))), 0.5)
        return ad.div(ad.mul(c, 2.0), ad.add(c, root))

    gterm = ad.mul(g1(nl), g1(nv))
    fterm = ad.add(f0, ad.mul(1.0 - f0, ad.power(ad.sub(1.0, hv), 5.0)))
    spec = ad.mul(ad.div(ad.mul(ad.mul(dterm, gterm), fterm),
                         ad.mul(ad.mul(nl, nv), 4.0)),
                  ok.astype(diffuse.dtype))
    return ad.add(diffuse, spec)


# ---------------------------------------------------------------------------
# illumination back-ends

class SGLightField:
    """Per-point incident light as k spherical-Gaussian lobes (primary)."""

    name = "sg"
    per_point = True

    def __init__(self, feat_dim, use_position, k, hidden, depth, rng,
                 dtype=np.float32, view_dim=0, group="decoders_mat"):
        self.k = k
        self.view_dim = view_dim
        in_dim = feat_dim + (3 if use_position else 0) + view_dim
        self.use_position = use_position
        self.mlp = MLP("light/sg", in_dim, hidden, depth, 7 * k, rng, dtype, group)
        self.latent_dim = 7 * k
        # bias the amplitude head so the initial incident light sums to ~1
        # (a fresh head would otherwise emit k * softplus(0) ~ 0.7k)
        if k > 0:
            self.mlp.biases[-1].data[:3 * k] = np.log(np.expm1(1.0 / k))

    def params(self):
        return self.mlp.params()

    def decode(self, f: Tensor, x, e=None, tape=None, stats=None) -> Tensor:
        parts = [f]
        if self.use_position:
            parts.append(Tensor(np.asarray(x, dtype=f.dtype)))
        if self.view_dim:
            if e is None:
                raise ValueError("view embedding required but not supplied")
            parts.append(e)
        inp = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
        raw = self.mlp.apply(inp, tape)
        return lobes_to_flat(decode_sg_raw(raw, self.k, stats))

    def radiance(self, latent: Tensor, dirs, tape=None, stats=None) -> Tensor:
        lobes = lobes_from_flat(latent, self.k, renorm_axes=True, stats=stats)
        return eval_sg(lobes, dirs)


class SHLightField:
    """Per-point spherical-harmonic lighting (ablation back-end)."""

    per_point = True

    def __init__(self, feat_dim, use_position, order, hidden, depth, rng,
                 dtype=np.float32, group="decoders_mat"):
        self.order = order
        self.name = f"sh{order}"
        self.n = sh_coeff_count(order)
        in_dim = feat_dim + (3 if use_position else 0)
        self.use_position = use_position
        self.mlp = MLP(f"light/sh{order}", in_dim, hidden, depth, self.n * 3, rng, dtype, group)
        self.latent_dim = self.n * 3

    def params(self):
        return self.mlp.params()

    def decode(self, f: Tensor, x, e=None, tape=None, stats=None) -> Tensor:
        if self.use_position:
            f = ad.concat([f, Tensor(np.asarray(x, dtype=f.dtype))], axis=1)
        return self.mlp.apply(f, tape)

    def radiance(self, latent: Tensor, dirs, tape=None, stats=None) -> Tensor:
        coeffs = ad.reshape(latent, latent.shape[:-1] + (self.n, 3))
        return ad.maximum_const(eval_sh(coeffs, dirs, self.order), 0.0)


class EnvmapTexture:
    """Global learnable equirectangular radiance map (ablation back-end)."""

    name = "envmap_tex"
    per_point = False
    latent_dim = 0

    def __init__(self, height=256, width=512, dtype=np.float32, init=0.5,
                 group="decoders_mat"):
        data = np.full((height, width, 3), init, dtype=dtype)
        self.map = Parameter("light/envmap", data, group)

    def params(self):
        return [self.map]

    def radiance(self, latent, dirs, tape=None, stats=None) -> Tensor:
        env = tape.param(self.map) if tape is not None else Tensor(self.map.data)
        return ad.maximum_const(envmap_lookup(env, dirs), 0.0)


class EnvmapSGMixture:
    """Global light as a mixture of spherical Gaussians (ablation back-end)."""

    name = "envmap_sg128"
    per_point = False
    latent_dim = 0

    def __init__(self, k=128, rng=None, dtype=np.float32, group="decoders_mat"):
        rng = rng or np.random.default_rng(0)
        self.k = k
        axes = rng.standard_normal((k, 3))
        axes /= np.linalg.norm(axes, axis=-1, keepdims=True)
        a0 = np.full((k, 3), np.log(np.expm1(1.0 / max(k, 1))), dtype=dtype)
        self.raw_a = Parameter("light/sgmix/a", a0, group)
        self.raw_lam = Parameter("light/sgmix/lam", np.full((k, 1), 1.0, dtype=dtype), group)
        self.raw_mu = Parameter("light/sgmix/mu", axes.astype(dtype), group)

    def params(self):
        return [self.raw_a, self.raw_lam, self.raw_mu]

    def lobes(self, tape=None, stats=None) -> SGLobes:
        def wrap(p):
            return tape.param(p) if tape is not None else Tensor(p.data)
        a = ad.softplus(wrap(self.raw_a))
        lam = ad.add(ad.softplus(wrap(self.raw_lam)), SG_SHARPNESS_FLOOR)
        mu = safe_unit(wrap(self.raw_mu), stats)
        return SGLobes(a, lam, mu)

    def radiance(self, latent, dirs, tape=None, stats=None) -> Tensor:
        return eval_sg(self.lobes(tape, stats), dirs)
