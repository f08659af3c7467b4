"""Explicit volumetric scene representation.

Two storage back-ends share one query interface:

* DenseGrid - a learnable (C, Nx, Ny, Nz) buffer queried by trilinear
  interpolation of the 8 surrounding vertices;
* HashGrid - a multi-resolution stack of hashed vertex-feature tables whose
  per-level interpolations are concatenated.

Surface normals come from central differences of the interpolated SDF with
a one-voxel step, falling back to one-sided differences against the domain
boundary. All queries record closed-form adjoints on the tape, both with
respect to the stored values and (for the dense grid) the query positions.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import NumericsError, Tensor
from .optim import Parameter

# conventional spatial-hash mixing primes (first axis left unmixed)
HASH_PRIMES = (1, 2654435761, 805459861)

# corner enumeration: bit 2 -> x, bit 1 -> y, bit 0 -> z
_CX = np.array([0, 0, 0, 0, 1, 1, 1, 1])
_CY = np.array([0, 0, 1, 1, 0, 0, 1, 1])
_CZ = np.array([0, 1, 0, 1, 0, 1, 0, 1])
_CX32, _CY32, _CZ32 = (c.astype(np.int32) for c in (_CX, _CY, _CZ))


class SceneBounds:
    """Axis-aligned box the grids span. max must exceed min per axis."""

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        if not np.all(self.hi > self.lo):
            raise ValueError(f"degenerate bounds: lo={lo} hi={hi}")

    @property
    def extent(self):
        return self.hi - self.lo

    @property
    def max_extent(self) -> float:
        return float(np.max(self.extent))

    @property
    def half_extent(self) -> float:
        return float(np.min(self.extent)) / 2.0

    @property
    def center(self):
        return (self.lo + self.hi) / 2.0

    def voxel_size(self, res) -> np.ndarray:
        return self.extent / (np.asarray(res, dtype=np.float64) - 1.0)

    def __repr__(self):
        return f"SceneBounds({self.lo.tolist()}, {self.hi.tolist()})"


class GridMeta:
    """Geometry of one vertex lattice: bounds plus per-axis resolution."""

    __slots__ = ("res", "lo", "hi", "channels")

    def __init__(self, res, lo, hi, channels):
        self.res = tuple(int(r) for r in res)
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        self.channels = channels

    @property
    def voxel(self):
        return (self.hi - self.lo) / (np.asarray(self.res) - 1.0)


def _lattice_coords(meta, x, stats=None):
    """Positions -> (base corner i0, fractional offset f), clamped to edge.

    Out-of-bounds queries clamp to the boundary cell and are counted in
    stats["oob_queries"]; NaN positions are a hard error.
    """
    if isinstance(x, Tensor):
        x = x.data
    x = np.asarray(x)
    if np.isnan(x).any():
        raise NumericsError("NaN query position")
    res = np.asarray(meta.res)
    u = (x - meta.lo) / (meta.hi - meta.lo) * (res - 1)
    if stats is not None:
        oob = int(np.count_nonzero((u < -1e-9) | (u > res - 1 + 1e-9)) > 0
                  and np.count_nonzero(np.any((u < -1e-9) | (u > res - 1 + 1e-9), axis=-1)))
        if oob:
            stats["oob_queries"] = stats.get("oob_queries", 0) + oob
    u = np.clip(u, 0.0, res - 1)
    i0 = np.minimum(u.astype(np.int64), res - 2)
    f = u - i0
    return i0, f


def _corner_weights(f):
    """(M,3) fractions -> (M,8) trilinear weights, corner order _CX/_CY/_CZ."""
    wx = np.stack([1.0 - f[:, 0], f[:, 0]], axis=1)
    wy = np.stack([1.0 - f[:, 1], f[:, 1]], axis=1)
    wz = np.stack([1.0 - f[:, 2], f[:, 2]], axis=1)
    return wx[:, _CX] * wy[:, _CY] * wz[:, _CZ]


def trilinear(values: Tensor, meta: GridMeta, x, pos_tensor=None, stats=None) -> Tensor:
    """Trilinear blend of the 8 vertices around each query point.

    values: Tensor with data shaped (C, Nx, Ny, Nz). x: (M, 3) positions
    (raw array; pass the same positions as `pos_tensor` to also get the
    adjoint with respect to the positions). Returns (M, C).
    """
    i0, f = _lattice_coords(meta, x, stats)
    nx, ny, nz = meta.res
    idx8 = ((i0[:, 0:1] + _CX) * ny + (i0[:, 1:2] + _CY)) * nz + (i0[:, 2:3] + _CZ)
    w8 = _corner_weights(f).astype(values.dtype)

    flat = values.data.reshape(meta.channels, -1)
    gathered = flat[:, idx8]                       # (C, M, 8)
    out = np.einsum("cmk,mk->mc", gathered, w8)

    ntotal = nx * ny * nz

    def vjp_values(g):
        # one fused bincount per channel over all 8 corners
        flat_idx = idx8.reshape(-1)
        if meta.channels == 1:
            wg = (w8 * g).reshape(-1)
            gv = np.bincount(flat_idx, weights=wg, minlength=ntotal)
            return gv.astype(values.dtype).reshape(values.data.shape)
        gv = np.empty((meta.channels, ntotal), dtype=values.dtype)
        for c in range(meta.channels):
            wg = (w8 * g[:, c:c + 1]).reshape(-1)
            gv[c] = np.bincount(flat_idx, weights=wg, minlength=ntotal)
        return gv.reshape(values.data.shape)

    pairs = [(values, vjp_values)]
    if pos_tensor is not None and pos_tensor.requires_grad:
        scale = ((np.asarray(meta.res) - 1) / (meta.hi - meta.lo)).astype(values.dtype)
        wx = np.stack([1.0 - f[:, 0], f[:, 0]], axis=1)
        wy = np.stack([1.0 - f[:, 1], f[:, 1]], axis=1)
        wz = np.stack([1.0 - f[:, 2], f[:, 2]], axis=1)
        # d w_k / d f_axis carries the sign of the corner bit
        sx = np.where(_CX == 1, 1.0, -1.0)
        sy = np.where(_CY == 1, 1.0, -1.0)
        sz = np.where(_CZ == 1, 1.0, -1.0)
        dwx = sx * wy[:, _CY] * wz[:, _CZ]
        dwy = sy * wx[:, _CX] * wz[:, _CZ]
        dwz = sz * wx[:, _CX] * wy[:, _CY]

        def vjp_pos(g):
            gc = np.einsum("mc,cmk->mk", g, gathered)  # dL/dw_k
            gx = (gc * dwx).sum(axis=1) * scale[0]
            gy = (gc * dwy).sum(axis=1) * scale[1]
            gz = (gc * dwz).sum(axis=1) * scale[2]
            return np.stack([gx, gy, gz], axis=1)

        pairs.append((pos_tensor, vjp_pos))
    return ad.make_op("trilinear", out, pairs)


class DenseGrid:
    """Learnable voxel lattice with clamp-to-edge trilinear queries."""

    def __init__(self, name, channels, res, bounds: SceneBounds, init=None,
                 dtype=np.float32, group="grids"):
        if isinstance(res, int):
            res = (res, res, res)
        self.bounds = bounds
        self.meta = GridMeta(res, bounds.lo, bounds.hi, channels)
        if init is None:
            data = np.zeros((channels, *res), dtype=dtype)
        else:
            data = np.asarray(init, dtype=dtype).reshape(channels, *res).copy()
        self.values = Parameter(name, data, group)

    @property
    def res(self):
        return self.meta.res

    @property
    def channels(self):
        return self.meta.channels

    def query(self, x, values: Tensor | None = None, pos_tensor=None, stats=None) -> Tensor:
        if values is None:
            values = Tensor(self.values.data)
        return trilinear(values, self.meta, x, pos_tensor=pos_tensor, stats=stats)

    def upscaled(self, new_res, name=None) -> "DenseGrid":
        """Trilinear resample onto a finer lattice (stage transition)."""
        if isinstance(new_res, int):
            new_res = (new_res, new_res, new_res)
        pts = lattice_points(self.bounds, new_res)
        vals = self.query(pts).data.T.reshape(self.channels, *new_res)
        return DenseGrid(name or self.values.name, self.channels, new_res,
                         self.bounds, init=vals, dtype=self.values.data.dtype,
                         group=self.values.group)


def lattice_points(bounds: SceneBounds, res) -> np.ndarray:
    """All vertex positions of a lattice, row-major (x slow, z fast), (N,3)."""
    axes = [np.linspace(bounds.lo[a], bounds.hi[a], res[a]) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


def sphere_sdf(x, center, radius):
    return np.linalg.norm(np.asarray(x) - center, axis=-1) - radius


def sphere_grid_values(bounds: SceneBounds, res, center=None, radius=None):
    """Analytic sphere SDF sampled at lattice vertices, negative inside."""
    if center is None:
        center = bounds.center
    if radius is None:
        radius = 0.4 * bounds.half_extent
    pts = lattice_points(bounds, res)
    return sphere_sdf(pts, center, radius).reshape(1, *res)


def gradient_stencil(x, voxel, lo, hi):
    """Offset positions for a one-voxel central-difference stencil.

    Arms are shortened against the domain boundary (one-sided in the
    limit). Returns (stacked offsets (6M, 3) ordered [+x -x +y -y +z -z],
    per-axis denominators (M, 3)).
    """
    x = np.asarray(x)
    offs, denoms = [], []
    for a in range(3):
        t_hi = np.minimum(voxel, hi[a] - x[:, a])
        t_lo = np.minimum(voxel, x[:, a] - lo[a])
        x_hi = x.copy()
        x_hi[:, a] += t_hi
        x_lo = x.copy()
        x_lo[:, a] -= t_lo
        offs += [x_hi, x_lo]
        denoms.append(np.maximum(t_hi + t_lo, 1e-12))
    return np.concatenate(offs, axis=0), np.stack(denoms, axis=1)


def combine_stencil(s: Tensor, denoms, dtype) -> Tensor:
    """(6M, 1) stencil SDF values -> (M, 3) finite-difference gradient."""
    M = denoms.shape[0]
    comps = [ad.div(ad.sub(s[(2 * a) * M:(2 * a + 1) * M],
                           s[(2 * a + 1) * M:(2 * a + 2) * M]),
                    denoms[:, a:a + 1].astype(dtype))
             for a in range(3)]
    return ad.concat(comps, axis=1)


def sdf_gradient(values: Tensor, meta: GridMeta, x, stats=None) -> Tensor:
    """Finite-difference gradient of the interpolated SDF, step = one voxel.

    All six stencil queries run as one fused lookup.
    """
    stacked, denoms = gradient_stencil(x, float(np.min(meta.voxel)), meta.lo, meta.hi)
    s = trilinear(values, meta, stacked, stats=stats)
    return combine_stencil(s, denoms, values.dtype)


DEGENERATE_NORMAL_EPS = 1e-9


def normal_from_gradient(grad: Tensor, stats=None):
    """Unit normals from raw SDF gradients; flat regions fall back to +z.

    The fallback is counted (stats["degenerate_normals"]) but treated as a
    valid shading normal downstream.
    """
    norms = np.linalg.norm(grad.data, axis=-1, keepdims=True)
    bad = norms < DEGENERATE_NORMAL_EPS
    n = ad.normalize(grad)
    if bad.any():
        if stats is not None:
            stats["degenerate_normals"] = stats.get("degenerate_normals", 0) + int(bad.sum())
        keep = (~bad).astype(grad.dtype)
        zaxis = np.zeros_like(grad.data)
        zaxis[:, 2] = 1.0
        n = ad.add(ad.mul(n, keep), zaxis * bad)
    return n


def sdf_normal(values: Tensor, meta: GridMeta, x, stats=None) -> Tensor:
    return normal_from_gradient(sdf_gradient(values, meta, x, stats), stats)


# ---------------------------------------------------------------------------
# multi-resolution hash encoding

def level_resolutions(coarsest, finest, levels):
    """Geometric progression floor(coarsest * b**l), b=(finest/coarsest)^(1/(L-1))."""
    if levels == 1:
        return [int(finest)]
    b = (finest / coarsest) ** (1.0 / (levels - 1))
    return [int(np.floor(coarsest * b ** l + 1e-6)) for l in range(levels)]


class HashMeta:
    __slots__ = ("levels", "res", "features", "table_size", "lo", "hi", "hashed")

    def __init__(self, levels, res, features, table_size, lo, hi):
        self.levels = levels
        self.res = res
        self.features = features
        self.table_size = table_size
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        # a level indexes directly while its vertex count fits in the table
        self.hashed = [r ** 3 > table_size for r in res]


def _level_indices(meta: HashMeta, level, i0):
    """Table rows (level-local) of the 8 cell corners, (M, 8) int32."""
    r = np.int32(meta.res[level])
    ix = i0[:, 0:1] + _CX32
    iy = i0[:, 1:2] + _CY32
    iz = i0[:, 2:3] + _CZ32
    if not meta.hashed[level]:
        return (ix * r + iy) * r + iz
    h = (ix.view(np.uint32) * np.uint32(HASH_PRIMES[0])
         ^ iy.view(np.uint32) * np.uint32(HASH_PRIMES[1])
         ^ iz.view(np.uint32) * np.uint32(HASH_PRIMES[2]))
    return (h & np.uint32(meta.table_size - 1)).view(np.int32)


def hash_query(tables: Tensor, meta: HashMeta, x, stats=None) -> Tensor:
    """Concatenated per-level trilinear features, (M, levels*features).

    tables: Tensor with data (levels * table_size, features). Identical
    positions always hash to identical feature vectors; there is no
    collision resolution (colliding vertices share a row by design).
    """
    x = np.asarray(x)
    if np.isnan(x).any():
        raise NumericsError("NaN query position")
    M = x.shape[0]
    F = meta.features
    T = meta.table_size
    dtype = tables.dtype
    u01 = np.clip((x - meta.lo) / (meta.hi - meta.lo), 0.0, 1.0).astype(dtype)

    out = np.empty((M, meta.levels * F), dtype=dtype)
    saved = []
    for l in range(meta.levels):
        r = meta.res[l]
        u = u01 * float(r - 1)
        i0 = np.minimum(u.astype(np.int32), r - 2)
        f = u - i0
        rows = _level_indices(meta, l, i0)                # level-local
        w8 = _corner_weights(f)
        gathered = tables.data[l * T + rows]              # (M, 8, F)
        out[:, l * F:(l + 1) * F] = np.einsum("mkf,mk->mf", gathered, w8)
        saved.append((rows, w8))

    def vjp_tables(g):
        # per-level bincounts keep the bin count at one table size
        gt = np.zeros((meta.levels * T, F), dtype=dtype)
        for l, (rows, w8) in enumerate(saved):
            flat = rows.reshape(-1)
            for c in range(F):
                wg = (w8 * g[:, l * F + c, None]).reshape(-1)
                gt[l * T:(l + 1) * T, c] = np.bincount(flat, weights=wg, minlength=T)
        return gt

    return ad.make_op("hash_query", out, [(tables, vjp_tables)])


class HashGrid:
    """Instant-hash feature stack: one 2^table_log2 table per level."""

    def __init__(self, name, bounds: SceneBounds, levels=16, coarsest=32,
                 finest=2048, features=2, table_log2=19, dtype=np.float32,
                 rng=None, group="grids"):
        self.bounds = bounds
        res = level_resolutions(coarsest, finest, levels)
        table_size = 2 ** table_log2
        self.meta = HashMeta(levels, res, features, table_size, bounds.lo, bounds.hi)
        rng = rng or np.random.default_rng(0)
        data = rng.uniform(-1e-4, 1e-4, size=(levels * table_size, features)).astype(dtype)
        self.tables = Parameter(name, data, group)

    @property
    def out_dim(self):
        return self.meta.levels * self.meta.features

    def query(self, x, tables: Tensor | None = None, stats=None) -> Tensor:
        if tables is None:
            tables = Tensor(self.tables.data)
        return hash_query(tables, self.meta, x, stats=stats)

    def level_blobs(self) -> dict:
        """Per-level views for checkpoint naming."""
        T = self.meta.table_size
        return {f"fields/hash/level{l}": self.tables.data[l * T:(l + 1) * T]
                for l in range(self.meta.levels)}
