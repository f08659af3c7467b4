"""Finite-difference verification of analytic gradients.

Two suites:

* the op suite checks every tape op kind in float64 against central
  differences (step 1e-4), relative error per element with denominator
  max(|analytic|, 1e-8);
* the end-to-end suite differentiates the full rendering loss on a tiny
  16-cube scene with respect to sampled grid entries and MLP weights.

Both are used by the `gradcheck` CLI command and by the test suite.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .optim import Parameter

FD_STEP = 1e-4
OP_TOL = 1e-5
END_TO_END_TOL = 1e-3


def fd_gradient(f, x0, h=FD_STEP):
    """Central-difference gradient of scalar f at x0, elementwise."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x0)
        flat[i] = orig - h
        fm = f(x0)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_error(analytic, numeric):
    denom = np.maximum(np.abs(analytic), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_scalar_fn(build, arrays, h=FD_STEP):
    """Compare tape gradients of build(tape, leaves)->scalar against FD.

    arrays: list of float64 ndarrays; every one is treated as a leaf.
    Returns the max relative error over all leaves.
    """
    params = [Parameter(f"p{i}", np.array(a, dtype=np.float64)) for i, a in enumerate(arrays)]

    tape = ad.Tape()
    leaves = [tape.param(p) for p in params]
    loss = build(tape, leaves)
    grads = tape.backward(loss)
    analytic = [grads.get(p) for p in params]

    worst = 0.0
    for k, p in enumerate(params):
        def f(x, k=k):
            saved = params[k].data
            params[k].data = x
            t2 = ad.Tape()
            out = build(t2, [t2.param(q) for q in params])
            params[k].data = saved
            return float(out.data)

        numeric = fd_gradient(f, p.data.copy(), h)
        worst = max(worst, rel_error(analytic[k], numeric))
    return worst


def _proj(rng, shape):
    return rng.standard_normal(shape)


def core_op_cases(rng):
    """(name, arrays, build) triples covering every core op kind."""
    cases = []

    def scalarize(t, r):
        return ad.sum_(ad.mul(t, r))

    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    r = _proj(rng, (3, 4))
    cases.append(("add", [a, b], lambda tp, L: scalarize(ad.add(L[0], L[1]), r)))
    cases.append(("sub", [a, b], lambda tp, L: scalarize(ad.sub(L[0], L[1]), r)))
    cases.append(("mul", [a, b], lambda tp, L: scalarize(ad.mul(L[0], L[1]), r)))
    cases.append(("div", [a, b + 3.0], lambda tp, L: scalarize(ad.div(L[0], L[1]), r)))

    bias = rng.standard_normal((4,))
    cases.append(("add_broadcast", [a, bias],
                  lambda tp, L: scalarize(ad.add(L[0], L[1]), r)))

    m1 = rng.standard_normal((3, 5))
    m2 = rng.standard_normal((5, 2))
    rm = _proj(rng, (3, 2))
    cases.append(("matmul", [m1, m2], lambda tp, L: scalarize(ad.matmul(L[0], L[1]), rm)))

    x = rng.standard_normal((4, 3))
    rx = _proj(rng, (4, 3))
    cases.append(("exp", [x], lambda tp, L: scalarize(ad.exp(L[0]), rx)))
    cases.append(("log", [np.abs(x) + 0.5], lambda tp, L: scalarize(ad.log(L[0]), rx)))
    cases.append(("sigmoid", [x], lambda tp, L: scalarize(ad.sigmoid(L[0]), rx)))
    cases.append(("softplus", [x], lambda tp, L: scalarize(ad.softplus(L[0]), rx)))
    # keep inputs away from the relu/abs/max kinks by at least 10*FD_STEP
    far = x + np.sign(x) * 0.01
    cases.append(("relu", [far], lambda tp, L: scalarize(ad.relu(L[0]), rx)))
    cases.append(("abs", [far], lambda tp, L: scalarize(ad.abs_(L[0]), rx)))
    cases.append(("max_const", [far], lambda tp, L: scalarize(ad.maximum_const(L[0], 0.0), rx)))
    cases.append(("min_const", [far], lambda tp, L: scalarize(ad.minimum_const(L[0], 0.0), rx)))
    cases.append(("power", [np.abs(x) + 0.5],
                  lambda tp, L: scalarize(ad.power(L[0], 1.5), rx)))

    rs = _proj(rng, (4, 1))
    rmean = _proj(rng, (3,))
    cases.append(("sum_axis", [x], lambda tp, L: scalarize(ad.sum_(L[0], axis=1, keepdims=True), rs)))
    cases.append(("mean", [x], lambda tp, L: scalarize(ad.mean_(L[0], axis=0), rmean)))

    c = rng.uniform(0.3, 0.9, size=(3, 5))
    rc = _proj(rng, (3, 5))
    cases.append(("cumprod", [c], lambda tp, L: scalarize(ad.cumprod(L[0], axis=1), rc)))

    v = rng.standard_normal((6, 3)) * 2.0
    rv = _proj(rng, (6, 3))
    cases.append(("normalize", [v], lambda tp, L: scalarize(ad.normalize(L[0]), rv)))

    r2 = _proj(rng, (6, 4))
    cases.append(("concat", [a, b],
                  lambda tp, L: scalarize(ad.concat([L[0], L[1]], axis=0), r2)))
    rsl = _proj(rng, (2, 2))
    rrs = _proj(rng, (4, 3))
    cases.append(("slice", [a], lambda tp, L: scalarize(L[0][1:, 0:2], rsl)))
    cases.append(("reshape", [a], lambda tp, L: scalarize(ad.reshape(L[0], (4, 3)), rrs)))

    src = rng.standard_normal((5, 2))
    idx = np.array([0, 3, 3, 1, 4, 2, 0])
    rg = _proj(rng, (7, 2))
    cases.append(("gather", [src], lambda tp, L: scalarize(ad.gather(L[0], idx), rg)))
    vals = rng.standard_normal((7, 2))
    rsc = _proj(rng, (5, 2))
    cases.append(("scatter_add", [vals],
                  lambda tp, L: scalarize(ad.scatter_add(L[0], idx, 5), rsc)))

    return cases


def field_op_cases(rng):
    """Fused field/shading ops (trilinear, hash, envmap), checked per element."""
    from . import fields, shading

    cases = []
    bounds = fields.SceneBounds(np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))

    vals = rng.standard_normal((2, 4, 4, 4))
    x = rng.uniform(-0.9, 0.9, size=(5, 3))
    rq = _proj(rng, (5, 2))
    grid = fields.DenseGrid("g", 2, (4, 4, 4), bounds, init=vals, dtype=np.float64)

    def build_tri(tp, L):
        q = fields.trilinear(L[0], grid.meta, tp.leaf(x, requires_grad=False).data)
        return ad.sum_(ad.mul(q, rq))

    cases.append(("trilinear_values", [vals], build_tri))

    # position gradient of the same query
    def build_tri_pos(tp, L):
        q = fields.trilinear(tp.leaf(vals, requires_grad=False), grid.meta, L[0],
                             pos_tensor=L[0])
        return ad.sum_(ad.mul(q, rq))

    cases.append(("trilinear_positions", [x], build_tri_pos))

    hg = fields.HashGrid("h", bounds, levels=3, coarsest=4, finest=16,
                         features=2, table_log2=8, dtype=np.float64, rng=rng)
    xh = rng.uniform(-0.9, 0.9, size=(4, 3))
    rh = _proj(rng, (4, 6))

    def build_hash(tp, L):
        q = fields.hash_query(L[0], hg.meta, xh)
        return ad.sum_(ad.mul(q, rh))

    cases.append(("hash_query", [hg.tables.data.copy()], build_hash))

    env = rng.uniform(0.1, 2.0, size=(6, 12, 3))
    dirs = rng.standard_normal((5, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    re_ = _proj(rng, (5, 3))

    def build_env(tp, L):
        q = shading.envmap_lookup(L[0], dirs)
        return ad.sum_(ad.mul(q, re_))

    cases.append(("envmap_bilinear", [env], build_env))
    return cases


def run_op_suite(tol=OP_TOL, seed=0, include_field_ops=True):
    """Check every op kind; returns (all_passed, [(name, err, ok)])."""
    rng = np.random.default_rng(seed)
    cases = core_op_cases(rng)
    if include_field_ops:
        cases += field_op_cases(rng)
    report = []
    for name, arrays, build in cases:
        err = check_scalar_fn(build, arrays)
        report.append((name, err, err < tol))
    return all(ok for _, _, ok in report), report


def run_end_to_end(tol=END_TO_END_TOL, seed=0, n_entries=8):
    """FD-check the loss -> grid entry / MLP weight chain on a 16-cube scene.

    The render step plan (sample positions, quadrature directions, surface
    set, smoothness offsets) is frozen from the unperturbed parameters so
    that both FD sides evaluate the same computational graph.
    """
    from .render import build_e2e_case

    case = build_e2e_case(seed=seed)
    loss0, grads = case.loss_and_grads()

    worst = 0.0
    checked = []
    rng = np.random.default_rng(seed + 1)
    for pname, param in case.check_params():
        g = grads.get(param)
        flat_g = g.reshape(-1)
        order = np.argsort(-np.abs(flat_g))
        picks = order[:max(1, n_entries // 2)].tolist()
        picks += rng.integers(0, flat_g.size, size=n_entries - len(picks)).tolist()
        for i in picks:
            a = flat_g[i]
            if abs(a) < 1e-9:
                continue
            flat = param.data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + FD_STEP
            fp = case.loss_only()
            flat[i] = orig - FD_STEP
            fm = case.loss_only()
            flat[i] = orig
            n = (fp - fm) / (2.0 * FD_STEP)
            err = abs(a - n) / max(abs(a), 1e-8)
            worst = max(worst, err)
            checked.append((pname, int(i), err))
    return worst < tol, worst, checked
