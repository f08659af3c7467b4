"""Image comparison: MSE / PSNR in linear RGB, with optional per-channel
scale alignment for albedo maps and foreground masking.

The metrics command compares same-named files across two directories.
A pair's foreground mask is the rendered weight map (`<stem>_weight.npy`,
threshold 0.5) when present, else a reference `<stem>_mask.png`; otherwise
the full image is compared. File names containing "albedo" are aligned by
a least-squares scalar per channel before scoring, which removes the global
material/light scale ambiguity.
"""

from __future__ import annotations

import os

import numpy as np

from .config import ValidationError
from .dataset import load_values

_AUX_SUFFIXES = ("_mask", "_weight", "_depth")


def mse(pred, ref, mask=None) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValidationError(f"size mismatch: {pred.shape} vs {ref.shape}")
    d2 = (pred - ref) ** 2
    if mask is not None:
        m = np.broadcast_to(mask[..., None] if mask.ndim == d2.ndim - 1 else mask, d2.shape)
        if not m.any():
            return 0.0
        return float(d2[m].mean())
    return float(d2.mean())


def psnr(mse_value: float) -> float:
    if mse_value <= 0.0:
        return float("inf")
    return -10.0 * np.log10(mse_value)


def align_channel_scale(pred, ref, mask=None):
    """Least-squares scalar per channel over the foreground: min |a*pred - ref|^2."""
    p = np.asarray(pred, dtype=np.float64).reshape(-1, pred.shape[-1])
    r = np.asarray(ref, dtype=np.float64).reshape(-1, ref.shape[-1])
    if mask is not None:
        m = np.asarray(mask).reshape(-1)
        p, r = p[m], r[m]
    num = (p * r).sum(axis=0)
    den = np.maximum((p * p).sum(axis=0), 1e-12)
    return num / den


def angular_error_deg(n_pred, n_ref, mask=None):
    """Mean angle in degrees between unit-normal maps over the mask."""
    a = np.asarray(n_pred, dtype=np.float64)
    b = np.asarray(n_ref, dtype=np.float64)
    a = a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-12)
    b = b / np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), 1e-12)
    cos = np.clip((a * b).sum(axis=-1), -1.0, 1.0)
    ang = np.degrees(np.arccos(cos))
    if mask is not None:
        ang = ang[mask]
    return float(ang.mean()) if ang.size else 0.0


def pair_metrics(pred, ref, mask=None, align=False) -> dict:
    scale = None
    if align:
        scale = align_channel_scale(pred, ref, mask)
        pred = pred * scale
    m = mse(pred, ref, mask)
    row = {"mse": m, "psnr": psnr(m)}
    if scale is not None:
        row["scale"] = [float(s) for s in scale]
    return row


def _find_mask(rendered_dir, reference_dir, name):
    stem = os.path.splitext(name)[0]
    for suffix in _AUX_SUFFIXES:
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
    wpath = os.path.join(rendered_dir, stem + "_weight.npy")
    if os.path.exists(wpath):
        return np.load(wpath)[..., 0] > 0.5
    mpath = os.path.join(reference_dir, stem + "_mask.png")
    if os.path.exists(mpath):
        return load_values(mpath)[..., 0] > 0.5
    return None


def compare_dirs(rendered_dir, reference_dir) -> list:
    """Per-file metric rows for same-named images in two directories."""
    names = sorted(
        n for n in os.listdir(rendered_dir)
        if n.endswith((".png", ".npy"))
        and os.path.exists(os.path.join(reference_dir, n))
        and not any(os.path.splitext(n)[0].endswith(s) for s in _AUX_SUFFIXES))
    if not names:
        raise ValidationError(
            f"no matching image files between {rendered_dir} and {reference_dir}")
    rows = []
    for name in names:
        pred = load_values(os.path.join(rendered_dir, name))
        ref = load_values(os.path.join(reference_dir, name))
        mask = _find_mask(rendered_dir, reference_dir, name)
        row = pair_metrics(pred, ref, mask, align="albedo" in name)
        row["name"] = name
        rows.append(row)
    return rows


def summarize(rows) -> dict:
    vals = [r["psnr"] for r in rows]
    finite = [v for v in vals if np.isfinite(v)]
    return {
        "mean_mse": float(np.mean([r["mse"] for r in rows])),
        "mean_psnr": float(np.mean(finite)) if finite else float("inf"),
        "count": len(rows),
    }


def format_table(rows, summary) -> str:
    lines = [f"{'file':32s} {'mse':>12s} {'psnr':>10s}"]
    for r in rows:
        p = "inf" if not np.isfinite(r["psnr"]) else f"{r['psnr']:.3f}"
        lines.append(f"{r['name']:32s} {r['mse']:12.6g} {p:>10s}")
    lines.append(f"{'mean':32s} {summary['mean_mse']:12.6g} {summary['mean_psnr']:10.3f}")
    return "\n".join(lines)
