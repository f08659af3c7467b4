"""Training objectives.

Every term is computed as (sum, count) so that worker shards can be reduced
exactly: shards contribute partial sums, the trainer divides once by the
global count. All written-out sums therefore behave as means over their
index sets, which keeps the default weights independent of batch size.

Reduction conventions: squared-error terms sum over channels and average
over rays/points; the white-light penalty averages over rays, directions
and channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NumericsError, Tensor

TERM_NAMES = ("pbr", "rad", "n", "kappa", "zeta", "sg", "white", "eik")


@dataclass
class LossWeights:
    """Per-term weights; defaults differ between the dense and hash modes."""
    pbr: float
    rad: float
    n: float
    kappa: float
    zeta: float
    sg: float
    white: float
    eik: float

    @classmethod
    def dense_defaults(cls):
        return cls(pbr=1.0, rad=1.0, n=0.002, kappa=0.0005, zeta=0.0005,
                   sg=0.0005, white=0.0001, eik=0.0)

    @classmethod
    def hash_defaults(cls):
        return cls(pbr=10.0, rad=10.0, n=0.01, kappa=0.1, zeta=0.01,
                   sg=0.1, white=0.01, eik=0.01)

    def get(self, name: str) -> float:
        return getattr(self, name)


def loss_rec_sq(pred: Tensor, gt) -> tuple[Tensor, int]:
    """Sum over rays of the squared RGB error; count = number of rays."""
    diff = ad.sub(pred, gt)
    return ad.sum_(ad.mul(diff, diff)), pred.shape[0]


def loss_smooth_pair(a: Tensor, b: Tensor) -> tuple[Tensor, int]:
    """Sum of squared differences between a quantity and its perturbed twin."""
    diff = ad.sub(a, b)
    return ad.sum_(ad.mul(diff, diff)), a.shape[0]


def loss_white_sum(radiance: Tensor) -> tuple[Tensor, int]:
    """Color-shift penalty |L - mean_channel(L)|, summed over every entry.

    radiance: (..., 3). Count covers rays x directions x channels, so the
    mean matches the stated reduction (gray light scores exactly zero).
    """
    mean_c = ad.mean_(radiance, axis=-1, keepdims=True)
    return ad.sum_(ad.abs_(ad.sub(radiance, mean_c))), radiance.size


def loss_eikonal_sum(sdf_grad: Tensor) -> tuple[Tensor, int]:
    """Sum of (|grad s| - 1)^2 over sample points."""
    norm2 = ad.sum_(ad.mul(sdf_grad, sdf_grad), axis=-1)
    norm = ad.power(ad.maximum_const(norm2, 1e-20), 0.5)
    dev = ad.sub(norm, 1.0)
    return ad.sum_(ad.mul(dev, dev)), sdf_grad.shape[0]


def as_mean(term: tuple[Tensor, int]) -> Tensor:
    s, count = term
    if count == 0:
        return Tensor(np.zeros((), dtype=s.dtype))
    return ad.mul(s, 1.0 / count)


def total_loss(terms: dict, weights: LossWeights) -> Tensor:
    """Weighted sum of term means; non-finite terms are a hard error.

    terms: {name: (sum Tensor, count)}. Terms absent from the dict (or with
    zero count) contribute nothing.
    """
    total = None
    for name, (s, count) in terms.items():
        if not np.all(np.isfinite(s.data)):
            raise NumericsError(f"loss term {name!r} is not finite")
        w = weights.get(name)
        if w == 0.0 or count == 0:
            continue
        piece = ad.mul(s, w / count)
        total = piece if total is None else ad.add(total, piece)
    if total is None:
        raise ValueError("no active loss terms")
    return total


def total_value(term_values: dict, weights: LossWeights) -> float:
    """Same weighted sum over already-reduced scalar means (logging path)."""
    return float(sum(weights.get(k) * v for k, v in term_values.items()))
