"""Training objectives on NCHW tensors.

"L2 norm" below means the root of the mean of squares per sample, averaged
over the batch; "L1" is the mean absolute difference.
"""

from __future__ import annotations

from typing import Sequence

from ..autodiff import Tensor, ops
from ..errors import DimensionError

_PER_SAMPLE = (1, 2, 3)


def _same_shape(name: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


def l2(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("l2", a, b)
    d = a - b
    if d.ndim == 4:
        return ops.mean(ops.rms(d, axis=_PER_SAMPLE))
    return ops.rms(d)


def l1(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("l1", a, b)
    return ops.mean(ops.abs(a - b))


def loss_diff(eps: Tensor, eps_pred: Tensor) -> Tensor:
    """Noise-prediction error."""
    return l2(eps, eps_pred)


def loss_scc(pseudo_label: Tensor, restored: Tensor, squared: bool = False) -> Tensor:
    """Consistency between the sampled feature and the gamma-brightened pseudo-label.

    ``squared`` switches from the mean absolute error to the mean squared error.
    """
    _same_shape("loss_scc", pseudo_label, restored)
    d = pseudo_label - restored
    return ops.mean(d * d) if squared else ops.mean(ops.abs(d))


def loss_con(images: Sequence[Tensor], reconstructions: Sequence[Tensor]) -> Tensor:
    """Sum over the exposure pair of the reconstruction L2 norms."""
    terms = [l2(i, r) for i, r in zip(images, reconstructions)]
    return terms[0] + terms[1]


def loss_rec(features: Sequence[Tensor], reflectances: Sequence[Tensor],
             illuminations: Sequence[Tensor]) -> Tensor:
    """Cross reconstruction: every reflectance with every feature's own illumination."""
    total = None
    for r in reflectances:
        for f, l in zip(features, illuminations):
            term = l1(f, r * l)
            total = term if total is None else total + term
    return total


def loss_ref(r1: Tensor, r2: Tensor) -> Tensor:
    return l1(r1, r2)


def edge_weights(reflectance: Tensor, lambda_g: float):
    """``exp(-lambda_g * |grad R|)`` per direction, with |grad R| averaged over channels."""
    gx = ops.mean(ops.abs(ops.diff_x(reflectance)), axis=1, keepdims=True)
    gy = ops.mean(ops.abs(ops.diff_y(reflectance)), axis=1, keepdims=True)
    return ops.exp(gx * -lambda_g), ops.exp(gy * -lambda_g)


def loss_ill(illuminations: Sequence[Tensor], reflectances: Sequence[Tensor],
             lambda_g: float) -> Tensor:
    """Edge-aware smoothness of the illumination maps."""
    total = None
    for l, r in zip(illuminations, reflectances):
        if l.shape[0] != r.shape[0] or l.shape[2:] != r.shape[2:]:
            raise DimensionError(f"loss_ill: illumination {l.shape} vs reflectance {r.shape}")
        wx, wy = edge_weights(r, lambda_g)
        both = ops.concat([ops.diff_x(l) * wx, ops.diff_y(l) * wy], axis=1)
        term = ops.mean(ops.rms(both, axis=_PER_SAMPLE))
        total = term if total is None else total + term
    return total
