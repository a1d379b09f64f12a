"""The three training losses: weighted count-group cross-entropy, pixel-wise
Euclidean density loss, and their weighted sum L = lambda * L_c + L_d.

All functions accept torch tensors (differentiable) or array-likes and
average over the batch dimension when one is present.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, InputError

EPS = 1e-12  # guards log(0) in the classification loss

PER_PIXEL_MEAN = "per_pixel_mean"
PER_IMAGE_SUM = "per_image_sum"
_NORMALIZATIONS = (PER_PIXEL_MEAN, PER_IMAGE_SUM)


@dataclass
class LossConfig:
    """Weighting factor, per-class weights, and density-loss normalization.

    ``per_pixel_mean`` (default) is mean squared error per pixel, which keeps
    the loss scale independent of patch size; ``per_image_sum`` is the literal
    per-image Euclidean norm of the residual.
    """

    lam: float = 1e-4
    class_weights: np.ndarray | None = field(default=None)
    density_loss_normalization: str = PER_PIXEL_MEAN

    def validate(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.density_loss_normalization not in _NORMALIZATIONS:
            raise ConfigError(
                f"unknown density loss normalization {self.density_loss_normalization!r}; "
                f"expected one of {_NORMALIZATIONS}")


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    t = torch.as_tensor(np.asarray(x))
    if like is not None:
        t = t.to(like.dtype)
    return t


def classification_loss(class_probs, labels, weights=None) -> torch.Tensor:
    """Batch mean of -w_y * log(p_y + eps)."""
    probs = _as_tensor(class_probs)
    if probs.dim() == 1:
        probs = probs.unsqueeze(0)
    labels = torch.atleast_1d(torch.as_tensor(labels, dtype=torch.long))
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise InputError(f"class label outside [0, {probs.shape[1]})")
    picked = probs.gather(1, labels.unsqueeze(1)).squeeze(1)
    nll = -torch.log(picked + EPS)
    if weights is not None:
        w = _as_tensor(weights, like=nll)
        nll = nll * w[labels]
    return nll.mean()


def density_loss(predicted, target, normalization: str = PER_PIXEL_MEAN) -> torch.Tensor:
    """Pixel-wise Euclidean density loss, batch-averaged.

    per_pixel_mean: mean over pixels of the squared residual.
    per_image_sum:  L2 norm of the residual per image.
    """
    pred = _as_tensor(predicted)
    tgt = _as_tensor(target, like=pred)
    if pred.shape != tgt.shape:
        raise InputError(f"density shapes differ: {tuple(pred.shape)} vs {tuple(tgt.shape)}")
    if normalization not in _NORMALIZATIONS:
        raise ConfigError(f"unknown density loss normalization {normalization!r}")
    diff = pred - tgt
    if diff.dim() <= 2:
        diff = diff.unsqueeze(0)
    flat = diff.reshape(diff.shape[0], -1)
    if normalization == PER_PIXEL_MEAN:
        return (flat ** 2).mean(dim=1).mean()
    return torch.linalg.vector_norm(flat, dim=1).mean()


def unified_loss(classification, density, lam: float):
    """L = lambda * L_c + L_d."""
    return lam * classification + density
