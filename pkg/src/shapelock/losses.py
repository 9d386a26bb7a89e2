"""Training objectives: masked surrounding L1, adversarial MSE, cycle and
identity L1, total-loss assembly, and the Dice-Focal segmentation loss.

All tensor-valued functions are differentiable with respect to the
generated image / prediction argument. The surrounding L1 is the
shape-preservation term: it pins every pixel outside the lung mask of the
translated image to its source value, so only lung content may change.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DimensionMismatchError, DomainMismatchError, EmptyRegionError, ParameterError

FOCAL_PROB_EPS = 1e-7  # probability clamp inside the focal log, 32-bit safe
DICE_EPS = 1e-5


@dataclass(frozen=True)
class LossWeights:
    """Weights of the total objective: delta on cycle, lambda on surrounding L1.

    The identity term defaults to 0 (switched off): it pushes the
    generators toward leaving images unchanged, which blocks the
    healthy-to-pathological transformation early in training.
    """

    delta: float = 10.0
    lambda_: float = 1.0
    gamma_identity: float = 0.0

    def __post_init__(self):
        if self.delta < 0 or self.lambda_ < 0 or self.gamma_identity < 0:
            raise ParameterError("loss weights must be >= 0")


@dataclass
class LossBreakdown:
    """Per-term values of one generator objective evaluation.

    total == adv_g + adv_f + delta*cycle + lambda*surrounding_l1
             + gamma_identity*identity, by construction.
    """

    adv_g: float
    adv_f: float
    cycle: float
    surrounding_l1: float
    identity: float
    total: float

    def to_dict(self) -> dict:
        return {
            "adv_g": self.adv_g,
            "adv_f": self.adv_f,
            "cycle": self.cycle,
            "surrounding_l1": self.surrounding_l1,
            "identity": self.identity,
            "total": self.total,
        }


def _as_keep(mask: torch.Tensor) -> torch.Tensor:
    """(1 - mask) as a float tensor: 1 outside the mask, 0 inside."""
    if mask.dtype == torch.bool:
        return (~mask).to(torch.get_default_dtype())
    return 1.0 - mask


def surrounding_region(img: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Zero the image inside the mask, keep it untouched outside."""
    if img.shape != mask.shape:
        raise DimensionMismatchError(f"image {tuple(img.shape)} vs mask {tuple(mask.shape)}")
    return img * _as_keep(mask).to(img.dtype)


def surrounding_l1(
    i_healthy: torch.Tensor,
    i_generated: torch.Tensor,
    mask: torch.Tensor,
    average_over: str = "outside",
) -> torch.Tensor:
    """Mean absolute difference of the two images restricted to pixels outside the mask.

    average_over:
        "outside": divide by the count of mask=0 pixels (differences inside
            the mask are identically zero, so averaging over them would only
            shrink the loss by a constant factor).
        "all": divide by the total pixel count instead.
    """
    if i_healthy.shape != i_generated.shape:
        raise DimensionMismatchError(
            f"images {tuple(i_healthy.shape)} vs {tuple(i_generated.shape)}"
        )
    if i_healthy.shape != mask.shape:
        raise DimensionMismatchError(f"image {tuple(i_healthy.shape)} vs mask {tuple(mask.shape)}")
    if average_over not in ("outside", "all"):
        raise ParameterError(f"average_over must be 'outside' or 'all', got {average_over!r}")
    keep = _as_keep(mask).to(i_healthy.dtype)
    n_outside = keep.sum()
    if average_over == "outside":
        if float(n_outside) == 0.0:
            raise EmptyRegionError("mask covers the whole image; surrounding region is empty")
        denom = n_outside
    else:
        denom = i_healthy.numel()
    return (torch.abs(i_healthy - i_generated) * keep).sum() / denom


def adversarial_mse(disc_scores: torch.Tensor, target_is_real: bool) -> torch.Tensor:
    """Least-squares GAN objective: mean squared distance to the 1/0 target."""
    target = 1.0 if target_is_real else 0.0
    return torch.mean((disc_scores - target) ** 2)


def discriminator_mse(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Discriminator step objective: 0.5 * (MSE to 1 on real + MSE to 0 on fake)."""
    return 0.5 * (adversarial_mse(real_scores, True) + adversarial_mse(fake_scores, False))


def cycle_consistency(x: torch.Tensor, x_reconstructed: torch.Tensor) -> torch.Tensor:
    """L1 distance between an image and its round-trip reconstruction."""
    if x.shape != x_reconstructed.shape:
        raise DimensionMismatchError(f"{tuple(x.shape)} vs {tuple(x_reconstructed.shape)}")
    return torch.mean(torch.abs(x - x_reconstructed))


def identity_loss(y: torch.Tensor, g_of_y: torch.Tensor) -> torch.Tensor:
    """L1 penalty for a generator applied to its own target domain."""
    if y.shape != g_of_y.shape:
        raise DimensionMismatchError(f"{tuple(y.shape)} vs {tuple(g_of_y.shape)}")
    return torch.mean(torch.abs(y - g_of_y))


def total_cyclegan_loss(
    adv_g, adv_f, cycle, surrounding, identity=0.0, weights: LossWeights | None = None
) -> LossBreakdown:
    """Assemble the weighted generator objective.

    Pure arithmetic on whatever scalar type the terms carry (floats,
    Fractions, 0-dim tensors), so exact-arithmetic tests can drive it.
    """
    w = weights or LossWeights()
    total = adv_g + adv_f + w.delta * cycle + w.lambda_ * surrounding + w.gamma_identity * identity
    return LossBreakdown(
        adv_g=adv_g,
        adv_f=adv_f,
        cycle=cycle,
        surrounding_l1=surrounding,
        identity=identity,
        total=total,
    )


def dice_focal_loss(
    pred_probs: torch.Tensor, target: torch.Tensor, focal_gamma: float = 2.0
) -> torch.Tensor:
    """Soft-Dice loss plus focal cross-entropy, equal unit weights.

    pred_probs must already be probabilities in [0, 1]; target is a binary
    mask. The focal exponent down-weights easy pixels so the scarce,
    hard-to-segment ones dominate.
    """
    if pred_probs.shape != target.shape:
        raise DimensionMismatchError(f"{tuple(pred_probs.shape)} vs {tuple(target.shape)}")
    if float(pred_probs.min()) < 0.0 or float(pred_probs.max()) > 1.0:
        raise DomainMismatchError("predictions must be probabilities in [0, 1]")
    if focal_gamma < 0:
        raise ParameterError("focal_gamma must be >= 0")
    t = target.to(pred_probs.dtype)

    intersection = (pred_probs * t).sum()
    dice_part = 1.0 - (2.0 * intersection + DICE_EPS) / (pred_probs.sum() + t.sum() + DICE_EPS)

    p = torch.clamp(pred_probs, FOCAL_PROB_EPS, 1.0 - FOCAL_PROB_EPS)
    p_t = torch.where(t > 0.5, p, 1.0 - p)
    focal_part = torch.mean(-((1.0 - p_t) ** focal_gamma) * torch.log(p_t))

    return dice_part + focal_part
