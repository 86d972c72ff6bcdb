"""Training losses.

Five terms, each a batch-averaged Euclidean norm (the style-norm term is a
plain norm of the mixed codes), combined into one weighted objective:

    total = w.l2 * pixel + w.identity * identity + w.w_norm * style_norm
            + w.aging * aging + w.race * race

Terms whose weight is zero still show up in the breakdown but contribute no
gradient, so an all-zero weighting leaves parameters untouched.
"""

from dataclasses import dataclass

import torch

from .core import LossWeights, ShapeError, ValidationError, validate_style_codes


@dataclass
class LossBreakdown:
    """One evaluation of the objective; fields are 0-dim tensors."""

    l2: torch.Tensor
    identity: torch.Tensor
    aging: torch.Tensor
    w_norm: torch.Tensor
    race: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {name: float(getattr(self, name))
                for name in ("l2", "identity", "aging", "w_norm", "race", "total")}

    def is_finite(self) -> bool:
        return all(torch.isfinite(getattr(self, n))
                   for n in ("l2", "identity", "aging", "w_norm", "race", "total"))


def _as_batch(t: torch.Tensor) -> torch.Tensor:
    return t.unsqueeze(0) if t.dim() == 3 else t


def _batch_norm_mean(diff: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of per-sample Euclidean norms."""
    return diff.reshape(diff.shape[0], -1).norm(dim=1).mean()


def l2_loss(x: torch.Tensor, x_prime: torch.Tensor) -> torch.Tensor:
    """Pixel-space distance ``mean_b ||x_b - x'_b||_2``."""
    if x.shape != x_prime.shape:
        raise ShapeError(f"pixel loss inputs differ in shape: {tuple(x.shape)} "
                         f"vs {tuple(x_prime.shape)}")
    return _batch_norm_mean(_as_batch(x) - _as_batch(x_prime))


def _embedding_loss(embed, x, x_prime) -> torch.Tensor:
    a, b = embed(_as_batch(x)), embed(_as_batch(x_prime))
    return _batch_norm_mean(a - b)


def identity_loss(x, x_prime, identity_net) -> torch.Tensor:
    """Distance between identity embeddings of the two images."""
    return _embedding_loss(identity_net, x, x_prime)


def aging_loss(x, x_prime, age_net) -> torch.Tensor:
    """Distance between age-feature embeddings of the two images."""
    return _embedding_loss(age_net, x, x_prime)


def race_loss(x, x_prime, race_net) -> torch.Tensor:
    """Distance between pre-classifier race embeddings of the two images."""
    return _embedding_loss(race_net.embedding, x, x_prime)


def w_norm_loss(codes: torch.Tensor, batch_size: int = None) -> torch.Tensor:
    """Sum of per-sample style-code norms divided by the batch size.

    Keeps mixed codes small, which suppresses ghosting artifacts.
    """
    validate_style_codes(codes, "mixed codes")
    batch = codes.unsqueeze(0) if codes.dim() == 2 else codes
    if batch_size is None:
        batch_size = batch.shape[0]
    if batch_size < 1:
        raise ValidationError(f"batch size must be >= 1, got {batch_size}")
    return batch.reshape(batch.shape[0], -1).norm(dim=1).sum() / batch_size


class CompositeLoss:
    """The weighted objective, bound to the three frozen embedding backbones."""

    def __init__(self, identity_net, age_net, race_net, weights: LossWeights = None):
        self.identity_net = identity_net
        self.age_net = age_net
        self.race_net = race_net
        self.weights = weights or LossWeights()

    def __call__(self, x, x_prime, codes) -> LossBreakdown:
        w = self.weights
        terms = {
            "l2": (w.l2, l2_loss(x, x_prime)),
            "identity": (w.identity, identity_loss(x, x_prime, self.identity_net)),
            "aging": (w.aging, aging_loss(x, x_prime, self.age_net)),
            "w_norm": (w.w_norm, w_norm_loss(codes)),
            "race": (w.race, race_loss(x, x_prime, self.race_net)),
        }
        # zero-weight terms stay out of the graph so they generate no gradient
        active = [weight * value for weight, value in terms.values() if weight != 0.0]
        total = sum(active) if active else torch.zeros((), dtype=terms["l2"][1].dtype)
        return LossBreakdown(total=total, **{k: v for k, (_, v) in terms.items()})
