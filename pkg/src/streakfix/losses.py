"""Loss functions: focus-weighted least-squares GAN terms plus regularizers.

The discriminator and generator objectives are least-squares GAN
losses where each score-map location can carry a non-negative weight
from a focus map.  Focus maps measure, per location, how far the
generated image's deep features are from the reference's, normalized
to unit mean, so the adversarial game concentrates on regions that
are still wrong.  A perceptual L1 term (deep features) and a plain
MSE term are provided as reconstruction regularizers.

Focus maps are constants by design: no gradient flows through their
construction, for either player.
"""

from __future__ import annotations

import dataclasses

import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError
from .networks import ScoreMap
from .perceptual import PERCEPTUAL_TAP, FeatureTap

# Below this mean feature distance the two images are treated as
# perceptually identical and the focus map degenerates to all-ones.
ZERO_SIGNAL_EPS = 1e-12


@dataclasses.dataclass
class FocusMap:
    """Per-location weights (B, 1, h, w), unit mean per sample, detached."""

    data: torch.Tensor
    tap: FeatureTap


@dataclasses.dataclass(frozen=True)
class LossWeights:
    """Mixing coefficients for the composite generator objective."""

    lambda_a: float = 1.0
    lambda_m: float = 100.0
    lambda_p: float = 10.0

    def __post_init__(self):
        for name in ("lambda_a", "lambda_m", "lambda_p"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")


def focus_map(extractor, reference, candidate, tap):
    """Weights from the per-location feature distance, unit mean per sample.

    At each spatial location of the tap's feature map, takes the
    Euclidean norm of the channel-wise feature difference between
    `reference` and `candidate`, then divides by the per-sample mean of
    those norms.  Computed under no_grad: the result is a constant.
    """
    if tuple(torch.as_tensor(reference).shape) != tuple(torch.as_tensor(candidate).shape):
        raise InputError(
            f"focus map inputs must share a shape, got "
            f"{tuple(torch.as_tensor(reference).shape)} vs {tuple(torch.as_tensor(candidate).shape)}"
        )
    with torch.no_grad():
        f_ref = extractor.extract(reference, tap)
        f_cand = extractor.extract(candidate, tap)
        norms = (f_ref.data - f_cand.data).pow(2).sum(dim=1, keepdim=True).sqrt()
        z = norms.mean(dim=(2, 3), keepdim=True)
        lam = torch.where(
            z < ZERO_SIGNAL_EPS,
            torch.ones_like(norms),
            norms / z.clamp_min(ZERO_SIGNAL_EPS),
        )
    return FocusMap(data=lam, tap=f_ref.tap)


def _score_data(score):
    return score.data if isinstance(score, ScoreMap) else torch.as_tensor(score)


def _weight_data(weights, like):
    if weights is None:
        return None
    data = weights.data if isinstance(weights, FocusMap) else torch.as_tensor(weights)
    if tuple(data.shape) != tuple(like.shape):
        raise InputError(
            f"focus weights shape {tuple(data.shape)} does not match "
            f"score map shape {tuple(like.shape)}"
        )
    # Weights are constants even if the caller hands in a live tensor.
    return data.detach()


def lsgan_d_loss(score_real, score_fake, weights=None):
    """Discriminator objective: real scores toward 1, fake toward 0.

    mean([w*(real - 1)]^2) + mean([w*fake]^2); `weights` may be None
    (plain LSGAN), a FocusMap, or a tensor of matching shape.
    """
    real = _score_data(score_real)
    fake = _score_data(score_fake)
    if tuple(real.shape) != tuple(fake.shape):
        raise InputError(
            f"real/fake score shapes differ: {tuple(real.shape)} vs {tuple(fake.shape)}"
        )
    w = _weight_data(weights, real)
    real_term = real - 1.0 if w is None else w * (real - 1.0)
    fake_term = fake if w is None else w * fake
    return real_term.pow(2).mean() + fake_term.pow(2).mean()


def lsgan_g_loss(score_fake, weights=None):
    """Generator objective: fake scores toward 1. mean([w*(fake - 1)]^2)."""
    fake = _score_data(score_fake)
    w = _weight_data(weights, fake)
    term = fake - 1.0 if w is None else w * (fake - 1.0)
    return term.pow(2).mean()


def multiscale_adv_losses(real_scores, fake_scores, weights=None):
    """Sum of per-scale LSGAN losses; returns (d_loss, g_loss).

    `real_scores`/`fake_scores` are matching sequences of ScoreMaps
    (e.g. the coarse/fine pair from the pyramid discriminator).
    `weights` is an optional per-scale sequence of FocusMaps; a focus
    map whose tap stride disagrees with its score map's stride is a
    wiring bug and is rejected.
    """
    real_scores = tuple(real_scores)
    fake_scores = tuple(fake_scores)
    if len(real_scores) != len(fake_scores):
        raise InputError(
            f"got {len(real_scores)} real score maps but {len(fake_scores)} fake"
        )
    if weights is None:
        weights = (None,) * len(real_scores)
    weights = tuple(weights)
    if len(weights) != len(real_scores):
        raise InputError(f"got {len(weights)} weight maps for {len(real_scores)} scales")

    d_total, g_total = None, None
    for real, fake, w in zip(real_scores, fake_scores, weights):
        if (
            isinstance(w, FocusMap)
            and isinstance(real, ScoreMap)
            and w.tap.spatial_stride != real.stride
        ):
            raise ConfigError(
                f"focus map tap {w.tap.name!r} has stride {w.tap.spatial_stride} "
                f"but is paired with a stride-{real.stride} score map"
            )
        d_term = lsgan_d_loss(real, fake, w)
        g_term = lsgan_g_loss(fake, w)
        d_total = d_term if d_total is None else d_total + d_term
        g_total = g_term if g_total is None else g_total + g_term
    if d_total is None:
        raise InputError("at least one scale is required")
    return d_total, g_total


def perceptual_loss(extractor, reference, candidate, tap=PERCEPTUAL_TAP):
    """Mean absolute deep-feature difference at the perceptual tap.

    Differentiable with respect to `candidate` (the extractor is
    frozen, so gradients flow to the image, not the features' weights).
    """
    f_ref = extractor.extract(reference, tap).data
    f_cand = extractor.extract(candidate, tap).data
    return (f_ref - f_cand).abs().mean()


def mse_loss(reference, candidate):
    """Mean squared pixel difference."""
    ref = torch.as_tensor(reference)
    cand = torch.as_tensor(candidate)
    if tuple(ref.shape) != tuple(cand.shape):
        raise InputError(
            f"mse inputs must share a shape, got {tuple(ref.shape)} vs {tuple(cand.shape)}"
        )
    return F.mse_loss(cand, ref)
