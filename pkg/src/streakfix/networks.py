"""Generator and discriminator architectures.

The generator is a 4-down/4-up encoder-decoder with skip connections
and a sigmoid head, so outputs live strictly inside (0,1) at the input
resolution.  Two discriminator families are provided:

- ``DiscriminatorA``: a plain patch discriminator, encoding blocks
  followed by a classifier, one score map at stride ``2**n_blocks``.
- ``DiscriminatorB``: the same encoder with a two-level feature
  pyramid on top; it emits a coarse score map (stride 8) from the top
  pyramid level and a fine one (stride 4) from the merged level, so
  realness is judged at two semantic scales.

Score maps are raw (unbounded) per-patch scores; squashing is the
loss's business, not the network's.
"""

from __future__ import annotations

import dataclasses

import torch
from torch import nn

from . import tensorfile
from .errors import ConfigError, InputError

LEAKY_SLOPE = 0.2
INIT_STD = 0.02


@dataclasses.dataclass
class ScoreMap:
    """Batched score map (B, 1, h, w) with its downsampling stride."""

    data: torch.Tensor
    stride: int


def _encode_block(cin, cout):
    # conv 4x4 stride 2, batch-norm, leaky relu; bias folded into BN beta
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size=4, stride=2, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
    )


def _decode_block(cin, cout):
    return nn.Sequential(
        nn.ConvTranspose2d(cin, cout, kernel_size=4, stride=2, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def _classifier(cin):
    # 3x3 conv block then a 1x1 projection to one score channel
    return nn.Sequential(
        nn.Conv2d(cin, cin, kernel_size=3, stride=1, padding=1, bias=False),
        nn.BatchNorm2d(cin),
        nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
        nn.Conv2d(cin, 1, kernel_size=1, stride=1),
    )


def _check_widths(widths, expected_len, who):
    widths = tuple(int(w) for w in widths)
    if len(widths) != expected_len:
        raise ConfigError(f"{who} takes {expected_len} channel widths, got {len(widths)}")
    if any(w < 1 for w in widths):
        raise ConfigError(f"{who} widths must be positive, got {widths}")
    return widths


def _check_image_batch(x, divisor, who):
    if x.dim() != 4 or x.shape[1] != 1:
        raise InputError(f"{who} expects a (B,1,H,W) batch, got shape {tuple(x.shape)}")
    h, w = int(x.shape[2]), int(x.shape[3])
    if h % divisor or w % divisor:
        raise InputError(f"{who} needs spatial dims divisible by {divisor}, got {h}x{w}")


class Generator(nn.Module):
    """Artifact-removal network: same-shape image-to-image mapping.

    Four encoding blocks (stride-2 conv + BN + leaky ReLU), four
    decoding blocks (stride-2 deconv + BN + ReLU) with channel-wise
    skip concatenation from encoder k into decoder 4-k, and a 3x3
    conv + sigmoid head.  Input sides must be divisible by 16.
    """

    def __init__(self, widths=(64, 128, 256, 512)):
        super().__init__()
        w = _check_widths(widths, 4, "generator")
        self.widths = w
        enc_in = (1, w[0], w[1], w[2])
        self.encoders = nn.ModuleList(
            _encode_block(cin, cout) for cin, cout in zip(enc_in, w)
        )
        # Decoder inputs double where a skip concatenates.
        self.decoders = nn.ModuleList(
            [
                _decode_block(w[3], w[2]),
                _decode_block(w[2] * 2, w[1]),
                _decode_block(w[1] * 2, w[0]),
                _decode_block(w[0] * 2, w[0]),
            ]
        )
        self.head = nn.Sequential(
            nn.Conv2d(w[0], 1, kernel_size=3, stride=1, padding=1),
            nn.Sigmoid(),
        )

    def forward(self, x):
        _check_image_batch(x, 16, "generator")
        skips = []
        h = x
        for enc in self.encoders:
            h = enc(h)
            skips.append(h)
        h = self.decoders[0](skips[3])
        h = self.decoders[1](torch.cat([h, skips[2]], dim=1))
        h = self.decoders[2](torch.cat([h, skips[1]], dim=1))
        h = self.decoders[3](torch.cat([h, skips[0]], dim=1))
        return self.head(h)


class DiscriminatorA(nn.Module):
    """Single-scale patch discriminator: encoders then a classifier."""

    def __init__(self, widths=(64, 128, 256)):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        if not widths or any(w < 1 for w in widths):
            raise ConfigError(f"discriminator widths must be positive, got {widths}")
        self.widths = widths
        chain = (1,) + widths[:-1]
        self.encoders = nn.ModuleList(
            _encode_block(cin, cout) for cin, cout in zip(chain, widths)
        )
        self.classifier = _classifier(widths[-1])
        self.stride = 2 ** len(widths)

    def forward(self, x):
        _check_image_batch(x, self.stride, "discriminator")
        h = x
        for enc in self.encoders:
            h = enc(h)
        return ScoreMap(self.classifier(h), stride=self.stride)


class DiscriminatorB(nn.Module):
    """Two-scale pyramid discriminator.

    Three encoders produce features at strides 2/4/8; 1x1 laterals map
    the middle and top features to a common pyramid width; the top
    level is 2x-upsampled, smoothed by a 3x3 conv, and added to the
    middle lateral.  One classifier scores the top level (stride 8),
    another the merged level (stride 4).
    """

    STRIDES = (8, 4)

    def __init__(self, widths=(64, 128, 256), pyramid_width=128):
        super().__init__()
        w = _check_widths(widths, 3, "pyramid discriminator")
        if pyramid_width < 1:
            raise ConfigError(f"pyramid width must be positive, got {pyramid_width}")
        self.widths = w
        self.pyramid_width = int(pyramid_width)
        chain = (1, w[0], w[1])
        self.encoders = nn.ModuleList(
            _encode_block(cin, cout) for cin, cout in zip(chain, w)
        )
        self.lateral_mid = nn.Conv2d(w[1], self.pyramid_width, kernel_size=1)
        self.lateral_top = nn.Conv2d(w[2], self.pyramid_width, kernel_size=1)
        self.upsample = nn.Upsample(scale_factor=2, mode="nearest")
        self.smooth = nn.Conv2d(
            self.pyramid_width, self.pyramid_width, kernel_size=3, padding=1
        )
        self.classifier_coarse = _classifier(self.pyramid_width)
        self.classifier_fine = _classifier(self.pyramid_width)

    def forward(self, x):
        _check_image_batch(x, 8, "pyramid discriminator")
        c1 = self.encoders[0](x)
        c2 = self.encoders[1](c1)
        c3 = self.encoders[2](c2)
        top = self.lateral_top(c3)
        coarse = ScoreMap(self.classifier_coarse(top), stride=8)
        merged = self.smooth(self.upsample(top)) + self.lateral_mid(c2)
        fine = ScoreMap(self.classifier_fine(merged), stride=4)
        return coarse, fine


def initialize_weights(module, seed):
    """Deterministic init: conv weights N(0, 0.02), BN gamma N(1, 0.02).

    Uses a private torch.Generator so the global RNG state is untouched
    and the result depends only on `seed` and module definition order.
    """
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            m.weight.data.normal_(0.0, INIT_STD, generator=gen)
            if m.bias is not None:
                m.bias.data.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            m.weight.data.normal_(1.0, INIT_STD, generator=gen)
            m.bias.data.zero_()
    return module


def save_checkpoint(path, model, meta=None):
    """Serialize model state into the deterministic tensor container.

    Integer buffers (BN batch counters) are stored as float32; exact up
    to 2**24 steps, far beyond any training run here.
    """
    tensors = {
        name: value.detach().cpu().numpy()
        for name, value in model.state_dict().items()
    }
    tensorfile.save_tensors(path, tensors, meta=meta)


def load_checkpoint(path, model):
    """Restore model state saved by `save_checkpoint`; returns metadata."""
    tensors, meta = tensorfile.load_tensors(path)
    reference = model.state_dict()
    if set(tensors) != set(reference):
        missing = sorted(set(reference) - set(tensors))
        extra = sorted(set(tensors) - set(reference))
        raise InputError(
            f"{path}: checkpoint does not match the model "
            f"(missing {missing[:3]}, unexpected {extra[:3]})"
        )
    state = {}
    for name, arr in tensors.items():
        ref = reference[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise InputError(
                f"{path}: tensor {name!r} has shape {tuple(arr.shape)}, "
                f"model expects {tuple(ref.shape)}"
            )
        state[name] = torch.from_numpy(arr).to(ref.dtype)
    model.load_state_dict(state)
    return meta
