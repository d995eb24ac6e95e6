"""Frozen convolutional feature extractor with named tap points.

The extractor is the feature stage of a 16-layer VGG-style network
(stacks of 3x3 convolutions with ReLU, separated by 2x2 max-pooling),
truncated after the third pooling stage since no tap lives deeper.
Three taps are exposed:

- ``PERCEPTUAL_TAP``: activation of the second conv block, stride 2,
  128 channels; feeds the perceptual reconstruction loss.
- ``FOCUS_TAP_COARSE``: third pooling output, stride 8, 256 channels;
  matches the coarse discriminator score-map resolution.
- ``FOCUS_TAP_FINE``: second pooling output, stride 4, 128 channels;
  matches the fine discriminator score-map resolution.

Weights are never trained here.  They come from a checksum-verified
container file; a deterministic He-initialized file can be generated
locally when no externally trained weights are available (random
convolutional features are a serviceable stand-in for perceptual
losses, and keep the build self-contained).
"""

from __future__ import annotations

import dataclasses
import math
import os
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from . import tensorfile
from .errors import ConfigError, InputError, StartupError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# Seed for the locally generated weights file, and the digest the
# generated file must hash to.  Bump WEIGHTS_VERSION when the plan or
# seed changes so stale cache files are never picked up silently.
WEIGHTS_SEED = 1842
WEIGHTS_VERSION = 1
DEFAULT_WEIGHTS_SHA256 = (
    "d0fcae03c36ab13842c5f34f93ff993f316ba9c4ab8808ccd6b2a49768301058"
)

RANGE_TOL = 1e-6


@dataclasses.dataclass(frozen=True)
class FeatureTap:
    """A named readout point inside the extractor's layer sequence.

    `layer_index` counts convs, activations, and poolings alike, 0-based;
    the tap output is the result of the module at that index.
    """

    name: str
    layer_index: int
    spatial_stride: int
    channels: int


PERCEPTUAL_TAP = FeatureTap("perceptual", layer_index=8, spatial_stride=2, channels=128)
FOCUS_TAP_COARSE = FeatureTap("focus_coarse", layer_index=16, spatial_stride=8, channels=256)
FOCUS_TAP_FINE = FeatureTap("focus_fine", layer_index=9, spatial_stride=4, channels=128)
DEFAULT_TAPS = (PERCEPTUAL_TAP, FOCUS_TAP_COARSE, FOCUS_TAP_FINE)

STUB_TAP = FeatureTap("stub", layer_index=0, spatial_stride=1, channels=1)


@dataclasses.dataclass
class FeatureMap:
    """Batched feature tensor (B, C, h, w) plus the tap that produced it."""

    data: torch.Tensor
    tap: FeatureTap
    source_shape: tuple

    @property
    def num_elements(self):
        """Element count per sample (C * h * w), the perceptual normalizer."""
        return int(self.data.shape[1] * self.data.shape[2] * self.data.shape[3])

    @property
    def num_locations(self):
        """Spatial location count per sample (h * w), the focus normalizer."""
        return int(self.data.shape[2] * self.data.shape[3])


# (conv_layer_index, in_channels, out_channels) for the truncated stage.
# Indices 0..16: conv/relu pairs with pools at 4, 9, and 16.
_CONV_PLAN = (
    (0, 3, 64),
    (2, 64, 64),
    (5, 64, 128),
    (7, 128, 128),
    (10, 128, 256),
    (12, 256, 256),
    (14, 256, 256),
)
_POOL_INDICES = (4, 9, 16)
_STAGE_LEN = 17


def _build_stage():
    convs = {idx: (cin, cout) for idx, cin, cout in _CONV_PLAN}
    modules = []
    for idx in range(_STAGE_LEN):
        if idx in convs:
            cin, cout = convs[idx]
            modules.append(nn.Conv2d(cin, cout, kernel_size=3, padding=1))
        elif idx in _POOL_INDICES:
            modules.append(nn.MaxPool2d(kernel_size=2, stride=2))
        else:
            modules.append(nn.ReLU(inplace=False))
    return nn.Sequential(*modules)


def write_feature_weights(path, seed=WEIGHTS_SEED):
    """Generate the deterministic He-initialized weights file at `path`.

    Returns the SHA-256 hex digest of the written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    tensors = {}
    for idx, cin, cout in _CONV_PLAN:
        std = math.sqrt(2.0 / (cin * 9))
        weight = rng.standard_normal((cout, cin, 3, 3)) * std
        tensors[f"features.{idx}.weight"] = weight.astype(np.float32)
        tensors[f"features.{idx}.bias"] = np.zeros(cout, dtype=np.float32)
    meta = {
        "kind": "feature-extractor-weights",
        "seed": int(seed),
        "version": WEIGHTS_VERSION,
        "conv_plan": [list(entry) for entry in _CONV_PLAN],
    }
    tensorfile.save_tensors(path, tensors, meta=meta)
    return tensorfile.sha256_of(path)


def default_weights_path():
    root = os.environ.get("STREAKFIX_CACHE_DIR")
    base = Path(root).expanduser() if root else Path.home() / ".cache" / "streakfix"
    return base / f"feature_weights_v{WEIGHTS_VERSION}.svcp"


def ensure_feature_weights(path=None):
    """Resolve a verified weights file, generating the default if absent.

    With `path=None` the default cache location is used: the file is
    generated on first use and must hash to DEFAULT_WEIGHTS_SHA256.
    An explicit `path` must already exist (no silent generation over a
    user-specified location).
    """
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise StartupError(f"feature extractor weights file not found: {path}")
        return path
    path = default_weights_path()
    if not path.is_file():
        digest = write_feature_weights(path)
    else:
        digest = tensorfile.sha256_of(path)
    if digest != DEFAULT_WEIGHTS_SHA256:
        raise StartupError(
            f"feature extractor weights at {path} hash to {digest}, "
            f"expected {DEFAULT_WEIGHTS_SHA256}; delete the file to regenerate"
        )
    return path


def preprocess(images):
    """Map [0,1] single-channel images to the extractor's input space.

    Accepts (H, W), (1, H, W), or (B, 1, H, W); returns (B, 3, H, W)
    with the channel replicated and per-channel mean/std normalization
    applied.  Values outside [0,1] beyond a 1e-6 tolerance are rejected.
    """
    t = torch.as_tensor(images)
    if not t.dtype.is_floating_point:
        t = t.to(torch.float32)
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t[None]
    if t.dim() != 4 or t.shape[1] != 1:
        raise InputError(
            f"expected single-channel images (H,W), (1,H,W) or (B,1,H,W), got {tuple(images.shape)}"
        )
    flat = t.detach()
    lo = float(flat.min()) if flat.numel() else 0.0
    hi = float(flat.max()) if flat.numel() else 0.0
    if lo < -RANGE_TOL or hi > 1.0 + RANGE_TOL:
        raise InputError(
            f"image values must lie in [0,1] (tolerance {RANGE_TOL:g}); got range [{lo:g}, {hi:g}]"
        )
    mean = torch.as_tensor(IMAGENET_MEAN, dtype=t.dtype).view(1, 3, 1, 1)
    std = torch.as_tensor(IMAGENET_STD, dtype=t.dtype).view(1, 3, 1, 1)
    return (t.repeat(1, 3, 1, 1) - mean) / std


class FeatureExtractor(nn.Module):
    """Frozen feature stage exposing tap outputs for losses and focus maps.

    Parameters never receive gradients; gradient with respect to the
    input image flows normally, which is what the generator loss needs.
    """

    def __init__(self, weights_path=None):
        super().__init__()
        self.stage = _build_stage()
        resolved = ensure_feature_weights(weights_path)
        self.weights_path = resolved
        self.weights_sha256 = tensorfile.sha256_of(resolved)
        tensors, meta = tensorfile.load_tensors(resolved)
        state = {}
        for name, arr in tensors.items():
            if not name.startswith("features."):
                raise StartupError(f"{resolved}: unexpected tensor {name!r} in weights file")
            state[name[len("features.") :]] = torch.from_numpy(arr)
        try:
            self.stage.load_state_dict(state)
        except RuntimeError as exc:
            raise StartupError(f"{resolved}: weights do not fit the extractor: {exc}") from exc
        self.weights_meta = meta
        self.stage.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        # Stays in eval mode: the extractor is a fixed function.
        return super().train(False)

    def features(self, images, taps=DEFAULT_TAPS):
        """Run the stage once and collect FeatureMaps at the given taps."""
        taps = tuple(taps)
        if not taps:
            raise ConfigError("at least one feature tap is required")
        x = preprocess(images)
        height, width = int(x.shape[2]), int(x.shape[3])
        if height % 8 or width % 8:
            raise InputError(
                f"image sides must be divisible by 8 for feature extraction, got {height}x{width}"
            )
        by_index = {}
        for tap in taps:
            if not 0 <= tap.layer_index < len(self.stage):
                raise ConfigError(
                    f"tap {tap.name!r} layer index {tap.layer_index} outside stage "
                    f"[0, {len(self.stage) - 1}]"
                )
            by_index.setdefault(tap.layer_index, []).append(tap)
        deepest = max(by_index)
        out = {}
        for idx in range(deepest + 1):
            x = self.stage[idx](x)
            for tap in by_index.get(idx, ()):
                expected = (height // tap.spatial_stride, width // tap.spatial_stride)
                got = (int(x.shape[2]), int(x.shape[3]))
                if got != expected or int(x.shape[1]) != tap.channels:
                    raise ConfigError(
                        f"tap {tap.name!r} declares stride {tap.spatial_stride} / "
                        f"{tap.channels} channels but layer {tap.layer_index} produced "
                        f"{tuple(x.shape[1:])} for a {height}x{width} input"
                    )
                out[tap.name] = FeatureMap(data=x, tap=tap, source_shape=(height, width))
        return out

    def extract(self, images, tap):
        return self.features(images, (tap,))[tap.name]

    def forward(self, images):
        return self.features(images)


class StubExtractor:
    """Identity extractor: the feature map is the raw image at stride 1.

    Used by loss oracle tests, where hand computation needs features
    equal to pixel values.  Requested taps are echoed back with their
    stride and channel metadata rewritten to the identity's truth.
    """

    def features(self, images, taps=(STUB_TAP,)):
        t = torch.as_tensor(images)
        if not t.dtype.is_floating_point:
            t = t.to(torch.float32)
        if t.dim() == 2:
            t = t[None, None]
        elif t.dim() == 3:
            t = t[None]
        if t.dim() != 4:
            raise InputError(f"expected image batch, got shape {tuple(images.shape)}")
        source_shape = (int(t.shape[2]), int(t.shape[3]))
        out = {}
        for tap in taps:
            ident = dataclasses.replace(
                tap, layer_index=0, spatial_stride=1, channels=int(t.shape[1])
            )
            out[tap.name] = FeatureMap(data=t, tap=ident, source_shape=source_shape)
        return out

    def extract(self, images, tap):
        return self.features(images, (tap,))[tap.name]
