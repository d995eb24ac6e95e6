"""Synthetic paired sparse/dense tomographic data.

Random ellipse phantoms are forward projected with a 2D parallel-beam
geometry and reconstructed with filtered backprojection at two view
counts, yielding pixel-registered (sparse, dense) image pairs.  All
images are square, grayscale, with values in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.signal import fftconvolve

from . import container
from .errors import ConfigError, InputError

FILTER_KINDS = ("ram-lak", "shepp-logan")

DEFAULT_SPARSE_VIEWS = 67
DEFAULT_DENSE_VIEWS = 200

# Ray-marching step along each ray, in pixels.  0.5 keeps the bilinear
# integration error well below the FBP discretization error.
_RAY_STEP = 0.5


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters for one random ellipse phantom."""

    num_ellipses: int
    intensity_range: tuple[float, float] = (0.1, 0.9)
    size: int = 128
    seed: int = 0

    def validate(self):
        if self.size <= 0:
            raise ConfigError(f"phantom size must be positive, got {self.size}")
        if self.num_ellipses < 0:
            raise ConfigError(f"num_ellipses must be >= 0, got {self.num_ellipses}")
        lo, hi = self.intensity_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ConfigError(
                f"intensity_range must satisfy 0 <= lo <= hi <= 1, got ({lo}, {hi})"
            )


@dataclass(frozen=True)
class Geometry:
    """Parallel-beam acquisition geometry.

    View angles are uniformly spaced over `angular_range` (endpoint
    excluded); detector bins are centered on the rotation axis and
    spaced `detector_spacing` pixels apart.
    """

    num_views: int
    num_detector_bins: int
    angular_range: float = math.pi
    detector_spacing: float = 1.0

    def validate(self):
        if self.num_views < 1:
            raise ConfigError(f"num_views must be >= 1, got {self.num_views}")
        if self.num_detector_bins < 2:
            raise ConfigError(
                f"num_detector_bins must be >= 2, got {self.num_detector_bins}"
            )
        if self.angular_range <= 0:
            raise ConfigError(f"angular_range must be positive, got {self.angular_range}")
        if self.detector_spacing <= 0:
            raise ConfigError(
                f"detector_spacing must be positive, got {self.detector_spacing}"
            )

    @property
    def view_angles(self):
        return np.arange(self.num_views) * (self.angular_range / self.num_views)

    @property
    def detector_offsets(self):
        half = (self.num_detector_bins - 1) / 2.0
        return (np.arange(self.num_detector_bins) - half) * self.detector_spacing


def default_geometry(size, num_views):
    """Geometry whose detector covers the full diagonal of a size x size image."""
    bins = int(math.ceil(size * math.sqrt(2.0)))
    bins += 1 - bins % 2  # odd bin count keeps a bin exactly on the axis
    return Geometry(num_views=num_views, num_detector_bins=bins)


@dataclass
class Sinogram:
    """Line integrals on a (num_views, num_detector_bins) grid."""

    data: np.ndarray
    geometry: Geometry

    def validate(self):
        expected = (self.geometry.num_views, self.geometry.num_detector_bins)
        if self.data.shape != expected:
            raise InputError(
                f"sinogram shape {self.data.shape} does not match geometry {expected}"
            )


@dataclass
class PairedSample:
    """Pixel-registered sparse/dense reconstruction pair from one phantom."""

    sparse: np.ndarray
    dense: np.ndarray
    phantom_id: str = "p000"
    slice_id: str = "s00"

    def validate(self):
        if self.sparse.shape != self.dense.shape:
            raise InputError(
                f"sparse shape {self.sparse.shape} != dense shape {self.dense.shape}"
            )


# ---------------------------------------------------------------------------
# Phantom generation
# ---------------------------------------------------------------------------


def _draw_ellipse_params(rng, spec):
    """Ellipse parameter rows (cx, cy, a, b, theta, value) in pixel units.

    The first ellipse is a compact high-intensity "bone-like" target so
    ROI analysis has a structural feature; the rest are random tissue.
    """
    lo, hi = spec.intensity_range
    n = spec.size
    params = []
    for k in range(spec.num_ellipses):
        if k == 0:
            cx, cy = rng.uniform(-0.3, 0.3, size=2) * n
            a = rng.uniform(0.05, 0.11) * n
            b = rng.uniform(0.05, 0.11) * n
            value = hi
        else:
            cx, cy = rng.uniform(-0.38, 0.38, size=2) * n
            a = rng.uniform(0.06, 0.30) * n
            b = rng.uniform(0.06, 0.30) * n
            value = rng.uniform(lo, lo + 0.6 * (hi - lo))
        theta = rng.uniform(0.0, math.pi)
        params.append((cx, cy, a, b, theta, value))
    return params


_SUPERSAMPLE = 4


def _rasterize_ellipses(params, size):
    """Superpose ellipses on a 4x supersampled grid, then box-average down.

    Supersampling anti-aliases the edges, which keeps the FBP noise floor
    dominated by view count rather than rasterization.
    """
    ss = _SUPERSAMPLE
    fine = np.zeros((size * ss, size * ss), dtype=np.float64)
    c = (size - 1) / 2.0
    coords = (np.arange(size * ss) + 0.5) / ss - 0.5 - c
    x = coords[None, :]
    y = coords[:, None]
    for cx, cy, a, b, theta, value in params:
        ct, st = math.cos(theta), math.sin(theta)
        u = (x - cx) * ct + (y - cy) * st
        v = -(x - cx) * st + (y - cy) * ct
        fine[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += value
    out = fine.reshape(size, ss, size, ss).mean(axis=(1, 3))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def make_phantom(spec):
    """Generate a random ellipse phantom, deterministic in `spec.seed`."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    params = _draw_ellipse_params(rng, spec)
    return _rasterize_ellipses(params, spec.size)


# ---------------------------------------------------------------------------
# Projection and reconstruction
# ---------------------------------------------------------------------------


def forward_project(image, geometry):
    """Parallel-beam line integrals of a square image.

    Row v holds the integrals along rays at angle ``view_angles[v]``,
    sampled with bilinear interpolation, so the output is linear in the
    image intensities.
    """
    geometry.validate()
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise InputError(f"image must be square 2D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError("image contains non-finite values")

    n = arr.shape[0]
    center = (n - 1) / 2.0
    half_diag = (n - 1) / 2.0 * math.sqrt(2.0) + 1.0
    t = np.arange(-half_diag, half_diag + _RAY_STEP, _RAY_STEP)
    offsets = geometry.detector_offsets

    sino = np.empty((geometry.num_views, geometry.num_detector_bins), dtype=np.float64)
    for v, theta in enumerate(geometry.view_angles):
        ct, st = math.cos(theta), math.sin(theta)
        # Ray through detector offset s: p(t) = s*(ct, st) + t*(-st, ct).
        px = center + offsets[:, None] * ct - t[None, :] * st
        py = center + offsets[:, None] * st + t[None, :] * ct
        samples = map_coordinates(arr, [py, px], order=1, mode="constant", cval=0.0)
        sino[v] = samples.sum(axis=1) * _RAY_STEP
    return Sinogram(data=sino, geometry=geometry)


def _filter_kernel(num_bins, spacing, filter_kind):
    """Spatial-domain reconstruction filter sampled at detector pitch."""
    n = np.arange(-(num_bins - 1), num_bins)
    if filter_kind == "ram-lak":
        kernel = np.zeros(n.shape, dtype=np.float64)
        kernel[n == 0] = 1.0 / (4.0 * spacing**2)
        odd = n % 2 != 0
        kernel[odd] = -1.0 / (math.pi**2 * n[odd].astype(np.float64) ** 2 * spacing**2)
    elif filter_kind == "shepp-logan":
        kernel = -2.0 / (math.pi**2 * spacing**2 * (4.0 * n.astype(np.float64) ** 2 - 1.0))
    else:
        raise ConfigError(
            f"unknown filter kind {filter_kind!r}, expected one of {FILTER_KINDS}"
        )
    return kernel


def filtered_backprojection(sino, filter_kind="ram-lak", size=None):
    """Reconstruct an image from a sinogram; output clipped to [0, 1].

    `size` defaults to the largest square fully covered by the detector.
    """
    geometry = sino.geometry
    geometry.validate()
    sino.validate()
    if size is None:
        size = int(
            math.floor(geometry.num_detector_bins * geometry.detector_spacing / math.sqrt(2.0))
        )

    kernel = _filter_kernel(geometry.num_detector_bins, geometry.detector_spacing, filter_kind)
    # q = spacing * (p  convolved with  h), one row per view.
    filtered = fftconvolve(sino.data, kernel[None, :], mode="same", axes=1)
    filtered *= geometry.detector_spacing

    center = (size - 1) / 2.0
    ys, xs = np.mgrid[0:size, 0:size]
    x = (xs - center).ravel()
    y = (ys - center).ravel()
    bin_index = np.arange(geometry.num_detector_bins, dtype=np.float64)
    half = (geometry.num_detector_bins - 1) / 2.0

    accum = np.zeros(size * size, dtype=np.float64)
    for v, theta in enumerate(geometry.view_angles):
        s = (x * math.cos(theta) + y * math.sin(theta)) / geometry.detector_spacing + half
        accum += np.interp(s, bin_index, filtered[v], left=0.0, right=0.0)
    accum *= geometry.angular_range / geometry.num_views
    return np.clip(accum.reshape(size, size), 0.0, 1.0).astype(np.float32)


def make_pair(
    phantom,
    sparse_views=DEFAULT_SPARSE_VIEWS,
    dense_views=DEFAULT_DENSE_VIEWS,
    filter_kind="ram-lak",
    phantom_id="p000",
    slice_id="s00",
):
    """Reconstruct the same phantom at a sparse and a dense view count."""
    if sparse_views >= dense_views:
        raise ConfigError(
            f"sparse_views ({sparse_views}) must be < dense_views ({dense_views})"
        )
    phantom = np.asarray(phantom)
    size = phantom.shape[0]
    sparse_sino = forward_project(phantom, default_geometry(size, sparse_views))
    dense_sino = forward_project(phantom, default_geometry(size, dense_views))
    sparse = filtered_backprojection(sparse_sino, filter_kind, size=size)
    dense = filtered_backprojection(dense_sino, filter_kind, size=size)
    return PairedSample(sparse=sparse, dense=dense, phantom_id=phantom_id, slice_id=slice_id)


def crop_patches(pair, patch_size, count, seed):
    """Aligned random crops; the same window is applied to sparse and dense."""
    pair.validate()
    h, w = pair.sparse.shape
    if patch_size % 8 != 0:
        raise ConfigError(
            f"patch_size must be divisible by 8 (feature-pyramid stride), got {patch_size}"
        )
    if patch_size > min(h, w):
        raise ConfigError(f"patch_size {patch_size} exceeds image side {min(h, w)}")
    rng = np.random.default_rng(seed)
    patches = []
    for k in range(count):
        top = int(rng.integers(0, h - patch_size + 1))
        left = int(rng.integers(0, w - patch_size + 1))
        window = (slice(top, top + patch_size), slice(left, left + patch_size))
        patches.append(
            PairedSample(
                sparse=pair.sparse[window].copy(),
                dense=pair.dense[window].copy(),
                phantom_id=pair.phantom_id,
                slice_id=f"{pair.slice_id}.k{k:03d}",
            )
        )
    return patches


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    """Settings for generating a paired dataset."""

    size: int = 128
    num_ellipses: int = 12
    intensity_range: tuple[float, float] = (0.1, 0.9)
    sparse_views: int = DEFAULT_SPARSE_VIEWS
    dense_views: int = DEFAULT_DENSE_VIEWS
    filter_kind: str = "ram-lak"
    seed: int = 0
    # Relative jitter applied to ellipse geometry between slices of the
    # same phantom, mimicking adjacent sagittal slices of one subject.
    slice_jitter: float = 0.03

    def validate(self):
        PhantomSpec(
            num_ellipses=self.num_ellipses,
            intensity_range=self.intensity_range,
            size=self.size,
            seed=0,
        ).validate()
        if self.sparse_views >= self.dense_views:
            raise ConfigError(
                f"sparse_views ({self.sparse_views}) must be < dense_views ({self.dense_views})"
            )
        if self.sparse_views < 1:
            raise ConfigError(f"sparse_views must be >= 1, got {self.sparse_views}")
        if self.filter_kind not in FILTER_KINDS:
            raise ConfigError(
                f"unknown filter kind {self.filter_kind!r}, expected one of {FILTER_KINDS}"
            )


def _phantom_slice(config, phantom_index, slice_index):
    """Phantom image for one slice of one subject; slices share geometry."""
    base_seed = np.random.SeedSequence(
        entropy=config.seed, spawn_key=(phantom_index,)
    )
    base_rng = np.random.default_rng(base_seed)
    spec = PhantomSpec(
        num_ellipses=config.num_ellipses,
        intensity_range=config.intensity_range,
        size=config.size,
        seed=0,  # unused; rng passed explicitly below
    )
    params = _draw_ellipse_params(base_rng, spec)
    if slice_index > 0 and params:
        jitter_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=config.seed, spawn_key=(phantom_index, slice_index))
        )
        scale = config.slice_jitter * config.size
        jittered = []
        for cx, cy, a, b, theta, value in params:
            jittered.append(
                (
                    cx + jitter_rng.normal(0.0, scale),
                    cy + jitter_rng.normal(0.0, scale),
                    max(2.0, a * (1.0 + jitter_rng.normal(0.0, config.slice_jitter))),
                    max(2.0, b * (1.0 + jitter_rng.normal(0.0, config.slice_jitter))),
                    theta + jitter_rng.normal(0.0, 0.05),
                    value,
                )
            )
        params = jittered
    return _rasterize_ellipses(params, config.size)


def build_dataset(
    num_phantoms,
    slices_per_phantom,
    config,
    out_dir,
    patch_size=None,
    patches_per_slice=0,
):
    """Generate and persist a paired dataset partitioned by phantom id.

    With `patch_size` and `patches_per_slice` set, each reconstructed
    slice is replaced by that many aligned random crops (seeded from
    the dataset seed), which is how compact training sets are built.
    """
    config.validate()
    if num_phantoms < 0 or slices_per_phantom < 0:
        raise ConfigError("num_phantoms and slices_per_phantom must be >= 0")
    if (patch_size is None) != (patches_per_slice == 0):
        raise ConfigError("patch_size and patches_per_slice must be given together")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc

    records = []
    for p in range(num_phantoms):
        phantom_id = f"p{p:03d}"
        for s in range(slices_per_phantom):
            slice_id = f"s{s:02d}"
            phantom = _phantom_slice(config, p, s)
            pair = make_pair(
                phantom,
                sparse_views=config.sparse_views,
                dense_views=config.dense_views,
                filter_kind=config.filter_kind,
                phantom_id=phantom_id,
                slice_id=slice_id,
            )
            if patch_size is None:
                emitted = [pair]
            else:
                crop_seed = np.random.SeedSequence(
                    entropy=config.seed, spawn_key=(p, s, 1)
                )
                emitted = crop_patches(pair, patch_size, patches_per_slice, crop_seed)
            for sample in emitted:
                tag = f"{sample.phantom_id}_{sample.slice_id}"
                sparse_name = f"{tag}_sparse.svcb"
                dense_name = f"{tag}_dense.svcb"
                try:
                    container.write_image(out_dir / sparse_name, sample.sparse)
                    container.write_image(out_dir / dense_name, sample.dense)
                except OSError as exc:
                    raise OSError(f"cannot write sample under {out_dir}: {exc}") from exc
                records.append(
                    container.SampleRecord(
                        phantom_id=sample.phantom_id,
                        slice_id=sample.slice_id,
                        sparse_path=sparse_name,
                        dense_path=dense_name,
                        width=sample.sparse.shape[1],
                        height=sample.sparse.shape[0],
                    )
                )

    meta = {
        "num_phantoms": num_phantoms,
        "slices_per_phantom": slices_per_phantom,
        "size": config.size,
        "num_ellipses": config.num_ellipses,
        "intensity_range": list(config.intensity_range),
        "sparse_views": config.sparse_views,
        "dense_views": config.dense_views,
        "filter_kind": config.filter_kind,
        "seed": config.seed,
        "patch_size": patch_size,
        "patches_per_slice": patches_per_slice,
    }
    dataset = container.Dataset(out_dir, records, meta)
    dataset.write_manifest()
    return dataset
