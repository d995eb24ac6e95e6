"""Adversarial training orchestration: variants, folds, checkpoints, logs.

Five model variants share one generator architecture and differ in the
discriminator and loss composition:

==================  =============  ==========  ===================
variant             discriminator  focus maps  regularizer
==================  =============  ==========  ===================
baseline-mse        single-scale   no          MSE (lambda_m)
baseline-perceptual single-scale   no          perceptual (lambda_p)
ours-focus          single-scale   yes         perceptual (lambda_p)
ours-fpn            pyramid        no          perceptual (lambda_p)
ours-focus-fpn      pyramid        yes         perceptual (lambda_p)
==================  =============  ==========  ===================

Training alternates one discriminator step and one generator step per
batch.  Focus maps are recomputed whenever the generator output
changes, i.e. once per batch, and are shared by both steps of that
batch.  Cross-validation folds partition phantoms, never slices, so a
phantom's slices are always entirely in-fold or entirely held out.
"""

from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import container, losses, networks, perceptual
from .errors import ConfigError, InputError, NumericsError
from .losses import LossWeights
from .networks import DiscriminatorA, DiscriminatorB, Generator, initialize_weights
from .perceptual import FOCUS_TAP_COARSE, FOCUS_TAP_FINE


@dataclasses.dataclass(frozen=True)
class VariantPolicy:
    pyramid: bool
    focus: bool
    regularizer: str  # "mse" or "perceptual"


VARIANT_POLICIES = {
    "baseline-mse": VariantPolicy(pyramid=False, focus=False, regularizer="mse"),
    "baseline-perceptual": VariantPolicy(pyramid=False, focus=False, regularizer="perceptual"),
    "ours-focus": VariantPolicy(pyramid=False, focus=True, regularizer="perceptual"),
    "ours-fpn": VariantPolicy(pyramid=True, focus=False, regularizer="perceptual"),
    "ours-focus-fpn": VariantPolicy(pyramid=True, focus=True, regularizer="perceptual"),
}
VARIANTS = tuple(VARIANT_POLICIES)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    variant: str
    dataset_dir: str
    out_dir: str
    lr: float = 1e-4
    beta1: float = 0.5
    epochs: int = 50
    batch_size: int = 4
    folds: int = 5
    seed: int = 0
    weights: LossWeights = LossWeights()
    generator_widths: tuple = (64, 128, 256, 512)
    discriminator_widths: tuple = (64, 128, 256)
    pyramid_width: int = 128
    extractor_weights: Optional[str] = None
    deterministic: bool = False

    def validate(self):
        if self.variant not in VARIANT_POLICIES:
            raise ConfigError(
                f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}"
            )
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not 0 <= self.beta1 < 1:
            raise ConfigError(f"beta1 must lie in [0, 1), got {self.beta1}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be positive, got {self.batch_size}")
        if self.folds < 2:
            raise ConfigError(f"at least 2 folds required, got {self.folds}")
        return self

    @property
    def policy(self):
        return VARIANT_POLICIES[self.variant]


@dataclasses.dataclass
class TrainResult:
    fold_id: int
    held_out: tuple
    checkpoint_path: Path
    disc_checkpoint_path: Path
    log_path: Path
    epochs_run: int


def build_folds(dataset, folds=5, seed=0):
    """Partition phantom ids into near-equal groups, deterministic in seed."""
    ids = list(dataset.phantom_ids)
    if folds < 2:
        raise ConfigError(f"at least 2 folds required, got {folds}")
    if len(ids) < folds:
        raise ConfigError(f"{len(ids)} phantoms cannot fill {folds} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    base, extra = divmod(len(ids), folds)
    groups, start = [], 0
    for k in range(folds):
        size = base + (1 if k < extra else 0)
        groups.append(sorted(shuffled[start : start + size]))
        start += size
    return groups


def split_samples(dataset, fold_groups, fold_id):
    """Return (training samples, held-out samples) for one fold."""
    if not 0 <= fold_id < len(fold_groups):
        raise ConfigError(f"fold {fold_id} outside [0, {len(fold_groups) - 1}]")
    held = set(fold_groups[fold_id])
    train = [s for s in dataset.samples if s.phantom_id not in held]
    held_out = [s for s in dataset.samples if s.phantom_id in held]
    return train, held_out


def _load_pairs(dataset, samples):
    sparse, dense = [], []
    for sample in samples:
        s, d = dataset.load_pair(sample)
        sparse.append(s)
        dense.append(d)
    return sparse, dense


def _batch_tensor(images, indices):
    stack = np.stack([images[i] for i in indices])[:, None]
    return torch.from_numpy(np.ascontiguousarray(stack, dtype=np.float32))


def _check_finite(components, fold_dir, fold_id, epoch, step, batch_ids):
    bad = {k: v for k, v in components.items() if not np.isfinite(v)}
    if not bad:
        return
    snapshot = {
        "fold": fold_id,
        "epoch": epoch,
        "step": step,
        "batch_samples": batch_ids,
        "components": components,
    }
    diag_path = fold_dir / "diagnostics.json"
    diag_path.write_text(json.dumps(snapshot, indent=2, sort_keys=True))
    raise NumericsError(
        f"non-finite loss components {sorted(bad)} at epoch {epoch} step {step}",
        diagnostics_path=diag_path,
    )


def _save_models(fold_dir, config, fold_id, epoch, gen, disc):
    base_meta = {"seed": config.seed, "epoch": epoch, "variant": config.variant, "fold": fold_id}
    gen_path = fold_dir / f"generator_epoch{epoch:03d}.svcp"
    networks.save_checkpoint(
        gen_path,
        gen,
        meta={**base_meta, "arch": "generator", "widths": list(config.generator_widths)},
    )
    arch = "discriminator-b" if config.policy.pyramid else "discriminator-a"
    disc_meta = {**base_meta, "arch": arch, "widths": list(config.discriminator_widths)}
    if config.policy.pyramid:
        disc_meta["pyramid_width"] = config.pyramid_width
    disc_path = fold_dir / f"discriminator_epoch{epoch:03d}.svcp"
    networks.save_checkpoint(disc_path, disc, meta=disc_meta)
    return gen_path, disc_path


def train_fold(config: TrainConfig, fold_id: int, step_hook: Optional[Callable] = None):
    """Train one cross-validation fold; returns paths to final artifacts.

    `step_hook(event, step, gen, disc)` is called with events
    "pre_d"/"post_d"/"pre_g"/"post_g" around each optimizer step; tests
    use it to verify strict alternation.
    """
    config.validate()
    if config.deterministic:
        torch.manual_seed(config.seed)
        torch.use_deterministic_algorithms(True)
    try:
        return _train_fold_inner(config, fold_id, step_hook)
    finally:
        if config.deterministic:
            torch.use_deterministic_algorithms(False)


def _train_fold_inner(config, fold_id, step_hook):
    policy = config.policy
    dataset = container.Dataset.load(config.dataset_dir)
    groups = build_folds(dataset, config.folds, config.seed)
    train_samples, held_samples = split_samples(dataset, groups, fold_id)
    if not train_samples:
        raise ConfigError(f"fold {fold_id} leaves no training samples")

    fold_dir = Path(config.out_dir) / f"fold{fold_id:02d}"
    fold_dir.mkdir(parents=True, exist_ok=True)

    gen = initialize_weights(Generator(config.generator_widths), seed=config.seed)
    if policy.pyramid:
        disc = DiscriminatorB(config.discriminator_widths, config.pyramid_width)
    else:
        disc = DiscriminatorA(config.discriminator_widths)
    initialize_weights(disc, seed=config.seed + 1)
    gen.train()
    disc.train()

    extractor = None
    if policy.focus or policy.regularizer == "perceptual":
        extractor = perceptual.FeatureExtractor(config.extractor_weights)
    focus_taps = (FOCUS_TAP_COARSE, FOCUS_TAP_FINE) if policy.pyramid else (FOCUS_TAP_COARSE,)

    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr, betas=(config.beta1, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr, betas=(config.beta1, 0.999))

    sparse_imgs, dense_imgs = _load_pairs(dataset, train_samples)
    sample_ids = [f"{s.phantom_id}/{s.slice_id}" for s in train_samples]

    gen_path, disc_path = _save_models(fold_dir, config, fold_id, 0, gen, disc)
    log_path = fold_dir / "train_log.jsonl"
    step = 0
    with open(log_path, "w") as log:
        for epoch in range(1, config.epochs + 1):
            order = np.random.default_rng((config.seed, fold_id, epoch)).permutation(
                len(train_samples)
            )
            for start in range(0, len(order), config.batch_size):
                indices = order[start : start + config.batch_size].tolist()
                sparse = _batch_tensor(sparse_imgs, indices)
                dense = _batch_tensor(dense_imgs, indices)
                batch_ids = [sample_ids[i] for i in indices]

                g_out = gen(sparse)
                weights = None
                if policy.focus:
                    weights = tuple(
                        losses.focus_map(extractor, dense, g_out.detach(), tap)
                        for tap in focus_taps
                    )

                # Discriminator step on the frozen generator output.
                if step_hook:
                    step_hook("pre_d", step, gen, disc)
                real_scores = _scores(disc, dense)
                fake_scores = _scores(disc, g_out.detach())
                d_loss, _ = losses.multiscale_adv_losses(real_scores, fake_scores, weights)
                components = {"adv_d": d_loss.detach().item()}
                _check_finite(components, fold_dir, fold_id, epoch, step, batch_ids)
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()
                if step_hook:
                    step_hook("post_d", step, gen, disc)

                # Generator step against the updated discriminator.
                if step_hook:
                    step_hook("pre_g", step, gen, disc)
                fake_scores = _scores(disc, g_out)
                adv_g = None
                for score, w in zip(fake_scores, weights or (None,) * len(fake_scores)):
                    term = losses.lsgan_g_loss(score, w)
                    adv_g = term if adv_g is None else adv_g + term
                components["adv_g"] = adv_g.detach().item()
                if policy.regularizer == "mse":
                    reg = losses.mse_loss(dense, g_out)
                    g_total = config.weights.lambda_a * adv_g + config.weights.lambda_m * reg
                    components["mse"] = reg.detach().item()
                else:
                    reg = losses.perceptual_loss(extractor, dense, g_out)
                    g_total = config.weights.lambda_a * adv_g + config.weights.lambda_p * reg
                    components["perceptual"] = reg.detach().item()
                _check_finite(components, fold_dir, fold_id, epoch, step, batch_ids)
                opt_g.zero_grad()
                g_total.backward()
                opt_g.step()
                if step_hook:
                    step_hook("post_g", step, gen, disc)

                record = {"fold": fold_id, "epoch": epoch, "step": step, **components}
                if weights is not None:
                    record["focus_min"] = min(float(w.data.min()) for w in weights)
                    record["focus_max"] = max(float(w.data.max()) for w in weights)
                record["wall_time"] = time.time()
                log.write(json.dumps(record, sort_keys=True) + "\n")
                step += 1
            gen_path, disc_path = _save_models(fold_dir, config, fold_id, epoch, gen, disc)
            log.flush()

    return TrainResult(
        fold_id=fold_id,
        held_out=tuple(groups[fold_id]),
        checkpoint_path=gen_path,
        disc_checkpoint_path=disc_path,
        log_path=log_path,
        epochs_run=config.epochs,
    )


def _scores(disc, x):
    out = disc(x)
    return out if isinstance(out, tuple) else (out,)


def load_generator(path):
    """Build a generator from a checkpoint; rejects non-generator files."""
    from . import tensorfile

    meta = tensorfile.read_meta(path)
    if meta.get("arch") != "generator":
        raise ConfigError(
            f"{path}: checkpoint holds arch {meta.get('arch')!r}, expected 'generator'"
        )
    gen = Generator(tuple(meta["widths"]))
    networks.load_checkpoint(path, gen)
    return gen


def infer(generator, images, batch_size=8):
    """Run the generator over 2D slices in eval mode; returns float32 slices.

    Batch-norm uses stored running statistics, outputs stay in (0,1),
    and no randomness is involved, so inference is deterministic.
    """
    generator.eval()
    arrays = [np.asarray(img, dtype=np.float32) for img in images]
    for i, arr in enumerate(arrays):
        if arr.ndim != 2:
            raise InputError(f"slice {i} is not 2D: shape {arr.shape}")
        if arr.shape[0] % 16 or arr.shape[1] % 16:
            raise InputError(
                f"slice {i} has shape {arr.shape}; pad each side to a multiple of 16 "
                f"before inference"
            )
    outputs = []
    with torch.no_grad():
        for start in range(0, len(arrays), batch_size):
            chunk = arrays[start : start + batch_size]
            if not chunk:
                break
            if len({a.shape for a in chunk}) == 1:
                batch = torch.from_numpy(np.stack(chunk)[:, None])
                out = generator(batch).numpy()[:, 0]
                outputs.extend(np.ascontiguousarray(o, dtype=np.float32) for o in out)
            else:
                for arr in chunk:
                    out = generator(torch.from_numpy(arr[None, None])).numpy()[0, 0]
                    outputs.append(np.ascontiguousarray(out, dtype=np.float32))
    return outputs
