"""U-Net lung segmenter with on-the-fly generative augmentation.

Training follows the recipe: Dice-Focal loss, SGD with a cyclic
exponential-range learning rate, gradient clipping at norm 1, and, with
probability 0.5 per item, replacing a healthy training slice by its
translated pathological version followed by a 5x5 Gaussian blur. Masks are
never touched by augmentation; that the translated lungs still match the
original ground truth is the whole point of the shape-preserved synthesis.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .cyclegan import DatasetStats, Generator, translate_array
from .dataio import DomainLabel, Manifest
from .errors import ConfigError, DataError, TrainingDivergedError
from .imaging import BinaryMask, Domain, Image2D, blur_array
from .losses import dice_focal_loss
from .util import derive_seed


@dataclass(frozen=True)
class UNetSpec:
    """Symmetric encoder/decoder with skips; features double per level."""

    depth: int = 5
    base_features: int = 64
    decoder_dropout: float = 0.2

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError("depth must be >= 2")
        if self.base_features < 1:
            raise ConfigError("base_features must be >= 1")
        if not 0.0 <= self.decoder_dropout < 1.0:
            raise ConfigError("decoder_dropout must lie in [0, 1)")

    @classmethod
    def desk(cls) -> "UNetSpec":
        return cls(base_features=8)


@dataclass
class SegTrainConfig:
    epochs: int = 100
    batch_size: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    base_lr: float = 0.01
    max_lr: float = 0.1
    lr_gamma: float = 0.9999  # per-iteration amplitude decay (exp_range mode)
    lr_step_size: int | None = None  # iterations per half cycle; None = 2 epochs
    augment_prob: float = 0.5
    blur_kernel: int = 5
    blur_sigma: float = 1.0
    focal_gamma: float = 2.0
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.base_lr > self.max_lr:
            raise ConfigError("base_lr must be <= max_lr")
        if not 0.0 <= self.augment_prob <= 1.0:
            raise ConfigError("augment_prob must lie in [0, 1]")
        if self.lr_gamma > 1.0 or self.lr_gamma <= 0.0:
            raise ConfigError("lr_gamma must lie in (0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("invalid epochs/batch_size")


def _conv_block(in_ch: int, out_ch: int, dropout: float = 0.0) -> nn.Sequential:
    layers: list[nn.Module] = [
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    ]
    if dropout > 0:
        layers.append(nn.Dropout2d(dropout))
    return nn.Sequential(*layers)


class UNet(nn.Module):
    """Plain U-Net, batch norm after each conv, dropout in the decoder blocks.

    Output is a one-channel probability map (sigmoid applied in forward).
    """

    def __init__(self, spec: UNetSpec):
        super().__init__()
        self.spec = spec
        chans = [spec.base_features * 2**i for i in range(spec.depth)]
        self.encoders = nn.ModuleList(
            [_conv_block(1 if i == 0 else chans[i - 1], chans[i]) for i in range(spec.depth)]
        )
        self.pool = nn.MaxPool2d(2)
        self.upsamplers = nn.ModuleList(
            [nn.ConvTranspose2d(chans[i], chans[i - 1], 2, stride=2) for i in range(spec.depth - 1, 0, -1)]
        )
        self.decoders = nn.ModuleList(
            [
                _conv_block(chans[i - 1] * 2, chans[i - 1], dropout=spec.decoder_dropout)
                for i in range(spec.depth - 1, 0, -1)
            ]
        )
        self.out_conv = nn.Conv2d(chans[0], 1, 1)

    def forward(self, x):
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x if i == 0 else self.pool(x))
            skips.append(x)
        for up, dec, skip in zip(self.upsamplers, self.decoders, reversed(skips[:-1])):
            x = dec(torch.cat([up(x), skip], dim=1))
        return torch.sigmoid(self.out_conv(x))


def build_unet(spec: UNetSpec, seed: int = 0) -> UNet:
    torch.manual_seed(derive_seed(seed, "unet-init"))
    return UNet(spec)


def cyclic_lr(iteration: int, config: SegTrainConfig) -> float:
    """Triangular cycle between base and max, amplitude decaying as gamma**iteration.

    lr(0) == base_lr; the peak of the first cycle sits at iteration
    lr_step_size. The value always stays inside [base_lr, max_lr] for
    gamma <= 1.
    """
    if iteration < 0:
        raise ConfigError("iteration must be >= 0")
    step = config.lr_step_size
    if step is None:
        raise ConfigError("lr_step_size is unresolved; set it or let train_segmenter derive it")
    cycle = math.floor(1 + iteration / (2 * step))
    x = abs(iteration / step - 2 * cycle + 1)
    amplitude = (config.max_lr - config.base_lr) * max(0.0, 1.0 - x) * config.lr_gamma**iteration
    return config.base_lr + amplitude


@dataclass
class AugmentedBatch:
    images: np.ndarray  # (n, h, w) float32
    masks: np.ndarray  # (n, h, w) bool, bit-identical to the input masks
    augmented_flags: list[bool]


def augment_batch(
    images: np.ndarray,
    masks: np.ndarray,
    g: Generator | None,
    rng: np.random.Generator,
    config: SegTrainConfig,
) -> AugmentedBatch:
    """Per item, with probability augment_prob: translate to the pathological
    domain and blur. Masks pass through untouched, always."""
    images = np.asarray(images, dtype=np.float32)
    n = images.shape[0]
    flags: list[bool] = []
    out_images = []
    for i in range(n):
        do_augment = g is not None and rng.random() < config.augment_prob
        flags.append(bool(do_augment))
        if do_augment:
            translated = translate_array(images[i], g)
            out_images.append(blur_array(translated, config.blur_kernel, config.blur_sigma))
        else:
            out_images.append(images[i])
    return AugmentedBatch(
        images=np.stack(out_images), masks=np.asarray(masks), augmented_flags=flags
    )


def soft_dice_coefficient(probs: np.ndarray, target: np.ndarray, eps: float = 1e-5) -> float:
    t = target.astype(np.float64)
    p = probs.astype(np.float64)
    return float((2.0 * (p * t).sum() + eps) / (p.sum() + t.sum() + eps))


@dataclass
class SegEpochStats:
    epoch: int
    train_loss: float
    val_dice: float
    lr_last: float
    max_postclip_grad_norm: float

    def to_dict(self) -> dict:
        return asdict(self)


def _load_seg_pairs(manifest: Manifest, domain: DomainLabel | None):
    pairs = []
    for rec in manifest.select(domain=domain):
        img = manifest.load_image(rec)
        mask = manifest.load_lung_mask(rec)
        if mask.shape != img.shape:
            raise DataError(f"slice {rec.key}: mask/image shapes differ")
        pairs.append((img.values, mask.values))
    return pairs


def train_segmenter(
    train_manifest: Manifest,
    val_manifest: Manifest,
    g: Generator | None,
    model: UNet,
    config: SegTrainConfig,
    stats: DatasetStats | None = None,
    checkpoint_dir: Path | str | None = None,
    resume: bool = False,
) -> tuple[UNet, list[SegEpochStats]]:
    """Train on healthy slices, validating each epoch; keeps the best
    validation-Dice weights. Returns the model with those weights loaded."""
    train_pairs = _load_seg_pairs(train_manifest, DomainLabel.HEALTHY)
    val_pairs = _load_seg_pairs(val_manifest, DomainLabel.HEALTHY)
    if not train_pairs or not val_pairs:
        raise DataError("empty training or validation manifest")

    if stats is None:
        stats = DatasetStats.from_arrays([img for img, _ in train_pairs])
    train_pairs = [(stats.normalize(i), m) for i, m in train_pairs]
    val_pairs = [(stats.normalize(i), m) for i, m in val_pairs]

    steps_per_epoch = math.ceil(len(train_pairs) / config.batch_size)
    if config.lr_step_size is None:
        config = replace(config, lr_step_size=2 * steps_per_epoch)

    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )

    history: list[SegEpochStats] = []
    best_state = None
    best_dice = -1.0
    start_epoch = 0
    iteration = 0

    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if resume:
        if checkpoint_dir is None or not (checkpoint_dir / "last.pt").exists():
            raise DataError("resume requested but no checkpoint found")
        payload = torch.load(checkpoint_dir / "last.pt", weights_only=False)
        model.load_state_dict(payload["state"])
        optimizer.load_state_dict(payload["optimizer"])
        history = [SegEpochStats(**d) for d in payload["history"]]
        best_state = payload.get("best_state")
        best_dice = payload.get("best_dice", -1.0)
        start_epoch = payload["completed_epochs"]
        iteration = start_epoch * steps_per_epoch
        stats = DatasetStats(**payload["stats"])

    for epoch in range(start_epoch, config.epochs):
        rng = np.random.default_rng(derive_seed(config.seed, "seg-epoch", epoch))
        torch.manual_seed(derive_seed(config.seed, "seg-torch", epoch))
        order = rng.permutation(len(train_pairs))
        model.train()
        loss_sum = 0.0
        max_norm = 0.0
        lr_now = config.lr
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            images = np.stack([train_pairs[j][0] for j in idx])
            masks = np.stack([train_pairs[j][1] for j in idx])
            batch = augment_batch(images, masks, g, rng, config)
            xb = torch.from_numpy(batch.images)[:, None]
            tb = torch.from_numpy(batch.masks.astype(np.float32))[:, None]

            lr_now = cyclic_lr(iteration, config)
            for group in optimizer.param_groups:
                group["lr"] = lr_now
            optimizer.zero_grad()
            loss = dice_focal_loss(model(xb), tb, config.focal_gamma)
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm)
            post = math.sqrt(
                sum(float((p.grad**2).sum()) for p in model.parameters() if p.grad is not None)
            )
            max_norm = max(max_norm, post)
            optimizer.step()
            loss_sum += float(loss)
            iteration += 1
            if not math.isfinite(loss_sum):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")

        val_dice = validate_soft_dice(model, val_pairs)
        history.append(
            SegEpochStats(
                epoch=epoch,
                train_loss=loss_sum / max(1, steps_per_epoch),
                val_dice=val_dice,
                lr_last=lr_now,
                max_postclip_grad_norm=max_norm,
            )
        )
        if val_dice > best_dice:
            best_dice = val_dice
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if checkpoint_dir is not None:
            _save_seg_checkpoint(
                checkpoint_dir, model, optimizer, config, stats, history, best_state, best_dice
            )

    if best_state is not None:
        model.load_state_dict(best_state)
    if checkpoint_dir is not None:
        save_segmenter_checkpoint(checkpoint_dir / "best.pt", model, config, stats, history)
    return model, history


def validate_soft_dice(model: UNet, pairs) -> float:
    model.eval()
    scores = []
    with torch.no_grad():
        for img, mask in pairs:
            probs = model(torch.from_numpy(img.astype(np.float32))[None, None])[0, 0].numpy()
            scores.append(soft_dice_coefficient(probs, mask))
    model.train()
    return float(np.mean(scores))


def predict_mask(img: Image2D, model: UNet, threshold: float = 0.5) -> BinaryMask:
    """Threshold the sigmoid output; dropout and batch-norm in inference mode.

    The input must be preprocessed exactly like training data (cropped,
    resized, normalized with the checkpoint's statistics).
    """
    if img.domain is not Domain.ZSCORED:
        raise DataError(f"predict_mask expects a z-scored image, got {img.domain.value}")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        probs = model(torch.from_numpy(img.values.astype(np.float32))[None, None])[0, 0].numpy()
    if was_training:
        model.train()
    return BinaryMask(probs >= threshold)


def _save_seg_checkpoint(
    checkpoint_dir: Path, model, optimizer, config, stats, history, best_state, best_dice
):
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "kind": "shapelock-unet-training",
        "unet_spec": json.dumps(asdict(model.spec)),
        "train_config": json.dumps(asdict(config)),
        "stats": {"mean": stats.mean, "std": stats.std},
        "state": model.state_dict(),
        "optimizer": optimizer.state_dict(),
        "completed_epochs": len(history),
        "history": [h.to_dict() for h in history],
        "best_state": best_state,
        "best_dice": best_dice,
    }
    tmp = checkpoint_dir / "last.pt.tmp"
    torch.save(payload, tmp)
    tmp.replace(checkpoint_dir / "last.pt")
    write_history_csv(checkpoint_dir / "history.csv", history)


def write_history_csv(path: Path | str, history: list[SegEpochStats]):
    rows = [h.to_dict() for h in history]
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def save_segmenter_checkpoint(
    path: Path | str, model: UNet, config: SegTrainConfig, stats: DatasetStats, history
):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "kind": "shapelock-unet",
            "unet_spec": json.dumps(asdict(model.spec)),
            "train_config": json.dumps(asdict(config)),
            "stats": {"mean": stats.mean, "std": stats.std},
            "state": model.state_dict(),
            "history": [h.to_dict() for h in history],
        },
        path,
    )


def load_segmenter_checkpoint(path: Path | str) -> tuple[UNet, DatasetStats, SegTrainConfig]:
    if not Path(path).exists():
        raise DataError(f"checkpoint not found: {path}")
    payload = torch.load(path, weights_only=False)
    if payload.get("kind") not in ("shapelock-unet", "shapelock-unet-training"):
        raise DataError(f"{path} is not a segmenter checkpoint")
    spec = UNetSpec(**json.loads(payload["unet_spec"]))
    model = UNet(spec)
    model.load_state_dict(payload["state"])
    model.eval()
    stats = DatasetStats(**payload["stats"])
    config = SegTrainConfig(**json.loads(payload["train_config"]))
    return model, stats, config
