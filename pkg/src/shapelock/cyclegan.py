"""Two-generator / two-discriminator translation model and training loop.

G maps healthy slices to pathological ones, F the reverse; patch
discriminators judge each domain. The generator is residual: it predicts a
bounded additive change field on top of its input, so the identity mapping
is trivially representable and the adversarial signal is spent entirely on
the domain difference. The surrounding-L1 constraint is applied only in
the healthy-to-pathological direction, where lung masks exist.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .dataio import DomainLabel, Manifest
from .errors import (
    ConfigError,
    DataError,
    DimensionMismatchError,
    DomainMismatchError,
    TrainingDivergedError,
)
from .imaging import Domain, Image2D
from .losses import (
    LossBreakdown,
    LossWeights,
    adversarial_mse,
    cycle_consistency,
    discriminator_mse,
    identity_loss,
    surrounding_l1,
    total_cyclegan_loss,
)
from .util import derive_seed


@dataclass(frozen=True)
class GanModelSpec:
    """Architecture knobs for both generators and both discriminators."""

    input_size: int = 256
    base_channels: int = 64
    n_resnet_blocks: int = 6
    disc_layers: int = 3
    delta_bound: float = 3.0  # tanh scale of the generator's change field

    def __post_init__(self):
        if self.input_size % 4 != 0:
            raise ConfigError("input_size must be divisible by 4 (two downsamplings)")
        if self.base_channels < 1 or self.n_resnet_blocks < 0 or self.disc_layers < 1:
            raise ConfigError("invalid model spec")

    @classmethod
    def desk(cls) -> "GanModelSpec":
        """Small configuration for CPU-scale runs at 64 px."""
        return cls(input_size=64, base_channels=16, n_resnet_blocks=3)

    def disc_output_size(self) -> int:
        """Spatial size of the patch-score grid for input_size inputs."""
        s = self.input_size
        for _ in range(self.disc_layers):
            s = (s + 2 - 4) // 2 + 1  # conv k4 s2 p1
        return s + 2 - 4 + 1  # final conv k4 s1 p1


@dataclass
class GanTrainConfig:
    """Optimization settings. Batch size 1 and float32 are deliberate and fixed."""

    epochs: int = 100
    batch_size: int = 1
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    test_every_epoch: bool = True
    inside_change_floor: float = 0.05  # reject identity-collapsed checkpoints
    use_image_pool: bool = False
    pool_size: int = 50
    use_lr_decay: bool = False

    def __post_init__(self):
        if self.batch_size != 1:
            raise ConfigError("batch_size is fixed at 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.betas, list):
            self.betas = tuple(self.betas)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    """Encoder (2 downsamplings) -> residual blocks -> decoder, predicting a
    change field bounded to +/- delta_bound that is added to the input."""

    def __init__(self, spec: GanModelSpec):
        super().__init__()
        self.input_size = spec.input_size
        self.delta_bound = spec.delta_bound
        c = spec.base_channels
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(1, c, 7),
            nn.InstanceNorm2d(c),
            nn.ReLU(inplace=True),
        ]
        ch = c
        for _ in range(2):
            layers += [
                nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1),
                nn.InstanceNorm2d(ch * 2),
                nn.ReLU(inplace=True),
            ]
            ch *= 2
        layers += [ResidualBlock(ch) for _ in range(spec.n_resnet_blocks)]
        for _ in range(2):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(ch // 2),
                nn.ReLU(inplace=True),
            ]
            ch //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ch, 1, 7)]
        self.head = nn.Sequential(*layers)

    def forward(self, x):
        return x + self.delta_bound * torch.tanh(self.head(x))


class PatchDiscriminator(nn.Module):
    """Strided conv stack emitting a grid of per-patch real/fake scores."""

    def __init__(self, spec: GanModelSpec):
        super().__init__()
        c = spec.base_channels
        layers: list[nn.Module] = [nn.Conv2d(1, c, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        ch = c
        for _ in range(spec.disc_layers - 1):
            layers += [
                nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1),
                nn.InstanceNorm2d(ch * 2),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch *= 2
        layers += [nn.Conv2d(ch, 1, 4, stride=1, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


@dataclass
class GanBundle:
    """The four networks plus the spec they were built from."""

    g: Generator
    f: Generator
    d_healthy: PatchDiscriminator
    d_pathological: PatchDiscriminator
    spec: GanModelSpec

    def modules(self) -> dict[str, nn.Module]:
        return {
            "g": self.g,
            "f": self.f,
            "d_healthy": self.d_healthy,
            "d_pathological": self.d_pathological,
        }

    def any_nan(self) -> bool:
        return any(
            not torch.isfinite(p).all() for m in self.modules().values() for p in m.parameters()
        )


def _init_weights(module: nn.Module):
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def build_models(spec: GanModelSpec, seed: int = 0) -> GanBundle:
    """Construct G, F, D_healthy, D_pathological with seed-determined weights."""
    torch.manual_seed(derive_seed(seed, "gan-init"))
    bundle = GanBundle(
        g=Generator(spec),
        f=Generator(spec),
        d_healthy=PatchDiscriminator(spec),
        d_pathological=PatchDiscriminator(spec),
        spec=spec,
    )
    for m in bundle.modules().values():
        m.apply(_init_weights)
    return bundle


@dataclass(frozen=True)
class DatasetStats:
    """Dataset-level normalization: one (mean, std) pair shared by both domains.

    A per-slice z-score would put the surrounding anatomy of the two domains
    at different levels (the pathology shifts each slice's own statistics),
    handing the discriminators a shortcut that fights the frozen-surrounding
    constraint. Shared statistics leave the pathology itself as the only
    systematic domain difference.
    """

    mean: float
    std: float

    def __post_init__(self):
        if self.std <= 0:
            raise DataError("dataset std must be positive")

    @classmethod
    def from_arrays(cls, arrays: list[np.ndarray]) -> "DatasetStats":
        if not arrays:
            raise DataError("cannot compute statistics of an empty dataset")
        stacked = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])
        return cls(mean=float(stacked.mean()), std=float(stacked.std()))

    def normalize(self, arr: np.ndarray) -> np.ndarray:
        return ((np.asarray(arr, dtype=np.float64) - self.mean) / self.std).astype(np.float32)

    def denormalize(self, arr: np.ndarray) -> np.ndarray:
        return (np.asarray(arr, dtype=np.float64) * self.std + self.mean).astype(np.float32)


class ImagePool:
    """Replay buffer of previously generated images (off by default)."""

    def __init__(self, size: int, seed: int):
        self.size = size
        self.rng = np.random.default_rng(derive_seed(seed, "image-pool"))
        self.images: list[torch.Tensor] = []

    def query(self, image: torch.Tensor) -> torch.Tensor:
        if self.size == 0:
            return image
        if len(self.images) < self.size:
            self.images.append(image.detach().clone())
            return image
        if self.rng.random() > 0.5:
            idx = int(self.rng.integers(0, self.size))
            out = self.images[idx].clone()
            self.images[idx] = image.detach().clone()
            return out
        return image


@dataclass
class EpochReport:
    """Mean training losses of one epoch plus its test-phase shape metrics."""

    epoch: int
    losses: LossBreakdown
    shape_preservation: float = float("nan")
    inside_change: float = float("nan")

    def to_dict(self) -> dict:
        d = {"epoch": self.epoch}
        d.update(self.losses.to_dict())
        d["shape_preservation"] = self.shape_preservation
        d["inside_change"] = self.inside_change
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpochReport":
        losses = LossBreakdown(
            adv_g=d["adv_g"],
            adv_f=d["adv_f"],
            cycle=d["cycle"],
            surrounding_l1=d["surrounding_l1"],
            identity=d["identity"],
            total=d["total"],
        )
        return cls(
            epoch=d["epoch"],
            losses=losses,
            shape_preservation=d["shape_preservation"],
            inside_change=d["inside_change"],
        )


def _to_tensor(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[None, None]


class GanTrainer:
    """Owns the optimizers; one call to train_step performs one generator
    update and one update of each discriminator."""

    def __init__(self, bundle: GanBundle, config: GanTrainConfig):
        self.bundle = bundle
        self.config = config
        self.opt_g = torch.optim.Adam(
            list(bundle.g.parameters()) + list(bundle.f.parameters()),
            lr=config.lr,
            betas=config.betas,
        )
        self.opt_dx = torch.optim.Adam(
            bundle.d_healthy.parameters(), lr=config.lr, betas=config.betas
        )
        self.opt_dy = torch.optim.Adam(
            bundle.d_pathological.parameters(), lr=config.lr, betas=config.betas
        )
        self.pool_healthy = ImagePool(config.pool_size if config.use_image_pool else 0, config.seed)
        self.pool_patho = ImagePool(config.pool_size if config.use_image_pool else 0, config.seed + 1)

    def set_lr(self, lr: float):
        for opt in (self.opt_g, self.opt_dx, self.opt_dy):
            for group in opt.param_groups:
                group["lr"] = lr

    def train_step(
        self, x: np.ndarray, mask_x: np.ndarray, y: np.ndarray
    ) -> LossBreakdown:
        """One optimization step on a healthy slice x (with lung mask) and an
        unpaired pathological slice y. Returns the generator-loss breakdown."""
        if mask_x is None:
            raise DataError("healthy slice without a lung mask cannot constrain the surrounding")
        b = self.bundle
        w = self.config.weights
        xt, yt = _to_tensor(x), _to_tensor(y)
        mt = _to_tensor(mask_x.astype(np.float32))

        # generators
        self.opt_g.zero_grad()
        fake_y = b.g(xt)
        fake_x = b.f(yt)
        adv_g = adversarial_mse(b.d_pathological(fake_y), target_is_real=True)
        adv_f = adversarial_mse(b.d_healthy(fake_x), target_is_real=True)
        cycle = cycle_consistency(xt, b.f(fake_y)) + cycle_consistency(yt, b.g(fake_x))
        surrounding = surrounding_l1(xt, fake_y, mt)
        if w.gamma_identity > 0:
            ident = identity_loss(yt, b.g(yt)) + identity_loss(xt, b.f(xt))
        else:
            ident = torch.zeros(())
        breakdown = total_cyclegan_loss(adv_g, adv_f, cycle, surrounding, ident, w)
        breakdown.total.backward()
        self.opt_g.step()

        self._disc_step(b.d_healthy, self.opt_dx, xt, self.pool_healthy.query(fake_x.detach()))
        self._disc_step(b.d_pathological, self.opt_dy, yt, self.pool_patho.query(fake_y.detach()))

        return LossBreakdown(
            adv_g=float(breakdown.adv_g),
            adv_f=float(breakdown.adv_f),
            cycle=float(breakdown.cycle),
            surrounding_l1=float(breakdown.surrounding_l1),
            identity=float(breakdown.identity),
            total=float(breakdown.total),
        )

    @staticmethod
    def _disc_step(disc, opt, real, fake_detached):
        opt.zero_grad()
        loss = discriminator_mse(disc(real), disc(fake_detached))
        loss.backward()
        opt.step()


def evaluate_shape_metrics(
    g: Generator, test_pairs: list[tuple[np.ndarray, np.ndarray]]
) -> tuple[float, float]:
    """(shape_preservation, inside_change) of G over held-out healthy slices.

    shape_preservation: mean absolute change outside the lung mask (lower is
    better); inside_change: mean absolute change over lung pixels (slices
    without lungs are skipped for this one).
    """
    if not test_pairs:
        raise DataError("empty test set")
    outside_vals, inside_vals = [], []
    g.eval()
    with torch.no_grad():
        for x, mask in test_pairs:
            xt = _to_tensor(x)
            diff = torch.abs(xt - g(xt))[0, 0].numpy()
            m = mask.astype(bool)
            if (~m).any():
                outside_vals.append(float(diff[~m].mean()))
            if m.any():
                inside_vals.append(float(diff[m].mean()))
    g.train()
    shape_preservation = float(np.mean(outside_vals)) if outside_vals else float("nan")
    inside_change = float(np.mean(inside_vals)) if inside_vals else float("nan")
    return shape_preservation, inside_change


def _load_split_arrays(manifest: Manifest, spec: GanModelSpec):
    """Load (healthy image+mask pairs, pathological images), normalized later."""
    healthy, patho = [], []
    for rec in manifest.select(domain=DomainLabel.HEALTHY):
        img = manifest.load_image(rec)
        if img.shape != (spec.input_size, spec.input_size):
            raise DataError(
                f"slice {rec.key} is {img.shape}, model expects "
                f"{spec.input_size}x{spec.input_size}; crop with the matching out-size"
            )
        mask = manifest.load_lung_mask(rec)
        healthy.append((img.values, mask.values))
    for rec in manifest.select(domain=DomainLabel.PATHOLOGICAL):
        img = manifest.load_image(rec)
        if img.shape != (spec.input_size, spec.input_size):
            raise DataError(f"slice {rec.key} is {img.shape}, expected {spec.input_size}")
        patho.append(img.values)
    return healthy, patho


def train(
    train_manifest: Manifest,
    test_manifest: Manifest,
    bundle: GanBundle,
    config: GanTrainConfig,
    stats: DatasetStats | None = None,
    checkpoint_dir: Path | str | None = None,
    resume: bool = False,
) -> tuple[GanBundle, list[EpochReport]]:
    """Train on unpaired shuffled domains with a test phase after every epoch.

    Each epoch pairs the i-th healthy slice with the i-th pathological slice
    of that epoch's shuffles, truncated to the shorter domain. The best
    checkpoint minimizes the test shape-preservation metric among epochs
    whose inside-lung change clears the identity-collapse floor; the
    returned bundle carries those best weights.
    """
    healthy_train, patho_train = _load_split_arrays(train_manifest, bundle.spec)
    if not healthy_train or not patho_train:
        raise DataError("training manifest must contain both domains")
    test_healthy, _ = _load_split_arrays(test_manifest, bundle.spec)
    if not test_healthy:
        raise DataError("test manifest must contain healthy slices with lung masks")

    if stats is None:
        stats = DatasetStats.from_arrays(
            [img for img, _ in healthy_train] + list(patho_train)
        )
    healthy_train = [(stats.normalize(i), m) for i, m in healthy_train]
    patho_train = [stats.normalize(i) for i in patho_train]
    test_pairs = [(stats.normalize(i), m) for i, m in test_healthy]

    trainer = GanTrainer(bundle, config)
    reports: list[EpochReport] = []
    best_state = None
    best_key = None
    start_epoch = 0

    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if resume:
        if checkpoint_dir is None or not (checkpoint_dir / "last.pt").exists():
            raise DataError("resume requested but no checkpoint found")
        payload = torch.load(checkpoint_dir / "last.pt", weights_only=False)
        _load_bundle_state(bundle, payload["state"])
        trainer.opt_g.load_state_dict(payload["optimizers"]["g"])
        trainer.opt_dx.load_state_dict(payload["optimizers"]["d_healthy"])
        trainer.opt_dy.load_state_dict(payload["optimizers"]["d_pathological"])
        reports = [EpochReport.from_dict(d) for d in payload["reports"]]
        best_state = payload.get("best_state")
        best_key = payload.get("best_key")
        start_epoch = payload["completed_epochs"]
        stats = DatasetStats(**payload["stats"])

    n_pairs = min(len(healthy_train), len(patho_train))
    for epoch in range(start_epoch, config.epochs):
        rng = np.random.default_rng(derive_seed(config.seed, "shuffle", epoch))
        torch.manual_seed(derive_seed(config.seed, "torch", epoch))
        if config.use_lr_decay:
            frac = max(0.0, 1.0 - max(0, epoch - config.epochs // 2) / max(1, config.epochs - config.epochs // 2))
            trainer.set_lr(config.lr * frac)
        order_h = rng.permutation(len(healthy_train))
        order_p = rng.permutation(len(patho_train))
        sums = np.zeros(6, dtype=np.float64)
        for i in range(n_pairs):
            x, mask = healthy_train[order_h[i]]
            y = patho_train[order_p[i]]
            b = trainer.train_step(x, mask, y)
            step_vals = np.array(
                [b.adv_g, b.adv_f, b.cycle, b.surrounding_l1, b.identity, b.total]
            )
            if not np.all(np.isfinite(step_vals)):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            sums += step_vals
        means = sums / n_pairs
        report = EpochReport(
            epoch=epoch,
            losses=LossBreakdown(*[float(v) for v in means]),
        )
        if config.test_every_epoch:
            sp, ic = evaluate_shape_metrics(bundle.g, test_pairs)
            report.shape_preservation = sp
            report.inside_change = ic
            if np.isfinite(ic) and ic >= config.inside_change_floor:
                if best_key is None or sp < best_key:
                    best_key = sp
                    best_state = {
                        name: {k: v.detach().clone() for k, v in m.state_dict().items()}
                        for name, m in bundle.modules().items()
                    }
        reports.append(report)
        if bundle.any_nan():
            raise TrainingDivergedError(f"non-finite parameters after epoch {epoch}")
        if checkpoint_dir is not None:
            _save_training_checkpoint(
                checkpoint_dir, bundle, trainer, config, stats, reports, best_state, best_key
            )

    if best_state is not None:
        _load_bundle_state(bundle, best_state)
    if checkpoint_dir is not None:
        save_generator_checkpoint(checkpoint_dir / "best.pt", bundle, config, stats, reports)
    return bundle, reports


def _load_bundle_state(bundle: GanBundle, state: dict):
    for name, module in bundle.modules().items():
        module.load_state_dict(state[name])


def _save_training_checkpoint(
    checkpoint_dir: Path, bundle, trainer, config, stats, reports, best_state, best_key
):
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "kind": "shapelock-cyclegan-training",
        "model_spec": json.dumps(asdict(bundle.spec)),
        "train_config": json.dumps(asdict(config)),
        "stats": {"mean": stats.mean, "std": stats.std},
        "state": {name: m.state_dict() for name, m in bundle.modules().items()},
        "optimizers": {
            "g": trainer.opt_g.state_dict(),
            "d_healthy": trainer.opt_dx.state_dict(),
            "d_pathological": trainer.opt_dy.state_dict(),
        },
        "completed_epochs": len(reports),
        "reports": [r.to_dict() for r in reports],
        "best_state": best_state,
        "best_key": best_key,
    }
    tmp = checkpoint_dir / "last.pt.tmp"
    torch.save(payload, tmp)
    tmp.replace(checkpoint_dir / "last.pt")
    write_report_csv(checkpoint_dir / "reports.csv", reports)


def write_report_csv(path: Path | str, reports: list[EpochReport]):
    rows = [r.to_dict() for r in reports]
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def save_generator_checkpoint(
    path: Path | str, bundle: GanBundle, config: GanTrainConfig, stats: DatasetStats, reports
):
    """Inference-ready archive: parameters + spec/config as JSON metadata."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "kind": "shapelock-cyclegan",
            "model_spec": json.dumps(asdict(bundle.spec)),
            "train_config": json.dumps(asdict(config)),
            "stats": {"mean": stats.mean, "std": stats.std},
            "state": {name: m.state_dict() for name, m in bundle.modules().items()},
            "reports": [r.to_dict() for r in reports],
        },
        path,
    )


def load_generator_checkpoint(path: Path | str) -> tuple[GanBundle, DatasetStats, list[EpochReport]]:
    if not Path(path).exists():
        raise DataError(f"checkpoint not found: {path}")
    payload = torch.load(path, weights_only=False)
    if payload.get("kind") not in ("shapelock-cyclegan", "shapelock-cyclegan-training"):
        raise DataError(f"{path} is not a translation-model checkpoint")
    spec = GanModelSpec(**json.loads(payload["model_spec"]))
    bundle = build_models(spec, seed=0)
    _load_bundle_state(bundle, payload["state"])
    stats = DatasetStats(**payload["stats"])
    reports = [EpochReport.from_dict(d) for d in payload.get("reports", [])]
    return bundle, stats, reports


def translate_array(arr: np.ndarray, g: Generator) -> np.ndarray:
    """Deterministic inference on one z-scored array."""
    if arr.shape != (g.input_size, g.input_size):
        raise DimensionMismatchError(
            f"input {arr.shape} does not match the trained resolution {g.input_size}"
        )
    was_training = g.training
    g.eval()
    with torch.no_grad():
        out = g(_to_tensor(arr))[0, 0].numpy().astype(np.float32)
    if was_training:
        g.train()
    return out


def translate(img: Image2D, g: Generator) -> Image2D:
    """Translate one z-scored slice; output is z-scored, same shape, finite."""
    if img.domain is not Domain.ZSCORED:
        raise DomainMismatchError(f"translate expects a z-scored image, got {img.domain.value}")
    return Image2D(translate_array(img.values, g), Domain.ZSCORED)
