"""
Generative Core Module
Progressively growing adversarial generator and discriminator used for
the first stage of every pipeline (dots, labels, or stacked image+label)
"""

import os
import json
import math
import logging
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .checkpoints import NetworkCheckpoint, clone_state
from .config import resolve_device
from .errors import ConfigError, ShapeError, StateError, TrainingDiverged
from .label_codec import CLASS_COUNT, get_palette

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = 'progressive_gan'


def is_power_of_two(value: int) -> bool:
    return value >= 1 and value & (value - 1) == 0


@dataclass
class GrowthSchedule:
    """Resolution doubling schedule with a fade-in at the start of each new stage"""
    start_res: int = 4
    target_res: int = 64
    steps_per_stage: int = 200
    fade_fraction: float = 0.5

    def validate(self):
        if self.start_res != 4:
            raise ConfigError(f"Growth always starts at 4x4, got {self.start_res}")
        if not is_power_of_two(self.target_res) or self.target_res < self.start_res:
            raise ConfigError(f"target_res must be a power of two >= 4, got {self.target_res}")
        if self.steps_per_stage < 1:
            raise ConfigError("steps_per_stage must be >= 1")
        if not 0.0 < self.fade_fraction < 1.0:
            raise ConfigError(f"fade_fraction must lie in (0, 1), got {self.fade_fraction}")

    def resolutions(self) -> List[int]:
        count = int(math.log2(self.target_res // self.start_res)) + 1
        return [self.start_res * 2 ** k for k in range(count)]

    @property
    def num_stages(self) -> int:
        return len(self.resolutions())

    @property
    def total_steps(self) -> int:
        return self.num_stages * self.steps_per_stage

    def stage_at(self, step: int) -> Tuple[int, int]:
        """(stage, step within stage) for a 0-based global step"""
        stage = min(step // self.steps_per_stage, self.num_stages - 1)
        return stage, step - stage * self.steps_per_stage

    def alpha(self, stage: int, step_in_stage: int) -> float:
        """Fade-in coefficient, ramping 0 -> 1 over fade_fraction of the stage budget"""
        if stage == 0:
            return 1.0
        fade_steps = max(1, int(round(self.fade_fraction * self.steps_per_stage)))
        return min(1.0, step_in_stage / fade_steps)


@dataclass
class GeneratorConfig:
    """Architecture and training settings of a progressive GAN"""
    latent_dim: int = 64
    out_channels: int = 1
    max_feature_maps: int = 64
    target_res: int = 64
    steps_per_stage: int = 200
    fade_fraction: float = 0.5
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.99
    gp_weight: float = 10.0
    drift_weight: float = 0.001
    log_every: int = 10
    sample_every: int = 0
    seed: int = 0

    @property
    def schedule(self) -> GrowthSchedule:
        return GrowthSchedule(
            target_res=self.target_res,
            steps_per_stage=self.steps_per_stage,
            fade_fraction=self.fade_fraction
        )

    @property
    def channel_kinds(self) -> Tuple[str, ...]:
        """Channel 0 is the image and channel 1 the labels when stacked"""
        return ('label',) if self.out_channels == 1 else ('image', 'label')

    def validate(self):
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.out_channels not in (1, 2):
            raise ConfigError(f"out_channels must be 1 or 2, got {self.out_channels}")
        if self.max_feature_maps < 1:
            raise ConfigError("max_feature_maps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.schedule.validate()

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'GeneratorConfig':
        return cls(**data)


def feature_maps(resolution: int, max_feature_maps: int) -> int:
    """Width of the blocks working at a resolution, never above the cap"""
    return max(1, min(max_feature_maps, 8192 // resolution))


class EqualizedConv2d(nn.Module):
    """Convolution with the He constant applied at runtime (equalized learning rate)"""

    def __init__(self, in_channels, out_channels, kernel_size, padding=0):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.padding = padding
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.scale = math.sqrt(2.0 / (in_channels * kernel_size * kernel_size))

    def forward(self, x):
        return F.conv2d(x, self.weight * self.scale, self.bias, padding=self.padding)


class EqualizedLinear(nn.Module):

    def __init__(self, in_features, out_features):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = nn.Parameter(torch.randn(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features))
        self.scale = math.sqrt(2.0 / in_features)

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias)


class PixelNorm(nn.Module):

    def forward(self, x):
        return x / torch.sqrt(torch.mean(x ** 2, dim=1, keepdim=True) + 1e-8)


class MinibatchStdDev(nn.Module):
    """Appends the batch-averaged feature standard deviation as one extra map"""

    def forward(self, x):
        n, _, h, w = x.shape
        std = torch.sqrt(x.var(dim=0, unbiased=False) + 1e-8).mean()
        return torch.cat([x, std.expand(n, 1, h, w)], dim=1)


class ProgressiveGenerator(nn.Module):
    """Latent vector -> out_channels x res x res grid at the current stage"""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.resolutions = config.schedule.resolutions()
        widths = [feature_maps(res, config.max_feature_maps) for res in self.resolutions]
        self.widths = widths

        self.latent_norm = PixelNorm()
        self.project = EqualizedLinear(config.latent_dim, widths[0] * 16)
        self.initial = nn.Sequential(
            nn.LeakyReLU(0.2), PixelNorm(),
            EqualizedConv2d(widths[0], widths[0], 3, padding=1), nn.LeakyReLU(0.2), PixelNorm()
        )

        self.blocks = nn.ModuleList([nn.Identity()])
        for k in range(1, len(widths)):
            self.blocks.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode='nearest'),
                EqualizedConv2d(widths[k - 1], widths[k], 3, padding=1), nn.LeakyReLU(0.2), PixelNorm(),
                EqualizedConv2d(widths[k], widths[k], 3, padding=1), nn.LeakyReLU(0.2), PixelNorm()
            ))
        self.to_out = nn.ModuleList([
            EqualizedConv2d(width, config.out_channels, 1) for width in widths
        ])

        self.stage = 0
        self.alpha = 1.0

    def forward(self, z, stage: Optional[int] = None, alpha: Optional[float] = None):
        stage = self.stage if stage is None else stage
        alpha = self.alpha if alpha is None else alpha

        h = self.project(self.latent_norm(z)).view(z.shape[0], self.widths[0], 4, 4)
        h = self.initial(h)
        prev = h
        for k in range(1, stage + 1):
            prev = h
            h = self.blocks[k](h)

        out = self.to_out[stage](h)
        if stage > 0 and alpha < 1.0:
            skip = F.interpolate(self.to_out[stage - 1](prev), scale_factor=2, mode='nearest')
            out = (1.0 - alpha) * skip + alpha * out
        return torch.tanh(out)

    def feature_map_widths(self) -> List[int]:
        widths = [self.project.out_features // 16]
        widths += [m.out_channels for m in self.modules()
                   if isinstance(m, EqualizedConv2d) and m not in set(self.to_out)]
        return widths


class ProgressiveDiscriminator(nn.Module):
    """Grid at the current stage resolution -> real-valued score"""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.resolutions = config.schedule.resolutions()
        widths = [feature_maps(res, config.max_feature_maps) for res in self.resolutions]
        self.widths = widths

        self.from_in = nn.ModuleList([
            nn.Sequential(EqualizedConv2d(config.out_channels, width, 1), nn.LeakyReLU(0.2))
            for width in widths
        ])
        self.blocks = nn.ModuleList([nn.Identity()])
        for k in range(1, len(widths)):
            self.blocks.append(nn.Sequential(
                EqualizedConv2d(widths[k], widths[k], 3, padding=1), nn.LeakyReLU(0.2),
                EqualizedConv2d(widths[k], widths[k - 1], 3, padding=1), nn.LeakyReLU(0.2),
                nn.AvgPool2d(2)
            ))
        self.final = nn.Sequential(
            MinibatchStdDev(),
            EqualizedConv2d(widths[0] + 1, widths[0], 3, padding=1), nn.LeakyReLU(0.2),
            EqualizedConv2d(widths[0], widths[0], 4), nn.LeakyReLU(0.2),
            nn.Flatten()
        )
        self.score = EqualizedLinear(widths[0], 1)

        self.stage = 0
        self.alpha = 1.0

    def forward(self, x, stage: Optional[int] = None, alpha: Optional[float] = None):
        stage = self.stage if stage is None else stage
        alpha = self.alpha if alpha is None else alpha

        h = self.from_in[stage](x)
        if stage > 0:
            h = self.blocks[stage](h)
            if alpha < 1.0:
                skip = self.from_in[stage - 1](F.avg_pool2d(x, 2))
                h = alpha * h + (1.0 - alpha) * skip
            for k in range(stage - 1, 0, -1):
                h = self.blocks[k](h)
        return self.score(self.final(h)).squeeze(1)

    def feature_map_widths(self) -> List[int]:
        return [m.out_channels for m in self.modules() if isinstance(m, EqualizedConv2d)]


def build(config: GeneratorConfig) -> Tuple[ProgressiveGenerator, ProgressiveDiscriminator]:
    """Build a generator/discriminator pair; every block for every stage exists up front"""
    config.validate()
    torch.manual_seed(config.seed)
    generator = ProgressiveGenerator(config)
    discriminator = ProgressiveDiscriminator(config)
    logger.info(
        f"Built progressive GAN: stages={config.schedule.resolutions()}, "
        f"channels={config.out_channels}, max_feature_maps={config.max_feature_maps}"
    )
    return generator, discriminator


def to_model_scale(grids: np.ndarray, config: GeneratorConfig) -> np.ndarray:
    """Images [0, 1] and label codes [0, CLASS_COUNT-1] both to [-1, 1]"""
    out = np.empty(grids.shape, dtype=np.float32)
    for channel, kind in enumerate(config.channel_kinds):
        values = grids[:, channel].astype(np.float32)
        if kind == 'label':
            values = values / (CLASS_COUNT - 1)
        out[:, channel] = values * 2.0 - 1.0
    return out


def from_model_scale(grids: np.ndarray, config: GeneratorConfig) -> np.ndarray:
    """Inverse of to_model_scale; label channels are quantized to the nearest code"""
    out = np.empty(grids.shape, dtype=np.float32)
    for channel, kind in enumerate(config.channel_kinds):
        values = (grids[:, channel] + 1.0) / 2.0
        if kind == 'label':
            values = np.clip(np.rint(values * (CLASS_COUNT - 1)), 0, CLASS_COUNT - 1)
        else:
            values = np.clip(values, 0.0, 1.0)
        out[:, channel] = values
    return out


class ProgressiveGAN:
    """Training state: both networks, their optimizers and the growth position"""

    def __init__(self, config: GeneratorConfig, device=None):
        self.config = config
        self.schedule = config.schedule
        self.device = device or resolve_device()
        self.generator, self.discriminator = build(config)
        self.generator.to(self.device)
        self.discriminator.to(self.device)

        betas = (config.beta1, config.beta2)
        self.optim_g = torch.optim.Adam(self.generator.parameters(), lr=config.learning_rate, betas=betas)
        self.optim_d = torch.optim.Adam(self.discriminator.parameters(), lr=config.learning_rate, betas=betas)

        self.stage = 0
        self.step = 0
        self.set_alpha(1.0)

    @property
    def resolution(self) -> int:
        return self.schedule.resolutions()[self.stage]

    def set_alpha(self, alpha: float):
        self.alpha = alpha
        self.generator.alpha = alpha
        self.discriminator.alpha = alpha

    def set_stage(self, stage: int):
        self.stage = stage
        self.generator.stage = stage
        self.discriminator.stage = stage

    def grow(self) -> 'ProgressiveGAN':
        """Double the resolution; the new blocks start fully faded out (alpha = 0)"""
        if self.stage >= self.schedule.num_stages - 1:
            raise StateError(f"Cannot grow past target resolution {self.schedule.target_res}")
        self.set_stage(self.stage + 1)
        self.set_alpha(0.0)
        logger.info(f"Grew to stage {self.stage} ({self.resolution}x{self.resolution})")
        return self

    def to_checkpoint(self, metadata: Optional[Dict] = None) -> NetworkCheckpoint:
        return NetworkCheckpoint(
            kind=CHECKPOINT_KIND,
            config=self.config.to_dict(),
            states={
                'generator': clone_state(self.generator),
                'discriminator': clone_state(self.discriminator),
                'optim_g': self.optim_g.state_dict(),
                'optim_d': self.optim_d.state_dict()
            },
            stage=self.stage,
            step=self.step,
            metadata=dict(metadata or {}, resolution=self.resolution)
        )

    @classmethod
    def from_checkpoint(cls, ckpt: NetworkCheckpoint, device=None) -> 'ProgressiveGAN':
        if ckpt.kind != CHECKPOINT_KIND:
            raise StateError(f"Expected a {CHECKPOINT_KIND} checkpoint, got {ckpt.kind}")
        ckpt.verify()
        gan = cls(GeneratorConfig.from_dict(ckpt.config), device=device)
        gan.generator.load_state_dict(ckpt.states['generator'])
        gan.discriminator.load_state_dict(ckpt.states['discriminator'])
        if 'optim_g' in ckpt.states:
            gan.optim_g.load_state_dict(ckpt.states['optim_g'])
            gan.optim_d.load_state_dict(ckpt.states['optim_d'])
        gan.set_stage(ckpt.stage)
        gan.step = ckpt.step
        stage, in_stage = gan.schedule.stage_at(max(ckpt.step - 1, 0))
        gan.set_alpha(gan.schedule.alpha(ckpt.stage, in_stage) if stage == ckpt.stage else 1.0)
        return gan


def grow(state: ProgressiveGAN) -> ProgressiveGAN:
    return state.grow()


def _gradient_penalty(discriminator, real, fake, generator_rng):
    eps = torch.rand(real.shape[0], 1, 1, 1, generator=generator_rng).to(real.device)
    mixed = (eps * real + (1.0 - eps) * fake).requires_grad_(True)
    scores = discriminator(mixed)
    grads = torch.autograd.grad(
        outputs=scores.sum(), inputs=mixed, create_graph=True, retain_graph=True
    )[0]
    return ((grads.flatten(1).norm(2, dim=1) - 1.0) ** 2).mean()


def _real_batch(data: torch.Tensor, indices: torch.Tensor, resolution: int, alpha: float):
    real = data[indices]
    if real.shape[-1] != resolution:
        real = F.interpolate(real, size=(resolution, resolution), mode='area')
    if alpha < 1.0:
        coarse = F.interpolate(F.avg_pool2d(real, 2), scale_factor=2, mode='nearest')
        real = alpha * real + (1.0 - alpha) * coarse
    return real


def _check_finite(step: int, **losses):
    for name, value in losses.items():
        if not math.isfinite(value):
            raise TrainingDiverged(f"Non-finite {name} ({value}) at step {step}", step=step, loss=name)


def save_sample_grid(path: str, grids: np.ndarray, config: GeneratorConfig, columns: int = 8):
    """Write a PNG contact sheet of samples (label channels colorized)"""
    palette = get_palette()
    tiles = []
    for grid in grids:
        row = []
        for channel, kind in enumerate(config.channel_kinds):
            if kind == 'label':
                row.append(palette.colorize(grid[channel].astype(np.uint8)))
            else:
                gray = np.rint(np.clip(grid[channel], 0, 1) * 255).astype(np.uint8)
                row.append(np.repeat(gray[..., None], 3, axis=2))
        tiles.append(np.concatenate(row, axis=1))

    rows = []
    for start in range(0, len(tiles), columns):
        chunk = tiles[start:start + columns]
        chunk += [np.zeros_like(tiles[0])] * (columns - len(chunk))
        rows.append(np.concatenate(chunk, axis=1))
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    Image.fromarray(np.concatenate(rows, axis=0)).save(path)


def train_adversarial(data: np.ndarray, config: GeneratorConfig, output_dir: Optional[str] = None,
                      resume: Optional[NetworkCheckpoint] = None, device=None) -> NetworkCheckpoint:
    """
    Train a progressive GAN on N x C x T x T grids at the target resolution

    Args:
        data: Images in [0, 1] and/or label codes, channels per config.channel_kinds
        config: Generator config
        output_dir: Where per-stage checkpoints, train_log.jsonl and sample sheets go
        resume: Checkpoint to continue from; the step counter continues and no
            grow happens for stages already reached
        device: Torch device, defaults to the configured one

    Returns:
        Final checkpoint; its metadata carries the loss history
    """
    config.validate()
    data = np.asarray(data)
    if data.ndim != 4 or data.shape[0] == 0:
        raise ConfigError(f"Training data must be a non-empty N x C x H x W array, got {data.shape}")
    if data.shape[1] != config.out_channels:
        raise ShapeError(f"Data has {data.shape[1]} channels, config expects {config.out_channels}")
    if data.shape[2] != config.target_res or data.shape[3] != config.target_res:
        raise ShapeError(f"Data is {data.shape[2]}x{data.shape[3]}, expected target {config.target_res}")

    if resume is not None:
        gan = ProgressiveGAN.from_checkpoint(resume, device=device)
        if resume.config != config.to_dict():
            raise StateError("Resume checkpoint was trained with a different config")
        logger.info(f"Resuming progressive GAN at step {gan.step}, stage {gan.stage}")
    else:
        gan = ProgressiveGAN(config, device=device)

    schedule = config.schedule
    device = gan.device
    tensor = torch.from_numpy(to_model_scale(data, config)).to(device)
    rng = torch.Generator().manual_seed(config.seed + gan.step)

    log_file = None
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        log_file = open(os.path.join(output_dir, 'train_log.jsonl'), 'a')

    history = []
    try:
        for step in range(gan.step, schedule.total_steps):
            stage, in_stage = schedule.stage_at(step)
            while gan.stage < stage:
                if output_dir:
                    gan.to_checkpoint().save(os.path.join(output_dir, f'gan_stage{gan.stage}.pt'))
                gan.grow()
            gan.set_alpha(schedule.alpha(stage, in_stage))
            resolution = gan.resolution

            indices = torch.randint(0, tensor.shape[0], (config.batch_size,), generator=rng)
            real = _real_batch(tensor, indices.to(device), resolution, gan.alpha)
            z = torch.randn(config.batch_size, config.latent_dim, generator=rng).to(device)

            # Discriminator: WGAN-GP with drift penalty
            fake = gan.generator(z).detach()
            real_scores = gan.discriminator(real)
            fake_scores = gan.discriminator(fake)
            penalty = _gradient_penalty(gan.discriminator, real, fake, rng)
            loss_d = (fake_scores.mean() - real_scores.mean()
                      + config.gp_weight * penalty
                      + config.drift_weight * (real_scores ** 2).mean())
            gan.optim_d.zero_grad()
            loss_d.backward()
            gan.optim_d.step()

            # Generator
            z = torch.randn(config.batch_size, config.latent_dim, generator=rng).to(device)
            loss_g = -gan.discriminator(gan.generator(z)).mean()
            gan.optim_g.zero_grad()
            loss_g.backward()
            gan.optim_g.step()

            gan.step = step + 1
            record = {
                'step': gan.step,
                'stage': stage,
                'resolution': resolution,
                'alpha': round(gan.alpha, 6),
                'loss_d': float(loss_d.item()),
                'loss_g': float(loss_g.item()),
                'gradient_penalty': float(penalty.item())
            }
            _check_finite(gan.step, loss_d=record['loss_d'], loss_g=record['loss_g'])

            if gan.step % config.log_every == 0 or gan.step == schedule.total_steps:
                history.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + '\n')
                    log_file.flush()
                logger.debug(f"GAN step {gan.step}: {record}")

            if output_dir and config.sample_every and gan.step % config.sample_every == 0:
                with torch.no_grad():
                    preview = gan.generator(torch.randn(16, config.latent_dim, generator=rng).to(device))
                preview = F.interpolate(preview, size=(config.target_res, config.target_res), mode='nearest')
                save_sample_grid(
                    os.path.join(output_dir, 'samples', f'step_{gan.step:06d}.png'),
                    from_model_scale(preview.cpu().numpy(), config), config
                )
    finally:
        if log_file:
            log_file.close()

    ckpt = gan.to_checkpoint(metadata={'history': history})
    if output_dir:
        ckpt.save(os.path.join(output_dir, f'gan_stage{gan.stage}.pt'))
        ckpt.save(os.path.join(output_dir, 'gan_final.pt'))
    logger.info(f"Progressive GAN finished at step {gan.step} ({gan.resolution}x{gan.resolution})")
    return ckpt


def load_generator(ckpt: NetworkCheckpoint, device=None) -> ProgressiveGenerator:
    """Generator at the checkpoint's stage with the fade-in completed"""
    if ckpt.kind != CHECKPOINT_KIND:
        raise StateError(f"Expected a {CHECKPOINT_KIND} checkpoint, got {ckpt.kind}")
    ckpt.verify()
    config = GeneratorConfig.from_dict(ckpt.config)
    generator = ProgressiveGenerator(config)
    generator.load_state_dict(ckpt.states['generator'])
    generator.stage = ckpt.stage
    generator.alpha = 1.0
    generator.eval()
    return generator.to(device or resolve_device())


def sample(ckpt: NetworkCheckpoint, n: int, seed: int, batch_size: int = 64, device=None) -> np.ndarray:
    """
    Draw n grids from a trained generator

    Returns:
        n x C x T x T float32 array at the target resolution; label channels
        hold integer class codes, image channels intensities in [0, 1]
    """
    config = GeneratorConfig.from_dict(ckpt.config)
    generator = load_generator(ckpt, device)
    device = next(generator.parameters()).device
    rng = torch.Generator().manual_seed(seed)

    # one draw for all latents so the output does not depend on batch_size
    latents = torch.randn(n, config.latent_dim, generator=rng)
    batches = []
    with torch.no_grad():
        for start in range(0, n, batch_size):
            z = latents[start:start + batch_size].to(device)
            out = generator(z)
            if out.shape[-1] != config.target_res:
                out = F.interpolate(out, size=(config.target_res, config.target_res), mode='nearest')
            batches.append(out.cpu().numpy())

    grids = np.concatenate(batches, axis=0) if batches else np.zeros(
        (0, config.out_channels, config.target_res, config.target_res), dtype=np.float32)
    return from_model_scale(grids, config)


def split_grids(grids: np.ndarray, config: GeneratorConfig) -> Tuple[Optional[np.ndarray], np.ndarray]:
    """(images or None, label maps) from sampled grids"""
    kinds = config.channel_kinds
    labels = grids[:, kinds.index('label')].astype(np.uint8)
    images = grids[:, kinds.index('image')].astype(np.float32) if 'image' in kinds else None
    return images, labels
