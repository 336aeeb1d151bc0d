"""
Translator Module
Conditional image-to-image translation (dots -> labels, labels -> images)
with a coarse-to-fine generator, multi-scale discriminators and a
feature-matching loss
"""

import os
import json
import math
import logging
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoints import NetworkCheckpoint, clone_state
from .config import resolve_device
from .errors import CodecError, ConfigError, ShapeError, StateError, TrainingDiverged
from .label_codec import CLASS_COUNT, as_gray_image, as_label_map

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = 'translator'
OUTPUT_KINDS = ('label', 'image')
DOWNSAMPLINGS = 2


@dataclass
class TranslatorConfig:
    """Translator architecture and training settings"""
    class_count: int = CLASS_COUNT
    output_kind: str = 'label'
    levels: int = 1
    num_discriminators: int = 2
    disc_layers: int = 3
    base_filters: int = 32
    disc_filters: int = 32
    resblocks: int = 4
    fm_weight: float = 10.0
    steps: int = 200
    batch_size: int = 4
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    log_every: int = 10
    seed: int = 0

    @property
    def out_channels(self) -> int:
        return self.class_count if self.output_kind == 'label' else 1

    def validate(self):
        if self.class_count < 2:
            raise ConfigError("class_count must be >= 2")
        if self.output_kind not in OUTPUT_KINDS:
            raise ConfigError(f"output_kind must be one of {OUTPUT_KINDS}, got {self.output_kind}")
        if self.levels < 1 or self.num_discriminators < 1 or self.disc_layers < 1:
            raise ConfigError("levels, num_discriminators and disc_layers must be >= 1")
        if self.fm_weight < 0:
            raise ConfigError(f"fm_weight must be >= 0, got {self.fm_weight}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'TranslatorConfig':
        return cls(**data)


@dataclass
class TranslationPair:
    """A source label/dot map and its target label map or gray image"""
    id: str
    source: np.ndarray
    target: np.ndarray


def one_hot(labels: np.ndarray, class_count: int = CLASS_COUNT) -> np.ndarray:
    """
    Label map(s) -> one-hot float32 channel stack

    H x W gives class_count x H x W; N x H x W gives N x class_count x H x W.
    """
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        bad = int(labels.max()) if labels.max() >= class_count else int(labels.min())
        raise CodecError(f"Code {bad} out of range for {class_count} classes", value=bad)
    eye = np.eye(class_count, dtype=np.float32)
    stacked = eye[labels.astype(np.int64)]
    return np.moveaxis(stacked, -1, -3)


def argmax_decode(grid: np.ndarray) -> np.ndarray:
    """Channel argmax over axis -3; on ties the lowest code wins"""
    grid = np.asarray(grid)
    if grid.ndim < 3:
        raise ShapeError(f"Expected a C x H x W grid, got shape {grid.shape}")
    return np.argmax(grid, axis=-3).astype(np.uint8)


def downsample(x: torch.Tensor) -> torch.Tensor:
    return F.avg_pool2d(x, kernel_size=3, stride=2, padding=1, count_include_pad=False)


class ResnetBlock(nn.Module):

    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(channels, channels, 3), nn.InstanceNorm2d(channels), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(channels, channels, 3), nn.InstanceNorm2d(channels)
        )

    def forward(self, x):
        return x + self.block(x)


class GlobalGenerator(nn.Module):
    """Downsample, residual blocks, upsample; returns features at input resolution"""

    def __init__(self, in_channels: int, filters: int, resblocks: int):
        super().__init__()
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(in_channels, filters, 7), nn.InstanceNorm2d(filters), nn.ReLU(True)]
        width = filters
        for _ in range(DOWNSAMPLINGS):
            layers += [nn.Conv2d(width, width * 2, 3, stride=2, padding=1), nn.InstanceNorm2d(width * 2), nn.ReLU(True)]
            width *= 2
        layers += [ResnetBlock(width) for _ in range(resblocks)]
        for _ in range(DOWNSAMPLINGS):
            layers += [nn.ConvTranspose2d(width, width // 2, 3, stride=2, padding=1, output_padding=1),
                       nn.InstanceNorm2d(width // 2), nn.ReLU(True)]
            width //= 2
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class LocalEnhancer(nn.Module):
    """One finer level: its own front end plus the coarser level's features"""

    def __init__(self, in_channels: int, filters: int):
        super().__init__()
        self.front = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(in_channels, filters, 7), nn.InstanceNorm2d(filters), nn.ReLU(True),
            nn.Conv2d(filters, filters * 2, 3, stride=2, padding=1), nn.InstanceNorm2d(filters * 2), nn.ReLU(True)
        )
        self.back = nn.Sequential(
            ResnetBlock(filters * 2), ResnetBlock(filters * 2),
            nn.ConvTranspose2d(filters * 2, filters, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(filters), nn.ReLU(True)
        )

    def forward(self, x, coarse_features):
        return self.back(self.front(x) + coarse_features)


class CoarseToFineGenerator(nn.Module):
    """Global generator at the coarsest scale refined by levels - 1 local enhancers"""

    def __init__(self, config: TranslatorConfig):
        super().__init__()
        self.config = config
        self.levels = config.levels
        self.global_net = GlobalGenerator(
            config.class_count, config.base_filters * 2 ** (config.levels - 1), config.resblocks
        )
        self.enhancers = nn.ModuleList([
            LocalEnhancer(config.class_count, config.base_filters * 2 ** (config.levels - 1 - k))
            for k in range(1, config.levels)
        ])
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(config.base_filters, config.out_channels, 7))

    @property
    def size_multiple(self) -> int:
        return 2 ** (DOWNSAMPLINGS + self.levels - 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        multiple = self.size_multiple
        pad_h = max(math.ceil(h / multiple) * multiple, 2 * multiple) - h
        pad_w = max(math.ceil(w / multiple) * multiple, 2 * multiple) - w
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode='replicate')

        scales = [x]
        for _ in range(self.levels - 1):
            scales.append(downsample(scales[-1]))

        features = self.global_net(scales[-1])
        for k, enhancer in enumerate(self.enhancers, start=1):
            features = enhancer(scales[self.levels - 1 - k], features)

        out = self.head(features)[..., :h, :w]
        if self.config.output_kind == 'image':
            out = torch.tanh(out)
        return out


class PatchDiscriminator(nn.Module):
    """PatchGAN returning every intermediate activation, the last being the score map"""

    def __init__(self, in_channels: int, filters: int, layers: int):
        super().__init__()
        kernel, pad = 4, 2
        groups = [nn.Sequential(nn.Conv2d(in_channels, filters, kernel, stride=2, padding=pad), nn.LeakyReLU(0.2))]
        width = filters
        for n in range(1, layers):
            prev, width = width, min(width * 2, 512)
            stride = 1 if n == layers - 1 else 2
            groups.append(nn.Sequential(
                nn.Conv2d(prev, width, kernel, stride=stride, padding=pad), nn.InstanceNorm2d(width), nn.LeakyReLU(0.2)
            ))
        groups.append(nn.Sequential(nn.Conv2d(width, 1, kernel, stride=1, padding=pad)))
        self.groups = nn.ModuleList(groups)

    def forward(self, x) -> List[torch.Tensor]:
        outputs = []
        for group in self.groups:
            x = group(x)
            outputs.append(x)
        return outputs


class MultiscaleDiscriminator(nn.Module):
    """Identical discriminators applied to successively downsampled inputs"""

    def __init__(self, config: TranslatorConfig):
        super().__init__()
        in_channels = config.class_count + config.out_channels
        self.discriminators = nn.ModuleList([
            PatchDiscriminator(in_channels, config.disc_filters, config.disc_layers)
            for _ in range(config.num_discriminators)
        ])

    def forward(self, x) -> List[List[torch.Tensor]]:
        results = []
        for index, discriminator in enumerate(self.discriminators):
            if index:
                x = downsample(x)
            results.append(discriminator(x))
        return results


def build(config: TranslatorConfig):
    config.validate()
    torch.manual_seed(config.seed)
    return CoarseToFineGenerator(config), MultiscaleDiscriminator(config)


def lsgan_loss(results: List[List[torch.Tensor]], target_is_real: bool) -> torch.Tensor:
    target = 1.0 if target_is_real else 0.0
    loss = 0.0
    for outputs in results:
        score = outputs[-1]
        loss = loss + F.mse_loss(score, torch.full_like(score, target))
    return loss


def feature_matching_loss(fake_results, real_results, disc_layers: int) -> torch.Tensor:
    """L1 between intermediate discriminator features of fake and real, over all scales"""
    layer_weight = 4.0 / (disc_layers + 1)
    scale_weight = 1.0 / len(fake_results)
    loss = 0.0
    for fake_outputs, real_outputs in zip(fake_results, real_results):
        for fake_feat, real_feat in zip(fake_outputs[:-1], real_outputs[:-1]):
            loss = loss + scale_weight * layer_weight * F.l1_loss(fake_feat, real_feat.detach())
    return loss


def to_model_output(generated: torch.Tensor, config: TranslatorConfig) -> torch.Tensor:
    """Generator output in the space the discriminator sees (probabilities or [-1, 1] intensities)"""
    if config.output_kind == 'label':
        return torch.softmax(generated, dim=1)
    return generated


def generator_losses(generator, discriminator, source, target, config: TranslatorConfig) -> Dict[str, torch.Tensor]:
    """
    Generator objective on one batch

    Returns:
        Dict with 'adv', 'feat' and 'total' = adv + fm_weight * feat
    """
    fake = to_model_output(generator(source), config)
    fake_results = discriminator(torch.cat([source, fake], dim=1))
    real_results = discriminator(torch.cat([source, target], dim=1))
    adv = lsgan_loss(fake_results, True)
    feat = feature_matching_loss(fake_results, real_results, config.disc_layers)
    return {'adv': adv, 'feat': feat, 'total': adv + config.fm_weight * feat}


def discriminator_loss(generator, discriminator, source, target, config: TranslatorConfig) -> torch.Tensor:
    with torch.no_grad():
        fake = to_model_output(generator(source), config)
    fake_results = discriminator(torch.cat([source, fake], dim=1))
    real_results = discriminator(torch.cat([source, target], dim=1))
    return 0.5 * (lsgan_loss(fake_results, False) + lsgan_loss(real_results, True))


def encode_target(target: np.ndarray, config: TranslatorConfig) -> np.ndarray:
    if config.output_kind == 'label':
        return one_hot(as_label_map(target, 'target'), config.class_count)
    return (as_gray_image(target, 'target') * 2.0 - 1.0)[None]


def validate_pairs(pairs: Sequence[TranslationPair]):
    if not pairs:
        raise ConfigError("Translation needs at least one pair")
    shape = np.asarray(pairs[0].source).shape
    for pair in pairs:
        if np.asarray(pair.source).shape != np.asarray(pair.target).shape:
            raise ShapeError(
                f"Pair {pair.id}: source {np.asarray(pair.source).shape} and target "
                f"{np.asarray(pair.target).shape} differ"
            )
        if np.asarray(pair.source).shape != shape:
            raise ShapeError(f"Pair {pair.id} has shape {np.asarray(pair.source).shape}, expected {shape}")


def pairs_from_triples(triples: List) -> List[TranslationPair]:
    """dots -> labels pairs from dot_maps.DotTriple records"""
    return [TranslationPair(id=t.id, source=t.dots, target=t.labels) for t in triples]


def pairs_from_entries(entries: List) -> List[TranslationPair]:
    """labels -> images pairs from DatasetEntry records"""
    return [TranslationPair(id=e.id, source=e.labels, target=e.image) for e in entries]


def _batch_indices(rng: np.random.Generator, population: int, batch: int) -> np.ndarray:
    # Without replacement when the dataset can fill a batch, with replacement otherwise
    return rng.choice(population, size=batch, replace=batch > population)


def train_translation(pairs: Sequence[TranslationPair], config: TranslatorConfig,
                      output_dir: Optional[str] = None, device=None) -> NetworkCheckpoint:
    """
    Train a translator on (source, target) pairs

    Args:
        pairs: Sources are label/dot maps, targets label maps or gray images per config.output_kind
        config: Translator config
        output_dir: Where train_log.jsonl and translator.pt are written
        device: Torch device

    Returns:
        Checkpoint with generator and discriminator states
    """
    config.validate()
    validate_pairs(pairs)
    device = device or resolve_device()

    sources = torch.from_numpy(np.stack([
        one_hot(as_label_map(p.source, p.id), config.class_count) for p in pairs
    ])).to(device)
    targets = torch.from_numpy(np.stack([encode_target(p.target, config) for p in pairs]).astype(np.float32)).to(device)

    generator, discriminator = build(config)
    generator.to(device)
    discriminator.to(device)
    betas = (config.beta1, config.beta2)
    optim_g = torch.optim.Adam(generator.parameters(), lr=config.learning_rate, betas=betas)
    optim_d = torch.optim.Adam(discriminator.parameters(), lr=config.learning_rate, betas=betas)
    rng = np.random.default_rng(config.seed)

    log_file = None
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        log_file = open(os.path.join(output_dir, 'train_log.jsonl'), 'a')

    logger.info(
        f"Training {config.output_kind} translator on {len(pairs)} pairs "
        f"({sources.shape[-2]}x{sources.shape[-1]}) for {config.steps} steps"
    )
    history = []
    try:
        for step in range(1, config.steps + 1):
            index = torch.from_numpy(_batch_indices(rng, len(pairs), config.batch_size)).to(device)
            source, target = sources[index], targets[index]

            loss_d = discriminator_loss(generator, discriminator, source, target, config)
            optim_d.zero_grad()
            loss_d.backward()
            optim_d.step()

            losses = generator_losses(generator, discriminator, source, target, config)
            optim_g.zero_grad()
            losses['total'].backward()
            optim_g.step()

            record = {
                'step': step,
                'loss_g': float(losses['total'].item()),
                'loss_g_adv': float(losses['adv'].item()),
                'loss_g_feat': float(losses['feat'].item()),
                'loss_d': float(loss_d.item())
            }
            for name in ('loss_g', 'loss_d'):
                if not math.isfinite(record[name]):
                    raise TrainingDiverged(f"Non-finite {name} at step {step}", step=step, loss=name)

            if step % config.log_every == 0 or step == config.steps:
                history.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + '\n')
                    log_file.flush()
                logger.debug(f"Translator step {step}: {record}")
    finally:
        if log_file:
            log_file.close()

    ckpt = NetworkCheckpoint(
        kind=CHECKPOINT_KIND,
        config=config.to_dict(),
        states={'generator': clone_state(generator), 'discriminator': clone_state(discriminator)},
        step=config.steps,
        metadata={'history': history, 'pairs': len(pairs)}
    )
    if output_dir:
        ckpt.save(os.path.join(output_dir, 'translator.pt'))
    return ckpt


class Translator:
    """Loaded translator generator for read-only inference"""

    def __init__(self, ckpt: NetworkCheckpoint, device=None):
        if ckpt.kind != CHECKPOINT_KIND:
            raise StateError(f"Expected a {CHECKPOINT_KIND} checkpoint, got {ckpt.kind}")
        ckpt.verify()
        self.config = TranslatorConfig.from_dict(ckpt.config)
        self.device = device or resolve_device()
        self.generator = CoarseToFineGenerator(self.config)
        self.generator.load_state_dict(ckpt.states['generator'])
        self.generator.to(self.device).eval()

    def _as_source(self, source: np.ndarray) -> np.ndarray:
        source = np.asarray(source)
        if source.ndim == 2:
            return one_hot(as_label_map(source, 'source'), self.config.class_count)
        if source.ndim == 3:
            if source.shape[0] != self.config.class_count:
                raise ShapeError(
                    f"Source has {source.shape[0]} channels, translator expects {self.config.class_count}"
                )
            return source.astype(np.float32)
        raise ShapeError(f"Source must be a label map or a C x H x W grid, got shape {source.shape}")

    def __call__(self, source: np.ndarray) -> np.ndarray:
        return self.translate_batch([source])[0]

    def translate_batch(self, sources: Sequence[np.ndarray], batch_size: int = 8) -> List[np.ndarray]:
        outputs = []
        with torch.no_grad():
            for start in range(0, len(sources), batch_size):
                chunk = np.stack([self._as_source(s) for s in sources[start:start + batch_size]])
                result = self.generator(torch.from_numpy(chunk).to(self.device)).cpu().numpy()
                if self.config.output_kind == 'label':
                    outputs.extend(argmax_decode(result))
                else:
                    outputs.extend(np.clip((result[:, 0] + 1.0) / 2.0, 0.0, 1.0).astype(np.float32))
        return outputs


def translate(ckpt: NetworkCheckpoint, source: np.ndarray, device=None) -> np.ndarray:
    """Label outputs are argmax-decoded LabelMaps, image outputs clamped to [0, 1]"""
    return Translator(ckpt, device)(source)
