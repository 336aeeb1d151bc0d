"""
Segmenter Module
Dilated ResNet encoder, multi-scale attention context module and a
two-level decoder, with crop training and sliding-window inference.
Scores how useful a generated dataset is for real segmentation.
"""

import os
import json
import math
import logging
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoints import NetworkCheckpoint, clone_state
from .config import resolve_device
from .errors import ConfigError, ShapeError, StateError, TrainingDiverged
from .label_codec import CLASS_COUNT, as_gray_image, as_label_map
from .metrics import report

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = 'segmenter'
PYRAMID_BINS = (1, 2, 3, 6)

# Fields that define the network; finetuning may change everything else
ARCHITECTURE_FIELDS = ('class_count', 'encoder_blocks', 'base_width', 'attention',
                       'attention_scales', 'decoder_levels')


@dataclass
class SegmenterConfig:
    class_count: int = CLASS_COUNT
    crop: int = 377
    clamp_crop: bool = True
    batch_size: int = 4
    learning_rate: float = 1e-4
    encoder_blocks: Tuple[int, ...] = (2, 2, 2, 2)
    base_width: int = 32
    attention: bool = True
    attention_scales: Tuple[int, ...] = (1, 2)
    decoder_levels: int = 2
    class_weights: Tuple[float, ...] = ()
    steps: int = 300
    val_every: int = 0
    log_every: int = 10
    seed: int = 0

    def validate(self):
        if self.class_count < 2:
            raise ConfigError("class_count must be >= 2")
        if len(self.encoder_blocks) != 4 or any(b < 1 for b in self.encoder_blocks):
            raise ConfigError(f"encoder_blocks must be 4 stage depths >= 1, got {self.encoder_blocks}")
        if self.base_width < 8 or self.base_width % 8:
            raise ConfigError(f"base_width must be a multiple of 8, got {self.base_width}")
        if not self.attention_scales or any(s < 1 for s in self.attention_scales):
            raise ConfigError(f"attention_scales must be >= 1, got {self.attention_scales}")
        if self.decoder_levels not in (1, 2):
            raise ConfigError(f"decoder_levels must be 1 or 2, got {self.decoder_levels}")
        if self.crop < 8:
            raise ConfigError(f"crop must be >= 8, got {self.crop}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if self.class_weights and len(self.class_weights) != self.class_count:
            raise ConfigError(f"class_weights needs {self.class_count} values, got {len(self.class_weights)}")

    def architecture(self) -> Dict:
        return {name: getattr(self, name) for name in ARCHITECTURE_FIELDS}

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'SegmenterConfig':
        data = dict(data)
        for name in ('encoder_blocks', 'attention_scales', 'class_weights'):
            if name in data:
                data[name] = tuple(data[name])
        return cls(**data)


@dataclass
class SegPrediction:
    """Per-class scores (C x H x W) and the argmax label map"""
    scores: np.ndarray
    labels: np.ndarray


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(8 if channels % 8 == 0 else 1, channels)


class BasicBlock(nn.Module):

    def __init__(self, in_channels, out_channels, stride=1, dilation=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=dilation,
                               dilation=dilation, bias=False)
        self.norm1 = _norm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=dilation, dilation=dilation, bias=False)
        self.norm2 = _norm(out_channels)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                                          _norm(out_channels))

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


def _stage(in_channels, out_channels, blocks, stride=1, dilation=1):
    layers = [BasicBlock(in_channels, out_channels, stride=stride, dilation=dilation)]
    layers += [BasicBlock(out_channels, out_channels, dilation=dilation) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


class DilatedEncoder(nn.Module):
    """ResNet encoder at output stride 8; the two deep stages trade striding for dilation"""

    def __init__(self, blocks: Sequence[int], width: int):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(1, width, 7, stride=2, padding=3, bias=False), _norm(width), nn.ReLU(True)
        )
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        self.layer1 = _stage(width, width, blocks[0])
        self.layer2 = _stage(width, width * 2, blocks[1], stride=2)
        self.layer3 = _stage(width * 2, width * 4, blocks[2], dilation=2)
        self.layer4 = _stage(width * 4, width * 8, blocks[3], dilation=4)
        self.out_channels = width * 8

    def forward(self, x) -> Dict[str, torch.Tensor]:
        stem = self.stem(x)
        low = self.layer1(self.pool(stem))
        deep = self.layer4(self.layer3(self.layer2(low)))
        return {'stem': stem, 'low': low, 'deep': deep}


class PositionAttention(nn.Module):
    """Self-attention over spatial positions, residual weight starts at 0"""

    def __init__(self, channels: int):
        super().__init__()
        inner = max(1, channels // 8)
        self.query = nn.Conv2d(channels, inner, 1)
        self.key = nn.Conv2d(channels, inner, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.gamma = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        n, c, h, w = x.shape
        q = self.query(x).flatten(2).transpose(1, 2)
        k = self.key(x).flatten(2)
        attn = torch.softmax(torch.bmm(q, k), dim=-1)
        v = self.value(x).flatten(2)
        out = torch.bmm(v, attn.transpose(1, 2)).view(n, c, h, w)
        return x + self.gamma * out


class ChannelAttention(nn.Module):

    def __init__(self):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        n, c, h, w = x.shape
        flat = x.flatten(2)
        energy = torch.bmm(flat, flat.transpose(1, 2))
        energy = energy.max(dim=-1, keepdim=True)[0].expand_as(energy) - energy
        attn = torch.softmax(energy, dim=-1)
        out = torch.bmm(attn, flat).view(n, c, h, w)
        return x + self.gamma * out


class MultiScaleAttention(nn.Module):
    """Position and channel attention applied at several pooled scales, then fused"""

    def __init__(self, in_channels: int, out_channels: int, scales: Sequence[int]):
        super().__init__()
        self.scales = tuple(scales)
        self.reduce = nn.Sequential(nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False),
                                    _norm(out_channels), nn.ReLU(True))
        self.position = nn.ModuleList([PositionAttention(out_channels) for _ in self.scales])
        self.channel = nn.ModuleList([ChannelAttention() for _ in self.scales])
        self.fuse = nn.Sequential(nn.Conv2d(out_channels * len(self.scales), out_channels, 1, bias=False),
                                  _norm(out_channels), nn.ReLU(True))

    def forward(self, x):
        x = self.reduce(x)
        h, w = x.shape[-2:]
        branches = []
        for scale, position, channel in zip(self.scales, self.position, self.channel):
            feat = x if scale == 1 else F.adaptive_avg_pool2d(x, (max(1, h // scale), max(1, w // scale)))
            feat = position(feat) + channel(feat)
            if feat.shape[-2:] != x.shape[-2:]:
                feat = F.interpolate(feat, size=(h, w), mode='bilinear', align_corners=False)
            branches.append(feat)
        return self.fuse(torch.cat(branches, dim=1))


class PyramidPooling(nn.Module):
    """Pooling pyramid context module, used when attention is switched off"""

    def __init__(self, in_channels: int, out_channels: int, bins: Sequence[int] = PYRAMID_BINS):
        super().__init__()
        branch = max(1, in_channels // len(bins))
        self.bins = tuple(bins)
        self.branches = nn.ModuleList([
            nn.Sequential(nn.Conv2d(in_channels, branch, 1, bias=False), nn.ReLU(True)) for _ in bins
        ])
        self.fuse = nn.Sequential(nn.Conv2d(in_channels + branch * len(bins), out_channels, 3, padding=1, bias=False),
                                  _norm(out_channels), nn.ReLU(True))

    def forward(self, x):
        h, w = x.shape[-2:]
        pooled = [x]
        for size, branch in zip(self.bins, self.branches):
            feat = branch(F.adaptive_avg_pool2d(x, size))
            pooled.append(F.interpolate(feat, size=(h, w), mode='bilinear', align_corners=False))
        return self.fuse(torch.cat(pooled, dim=1))


class Decoder(nn.Module):
    """Fuses context features with encoder skips at 1/4 and, for two levels, 1/2 resolution"""

    def __init__(self, context_channels: int, width: int, levels: int, class_count: int):
        super().__init__()
        self.levels = levels
        self.skip_low = nn.Sequential(nn.Conv2d(width, width, 1, bias=False), _norm(width), nn.ReLU(True))
        self.fuse_low = nn.Sequential(
            nn.Conv2d(context_channels + width, width * 2, 3, padding=1, bias=False), _norm(width * 2), nn.ReLU(True),
            nn.Conv2d(width * 2, width * 2, 3, padding=1, bias=False), _norm(width * 2), nn.ReLU(True)
        )
        out_channels = width * 2
        if levels == 2:
            self.skip_stem = nn.Sequential(nn.Conv2d(width, width // 2, 1, bias=False), _norm(width // 2), nn.ReLU(True))
            self.fuse_stem = nn.Sequential(
                nn.Conv2d(width * 2 + width // 2, width, 3, padding=1, bias=False), _norm(width), nn.ReLU(True)
            )
            out_channels = width
        self.classifier = nn.Conv2d(out_channels, class_count, 1)

    def forward(self, context, features):
        low = features['low']
        x = F.interpolate(context, size=low.shape[-2:], mode='bilinear', align_corners=False)
        x = self.fuse_low(torch.cat([x, self.skip_low(low)], dim=1))
        if self.levels == 2:
            stem = features['stem']
            x = F.interpolate(x, size=stem.shape[-2:], mode='bilinear', align_corners=False)
            x = self.fuse_stem(torch.cat([x, self.skip_stem(stem)], dim=1))
        return self.classifier(x)


class SegmentationNetwork(nn.Module):
    """Gray image in [0, 1] (N x 1 x H x W) -> class logits (N x C x H x W)"""

    def __init__(self, config: SegmenterConfig):
        super().__init__()
        self.config = config
        width = config.base_width
        self.encoder = DilatedEncoder(config.encoder_blocks, width)
        context_channels = width * 4
        if config.attention:
            self.context = MultiScaleAttention(self.encoder.out_channels, context_channels, config.attention_scales)
        else:
            self.context = PyramidPooling(self.encoder.out_channels, context_channels)
        self.decoder = Decoder(context_channels, width, config.decoder_levels, config.class_count)

    def forward(self, x):
        size = x.shape[-2:]
        features = self.encoder((x - 0.5) / 0.5)
        logits = self.decoder(self.context(features['deep']), features)
        return F.interpolate(logits, size=size, mode='bilinear', align_corners=False)


def parameter_count(network: nn.Module) -> int:
    return sum(p.numel() for p in network.parameters())


def build_segmenter(cfg: SegmenterConfig) -> SegmentationNetwork:
    cfg.validate()
    torch.manual_seed(cfg.seed)
    network = SegmentationNetwork(cfg)
    logger.info(
        f"Built segmenter: blocks={cfg.encoder_blocks}, width={cfg.base_width}, "
        f"context={'attention' if cfg.attention else 'pyramid'}, parameters={parameter_count(network)}"
    )
    return network


def window_offsets(length: int, window: int) -> List[int]:
    """Stride = window; the last window is moved back to end exactly at the border"""
    if length <= window:
        return [0]
    offsets = list(range(0, length - window + 1, window))
    if offsets[-1] + window < length:
        offsets.append(length - window)
    return offsets


def effective_crop(entries: Sequence, cfg: SegmenterConfig) -> int:
    if not cfg.clamp_crop:
        return cfg.crop
    smallest = min(min(entry.image.shape) for entry in entries)
    return min(cfg.crop, smallest)


def _pad_to(grid: np.ndarray, size: int) -> np.ndarray:
    h, w = grid.shape
    pad_h, pad_w = max(0, size - h), max(0, size - w)
    if not pad_h and not pad_w:
        return grid
    return np.pad(grid, ((0, pad_h), (0, pad_w)), mode='reflect')


def random_crop(image: np.ndarray, labels: np.ndarray, size: int,
                rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """size x size crop; smaller grids are reflect-padded first"""
    image, labels = _pad_to(image, size), _pad_to(labels, size)
    h, w = image.shape
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return image[top:top + size, left:left + size], labels[top:top + size, left:left + size]


def sample_batch(rng: np.random.Generator, population: int, batch: int) -> np.ndarray:
    # Without replacement when the dataset can fill a batch, with replacement otherwise
    return rng.choice(population, size=batch, replace=batch > population)


def segmentation_loss(network: nn.Module, images: torch.Tensor, labels: torch.Tensor,
                      cfg: SegmenterConfig) -> torch.Tensor:
    """Pixelwise cross-entropy, optionally class weighted"""
    weight = None
    if cfg.class_weights:
        weight = torch.tensor(cfg.class_weights, dtype=images.dtype, device=images.device)
    return F.cross_entropy(network(images), labels, weight=weight)


def _validate_entries(entries: Sequence):
    if not entries:
        raise ConfigError("Segmenter training needs at least one entry")
    for entry in entries:
        as_label_map(entry.labels, entry.id)
        if entry.image.shape != entry.labels.shape:
            raise ShapeError(f"Entry {entry.id}: image {entry.image.shape} and labels {entry.labels.shape} differ")


def _optimize(network: SegmentationNetwork, entries: Sequence, cfg: SegmenterConfig, phase: str,
              device, val_entries: Optional[Sequence] = None,
              output_dir: Optional[str] = None) -> Dict:
    """Shared training loop of pretraining and finetuning; returns history and validation info"""
    crop = effective_crop(entries, cfg)
    rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.Adam(network.parameters(), lr=cfg.learning_rate)
    network.to(device).train()

    log_file = None
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        log_file = open(os.path.join(output_dir, 'train_log.jsonl'), 'a')

    logger.info(f"Segmenter {phase}: {len(entries)} entries, crop={crop}, steps={cfg.steps}")
    history = []
    best = {'val_jaccard': None, 'step': 0, 'state': None}
    try:
        for step in range(1, cfg.steps + 1):
            crops = [random_crop(entries[i].image, entries[i].labels, crop, rng)
                     for i in sample_batch(rng, len(entries), cfg.batch_size)]
            images = torch.from_numpy(np.stack([c[0] for c in crops])[:, None].astype(np.float32)).to(device)
            labels = torch.from_numpy(np.stack([c[1] for c in crops]).astype(np.int64)).to(device)

            loss = segmentation_loss(network, images, labels, cfg)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            value = float(loss.item())
            if not math.isfinite(value):
                raise TrainingDiverged(f"Non-finite segmentation loss at step {step}", step=step, phase=phase)

            record = {'step': step, 'phase': phase, 'loss': value}
            if val_entries and cfg.val_every and (step % cfg.val_every == 0 or step == cfg.steps):
                record['val_jaccard'] = validation_jaccard(network, val_entries, crop, device)
                network.train()
                if best['val_jaccard'] is None or record['val_jaccard'] > best['val_jaccard']:
                    best = {'val_jaccard': record['val_jaccard'], 'step': step, 'state': clone_state(network)}

            if step == 1 or step % cfg.log_every == 0 or step == cfg.steps or 'val_jaccard' in record:
                history.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + '\n')
                    log_file.flush()
                logger.debug(f"Segmenter {phase} step {step}: {record}")
    finally:
        if log_file:
            log_file.close()

    if best['state'] is not None:
        network.load_state_dict(best['state'])
        logger.info(f"Kept {phase} parameters from step {best['step']} (val J={best['val_jaccard']:.4f})")
    network.eval()
    return {'history': history, 'crop': crop, 'best_val_jaccard': best['val_jaccard'], 'best_step': best['step']}


def validation_jaccard(network: nn.Module, entries: Sequence, crop: int, device) -> float:
    """Headline (lungs and heart) micro-averaged Jaccard on validation entries"""
    network.eval()
    pairs = [(predict_sliding(network, entry.image, crop=crop, device=device).labels, entry.labels)
             for entry in entries]
    return float(report(pairs).average_jaccard)


def _checkpoint(network, cfg: SegmenterConfig, provenance: List[Dict], result: Dict) -> NetworkCheckpoint:
    return NetworkCheckpoint(
        kind=CHECKPOINT_KIND,
        config=cfg.to_dict(),
        states={'network': clone_state(network)},
        step=sum(p['steps'] for p in provenance),
        metadata={
            'provenance': provenance,
            'pretrain_source': provenance[0]['source'],
            'crop': result['crop'],
            'history': result['history'],
            'best_val_jaccard': result['best_val_jaccard'],
            'parameters': parameter_count(network)
        }
    )


def train_segmenter(data: Sequence, cfg: SegmenterConfig, source: str = 'real',
                    val_entries: Optional[Sequence] = None, output_dir: Optional[str] = None,
                    device=None) -> NetworkCheckpoint:
    """
    Train a segmenter from scratch on random crops

    Args:
        data: DatasetEntry list
        cfg: Segmenter config
        source: Provenance tag of the training data, e.g. 'real' or 'synthetic:three_stage'
        val_entries: Optional validation entries for best-parameter selection
        output_dir: Where train_log.jsonl and segmenter.pt go
        device: Torch device

    Returns:
        Checkpoint; zero steps returns the initialization
    """
    cfg.validate()
    _validate_entries(data)
    device = device or resolve_device()

    network = build_segmenter(cfg)
    result = _optimize(network, data, cfg, 'pretrain', device, val_entries, output_dir)
    provenance = [{'phase': 'pretrain', 'source': source, 'entries': len(data), 'steps': cfg.steps}]
    ckpt = _checkpoint(network, cfg, provenance, result)
    if output_dir:
        ckpt.save(os.path.join(output_dir, 'segmenter.pt'))
    return ckpt


def load_segmenter(ckpt: NetworkCheckpoint, device=None) -> SegmentationNetwork:
    if ckpt.kind != CHECKPOINT_KIND:
        raise StateError(f"Expected a {CHECKPOINT_KIND} checkpoint, got {ckpt.kind}")
    ckpt.verify()
    cfg = SegmenterConfig.from_dict(ckpt.config)
    network = SegmentationNetwork(cfg)
    network.load_state_dict(ckpt.states['network'])
    return network.to(device or resolve_device()).eval()


def finetune(ckpt: NetworkCheckpoint, real_entries: Sequence, cfg: SegmenterConfig,
             source: str = 'real', val_entries: Optional[Sequence] = None,
             output_dir: Optional[str] = None, device=None) -> NetworkCheckpoint:
    """Continue optimizing a trained segmenter on real data with its own step budget"""
    cfg.validate()
    _validate_entries(real_entries)
    network = load_segmenter(ckpt, device)
    previous = SegmenterConfig.from_dict(ckpt.config)
    if previous.architecture() != cfg.architecture():
        raise ConfigError("Finetune config changes the segmenter architecture",
                          expected=previous.architecture(), got=cfg.architecture())

    device = next(network.parameters()).device
    result = _optimize(network, real_entries, cfg, 'finetune', device, val_entries, output_dir)
    provenance = list(ckpt.metadata.get('provenance', [{'phase': 'pretrain', 'source': 'unknown', 'steps': ckpt.step}]))
    provenance.append({'phase': 'finetune', 'source': source, 'entries': len(real_entries), 'steps': cfg.steps})
    tuned = _checkpoint(network, cfg, provenance, result)
    if output_dir:
        tuned.save(os.path.join(output_dir, 'segmenter_finetuned.pt'))
    return tuned


def predict_sliding(model: Union[NetworkCheckpoint, nn.Module], image: np.ndarray, crop: Optional[int] = None,
                    batch_size: int = 4, device=None) -> SegPrediction:
    """
    Tile the image with crop-size windows, average softmax scores where windows overlap

    Windows are scored in a fixed order, so averages are bit-stable.
    """
    if isinstance(model, NetworkCheckpoint):
        crop = crop or model.metadata.get('crop') or SegmenterConfig.from_dict(model.config).crop
        model = load_segmenter(model, device)
    crop = crop or 377
    image = as_gray_image(image)
    device = next(model.parameters()).device if any(True for _ in model.parameters()) else torch.device('cpu')

    h, w = image.shape
    win_h, win_w = min(crop, h), min(crop, w)
    windows = [(top, left) for top in window_offsets(h, win_h) for left in window_offsets(w, win_w)]

    totals = None
    counts = np.zeros((h, w), dtype=np.float64)
    with torch.no_grad():
        for start in range(0, len(windows), batch_size):
            chunk = windows[start:start + batch_size]
            tiles = np.stack([image[t:t + win_h, l:l + win_w] for t, l in chunk])[:, None]
            scores = torch.softmax(model(torch.from_numpy(tiles).to(device)), dim=1).cpu().numpy()
            if totals is None:
                totals = np.zeros((scores.shape[1], h, w), dtype=np.float64)
            for (top, left), tile_scores in zip(chunk, scores):
                totals[:, top:top + win_h, left:left + win_w] += tile_scores
                counts[top:top + win_h, left:left + win_w] += 1.0

    scores = (totals / counts).astype(np.float32)
    return SegPrediction(scores=scores, labels=np.argmax(scores, axis=0).astype(np.uint8))
