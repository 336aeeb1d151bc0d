"""
Pipeline Module
Declarative experiment runner: builds the stage graph of a generation
pipeline, runs it with per-stage resume markers, trains and evaluates the
downstream segmenter and compares runs
"""

import os
import json
import time
import hashlib
import logging
from dataclasses import dataclass, asdict, field
from datetime import datetime
from graphlib import CycleError, TopologicalSorter
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from . import generative_core, translator
from .augmentation import augment_dataset
from .checkpoints import NetworkCheckpoint, config_fingerprint
from .config import build_dataclass, get_settings, load_config_file, resolve_device
from .dataset_io import (DatasetEntry, PhantomConfig, export_dataset, load_dataset, make_phantoms,
                         select_split, subsample_train)
from .dot_maps import dotify_dataset
from .errors import ConfigError, StageFailed, StateError
from .label_codec import resize_nearest, stack_pair
from .metrics import MetricsReport, report
from .quality_probes import diversity, label_sanity
from .run_storage import RunStorage
from .segmenter import SegmenterConfig, finetune, load_segmenter, predict_sliding, train_segmenter

logger = logging.getLogger(__name__)

PIPELINES = ('single_stage', 'two_stage', 'three_stage', 'real_only')
REGIMES = ('full', 'tiny', 'custom')

COLUMN_LABELS = {
    'real_only': 'REAL',
    'single_stage': 'Synth 1',
    'two_stage': 'Synth 2',
    'three_stage': 'Synth 3'
}

FULL_REGIME_NOTE = ('FULL-regime reference tables cover only the REAL and three-stage columns; '
                    'other FULL columns come from this orchestrator alone.')

STAGE_MARKER = 'stage.json'
RUN_RECORD = 'run_record.json'
RUN_LOG = 'run_log.jsonl'


def derive_seed(master: int, stage: str) -> int:
    """First 8 bytes of SHA-256('{master}:{stage}') as an unsigned int, mod 2^31"""
    digest = hashlib.sha256(f'{master}:{stage}'.encode()).digest()
    return int.from_bytes(digest[:8], 'big') % (2 ** 31)


@dataclass
class ExperimentManifest:
    """One experiment: pipeline, data regime, budgets and seeds"""
    name: str = 'experiment'
    pipeline: str = 'three_stage'
    regime: str = 'tiny'
    fraction: float = 1.0
    tiny_count: int = 11
    augment_variants: int = 6
    synth_train_count: int = 7500
    synth_val_count: int = 2500
    generation_pool: int = 10000
    scale: float = 1.0
    finetune: bool = True
    seed: int = 0
    output_dir: str = ''

    # Real data: a dataset directory, or phantoms when empty
    data_root: str = ''
    phantom_count: int = 124
    phantom_test_count: int = 40
    phantom_size: int = 128
    resolution: int = 128
    dot_resolution: int = 64
    dot_radius: int = 2
    stub_generation: bool = False

    gan_latent_dim: int = 64
    gan_max_feature_maps: int = 64
    gan_steps_per_stage: int = 40
    gan_fade_fraction: float = 0.5
    gan_batch_size: int = 16

    translator_steps: int = 100
    translator_batch_size: int = 4
    translator_levels: int = 1
    translator_base_filters: int = 32
    translator_fm_weight: float = 10.0

    seg_steps: int = 300
    finetune_steps: int = 100
    seg_batch_size: int = 4
    seg_crop: int = 377
    seg_base_width: int = 32
    seg_encoder_blocks: Tuple[int, ...] = (2, 2, 2, 2)
    seg_attention: bool = True
    seg_val_every: int = 0
    subset_mode: str = 'micro'

    def validate(self):
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}, got {self.pipeline}")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime}")
        if self.regime == 'custom' and not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"custom regime needs 0 < fraction <= 1, got {self.fraction}")
        counts = ('tiny_count', 'synth_train_count', 'synth_val_count', 'generation_pool',
                  'phantom_count', 'phantom_test_count', 'seg_steps', 'finetune_steps')
        for name in counts:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.augment_variants < 1:
            raise ConfigError("augment_variants must be >= 1")
        if self.scale <= 0:
            raise ConfigError(f"scale must be > 0, got {self.scale}")
        if self.synth_train_count + self.synth_val_count > self.generation_pool:
            raise ConfigError(
                f"synth_train_count + synth_val_count ({self.synth_train_count + self.synth_val_count}) "
                f"exceeds generation_pool ({self.generation_pool})"
            )

    def scaled(self, count: int) -> int:
        """Apply the desk-scale factor, keeping nonzero counts nonzero"""
        if count == 0:
            return 0
        return max(1, int(round(count * self.scale)))

    @property
    def run_dir(self) -> str:
        return self.output_dir or os.path.join(get_settings().runs_dir, self.name)

    def to_dict(self) -> Dict:
        return asdict(self)


def load_manifest(path: str, overrides: Optional[Dict[str, str]] = None) -> ExperimentManifest:
    values = load_config_file(path, overrides)
    return build_dataclass(ExperimentManifest, values)


def protocol_counts(manifest: ExperimentManifest, real_train_available: int) -> Dict[str, int]:
    """Image counts every stage of a run will see"""
    if manifest.regime == 'full':
        real = real_train_available
    elif manifest.regime == 'tiny':
        real = manifest.tiny_count
    else:
        real = int(np.floor(real_train_available * manifest.fraction + 1e-9))

    counts = {'real_train': real, 'augmented_train': real * manifest.augment_variants}
    if manifest.pipeline != 'real_only':
        pool = manifest.scaled(manifest.generation_pool)
        train = manifest.scaled(manifest.synth_train_count)
        val = min(manifest.scaled(manifest.synth_val_count), pool - train)
        counts.update(generation_pool=pool, synth_train=train, synth_val=val)
    return counts


def stage_graph(manifest: ExperimentManifest) -> Dict[str, Tuple[str, ...]]:
    """Stage -> prerequisite stages for the manifest's pipeline"""
    pipeline = manifest.pipeline
    if pipeline == 'real_only':
        graph = {'data': (), 'segment': ('data',), 'evaluate': ('segment',)}
    else:
        graph = {'data': ()}
        generators = []
        if not manifest.stub_generation:
            if pipeline == 'three_stage':
                graph['dots'] = ('data',)
                graph['gan'] = ('dots',)
                graph['translate_labels'] = ('dots',)
                generators += ['gan', 'translate_labels']
            else:
                graph['gan'] = ('data',)
                generators.append('gan')
            if pipeline in ('two_stage', 'three_stage'):
                graph['translate_images'] = ('data',)
                generators.append('translate_images')
        graph['generate'] = tuple(generators) or ('data',)
        graph['probes'] = ('generate', 'data')
        graph['segment'] = ('generate',)
        graph['evaluate'] = ('segment',)
    if manifest.finetune and pipeline != 'real_only':
        graph['finetune'] = ('segment', 'data')
        graph['evaluate'] = ('segment', 'finetune')
    return graph


def execution_order(graph: Dict[str, Sequence[str]]) -> List[str]:
    """Topological order; unknown prerequisites or cycles are ConfigErrors"""
    for stage, deps in graph.items():
        missing = [d for d in deps if d not in graph]
        if missing:
            raise ConfigError(f"Stage '{stage}' depends on unknown stages {missing}")
    try:
        return list(TopologicalSorter(graph).static_order())
    except CycleError as e:
        raise ConfigError(f"Stage graph has a cycle: {e.args[1]}")


def split_fingerprint(entries: Sequence[DatasetEntry]) -> str:
    digest = hashlib.sha256()
    for entry in sorted(entries, key=lambda e: e.id):
        digest.update(f'{entry.id}:{entry.shape[0]}x{entry.shape[1]};'.encode())
    return digest.hexdigest()


def resize_entry(entry: DatasetEntry, size: int) -> DatasetEntry:
    if entry.shape == (size, size):
        return entry
    image = Image.fromarray(entry.image.astype(np.float32), mode='F').resize((size, size), Image.BILINEAR)
    return DatasetEntry(
        id=entry.id,
        image=np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0),
        labels=resize_nearest(entry.labels, size, size),
        split=entry.split
    )


@dataclass
class RunRecord:
    """Everything a run produced; every referenced path exists when the record is written"""
    name: str
    manifest: Dict
    manifest_fingerprint: str
    split_fingerprint: str
    run_dir: str
    checkpoints: Dict[str, str] = field(default_factory=dict)
    reports: Dict[str, Dict] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)
    probes: Dict = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    created_at: str = ''

    @property
    def pipeline(self) -> str:
        return self.manifest['pipeline']

    @property
    def regime(self) -> str:
        return self.manifest['regime']

    def report(self, phase: str) -> MetricsReport:
        return MetricsReport.from_dict(self.reports[phase])

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'RunRecord':
        return cls(**data)

    def save(self, path: Optional[str] = None) -> str:
        for stage, artifact in self.checkpoints.items():
            if not os.path.exists(artifact):
                raise StateError(f"Checkpoint of stage '{stage}' is missing: {artifact}", stage=stage)
        path = path or os.path.join(self.run_dir, RUN_RECORD)
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2)
        return path

    @classmethod
    def load(cls, path: str) -> 'RunRecord':
        if os.path.isdir(path):
            path = os.path.join(path, RUN_RECORD)
        if not os.path.exists(path):
            raise ConfigError(f"Run record not found: {path}", path=path)
        with open(path, 'r') as f:
            return cls.from_dict(json.load(f))


Synthesizer = Callable[['RunContext', int, int], List[Tuple[np.ndarray, np.ndarray]]]


class RunContext:
    """Run directory access; stage inputs are always read back from disk"""

    def __init__(self, manifest: ExperimentManifest, device=None):
        self.manifest = manifest
        self.run_dir = manifest.run_dir
        self.device = device or resolve_device()
        self.fingerprint = config_fingerprint(manifest.to_dict())
        self._cache = {}

    def path(self, *parts) -> str:
        return os.path.join(self.run_dir, *parts)

    def seed(self, stage: str) -> int:
        return derive_seed(self.manifest.seed, stage)

    def dataset(self, *parts) -> List[DatasetEntry]:
        key = parts
        if key not in self._cache:
            self._cache[key] = load_dataset(self.path(*parts))
        return self._cache[key]

    def real_train(self) -> List[DatasetEntry]:
        return select_split(self.dataset('data', 'real'), 'train')

    def real_test(self) -> List[DatasetEntry]:
        return select_split(self.dataset('data', 'real'), 'test')

    def checkpoint(self, stage: str, filename: str, kind: Optional[str] = None) -> NetworkCheckpoint:
        key = ('ckpt', stage, filename)
        if key not in self._cache:
            self._cache[key] = NetworkCheckpoint.load(self.path(stage, filename), kind)
        return self._cache[key]

    def log_event(self, stage: str, event: str, seconds: float = 0.0, **extra):
        os.makedirs(self.run_dir, exist_ok=True)
        record = {'stage': stage, 'event': event, 'seconds': round(seconds, 3),
                  'time': datetime.utcnow().isoformat(), **extra}
        with open(self.path(RUN_LOG), 'a') as f:
            f.write(json.dumps(record) + '\n')

    def marker(self, stage: str) -> Optional[Dict]:
        path = self.path(stage, STAGE_MARKER)
        if not os.path.exists(path):
            return None
        with open(path, 'r') as f:
            marker = json.load(f)
        if marker.get('manifest_fingerprint') != self.fingerprint:
            raise StateError(
                f"Run directory {self.run_dir} holds stage '{stage}' of a different manifest",
                stage=stage
            )
        return marker

    def write_marker(self, stage: str, outputs: Dict, seconds: float):
        os.makedirs(self.path(stage), exist_ok=True)
        with open(self.path(stage, STAGE_MARKER), 'w') as f:
            json.dump({'stage': stage, 'manifest_fingerprint': self.fingerprint,
                       'outputs': outputs, 'seconds': seconds}, f, indent=2)


def load_real_entries(manifest: ExperimentManifest, seed: int) -> List[DatasetEntry]:
    if manifest.data_root:
        entries = load_dataset(manifest.data_root)
    else:
        base = dict(seed=seed, size=manifest.phantom_size)
        train = PhantomConfig(count=manifest.phantom_count, split='train', **base)
        test = PhantomConfig(count=manifest.phantom_test_count, split='test', **base)
        entries = make_phantoms(train) + make_phantoms(test, start_index=manifest.phantom_count)
    return [resize_entry(entry, manifest.resolution) for entry in entries]


def stage_data(ctx: RunContext) -> Dict:
    m = ctx.manifest
    entries = load_real_entries(m, ctx.seed('phantoms'))
    train = select_split(entries, 'train')
    test = select_split(entries, 'test')
    if not train or not test:
        raise ConfigError(f"Real data needs train and test entries, got {len(train)} and {len(test)}")

    counts = protocol_counts(m, len(train))
    if m.regime != 'full':
        train = subsample_train(train, 1.0, ctx.seed('subsample'), count=counts['real_train'])
    augmented = augment_dataset(train, m.augment_variants, ctx.seed('augment'))

    export_dataset(augmented + test, ctx.path('data', 'real'))
    return {
        'real_train': len(train),
        'augmented_train': len(augmented),
        'test': len(test),
        'split_fingerprint': split_fingerprint(test)
    }


def stage_dots(ctx: RunContext) -> Dict:
    m = ctx.manifest
    triples = dotify_dataset(ctx.real_train(), m.dot_radius, m.dot_resolution)
    path = ctx.path('dots', 'dot_maps.npz')
    os.makedirs(os.path.dirname(path), exist_ok=True)
    np.savez_compressed(path, ids=np.array([t.id for t in triples]),
                        dot_maps=np.stack([t.dot_map for t in triples]))
    return {'dot_maps': len(triples), 'path': path}


def _dot_maps(ctx: RunContext) -> np.ndarray:
    with np.load(ctx.path('dots', 'dot_maps.npz')) as data:
        return data['dot_maps']


def gan_config(ctx: RunContext) -> generative_core.GeneratorConfig:
    m = ctx.manifest
    three = m.pipeline == 'three_stage'
    return generative_core.GeneratorConfig(
        latent_dim=m.gan_latent_dim,
        out_channels=2 if m.pipeline == 'single_stage' else 1,
        max_feature_maps=m.gan_max_feature_maps,
        target_res=m.dot_resolution if three else m.resolution,
        steps_per_stage=m.gan_steps_per_stage,
        fade_fraction=m.gan_fade_fraction,
        batch_size=m.gan_batch_size,
        seed=ctx.seed('gan')
    )


def _latest_stage_checkpoint(directory: str) -> Optional[NetworkCheckpoint]:
    if not os.path.isdir(directory):
        return None
    stages = sorted(
        (int(name[len('gan_stage'):-3]), name) for name in os.listdir(directory)
        if name.startswith('gan_stage') and name.endswith('.pt')
    )
    if not stages:
        return None
    return NetworkCheckpoint.load(os.path.join(directory, stages[-1][1]), generative_core.CHECKPOINT_KIND)


def stage_gan(ctx: RunContext) -> Dict:
    m = ctx.manifest
    config = gan_config(ctx)
    if m.pipeline == 'three_stage':
        data = _dot_maps(ctx)[:, None].astype(np.float32)
    elif m.pipeline == 'two_stage':
        data = np.stack([e.labels for e in ctx.real_train()])[:, None].astype(np.float32)
    else:
        data = np.stack([stack_pair(e.image, e.labels) for e in ctx.real_train()])

    out_dir = ctx.path('gan')
    resume = _latest_stage_checkpoint(out_dir)
    if resume is not None and resume.config != config.to_dict():
        resume = None
    ckpt = generative_core.train_adversarial(data, config, output_dir=out_dir, resume=resume, device=ctx.device)
    return {'checkpoint': ckpt.path, 'steps': ckpt.step}


def translator_config(ctx: RunContext, output_kind: str, stage: str) -> translator.TranslatorConfig:
    m = ctx.manifest
    return translator.TranslatorConfig(
        output_kind=output_kind,
        levels=m.translator_levels,
        base_filters=m.translator_base_filters,
        fm_weight=m.translator_fm_weight,
        steps=m.translator_steps,
        batch_size=m.translator_batch_size,
        seed=ctx.seed(stage)
    )


def stage_translate_labels(ctx: RunContext) -> Dict:
    dot_maps = _dot_maps(ctx)
    pairs = []
    for entry, dot_map in zip(ctx.real_train(), dot_maps):
        h, w = entry.shape
        pairs.append(translator.TranslationPair(id=entry.id, source=resize_nearest(dot_map, h, w), target=entry.labels))
    config = translator_config(ctx, 'label', 'translate_labels')
    ckpt = translator.train_translation(pairs, config, output_dir=ctx.path('translate_labels'), device=ctx.device)
    return {'checkpoint': ckpt.path, 'pairs': len(pairs)}


def stage_translate_images(ctx: RunContext) -> Dict:
    pairs = translator.pairs_from_entries(ctx.real_train())
    config = translator_config(ctx, 'image', 'translate_images')
    ckpt = translator.train_translation(pairs, config, output_dir=ctx.path('translate_images'), device=ctx.device)
    return {'checkpoint': ckpt.path, 'pairs': len(pairs)}


def model_synthesizer(ctx: RunContext, count: int, seed: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Sample the trained generation chain of the manifest's pipeline"""
    m = ctx.manifest
    gan = ctx.checkpoint('gan', 'gan_final.pt', generative_core.CHECKPOINT_KIND)
    grids = generative_core.sample(gan, count, seed, device=ctx.device)
    images, labels = generative_core.split_grids(grids, generative_core.GeneratorConfig.from_dict(gan.config))

    if m.pipeline == 'single_stage':
        return list(zip(images, labels))

    if m.pipeline == 'three_stage':
        to_labels = translator.Translator(ctx.checkpoint('translate_labels', 'translator.pt'), ctx.device)
        dots = [resize_nearest(d, m.resolution, m.resolution) for d in labels]
        labels = to_labels.translate_batch(dots)

    to_images = translator.Translator(ctx.checkpoint('translate_images', 'translator.pt'), ctx.device)
    return list(zip(to_images.translate_batch(labels), labels))


def stub_synthesizer(ctx: RunContext, count: int, seed: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Phantoms in place of trained generators, for protocol checks"""
    cfg = PhantomConfig(seed=seed, size=ctx.manifest.resolution, count=max(count, 1))
    return [(e.image, e.labels) for e in make_phantoms(cfg)][:count]


def stage_generate(ctx: RunContext, synthesizer: Synthesizer) -> Dict:
    counts = protocol_counts(ctx.manifest, len(ctx.real_train()))
    pool = synthesizer(ctx, counts['generation_pool'], ctx.seed('generate'))
    if len(pool) != counts['generation_pool']:
        raise StateError(f"Synthesizer returned {len(pool)} items, expected {counts['generation_pool']}")

    order = np.random.default_rng(ctx.seed('generate_split')).permutation(len(pool))
    entries = [DatasetEntry(id=f'synth_{i:05d}', image=pool[i][0], labels=pool[i][1], split='train')
               for i in order]
    train = entries[:counts['synth_train']]
    val = entries[counts['synth_train']:counts['synth_train'] + counts['synth_val']]

    export_dataset(train, ctx.path('generate', 'train'))
    if val:
        export_dataset(val, ctx.path('generate', 'val'))
    return {'generation_pool': len(pool), 'synth_train': len(train), 'synth_val': len(val)}


def stage_probes(ctx: RunContext) -> Dict:
    synthetic = ctx.dataset('generate', 'train')
    maps = [e.labels for e in synthetic]
    probes = {'label_sanity': label_sanity(maps)}
    if len(synthetic) >= 2:
        sample, real = synthetic[:64], ctx.real_train()
        probes['diversity'] = diversity(
            [e.labels.astype(np.float32) for e in sample], [e.labels.astype(np.float32) for e in real]
        ).to_dict()
        probes['image_diversity'] = diversity([e.image for e in sample], [e.image for e in real]).to_dict()
    with open(ctx.path('probes', 'probes.json'), 'w') as f:
        json.dump(probes, f, indent=2)
    return probes


def segmenter_config(ctx: RunContext, steps: int) -> SegmenterConfig:
    m = ctx.manifest
    return SegmenterConfig(
        crop=m.seg_crop,
        batch_size=m.seg_batch_size,
        encoder_blocks=tuple(m.seg_encoder_blocks),
        base_width=m.seg_base_width,
        attention=m.seg_attention,
        steps=steps,
        val_every=m.seg_val_every,
        seed=ctx.seed('segment')
    )


def stage_segment(ctx: RunContext) -> Dict:
    m = ctx.manifest
    cfg = segmenter_config(ctx, m.seg_steps)
    if m.pipeline == 'real_only':
        data, val, source = ctx.real_train(), None, 'real'
    else:
        data = ctx.dataset('generate', 'train')
        val = ctx.dataset('generate', 'val') if os.path.isdir(ctx.path('generate', 'val')) else None
        source = f'synthetic:{m.pipeline}'
    ckpt = train_segmenter(data, cfg, source=source, val_entries=val,
                           output_dir=ctx.path('segment'), device=ctx.device)
    return {'checkpoint': ckpt.path, 'entries': len(data)}


def stage_finetune(ctx: RunContext) -> Dict:
    m = ctx.manifest
    pretrained = ctx.checkpoint('segment', 'segmenter.pt')
    cfg = segmenter_config(ctx, m.finetune_steps)
    cfg.val_every = 0
    ckpt = finetune(pretrained, ctx.real_train(), cfg, output_dir=ctx.path('finetune'), device=ctx.device)
    return {'checkpoint': ckpt.path, 'entries': len(ctx.real_train())}


def evaluate_checkpoint(ckpt: NetworkCheckpoint, entries: Sequence[DatasetEntry], subset=None,
                        mode: str = 'micro', device=None) -> MetricsReport:
    network = load_segmenter(ckpt, device)
    crop = ckpt.metadata.get('crop')
    pairs = [(predict_sliding(network, e.image, crop=crop).labels, e.labels) for e in entries]
    return report(pairs, subset=subset, mode=mode)


def stage_evaluate(ctx: RunContext) -> Dict:
    test = ctx.real_test()
    results = {}
    phases = [('pretrain', 'segment', 'segmenter.pt')]
    if 'finetune' in stage_graph(ctx.manifest):
        phases.append(('finetune', 'finetune', 'segmenter_finetuned.pt'))
    for phase, stage, filename in phases:
        results[phase] = evaluate_checkpoint(
            ctx.checkpoint(stage, filename), test, mode=ctx.manifest.subset_mode, device=ctx.device
        ).to_dict()
    with open(ctx.path('evaluate', 'metrics.json'), 'w') as f:
        json.dump(results, f, indent=2)
    return results


CHECKPOINT_FILES = {
    'gan': 'gan_final.pt',
    'translate_labels': 'translator.pt',
    'translate_images': 'translator.pt',
    'segment': 'segmenter.pt',
    'finetune': 'segmenter_finetuned.pt'
}


def run(manifest: ExperimentManifest, synthesizer: Optional[Synthesizer] = None, device=None) -> RunRecord:
    """
    Execute the manifest's stage graph; completed stages are skipped on rerun

    Args:
        manifest: Validated experiment manifest
        synthesizer: Replacement for the trained generation chain
        device: Torch device

    Returns:
        RunRecord, also written to <run_dir>/run_record.json and the run index
    """
    manifest.validate()
    if synthesizer is None:
        synthesizer = stub_synthesizer if manifest.stub_generation else model_synthesizer

    ctx = RunContext(manifest, device)
    graph = stage_graph(manifest)
    order = execution_order(graph)
    os.makedirs(ctx.run_dir, exist_ok=True)
    logger.info(f"Running '{manifest.name}' ({manifest.pipeline}/{manifest.regime}): {' -> '.join(order)}")

    handlers = {
        'data': stage_data,
        'dots': stage_dots,
        'gan': stage_gan,
        'translate_labels': stage_translate_labels,
        'translate_images': stage_translate_images,
        'generate': lambda c: stage_generate(c, synthesizer),
        'probes': stage_probes,
        'segment': stage_segment,
        'finetune': stage_finetune,
        'evaluate': stage_evaluate
    }

    outputs, timings = {}, {}
    for stage in order:
        marker = ctx.marker(stage)
        if marker is not None:
            logger.info(f"Skipping completed stage '{stage}'")
            ctx.log_event(stage, 'skipped')
            outputs[stage] = marker['outputs']
            timings[stage] = marker['seconds']
            continue

        ctx.log_event(stage, 'start')
        started = time.time()
        try:
            os.makedirs(ctx.path(stage), exist_ok=True)
            result = handlers[stage](ctx)
        except Exception as e:
            seconds = time.time() - started
            ctx.log_event(stage, 'failed', seconds, error=str(e))
            logger.error(f"Stage '{stage}' of '{manifest.name}' failed: {e}", exc_info=True)
            raise StageFailed(stage, e) from e

        seconds = round(time.time() - started, 3)
        ctx.write_marker(stage, result, seconds)
        ctx.log_event(stage, 'done', seconds)
        outputs[stage], timings[stage] = result, seconds

    counts = {}
    for stage in ('data', 'generate'):
        counts.update({k: v for k, v in outputs.get(stage, {}).items() if isinstance(v, int)})
    record = RunRecord(
        name=manifest.name,
        manifest=manifest.to_dict(),
        manifest_fingerprint=ctx.fingerprint,
        split_fingerprint=outputs['data']['split_fingerprint'],
        run_dir=ctx.run_dir,
        checkpoints={stage: ctx.path(stage, CHECKPOINT_FILES[stage]) for stage in order if stage in CHECKPOINT_FILES},
        reports=outputs['evaluate'],
        counts=counts,
        probes=outputs.get('probes', {}),
        timings=timings,
        created_at=datetime.utcnow().isoformat()
    )
    path = record.save()
    logger.info(f"Run '{manifest.name}' complete, record written to {path}")

    if not RunStorage().save_run(record):
        logger.warning(f"Run '{manifest.name}' could not be added to the run index")
    return record


def reevaluate(record: RunRecord, device=None) -> Dict[str, Dict]:
    """Recompute a record's reports from its checkpoints and exported test split"""
    test = select_split(load_dataset(os.path.join(record.run_dir, 'data', 'real')), 'test')
    if split_fingerprint(test) != record.split_fingerprint:
        raise StateError(f"Test split of run '{record.name}' changed on disk")
    stages = {'pretrain': 'segment', 'finetune': 'finetune'}
    results = {}
    for phase in record.reports:
        ckpt = NetworkCheckpoint.load(record.checkpoints[stages[phase]])
        results[phase] = evaluate_checkpoint(ckpt, test, mode=record.manifest.get('subset_mode', 'micro'),
                                             device=device).to_dict()
    return results


@dataclass
class ComparisonTable:
    """Rows are metric labels, one column per (pipeline, finetune) combination"""
    columns: List[str]
    rows: List[str]
    values: Dict[str, Dict[str, float]]
    notes: List[str] = field(default_factory=list)

    def best(self, row: str) -> List[str]:
        """Columns holding the maximum of a row (all of them on ties)"""
        cells = self.values[row]
        top = max(cells.values())
        return [column for column in self.columns if column in cells and cells[column] == top]

    def to_dict(self) -> Dict:
        return {'columns': self.columns, 'rows': self.rows, 'values': self.values,
                'best': {row: self.best(row) for row in self.rows}, 'notes': self.notes}


def column_label(record: RunRecord, phase: str, with_regime: bool = False) -> str:
    label = COLUMN_LABELS[record.pipeline]
    if phase == 'finetune':
        label += ' FINETUNE'
    if with_regime:
        label += f' ({record.regime})'
    return label


def compare(records: Sequence[RunRecord]) -> ComparisonTable:
    if not records:
        raise ConfigError("Nothing to compare")
    fingerprints = {r.split_fingerprint for r in records}
    if len(fingerprints) > 1:
        raise ConfigError("Runs were evaluated on different test splits",
                          runs=[r.name for r in records])

    with_regime = len({r.regime for r in records}) > 1
    columns, rows, values = [], [], {}
    for record in records:
        for phase in ('pretrain', 'finetune'):
            if phase not in record.reports:
                continue
            column = column_label(record, phase, with_regime)
            if column in columns:
                column = f'{column} [{record.name}]'
            columns.append(column)
            for row, value in record.report(phase).rows():
                if row not in values:
                    rows.append(row)
                    values[row] = {}
                values[row][column] = value

    notes = []
    if any(r.regime == 'full' and r.pipeline in ('single_stage', 'two_stage') for r in records):
        notes.append(FULL_REGIME_NOTE)
    return ComparisonTable(columns=columns, rows=rows, values=values, notes=notes)
