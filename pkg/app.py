#!/usr/bin/env python3
"""
CXR Synth
Command line entry point for synthetic chest X-ray generation experiments
"""

import os
import sys
import json
import logging
import argparse
from datetime import datetime

import numpy as np

from modules.config import build_dataclass, configure_logging, load_config_file, parse_overrides
from modules.errors import CXRSynthError, ConfigError
from modules import generative_core, translator
from modules.augmentation import augment_dataset
from modules.checkpoints import NetworkCheckpoint
from modules.dataset_io import (DatasetEntry, PhantomConfig, export_dataset, load_dataset, make_phantoms,
                                read_gray_image, select_split, write_gray_image)
from modules.dot_maps import dotify_dataset
from modules.label_codec import read_label_map, resize_nearest, stack_pair, write_label_map
from modules.metrics import report
from modules.pipeline import RunRecord, compare, load_manifest, run
from modules.report_generator import ReportGenerator, report_as_table, to_markdown, write_csv, write_markdown
from modules.run_storage import RunStorage
from modules.segmenter import SegmenterConfig, finetune, load_segmenter, predict_sliding, train_segmenter

logger = logging.getLogger(__name__)


def _config(args, cls, **defaults):
    """Dataclass from --config FILE plus --set overrides; explicit values win over defaults"""
    values = load_config_file(args.config, parse_overrides(args.set))
    for key, value in defaults.items():
        values.setdefault(key, value)
    return build_dataclass(cls, values)


def _require_path(parser, path, what):
    if not path or not os.path.exists(path):
        parser.error(f"{what} not found: {path}")


def _mask_dir(path):
    masks = os.path.join(path, 'masks')
    return masks if os.path.isdir(masks) else path


def cmd_prepare_phantoms(args):
    cfg = _config(args, PhantomConfig)
    entries = make_phantoms(cfg)
    if args.test_count:
        test_cfg = PhantomConfig(**dict(cfg.to_dict(), count=args.test_count, split='test'))
        entries += make_phantoms(test_cfg, start_index=cfg.count)
    export_dataset(entries, args.out)
    return {'entries': len(entries), 'out': args.out}


def cmd_ingest(args):
    entries = load_dataset(args.data, args.split_file, bit_depth=args.bit_depth)
    shapes = sorted({f'{e.shape[0]}x{e.shape[1]}' for e in entries})
    result = {
        'entries': len(entries),
        'train': len(select_split(entries, 'train')),
        'test': len(select_split(entries, 'test')),
        'shapes': shapes
    }
    if args.out:
        export_dataset(entries, args.out)
        result['out'] = args.out
    return result


def cmd_augment(args):
    entries = load_dataset(args.data)
    train = select_split(entries, 'train')
    augmented = augment_dataset(train, args.variants, args.seed)
    export_dataset(augmented + select_split(entries, 'test'), args.out)
    return {'train': len(train), 'augmented_train': len(augmented), 'out': args.out}


def cmd_extract_dots(args):
    entries = select_split(load_dataset(args.data), 'train')
    triples = dotify_dataset(entries, args.radius, args.size)
    os.makedirs(os.path.join(args.out, 'masks'), exist_ok=True)
    for t in triples:
        write_label_map(os.path.join(args.out, 'masks', f'{t.id}.png'), t.dot_map)
    np.savez_compressed(os.path.join(args.out, 'dot_maps.npz'),
                        ids=np.array([t.id for t in triples]),
                        dot_maps=np.stack([t.dot_map for t in triples]))
    return {'dot_maps': len(triples), 'out': args.out}


def _gan_data(args):
    entries = select_split(load_dataset(args.data), 'train')
    if args.kind == 'dots':
        return np.stack([t.dot_map for t in dotify_dataset(entries)])[:, None].astype(np.float32)
    if args.kind == 'labels':
        return np.stack([e.labels for e in entries])[:, None].astype(np.float32)
    return np.stack([stack_pair(e.image, e.labels) for e in entries])


def cmd_train_gan(args):
    data = _gan_data(args)
    cfg = _config(args, generative_core.GeneratorConfig,
                  target_res=int(data.shape[-1]), out_channels=int(data.shape[1]))
    resume = NetworkCheckpoint.load(args.resume, generative_core.CHECKPOINT_KIND) if args.resume else None
    ckpt = generative_core.train_adversarial(data, cfg, output_dir=args.out, resume=resume)
    return {'checkpoint': ckpt.path, 'steps': ckpt.step, 'stage': ckpt.stage}


def cmd_sample(args):
    ckpt = NetworkCheckpoint.load(args.checkpoint, generative_core.CHECKPOINT_KIND)
    grids = generative_core.sample(ckpt, args.count, args.seed)
    config = generative_core.GeneratorConfig.from_dict(ckpt.config)
    os.makedirs(args.out, exist_ok=True)
    np.savez_compressed(os.path.join(args.out, 'samples.npz'), grids=grids)
    generative_core.save_sample_grid(os.path.join(args.out, 'samples.png'), grids[:64], config)
    return {'samples': len(grids), 'out': args.out}


def _translation_pairs(args):
    entries = select_split(load_dataset(args.data), 'train')
    if args.task == 'labels_to_images':
        return translator.pairs_from_entries(entries), 'image'
    return translator.pairs_from_triples(dotify_dataset(entries)), 'label'


def cmd_train_translator(args):
    pairs, kind = _translation_pairs(args)
    cfg = _config(args, translator.TranslatorConfig, output_kind=kind)
    ckpt = translator.train_translation(pairs, cfg, output_dir=args.out)
    return {'checkpoint': ckpt.path, 'pairs': len(pairs)}


def cmd_translate(args):
    engine = translator.Translator(NetworkCheckpoint.load(args.checkpoint, translator.CHECKPOINT_KIND))
    source_dir = _mask_dir(args.data)
    names = sorted(n for n in os.listdir(source_dir) if n.endswith('.png'))
    os.makedirs(args.out, exist_ok=True)
    for name in names:
        result = engine(read_label_map(os.path.join(source_dir, name)))
        if engine.config.output_kind == 'label':
            write_label_map(os.path.join(args.out, name), result)
        else:
            write_gray_image(os.path.join(args.out, name), result)
    return {'translated': len(names), 'out': args.out}


def cmd_generate(args):
    gan = NetworkCheckpoint.load(args.checkpoint, generative_core.CHECKPOINT_KIND)
    grids = generative_core.sample(gan, args.count, args.seed)
    images, labels = generative_core.split_grids(grids, generative_core.GeneratorConfig.from_dict(gan.config))
    labels = list(labels)

    if args.label_translator:
        to_labels = translator.Translator(NetworkCheckpoint.load(args.label_translator, translator.CHECKPOINT_KIND))
        labels = to_labels.translate_batch([resize_nearest(d, args.resolution, args.resolution) for d in labels])
    if args.image_translator:
        to_images = translator.Translator(NetworkCheckpoint.load(args.image_translator, translator.CHECKPOINT_KIND))
        images = to_images.translate_batch(labels)
    if images is None:
        raise ConfigError("Label-only generator needs --image-translator to produce images")

    entries = [DatasetEntry(id=f'synth_{i:05d}', image=img, labels=lab, split='train')
               for i, (img, lab) in enumerate(zip(images, labels))]
    export_dataset(entries, args.out)
    return {'generated': len(entries), 'out': args.out}


def cmd_train_seg(args):
    entries = select_split(load_dataset(args.data), 'train')
    val = load_dataset(args.val) if args.val else None
    cfg = _config(args, SegmenterConfig)
    ckpt = train_segmenter(entries, cfg, source=args.source, val_entries=val, output_dir=args.out)
    return {'checkpoint': ckpt.path, 'entries': len(entries)}


def cmd_finetune_seg(args):
    pretrained = NetworkCheckpoint.load(args.checkpoint, 'segmenter')
    entries = select_split(load_dataset(args.data), 'train')
    inherited = SegmenterConfig.from_dict(pretrained.config).to_dict()
    inherited.pop('steps')
    cfg = _config(args, SegmenterConfig, **inherited)
    ckpt = finetune(pretrained, entries, cfg, source=args.source, output_dir=args.out)
    return {'checkpoint': ckpt.path, 'entries': len(entries)}


def cmd_predict(args):
    ckpt = NetworkCheckpoint.load(args.checkpoint, 'segmenter')
    network = load_segmenter(ckpt)
    image_dir = os.path.join(args.data, 'images') if os.path.isdir(os.path.join(args.data, 'images')) else args.data
    names = sorted(n for n in os.listdir(image_dir) if n.endswith('.png'))
    os.makedirs(args.out, exist_ok=True)
    for name in names:
        image = read_gray_image(os.path.join(image_dir, name), args.bit_depth)
        prediction = predict_sliding(network, image, crop=ckpt.metadata.get('crop'))
        write_label_map(os.path.join(args.out, name), prediction.labels)
    return {'predicted': len(names), 'out': args.out}


def cmd_evaluate(args):
    pred_dir, target_dir = _mask_dir(args.pred), _mask_dir(args.target)
    names = sorted(n for n in os.listdir(target_dir) if n.endswith('.png'))
    missing = [n for n in names if not os.path.exists(os.path.join(pred_dir, n))]
    if missing:
        raise ConfigError(f"{len(missing)} targets have no prediction, e.g. {missing[0]}", missing=missing[:10])
    pairs = [(read_label_map(os.path.join(pred_dir, n)), read_label_map(os.path.join(target_dir, n)))
             for n in names]
    result = report(pairs, subset=args.subset.split(',') if args.subset else None, mode=args.mode)
    table = report_as_table(result, column=args.mode)
    os.makedirs(args.out, exist_ok=True)
    write_csv(table, os.path.join(args.out, 'metrics.csv'))
    write_markdown(table, os.path.join(args.out, 'metrics.md'), title='Segmentation metrics')
    return {'pairs': len(pairs), 'average_jaccard': result.average_jaccard,
            'average_dice': result.average_dice, 'out': args.out}


def _write_reports(table, out_dir, title, probes=None):
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        'csv': write_csv(table, os.path.join(out_dir, 'comparison.csv')),
        'markdown': write_markdown(table, os.path.join(out_dir, 'comparison.md'), title=title)
    }
    try:
        paths['pdf'] = ReportGenerator(table, title, probes).generate_pdf_report(os.path.join(out_dir, 'comparison.pdf'))
    except Exception as e:
        logger.error(f"Failed to generate PDF report: {str(e)}", exc_info=True)
    return paths


def cmd_run(args):
    manifest = load_manifest(args.manifest, parse_overrides(args.set))
    record = run(manifest)
    table = compare([record])
    reports = _write_reports(table, os.path.join(record.run_dir, 'reports'), f'Run {record.name}',
                             {record.name: record.probes} if record.probes else None)
    print(to_markdown(table), file=sys.stderr)
    return {'run': record.name, 'record': os.path.join(record.run_dir, 'run_record.json'),
            'reports': reports, 'checkpoints': record.checkpoints}


def cmd_compare(args):
    storage = RunStorage()
    records = [RunRecord.load(storage.resolve(item)) for item in args.runs]
    table = compare(records)
    probes = {r.name: r.probes for r in records if r.probes}
    reports = _write_reports(table, args.out, 'Run comparison', probes)
    print(to_markdown(table), file=sys.stderr)
    return {'columns': table.columns, 'reports': reports}


VERBS = {
    'prepare-phantoms': cmd_prepare_phantoms,
    'ingest': cmd_ingest,
    'augment': cmd_augment,
    'extract-dots': cmd_extract_dots,
    'train-gan': cmd_train_gan,
    'sample': cmd_sample,
    'train-translator': cmd_train_translator,
    'translate': cmd_translate,
    'train-seg': cmd_train_seg,
    'finetune-seg': cmd_finetune_seg,
    'generate': cmd_generate,
    'predict': cmd_predict,
    'evaluate': cmd_evaluate,
    'run': cmd_run,
    'compare': cmd_compare
}


def build_parser():
    parser = argparse.ArgumentParser(prog='cxrsynth', description='Synthetic chest X-ray generation experiments')
    sub = parser.add_subparsers(dest='verb', metavar='VERB')
    sub.required = True

    def verb(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument('--config', help='KEY=VALUE config file')
        p.add_argument('--set', action='append', default=[], metavar='KEY=VALUE', help='Override a config value')
        return p

    p = verb('prepare-phantoms', 'Write a procedural phantom dataset')
    p.add_argument('--out', required=True)
    p.add_argument('--test-count', type=int, default=0)

    p = verb('ingest', 'Validate a dataset directory')
    p.add_argument('--data', required=True)
    p.add_argument('--split-file')
    p.add_argument('--bit-depth', type=int, default=12)
    p.add_argument('--out', help='Re-export the validated dataset here')

    p = verb('augment', 'Expand the training split with augmented copies')
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--variants', type=int, default=6)
    p.add_argument('--seed', type=int, default=0)

    p = verb('extract-dots', 'Build dot maps from training labels')
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--radius', type=int, default=2)
    p.add_argument('--size', type=int, default=64)

    p = verb('train-gan', 'Train a progressive GAN')
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--kind', choices=('dots', 'labels', 'stacked'), default='dots')
    p.add_argument('--resume', help='Checkpoint to continue from')

    p = verb('sample', 'Sample a trained progressive GAN')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--count', type=int, default=16)
    p.add_argument('--seed', type=int, default=0)

    p = verb('train-translator', 'Train a translator')
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--task', choices=('dots_to_labels', 'labels_to_images'), default='labels_to_images')

    p = verb('translate', 'Translate every label map of a directory')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)

    p = verb('train-seg', 'Train a segmenter')
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--val', help='Validation dataset directory')
    p.add_argument('--source', default='real', help='Provenance tag of the training data')

    p = verb('finetune-seg', 'Finetune a trained segmenter on real data')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--source', default='real')

    p = verb('generate', 'Generate a synthetic dataset from trained checkpoints')
    p.add_argument('--checkpoint', required=True, help='Progressive GAN checkpoint')
    p.add_argument('--out', required=True)
    p.add_argument('--count', type=int, default=100)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--resolution', type=int, default=128)
    p.add_argument('--label-translator')
    p.add_argument('--image-translator')

    p = verb('predict', 'Segment every image of a directory')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--bit-depth', type=int, default=12)

    p = verb('evaluate', 'Score predicted label maps against targets')
    p.add_argument('--pred', required=True)
    p.add_argument('--target', required=True)
    p.add_argument('--out', default='reports')
    p.add_argument('--subset', help='Comma separated class names')
    p.add_argument('--mode', choices=('micro', 'macro'), default='micro')

    p = verb('run', 'Run an experiment manifest end to end')
    p.add_argument('--manifest', required=True)

    p = verb('compare', 'Compare run records by name or path')
    p.add_argument('runs', nargs='+')
    p.add_argument('--out', default='reports')

    return parser


PATH_ARGUMENTS = (('manifest', 'Manifest'), ('config', 'Config file'), ('data', 'Data directory'),
                  ('checkpoint', 'Checkpoint'), ('pred', 'Prediction directory'), ('target', 'Target directory'))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for name, what in PATH_ARGUMENTS:
            if getattr(args, name, None) is not None:
                _require_path(parser, getattr(args, name), what)
    except SystemExit as e:
        return int(e.code or 0)

    configure_logging()
    started = datetime.utcnow()
    logger.info(f"Starting {args.verb}")
    try:
        result = VERBS[args.verb](args)
    except CXRSynthError as e:
        logger.error(f"{args.verb} failed: {e}", exc_info=True)
        record = e.to_record()
        record['verb'] = args.verb
        print(json.dumps(record, default=str), file=sys.stderr)
        return 1
    except Exception as e:
        logger.error(f"{args.verb} failed unexpectedly: {e}", exc_info=True)
        print(json.dumps({'status': 'error', 'error': str(e), 'type': type(e).__name__, 'verb': args.verb}),
              file=sys.stderr)
        return 1

    print(json.dumps({
        'status': 'success',
        'verb': args.verb,
        'duration': round((datetime.utcnow() - started).total_seconds(), 3),
        **result
    }, indent=2, default=str))
    return 0


if __name__ == '__main__':
    sys.exit(main())
