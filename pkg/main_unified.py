#!/usr/bin/env python3
"""
Command-line launcher for desk-scale DINO
Dataset generation, training, frozen-feature evaluation, attention maps and the collapse study
"""

import sys
import os
import argparse
import json
from dataclasses import replace
from typing import Any, Callable, Dict, List, Optional

try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError as e:
    print(f"IMPORT ERROR: {e}")
    print("Run: pip install -r requirements.txt")
    sys.exit(1)

VERSION = "1.0.0"

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src import ndtensor as nd
from src.checkpoint import load_checkpoint
from src.collapse_study import COLLAPSE_MODES, run_collapse_study
from src.data import Dataset, export_ppm, gen_toy, load_dataset, read_ppm, save_dataset
from src.error_reporter import ConfigError, ErrorReporter, ParameterError, format_failure_line
from src.evaluation import (CLS_LAYERS, KNN_K, KNN_TAU, EvalReport, attention_mask, cls_attention,
                            extract_features, knn_eval, linear_probe, load_relevance, retrieval_map,
                            write_pgm)
from src.model import DinoModel
from src.run_config import load_run_config, load_toy_spec, parse_run_config
from src.unified_engine import run_training
from src.unified_logging import LogContext, configure_logging, get_logger

USAGE_EXIT = 2


class CommandLineParser(argparse.ArgumentParser):
    """Usage errors become one DINO_FAILURE line and exit code 2"""

    def error(self, message):
        command = self.prog.split(' ', 1)[1].replace(' ', '-') if ' ' in self.prog else 'cli'
        print(format_failure_line(command, ConfigError(message), 'USAGE', USAGE_EXIT), file=sys.stderr)
        sys.exit(USAGE_EXIT)


# ---------------------------------------------------------------------------
# Checkpoint helpers
# ---------------------------------------------------------------------------

def load_model(path: str, which: str = 'teacher'):
    """Model, chosen parameter set and run config stored in a checkpoint"""
    checkpoint = load_checkpoint(path)
    config = parse_run_config(checkpoint.config_text)
    nd.set_precision(config.train.precision)
    params = checkpoint.teacher if which == 'teacher' else checkpoint.student
    return DinoModel(config.model, config.head, params), config


def _layers(requested: Optional[int], model: DinoModel) -> int:
    return min(CLS_LAYERS, model.vit_config.depth) if requested is None else requested


def _load_image(path: str, index: int) -> Dataset:
    """A single-image dataset from a PPM/PGM file or one row of a DSV1 file"""
    if path.lower().endswith(('.ppm', '.pgm')):
        pixels = read_ppm(path)
        return Dataset(pixels[None], [0], ('image',), 'test')
    dataset = load_dataset(path)
    if not 0 <= index < len(dataset):
        raise ParameterError(f"--index must lie in [0, {len(dataset)}), got {index}")
    return dataset.subset([index])


def _report(args, metric: str, value: float, **extra: Any) -> Dict[str, Any]:
    record = {'metric': metric, 'value': value, 'config': extra}
    if getattr(args, 'report', None):
        record = EvalReport(args.report, {'ckpt': args.ckpt}).write(metric, value, **extra)
    return record


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> Dict[str, Any]:
    spec = load_toy_spec(args.spec)
    if args.split:
        spec = replace(spec, split=args.split)
    dataset = gen_toy(spec)
    save_dataset(dataset, args.out)
    return {'images': len(dataset), 'split': spec.split, 'out': args.out}


def cmd_export_ppm(args) -> Dict[str, Any]:
    dataset = load_dataset(args.dataset)
    if not 0 <= args.index < len(dataset):
        raise ParameterError(f"index must lie in [0, {len(dataset)}), got {args.index}")
    export_ppm(dataset, args.index, args.out)
    return {'out': args.out, 'label': int(dataset.labels[args.index])}


def cmd_train(args) -> Dict[str, Any]:
    config = load_run_config(args.config)
    if args.out:
        config = config.replace(train=replace(config.train, out_dir=args.out))
    result = run_training(config, resume_from=args.resume, run_id=args.run_id, stop_after=args.stop_after)
    summary = {'checkpoint': result.checkpoint_path, 'metrics': result.metrics_path, 'steps': result.steps_run}
    if result.last_metrics is not None:
        summary.update(loss=result.last_metrics.loss, kl=result.last_metrics.kl, h=result.last_metrics.h)
    if result.snapshots:
        summary.update(teacher_knn=result.snapshots[-1].teacher_knn, student_knn=result.snapshots[-1].student_knn)
    return summary


def cmd_eval_knn(args) -> Dict[str, Any]:
    model, _ = load_model(args.ckpt, args.params)
    layers = _layers(args.layers, model)
    train_bank = extract_features(model, load_dataset(args.train), layers, source=args.params)
    test_bank = extract_features(model, load_dataset(args.test, split='test'), layers, source=args.params)
    accuracy = knn_eval(train_bank, test_bank, args.k, args.tau)
    return _report(args, 'knn_accuracy', accuracy, k=args.k, tau=args.tau, layers=layers, params=args.params)


def cmd_eval_linear(args) -> Dict[str, Any]:
    model, _ = load_model(args.ckpt, args.params)
    layers = _layers(args.layers, model)
    train_bank = extract_features(model, load_dataset(args.train), layers, source=args.params)
    test_bank = extract_features(model, load_dataset(args.test, split='test'), layers, source=args.params)
    result = linear_probe(train_bank, test_bank, args.epochs, args.lr, args.batch_size, args.seed)
    return _report(args, 'linear_accuracy', result.accuracy, epochs=args.epochs, lr=args.lr,
                   layers=layers, params=args.params)


def cmd_eval_retrieval(args) -> Dict[str, Any]:
    model, _ = load_model(args.ckpt, args.params)
    layers = _layers(args.layers, model)
    bank = extract_features(model, load_dataset(args.bank), layers, source=args.params)
    queries = extract_features(model, load_dataset(args.queries, split='test'), layers, source=args.params)
    value = retrieval_map(bank, queries, load_relevance(args.relevance))
    return _report(args, 'retrieval_map', value, layers=layers, params=args.params)


def cmd_attn(args) -> Dict[str, Any]:
    model, _ = load_model(args.ckpt, args.params)
    cfg = model.vit_config
    layer = cfg.depth - 1 if args.layer is None else args.layer
    if not 0 <= layer < cfg.depth:
        raise ParameterError(f"--layer must lie in [0, {cfg.depth}), got {layer}")
    if not 0 <= args.head < cfg.heads:
        raise ParameterError(f"--head must lie in [0, {cfg.heads}), got {args.head}")

    image = _load_image(args.image, args.index)
    with nd.no_grad():
        out = model.backbone(image.images, collect_attn=True)
    record = next(r for r in out.attn if r.layer == layer and r.head == args.head)
    grid = cfg.grid_for(*image.image_shape[1:])
    row = cls_attention(record, 0)
    result = attention_mask(row, args.mass, grid, args.head, layer)

    write_pgm(args.out, result.mask)
    if args.map_out:
        write_pgm(args.map_out, row.reshape(grid))
    return {'out': args.out, 'grid': list(grid), 'kept_mass': result.kept_mass,
            'patches': int(result.mask.sum()), 'layer': layer, 'head': args.head}


def cmd_collapse_demo(args) -> Dict[str, Any]:
    config = load_run_config(args.config)
    if args.out:
        config = config.replace(train=replace(config.train, out_dir=args.out))
    summary = run_collapse_study(config, args.mode, args.steps)
    return {'mode': summary.mode, 'steps': summary.steps, 'final_h': summary.final_h,
            'final_kl': summary.final_kl, 'late_kl': summary.late_kl, 'late_kl_min': summary.late_kl_min,
            'log_k': summary.log_k, 'csv': summary.csv_path}


# Command registry - maps subcommand names to handlers
COMMAND_REGISTRY: Dict[str, Callable[[argparse.Namespace], Dict[str, Any]]] = {
    'gen-data': cmd_gen_data,
    'export-ppm': cmd_export_ppm,
    'train': cmd_train,
    'eval knn': cmd_eval_knn,
    'eval linear': cmd_eval_linear,
    'eval retrieval': cmd_eval_retrieval,
    'attn': cmd_attn,
    'collapse-demo': cmd_collapse_demo,
}


def _add_checkpoint_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--ckpt', required=True, help='DCK1 checkpoint')
    parser.add_argument('--params', choices=['teacher', 'student'], default='teacher',
                        help='Parameter set to evaluate (default: teacher)')
    parser.add_argument('--layers', type=int, default=None,
                        help=f'Concatenate the CLS output of the last N blocks (default: {CLS_LAYERS})')
    parser.add_argument('--report', help='Append the result to this JSON-lines report')


def build_parser() -> argparse.ArgumentParser:
    parser = CommandLineParser(
        prog='dino',
        description='Desk-scale self-distillation with no labels',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main_unified.py gen-data configs/toy_data.conf data/train.dsv
  python main_unified.py train --config configs/vit_toy.conf --out runs/toy
  python main_unified.py eval knn --ckpt runs/toy/final.dck --train data/train.dsv --test data/test.dsv
  python main_unified.py collapse-demo --mode no-sharpen
        """
    )
    parser.add_argument('--version', action='version', version=f'dino v{VERSION}')
    parser.add_argument('--log-level', default=os.getenv('DINO_LOG_LEVEL', 'WARNING'), type=str.upper,
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], help='Set logging level')
    parser.add_argument('--log-dir', default=os.getenv('DINO_LOG_DIR'), help='Rotating log file directory')
    parser.add_argument('--no-sentry', action='store_true', help='Disable Sentry error reporting')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', help='Render the toy dataset to a DSV1 file')
    p.add_argument('spec', help='toy.* spec file')
    p.add_argument('out', help='Output DSV1 file')
    p.add_argument('--split', choices=['train', 'test'], help='Override toy.split')

    p = sub.add_parser('export-ppm', help='Write one dataset image as PPM')
    p.add_argument('dataset')
    p.add_argument('index', type=int)
    p.add_argument('out')

    p = sub.add_parser('train', help='Train a student/teacher pair')
    p.add_argument('--config', required=True, help='Run config file')
    p.add_argument('--out', help='Override train.out_dir')
    p.add_argument('--resume', help='Continue from this checkpoint')
    p.add_argument('--stop-after', type=int, help='Stop once this many total steps have run')
    p.add_argument('--run-id', default='dino', help='Run identifier for logs')

    p = sub.add_parser('eval', help='Frozen-feature evaluation')
    evals = p.add_subparsers(dest='eval_command', required=True)
    e = evals.add_parser('knn', help='Weighted k-NN accuracy')
    _add_checkpoint_args(e)
    e.add_argument('--train', required=True)
    e.add_argument('--test', required=True)
    e.add_argument('--k', type=int, default=KNN_K)
    e.add_argument('--tau', type=float, default=KNN_TAU)

    e = evals.add_parser('linear', help='Linear probe accuracy')
    _add_checkpoint_args(e)
    e.add_argument('--train', required=True)
    e.add_argument('--test', required=True)
    e.add_argument('--epochs', type=int, default=100)
    e.add_argument('--lr', type=float, default=0.1)
    e.add_argument('--batch-size', type=int, default=64)
    e.add_argument('--seed', type=int, default=0)

    e = evals.add_parser('retrieval', help='Cosine retrieval mAP')
    _add_checkpoint_args(e)
    e.add_argument('--bank', required=True)
    e.add_argument('--queries', required=True)
    e.add_argument('--relevance', required=True, help='One line of relevant bank ids per query')

    p = sub.add_parser('attn', help='CLS attention mask as PGM')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--params', choices=['teacher', 'student'], default='teacher')
    p.add_argument('--image', required=True, help='PPM/PGM file or DSV1 dataset')
    p.add_argument('--index', type=int, default=0, help='Image index when --image is a dataset')
    p.add_argument('--layer', type=int, default=None, help='Block index (default: last)')
    p.add_argument('--head', type=int, default=0)
    p.add_argument('--mass', type=float, default=0.6)
    p.add_argument('--out', required=True, help='Mask PGM')
    p.add_argument('--map-out', help='Also write the attention weights as PGM')

    p = sub.add_parser('collapse-demo', help='Train with centering or sharpening disabled')
    p.add_argument('--mode', required=True, choices=list(COLLAPSE_MODES))
    p.add_argument('--config', default='configs/vit_toy.conf')
    p.add_argument('--steps', type=int, default=2000)
    p.add_argument('--out', help='Override train.out_dir')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns the process exit code"""
    parser = build_parser()
    args = parser.parse_args(argv)
    command = args.command if args.command != 'eval' else f'eval {args.eval_command}'

    configure_logging(
        run_id=getattr(args, 'run_id', None),
        log_level=args.log_level,
        log_dir=args.log_dir,
        sentry_dsn=None if args.no_sentry else os.getenv('SENTRY_DSN')
    )
    logger = get_logger(__name__)

    try:
        with LogContext(logger, command=command):
            result = COMMAND_REGISTRY[command](args)
    except Exception as e:
        return ErrorReporter.report_failure(command.replace(' ', '-'), e, vars(args))

    logger.info(f"{command} finished", extra={'command': command})
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == '__main__':
    sys.exit(main())
