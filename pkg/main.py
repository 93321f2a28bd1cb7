import os
import sys
import json
import logging
import argparse
from dataclasses import replace

import pandas as pd
import torch
from dotenv import load_dotenv

# Fix Windows encoding issues
if sys.platform.startswith('win'):
    sys.stdout.reconfigure(encoding='utf-8', errors='replace')
    sys.stderr.reconfigure(encoding='utf-8', errors='replace')

# Load environment variables
load_dotenv()

from src.ablation import ablate_decoder, ablate_stride, benchmark_set_losses, evaluate_checkpoint, generate_images
from src.checkpoint import load_checkpoint, load_inference_model, restore_train_state
from src.config import Config, load_run_config, parse_override
from src.corruption import respace_schedule
from src.dataset import load_dataset, load_mask, load_png, save_png
from src.diffusion_core import build_process, fuzz_upper_bound, model_psi_outputs, verify_upper_bound
from src.errors import CtxDiffError, ParameterError
from src.sampler import InpaintTask, inpaint
from src.tokenizer import PaletteTokenizer
from src.trainer import Trainer
from src.visualizer import ResultVisualizer

EXIT_OK = 0
EXIT_BOUND_VIOLATED = 1


def setup_logging(output_dir=None):
    """Setup logging configuration: console plus a UTF-8 log file in the run directory"""
    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    # Configure root logger
    logger = logging.getLogger()
    logger.setLevel(Config.LOG_LEVEL.upper())

    # Clear any existing handlers
    for handler in logger.handlers[:]:
        logger.removeHandler(handler)
        handler.close()

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        file_handler = logging.FileHandler(os.path.join(output_dir, Config.LOG_FILENAME), encoding='utf-8')
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)


def _int_list(text):
    try:
        return [int(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='YAML or TOML run config')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='override a config value, e.g. context.stride=2')
    common.add_argument('--seed', type=int, help='random seed')
    common.add_argument('--out', help='output directory')

    parser = argparse.ArgumentParser(prog='ctxdiff', description='Desk-scale context-prediction diffusion')
    sub = parser.add_subparsers(dest='command', required=True)

    train = sub.add_parser('train', parents=[common], help='train a model')
    train.add_argument('--mode', choices=('continuous', 'discrete'))
    train.add_argument('--stride', type=int)
    train.add_argument('--steps', type=int)
    train.add_argument('--resume', help='checkpoint to resume from')

    sample = sub.add_parser('sample', parents=[common], help='draw samples from a checkpoint')
    sample.add_argument('--ckpt', required=True)
    sample.add_argument('--n', type=int, default=16)
    sample.add_argument('--steps', type=int, help='respaced number of sampling steps')

    paint = sub.add_parser('inpaint', parents=[common], help='fill the unknown region of an image')
    paint.add_argument('--ckpt', required=True)
    paint.add_argument('--image', required=True)
    paint.add_argument('--mask', required=True, help='single-channel image, nonzero = known')

    evaluate = sub.add_parser('eval', parents=[common], help='recompute metrics of a checkpoint')
    evaluate.add_argument('--ckpt', required=True)

    stride = sub.add_parser('ablate-stride', parents=[common], help='train one model per neighborhood stride')
    stride.add_argument('--strides', type=_int_list, default=[0, 1, 2, 3])
    stride.add_argument('--steps', type=int)

    decoder = sub.add_parser('ablate-decoder', parents=[common], help='feature vs distribution decoding')
    decoder.add_argument('--strides', type=_int_list, default=[1, 2, 3])
    decoder.add_argument('--steps', type=int)

    bound = sub.add_parser('verify-bound', parents=[common], help='check the mean-pooled upper bound')
    bound.add_argument('--fuzz', type=int, default=10000)
    bound.add_argument('--ckpt', help='also check a trained continuous checkpoint')

    bench = sub.add_parser('bench-setloss', parents=[common], help='time the set losses')
    bench.add_argument('--qs', type=_int_list, default=[2, 4, 8, 16])
    bench.add_argument('--repeats', type=int, default=20)
    return parser


def resolve_config(args):
    """Config file, then --set overrides, then the dedicated flags"""
    overrides = dict(parse_override(item) for item in args.overrides)
    for flag, key in (('mode', 'mode'), ('stride', 'context.stride'), ('seed', 'seed')):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    path = args.config
    if path is None and os.path.exists(Config.DEFAULT_CONFIG_PATH) and not getattr(args, 'ckpt', None):
        path = Config.DEFAULT_CONFIG_PATH
    cfg = load_run_config(path, overrides)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def checkpoint_config(args):
    """Run config for checkpoint commands: taken from the checkpoint unless --config pins one"""
    expected = resolve_config(args) if (args.config or args.overrides) else None
    record = load_checkpoint(args.ckpt, expected_config=expected)
    cfg = record.run_config
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = args.out or (os.path.dirname(args.ckpt) if not os.path.isdir(args.ckpt) else args.ckpt) or '.'
    return record, replace(cfg, output_dir=out)


def run_train(args):
    logger = logging.getLogger(__name__)
    cfg = resolve_config(args)
    setup_logging(cfg.output_dir)
    result = Trainer(cfg).run(steps=args.steps, resume=args.resume)
    logger.info("Artifacts in %s (checkpoint digest %s)", cfg.output_dir, result.checkpoint_digest[:16])
    return EXIT_OK


def run_sample(args):
    logger = logging.getLogger(__name__)
    record, cfg = checkpoint_config(args)
    setup_logging(cfg.output_dir)
    model, _ = load_inference_model(record)
    tokenizer = PaletteTokenizer.from_state(record.extra['tokenizer']) if cfg.mode == 'discrete' else None
    process = build_process(cfg)
    if args.steps and cfg.mode == 'continuous':
        process = respace_schedule(process, args.steps, cfg.schedule.variance)
    images = generate_images(model, cfg, args.n, cfg.seed, tokenizer, process)
    ResultVisualizer.save_image_grid(images, os.path.join(cfg.output_dir, 'samples.png'), record.config_hash)
    torch.save({'images': images, 'config_hash': record.config_hash, 'seed': cfg.seed}, os.path.join(cfg.output_dir, 'samples.pt'))
    logger.info("✓ %d samples written to %s", args.n, cfg.output_dir)
    return EXIT_OK


def run_inpaint(args):
    logger = logging.getLogger(__name__)
    record, cfg = checkpoint_config(args)
    setup_logging(cfg.output_dir)
    model, _ = load_inference_model(record)
    image = load_png(args.image, cfg.model.channels, cfg.data.size)
    mask = load_mask(args.mask, cfg.data.size)
    task = InpaintTask(image=image, mask=mask, T_inpaint=cfg.inpaint.T, r=cfg.inpaint.r, j=cfg.inpaint.j)
    generator = torch.Generator().manual_seed(cfg.seed)
    result = inpaint(model, task, generator, build_process(cfg), cfg.schedule.clip_each_step)
    save_png(result, os.path.join(cfg.output_dir, 'inpainted.png'))
    if mask.any():
        error = float((result - image).abs()[:, mask].max())
        logger.info("Known-region max abs error: %.3g", error)
    return EXIT_OK


def run_eval(args):
    logger = logging.getLogger(__name__)
    record, cfg = checkpoint_config(args)
    setup_logging(cfg.output_dir)
    dataset = load_dataset(cfg.data, cfg.seed, cfg.model.channels)
    report = evaluate_checkpoint(args.ckpt, dataset, record.run_config)
    ResultVisualizer.save_report(report.to_dict(), os.path.join(cfg.output_dir, 'metrics.json'))
    logger.info("fid_proxy=%.6g (config %s)", report.fid_proxy, report.config_hash)
    return EXIT_OK


def _print_reports(reports):
    df = pd.DataFrame([r.to_row() for r in reports])
    print("\n" + "=" * 50)
    print(ResultVisualizer.summarize(df, ['label', 'status', 'fid_proxy', 'seconds_per_step',
                                          'params_feature_head', 'params_distribution_head', 'outputs_feature_head',
                                          'outputs_distribution_head']))
    print("=" * 50)


def run_ablate_stride(args):
    cfg = resolve_config(args)
    setup_logging(cfg.output_dir)
    _print_reports(ablate_stride(cfg, args.strides, args.steps))
    return EXIT_OK


def run_ablate_decoder(args):
    cfg = resolve_config(args)
    setup_logging(cfg.output_dir)
    _print_reports(ablate_decoder(cfg, args.strides, args.steps))
    return EXIT_OK


def run_verify_bound(args):
    logger = logging.getLogger(__name__)
    cfg = resolve_config(args) if not args.ckpt else checkpoint_config(args)[1]
    setup_logging(cfg.output_dir)
    summary = fuzz_upper_bound(args.fuzz, seed=cfg.seed)
    ok = summary['violations'] == 0 and summary['max_equality_gap'] <= 1e-9

    if args.ckpt:
        record = load_checkpoint(args.ckpt)
        state = restore_train_state(record)
        if state.model.context_head is None or cfg.mode != 'continuous':
            raise ParameterError("verify-bound --ckpt needs a continuous checkpoint with a context head")
        dataset = load_dataset(cfg.data, cfg.seed, cfg.model.channels)
        schedule = build_process(cfg)
        generator = torch.Generator().manual_seed(cfg.seed)
        checks = []
        for image in dataset.images[:8]:
            t = int(torch.randint(1, schedule.T + 1, (1,), generator=generator))
            noise = torch.randn(image.shape, generator=generator)
            psi = model_psi_outputs(state.model, schedule, image, t, noise)
            checks.append(verify_upper_bound(image.permute(1, 2, 0).double(), psi.double()))
        summary['checkpoint_checks'] = len(checks)
        summary['checkpoint_violations'] = sum(not c.holds for c in checks)
        ok = ok and summary['checkpoint_violations'] == 0

    summary['holds'] = ok
    ResultVisualizer.save_report(summary, os.path.join(cfg.output_dir, 'verify_bound.json'))
    print(json.dumps(summary, indent=2))
    if not ok:
        logger.error("❌ Upper bound violated")
        return EXIT_BOUND_VIOLATED
    logger.info("✓ Upper bound holds on all %d fuzzed cases", summary['cases'])
    return EXIT_OK


def run_bench_setloss(args):
    cfg = resolve_config(args)
    setup_logging(cfg.output_dir)
    df = benchmark_set_losses(args.qs, repeats=args.repeats, seed=cfg.seed)
    ResultVisualizer.save_results(df, os.path.join(cfg.output_dir, 'bench_setloss.csv'))
    print(df.to_string(index=False))
    return EXIT_OK


COMMANDS = {
    'train': run_train,
    'sample': run_sample,
    'inpaint': run_inpaint,
    'eval': run_eval,
    'ablate-stride': run_ablate_stride,
    'ablate-decoder': run_ablate_decoder,
    'verify-bound': run_verify_bound,
    'bench-setloss': run_bench_setloss,
}


def main(argv=None):
    """Parse arguments, dispatch the subcommand and map errors to exit codes"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    setup_logging()
    logger = logging.getLogger(__name__)
    try:
        Config.validate_config()
        return COMMANDS[args.command](args)
    except CtxDiffError as e:
        logger.error(f"❌ {e.category}: {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"Error during {args.command}: {e}")
        raise


if __name__ == "__main__":
    sys.exit(main())
