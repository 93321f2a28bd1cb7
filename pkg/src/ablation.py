"""Evaluation and ablation runners: stride sweep, decoder comparison, set-loss timing."""
import os
import time
import logging
import statistics
from dataclasses import replace

import numpy as np
import pandas as pd
import torch

from .checkpoint import checkpoint_digest, load_checkpoint, load_inference_model
from .context_decoder import param_count
from .corruption import respace_schedule
from .dataset import load_dataset
from .diffusion_core import build_process, context_head_config
from .denoiser import count_parameters
from .errors import CtxDiffError
from .metrics import MetricsReport, fid_proxy
from .sampler import ancestral_sample_continuous, sample_discrete_batch
from .set_losses import batched_set_loss
from .tokenizer import PaletteTokenizer
from .trainer import Trainer
from .visualizer import ResultVisualizer

logger = logging.getLogger(__name__)

SET_LOSS_KINDS = ('hungarian', 'chamfer', 'sinkhorn')


def sampling_process(cfg):
    process = build_process(cfg)
    if cfg.mode == 'continuous' and cfg.eval.sample_steps:
        process = respace_schedule(process, cfg.eval.sample_steps, cfg.schedule.variance)
    return process


def generate_images(model, cfg, n, seed, tokenizer=None, process=None):
    """n samples as (n, C, H, W) images in [-1, 1]."""
    generator = torch.Generator().manual_seed(seed)
    size = cfg.data.size
    process = process if process is not None else sampling_process(cfg)
    if cfg.mode == 'continuous':
        return ancestral_sample_continuous(model, (n, cfg.model.channels, size, size), generator, process,
                                           cfg.schedule.clip_each_step)
    tokens = sample_discrete_batch(model, n, size, size, generator, process)
    return tokenizer.detokenize(tokens)


def head_param_counts(cfg, stride=None):
    """Parameter counts of both decoder variants at ``stride`` (zero for stride 0)."""
    counts = {}
    for variant in ('feature', 'distribution'):
        head_cfg = context_head_config(cfg, stride=stride, variant=variant)
        counts[f'{variant}_head'] = 0 if head_cfg is None else param_count(head_cfg)
    return counts


def head_output_widths(cfg, stride=None):
    """Decoded values per position and step: K_n * d for feature heads, q * d for distribution heads."""
    widths = {}
    for variant in ('feature', 'distribution'):
        head_cfg = context_head_config(cfg, stride=stride, variant=variant)
        if head_cfg is None:
            widths[f'{variant}_head'] = 0
        elif variant == 'feature':
            widths[f'{variant}_head'] = head_cfg.k_n * head_cfg.d
        else:
            widths[f'{variant}_head'] = cfg.context.q * head_cfg.d
    return widths


def evaluate_checkpoint(path, dataset, cfg=None, label='eval', records=None, seconds_per_step=None):
    """Recompute the metrics of a stored checkpoint; same checkpoint and seeds give the same report."""
    record = load_checkpoint(path, expected_config=cfg)
    model, run_cfg = load_inference_model(record)
    tokenizer = None
    if run_cfg.mode == 'discrete':
        tokenizer = PaletteTokenizer.from_state(record.extra['tokenizer'])

    n = run_cfg.eval.n_samples
    fake = generate_images(model, run_cfg, n, run_cfg.seed + 17, tokenizer)
    real = dataset.images[:n] if len(dataset) >= n else dataset.images
    fid = fid_proxy(real, fake, run_cfg.eval.extractor_seed, run_cfg.eval.feature_dim, min_images=min(n, len(real)),
                    details=True)

    counts = {'denoiser': count_parameters(model.denoiser)}
    counts.update(head_param_counts(run_cfg))
    curve = [] if records is None or len(records) == 0 else records.to_dict('records')
    report = MetricsReport(
        label=label,
        config=run_cfg.to_dict(),
        config_hash=run_cfg.config_hash(),
        fid_proxy=fid.value,
        fid_regularized=fid.regularized,
        seconds_per_step=seconds_per_step,
        param_counts=counts,
        head_outputs=head_output_widths(run_cfg),
        loss_curve=curve,
        checkpoint_digest=checkpoint_digest(record),
    )
    return report.validate()


def run_variant(cfg, label, dataset, steps=None):
    """Train and evaluate one configuration; failures are reported instead of raised."""
    run_cfg = replace(cfg, output_dir=os.path.join(cfg.output_dir, label))
    try:
        result = Trainer(run_cfg, dataset).run(steps=steps)
        report = evaluate_checkpoint(result.checkpoint_path, dataset, run_cfg, label=label,
                                     records=result.records, seconds_per_step=result.seconds_per_step)
    except CtxDiffError as e:
        logger.error("Run %s failed: %s: %s", label, e.category, e)
        counts = head_param_counts(run_cfg)
        report = MetricsReport(label=label, config=run_cfg.to_dict(), config_hash=run_cfg.config_hash(),
                               param_counts=counts, head_outputs=head_output_widths(run_cfg), status='failed',
                               error=f"{e.category}: {e}")
    ResultVisualizer.save_report(report.to_dict(), os.path.join(run_cfg.output_dir, 'metrics.json'))
    return report


def reports_table(reports):
    return pd.DataFrame([report.to_row() for report in reports])


def _load_shared_dataset(cfg):
    return load_dataset(cfg.data, cfg.seed, cfg.model.channels)


def ablate_stride(cfg, strides=(0, 1, 2, 3), steps=None, dataset=None):
    """One run per stride (0 = plain backbone) under the same seed and budget."""
    dataset = dataset if dataset is not None else _load_shared_dataset(cfg)
    reports = []
    for stride in strides:
        stride_cfg = cfg.with_overrides({'context.stride': stride})
        stride_cfg = replace(stride_cfg, output_dir=cfg.output_dir)
        reports.append(run_variant(stride_cfg, f'stride{stride}', dataset, steps))
    df = reports_table(reports)
    ResultVisualizer.save_results(df, os.path.join(cfg.output_dir, 'ablate_stride.csv'))
    ResultVisualizer.save_report({'runs': [r.to_dict() for r in reports]}, os.path.join(cfg.output_dir, 'ablate_stride.json'))
    if (df['status'] == 'ok').any():
        ResultVisualizer.plot_stride_ablation(df, os.path.join(cfg.output_dir, 'ablate_stride.png'))
    logger.info("✓ Stride ablation finished: %d runs", len(reports))
    return reports


def ablate_decoder(cfg, strides=(1, 2, 3), steps=None, dataset=None):
    """Feature vs distribution decoding at each stride under identical budgets."""
    dataset = dataset if dataset is not None else _load_shared_dataset(cfg)
    reports = []
    for stride in strides:
        for variant in ('feature', 'distribution'):
            variant_cfg = cfg.with_overrides({'context.stride': stride, 'context.decoder': variant})
            variant_cfg = replace(variant_cfg, output_dir=cfg.output_dir)
            reports.append(run_variant(variant_cfg, f'{variant}-stride{stride}', dataset, steps))
    df = reports_table(reports)
    ResultVisualizer.save_results(df, os.path.join(cfg.output_dir, 'ablate_decoder.csv'))
    ResultVisualizer.save_report({'runs': [r.to_dict() for r in reports]}, os.path.join(cfg.output_dir, 'ablate_decoder.json'))
    logger.info("✓ Decoder ablation finished: %d runs", len(reports))
    return reports


def benchmark_set_losses(qs=(2, 4, 8, 16), d=2, repeats=20, seed=0, n_sets=64, kinds=SET_LOSS_KINDS):
    """Median seconds per batched evaluation for each set loss and set size."""
    generator = torch.Generator().manual_seed(seed)
    rows = []
    for q in qs:
        targets = torch.randn(n_sets, q, d, generator=generator, dtype=torch.float64)
        preds = torch.randn(n_sets, q, d, generator=generator, dtype=torch.float64)
        for kind in kinds:
            timings = []
            for _ in range(repeats):
                start = time.perf_counter()
                batched_set_loss(targets, preds, kind=kind)
                timings.append(time.perf_counter() - start)
            rows.append({'q': q, 'loss': kind, 'median_seconds': statistics.median(timings),
                         'min_seconds': float(np.min(timings))})
    df = pd.DataFrame(rows)
    logger.info("✓ Set-loss benchmark: %d configurations", len(df))
    return df
