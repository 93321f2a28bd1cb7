"""Training loop: batches, structured step records, periodic checkpoints and resume."""
import os
import logging
import statistics
from dataclasses import dataclass
from typing import Optional

import pandas as pd

from .checkpoint import CHECKPOINT_FILENAME, checkpoint_digest, load_checkpoint, restore_train_state, save_checkpoint
from .config import save_run_config
from .dataset import load_dataset
from .diffusion_core import init_train_state, timed_train_step
from .errors import DivergenceError
from .tokenizer import PaletteTokenizer
from .visualizer import ResultVisualizer

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    state: object
    records: pd.DataFrame
    checkpoint_path: Optional[str]
    checkpoint_digest: str
    seconds_per_step: float
    tokenizer: Optional[PaletteTokenizer] = None


class Trainer:
    def __init__(self, cfg, dataset=None):
        self.cfg = cfg
        self.dataset = dataset if dataset is not None else load_dataset(cfg.data, cfg.seed, cfg.model.channels)
        self.tokenizer = None
        if cfg.mode == 'discrete':
            self.tokenizer = PaletteTokenizer(cfg.model.num_tokens, cfg.seed).fit(self.dataset.images)
        self.records = []

    @property
    def checkpoint_path(self):
        return os.path.join(self.cfg.output_dir, CHECKPOINT_FILENAME)

    def prepare_batch(self, images):
        if self.tokenizer is not None:
            return self.tokenizer.quantize(images)
        return images

    def _extra(self):
        return {'tokenizer': self.tokenizer.to_state()} if self.tokenizer is not None else {}

    def _initial_state(self, resume):
        if not resume:
            return init_train_state(self.cfg)
        record = load_checkpoint(resume, expected_config=self.cfg)
        if self.tokenizer is not None and record.extra.get('tokenizer'):
            self.tokenizer = PaletteTokenizer.from_state(record.extra['tokenizer'])
        logger.info("Resuming from step %d", record.step)
        return restore_train_state(record, self.cfg)

    def run(self, steps=None, resume=None, save=True):
        """Train for ``steps`` more steps (default ``train.steps``) and return the run summary."""
        cfg = self.cfg
        steps = cfg.train.steps if steps is None else steps
        state = self._initial_state(resume)
        if save:
            os.makedirs(cfg.output_dir, exist_ok=True)
            save_run_config(cfg, os.path.join(cfg.output_dir, 'config.yaml'))

        logger.info("Starting %s training: %d steps, stride=%d, decoder=%s",
                    cfg.mode, steps, cfg.context.stride, cfg.context.decoder)
        timings = []
        for _ in range(steps):
            batch = self.prepare_batch(self.dataset.batch_for_step(state.step))
            try:
                state, breakdown, seconds = timed_train_step(state, batch, cfg)
            except DivergenceError:
                logger.error("Training diverged at step %d; keeping the last saved checkpoint", state.step + 1)
                raise
            timings.append(seconds)
            record = {'step': state.step, 't_mean': float(breakdown.t.float().mean()), **breakdown.as_record(),
                      'wall_clock': seconds}
            self.records.append(record)
            if state.step % cfg.train.log_every == 0:
                logger.info(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in record.items()))
            if save and state.step % cfg.train.checkpoint_every == 0:
                save_checkpoint(state, cfg, self.checkpoint_path, self._extra())

        records = pd.DataFrame(self.records)
        digest, path = '', None
        if save:
            record = save_checkpoint(state, cfg, self.checkpoint_path, self._extra())
            digest, path = checkpoint_digest(record), self.checkpoint_path
            if not records.empty:
                ResultVisualizer.save_results(records, os.path.join(cfg.output_dir, 'losses.csv'))
                ResultVisualizer.plot_loss_curve(records, os.path.join(cfg.output_dir, 'loss_curve.png'))
        seconds_per_step = statistics.median(timings) if timings else 0.0
        logger.info("✓ Training finished at step %d (%.4fs/step)", state.step, seconds_per_step)
        return TrainResult(state=state, records=records, checkpoint_path=path, checkpoint_digest=digest,
                           seconds_per_step=seconds_per_step, tokenizer=self.tokenizer)


def train(cfg, steps=None, resume=None, dataset=None, save=True):
    return Trainer(cfg, dataset).run(steps=steps, resume=resume, save=save)
