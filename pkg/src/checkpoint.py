"""Versioned checkpoints holding every parameter namespace, the RNG streams and the run config.

``torch.save`` output is not guaranteed to be byte-stable across saves, so
round-trip identity is witnessed by ``checkpoint_digest``, a SHA-256 over the
canonical config and the raw bytes of every tensor in sorted key order.
"""
import os
import json
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Optional

import torch

from .config import Config, RunConfig
from .diffusion_core import build_model, init_train_state
from .errors import CheckpointError, CheckpointVersionError, ConfigMismatchError

logger = logging.getLogger(__name__)

CHECKPOINT_FILENAME = 'ckpt.pt'


@dataclass
class CheckpointRecord:
    version: int
    step: int
    denoiser: dict
    optimizer: dict
    rng_state: dict
    config: dict
    context_head: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    @property
    def run_config(self):
        return RunConfig.from_dict(self.config)

    @property
    def config_hash(self):
        return self.run_config.config_hash()

    def to_payload(self):
        return {
            'version': self.version,
            'step': self.step,
            'namespaces': {
                'denoiser': self.denoiser,
                'context_head': self.context_head,
                'optimizer': self.optimizer,
            },
            'rng_state': self.rng_state,
            'config': self.config,
            'extra': self.extra,
        }


def record_from_state(state, cfg, extra=None):
    head = state.model.context_head
    return CheckpointRecord(
        version=Config.CHECKPOINT_VERSION,
        step=state.step,
        denoiser=state.model.denoiser.state_dict(),
        context_head=None if head is None else head.state_dict(),
        optimizer=state.optimizer.state_dict(),
        rng_state=state.rng.get_state(),
        config=cfg.to_dict(),
        extra=dict(extra or {}),
    )


def write_checkpoint(record, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save(record.to_payload(), path)
    logger.info("✓ Checkpoint saved to %s (step %d)", path, record.step)
    return path


def save_checkpoint(state, cfg, path, extra=None):
    record = record_from_state(state, cfg, extra)
    write_checkpoint(record, path)
    return record


def load_checkpoint(path, expected_config=None):
    """Read a checkpoint; rejects other format versions and (optionally) a different config hash."""
    if os.path.isdir(path):
        path = os.path.join(path, CHECKPOINT_FILENAME)
    try:
        payload = torch.load(path, map_location='cpu', weights_only=True)
    except FileNotFoundError as e:
        raise CheckpointError(f"Checkpoint not found: {path}") from e
    except Exception as e:
        raise CheckpointError(f"Could not read checkpoint {path}: {e}") from e

    if not isinstance(payload, dict) or 'version' not in payload:
        raise CheckpointError(f"{path} is not a checkpoint")
    if payload['version'] != Config.CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {payload['version']} != supported version {Config.CHECKPOINT_VERSION}"
        )
    namespaces = payload['namespaces']
    record = CheckpointRecord(
        version=payload['version'],
        step=payload['step'],
        denoiser=namespaces['denoiser'],
        context_head=namespaces.get('context_head'),
        optimizer=namespaces['optimizer'],
        rng_state=payload['rng_state'],
        config=payload['config'],
        extra=payload.get('extra') or {},
    )
    if expected_config is not None and record.config_hash != expected_config.config_hash():
        raise ConfigMismatchError(
            f"checkpoint config hash {record.config_hash} != requested config hash {expected_config.config_hash()}"
        )
    logger.info("✓ Checkpoint loaded from %s (step %d)", path, record.step)
    return record


def restore_train_state(record, cfg=None):
    """Rebuild a TrainState that continues exactly where the checkpoint left off."""
    cfg = cfg or record.run_config
    state = init_train_state(cfg)
    state.model.denoiser.load_state_dict(record.denoiser)
    if state.model.context_head is not None:
        if record.context_head is None:
            raise CheckpointError("checkpoint has no context_head namespace for a context-equipped config")
        state.model.context_head.load_state_dict(record.context_head)
    state.optimizer.load_state_dict(record.optimizer)
    state.rng.set_state(record.rng_state)
    state.step = record.step
    return state


def load_inference_model(record):
    """Denoiser only: the context head namespace is skipped."""
    cfg = record.run_config
    model = build_model(cfg)
    model.denoiser.load_state_dict(record.denoiser)
    model.context_head = None
    model.eval()
    return model, cfg


def _flatten(prefix, value, tensors, scalars):
    if torch.is_tensor(value):
        tensors.append((prefix, value))
    elif isinstance(value, dict):
        for key in sorted(value, key=str):
            _flatten(f"{prefix}/{key}", value[key], tensors, scalars)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _flatten(f"{prefix}/{i}", item, tensors, scalars)
    else:
        scalars[prefix] = value


def checkpoint_digest(record):
    """Content hash of a checkpoint record (hex SHA-256)."""
    tensors, scalars = [], {}
    payload = record.to_payload()
    for namespace in ('namespaces', 'rng_state', 'extra'):
        _flatten(namespace, payload[namespace], tensors, scalars)
    digest = hashlib.sha256()
    header = {'version': record.version, 'step': record.step, 'config': record.config, 'scalars': scalars}
    digest.update(json.dumps(header, sort_keys=True, default=str).encode('utf-8'))
    for name, tensor in tensors:
        data = tensor.detach().cpu().contiguous()
        digest.update(f"{name}:{data.dtype}:{tuple(data.shape)}".encode('utf-8'))
        digest.update(data.reshape(-1).view(torch.uint8).numpy().tobytes())
    return digest.hexdigest()
