import os
import json
import logging

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from .dataset import VALUE_MAPPING, to_uint8

logger = logging.getLogger(__name__)


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


class ResultVisualizer:
    @staticmethod
    def plot_loss_curve(records, save_path=None):
        """Plot point, context and total loss against the training step"""
        df = records if isinstance(records, pd.DataFrame) else pd.DataFrame(records)
        plt.figure(figsize=(8, 5))
        for column, color in (('total', 'black'), ('point_term', 'skyblue'), ('context_term', 'salmon')):
            if column in df and not df.empty:
                plt.plot(df['step'], df[column], label=column, color=color)
        plt.title('Training Loss')
        plt.xlabel('Step')
        plt.ylabel('Loss')
        plt.yscale('log')
        plt.legend()
        plt.tight_layout()

        if save_path:
            _ensure_parent(save_path)
            plt.savefig(save_path)
            logger.info(f"✓ Loss curve saved to {save_path}")
        plt.close()

    @staticmethod
    def image_grid(images, nrow=None):
        """Tile (N, C, H, W) images in [-1, 1] into one uint8 array with a 1px border."""
        n, c, h, w = images.shape
        nrow = nrow or int(np.ceil(np.sqrt(n)))
        ncol = int(np.ceil(n / nrow))
        grid = np.zeros((c, ncol * (h + 1) + 1, nrow * (w + 1) + 1), dtype=np.uint8)
        pixels = to_uint8(images)
        for i in range(n):
            row, col = divmod(i, nrow)
            y, x = 1 + row * (h + 1), 1 + col * (w + 1)
            grid[:, y:y + h, x:x + w] = pixels[i]
        return grid

    @staticmethod
    def save_image_grid(images, save_path, config_hash='', nrow=None):
        """Write an image grid PNG plus a JSON sidecar carrying the config hash"""
        from PIL import Image

        grid = ResultVisualizer.image_grid(images, nrow)
        _ensure_parent(save_path)
        if grid.shape[0] == 1:
            Image.fromarray(grid[0]).save(save_path, format='PNG')
        else:
            Image.fromarray(np.ascontiguousarray(np.transpose(grid, (1, 2, 0)))).save(save_path, format='PNG')
        sidecar = os.path.splitext(save_path)[0] + '.json'
        with open(sidecar, 'w', encoding='utf-8') as f:
            json.dump({'config_hash': config_hash, 'count': int(images.shape[0]), 'value_mapping': VALUE_MAPPING}, f, indent=2)
        logger.info(f"✓ Image grid saved to {save_path}")

    @staticmethod
    def plot_stride_ablation(df, save_path=None):
        """Bars for FID proxy per stride, line for per-step time"""
        ok = df[df['status'] == 'ok']
        fig, ax = plt.subplots(figsize=(8, 5))
        labels = ok['label'].tolist()
        ax.bar(labels, ok['fid_proxy'], color='skyblue')
        ax.set_xlabel('Run')
        ax.set_ylabel('FID proxy')
        ax2 = ax.twinx()
        ax2.plot(labels, ok['seconds_per_step'], color='salmon', marker='o')
        ax2.set_ylabel('Seconds per step')
        ax.set_title('Stride Ablation')
        fig.tight_layout()

        if save_path:
            _ensure_parent(save_path)
            fig.savefig(save_path)
            logger.info(f"✓ Plot saved to {save_path}")
        plt.close(fig)

    @staticmethod
    def save_results(df, filename='results.csv'):
        """Save results to CSV"""
        _ensure_parent(filename)
        df.to_csv(filename, index=False)
        logger.info(f"✓ Results saved to {filename}")

    @staticmethod
    def save_report(report, filename):
        """Save a JSON report; the pixel value mapping is always part of the header"""
        payload = dict(report)
        payload.setdefault('value_mapping', VALUE_MAPPING)
        _ensure_parent(filename)
        with open(filename, 'w', encoding='utf-8') as f:
            json.dump(payload, f, indent=2, sort_keys=True, default=str)
        logger.info(f"✓ Report saved to {filename}")

    @staticmethod
    def summarize(df, columns):
        """Compact text table for the console"""
        present = [c for c in columns if c in df]
        return df[present].to_string(index=False)
