# -*- coding: utf-8 -*-

import itertools
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from dotenv import dotenv_values  # noqa: E402

__all__ = ["Utils"]

logger = logging.getLogger(__name__)


class Utils:
    """
    Utils: Utility Functions for pfpn

    This class provides helpers for parsing settings, plotting loss curves, logging setup and
    order-preserving parallel maps.
    """

    @staticmethod
    def parse_params(feature_name):
        # Fetch the feature_name string from the environment
        params = os.getenv(feature_name, "")

        # Normalize the string by replacing newlines with commas and stripping unwanted spaces
        params = params.replace("\n", ",").replace(" ", "")

        return [param for param in params.split(",") if param]

    @staticmethod
    def parse_extent(text: str) -> Tuple[int, int]:
        """
        Parse an image extent written as HxW (e.g. 1152x1728).

        Raises:
            ValueError: if the text is not two positive integers separated by x.
        """
        match = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", str(text))
        if match is None:
            raise ValueError(f"malformed extent '{text}', expected HxW")
        height, width = int(match.group(1)), int(match.group(2))
        if height < 1 or width < 1:
            raise ValueError(f"extent must be positive, got '{text}'")
        return height, width

    @staticmethod
    def parse_bool(value) -> bool:
        return str(value).strip().lower() in ("true", "1", "yes")

    @staticmethod
    def read_key_values(path) -> Dict[str, str]:
        """Read a key = value file with the same syntax as config.env."""
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"The file '{path}' does not exist.")
        return {key: value for key, value in dotenv_values(path).items() if value is not None}

    @staticmethod
    def write_key_values(path, values: Mapping[str, object]) -> None:
        with open(path, "w") as f:
            for key, value in values.items():
                f.write(f"{key}={value}\n")

    @staticmethod
    def configure_logging(verbose: int = 0) -> None:
        level = logging.DEBUG if verbose else logging.INFO
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root = logging.getLogger("pfpn")
        root.handlers = [handler]
        root.setLevel(level)
        root.propagate = False

    @staticmethod
    def parallel_map(func: Callable, items: Iterable, threads: int = 1) -> List:
        """Apply `func` to every item, in order; `threads` > 1 uses a thread pool."""
        return list(Utils.imap(func, items, threads))

    @staticmethod
    def imap(func: Callable, items: Iterable, threads: int = 1, chunk_size: int = 8) -> Iterator:
        """
        Lazy, order-preserving map. Items are pulled in chunks of threads * chunk_size, so
        only one chunk of inputs and results is alive at a time.
        """
        if threads <= 1:
            for item in items:
                yield func(item)
            return
        items = iter(items)
        with ThreadPoolExecutor(max_workers=threads) as executor:
            while True:
                chunk = list(itertools.islice(items, threads * chunk_size))
                if not chunk:
                    return
                yield from executor.map(func, chunk)

    @staticmethod
    def plot_metrics(metrics, history, steps, save_dir, file_name="training.png"):
        """
        Plot the per-step training curves.

        Args:
            metrics: List of keys of `history` to plot, one panel each.
            history: Mapping of metric name to a list of per-step values.
            steps: Number of steps.
            save_dir: Directory to save the plot.

        Returns:
            Path of the written figure.
        """
        fig, ax = plt.subplots(nrows=len(metrics), sharex=True, figsize=(10, len(metrics) * 3), squeeze=False)
        colors = ["#1f77b4", "#ff7f0e", "red", "green", "purple", "orange", "brown", "pink", "gray", "olive", "cyan"]
        for i, metric in enumerate(metrics):
            if metric not in history:
                logger.warning(f"skipping {metric}: not recorded")
                continue
            ax[i, 0].plot(range(1, len(history[metric]) + 1), history[metric], color=colors[i % len(colors)],
                          label=f"Training {metric.upper()}")
            ax[i, 0].set_ylabel(metric.upper())
            ax[i, 0].legend()

        ax[-1, 0].set_xlim(1, max(steps, 1))
        ax[-1, 0].set_xlabel("Step")
        path = Path(save_dir) / file_name
        fig.savefig(path, dpi=100)
        plt.close(fig)
        return path
