# -*- coding: utf-8 -*-

"""
PFPN Configuration Module
This module provides the configuration settings for the pfpn toolkit.
"""

from pathlib import Path
import logging
import os

from dotenv import load_dotenv

from pfpn.utils import Utils

__all__ = ["Config"]

logger = logging.getLogger(__name__)


class Config:
    """
    PFPN Configuration Class

    This class contains the configuration settings for the toolkit. These are read from a
    .env style file (see `config.env.example`); every key falls back to a default, so
    `Config()` works without a file.

    Attributes:
        OUTPUT_DIR (Path): Root directory for demo runs and sweep results.
        SEED (int): Seed for the parameter stream and the toy scene generator.
        PFPN_THREADS (int): Default worker count for per-image parallelism.
        OUTPUT_FORMAT (str): Default CLI output format (json, csv or text).
        FPN_CHANNELS (int): Channel dimension shared by every pyramid level.
        BRANCH_WIDTH (int): Channel width of the semantic branch.
        AGGREGATION (str): How the per-level maps are merged (sum or concat).
        NUM_CLASSES (int): Number of stuff classes predicted by the branch.
        INCLUDE_OTHER_CLASS (bool): Add one extra `other` channel for thing pixels.
        GN_GROUPS (int): Group norm group count (capped at the branch width).
        GN_EPS (float): Group norm variance floor.
        SCORE_THRESHOLD (float): Instances scoring below this are dropped at fusion.
        KEEP_FRACTION (float): Minimum visible fraction for an instance to survive fusion.
        STUFF_AREA_MIN (int): Stuff segments smaller than this become void.
        # demo training
        TRAIN_STEPS (int): Gradient steps of the toy overfit run.
        LEARNING_RATE (float): Plain SGD step size.
        LAMBDA_I (float): Weight of the instance loss terms.
        LAMBDA_S (float): Weight of the semantic loss.
        SCENE_EXTENT (int): Side length of the square toy scenes, multiple of 32.
        SCENE_CLASSES (int): Stuff classes in the toy scenes.
        DEMO_WIDTH (int): Branch width used by the demo.
        LAMBDA_GRID (list): Values swept for both lambdas by the sweep runner.
    """

    AGGREGATIONS = ("sum", "concat")
    FORMATS = ("json", "csv", "text")

    def __init__(self, config_file=None, override=False) -> None:
        """
        PFPN Configuration Class Constructor

        Args:
            config_file (str): The path to the configuration file. Optional.
            override (bool): Flag to override variables already set in the environment.
        """
        if config_file is not None:
            if not Path(config_file).is_file():
                raise FileNotFoundError(f"The config file '{config_file}' does not exist.")
            load_dotenv(config_file, override=override)

        self.OUTPUT_DIR = Path(os.getenv("OUTPUT_DIR", "./output"))

        self.SEED = int(os.getenv("SEED", "0"))
        self.PFPN_THREADS = int(os.getenv("PFPN_THREADS", "1"))
        if self.PFPN_THREADS < 1:
            raise ValueError("PFPN_THREADS must be at least 1.")

        self.OUTPUT_FORMAT = os.getenv("OUTPUT_FORMAT", "text")
        if self.OUTPUT_FORMAT not in self.FORMATS:
            raise ValueError(f"OUTPUT_FORMAT must be one of {self.FORMATS}, got '{self.OUTPUT_FORMAT}'.")

        # branch architecture
        self.FPN_CHANNELS = int(os.getenv("FPN_CHANNELS", "256"))
        self.BRANCH_WIDTH = int(os.getenv("BRANCH_WIDTH", "128"))
        self.AGGREGATION = os.getenv("AGGREGATION", "sum")
        if self.AGGREGATION not in self.AGGREGATIONS:
            raise ValueError(f"AGGREGATION must be one of {self.AGGREGATIONS}, got '{self.AGGREGATION}'.")
        self.NUM_CLASSES = int(os.getenv("NUM_CLASSES", "53"))
        self.INCLUDE_OTHER_CLASS = Utils.parse_bool(os.getenv("INCLUDE_OTHER_CLASS", "True"))
        self.GN_GROUPS = int(os.getenv("GN_GROUPS", "32"))
        self.GN_EPS = float(os.getenv("GN_EPS", "1e-5"))
        if self.GN_EPS <= 0:
            raise ValueError("GN_EPS must be positive.")

        # fusion
        self.SCORE_THRESHOLD = float(os.getenv("SCORE_THRESHOLD", "0.5"))
        self.KEEP_FRACTION = float(os.getenv("KEEP_FRACTION", "0.5"))
        for key in ("SCORE_THRESHOLD", "KEEP_FRACTION"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ValueError(f"{key} must be within [0, 1].")
        self.STUFF_AREA_MIN = int(os.getenv("STUFF_AREA_MIN", "4096"))
        if self.STUFF_AREA_MIN < 0:
            raise ValueError("STUFF_AREA_MIN must be non-negative.")

        # demo training
        self.TRAIN_STEPS = int(os.getenv("TRAIN_STEPS", "500"))
        self.LEARNING_RATE = float(os.getenv("LEARNING_RATE", "0.1"))
        if self.TRAIN_STEPS < 1 or self.LEARNING_RATE <= 0:
            raise ValueError("TRAIN_STEPS must be at least 1 and LEARNING_RATE positive.")
        self.LAMBDA_I = float(os.getenv("LAMBDA_I", "1.0"))
        self.LAMBDA_S = float(os.getenv("LAMBDA_S", "1.0"))
        if self.LAMBDA_I < 0 or self.LAMBDA_S < 0:
            raise ValueError("LAMBDA_I and LAMBDA_S must be non-negative.")
        self.SCENE_EXTENT = int(os.getenv("SCENE_EXTENT", "64"))
        if self.SCENE_EXTENT % 32:
            raise ValueError("SCENE_EXTENT must be divisible by 32.")
        self.SCENE_CLASSES = int(os.getenv("SCENE_CLASSES", "4"))
        self.DEMO_WIDTH = int(os.getenv("DEMO_WIDTH", "32"))

        if os.getenv("LAMBDA_GRID") is None:
            self.LAMBDA_GRID = [0.5, 0.75, 1.0]
        else:
            self.LAMBDA_GRID = [float(value) for value in Utils.parse_params("LAMBDA_GRID")]

        logger.debug(f"using output dir: {self.OUTPUT_DIR}")
        logger.debug(f"using branch: width={self.BRANCH_WIDTH} aggregation={self.AGGREGATION} classes={self.NUM_CLASSES}")
