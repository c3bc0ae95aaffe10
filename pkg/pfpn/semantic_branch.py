# -*- coding: utf-8 -*-

"""
semantic_branch.py: FPN Top-Down Pathway and Semantic Segmentation Branch

The top-down pathway turns a bottom-up pyramid (scales 1/4 to 1/32, any channel counts)
into four maps sharing one channel dimension. The semantic branch brings each level to
1/4 scale through conv / group norm / ReLU / 2x upsample stages (0, 1, 2, 3 upsamples
for 1/4 ... 1/32), merges the four maps by sum or concat, classifies them with a 1x1
conv, upsamples 4x and applies a per-pixel softmax.

Levels are keyed by the scale denominator: 4, 8, 16 and 32.
"""

import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from pfpn.exceptions import ContractError, DatasetFileError, DatasetFormatError
from pfpn.tensor_core import (
    ConvLayerSpec,
    ConvParams,
    Graph,
    GroupNormParams,
    NormLayerSpec,
    Rng,
    Tensor,
    bilinear_upsample,
    channel_concat,
    conv2d,
    elementwise_sum,
    group_norm,
    init_params,
    relu,
    softmax_channels,
)
from pfpn.utils import Utils

__all__ = [
    "SCALES",
    "PyramidLevels",
    "BranchConfig",
    "FPNTopDown",
    "SemanticBranch",
    "fpn_topdown",
    "build_branch",
]

logger = logging.getLogger(__name__)

SCALES = (4, 8, 16, 32)

CONFIG_FILE = "branch.env"
MANIFEST_FILE = "manifest.txt"


def _upsample_stages(scale: int) -> int:
    return int(math.log2(scale)) - 2


@dataclass
class PyramidLevels:
    """
    Four feature maps at scales 1/4, 1/8, 1/16 and 1/32 sharing one channel count.

    Attributes:
        levels (dict): Scale denominator -> Tensor.
        channel_dim (int): Channels of every level.
    """

    levels: Dict[int, Tensor]
    channel_dim: int = 256

    def __post_init__(self) -> None:
        if sorted(self.levels) != list(SCALES):
            raise ContractError(f"pyramid must provide scales {SCALES}, got {sorted(self.levels)}")
        for scale, tensor in self.levels.items():
            if tensor.c != self.channel_dim:
                raise ContractError(
                    f"pyramid level 1/{scale} has {tensor.c} channels, expected {self.channel_dim}"
                )
        _check_halving(self.levels)

    def __getitem__(self, scale: int) -> Tensor:
        return self.levels[scale]

    @property
    def batch(self) -> int:
        return self.levels[4].n

    @property
    def image_extent(self) -> Tuple[int, int]:
        return self.levels[4].h * 4, self.levels[4].w * 4

    @classmethod
    def from_arrays(cls, arrays: Mapping[int, np.ndarray], dtype=np.float32) -> "PyramidLevels":
        levels = {scale: Tensor(arrays[scale], dtype=dtype, name=f"p{scale}") for scale in arrays}
        channels = {tensor.c for tensor in levels.values()}
        if len(channels) != 1:
            raise ContractError(f"pyramid levels disagree on channel count: {sorted(channels)}")
        return cls(levels, channels.pop())


def _check_halving(levels: Mapping[int, Tensor]) -> None:
    for fine, coarse in zip(SCALES[:-1], SCALES[1:]):
        a, b = levels[fine], levels[coarse]
        if a.n != b.n or a.h != 2 * b.h or a.w != 2 * b.w:
            raise ContractError(
                f"extent does not halve between 1/{fine} {a.shape} and 1/{coarse} {b.shape}"
            )


@dataclass(frozen=True)
class BranchConfig:
    """
    Configuration of the semantic branch.

    Attributes:
        num_classes (int): Number of classes predicted besides `other`.
        branch_width (int): Channels of every branch feature map.
        aggregation (str): "sum" or "concat" (concat adds a 1x1 conv back to branch_width).
        include_other_class (bool): Append a single `other` channel after the classes.
        channel_dim (int): Channel dimension of the pyramid the branch consumes.
        gn_groups (int): Requested group norm groups; capped at branch_width.
        gn_eps (float): Group norm variance floor.
        seed (int): Seed of the parameter stream used by `build_branch`.
    """

    num_classes: int
    branch_width: int = 128
    aggregation: str = "sum"
    include_other_class: bool = True
    channel_dim: int = 256
    gn_groups: int = 32
    gn_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_classes < 1 or self.branch_width < 1 or self.channel_dim < 1:
            raise ContractError(
                f"num_classes, branch_width and channel_dim must be >= 1, got "
                f"{self.num_classes}, {self.branch_width}, {self.channel_dim}"
            )
        if self.aggregation not in ("sum", "concat"):
            raise ContractError(f"aggregation must be 'sum' or 'concat', got '{self.aggregation}'")
        if self.branch_width % self.groups:
            raise ContractError(f"branch width {self.branch_width} is not divisible into {self.groups} groups")

    @property
    def output_channels(self) -> int:
        return self.num_classes + (1 if self.include_other_class else 0)

    @property
    def groups(self) -> int:
        return max(1, min(self.gn_groups, self.branch_width))

    def to_file(self, path) -> None:
        Utils.write_key_values(path, {key.upper(): value for key, value in asdict(self).items()})

    @classmethod
    def from_file(cls, path) -> "BranchConfig":
        try:
            values = Utils.read_key_values(path)
        except FileNotFoundError as err:
            raise DatasetFileError(str(err)) from err
        values = {key.lower(): value for key, value in values.items()}
        try:
            return cls(
                num_classes=int(values["num_classes"]),
                branch_width=int(values.get("branch_width", 128)),
                aggregation=values.get("aggregation", "sum"),
                include_other_class=Utils.parse_bool(values.get("include_other_class", "True")),
                channel_dim=int(values.get("channel_dim", 256)),
                gn_groups=int(values.get("gn_groups", 32)),
                gn_eps=float(values.get("gn_eps", 1e-5)),
                seed=int(values.get("seed", 0)),
            )
        except (KeyError, ValueError) as err:
            raise DatasetFormatError(f"invalid branch config '{path}': {err}") from err

    @classmethod
    def from_config(cls, config) -> "BranchConfig":
        return cls(
            num_classes=config.NUM_CLASSES,
            branch_width=config.BRANCH_WIDTH,
            aggregation=config.AGGREGATION,
            include_other_class=config.INCLUDE_OTHER_CLASS,
            channel_dim=config.FPN_CHANNELS,
            gn_groups=config.GN_GROUPS,
            gn_eps=config.GN_EPS,
            seed=config.SEED,
        )


class FPNTopDown:
    """
    Lateral 1x1 convs, top-down 2x upsample + sum, and a 3x3 conv on every merged map.

    Parameters are drawn laterals first, then output convs, each in ascending scale order.
    """

    def __init__(self, channel_dim: int, laterals: Dict[int, ConvParams], outputs: Dict[int, ConvParams]) -> None:
        self.channel_dim = channel_dim
        self.laterals = dict(laterals)
        self.outputs = dict(outputs)

    @classmethod
    def build(cls, in_channels: Mapping[int, int], channel_dim: int, rng: Rng, zero: bool = False) -> "FPNTopDown":
        missing = [scale for scale in SCALES if scale not in in_channels]
        if missing:
            raise ContractError(f"bottom-up pyramid is missing scales {missing}")
        specs = [ConvLayerSpec(in_channels[scale], channel_dim, kernel=1) for scale in SCALES]
        specs += [ConvLayerSpec(channel_dim, channel_dim, kernel=3) for _ in SCALES]
        params = init_params(specs, rng, zero=zero)
        return cls(channel_dim, dict(zip(SCALES, params[:4])), dict(zip(SCALES, params[4:])))

    def named_parameters(self) -> List[Tuple[str, ConvParams]]:
        named = [(f"lateral{scale}", self.laterals[scale]) for scale in SCALES]
        return named + [(f"output{scale}", self.outputs[scale]) for scale in SCALES]

    def forward(self, bottom_up: Mapping[int, Tensor], graph: Optional[Graph] = None) -> PyramidLevels:
        missing = [scale for scale in SCALES if scale not in bottom_up]
        if missing:
            raise ContractError(f"bottom-up pyramid is missing scales {missing}")
        _check_halving(bottom_up)

        lateral = {
            scale: conv2d(bottom_up[scale], self.laterals[scale], graph, f"fpn.lateral{scale}") for scale in SCALES
        }
        merged = {32: lateral[32]}
        for fine, coarse in zip(reversed(SCALES[:-1]), reversed(SCALES[1:])):
            upsampled = bilinear_upsample(merged[coarse], 2, graph, f"fpn.topdown{fine}")
            merged[fine] = elementwise_sum([upsampled, lateral[fine]], graph, f"fpn.merge{fine}")
        levels = {scale: conv2d(merged[scale], self.outputs[scale], graph, f"fpn.output{scale}") for scale in SCALES}
        return PyramidLevels(levels, self.channel_dim)


def fpn_topdown(bottom_up: Mapping[int, Tensor], channel_dim: int, rng: Rng, graph: Optional[Graph] = None) -> PyramidLevels:
    in_channels = {scale: tensor.c for scale, tensor in bottom_up.items()}
    return FPNTopDown.build(in_channels, channel_dim, rng).forward(bottom_up, graph)


Block = Tuple[ConvParams, GroupNormParams]


class SemanticBranch:
    """
    Executable semantic segmentation branch.

    Attributes:
        config (BranchConfig): The architecture.
        levels (dict): Scale denominator -> list of (conv, group norm) blocks.
        reduce (ConvParams or None): 1x1 conv after concat aggregation.
        classifier (ConvParams): 1x1 conv to the output channels, no norm.
    """

    def __init__(self, config: BranchConfig, levels: Dict[int, List[Block]], reduce: Optional[ConvParams],
                 classifier: ConvParams) -> None:
        self.config = config
        self.levels = levels
        self.reduce = reduce
        self.classifier = classifier

    @staticmethod
    def layer_specs(config: BranchConfig) -> List:
        """Layer list in parameter-stream order: levels 1/4 to 1/32, then reduce, then classifier."""
        specs = []
        for scale in SCALES:
            for block in range(max(_upsample_stages(scale), 1)):
                c_in = config.channel_dim if block == 0 else config.branch_width
                specs.append(ConvLayerSpec(c_in, config.branch_width, kernel=3, name=f"level{scale}.block{block}.conv"))
                specs.append(NormLayerSpec(config.branch_width, config.groups, config.gn_eps,
                                           name=f"level{scale}.block{block}.gn"))
        if config.aggregation == "concat":
            specs.append(ConvLayerSpec(len(SCALES) * config.branch_width, config.branch_width, kernel=1, name="reduce"))
        specs.append(ConvLayerSpec(config.branch_width, config.output_channels, kernel=1, name="classifier"))
        return specs

    @classmethod
    def from_parameters(cls, config: BranchConfig, params: List) -> "SemanticBranch":
        params = list(params)
        levels: Dict[int, List[Block]] = {}
        for scale in SCALES:
            levels[scale] = []
            for _ in range(max(_upsample_stages(scale), 1)):
                levels[scale].append((params.pop(0), params.pop(0)))
        reduce = params.pop(0) if config.aggregation == "concat" else None
        classifier = params.pop(0)
        if params:
            raise ContractError(f"{len(params)} parameter arrays left over for {config}")
        return cls(config, levels, reduce, classifier)

    def upsample_stages(self) -> Dict[int, int]:
        return {scale: _upsample_stages(scale) for scale in SCALES}

    def named_parameters(self) -> List[Tuple[str, object]]:
        named = []
        for scale in SCALES:
            for block, (conv, norm) in enumerate(self.levels[scale]):
                named.append((f"level{scale}.block{block}.conv", conv))
                named.append((f"level{scale}.block{block}.gn", norm))
        if self.reduce is not None:
            named.append(("reduce", self.reduce))
        named.append(("classifier", self.classifier))
        return named

    def parameters(self) -> List:
        return [params for _, params in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(params.size for params in self.parameters())

    def zero_grad(self) -> None:
        for params in self.parameters():
            params.zero_grad()

    def astype(self, dtype) -> "SemanticBranch":
        return SemanticBranch.from_parameters(self.config, [params.astype(dtype) for params in self.parameters()])

    def level_features(self, pyramid: PyramidLevels, graph: Optional[Graph] = None) -> Dict[int, Tensor]:
        """Bring every pyramid level to 1/4 scale and branch_width channels."""
        if pyramid.channel_dim != self.config.channel_dim:
            raise ContractError(
                f"pyramid has {pyramid.channel_dim} channels, branch expects {self.config.channel_dim}"
            )
        features = {}
        for scale in SCALES:
            x = pyramid[scale]
            upsample = _upsample_stages(scale) > 0
            for block, (conv, norm) in enumerate(self.levels[scale]):
                prefix = f"level{scale}.block{block}"
                x = conv2d(x, conv, graph, f"{prefix}.conv")
                x = group_norm(x, norm, graph, f"{prefix}.gn")
                x = relu(x, graph, f"{prefix}.relu")
                if upsample:
                    x = bilinear_upsample(x, 2, graph, f"{prefix}.up")
            features[scale] = x
        return features

    def logits(self, pyramid: PyramidLevels, graph: Optional[Graph] = None) -> Tensor:
        """Full-resolution class scores before the softmax."""
        level_features = self.level_features(pyramid, graph)
        features = [level_features[scale] for scale in SCALES]
        if self.config.aggregation == "sum":
            merged = elementwise_sum(features, graph, "aggregate")
        else:
            merged = channel_concat(features, graph, "aggregate")
            merged = conv2d(merged, self.reduce, graph, "reduce")
        scores = conv2d(merged, self.classifier, graph, "classifier")
        return bilinear_upsample(scores, 4, graph, "classifier.up")

    def forward(self, pyramid: PyramidLevels, graph: Optional[Graph] = None) -> Tensor:
        """Per-pixel class distribution (n, output_channels, H, W)."""
        return softmax_channels(self.logits(pyramid, graph), graph, "softmax")

    def save(self, directory) -> Path:
        """
        Write the branch to `directory`: the config file, a manifest listing the parameter
        arrays in load order, and one tensor file per array.
        """
        from pfpn.panoptic_io import PanopticIO

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.config.to_file(directory / CONFIG_FILE)
        entries = []
        for name, params in self.named_parameters():
            for field_name, array in params.arrays():
                file_name = f"{name}.{field_name}.ptsr"
                PanopticIO.write_tensor(directory / file_name, array)
                entries.append(f"{name}.{field_name} {file_name}")
        (directory / MANIFEST_FILE).write_text("\n".join(entries) + "\n")
        logger.info(f"saved branch with {self.num_parameters()} parameters to {directory}")
        return directory

    @classmethod
    def load(cls, directory) -> "SemanticBranch":
        from pfpn.panoptic_io import PanopticIO

        directory = Path(directory)
        config = BranchConfig.from_file(directory / CONFIG_FILE)
        manifest = directory / MANIFEST_FILE
        if not manifest.is_file():
            raise DatasetFileError(f"missing manifest '{manifest}'")
        arrays = {}
        for line in manifest.read_text().splitlines():
            if line.strip():
                key, file_name = line.split()
                arrays[key] = PanopticIO.read_tensor(directory / file_name)

        # rebuild with zero weights to recover names and geometry, then fill in the arrays
        template = build_branch(config, Rng(config.seed), zero=True)
        params = []
        for name, params_template in template.named_parameters():
            try:
                if isinstance(params_template, ConvParams):
                    params.append(replace(params_template, weight=arrays[f"{name}.weight"], bias=arrays[f"{name}.bias"]))
                else:
                    params.append(replace(params_template, gamma=arrays[f"{name}.gamma"], beta=arrays[f"{name}.beta"]))
            except KeyError as err:
                raise DatasetFormatError(f"manifest in {directory} has no entry for {err}") from err
        for template_params, loaded in zip(template.parameters(), params):
            for (field_name, expected), (_, actual) in zip(template_params.arrays(), loaded.arrays()):
                if expected.shape != actual.shape:
                    raise DatasetFormatError(f"{field_name} has shape {actual.shape}, expected {expected.shape}")
        return cls.from_parameters(config, params)


def build_branch(config: BranchConfig, rng: Optional[Rng] = None, zero: bool = False) -> SemanticBranch:
    """
    Initialize a semantic branch.

    Args:
        config: The architecture.
        rng: Parameter stream; defaults to `Rng(config.seed)`.
        zero: All-zero conv weights (no draws consumed).
    """
    rng = Rng(config.seed) if rng is None else rng
    branch = SemanticBranch.from_parameters(config, init_params(SemanticBranch.layer_specs(config), rng, zero=zero))
    logger.debug(f"built semantic branch: {branch.num_parameters()} parameters, {config}")
    return branch
