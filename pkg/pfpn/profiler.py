# -*- coding: utf-8 -*-

"""
profiler.py: Analytic Compute and Memory Accounting

This module counts multiply-adds and activations of convolutional layer graphs, and builds
the ResNet-101 variants compared when choosing how to raise feature resolution:

* the plain backbone (output 1/32)
* dilated backbones (output 1/16 or 1/8): trailing strides removed, dilation doubled per
  removed stride
* a symmetric encoder-decoder mirroring every stage block for block
* FPN, optionally topped by the semantic segmentation branch

Only convolutions count: a conv costs out_h * out_w * c_out * c_in * k^2 multiply-adds
and contributes out_h * out_w * c_out activations. Pooling, upsampling, sums, norms and
nonlinearities are free.
"""

import csv
import io
import json
import logging
import re
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from tabulate import tabulate

from pfpn.exceptions import ArchSpecError, DatasetFileError
from pfpn.semantic_branch import BranchConfig
from pfpn.utils import Utils

__all__ = [
    "LayerSpec",
    "ArchSpec",
    "LayerCost",
    "CostReport",
    "ArchBuilder",
    "Profiler",
]

logger = logging.getLogger(__name__)

INPUT = "image"
OPS = ("conv", "maxpool", "upsample", "sum")
# ResNet-101: (stage, bottleneck width, output channels, blocks, stride)
RESNET101_STAGES = (
    ("res2", 64, 256, 3, 1),
    ("res3", 128, 512, 4, 2),
    ("res4", 256, 1024, 23, 2),
    ("res5", 512, 2048, 3, 2),
)
STAGE_SCALES = {"res2": 4, "res3": 8, "res4": 16, "res5": 32}
TWO_MEGAPIXELS = (1152, 1728)


@dataclass(frozen=True)
class LayerSpec:
    """
    One node of a layer graph.

    Attributes:
        name (str): Unique name.
        op (str): conv, maxpool, upsample or sum.
        inputs (tuple): Names of the input nodes; "image" is the network input.
        c_out (int): Output channels (conv only).
        kernel (int): Kernel size (conv, maxpool).
        stride (int): Stride (conv, maxpool).
        dilation (int): Dilation (conv).
        factor (int): Upsampling factor.
        stage (str): Optional stage tag used by the backbone transformations.
    """

    name: str
    op: str
    inputs: Tuple[str, ...]
    c_out: int = 0
    kernel: int = 1
    stride: int = 1
    dilation: int = 1
    factor: int = 2
    stage: Optional[str] = None


@dataclass
class ArchSpec:
    """
    A layer graph plus what is known about its structure.

    Attributes:
        name (str): Label used in reports.
        layers (list): LayerSpec in topological order.
        input_channels (int): Channels of the network input.
        decoder (str): none, dilated, symmetric_decoder or fpn.
        output_scale (int): Denominator of the output resolution.
        stage_outputs (dict): Stage tag -> name of the layer ending that stage.
        divisor (int): Input extents must be multiples of this.
    """

    name: str
    layers: List[LayerSpec]
    input_channels: int = 3
    decoder: str = "none"
    output_scale: int = 1
    stage_outputs: Dict[str, str] = field(default_factory=dict)
    divisor: int = 1

    def layer_names(self) -> List[str]:
        return [layer.name for layer in self.layers]

    def extend(self, name: str, layers: Sequence[LayerSpec], **changes) -> "ArchSpec":
        return replace(self, name=name, layers=self.layers + list(layers), **changes)


@dataclass(frozen=True)
class LayerCost:
    name: str
    op: str
    shape: Tuple[int, int, int]
    multiply_adds: int
    activations: int
    parameters: int


@dataclass
class CostReport:
    """
    Per-layer and total costs of one ArchSpec at one input extent.
    """

    name: str
    image: Tuple[int, int]
    batch: int
    layers: List[LayerCost]

    @property
    def multiply_adds(self) -> int:
        return sum(layer.multiply_adds for layer in self.layers)

    @property
    def activations(self) -> int:
        return sum(layer.activations for layer in self.layers)

    @property
    def parameters(self) -> int:
        return sum(layer.parameters for layer in self.layers)

    def rows(self, per_layer: bool = True) -> List[dict]:
        rows = []
        if per_layer:
            for layer in self.layers:
                rows.append({
                    "layer": layer.name,
                    "op": layer.op,
                    "output": "x".join(str(v) for v in layer.shape),
                    "multiply_adds": layer.multiply_adds,
                    "activations": layer.activations,
                })
        rows.append({
            "layer": "total",
            "op": "",
            "output": f"{self.image[0]}x{self.image[1]}",
            "multiply_adds": self.multiply_adds,
            "activations": self.activations,
        })
        return rows

    def to_dict(self, per_layer: bool = True) -> dict:
        return {
            "arch": self.name,
            "image": list(self.image),
            "batch": self.batch,
            "multiply_adds": self.multiply_adds,
            "activations": self.activations,
            "parameters": self.parameters,
            "layers": self.rows()[:-1] if per_layer else [],
        }

    def render(self, fmt: str = "text", per_layer: bool = False) -> str:
        return Profiler.render_rows(self.rows(per_layer), fmt, self.to_dict(per_layer))


class ArchBuilder:
    """
    ArchBuilder: ResNet-101 and the resolution-raising variants built on top of it.
    """

    BUILTINS = ("r101", "r101-fpn", "r101-d8", "r101-d16", "r101-symdec")

    @staticmethod
    def build_arch(variant: str, head: Optional[BranchConfig] = None) -> ArchSpec:
        """
        Build a named architecture.

        Args:
            variant: One of r101, r101-fpn, r101-d8, r101-d16, r101-symdec.
            head: Semantic branch on top of FPN; r101-fpn defaults to a 19-class branch.
        """
        base = ArchBuilder.resnet101()
        if variant == "r101":
            return base
        if variant == "r101-fpn":
            return ArchBuilder.add_fpn(base, head=head or BranchConfig(num_classes=19, include_other_class=False))
        if variant == "r101-d8":
            return ArchBuilder.dilate(base, 8)
        if variant == "r101-d16":
            return ArchBuilder.dilate(base, 16)
        if variant == "r101-symdec":
            return ArchBuilder.add_symmetric_decoder(base)
        raise ArchSpecError(f"unknown architecture '{variant}', expected one of {ArchBuilder.BUILTINS}")

    @staticmethod
    def bottleneck(name: str, source: str, c_in: int, width: int, c_out: int, stride: int = 1, dilation: int = 1,
                   stage: Optional[str] = None) -> List[LayerSpec]:
        """1x1 reduce, 3x3 (carrying stride and dilation), 1x1 expand, residual sum."""
        layers = [
            LayerSpec(f"{name}.conv1", "conv", (source,), width, 1, stage=stage),
            LayerSpec(f"{name}.conv2", "conv", (f"{name}.conv1",), width, 3, stride, dilation, stage=stage),
            LayerSpec(f"{name}.conv3", "conv", (f"{name}.conv2",), c_out, 1, stage=stage),
        ]
        shortcut = source
        if stride != 1 or c_in != c_out:
            layers.append(LayerSpec(f"{name}.proj", "conv", (source,), c_out, 1, stride, stage=stage))
            shortcut = f"{name}.proj"
        layers.append(LayerSpec(f"{name}.sum", "sum", (f"{name}.conv3", shortcut), stage=stage))
        return layers

    @staticmethod
    def resnet101() -> ArchSpec:
        layers = [
            LayerSpec("stem.conv", "conv", (INPUT,), 64, 7, 2, stage="stem"),
            LayerSpec("stem.pool", "maxpool", ("stem.conv",), kernel=3, stride=2, stage="stem"),
        ]
        source, c_in, stage_outputs = "stem.pool", 64, {}
        for stage, width, c_out, blocks, stride in RESNET101_STAGES:
            for block in range(blocks):
                name = f"{stage}.{block}"
                layers += ArchBuilder.bottleneck(name, source, c_in, width, c_out, stride if block == 0 else 1,
                                                 stage=stage)
                source, c_in = f"{name}.sum", c_out
            stage_outputs[stage] = source
        return ArchSpec("r101", layers, 3, "none", 32, stage_outputs, divisor=32)

    @staticmethod
    def dilate(spec: ArchSpec, output_scale: int) -> ArchSpec:
        """
        Remove the strides of the trailing stages so the output lands at 1/output_scale;
        every removed stride doubles the dilation of the 3x3 convs from that stage on.
        Layer and parameter counts are unchanged.
        """
        stages = [stage for stage in STAGE_SCALES if stage in spec.stage_outputs]
        if not stages:
            raise ArchSpecError(f"'{spec.name}' has no stage structure to dilate")
        removed = [stage for stage in stages if STAGE_SCALES[stage] > output_scale]
        if output_scale not in (8, 16) or not removed:
            raise ArchSpecError(f"dilated output scale must be 1/8 or 1/16, got 1/{output_scale}")
        dilation_of, factor = {}, 1
        for stage in stages:
            if stage in removed:
                factor *= 2
            dilation_of[stage] = factor
        layers = []
        for layer in spec.layers:
            if layer.stage in removed:
                dilation = dilation_of[layer.stage] if layer.op == "conv" and layer.kernel > 1 else layer.dilation
                layer = replace(layer, stride=1, dilation=dilation)
            layers.append(layer)
        return replace(spec, name=f"{spec.name}-d{output_scale}", layers=layers, decoder="dilated",
                       output_scale=output_scale)

    @staticmethod
    def add_symmetric_decoder(spec: ArchSpec) -> ArchSpec:
        """
        Mirror every stage, deepest first: upsample 2x, the same number of bottleneck
        blocks with the same widths (the first projecting from the previous channel count),
        then a lateral sum with the matching encoder stage. Output at 1/4.
        """
        stages = [stage for stage, *_ in RESNET101_STAGES if stage in spec.stage_outputs]
        if len(stages) != len(RESNET101_STAGES):
            raise ArchSpecError(f"'{spec.name}' is not a ResNet stage layout")
        layers, source, c_prev = [], spec.stage_outputs["res5"], 2048
        for stage, width, c_out, blocks, _ in reversed(RESNET101_STAGES):
            if stage != "res5":
                layers.append(LayerSpec(f"dec.{stage}.up", "upsample", (source,), factor=2))
                source = f"dec.{stage}.up"
            c_in = c_prev
            for block in range(blocks):
                name = f"dec.{stage}.{block}"
                layers += ArchBuilder.bottleneck(name, source, c_in, width, c_out)
                source, c_in = f"{name}.sum", c_out
            if stage != "res5":
                layers.append(LayerSpec(f"dec.{stage}.lateral", "sum", (source, spec.stage_outputs[stage])))
                source = f"dec.{stage}.lateral"
            c_prev = c_out
        return spec.extend(f"{spec.name}-symdec", layers, decoder="symmetric_decoder", output_scale=4)

    @staticmethod
    def add_fpn(spec: ArchSpec, channel_dim: int = 256, head: Optional[BranchConfig] = None) -> ArchSpec:
        """Lateral 1x1 convs, top-down upsample + sum, 3x3 output convs; optionally the semantic branch."""
        stages = [stage for stage, *_ in RESNET101_STAGES]
        if any(stage not in spec.stage_outputs for stage in stages):
            raise ArchSpecError(f"'{spec.name}' is not a ResNet stage layout")
        layers = [LayerSpec(f"fpn.lateral{STAGE_SCALES[s]}", "conv", (spec.stage_outputs[s],), channel_dim, 1)
                  for s in stages]
        merged = {32: "fpn.lateral32"}
        for scale in (16, 8, 4):
            layers.append(LayerSpec(f"fpn.topdown{scale}", "upsample", (merged[scale * 2],), factor=2))
            layers.append(LayerSpec(f"fpn.merge{scale}", "sum", (f"fpn.topdown{scale}", f"fpn.lateral{scale}")))
            merged[scale] = f"fpn.merge{scale}"
        layers += [LayerSpec(f"fpn.output{scale}", "conv", (merged[scale],), channel_dim, 3) for scale in (4, 8, 16, 32)]
        name = f"{spec.name}-fpn"
        if head is not None:
            if head.channel_dim != channel_dim:
                head = replace(head, channel_dim=channel_dim)
            layers += ArchBuilder.semantic_head(head, {scale: f"fpn.output{scale}" for scale in (4, 8, 16, 32)})
            name = f"{name}-semantic"
        return spec.extend(name, layers, decoder="fpn", output_scale=4 if head is None else 1)

    @staticmethod
    def semantic_head(config: BranchConfig, sources: Mapping[int, str]) -> List[LayerSpec]:
        layers, merged = [], []
        for scale in (4, 8, 16, 32):
            stages = scale.bit_length() - 3
            source = sources[scale]
            for block in range(max(stages, 1)):
                name = f"head.level{scale}.block{block}"
                layers.append(LayerSpec(f"{name}.conv", "conv", (source,), config.branch_width, 3))
                source = f"{name}.conv"
                if stages:
                    layers.append(LayerSpec(f"{name}.up", "upsample", (source,), factor=2))
                    source = f"{name}.up"
            merged.append(source)
        if config.aggregation == "sum":
            layers.append(LayerSpec("head.aggregate", "sum", tuple(merged)))
            source = "head.aggregate"
        else:
            layers.append(LayerSpec("head.reduce", "conv", tuple(merged), config.branch_width, 1))
            source = "head.reduce"
        layers.append(LayerSpec("head.classifier", "conv", (source,), config.output_channels, 1))
        layers.append(LayerSpec("head.up", "upsample", ("head.classifier",), factor=4))
        return layers

    @staticmethod
    def from_file(path) -> ArchSpec:
        """
        Read an architecture from a key = value file.

        Either name a builtin (`BACKBONE=r101` with optional `DECODER=fpn|dilated|symmetric_decoder`,
        `OUTPUT_SCALE`, `CHANNEL_DIM`, `HEAD_CLASSES`, `HEAD_WIDTH`, `HEAD_AGGREGATION`,
        `HEAD_OTHER_CLASS`), or list layers as `LAYER_<n>=<name> <op> key=value ...`
        with `inputs=a,b`, plus `NAME` and `INPUT_CHANNELS`.
        """
        try:
            values = Utils.read_key_values(path)
        except FileNotFoundError as err:
            raise DatasetFileError(str(err)) from err
        try:
            if "BACKBONE" in values:
                return ArchBuilder._builtin_from_values(values)
            return ArchBuilder._layers_from_values(values, str(path))
        except ValueError as err:
            if isinstance(err, ArchSpecError):
                raise
            raise ArchSpecError(f"invalid architecture file '{path}': {err}") from err

    @staticmethod
    def _builtin_from_values(values: Mapping[str, str]) -> ArchSpec:
        if values["BACKBONE"] != "r101":
            raise ArchSpecError(f"unknown backbone '{values['BACKBONE']}'")
        base = ArchBuilder.resnet101()
        decoder = values.get("DECODER", "none")
        if decoder == "none":
            return base
        if decoder == "dilated":
            return ArchBuilder.dilate(base, int(values.get("OUTPUT_SCALE", 16)))
        if decoder == "symmetric_decoder":
            return ArchBuilder.add_symmetric_decoder(base)
        if decoder == "fpn":
            channel_dim = int(values.get("CHANNEL_DIM", 256))
            head = None
            if "HEAD_CLASSES" in values:
                head = BranchConfig(
                    num_classes=int(values["HEAD_CLASSES"]),
                    branch_width=int(values.get("HEAD_WIDTH", 128)),
                    aggregation=values.get("HEAD_AGGREGATION", "sum"),
                    include_other_class=Utils.parse_bool(values.get("HEAD_OTHER_CLASS", "False")),
                    channel_dim=channel_dim,
                )
            return ArchBuilder.add_fpn(base, channel_dim, head)
        raise ArchSpecError(f"unknown decoder '{decoder}'")

    @staticmethod
    def _layers_from_values(values: Mapping[str, str], source: str) -> ArchSpec:
        keys = sorted((key for key in values if re.fullmatch(r"LAYER_\d+", key)), key=lambda key: int(key[6:]))
        if not keys:
            raise ArchSpecError(f"'{source}' defines no BACKBONE and no LAYER_<n> entries")
        layers = []
        for key in keys:
            tokens = values[key].split()
            if len(tokens) < 2:
                raise ArchSpecError(f"{key}: expected '<name> <op> key=value ...'")
            name, op, options = tokens[0], tokens[1], dict(token.split("=", 1) for token in tokens[2:])
            inputs = tuple(options.pop("inputs", layers[-1].name if layers else INPUT).split(","))
            kwargs = {k: int(v) for k, v in options.items() if k in ("c_out", "kernel", "stride", "dilation", "factor")}
            unknown = set(options) - set(kwargs)
            if unknown:
                raise ArchSpecError(f"{key}: unknown options {sorted(unknown)}")
            layers.append(LayerSpec(name, op, inputs, **kwargs))
        return ArchSpec(values.get("NAME", "custom"), layers, int(values.get("INPUT_CHANNELS", 3)))


class Profiler:
    """
    Profiler: shape inference and cost accounting over ArchSpec layer graphs.
    """

    @staticmethod
    def profile(spec: ArchSpec, image: Tuple[int, int] = TWO_MEGAPIXELS, batch: int = 1) -> CostReport:
        """
        Count multiply-adds, activations and conv weights layer by layer.

        Convs use "same" padding, (k - 1) * d // 2, so a stride-s layer maps an extent e
        to ceil(e / s).

        Raises:
            ArchSpecError: unknown inputs, duplicate names, channel or extent mismatches.
        """
        height, width = image
        if height < 1 or width < 1 or batch < 1:
            raise ArchSpecError(f"image extent {image} and batch {batch} must be positive")
        if height % spec.divisor or width % spec.divisor:
            raise ArchSpecError(f"'{spec.name}' needs an image extent divisible by {spec.divisor}, got {height}x{width}")

        shapes: Dict[str, Tuple[int, int, int]] = {INPUT: (spec.input_channels, height, width)}
        costs = []
        for layer in spec.layers:
            if layer.name in shapes:
                raise ArchSpecError(f"duplicate layer name '{layer.name}'")
            if layer.op not in OPS:
                raise ArchSpecError(f"layer '{layer.name}': unsupported op '{layer.op}'")
            missing = [name for name in layer.inputs if name not in shapes]
            if missing or not layer.inputs:
                raise ArchSpecError(f"layer '{layer.name}' reads undefined inputs {missing or '(none)'}")
            inputs = [shapes[name] for name in layer.inputs]
            c, h, w = inputs[0]
            multiply_adds = activations = parameters = 0

            if layer.op == "conv":
                if len({shape[1:] for shape in inputs}) != 1:
                    raise ArchSpecError(f"layer '{layer.name}': inputs have different extents {inputs}")
                c = sum(shape[0] for shape in inputs)
                if layer.c_out < 1 or layer.kernel < 1 or layer.stride < 1 or layer.dilation < 1:
                    raise ArchSpecError(f"layer '{layer.name}': invalid conv geometry {layer}")
                span = (layer.kernel - 1) * layer.dilation + 1
                padding = (span - 1) // 2
                h = (h + 2 * padding - span) // layer.stride + 1
                w = (w + 2 * padding - span) // layer.stride + 1
                if h < 1 or w < 1:
                    raise ArchSpecError(f"layer '{layer.name}': extent collapses to {h}x{w}")
                parameters = c * layer.c_out * layer.kernel ** 2
                multiply_adds = batch * h * w * parameters
                activations = batch * h * w * layer.c_out
                c = layer.c_out
            elif layer.op == "maxpool":
                padding = (layer.kernel - 1) // 2
                h = (h + 2 * padding - layer.kernel) // layer.stride + 1
                w = (w + 2 * padding - layer.kernel) // layer.stride + 1
            elif layer.op == "upsample":
                h, w = h * layer.factor, w * layer.factor
            elif layer.op == "sum":
                if len(set(inputs)) != 1:
                    raise ArchSpecError(f"layer '{layer.name}': cannot sum shapes {inputs}")

            shapes[layer.name] = (c, h, w)
            costs.append(LayerCost(layer.name, layer.op, (c, h, w), multiply_adds, activations, parameters))
        report = CostReport(spec.name, (height, width), batch, costs)
        logger.debug(f"{spec.name} at {height}x{width}: {report.multiply_adds:.3e} multiply-adds, "
                     f"{report.activations:.3e} activations")
        return report

    @staticmethod
    def compare_variants(base: Optional[ArchSpec] = None, image: Tuple[int, int] = TWO_MEGAPIXELS,
                         batch: int = 1) -> List[dict]:
        """
        Profile dilation-8, dilation-16, the symmetric decoder and FPN built on `base`
        (ResNet-101 by default) and report each next to its ratio to FPN.
        """
        base = base or ArchBuilder.resnet101()
        variants = [
            ("dilation-8", ArchBuilder.dilate(base, 8)),
            ("dilation-16", ArchBuilder.dilate(base, 16)),
            ("symmetric-decoder", ArchBuilder.add_symmetric_decoder(base)),
            ("fpn", ArchBuilder.add_fpn(base)),
        ]
        reports = {name: Profiler.profile(spec, image, batch) for name, spec in variants}
        fpn = reports["fpn"]
        return [
            {
                "variant": name,
                "output_scale": spec.output_scale,
                "multiply_adds": reports[name].multiply_adds,
                "activations": reports[name].activations,
                "compute_vs_fpn": reports[name].multiply_adds / fpn.multiply_adds,
                "memory_vs_fpn": reports[name].activations / fpn.activations,
            }
            for name, spec in variants
        ]

    @staticmethod
    def ratio(rows: Sequence[dict], numerator: str, denominator: str, key: str = "multiply_adds") -> float:
        by_name = {row["variant"]: row for row in rows}
        return by_name[numerator][key] / by_name[denominator][key]

    @staticmethod
    def render_rows(rows: Sequence[dict], fmt: str = "text", payload=None) -> str:
        """Render rows as aligned text (tabulate), CSV, or JSON (`payload` if given)."""
        if fmt == "json":
            return json.dumps(payload if payload is not None else list(rows), indent=2)
        if fmt == "csv":
            buffer = io.StringIO()
            writer = csv.DictWriter(buffer, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
            return buffer.getvalue()
        if fmt == "text":
            return tabulate(rows, headers="keys", tablefmt="simple", floatfmt=".3f", intfmt=".4g")
        raise ValueError(f"unknown format '{fmt}'")
