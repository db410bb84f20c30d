"""Dilated residual segmentation network with a 1-based registry of weighted layers.

Topology (desk widths in brackets)::

    conv1 [8] -> rm2 [16] /2 -> rm3 [32] /2 -> rm4 [32] /2 -> rm5 -> rm6 -> rm7 (dilation 2)
          -> up1 -> up2 -> up3 (x2 each) -> smooth1 -> smooth2 (5x5) -> head (1x1) -> softmax

Every weighted conv (including residual projections) gets one registry index in
forward order, so an adaptation depth ``d`` means "layers 1..d".  Top-level units
(conv1, rm2 ... head) are the only legal split points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tensor_nn import ContractError, ConvSpec, check_tensor4, conv2d, softmax_channel, upsample2x

RM_NAMES = ("rm2", "rm3", "rm4", "rm5", "rm6", "rm7")
RESIDUAL_BRANCH_INIT_SCALE = 0.1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SegmenterConfig:
    in_channels: int = 3
    num_classes: int = 5
    base_width: int = 8
    widths: tuple[int, ...] = (16, 32, 32, 32, 32, 32)
    up_widths: tuple[int, ...] = (16, 16, 8)
    smooth_convs: int = 2
    dilation: int = 2

    def __post_init__(self) -> None:
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "up_widths", tuple(int(w) for w in self.up_widths))
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.widths) != len(RM_NAMES):
            raise ConfigError(f"widths must list one width per residual module {RM_NAMES}, got {self.widths}")
        if len(self.up_widths) != 3:
            raise ConfigError(f"need three upsampling widths (x8 total), got {self.up_widths}")
        if min((self.in_channels, self.base_width, *self.widths, *self.up_widths)) < 1:
            raise ConfigError("all channel widths must be >= 1")
        if self.smooth_convs < 1 or self.dilation < 1:
            raise ConfigError("smooth_convs and dilation must be >= 1")

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "base_width": self.base_width,
            "widths": list(self.widths),
            "up_widths": list(self.up_widths),
            "smooth_convs": self.smooth_convs,
            "dilation": self.dilation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SegmenterConfig":
        return cls(**{**d, "widths": tuple(d["widths"]), "up_widths": tuple(d["up_widths"])})


@dataclass(frozen=True)
class LayerInfo:
    index: int
    name: str
    role: str
    unit: int


@dataclass
class LayerRegistry:
    layers: list[LayerInfo] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, index: int) -> LayerInfo:
        if not 1 <= index <= len(self.layers):
            raise KeyError(f"layer index {index} outside registry 1..{len(self.layers)}")
        return self.layers[index - 1]

    @property
    def indices(self) -> list[int]:
        return [info.index for info in self.layers]

    def unit_bounds(self) -> list[tuple[str, int, int]]:
        """(role, first index, last index) for each top-level unit, forward order."""
        spans: dict[int, tuple[str, int, int]] = {}
        for info in self.layers:
            role, first, _ = spans.get(info.unit, (info.role, info.index, info.index))
            spans[info.unit] = (role, first, info.index)
        return [spans[u] for u in sorted(spans)]

    def boundaries(self) -> list[int]:
        return [last for _, _, last in self.unit_bounds()]

    def is_boundary(self, index: int) -> bool:
        return index in self.boundaries()

    def last_of(self, role: str) -> int:
        for r, _, last in self.unit_bounds():
            if r == role:
                return last
        raise KeyError(role)

    def unit_of(self, index: int) -> int:
        return self[index].unit


# --- layers -----------------------------------------------------------------


def _he_init(weight: torch.Tensor, fan_in: int, gen: torch.Generator, scale: float = 1.0) -> None:
    with torch.no_grad():
        weight.copy_(torch.randn(weight.shape, generator=gen, dtype=weight.dtype) * (scale * math.sqrt(2.0 / fan_in)))


class Conv(nn.Module):
    """One registry layer: a conv with its spec; ReLU is applied by the owner."""

    def __init__(self, spec: ConvSpec):
        super().__init__()
        self.spec = spec
        self.weight = nn.Parameter(torch.zeros(spec.weight_shape))
        self.bias = nn.Parameter(torch.zeros(spec.out_ch))

    def reset(self, gen: torch.Generator, scale: float = 1.0) -> None:
        kh, kw = self.spec.kernel
        _he_init(self.weight, self.spec.in_ch * kh * kw, gen, scale)
        nn.init.zeros_(self.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv2d(x, self.spec, self.weight, self.bias)


class UpConv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(in_ch, out_ch, 2, 2))
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def reset(self, gen: torch.Generator, scale: float = 1.0) -> None:
        # each output pixel sees exactly one kernel tap per input channel
        _he_init(self.weight, self.weight.shape[0], gen, scale)
        nn.init.zeros_(self.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return upsample2x(x, self.weight, self.bias)


class Unit(nn.Module):
    """A top-level split unit.  ``forward`` returns (output, {local layer idx: activation})."""

    role = ""

    def layer_names(self) -> list[str]:
        raise NotImplementedError

    def run(self, x: torch.Tensor, taps: set[int]) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
        raise NotImplementedError


class SingleUnit(Unit):
    def __init__(self, role: str, layer: nn.Module, relu: bool = True):
        super().__init__()
        self.role = role
        self.layer = layer
        self.relu = relu

    def layer_names(self) -> list[str]:
        return [self.role]

    def run(self, x, taps):
        y = self.layer(x)
        if self.relu:
            y = F.relu(y)
        return y, ({0: y} if 0 in taps else {})


class ResidualBlock(nn.Module):
    """conv-ReLU-conv plus identity, or a 1x1 projection when width or stride change.

    Layer order inside the block: [proj], conv_a, conv_b.  The activation exported
    for conv_b is the block output (after the addition and ReLU).
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, dilation: int = 1):
        super().__init__()
        self.conv_a = Conv(ConvSpec.same(in_ch, out_ch, 3, stride, dilation))
        self.conv_b = Conv(ConvSpec.same(out_ch, out_ch, 3, 1, dilation))
        self.proj = Conv(ConvSpec(in_ch, out_ch, (1, 1), stride)) if (in_ch != out_ch or stride != 1) else None

    def layers(self) -> list[tuple[str, Conv]]:
        out = [("proj", self.proj)] if self.proj is not None else []
        return out + [("conv_a", self.conv_a), ("conv_b", self.conv_b)]

    def reset(self, gen: torch.Generator) -> None:
        for name, layer in self.layers():
            layer.reset(gen, RESIDUAL_BRANCH_INIT_SCALE if name == "conv_b" else 1.0)

    def run(self, x, taps, offset):
        feats = {}
        k = offset
        if self.proj is not None:
            skip = self.proj(x)
            if k in taps:
                feats[k] = skip
            k += 1
        else:
            skip = x
        h = F.relu(self.conv_a(x))
        if k in taps:
            feats[k] = h
        k += 1
        y = F.relu(self.conv_b(h) + skip)
        if k in taps:
            feats[k] = y
        return y, feats, k + 1


class ResidualModule(Unit):
    def __init__(self, role: str, in_ch: int, out_ch: int, stride: int, dilation: int):
        super().__init__()
        self.role = role
        self.blocks = nn.ModuleList(
            [ResidualBlock(in_ch, out_ch, stride, dilation), ResidualBlock(out_ch, out_ch, 1, dilation)]
        )

    def layer_names(self):
        return [f"{self.role}.block{b + 1}.{n}" for b, blk in enumerate(self.blocks) for n, _ in blk.layers()]

    def run(self, x, taps):
        feats: dict[int, torch.Tensor] = {}
        k = 0
        for blk in self.blocks:
            x, f, k = blk.run(x, taps, k)
            feats.update(f)
        return x, feats


def run_units(
    units: nn.ModuleList | list[Unit], x: torch.Tensor, offset: int, taps: set[int]
) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
    """Run ``units`` in order; ``offset`` is the registry index preceding the first unit."""
    feats: dict[int, torch.Tensor] = {}
    for unit in units:
        n = len(unit.layer_names())
        local = {t - offset - 1 for t in taps if offset < t <= offset + n}
        x, f = unit.run(x, local)
        feats.update({offset + 1 + k: v for k, v in f.items()})
        offset += n
    return x, feats


class Segmenter(nn.Module):
    def __init__(self, cfg: SegmenterConfig):
        super().__init__()
        self.cfg = cfg
        units: list[Unit] = [SingleUnit("conv1", Conv(ConvSpec.same(cfg.in_channels, cfg.base_width)))]
        c = cfg.base_width
        for i, (role, w) in enumerate(zip(RM_NAMES, cfg.widths)):
            stride = 2 if i < 3 else 1
            dilation = cfg.dilation if role == "rm7" else 1
            units.append(ResidualModule(role, c, w, stride, dilation))
            c = w
        for i, w in enumerate(cfg.up_widths):
            units.append(SingleUnit(f"up{i + 1}", UpConv(c, w)))
            c = w
        for i in range(cfg.smooth_convs):
            units.append(SingleUnit(f"smooth{i + 1}", Conv(ConvSpec.same(c, c, 5))))
        units.append(SingleUnit("head", Conv(ConvSpec(c, cfg.num_classes, (1, 1))), relu=False))
        self.units = nn.ModuleList(units)

        self.registry = LayerRegistry()
        for u, unit in enumerate(self.units):
            for name in unit.layer_names():
                self.registry.layers.append(LayerInfo(len(self.registry) + 1, name, unit.role, u))

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for unit in self.units:
            if isinstance(unit, ResidualModule):
                for blk in unit.blocks:
                    blk.reset(gen)
            else:
                unit.layer.reset(gen)

    def unit_offset(self, unit_index: int) -> int:
        return sum(len(u.layer_names()) for u in self.units[:unit_index])

    def split_unit(self, depth: int) -> int:
        """Number of units making up layers 1..depth; ``depth`` must be a unit boundary."""
        if not self.registry.is_boundary(depth):
            raise ContractError(f"depth {depth} is not a module boundary; boundaries are {self.registry.boundaries()}")
        return self.registry.unit_of(depth) + 1

    def logits_with_taps(self, x: torch.Tensor, taps=()) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
        check_tensor4(x)
        taps = set(taps)
        unknown = taps - set(self.registry.indices)
        if unknown:
            raise KeyError(f"unknown tap indices {sorted(unknown)}; registry is 1..{len(self.registry)}")
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise ContractError(f"spatial size {tuple(x.shape[2:])} must be divisible by 8")
        return run_units(self.units, x, 0, taps)

    def forward_with_taps(self, x: torch.Tensor, taps=()) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
        logits, feats = self.logits_with_taps(x, taps)
        return softmax_channel(logits), feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_with_taps(x)[0]


def build_segmenter(cfg: SegmenterConfig | None = None, seed: int = 0) -> Segmenter:
    model = Segmenter(cfg or SegmenterConfig())
    model.reset_parameters(seed)
    return model


def depth_presets(model: Segmenter) -> dict[str, int]:
    """Named adaptation depths at residual-module ends: shallow/mid/deep = rm4/rm6/rm7."""
    reg = model.registry
    return {"shallow": reg.last_of("rm4"), "mid": reg.last_of("rm6"), "deep": reg.last_of("rm7")}


def resolve_depth(model: Segmenter, depth: int | str) -> int:
    if isinstance(depth, str) and not depth.isdigit():
        presets = depth_presets(model)
        if depth not in presets:
            raise ConfigError(f"unknown depth preset {depth!r}; choose from {sorted(presets)} or an index")
        return presets[depth]
    d = int(depth)
    model.split_unit(d)
    return d
