"""Plug-and-play domain adapter (DAM), frozen source tail, and the Wasserstein domain critic (DCM)."""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace
from typing import Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from .segmenter import Segmenter, resolve_depth, run_units
from .tensor_nn import ContractError, check_tensor4, softmax_channel


@dataclass(frozen=True)
class AdaptationConfig:
    depth: int | str = "mid"
    dam_taps: tuple[int, ...] | None = None
    frozen_taps: tuple[int, ...] | None = None
    clip_c: float = 0.03
    n_dcm_per_dam: int = 20
    critic_width_cap: int = 128
    critic_base_width: int = 8

    def __post_init__(self) -> None:
        if self.clip_c <= 0:
            raise ValueError(f"clip_c must be > 0, got {self.clip_c}")
        if self.n_dcm_per_dam < 1:
            raise ValueError("n_dcm_per_dam must be >= 1")
        if self.critic_width_cap < 1 or self.critic_base_width < 1:
            raise ValueError("critic widths must be >= 1")

    def resolve(self, model: Segmenter) -> "AdaptationConfig":
        """Concrete integer depth and tap sets for ``model``, with invariants checked."""
        d = resolve_depth(model, self.depth)
        if d >= len(model.registry):
            raise ContractError(f"depth {d} leaves no frozen tail")
        dam_taps, frozen_taps = default_taps(model, d)
        a = tuple(sorted(self.dam_taps)) if self.dam_taps is not None else dam_taps
        h = tuple(sorted(self.frozen_taps)) if self.frozen_taps is not None else frozen_taps
        if not a and not h:
            raise ContractError("at least one feature tap is required")
        if set(a) & set(h):
            raise ContractError(f"DAM taps {a} and frozen taps {h} overlap")
        if a and (min(a) < 1 or max(a) > d):
            raise ContractError(f"DAM taps {a} must lie in 1..{d}")
        if h and (min(h) <= d or max(h) > len(model.registry)):
            raise ContractError(f"frozen taps {h} must lie in {d + 1}..{len(model.registry)}")
        return replace(self, depth=d, dam_taps=a, frozen_taps=h)

    @property
    def taps(self) -> tuple[int, ...]:
        return tuple(sorted((*self.dam_taps, *self.frozen_taps)))


def default_taps(model: Segmenter, depth: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """A = {depth}; H = first two of the rm6/rm7/up1/up2 outputs lying above ``depth``."""
    reg = model.registry
    candidates = [reg.last_of(r) for r in ("rm6", "rm7", "up1", "up2")]
    return (depth,), tuple(i for i in candidates if i > depth)[:2]


class DomainAdapter(nn.Module):
    """Trainable copy of source layers 1..depth."""

    def __init__(self, source: Segmenter, depth: int):
        super().__init__()
        n_units = source.split_unit(depth)
        self.depth = depth
        self.source_cfg = source.cfg
        self.units = copy.deepcopy(source.units[:n_units])

    def forward_with_taps(self, x: torch.Tensor, taps=()) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
        check_tensor4(x)
        bad = [t for t in taps if not 1 <= t <= self.depth]
        if bad:
            raise KeyError(f"DAM taps {bad} outside 1..{self.depth}")
        return run_units(self.units, x, 0, set(taps))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_with_taps(x)[0]


def build_dam(source: Segmenter, depth: int | str) -> DomainAdapter:
    return DomainAdapter(source, resolve_depth(source, depth))


def source_tail(source: Segmenter, depth: int) -> nn.ModuleList:
    return source.units[source.split_unit(depth):]


def adapted_forward(
    dam: DomainAdapter, source: Segmenter, x_t: torch.Tensor, cfg: AdaptationConfig
) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
    """Target prediction through DAM then the frozen source tail, plus critic features (M_A, F_H)."""
    if cfg.depth != dam.depth:
        raise ContractError(f"config depth {cfg.depth} != DAM depth {dam.depth}")
    h, feats = dam.forward_with_taps(x_t, cfg.dam_taps)
    logits, tail_feats = run_units(source_tail(source, dam.depth), h, dam.depth, set(cfg.frozen_taps))
    feats.update(tail_feats)
    return softmax_channel(logits), feats


def source_features(source: Segmenter, x_s: torch.Tensor, cfg: AdaptationConfig) -> dict[int, torch.Tensor]:
    """(M^s_A(x_s), F_H(x_s)): the same taps read from the source model's own layers."""
    return source.forward_with_taps(x_s, cfg.taps)[1]


def feature_shapes(source: Segmenter, cfg: AdaptationConfig, hw: tuple[int, int]) -> dict[int, tuple[int, int, int]]:
    p = next(source.parameters())
    with torch.no_grad():
        feats = source_features(source, torch.zeros(1, source.cfg.in_channels, *hw, dtype=p.dtype), cfg)
    return {k: tuple(v.shape[1:]) for k, v in feats.items()}


class CriticBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.conv_a = nn.Conv2d(in_ch, out_ch, 3, stride, 1)
        self.conv_b = nn.Conv2d(out_ch, out_ch, 3, 1, 1)
        self.proj = nn.Conv2d(in_ch, out_ch, 1, stride)

    def forward(self, x):
        return F.relu(self.conv_b(F.relu(self.conv_a(x))) + self.proj(x))


class DomainCritic(nn.Module):
    """Residual critic over multi-level features.

    Stage ``s`` runs at 1/2**s of the largest tap resolution.  Each tap joins (by
    channel concatenation) the first stage whose resolution fits inside it, pooled
    down if the sizes differ.  Widths double per stage up to ``width_cap``; the head
    is global average pooling followed by a linear layer to one score per sample.
    """

    def __init__(
        self,
        shapes: Mapping[int, tuple[int, int, int]],
        base_width: int = 32,
        width_cap: int = 128,
        extra_stages: int = 1,
    ):
        super().__init__()
        if not shapes:
            raise ContractError("critic needs at least one feature tap")
        self.shapes = {int(k): tuple(v) for k, v in shapes.items()}
        self.base_width, self.width_cap, self.extra_stages = base_width, width_cap, extra_stages
        h0 = max(s[1] for s in self.shapes.values())
        w0 = max(s[2] for s in self.shapes.values())

        def res(s):
            return (max(1, h0 >> s), max(1, w0 >> s))

        self.stage_taps: list[list[int]] = []
        self.stage_res: list[tuple[int, int]] = []
        for idx in sorted(self.shapes):
            _, h, w = self.shapes[idx]
            s = 0
            while res(s)[0] > h or res(s)[1] > w:
                s += 1
            while len(self.stage_taps) <= s:
                self.stage_taps.append([])
                self.stage_res.append(res(len(self.stage_res)))
            self.stage_taps[s].append(idx)
        for _ in range(extra_stages):
            self.stage_taps.append([])
            self.stage_res.append(res(len(self.stage_res)))

        blocks = []
        c = 0
        for s, taps in enumerate(self.stage_taps):
            in_ch = c + sum(self.shapes[i][0] for i in taps)
            c = min(base_width * 2**s, width_cap)
            stride = 2 if min(self.stage_res[s]) > 1 else 1
            blocks.append(CriticBlock(in_ch, c, stride))
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Linear(c, 1)

    @property
    def widths(self) -> list[int]:
        return [b.conv_b.out_channels for b in self.blocks]

    def forward(self, feats: Mapping[int, torch.Tensor]) -> torch.Tensor:
        missing = set(self.shapes) - set(feats)
        if missing:
            raise ContractError(f"critic missing features {sorted(missing)}")
        x = None
        for block, taps, r in zip(self.blocks, self.stage_taps, self.stage_res):
            parts = [] if x is None else [x]
            for i in taps:
                f = feats[i]
                if tuple(f.shape[1:]) != self.shapes[i]:
                    raise ContractError(f"feature {i} has shape {tuple(f.shape[1:])}, critic built for {self.shapes[i]}")
                parts.append(f if tuple(f.shape[2:]) == r else F.adaptive_avg_pool2d(f, r))
            if x is not None and tuple(x.shape[2:]) != r:
                parts[0] = F.adaptive_avg_pool2d(x, r)
            x = block(torch.cat(parts, dim=1))
        return self.head(x.mean(dim=(2, 3)))


def build_dcm(cfg: AdaptationConfig, shapes: Mapping[int, tuple[int, int, int]], seed: int = 0) -> DomainCritic:
    torch.manual_seed(seed)
    return DomainCritic(shapes, cfg.critic_base_width, cfg.critic_width_cap)


@torch.no_grad()
def clip_weights(dcm: nn.Module, c: float) -> None:
    if c <= 0:
        raise ValueError(f"clip bound must be > 0, got {c}")
    for p in dcm.parameters():
        p.clamp_(-c, c)


def freeze(module: nn.Module, frozen: bool = True) -> None:
    for p in module.parameters():
        p.requires_grad_(not frozen)
