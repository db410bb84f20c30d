"""Training objectives: hybrid CE + soft Dice segmentation loss and the Wasserstein adversarial pair."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

Features = Mapping[int, torch.Tensor]
Critic = Callable[[Features], torch.Tensor]


@dataclass(frozen=True)
class SegLossConfig:
    class_weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)
    lam: float = 1.0
    eps: float = 1e-6
    reduction: str = "mean"  # cross-entropy over pixels: "sum" or "mean"

    def __post_init__(self) -> None:
        if any(w < 0 for w in self.class_weights):
            raise ValueError("class weights must be >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")


def _one_hot(labels: torch.Tensor, num_classes: int, dtype: torch.dtype) -> torch.Tensor:
    labels = labels.long()
    if labels.dim() == 2:
        labels = labels[None]
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range [{int(labels.min())}, {int(labels.max())}]")
    return torch.nn.functional.one_hot(labels, num_classes).permute(0, 3, 1, 2).to(dtype)


def weighted_ce(probs: torch.Tensor, labels: torch.Tensor, weights: Sequence[float], reduction: str = "sum") -> torch.Tensor:
    """-sum_i sum_c w_c y_ic log p_ic for probs (n, C, h, w) and integer labels (n, h, w)."""
    c = probs.shape[1]
    if len(weights) != c:
        raise ValueError(f"need {c} class weights, got {len(weights)}")
    y = _one_hot(labels, c, probs.dtype)
    w = torch.as_tensor(weights, dtype=probs.dtype).view(1, c, 1, 1)
    logp = torch.log(probs.clamp_min(torch.finfo(probs.dtype).tiny))
    total = -(w * y * logp).sum()
    if reduction == "mean":
        return total / (probs.shape[0] * probs.shape[2] * probs.shape[3])
    return total


def soft_dice_terms(probs: torch.Tensor, labels: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Per-class soft Dice ratios 2 sum(y p) / (sum y^2 + sum p^2 + eps), shape (C,)."""
    y = _one_hot(labels, probs.shape[1], probs.dtype)
    dims = (0, 2, 3)
    return 2 * (y * probs).sum(dims) / ((y * y).sum(dims) + (probs * probs).sum(dims) + eps)


def soft_dice(probs: torch.Tensor, labels: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return -soft_dice_terms(probs, labels, eps).sum()


def seg_loss(probs: torch.Tensor, labels: torch.Tensor, cfg: SegLossConfig) -> torch.Tensor:
    ce = weighted_ce(probs, labels, cfg.class_weights, cfg.reduction)
    if cfg.lam == 0:
        return ce
    return ce + cfg.lam * soft_dice(probs, labels, cfg.eps)


def inverse_frequency_weights(label_maps: Sequence[np.ndarray], num_classes: int) -> tuple[float, ...]:
    """Inverse class frequency normalised to mean 1; absent classes get the largest weight seen."""
    counts = np.zeros(num_classes, dtype=np.float64)
    for lm in label_maps:
        counts += np.bincount(np.asarray(getattr(lm, "data", lm)).ravel(), minlength=num_classes)[:num_classes]
    present = counts > 0
    if not present.any():
        return (1.0,) * num_classes
    inv = np.zeros(num_classes)
    inv[present] = counts[present].sum() / counts[present]
    inv[~present] = inv[present].max()
    inv /= inv.mean()
    return tuple(float(v) for v in inv)


def dam_loss(dcm: Critic, features_g: Features) -> torch.Tensor:
    """Adapter objective: -E[D(target features)]."""
    return -dcm(features_g).mean()


def dcm_loss(dcm: Critic, features_g: Features, features_s: Features) -> torch.Tensor:
    """Critic objective: E[D(target)] - E[D(source)]; its negation estimates W(P_s, P_g)."""
    return dcm(features_g).mean() - dcm(features_s).mean()


def wasserstein_1d(a: Sequence[float], b: Sequence[float]) -> float:
    """Exact empirical 1-Wasserstein distance between equal-size 1-D samples."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size != b.size:
        raise ValueError(f"sample sizes differ: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("need at least one sample")
    return float(np.abs(a - b).mean())
