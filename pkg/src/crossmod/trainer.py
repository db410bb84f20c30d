"""Supervised source training, alternating Wasserstein adaptation, and volume inference."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .adaptation import (
    AdaptationConfig,
    DomainAdapter,
    DomainCritic,
    adapted_forward,
    build_dam,
    build_dcm,
    clip_weights,
    feature_shapes,
    freeze,
    source_features,
)
from .losses import SegLossConfig, dam_loss, dcm_loss, soft_dice, weighted_ce
from .metrics import aggregate, evaluate_case, MetricsReport
from .phantomgen import AugmentConfig, LabelMap, Volume, augment, pad_slices, sample_stack
from .segmenter import Segmenter
from .tensor_nn import NonFiniteError

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


def step_decay(base_lr: float, decay: float, every: int, step: int) -> float:
    """Learning rate ``base_lr * decay ** (step // every)`` (steps are 0-based)."""
    return base_lr * decay ** (step // every)


@dataclass
class SourceTrainConfig:
    batch_size: int = 5
    lr: float = 1e-3
    decay: float = 0.95
    decay_every: int = 1500
    max_iters: int = 3000
    seed: int = 0
    augment: bool = True
    lam: float = 1.0

    def __post_init__(self) -> None:
        if min(self.batch_size, self.lr, self.decay, self.decay_every, self.max_iters) <= 0:
            raise ValueError("source training settings must be positive")


@dataclass
class AdversarialTrainConfig:
    batch_size: int = 5
    lr: float = 3e-4
    decay: float = 0.98
    decay_every: int = 100
    max_joint_updates: int = 200
    seed: int = 0
    augment: bool = True
    rmsprop_alpha: float = 0.99
    # "dcm_per_dam": n critic steps then one adapter step; "dam_per_dcm": the reverse reading
    ratio_mode: str = "dcm_per_dam"

    def __post_init__(self) -> None:
        if min(self.batch_size, self.lr, self.decay, self.decay_every, self.max_joint_updates) <= 0:
            raise ValueError("adversarial training settings must be positive")
        if self.ratio_mode not in ("dcm_per_dam", "dam_per_dcm"):
            raise ValueError(f"unknown ratio_mode {self.ratio_mode!r}")


class SliceSampler:
    """Random 3-slice stacks (optionally augmented) drawn from a list of cases."""

    def __init__(
        self,
        volumes: Sequence[Volume],
        labels: Sequence[LabelMap] | None,
        batch_size: int,
        rng: np.random.Generator,
        augment_cfg: AugmentConfig | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        if not volumes:
            raise ValueError("sampler needs at least one volume")
        self.volumes = list(volumes)
        self.labels = None if labels is None else list(labels)
        self.batch_size = batch_size
        self.rng = rng
        self.augment_cfg = augment_cfg
        self.dtype = dtype

    def __call__(self) -> tuple[torch.Tensor, torch.Tensor | None]:
        xs, ys = [], []
        for _ in range(self.batch_size):
            k = int(self.rng.integers(len(self.volumes)))
            vol = self.volumes[k]
            idx = int(self.rng.integers(1, vol.shape[0] - 1))
            x, y = sample_stack(vol, None if self.labels is None else self.labels[k], idx)
            x = x[0]
            if self.augment_cfg is not None:
                y_in = y if y is not None else np.zeros(x.shape[1:], dtype=np.int64)
                x, y_aug = augment(x, y_in, self.rng, self.augment_cfg)
                y = y_aug if y is not None else None
            xs.append(x)
            ys.append(y)
        xb = torch.from_numpy(np.stack(xs)).to(self.dtype)
        yb = None if ys[0] is None else torch.from_numpy(np.stack(ys).astype(np.int64))
        return xb, yb


class CsvLog:
    def __init__(self, path: Path | str | None, fields: Sequence[str]):
        self.rows: list[dict] = []
        self.fields = list(fields)
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=self.fields)
            self._writer.writeheader()

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow(row)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _param_dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


@dataclass
class TrainResult:
    model: Segmenter
    curve: list[dict]
    iterations: int = 0


def train_source(
    model: Segmenter,
    volumes: Sequence[Volume],
    labels: Sequence[LabelMap],
    cfg: SourceTrainConfig,
    class_weights: Sequence[float] | None = None,
    log_path: Path | str | None = None,
    checkpoint_dir: Path | str | None = None,
) -> TrainResult:
    """Adam on the hybrid CE + Dice loss with stepped learning-rate decay."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    c = model.cfg.num_classes
    loss_cfg = SegLossConfig(tuple(class_weights) if class_weights is not None else (1.0,) * c, cfg.lam)
    sampler = SliceSampler(
        volumes, labels, cfg.batch_size, rng, AugmentConfig() if cfg.augment else None, _param_dtype(model)
    )
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    curve = CsvLog(log_path, ["iteration", "lr", "loss", "ce", "dice"])
    last_good = copy.deepcopy(model.state_dict())
    model.train()
    try:
        for it in range(cfg.max_iters):
            lr = step_decay(cfg.lr, cfg.decay, cfg.decay_every, it)
            for g in opt.param_groups:
                g["lr"] = lr
            x, y = sampler()
            try:
                probs = model(x)
                ce = weighted_ce(probs, y, loss_cfg.class_weights, loss_cfg.reduction)
                dice = soft_dice(probs, y, loss_cfg.eps)
                loss = ce + loss_cfg.lam * dice
            except NonFiniteError:
                loss = torch.tensor(math.nan)
            if not torch.isfinite(loss):
                model.load_state_dict(last_good)
                saved = _save_last_good(checkpoint_dir, {"segmenter": model}, {"iteration": it})
                raise TrainingDiverged(f"non-finite source loss at iteration {it}", saved)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            curve.append({"iteration": it, "lr": lr, "loss": loss.item(), "ce": ce.item(), "dice": dice.item()})
            if it % 50 == 0:
                last_good = copy.deepcopy(model.state_dict())
            if it % 250 == 0:
                log.info("source iter %d lr %.3g loss %.4f", it, lr, loss.item())
    finally:
        curve.close()
    model.eval()
    return TrainResult(model, curve.rows, cfg.max_iters)


def _save_last_good(directory, models, meta) -> Path | None:
    if directory is None:
        return None
    return ckpt.save_checkpoint(Path(directory) / "last_good", models, meta)


@dataclass
class AdaptResult:
    dam: DomainAdapter
    dcm: DomainCritic
    cfg: AdaptationConfig
    curve: list[dict]
    dcm_steps: int = 0
    dam_steps: int = 0
    max_abs_critic_param: list[float] = field(default_factory=list)


def adapt_adversarial(
    source: Segmenter,
    source_volumes: Sequence[Volume],
    target_volumes: Sequence[Volume],
    adv_cfg: AdversarialTrainConfig,
    adapt_cfg: AdaptationConfig,
    log_path: Path | str | None = None,
    checkpoint_dir: Path | str | None = None,
    on_step: Callable[[str, AdaptResult], None] | None = None,
) -> AdaptResult:
    """Alternate critic and adapter updates with RMSProp; the source model is never modified.

    Only images are consumed from either domain.  ``on_step`` (if given) is called
    after every critic and adapter update with the step kind and the running result.
    """
    cfg = adapt_cfg.resolve(source)
    torch.manual_seed(adv_cfg.seed)
    rng = np.random.default_rng(adv_cfg.seed)
    dtype = _param_dtype(source)
    aug = AugmentConfig() if adv_cfg.augment else None
    sample_s = SliceSampler(source_volumes, None, adv_cfg.batch_size, rng, aug, dtype)
    sample_t = SliceSampler(target_volumes, None, adv_cfg.batch_size, rng, aug, dtype)

    dam = build_dam(source, cfg.depth)
    hw = tuple(source_volumes[0].shape[1:])
    dcm = build_dcm(cfg, feature_shapes(source, cfg, hw), seed=adv_cfg.seed).to(dtype)
    clip_weights(dcm, cfg.clip_c)

    opt_dam = torch.optim.RMSprop(dam.parameters(), lr=adv_cfg.lr, alpha=adv_cfg.rmsprop_alpha, eps=1e-8)
    opt_dcm = torch.optim.RMSprop(dcm.parameters(), lr=adv_cfg.lr, alpha=adv_cfg.rmsprop_alpha, eps=1e-8)
    result = AdaptResult(dam, dcm, cfg, [])
    curve = CsvLog(log_path, ["joint_update", "lr", "dcm_loss", "dam_loss", "critic_estimate", "dcm_steps", "dam_steps"])
    n_dcm, n_dam = (cfg.n_dcm_per_dam, 1) if adv_cfg.ratio_mode == "dcm_per_dam" else (1, cfg.n_dcm_per_dam)

    was_frozen = [p.requires_grad for p in source.parameters()]
    freeze(source)
    try:
        for j in range(adv_cfg.max_joint_updates):
            lr = step_decay(adv_cfg.lr, adv_cfg.decay, adv_cfg.decay_every, j)
            for opt in (opt_dam, opt_dcm):
                for g in opt.param_groups:
                    g["lr"] = lr

            freeze(dcm, False)
            for _ in range(n_dcm):
                xs, _ = sample_s()
                xt, _ = sample_t()
                try:
                    with torch.no_grad():
                        fs = source_features(source, xs, cfg)
                        fg = adapted_forward(dam, source, xt, cfg)[1]
                    l_dcm = dcm_loss(dcm, fg, fs)
                except NonFiniteError:
                    l_dcm = torch.tensor(math.nan)
                _check_finite(l_dcm, "critic", j, checkpoint_dir, dam, dcm)
                opt_dcm.zero_grad(set_to_none=True)
                l_dcm.backward()
                opt_dcm.step()
                clip_weights(dcm, cfg.clip_c)
                result.dcm_steps += 1
                if on_step:
                    on_step("dcm", result)

            freeze(dcm, True)
            for _ in range(n_dam):
                xt, _ = sample_t()
                try:
                    l_dam = dam_loss(dcm, adapted_forward(dam, source, xt, cfg)[1])
                except NonFiniteError:
                    l_dam = torch.tensor(math.nan)
                _check_finite(l_dam, "adapter", j, checkpoint_dir, dam, dcm)
                opt_dam.zero_grad(set_to_none=True)
                l_dam.backward()
                opt_dam.step()
                result.dam_steps += 1
                if on_step:
                    on_step("dam", result)

            result.max_abs_critic_param.append(max(p.abs().max().item() for p in dcm.parameters()))
            curve.append(
                {
                    "joint_update": j,
                    "lr": lr,
                    "dcm_loss": l_dcm.item(),
                    "dam_loss": l_dam.item(),
                    "critic_estimate": -l_dcm.item(),
                    "dcm_steps": result.dcm_steps,
                    "dam_steps": result.dam_steps,
                }
            )
            if j % 25 == 0:
                log.info("joint %d lr %.3g W-estimate %.5f", j, lr, -l_dcm.item())
    finally:
        curve.close()
        freeze(dcm, False)
        for p, flag in zip(source.parameters(), was_frozen):
            p.requires_grad_(flag)
    result.curve = curve.rows
    return result


def _check_finite(loss: torch.Tensor, what: str, step: int, checkpoint_dir, dam, dcm) -> None:
    if torch.isfinite(loss):
        return
    saved = _save_last_good(checkpoint_dir, {"dam": dam, "dcm": dcm}, {"joint_update": step})
    raise TrainingDiverged(f"non-finite {what} loss at joint update {step}", saved)


def fit_critic(
    dcm: nn.Module,
    feats_s: Mapping[int, torch.Tensor],
    feats_g: Mapping[int, torch.Tensor],
    steps: int,
    lr: float = 3e-4,
    clip_c: float = 0.03,
    batch_size: int = 64,
    seed: int = 0,
) -> float:
    """Train only the critic on fixed feature sets; return the estimate -dcm_loss on the full sets."""
    gen = torch.Generator().manual_seed(seed)
    n_s = next(iter(feats_s.values())).shape[0]
    n_g = next(iter(feats_g.values())).shape[0]
    opt = torch.optim.RMSprop(dcm.parameters(), lr=lr, alpha=0.99, eps=1e-8)
    clip_weights(dcm, clip_c)
    for _ in range(steps):
        i_s = torch.randint(n_s, (batch_size,), generator=gen)
        i_g = torch.randint(n_g, (batch_size,), generator=gen)
        loss = dcm_loss(dcm, {k: v[i_g] for k, v in feats_g.items()}, {k: v[i_s] for k, v in feats_s.items()})
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        clip_weights(dcm, clip_c)
    with torch.no_grad():
        return -dcm_loss(dcm, feats_g, feats_s).item()


# --- inference -------------------------------------------------------------------

Predictor = Callable[[torch.Tensor], torch.Tensor]


def segmenter_predictor(model: Segmenter) -> Predictor:
    return model


def adapted_predictor(dam: DomainAdapter, source: Segmenter, cfg: AdaptationConfig) -> Predictor:
    bare = replace(cfg.resolve(source), dam_taps=(), frozen_taps=())
    return lambda x: adapted_forward(dam, source, x, bare)[0]


@torch.no_grad()
def predict_volume(predict: Predictor, vol: Volume, batch: int = 16, dtype: torch.dtype = torch.float32) -> LabelMap:
    """Label every slice along axis 0 from its 3-slice stack (ends edge-replicated)."""
    padded = pad_slices(vol)
    out = np.empty(vol.shape, dtype=np.uint8)
    for start in range(0, vol.shape[0], batch):
        idx = range(start, min(start + batch, vol.shape[0]))
        x = np.concatenate([sample_stack(padded, None, i + 1)[0] for i in idx])
        probs = predict(torch.from_numpy(x).to(dtype))
        out[start : start + len(idx)] = probs.argmax(dim=1).cpu().numpy().astype(np.uint8)
    return LabelMap(out)


def evaluate(
    predict: Predictor,
    volumes: Sequence[Volume],
    labels: Sequence[LabelMap],
    num_classes: int,
    class_names: Mapping[int, str] | None = None,
    dtype: torch.dtype = torch.float32,
) -> MetricsReport:
    reports = []
    for vol, gt in zip(volumes, labels):
        pred = predict_volume(predict, vol, dtype=dtype)
        reports.append(evaluate_case(pred, gt, range(1, num_classes), vol.spacing))
    return aggregate(reports, class_names)
