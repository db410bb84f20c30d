"""Thin, shape-checked tensor ops on top of torch plus a finite-difference gradient checker.

All activations are rank-4 ``(batch, channels, rows, cols)`` tensors.  The ops here
validate their contracts and delegate the arithmetic to torch so that autograd
provides the analytic gradients that :func:`grad_check` verifies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F


class ContractError(ValueError):
    """Raised when a tensor violates an op's shape or value contract."""


class NonFiniteError(ContractError):
    """NaN or inf reached an op that requires finite input."""


def check_tensor4(x: torch.Tensor, name: str = "x") -> None:
    if x.dim() != 4:
        raise ContractError(f"{name}: expected rank-4 (n, c, h, w) tensor, got rank {x.dim()}")
    for dim_name, size in zip("nchw", x.shape):
        if size < 1:
            raise ContractError(f"{name}: dimension {dim_name} must be >= 1, got {size}")


def _pair(v: int | Sequence[int]) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    kh, kw = v
    return (int(kh), int(kw))


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kernel", _pair(self.kernel))
        if self.in_ch < 1 or self.out_ch < 1:
            raise ContractError(f"channel counts must be >= 1, got in_ch={self.in_ch} out_ch={self.out_ch}")
        if min(self.kernel) < 1:
            raise ContractError(f"kernel must be >= 1, got {self.kernel}")
        if self.stride < 1 or self.dilation < 1:
            raise ContractError(f"stride and dilation must be >= 1, got {self.stride}, {self.dilation}")
        if self.padding < 0:
            raise ContractError(f"padding must be >= 0, got {self.padding}")

    @classmethod
    def same(cls, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, dilation: int = 1) -> "ConvSpec":
        """Spec whose padding keeps the spatial size for stride 1 (odd kernels)."""
        return cls(in_ch, out_ch, (kernel, kernel), stride, dilation, dilation * (kernel - 1) // 2)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        oh = (h + 2 * self.padding - self.dilation * (kh - 1) - 1) // self.stride + 1
        ow = (w + 2 * self.padding - self.dilation * (kw - 1) - 1) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ContractError(f"input {h}x{w} too small for {self}: output would be {oh}x{ow}")
        return oh, ow

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_ch, self.in_ch, *self.kernel)


def conv2d(x: torch.Tensor, spec: ConvSpec, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    check_tensor4(x)
    if x.shape[1] != spec.in_ch:
        raise ContractError(f"conv2d: input channel dimension c={x.shape[1]} != spec.in_ch={spec.in_ch}")
    if tuple(weight.shape) != spec.weight_shape:
        names = ("out_ch", "in_ch", "kh", "kw")
        bad = [f"{n}: {a} != {b}" for n, a, b in zip(names, weight.shape, spec.weight_shape) if a != b]
        detail = ", ".join(bad) if bad else f"rank {weight.dim()}"
        raise ContractError(f"conv2d: weight shape {tuple(weight.shape)} mismatches spec ({detail})")
    if bias is not None and tuple(bias.shape) != (spec.out_ch,):
        raise ContractError(f"conv2d: bias length {tuple(bias.shape)} != out_ch={spec.out_ch}")
    spec.output_size(x.shape[2], x.shape[3])
    return F.conv2d(x, weight, bias, stride=spec.stride, padding=spec.padding, dilation=spec.dilation)


def softmax_channel(x: torch.Tensor) -> torch.Tensor:
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    check_tensor4(x)
    if x.shape[1] < 2:
        raise ContractError(f"softmax_channel: need c >= 2 channels, got {x.shape[1]}")
    if not torch.isfinite(x).all():
        raise NonFiniteError("softmax_channel: non-finite logits")
    shifted = x - x.amax(dim=1, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=1, keepdim=True)


def upsample2x(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Learnable 2x upsampling: transposed convolution, kernel 2, stride 2.

    ``weight`` has torch's transposed layout ``(in_ch, out_ch, 2, 2)``.
    """
    check_tensor4(x)
    if weight.dim() != 4 or tuple(weight.shape[2:]) != (2, 2):
        raise ContractError(f"upsample2x: weight must be (in_ch, out_ch, 2, 2), got {tuple(weight.shape)}")
    if weight.shape[0] != x.shape[1]:
        raise ContractError(f"upsample2x: input channel dimension c={x.shape[1]} != weight in_ch={weight.shape[0]}")
    if bias is not None and tuple(bias.shape) != (weight.shape[1],):
        raise ContractError(f"upsample2x: bias length {tuple(bias.shape)} != out_ch={weight.shape[1]}")
    return F.conv_transpose2d(x, weight, bias, stride=2)


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    worst_input: int = -1
    worst_index: tuple[int, ...] = ()
    message: str = ""

    def __bool__(self) -> bool:
        return self.passed


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    eps: float = 1e-3,
    tol: float = 1e-4,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients of ``fn`` against central finite differences.

    Non-scalar outputs are reduced with a fixed random linear functional.  The
    error is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)`` taken
    over the whole point (all inputs together), so an input whose true gradient is
    identically zero is judged against the gradient scale, not its own roundoff.
    The report locates the worst entry.  Run in double precision.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    inputs = [t.detach().clone().requires_grad_(True) for t in inputs]
    with torch.no_grad():
        probe = fn(*inputs)
    gen = torch.Generator().manual_seed(seed)
    weights = None
    if probe.numel() != 1:
        weights = torch.randn(probe.shape, generator=gen, dtype=probe.dtype)

    def scalar(*args: torch.Tensor) -> torch.Tensor:
        out = fn(*args)
        return out.sum() if weights is None else (out * weights).sum()

    value = scalar(*inputs)
    analytic = torch.autograd.grad(value, inputs, allow_unused=True)
    analytic = [torch.zeros_like(t) if g is None else g for t, g in zip(inputs, analytic)]

    numerics = []
    for k, (t, ga) in enumerate(zip(inputs, analytic)):
        if not torch.isfinite(ga).all():
            loc = tuple(int(i) for i in torch.nonzero(~torch.isfinite(ga))[0])
            return GradCheckReport(float("inf"), tol, False, k, loc, f"non-finite analytic gradient at input {k}{loc}")
        numeric = torch.zeros_like(t)
        flat = t.detach().view(-1)
        num_flat = numeric.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = scalar(*inputs).item()
                flat[i] = orig - eps
                down = scalar(*inputs).item()
                flat[i] = orig
                num_flat[i] = (up - down) / (2 * eps)
        if not torch.isfinite(numeric).all():
            loc = tuple(int(i) for i in torch.nonzero(~torch.isfinite(numeric))[0])
            return GradCheckReport(float("inf"), tol, False, k, loc, f"non-finite numeric gradient at input {k}{loc}")
        numerics.append(numeric)

    scale = max(max(g.abs().max().item(), n.abs().max().item()) for g, n in zip(analytic, numerics) if g.numel())
    if scale == 0.0:
        return GradCheckReport(0.0, tol, True)
    worst = GradCheckReport(0.0, tol, True)
    for k, (ga, numeric) in enumerate(zip(analytic, numerics)):
        if not ga.numel():
            continue
        diff = (ga - numeric).abs()
        rel = diff.max().item() / scale
        if rel > worst.max_rel_error:
            idx = tuple(int(i) for i in torch.nonzero(diff == diff.max())[0])
            worst = GradCheckReport(rel, tol, rel <= tol, k, idx)
    return worst
