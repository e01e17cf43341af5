"""Differentiable primitives used by both embedders and the loss.

Everything here is a thin functional layer over torch autograd: each primitive
fixes the exact forward semantics the networks rely on (shapes, padding,
bias conventions, masking) and leaves gradient bookkeeping to torch.
``grad_check`` is an independent central-difference harness for verifying
those gradients in float64.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
NORM_EPS = 1e-12


class ShapeError(ValueError):
    pass


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid cross-correlation along time for time-major input ``(..., T, C_in)``."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    c_out, c_in, k = weight.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"expected {c_in} input channels, got {x.shape[-1]}")
    if x.shape[-2] < k:
        raise ShapeError("sequence shorter than kernel")
    unbatched = x.dim() == 2
    if unbatched:
        x = x.unsqueeze(0)
    y = F.conv1d(x.transpose(1, 2), weight, bias, stride=stride).transpose(1, 2)
    return y.squeeze(0) if unbatched else y


def conv_output_length(length: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Bias-free 2-D convolution on ``(B, C, H, W)`` or ``(C, H, W)``."""
    if x.shape[-3] != weight.shape[1]:
        raise ShapeError(f"expected {weight.shape[1]} input channels, got {x.shape[-3]}")
    k = weight.shape[-1]
    if min(x.shape[-2:]) + 2 * padding < k:
        raise ShapeError("spatial size smaller than kernel")
    return F.conv2d(x, weight, None, stride=stride, padding=padding)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear expects {weight.shape[1]} features, got {x.shape[-1]}")
    return F.linear(x, weight, bias)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
) -> Tensor:
    """Per-channel batch normalization; updates running stats in place when training."""
    if x.dim() != 4:
        raise ShapeError("batchnorm2d expects (B, C, H, W)")
    if training and x.shape[0] * x.shape[2] * x.shape[3] < 2:
        raise ShapeError("batch statistics need at least two values per channel")
    return F.batch_norm(
        x, running_mean, running_var, gamma, beta, training=training, momentum=BN_MOMENTUM, eps=BN_EPS
    )


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def tanh_op(x: Tensor) -> Tensor:
    return torch.tanh(x)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def softmax(x: Tensor, axis: int = -1, mask: Tensor | None = None) -> Tensor:
    """Max-subtracted softmax; positions where ``mask`` is False get zero weight."""
    if mask is not None:
        x = x.masked_fill(~mask, float("-inf"))
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def pool(x: Tensor, kind: str, window: int = 2, stride: int | None = None, padding: int = 0) -> Tensor:
    if kind == "global_avg":
        return x.mean(dim=(-2, -1))
    stride = window if stride is None else stride
    if kind == "max":
        return F.max_pool2d(x, window, stride, padding)
    if kind == "avg":
        return F.avg_pool2d(x, window, stride, padding)
    raise ValueError(f"unknown pool kind {kind!r}")


def l2_normalize(x: Tensor, dim: int = -1) -> Tensor:
    norm = torch.linalg.vector_norm(x, dim=dim, keepdim=True)
    if bool((norm <= NORM_EPS).any()):
        raise ValueError("degenerate norm")
    return x / norm


def gru_direction(
    gates_x: Tensor,
    w_hh: Tensor,
    b_hh: Tensor,
    mask: Tensor | None,
    reverse: bool,
) -> Tensor:
    """Run one GRU direction given precomputed input projections ``(B, T, 3h)``.

    Hidden state is carried unchanged through masked steps, so a reversed
    pass over right-padded input starts at each sequence's last valid frame.
    """
    batch, steps, three_h = gates_x.shape
    h_size = three_h // 3
    h = gates_x.new_zeros(batch, h_size)
    outputs: list[Tensor] = [None] * steps  # type: ignore[list-item]
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        gx = gates_x[:, t]
        gh = F.linear(h, w_hh, b_hh)
        r = torch.sigmoid(gx[:, :h_size] + gh[:, :h_size])
        z = torch.sigmoid(gx[:, h_size : 2 * h_size] + gh[:, h_size : 2 * h_size])
        n = torch.tanh(gx[:, 2 * h_size :] + r * gh[:, 2 * h_size :])
        h_new = (1.0 - z) * n + z * h
        if mask is not None:
            valid = mask[:, t].unsqueeze(1)
            h_new = torch.where(valid, h_new, h)
            outputs[t] = h_new * valid
        else:
            outputs[t] = h_new
        h = h_new
    return torch.stack(outputs, dim=1)


def bigru_layer(x: Tensor, params: Mapping[str, Tensor], mask: Tensor | None = None) -> Tensor:
    """Bidirectional GRU over ``(B, T, d_in)``; returns ``(B, T, 2h)`` as [forward, backward].

    ``params`` holds ``weight_ih``, ``weight_hh``, ``bias_ih``, ``bias_hh`` for each
    direction, suffixed ``_fwd`` / ``_bwd``; gate rows are ordered (r, z, n).
    """
    if x.shape[1] == 0:
        raise ShapeError("empty sequence")
    halves = []
    for suffix, reverse in (("fwd", False), ("bwd", True)):
        gates_x = F.linear(x, params[f"weight_ih_{suffix}"], params[f"bias_ih_{suffix}"])
        halves.append(
            gru_direction(gates_x, params[f"weight_hh_{suffix}"], params[f"bias_hh_{suffix}"], mask, reverse)
        )
    return torch.cat(halves, dim=-1)


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(param) into every leaf's ``.grad``."""
    if output.numel() != 1:
        raise ValueError("backward needs a scalar output")
    output.reshape(()).backward()


class ParamStore(Mapping[str, Tensor]):
    """Named parameters with stable iteration order."""

    def __init__(self, items: Iterable[tuple[str, Tensor]] = ()):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        for name, tensor in items:
            if name in self._params:
                raise KeyError(f"duplicate parameter name {name!r}")
            self._params[name] = tensor

    @classmethod
    def from_modules(cls, **modules: nn.Module) -> "ParamStore":
        return cls(
            (f"{prefix}.{name}", p) for prefix, m in modules.items() for name, p in m.named_parameters()
        )

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def numel(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grads(self) -> dict[str, Tensor]:
        return {
            name: p.grad if p.grad is not None else torch.zeros_like(p) for name, p in self._params.items()
        }


def grad_check(
    f: Callable[[], Tensor],
    params: ParamStore,
    seed: int = 0,
    step: float = 1e-5,
    max_coords: int | None = None,
) -> float:
    """Max relative error between autograd and central differences.

    ``f`` re-evaluates the scalar objective from the current parameter values.
    With ``max_coords`` set, that many coordinates per tensor are sampled
    (seeded); otherwise every coordinate is perturbed.
    """
    for p in params.values():
        if p.dtype != torch.float64:
            raise TypeError("grad_check needs float64 parameters")
    params.zero_grad()
    backward(f())
    analytic = {name: g.detach().clone() for name, g in params.grads().items()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            n = flat.numel()
            if max_coords is not None and n > max_coords:
                coords = rng.choice(n, size=max_coords, replace=False)
            else:
                coords = range(n)
            grad = analytic[name].view(-1)
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + step
                plus = f().item()
                flat[i] = orig - step
                minus = f().item()
                flat[i] = orig
                numeric = (plus - minus) / (2 * step)
                err = abs(grad[i].item() - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    params.zero_grad()
    return worst
