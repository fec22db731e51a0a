"""Forward and reverse passes over a list of units.

The reverse pass is written out by hand in differentiable tensor operations.
First-order callers run it on plain tensors; the gradient-matching path runs
it on parameters that require grad so that autograd can take a second
reverse pass through it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch.nn.grad import conv2d_weight

from .units import CONV2D, FLATTEN, LINEAR, MAXPOOL, RELU, EngineError, Params, ShapeError, UnitSpec

SECOND_ORDER_KINDS = frozenset({LINEAR, CONV2D, RELU, MAXPOOL, FLATTEN})


@dataclass
class Trace:
    """Activations of one forward call; ``activations[0]`` is the input."""

    activations: list[torch.Tensor]
    caches: list[dict] = field(default_factory=list)

    @property
    def output(self) -> torch.Tensor:
        return self.activations[-1]


def _check_input(index: int, unit: UnitSpec, x: torch.Tensor) -> None:
    if unit.kind == LINEAR:
        feats = x[0].numel() if x.dim() > 1 else -1
        if x.dim() < 2 or feats != unit.in_dim:
            raise ShapeError(index, unit, f"expects {unit.in_dim} features per sample, got {tuple(x.shape)}")
    elif unit.kind == CONV2D:
        if x.dim() != 4 or x.shape[1] != unit.in_dim:
            raise ShapeError(index, unit, f"expects (B, {unit.in_dim}, H, W), got {tuple(x.shape)}")
    elif unit.kind == MAXPOOL:
        if x.dim() != 4 or x.shape[2] < 2 or x.shape[3] < 2:
            raise ShapeError(index, unit, f"cannot pool {tuple(x.shape)}")


def _pool(h: torch.Tensor, cache: dict) -> torch.Tensor:
    out, idx = F.max_pool2d(h, 2, return_indices=True)
    cache["pool_idx"] = idx
    cache["pool_in"] = tuple(h.shape[-2:])
    return out


def _unpool(g: torch.Tensor, cache: dict) -> torch.Tensor:
    return F.max_unpool2d(g, cache["pool_idx"], 2, output_size=cache["pool_in"])


def forward(units: Sequence[UnitSpec], params: Params, x: torch.Tensor) -> Trace:
    trace = Trace([x])
    h = x
    for i, unit in enumerate(units):
        _check_input(i, unit, h)
        cache: dict = {}
        if unit.kind == LINEAR:
            w, b = params[i]
            z = h.reshape(h.shape[0], -1) @ w.t() + b
            if unit.relu:
                cache["z"] = z
                z = torch.relu(z)
            h = z
        elif unit.kind == CONV2D:
            w, b = params[i]
            z = F.conv2d(h, w, b, stride=unit.stride, padding=unit.pad)
            if unit.relu:
                cache["z"] = z
                z = torch.relu(z)
            if unit.pool:
                z = _pool(z, cache)
            h = z
        elif unit.kind == RELU:
            cache["z"] = h
            h = torch.relu(h)
        elif unit.kind == MAXPOOL:
            h = _pool(h, cache)
        elif unit.kind == FLATTEN:
            h = h.reshape(h.shape[0], -1)
        trace.activations.append(h)
        trace.caches.append(cache)
    return trace


def logits(units: Sequence[UnitSpec], params: Params, x: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return forward(units, params, x).output


def backward(
    units: Sequence[UnitSpec],
    params: Params,
    trace: Trace | None,
    upstream: torch.Tensor,
    param_grads: bool = True,
) -> tuple[Params, torch.Tensor]:
    """Reverse pass. Returns parameter gradients and the gradient at the input."""
    if trace is None or len(trace.activations) != len(units) + 1 or len(trace.caches) != len(units):
        raise EngineError("backward needs the activation cache of a matching forward call")
    if upstream.shape != trace.output.shape:
        raise EngineError(f"upstream gradient {tuple(upstream.shape)} does not match output {tuple(trace.output.shape)}")
    grads: Params = {}
    g = upstream
    for i in range(len(units) - 1, -1, -1):
        unit = units[i]
        x = trace.activations[i]
        cache = trace.caches[i]
        if unit.kind == LINEAR:
            w, _ = params[i]
            if unit.relu:
                g = g * (cache["z"] > 0).to(g.dtype)
            if param_grads:
                grads[i] = (g.t() @ x.reshape(x.shape[0], -1), g.sum(0))
            g = (g @ w).reshape(x.shape)
        elif unit.kind == CONV2D:
            w, _ = params[i]
            if unit.pool:
                g = _unpool(g, cache)
            if unit.relu:
                g = g * (cache["z"] > 0).to(g.dtype)
            if param_grads:
                gw = conv2d_weight(x, w.shape, g, stride=unit.stride, padding=unit.pad)
                grads[i] = (gw, g.sum((0, 2, 3)))
            out_h = (g.shape[2] - 1) * unit.stride - 2 * unit.pad + unit.kernel
            out_w = (g.shape[3] - 1) * unit.stride - 2 * unit.pad + unit.kernel
            g = F.conv_transpose2d(
                g, w, stride=unit.stride, padding=unit.pad,
                output_padding=(x.shape[2] - out_h, x.shape[3] - out_w),
            )
        elif unit.kind == RELU:
            g = g * (cache["z"] > 0).to(g.dtype)
        elif unit.kind == MAXPOOL:
            g = _unpool(g, cache)
        elif unit.kind == FLATTEN:
            g = g.reshape(x.shape)
    return grads, g


def softmax(z: torch.Tensor) -> torch.Tensor:
    return torch.softmax(z, dim=1)


def _targets(z: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    n_classes = z.shape[1]
    if labels.dim() == 1:
        if labels.numel() != z.shape[0]:
            raise EngineError("one label per sample required")
        if labels.numel() and (int(labels.max()) >= n_classes or int(labels.min()) < 0):
            raise EngineError(f"label index out of range for {n_classes} classes")
        return F.one_hot(labels.long(), n_classes).to(z.dtype)
    if labels.shape != z.shape:
        raise EngineError(f"soft targets {tuple(labels.shape)} do not match logits {tuple(z.shape)}")
    return labels.to(z.dtype)


def cross_entropy(z: torch.Tensor, labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits.

    ``labels`` holds class indices (shape ``(B,)``) or distributions (``(B, C)``).
    """
    if z.dim() != 2:
        raise EngineError(f"logits must be (batch, classes), got {tuple(z.shape)}")
    target = _targets(z, labels)
    logp = torch.log_softmax(z, dim=1)
    loss = -(target * logp).sum() / z.shape[0]
    grad = (torch.softmax(z, dim=1) - target) / z.shape[0]
    return loss, grad


def per_sample_cross_entropy(z: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return -(_targets(z, labels) * torch.log_softmax(z, dim=1)).sum(1)


def input_gradient(units: Sequence[UnitSpec], params: Params, x: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Gradient of the batch-mean cross-entropy w.r.t. the input."""
    trace = forward(units, params, x)
    _, g = cross_entropy(trace.output, labels)
    return backward(units, params, trace, g, param_grads=False)[1]


def _check_second_order(units: Sequence[UnitSpec]) -> None:
    for i, unit in enumerate(units):
        if unit.kind not in SECOND_ORDER_KINDS:
            raise EngineError(f"unit {i} ({unit.kind}) is not supported on the second-order path")


def gm_loss(units: Sequence[UnitSpec], params: Params, a: torch.Tensor, labels: torch.Tensor, target_grad: torch.Tensor) -> torch.Tensor:
    """Squared distance between this model's input gradient and ``target_grad``."""
    _check_second_order(units)
    g = input_gradient(units, params, a, labels)
    return ((g - target_grad) ** 2).sum()


def second_order_input_grad_backward(
    units: Sequence[UnitSpec],
    params: Params,
    a: torch.Tensor,
    labels: torch.Tensor,
    target_grad: torch.Tensor,
) -> tuple[torch.Tensor, Params]:
    """Gradient-matching loss and its gradient w.r.t. every parameter.

    ``target_grad`` is the input gradient of the batch-mean cross-entropy for
    exactly this batch (what the server returns for the same query).
    """
    _check_second_order(units)
    if target_grad.shape != a.shape:
        raise EngineError("target gradient must match the input shape")
    with torch.enable_grad():
        leaves = {i: (w.detach().requires_grad_(True), b.detach().requires_grad_(True)) for i, (w, b) in params.items()}
        trace = forward(units, leaves, a.detach())
        target = _targets(trace.output, labels)
        g_logits = (torch.softmax(trace.output, dim=1) - target) / a.shape[0]
        _, g_in = backward(units, leaves, trace, g_logits, param_grads=False)
        loss = ((g_in - target_grad) ** 2).sum()
        keys = sorted(leaves)
        flat = [t for i in keys for t in leaves[i]]
        if not flat:
            return loss.detach(), {}
        got = torch.autograd.grad(loss, flat, allow_unused=True)
    grads: Params = {}
    for n, i in enumerate(keys):
        gw, gb = got[2 * n], got[2 * n + 1]
        w, b = leaves[i]
        grads[i] = (
            torch.zeros_like(w) if gw is None else gw.detach(),
            torch.zeros_like(b) if gb is None else gb.detach(),
        )
    return loss.detach(), grads
