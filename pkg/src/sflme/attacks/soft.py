"""Soft labels from per-label gradient similarity."""

from __future__ import annotations

import torch


def _cosines(e: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """cos(e^k, e^c) for every k, batched over the leading axis; zero-norm pairs give 0."""
    ref = e[torch.arange(len(e)), c]
    dots = torch.einsum("bkd,bd->bk", e, ref)
    norms = e.norm(dim=2) * ref.norm(dim=1, keepdim=True)
    return torch.where(norms > 0, dots / torch.where(norms > 0, norms, torch.ones_like(norms)), torch.zeros_like(dots))


def soft_labels_batch(grads: torch.Tensor, true_class: torch.Tensor, alpha: float) -> torch.Tensor:
    """``grads`` is (batch, classes, dim); returns (batch, classes) distributions."""
    if not 0.5 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0.5, 1], got {alpha}")
    if grads.dim() != 3:
        raise ValueError("gradients must be (batch, classes, dim)")
    e = grads.to(torch.float64)
    c = torch.as_tensor(true_class, dtype=torch.long).reshape(-1)
    b, k, _ = e.shape
    cos = _cosines(e, c)
    others = torch.ones(b, k, dtype=torch.bool)
    others[torch.arange(b), c] = False
    denom = ((cos + 1.0) * others).sum(1, keepdim=True)
    tail = torch.where(denom > 0, (1.0 - alpha) * cos / torch.where(denom > 0, denom, torch.ones_like(denom)), torch.zeros_like(cos))
    q = tail.clamp_min(0.0) * others
    q[torch.arange(b), c] = alpha
    return q / q.sum(1, keepdim=True)


def compute_soft_labels(grads, true_class: int, alpha: float = 0.9) -> torch.Tensor:
    """One soft label from the N_C gradient vectors of a single sample."""
    e = torch.stack([torch.as_tensor(g).reshape(-1) for g in grads]) if not torch.is_tensor(grads) else grads.reshape(len(grads), -1)
    if not 0 <= true_class < len(e):
        raise ValueError(f"true class {true_class} outside [0, {len(e)})")
    return soft_labels_batch(e.unsqueeze(0), torch.tensor([true_class]), alpha)[0]
