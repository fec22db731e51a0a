"""SGD (with momentum) and Adam over a ``Params`` map, plus a milestone schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

from .units import EngineError, Params


@dataclass(frozen=True)
class MultiStep:
    """Multiply the base rate by ``factor`` once per milestone reached (0-based epochs)."""

    milestones: tuple[int, ...] = ()
    factor: float = 0.2

    def scale(self, epoch: int) -> float:
        passed = sum(1 for m in self.milestones if epoch >= m)
        return self.factor**passed


def scaled_milestones(epochs: int, fractions: Sequence[float] = (0.3, 0.6, 0.8)) -> tuple[int, ...]:
    """Milestones at the same fractions of training as 60/120/160 of 200 epochs."""
    return tuple(sorted({max(1, round(epochs * f)) for f in fractions if round(epochs * f) < epochs}))


@dataclass
class OptimizerState:
    kind: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: MultiStep = field(default_factory=MultiStep)
    epoch: int = 0
    step_count: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise EngineError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise EngineError("learning rate must be positive")

    @property
    def current_lr(self) -> float:
        return self.lr * self.schedule.scale(self.epoch)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch


def SGD(lr: float, momentum: float = 0.0, milestones: Sequence[int] = (), factor: float = 0.2) -> OptimizerState:
    return OptimizerState("sgd", lr=lr, momentum=momentum, schedule=MultiStep(tuple(milestones), factor))


def Adam(lr: float, milestones: Sequence[int] = (), factor: float = 0.2) -> OptimizerState:
    return OptimizerState("adam", lr=lr, schedule=MultiStep(tuple(milestones), factor))


def _update(state: OptimizerState, key, p: torch.Tensor, g: torch.Tensor, lr: float) -> torch.Tensor:
    if g.shape != p.shape:
        raise EngineError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)} at {key}")
    if state.kind == "sgd":
        if state.momentum:
            buf = state.buffers.get(key)
            buf = g.clone() if buf is None else buf * state.momentum + g
            state.buffers[key] = buf
            g = buf
        return p - lr * g
    m, v = state.buffers.get(key, (torch.zeros_like(p), torch.zeros_like(p)))
    m = state.beta1 * m + (1 - state.beta1) * g
    v = state.beta2 * v + (1 - state.beta2) * g * g
    state.buffers[key] = (m, v)
    t = state.step_count
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    return p - lr * m_hat / (v_hat.sqrt() + state.eps)


def optimizer_step(state: OptimizerState, params: Params, grads: Params) -> Params:
    """Return updated parameters; units absent from ``grads`` are left as they are."""
    state.step_count += 1
    lr = state.current_lr
    out: Params = {}
    for i, (w, b) in params.items():
        if i not in grads:
            out[i] = (w, b)
            continue
        gw, gb = grads[i]
        out[i] = (_update(state, (i, "w"), w, gw, lr), _update(state, (i, "b"), b, gb, lr))
    return out


def tensor_step(state: OptimizerState, key, p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Single-tensor update (input-space optimisation in the crafting attack)."""
    state.step_count += 1
    return _update(state, key, p, g, state.current_lr)


def add_grads(a: Params, b: Params) -> Params:
    if not a:
        return {i: (w.clone(), bb.clone()) for i, (w, bb) in b.items()}
    return {i: (a[i][0] + b[i][0], a[i][1] + b[i][1]) for i in a}
