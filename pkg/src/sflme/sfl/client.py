"""Client-side state and the view an attacker has of its own client model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch

from ..data import AugmentConfig, Dataset, augment
from ..nn import Trace, backward, forward
from ..nn.optim import OptimizerState, optimizer_step
from ..nn.units import Params, UnitSpec, clone_params
from ..rng import Streams


@dataclass
class ClientView:
    """White-box access to a client model: map inputs to the cut and gradients back."""

    units: list[UnitSpec]
    params: Params

    def forward(self, x: torch.Tensor) -> Trace:
        return forward(self.units, self.params, x)

    def activation(self, x: torch.Tensor, chunk: int = 1000) -> torch.Tensor:
        with torch.no_grad():
            return torch.cat([self.forward(x[i : i + chunk]).output for i in range(0, len(x), chunk)])

    def input_grad(self, trace: Trace, grad_a: torch.Tensor) -> torch.Tensor:
        return backward(self.units, self.params, trace, grad_a, param_grads=False)[1]


class QueryStrategy(Protocol):
    """How an attack consumes gradient queries, one batch at a time."""

    def wants_query(self) -> bool: ...

    def make_query(self, view: ClientView) -> tuple[torch.Tensor, torch.Tensor]: ...

    def receive(self, view: ClientView, trace: Trace, x: torch.Tensor, y: torch.Tensor,
                grad_a: torch.Tensor, epoch: int, step: int) -> None: ...


def batch_plan(shard_size: int, batch_size: int) -> int:
    return max(1, -(-shard_size // batch_size))


class ClientState:
    """A participant's local model copy, shard, and optimizer."""

    def __init__(self, client_id: int, units: Sequence[UnitSpec], params: Params, data: Dataset,
                 optimizer: OptimizerState, streams: Streams, steps: int, batch_size: int,
                 l1_lambda: float = 0.0, augmentation: AugmentConfig | None = None,
                 malicious: bool = False) -> None:
        if l1_lambda < 0:
            raise ValueError("l1 lambda must be non-negative")
        self.client_id = client_id
        self.units = list(units)
        self.params = clone_params(params)
        self.data = data
        self.optimizer = optimizer
        self.streams = streams
        self.steps = steps
        self.batch_size = batch_size
        self.l1_lambda = l1_lambda
        self.augmentation = augmentation
        self.malicious = malicious
        self._order: np.ndarray | None = None
        self._aug: np.random.Generator | None = None

    def view(self) -> ClientView:
        return ClientView(self.units, self.params)

    def begin_epoch(self, epoch: int) -> None:
        self.optimizer.set_epoch(epoch)
        self._order = self.streams.permutation(f"shuffle/client{self.client_id}/epoch{epoch}", len(self.data))
        self._aug = self.streams.generator(f"augment/client{self.client_id}/epoch{epoch}")

    def batch(self, step: int) -> tuple[torch.Tensor, torch.Tensor]:
        idx = torch.as_tensor(self._order[step * self.batch_size : (step + 1) * self.batch_size])
        x = self.data.images[idx]
        if self.augmentation is not None:
            x = augment(x, self._aug, self.augmentation)
        return x, self.data.labels[idx]

    def update(self, trace: Trace, grad_a: torch.Tensor) -> None:
        grads, _ = backward(self.units, self.params, trace, grad_a)
        if self.l1_lambda > 0:
            grads = {i: (gw + self.l1_lambda * torch.sign(self.params[i][0]), gb) for i, (gw, gb) in grads.items()}
        self.params = optimizer_step(self.optimizer, self.params, grads)
