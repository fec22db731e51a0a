"""Server side of split training: the gradient-query API and the query log."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from ..nn import backward, cross_entropy, forward
from ..nn.optim import OptimizerState, add_grads, optimizer_step
from ..nn.units import Params, UnitSpec, check_params, clone_params
from ..transport import Activation, EndEpoch, Gradient, decode_stream, encode


class DivergenceError(RuntimeError):
    pass


class BudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class GradientQueryRecord:
    """One answered query. Deliberately has no field for logits or predictions."""

    client_id: int
    step: int
    epoch: int
    activation: torch.Tensor
    labels: torch.Tensor
    grad: torch.Tensor

    def __post_init__(self) -> None:
        if self.grad.shape != self.activation.shape:
            raise ValueError(f"grad dims {tuple(self.grad.shape)} != activation dims {tuple(self.activation.shape)}")


@dataclass
class QueryLog:
    records: list[GradientQueryRecord] = field(default_factory=list)

    def append(self, record: GradientQueryRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def samples(self) -> int:
        return sum(len(r.activation) for r in self.records)

    def late(self, k: int, last_step: int) -> QueryLog:
        """Keep records from the last ``k`` global steps ending at ``last_step``."""
        return QueryLog([r for r in self.records if r.step > last_step - k])

    def to_bytes(self) -> bytes:
        out = []
        epoch = None
        for r in self.records:
            if epoch is not None and r.epoch != epoch:
                out.append(encode(EndEpoch(epoch)))
            epoch = r.epoch
            out.append(encode(Activation(r.client_id, r.step, r.activation, r.labels)))
            out.append(encode(Gradient(r.client_id, r.step, r.grad)))
        if epoch is not None:
            out.append(encode(EndEpoch(epoch)))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> QueryLog:
        pending: list[tuple[Activation, Gradient]] = []
        records = []
        act = None
        for msg in decode_stream(data):
            if isinstance(msg, Activation):
                if act is not None:
                    raise ValueError("query log: activation without a gradient")
                act = msg
            elif isinstance(msg, Gradient):
                if act is None or (act.client_id, act.step) != (msg.client_id, msg.step):
                    raise ValueError("query log: gradient does not answer the preceding activation")
                pending.append((act, msg))
                act = None
            elif isinstance(msg, EndEpoch):
                for a, g in pending:
                    records.append(GradientQueryRecord(a.client_id, a.step, msg.epoch, a.activation, a.label_tensor(), g.grad))
                pending = []
            else:
                raise ValueError(f"query log: unexpected {type(msg).__name__}")
        if pending or act is not None:
            raise ValueError("query log: missing final epoch marker")
        return cls(records)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> QueryLog:
        return cls.from_bytes(Path(path).read_bytes())


class Server:
    """Holds W_S. Its only client-facing operation is ``gradient_query``."""

    def __init__(self, units: Sequence[UnitSpec], params: Params, optimizer: OptimizerState | None = None,
                 frozen: bool = False) -> None:
        self._units = list(units)
        check_params(self._units, params)
        self._params = clone_params(params)
        self._optimizer = optimizer
        self.frozen = frozen or optimizer is None
        self._pending: list[Params] = []
        self.last_loss: float | None = None

    @property
    def units(self) -> list[UnitSpec]:
        return list(self._units)

    def snapshot(self) -> Params:
        return clone_params(self._params)

    def set_epoch(self, epoch: int) -> None:
        if self._optimizer is not None:
            self._optimizer.set_epoch(epoch)

    def gradient_query(self, activation: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """Return the loss gradient at the cut activation; queue the parameter update."""
        trace = forward(self._units, self._params, activation)
        loss, dz = cross_entropy(trace.output, labels)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite server loss {float(loss)}")
        self.last_loss = float(loss)
        grads, grad_a = backward(self._units, self._params, trace, dz, param_grads=not self.frozen)
        if not self.frozen:
            self._pending.append(grads)
        return grad_a

    def apply_update(self) -> None:
        """One W_S step from the mean of the gradients gathered since the last update."""
        pending, self._pending = self._pending, []
        if self.frozen or not pending:
            return
        total: Params = {}
        for g in pending:  # ascending client-id order, fixed by the caller
            total = add_grads(total, g)
        if len(pending) > 1:
            total = {i: (w / len(pending), b / len(pending)) for i, (w, b) in total.items()}
        self._params = optimizer_step(self._optimizer, self._params, total)


class QueryChannel:
    """What an attacker sees of the server: gradient queries, metered in samples."""

    def __init__(self, server: Server, budget: int, client_id: int = 0, epoch: int = 0,
                 log: QueryLog | None = None, record: bool = True) -> None:
        if budget < 0:
            raise ValueError("budget must be non-negative")
        self._server = server
        self.budget = budget
        self.used = 0
        self.client_id = client_id
        self.epoch = epoch
        self.log = log if log is not None else QueryLog()
        self.record = record
        self._step = 0

    @property
    def remaining(self) -> int:
        return self.budget - self.used

    def gradient_query(self, activation: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        n = len(activation)
        if n > self.remaining:
            raise BudgetExceeded(f"query of {n} samples exceeds remaining budget {self.remaining}")
        grad = self._server.gradient_query(activation, labels)
        self._server.apply_update()
        self.used += n
        if self.record:
            self.log.append(GradientQueryRecord(self.client_id, self._step, self.epoch,
                                                activation.detach().clone(), labels.detach().clone(), grad.detach().clone()))
        self._step += 1
        return grad
