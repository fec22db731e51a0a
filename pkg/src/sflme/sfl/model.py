from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from ..nn import forward
from ..nn.units import EngineError, Params, UnitSpec, check_params, infer_shapes


class SplitError(ValueError):
    pass


@dataclass
class Network:
    """A plain stack of units with parameters keyed by position."""

    units: list[UnitSpec]
    params: Params

    def logits(self, x: torch.Tensor, chunk: int = 1000) -> torch.Tensor:
        with torch.no_grad():
            return torch.cat([forward(self.units, self.params, x[i : i + chunk]).output for i in range(0, len(x), chunk)])

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        return self.logits(x).argmax(1)


def rekey(params: Params, start: int, stop: int) -> Params:
    return {i - start: p for i, p in params.items() if start <= i < stop}


def merge(first: Params, n_first: int, second: Params) -> Params:
    out = dict(first)
    out.update({i + n_first: p for i, p in second.items()})
    return out


@dataclass
class SplitModel:
    units: list[UnitSpec]
    n_server: int
    client_params: Params
    server_params: Params

    @property
    def n_client(self) -> int:
        return len(self.units) - self.n_server

    @property
    def client_units(self) -> list[UnitSpec]:
        return self.units[: self.n_client]

    @property
    def server_units(self) -> list[UnitSpec]:
        return self.units[self.n_client :]

    def full_params(self) -> Params:
        return merge(self.client_params, self.n_client, self.server_params)

    def network(self) -> Network:
        return Network(list(self.units), self.full_params())

    def cut_shape(self, input_shape: Sequence[int]) -> tuple[int, ...]:
        return infer_shapes(self.units, tuple(input_shape))[self.n_client]


def split(units: Sequence[UnitSpec], params: Params, n_server: int) -> SplitModel:
    """Give the last ``n_server`` units to the server, the rest to the client."""
    units = list(units)
    if not 1 <= n_server <= len(units) - 1:
        raise SplitError(f"server unit count must lie in [1, {len(units) - 1}], got {n_server}")
    check_params(units, params)
    cut = len(units) - n_server
    return SplitModel(units, n_server, rekey(params, 0, cut), rekey(params, cut, len(units)))


def synchronize(copies: Sequence[Params]) -> Params:
    """Elementwise mean of the client copies, reduced in the given (ascending id) order.

    The sum runs in float64: M identical float32 copies sum exactly there,
    so they average back to themselves bit for bit.
    """
    if not copies:
        raise SplitError("nothing to synchronize")
    keys = copies[0].keys()
    for c in copies[1:]:
        if c.keys() != keys:
            raise EngineError("client copies disagree on their units")
    out: Params = {}
    for i in keys:
        pair = []
        for j in (0, 1):
            ref = copies[0][i][j]
            acc = ref.to(torch.float64).clone()
            for c in copies[1:]:
                t = c[i][j]
                if t.shape != ref.shape:
                    raise EngineError(f"shape mismatch at unit {i} during synchronization")
                acc += t.to(torch.float64)
            pair.append((acc / len(copies)).to(ref.dtype))
        out[i] = (pair[0], pair[1])
    return out
