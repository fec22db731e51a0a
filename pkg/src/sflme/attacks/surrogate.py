"""Surrogate models: frozen victim client part plus a freshly trained server part."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from ..data import AugmentConfig, Dataset, augment
from ..nn import SGD, backward, cross_entropy, forward, optimizer_step
from ..nn.optim import OptimizerState, scaled_milestones
from ..nn.units import CONV2D, LINEAR, Params, UnitSpec, clone_params, infer_shapes, init_params
from ..rng import Streams
from ..sfl import ClientView, Network
from ..sfl.model import merge


class AttackError(ValueError):
    pass


class Variant(str, enum.Enum):
    SAME = "same"
    LONGER = "longer"
    SHORTER = "shorter"
    WIDER = "wider"
    THINNER = "thinner"


def _rewire(units: Sequence[UnitSpec], cut_shape: Sequence[int], widths: Sequence[int | None]) -> list[UnitSpec]:
    """Re-derive every input size from ``cut_shape``; ``widths`` overrides output sizes."""
    out = []
    shape = tuple(cut_shape)
    for unit, width in zip(units, widths):
        if unit.kind == CONV2D:
            unit = unit.with_sizes(shape[0], width)
        elif unit.kind == LINEAR:
            unit = unit.with_sizes(int(np.prod(shape)), width)
        out.append(unit)
        shape = infer_shapes([unit], shape)[1]
    return out


def variant_units(server_units: Sequence[UnitSpec], variant: Variant | str, cut_shape: Sequence[int]) -> list[UnitSpec]:
    variant = Variant(variant)
    units = list(server_units)
    if not units or units[-1].kind != LINEAR:
        raise AttackError("server part must end in a Linear unit")
    last = len(units) - 1
    if variant is Variant.SAME:
        return _rewire(units, cut_shape, [None] * len(units))
    if variant in (Variant.WIDER, Variant.THINNER):
        scale = 2.0 if variant is Variant.WIDER else 0.5
        widths = [max(1, int(u.out_dim * scale)) if u.parametric and i != last else None for i, u in enumerate(units)]
        return _rewire(units, cut_shape, widths)
    if variant is Variant.LONGER:
        hidden = units[-1].in_dim
        units = units[:-1] + [UnitSpec(LINEAR, hidden, hidden, relu=True), units[-1]]
        return _rewire(units, cut_shape, [None] * len(units))
    hidden = [i for i, u in enumerate(units[:-1]) if u.kind == LINEAR]
    if not hidden:
        raise AttackError("no fully connected hidden unit to remove for the shorter variant")
    del units[hidden[-1]]
    return _rewire(units, cut_shape, [None] * len(units))


@dataclass
class SurrogateModel:
    client_units: list[UnitSpec]
    client_params: Params
    server_units: list[UnitSpec]
    server_params: Params

    def network(self) -> Network:
        n = len(self.client_units)
        return Network(self.client_units + self.server_units, merge(self.client_params, n, self.server_params))


@dataclass
class SurrogateSettings:
    epochs: int = 200
    lr: float = 0.02
    momentum: float = 0.9
    batch_size: int = 128
    milestones: tuple[int, ...] | None = None
    factor: float = 0.2
    augment: bool = False

    def optimizer(self) -> OptimizerState:
        ms = self.milestones if self.milestones is not None else scaled_milestones(self.epochs)
        return SGD(self.lr, self.momentum, ms, self.factor)


@dataclass
class LabelledSet:
    """Training inputs with hard labels and, optionally, soft targets."""

    images: torch.Tensor
    labels: torch.Tensor
    soft: torch.Tensor | None = None
    soft_weight: float = 1.0

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_dataset(cls, data: Dataset) -> LabelledSet:
        return cls(data.images, data.labels)


def _targets_grad(z: torch.Tensor, batch: LabelledSet, idx: torch.Tensor) -> tuple[float, torch.Tensor]:
    loss, dz = cross_entropy(z, batch.labels[idx])
    if batch.soft is not None:
        soft_loss, soft_dz = cross_entropy(z, batch.soft[idx])
        loss = loss + batch.soft_weight * soft_loss
        dz = dz + batch.soft_weight * soft_dz
    return float(loss), dz


def fit_server(
    client: ClientView,
    server_units: Sequence[UnitSpec],
    server_params: Params,
    data: LabelledSet,
    settings: SurrogateSettings,
    streams: Streams,
    name: str = "surrogate",
) -> Params:
    """Minibatch SGD on the server part with the client part held fixed."""
    if len(data) == 0:
        raise AttackError("surrogate training set is empty")
    server_units = list(server_units)
    opt = settings.optimizer()
    features = None if settings.augment else client.activation(data.images)
    params = clone_params(server_params)
    aug = AugmentConfig()
    for epoch in range(settings.epochs):
        opt.set_epoch(epoch)
        order = torch.as_tensor(streams.permutation(f"{name}/shuffle/epoch{epoch}", len(data)))
        g = streams.generator(f"{name}/augment/epoch{epoch}")
        for s in range(0, len(data), settings.batch_size):
            idx = order[s : s + settings.batch_size]
            if features is None:
                a = client.activation(augment(data.images[idx], g, aug))
            else:
                a = features[idx]
            trace = forward(server_units, params, a)
            loss, dz = _targets_grad(trace.output, data, idx)
            if not math.isfinite(loss):
                raise AttackError(f"surrogate training diverged at epoch {epoch}")
            grads, _ = backward(server_units, params, trace, dz)
            params = optimizer_step(opt, params, grads)
    return params


def train_surrogate(
    client: ClientView,
    server_units: Sequence[UnitSpec],
    data: LabelledSet,
    settings: SurrogateSettings,
    streams: Streams,
    variant: Variant | str = Variant.SAME,
    name: str = "surrogate",
) -> SurrogateModel:
    """Fresh server part of the chosen variant, trained on top of the frozen client part."""
    cut = infer_shapes(client.units, tuple(data.images.shape[1:]))[-1]
    units = variant_units(server_units, variant, cut)
    init = init_params(units, streams, f"{name}/init")
    params = fit_server(client, units, init, data, settings, streams, name)
    return SurrogateModel(list(client.units), clone_params(client.params), units, params)


def train_full(
    units: Sequence[UnitSpec],
    data: LabelledSet,
    settings: SurrogateSettings,
    streams: Streams,
    name: str = "naive",
) -> Network:
    """Every unit trained from random initialisation; no victim knowledge used."""
    units = list(units)
    if len(data) == 0:
        raise AttackError("training set is empty")
    params = init_params(units, streams, f"{name}/init")
    opt = settings.optimizer()
    aug = AugmentConfig()
    for epoch in range(settings.epochs):
        opt.set_epoch(epoch)
        order = torch.as_tensor(streams.permutation(f"{name}/shuffle/epoch{epoch}", len(data)))
        g = streams.generator(f"{name}/augment/epoch{epoch}")
        for s in range(0, len(data), settings.batch_size):
            idx = order[s : s + settings.batch_size]
            x = data.images[idx]
            if settings.augment:
                x = augment(x, g, aug)
            trace = forward(units, params, x)
            loss, dz = _targets_grad(trace.output, data, idx)
            if not math.isfinite(loss):
                raise AttackError(f"training diverged at epoch {epoch}")
            grads, _ = backward(units, params, trace, dz)
            params = optimizer_step(opt, params, grads)
    return Network(units, params)
