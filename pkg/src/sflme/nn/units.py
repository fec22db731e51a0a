"""Unit specifications, shape inference and parameter initialisation.

A unit is one splittable layer. ``Conv2d`` and ``Linear`` units may carry a
fused ReLU (and, for convolutions, a fused 2x2 max-pool) so that a unit maps
onto one "layer" in the VGG sense; the standalone ``ReLU``, ``MaxPool2x2`` and
``Flatten`` kinds are still available for models that want them split apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import torch

from ..rng import Streams

LINEAR = "linear"
CONV2D = "conv2d"
RELU = "relu"
MAXPOOL = "maxpool2x2"
FLATTEN = "flatten"

KINDS = (LINEAR, CONV2D, RELU, MAXPOOL, FLATTEN)
PARAMETRIC = (LINEAR, CONV2D)

Params = dict[int, tuple[torch.Tensor, torch.Tensor]]


class EngineError(ValueError):
    pass


class ShapeError(EngineError):
    def __init__(self, index: int, unit: UnitSpec, message: str) -> None:
        super().__init__(f"unit {index} ({unit.describe()}): {message}")
        self.index = index
        self.unit = unit


@dataclass(frozen=True)
class UnitSpec:
    kind: str
    in_dim: int = 0
    out_dim: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    relu: bool = False
    pool: bool = False

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise EngineError(f"unknown unit kind {self.kind!r}")
        if self.kind in PARAMETRIC and (self.in_dim <= 0 or self.out_dim <= 0):
            raise EngineError(f"{self.kind} needs positive in/out sizes")
        if self.kind == CONV2D and (self.kernel <= 0 or self.stride <= 0 or self.pad < 0):
            raise EngineError("conv2d needs kernel >= 1, stride >= 1, pad >= 0")
        if self.pool and self.kind != CONV2D:
            raise EngineError("only conv2d units carry a fused pool")
        if self.relu and self.kind not in PARAMETRIC:
            raise EngineError("only parametric units carry a fused relu")

    @property
    def parametric(self) -> bool:
        return self.kind in PARAMETRIC

    def describe(self) -> str:
        if self.kind == LINEAR:
            s = f"Linear({self.in_dim},{self.out_dim})"
        elif self.kind == CONV2D:
            s = f"Conv2d({self.in_dim},{self.out_dim},k={self.kernel},s={self.stride},p={self.pad})"
        else:
            return {RELU: "ReLU", MAXPOOL: "MaxPool2x2", FLATTEN: "Flatten"}[self.kind]
        if self.relu:
            s += "+ReLU"
        if self.pool:
            s += "+Pool"
        return s

    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == LINEAR:
            return (self.out_dim, self.in_dim)
        if self.kind == CONV2D:
            return (self.out_dim, self.in_dim, self.kernel, self.kernel)
        raise EngineError(f"{self.kind} has no parameters")

    def fan_in(self) -> int:
        if self.kind == LINEAR:
            return self.in_dim
        return self.in_dim * self.kernel * self.kernel

    def with_sizes(self, in_dim: int | None = None, out_dim: int | None = None) -> UnitSpec:
        return replace(
            self,
            in_dim=self.in_dim if in_dim is None else in_dim,
            out_dim=self.out_dim if out_dim is None else out_dim,
        )


def Linear(in_features: int, out_features: int, relu: bool = False) -> UnitSpec:
    return UnitSpec(LINEAR, in_features, out_features, relu=relu)


def Conv2d(
    in_ch: int, out_ch: int, k: int, stride: int = 1, pad: int = 0, relu: bool = False, pool: bool = False
) -> UnitSpec:
    return UnitSpec(CONV2D, in_ch, out_ch, k, stride, pad, relu=relu, pool=pool)


def ReLU() -> UnitSpec:
    return UnitSpec(RELU)


def MaxPool2x2() -> UnitSpec:
    return UnitSpec(MAXPOOL)


def Flatten() -> UnitSpec:
    return UnitSpec(FLATTEN)


def output_shape(unit: UnitSpec, shape: tuple[int, ...], index: int = 0) -> tuple[int, ...]:
    """Per-sample output shape of ``unit`` for a per-sample input ``shape``."""
    if unit.kind == LINEAR:
        if math.prod(shape) != unit.in_dim:
            raise ShapeError(index, unit, f"expects {unit.in_dim} features, got shape {shape}")
        return (unit.out_dim,)
    if unit.kind == CONV2D:
        if len(shape) != 3 or shape[0] != unit.in_dim:
            raise ShapeError(index, unit, f"expects ({unit.in_dim}, H, W), got {shape}")
        h = (shape[1] + 2 * unit.pad - unit.kernel) // unit.stride + 1
        w = (shape[2] + 2 * unit.pad - unit.kernel) // unit.stride + 1
        if h <= 0 or w <= 0:
            raise ShapeError(index, unit, f"input {shape} too small for kernel")
        if unit.pool:
            if h < 2 or w < 2:
                raise ShapeError(index, unit, "feature map too small to pool")
            h, w = h // 2, w // 2
        return (unit.out_dim, h, w)
    if unit.kind == MAXPOOL:
        if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
            raise ShapeError(index, unit, f"cannot pool shape {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if unit.kind == FLATTEN:
        return (math.prod(shape),)
    return tuple(shape)


def infer_shapes(units: Sequence[UnitSpec], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Shapes of every activation: index 0 is the input, index i+1 the output of unit i."""
    shapes = [tuple(input_shape)]
    for i, unit in enumerate(units):
        shapes.append(output_shape(unit, shapes[-1], i))
    return shapes


def validate_units(units: Sequence[UnitSpec], input_shape: tuple[int, ...]) -> None:
    if len(units) < 2:
        raise EngineError("a model needs at least two units")
    infer_shapes(units, input_shape)


def init_params(units: Sequence[UnitSpec], streams: Streams, name: str, dtype=torch.float32) -> Params:
    """Fan-in scaled uniform init, bound sqrt(1/fan_in), one named stream per unit."""
    params: Params = {}
    for i, unit in enumerate(units):
        if not unit.parametric:
            continue
        bound = math.sqrt(1.0 / unit.fan_in())
        w = streams.uniform(f"{name}/unit{i}/weight", unit.weight_shape(), -bound, bound, dtype)
        b = streams.uniform(f"{name}/unit{i}/bias", (unit.out_dim,), -bound, bound, dtype)
        params[i] = (w, b)
    return params


def check_params(units: Sequence[UnitSpec], params: Params) -> None:
    for i, unit in enumerate(units):
        if not unit.parametric:
            if i in params:
                raise EngineError(f"unit {i} ({unit.describe()}) carries no parameters")
            continue
        if i not in params:
            raise EngineError(f"missing parameters for unit {i} ({unit.describe()})")
        w, b = params[i]
        if tuple(w.shape) != unit.weight_shape() or tuple(b.shape) != (unit.out_dim,):
            raise EngineError(f"parameter shape mismatch at unit {i} ({unit.describe()})")
    extra = set(params) - set(range(len(units)))
    if extra:
        raise EngineError(f"parameters for non-existent units {sorted(extra)}")


def clone_params(params: Params) -> Params:
    return {i: (w.clone(), b.clone()) for i, (w, b) in params.items()}


def cast_params(params: Params, dtype) -> Params:
    return {i: (w.to(dtype), b.to(dtype)) for i, (w, b) in params.items()}


def params_equal(a: Params, b: Params) -> bool:
    if a.keys() != b.keys():
        return False
    return all(torch.equal(a[i][0], b[i][0]) and torch.equal(a[i][1], b[i][1]) for i in a)
