"""Named architectures. Each takes (channels, image size, classes)."""

from __future__ import annotations

from ..nn.units import Conv2d, Linear, UnitSpec


def desk6(channels: int, size: int, n_classes: int) -> list[UnitSpec]:
    """Six units: four 3x3 convs (the last three pooled) and two fully connected."""
    if size % 8:
        raise ValueError("desk6 needs an image side divisible by 8")
    side = size // 8
    return [
        Conv2d(channels, 8, 3, 1, 1, relu=True),
        Conv2d(8, 16, 3, 1, 1, relu=True, pool=True),
        Conv2d(16, 16, 3, 1, 1, relu=True, pool=True),
        Conv2d(16, 32, 3, 1, 1, relu=True, pool=True),
        Linear(32 * side * side, 64, relu=True),
        Linear(64, n_classes),
    ]


def mlp4(channels: int, size: int, n_classes: int) -> list[UnitSpec]:
    d = channels * size * size
    return [Linear(d, 128, relu=True), Linear(128, 64, relu=True), Linear(64, 32, relu=True), Linear(32, n_classes)]


def vgg11(channels: int, size: int, n_classes: int) -> list[UnitSpec]:
    """VGG-11 layout as 11 units: eight convs (pooled after 1, 2, 4, 6, 8) and three fully connected."""
    if size % 32:
        raise ValueError("vgg11 needs an image side divisible by 32")
    plan = [(64, True), (128, True), (256, False), (256, True), (512, False), (512, True), (512, False), (512, True)]
    units, cin = [], channels
    for cout, pool in plan:
        units.append(Conv2d(cin, cout, 3, 1, 1, relu=True, pool=pool))
        cin = cout
    flat = 512 * (size // 32) ** 2
    units += [Linear(flat, 512, relu=True), Linear(512, 512, relu=True), Linear(512, n_classes)]
    return units


PRESETS = {"desk6": desk6, "mlp4": mlp4, "vgg11": vgg11}
