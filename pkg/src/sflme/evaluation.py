"""Accuracy, fidelity, transfer adversarial examples and model inversion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .data import Dataset
from .nn import input_gradient
from .rng import Streams
from .sfl import ClientView, Network


class EvalError(ValueError):
    pass


def _nonempty(data: Dataset) -> None:
    if len(data) == 0:
        raise EvalError("evaluation set is empty")


def accuracy(model: Network, data: Dataset) -> float:
    _nonempty(data)
    return 100.0 * float((model.predict(data.images) == data.labels).double().mean())


def fidelity(surrogate: Network, victim: Network, data: Dataset) -> float:
    """Percentage of samples on which the two models' top-1 predictions agree."""
    _nonempty(data)
    return 100.0 * float((surrogate.predict(data.images) == victim.predict(data.images)).double().mean())


@dataclass(frozen=True)
class AdvConfig:
    fgsm_eps: float = 0.1
    pgd_eps: float = 0.002
    pgd_iters: int = 50
    pgd_step: float | None = None  # None: pgd_eps / 5
    samples: int = 1000

    def __post_init__(self) -> None:
        if self.fgsm_eps < 0 or self.pgd_eps < 0 or self.pgd_iters < 0:
            raise EvalError("eps and iteration counts must be non-negative")

    @property
    def step(self) -> float:
        return self.pgd_eps / 5 if self.pgd_step is None else self.pgd_step


def project(x: torch.Tensor, x0: torch.Tensor, eps: float) -> torch.Tensor:
    """Clip into the L-inf ball around ``x0`` and into [0, 1].

    The bound holds exactly: |x' - x0| <= eps with the difference taken in float64.
    """
    ref = x0.double()
    lo, hi = (ref - eps).to(x0.dtype), (ref + eps).to(x0.dtype)
    # rounding to float32 can land one ulp outside the ball; step it back in
    lo = torch.where(lo.double() < ref - eps, torch.nextafter(lo, x0), lo)
    hi = torch.where(hi.double() > ref + eps, torch.nextafter(hi, x0), hi)
    out = torch.minimum(torch.maximum(x, lo), hi)
    return out.clamp(0.0, 1.0)


def _grad(model: Network, x: torch.Tensor, y: torch.Tensor, chunk: int = 500) -> torch.Tensor:
    return torch.cat([input_gradient(model.units, model.params, x[i : i + chunk], y[i : i + chunk])
                      for i in range(0, len(x), chunk)])


def fgsm(model: Network, x: torch.Tensor, y: torch.Tensor, eps: float) -> torch.Tensor:
    if eps == 0:
        return x.clone()
    return project(x + eps * torch.sign(_grad(model, x, y)), x, eps)


def targeted_pgd(model: Network, x: torch.Tensor, target: torch.Tensor, eps: float, iters: int, step: float) -> torch.Tensor:
    adv = x.clone()
    if eps == 0:
        return adv
    for _ in range(iters):
        adv = project(adv - step * torch.sign(_grad(model, adv, target)), x, eps)
    return adv


def adversarial_transfer(surrogate: Network, victim: Network, data: Dataset, config: AdvConfig,
                         streams: Streams) -> tuple[float, float]:
    """Attack success rates (%) of FGSM (untargeted) and targeted PGD crafted on the surrogate.

    Only samples the victim classifies correctly count, capped at ``config.samples``.
    """
    correct = torch.nonzero(victim.predict(data.images) == data.labels).flatten()[: config.samples]
    if len(correct) == 0:
        return 0.0, 0.0
    x, y = data.images[correct], data.labels[correct]
    x_f = fgsm(surrogate, x, y, config.fgsm_eps)
    asr_fgsm = 100.0 * float((victim.predict(x_f) != y).double().mean())
    g = streams.generator("adv/targets")
    shift = torch.from_numpy(g.integers(1, data.n_classes, size=len(y)))
    target = (y + shift) % data.n_classes
    x_p = targeted_pgd(surrogate, x, target, config.pgd_eps, config.pgd_iters, config.step)
    asr_pgd = 100.0 * float((victim.predict(x_p) == target).double().mean())
    return asr_fgsm, asr_pgd


# model inversion ----------------------------------------------------------------


class Inverter(nn.Module):
    """Adapter from the cut activation to a coarse feature map, then two transposed-conv stages, sigmoid output."""

    def __init__(self, cut_shape: Sequence[int], image_shape: Sequence[int], width: int = 32) -> None:
        super().__init__()
        c, h, w = image_shape
        if h % 4 or w % 4:
            raise EvalError("image sides must be divisible by 4")
        self.cut_shape = tuple(cut_shape)
        self.image_shape = tuple(image_shape)
        factor = h // cut_shape[1] if len(cut_shape) == 3 and h % cut_shape[1] == 0 else 0
        if factor in (1, 2, 4) and cut_shape[1] * factor == h and cut_shape[2] * factor == w:
            strides = {1: (1, 1), 2: (2, 1), 4: (2, 2)}[factor]
            self.adapter = nn.Sequential(nn.Conv2d(cut_shape[0], width, 3, padding=1), nn.ReLU())
            self._reshape = None
        else:
            # flat cuts carry no layout, so the decoder gets twice the channels to rebuild it
            strides, width = (2, 2), 2 * width
            self._reshape = (width, h // 4, w // 4)
            self.adapter = nn.Sequential(nn.Flatten(), nn.Linear(int(np.prod(cut_shape)), width * (h // 4) * (w // 4)))
        self.decode = nn.Sequential(
            self._stage(width, width, strides[0]),
            nn.ReLU(),
            self._stage(width, c, strides[1]),
        )

    @staticmethod
    def _stage(cin: int, cout: int, stride: int) -> nn.Module:
        if stride == 2:
            return nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1)
        return nn.ConvTranspose2d(cin, cout, 3, stride=1, padding=1)

    def forward(self, a: torch.Tensor) -> torch.Tensor:
        if tuple(a.shape[1:]) != self.cut_shape:
            raise EvalError(f"activation shape {tuple(a.shape[1:])} does not match the inverter's {self.cut_shape}")
        h = self.adapter(a)
        if self._reshape is not None:
            h = h.view(len(a), *self._reshape)
        return torch.sigmoid(self.decode(h))


@dataclass(frozen=True)
class InversionConfig:
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 16
    width: int = 32


def train_inverter(client: ClientView, train_images: torch.Tensor, config: InversionConfig, streams: Streams) -> Inverter:
    feats = client.activation(train_images)
    with torch.random.fork_rng():
        torch.manual_seed(streams.seed_int("mi/init"))
        inv = Inverter(feats.shape[1:], train_images.shape[1:], config.width)
    opt = torch.optim.Adam(inv.parameters(), lr=config.lr)
    for epoch in range(config.epochs):
        order = torch.as_tensor(streams.permutation(f"mi/shuffle/epoch{epoch}", len(feats)))
        for s in range(0, len(feats), config.batch_size):
            idx = order[s : s + config.batch_size]
            opt.zero_grad()
            loss = ((inv(feats[idx]) - train_images[idx]) ** 2).mean()
            loss.backward()
            opt.step()
    return inv


def model_inversion(client: ClientView, attacker_val: Dataset, probe_images: torch.Tensor,
                    config: InversionConfig, streams: Streams) -> float:
    """Mean per-pixel MSE of reconstructions of ``probe_images`` from their cut activations."""
    if len(attacker_val) == 0 or len(probe_images) == 0:
        raise EvalError("model inversion needs training and probe images")
    inv = train_inverter(client, attacker_val.images, config, streams)
    with torch.no_grad():
        recon = inv(client.activation(probe_images))
    return float(((recon - probe_images) ** 2).mean())
