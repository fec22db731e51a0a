"""The extraction attacks as query strategies.

Each attack talks to the server only through gradient queries at the cut:
it proposes a batch ``(x, y)``, its own (white-box) client part maps ``x`` to
the activation that is sent, and the returned gradient comes back through
``receive``. ``finish`` then runs the attack's offline phase. The same object
is driven either by a frozen server through a metered channel or by the
malicious participant during training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from ..data import Dataset, noise_images
from ..nn import Adam, Trace, optimizer_step, second_order_input_grad_backward
from ..nn.optim import tensor_step
from ..nn.units import UnitSpec, init_params
from ..rng import Streams
from ..sfl import ClientView, Network
from .generator import ConditionalGenerator, diversity_loss
from .soft import soft_labels_batch
from .surrogate import (
    AttackError,
    LabelledSet,
    SurrogateModel,
    SurrogateSettings,
    Variant,
    train_full,
    train_surrogate,
    variant_units,
)

METHODS = ("craft", "gan", "gm", "train", "softtrain", "naive")


@dataclass
class AttackContext:
    """What the attacker knows when its offline phase starts."""

    units: list[UnitSpec]  # full victim architecture (white-box)
    n_server: int
    input_shape: tuple[int, int, int]
    n_classes: int
    settings: SurrogateSettings
    streams: Streams
    variant: Variant = Variant.SAME
    last_step: int | None = None  # final global step of training, for late-K filtering

    @property
    def server_units(self) -> list[UnitSpec]:
        return self.units[len(self.units) - self.n_server :]


class Attack:
    name = "attack"
    uses_queries = True

    def __init__(self, budget: int, batch_size: int) -> None:
        if budget < 0:
            raise AttackError("budget must be non-negative")
        if batch_size < 1:
            raise AttackError("query batch must hold at least one sample")
        self.budget = budget
        self.batch_size = batch_size
        self.used = 0

    @property
    def remaining(self) -> int:
        return self.budget - self.used

    def wants_query(self) -> bool:
        return self.uses_queries and self.remaining > 0

    def make_query(self, view: ClientView) -> tuple[torch.Tensor, torch.Tensor]:
        raise AttackError(f"{self.name} issues no queries")

    def receive(self, view: ClientView, trace: Trace, x: torch.Tensor, y: torch.Tensor,
                grad_a: torch.Tensor, epoch: int, step: int) -> None:
        self.used += len(x)
        if self.used > self.budget:
            raise AttackError(f"{self.name} exceeded its budget")
        self._receive(view, trace, x, y, grad_a * len(x), epoch, step)

    def _receive(self, view, trace, x, y, per_sample_grad, epoch, step) -> None:
        pass

    def finish(self, view: ClientView, ctx: AttackContext):
        raise NotImplementedError


# Craft ---------------------------------------------------------------------


class CraftME(Attack):
    """Input-space descent from noise towards low-loss instances of a chosen class."""

    name = "craft"

    def __init__(self, budget: int, batch_size: int, n_classes: int, input_shape: Sequence[int],
                 streams: Streams, steps: int = 20, lr: float = 0.1) -> None:
        super().__init__(budget, batch_size)
        if steps < 1:
            raise AttackError("crafting needs at least one step")
        if budget < steps:
            raise AttackError(f"budget {budget} is smaller than the {steps} steps one image needs")
        self.steps = steps
        self.lr = lr
        self.n_classes = n_classes
        self.input_shape = tuple(input_shape)
        self.streams = streams
        self.total = budget // steps
        self.started = 0
        self.crafted: list[tuple[torch.Tensor, torch.Tensor]] = []
        self._x: torch.Tensor | None = None
        self._y: torch.Tensor | None = None
        self._opt = None
        self._t = 0

    def wants_query(self) -> bool:
        return self._x is not None or self.started < self.total

    def _start(self) -> None:
        count = min(self.batch_size, self.total - self.started)
        g = self.streams.generator(f"craft/noise{self.started}")
        self._x = noise_images(count, self.input_shape, g)
        self._y = torch.arange(self.started, self.started + count) % self.n_classes
        self._opt = Adam(self.lr)
        self._t = 0
        self.started += count

    def make_query(self, view: ClientView) -> tuple[torch.Tensor, torch.Tensor]:
        if self._x is None:
            self._start()
        return self._x.clone(), self._y.clone()

    def _receive(self, view, trace, x, y, per_sample_grad, epoch, step) -> None:
        gx = view.input_grad(trace, per_sample_grad)
        self._x = tensor_step(self._opt, "x", self._x, gx).clamp(0.0, 1.0)
        self._t += 1
        if self._t == self.steps:
            self.crafted.append((self._x, self._y))
            self._x = None

    def dataset(self) -> LabelledSet:
        parts = list(self.crafted)
        if self._x is not None and self._t > 0:
            parts.append((self._x, self._y))
        if not parts:
            raise AttackError("no crafted instances")
        return LabelledSet(torch.cat([p[0] for p in parts]), torch.cat([p[1] for p in parts]))

    def finish(self, view: ClientView, ctx: AttackContext) -> SurrogateModel:
        return train_surrogate(view, ctx.server_units, self.dataset(), ctx.settings, ctx.streams, ctx.variant, "craft")


# GAN ------------------------------------------------------------------------


class GanME(Attack):
    """Trains a conditional generator on gradient feedback, then distils from its samples."""

    name = "gan"

    def __init__(self, budget: int, batch_size: int, n_classes: int, input_shape: Sequence[int],
                 streams: Streams, latent_dim: int = 64, lr: float = 1e-4, diversity_weight: float = 50.0,
                 synthetic_count: int = 5000) -> None:
        super().__init__(budget, batch_size)
        if budget < batch_size:
            raise AttackError("GAN attack needs a budget of at least one batch")
        self.n_classes = n_classes
        self.streams = streams
        self.latent_dim = latent_dim
        self.diversity_weight = diversity_weight
        self.synthetic_count = synthetic_count
        with torch.random.fork_rng():
            torch.manual_seed(streams.seed_int("gan/init"))
            self.generator = ConditionalGenerator(n_classes, tuple(input_shape), latent_dim)
        self.optimizer = torch.optim.Adam(self.generator.parameters(), lr=lr)
        self._batches = 0
        self._pending = None

    def make_query(self, view: ClientView) -> tuple[torch.Tensor, torch.Tensor]:
        n = min(self.batch_size, self.remaining)
        g = self.streams.generator(f"gan/batch{self._batches}")
        half = (n + 1) // 2
        c = torch.from_numpy(g.integers(0, self.n_classes, size=half)).long()
        c = torch.cat([c, c])[:n]
        z = torch.from_numpy(g.standard_normal((n, self.latent_dim)).astype(np.float32))
        self._batches += 1
        x = self.generator(z, c)
        self._pending = (x, z)
        return x.detach(), c

    def _receive(self, view, trace, x, y, per_sample_grad, epoch, step) -> None:
        images, z = self._pending
        self._pending = None
        gx = view.input_grad(trace, per_sample_grad / len(x))
        self.optimizer.zero_grad()
        div = diversity_loss(images, z)
        # d(mean CE)/dx comes from the server; the diversity term is differentiated locally
        surrogate_objective = (images * gx).sum() + self.diversity_weight * div
        surrogate_objective.backward()
        self.optimizer.step()
        if not all(torch.isfinite(p).all() for p in self.generator.parameters()):
            raise AttackError("generator diverged (non-finite parameters)")

    def sample(self, count: int) -> LabelledSet:
        g = self.streams.generator("gan/synthetic")
        c = torch.arange(count) % self.n_classes
        z = torch.from_numpy(g.standard_normal((count, self.latent_dim)).astype(np.float32))
        with torch.no_grad():
            x = torch.cat([self.generator(z[i : i + 500], c[i : i + 500]) for i in range(0, count, 500)])
        return LabelledSet(x, c)

    def finish(self, view: ClientView, ctx: AttackContext) -> SurrogateModel:
        data = self.sample(self.synthetic_count)
        return train_surrogate(view, ctx.server_units, data, ctx.settings, ctx.streams, ctx.variant, "gan")


# Label sweeps (GM and soft labels) --------------------------------------------


class _LabelSweep(Attack):
    """Queries every class label for each attacker sample, one label per query batch."""

    def __init__(self, budget: int, batch_size: int, data: Dataset, late_k: int | None = None) -> None:
        super().__init__(budget, batch_size)
        if len(data) == 0:
            raise AttackError("attacker data set is empty")
        self.data = data
        self.n_classes = data.n_classes
        self.late_k = late_k
        self._group = 0  # index of the sample group being swept
        self._label = 0
        self.records: list[tuple[int, torch.Tensor, torch.Tensor, int, torch.Tensor, int]] = []

    def _group_indices(self) -> torch.Tensor:
        start = self._group * self.batch_size
        return torch.arange(start, min(start + self.batch_size, len(self.data)))

    def wants_query(self) -> bool:
        if self._group * self.batch_size >= len(self.data):
            return False
        return self.remaining >= len(self._group_indices())

    def make_query(self, view: ClientView) -> tuple[torch.Tensor, torch.Tensor]:
        idx = self._group_indices()
        return self.data.images[idx], torch.full((len(idx),), self._label, dtype=torch.long)

    def _receive(self, view, trace, x, y, per_sample_grad, epoch, step) -> None:
        idx = self._group_indices()
        self.records.append((self._group, idx, trace.output.detach(), self._label, per_sample_grad.detach(), step))
        self._label += 1
        if self._label == self.n_classes:
            self._label = 0
            self._group += 1

    def kept(self, ctx: AttackContext) -> list:
        if self.late_k is None or ctx.last_step is None:
            return self.records
        return [r for r in self.records if r[5] > ctx.last_step - self.late_k]


class GmME(_LabelSweep):
    """Fits the surrogate server so its cut gradients match the victim's, label by label."""

    name = "gm"

    def __init__(self, budget: int, batch_size: int, data: Dataset, late_k: int | None = None,
                 epochs: int = 30, lr: float = 1e-3, train_batch: int = 64) -> None:
        super().__init__(budget, batch_size, data, late_k)
        self.epochs = epochs
        self.lr = lr
        self.train_batch = train_batch

    def match_set(self, ctx: AttackContext) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        recs = self.kept(ctx)
        if not recs:
            raise AttackError("no gradient records to match")
        a = torch.cat([r[2] for r in recs])
        y = torch.cat([torch.full((len(r[2]),), r[3], dtype=torch.long) for r in recs])
        g = torch.cat([r[4] for r in recs])
        return a, y, g

    def fit(self, units: list[UnitSpec], params, a, y, g, streams: Streams):
        opt = Adam(self.lr, milestones=(int(self.epochs * 0.6), int(self.epochs * 0.8)))
        for epoch in range(self.epochs):
            opt.set_epoch(epoch)
            order = torch.as_tensor(streams.permutation(f"gm/shuffle/epoch{epoch}", len(a)))
            for s in range(0, len(a), self.train_batch):
                idx = order[s : s + self.train_batch]
                loss, grads = second_order_input_grad_backward(units, params, a[idx], y[idx], g[idx] / len(idx))
                if not math.isfinite(float(loss)):
                    raise AttackError(f"gradient matching diverged at epoch {epoch}")
                params = optimizer_step(opt, params, grads)
        return params

    def finish(self, view: ClientView, ctx: AttackContext) -> SurrogateModel:
        a, y, g = self.match_set(ctx)
        units = variant_units(ctx.server_units, ctx.variant, a.shape[1:])
        params = init_params(units, ctx.streams, "gm/init")
        params = self.fit(units, params, a, y, g, ctx.streams)
        return SurrogateModel(list(view.units), dict(view.params), units, params)


class SoftTrainME(_LabelSweep):
    """Hard-label training plus soft labels built from per-label gradient similarity."""

    name = "softtrain"

    def __init__(self, budget: int, batch_size: int, data: Dataset, alpha: float = 0.9,
                 soft_weight: float = 1.0, late_k: int | None = None) -> None:
        super().__init__(budget, batch_size, data, late_k)
        if not 0.5 < alpha <= 1.0:
            raise AttackError("alpha must lie in (0.5, 1]")
        self.alpha = alpha
        self.soft_weight = soft_weight

    def soft_set(self, ctx: AttackContext) -> LabelledSet:
        groups: dict[int, dict[int, torch.Tensor]] = {}
        index: dict[int, torch.Tensor] = {}
        for grp, idx, _a, label, grad, _step in self.kept(ctx):
            groups.setdefault(grp, {})[label] = grad.reshape(len(grad), -1)
            index[grp] = idx
        images, hard, soft = [], [], []
        for grp in sorted(groups):
            per = groups[grp]
            if len(per) != self.n_classes:
                continue  # a partially swept group has no complete gradient set
            idx = index[grp]
            e = torch.stack([per[k] for k in range(self.n_classes)], dim=1)
            labels = self.data.labels[idx]
            images.append(self.data.images[idx])
            hard.append(labels)
            soft.append(soft_labels_batch(e, labels, self.alpha).to(torch.float32))
        if not images:
            raise AttackError("no sample received gradients for every label")
        return LabelledSet(torch.cat(images), torch.cat(hard), torch.cat(soft), self.soft_weight)

    def finish(self, view: ClientView, ctx: AttackContext) -> SurrogateModel:
        settings = SurrogateSettings(**{**ctx.settings.__dict__, "augment": False})
        return train_surrogate(view, ctx.server_units, self.soft_set(ctx), settings, ctx.streams, ctx.variant, "softtrain")


# Data-only ------------------------------------------------------------------------


class TrainME(Attack):
    """Plain supervised training of the server part on the attacker's labelled data."""

    name = "train"
    uses_queries = False

    def __init__(self, data: Dataset) -> None:
        super().__init__(0, 1)
        if len(data) == 0:
            raise AttackError("attacker data set is empty")
        self.data = data

    def finish(self, view: ClientView, ctx: AttackContext) -> SurrogateModel:
        return train_surrogate(view, ctx.server_units, LabelledSet.from_dataset(self.data), ctx.settings,
                               ctx.streams, ctx.variant, "train")


class NaiveBaseline(TrainME):
    """Whole architecture from scratch: no victim weights, no gradients."""

    name = "naive"

    def finish(self, view: ClientView, ctx: AttackContext) -> Network:
        return train_full(ctx.units, LabelledSet.from_dataset(self.data), ctx.settings, ctx.streams, "naive")


def drive(attack: Attack, view: ClientView, channel) -> None:
    """Run an attack's query phase against a metered channel (fine-tuning mode)."""
    step = 0
    while attack.wants_query():
        x, y = attack.make_query(view)
        if len(x) > channel.remaining:
            break
        trace = view.forward(x)
        grad = channel.gradient_query(trace.output, y)
        attack.receive(view, trace, x, y, grad, channel.epoch, step)
        step += 1
