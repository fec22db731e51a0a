"""Split federated training as message-passing actors on the ordered bus.

Per epoch: every client uploads its W_C, the server averages the copies
in ascending client id and sends the average back. Per step: each client
sends its cut activation and labels; once all are in, the server answers
them one at a time in ascending id, then takes a single W_S step from
the mean of the collected parameter gradients; each client backpropagates
its gradient and steps its own optimizer. After the last epoch there is a
closing synchronization so that the trained client part is well defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from ..data import AugmentConfig, Dataset, PartitionPlan, partition
from ..nn import SGD, Trace, backward, cross_entropy, forward
from ..nn.optim import scaled_milestones
from ..nn.units import Params, UnitSpec, clone_params, init_params
from ..rng import Streams
from ..transport import Activation, EndEpoch, Gradient, Message, SyncModel, TransportError, bus_run, decode
from .client import ClientState, ClientView, QueryStrategy, batch_plan
from .model import SplitModel, split, synchronize
from .server import DivergenceError, GradientQueryRecord, QueryLog, Server

SERVER_ID = -1


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    milestones: tuple[int, ...] | None = None  # None: 30/60/80% of epochs
    factor: float = 0.2
    clients: int = 10
    classes_per_client: int | None = None
    l1_lambda: float = 0.0
    augment: bool = False
    schedule_seed: int = 0
    transport: str = "inprocess"
    probes: int = 64
    keep_transcript: bool = False

    def schedule(self) -> tuple[int, ...]:
        return tuple(self.milestones) if self.milestones is not None else scaled_milestones(self.epochs)


@dataclass
class AttackHook:
    """A malicious participant: which client it is, what it queries, and from when."""

    strategy: QueryStrategy
    launch_epoch: int
    data: Dataset | None = None  # its own shard; defaults to the partition's
    client_id: int = 0


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_accuracy: float | None = None


@dataclass
class TrainResult:
    model: SplitModel
    history: list[EpochRecord]
    probe_grads: list[torch.Tensor]
    query_log: QueryLog
    transcript: list[bytes] = field(default_factory=list)
    last_step: int = 0
    steps_per_epoch: int = 0


def flatten_params(params: Params) -> tuple[torch.Tensor, ...]:
    return tuple(t for i in sorted(params) for t in params[i])


def unflatten_params(template: Params, tensors: Sequence[torch.Tensor]) -> Params:
    keys = sorted(template)
    if len(tensors) != 2 * len(keys):
        raise TransportError(f"expected {2 * len(keys)} tensors, got {len(tensors)}")
    out: Params = {}
    for k, i in enumerate(keys):
        w, b = tensors[2 * k], tensors[2 * k + 1]
        if w.shape != template[i][0].shape or b.shape != template[i][1].shape:
            raise TransportError(f"synchronized tensor shape mismatch at unit {i}")
        out[i] = (w, b)
    return out


class ClientActor:
    def __init__(self, state: ClientState, epochs: int, hook: AttackHook | None = None,
                 log: QueryLog | None = None) -> None:
        self.state = state
        self.actor_id = state.client_id
        self.epochs = epochs
        self.hook = hook
        self.log = log
        self.epoch = 0
        self.step = 0
        self.done = False
        self._mode = "upload"
        self._pending: tuple[Trace, torch.Tensor, torch.Tensor, bool] | None = None

    def route(self, msg: Message) -> int:
        return SERVER_ID

    def _attacking(self) -> bool:
        h = self.hook
        return h is not None and self.epoch >= h.launch_epoch and h.strategy.wants_query()

    def outbox(self) -> list[Message]:
        if self._mode == "upload":
            self._mode = "await_sync"
            return [SyncModel(self.actor_id, flatten_params(self.state.params))]
        if self._mode == "step":
            attacking = self._attacking()
            if attacking:
                x, y = self.hook.strategy.make_query(self.state.view())
            else:
                x, y = self.state.batch(self.step)
            trace = self.state.view().forward(x)
            self._pending = (trace, x, y, attacking)
            self._mode = "await_grad"
            return [Activation(self.actor_id, self._global_step(), trace.output, y)]
        if self._mode == "end":
            self._mode = "upload"
            msg = EndEpoch(self.epoch)
            self.epoch += 1
            return [msg]
        return []

    def _global_step(self) -> int:
        return self.epoch * self.state.steps + self.step

    def inbox(self, msg: Message) -> None:
        if isinstance(msg, SyncModel) and self._mode == "await_sync":
            self.state.params = unflatten_params(self.state.params, msg.tensors)
            if self.epoch >= self.epochs:
                self.done = True
                return
            self.state.begin_epoch(self.epoch)
            self.step = 0
            self._mode = "step"
        elif isinstance(msg, Gradient) and self._mode == "await_grad":
            trace, x, y, attacking = self._pending
            self._pending = None
            if attacking:
                view = self.state.view()
                if self.log is not None:
                    self.log.append(GradientQueryRecord(self.actor_id, msg.step, self.epoch,
                                                        trace.output.detach().clone(), y.clone(), msg.grad))
                self.hook.strategy.receive(view, trace, x, y, msg.grad, self.epoch, msg.step)
            self.state.update(trace, msg.grad)
            self.step += 1
            self._mode = "end" if self.step == self.state.steps else "step"
        else:
            raise TransportError(f"client {self.actor_id} got unexpected {type(msg).__name__} in state {self._mode}")


class ServerActor:
    actor_id = SERVER_ID

    def __init__(self, server: Server, clients: int, epochs: int, probe: tuple[torch.Tensor, torch.Tensor] | None,
                 on_epoch: Callable[[int], None] | None = None) -> None:
        self.server = server
        self.clients = clients
        self.epochs = epochs
        self.probe = probe
        self.on_epoch = on_epoch
        self.done = False
        self._uploads: dict[int, Params | tuple] = {}
        self._acts: dict[int, Activation] = {}
        self._ends = 0
        self._epoch = 0
        self.losses: list[float] = []
        self.epoch_losses: list[float] = []
        self.probe_grads: list[torch.Tensor] = []  # one snapshot at the end of each epoch

    def route(self, msg: Message) -> int:
        return msg.client_id

    def _probe(self) -> torch.Tensor:
        return server_input_grad(self.server.units, self.server.snapshot(), *self.probe)

    def outbox(self) -> list[Message]:
        if len(self._uploads) == self.clients:
            copies = [self._uploads[i] for i in sorted(self._uploads)]
            self._uploads = {}
            keyed = [{k: (c[2 * k], c[2 * k + 1]) for k in range(len(c) // 2)} for c in copies]
            avg = flatten_params(synchronize(keyed))
            if self._epoch >= self.epochs:
                self.done = True
            return [SyncModel(i, avg) for i in range(self.clients)]
        if len(self._acts) == self.clients:
            acts = [self._acts[i] for i in sorted(self._acts)]
            self._acts = {}
            out = []
            for m in acts:
                grad = self.server.gradient_query(m.activation, m.label_tensor())
                self.losses.append(self.server.last_loss)
                out.append(Gradient(m.client_id, m.step, grad))
            self.server.apply_update()
            return out
        return []

    def inbox(self, msg: Message) -> None:
        if isinstance(msg, SyncModel):
            self._uploads[msg.client_id] = msg.tensors
        elif isinstance(msg, Activation):
            self._acts[msg.client_id] = msg
        elif isinstance(msg, EndEpoch):
            self._ends += 1
            if self._ends == self.clients:
                self._ends = 0
                self.epoch_losses.append(float(np.mean(self.losses)) if self.losses else math.nan)
                self.losses = []
                self._epoch += 1
                self.server.set_epoch(self._epoch)
                if self.probe is not None:
                    self.probe_grads.append(self._probe())
                if self.on_epoch is not None:
                    self.on_epoch(msg.epoch)
        else:
            raise TransportError(f"server got unexpected {type(msg).__name__}")


def initial_model(units: Sequence[UnitSpec], n_server: int, streams: Streams) -> SplitModel:
    return split(units, init_params(units, streams, "init/victim"), n_server)


def run_training(
    units: Sequence[UnitSpec],
    n_server: int,
    train: Dataset,
    config: TrainConfig,
    streams: Streams,
    val: Dataset | None = None,
    attack: AttackHook | None = None,
    initial: SplitModel | None = None,
    transport=None,
) -> TrainResult:
    """Train a split model with ``config.clients`` participants on ``train``."""
    model = initial if initial is not None else initial_model(units, n_server, streams)
    shards = partition(train, PartitionPlan(config.clients, config.classes_per_client), streams)
    datasets = [train.subset(s) for s in shards]
    if attack is not None:
        if not 0 <= attack.client_id < config.clients:
            raise ValueError("attacker id outside the client range")
        if attack.data is not None:
            datasets[attack.client_id] = attack.data
    steps = batch_plan(min(len(d) for d in datasets), config.batch_size)
    schedule = config.schedule()
    aug = AugmentConfig() if config.augment else None
    log = QueryLog()
    clients = []
    for i, data in enumerate(datasets):
        state = ClientState(i, model.client_units, model.client_params, data,
                            SGD(config.lr, config.momentum, schedule, config.factor), streams, steps,
                            config.batch_size, config.l1_lambda, aug,
                            malicious=attack is not None and attack.client_id == i)
        hook = attack if state.malicious else None
        clients.append(ClientActor(state, config.epochs, hook, log if hook else None))

    server = Server(model.server_units, model.server_params, SGD(config.lr, config.momentum, schedule, config.factor))
    probe = None
    if config.probes > 0:
        pick = streams.permutation("probe", len(train))[: config.probes]
        px = train.images[torch.as_tensor(pick)]
        probe = (ClientView(model.client_units, model.client_params).activation(px), train.labels[torch.as_tensor(pick)])

    history: list[EpochRecord] = []

    def on_epoch(epoch: int) -> None:
        acc = None
        if val is not None:
            client = synchronize([c.state.params for c in clients])
            net = SplitModel(model.units, model.n_server, client, server.snapshot()).network()
            acc = 100.0 * float((net.predict(val.images) == val.labels).double().mean())
        history.append(EpochRecord(epoch, actor.epoch_losses[-1], acc))

    actor = ServerActor(server, config.clients, config.epochs, probe, on_epoch)
    try:
        transcript = bus_run([actor, *clients], config.schedule_seed, transport, keep=config.keep_transcript)
    except DivergenceError as err:
        raise DivergenceError(f"training diverged at epoch {actor._epoch}: {err}") from err
    final = SplitModel(model.units, model.n_server, clone_params(clients[0].state.params), server.snapshot())
    return TrainResult(final, history, actor.probe_grads, log,
                       transcript,
                       last_step=config.epochs * steps - 1, steps_per_epoch=steps)


def replay_server(transcript: Sequence[bytes], server: Server) -> Params:
    """Feed a recorded transcript's activations to ``server``; return the resulting W_S."""
    acts: list[Activation] = []
    for frame in transcript:
        msg = decode(frame)
        if isinstance(msg, Activation):
            acts.append(msg)
        elif isinstance(msg, Gradient) and acts:
            for m in acts:
                server.gradient_query(m.activation, m.label_tensor())
            server.apply_update()
            acts = []
        elif isinstance(msg, EndEpoch):
            server.set_epoch(msg.epoch + 1)
    return server.snapshot()


def gradient_consistency(snapshots: Sequence[torch.Tensor]) -> list[float]:
    """Relative change of the probe gradients between consecutive epochs."""
    if len(snapshots) < 2:
        raise ValueError("need at least two gradient snapshots")
    out = []
    for prev, cur in zip(snapshots, snapshots[1:]):
        p = prev.reshape(len(prev), -1).double()
        c = cur.reshape(len(cur), -1).double()
        denom = float(p.norm(dim=1).mean())
        num = float((c - p).norm(dim=1).mean())
        out.append(num / denom if denom > 0 else 0.0)
    return out


def server_input_grad(units: Sequence[UnitSpec], params: Params, a: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    trace = forward(units, params, a)
    _, dz = cross_entropy(trace.output, y)
    return backward(units, params, trace, dz, param_grads=False)[1]
