"""Typed messages, their binary framing, and the ordered bus between actors.

Frame layout (all little-endian)::

    u32 length      payload byte count
    u8  msg_type    1 Hello, 2 SyncModel, 3 Activation, 4 Gradient, 5 EndEpoch
    ... payload

Payloads::

    Hello       u32 client_id
    SyncModel   u32 client_id, u32 n_tensors, tensor * n_tensors
    Activation  u32 client_id, u32 step, tensor activation, tensor labels
    Gradient    u32 client_id, u32 step, tensor grad
    EndEpoch    u32 epoch

    tensor      u8 rank, u32 dims[rank], f32 data[prod(dims)]

Labels travel as an f32 tensor: rank 1 for class indices, rank 2 for soft
labels. Nothing on the wire can carry logits or predictions.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence, Union

import numpy as np
import torch

HEADER = struct.Struct("<IB")
MAX_PAYLOAD = 1 << 30


class DecodeError(ValueError):
    pass


class TransportError(RuntimeError):
    pass


def _f32(t: torch.Tensor, what: str) -> torch.Tensor:
    if t.dtype == torch.float64:
        raise TransportError(f"{what}: 64-bit tensors never cross the wire")
    if t.is_floating_point():
        return t.detach().to(torch.float32).contiguous()
    out = t.detach().to(torch.float32)
    if out.numel() and float(out.abs().max()) >= 2**24:
        raise TransportError(f"{what}: integer values too large for f32")
    return out.contiguous()


def _teq(a: torch.Tensor, b: torch.Tensor) -> bool:
    return a.dtype == b.dtype and a.shape == b.shape and torch.equal(a, b)


@dataclass(frozen=True, eq=False)
class Hello:
    client_id: int

    def __eq__(self, other) -> bool:
        return type(other) is Hello and other.client_id == self.client_id


@dataclass(frozen=True, eq=False)
class SyncModel:
    client_id: int
    tensors: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "tensors", tuple(_f32(t, "SyncModel") for t in self.tensors))

    def __eq__(self, other) -> bool:
        return (
            type(other) is SyncModel
            and other.client_id == self.client_id
            and len(other.tensors) == len(self.tensors)
            and all(_teq(a, b) for a, b in zip(self.tensors, other.tensors))
        )


@dataclass(frozen=True, eq=False)
class Activation:
    client_id: int
    step: int
    activation: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self) -> None:
        object.__setattr__(self, "activation", _f32(self.activation, "Activation"))
        object.__setattr__(self, "labels", _f32(self.labels, "Activation labels"))

    def __eq__(self, other) -> bool:
        return (
            type(other) is Activation
            and (other.client_id, other.step) == (self.client_id, self.step)
            and _teq(other.activation, self.activation)
            and _teq(other.labels, self.labels)
        )

    def label_tensor(self) -> torch.Tensor:
        return self.labels.long() if self.labels.dim() == 1 else self.labels


@dataclass(frozen=True, eq=False)
class Gradient:
    client_id: int
    step: int
    grad: torch.Tensor

    def __post_init__(self) -> None:
        object.__setattr__(self, "grad", _f32(self.grad, "Gradient"))

    def __eq__(self, other) -> bool:
        return (
            type(other) is Gradient
            and (other.client_id, other.step) == (self.client_id, self.step)
            and _teq(other.grad, self.grad)
        )


@dataclass(frozen=True, eq=False)
class EndEpoch:
    epoch: int

    def __eq__(self, other) -> bool:
        return type(other) is EndEpoch and other.epoch == self.epoch


Message = Union[Hello, SyncModel, Activation, Gradient, EndEpoch]
TAGS = {Hello: 1, SyncModel: 2, Activation: 3, Gradient: 4, EndEpoch: 5}


def _u32(v: int) -> bytes:
    if not 0 <= v < 2**32:
        raise TransportError(f"value {v} does not fit in u32")
    return struct.pack("<I", v)


def _tensor(t: torch.Tensor) -> bytes:
    arr = t.numpy().astype("<f4", copy=False)
    if arr.ndim > 255:
        raise TransportError("tensor rank too large")
    return struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()


def encode(msg: Message) -> bytes:
    tag = TAGS.get(type(msg))
    if tag is None:
        raise TransportError(f"cannot encode {type(msg).__name__}")
    if isinstance(msg, Hello):
        payload = _u32(msg.client_id)
    elif isinstance(msg, SyncModel):
        payload = _u32(msg.client_id) + _u32(len(msg.tensors)) + b"".join(_tensor(t) for t in msg.tensors)
    elif isinstance(msg, Activation):
        payload = _u32(msg.client_id) + _u32(msg.step) + _tensor(msg.activation) + _tensor(msg.labels)
    elif isinstance(msg, Gradient):
        payload = _u32(msg.client_id) + _u32(msg.step) + _tensor(msg.grad)
    else:
        payload = _u32(msg.epoch)
    return HEADER.pack(len(payload), tag) + payload


class _Reader:
    def __init__(self, buf: memoryview) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise DecodeError("payload ends inside a field")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def tensor(self) -> torch.Tensor:
        rank = self.take(1)[0]
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        if n * 4 > len(self.buf) - self.pos:
            raise DecodeError(f"tensor dims {dims} exceed the remaining payload")
        data = np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        return torch.from_numpy(data.copy())


def decode(frame: bytes) -> Message:
    msg, used = decode_prefix(frame)
    if used != len(frame):
        raise DecodeError(f"{len(frame) - used} trailing bytes after frame")
    return msg


def decode_prefix(buf: bytes | memoryview, offset: int = 0) -> tuple[Message, int]:
    """Decode one frame starting at ``offset``; return it and the offset after it."""
    view = memoryview(buf)
    if len(view) - offset < HEADER.size:
        raise DecodeError("truncated frame header")
    length, tag = HEADER.unpack_from(view, offset)
    start = offset + HEADER.size
    if length > MAX_PAYLOAD:
        raise DecodeError(f"frame length {length} exceeds limit")
    if start + length > len(view):
        raise DecodeError(f"truncated frame: length says {length}, {len(view) - start} bytes present")
    r = _Reader(view[start : start + length])
    if tag == 1:
        msg: Message = Hello(r.u32())
    elif tag == 2:
        cid, n = r.u32(), r.u32()
        msg = SyncModel(cid, tuple(r.tensor() for _ in range(n)))
    elif tag == 3:
        cid, step = r.u32(), r.u32()
        msg = Activation(cid, step, r.tensor(), r.tensor())
    elif tag == 4:
        cid, step = r.u32(), r.u32()
        msg = Gradient(cid, step, r.tensor())
        # the grad tensor is the whole remainder; nothing may follow it
    elif tag == 5:
        msg = EndEpoch(r.u32())
    else:
        raise DecodeError(f"unknown msg_type 0x{tag:02x}")
    if r.pos != length:
        raise DecodeError(f"{length - r.pos} unread payload bytes (dims/payload mismatch)")
    return msg, start + length


def decode_stream(buf: bytes) -> list[Message]:
    out, pos = [], 0
    while pos < len(buf):
        msg, pos = decode_prefix(buf, pos)
        out.append(msg)
    return out


# transports -------------------------------------------------------------------


class InProcessTransport:
    def carry(self, frame: bytes) -> bytes:
        return frame

    def close(self) -> None:
        pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        part = sock.recv(min(n - got, 1 << 20))
        if not part:
            raise TransportError("socket closed mid-frame")
        chunks.append(part)
        got += len(part)
    return b"".join(chunks)


class SocketTransport:
    """Carries each frame over a connected stream socket pair, in order."""

    def __init__(self) -> None:
        self._send, self._recv = socket.socketpair()
        self._queue: queue.Queue = queue.Queue()
        self._writer = threading.Thread(target=self._pump, daemon=True)
        self._writer.start()

    def _pump(self) -> None:
        while True:
            frame = self._queue.get()
            if frame is None:
                return
            self._send.sendall(frame)

    def carry(self, frame: bytes) -> bytes:
        self._queue.put(frame)
        header = _recv_exact(self._recv, HEADER.size)
        length, _ = HEADER.unpack(header)
        return header + _recv_exact(self._recv, length)

    def close(self) -> None:
        self._queue.put(None)
        self._writer.join(timeout=5)
        self._send.close()
        self._recv.close()


def make_transport(kind: str):
    if kind == "inprocess":
        return InProcessTransport()
    if kind == "socket":
        return SocketTransport()
    raise TransportError(f"unknown transport {kind!r}")


# bus ----------------------------------------------------------------------------


class Bus:
    """Serialises delivery and records every frame in delivery order.

    Messages of one phase may be produced in any physical order (simulated
    here with ``schedule_seed``); they are always delivered in ascending
    client id, so the transcript does not depend on the schedule.
    """

    def __init__(self, transport=None, schedule_seed: int = 0, keep: bool = True) -> None:
        self.transport = transport or InProcessTransport()
        self.keep = keep
        self.transcript: list[bytes] = []
        self._order = np.random.Generator(np.random.Philox(schedule_seed))

    def deliver(self, msg: Message) -> Message:
        frame = self.transport.carry(encode(msg))
        if self.keep:
            self.transcript.append(frame)
        return decode(frame)

    def phase(self, producers: Sequence[tuple[int, Callable[[], Message]]]) -> list[Message]:
        """Run producers (one per client) in a scheduler-chosen order, deliver by client id."""
        produced = {}
        for k in self._order.permutation(len(producers)):
            cid, make = producers[int(k)]
            produced[cid] = make()
        return [self.deliver(produced[cid]) for cid in sorted(produced)]

    def transcript_bytes(self) -> bytes:
        return b"".join(self.transcript)

    def close(self) -> None:
        self.transport.close()


def bus_run(actors: Iterable, schedule_seed: int = 0, transport=None, max_rounds: int = 10_000_000,
            keep: bool = True) -> list[bytes]:
    """Drive message-passing actors until all are done; returns the transcript.

    Each actor exposes ``actor_id``, ``outbox() -> list[Message]`` (messages
    it is ready to send this round), ``inbox(msg)`` and ``done``. Messages
    are routed by ``route(msg) -> actor_id`` on the actor that sent them.
    A round in which nobody sends anything while some actor is not done is a
    deadlock. With ``keep=False`` frames are carried but not retained.
    """
    actors = list(actors)
    by_id = {a.actor_id: a for a in actors}
    bus = Bus(transport, schedule_seed, keep)
    try:
        for _ in range(max_rounds):
            if all(a.done for a in actors):
                return bus.transcript
            pending = [(a.actor_id, a) for a in actors if not a.done]
            outgoing: list[tuple[int, Message, object]] = []
            for k in bus._order.permutation(len(pending)):
                aid, actor = pending[int(k)]
                for msg in actor.outbox():
                    outgoing.append((aid, msg, actor))
            if not outgoing:
                raise TransportError("deadlock: no actor made progress")
            for aid, msg, actor in sorted(outgoing, key=lambda t: (_phase_key(t[1]), t[0])):
                by_id[actor.route(msg)].inbox(bus.deliver(msg))
        raise TransportError("bus exceeded its round limit")
    finally:
        bus.close()


def _phase_key(msg: Message) -> int:
    order = {Hello: 0, SyncModel: 1, Activation: 2, Gradient: 3, EndEpoch: 4}
    return order[type(msg)]
