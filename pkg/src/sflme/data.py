"""Datasets: IDX files, synthetic class-conditional images, client partitions, augmentation."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .rng import Streams

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: torch.Tensor  # (count, channels, H, W) in [0, 1]
    labels: torch.Tensor  # (count,) int64
    n_classes: int

    def __post_init__(self) -> None:
        if self.images.dim() != 4:
            raise DataError(f"images must be (count, C, H, W), got {tuple(self.images.shape)}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError("image and label counts differ")
        if len(self.labels) and (int(self.labels.max()) >= self.n_classes or int(self.labels.min()) < 0):
            raise DataError(f"labels must lie in [0, {self.n_classes})")
        if len(self.images) and (float(self.images.min()) < 0 or float(self.images.max()) > 1):
            raise DataError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> Dataset:
        idx = torch.as_tensor(np.asarray(indices, dtype=np.int64))
        return Dataset(self.images[idx], self.labels[idx], self.n_classes)


# IDX ---------------------------------------------------------------------


def read_idx(path: str | Path, expect: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expect:
        raise DataError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expect:08x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise DataError(f"{path}: truncated IDX dims")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    body = raw[4 + 4 * ndim :]
    n = math.prod(dims)
    if len(body) != n:
        raise DataError(f"{path}: expected {n} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(path: str | Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    Path(path).write_bytes(struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes())


def load_idx(images_path: str | Path, labels_path: str | Path, n_classes: int | None = None) -> Dataset:
    images = read_idx(images_path, IDX_IMAGES)
    labels = read_idx(labels_path, IDX_LABELS)
    if images.shape[0] != labels.shape[0]:
        raise DataError("IDX image and label files disagree on count")
    x = torch.from_numpy(images.astype(np.float32) / 255.0).unsqueeze(1)
    y = torch.from_numpy(labels.astype(np.int64))
    return Dataset(x, y, n_classes or int(y.max()) + 1)


# synthetic -----------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Class-conditional blob images.

    ``family`` selects the class prototypes: two specs with the same family
    and different ``seed`` are train/validation draws of one task, a different
    family gives the same rendering statistics over unrelated classes.
    """

    n_classes: int = 10
    count: int = 10_000
    size: int = 16
    channels: int = 1
    seed: int = 0
    family: int = 0
    blobs: int = 3
    jitter: float = 1.5
    noise: float = 0.12
    distractors: int = 1


def _prototypes(spec: SyntheticSpec) -> np.ndarray:
    """(n_classes, 2*blobs, 5): cx, cy, sigma, amplitude, channel weight."""
    g = Streams(spec.family).generator(f"synthetic/prototypes/c{spec.channels}/s{spec.size}")
    protos = np.zeros((spec.n_classes, 2 * spec.blobs, 4 + spec.channels))
    half = (spec.size - 1) / 2
    for k in range(spec.n_classes):
        for j in range(spec.blobs):
            cx = g.uniform(0.5, half)
            cy = g.uniform(1.5, spec.size - 2.5)
            sigma = g.uniform(1.0, 2.6)
            amp = g.uniform(0.55, 1.0)
            colour = g.uniform(0.3, 1.0, size=spec.channels)
            # mirrored pair keeps every class invariant under horizontal flips
            protos[k, 2 * j] = [cx, cy, sigma, amp, *colour]
            protos[k, 2 * j + 1] = [spec.size - 1 - cx, cy, sigma, amp, *colour]
    return protos


def _render(centres_x, centres_y, sigma, amp, colour, size) -> np.ndarray:
    # centres etc. are (n, b); colour (n, b, C); result (n, C, size, size)
    grid = np.arange(size, dtype=np.float64)
    gx = np.exp(-((grid[None, None, :] - centres_x[..., None]) ** 2) / (2 * sigma[..., None] ** 2))
    gy = np.exp(-((grid[None, None, :] - centres_y[..., None]) ** 2) / (2 * sigma[..., None] ** 2))
    blob = (amp[..., None, None] * gy[..., :, None] * gx[..., None, :])  # (n, b, H, W)
    return np.einsum("nbhw,nbc->nchw", blob, colour)


def synthesize(spec: SyntheticSpec) -> Dataset:
    if spec.n_classes < 2 or spec.count < 1 or spec.size < 4:
        raise DataError("synthetic spec needs n_classes >= 2, count >= 1, size >= 4")
    s = Streams(spec.seed).child(f"synthetic/family{spec.family}")
    protos = _prototypes(spec)
    labels = np.arange(spec.count) % spec.n_classes
    labels = labels[s.permutation("labels", spec.count)]
    g = s.generator("render")
    p = protos[labels]  # (n, b, 4 + C)
    n, b = p.shape[:2]
    # one shared jitter per mirrored pair keeps each sample near-symmetric
    shift = np.repeat(g.normal(0, spec.jitter, size=(n, b // 2, 2)), 2, axis=1)
    shift[:, 1::2, 0] *= -1
    cx = p[..., 0] + shift[..., 0]
    cy = p[..., 1] + shift[..., 1]
    amp = p[..., 3] * np.repeat(g.uniform(0.7, 1.0, size=(n, b // 2)), 2, axis=1)
    img = _render(cx, cy, p[..., 2], amp, p[..., 4:], spec.size)
    if spec.distractors:
        d = spec.distractors
        dx = g.uniform(0, spec.size - 1, size=(n, d))
        dy = g.uniform(0, spec.size - 1, size=(n, d))
        ds = g.uniform(0.8, 2.0, size=(n, d))
        da = g.uniform(0.2, 0.6, size=(n, d))
        dc = g.uniform(0.3, 1.0, size=(n, d, spec.channels))
        img += _render(dx, dy, ds, da, dc, spec.size)
    img += g.normal(0, spec.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Dataset(torch.from_numpy(img), torch.from_numpy(labels.astype(np.int64)), spec.n_classes)


@dataclass(frozen=True)
class IdxSource:
    images: str
    labels: str
    n_classes: int | None = None


def load_or_synthesize(source: SyntheticSpec | IdxSource) -> Dataset:
    if isinstance(source, SyntheticSpec):
        return synthesize(source)
    if isinstance(source, IdxSource):
        return load_idx(source.images, source.labels, source.n_classes)
    raise DataError(f"unsupported data source {source!r}")


# partitions -----------------------------------------------------------------


@dataclass(frozen=True)
class PartitionPlan:
    clients: int
    classes_per_client: int | None = None  # None means IID

    @property
    def mode(self) -> str:
        return "iid" if self.classes_per_client is None else "class_limited"


def partition(dataset: Dataset, plan: PartitionPlan, streams: Streams) -> list[np.ndarray]:
    """Disjoint, equal-size (within one) index shards, one per client."""
    n = len(dataset)
    m = plan.clients
    if m < 1:
        raise DataError("need at least one client")
    if m > n:
        raise DataError(f"{m} clients exceed {n} samples")
    if plan.classes_per_client is None:
        perm = streams.permutation("partition/iid", n)
        return [np.sort(s) for s in np.array_split(perm, m)]
    c = plan.classes_per_client
    if not 1 <= c <= dataset.n_classes:
        raise DataError(f"classes per client must lie in [1, {dataset.n_classes}]")
    labels = dataset.labels.numpy()
    g = streams.generator("partition/classes")
    class_order = g.permutation(dataset.n_classes)
    holders: dict[int, list[int]] = {k: [] for k in range(dataset.n_classes)}
    for i in range(m):
        for j in range(c):
            holders[int(class_order[(i * c + j) % dataset.n_classes])].append(i)
    shards: list[list[int]] = [[] for _ in range(m)]
    for k, owners in holders.items():
        if not owners:
            continue
        idx = np.flatnonzero(labels == k)
        idx = idx[g.permutation(len(idx))]
        for owner, part in zip(owners, np.array_split(idx, len(owners))):
            shards[owner].extend(part.tolist())
    size = min(len(s) for s in shards)
    if size == 0:
        raise DataError("class-limited plan leaves a client without data")
    out = []
    for i, s in enumerate(shards):
        arr = np.asarray(s)
        arr = arr[streams.permutation(f"partition/trim{i}", len(arr))][:size]
        out.append(np.sort(arr))
    return out


def sample_subset(dataset: Dataset, count: int, streams: Streams, name: str = "attacker/subset",
                  stratified: bool = False, classes: Sequence[int] | None = None) -> Dataset:
    """Uniform (or per-class stratified) sample, optionally restricted to ``classes``."""
    labels = dataset.labels.numpy()
    pool = np.arange(len(dataset)) if classes is None else np.flatnonzero(np.isin(labels, list(classes)))
    if count > len(pool) or count < 1:
        raise DataError(f"cannot draw {count} samples from a pool of {len(pool)}")
    g = streams.generator(name)
    if not stratified:
        return dataset.subset(np.sort(g.choice(pool, size=count, replace=False)))
    groups = [pool[labels[pool] == k] for k in np.unique(labels[pool])]
    per = np.array_split(np.arange(count), len(groups))
    picks = [g.choice(grp, size=min(len(p), len(grp)), replace=False) for grp, p in zip(groups, per)]
    return dataset.subset(np.sort(np.concatenate(picks)))


def noise_images(count: int, shape: Sequence[int], generator: np.random.Generator) -> torch.Tensor:
    return torch.from_numpy(generator.uniform(0.0, 1.0, size=(count, *shape)).astype(np.float32))


# augmentation ----------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    flip_p: float = 0.5
    max_degrees: float = 15.0


def hflip(batch: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    out = batch.clone()
    out[mask] = batch[mask].flip(-1)
    return out


def rotate(batch: torch.Tensor, degrees: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbour rotation about the image centre, zero fill."""
    theta = torch.deg2rad(degrees.to(torch.float64))
    cos, sin = torch.cos(theta), torch.sin(theta)
    zero = torch.zeros_like(cos)
    mat = torch.stack([torch.stack([cos, -sin, zero], 1), torch.stack([sin, cos, zero], 1)], 1)
    grid = F.affine_grid(mat.to(batch.dtype), list(batch.shape), align_corners=False)
    return F.grid_sample(batch, grid, mode="nearest", padding_mode="zeros", align_corners=False)


def augment(batch: torch.Tensor, generator: np.random.Generator, config: AugmentConfig = AugmentConfig()) -> torch.Tensor:
    n = batch.shape[0]
    flips = torch.from_numpy(generator.random(n) < config.flip_p)
    angles = torch.from_numpy(generator.uniform(-config.max_degrees, config.max_degrees, n))
    return rotate(hflip(batch, flips), angles).clamp(0.0, 1.0)
