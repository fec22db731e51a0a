"""Train -> attack -> evaluate, with every artifact written under one output directory.

Layout of ``out``::

    results.csv                 one row per (seed, N, attack), columns COLUMNS
    victims.csv                 victim accuracy behind every row
    attacks/<run>.json          attack parameters, budget use and metrics
    querylogs/<run>.qlog        gradient-query records (output.query_log)
    surrogates/<run>.ckpt       surrogate weights (output.checkpoints)
    history/<victim>.csv        per-epoch loss and validation accuracy
    consistency/<victim>.csv    relative epoch-to-epoch change of probe gradients
    summary.csv, fidelity_vs_n.csv   written by ``report``

The result rows depend on (config, seed) only: wall-clock time is left empty
unless asked for, and the worker count changes scheduling, never values.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import torch

from ..attacks import (
    Attack,
    AttackContext,
    CraftME,
    GanME,
    GmME,
    NaiveBaseline,
    SoftTrainME,
    SurrogateSettings,
    TrainME,
    Variant,
    drive,
)
from ..data import Dataset, load_or_synthesize, sample_subset, synthesize
from ..evaluation import AdvConfig, InversionConfig, accuracy, adversarial_transfer, fidelity, model_inversion
from ..nn import SGD
from ..nn.checkpoint import load, save
from ..rng import Streams
from ..sfl import (
    AttackHook,
    ClientView,
    Network,
    QueryChannel,
    QueryLog,
    Server,
    TrainConfig,
    TrainResult,
    gradient_consistency,
    run_training,
    split,
)
from ..transport import make_transport
from .config import ExperimentConfig

COLUMNS = ("config_hash", "seed", "mode", "N", "attack", "queries_used", "accuracy", "fidelity",
           "mi_mse", "asr_fgsm", "asr_pgd", "wallclock_s")
WORKERS_ENV = "SFLME_WORKERS"


class PipelineError(RuntimeError):
    pass


def _fmt(x: float | int | None) -> str:
    if x is None:
        return ""
    if isinstance(x, int):
        return str(x)
    return f"{x:.4f}"


def workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as err:
        raise PipelineError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from err
    return max(1, n)


# data and victims -----------------------------------------------------------------


def load_data(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Train/validation split; synthetic data is drawn per seed, IDX files are fixed."""
    d = cfg.data
    if d.source == "idx":
        train_src, val_src = cfg.idx_sources()
        train, val = load_or_synthesize(train_src), load_or_synthesize(val_src)
        return train.subset(range(min(d.train_count, len(train)))), val.subset(range(min(d.val_count, len(val))))
    full = synthesize(cfg.synthetic(seed))
    return full.subset(range(d.train_count)), full.subset(range(d.train_count, d.train_count + d.val_count))


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, momentum=t.momentum,
        milestones=tuple(t.milestones) if t.milestones is not None else None, factor=t.factor,
        clients=t.clients, classes_per_client=t.classes_per_client, l1_lambda=cfg.defense.l1_lambda,
        augment=t.augment, schedule_seed=t.schedule_seed, transport=t.transport, probes=t.probes,
    )


def _transport(cfg: ExperimentConfig):
    return make_transport(cfg.train.transport) if cfg.train.transport != "inprocess" else None


def victim_key(cfg: ExperimentConfig, seed: int, n_train: int) -> str:
    """Identity of a clean victim: everything that shapes its training, nothing else.

    The transport is left out on purpose; it carries identical bytes either way.
    """
    train = dataclasses.asdict(cfg.train)
    train.pop("transport")
    body = {"model": cfg.model.preset, "data": dataclasses.asdict(cfg.data), "train": train,
            "l1": cfg.defense.l1_lambda, "seed": seed, "n": n_train}
    blob = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_history(path: Path, result: TrainResult) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_accuracy"])
        for r in result.history:
            w.writerow([r.epoch, _fmt(r.loss), _fmt(r.val_accuracy)])


def _write_consistency(path: Path, result: TrainResult) -> None:
    if len(result.probe_grads) < 2:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "relative_change"])
        for e, v in enumerate(gradient_consistency(result.probe_grads), start=1):
            w.writerow([e, _fmt(v)])


def clean_victim(cfg: ExperimentConfig, seed: int, n_train: int, train: Dataset, val: Dataset,
                 cache: Path) -> Network:
    """Victim trained without an attacker, reused from ``cache`` when present."""
    key = victim_key(cfg, seed, n_train)
    ckpt = cache / f"victim_{key}.ckpt"
    if ckpt.exists():
        units, params = load(ckpt)
        return Network(units, params)
    result = run_training(cfg.units(), n_train, train, train_config(cfg), Streams(seed), val=val,
                          transport=_transport(cfg))
    _write_history(cache / f"victim_{key}.history.csv", result)
    _write_consistency(cache / f"victim_{key}.consistency.csv", result)
    net = result.model.network()
    tmp = ckpt.with_suffix(".tmp")
    save(tmp, net.units, net.params)
    tmp.replace(ckpt)  # atomic: parallel workers may race on a shared cache
    return net


def _copy_victim_logs(cache: Path, key: str, out: Path, name: str) -> None:
    for kind in ("history", "consistency"):
        src = cache / f"victim_{key}.{kind}.csv"
        if src.exists():
            dst = out / kind / f"{name}.csv"
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(src, dst)


# attacks ---------------------------------------------------------------------------


def attacker_data(cfg: ExperimentConfig, train: Dataset, streams: Streams) -> Dataset:
    count = max(1, round(cfg.attack.data_fraction * len(train)))
    return sample_subset(train, count, streams, stratified=cfg.attack.stratified)


def _gm_data(cfg: ExperimentConfig, seed: int, own: Dataset) -> Dataset:
    if cfg.attack.aux_family is None:
        return own
    if cfg.data.source != "synthetic":
        raise PipelineError("attack.aux_family needs synthetic data")
    spec = dataclasses.replace(cfg.synthetic(seed), family=cfg.attack.aux_family, count=len(own))
    return synthesize(spec)


def make_attack(cfg: ExperimentConfig, method: str, data: Dataset, gm_data: Dataset, streams: Streams) -> Attack:
    a = cfg.attack
    shape, classes = cfg.input_shape(), cfg.data.n_classes
    if method == "craft":
        return CraftME(a.budget, a.query_batch, classes, shape, streams, steps=a.craft_steps, lr=a.craft_lr)
    if method == "gan":
        return GanME(a.budget, a.query_batch, classes, shape, streams, latent_dim=a.gan_latent, lr=a.gan_lr,
                     diversity_weight=a.gan_diversity, synthetic_count=a.gan_samples)
    if method == "gm":
        return GmME(a.budget, a.query_batch, gm_data, late_k=a.late_k, epochs=a.gm_epochs, lr=a.gm_lr)
    if method == "softtrain":
        return SoftTrainME(a.budget, a.query_batch, data, alpha=a.soft_alpha, soft_weight=a.soft_weight,
                           late_k=a.late_k)
    if method == "train":
        return TrainME(data)
    if method == "naive":
        return NaiveBaseline(data)
    raise PipelineError(f"unknown attack method {method!r}")


def surrogate_settings(cfg: ExperimentConfig, method: str) -> SurrogateSettings:
    s = cfg.surrogate
    return SurrogateSettings(
        epochs=s.epochs, lr=s.lr, momentum=s.momentum, batch_size=s.batch_size,
        milestones=tuple(s.milestones) if s.milestones is not None else None, factor=s.factor,
        # augmentation only makes sense for hard labels on real images
        augment=s.augment and method in ("train", "naive"),
    )


@dataclass
class Outcome:
    surrogate: Network
    victim: Network
    client: ClientView
    queries_used: int
    log: QueryLog
    victim_accuracy: float


def fine_tune(cfg: ExperimentConfig, method: str, n: int, victim: Network, data: Dataset, gm_data: Dataset,
              val: Dataset, streams: Streams) -> Outcome:
    """Attack a fully trained model through its server part."""
    sm = split(victim.units, victim.params, n)
    view = ClientView(sm.client_units, sm.client_params)
    a = cfg.attack
    opt = None if a.server_frozen else SGD(a.server_lr)
    server = Server(sm.server_units, sm.server_params, optimizer=opt, frozen=a.server_frozen)
    channel = QueryChannel(server, a.budget, log=QueryLog(), record=cfg.output.query_log)
    attack = make_attack(cfg, method, data, gm_data, streams)
    drive(attack, view, channel)
    ctx = AttackContext(cfg.units(), n, cfg.input_shape(), cfg.data.n_classes, surrogate_settings(cfg, method),
                        streams, Variant(a.variant))
    sur = attack.finish(view, ctx)
    net = sur if isinstance(sur, Network) else sur.network()
    target = sm.network()
    return Outcome(net, target, view, channel.used, channel.log, accuracy(target, val))


def from_scratch(cfg: ExperimentConfig, method: str, n: int, seed: int, train: Dataset, data: Dataset,
                 gm_data: Dataset, val: Dataset, streams: Streams) -> tuple[Outcome, TrainResult]:
    """Attack as one of the participants while the victim is being trained."""
    attack = make_attack(cfg, method, data, gm_data, streams)
    hook = AttackHook(attack, cfg.launch_epoch())
    result = run_training(cfg.units(), n, train, train_config(cfg), Streams(seed), val=val, attack=hook,
                          transport=_transport(cfg))
    view = ClientView(result.model.client_units, result.model.client_params)
    ctx = AttackContext(cfg.units(), n, cfg.input_shape(), cfg.data.n_classes, surrogate_settings(cfg, method),
                        streams, Variant(cfg.attack.variant), last_step=result.last_step)
    sur = attack.finish(view, ctx)
    net = sur if isinstance(sur, Network) else sur.network()
    target = result.model.network()
    return Outcome(net, target, view, attack.used, result.query_log, accuracy(target, val)), result


# evaluation --------------------------------------------------------------------------


def inversion_mse(cfg: ExperimentConfig, client: ClientView, val: Dataset, streams: Streams) -> float:
    e = cfg.eval
    probes = min(e.mi_probes, len(val) - 1)
    return model_inversion(client, val.subset(range(probes, len(val))), val.images[:probes],
                           InversionConfig(epochs=e.mi_epochs, lr=e.mi_lr), streams)


def adv_config(cfg: ExperimentConfig) -> AdvConfig:
    e = cfg.eval
    return AdvConfig(fgsm_eps=e.fgsm_eps, pgd_eps=e.pgd_eps, pgd_iters=e.pgd_iters, pgd_step=e.pgd_step,
                     samples=e.adv_samples)


# orchestration ------------------------------------------------------------------------


def _run_name(mode: str, seed: int, n: int, method: str) -> str:
    return f"{mode}_s{seed}_n{n}_{method}"


def _write_artifacts(cfg: ExperimentConfig, out: Path, name: str, method: str, outcome: Outcome,
                     metrics: dict) -> None:
    doc = {
        "config_hash": cfg.hash(),
        "method": method,
        "mode": cfg.attack.mode,
        "attack": dataclasses.asdict(cfg.attack),
        "surrogate": dataclasses.asdict(cfg.surrogate),
        "surrogate_units": [dataclasses.asdict(u) for u in outcome.surrogate.units],
        "queries_used": outcome.queries_used,
        "victim_accuracy": round(outcome.victim_accuracy, 4),
        "metrics": {k: (round(v, 4) if isinstance(v, float) else v) for k, v in metrics.items()},
    }
    (out / "attacks").mkdir(parents=True, exist_ok=True)
    (out / "attacks" / f"{name}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if cfg.output.query_log and outcome.log.records:
        (out / "querylogs").mkdir(parents=True, exist_ok=True)
        outcome.log.save(out / "querylogs" / f"{name}.qlog")
    if cfg.output.checkpoints:
        (out / "surrogates").mkdir(parents=True, exist_ok=True)
        save(out / "surrogates" / f"{name}.ckpt", outcome.surrogate.units, outcome.surrogate.params)


def run_seed(cfg: ExperimentConfig, seed: int, out: Path, cache: Path) -> tuple[list[list[str]], list[list[str]]]:
    """Every (N, attack) row of one seed, plus the matching victim-accuracy rows."""
    torch.set_num_threads(1)
    train, val = load_data(cfg, seed)
    streams = Streams(seed).child("attack")
    data = attacker_data(cfg, train, streams)
    gm_data = _gm_data(cfg, seed, data)
    mode = cfg.attack.mode
    rows, victim_rows = [], []
    for n in cfg.n_values():
        victim = None
        mi_cache: float | None = None
        if mode == "fine-tune":
            n_train = cfg.model.pretrain_n if cfg.model.pretrain_n is not None else n
            victim = clean_victim(cfg, seed, n_train, train, val, cache)
            _copy_victim_logs(cache, victim_key(cfg, seed, n_train), out, f"victim_s{seed}_n{n_train}")
        for method in cfg.attack.methods:
            name = _run_name(mode, seed, n, method)
            start = time.perf_counter()
            if victim is not None:
                outcome = fine_tune(cfg, method, n, victim, data, gm_data, val, streams)
            else:
                outcome, result = from_scratch(cfg, method, n, seed, train, data, gm_data, val, streams)
                _write_history(out / "history" / f"{name}.csv", result)
                _write_consistency(out / "consistency" / f"{name}.csv", result)
            metrics: dict = {"accuracy": accuracy(outcome.surrogate, val),
                             "fidelity": fidelity(outcome.surrogate, outcome.victim, val)}
            if cfg.eval.mi:
                # depends on the victim's client part only, so fine-tuning rows share it
                if mi_cache is None or victim is None:
                    mi_cache = inversion_mse(cfg, outcome.client, val, streams)
                metrics["mi_mse"] = mi_cache
            if cfg.eval.adv:
                metrics["asr_fgsm"], metrics["asr_pgd"] = adversarial_transfer(
                    outcome.surrogate, outcome.victim, val, adv_config(cfg), streams)
            wall = time.perf_counter() - start if cfg.output.record_wallclock else None
            _write_artifacts(cfg, out, name, method, outcome, metrics)
            rows.append([cfg.hash(), str(seed), mode, str(n), method, str(outcome.queries_used),
                         _fmt(metrics["accuracy"]), _fmt(metrics["fidelity"]), _fmt(metrics.get("mi_mse")),
                         _fmt(metrics.get("asr_fgsm")), _fmt(metrics.get("asr_pgd")), _fmt(wall)])
            victim_rows.append([str(seed), mode, str(n), method, _fmt(outcome.victim_accuracy)])
    return rows, victim_rows


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None, cache: str | Path | None = None,
                   n_workers: int | None = None) -> Path:
    """Run the configured sweep and write every artifact; returns the results.csv path.

    If a seed fails, the rows of the seeds that finished are still written and
    a ``PARTIAL`` marker names the failure before the error propagates.
    """
    out = Path(out if out is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cache = Path(cache) if cache is not None else out / "victims"
    cache.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    seeds = cfg.seeds()
    n_workers = workers() if n_workers is None else n_workers
    done: dict[int, tuple[list, list]] = {}
    failure: tuple[int, BaseException] | None = None
    if n_workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(n_workers, len(seeds))) as pool:
            futures = {s: pool.submit(run_seed, cfg, s, out, cache) for s in seeds}
            for s, fut in futures.items():
                try:
                    done[s] = fut.result()
                except Exception as err:  # noqa: BLE001 - recorded, then re-raised below
                    failure = failure or (s, err)
    else:
        for s in seeds:
            try:
                done[s] = run_seed(cfg, s, out, cache)
            except Exception as err:  # noqa: BLE001
                failure = (s, err)
                break
    rows = [r for s in seeds if s in done for r in done[s][0]]
    victim_rows = [r for s in seeds if s in done for r in done[s][1]]
    results = out / "results.csv"
    _write_csv(results, COLUMNS, rows)
    _write_csv(out / "victims.csv", ("seed", "mode", "N", "attack", "victim_accuracy"), victim_rows)
    marker = out / "PARTIAL"
    if failure is not None:
        seed, err = failure
        marker.write_text(json.dumps({"failed_seed": seed, "error": f"{type(err).__name__}: {err}",
                                      "completed_seeds": sorted(done)}, indent=2) + "\n")
        raise PipelineError(f"seed {seed} failed: {err}") from err
    marker.unlink(missing_ok=True)
    from .report import report

    report(out)
    return results


def train_victims(cfg: ExperimentConfig, out: str | Path | None = None) -> list[tuple[int, int, float]]:
    """Train (or load) the clean victim for every seed and N; returns (seed, N, accuracy)."""
    out = Path(out if out is not None else cfg.out)
    cache = out / "victims"
    cache.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    rows = []
    for seed in cfg.seeds():
        train, val = load_data(cfg, seed)
        ns = [cfg.model.pretrain_n] if cfg.model.pretrain_n is not None else cfg.n_values()
        for n in ns:
            net = clean_victim(cfg, seed, n, train, val, cache)
            _copy_victim_logs(cache, victim_key(cfg, seed, n), out, f"victim_s{seed}_n{n}")
            rows.append((seed, n, accuracy(net, val)))
    return rows
