import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import centralized_training, elementwise_mean
from sflme.data import SyntheticSpec, synthesize
from sflme.nn import SGD, Conv2d, Linear, init_params
from sflme.rng import Streams
from sflme.sfl import (
    AttackHook,
    BudgetExceeded,
    ClientView,
    GradientQueryRecord,
    QueryChannel,
    QueryLog,
    Server,
    SplitError,
    TrainConfig,
    gradient_consistency,
    initial_model,
    run_training,
    server_input_grad,
    split,
    synchronize,
)

UNITS = [Conv2d(1, 4, 3, 1, 1, relu=True, pool=True), Linear(64, 16, relu=True), Linear(16, 4)]


def vgg_like(n_units: int):
    return [Linear(8, 8, relu=True) for _ in range(n_units - 1)] + [Linear(8, 2)]


@pytest.fixture(scope="module")
def data():
    return synthesize(SyntheticSpec(n_classes=4, count=120, size=8, seed=2))


# split / synchronize ----------------------------------------------------------


@pytest.mark.parametrize("n, client_units", [(5, 6), (2, 9)])
def test_split_sizes_eleven_units(n, client_units):
    units = vgg_like(11)
    sm = split(units, init_params(units, Streams(0), "init"), n)
    assert len(sm.client_units) == client_units and len(sm.server_units) == n


def test_split_rejects_n_equal_l():
    units = vgg_like(4)
    with pytest.raises(SplitError):
        split(units, init_params(units, Streams(0), "init"), 4)
    with pytest.raises(SplitError):
        split(units, init_params(units, Streams(0), "init"), 0)


def test_split_round_trips_params():
    units = vgg_like(4)
    params = init_params(units, Streams(0), "init")
    full = split(units, params, 2).full_params()
    assert all(torch.equal(full[i][0], params[i][0]) for i in params)


def test_synchronize_identical_copies_bitwise():
    p = init_params(UNITS, Streams(1), "init")
    out = synchronize([p, p, p])
    assert all(torch.equal(out[i][0], p[i][0]) and torch.equal(out[i][1], p[i][1]) for i in p)


def test_synchronize_zero_and_two_gives_one():
    zero = {0: (torch.zeros(3, 2), torch.zeros(3))}
    two = {0: (torch.full((3, 2), 2.0), torch.full((3,), 2.0))}
    out = synchronize([zero, two])
    assert torch.equal(out[0][0], torch.ones(3, 2)) and torch.equal(out[0][1], torch.ones(3))


def test_synchronize_matches_mean_oracle():
    copies = [init_params(UNITS, Streams(k), "init") for k in range(10)]
    out = synchronize(copies)
    for i in out:
        for j in (0, 1):
            ref = elementwise_mean([c[i][j].numpy() for c in copies])
            assert np.abs(out[i][j].numpy() - ref).max() < 1e-7


@given(st.integers(1, 6), st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_synchronize_idempotent(m, seed):
    copies = [init_params(UNITS, Streams(seed + k), "init") for k in range(m)]
    once = synchronize(copies)
    twice = synchronize([once])
    assert all(torch.equal(once[i][0], twice[i][0]) for i in once)


# gradient queries ----------------------------------------------------------------


def test_gradient_query_linear_closed_form():
    g = torch.Generator().manual_seed(0)
    w = torch.randn(5, 7, generator=g)
    b = torch.randn(5, generator=g)
    a = torch.randn(6, 7, generator=g)
    y = torch.tensor([0, 1, 2, 3, 4, 0])
    server = Server([Linear(7, 5)], {0: (w, b)}, frozen=True)
    grad = server.gradient_query(a, y)
    p = torch.softmax(a @ w.T + b, 1)
    expected = (p - torch.nn.functional.one_hot(y, 5).float()) @ w / len(a)
    assert grad.shape == a.shape
    assert (grad - expected).abs().max() < 1e-6


def test_frozen_server_repeats_answers():
    sm = initial_model(UNITS, 2, Streams(3))
    server = Server(sm.server_units, sm.server_params, frozen=True)
    ch = QueryChannel(server, 100)
    a = torch.rand(4, 4, 4, 4)
    y = torch.tensor([0, 1, 2, 3])
    assert torch.equal(ch.gradient_query(a, y), ch.gradient_query(a, y))


def test_unfrozen_server_moves():
    sm = initial_model(UNITS, 2, Streams(3))
    server = Server(sm.server_units, sm.server_params, SGD(0.5))
    a, y = torch.rand(4, 4, 4, 4), torch.tensor([0, 1, 2, 3])
    first = server.gradient_query(a, y)
    server.apply_update()
    assert not torch.equal(first, server.gradient_query(a, y))


def test_channel_meters_budget():
    sm = initial_model(UNITS, 2, Streams(3))
    ch = QueryChannel(Server(sm.server_units, sm.server_params, frozen=True), 6)
    ch.gradient_query(torch.rand(4, 4, 4, 4), torch.zeros(4, dtype=torch.long))
    assert ch.remaining == 2
    with pytest.raises(BudgetExceeded):
        ch.gradient_query(torch.rand(4, 4, 4, 4), torch.zeros(4, dtype=torch.long))
    assert len(ch.log) == 1 and ch.log.samples() == 4


def test_server_exposes_no_prediction_api():
    public = {n for n in dir(Server) if not n.startswith("_")}
    assert not public & {"predict", "logits", "forward", "classify"}
    assert "logits" not in GradientQueryRecord.__dataclass_fields__


def test_record_rejects_mismatched_grad():
    with pytest.raises(ValueError):
        GradientQueryRecord(0, 0, 0, torch.zeros(2, 3), torch.zeros(2), torch.zeros(2, 4))


def test_query_log_round_trip_and_late(tmp_path):
    log = QueryLog()
    for step in range(5):
        a = torch.full((2, 3), float(step))
        log.append(GradientQueryRecord(1, step, step // 2, a, torch.tensor([0, 1]), -a))
    log.save(tmp_path / "q.log")
    back = QueryLog.load(tmp_path / "q.log")
    assert len(back) == 5
    assert all(torch.equal(r.grad, s.grad) and r.step == s.step and r.epoch == s.epoch
               for r, s in zip(back.records, log.records))
    assert [r.step for r in log.late(2, 4).records] == [3, 4]


# training --------------------------------------------------------------------------


def test_defaults_follow_full_scale_schedule():
    cfg = TrainConfig()
    assert cfg.epochs == 200 and cfg.schedule() == (60, 120, 160) and cfg.lr == 0.05


@pytest.mark.parametrize("n", [1, 2])
def test_single_client_equals_centralized(data, n):
    cfg = TrainConfig(epochs=3, batch_size=16, lr=0.05, momentum=0.9, milestones=(2,), clients=1, probes=0)
    result = run_training(UNITS, n, data, cfg, Streams(7))
    init = init_params(UNITS, Streams(7), "init/victim")
    ref = centralized_training(UNITS, init, data, 3, 16, 0.05, 0.9, (2,), 0.2, Streams(7))
    got = result.model.full_params()
    for i in ref:
        assert torch.equal(got[i][0], ref[i][0]) and torch.equal(got[i][1], ref[i][1])


def _train(data, **kw):
    base = dict(epochs=2, batch_size=16, lr=0.05, clients=3, probes=8)
    base.update(kw)
    return run_training(UNITS, 2, data, TrainConfig(**base), Streams(4))


def test_zero_lambda_is_a_noop(data):
    a, b = _train(data), _train(data, l1_lambda=0.0)
    assert all(torch.equal(a.model.full_params()[i][0], b.model.full_params()[i][0]) for i in range(3))


def test_l1_changes_client_only_run(data):
    a, b = _train(data), _train(data, l1_lambda=1e-2)
    assert not torch.equal(a.model.client_params[0][0], b.model.client_params[0][0])


def test_schedule_seed_does_not_change_result(data):
    a, b = _train(data), _train(data, schedule_seed=123)
    assert all(torch.equal(a.model.full_params()[i][0], b.model.full_params()[i][0]) for i in range(3))


def test_consistency_series_length(data):
    result = _train(data, epochs=4)
    assert len(gradient_consistency(result.probe_grads)) == 3


def test_frozen_server_consistency_is_zero():
    sm = initial_model(UNITS, 2, Streams(5))
    server = Server(sm.server_units, sm.server_params, frozen=True)
    a, y = torch.rand(8, 4, 4, 4), torch.arange(8) % 4
    snaps = [server_input_grad(server.units, server.snapshot(), a, y) for _ in range(4)]
    assert gradient_consistency(snaps) == [0.0, 0.0, 0.0]


def test_consistency_needs_two_snapshots():
    with pytest.raises(ValueError):
        gradient_consistency([torch.zeros(2, 2)])


def test_loss_drops_over_training():
    data = synthesize(SyntheticSpec(count=1200, seed=1))
    units = [Conv2d(1, 8, 3, 1, 1, relu=True, pool=True), Conv2d(8, 16, 3, 1, 1, relu=True, pool=True),
             Linear(256, 32, relu=True), Linear(32, 10)]
    result = run_training(units, 2, data, TrainConfig(epochs=5, batch_size=32, lr=0.02, clients=3, probes=0),
                          Streams(1))
    assert result.history[4].loss < result.history[0].loss


def test_gradients_settle_after_last_milestone():
    data = synthesize(SyntheticSpec(count=900, seed=2))
    units = [Conv2d(1, 8, 3, 1, 1, relu=True, pool=True), Conv2d(8, 16, 3, 1, 1, relu=True, pool=True),
             Linear(256, 32, relu=True), Linear(32, 10)]
    cfg = TrainConfig(epochs=10, batch_size=32, lr=0.05, clients=3, probes=64)
    result = run_training(units, 2, data, cfg, Streams(1))
    series = gradient_consistency(result.probe_grads)
    first, last = cfg.schedule()[0], cfg.schedule()[-1]
    # series[k] compares epochs k and k+1
    assert np.mean(series[last:]) < np.mean(series[: first - 1 or 1])


def test_attacker_queries_recorded_with_grad_shapes(data):
    class Probe:
        def __init__(self):
            self.seen = []

        def wants_query(self):
            return True

        def make_query(self, view):
            return torch.rand(4, 1, 8, 8), torch.tensor([0, 1, 2, 3])

        def receive(self, view, trace, x, y, grad_a, epoch, step):
            self.seen.append((epoch, step, grad_a.shape == trace.output.shape))

    probe = Probe()
    cfg = TrainConfig(epochs=3, batch_size=16, lr=0.05, clients=3, probes=0)
    result = run_training(UNITS, 2, data, cfg, Streams(4), attack=AttackHook(probe, launch_epoch=2))
    assert probe.seen and all(ok and epoch == 2 for epoch, _, ok in probe.seen)
    assert len(result.query_log) == len(probe.seen)
    assert len(probe.seen) == result.steps_per_epoch


def test_learnability_default_data():
    """Default data and the desk recipe: at least 90% training accuracy within 20 epochs."""
    full = synthesize(SyntheticSpec(count=12_000, seed=1))
    train = full.subset(range(10_000))
    units = [Conv2d(1, 8, 3, 1, 1, relu=True), Conv2d(8, 16, 3, 1, 1, relu=True, pool=True),
             Conv2d(16, 16, 3, 1, 1, relu=True, pool=True), Conv2d(16, 32, 3, 1, 1, relu=True, pool=True),
             Linear(128, 64, relu=True), Linear(64, 10)]
    cfg = TrainConfig(epochs=18, batch_size=32, lr=0.02, clients=5, probes=0)
    net = run_training(units, 2, train, cfg, Streams(1)).model.network()
    assert float((net.predict(train.images) == train.labels).double().mean()) >= 0.90


def test_client_view_activation_chunks_agree():
    sm = initial_model(UNITS, 2, Streams(6))
    view = ClientView(sm.client_units, sm.client_params)
    x = torch.rand(10, 1, 8, 8)
    assert torch.equal(view.activation(x, chunk=3), view.activation(x))
