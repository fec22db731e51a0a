import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from sflme.attacks import (
    AttackContext,
    AttackError,
    ConditionalGenerator,
    CraftME,
    GanME,
    GmME,
    LabelledSet,
    NaiveBaseline,
    SoftTrainME,
    SurrogateSettings,
    TrainME,
    Variant,
    compute_soft_labels,
    diversity_loss,
    drive,
    train_surrogate,
    variant_units,
)
from sflme.data import SyntheticSpec, synthesize
from sflme.harness.presets import desk6
from sflme.nn import Linear, cross_entropy, gm_loss, input_gradient
from sflme.rng import Streams
from sflme.sfl import ClientView, QueryChannel, Server, TrainConfig, run_training, split

UNITS = desk6(1, 16, 10)
SHAPE = (1, 16, 16)


@pytest.fixture(scope="module")
def victim():
    data = synthesize(SyntheticSpec(count=2000, seed=3))
    cfg = TrainConfig(epochs=4, batch_size=32, lr=0.02, clients=2, probes=0)
    net = run_training(UNITS, 2, data.subset(range(1500)), cfg, Streams(3)).model.network()
    return net, data.subset(range(1500)), data.subset(range(1500, 2000))


def _parts(victim, n):
    net = victim[0]
    sm = split(net.units, net.params, n)
    return sm, ClientView(sm.client_units, sm.client_params)


def _ctx(n, epochs=2, **kw):
    return AttackContext(UNITS, n, SHAPE, 10, SurrogateSettings(epochs=epochs, batch_size=64), Streams(0), **kw)


class Recording(QueryChannel):
    """Channel that also keeps the server loss of every query."""

    def __init__(self, server, budget):
        super().__init__(server, budget)
        self.losses = []

    def gradient_query(self, a, y):
        g = super().gradient_query(a, y)
        self.losses.append(self._server.last_loss)
        return g


# soft labels -----------------------------------------------------------------


def test_soft_labels_orthogonal_tail_is_onehot():
    e = torch.eye(10)
    q = compute_soft_labels(e, 3, 0.9)
    assert torch.equal(q, torch.nn.functional.one_hot(torch.tensor(3), 10).double())


def test_soft_labels_hand_case():
    e = torch.eye(10)
    e[5] = e[2]  # one other label shares the true label's gradient
    q = compute_soft_labels(e, 2, 0.9)
    assert q[2].item() == pytest.approx(0.9 / 0.91, abs=1e-12)
    assert q[5].item() == pytest.approx(0.01 / 0.91, abs=1e-12)
    assert round(q[2].item(), 3) == 0.989 and round(q[5].item(), 3) == 0.011
    assert float(q.sum()) == pytest.approx(1.0, abs=1e-12)


@given(st.integers(2, 12), st.integers(1, 20), st.floats(0.51, 1.0), st.integers(0, 2**31))
@settings(max_examples=200, deadline=None)
def test_soft_labels_are_distributions(k, d, alpha, seed):
    g = np.random.default_rng(seed)
    e = torch.from_numpy(g.standard_normal((k, d)))
    c = int(g.integers(k))
    q = compute_soft_labels(e, c, alpha)
    assert float(q.min()) >= 0
    assert abs(float(q.sum()) - 1) < 1e-6
    assert int(q.argmax()) == c


def test_soft_labels_reject_bad_alpha():
    with pytest.raises(ValueError):
        compute_soft_labels(torch.eye(3), 0, 0.5)


# surrogate models ---------------------------------------------------------------


def test_surrogate_default_lr():
    assert SurrogateSettings().lr == 0.02


def test_wider_variant_doubles_channels(victim):
    sm, view = _parts(victim, 3)
    cut = sm.cut_shape(SHAPE)
    same = variant_units(sm.server_units, Variant.SAME, cut)
    wide = variant_units(sm.server_units, Variant.WIDER, cut)
    for s, w in zip(same[:-1], wide[:-1]):
        if s.parametric:
            assert w.out_dim == 2 * s.out_dim
    assert wide[-1].out_dim == same[-1].out_dim == 10


def test_longer_and_shorter_variants(victim):
    sm, _ = _parts(victim, 3)
    cut = sm.cut_shape(SHAPE)
    assert len(variant_units(sm.server_units, Variant.LONGER, cut)) == 4
    assert len(variant_units(sm.server_units, Variant.SHORTER, cut)) == 2
    with pytest.raises(AttackError):
        variant_units(sm.server_units[-1:], Variant.SHORTER, (64,))


def test_surrogate_keeps_client_part(victim):
    sm, view = _parts(victim, 2)
    sur = train_surrogate(view, sm.server_units, LabelledSet.from_dataset(victim[1].subset(range(100))),
                          SurrogateSettings(epochs=1), Streams(0))
    for i, (w, b) in sm.client_params.items():
        assert torch.equal(sur.client_params[i][0], w) and torch.equal(sur.client_params[i][1], b)


# Craft ------------------------------------------------------------------------------


def test_craft_counts_and_balance(victim):
    sm, view = _parts(victim, 2)
    attack = CraftME(1000, 32, 10, SHAPE, Streams(0), steps=20)
    drive(attack, view, QueryChannel(Server(sm.server_units, sm.server_params, frozen=True), 1000))
    data = attack.dataset()
    assert len(data) == 1000 // 20 == 50
    counts = np.bincount(data.labels.numpy(), minlength=10)
    assert counts.max() - counts.min() <= 1
    assert attack.used <= 1000


def test_craft_lowers_loss_on_frozen_server(victim):
    sm, view = _parts(victim, 2)
    net = sm.network()
    attack = CraftME(400, 20, 10, SHAPE, Streams(1), steps=20)
    x0 = None

    class First(QueryChannel):
        def gradient_query(self, a, y):
            nonlocal x0
            if x0 is None:
                x0 = attack._x.clone()
            return super().gradient_query(a, y)

    drive(attack, view, First(Server(sm.server_units, sm.server_params, frozen=True), 400))
    x, y = attack.crafted[0]
    before = torch.stack([cross_entropy(net.logits(x0[i : i + 1]), y[i : i + 1])[0] for i in range(len(y))])
    after = torch.stack([cross_entropy(net.logits(x[i : i + 1]), y[i : i + 1])[0] for i in range(len(y))])
    assert bool((after <= before).all())


def test_craft_rejects_budget_below_steps():
    with pytest.raises(AttackError):
        CraftME(10, 4, 10, SHAPE, Streams(0), steps=20)


# GAN ---------------------------------------------------------------------------------


def test_generator_output_matches_input_dims():
    g = ConditionalGenerator(10, SHAPE)
    with torch.no_grad():
        x = g(torch.randn(5, 64), torch.arange(5))
    assert x.shape == (5, *SHAPE) and float(x.min()) >= 0 and float(x.max()) <= 1


def test_generator_distinct_latents_distinct_outputs():
    torch.manual_seed(0)
    g = ConditionalGenerator(10, SHAPE)
    with torch.no_grad():
        x = g(torch.randn(2, 64), torch.tensor([4, 4]))
    assert float((x[0] - x[1]).abs().sum()) > 0


def test_diversity_loss_capped_and_negative():
    z = torch.randn(8, 4)
    far = torch.cat([torch.zeros(4, 1, 2, 2), torch.ones(4, 1, 2, 2)])
    assert float(diversity_loss(far, z, cap=1.0)) >= -1.0
    assert float(diversity_loss(torch.zeros(8, 1, 2, 2), z)) == 0.0


def test_gan_lowers_server_loss(victim):
    sm, view = _parts(victim, 2)
    attack = GanME(3200, 32, 10, SHAPE, Streams(2), lr=1e-3)
    ch = Recording(Server(sm.server_units, sm.server_params, frozen=True), 3200)
    drive(attack, view, ch)
    tenth = len(ch.losses) // 10
    assert np.mean(ch.losses[-tenth:]) < np.mean(ch.losses[:tenth])
    assert attack.used == 3200


# GM ------------------------------------------------------------------------------------


def test_gm_query_accounting(victim):
    sm, view = _parts(victim, 2)
    attack = GmME(10_000, 32, victim[1].subset(range(100)))
    ch = QueryChannel(Server(sm.server_units, sm.server_params, frozen=True), 10_000, record=False)
    drive(attack, view, ch)
    assert attack.used == ch.used == 1000


def test_gm_at_victim_weights_stays_put(victim):
    sm, view = _parts(victim, 1)
    attack = GmME(320, 32, victim[1].subset(range(32)), epochs=2)
    drive(attack, view, QueryChannel(Server(sm.server_units, sm.server_params, frozen=True), 320, record=False))
    a, y, g = attack.match_set(_ctx(1))
    assert float(gm_loss(sm.server_units, sm.server_params, a, y, g / len(a))) < 1e-12
    fitted = attack.fit(sm.server_units, sm.server_params, a, y, g, Streams(0))
    for i, (w, b) in sm.server_params.items():
        assert torch.equal(fitted[i][0], w) and torch.equal(fitted[i][1], b)


@given(st.integers(0, 2**31))
@settings(max_examples=20, deadline=None)
def test_gm_linear_global_minimum(seed):
    g = torch.Generator().manual_seed(seed)
    unit = [Linear(6, 4)]
    w, b = torch.randn(4, 6, generator=g, dtype=torch.float64), torch.randn(4, generator=g, dtype=torch.float64)
    a = torch.randn(16, 6, generator=g, dtype=torch.float64)
    y = torch.arange(16) % 4
    target = input_gradient(unit, {0: (w, b)}, a, y)
    assert float(gm_loss(unit, {0: (w, b)}, a, y, target)) == 0.0
    w2 = w.clone()
    w2[int(seed % 4), int(seed % 6)] += 1e-2
    assert float(gm_loss(unit, {0: (w2, b)}, a, y, target)) > 0.0


def test_late_k_keeps_recent_records(victim):
    sm, view = _parts(victim, 1)
    attack = GmME(640, 32, victim[1].subset(range(64)), late_k=5)
    drive(attack, view, QueryChannel(Server(sm.server_units, sm.server_params, frozen=True), 640, record=False))
    kept = attack.kept(_ctx(1, last_step=19))
    assert [r[5] for r in kept] == [15, 16, 17, 18, 19]


# SoftTrain / Train / naive -----------------------------------------------------------------


def test_softtrain_accounting_and_defaults(victim):
    sm, view = _parts(victim, 2)
    subset = victim[1].subset(range(40))
    attack = SoftTrainME(10_000, 32, subset)
    assert attack.alpha == 0.9
    drive(attack, view, QueryChannel(Server(sm.server_units, sm.server_params, frozen=True), 10_000, record=False))
    assert attack.used == 40 * 10
    soft = attack.soft_set(_ctx(2))
    assert len(soft) == 40
    assert torch.allclose(soft.soft.sum(1), torch.ones(40), atol=1e-6)
    sur = attack.finish(view, _ctx(2, epochs=1))
    assert sur.server_units[-1].out_dim == 10


def test_softtrain_disables_augmentation(victim, monkeypatch):
    import sflme.attacks.methods as methods

    seen = {}

    def spy(view, units, data, settings, *a, **k):
        seen["augment"] = settings.augment
        raise StopIteration

    sm, view = _parts(victim, 2)
    attack = SoftTrainME(400, 20, victim[1].subset(range(20)))
    drive(attack, view, QueryChannel(Server(sm.server_units, sm.server_params, frozen=True), 400, record=False))
    monkeypatch.setattr(methods, "train_surrogate", spy)
    ctx = AttackContext(UNITS, 2, SHAPE, 10, SurrogateSettings(epochs=1, augment=True), Streams(0))
    with pytest.raises(StopIteration):
        attack.finish(view, ctx)
    assert seen["augment"] is False


def test_train_me_uses_no_queries_and_victim_client(victim):
    sm, view = _parts(victim, 2)
    attack = TrainME(victim[1].subset(range(100)))
    assert not attack.wants_query()
    sur = attack.finish(view, _ctx(2, epochs=1))
    assert attack.used == 0
    for i, (w, _) in sm.client_params.items():
        assert torch.equal(sur.client_params[i][0], w)


def test_naive_trains_every_unit(victim):
    sm, view = _parts(victim, 2)
    net = NaiveBaseline(victim[1].subset(range(100))).finish(view, _ctx(2, epochs=1))
    assert len(net.units) == len(UNITS)
    assert all(not torch.equal(net.params[i][0], victim[0].params[i][0]) for i in net.params)


@pytest.mark.parametrize("make", [
    lambda d: CraftME(300, 32, 10, SHAPE, Streams(0)),
    lambda d: GanME(300, 32, 10, SHAPE, Streams(0)),
    lambda d: GmME(300, 32, d),
    lambda d: SoftTrainME(300, 32, d),
])
def test_budget_never_exceeded(victim, make):
    sm, view = _parts(victim, 2)
    attack = make(victim[1].subset(range(50)))
    ch = QueryChannel(Server(sm.server_units, sm.server_params, frozen=True), 300, record=False)
    drive(attack, view, ch)
    assert attack.used == ch.used <= 300
