import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import activation_pattern, central_difference, max_relative_error
from sflme.nn import (
    SGD,
    Adam,
    Conv2d,
    EngineError,
    Flatten,
    Linear,
    MaxPool2x2,
    ReLU,
    ShapeError,
    backward,
    cross_entropy,
    forward,
    gm_loss,
    init_params,
    optimizer_step,
    second_order_input_grad_backward,
    softmax,
)
from sflme.nn import checkpoint
from sflme.nn.optim import scaled_milestones
from sflme.rng import Streams

F64 = torch.float64


def test_identity_linear_forward():
    units = [Linear(3, 3), Linear(3, 3)]
    params = {0: (torch.eye(3), torch.zeros(3)), 1: (torch.eye(3), torch.zeros(3))}
    x = torch.tensor([[1.0, -2.0, 3.0]])
    assert torch.equal(forward(units, params, x).output, x)


def test_relu_forward():
    out = forward([ReLU(), Flatten()], {}, torch.tensor([[-1.0, 2.0]])).output
    assert out.tolist() == [[0.0, 2.0]]


def test_one_by_one_conv_doubles():
    units = [Conv2d(1, 1, 1), Flatten()]
    params = {0: (torch.full((1, 1, 1, 1), 2.0), torch.zeros(1))}
    out = forward(units, params, torch.ones(1, 1, 2, 2)).output
    assert torch.equal(out, torch.full((1, 4), 2.0))


def test_forward_returns_every_activation():
    units = [Conv2d(1, 2, 3, pad=1, relu=True, pool=True), Linear(2 * 2 * 2, 3)]
    params = init_params(units, Streams(0), "m")
    trace = forward(units, params, torch.rand(5, 1, 4, 4))
    assert [tuple(a.shape) for a in trace.activations] == [(5, 1, 4, 4), (5, 2, 2, 2), (5, 3)]


def test_shape_mismatch_names_unit():
    units = [Linear(4, 3), Linear(5, 2)]
    params = init_params(units, Streams(0), "m")
    with pytest.raises(ShapeError) as err:
        forward(units, params, torch.rand(2, 4))
    assert "unit 1" in str(err.value) and "Linear(5,2)" in str(err.value)


def test_linear_input_grad_is_w_transpose_delta():
    units = [Linear(4, 3), Linear(3, 3)]
    params = init_params(units, Streams(1), "m")
    x = torch.rand(2, 4)
    trace = forward(units[:1], params, x)
    delta = torch.rand(2, 3)
    _, gx = backward(units[:1], {0: params[0]}, trace, delta)
    assert torch.allclose(gx, delta @ params[0][0])


def test_relu_blocks_gradient_for_negative_preactivation():
    units = [ReLU(), Flatten()]
    trace = forward(units, {}, torch.tensor([[-0.5, 0.7]]))
    _, gx = backward(units, {}, trace, torch.ones(1, 2))
    assert gx.tolist() == [[0.0, 1.0]]


def test_backward_without_cache_rejected():
    units = [Linear(2, 2), Linear(2, 2)]
    params = init_params(units, Streams(0), "m")
    with pytest.raises(EngineError):
        backward(units, params, None, torch.ones(1, 2))


LAYER_CASES = {
    "linear": ([Linear(12, 5)], (3, 12)),
    "linear+relu": ([Linear(12, 5, relu=True)], (3, 12)),
    "conv strided": ([Conv2d(2, 3, 3, stride=2, pad=1)], (2, 2, 7, 7)),
    "conv+relu+pool": ([Conv2d(2, 3, 3, pad=1, relu=True, pool=True)], (2, 2, 6, 6)),
    "relu": ([ReLU()], (3, 4)),
    "maxpool": ([MaxPool2x2()], (2, 2, 5, 5)),
    "flatten": ([Flatten()], (2, 2, 3, 3)),
}


def _fd_check(units, shape, seed, loss="random", h=1e-3):
    s = Streams(seed)
    params = init_params(units, s, "p", dtype=F64)
    x = s.uniform("x", shape, -1, 1, F64)
    trace = forward(units, params, x)
    if loss == "random":
        r = s.normal("r", tuple(trace.output.shape), F64)
        fn = lambda: (forward(units, params, x).output * r).sum()
        upstream = r
    else:
        y = torch.from_numpy(s.generator("y").integers(0, trace.output.shape[1], shape[0]))
        fn = lambda: cross_entropy(forward(units, params, x).output, y)[0]
        upstream = cross_entropy(trace.output, y)[1]
    grads, gx = backward(units, params, trace, upstream)
    pattern = lambda: activation_pattern(units, params, x)
    checks = [(gx, central_difference(fn, x, h=h, pattern=pattern))]
    for i, (w, b) in params.items():
        checks.append((grads[i][0], central_difference(fn, w, h=h, pattern=pattern)))
        checks.append((grads[i][1], central_difference(fn, b, h=h, pattern=pattern)))
    skipped = sum(int(torch.isnan(n).sum()) for _, n in checks)
    total = sum(n.numel() for _, n in checks)
    assert skipped <= 0.1 * total
    return max(max_relative_error(a, n) for a, n in checks)


@pytest.mark.parametrize("name", sorted(LAYER_CASES))
def test_layer_gradients_match_finite_differences(name):
    units, shape = LAYER_CASES[name]
    assert _fd_check(units, shape, seed=3) < 1e-4


def test_three_unit_net_matches_finite_differences():
    units = [Conv2d(2, 4, 3, pad=1, relu=True, pool=True), Linear(4 * 4 * 4, 6, relu=True), Linear(6, 5)]
    assert _fd_check(units, (4, 2, 8, 8), seed=7, loss="ce") < 1e-4


@settings(max_examples=8, deadline=None)
@given(
    batch=st.integers(1, 4),
    ch=st.integers(1, 8),
    hw=st.integers(2, 8),
    out=st.integers(1, 8),
    k=st.sampled_from([1, 3]),
    fuse=st.booleans(),
    seed=st.integers(0, 10_000),
)
def test_random_conv_shapes_match_finite_differences(batch, ch, hw, out, k, fuse, seed):
    pad = k // 2
    units = [Conv2d(ch, out, k, pad=pad, relu=fuse, pool=fuse and hw >= 2)]
    # small maps at batch 1 put many pool windows near a tie; a finer step keeps most coordinates checkable
    assert _fd_check(units, (batch, ch, hw, hw), seed, h=1e-5) < 1e-4


def test_uniform_logits_loss_is_ln10():
    loss, _ = cross_entropy(torch.zeros(4, 10), torch.tensor([0, 3, 5, 9]))
    assert math.isclose(loss.item(), math.log(10), rel_tol=1e-6)


def test_large_margin_loss_vanishes():
    z = torch.zeros(1, 10, dtype=F64)
    z[0, 4] = 100.0
    loss, _ = cross_entropy(z, torch.tensor([4]))
    # exact value log(1 + 9 e^-100)
    assert 0 <= loss.item() < 1e-8
    assert abs(loss.item() - math.log1p(9 * math.exp(-100))) < 1e-15


def test_two_class_uniform_gradient():
    _, g = cross_entropy(torch.zeros(1, 2), torch.tensor([0]))
    assert g.tolist() == [[-0.5, 0.5]]


def test_label_out_of_range():
    with pytest.raises(EngineError):
        cross_entropy(torch.zeros(2, 3), torch.tensor([0, 3]))


def test_soft_targets_accepted():
    q = torch.tensor([[0.25, 0.75]])
    loss, g = cross_entropy(torch.zeros(1, 2), q)
    assert math.isclose(loss.item(), math.log(2), rel_tol=1e-6)
    assert torch.allclose(g, torch.tensor([[0.25, -0.25]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 16), st.integers(2, 12), st.integers(0, 2**31 - 1))
def test_softmax_rows_and_loss_sign(b, c, seed):
    z = Streams(seed).normal("z", (b, c)) * 10
    assert torch.allclose(softmax(z).sum(1), torch.ones(b), atol=1e-6)
    y = torch.from_numpy(Streams(seed).generator("y").integers(0, c, b))
    assert cross_entropy(z, y)[0].item() >= 0


def test_sgd_step():
    params = {0: (torch.tensor([1.0, 2.0]), torch.tensor([0.5]))}
    grads = {0: (torch.tensor([1.0, -1.0]), torch.tensor([2.0]))}
    out = optimizer_step(SGD(0.05), params, grads)
    assert torch.allclose(out[0][0], torch.tensor([0.95, 2.05]))
    assert torch.allclose(out[0][1], torch.tensor([0.4]))


def test_milestone_schedule():
    opt = SGD(0.05, milestones=(60, 120, 160), factor=0.2)
    opt.set_epoch(59)
    assert math.isclose(opt.current_lr, 0.05)
    opt.set_epoch(60)
    assert math.isclose(opt.current_lr, 0.01)
    opt.set_epoch(199)
    assert math.isclose(opt.current_lr, 0.05 * 0.2**3)


def test_scaled_milestones_keep_fractions():
    assert scaled_milestones(200) == (60, 120, 160)
    assert scaled_milestones(20) == (6, 12, 16)


def test_adam_first_step_size():
    g = 0.37
    lr = 1e-3
    p = {0: (torch.tensor([1.0], dtype=F64), torch.tensor([0.0], dtype=F64))}
    out = optimizer_step(Adam(lr), p, {0: (torch.tensor([g], dtype=F64), torch.tensor([-g], dtype=F64))})
    # first step: m_hat = g, v_hat = g^2, so the move is lr * |g| / (|g| + eps)
    expected = lr * g / (g + 1e-8)
    assert math.isclose(1.0 - out[0][0].item(), expected, rel_tol=1e-12)
    assert math.isclose(out[0][1].item(), expected, rel_tol=1e-12)


def test_momentum_accumulates():
    opt = SGD(0.1, momentum=0.9)
    p = {0: (torch.zeros(1), torch.zeros(1))}
    g = {0: (torch.ones(1), torch.zeros(1))}
    p = optimizer_step(opt, p, g)
    p = optimizer_step(opt, p, g)
    assert torch.allclose(p[0][0], torch.tensor([-0.1 - 0.19]))


def test_forward_is_deterministic():
    units = [Conv2d(1, 4, 3, pad=1, relu=True, pool=True), Linear(4 * 4 * 4, 10)]
    a = init_params(units, Streams(5), "m")
    b = init_params(units, Streams(5), "m")
    x = Streams(5).uniform("x", (8, 1, 8, 8))
    assert torch.equal(forward(units, a, x).output, forward(units, b, x).output)


def test_init_is_fan_in_bounded():
    units = [Linear(64, 32), Linear(32, 10)]
    params = init_params(units, Streams(0), "m")
    assert params[0][0].abs().max() <= math.sqrt(1 / 64)
    assert params[1][0].abs().max() <= math.sqrt(1 / 32)


# second-order path

SERVER2 = [Linear(6, 5, relu=True), Linear(5, 4)]


def _gm_setup(seed, units=SERVER2, a_shape=(3, 6)):
    s = Streams(seed)
    victim = init_params(units, s, "victim", dtype=F64)
    surrogate = init_params(units, s, "surrogate", dtype=F64)
    a = s.uniform("a", a_shape, -1, 1, F64)
    y = torch.from_numpy(s.generator("y").integers(0, 4, a_shape[0]))
    trace = forward(units, victim, a)
    _, gl = cross_entropy(trace.output, y)
    target = backward(units, victim, trace, gl, param_grads=False)[1]
    return victim, surrogate, a, y, target


def test_gm_zero_at_victim():
    victim, _, a, y, target = _gm_setup(0)
    loss, grads = second_order_input_grad_backward(SERVER2, victim, a, y, target)
    assert loss.item() == 0.0
    for gw, gb in grads.values():
        assert torch.count_nonzero(gw) == 0 and torch.count_nonzero(gb) == 0


def test_gm_scalar_closed_form():
    # two-class linear server, one sample, label 0: grad_a L = u (sigmoid(u a) - 1), u = w0 - w1
    w0, w1, a, g_star = 0.8, -0.3, 0.6, 0.2
    units = [Linear(1, 2), Flatten()]
    params = {0: (torch.tensor([[w0], [w1]], dtype=F64), torch.zeros(2, dtype=F64))}
    loss, grads = second_order_input_grad_backward(
        units, params, torch.tensor([[a]], dtype=F64), torch.tensor([0]), torch.tensor([[g_star]], dtype=F64)
    )
    u = w0 - w1
    sig = 1 / (1 + math.exp(-u * a))
    g = u * (sig - 1)
    dg_du = (sig - 1) + u * a * sig * (1 - sig)
    assert math.isclose(loss.item(), (g - g_star) ** 2, rel_tol=1e-12)
    assert math.isclose(grads[0][0][0, 0].item(), 2 * (g - g_star) * dg_du, rel_tol=1e-10)
    assert math.isclose(grads[0][0][1, 0].item(), -2 * (g - g_star) * dg_du, rel_tol=1e-10)


@pytest.mark.parametrize(
    "units,a_shape",
    [
        (SERVER2, (3, 6)),
        ([Conv2d(2, 3, 3, pad=1, relu=True, pool=True), Linear(3 * 2 * 2, 4)], (2, 2, 4, 4)),
    ],
)
def test_gm_gradient_matches_finite_differences(units, a_shape):
    victim, surrogate, a, y, target = _gm_setup(11, units, a_shape)
    _, grads = second_order_input_grad_backward(units, surrogate, a, y, target)
    fn = lambda: gm_loss(units, surrogate, a, y, target)
    pattern = lambda: activation_pattern(units, surrogate, a)
    for i, (w, b) in surrogate.items():
        assert max_relative_error(grads[i][0], central_difference(fn, w, pattern=pattern)) < 1e-3
        assert max_relative_error(grads[i][1], central_difference(fn, b, pattern=pattern)) < 1e-3


def test_checkpoint_round_trip(tmp_path):
    units = [Conv2d(1, 4, 3, pad=1, relu=True, pool=True), Flatten(), Linear(64, 10, relu=False)]
    params = init_params(units, Streams(2), "m")
    path = tmp_path / "m.sflx"
    checkpoint.save(path, units, params)
    raw = path.read_bytes()
    assert raw[:4] == b"SFLX" and raw[4:6] == b"\x01\x00"
    units2, params2 = checkpoint.load(path)
    assert units2 == units
    for i in params:
        assert torch.equal(params[i][0], params2[i][0]) and torch.equal(params[i][1], params2[i][1])


def test_checkpoint_rejects_garbage():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"NOPE" + bytes(10))
    units = [Linear(2, 2), Linear(2, 2)]
    data = checkpoint.dumps(units, init_params(units, Streams(0), "m"))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(data[:-3])
