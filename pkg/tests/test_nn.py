import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from commdecode import nn
from commdecode.errors import DomainError, NumericError
from gradcheck import REL_TOL, check


def rand_tensor(rng, shape, scale=1.0):
    return nn.Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


@pytest.mark.parametrize("seed", range(5))
def test_mlp_gradients(seed):
    rng = np.random.default_rng(seed)
    sizes = [int(v) for v in rng.integers(2, 7, size=rng.integers(2, 5))]
    params = nn.init_mlp(sizes, rng)
    x = rand_tensor(rng, (3, sizes[0]))
    w = rng.normal(size=(3, sizes[-1]))
    errs = check(lambda: nn.tsum(nn.mul(nn.forward_mlp(params, x), w)), params + [x])
    assert (errs < REL_TOL).mean() >= 0.999


def test_gru_gradients_length_eight():
    rng = np.random.default_rng(1)
    params = nn.init_gru(3, 5, rng)
    seq = [rand_tensor(rng, (2, 3)) for _ in range(8)]
    w = rng.normal(size=(2, 5))
    errs = check(lambda: nn.tsum(nn.mul(nn.forward_rnn(params, seq), w)), params + seq)
    assert errs.max() < REL_TOL


def test_masked_gru_gradients():
    rng = np.random.default_rng(2)
    params = nn.init_gru(4, 3, rng)
    seq = [rand_tensor(rng, (3, 4)) for _ in range(4)]
    masks = [np.array([[1.0], [1.0], [float(t < 2)]]) for t in range(4)]
    errs = check(lambda: nn.tsum(nn.forward_rnn(params, seq, masks)), params)
    assert errs.max() < REL_TOL


def test_elementwise_ops_gradients():
    rng = np.random.default_rng(3)
    a = rand_tensor(rng, (3, 4))
    b = nn.Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    c = rand_tensor(rng, (4,))
    slices = [slice(0, 2), slice(2, 4)]

    def f():
        y = nn.add(nn.mul(nn.sigmoid(a), nn.log(b)), nn.tanh(nn.sub(a, c)))
        y = nn.add(y, nn.exp(nn.mul(a, 0.1)))
        y = nn.concat([nn.softmax(y), nn.factor_softmax(y, slices), nn.log_softmax(y)], axis=1)
        y = nn.matmul(nn.relu(y), nn.reshape(nn.getitem(nn.concat([b, b, b], axis=1), slice(None)), (12, 3)))
        return nn.tsum(nn.mul(y, y)).mean()

    errs = check(f, [a, b, c])
    assert (errs < REL_TOL).mean() >= 0.999


def test_fancy_getitem_accumulates():
    x = nn.Tensor(np.arange(4.0), requires_grad=True)
    nn.tsum(nn.getitem(x, np.array([0, 0, 3]))).backward()
    assert x.grad.tolist() == [2.0, 0.0, 0.0, 1.0]


def test_fan_out_accumulates():
    x = nn.Tensor(np.array([2.0]), requires_grad=True)
    nn.tsum(nn.add(nn.mul(x, x), x)).backward()
    assert x.grad[0] == 5.0


def test_zero_last_layer_and_identity():
    rng = np.random.default_rng(0)
    params = nn.init_mlp([3, 4, 2], rng, zero_last=True)
    assert np.array_equal(nn.forward_mlp(params, rng.normal(size=(5, 3))).data, np.zeros((5, 2)))
    ident = [nn.Tensor(np.eye(3)), nn.Tensor(np.zeros(3))]
    x = rng.normal(size=(2, 3))
    assert np.array_equal(nn.forward_mlp(ident, x).data, x)
    with pytest.raises(DomainError):
        nn.forward_mlp(params, np.ones((1, 4)))


def test_rnn_basics():
    rng = np.random.default_rng(5)
    params = nn.init_gru(2, 4, rng)
    x = rng.normal(size=(1, 2))
    one = nn.forward_rnn(params, [x]).data
    cell = nn.gru_cell(params, x, np.zeros((1, 4))).data
    assert np.array_equal(one, cell)
    seq = [rng.normal(size=2) for _ in range(3)]
    a = nn.forward_rnn(params, seq).data
    b = nn.forward_rnn(params, seq[::-1]).data
    assert a.shape == (4,) and not np.allclose(a, b)
    with pytest.raises(DomainError):
        nn.forward_rnn(params, [])


def test_gru_cell_against_reference_formula():
    rng = np.random.default_rng(6)
    w_x, w_h, b_x, b_h = params = nn.init_gru(3, 2, rng)
    x, h = rng.normal(size=(1, 3)), rng.normal(size=(1, 2))
    gx = x @ w_x.data + b_x.data
    gh = h @ w_h.data + b_h.data
    sig = lambda v: 1 / (1 + np.exp(-v))
    r, z = sig(gx[:, :2] + gh[:, :2]), sig(gx[:, 2:4] + gh[:, 2:4])
    n = np.tanh(gx[:, 4:] + r * gh[:, 4:])
    assert np.allclose(nn.gru_cell(params, x, h).data, (1 - z) * n + z * h, atol=1e-14)


def test_cross_entropy_examples():
    assert float(nn.cross_entropy(np.zeros(7), 3).data) == pytest.approx(math.log(7))
    assert float(nn.cross_entropy(np.array([0.0, 800.0, 0.0]), 1).data) < 1e-12
    rng = np.random.default_rng(0)
    logits = nn.Tensor(rng.normal(size=5), requires_grad=True)
    nn.cross_entropy(logits, 2).backward()
    expected = nn.np_softmax(logits.data)
    expected[2] -= 1
    assert np.abs(logits.grad - expected).max() < 1e-6
    with pytest.raises(DomainError):
        nn.cross_entropy(np.zeros(3), 3)
    with pytest.raises(DomainError):
        nn.cross_entropy(np.zeros((2, 3)), np.array([0, -1]))


def test_gumbel_low_temperature_matches_softmax():
    rng = np.random.default_rng(7)
    logits = np.array([1.0, 0.2, -0.5, 0.7])
    n = 100_000
    noise = nn.sample_gumbel((n, 4), rng)
    y = nn.gumbel_softmax_sample(np.tile(logits, (n, 1)), 0.01, rng, noise=noise).data
    assert np.array_equal(y.argmax(1), (logits + noise).argmax(1))
    freq = np.bincount(y.argmax(1), minlength=4) / n
    assert 0.5 * np.abs(freq - nn.np_softmax(logits)).sum() < 0.02


def test_gumbel_high_temperature_near_uniform():
    rng = np.random.default_rng(8)
    y = nn.gumbel_softmax_sample(np.zeros((10_000, 5)), 10.0, rng).data
    assert (y.max(axis=1) < 0.5).mean() >= 0.99


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 20.0))
def test_gumbel_samples_on_simplex(seed, tau):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=3, size=(4, 9))
    y = nn.gumbel_softmax_factors(logits, [slice(0, 5), slice(5, 9)], tau, rng).data
    assert (y >= 0).all()
    assert np.abs(y[:, :5].sum(1) - 1).max() < 1e-6 and np.abs(y[:, 5:].sum(1) - 1).max() < 1e-6
    s = nn.gumbel_softmax_sample(logits, tau, rng).data
    assert np.abs(s.sum(1) - 1).max() < 1e-6


def test_gumbel_errors_and_gradient_flow():
    rng = np.random.default_rng(0)
    with pytest.raises(DomainError):
        nn.gumbel_softmax_sample(np.zeros(3), 0.0, rng)
    with pytest.raises(DomainError):
        nn.gumbel_softmax_factors(np.zeros((1, 3)), [slice(0, 3)], -1.0, rng)
    logits = nn.Tensor(np.zeros((1, 3)), requires_grad=True)
    noise = nn.sample_gumbel((1, 3), rng)
    errs = check(lambda: nn.tsum(nn.mul(nn.gumbel_softmax_sample(logits, 0.7, rng, noise=noise),
                                        np.array([1.0, 2.0, 3.0]))), [logits])
    assert errs.max() < REL_TOL


def test_adam_first_step_by_hand():
    p0 = np.array([0.5, -2.0, 3.0])
    p = nn.Tensor(p0.copy(), requires_grad=True)
    opt = nn.Adam([p], lr=1e-3)
    loss = nn.mul(nn.tsum(nn.mul(p, p)), 0.5)
    nn.backward_and_step(loss, [p], opt)
    # first step: m_hat = g, v_hat = g^2, so the move is lr * g / (|g| + eps)
    expected = p0 - 1e-3 * p0 / (np.abs(p0) + 1e-8)
    assert np.allclose(p.data, expected, rtol=0, atol=1e-15)
    assert p.grad is None


def test_adam_constants_and_untouched_params():
    opt = nn.Adam([])
    assert (opt.lr, opt.beta1, opt.beta2, opt.eps) == (1e-3, 0.9, 0.999, 1e-8)
    a = nn.Tensor(np.ones(2), requires_grad=True)
    b = nn.Tensor(np.ones(2), requires_grad=True)
    opt = nn.Adam([a, b])
    nn.backward_and_step(nn.tsum(nn.mul(a, a)), [a, b], opt)
    assert np.array_equal(b.data, np.ones(2)) and not np.array_equal(a.data, np.ones(2))


def test_training_is_deterministic():
    def run():
        rng = np.random.default_rng(11)
        params = nn.init_mlp([4, 8, 3], rng)
        opt = nn.Adam(params, lr=1e-2)
        x = rng.normal(size=(16, 4))
        y = rng.integers(0, 3, 16)
        for _ in range(20):
            nn.backward_and_step(nn.cross_entropy(nn.forward_mlp(params, x), y).mean(), params, opt)
        return [p.data.copy() for p in params]

    assert all(np.array_equal(a, b) for a, b in zip(run(), run()))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_names_op():
    x = nn.Tensor(np.array([-1.0, 1.0]), requires_grad=True)
    with pytest.raises(NumericError, match="log"):
        nn.tsum(nn.log(x)).backward()
    with pytest.raises(NumericError, match="forward_mlp"):
        nn.forward_mlp([nn.Tensor(np.array([[np.inf]])), nn.Tensor(np.zeros(1))], np.ones((1, 1)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_gradient_names_op():
    # log of a subnormal is finite, its derivative 1/x overflows
    z = nn.Tensor(np.array([1e-320, 1.0]), requires_grad=True)
    with pytest.raises(NumericError, match="log"):
        nn.tsum(nn.log(z)).backward()
    assert z.grad is None


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    params = nn.init_mlp([3, 4, 2], rng)
    path = tmp_path / "ck.json"
    nn.save_checkpoint(path, {"kind": "x"}, params)
    payload = json.loads(path.read_text())
    assert payload["format_version"] == 1 and payload["arch"] == {"kind": "x"}
    arch, loaded = nn.load_checkpoint(path)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(params, loaded))
    payload["format_version"] = 2
    path.write_text(json.dumps(payload))
    with pytest.raises(DomainError):
        nn.load_checkpoint(path)


def test_freeze_blocks_gradients():
    rng = np.random.default_rng(0)
    frozen = nn.freeze(nn.init_mlp([2, 3, 1], rng))
    x = nn.Tensor(rng.normal(size=(1, 2)), requires_grad=True)
    nn.tsum(nn.forward_mlp(frozen, x)).backward()
    assert all(p.grad is None for p in frozen) and x.grad is not None
