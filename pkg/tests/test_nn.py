import numpy as np
import pytest

from conftest import fd_param_grad, max_rel_error, sample_kink_free_input
from ofhrl.errors import FormatError
from ofhrl.nn import AdamState, Mlp, adam_step, gaussian_kl, l1_loss, load_mlp, save_mlp


def test_parameter_count_matches_layer_arithmetic():
    net = Mlp([3, 5, 7, 2], seed=0)
    assert net.parameter_count == (3 + 1) * 5 + (5 + 1) * 7 + (7 + 1) * 2


def test_zero_net_maps_everything_to_zero():
    net = Mlp([4, 8, 3], init="zero")
    out = net.forward(np.array([1.0, -2.0, 3.0, 0.5]))
    assert np.all(out == 0.0)


def test_identity_single_layer_is_identity_map():
    net = Mlp([3, 3], activations=["identity"], init="zero")
    net.weights(0)[:] = np.eye(3)
    x = np.array([0.3, -1.2, 2.0])
    assert np.allclose(net.forward(x), x)


def test_forward_matches_explicit_matrix_oracle():
    # Independent oracle: redo the arithmetic on the dumped parameter vector.
    net = Mlp([2, 4, 1], seed=123)
    x = np.array([0.5, -0.5])
    w0 = net.params[:8].reshape(4, 2)
    b0 = net.params[8:12]
    w1 = net.params[12:16].reshape(1, 4)
    b1 = net.params[16:17]
    hidden = np.maximum(w0 @ x + b0, 0.0)
    expected = w1 @ hidden + b1
    assert np.allclose(net.forward(x), expected, rtol=0, atol=1e-15)


def test_forward_rejects_wrong_input_size():
    net = Mlp([3, 2], seed=0)
    with pytest.raises(ValueError):
        net.forward(np.zeros(4))


def test_backward_before_forward_is_a_state_error():
    net = Mlp([2, 2], seed=0)
    with pytest.raises(RuntimeError):
        net.backward(np.zeros(2))


def test_zero_output_gradient_gives_zero_parameter_gradient():
    net = Mlp([3, 6, 2], seed=1)
    net.forward(np.array([0.1, 0.2, 0.3]))
    grad = net.backward(np.zeros(2))
    assert np.all(grad == 0.0)


@pytest.mark.parametrize("layers,acts", [
    ((3, 8, 2), None),
    ((4, 16, 16, 3), None),
    ((5, 12, 4), ["tanh", "identity"]),
    ((2, 6, 6, 1), ["tanh", "tanh", "identity"]),
])
def test_backward_matches_finite_differences(layers, acts):
    rng = np.random.default_rng(7)
    for seed in range(5):
        net = Mlp(layers, acts, seed=seed)
        x = sample_kink_free_input(net, rng)
        weights = rng.normal(size=net.output_dim)
        net.forward(x)
        analytic = net.backward(weights)
        idx = rng.choice(net.parameter_count, size=min(24, net.parameter_count), replace=False)
        fd = fd_param_grad(net, x, weights, idx)
        assert max_rel_error(analytic[idx], fd) < 1e-3


def test_backward_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    net = Mlp([4, 10, 3], seed=3)
    x = sample_kink_free_input(net, rng)
    weights = rng.normal(size=3)
    net.forward(x)
    _, input_grad = net.backward(weights, return_input_grad=True)
    step = 1e-5
    fd = np.empty(4)
    for i in range(4):
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        fd[i] = (weights @ net.forward(xp, cache=False)
                 - weights @ net.forward(xm, cache=False)) / (2 * step)
    assert max_rel_error(input_grad, fd) < 1e-3


def test_linear_net_squared_error_closed_form():
    # loss = |Wx - y|^2  =>  dL/dW = 2 (Wx - y) x^T
    net = Mlp([3, 2], activations=["identity"], seed=5)
    x = np.array([0.4, -1.0, 2.2])
    y = np.array([1.0, -0.5])
    out = net.forward(x)
    grad = net.backward(2.0 * (out - y))
    expected_w = 2.0 * np.outer(out - y, x)
    expected_b = 2.0 * (out - y)
    assert np.allclose(grad[:6].reshape(2, 3), expected_w)
    assert np.allclose(grad[6:], expected_b)


def test_batched_forward_backward_equals_sum_of_singles():
    net = Mlp([3, 7, 2], seed=9)
    xs = np.random.default_rng(0).normal(size=(5, 3))
    gs = np.random.default_rng(1).normal(size=(5, 2))
    net.forward(xs)
    batched = net.backward(gs)
    summed = np.zeros_like(batched)
    for x, g in zip(xs, gs):
        net.forward(x)
        summed += net.backward(g)
    assert np.allclose(batched, summed, atol=1e-12)


def test_adam_zero_gradient_is_a_fixed_point_of_parameters():
    net = Mlp([2, 3], seed=0)
    before = net.params.copy()
    state = AdamState.for_net(net, learning_rate=0.01)
    adam_step(net, state, np.zeros(net.parameter_count))
    assert np.array_equal(net.params, before)
    assert state.step_count == 1


def test_adam_single_step_matches_scalar_hand_computation():
    net = Mlp([1, 1], activations=["identity"], init="zero")
    state = AdamState.for_net(net, learning_rate=0.1)
    g = np.array([0.5, 0.5])
    adam_step(net, state, g)
    # m = 0.1*0.5, v = 0.001*0.25; mhat = 0.5, vhat = 0.25
    expected = -0.1 * 0.5 / (np.sqrt(0.25) + 1e-8)
    assert np.allclose(net.params, expected, rtol=1e-12)


def test_adam_rejects_non_finite_gradients():
    net = Mlp([2, 2], seed=0)
    state = AdamState.for_net(net, learning_rate=0.01)
    bad = np.full(net.parameter_count, np.nan)
    with pytest.raises(ValueError):
        adam_step(net, state, bad)


def test_training_is_deterministic_given_seed():
    def run():
        net = Mlp([2, 8, 1], seed=42)
        state = AdamState.for_net(net, learning_rate=1e-3)
        rng = np.random.default_rng(4)
        for _ in range(20):
            x = rng.normal(size=(16, 2))
            y = x[:, :1] * 0.5
            out = net.forward(x)
            _, g = l1_loss(out, y)
            adam_step(net, state, net.backward(g))
        return net.params.copy()

    assert np.array_equal(run(), run())


def test_l1_loss_values_and_tie_subgradient():
    loss, grad = l1_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
    assert loss == 0.0
    assert np.all(grad == 0.0)
    loss, grad = l1_loss(np.array([1.0, 2.0]), np.array([0.0, 0.0]))
    assert loss == pytest.approx(1.5)
    assert np.allclose(grad, [0.5, 0.5])


def test_l1_gradient_matches_finite_differences_away_from_ties():
    rng = np.random.default_rng(3)
    p = rng.normal(size=6)
    t = rng.normal(size=6)
    _, grad = l1_loss(p, t)
    step = 1e-5
    for i in range(6):
        pp, pm = p.copy(), p.copy()
        pp[i] += step
        pm[i] -= step
        fd = (l1_loss(pp, t)[0] - l1_loss(pm, t)[0]) / (2 * step)
        assert abs(fd - grad[i]) < 1e-3 * max(abs(fd), 1e-6)


def test_gaussian_kl_closed_form_values():
    kl, gm, gv = gaussian_kl(np.zeros(3), np.zeros(3))
    assert kl == 0.0
    assert np.all(gm == 0.0) and np.all(gv == 0.0)
    kl, _, _ = gaussian_kl(np.array([1.0]), np.array([0.0]))
    assert kl == pytest.approx(0.5)


def test_gaussian_kl_nonnegative_and_zero_only_at_standard_normal():
    rng = np.random.default_rng(12)
    for _ in range(200):
        mu = rng.normal(scale=2.0, size=4)
        lv = rng.normal(scale=1.5, size=4)
        kl, _, _ = gaussian_kl(mu, lv)
        assert kl >= 0.0
        if kl < 1e-12:
            assert np.all(np.abs(mu) < 1e-5) and np.all(np.abs(lv) < 1e-5)


def test_gaussian_kl_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    mu = rng.normal(size=5)
    lv = rng.normal(size=5)
    _, gm, gv = gaussian_kl(mu, lv)
    step = 1e-5
    for i in range(5):
        for vec, grad in ((mu, gm), (lv, gv)):
            vp, vm = vec.copy(), vec.copy()
            vp[i] += step
            vm[i] -= step
            if vec is mu:
                fd = (gaussian_kl(vp, lv)[0] - gaussian_kl(vm, lv)[0]) / (2 * step)
            else:
                fd = (gaussian_kl(mu, vp)[0] - gaussian_kl(mu, vm)[0]) / (2 * step)
            assert abs(fd - grad[i]) < 1e-3 * max(abs(fd), 1e-6)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    net = Mlp([3, 5, 2], ["tanh", "identity"], seed=17)
    path = tmp_path / "net.ofnn1"
    save_mlp(net, path)
    loaded = load_mlp(path)
    assert loaded.layer_sizes == net.layer_sizes
    assert loaded.activations == net.activations
    assert np.array_equal(loaded.params, net.params)
    assert loaded.params.tobytes() == net.params.tobytes()


def test_checkpoint_bad_magic_reports_offset_zero(tmp_path):
    path = tmp_path / "net.ofnn1"
    path.write_bytes(b"BOGUS\nlayer_sizes=1,1 activations=identity\n")
    with pytest.raises(FormatError) as err:
        load_mlp(path)
    assert err.value.offset == 0


def test_checkpoint_truncated_payload_is_rejected(tmp_path):
    net = Mlp([2, 2], seed=0)
    path = tmp_path / "net.ofnn1"
    save_mlp(net, path)
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(FormatError):
        load_mlp(path)
