import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from roesl.nn import (CKPT_VERSION, MAGIC, Adam, CheckpointError, GaussianPolicy, MlpParams, decode_policy,
                      encode_policy, gaussian_log_prob, init_mlp, init_policy, load_policy, mlp_backward,
                      mlp_forward, mlp_grad, save_policy, storage)


def _net(seed, sizes=(3, 5, 4, 2), output_activation=False, dtype=np.float64):
    return init_mlp(sizes, np.random.default_rng(seed), output_activation=output_activation, dtype=dtype)


def test_zero_params_give_zero_output():
    p = MlpParams((3, 4, 2), [np.zeros((3, 4)), np.zeros((4, 2))], [np.zeros(4), np.zeros(2)])
    assert np.array_equal(mlp_forward(p, np.array([1.0, -2.0, 3.0])), np.zeros(2))


def test_identity_layer():
    p = MlpParams((4, 4), [np.eye(4)], [np.zeros(4)])
    x = np.array([0.3, -7.0, 2.5, 0.0])
    assert np.array_equal(mlp_forward(p, x), x)


@given(st.integers(0, 2**32 - 1), st.booleans())
def test_forward_matches_straight_line_oracle(seed, out_tanh):
    p = _net(seed, output_activation=out_tanh)
    x = np.random.default_rng(seed + 1).normal(size=3)
    ref = oracles.mlp_scalar(p.weights, p.biases, x, out_tanh)
    assert np.max(np.abs(mlp_forward(p, x) - ref)) <= 1e-12


def test_forward_batch_equals_rows():
    p = _net(0)
    x = np.random.default_rng(1).normal(size=(6, 3))
    batch = mlp_forward(p, x)
    for i in range(6):
        assert np.allclose(batch[i], mlp_forward(p, x[i]), atol=1e-14)


def test_shape_mismatch():
    p = _net(0)
    with pytest.raises(ValueError, match="input width 4"):
        mlp_forward(p, np.zeros(4))
    with pytest.raises(ValueError, match="upstream shape"):
        mlp_grad(p, np.zeros(3), np.zeros(3))


def test_zero_upstream_zero_grads():
    gw, gb = mlp_grad(_net(3), np.ones(3), np.zeros(2))
    assert all(not g.any() for g in gw + gb)


def test_linear_layer_closed_form():
    rng = np.random.default_rng(4)
    p = MlpParams((3, 2), [rng.normal(size=(3, 2))], [rng.normal(size=2)])
    x, up = rng.normal(size=3), rng.normal(size=2)
    gw, gb = mlp_grad(p, x, up)
    assert np.allclose(gw[0], np.outer(x, up), atol=1e-15)
    assert np.allclose(gb[0], up, atol=1e-15)


def _fd_check(seed):
    rng = np.random.default_rng(seed)
    sizes = tuple(int(s) for s in rng.integers(1, 6, size=rng.integers(2, 5)))
    p = init_mlp(sizes, rng, output_activation=bool(rng.integers(2)))
    x = rng.normal(size=(int(rng.integers(1, 4)), sizes[0]))
    up = rng.normal(size=(len(x), sizes[-1]))
    gw, gb, gx = mlp_backward(p, mlp_forward(p, x, cache=True)[1], up)

    def f():
        return float(np.sum(mlp_forward(p, x) * up))

    analytic = gw + gb + [gx]
    numeric = oracles.central_difference(f, p.weights + p.biases + [x])
    worst = 0.0
    for a, n in zip(analytic, numeric):
        worst = max(worst, float(np.max(np.abs(a - n) / np.maximum(1e-6, np.abs(a) + np.abs(n)))))
    return worst


@pytest.mark.parametrize("seed", range(20))
def test_gradients_against_finite_differences(seed):
    assert _fd_check(seed) < 1e-4


def test_policy_log_prob_closed_form():
    mu = np.array([[0.1, -0.2]])
    ls = np.array([-0.5, 0.3])
    x = np.array([[0.4, 0.0]])
    expect = sum(-0.5 * ((x[0, i] - mu[0, i]) / np.exp(ls[i])) ** 2 - ls[i] - 0.5 * np.log(2 * np.pi) for i in range(2))
    assert gaussian_log_prob(mu, ls, x)[0] == pytest.approx(expect, rel=1e-14)


def test_policy_clamps():
    pol = init_policy(14, 4, (8,), np.random.default_rng(0))
    pol.log_std[:] = [-9, 0, 3, 1]
    pol.clamp()
    assert list(pol.log_std) == [-5, 0, 1, 1]
    pol.mean.biases[-1][:] = 50.0
    assert np.all(pol.act(np.zeros(14)) == 1.0)


# ---------------------------------------------------------------- packing and Adam

def test_packed_layout():
    p = _net(0)
    buf = p.storage()
    assert buf is not None and buf.size == p.num_params()
    assert np.array_equal(buf, p.flat())
    assert storage([np.zeros(3), np.zeros(2)]) is None
    # a contiguous run of arrays inside the buffer is a view of that stretch
    mid = storage(p.arrays()[2:4])
    assert mid.size == p.weights[1].size + p.biases[1].size and np.shares_memory(mid, buf)
    assert storage([p.weights[0], p.weights[1]]) is None
    q = p.copy()
    q.weights[0][0, 0] += 1
    assert p.weights[0][0, 0] != q.weights[0][0, 0]
    assert p.astype(np.float32).storage().dtype == np.float32


def _adam_reference(arrays, grads_seq, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam, one array at a time."""
    m = [np.zeros_like(a) for a in arrays]
    v = [np.zeros_like(a) for a in arrays]
    for t, grads in enumerate(grads_seq, 1):
        for k, g in enumerate(grads):
            m[k] = b1 * m[k] + (1 - b1) * g
            v[k] = b2 * v[k] + (1 - b2) * g * g
            mh, vh = m[k] / (1 - b1**t), v[k] / (1 - b2**t)
            arrays[k] -= lr * mh / (np.sqrt(vh) + eps)
    return arrays


def test_adam_grouping_matches_per_array_updates():
    rng = np.random.default_rng(7)
    packed = _net(7)
    loose = [a.copy() for a in packed.arrays()]  # separate allocations, one group each
    extra_p, extra_l = np.zeros(2), np.zeros(2)
    opt_p = Adam(packed.arrays() + [extra_p], 1e-2)
    opt_l = Adam(loose + [extra_l], 1e-2)
    assert len(opt_p.groups) == 2 and len(opt_l.groups) == len(loose) + 1
    for _ in range(25):
        grads = [rng.normal(size=a.shape) for a in loose] + [rng.normal(size=2)]
        opt_p.step(grads)
        opt_l.step(grads)
    for a, b in zip(packed.arrays() + [extra_p], loose + [extra_l]):
        assert np.array_equal(a, b)


def test_adam_close_to_textbook():
    rng = np.random.default_rng(8)
    arrays = [rng.normal(size=(3, 2)), rng.normal(size=4)]
    ref = [a.copy() for a in arrays]
    seq = [[rng.normal(size=a.shape) for a in arrays] for _ in range(30)]
    opt = Adam(arrays, 3e-3)
    for g in seq:
        opt.step(g)
    _adam_reference(ref, seq, 3e-3)
    for a, b in zip(arrays, ref):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_adam_zero_lr_and_count_check():
    p = _net(1)
    before = p.flat()
    Adam(p.arrays(), 0.0).step([np.ones_like(a) for a in p.arrays()])
    assert np.array_equal(p.flat(), before)
    with pytest.raises(ValueError, match="expected 6 gradients"):
        Adam(p.arrays(), 1e-3).step([np.ones(1)])


# ---------------------------------------------------------------- checkpoints

@given(st.integers(0, 2**32 - 1), st.sampled_from([np.float32, np.float64]))
def test_checkpoint_round_trip_bit_exact(seed, dtype):
    pol = init_policy(14, 4, (8, 6), np.random.default_rng(seed), dtype=dtype)
    back = decode_policy(encode_policy(pol))
    assert back.mean.sizes == (14, 8, 6, 4)
    assert np.array_equal(back.mean.flat(), pol.mean.flat().astype(np.float64))
    assert np.array_equal(back.log_std, pol.log_std.astype(np.float64))
    assert encode_policy(back) == encode_policy(pol)


def test_checkpoint_header_and_errors(tmp_path):
    pol = init_policy(14, 4, (8,), np.random.default_rng(0))
    blob = encode_policy(pol)
    assert blob[:8] == MAGIC and int.from_bytes(blob[8:10], "little") == CKPT_VERSION
    with pytest.raises(CheckpointError, match="bad magic"):
        decode_policy(b"X" + blob[1:])
    with pytest.raises(CheckpointError, match="version"):
        decode_policy(blob[:8] + (99).to_bytes(2, "little") + blob[10:])
    with pytest.raises(CheckpointError, match="payload length"):
        decode_policy(blob[:-8])
    with pytest.raises(CheckpointError, match=r"\[14, 8, 4\] do not match configured \[14, 64, 64, 4\]"):
        decode_policy(blob, (14, 64, 64, 4))
    save_policy(pol, tmp_path / "p.bin", {"seed": 0})
    assert (tmp_path / "p.json").exists()
    assert encode_policy(load_policy(tmp_path / "p.bin", (14, 8, 4))) == blob


def test_policy_copy_is_independent():
    pol = init_policy(14, 4, (8,), np.random.default_rng(0))
    cp = pol.copy()
    cp.log_std[0] = 0.9
    cp.mean.weights[0][0, 0] = 123.0
    assert pol.log_std[0] == -0.5 and pol.mean.weights[0][0, 0] != 123.0
    assert isinstance(cp, GaussianPolicy)
