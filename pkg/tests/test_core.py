import math

import numpy as np
import pytest
import torch

from vgsalign import core
from vgsalign.core import ParamStore, grad_check

from oracles import batchnorm_train, bigru_oracle, conv1d_loops, conv2d_loops, linear_loops

SEEDS = range(20)
GRAD_TOL = 1e-5


def t64(a, grad=False):
    return torch.tensor(np.asarray(a), dtype=torch.float64, requires_grad=grad)


def rand(rng, *shape):
    return rng.standard_normal(shape)


# --- forward semantics -------------------------------------------------------


def test_conv1d_identity_kernel():
    x = t64(np.random.default_rng(0).standard_normal((9, 4)))
    w = t64(np.eye(4)[:, :, None])
    assert torch.equal(core.conv1d(x, w, t64(np.zeros(4))), x)


def test_conv1d_output_length():
    x = t64(np.zeros((10, 3)))
    assert core.conv1d(x, t64(np.zeros((5, 3, 6))), None, stride=2).shape == (3, 5)
    assert core.conv_output_length(10, 6, 2) == 3


def test_conv1d_too_short():
    with pytest.raises(core.ShapeError, match="shorter than kernel"):
        core.conv1d(t64(np.zeros((5, 3))), t64(np.zeros((2, 3, 6))))


@pytest.mark.parametrize("seed", range(5))
def test_conv1d_matches_loops(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rand(rng, 13, 3), rand(rng, 4, 3, 6), rand(rng, 4)
    got = core.conv1d(t64(x), t64(w), t64(b), stride=2).numpy()
    np.testing.assert_allclose(got, conv1d_loops(x, w, b, 2), rtol=0, atol=1e-12)


def test_conv2d_identity_1x1():
    x = t64(np.random.default_rng(1).standard_normal((3, 5, 5)))
    assert torch.allclose(core.conv2d(x, t64(np.eye(3)[:, :, None, None])), x, rtol=0, atol=0)


def test_conv2d_stem_size():
    x = torch.zeros(1, 3, 224, 224)
    assert core.conv2d(x, torch.zeros(2, 3, 7, 7), stride=2, padding=3).shape == (1, 2, 112, 112)


def test_conv2d_channel_mismatch():
    with pytest.raises(core.ShapeError):
        core.conv2d(torch.zeros(1, 4, 8, 8), torch.zeros(2, 3, 3, 3))


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("stride, pad, k", [(1, 1, 3), (2, 3, 7), (1, 0, 1)])
def test_conv2d_matches_loops(seed, stride, pad, k):
    rng = np.random.default_rng(seed)
    x, w = rand(rng, 2, 9, 9), rand(rng, 3, 2, k, k)
    got = core.conv2d(t64(x), t64(w), stride=stride, padding=pad).numpy()
    np.testing.assert_allclose(got, conv2d_loops(x, w, stride, pad), rtol=0, atol=1e-12)


def test_linear_trivial_cases():
    x = t64([1.0, -2.0, 3.0])
    assert torch.equal(core.linear(x, t64(np.eye(3)), t64(np.zeros(3))), x)
    b = t64([4.0, 5.0])
    assert torch.equal(core.linear(x, t64(np.zeros((2, 3))), b), b)


@pytest.mark.parametrize("seed", range(5))
def test_linear_matches_loops(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rand(rng, 6), rand(rng, 4, 6), rand(rng, 4)
    np.testing.assert_allclose(core.linear(t64(x), t64(w), t64(b)).numpy(), linear_loops(x, w, b), atol=1e-12)


def test_linear_shape_mismatch():
    with pytest.raises(core.ShapeError):
        core.linear(t64(np.zeros(3)), t64(np.zeros((2, 4))))


def _bn_args(C):
    return t64(np.ones(C)), t64(np.zeros(C)), torch.zeros(C, dtype=torch.float64), torch.ones(C, dtype=torch.float64)


def test_batchnorm_standardized_input_passthrough():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 3, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    y = core.batchnorm2d(t64(x), *_bn_args(3), training=True).numpy()
    # epsilon leaves a relative shrink of about eps / 2
    np.testing.assert_allclose(y, x / math.sqrt(1 + 1e-5), atol=1e-12)
    np.testing.assert_allclose(y, x, rtol=1e-5)


def test_batchnorm_constant_channel_gives_beta():
    x = t64(np.full((2, 2, 3, 3), 7.0))
    g, _, rm, rv = _bn_args(2)
    beta = t64([0.5, -1.5])
    y = core.batchnorm2d(x, g, beta, rm, rv, training=True)
    np.testing.assert_allclose(y[:, 0].numpy(), 0.5)
    np.testing.assert_allclose(y[:, 1].numpy(), -1.5)


def test_batchnorm_train_matches_oracle_and_updates_running_stats():
    rng = np.random.default_rng(3)
    x, g, b = rand(rng, 3, 2, 4, 4), rand(rng, 2), rand(rng, 2)
    rm, rv = torch.zeros(2, dtype=torch.float64), torch.ones(2, dtype=torch.float64)
    y = core.batchnorm2d(t64(x), t64(g), t64(b), rm, rv, training=True).numpy()
    np.testing.assert_allclose(y, batchnorm_train(x, g, b), atol=1e-12)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.mean(axis=(0, 2, 3))
    unbiased = x.var(axis=(0, 2, 3)) * n / (n - 1)
    np.testing.assert_allclose(rm.numpy(), 0.1 * mean, atol=1e-12)
    np.testing.assert_allclose(rv.numpy(), 0.9 + 0.1 * unbiased, atol=1e-12)


def test_batchnorm_eval_uses_initial_stats():
    x = np.random.default_rng(4).standard_normal((1, 2, 3, 3))
    y = core.batchnorm2d(t64(x), *_bn_args(2), training=False).numpy()
    np.testing.assert_allclose(y, x / math.sqrt(1 + 1e-5), atol=1e-12)


def test_batchnorm_needs_two_values():
    with pytest.raises(core.ShapeError):
        core.batchnorm2d(torch.zeros(1, 2, 1, 1), *(a.float() for a in _bn_args(2)), training=True)


def test_softmax_closed_forms():
    np.testing.assert_allclose(core.softmax(t64(np.full(5, 3.3))).numpy(), 0.2)
    np.testing.assert_allclose(core.softmax(t64([0.0, math.log(3.0)])).numpy(), [0.25, 0.75], atol=1e-15)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_sums_to_one_and_shift_invariant(seed):
    rng = np.random.default_rng(seed)
    x = t64(rng.standard_normal((4, 6)) * 10)
    s = core.softmax(x, axis=0)
    np.testing.assert_allclose(s.sum(0).numpy(), 1.0, atol=1e-6)
    shifted = core.softmax(x + t64(rng.standard_normal(6) * 50), axis=0)
    np.testing.assert_allclose(shifted.numpy(), s.numpy(), atol=1e-12)


def test_softmax_mask_zeroes_positions():
    x = t64([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    mask = torch.tensor([[True, True], [True, True], [False, False]])
    s = core.softmax(x, axis=0, mask=mask)
    assert torch.all(s[2] == 0)
    np.testing.assert_allclose(s.sum(0).numpy(), 1.0)


def test_activations():
    x = t64([0.5, 2.0, 7.0])
    assert torch.all(core.relu(-x) == 0)
    np.testing.assert_allclose(core.sigmoid(t64([0.0])).numpy(), 0.5)
    np.testing.assert_allclose(core.tanh_op(t64([0.0])).numpy(), 0.0)


def test_pooling():
    assert core.pool(t64(np.full((2, 3, 3), 4.5)), "global_avg").tolist() == [4.5, 4.5]
    x = t64([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert core.pool(x, "max", 2).item() == 4.0
    assert core.pool(x, "avg", 2).item() == 2.5
    with pytest.raises(ValueError):
        core.pool(x, "median")


@pytest.mark.parametrize("seed", range(3))
def test_pool_matches_loops(seed):
    x = np.random.default_rng(seed).standard_normal((2, 6, 6))
    got = core.pool(t64(x)[None], "max", 3, 2, padding=1)[0].numpy()
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    want = np.array([[[xp[c, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3].max() for j in range(3)] for i in range(3)] for c in range(2)])
    np.testing.assert_array_equal(got, want)
    avg = core.pool(t64(x)[None], "avg", 2)[0].numpy()
    np.testing.assert_allclose(avg, x.reshape(2, 3, 2, 3, 2).mean(axis=(2, 4)), atol=1e-15)


def test_l2_normalize():
    np.testing.assert_allclose(core.l2_normalize(t64([3.0, 4.0])).numpy(), [0.6, 0.8], atol=1e-15)
    u = t64([0.0, 1.0, 0.0])
    assert torch.equal(core.l2_normalize(u), u)
    with pytest.raises(ValueError, match="degenerate norm"):
        core.l2_normalize(t64([0.0, 0.0]))


# --- Bi-GRU ------------------------------------------------------------------


def gru_params(rng, d_in, h, scale=1.0):
    p = {}
    for s in ("fwd", "bwd"):
        p[f"weight_ih_{s}"] = rng.standard_normal((3 * h, d_in)) * scale
        p[f"weight_hh_{s}"] = rng.standard_normal((3 * h, h)) * scale
        p[f"bias_ih_{s}"] = rng.standard_normal(3 * h) * scale
        p[f"bias_hh_{s}"] = rng.standard_normal(3 * h) * scale
    return p


def test_bigru_zero_params_give_zero_states():
    p = {k: t64(np.zeros_like(v)) for k, v in gru_params(np.random.default_rng(0), 3, 2).items()}
    x = t64(np.random.default_rng(1).standard_normal((1, 5, 3)))
    assert torch.all(core.bigru_layer(x, p) == 0)


def test_bigru_single_step_is_two_cells():
    rng = np.random.default_rng(2)
    p = gru_params(rng, 3, 2)
    x = rng.standard_normal((1, 3))
    got = core.bigru_layer(t64(x)[None], {k: t64(v) for k, v in p.items()})[0].numpy()
    np.testing.assert_allclose(got, bigru_oracle(x, p), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_bigru_matches_step_oracle(seed):
    rng = np.random.default_rng(seed)
    p = gru_params(rng, 2, 2)
    x = rng.standard_normal((3, 2))
    got = core.bigru_layer(t64(x)[None], {k: t64(v) for k, v in p.items()})[0].numpy()
    np.testing.assert_allclose(got, bigru_oracle(x, p), rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_bigru_time_reversal_swaps_directions(seed):
    rng = np.random.default_rng(seed)
    p = gru_params(rng, 3, 4)
    swapped = {k.replace("fwd", "tmp").replace("bwd", "fwd").replace("tmp", "bwd"): v for k, v in p.items()}
    x = rng.standard_normal((1, 6, 3))
    out = core.bigru_layer(t64(x), {k: t64(v) for k, v in p.items()}).numpy()[0]
    rev = core.bigru_layer(t64(x[:, ::-1].copy()), {k: t64(v) for k, v in swapped.items()}).numpy()[0]
    np.testing.assert_allclose(rev[::-1], np.concatenate([out[:, 4:], out[:, :4]], axis=1), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_bigru_masking_matches_unpadded(seed):
    rng = np.random.default_rng(seed)
    p = {k: t64(v) for k, v in gru_params(rng, 3, 2).items()}
    x = rng.standard_normal((5, 3))
    padded = np.concatenate([x, rng.standard_normal((3, 3))])[None]
    mask = torch.tensor([[True] * 5 + [False] * 3])
    full = core.bigru_layer(t64(padded), p, mask)[0, :5]
    ref = core.bigru_layer(t64(x)[None], p)[0]
    np.testing.assert_allclose(full.numpy(), ref.numpy(), atol=1e-12)


def test_bigru_empty_sequence():
    p = {k: t64(v) for k, v in gru_params(np.random.default_rng(0), 3, 2).items()}
    with pytest.raises(core.ShapeError):
        core.bigru_layer(t64(np.zeros((1, 0, 3))), p)


# --- backward and the finite-difference harness -----------------------------


def test_backward_square_norm():
    x = t64([1.0, -2.0, 0.5], grad=True)
    core.backward((x * x).sum())
    np.testing.assert_allclose(x.grad.numpy(), [2.0, -4.0, 1.0])


def test_backward_relu_negative_region():
    x = t64([-1.0, -0.2, -3.0], grad=True)
    core.backward(core.relu(x).sum())
    assert torch.all(x.grad == 0)


def test_backward_rejects_non_scalar():
    x = t64([1.0, 2.0], grad=True)
    with pytest.raises(ValueError):
        core.backward(x * 2)


def test_backward_accumulates():
    x = t64([1.0, 2.0], grad=True)
    core.backward((x * x).sum())
    first = x.grad.clone()
    core.backward((x * x).sum())
    np.testing.assert_allclose(x.grad.numpy(), 2 * first.numpy())


def test_param_store_order_and_duplicates():
    a, b = t64([1.0], grad=True), t64([2.0, 3.0], grad=True)
    store = ParamStore([("a", a), ("b", b)])
    assert list(store) == ["a", "b"] and store.numel() == 3
    with pytest.raises(KeyError):
        ParamStore([("a", a), ("a", b)])


def test_grad_check_rejects_float32():
    p = torch.zeros(2, requires_grad=True)
    with pytest.raises(TypeError):
        grad_check(lambda: p.sum(), ParamStore([("p", p)]))


def test_grad_check_detects_wrong_gradient():
    p = t64([0.3, -0.7], grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return (x**3).sum()

        @staticmethod
        def backward(ctx, g):
            return torch.ones(2, dtype=torch.float64) * g

    assert grad_check(lambda: Wrong.apply(p), ParamStore([("p", p)])) > 0.1


def _projected(out, rng):
    R = t64(rng.standard_normal(tuple(out.shape)))
    return (out * R).sum()


def primitive_case(name, rng):
    """(objective, ParamStore) for one primitive with random inputs and a random projection."""
    P = {}

    def leaf(key, *shape, scale=1.0):
        P[key] = t64(rng.standard_normal(shape) * scale, grad=True)
        return P[key]

    if name == "conv1d":
        x, w, b = leaf("x", 9, 3), leaf("w", 4, 3, 3), leaf("b", 4)
        R = t64(rng.standard_normal((4, 4)))
        f = lambda: (core.conv1d(x, w, b, stride=2) * R).sum()
    elif name == "conv2d":
        x, w = leaf("x", 1, 2, 5, 5), leaf("w", 3, 2, 3, 3)
        R = t64(rng.standard_normal((1, 3, 3, 3)))
        f = lambda: (core.conv2d(x, w, stride=2, padding=1) * R).sum()
    elif name == "linear":
        x, w, b = leaf("x", 5), leaf("w", 3, 5), leaf("b", 3)
        R = t64(rng.standard_normal(3))
        f = lambda: (core.linear(x, w, b) * R).sum()
    elif name == "batchnorm2d":
        x, g, b = leaf("x", 3, 2, 3, 3), leaf("gamma", 2), leaf("beta", 2)
        R = t64(rng.standard_normal((3, 2, 3, 3)))
        rm, rv = torch.zeros(2, dtype=torch.float64), torch.ones(2, dtype=torch.float64)
        f = lambda: (core.batchnorm2d(x, g, b, rm, rv, training=True) * R).sum()
    elif name == "batchnorm2d_eval":
        x, g, b = leaf("x", 2, 2, 3, 3), leaf("gamma", 2), leaf("beta", 2)
        R = t64(rng.standard_normal((2, 2, 3, 3)))
        rm = t64(rng.standard_normal(2))
        rv = t64(rng.uniform(0.5, 2.0, 2))
        f = lambda: (core.batchnorm2d(x, g, b, rm, rv, training=False) * R).sum()
    elif name == "bigru_layer":
        x = leaf("x", 1, 4, 3)
        p = {k: leaf(k, *v.shape) for k, v in gru_params(rng, 3, 2).items()}
        R = t64(rng.standard_normal((1, 4, 4)))
        mask = torch.tensor([[True, True, True, False]])
        f = lambda: (core.bigru_layer(x, p, mask) * R).sum()
    elif name == "softmax":
        x = leaf("x", 4, 5)
        R = t64(rng.standard_normal((4, 5)))
        f = lambda: (core.softmax(x, axis=0) * R).sum()
    elif name in ("relu", "tanh_op", "sigmoid"):
        x = leaf("x", 12)
        op = getattr(core, name)
        R = t64(rng.standard_normal(12))
        f = lambda: (op(x) * R).sum()
    elif name == "pool_max":
        x = leaf("x", 1, 2, 6, 6)
        R = t64(rng.standard_normal((1, 2, 3, 3)))
        f = lambda: (core.pool(x, "max", 3, 2, padding=1) * R).sum()
    elif name == "pool_avg":
        x = leaf("x", 1, 2, 4, 4)
        R = t64(rng.standard_normal((1, 2, 2, 2)))
        f = lambda: (core.pool(x, "avg", 2) * R).sum()
    elif name == "pool_global_avg":
        x = leaf("x", 2, 3, 3)
        R = t64(rng.standard_normal(2))
        f = lambda: (core.pool(x, "global_avg") * R).sum()
    elif name == "l2_normalize":
        x = leaf("x", 6)
        R = t64(rng.standard_normal(6))
        f = lambda: (core.l2_normalize(x) * R).sum()
    else:
        raise KeyError(name)
    return f, ParamStore(P.items())


PRIMITIVES = [
    "conv1d",
    "conv2d",
    "linear",
    "batchnorm2d",
    "batchnorm2d_eval",
    "bigru_layer",
    "softmax",
    "relu",
    "tanh_op",
    "sigmoid",
    "pool_max",
    "pool_avg",
    "pool_global_avg",
    "l2_normalize",
]


@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_gradients(name):
    worst = 0.0
    for seed in SEEDS:
        f, params = primitive_case(name, np.random.default_rng(seed))
        worst = max(worst, grad_check(f, params, seed=seed))
    assert worst <= GRAD_TOL, f"{name}: max relative error {worst:.3g}"


def test_grad_check_linear_layer_tight():
    f, params = primitive_case("linear", np.random.default_rng(123))
    assert grad_check(f, params) <= 1e-7
