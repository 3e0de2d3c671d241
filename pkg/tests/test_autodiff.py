import numpy as np
import pytest

from lspt import autodiff as ad
from lspt.autodiff import Graph, Tensor, grad_check
from lspt.errors import ContractError, DimensionError, EmptyInputError, GraphError, LabelError, NumericError

SEEDS = range(20)


def rand(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


# --- forward values ---------------------------------------------------------


def test_matmul_examples():
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(np.eye(2), A).data, A)
    assert np.array_equal(ad.matmul(np.array([[1.0, 0.0]]), np.array([[0.0], [5.0]])).data, [[0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_softmax_examples():
    assert np.array_equal(ad.softmax_rows(np.zeros((1, 2))).data, [[0.5, 0.5]])
    out = ad.softmax_rows(np.array([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(out))
    assert abs(out[0, 0] - 1.0) <= 1e-12 and abs(out[0, 1]) <= 1e-12


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    out = ad.softmax_rows(rng.normal(scale=5.0, size=(7, 11))).data
    assert np.all(out >= 0)
    assert np.max(np.abs(out.sum(axis=1) - 1.0)) <= 1e-12


def test_softmax_nan_is_numeric_error():
    with pytest.raises(NumericError):
        ad.softmax_rows(np.array([[0.0, np.nan]]))


def test_layernorm_examples():
    ones, zeros = np.ones(3), np.zeros(3)
    out = ad.layernorm(np.full((1, 3), 2.5), ones, zeros).data
    assert np.array_equal(out, np.zeros((1, 3)))
    b = np.array([0.1, -0.2, 0.3])
    out = ad.layernorm(np.random.default_rng(0).normal(size=(4, 3)), zeros, b).data
    assert np.array_equal(out, np.tile(b, (4, 1)))


def test_layernorm_normalises_rows():
    x = np.random.default_rng(1).normal(size=(5, 16)) * 3 + 2
    out = ad.layernorm(x, np.ones(16), np.zeros(16)).data
    assert np.allclose(out.mean(axis=1), 0.0, atol=1e-12)
    # eps keeps the variance slightly below one
    var = x.var(axis=1)
    assert np.allclose(out.var(axis=1), var / (var + 1e-5), atol=1e-12)


def test_elementwise_values():
    assert ad.elementwise("sigmoid", np.array(0.0)).item() == 0.5
    assert ad.elementwise("tanh", np.array(0.0)).item() == 0.0
    x = np.linspace(-3, 3, 13)
    ref = 0.5 * x * (1 + np.tanh(0.7978845608 * (x + 0.044715 * x**3)))
    assert np.allclose(ad.elementwise("gelu", x).data, ref, rtol=0, atol=1e-15)
    assert np.array_equal(ad.elementwise("add", np.ones(2), np.ones(2)).data, [2.0, 2.0])
    assert np.array_equal(ad.elementwise("mul", np.full(2, 3.0), np.full(2, 2.0)).data, [6.0, 6.0])
    with pytest.raises(ValueError):
        ad.elementwise("relu", x)


def test_sigmoid_stable_for_large_inputs():
    out = ad.sigmoid(np.array([-800.0, 800.0])).data
    assert np.array_equal(out, [0.0, 1.0])


def test_broadcast_rules():
    a = np.ones((2, 3, 4))
    assert ad.add(a, np.ones(4)).shape == (2, 3, 4)
    assert ad.add(a, np.ones((2, 1, 4))).shape == (2, 3, 4)
    assert ad.mul(a, 2.0).shape == (2, 3, 4)
    with pytest.raises(DimensionError):
        ad.add(a, np.ones(3))
    with pytest.raises(DimensionError):
        ad.mul(np.ones((2, 4)), np.ones((3, 4)))


def test_mean_over_rows_examples():
    assert np.array_equal(ad.mean_over_rows(np.array([[2.0, 0.0], [0.0, 2.0]])).data, [[1.0, 1.0]])
    row = np.array([[0.3, -1.7, 2.0]])
    assert np.array_equal(ad.mean_over_rows(row).data, row)
    with pytest.raises(EmptyInputError):
        ad.mean_over_rows(np.zeros((0, 3)))


def test_mean_over_rows_sums_left_to_right():
    x = np.array([[1e16], [1.0], [-1e16], [1.0]])
    # ((1e16 + 1) - 1e16) + 1 = 1 in float64, so the mean is 0.25
    assert ad.mean_over_rows(x).data[0, 0] == 0.25


def test_concat_split_identity_bitwise():
    rng = np.random.default_rng(5)
    D = 6
    parts = [rng.normal(size=(1, D)), rng.normal(size=(3, D)), rng.normal(size=(16, D))]
    back = ad.split_tokens(ad.concat_tokens(parts), [1, 3, 16])
    for p, q in zip(parts, back):
        assert np.array_equal(p, q.data)


def test_concat_empty_prompt_segment():
    rng = np.random.default_rng(6)
    c, x = rng.normal(size=(1, 4)), rng.normal(size=(5, 4))
    with_empty = ad.concat_tokens([c, np.zeros((0, 4)), x]).data
    assert np.array_equal(with_empty, ad.concat_tokens([c, x]).data)
    cc, pp, xx = ad.split_tokens(with_empty, [1, 0, 5])
    assert pp.shape == (0, 4) and np.array_equal(xx.data, x)


def test_split_bad_lengths():
    with pytest.raises(DimensionError):
        ad.split_tokens(np.zeros((5, 2)), [1, 3])
    with pytest.raises(DimensionError):
        ad.concat_tokens([np.zeros((1, 2)), np.zeros((1, 3))])


def test_split_then_sum_gradient_is_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(6, 3)), requires_grad=True)
    with Graph() as g:
        a, b = ad.split_tokens(x, [2, 4])
        loss = ad.add(ad.tensor_sum(a), ad.tensor_sum(b))
    (dx,) = g.backward(loss, [x])
    assert np.array_equal(dx, np.ones((6, 3)))


def test_cross_entropy_values():
    assert abs(ad.cross_entropy(np.zeros((1, 4)), [0]).item() - np.log(4)) < 1e-15
    losses = [ad.cross_entropy(np.array([[m, 0.0, 0.0]]), [0]).item() for m in (0.0, 0.5, 1.0, 3.0)]
    assert all(a > b for a, b in zip(losses, losses[1:]))
    with pytest.raises(LabelError):
        ad.cross_entropy(np.zeros((2, 3)), [0, 3])


def test_cross_entropy_gradient_formula():
    rng = np.random.default_rng(2)
    Z = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    y = [0, 2, 1, 1, 0]
    with Graph() as g:
        loss = ad.cross_entropy(Z, y)
    (dz,) = g.backward(loss, [Z])
    p = np.exp(Z.data - Z.data.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(5), y] -= 1
    assert np.allclose(dz, p / 5, atol=1e-15)


# --- graph semantics ----------------------------------------------------------


def test_backward_sum_is_ones_and_unreached_is_zero():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    with Graph() as g:
        loss = ad.tensor_sum(x)
    dx, dy = g.backward(loss, [x, y])
    assert np.array_equal(dx, np.ones((2, 3)))
    assert np.array_equal(dy, np.zeros(3))


def test_backward_rejects_non_scalar_and_second_call():
    x = Tensor(np.ones(3), requires_grad=True)
    with Graph() as g:
        y = ad.mul(x, x)
        s = ad.tensor_sum(y)
    with pytest.raises(ContractError):
        g.backward(y)
    g.backward(s)
    with pytest.raises(GraphError):
        g.backward(s)


def test_topological_order_is_append_order():
    x = Tensor(np.ones(2), requires_grad=True)
    with Graph() as g:
        y = ad.tanh(ad.mul(x, 2.0))
        ad.tensor_sum(y)
    for nid, node in enumerate(g.nodes):
        assert all(i is None or i < nid for i in node.inputs)


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    with Graph() as g:
        loss = ad.tensor_sum(ad.add(ad.mul(x, x), x))
    (dx,) = g.backward(loss, [x])
    assert np.array_equal(dx, 2 * x.data + 1)


def test_eager_mode_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    y = ad.mul(x, x)
    assert y.graph is None and y.node_id is None


# --- finite-difference checks ---------------------------------------------------


def test_grad_check_trivial():
    rep = grad_check(lambda x: ad.tensor_sum(ad.mul(x, x)), np.array([3.0]))
    assert abs(rep.analytic[0][0] - 6.0) <= 1e-8 and abs(rep.numeric[0][0] - 6.0) <= 1e-8
    rep = grad_check(lambda x: ad.tensor_sum(ad.mul(x, 0.0)), np.array([1.0, 2.0]))
    assert rep.passed and np.all(rep.analytic[0] == 0) and np.all(rep.numeric[0] == 0)


def test_grad_check_reports_failure_without_raising():
    def wrong(x):
        # forward is x^2 but the recorded rule says 3x
        return ad._record("bad", (x,), np.asarray((x.data**2).sum()), lambda g, n: (g * 3 * x.data,))

    rep = grad_check(wrong, np.array([1.0, 2.0]))
    assert not rep.passed and rep.max_rel_err > 0.1


def _weighted_sum(y, w):
    return ad.tensor_sum(ad.mul(y, w))


def _ops(rng):
    """(name, f, inputs, tol) covering every differentiable operation."""
    W = {k: rand(rng, *s) for k, s in {"o34": (3, 4), "o25": (2, 5), "o45": (4, 5), "o6": (6,)}.items()}
    return [
        ("matmul", lambda a, b: _weighted_sum(ad.matmul(a, b), W["o34"][:, :2]), [rand(rng, 3, 4), rand(rng, 4, 2)], 1e-6),
        ("matmul_batched", lambda a, b: ad.tensor_sum(ad.matmul(a, b)), [rand(rng, 2, 3, 4), rand(rng, 4, 2)], 1e-6),
        ("softmax_rows", lambda x: _weighted_sum(ad.softmax_rows(x), W["o25"]), [rand(rng, 2, 5)], 1e-6),
        ("layernorm", lambda x, gm, bt: _weighted_sum(ad.layernorm(x, gm, bt), W["o45"]),
         [rand(rng, 4, 5), rand(rng, 5), rand(rng, 5)], 1e-6),
        ("add", lambda a, b: _weighted_sum(ad.add(a, b), W["o45"]), [rand(rng, 4, 5), rand(rng, 5)], 1e-6),
        ("sub", lambda a, b: _weighted_sum(ad.sub(a, b), W["o45"]), [rand(rng, 4, 5), rand(rng, 1, 5)], 1e-6),
        ("mul", lambda a, b: _weighted_sum(ad.mul(a, b), W["o45"]), [rand(rng, 4, 5), rand(rng, 4, 5)], 1e-6),
        ("sigmoid", lambda x: _weighted_sum(ad.sigmoid(x), W["o6"]), [rand(rng, 6)], 1e-6),
        ("tanh", lambda x: _weighted_sum(ad.tanh(x), W["o6"]), [rand(rng, 6)], 1e-6),
        ("gelu", lambda x: _weighted_sum(ad.gelu(x), W["o6"]), [rand(rng, 6)], 1e-5),
        ("mean_over_rows", lambda x: _weighted_sum(ad.mean_over_rows(x), W["o45"][:1]), [rand(rng, 3, 5)], 1e-8),
        ("concat_tokens", lambda a, b: _weighted_sum(ad.concat_tokens([a, b]), W["o45"]),
         [rand(rng, 1, 5), rand(rng, 3, 5)], 1e-6),
        ("split_tokens", lambda x: _weighted_sum(ad.split_tokens(x, [1, 3])[1], W["o45"][:3]), [rand(rng, 4, 5)], 1e-6),
        ("transpose", lambda x: _weighted_sum(ad.transpose(x, (1, 0)), W["o45"]), [rand(rng, 5, 4)], 1e-6),
        ("reshape", lambda x: _weighted_sum(ad.reshape(x, (4, 5)), W["o45"]), [rand(rng, 2, 10)], 1e-6),
        ("cross_entropy", lambda z: ad.cross_entropy(z, [1, 0]), [rand(rng, 2, 3)], 1e-7),
        ("mlp", lambda x, w1, w2: ad.cross_entropy(ad.matmul(ad.gelu(ad.matmul(x, w1)), w2), [0, 2, 1]),
         [rand(rng, 3, 4), rand(rng, 4, 6), rand(rng, 6, 3)], 1e-5),
    ]


@pytest.mark.parametrize("seed", SEEDS)
def test_every_op_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, f, xs, tol in _ops(rng):
        rep = grad_check(f, xs)
        assert rep.max_rel_err <= tol, f"{name} seed {seed}: {rep}"
