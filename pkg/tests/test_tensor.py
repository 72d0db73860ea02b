import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lcflow import tensor as T
from lcflow.seeding import stream
from lcflow.tensor import ContractError, NumericError, ShapeError, Tensor

from gradcheck import sample_check

finite = st.floats(-3, 3, allow_nan=False, width=64)


def leaf(a, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True, dtype=dtype)


def grads_of(fn, *leaves):
    with T.Tape() as tape:
        loss = fn(*leaves)
    g = T.reverse_gradients(loss, tape)
    return [g[x.id].data for x in leaves]


# ---------------------------------------------------------------- basics


def test_default_dtype_is_float32_and_precision_context_restores():
    assert Tensor([1.0]).data.dtype == np.float32
    with T.precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_matmul_shapes_and_error_names_both_shapes():
    a, b = Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4)))
    assert T.matmul(a, b).shape == (2, 4)
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 4\)"):
        T.matmul(a, Tensor(np.ones((4, 4))))


def test_matmul_batched_broadcast():
    a = np.random.default_rng(0).standard_normal((2, 1, 3, 4))
    b = np.random.default_rng(1).standard_normal((5, 4, 2))
    out = T.matmul(Tensor(a), Tensor(b))
    np.testing.assert_allclose(out.data, a @ b, rtol=1e-5)


@pytest.mark.parametrize("x, expected", [([0, 0], [0.5, 0.5]), ([1000, 1000], [0.5, 0.5]),
                                         ([0, np.log(3)], [0.25, 0.75])])
def test_softmax_examples(x, expected):
    np.testing.assert_allclose(T.softmax_lastdim(Tensor(x)).data, expected, atol=1e-7)


@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax_lastdim(Tensor(x, dtype=np.float64)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


def test_softmax_rejects_nan_but_allows_masked_entries():
    with pytest.raises(NumericError):
        T.softmax_lastdim(Tensor([0.0, np.nan]))
    out = T.softmax_lastdim(Tensor([0.0, -np.inf])).data
    np.testing.assert_array_equal(out, [1.0, 0.0])


def test_rms_norm_examples():
    np.testing.assert_allclose(T.rms_norm(Tensor([2.0, 2.0]), Tensor([1.0, 1.0])).data, [1, 1], atol=1e-6)
    np.testing.assert_array_equal(T.rms_norm(Tensor([0.0, 0.0]), Tensor([1.0, 1.0])).data, [0, 0])


def test_rms_norm_matches_scalar_loop():
    rng = np.random.default_rng(3)
    x, w = rng.standard_normal(7), rng.standard_normal(7)
    ms = sum(v * v for v in x) / len(x)
    expected = [x[i] / np.sqrt(ms + 1e-6) * w[i] for i in range(7)]
    out = T.rms_norm(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64)).data
    np.testing.assert_allclose(out, expected, atol=1e-6)


# ------------------------------------------------------------- gradients


def test_gradient_of_sum_of_squares():
    (g,) = grads_of(lambda x: (x * x).sum(), leaf([1.0, 2.0]))
    np.testing.assert_allclose(g, [2.0, 4.0])


def test_gradient_of_softmax_row_sum_is_zero():
    (g,) = grads_of(lambda x: T.softmax_lastdim(x).sum(), leaf(np.random.default_rng(0).standard_normal((3, 4))))
    np.testing.assert_allclose(g, 0.0, atol=1e-12)


def test_reverse_gradients_rejects_non_scalar_loss():
    x = leaf([1.0, 2.0])
    with T.Tape() as tape:
        y = x * x
    with pytest.raises(ContractError):
        T.reverse_gradients(y, tape)


def test_one_gradient_per_leaf_with_leaf_shape_and_zeros_for_unused():
    a, b = leaf(np.ones((2, 3))), leaf(np.ones(4))
    with T.Tape() as tape:
        loss = (a * 2.0).sum() + (b * 0.0).sum()
    g = T.reverse_gradients(loss, tape)
    assert set(g) == {a.id, b.id}
    assert g[a.id].shape == (2, 3) and g[b.id].shape == (4,)
    np.testing.assert_array_equal(g[b.id].data, 0.0)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.Tape() as tape:
        with T.no_grad():
            y = x * x
    assert not tape.nodes and not y.requires_grad


def _composite(params, x, targets):
    """A graph touching every exposed differentiable op."""
    h = T.linear(x, params["w1"], params["b1"])
    h = T.rms_norm(h, params["g"])
    a = T.silu(h) * T.sigmoid(h) + T.exp(h * 0.1) - T.log(T.sigmoid(h) + 1.0)
    a = T.concat([a[..., :3], a[..., :2] / (T.exp(a[..., 2:4]) + 1.0)], axis=-1)
    a = a.reshape(2, 3, 5).transpose(0, 2, 1)
    s = T.softmax_lastdim(T.matmul(a, T.broadcast_to(params["m"], (2, 3, 3))))
    r = T.rotary(s.reshape(2, 1, 5, 3)[..., :2], np.cos(np.arange(5))[:, None], np.sin(np.arange(5))[:, None])
    emb = T.take_rows(params["e"], np.array([[0, 1], [2, 1]]))
    logits = T.concat([r.reshape(2, 5, 2), T.broadcast_to(emb.mean(axis=1, keepdims=True), (2, 5, 3))], axis=-1)
    return T.cross_entropy(logits, targets) + T.mean(a * a) - T.sum_(params["b1"]) * 0.01


@given(st.integers(0, 2 ** 31 - 1))
def test_composite_graph_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        params = {"w1": leaf(rng.standard_normal((4, 5))), "b1": leaf(rng.standard_normal(5)),
                  "g": leaf(rng.standard_normal(5)), "m": leaf(rng.standard_normal((1, 3, 3))),
                  "e": leaf(rng.standard_normal((3, 3)))}
        x = Tensor(rng.standard_normal((2, 3, 4)))
        targets = rng.integers(0, 5, (2, 5))
        rows = sample_check(lambda: _composite(params, x, targets), params, 12, seed)
    assert max(r[4] for r in rows) <= 1e-3, rows


def test_getitem_fancy_index_accumulates_repeats():
    x = leaf([1.0, 2.0, 3.0])
    (g,) = grads_of(lambda t: t[np.array([0, 0, 2])].sum(), x)
    np.testing.assert_array_equal(g, [2.0, 0.0, 1.0])


def test_dropout_scales_kept_units_and_is_identity_without_rng():
    x = Tensor(np.ones(10000))
    assert T.dropout(x, 0.1, None) is x
    out = T.dropout(x, 0.1, np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, np.float32(1 / 0.9)}
    assert abs((out == 0).mean() - 0.1) < 0.02


# ---------------------------------------------------------------- init


def test_kaiming_scale_zero_is_all_zero():
    t = T.init_kaiming_scaled((4, 4), 4, 0.0, stream(0, "init"))
    assert not t.data.any() and t.requires_grad


def test_kaiming_std_monte_carlo():
    t = T.init_kaiming_scaled((100_000,), 100, 1.0, stream(1, "init"))
    assert abs(t.data.std() / np.sqrt(0.02) - 1) < 0.1


def test_kaiming_is_deterministic_per_seed_and_validates():
    a = T.init_kaiming_scaled((8,), 3, 0.06, stream(5, "init"))
    b = T.init_kaiming_scaled((8,), 3, 0.06, stream(5, "init"))
    np.testing.assert_array_equal(a.data, b.data)
    with pytest.raises(ContractError):
        T.init_kaiming_scaled((2,), 0, 1.0, stream(0, "init"))
    with pytest.raises(ContractError):
        T.init_kaiming_scaled((2,), 2, -1.0, stream(0, "init"))


def test_streams_are_independent_per_purpose():
    a = stream(0, "init").standard_normal(4)
    b = stream(0, "gate-noise").standard_normal(4)
    c = stream(0, "init").standard_normal(4)
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(a, c)
