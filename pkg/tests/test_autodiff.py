import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradient_cases import ALL_CASES, worst_error
from latent_retinex.autodiff import Tape, Tensor, backward, no_grad, ops
from latent_retinex.errors import ContractError, DimensionError, TapeStateError


@pytest.mark.parametrize("name", sorted(ALL_CASES))
def test_gradients_match_central_differences(name):
    assert worst_error(name) <= 1e-3


# -- conv2d ---------------------------------------------------------------------

def test_conv_scaling_kernel():
    out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def _window_sum(x, k):
    h, w = x.shape
    return np.array([[x[i:i + k, j:j + k].sum() for j in range(w - k + 1)] for i in range(h - k + 1)])


def test_conv_two_by_two_ones_matches_window_sums():
    x = np.arange(1.0, 10.0).reshape(3, 3)
    out = ops.conv2d(Tensor(x[None, None]), Tensor(np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(out.data[0, 0], [[12, 16], [24, 28]])
    np.testing.assert_array_equal(out.data[0, 0], _window_sum(x, 2))


def test_conv_identity_kernel_with_padding():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 4))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(ops.conv2d(Tensor(x), Tensor(k), padding=1).data, x)


def _conv_reference(x, k, b, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, _, hp, wp = xp.shape
    co, _, kh, kw = k.shape
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, :, i, j] = np.einsum("nchw,ochw->no", patch, k) + b
    return out


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 2), ci=st.integers(1, 3), co=st.integers(1, 3), kh=st.integers(1, 3),
       kw=st.integers(1, 3), h=st.integers(3, 7), w=st.integers(3, 7), stride=st.integers(1, 3),
       pad=st.integers(0, 2), seed=st.integers(0, 2 ** 16))
def test_conv_shape_and_values_against_loops(n, ci, co, kh, kw, h, w, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x, k, b = rng.normal(size=(n, ci, h, w)), rng.normal(size=(co, ci, kh, kw)), rng.normal(size=co)
    out = ops.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, padding=pad)
    assert out.shape == (n, co, (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1)
    np.testing.assert_allclose(out.data, _conv_reference(x, k, b, stride, pad), atol=1e-12)


def test_conv_errors_name_both_shapes():
    with pytest.raises(DimensionError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(DimensionError):
        ops.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(DimensionError):
        ops.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)


# -- pooling --------------------------------------------------------------------

def test_max_pool_examples():
    np.testing.assert_array_equal(ops.max_pool2d(Tensor([[[[1.0, 2], [3, 4]]]]), 2).data, [[[[4]]]])
    np.testing.assert_array_equal(ops.max_pool2d(Tensor(np.full((1, 1, 4, 4), 5.0)), 2).data,
                                  np.full((1, 1, 2, 2), 5.0))


def test_max_pool_backward_routes_to_argmax():
    x = Tensor([[[[1.0, 2], [3, 4]]]], requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.max_pool2d(x, 2))
    np.testing.assert_array_equal(tape.backward(loss)[x.node_id].data, [[[[0, 0], [0, 1]]]])


def test_max_pool_ties_go_to_first_maximum():
    x = Tensor(np.full((1, 1, 2, 2), 3.0), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.max_pool2d(x, 2))
    np.testing.assert_array_equal(tape.backward(loss)[x.node_id].data, [[[[1, 0], [0, 0]]]])


def test_max_pool_rejects_indivisible_extent():
    with pytest.raises(DimensionError):
        ops.max_pool2d(Tensor(np.zeros((1, 1, 3, 4))), 2)


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 5), w=st.integers(1, 5), c=st.integers(1, 3), seed=st.integers(0, 2 ** 16))
def test_max_pool_output_is_window_max(h, w, c, seed):
    x = np.random.default_rng(seed).normal(size=(1, c, 2 * h, 2 * w))
    out = ops.max_pool2d(Tensor(x), 2).data
    windows = x.reshape(1, c, h, 2, w, 2)
    np.testing.assert_array_equal(out, windows.max(axis=(3, 5)))
    assert np.all(out >= windows.min(axis=(3, 5)))


# -- attention / softmax --------------------------------------------------------

def test_attention_single_row_returns_value():
    rng = np.random.default_rng(1)
    v = rng.normal(size=(1, 4))
    out = ops.attention(Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=(1, 4))), Tensor(v))
    np.testing.assert_allclose(out.data, v, atol=1e-15)


def test_attention_identical_rows():
    rng = np.random.default_rng(2)
    row = rng.normal(size=(1, 3))
    kv = np.repeat(row, 4, axis=0)
    out = ops.attention(Tensor(rng.normal(size=(4, 3))), Tensor(kv), Tensor(kv))
    np.testing.assert_allclose(out.data, kv, atol=1e-12)


def test_attention_matches_row_by_row_formula():
    rng = np.random.default_rng(3)
    q, k, v = (rng.normal(size=(3, 4)) for _ in range(3))
    expected = []
    for row in q:
        scores = np.array([row @ kr for kr in k]) / 2.0
        weights = np.exp(scores) / np.exp(scores).sum()
        expected.append(sum(wi * vr for wi, vr in zip(weights, v)))
    out = ops.attention(Tensor(q), Tensor(k), Tensor(v))
    np.testing.assert_allclose(out.data, np.array(expected), atol=1e-12)


def test_attention_dimension_mismatch():
    with pytest.raises(DimensionError):
        ops.attention(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))))


@settings(max_examples=50, deadline=None)
@given(rows=st.integers(1, 6), cols=st.integers(1, 6), scale=st.floats(0.1, 50.0),
       seed=st.integers(0, 2 ** 16))
def test_softmax_rows_sum_to_one(rows, cols, scale, seed):
    x = np.random.default_rng(seed).normal(size=(rows, cols)) * scale
    s = ops.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)


# -- tape contract --------------------------------------------------------------

def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        loss = x * x
    assert tape.backward(loss)[x.node_id].item() == 6.0


def test_hadamard_sum_gradient_is_other_factor():
    rng = np.random.default_rng(4)
    a = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    b = rng.normal(size=(3, 2))
    with Tape() as tape:
        loss = ops.sum(a * Tensor(b))
    np.testing.assert_array_equal(tape.backward(loss)[a.node_id].data, b)


def test_non_scalar_loss_is_contract_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        tape.backward(y)


def test_second_backward_is_state_error():
    x = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        loss = x * x
    tape.backward(loss)
    with pytest.raises(TapeStateError):
        tape.backward(loss)


def test_untracked_tensors_are_never_targets():
    x = Tensor(np.ones(2), requires_grad=True)
    c = Tensor(np.ones(2))
    with Tape() as tape:
        loss = ops.sum(x * c)
    grads = tape.backward(loss)
    assert set(grads) == {x.node_id}
    assert c.node_id is None


def test_nothing_recorded_without_tape_or_inside_no_grad():
    x = Tensor(1.0, requires_grad=True)
    assert not (x * x).requires_grad
    with Tape() as tape:
        with no_grad():
            y = x * x
    assert len(tape) == 0 and not y.requires_grad


def test_backward_helper_uses_active_tape():
    x = Tensor(2.0, requires_grad=True)
    with Tape():
        loss = x * x * x
        grads = backward(loss)
    assert grads[x.node_id].item() == pytest.approx(12.0)


def test_tape_records_in_topological_order():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        y = ops.exp(x)
        z = ops.sum(y * x)
    seen = {x.node_id}
    for rec in tape._records:
        assert all(t.node_id in seen for t in rec.inputs if t.requires_grad)
        seen.add(rec.out_id)
    assert z.node_id in seen


def test_tapes_are_independent_across_threads():
    results = {}

    def work(k):
        x = Tensor(float(k), requires_grad=True)
        with Tape() as tape:
            loss = x * x
        results[k] = tape.backward(loss)[x.node_id].item()

    threads = [threading.Thread(target=work, args=(k,)) for k in range(1, 6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == {k: 2.0 * k for k in range(1, 6)}


# -- forward differences, shapes, determinism -----------------------------------

def test_forward_differences_replicate_last_row_and_column():
    x = Tensor(np.arange(12.0).reshape(1, 1, 3, 4))
    dx, dy = ops.diff_x(x).data[0, 0], ops.diff_y(x).data[0, 0]
    assert dx.shape == dy.shape == (3, 4)
    np.testing.assert_array_equal(dx[:, :3], 1.0)
    np.testing.assert_array_equal(dx[:, 3], 0.0)
    np.testing.assert_array_equal(dy[:2], 4.0)
    np.testing.assert_array_equal(dy[2], 0.0)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 3), c=st.integers(1, 4), h=st.integers(1, 6), w=st.integers(1, 6))
def test_shape_algebra(n, c, h, w):
    x = Tensor(np.zeros((n, c, h, w)))
    assert ops.upsample_nearest(x, 2).shape == (n, c, 2 * h, 2 * w)
    assert ops.max(x, axis=1, keepdims=True).shape == (n, 1, h, w)
    assert ops.concat([x, x], axis=1).shape == (n, 2 * c, h, w)
    assert ops.diff_x(x).shape == ops.diff_y(x).shape == x.shape
    assert ops.layer_norm(x, axis=(1, 2, 3)).shape == x.shape


def test_concat_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        ops.concat([Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 2, 4, 3)))], axis=1)


def test_matmul_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_primitives_are_bitwise_deterministic():
    rng = np.random.default_rng(5)
    x, k = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3))
    first = ops.conv2d(Tensor(x), Tensor(k), padding=1).data
    second = ops.conv2d(Tensor(x), Tensor(k), padding=1).data
    assert first.tobytes() == second.tobytes()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 16))
def test_finite_inputs_give_finite_outputs(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(1, 2, 4, 4)) * 30)
    for y in (ops.sigmoid(x), ops.silu(x), ops.softplus(x, 20.0), ops.softmax(x),
              ops.layer_norm(x, axis=(1, 2, 3)), ops.exp(ops.neg(ops.abs(x)))):
        assert np.all(np.isfinite(y.data))
