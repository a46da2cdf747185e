import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbdae import autodiff as ad
from cbdae.errors import ContractError, DimensionError
from cbdae.rnn import (
    GruLayerParams,
    GruStack,
    encode,
    encode_stepwise,
    gru_cell,
    gru_cell_step,
    infer_cell,
    infer_encode,
)


def textbook_cell(W, U, b, p, h):
    """Independent GRU step written from the gate equations."""
    q = h.shape[0]
    sig = lambda x: 1.0 / (1.0 + np.exp(-x))
    Wz, Wr, Wn = W[:q], W[q : 2 * q], W[2 * q :]
    Uz, Ur, Un = U[:q], U[q : 2 * q], U[2 * q :]
    bz, br, bn = b[:q], b[q : 2 * q], b[2 * q :]
    z = sig(Wz @ p + Uz @ h + bz)
    r = sig(Wr @ p + Ur @ h + br)
    n = np.tanh(Wn @ p + r * (Un @ h + bn))
    return (1 - z) * n + z * h


def zero_layer(p, q):
    return GruLayerParams(ad.Tensor(np.zeros((3 * q, p))), ad.Tensor(np.zeros((3 * q, q))), ad.Tensor(np.zeros(3 * q)))


def test_zero_weight_cell_halves_the_state(rng):
    h = rng.standard_normal(5)
    out = gru_cell_step(zero_layer(3, 5), ad.Tensor(rng.standard_normal(3)), ad.Tensor(h)).values
    np.testing.assert_array_equal(out, 0.5 * h)


def test_cell_matches_textbook_equations(rng):
    layer = GruLayerParams.init(3, 4, rng)
    p, h = rng.standard_normal(3), rng.standard_normal(4)
    out = gru_cell(layer, ad.Tensor(p), ad.Tensor(h)).values
    ref = textbook_cell(layer.W.values, layer.U.values, layer.b.values, p, h)
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-14)


def test_batched_cell_equals_columnwise(rng):
    layer = GruLayerParams.init(3, 4, rng)
    P, H = rng.standard_normal((3, 6)), rng.standard_normal((4, 6))
    out = gru_cell(layer, ad.Tensor(P), ad.Tensor(H)).values
    for c in range(6):
        np.testing.assert_allclose(out[:, c], gru_cell(layer, ad.Tensor(P[:, c]), ad.Tensor(H[:, c])).values, atol=1e-15)


def test_stacked_encode_equals_unrolled_steps(rng):
    stack_ = GruStack.init(2, [4, 3], rng)
    window = rng.standard_normal((7, 2, 5))
    finals, top = encode(stack_, window)
    finals_ref, top_ref = encode_stepwise(stack_, window)
    for a, b in zip(finals, finals_ref):
        np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(top.values, top_ref.values)


def test_encode_matches_textbook_unrolling(rng):
    stack_ = GruStack.init(2, [4, 3], rng)
    window = rng.standard_normal((6, 2))
    finals, _ = encode(stack_, window)
    states = [np.zeros(4), np.zeros(3)]
    for j in range(6):
        p = window[j]
        for i, layer in enumerate(stack_.layers):
            states[i] = textbook_cell(layer.W.values, layer.U.values, layer.b.values, p, states[i])
            p = states[i]
    for a, b in zip(finals, states):
        np.testing.assert_allclose(a.values, b, atol=1e-13)


def test_inference_path_agrees_with_graph_path(rng):
    stack_ = GruStack.init(3, [5, 5], rng)
    windows = rng.standard_normal((4, 8, 3))  # (B, T, N)
    finals_inf = infer_encode(stack_, windows)
    finals, _ = encode(stack_, np.transpose(windows, (1, 2, 0)))
    for a, b in zip(finals_inf, finals):
        np.testing.assert_allclose(a, b.values.T, atol=1e-13)


@settings(max_examples=10, deadline=None)
@given(batch=st.integers(1, 40), seed=st.integers(0, 1000))
def test_inference_rows_do_not_depend_on_batch(batch, seed):
    rng = np.random.default_rng(seed)
    stack_ = GruStack.init(3, [6, 6], rng)
    windows = rng.standard_normal((batch, 5, 3))
    together = infer_encode(stack_, windows)[-1]
    alone = infer_encode(stack_, windows[:1])[-1]
    np.testing.assert_array_equal(together[0], alone[0])


def test_infer_cell_zero_weights(rng):
    h = rng.standard_normal((3, 4))
    out = infer_cell(np.zeros((12, 2)), np.zeros((12, 4)), np.zeros(12), rng.standard_normal((3, 2)), h)
    np.testing.assert_array_equal(out, 0.5 * h)


def test_gate_views_round_trip(rng):
    layer = GruLayerParams.init(3, 4, rng)
    blocks = {k: v.copy() for k, v in layer.gates().items()}
    assert set(blocks) == {f"{m}_{g}" for m in "WUb" for g in "zrn"}
    rebuilt = GruLayerParams.from_gates(**blocks)
    np.testing.assert_array_equal(rebuilt.W.values, layer.W.values)
    np.testing.assert_array_equal(rebuilt.U.values, layer.U.values)
    np.testing.assert_array_equal(rebuilt.b.values, layer.b.values)


def test_shape_errors(rng):
    layer = GruLayerParams.init(3, 4, rng)
    with pytest.raises(DimensionError):
        gru_cell(layer, ad.Tensor(np.zeros(2)), ad.Tensor(np.zeros(4)))
    with pytest.raises(DimensionError):
        GruLayerParams(ad.Tensor(np.zeros((12, 3))), ad.Tensor(np.zeros((12, 5))), ad.Tensor(np.zeros(12)))
    with pytest.raises(DimensionError):
        GruStack([GruLayerParams.init(3, 4, rng), GruLayerParams.init(5, 4, rng)])
    stack_ = GruStack.init(3, [4], rng)
    with pytest.raises(DimensionError):
        encode(stack_, np.zeros((5, 2)))
    with pytest.raises(ContractError):
        encode(stack_, np.zeros((0, 3)))
