import numpy as np
import pytest

from dasl.autodiff import DimensionError, Tape, Tensor, check_gradients, mul, tsum
from dasl.seq import GruCell, encode_batch, encode_sequence, gru_step, unrolled_encode_batch


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def straight_line_step(cell, x, h):
    """The three gate equations written out directly on numpy arrays."""
    W = {k: getattr(cell, k).data for k in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")}
    z = sig(W["W_z"] @ x + W["U_z"] @ h + W["b_z"])
    r = sig(W["W_r"] @ x + W["U_r"] @ h + W["b_r"])
    cand = np.tanh(W["W_h"] @ x + W["U_h"] @ (r * h) + W["b_h"])
    return (1 - z) * h + z * cand


def random_cell(rng, d_in=3, d_h=4):
    cell = GruCell(d_in, d_h, rng)
    for b in (cell.b_z, cell.b_r, cell.b_h):
        b.data[...] = 0.5 * rng.standard_normal(d_h)
    return cell


def test_zero_weights_halve_the_state():
    cell = GruCell(3, 4)
    h0 = np.array([0.8, -0.4, 1.0, -1.0])
    state = gru_step(cell, np.ones(3), h0)
    np.testing.assert_array_equal(state.h.data[0], h0 / 2)
    for t_len in (1, 5, 10):
        out = encode_sequence(cell, [np.ones(3)] * t_len, h0).h.data[0]
        np.testing.assert_array_equal(out, h0 / 2 ** t_len)


def test_saturated_update_gate_keeps_state():
    cell = GruCell(2, 3)
    cell.b_z.data[...] = -1e9
    out = gru_step(cell, np.array([5.0, -3.0]), np.zeros(3)).h.data
    np.testing.assert_array_equal(out, 0.0)


def test_step_matches_straight_line(rng):
    cell = random_cell(rng)
    x, h = rng.standard_normal(3), rng.uniform(-1, 1, 4)
    np.testing.assert_allclose(gru_step(cell, x, h).h.data[0], straight_line_step(cell, x, h),
                               rtol=0, atol=1e-14)


def test_length_one_is_single_step(rng):
    cell = random_cell(rng)
    x = rng.standard_normal(3)
    np.testing.assert_array_equal(encode_sequence(cell, [x]).h.data, gru_step(cell, x, np.zeros(4)).h.data)


def test_length_five_matches_manual_unroll(rng):
    cell = random_cell(rng)
    xs = [rng.standard_normal(3) for _ in range(5)]
    h = np.zeros(4)
    for x in xs:
        h = straight_line_step(cell, x, h)
    state = encode_sequence(cell, xs)
    assert state.t == 5 and not state.cold
    np.testing.assert_allclose(state.h.data[0], h, rtol=0, atol=1e-12)


def test_empty_sequence_is_cold(rng):
    cell = random_cell(rng)
    h0 = rng.uniform(-1, 1, 4)
    state = encode_sequence(cell, [], h0)
    assert state.cold
    np.testing.assert_array_equal(state.h.data[0], h0)


def test_boundedness(rng):
    for _ in range(1000):
        cell = random_cell(rng)
        h = rng.uniform(-1, 1, 4)
        for x in rng.standard_normal((4, 3)):
            h = gru_step(cell, x, h).h.data[0]
            assert np.all(np.abs(h) < 1)


def test_saturated_inputs_stay_in_closed_interval(rng):
    # tanh rounds to exactly 1.0 in float64 once its argument passes ~19
    cell = GruCell(3, 4, rng)
    cell.b_h.data[...] = 50.0
    h = rng.uniform(-1, 1, 4)
    for x in rng.standard_normal((20, 3)) * 100:
        h = gru_step(cell, x, h).h.data[0]
        assert np.all(np.abs(h) <= 1)


def test_order_sensitivity(rng):
    changed = 0
    for _ in range(10):
        cell = random_cell(rng)
        xs = list(rng.standard_normal((6, 3)))
        fwd = encode_sequence(cell, xs).h.data
        rev = encode_sequence(cell, xs[::-1]).h.data
        changed += np.linalg.norm(fwd - rev) > 1e-9
    assert changed >= 9


def test_all_nine_gradients_and_inputs(rng):
    cell = random_cell(rng)
    xs = [Tensor(rng.standard_normal(3)) for _ in range(10)]
    w = Tensor(rng.standard_normal((1, 4)))
    res = check_gradients(lambda: tsum(mul(encode_sequence(cell, xs).h, w)), cell.parameters() + xs)
    assert res.ok, res


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        gru_step(GruCell(3, 4), np.zeros(2), np.zeros(4))
    with pytest.raises(DimensionError):
        encode_batch(GruCell(3, 4), Tensor(np.zeros((2, 5, 2))), np.ones((2, 5), bool))


class TestFusedBatch:
    def setup_batch(self, rng, lengths=(0, 1, 4, 7, 3), t_len=7):
        cell = random_cell(rng)
        x = Tensor(rng.standard_normal((len(lengths), t_len, 3)))
        mask = np.zeros((len(lengths), t_len), dtype=bool)
        for i, n in enumerate(lengths):
            mask[i, t_len - n:] = True
        return cell, x, mask

    def test_rows_match_per_user_sequences(self, rng):
        cell, x, mask = self.setup_batch(rng)
        out = encode_batch(cell, x, mask).data
        for i in range(x.shape[0]):
            seq = [x.data[i, t] for t in np.flatnonzero(mask[i])]
            np.testing.assert_allclose(out[i], encode_sequence(cell, seq).h.data[0], atol=1e-13)

    def test_matches_unrolled_reference(self, rng):
        cell, x, mask = self.setup_batch(rng)
        h0 = Tensor(rng.uniform(-1, 1, (5, 4)))
        w = Tensor(rng.standard_normal((5, 4)))
        params = cell.parameters() + [x, h0]
        grads = []
        for fn in (encode_batch, unrolled_encode_batch):
            for p in params:
                p.requires_grad, p.grad = True, None
            with Tape() as tape:
                loss = tsum(mul(fn(cell, x, mask, h0), w))
            tape.backward(loss)
            grads.append([p.grad.copy() for p in params])
        for a, b in zip(*grads):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_gradients_match_finite_differences(self, rng):
        cell, x, mask = self.setup_batch(rng, (10, 2, 0), 10)
        w = Tensor(rng.standard_normal((3, 4)))
        res = check_gradients(lambda: tsum(mul(encode_batch(cell, x, mask), w)), cell.parameters() + [x])
        assert res.ok, res

    def test_all_padding_returns_initial_state(self, rng):
        cell, x, _ = self.setup_batch(rng)
        out = encode_batch(cell, x, np.zeros((5, 7), bool))
        np.testing.assert_array_equal(out.data, 0.0)
