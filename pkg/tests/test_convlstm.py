import numpy as np
import pytest

from reference import convlstm_reference
from socprob.convlstm import (ConvLSTMState, cell_forward, forward_sequence, init_stack, stack_backward,
                              stack_forward, zero_states)
from socprob.errors import DimensionError, SocprobError
from socprob.gradcheck import random_stack, run_gradcheck
from socprob.prob_map import GridSpec, ProbMap


def test_cell_matches_reference(rng):
    p = random_stack((3,), 5, 6, seed=1).layers[0]
    x = rng.random((1, 5, 6))
    s = ConvLSTMState(rng.normal(size=(3, 5, 6)), rng.normal(size=(3, 5, 6)))
    out = cell_forward(x, s, p)
    h_ref, c_ref = convlstm_reference(x, s.h, s.c, p)
    np.testing.assert_allclose(out.h, h_ref, atol=1e-12)
    np.testing.assert_allclose(out.c, c_ref, atol=1e-12)


def test_batched_cell_equals_single(rng):
    p = random_stack((2,), 4, 4, seed=2).layers[0]
    x = rng.random((3, 1, 4, 4))
    s = ConvLSTMState(rng.normal(size=(3, 2, 4, 4)), rng.normal(size=(3, 2, 4, 4)))
    out = cell_forward(x, s, p)
    for n in range(3):
        one = cell_forward(x[n], ConvLSTMState(s.h[n], s.c[n]), p)
        np.testing.assert_allclose(out.h[n], one.h, atol=1e-14)


def test_zero_weights_give_known_state():
    params = init_stack((2,), 4, 4, dtype=np.float64)
    p = params.with_tensors({k: np.zeros_like(v) for k, v in params.named().items()}).layers[0]
    s = cell_forward(np.ones((1, 4, 4)), ConvLSTMState(np.zeros((2, 4, 4)), np.ones((2, 4, 4))), p)
    # i = f = o = 0.5, g = 0, so c' = 0.5 c and h' = 0.5 tanh(0.5)
    np.testing.assert_allclose(s.c, 0.5)
    np.testing.assert_allclose(s.h, 0.5 * np.tanh(0.5))


def test_shape_errors(rng):
    p = init_stack((2,), 4, 4).layers[0]
    with pytest.raises(DimensionError):
        cell_forward(np.zeros((2, 4, 4)), ConvLSTMState(np.zeros((2, 4, 4)), np.zeros((2, 4, 4))), p)
    with pytest.raises(DimensionError):
        cell_forward(np.zeros((1, 5, 5)), ConvLSTMState(np.zeros((2, 5, 5)), np.zeros((2, 5, 5))), p)


def test_init_layout():
    params = init_stack((4, 3), 6, 5, seed=0)
    assert params.channels == [4, 3]
    assert tuple(params.spatial) == (6, 5)
    names = list(params.named())
    assert names[0] == "layer0.w_xi" and names[-2:] == ["head.w", "head.b"]
    assert params.layers[0].w_xi.shape == (4, 1, 3, 3)
    assert params.layers[1].w_hf.shape == (3, 3, 3, 3)
    assert params.layers[1].w_co.shape == (3, 6, 5)
    np.testing.assert_array_equal(params.layers[0].b_f, 1.0)
    a = init_stack((4, 3), 6, 5, seed=0)
    assert all(np.array_equal(a.named()[k], v) for k, v in params.named().items())


def test_outputs_are_probabilities(rng):
    params = init_stack((3, 2), 8, 8, seed=0, dtype=np.float64)
    ys, states, _ = forward_sequence(rng.random((4, 2, 1, 8, 8)), params)
    assert ys.shape == (4, 2, 1, 8, 8)
    assert np.all((ys > 0) & (ys < 1))
    assert [s.h.shape[1] for s in states] == [3, 2]


def test_stack_forward_on_probmaps(rng):
    spec = GridSpec(6, 6, (0, 0), 1.0)
    params = init_stack((2,), 6, 6, dtype=np.float64)
    maps = [ProbMap(rng.random((1, 6, 6)), spec) for _ in range(3)]
    outs, _ = stack_forward(maps, params)
    assert len(outs) == 3 and outs[0].spec == spec


def test_continuing_from_states_equals_one_pass(rng):
    params = random_stack((2, 2), 5, 5, seed=4)
    xs = rng.random((6, 1, 1, 5, 5))
    full, _, _ = forward_sequence(xs, params)
    first, st, _ = forward_sequence(xs[:3], params)
    second, _, _ = forward_sequence(xs[3:], params, st)
    np.testing.assert_allclose(np.concatenate([first, second]), full, atol=1e-14)


def test_backward_two_layers(rng):
    errors = run_gradcheck(channels=(2, 2), height=5, width=5, steps=3, seed=3)
    assert max(errors.values()) < 1e-4, errors


def test_backward_rejects_mismatched_gradients(rng):
    params = init_stack((2,), 4, 4, dtype=np.float64)
    ys, _, tape = forward_sequence(rng.random((2, 1, 1, 4, 4)), params, keep_tape=True)
    with pytest.raises(SocprobError):
        stack_backward(tape, np.zeros((3,) + ys.shape[1:]), params)


def test_zero_states_shapes():
    params = init_stack((3, 2), 4, 5)
    st = zero_states(params, 2)
    assert st[0].h.shape == (2, 3, 4, 5) and st[1].c.shape == (2, 2, 4, 5)
