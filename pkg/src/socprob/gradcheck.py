"""Finite-difference verification of the stack's backward pass."""
from __future__ import annotations

import numpy as np

from .convlstm import forward_sequence, init_stack, stack_backward
from .tensor_core import finite_diff_grad, relative_error

TINY = dict(channels=(2,), height=6, width=6, steps=3)


def random_stack(channels, height, width, seed=0, scale=0.5):
    """Float64 stack with every tensor (peepholes included) drawn from N(0, scale^2)."""
    rng = np.random.default_rng(seed)
    p = init_stack(channels, height, width, seed=seed, dtype=np.float64)
    return p.with_tensors({k: rng.normal(0.0, scale, v.shape) for k, v in p.named().items()})


def run_gradcheck(channels=TINY["channels"], height=TINY["height"], width=TINY["width"],
                  steps=TINY["steps"], seed=0, h=1e-4, floor=1e-7) -> dict:
    """Max relative error per parameter tensor between backprop and central differences.

    Loss is the summed squared error of the predicted maps against random
    targets, so every output step carries gradient.
    """
    rng = np.random.default_rng([seed, 1])
    params = random_stack(channels, height, width, seed)
    xs = rng.random((steps, 1, 1, height, width))
    targets = rng.random((steps, 1, 1, height, width))

    def loss(p):
        ys, _, _ = forward_sequence(xs, p)
        return float(np.sum((ys - targets) ** 2))

    ys, _, tape = forward_sequence(xs, params, keep_tape=True)
    grads = stack_backward(tape, 2.0 * (ys - targets), params)
    errors = {}
    for name, value in params.named().items():
        numeric = finite_diff_grad(lambda a: loss(params.with_tensors({name: a})), value, h)
        errors[name] = relative_error(grads[name], numeric, floor)
    return errors
