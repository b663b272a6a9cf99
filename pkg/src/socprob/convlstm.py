"""Peephole ConvLSTM stack with a hand-derived backward pass.

Gates (``*`` is convolution, ``o`` the Hadamard product)::

    i  = sigmoid(W_xi * x + W_hi * h + W_ci o c + b_i)
    f  = sigmoid(W_xf * x + W_hf * h + W_cf o c + b_f)
    c' = f o c + i o tanh(W_xc * x + W_hc * h + b_c)
    o  = sigmoid(W_xo * x + W_ho * h + W_co o c' + b_o)
    h' = o o tanh(c')

The eight convolutions of one cell run as a single convolution over the
channel-concatenated ``[x, h]`` with the kernels stacked in i, f, c, o
order. A 1x1 convolution plus sigmoid turns the top layer's hidden state
into a one-channel probability map. All tensors carry a leading batch axis
``N``; unbatched ``C x H x W`` input is accepted by the cell.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import DimensionError, SocprobError
from .tensor_core import conv2d, conv2d_backward, hadamard, sigmoid, tanh

DEFAULT_CHANNELS = (128, 64, 64, 32, 32)
KERNEL_SIZE = 3

GATES = ("i", "f", "c", "o")
KERNEL_FIELDS = ("w_xi", "w_hi", "w_xf", "w_hf", "w_xc", "w_hc", "w_xo", "w_ho")
PEEPHOLE_FIELDS = ("w_ci", "w_cf", "w_co")
BIAS_FIELDS = ("b_i", "b_f", "b_c", "b_o")


@dataclass
class ConvLSTMCellParams:
    w_xi: np.ndarray
    w_hi: np.ndarray
    w_xf: np.ndarray
    w_hf: np.ndarray
    w_xc: np.ndarray
    w_hc: np.ndarray
    w_xo: np.ndarray
    w_ho: np.ndarray
    w_ci: np.ndarray
    w_cf: np.ndarray
    w_co: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray

    @property
    def hidden(self) -> int:
        return self.w_xi.shape[0]

    @property
    def in_channels(self) -> int:
        return self.w_xi.shape[1]

    @property
    def kernel(self) -> int:
        return self.w_xi.shape[2]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.w_ci.shape[1:]

    def named(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """Combined ``4C x (Cin + C) x K x K`` kernel and ``4C`` bias."""
        wx = np.concatenate([self.w_xi, self.w_xf, self.w_xc, self.w_xo])
        wh = np.concatenate([self.w_hi, self.w_hf, self.w_hc, self.w_ho])
        return (np.concatenate([wx, wh], axis=1),
                np.concatenate([self.b_i, self.b_f, self.b_c, self.b_o]))


@dataclass
class ConvLSTMState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, batch: int, channels: int, height: int, width: int, dtype=np.float64):
        shape = (batch, channels, height, width)
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))

    def take(self, index) -> "ConvLSTMState":
        return ConvLSTMState(self.h[index], self.c[index])


@dataclass
class StackParams:
    layers: list
    head_w: np.ndarray  # 1 x C_top x 1 x 1
    head_b: np.ndarray  # (1,)

    @property
    def channels(self) -> list[int]:
        return [p.hidden for p in self.layers]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.layers[0].spatial

    @property
    def dtype(self):
        return self.head_w.dtype

    def named(self) -> dict:
        """Every parameter tensor in declared order, keyed ``layer<l>.<field>`` / ``head.w`` / ``head.b``."""
        out = {}
        for li, p in enumerate(self.layers):
            for k, v in p.named().items():
                out[f"layer{li}.{k}"] = v
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def with_tensors(self, tensors: dict) -> "StackParams":
        """Copy of this structure with tensors replaced by name (missing names keep their value)."""
        layers = []
        for li, p in enumerate(self.layers):
            upd = {k: tensors[f"layer{li}.{k}"] for k in p.named() if f"layer{li}.{k}" in tensors}
            layers.append(replace(p, **upd))
        return StackParams(layers, tensors.get("head.w", self.head_w), tensors.get("head.b", self.head_b))

    def astype(self, dtype) -> "StackParams":
        return self.with_tensors({k: v.astype(dtype) for k, v in self.named().items()})


def init_cell(in_channels: int, hidden: int, height: int, width: int, rng: np.random.Generator,
              kernel: int = KERNEL_SIZE, dtype=np.float32, peephole_scale: float = 0.0,
              forget_bias: float = 1.0) -> ConvLSTMCellParams:
    if kernel % 2 != 1:
        raise DimensionError("kernel size must be odd")
    kx = 1.0 / np.sqrt(in_channels * kernel * kernel)
    kh = 1.0 / np.sqrt(hidden * kernel * kernel)
    t = {}
    for g in GATES:
        t[f"w_x{g}"] = rng.uniform(-kx, kx, (hidden, in_channels, kernel, kernel))
        t[f"w_h{g}"] = rng.uniform(-kh, kh, (hidden, hidden, kernel, kernel))
    for name in PEEPHOLE_FIELDS:
        t[name] = rng.uniform(-peephole_scale, peephole_scale, (hidden, height, width)) \
            if peephole_scale else np.zeros((hidden, height, width))
    for g in GATES:
        t[f"b_{g}"] = np.full(hidden, forget_bias if g == "f" else 0.0)
    return ConvLSTMCellParams(**{k: np.asarray(v, dtype=dtype) for k, v in t.items()})


def init_stack(channels=DEFAULT_CHANNELS, height: int = 100, width: int = 100, seed: int = 0,
               in_channels: int = 1, kernel: int = KERNEL_SIZE, dtype=np.float32,
               head_bias: float = 0.0) -> StackParams:
    rng = np.random.default_rng(seed)
    layers = []
    cin = in_channels
    for ch in channels:
        layers.append(init_cell(cin, ch, height, width, rng, kernel, dtype))
        cin = ch
    bound = 1.0 / np.sqrt(cin)
    head_w = rng.uniform(-bound, bound, (1, cin, 1, 1)).astype(dtype)
    head_b = np.full(1, head_bias, dtype=dtype)
    return StackParams(layers, head_w, head_b)


def _check_cell_shapes(x: np.ndarray, state: ConvLSTMState, p: ConvLSTMCellParams):
    if x.ndim != 4 or state.h.ndim != 4:
        raise DimensionError("cell tensors must be N x C x H x W")
    if x.shape[1] != p.in_channels:
        raise DimensionError(f"input has {x.shape[1]} channels, cell expects {p.in_channels}")
    if x.shape[2:] != state.h.shape[2:] or state.h.shape[2:] != tuple(p.spatial):
        raise DimensionError(
            f"spatial mismatch: input {x.shape[2:]}, state {state.h.shape[2:]}, peepholes {tuple(p.spatial)}")
    if state.h.shape != state.c.shape or state.h.shape[1] != p.hidden:
        raise DimensionError("state shape does not match the cell's hidden channels")


def _cell_forward(x, state: ConvLSTMState, p: ConvLSTMCellParams):
    _check_cell_shapes(x, state, p)
    ch = p.hidden
    w, b = p.stacked()
    xh = np.concatenate([x, state.h], axis=1)
    z = conv2d(xh, w, b, pad=(p.kernel - 1) // 2)
    zi, zf, zc, zo = z[:, :ch], z[:, ch:2 * ch], z[:, 2 * ch:3 * ch], z[:, 3 * ch:]
    c_prev = state.c
    i = sigmoid(zi + p.w_ci * c_prev)
    f = sigmoid(zf + p.w_cf * c_prev)
    g = tanh(zc)
    c_new = hadamard(f, c_prev) + hadamard(i, g)
    o = sigmoid(zo + p.w_co * c_new)
    tc = tanh(c_new)
    h_new = hadamard(o, tc)
    cache = (xh, c_prev, i, f, g, o, c_new, tc)
    return ConvLSTMState(h_new, c_new), cache


def cell_forward(x: np.ndarray, state: ConvLSTMState, p: ConvLSTMCellParams) -> ConvLSTMState:
    """One ConvLSTM step. Accepts batched (N x C x H x W) or single (C x H x W) tensors."""
    if x.ndim == 3:
        new, _ = _cell_forward(x[None], ConvLSTMState(state.h[None], state.c[None]), p)
        return ConvLSTMState(new.h[0], new.c[0])
    return _cell_forward(x, state, p)[0]


def _cell_backward(dh, dc, cache, p: ConvLSTMCellParams, grads: dict):
    """Backprop one cell step; accumulates into ``grads`` (keyed by field) and
    returns (dx, dh_prev, dc_prev)."""
    xh, c_prev, i, f, g, o, c_new, tc = cache
    ch = p.hidden
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    dzo = do * o * (1.0 - o)
    dc = dc + dzo * p.w_co
    grads["w_co"] += np.sum(dzo * c_new, axis=0)

    di = dc * g
    dg = dc * i
    df = dc * c_prev
    dc_prev = dc * f
    dzi = di * i * (1.0 - i)
    dzf = df * f * (1.0 - f)
    dzc = dg * (1.0 - g * g)
    grads["w_ci"] += np.sum(dzi * c_prev, axis=0)
    grads["w_cf"] += np.sum(dzf * c_prev, axis=0)
    dc_prev = dc_prev + dzi * p.w_ci + dzf * p.w_cf

    dz = np.concatenate([dzi, dzf, dzc, dzo], axis=1)
    w, _ = p.stacked()
    dxh, dw, db = conv2d_backward(dz, xh, w, pad=(p.kernel - 1) // 2)
    cin = p.in_channels
    for gi, gate in enumerate(GATES):
        rows = slice(gi * ch, (gi + 1) * ch)
        grads[f"w_x{gate}"] += dw[rows, :cin]
        grads[f"w_h{gate}"] += dw[rows, cin:]
        grads[f"b_{gate}"] += db[rows]
    return dxh[:, :cin], dxh[:, cin:], dc_prev


def zero_states(params: StackParams, batch: int) -> list[ConvLSTMState]:
    h, w = params.spatial
    return [ConvLSTMState.zeros(batch, ch, h, w, params.dtype) for ch in params.channels]


def _head(h_top, params: StackParams):
    return sigmoid(conv2d(h_top, params.head_w, params.head_b, pad=0))


def stack_step(x: np.ndarray, params: StackParams, states: list[ConvLSTMState], tape: list | None = None):
    """Advance every layer one step on input ``x`` (N x 1 x H x W).

    Returns the predicted map (N x 1 x H x W) and the new per-layer states.
    When ``tape`` is a list, the intermediates needed by backprop are appended.
    """
    inp = x
    new_states = []
    caches = []
    for p, s in zip(params.layers, states):
        s2, cache = _cell_forward(inp, s, p)
        new_states.append(s2)
        caches.append(cache)
        inp = s2.h
    y = _head(inp, params)
    if tape is not None:
        tape.append((caches, inp, y))
    return y, new_states


def forward_sequence(xs: np.ndarray, params: StackParams, states: list[ConvLSTMState] | None = None,
                     keep_tape: bool = False):
    """Run the stack over ``xs`` of shape T x N x 1 x H x W.

    Returns ``(ys, final_states, tape)``; ``tape`` is None unless requested.
    """
    xs = np.asarray(xs)
    if xs.ndim != 5 or xs.shape[0] == 0:
        raise ValueError("expected a non-empty T x N x 1 x H x W input sequence")
    if states is None:
        states = zero_states(params, xs.shape[1])
    tape = [] if keep_tape else None
    ys = []
    for x in xs:
        y, states = stack_step(x, params, states, tape)
        ys.append(y)
    return np.stack(ys), states, tape


def stack_forward(inputs, params: StackParams, states=None):
    """Predicted :class:`ProbMap` per input map plus the final states (single sequence)."""
    from .prob_map import ProbMap

    inputs = list(inputs)
    if not inputs:
        raise ValueError("empty input sequence")
    spec = inputs[0].spec
    if any(m.spec != spec for m in inputs):
        raise DimensionError("all input maps must share one GridSpec")
    xs = np.stack([m.grid for m in inputs])[:, None].astype(params.dtype, copy=False)
    ys, states, _ = forward_sequence(xs, params, states)
    return [ProbMap(y[0], spec) for y in ys], states


def stack_backward(tape: list, dys: np.ndarray, params: StackParams) -> dict:
    """Backprop through time. ``dys`` is dLoss/dy, shaped like the forward outputs."""
    if len(tape) != len(dys):
        raise SocprobError(f"tape has {len(tape)} steps but {len(dys)} output gradients were given")
    layer_grads = [{k: np.zeros_like(v) for k, v in p.named().items()} for p in params.layers]
    g_head_w = np.zeros_like(params.head_w)
    g_head_b = np.zeros_like(params.head_b)
    n_layers = len(params.layers)
    dh_next = [None] * n_layers
    dc_next = [None] * n_layers
    for t in range(len(tape) - 1, -1, -1):
        caches, h_top, y = tape[t]
        dy = dys[t]
        if dy.shape != y.shape:
            raise SocprobError(f"step {t}: gradient shape {dy.shape} != output shape {y.shape}")
        dz = dy * y * (1.0 - y)
        d_top, dwh, dbh = conv2d_backward(dz, h_top, params.head_w, pad=0)
        g_head_w += dwh
        g_head_b += dbh
        d_from_above = d_top
        for li in range(n_layers - 1, -1, -1):
            dh = d_from_above if dh_next[li] is None else d_from_above + dh_next[li]
            dc = np.zeros_like(dh) if dc_next[li] is None else dc_next[li]
            dx, dh_prev, dc_prev = _cell_backward(dh, dc, caches[li], params.layers[li], layer_grads[li])
            dh_next[li], dc_next[li] = dh_prev, dc_prev
            d_from_above = dx
    out = {}
    for li, g in enumerate(layer_grads):
        for k, v in g.items():
            out[f"layer{li}.{k}"] = v
    out["head.w"] = g_head_w
    out["head.b"] = g_head_b
    return out
