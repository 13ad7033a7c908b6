"""Minimal reverse-mode differentiable tensor core.

Tensors hold float64 arrays; trainable parameters are quantized to float32
precision at creation and after each optimizer step, so the float32
checkpoint format round-trips bit-exactly. Operations record parent links on
their outputs; ``backward`` walks that graph once in reverse topological
order and accumulates gradients (in float64) into leaf tensors.

A graph and its tensors belong to one training thread; frozen parameter sets
may be shared read-only across threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DivergenceError, FormatError, ShapeError


def store_f32(values: np.ndarray) -> np.ndarray:
    """Round to float32 precision while keeping float64 compute dtype."""
    return np.asarray(values, dtype=np.float64).astype(np.float32).astype(np.float64)


class Tensor:
    """N-dimensional array with optional gradient tracking."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, values, requires_grad: bool = False, _parents=(), _backward_fn=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def tracked(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(values) -> Tensor:
    """Trainable leaf tensor, stored at float32 precision."""
    return Tensor(store_f32(values), requires_grad=True)


def constant(values) -> Tensor:
    return values if isinstance(values, Tensor) else Tensor(values)


def _make(values: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    if any(p.tracked() for p in parents):
        return Tensor(values, _parents=parents, _backward_fn=backward_fn)
    return Tensor(values)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    out = a.values + b.values

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    out = a.values - b.values

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    out = a.values * b.values

    def backward_fn(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _make(out, (a, b), backward_fn)


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes do not conform: {a.shape} @ {b.shape}")
    out = a.values @ b.values

    def backward_fn(g):
        return g @ b.values.T, a.values.T @ g

    return _make(out, (a, b), backward_fn)


def dense(x, weight, bias=None) -> Tensor:
    """Affine map [B, in] @ [in, out] (+ [out])."""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


def relu(x) -> Tensor:
    x = constant(x)
    out = np.maximum(x.values, 0.0)

    def backward_fn(g):
        return (g * (x.values > 0.0),)

    return _make(out, (x,), backward_fn)


def elu(x, alpha: float = 1.0) -> Tensor:
    x = constant(x)
    neg = alpha * np.expm1(np.minimum(x.values, 0.0))
    out = np.where(x.values > 0.0, x.values, neg)

    def backward_fn(g):
        return (g * np.where(x.values > 0.0, 1.0, neg + alpha),)

    return _make(out, (x,), backward_fn)


def tanh(x) -> Tensor:
    x = constant(x)
    out = np.tanh(x.values)

    def backward_fn(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), backward_fn)


def sigmoid(x) -> Tensor:
    x = constant(x)
    v = x.values
    out = np.where(v >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))

    def backward_fn(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward_fn)


def softmax(x, axis: int = -1) -> Tensor:
    x = constant(x)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _make(out, (x,), backward_fn)


def tensor_sum(x) -> Tensor:
    x = constant(x)

    def backward_fn(g):
        return (np.full_like(x.values, float(g)),)

    return _make(np.asarray(x.values.sum()), (x,), backward_fn)


def tensor_mean(x) -> Tensor:
    x = constant(x)
    n = x.size

    def backward_fn(g):
        return (np.full_like(x.values, float(g) / n),)

    return _make(np.asarray(x.values.mean()), (x,), backward_fn)


def reshape(x, shape) -> Tensor:
    x = constant(x)
    out = x.values.reshape(shape)

    def backward_fn(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(constant(t) for t in tensors)
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis if axis >= 0 else t.ndim + axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, backward_fn)


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = constant(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = x.values[index]

    def backward_fn(g):
        dx = np.zeros_like(x.values)
        dx[index] = g
        return (dx,)

    return _make(out, (x,), backward_fn)


def split_cols(x, parts: int) -> list[Tensor]:
    """Split the last axis into equal parts (gate unpacking)."""
    x = constant(x)
    width = x.shape[-1]
    if width % parts:
        raise ShapeError(f"cannot split width {width} into {parts} equal parts")
    step = width // parts
    return [slice_axis(x, -1, i * step, (i + 1) * step) for i in range(parts)]


def time_slice(x, t: int) -> Tensor:
    """[B, T, d] -> [B, d] at step t."""
    x = constant(x)
    out = x.values[:, t, :]

    def backward_fn(g):
        dx = np.zeros_like(x.values)
        dx[:, t, :] = g
        return (dx,)

    return _make(out, (x,), backward_fn)


def stack_time(steps: Sequence[Tensor]) -> Tensor:
    """List of [B, d] -> [B, T, d]."""
    steps = tuple(constant(s) for s in steps)
    out = np.stack([s.values for s in steps], axis=1)

    def backward_fn(g):
        return tuple(g[:, t, :] for t in range(len(steps)))

    return _make(out, steps, backward_fn)


def dropout(x, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity at evaluation time or rate 0."""
    x = constant(x)
    if not training or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep

    def backward_fn(g):
        return (g * mask,)

    return _make(x.values * mask, (x,), backward_fn)


def masked_fill(x, mask: np.ndarray, value: float) -> Tensor:
    """Keep entries where ``mask`` is true, substitute ``value`` elsewhere."""
    x = constant(x)
    out = np.where(mask, x.values, value)

    def backward_fn(g):
        return (g * mask,)

    return _make(out, (x,), backward_fn)


def gather_mean(table, unit_index_lists, n_steps: int) -> Tensor:
    """Per-token mean of table rows: [rows, d] -> [B, n_steps, d].

    ``unit_index_lists`` holds, per batch item, one integer index array per
    token. Missing trailing steps stay zero (padding).
    """
    table = constant(table)
    batch = len(unit_index_lists)
    dim = table.shape[1]
    out = np.zeros((batch, n_steps, dim))
    for b, tokens in enumerate(unit_index_lists):
        for t, idx in enumerate(tokens):
            out[b, t] = table.values[idx].mean(axis=0)

    def backward_fn(g):
        dtable = np.zeros_like(table.values)
        for b, tokens in enumerate(unit_index_lists):
            for t, idx in enumerate(tokens):
                np.add.at(dtable, idx, g[b, t] / len(idx))
        return (dtable,)

    return _make(out, (table,), backward_fn)


def gather_last(x, lengths: np.ndarray) -> Tensor:
    """[B, T, h] -> [B, h], selecting step lengths[b] - 1 per row."""
    x = constant(x)
    rows = np.arange(x.shape[0])
    steps = np.asarray(lengths) - 1
    out = x.values[rows, steps, :]

    def backward_fn(g):
        dx = np.zeros_like(x.values)
        dx[rows, steps, :] = g
        return (dx,)

    return _make(out, (x,), backward_fn)


def tdot_vec(m, w) -> Tensor:
    """[B, T, h] . [h] -> [B, T]."""
    m, w = constant(m), constant(w)
    if m.shape[-1] != w.shape[0]:
        raise ShapeError(f"tdot_vec shapes do not conform: {m.shape} . {w.shape}")
    out = m.values @ w.values

    def backward_fn(g):
        dm = g[..., None] * w.values
        dw = np.einsum("bt,bth->h", g, m.values)
        return dm, dw

    return _make(out, (m, w), backward_fn)


def weight_time(h, weights) -> Tensor:
    """Sum_t weights[b, t] * h[b, t, :] -> [B, h]."""
    h, weights = constant(h), constant(weights)
    out = np.einsum("bth,bt->bh", h.values, weights.values)

    def backward_fn(g):
        dh = weights.values[..., None] * g[:, None, :]
        dw = np.einsum("bh,bth->bt", g, h.values)
        return dh, dw

    return _make(out, (h, weights), backward_fn)


# ---------------------------------------------------------------------------
# convolution, pooling, normalization
# ---------------------------------------------------------------------------


def conv2d(x, weight, bias=None) -> Tensor:
    """Same-padded 2-D convolution: [B,C,F,T] * [C',C,kh,kw] -> [B,C',F,T]."""
    x, weight = constant(x), constant(weight)
    bias = constant(bias) if bias is not None else None
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d shapes do not conform: {x.shape} * {weight.shape}")
    batch, chans, height, width = x.shape
    out_c, _, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"same padding needs odd kernel extents, got {kh}x{kw}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.values, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    patches = np.empty((batch, chans, kh, kw, height, width))
    for i in range(kh):
        for j in range(kw):
            patches[:, :, i, j] = xp[:, :, i : i + height, j : j + width]
    cols = patches.reshape(batch, chans * kh * kw, height * width)
    w_flat = weight.values.reshape(out_c, chans * kh * kw)
    out = np.matmul(w_flat, cols).reshape(batch, out_c, height, width)
    if bias is not None:
        out = out + bias.values[None, :, None, None]

    def backward_fn(g):
        g_flat = g.reshape(batch, out_c, height * width)
        dw = np.matmul(g_flat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        dcols = np.matmul(w_flat.T, g_flat).reshape(batch, chans, kh, kw, height, width)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + height, j : j + width] += dcols[:, :, i, j]
        dx = dxp[:, :, ph : ph + height, pw : pw + width]
        if bias is not None:
            return dx, dw, g.sum(axis=(0, 2, 3))
        return dx, dw

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward_fn)


def maxpool2d(x, pool: tuple[int, int]) -> Tensor:
    """Non-overlapping max pooling with floor truncation of ragged edges.

    Pool extents larger than the input are clamped, so an aggressive pool
    schedule still works on short inputs.
    """
    x = constant(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects [B,C,F,T], got {x.shape}")
    batch, chans, height, width = x.shape
    py, px = min(pool[0], height), min(pool[1], width)
    out_h, out_w = height // py, width // px
    if out_h == 0 or out_w == 0:
        raise ShapeError(f"pool {pool} collapses input {x.shape} to zero extent")
    crop = x.values[:, :, : out_h * py, : out_w * px]
    tiles = crop.reshape(batch, chans, out_h, py, out_w, px).transpose(0, 1, 2, 4, 3, 5)
    flat = tiles.reshape(batch, chans, out_h, out_w, py * px)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, arg[..., None], g[..., None], axis=-1)
        dcrop = (
            dflat.reshape(batch, chans, out_h, out_w, py, px)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(batch, chans, out_h * py, out_w * px)
        )
        dx = np.zeros_like(x.values)
        dx[:, :, : out_h * py, : out_w * px] = dcrop
        return (dx,)

    return _make(out, (x,), backward_fn)


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    axis: int,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize over every axis except ``axis``; learned scale and shift.

    At training time batch statistics are used and the running buffers are
    updated in place; at evaluation time the running statistics apply.
    """
    x, gamma, beta = constant(x), constant(gamma), constant(beta)
    axis = axis % x.ndim
    if gamma.shape != (x.shape[axis],) or beta.shape != (x.shape[axis],):
        raise ShapeError(
            f"batch_norm params {gamma.shape}/{beta.shape} do not match axis "
            f"extent {x.shape[axis]} of {x.shape}"
        )
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)
    bshape = [1] * x.ndim
    bshape[axis] = x.shape[axis]

    def expand(a):
        return a.reshape(bshape)

    if training:
        mean = x.values.mean(axis=reduce_axes)
        var = x.values.var(axis=reduce_axes)
        running_mean[...] = store_f32(momentum * running_mean + (1.0 - momentum) * mean)
        running_var[...] = store_f32(momentum * running_var + (1.0 - momentum) * var)
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - expand(mean)) * expand(inv_std)
    out = xhat * expand(gamma.values) + expand(beta.values)
    m = x.size // x.shape[axis]

    def backward_fn(g):
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        dxhat = g * expand(gamma.values)
        if training:
            dx = (
                dxhat
                - expand(dxhat.sum(axis=reduce_axes)) / m
                - xhat * expand((dxhat * xhat).sum(axis=reduce_axes)) / m
            ) * expand(inv_std)
        else:
            dx = dxhat * expand(inv_std)
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), backward_fn)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def cross_entropy(logits, onehot: np.ndarray, sample_weights: np.ndarray | None = None) -> Tensor:
    """Mean weighted categorical cross-entropy of softmaxed logits.

    loss = (1/N) * sum_n w_n * (-sum_c y_c^n log softmax(logits^n)_c)
    """
    logits = constant(logits)
    z = logits.values
    if np.isnan(z).any():
        raise DivergenceError("cross_entropy received NaN logits")
    y = np.asarray(onehot, dtype=np.float64)
    if z.shape != y.shape:
        raise ShapeError(f"logits {z.shape} and labels {y.shape} do not conform")
    n = z.shape[0]
    w = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    if w.shape != (n,):
        raise ShapeError(f"sample_weights {w.shape} do not match batch size {n}")
    shifted = z - z.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = float((w * -(y * log_p).sum(axis=1)).mean())
    probs = np.exp(log_p)

    def backward_fn(g):
        return (float(g) * (probs - y) * (w / n)[:, None],)

    return _make(np.asarray(loss), (logits,), backward_fn)


# ---------------------------------------------------------------------------
# recurrent cells, unrolling, attention
# ---------------------------------------------------------------------------


class LSTMCell:
    """Standard 4-gate LSTM; gate order input, forget, candidate, output."""

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator):
        self.n_in = n_in
        self.n_hidden = n_hidden
        self.w_input = parameter(glorot_uniform(rng, (n_in, 4 * n_hidden)))
        self.w_recur = parameter(orthogonal_gates(rng, n_hidden, 4))
        bias = np.zeros(4 * n_hidden)
        bias[n_hidden : 2 * n_hidden] = 1.0  # forget gate opens by default
        self.bias = parameter(bias)

    def initial_state(self, batch: int):
        zeros = np.zeros((batch, self.n_hidden))
        return Tensor(zeros), Tensor(zeros.copy())

    def step(self, x, state):
        h_prev, c_prev = state
        z = add(add(matmul(x, self.w_input), matmul(h_prev, self.w_recur)), self.bias)
        i_gate, f_gate, g_cand, o_gate = split_cols(z, 4)
        c_new = add(mul(sigmoid(f_gate), c_prev), mul(sigmoid(i_gate), tanh(g_cand)))
        h_new = mul(sigmoid(o_gate), tanh(c_new))
        return h_new, (h_new, c_new)

    def params(self) -> dict[str, Tensor]:
        return {"w_input": self.w_input, "w_recur": self.w_recur, "bias": self.bias}


class GRUCell:
    """Standard 3-gate GRU: h' = (1 - z) * h + z * n."""

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator):
        self.n_in = n_in
        self.n_hidden = n_hidden
        self.w_gates = parameter(glorot_uniform(rng, (n_in, 2 * n_hidden)))
        self.u_gates = parameter(orthogonal_gates(rng, n_hidden, 2))
        self.b_gates = parameter(np.zeros(2 * n_hidden))
        self.w_cand = parameter(glorot_uniform(rng, (n_in, n_hidden)))
        self.u_cand = parameter(orthogonal_gates(rng, n_hidden, 1))
        self.b_cand = parameter(np.zeros(n_hidden))

    def initial_state(self, batch: int):
        return Tensor(np.zeros((batch, self.n_hidden)))

    def step(self, x, state):
        h_prev = state
        gates = sigmoid(
            add(add(matmul(x, self.w_gates), matmul(h_prev, self.u_gates)), self.b_gates)
        )
        z_gate, r_gate = split_cols(gates, 2)
        cand = tanh(
            add(
                add(matmul(x, self.w_cand), matmul(mul(r_gate, h_prev), self.u_cand)),
                self.b_cand,
            )
        )
        h_new = add(mul(sub(1.0, z_gate), h_prev), mul(z_gate, cand))
        return h_new, h_new

    def params(self) -> dict[str, Tensor]:
        return {
            "w_gates": self.w_gates,
            "u_gates": self.u_gates,
            "b_gates": self.b_gates,
            "w_cand": self.w_cand,
            "u_cand": self.u_cand,
            "b_cand": self.b_cand,
        }


def lstm_step(x, state, cell: LSTMCell):
    return cell.step(x, state)


def gru_step(x, state, cell: GRUCell):
    return cell.step(x, state)


def rnn_unroll(seq, cell, backward_cell=None) -> Tensor:
    """Unroll over [B, T, d]; with a backward cell, concatenate per-step
    forward and time-reversed backward outputs to [B, T, 2h]."""
    seq = constant(seq)
    n_steps = seq.shape[1]
    batch = seq.shape[0]
    xs = [time_slice(seq, t) for t in range(n_steps)]

    def run(c, inputs):
        outputs = []
        state = c.initial_state(batch)
        for x_t in inputs:
            out, state = c.step(x_t, state)
            outputs.append(out)
        return outputs

    forward = run(cell, xs)
    if backward_cell is None:
        return stack_time(forward)
    backward = run(backward_cell, xs[::-1])[::-1]
    return stack_time([concat([f, b], axis=1) for f, b in zip(forward, backward)])


def attention(h_seq, weight, mask: np.ndarray | None = None) -> Tensor:
    """Soft attention pooling over time.

    scores = tanh(H) . w, alpha = softmax_T(scores), out = tanh(sum alpha H).
    ``mask`` (boolean [B, T]) excludes padded steps from the softmax.
    """
    h_seq = constant(h_seq)
    scores = tdot_vec(tanh(h_seq), weight)
    if mask is not None:
        scores = masked_fill(scores, mask, -1e30)
    alpha = softmax(scores, axis=1)
    return tanh(weight_time(h_seq, alpha))


# ---------------------------------------------------------------------------
# backward engine
# ---------------------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every tracked leaf's ``grad``."""
    if loss.values.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad += g
        if node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.tracked():
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Glorot-uniform init; fans from the first/last extents (dense) or the
    standard conv fan computation for 4-D kernels."""
    if len(shape) == 4:
        receptive = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    else:
        fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    """Random n x n orthogonal matrix with a deterministic sign convention."""
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def orthogonal_gates(rng: np.random.Generator, n_hidden: int, n_gates: int) -> np.ndarray:
    """Per-gate orthogonal blocks, concatenated to [n_hidden, n_gates * n_hidden]."""
    blocks = [orthogonal(rng, n_hidden) for _ in range(n_gates)]
    return np.concatenate(blocks, axis=1)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter Adam moments plus the shared step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update from each parameter's ``grad``."""
    if not state.m:
        state.m = [np.zeros_like(p.values) for p in params]
        state.v = [np.zeros_like(p.values) for p in params]
    if len(state.m) != len(params):
        raise ShapeError(
            f"optimizer state tracks {len(state.m)} parameters, got {len(params)}"
        )
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for i, p in enumerate(params):
        g = p.grad
        if g.shape != p.values.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.values = store_f32(p.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))


def clip_global_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float((p.grad**2).sum()) for p in params)))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for p in params:
            p.grad *= scale
    return total


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CHECKPOINT_MAGIC = b"LMCK"
_CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Binary format: magic LMCK, u32 version, manifest, f32 LE payload."""
    out = bytearray()
    out += _CHECKPOINT_MAGIC
    out += struct.pack("<II", _CHECKPOINT_VERSION, len(arrays))
    payload = bytearray()
    for name, values in arrays.items():
        encoded = name.encode("utf-8")
        values = np.asarray(values)
        out += struct.pack("<H", len(encoded)) + encoded
        out += struct.pack("<B", values.ndim)
        out += struct.pack(f"<{values.ndim}I", *values.shape)
        payload += values.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out) + bytes(payload))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != _CHECKPOINT_MAGIC:
        raise ShapeError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != _CHECKPOINT_VERSION:
        raise ShapeError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    manifest: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        manifest.append((name, shape))
    arrays: dict[str, np.ndarray] = {}
    for name, shape in manifest:
        n = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(data, dtype="<f4", count=n, offset=pos)
        pos += 4 * n
        arrays[name] = values.astype(np.float64).reshape(shape)
    return arrays


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    samples_per_param: int = 6,
    h_scale: float = 1e-5,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must rebuild the graph (deterministically) on every call.
    Coordinates are sampled per parameter; returns the worst relative error,
    where tiny gradients are compared with an absolute floor.
    """
    rng = np.random.default_rng(seed)
    zero_grads(params)
    backward(loss_fn())
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.values.reshape(-1)
        count = min(samples_per_param, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        for idx in coords:
            original = flat[idx]
            h = h_scale * max(1.0, abs(original))
            flat[idx] = original + h
            up = float(loss_fn().values)
            flat[idx] = original - h
            down = float(loss_fn().values)
            flat[idx] = original
            numeric = (up - down) / (2.0 * h)
            a = grad.reshape(-1)[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
