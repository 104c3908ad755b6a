"""Dense float64 tensor kernels with reverse-mode differentiation.

Every operation here computes its forward value eagerly and records a
closed-form backward closure; calling ``Tensor.backward()`` on a scalar
walks the recorded graph in reverse topological order and accumulates
gradients into the participating leaves. Gradients accumulate with ``+=``
and are only cleared by an explicit ``zero_grad`` (this is what makes
shared parameters work). Shapes are strict: the only broadcast allowed
anywhere is adding a bias vector to the rows of a matrix.

All data is float64 and row-major. With a fixed RNG seed the whole stack
is bit-deterministic on a given platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class TrainingError(RuntimeError):
    """Raised when training hits a non-recoverable numeric problem."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A node in the computation graph: float64 data plus backward hook.

    Constants (``requires_grad=False``) carry no graph metadata, so a
    forward pass over frozen weights builds no backward machinery at all.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward=None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise DimensionError(
                f"backward() needs a scalar, got shape {self.data.shape}")
        order = _toposort(self)
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(x) -> Tensor:
    """Wrap an array as a graph constant (no gradient)."""
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS postorder; graphs can be deep (BPTT), so no recursion.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
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


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _node(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    tracked = tuple(p for p in parents if p.requires_grad)
    if tracked:
        return Tensor(data, requires_grad=True, _parents=tracked, _backward=backward)
    return Tensor(data)


class Parameter:
    """A named trainable array with a persistent gradient buffer.

    ``tensor()`` produces a graph leaf whose grad buffer *is* the
    parameter's, so backward passes accumulate straight into it.
    """

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value) -> None:
        self.name = name
        self.value = _as_array(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def tensor(self) -> Tensor:
        leaf = Tensor(self.value, requires_grad=True)
        leaf.grad = self.grad
        return leaf

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def _unwrap(x) -> tuple[Tensor, np.ndarray]:
    t = constant(x)
    return t, t.data


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def _check_same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    ta, da = _unwrap(a)
    tb, db = _unwrap(b)
    _check_same_shape("add", da, db)

    def bwd(g):
        if ta.requires_grad:
            _accumulate(ta, g)
        if tb.requires_grad:
            _accumulate(tb, g)
    return _node(da + db, (ta, tb), bwd)


def sub(a, b) -> Tensor:
    ta, da = _unwrap(a)
    tb, db = _unwrap(b)
    _check_same_shape("sub", da, db)

    def bwd(g):
        if ta.requires_grad:
            _accumulate(ta, g)
        if tb.requires_grad:
            _accumulate(tb, -g)
    return _node(da - db, (ta, tb), bwd)


def mul(a, b) -> Tensor:
    ta, da = _unwrap(a)
    tb, db = _unwrap(b)
    _check_same_shape("mul", da, db)

    def bwd(g):
        if ta.requires_grad:
            _accumulate(ta, g * db)
        if tb.requires_grad:
            _accumulate(tb, g * da)
    return _node(da * db, (ta, tb), bwd)


def scale(a, s: float) -> Tensor:
    ta, da = _unwrap(a)
    s = float(s)

    def bwd(g):
        _accumulate(ta, g * s)
    return _node(da * s, (ta,), bwd)


def add_bias(m, v) -> Tensor:
    """Add a length-C vector to every row of an R x C matrix.

    The single permitted broadcast; its backward (sum over rows) stays
    auditable.
    """
    tm, dm = _unwrap(m)
    tv, dv = _unwrap(v)
    if dm.ndim != 2 or dv.ndim != 1 or dm.shape[1] != dv.shape[0]:
        raise DimensionError(
            f"add_bias: matrix {dm.shape} incompatible with bias {dv.shape}")

    def bwd(g):
        if tm.requires_grad:
            _accumulate(tm, g)
        if tv.requires_grad:
            _accumulate(tv, g.sum(axis=0))
    return _node(dm + dv, (tm, tv), bwd)


def matmul(a, b) -> Tensor:
    """Matrix product of a (m x k) and b (k x n)."""
    ta, da = _unwrap(a)
    tb, db = _unwrap(b)
    if da.ndim != 2 or db.ndim != 2 or da.shape[1] != db.shape[0]:
        raise DimensionError(
            f"matmul: shapes {da.shape} and {db.shape} do not chain")

    def bwd(g):
        if ta.requires_grad:
            _accumulate(ta, g @ db.T)
        if tb.requires_grad:
            _accumulate(tb, da.T @ g)
    return _node(da @ db, (ta, tb), bwd)


def transpose(a) -> Tensor:
    ta, da = _unwrap(a)
    if da.ndim != 2:
        raise DimensionError(f"transpose: expected 2-d, got {da.shape}")

    def bwd(g):
        _accumulate(ta, g.T)
    return _node(da.T.copy(), (ta,), bwd)


def sigmoid(a) -> Tensor:
    ta, da = _unwrap(a)
    y = _sigmoid_np(da)

    def bwd(g):
        _accumulate(ta, g * y * (1.0 - y))
    return _node(y, (ta,), bwd)


def tanh(a) -> Tensor:
    ta, da = _unwrap(a)
    y = np.tanh(da)

    def bwd(g):
        _accumulate(ta, g * (1.0 - y * y))
    return _node(y, (ta,), bwd)


def relu(a) -> Tensor:
    """Elementwise max(0, x); subgradient at exactly 0 is 0."""
    ta, da = _unwrap(a)
    mask = da > 0.0

    def bwd(g):
        _accumulate(ta, g * mask)
    return _node(np.maximum(da, 0.0), (ta,), bwd)


def abs_val(a) -> Tensor:
    """Elementwise |x|; subgradient at exactly 0 is 0."""
    ta, da = _unwrap(a)
    sign = np.sign(da)

    def bwd(g):
        _accumulate(ta, g * sign)
    return _node(np.abs(da), (ta,), bwd)


def sum_all(a) -> Tensor:
    ta, da = _unwrap(a)

    def bwd(g):
        _accumulate(ta, np.full_like(da, float(g)))
    return _node(np.asarray(da.sum()), (ta,), bwd)


def mean_all(a) -> Tensor:
    ta, da = _unwrap(a)
    n = da.size

    def bwd(g):
        _accumulate(ta, np.full_like(da, float(g) / n))
    return _node(np.asarray(da.mean()), (ta,), bwd)


def concat_cols(a, b) -> Tensor:
    ta, da = _unwrap(a)
    tb, db = _unwrap(b)
    if da.ndim != 2 or db.ndim != 2 or da.shape[0] != db.shape[0]:
        raise DimensionError(
            f"concat_cols: shapes {da.shape} and {db.shape} disagree on rows")
    split = da.shape[1]

    def bwd(g):
        if ta.requires_grad:
            _accumulate(ta, g[:, :split])
        if tb.requires_grad:
            _accumulate(tb, g[:, split:])
    return _node(np.concatenate([da, db], axis=1), (ta, tb), bwd)


def concat_rows(parts) -> Tensor:
    """Stack 2-d tensors of equal width vertically; gradient slices back
    block by block. Turns per-step decoder states into one matrix so the
    output projection and loss run as single ops."""
    items = [_unwrap(p) for p in parts]
    if not items:
        raise DimensionError("concat_rows: needs at least one tensor")
    width = items[0][1].shape[1] if items[0][1].ndim == 2 else None
    for _, d in items:
        if d.ndim != 2 or d.shape[1] != width:
            raise DimensionError(
                f"concat_rows: expected 2-d blocks of width {width}, got {d.shape}")
    offsets = np.cumsum([0] + [d.shape[0] for _, d in items])

    def bwd(g):
        for (t, _), lo, hi in zip(items, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                _accumulate(t, g[lo:hi])
    return _node(np.concatenate([d for _, d in items], axis=0),
                 tuple(t for t, _ in items), bwd)


def slice_cols(a, j0: int, j1: int) -> Tensor:
    ta, da = _unwrap(a)
    if da.ndim != 2 or not (0 <= j0 < j1 <= da.shape[1]):
        raise DimensionError(
            f"slice_cols: [{j0}:{j1}] invalid for shape {da.shape}")

    def bwd(g):
        full = np.zeros_like(da)
        full[:, j0:j1] = g
        _accumulate(ta, full)
    return _node(da[:, j0:j1].copy(), (ta,), bwd)


def take_rows(table, ids) -> Tensor:
    """Gather rows of a 2-d table by integer index (embedding lookup)."""
    tt, dt = _unwrap(table)
    idx = np.asarray(ids, dtype=np.int64)
    if dt.ndim != 2:
        raise DimensionError(f"take_rows: table must be 2-d, got {dt.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= dt.shape[0]):
        raise IndexError(f"take_rows: index out of range for {dt.shape[0]} rows")

    def bwd(g):
        contrib = np.zeros_like(dt)
        np.add.at(contrib, idx, g)
        _accumulate(tt, contrib)
    return _node(dt[idx], (tt,), bwd)


def repeat_rows(a, k: int) -> Tensor:
    """Repeat each row k consecutive times: (R, C) -> (R*k, C)."""
    ta, da = _unwrap(a)
    if da.ndim != 2:
        raise DimensionError(f"repeat_rows: expected 2-d, got {da.shape}")
    r, c = da.shape

    def bwd(g):
        _accumulate(ta, g.reshape(r, k, c).sum(axis=1))
    return _node(np.repeat(da, k, axis=0), (ta,), bwd)


def reshape(a, shape) -> Tensor:
    ta, da = _unwrap(a)
    shape = tuple(shape)

    def bwd(g):
        _accumulate(ta, g.reshape(da.shape))
    return _node(da.reshape(shape).copy(), (ta,), bwd)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_rows_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def row_softmax(a) -> Tensor:
    """Softmax along each row of a 2-d tensor, max-shifted for stability."""
    ta, da = _unwrap(a)
    if da.ndim != 2:
        raise DimensionError(f"row_softmax: expected 2-d, got {da.shape}")
    p = softmax_rows_np(da)

    def bwd(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        _accumulate(ta, p * (g - dot))
    return _node(p, (ta,), bwd)


def cross_entropy_rows(logits, targets, weights=None) -> Tensor:
    """Weighted sum of per-row negative log softmax probabilities.

    weights defaults to all ones; rows with weight 0 contribute nothing,
    which is how padded positions are masked out of sequence losses.
    """
    tl, dl = _unwrap(logits)
    if dl.ndim != 2:
        raise DimensionError(f"cross_entropy_rows: expected 2-d logits, got {dl.shape}")
    idx = np.asarray(targets, dtype=np.int64)
    if idx.shape != (dl.shape[0],):
        raise DimensionError(
            f"cross_entropy_rows: targets {idx.shape} vs logits {dl.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= dl.shape[1]):
        bad = idx[(idx < 0) | (idx >= dl.shape[1])][0]
        raise IndexError(f"target id {bad} out of range for {dl.shape[1]} classes")
    w = np.ones(dl.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    rows = np.arange(dl.shape[0])
    logp = log_softmax_rows_np(dl)
    loss = -(w * logp[rows, idx]).sum()

    def bwd(g):
        p = np.exp(logp)
        p[rows, idx] -= 1.0
        _accumulate(tl, float(g) * (p * w[:, None]))
    return _node(np.asarray(loss), (tl,), bwd)


def softmax_cross_entropy(logits, target: int) -> Tensor:
    """-log softmax(logits)[target] for a single logit vector."""
    tl, dl = _unwrap(logits)
    if dl.ndim != 1:
        raise DimensionError(
            f"softmax_cross_entropy: expected 1-d logits, got {dl.shape}")
    row = reshape(tl, (1, dl.shape[0]))
    return cross_entropy_rows(row, [int(target)])


# ---------------------------------------------------------------------------
# divergence kernels (targets are plain arrays: no gradient flows into them)
# ---------------------------------------------------------------------------

def _rows(x: np.ndarray) -> np.ndarray:
    return x.reshape(1, -1) if x.ndim == 1 else x


def cosine_rows_loss(pred, target) -> Tensor:
    """Mean over rows of (1 - cosine similarity) against a constant target."""
    tp, dp = _unwrap(pred)
    dt = _rows(_as_array(target))
    p2 = _rows(dp)
    _check_same_shape("cosine_rows_loss", p2, dt)
    n2p = np.square(p2).sum(axis=1)
    n2t = np.square(dt).sum(axis=1)
    if np.any(n2p == 0.0) or np.any(n2t == 0.0):
        raise ValueError("cosine_rows_loss: zero-norm vector")
    b = p2.shape[0]
    # single sqrt keeps cos at exactly 1 for identical rows (sqrt(x*x) == x
    # in IEEE doubles); the clip stops roundoff pushing the loss below 0
    cos = np.clip((p2 * dt).sum(axis=1) / np.sqrt(n2p * n2t), -1.0, 1.0)
    loss = (1.0 - cos).mean()
    pn, tn = np.sqrt(n2p), np.sqrt(n2t)

    def bwd(g):
        dcos = dt / (pn * tn)[:, None] - (cos / (pn * pn))[:, None] * p2
        _accumulate(tp, (-float(g) / b) * dcos.reshape(dp.shape))
    return _node(np.asarray(loss), (tp,), bwd)


def kld_softmax_rows_loss(pred, target) -> Tensor:
    """Mean over rows of KL(softmax(target) || softmax(pred)).

    The target distribution is fixed; gradient w.r.t. the pred logits is
    (softmax(pred) - softmax(target)) / rows.
    """
    tp, dp = _unwrap(pred)
    dt = _rows(_as_array(target))
    p2 = _rows(dp)
    _check_same_shape("kld_softmax_rows_loss", p2, dt)
    b = p2.shape[0]
    lq = log_softmax_rows_np(dt)
    q = np.exp(lq)
    lp = log_softmax_rows_np(p2)
    loss = (q * (lq - lp)).sum() / b

    def bwd(g):
        _accumulate(tp, (float(g) / b) * (np.exp(lp) - q).reshape(dp.shape))
    return _node(np.asarray(loss), (tp,), bwd)


def rbf_kernel_mean(x, y, gamma: float) -> Tensor:
    """Mean of exp(-gamma * ||x_i - y_j||^2) over all row pairs.

    Either argument may be a graph tensor; passing the same tensor for
    both accumulates the gradients of both roles.
    """
    tx, dx = _unwrap(x)
    ty, dy = _unwrap(y)
    if dx.ndim != 2 or dy.ndim != 2 or dx.shape[1] != dy.shape[1]:
        raise DimensionError(
            f"rbf_kernel_mean: shapes {dx.shape} and {dy.shape} disagree")
    gamma = float(gamma)
    n, m = dx.shape[0], dy.shape[0]
    d2 = (np.square(dx).sum(axis=1)[:, None]
          + np.square(dy).sum(axis=1)[None, :] - 2.0 * dx @ dy.T)
    k = np.exp(-gamma * np.maximum(d2, 0.0))

    def bwd(g):
        c = -2.0 * gamma * float(g) / (n * m)
        if tx.requires_grad:
            _accumulate(tx, c * (k.sum(axis=1)[:, None] * dx - k @ dy))
        if ty.requires_grad:
            _accumulate(ty, c * (k.sum(axis=0)[:, None] * dy - k.T @ dx))
    parents = (tx,) if tx is ty else (tx, ty)
    return _node(np.asarray(k.mean()), parents, bwd)


def region_weighted_sum(weights, regions: np.ndarray) -> Tensor:
    """Per-row weighted sum of constant region rows.

    weights: (B, K) tensor; regions: (B, K, d) constant array.
    Output row b is sum_k weights[b, k] * regions[b, k].
    """
    tw, dw = _unwrap(weights)
    reg = _as_array(regions)
    if dw.ndim != 2 or reg.ndim != 3 or reg.shape[:2] != dw.shape:
        raise DimensionError(
            f"region_weighted_sum: weights {dw.shape} vs regions {reg.shape}")

    def bwd(g):
        _accumulate(tw, np.einsum("bd,bkd->bk", g, reg))
    return _node(np.einsum("bk,bkd->bd", dw, reg), (tw,), bwd)


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------

@dataclass
class LstmParams:
    """One LSTM layer's weights.

    Gate layout along the last axis is fixed as (input, forget, cell,
    output): w_x is (d_in, 4d), w_h is (d, 4d), b is (4d,).
    """
    w_x: Parameter
    w_h: Parameter
    b: Parameter

    @property
    def hidden_dim(self) -> int:
        return self.w_h.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_x.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.w_x, self.w_h, self.b]


def init_lstm(name: str, d_in: int, d: int, rng: np.random.Generator,
              init_scale: float = 0.08) -> LstmParams:
    u = lambda *s: rng.uniform(-init_scale, init_scale, size=s)
    return LstmParams(
        w_x=Parameter(f"{name}.w_x", u(d_in, 4 * d)),
        w_h=Parameter(f"{name}.w_h", u(d, 4 * d)),
        b=Parameter(f"{name}.b", u(4 * d)),
    )


def lstm_forward_np(params: LstmParams, x: np.ndarray, h: np.ndarray,
                    c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inference-only LSTM step on raw arrays (shared with the graph op)."""
    d = params.hidden_dim
    gates = x @ params.w_x.value + h @ params.w_h.value + params.b.value
    i = _sigmoid_np(gates[:, :d])
    f = _sigmoid_np(gates[:, d:2 * d])
    g = np.tanh(gates[:, 2 * d:3 * d])
    o = _sigmoid_np(gates[:, 3 * d:])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


def lstm_cell(x, h_prev, c_prev, params: LstmParams,
              mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """One LSTM step; returns (h, c) and backpropagates into x, h_prev,
    c_prev and all three weight tensors.

    1-d inputs are treated as a batch of one and returned 1-d. ``mask``
    (one float per batch row) blends the update per row: rows with mask 0
    pass h_prev/c_prev through bitwise unchanged, which is how padded
    steps are skipped.
    """
    tx, dx = _unwrap(x)
    th, dh = _unwrap(h_prev)
    tc, dc = _unwrap(c_prev)
    single = dx.ndim == 1
    x2, h2, c2 = _rows(dx), _rows(dh), _rows(dc)
    d = params.hidden_dim
    if x2.shape[1] != params.input_dim:
        raise DimensionError(
            f"lstm_cell: input dim {x2.shape[1]} != weight dim {params.input_dim}")
    if h2.shape != (x2.shape[0], d) or c2.shape != (x2.shape[0], d):
        raise DimensionError(
            f"lstm_cell: state shapes {h2.shape}/{c2.shape} "
            f"incompatible with batch {x2.shape[0]} and hidden dim {d}")

    wx, wh, bt = params.w_x.tensor(), params.w_h.tensor(), params.b.tensor()
    gates = x2 @ wx.data + h2 @ wh.data + bt.data
    gi = _sigmoid_np(gates[:, :d])
    gf = _sigmoid_np(gates[:, d:2 * d])
    gg = np.tanh(gates[:, 2 * d:3 * d])
    go = _sigmoid_np(gates[:, 3 * d:])
    c_new = gf * c2 + gi * gg
    tc_new = np.tanh(c_new)
    h_new = go * tc_new

    if mask is None:
        h_out, c_out = h_new, c_new
    else:
        m = np.asarray(mask, dtype=np.float64).reshape(-1, 1)
        h_out = m * h_new + (1.0 - m) * h2
        c_out = m * c_new + (1.0 - m) * c2

    def bwd(g):
        dh_out, dc_out = g[:, :d], g[:, d:]
        if mask is None:
            dh_in, dc_in = dh_out, dc_out
            dh_skip = dc_skip = 0.0
        else:
            m = np.asarray(mask, dtype=np.float64).reshape(-1, 1)
            dh_in, dc_in = m * dh_out, m * dc_out
            dh_skip, dc_skip = (1.0 - m) * dh_out, (1.0 - m) * dc_out
        d_go = dh_in * tc_new
        d_c = dc_in + dh_in * go * (1.0 - tc_new * tc_new)
        d_gf = d_c * c2
        d_gi = d_c * gg
        d_gg = d_c * gi
        dgates = np.concatenate([
            d_gi * gi * (1.0 - gi),
            d_gf * gf * (1.0 - gf),
            d_gg * (1.0 - gg * gg),
            d_go * go * (1.0 - go),
        ], axis=1)
        if tx.requires_grad:
            gx = dgates @ wx.data.T
            _accumulate(tx, gx.reshape(dx.shape))
        if th.requires_grad:
            gh = dgates @ wh.data.T + dh_skip
            _accumulate(th, gh.reshape(dh.shape))
        if tc.requires_grad:
            gc = d_c * gf + dc_skip
            _accumulate(tc, gc.reshape(dc.shape))
        _accumulate(wx, x2.T @ dgates)
        _accumulate(wh, h2.T @ dgates)
        _accumulate(bt, dgates.sum(axis=0))

    fused = _node(np.concatenate([h_out, c_out], axis=1),
                  (tx, th, tc, wx, wh, bt), bwd)
    h_t = slice_cols(fused, 0, d)
    c_t = slice_cols(fused, d, 2 * d)
    if single:
        h_t = reshape(h_t, (d,))
        c_t = reshape(c_t, (d,))
    return h_t, c_t


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter Adam moments and step counter."""
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam_state(p: Parameter, lr: float = 5e-4, beta1: float = 0.9,
                    beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(m=np.zeros_like(p.value), v=np.zeros_like(p.value),
                     step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(p: Parameter, s: AdamState) -> None:
    """Bias-corrected Adam update, applied to p.value in place.

    The caller's training loop owns zeroing p.grad afterwards.
    """
    g = p.grad
    if not np.all(np.isfinite(g)):
        raise TrainingError(f"non-finite gradient for parameter {p.name!r}")
    s.step += 1
    s.m = s.beta1 * s.m + (1.0 - s.beta1) * g
    s.v = s.beta2 * s.v + (1.0 - s.beta2) * g * g
    m_hat = s.m / (1.0 - s.beta1 ** s.step)
    v_hat = s.v / (1.0 - s.beta2 ** s.step)
    p.value -= s.lr * m_hat / (np.sqrt(v_hat) + s.eps)


class AdamOptimizer:
    """Keeps one AdamState per parameter and steps them together.

    clip_norm, when set, rescales the whole gradient so its global L2
    norm never exceeds that value (applied before the moment updates).
    """

    def __init__(self, params: Sequence[Parameter], lr: float = 5e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 clip_norm: float | None = None):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.params = list(params)
        self.clip_norm = clip_norm
        self.states = {p.name: init_adam_state(p, lr, beta1, beta2, eps)
                       for p in params}

    def set_lr(self, lr: float) -> None:
        for s in self.states.values():
            s.lr = lr

    def step(self) -> None:
        if self.clip_norm is not None:
            total = 0.0
            for p in self.params:
                total += float(np.square(p.grad).sum())
            norm = math.sqrt(total)
            if norm > self.clip_norm:
                factor = self.clip_norm / norm
                for p in self.params:
                    p.grad *= factor
        for p in self.params:
            adam_step(p, self.states[p.name])

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Sequence[Parameter],
               n_coords: int = 20, h: float = 1e-5, seed: int = 0) -> float:
    """Compare backprop gradients of the scalar f() against central
    finite differences on sampled coordinates of each parameter.

    Returns the worst relative error
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.zero_grad()
    f().backward()
    analytic = {p.name: p.grad.copy() for p in params}
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= n_coords else rng.choice(n, n_coords, replace=False)
        aflat = analytic[p.name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(aflat[i] - numeric) / max(1e-8, abs(aflat[i]) + abs(numeric))
            worst = max(worst, err)
    return worst
