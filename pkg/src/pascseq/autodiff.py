"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations are recorded on the active :class:`Tape` (a context manager).
Outside a tape every op is a plain numpy computation, which is what eval
passes and finite-difference probes use.

    with Tape() as tape:
        y = cross_entropy(matmul(x, w), labels)
    grads = backward(tape, y)
    grads[w]
"""

from __future__ import annotations

import contextvars
from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, UsageError

_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("pascseq_tape", default=None)


class Tensor:
    """Dense n-d float64 array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record(NamedTuple):
    kind: str
    inputs: tuple[int | None, ...]
    outputs: tuple[int, ...]
    backward: Callable[..., Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of recorded operations for one forward pass.

    Node ids are assigned in recording order, so the record list is already
    topologically sorted. A tape belongs to one thread of execution.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._ids: dict[int, int] = {}
        self._tensors: list[Tensor] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        self._token = None
        return False

    def __len__(self) -> int:
        return len(self.records)

    def node_id(self, t: Tensor) -> int | None:
        node = self._ids.get(id(t))
        if node is not None and self._tensors[node] is t:
            return node
        return None

    def watch(self, t: Tensor) -> int:
        """Register ``t`` as a differentiable leaf even if it does not require grad."""
        node = self.node_id(t)
        if node is None:
            node = len(self._tensors)
            self._tensors.append(t)
            self._ids[id(t)] = node
        return node

    def _input_node(self, t: Tensor) -> int | None:
        node = self.node_id(t)
        if node is None and t.requires_grad:
            node = self.watch(t)
        return node

    def record(self, kind: str, inputs: Sequence[Tensor], outputs: Sequence[Tensor], bw) -> None:
        in_nodes = tuple(self._input_node(t) for t in inputs)
        if all(n is None for n in in_nodes):
            return
        out_nodes = tuple(self.watch(t) for t in outputs)
        self.records.append(_Record(kind, in_nodes, out_nodes, bw))


class no_tape:
    """Suspend recording inside the block."""

    def __enter__(self):
        self._token = _ACTIVE.set(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        return False


def _needs_grad(t: Tensor) -> bool:
    tape = _ACTIVE.get()
    return tape is not None and (t.requires_grad or tape.node_id(t) is not None)


def _record(kind: str, inputs: Sequence[Tensor], outputs: Sequence[Tensor], bw) -> None:
    tape = _ACTIVE.get()
    if tape is not None:
        tape.record(kind, inputs, outputs, bw)


class Gradients:
    """Gradient map produced by :func:`backward`, indexed by tensor."""

    def __init__(self, tape: Tape, grads: dict[int, np.ndarray]):
        self._tape = tape
        self._grads = grads

    def __contains__(self, t: Tensor) -> bool:
        node = self._tape.node_id(t)
        return node is not None and node in self._grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        node = self._tape.node_id(t)
        if node is None:
            raise KeyError(f"{t!r} was not recorded on this tape")
        g = self._grads.get(node)
        return np.zeros_like(t.data) if g is None else g

    def get(self, t: Tensor, default=None):
        return self[t] if self._tape.node_id(t) is not None else default


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Propagate d(loss)/d(node) to every node reachable from ``loss``."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    root = tape.node_id(loss)
    if root is None:
        raise UsageError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {root: np.ones_like(loss.data)}
    tensors = tape._tensors
    for rec in reversed(tape.records):
        outs = [grads.get(n) for n in rec.outputs]
        if all(g is None for g in outs):
            continue
        outs = [np.zeros_like(tensors[n].data) if g is None else g for n, g in zip(rec.outputs, outs)]
        for node, g in zip(rec.inputs, rec.backward(*outs)):
            if node is None or g is None:
                continue
            prev = grads.get(node)
            grads[node] = g if prev is None else prev + g
    return Gradients(tape, grads)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """``a @ b`` for a: (..., m, k) and b: (k, n) or (..., k, n) with matching batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if (
        A.ndim < 2
        or B.ndim < 2
        or A.shape[-1] != B.shape[-2]
        or (B.ndim > 2 and B.shape[:-2] != A.shape[:-2])
    ):
        raise DimensionError(f"matmul: cannot multiply {A.shape} by {B.shape}")
    out = Tensor(A @ B)

    def bw(g):
        ga = g @ np.swapaxes(B, -1, -2)
        if B.ndim == 2:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    _record("matmul", (a, b), (out,), bw)
    return out


def _check_same(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector matching ``a``'s last axis."""
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    bias = A.shape != B.shape
    if bias and not (B.ndim == 1 and A.ndim >= 1 and A.shape[-1] == B.shape[0]):
        raise DimensionError(f"add: shape mismatch {A.shape} vs {B.shape}")
    out = Tensor(A + B)

    def bw(g):
        return g, (g.reshape(-1, B.shape[0]).sum(axis=0) if bias else g)

    _record("add", (a, b), (out,), bw)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    _check_same("mul", A, B)
    out = Tensor(A * B)
    _record("mul", (a, b), (out,), lambda g: (g * B, g * A))
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows and gives exactly 0.5 at 0
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    out = Tensor(y)
    _record("tanh", (x,), (out,), lambda g: (g * (1.0 - y * y),))
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    out = Tensor(y)
    _record("sigmoid", (x,), (out,), lambda g: (g * y * (1.0 - y),))
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))
    _record("relu", (x,), (out,), lambda g: (g * mask,))
    return out


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: add, mul, tanh, sigmoid, relu."""
    table = {"add": add, "mul": mul, "tanh": tanh, "sigmoid": sigmoid, "relu": relu}
    if op not in table:
        raise UsageError(f"unknown elementwise op {op!r}; expected one of {sorted(table)}")
    return table[op](*args)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)
    _record("softmax", (x,), (out,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))
    return out


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis))
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    _record("sum", (x,), (out,), bw)
    return out


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    out = Tensor(x.data.mean(axis=axis))
    shape = x.shape

    def bw(g):
        g = g if axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    _record("mean", (x,), (out,), bw)
    return out


# ------------------------------------------------------------------ shape ops


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    out = Tensor(x.data.reshape(shape))
    _record("reshape", (x,), (out,), lambda g: (g.reshape(old),))
    return out


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    _record("transpose", (x,), (out,), lambda g: (g.transpose(inv),))
    return out


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    _record("concat", ts, (out,), lambda g: tuple(np.split(g, bounds, axis=axis)))
    return out


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in ts], axis=axis))
    n = len(ts)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    _record("stack", ts, (out,), bw)
    return out


def unstack(x, axis: int = 0) -> list[Tensor]:
    """Split along ``axis`` into separate tensors; backward reassembles in one pass."""
    x = as_tensor(x)
    outs = [Tensor(np.take(x.data, i, axis=axis)) for i in range(x.shape[axis])]

    def bw(*gs):
        return (np.stack(gs, axis=axis),)

    _record("unstack", (x,), outs, bw)
    return outs


def take(x, index: int, axis: int = 0) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.take(x.data, index, axis=axis))
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    _record("take", (x,), (out,), bw)
    return out


def flip(x, axis: int = 0) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.flip(x.data, axis=axis).copy())
    _record("flip", (x,), (out,), lambda g: (np.flip(g, axis=axis).copy(),))
    return out


# ------------------------------------------------------------- network layers


def conv1d(x, kernels, bias, padding: int = 0) -> Tensor:
    """Stride-1 1-D convolution over [C_in, L] or [B, C_in, L] with zero padding."""
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    X, W, b = x.data, kernels.data, bias.data
    batched = X.ndim == 3
    if X.ndim not in (2, 3) or W.ndim != 3:
        raise DimensionError(f"conv1d: expected input [C,L] or [B,C,L] and kernels [O,C,k], got {X.shape}, {W.shape}")
    Xb = X if batched else X[None]
    nb, c_in, length = Xb.shape
    c_out, c_in_w, k = W.shape
    if c_in != c_in_w or b.shape != (c_out,):
        raise DimensionError(f"conv1d: input {X.shape}, kernels {W.shape}, bias {b.shape} are inconsistent")
    if k > length + 2 * padding:
        raise DimensionError(f"conv1d: kernel size {k} exceeds padded input length {length + 2 * padding}")
    l_out = length + 2 * padding - k + 1
    Xp = np.pad(Xb, ((0, 0), (0, 0), (padding, padding))) if padding else Xb
    cols = sliding_window_view(Xp, k, axis=2).transpose(0, 2, 1, 3).reshape(nb, l_out, c_in * k)
    Wm = W.reshape(c_out, c_in * k)
    y = (cols @ Wm.T + b).transpose(0, 2, 1)
    out = Tensor(np.ascontiguousarray(y if batched else y[0]))
    need_x = _needs_grad(x)

    def bw(g):
        gb3 = g if batched else g[None]
        gt = gb3.transpose(0, 2, 1)
        gw = (gt.reshape(-1, c_out).T @ cols.reshape(-1, c_in * k)).reshape(W.shape)
        gbias = gb3.sum(axis=(0, 2))
        if not need_x:
            return None, gw, gbias
        gcols = (gt @ Wm).reshape(nb, l_out, c_in, k)
        gxp = np.zeros((nb, c_in, length + 2 * padding))
        for j in range(k):
            gxp[:, :, j : j + l_out] += gcols[:, :, :, j].transpose(0, 2, 1)
        gx = gxp[:, :, padding : padding + length]
        return (gx if batched else gx[0]), gw, gbias

    _record("conv1d", (x, kernels, bias), (out,), bw)
    return out


def maxpool1d(x, size: int = 2) -> tuple[Tensor, np.ndarray]:
    """Non-overlapping max pool over the last axis; returns output and argmax positions.

    A trailing remainder shorter than ``size`` is dropped. Ties go to the first index.
    """
    x = as_tensor(x)
    X = x.data
    length = X.shape[-1]
    if length < size:
        raise DimensionError(f"maxpool1d: length {length} is shorter than pool size {size}")
    l_out = length // size
    windows = X[..., : l_out * size].reshape(*X.shape[:-1], l_out, size)
    local = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, local[..., None], axis=-1)[..., 0]
    idx = local + np.arange(l_out) * size
    out = Tensor(y)

    def bw(g):
        gx = np.zeros(X.shape)
        np.put_along_axis(gx, idx, g, axis=-1)
        return (gx,)

    _record("maxpool1d", (x,), (out,), bw)
    return out, idx


def batch_norm(x, gamma, beta, eps: float = 1e-5, running: tuple[np.ndarray, np.ndarray] | None = None):
    """Per-channel normalization of [C, L] or [B, C, L].

    With ``running=None`` batch statistics are used (over batch and length) and
    ``(out, batch_mean, batch_var)`` is returned, the variance being biased.
    Otherwise the given ``(mean, var)`` are used and only ``out`` is returned.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    X, G, Bt = x.data, gamma.data, beta.data
    if X.ndim not in (2, 3) or G.shape != (X.shape[-2],) or Bt.shape != G.shape:
        raise DimensionError(f"batch_norm: input {X.shape} vs gamma {G.shape}, beta {Bt.shape}")
    axes = (0, 2) if X.ndim == 3 else (1,)
    shaper = (slice(None), None)
    if running is None:
        mu = X.mean(axis=axes)
        var = X.var(axis=axes)
    else:
        mu, var = running
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (X - mu[shaper]) * inv[shaper]
    out = Tensor(xhat * G[shaper] + Bt[shaper])
    n = X.size // X.shape[-2]

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * G[shaper]
        if running is None:
            s1 = dxhat.sum(axis=axes)
            s2 = (dxhat * xhat).sum(axis=axes)
            dx = (inv[shaper] / n) * (n * dxhat - s1[shaper] - xhat * s2[shaper])
        else:
            dx = dxhat * inv[shaper]
        return dx, dgamma, dbeta

    _record("batch_norm", (x, gamma, beta), (out,), bw)
    if running is None:
        return out, mu, var
    return out


def lstm_cell(x, h, c, w_ih, w_hh, b) -> tuple[Tensor, Tensor]:
    """One LSTM step with gate order (input, forget, cell, output).

    Shapes: x [D] or [B, D]; h, c [H] or [B, H]; w_ih [4H, D]; w_hh [4H, H]; b [4H].
    """
    x, h, c, w_ih, w_hh, b = (as_tensor(t) for t in (x, h, c, w_ih, w_hh, b))
    X, Hp, Cp, Wi, Wh, bb = x.data, h.data, c.data, w_ih.data, w_hh.data, b.data
    hid = Hp.shape[-1]
    if (
        Wi.shape != (4 * hid, X.shape[-1])
        or Wh.shape != (4 * hid, hid)
        or bb.shape != (4 * hid,)
        or Cp.shape != Hp.shape
        or X.shape[:-1] != Hp.shape[:-1]
    ):
        raise DimensionError(
            f"lstm_cell: x {X.shape}, h {Hp.shape}, c {Cp.shape}, w_ih {Wi.shape}, w_hh {Wh.shape}, b {bb.shape}"
        )
    z = X @ Wi.T + Hp @ Wh.T + bb
    i = _sigmoid(z[..., :hid])
    f = _sigmoid(z[..., hid : 2 * hid])
    gc = np.tanh(z[..., 2 * hid : 3 * hid])
    o = _sigmoid(z[..., 3 * hid :])
    c_new = f * Cp + i * gc
    tc = np.tanh(c_new)
    h_new = o * tc
    h_out, c_out = Tensor(h_new), Tensor(c_new)

    def bw(gh, gcn):
        dc = gcn + gh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                dc * gc * i * (1.0 - i),
                dc * Cp * f * (1.0 - f),
                dc * i * (1.0 - gc * gc),
                gh * tc * o * (1.0 - o),
            ],
            axis=-1,
        )
        dz2 = dz.reshape(-1, 4 * hid)
        dwi = dz2.T @ X.reshape(-1, X.shape[-1])
        dwh = dz2.T @ Hp.reshape(-1, hid)
        return dz @ Wi, dz @ Wh, dc * f, dwi, dwh, dz2.sum(axis=0)

    _record("lstm_cell", (x, h, c, w_ih, w_hh, b), (h_out, c_out), bw)
    return h_out, c_out


def cross_entropy(logits, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over rows; logits [C] or [B, C]."""
    logits = as_tensor(logits)
    Z = logits.data
    single = Z.ndim == 1
    Z2 = Z[None] if single else Z
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if Z2.ndim != 2 or y.shape != (Z2.shape[0],):
        raise DimensionError(f"cross_entropy: logits {Z.shape} vs labels {y.shape}")
    rows = np.arange(Z2.shape[0])
    top = Z2.argmax(axis=1)
    m = Z2[rows, top]
    e = np.exp(Z2 - m[:, None])
    rest = e.copy()
    rest[rows, top] = 0.0
    # log-sum-exp as m + log1p(sum of non-max terms) keeps tiny losses exact
    losses = (m - Z2[rows, y]) + np.log1p(rest.sum(axis=1))
    out = Tensor(losses.mean())
    probs = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        d = probs.copy()
        d[rows, y] -= 1.0
        d *= g / Z2.shape[0]
        return (d[0] if single else d,)

    _record("cross_entropy", (logits,), (out,), bw)
    return out


# ------------------------------------------------------------------- checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the taped gradient of scalar ``f(x)`` and central differences.

    ``x`` is perturbed in place and restored, so ``f`` may close over other
    tensors that share the computation.
    """
    x.data = np.ascontiguousarray(x.data, dtype=np.float64)
    with Tape() as tape:
        tape.watch(x)
        y = f(x)
    analytic = backward(tape, y)[x].reshape(-1)
    flat = x.data.reshape(-1)
    numeric = np.empty_like(analytic)
    with no_tape():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
