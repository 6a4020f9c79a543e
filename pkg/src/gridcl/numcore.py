"""Small dense-tensor library with tape-based reverse-mode differentiation.

Only the operations needed by the recurrent classifier and the continual
learning losses are provided.  Arrays are numpy; the working precision is
float32 unless a test switches to float64 with :func:`precision`.

Recording is explicit::

    tape = GradTape()
    with tape:
        loss = (x * x).sum()
    backward(loss, tape)
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

_state = threading.local()


class DimensionError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    old = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad():
    """Suspend recording on the current thread's tape."""
    prev = _active_tape()
    _state.tape = None
    try:
        yield
    finally:
        _state.tape = prev


def _active_tape() -> "GradTape | None":
    return getattr(_state, "tape", None)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradTape:
    """Ordered record of differentiable operations executed while active."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._prev = None

    def __enter__(self) -> "GradTape":
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.nodes)


def _record(inputs: Sequence[Tensor], out: Tensor, backward: Callable[[np.ndarray], Sequence]) -> Tensor:
    if not np.isfinite(out.data).all():
        raise FloatingPointError(f"non-finite values produced (output shape {out.shape})")
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(tuple(inputs), out, backward))
    return out


def _accumulate(t: Tensor, g) -> None:
    if g is None or not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor, tape: GradTape) -> None:
    """Propagate d(loss)/d(input) through ``tape`` in reverse order.

    Gradients accumulate into ``.grad`` of every leaf tensor (one not
    produced on this tape) with ``requires_grad``; call
    :meth:`Tensor.zero_grad` between steps.  The tape is consumed.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    produced = {id(node.output) for node in tape.nodes}
    seeds: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = seeds.pop(id(node.output), None)
        if g is None:
            continue
        grads = node.backward(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=t.data.dtype)
            if gi.shape != t.data.shape:
                gi = _unbroadcast(gi, t.data.shape)
            key = id(t)
            if key not in produced:
                _accumulate(t, gi)
            elif key in seeds:
                seeds[key] = seeds[key] + gi
            else:
                seeds[key] = gi
    tape.nodes.clear()


# ----------------------------------------------------------------------
# elementwise and linear algebra
# ----------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, dtype=a.data.dtype)
    return _record((a, b), out, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data, dtype=a.data.dtype)
    return _record((a, b), out, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, dtype=a.data.dtype)
    return _record((a, b), out, lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c, dtype=a.data.dtype)
    return _record((a,), out, lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, dtype=a.data.dtype)
    return _record((a, b), out, lambda g: (g @ b.data.T, a.data.T @ g))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = Tensor(s, dtype=a.data.dtype)
    return _record((a,), out, lambda g: (g * s * (1 - s),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y, dtype=a.data.dtype)
    return _record((a,), out, lambda g: (g * (1 - y * y),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by _record
        y = np.exp(a.data)
    out = Tensor(y, dtype=a.data.dtype)
    return _record((a,), out, lambda g: (g * y,))


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data, dtype=a.data.dtype)
    return _record((a,), out, lambda g: (2 * g * a.data,))


def row_norm(a: Tensor) -> Tensor:
    """Euclidean norm of each row of a 2-D tensor.

    The subgradient at a zero row is taken as zero.
    """
    n = np.sqrt((a.data * a.data).sum(axis=1))
    out = Tensor(n, dtype=a.data.dtype)

    def bwd(g):
        safe = np.where(n > 0, n, 1)
        return ((g / safe * (n > 0))[:, None] * a.data,)

    return _record((a,), out, bwd)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), dtype=a.data.dtype)
    return _record((a,), out, lambda g: (np.broadcast_to(g, a.shape),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = Tensor(a.data.mean(), dtype=a.data.dtype)
    return _record((a,), out, lambda g: (np.broadcast_to(g / n, a.shape),))


def sum_rows(a: Tensor) -> Tensor:
    """Sum over the last axis of a 2-D tensor."""
    out = Tensor(a.data.sum(axis=1), dtype=a.data.dtype)
    return _record((a,), out, lambda g: (np.broadcast_to(g[:, None], a.shape),))


def sq_norm(a: Tensor) -> Tensor:
    return sum_all(square(a))


def take(a: Tensor, index) -> Tensor:
    """Basic/advanced indexing with scatter-add backward."""
    out = Tensor(a.data[index], dtype=a.data.dtype)

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record((a,), out, bwd)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), dtype=tensors[0].data.dtype)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        return np.split(g, bounds, axis=axis)

    return _record(tensors, out, bwd)


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    mask = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    out = Tensor(a.data * mask, dtype=a.data.dtype)
    return _record((a,), out, lambda g: (g * mask,))


# ----------------------------------------------------------------------
# softmax family
# ----------------------------------------------------------------------


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")


def softmax_np(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    _check_temperature(temperature)
    s = (z - z.max(axis=-1, keepdims=True)) / temperature
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_np(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    _check_temperature(temperature)
    s = (z - z.max(axis=-1, keepdims=True)) / temperature
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax_t(z: Tensor, temperature: float = 1.0) -> Tensor:
    """Tempered softmax over the last axis (max-subtracted)."""
    z = as_tensor(z)
    if z.size == 0:
        raise DimensionError("softmax of an empty tensor")
    y = softmax_np(z.data, temperature)
    out = Tensor(y, dtype=z.data.dtype)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)) / temperature,)

    return _record((z,), out, bwd)


def log_softmax_t(z: Tensor, temperature: float = 1.0) -> Tensor:
    z = as_tensor(z)
    y = log_softmax_np(z.data, temperature)
    out = Tensor(y, dtype=z.data.dtype)

    def bwd(g):
        p = np.exp(y)
        return ((g - p * g.sum(axis=-1, keepdims=True)) / temperature,)

    return _record((z,), out, bwd)


def kl_divergence(p, q) -> float:
    """KL(p || q) for probability vectors, with 0 ln 0 = 0 and q clamped at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence length mismatch: {p.shape} vs {q.shape}")
    q = np.maximum(q, 1e-12)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


# ----------------------------------------------------------------------
# fused recurrent op
# ----------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def _sigmoid_inplace(x: np.ndarray) -> np.ndarray:
    x *= 0.5
    np.tanh(x, out=x)
    x += 1.0
    x *= 0.5
    return x


def gru_last_state(x: Tensor, w_in: Tensor, w_hh: Tensor, bias: Tensor, reverse: bool = False) -> Tensor:
    """Run a GRU over ``x`` (B x W x F) and return the final hidden state (B x H).

    Gate blocks in ``w_in`` (F x 3H), ``w_hh`` (H x 3H) and ``bias`` (3H)
    are ordered update, reset, candidate:

        u = sig(x W_u + h U_u + b_u)
        r = sig(x W_r + h U_r + b_r)
        n = tanh(x W_n + r * (h U_n) + b_n)
        h' = (1 - u) * n + u * h

    With ``reverse`` the sequence is consumed from the last step to the
    first.  The backward pass is hand-written truncation-free BPTT.
    """
    xd = x.data
    if xd.ndim != 3:
        raise DimensionError(f"gru input must be B x W x F, got {xd.shape}")
    B, W, F = xd.shape
    H = w_hh.shape[0]
    if w_in.shape != (F, 3 * H) or w_hh.shape != (H, 3 * H) or bias.shape != (3 * H,):
        raise DimensionError(
            f"gru parameter shapes {w_in.shape}, {w_hh.shape}, {bias.shape} do not fit input {xd.shape}"
        )
    dt = xd.dtype
    xs = xd[:, ::-1] if reverse else xd
    xp = (xs.reshape(B * W, F) @ w_in.data).reshape(B, W, 3 * H) + bias.data
    U = w_hh.data
    hs = np.zeros((W + 1, B, H), dt)
    hus = np.empty((W, B, 3 * H), dt)
    urs = np.empty((W, B, 2 * H), dt)
    ns = np.empty((W, B, H), dt)
    hus[0] = 0  # the initial state is zero
    for t in range(W):
        h = hs[t]
        hu = hus[t] if t == 0 else np.dot(h, U, out=hus[t])
        ur = urs[t]
        np.add(xp[:, t, : 2 * H], hu[:, : 2 * H], out=ur)
        _sigmoid_inplace(ur)
        n = ns[t]
        np.multiply(ur[:, H:], hu[:, 2 * H :], out=n)
        n += xp[:, t, 2 * H :]
        np.tanh(n, out=n)
        hn = hs[t + 1]
        np.subtract(h, n, out=hn)
        hn *= ur[:, :H]
        hn += n
    out = Tensor(hs[W].copy(), dtype=dt)

    def bwd(g):
        dxp = np.empty((W, B, 3 * H), dt)
        dhu = np.empty((W, B, 3 * H), dt)
        dh = np.asarray(g, dtype=dt)
        UT = U.T
        for t in range(W - 1, -1, -1):
            h, hu, ur, n = hs[t], hus[t], urs[t], ns[t]
            u, r = ur[:, :H], ur[:, H:]
            dg = dxp[t]
            dan = dg[:, 2 * H :]
            np.multiply(dh, 1 - u, out=dan)
            dan *= 1 - n * n
            dg[:, :H] = dh * (h - n)
            np.multiply(dan, hu[:, 2 * H :], out=dg[:, H : 2 * H])
            dg[:, : 2 * H] *= ur * (1 - ur)
            d = dhu[t]
            d[:, : 2 * H] = dg[:, : 2 * H]
            np.multiply(dan, r, out=d[:, 2 * H :])
            if t:
                dh = dh * u + d @ UT
        flat = dxp.reshape(W * B, 3 * H)
        d_u = hs[:W].reshape(W * B, H).T @ dhu.reshape(W * B, 3 * H)
        xt = xs.transpose(1, 0, 2).reshape(W * B, F)
        d_w = xt.T @ flat
        d_b = flat.sum(axis=0)
        if x.requires_grad:
            dx = (flat @ w_in.data.T).reshape(W, B, F).transpose(1, 0, 2)
            if reverse:
                dx = dx[:, ::-1]
        else:
            dx = None
        return (dx, d_w, d_u, d_b)

    return _record((x, w_in, w_hh, bias), out, bwd)


def bigru_last_states(
    x: Tensor,
    fwd: tuple[Tensor, Tensor, Tensor],
    bwd_dir: tuple[Tensor, Tensor, Tensor],
) -> Tensor:
    """Both GRU directions in one loop; returns ``[h_forward, h_backward]`` (B x 2H).

    ``fwd`` and ``bwd_dir`` are ``(w_in, w_hh, bias)`` triples as in
    :func:`gru_last_state`.  Numerically identical to two separate calls
    followed by a concat, but each numpy call covers both directions, which
    halves the per-step interpreter overhead at small batch sizes.
    """
    xd = x.data
    if xd.ndim != 3:
        raise DimensionError(f"gru input must be B x W x F, got {xd.shape}")
    B, W, F = xd.shape
    H = fwd[1].shape[0]
    for w_in, w_hh, bias in (fwd, bwd_dir):
        if w_in.shape != (F, 3 * H) or w_hh.shape != (H, 3 * H) or bias.shape != (3 * H,):
            raise DimensionError(
                f"gru parameter shapes {w_in.shape}, {w_hh.shape}, {bias.shape} do not fit input {xd.shape}"
            )
    dt = xd.dtype
    # time-major, direction second: (W, 2, B, F)
    xt = np.stack([xd, xd[:, ::-1]]).transpose(2, 0, 1, 3)
    Win = np.stack([fwd[0].data, bwd_dir[0].data])
    U = np.stack([fwd[1].data, bwd_dir[1].data])
    bias = np.stack([fwd[2].data, bwd_dir[2].data])
    xp = np.matmul(xt, Win) + bias[:, None, :]
    hs = np.zeros((W + 1, 2, B, H), dt)
    hus = np.empty((W, 2, B, 3 * H), dt)
    urs = np.empty((W, 2, B, 2 * H), dt)
    ns = np.empty((W, 2, B, H), dt)
    hus[0] = 0
    for t in range(W):
        h = hs[t]
        hu = hus[t] if t == 0 else np.matmul(h, U, out=hus[t])
        ur = urs[t]
        np.add(xp[t, ..., : 2 * H], hu[..., : 2 * H], out=ur)
        _sigmoid_inplace(ur)
        n = ns[t]
        np.multiply(ur[..., H:], hu[..., 2 * H :], out=n)
        n += xp[t, ..., 2 * H :]
        np.tanh(n, out=n)
        hn = hs[t + 1]
        np.subtract(h, n, out=hn)
        hn *= ur[..., :H]
        hn += n
    out = Tensor(np.concatenate([hs[W, 0], hs[W, 1]], axis=1), dtype=dt)

    def bwd(g):
        g = np.asarray(g, dtype=dt)
        dxp = np.empty((W, 2, B, 3 * H), dt)
        dhu = np.empty((W, 2, B, 3 * H), dt)
        dh = np.stack([g[:, :H], g[:, H:]])
        UT = U.transpose(0, 2, 1)
        for t in range(W - 1, -1, -1):
            h, hu, ur, n = hs[t], hus[t], urs[t], ns[t]
            u, r = ur[..., :H], ur[..., H:]
            dg = dxp[t]
            dan = dg[..., 2 * H :]
            np.multiply(dh, 1 - u, out=dan)
            dan *= 1 - n * n
            dg[..., :H] = dh * (h - n)
            np.multiply(dan, hu[..., 2 * H :], out=dg[..., H : 2 * H])
            dg[..., : 2 * H] *= ur * (1 - ur)
            d = dhu[t]
            d[..., : 2 * H] = dg[..., : 2 * H]
            np.multiply(dan, r, out=d[..., 2 * H :])
            if t:
                dh = dh * u + np.matmul(d, UT)
        # per direction: (2, W*B, .)
        flat = dxp.transpose(1, 0, 2, 3).reshape(2, W * B, 3 * H)
        hflat = hs[:W].transpose(1, 0, 2, 3).reshape(2, W * B, H)
        d_u = np.matmul(hflat.transpose(0, 2, 1), dhu.transpose(1, 0, 2, 3).reshape(2, W * B, 3 * H))
        xflat = xt.transpose(1, 0, 2, 3).reshape(2, W * B, F)
        d_w = np.matmul(xflat.transpose(0, 2, 1), flat)
        d_b = flat.sum(axis=1)
        if x.requires_grad:
            dxs = np.matmul(flat, Win.transpose(0, 2, 1)).reshape(2, W, B, F).transpose(0, 2, 1, 3)
            dx = dxs[0] + dxs[1][:, ::-1]
        else:
            dx = None
        return (dx, d_w[0], d_u[0], d_b[0], d_w[1], d_u[1], d_b[1])

    return _record((x, *fwd, *bwd_dir), out, bwd)
