"""Dense 4-D tensors with a tape-based reverse-mode autodiff.

Every array is stored as float64 with exactly four extents (N, C, H, W);
lower-rank data is padded with trailing singleton extents.  Operations
executed while a :class:`Tape` is active are recorded and can be replayed
backward with :func:`backward`.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "_active_tape", default=None
)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as4d(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim > 4:
        raise ShapeError(f"tensor rank {arr.ndim} exceeds 4")
    if arr.ndim < 4:
        arr = arr.reshape(arr.shape + (1,) * (4 - arr.ndim))
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as4d(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; all routed through recorded primitives
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    name: str


@dataclass
class Tape:
    """Ordered log of recorded primitive operations.

    Use as a context manager; operations run inside the ``with`` block
    are recorded when at least one input requires a gradient.
    """

    records: list[_Record] = field(default_factory=list)
    _token: Optional[contextvars.Token] = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _record(name: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = _active_tape.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.records.append(_Record(out, tuple(inputs), backward_fn, name))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` of every gradient-requiring tensor on ``tape``.

    Gradients are recomputed from scratch on each call, so the same tape
    can be replayed for several scalar losses in turn.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(r.output) for r in tape.records}
    if id(loss) not in produced:
        raise ValueError("loss tensor was not produced by an operation on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tracked: dict[int, Tensor] = {}
    for rec in tape.records:
        tracked[id(rec.output)] = rec.output
        for t in rec.inputs:
            if t.requires_grad:
                tracked[id(t)] = t

    for rec in reversed(tape.records):
        g_out = grads.get(id(rec.output))
        if g_out is None:
            continue
        g_ins = rec.backward_fn(g_out)
        for t, g in zip(rec.inputs, g_ins):
            if g is None or not t.requires_grad:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = g if prev is None else prev + g

    for key, t in tracked.items():
        g = grads.get(key)
        t.grad = np.zeros_like(t.data) if g is None else g


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """In-place ``W <- W - lr * grad`` for every tensor in ``params``."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError(f"missing gradient for parameter {p!r}")
    for p in params:
        p.data -= lr * p.grad


# ---------------------------------------------------------------- elementwise


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from None
    return _record(
        "add", out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from None
    return _record(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    return _record("scale", a.data * factor, (a,), lambda g: (g * factor,))


def tensor_sum(a: Tensor) -> Tensor:
    return _record("sum", np.array(a.data.sum()), (a,), lambda g: (np.full_like(a.data, g.item()),))


def sum_squares_half(a: Tensor) -> Tensor:
    """0.5 * sum(a**2) as a scalar tensor."""
    return _record("sumsq", np.array(0.5 * np.sum(a.data * a.data)), (a,), lambda g: (g.item() * a.data,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def select_channels(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather channels ``index`` along axis 1."""
    index = np.asarray(index, dtype=np.intp)

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[:, index] = g
        return (dx,)

    return _record("select", x.data[:, index], (x,), bwd)


# ---------------------------------------------------------------- convolution


def _out_extent(size: int, k: int, stride: int, padding: int, what: str, strict: bool = True) -> int:
    span = size + 2 * padding - k
    if span < 0 or (strict and span % stride):
        raise ShapeError(
            f"{what}: extent {size} with kernel {k}, stride {stride}, padding {padding} "
            "does not give an integral output extent"
        )
    return span // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) strided view
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0, strict: bool = True) -> Tensor:
    """Cross-correlation ``out[i, j] = sum_k x[i, k] * weight[j, k]`` (no bias).

    With ``strict`` a stride that does not tile the padded input exactly is
    rejected; otherwise trailing rows/columns are dropped (floor semantics).
    """
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    n_in, c_in, h_in, w_in = x.shape
    n_out, c_w, kh, kw = weight.shape
    if c_in != c_w:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}"
        )
    ho = _out_extent(h_in, kh, stride, padding, "conv2d height", strict)
    wo = _out_extent(w_in, kw, stride, padding, "conv2d width", strict)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # im2col buffer laid out (N, C, kh, kw, Ho, Wo): plain block copies, no transposes
    cols = np.empty((n_in, c_in, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols3 = cols.reshape(n_in, c_in * kh * kw, ho * wo)
    w_m = weight.data.reshape(n_out, c_in * kh * kw)
    out = (w_m @ cols3).reshape(n_in, n_out, ho, wo)

    def bwd(g):
        g3 = g.reshape(n_in, n_out, ho * wo)
        dw = None
        if weight.requires_grad:
            dw = np.einsum("nop,nkp->ok", g3, cols3, optimize=True).reshape(weight.shape)
        dx = None
        if x.requires_grad:
            dcols = (w_m.T @ g3).reshape(n_in, c_in, kh, kw, ho, wo)
            dxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, padding:padding + h_in, padding:padding + w_in] if padding else dxp
        return dx, dw

    return _record("conv2d", out, (x, weight), bwd)


def max_pool(x: Tensor, window: int, stride: int, strict: bool = True) -> Tensor:
    if window < 1 or stride < 1:
        raise ValueError(f"invalid window={window} / stride={stride}")
    n, c, h, w = x.shape
    ho = _out_extent(h, window, stride, 0, "max_pool height", strict)
    wo = _out_extent(w, window, stride, 0, "max_pool width", strict)
    win = _windows(x.data, window, window, stride)[:, :, :ho, :wo].reshape(n, c, ho, wo, window * window)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        dx = np.zeros_like(x.data)
        for i in range(window):
            for j in range(window):
                hit = arg == i * window + j
                dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * hit
        return (dx,)

    return _record("max_pool", out, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h * w == 0:
        raise ShapeError(f"global_avg_pool needs a non-empty spatial extent, got {x.shape}")
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _record("gap", out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


def fully_connected(x: Tensor, theta: Tensor) -> Tensor:
    """Per-sample product ``x[i] @ theta`` for ``x`` [N,d,1,1], ``theta`` [d,m,1,1]."""
    if x.shape[2:] != (1, 1) or theta.shape[2:] != (1, 1):
        raise ShapeError(f"fully_connected expects [N,d,1,1] and [d,m,1,1], got {x.shape}, {theta.shape}")
    if x.shape[1] != theta.shape[0]:
        raise ShapeError(f"fully_connected inner extent mismatch: input {x.shape} vs theta {theta.shape}")
    xm = x.data[:, :, 0, 0]
    tm = theta.data[:, :, 0, 0]
    out = (xm @ tm)[:, :, None, None]

    def bwd(g):
        gm = g[:, :, 0, 0]
        return (gm @ tm.T)[:, :, None, None], (xm.T @ gm)[:, :, None, None]

    return _record("fc", out, (x, theta), bwd)


# ---------------------------------------------------------------- normalization


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
    training: bool = True,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the mini-batch moments over (N, H, W) are used and the
    running buffers (if given) are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.  In eval mode
    the running buffers are used and the op is affine in ``x``.
    """
    n, c, h, w = x.shape
    if gamma.data.size != c or beta.data.size != c:
        raise ShapeError(f"batch_norm parameters of length {gamma.data.size}/{beta.data.size} for {c} channels")
    m = n * h * w
    if m == 0:
        raise ShapeError(f"batch_norm over an empty channel slice: {x.shape}")
    g4 = gamma.data.reshape(1, c, 1, 1)
    b4 = beta.data.reshape(1, c, 1, 1)

    if training:
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mean
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        if running_mean is not None:
            running_mean *= momentum
            running_mean += (1 - momentum) * mean.reshape(-1)
        if running_var is not None:
            unbiased = var.reshape(-1) * (m / (m - 1) if m > 1 else 1.0)
            running_var *= momentum
            running_var += (1 - momentum) * unbiased
    else:
        if running_mean is None or running_var is None:
            raise ValueError("eval-mode batch_norm needs running statistics")
        mean = running_mean.reshape(1, c, 1, 1)
        var = running_var.reshape(1, c, 1, 1)
        xc = x.data - mean
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = g4 * xhat + b4

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)).reshape(gamma.shape)
        dbeta = g.sum(axis=(0, 2, 3)).reshape(beta.shape)
        dxhat = g * g4
        if training:
            dx = inv / m * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return _record("batch_norm", out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------- losses


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    n, m = logits.shape[:2]
    if logits.shape[2:] != (1, 1):
        raise ShapeError(f"logits must be [N,m,1,1], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} samples")
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise ValueError(f"labels must lie in [0, {m}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data[:, :, 0, 0]
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bwd(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return ((g.item() / n) * p)[:, :, None, None],

    return _record("softmax_ce", np.array(loss), (logits,), bwd)


def mean_squared_half(a: Tensor, b: Tensor, q: int) -> Tensor:
    """``sum((a - b)**2) / (2 q)``."""
    if a.shape != b.shape:
        raise ShapeError(f"mean_squared_half shape mismatch: {a.shape} vs {b.shape}")
    if q <= 0:
        raise ValueError(f"normalizer Q must be positive, got {q}")
    diff = a.data - b.data
    val = np.sum(diff * diff) / (2 * q)

    def bwd(g):
        d = g.item() / q * diff
        return d, -d

    return _record("mse_half", np.array(val), (a, b), bwd)
