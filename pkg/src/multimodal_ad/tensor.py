"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Only the operations needed by the angle network and the IMU autoencoders are
provided. Image ops take ``[C, H, W]`` or batched ``[N, C, H, W]`` inputs;
vector ops take ``[n]`` or batched ``[B, n]``.
"""

from __future__ import annotations

import contextlib
import weakref
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised before any computation when operand shapes are incompatible."""


class Tensor:
    """An n-d float array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic (same-shape operands or python scalars only)
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x), dtype=like.dtype)


# -- tape ------------------------------------------------------------------------


class Tape:
    """Ordered record of executed operations.

    Use as a context manager to scope recording; outside any ``with`` block
    operations go to a process-wide default tape.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        # weak, so the tape -> entries -> tensor -> tape cycle does not outlive the tape
        out._tape = weakref.ref(self)
        self.entries.append((out, inputs, backward_fn))

    def reset(self) -> None:
        self.entries.clear()

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` of every requires_grad tensor reachable from `loss`.

        Gradients accumulate into existing ``.grad`` arrays.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        tensors: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, backward_fn in reversed(self.entries):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            _accumulate(out, g)
            in_grads = backward_fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
                    tensors[key] = t
        for key, g in pending.items():
            _accumulate(tensors[key], g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


_default_tape = Tape()
_tape_stack: list[Tape] = []
_grad_enabled = [True]


def current_tape() -> Tape:
    return _tape_stack[-1] if _tape_stack else _default_tape


def default_tape() -> Tape:
    return _default_tape


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording; forward values are unchanged."""
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


def backward(loss: Tensor) -> None:
    """Run reverse accumulation on the tape that produced `loss`."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        tape = current_tape()
    else:
        tape = loss._tape()
        if tape is None:
            raise RuntimeError("the tape that recorded this loss no longer exists")
    tape.backward(loss)


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data)
    out.requires_grad = False
    out.grad = None
    out._tape = None
    if _grad_enabled[-1] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_tape().record(out, tuple(inputs), backward_fn)
    return out


# -- elementwise ---------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _result(a.data * a.data.dtype.type(s), (a,), lambda g: (g * s,))
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is taken as 0."""
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1 - y * y),))


def tsum(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _result(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                   lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _result(data, (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    """Flatten ``[C, H, W] -> [C*H*W]`` or ``[N, C, H, W] -> [N, C*H*W]``."""
    if x.ndim == 4:
        return reshape(x, (x.shape[0], -1))
    return reshape(x, (-1,))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ: {sorted(shapes)}")
    data = np.stack([t.data for t in tensors])
    return _result(data, tuple(tensors), lambda g: tuple(g[i] for i in range(len(tensors))))


def split_batch(x: Tensor, n: int) -> tuple[Tensor, Tensor]:
    """Split a batched tensor into its first `n` rows and the rest."""
    if not 0 < n < x.shape[0]:
        raise ShapeError(f"split_batch: cannot split leading axis {x.shape[0]} at {n}")
    head = _result(x.data[:n], (x,), lambda g: (np.concatenate([g, np.zeros_like(x.data[n:])]),))
    tail = _result(x.data[n:], (x,), lambda g: (np.concatenate([np.zeros_like(x.data[:n]), g]),))
    return head, tail


def concat_batch(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_batch: trailing shapes {a.shape} and {b.shape} differ")
    n = a.shape[0]
    return _result(np.concatenate([a.data, b.data]), (a, b), lambda g: (g[:n], g[n:]))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack along the channel axis: ``[C1,H,W] + [C2,H,W] -> [C1+C2,H,W]`` (batched too)."""
    if a.ndim != b.ndim or a.ndim not in (3, 4) or a.shape[-2:] != b.shape[-2:] \
            or a.shape[:-3] != b.shape[:-3]:
        raise ShapeError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    c1 = a.shape[-3]
    data = np.concatenate([a.data, b.data], axis=-3)
    return _result(data, (a, b), lambda g: (g[..., :c1, :, :], g[..., c1:, :, :]))


# -- layers --------------------------------------------------------------------


def _pad_amount(padding, kh: int, kw: int) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"'same' padding needs odd kernel sizes, got {kh}x{kw}")
        return kh // 2, kw // 2
    raise ValueError(f"unknown padding mode {padding!r}")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, padding: str = "valid") -> Tensor:
    """Stride-1 cross-correlation.

    x: ``[C_in, H, W]`` or ``[N, C_in, H, W]``; kernels: ``[C_out, C_in, kH, kW]``;
    bias: ``[C_out]``.
    """
    if x.ndim not in (3, 4) or kernels.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape} / kernels {kernels.shape} have wrong rank")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    co, ci, kh, kw = kernels.shape
    if ci != c:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels, kernels {kernels.shape} expect {ci}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match kernels {kernels.shape}")
    ph, pw = _pad_amount(padding, kh, kw)
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError(f"conv2d: kernels {kernels.shape} larger than input {x.shape}")

    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    # columns laid out as [N, (c, di, dj), (i, j)] so one batched matmul lands in NCHW
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, di, dj] = xp[:, :, di:di + ho, dj:dj + wo]
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    wmat = kernels.data.reshape(co, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, co, ho, wo)
    out = out if batched else out[0]

    def backward_fn(g):
        g3 = (g if batched else g[None]).reshape(n, co, ho * wo)
        gk = gb = gx = None
        if kernels.requires_grad:
            gk = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(kernels.shape)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g3).reshape(n, c, kh, kw, ho, wo)
            dxp = np.zeros(xp.shape, dtype=dcols.dtype)
            for di in range(kh):
                for dj in range(kw):
                    dxp[:, :, di:di + ho, dj:dj + wo] += dcols[:, :, di, dj]
            gx = dxp[:, :, ph:ph + h, pw:pw + w]
            gx = gx if batched else gx[0]
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, kernels, bias) if bias is not None else (x, kernels)
    return _result(out, inputs, backward_fn)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2.

    The gradient goes to the first maximal element of each window in
    row-major order.
    """
    if x.ndim not in (3, 4):
        raise ShapeError(f"maxpool2d: expected [C,H,W] or [N,C,H,W], got {x.shape}")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: spatial dims must be even, got {x.shape}")
    xd = x.data
    # window elements in row-major order: top-left, top-right, bottom-left, bottom-right
    quads = (xd[..., 0::2, 0::2], xd[..., 0::2, 1::2], xd[..., 1::2, 0::2], xd[..., 1::2, 1::2])
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    taken = np.zeros(out.shape, dtype=bool)
    masks = []
    for q in quads:
        m = (q == out) & ~taken
        taken |= m
        masks.append(m)

    def backward_fn(g):
        gx = np.empty(x.shape, dtype=g.dtype)
        gx[..., 0::2, 0::2] = g * masks[0]
        gx[..., 0::2, 1::2] = g * masks[1]
        gx[..., 1::2, 0::2] = g * masks[2]
        gx[..., 1::2, 1::2] = g * masks[3]
        return (gx,)

    return _result(out, (x,), backward_fn)


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``W x + b``; x is ``[n]`` or ``[B, n]``, W is ``[m, n]``."""
    if weights.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    if bias is not None and bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense: bias {bias.shape} incompatible with weights {weights.shape}")
    out = x.data @ weights.data.T
    if bias is not None:
        out = out + bias.data

    def backward_fn(g):
        gx = g @ weights.data if x.requires_grad else None
        gw = None
        if weights.requires_grad:
            gw = np.outer(g, x.data) if x.ndim == 1 else g.T @ x.data
        gb = None
        if bias is not None and bias.requires_grad:
            gb = g if x.ndim == 1 else g.sum(axis=0)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weights, bias) if bias is not None else (x, weights)
    return _result(out, inputs, backward_fn)


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over all elements. `target` receives no gradient."""
    if isinstance(target, Tensor):
        if target.requires_grad:
            raise ValueError("mse: target must not require gradients")
        target = target.data
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: pred {pred.shape} and target {target.shape} differ")
    diff = pred.data - target.astype(pred.dtype)
    n = diff.size
    value = np.asarray(np.mean(diff * diff), dtype=pred.dtype)
    return _result(value, (pred,), lambda g: (g * (2.0 / n) * diff,))
