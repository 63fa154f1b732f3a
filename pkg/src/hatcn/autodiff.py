"""Small reverse-mode differentiation engine over dense float64 arrays.

Values are numpy arrays. The natural unit is a channels-by-time grid
``(C, T)``; every primitive also accepts leading batch axes so that a
mini-batch can be pushed through one graph instead of a Python loop.

The graph is rebuilt on every forward pass (define-by-run). Calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse
topological order and accumulates ``d output / d node`` into ``.grad``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the primitive's contract."""


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward: Callable[[np.ndarray], None] | None = None,
        name: str | None = None,
    ):
        self.value = np.asarray(value, dtype=DTYPE)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True).reshape(self.shape)
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from this scalar node into every ancestor."""
        if self.value.size != 1:
            raise ValueError(
                f"backward() needs a scalar output, got shape {self.shape}"
            )
        order = _topological_order(self)
        for node in order:
            if node is not self and node._backward is not None:
                node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(value, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(value, parents=parents)
    if out.requires_grad:
        out._backward = backward
    else:
        out._parents = ()
    return out


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.value + b.value, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.value - b.value, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape))

    return _make(a.value * b.value, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy's stacking/broadcasting rules (ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape))

    return _make(np.matmul(a.value, b.value), (a, b), backward)


# ---------------------------------------------------------------------------
# shape plumbing


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)

    def backward(g):
        x._accumulate(np.swapaxes(g, -1, -2))

    return _make(np.swapaxes(x.value, -1, -2), (x,), backward)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.value.reshape(shape), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(np.concatenate([t.value for t in tensors], axis=axis), tensors, backward)


def index(x, key) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``index(h, (..., -1))``."""
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.value)
        full[key] = g
        x._accumulate(full)

    return _make(x.value[key], (x,), backward)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(x.value.sum(), (x,), backward)


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.value.size

    def backward(g):
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return _make(x.value.mean(), (x,), backward)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.value)

    def backward(g):
        x._accumulate(g * (1.0 - y * y))

    return _make(y, (x,), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0

    def backward(g):
        x._accumulate(g * mask)

    return _make(np.where(mask, x.value, 0.0), (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _stable_sigmoid(x.value)

    def backward(g):
        x._accumulate(g * y * (1.0 - y))

    return _make(y, (x,), backward)


_ELEMENTWISE = {"tanh": tanh, "relu": relu, "sigmoid": sigmoid}


def elementwise(op: str, x) -> Tensor:
    """Apply one of ``tanh``, ``relu`` or ``sigmoid`` entrywise."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(x)


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    x = as_tensor(x)
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        x._accumulate(y * (g - inner))

    return _make(y, (x,), backward)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets.

    Evaluated as ``softplus(z) - y*z`` so saturated logits stay finite.
    """
    z = as_tensor(logits)
    y = np.asarray(targets, dtype=DTYPE).reshape(z.shape)
    n = z.value.size
    loss = np.logaddexp(0.0, z.value) - y * z.value

    def backward(g):
        z._accumulate(g * (_stable_sigmoid(z.value) - y) / n)

    return _make(loss.mean(), (z,), backward)


# ---------------------------------------------------------------------------
# convolution


class _ToeplitzPlan:
    """Index bookkeeping for an exact dilated causal convolution as one GEMM.

    A dilation-``d`` convolution is an undilated one on each residue
    subsequence ``x[r::d]``; those are stacked into the batch. Each
    subsequence is cut into blocks of ``S >= taps - 1`` steps, so a block's
    output only needs that block and the previous one. The blocks become
    rows of ``R`` and the kernel becomes a block-Toeplitz matrix shared by
    all rows. Entries for future time steps are exact zeros, so causality
    holds bit for bit.
    """

    def __init__(self, batch: int, c_in: int, c_out: int, steps: int, taps: int, dilation: int):
        self.batch, self.c_in, self.c_out = batch, c_in, c_out
        self.steps, self.dilation = steps, dilation
        self.sub = -(-steps // dilation)  # length of each residue subsequence
        self.taps = min(taps, self.sub)  # taps reaching past t=0 only see padding
        self.block = max(self.taps - 1, 1)
        self.blocks = -(-self.sub // self.block)
        self.seqs = batch * dilation
        v = np.arange(self.block)
        k = np.arange(self.taps)
        self.rows_u = self.block + v[None, :] - k[:, None]  # (taps, S)
        self.cols_v = np.broadcast_to(v, (self.taps, self.block))

    def split(self, v: np.ndarray, channels: int) -> np.ndarray:
        """(B, C, T) -> (B*d, sub, C) residue subsequences, channels last."""
        b, d = self.batch, self.dilation
        if self.sub * d != self.steps:
            padded = np.zeros((b, channels, self.sub * d))
            padded[..., : self.steps] = v
            v = padded
        return v.reshape(b, channels, self.sub, d).transpose(0, 3, 2, 1).reshape(self.seqs, self.sub, channels)

    def merge(self, v: np.ndarray, channels: int) -> np.ndarray:
        """Inverse of :meth:`split`."""
        b, d = self.batch, self.dilation
        out = v.reshape(b, d, self.sub, channels).transpose(0, 3, 2, 1).reshape(b, channels, self.sub * d)
        return out[..., : self.steps]

    def to_blocks(self, seq: np.ndarray, channels: int, lead_block: bool) -> np.ndarray:
        """(N, sub, C) -> (N, blocks [+1], S, C) with zero padding."""
        s, nb = self.block, self.blocks
        extra = s if lead_block else 0
        padded = np.zeros((self.seqs, extra + nb * s, channels))
        padded[:, extra : extra + self.sub] = seq
        return padded.reshape(self.seqs, nb + (1 if lead_block else 0), s, channels)

    def rows(self, x: np.ndarray) -> np.ndarray:
        blk = self.to_blocks(self.split(x, self.c_in), self.c_in, lead_block=True)
        pair = np.concatenate([blk[:, :-1], blk[:, 1:]], axis=2)  # (N, nb, 2S, C_in)
        return pair.reshape(self.seqs * self.blocks, 2 * self.block * self.c_in)

    def toeplitz(self, kernel: np.ndarray) -> np.ndarray:
        s = self.block
        t4 = np.zeros((2 * s, s, self.c_in, self.c_out))
        t4[self.rows_u, self.cols_v] = kernel[:, :, : self.taps].transpose(2, 1, 0)[:, None]
        return t4.transpose(0, 2, 1, 3).reshape(2 * s * self.c_in, s * self.c_out)

    def kernel_grad(self, g_toeplitz: np.ndarray, taps: int) -> np.ndarray:
        s = self.block
        g4 = g_toeplitz.reshape(2 * s, self.c_in, s, self.c_out).transpose(0, 2, 1, 3)
        per_tap = g4[self.rows_u, self.cols_v].sum(axis=1)  # (taps_eff, C_in, C_out)
        out = np.zeros((self.c_out, self.c_in, taps))
        out[:, :, : self.taps] = per_tap.transpose(2, 1, 0)
        return out

    def from_rows(self, y: np.ndarray, channels: int) -> np.ndarray:
        seq = y.reshape(self.seqs, self.blocks * self.block, channels)[:, : self.sub]
        return self.merge(seq, channels)

    def out_rows(self, g: np.ndarray) -> np.ndarray:
        blk = self.to_blocks(self.split(g, self.c_out), self.c_out, lead_block=False)
        return blk.reshape(self.seqs * self.blocks, self.block * self.c_out)

    def overlap_add(self, g_rows: np.ndarray) -> np.ndarray:
        s, nb = self.block, self.blocks
        pair = g_rows.reshape(self.seqs, nb, 2 * s, self.c_in)
        acc = np.zeros((self.seqs, nb + 1, s, self.c_in))
        acc[:, :-1] += pair[:, :, :s]
        acc[:, 1:] += pair[:, :, s:]
        seq = acc[:, 1:].reshape(self.seqs, nb * s, self.c_in)[:, : self.sub]
        return self.merge(seq, self.c_in)


def conv1d_causal(x, kernel, bias, dilation: int = 1) -> Tensor:
    """Dilated causal convolution, zero padded on the left by ``(l-1)*dilation``.

    ``x`` is ``(..., C_in, T)``, ``kernel`` is ``(C_out, C_in, l)`` where tap
    ``k`` multiplies the input ``k*dilation`` steps in the past, and ``bias``
    is ``(C_out,)``. The output has shape ``(..., C_out, T)``.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if dilation < 1:
        raise ShapeError(f"dilation must be >= 1, got {dilation}")
    if kernel.ndim != 3 or x.ndim < 2:
        raise ShapeError("conv1d_causal expects x (..., C_in, T) and kernel (C_out, C_in, l)")
    c_out, c_in, taps = kernel.shape
    if x.shape[-2] != c_in:
        raise ShapeError(
            f"kernel expects {c_in} input channels, input has {x.shape[-2]}"
        )
    if bias.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {bias.shape}")
    if taps < 1:
        raise ShapeError("kernel needs at least one tap")

    lead = x.shape[:-2]
    steps = x.shape[-1]
    xb = x.value.reshape(-1, c_in, steps)
    plan = _ToeplitzPlan(xb.shape[0], c_in, c_out, steps, taps, dilation)
    rows = plan.rows(xb)
    toep = plan.toeplitz(kernel.value)
    out = plan.from_rows(rows @ toep, c_out) + bias.value[:, None]

    def backward(g):
        gb = g.reshape(-1, c_out, steps)
        g_rows = plan.out_rows(gb)
        if kernel.requires_grad:
            kernel._accumulate(plan.kernel_grad(rows.T @ g_rows, taps))
        if bias.requires_grad:
            bias._accumulate(gb.sum(axis=(0, 2)))
        if x.requires_grad:
            gx = plan.overlap_add(g_rows @ toep.T)
            x._accumulate(gx.reshape(x.shape))

    return _make(out.reshape(*lead, c_out, steps), (x, kernel, bias), backward)


def numerical_gradient(
    f: Callable[[], float], param: np.ndarray, step: float = 1e-5
) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``param`` (in place)."""
    grad = np.zeros_like(param)
    flat = param.reshape(-1)
    out = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        hi = f()
        flat[j] = orig - step
        lo = f()
        flat[j] = orig
        out[j] = (hi - lo) / (2.0 * step)
    return grad
