"""Dense float tensors with reverse-mode automatic differentiation.

Everything numeric in the package flows through the `Tensor` type defined
here: a C-contiguous numpy array plus an optional link into the active
`GradTape`. Operations are plain functions; each one computes its result with
numpy and, when a tape is active and some input requires grad, appends a node
holding the backward rule. `backward(loss)` replays the tape in reverse and
accumulates gradients into the requires-grad leaves.

Design constraints honoured throughout:
  * float32 by default; every kernel follows its input dtype so tests can run
    the same code in float64 for finite-difference oracles,
  * tensors are immutable after creation except for `.grad` accumulation and
    explicit in-place optimizer updates between steps,
  * the tape is append-only, so node order is already topological.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .macs import counter

DEFAULT_DTYPE = np.float32

_active_tape: "GradTape | None" = None


class TapeNode:
    """One recorded operation: inputs, output, and how to push grads back."""

    __slots__ = ("op", "inputs", "out", "backward_fn")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], out: "Tensor",
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class GradTape:
    """Append-only record of differentiable operations for one forward pass."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def append(self, node: TapeNode) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def __enter__(self) -> "GradTape":
        global _active_tape
        if _active_tape is not None:
            raise ContractError("a gradient tape is already active")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False


def active_tape() -> GradTape | None:
    return _active_tape


class Tensor:
    """Dense n-dimensional float array, optionally tracked on a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "tape", "tape_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray):
            arr = data if data.dtype.kind == "f" else data.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape: GradTape | None = None
        self.tape_node: int | None = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def is_leaf(self) -> bool:
        return self.tape_node is None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


# -- tape plumbing ----------------------------------------------------------


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
            backward_fn) -> Tensor:
    """Build the output tensor and register the op on the active tape."""
    out = Tensor(out_data)
    tape = _active_tape
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        out.tape_node = tape.append(TapeNode(op, inputs, out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every requires-grad leaf reachable from `loss`.

    `loss` must be scalar and must have been produced under a tape. Repeated
    calls accumulate into leaf grads; zero them between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss.tape is None or loss.tape_node is None:
        raise ContractError("loss was not produced under an active gradient tape")
    tape = loss.tape
    # Keyed by id(); safe because tape nodes hold strong refs to every tensor.
    buffers: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    for node in reversed(tape.nodes[: loss.tape_node + 1]):
        g_out = buffers.pop(id(node.out), None)
        if g_out is None:
            continue  # node not on a path to the loss
        grads = node.backward_fn(g_out)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp.tape_node is None:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += g
            elif key in buffers:
                buffers[key] = buffers[key] + g
            else:
                buffers[key] = g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# -- core operations --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched row-major matrix product with broadcastable leading dims."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(
            f"matmul inner dims disagree: {ad.shape} @ {bd.shape}")
    try:
        out = np.matmul(ad, bd)
    except ValueError as e:
        raise DimensionError(f"matmul batch dims not broadcastable: "
                             f"{ad.shape} @ {bd.shape}") from e
    if counter.enabled:
        batch = int(np.prod(out.shape[:-2], dtype=np.int64)) if out.ndim > 2 else 1
        counter.add(batch * out.shape[-2] * ad.shape[-1] * out.shape[-1])

    def backward_fn(g):
        ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), bd.shape)
        return ga, gb

    return _record("matmul", (a, b), out, backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as e:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} "
                             f"do not broadcast") from e

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError as e:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} "
                             f"do not broadcast") from e

    def backward_fn(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _record("sub", (a, b), out, backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    try:
        out = ad * bd
    except ValueError as e:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} "
                             f"do not broadcast") from e
    if counter.enabled:
        counter.add(out.size)

    def backward_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record("mul", (a, b), out, backward_fn)


def neg(x: Tensor) -> Tensor:
    return _record("neg", (x,), -x.data, lambda g: (-g,))


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record("scale", (x,), x.data * np.asarray(s, dtype=x.dtype),
                   lambda g: (g * s,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record("exp", (x,), out, lambda g: (g * out,))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), linear above 20 to dodge overflow."""
    xd = x.data
    out = np.where(xd > 20.0, xd, np.log1p(np.exp(np.minimum(xd, 20.0))))
    sig = 1.0 / (1.0 + np.exp(-np.clip(xd, -60.0, 60.0)))

    def backward_fn(g):
        return (g * sig,)

    return _record("softplus", (x,), out.astype(xd.dtype, copy=False), backward_fn)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-np.clip(xd, -60.0, 60.0)))
    out = xd * sig

    def backward_fn(g):
        return (g * (sig * (1.0 + xd * (1.0 - sig))),)

    return _record("silu", (x,), out.astype(xd.dtype, copy=False), backward_fn)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Max-subtracted softmax along `axis`; finite for any finite input."""
    xd = x.data
    if not -xd.ndim <= axis < xd.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        # dx = y * (g - sum(g * y, axis))
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", (x,), out, backward_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    xd = x.data
    d = xd.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} "
                             f"do not match feature dim {d}")
    mean = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    out = xhat * gamma.data + beta.data
    if counter.enabled:
        counter.add(2 * out.size)

    def backward_fn(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _record("layer_norm", (x, gamma, beta), out.astype(xd.dtype, copy=False),
                   backward_fn)


def mean_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    xd = x.data
    if not -xd.ndim <= axis < xd.ndim:
        raise DimensionError(f"mean_axis axis {axis} out of range for shape {x.shape}")
    axis = axis % xd.ndim
    n = xd.shape[axis]
    out = xd.mean(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, xd.shape).astype(xd.dtype, copy=False),)

    return _record("mean_axis", (x,), out, backward_fn)


def sum_all(x: Tensor) -> Tensor:
    out = x.data.sum()

    def backward_fn(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)

    return _record("sum_all", (x,), np.asarray(out), backward_fn)


def dropout(x: Tensor, p: float, rng: np.random.Generator,
            training: bool = True) -> Tensor:
    """Zero entries with probability p and rescale by 1/(1-p) while training."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    factor = 1.0 / (1.0 - p)
    out = x.data * keep * np.asarray(factor, dtype=x.dtype)

    def backward_fn(g):
        return (g * keep * factor,)

    return _record("dropout", (x,), out, backward_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from e

    def backward_fn(g):
        return (g.reshape(x.shape),)

    return _record("reshape", (x,), np.ascontiguousarray(out), backward_fn)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose axes {axes} invalid for rank {x.ndim}")
    inv = np.argsort(axes)

    def backward_fn(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _record("transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)),
                   backward_fn)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`."""
    axis = axis % x.ndim
    if start < 0 or start + length > x.shape[axis]:
        raise DimensionError(f"narrow [{start}:{start + length}] exceeds axis "
                             f"{axis} of shape {x.shape}")
    idx = tuple(slice(None) if i != axis else slice(start, start + length)
                for i in range(x.ndim))

    def backward_fn(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _record("narrow", (x,), np.ascontiguousarray(x.data[idx]), backward_fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ContractError("embedding ids must be integers")
    out = table.data[ids]

    def backward_fn(g):
        dtable = np.zeros_like(table.data)
        np.add.at(dtable, ids.reshape(-1),
                  g.reshape(-1, table.shape[-1]))
        return (dtable,)

    return _record("embedding", (table,), out, backward_fn)


def causal_depthwise_conv(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel causal 1-d convolution.

    x: (batch, length, channels); w: (channels, k). Output[t] mixes inputs
    t-k+1 .. t (left zero padding), so position t never sees the future.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 3 or wd.ndim != 2 or xd.shape[2] != wd.shape[0]:
        raise DimensionError(f"conv expects x (b,l,c) and w (c,k); "
                             f"got {x.shape} and {w.shape}")
    b, l, c = xd.shape
    k = wd.shape[1]
    xp = np.zeros((b, l + k - 1, c), dtype=xd.dtype)
    xp[:, k - 1:, :] = xd
    out = np.zeros((b, l, c), dtype=xd.dtype)
    for j in range(k):
        out += xp[:, j:j + l, :] * wd[:, j]
    if counter.enabled:
        counter.add(b * l * c * k)

    def backward_fn(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(wd)
        for j in range(k):
            dxp[:, j:j + l, :] += g * wd[:, j]
            dw[:, j] = (g * xp[:, j:j + l, :]).sum(axis=(0, 1))
        return dxp[:, k - 1:, :], dw

    return _record("conv", (x, w), out, backward_fn)


def ssm_scan(a_bar: Tensor, b_u: Tensor, c: Tensor) -> Tensor:
    """Linear recurrence over time with per-step readout.

        h_t = a_bar_t * h_{t-1} + b_u_t        (h_{-1} = 0, elementwise)
        y_t[d] = sum_s h_t[d, s] * c_t[s]

    a_bar, b_u: (batch, length, channels, state); c: (batch, length, state);
    returns y: (batch, length, channels). Strictly causal by construction.
    """
    ad, bd, cd = a_bar.data, b_u.data, c.data
    if ad.shape != bd.shape or ad.ndim != 4:
        raise DimensionError(f"scan coefficient shapes disagree: {a_bar.shape} "
                             f"vs {b_u.shape}")
    B, L, D, S = ad.shape
    if cd.shape != (B, L, S):
        raise DimensionError(f"scan readout shape {c.shape} does not match "
                             f"(batch={B}, length={L}, state={S})")
    h = np.zeros((B, L, D, S), dtype=ad.dtype)
    prev = np.zeros((B, D, S), dtype=ad.dtype)
    for t in range(L):
        prev = ad[:, t] * prev + bd[:, t]
        h[:, t] = prev
    y = np.einsum("blds,bls->bld", h, cd)
    if counter.enabled:
        counter.add(2 * B * L * D * S)  # state update and readout, 1 MAC each

    def backward_fn(g):
        # lam_t = dLoss/dh_t, swept backwards through the recurrence
        da = np.zeros_like(ad)
        db = np.zeros_like(bd)
        dc = np.einsum("bld,blds->bls", g, h)
        lam = np.zeros((B, D, S), dtype=ad.dtype)
        for t in range(L - 1, -1, -1):
            lam = lam + g[:, t, :, None] * cd[:, t, None, :]
            db[:, t] = lam
            if t > 0:
                da[:, t] = lam * h[:, t - 1]
                lam = lam * ad[:, t]
            # h_{-1} = 0, so da[:, 0] stays zero
        return da, db, dc

    return _record("ssm_scan", (a_bar, b_u, c), y, backward_fn)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood in nats over all positions.

    logits: (..., V); targets: integer array matching the leading shape.
    """
    ld = logits.data
    targets = np.asarray(targets)
    if targets.shape != ld.shape[:-1]:
        raise DimensionError(f"targets shape {targets.shape} does not match "
                             f"logits {logits.shape}")
    flat = ld.reshape(-1, ld.shape[-1])
    idx = targets.reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= flat.shape[1]):
        raise ContractError("target id outside vocabulary")
    m = flat.max(axis=1, keepdims=True)
    e = np.exp(flat - m)
    z = e.sum(axis=1, keepdims=True)
    p = e / z
    nll = (np.log(z.squeeze(1)) + m.squeeze(1) - flat[np.arange(idx.size), idx])
    out = np.asarray(nll.mean(), dtype=ld.dtype)

    def backward_fn(g):
        dflat = p.copy()
        dflat[np.arange(idx.size), idx] -= 1.0
        dflat *= g / idx.size
        return (dflat.reshape(ld.shape).astype(ld.dtype, copy=False),)

    return _record("cross_entropy", (logits,), out, backward_fn)


# -- validation utilities ----------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    Runs `f` in float64 regardless of the input dtype; the relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) per coordinate.
    """
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    with GradTape():
        loss = f(x64)
        if loss.size != 1:
            raise ContractError("grad_check requires a scalar-valued function")
        backward(loss)
    analytic = x64.grad if x64.grad is not None else np.zeros_like(x64.data)

    numeric = np.zeros_like(x64.data)
    flat = x64.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x64.data, dtype=np.float64)).item()
        flat[i] = orig - h
        fm = f(Tensor(x64.data, dtype=np.float64)).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
