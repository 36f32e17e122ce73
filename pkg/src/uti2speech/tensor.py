"""Dense float64 tensors, reverse-mode differentiation, and Adam.

Tensors are immutable value objects; every operation below is a pure
function of its inputs.  When a ``GradTape`` is active, operations whose
inputs are watched record a vector-Jacobian closure so the tape can run
the chain rule backwards from a scalar loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "Tensor",
    "GradTape",
    "backward",
    "AdamState",
    "adam_step",
    "BatchNormState",
    "add",
    "sub",
    "mul",
    "neg",
    "relu",
    "tanh",
    "swish",
    "matmul",
    "dense",
    "mean",
    "tsum",
    "reshape",
    "transpose",
    "conv2d",
    "conv3d",
    "zero_pad2d",
    "max_pool2d",
    "batch_norm",
]

# Cap on elements of the transient patch buffer used by conv forward
# (64 MiB of float64); larger batches are processed in chunks.
_CONV_CHUNK_ELEMS = 8_388_608


class Tensor:
    """Immutable N-dimensional float64 array with positive extents."""

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if any(n <= 0 for n in arr.shape):
            raise ValueError(f"tensor extents must be positive, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path: ops guarantee finiteness for finite inputs.
        t = object.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if arr.flags["WRITEABLE"]:
            arr.setflags(write=False)
        t._data = arr
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def item(self) -> float:
        return float(self._data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


# ---------------------------------------------------------------------------
# Gradient tape


class GradTape:
    """Ordered record of primitive ops applied while the tape is active.

    Only results that depend on watched tensors are recorded.  Network
    parameters are watched automatically by the model forward passes;
    anything else is a constant to the tape.
    """

    def __init__(self):
        self._records: list[tuple[int, tuple[int, ...], Callable]] = []
        self._keepalive: list[tuple] = []
        self._watched: set[int] = set()

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPES.pop()
        return False

    def watch(self, tensors: Iterable[Tensor]) -> None:
        for t in tensors:
            self._watched.add(id(t))

    def watches(self, t: Tensor) -> bool:
        return id(t) in self._watched

    def _record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        self._watched.add(id(out))
        self._records.append((id(out), tuple(id(x) for x in inputs), vjp))
        self._keepalive.append((out, tuple(inputs)))

    def adjoints(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Run the recorded ops in reverse; return adjoint per tensor id."""
        if loss.shape != ():
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        for out_id, in_ids, vjp in reversed(self._records):
            g = grads.get(out_id)
            if g is None:
                continue
            for in_id, gi in zip(in_ids, vjp(g)):
                if gi is None:
                    continue
                acc = grads.get(in_id)
                grads[in_id] = gi if acc is None else acc + gi
        return grads

    def gradients(self, loss: Tensor, params: dict[str, Tensor]) -> dict[str, Tensor]:
        """Gradient of ``loss`` for every named parameter.

        Parameters that did not participate in the loss get exact zeros.
        """
        adj = self.adjoints(loss)
        out = {}
        for name, p in params.items():
            g = adj.get(id(p))
            if g is None:
                g = np.zeros(p.shape)
            out[name] = Tensor._wrap(np.asarray(g, dtype=np.float64).reshape(p.shape))
        return out


_TAPES: list[GradTape] = []


def _active_tape() -> GradTape | None:
    return _TAPES[-1] if _TAPES else None


def _tape_for(*inputs: Tensor) -> GradTape | None:
    tape = _active_tape()
    if tape is None:
        return None
    return tape if any(tape.watches(x) for x in inputs) else None


def backward(loss: Tensor, tape: GradTape, params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Reverse-mode gradients of a scalar loss for each named parameter."""
    return tape.gradients(loss, params)


# ---------------------------------------------------------------------------
# Elementwise and reduction primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        out = Tensor._wrap(a.data + b.data)
        tape = _tape_for(a, b)
        if tape:
            sa, sb = a.shape, b.shape
            tape._record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))
        return out
    out = Tensor._wrap(a.data + float(b))
    tape = _tape_for(a)
    if tape:
        tape._record(out, (a,), lambda g: (g,))
    return out


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        out = Tensor._wrap(a.data - b.data)
        tape = _tape_for(a, b)
        if tape:
            sa, sb = a.shape, b.shape
            tape._record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))
        return out
    return add(a, -float(b))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        out = Tensor._wrap(a.data * b.data)
        tape = _tape_for(a, b)
        if tape:
            ad, bd, sa, sb = a.data, b.data, a.shape, b.shape
            tape._record(
                out, (a, b), lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb))
            )
        return out
    c = float(b)
    out = Tensor._wrap(a.data * c)
    tape = _tape_for(a)
    if tape:
        tape._record(out, (a,), lambda g: (g * c,))
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor._wrap(-a.data)
    tape = _tape_for(a)
    if tape:
        tape._record(out, (a,), lambda g: (-g,))
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.maximum(a.data, 0.0))
    tape = _tape_for(a)
    if tape:
        mask = a.data > 0.0
        tape._record(out, (a,), lambda g: (g * mask,))
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor._wrap(y)
    tape = _tape_for(a)
    if tape:
        tape._record(out, (a,), lambda g: (g * (1.0 - y * y),))
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: single pass, saturates cleanly for large |x|.
    return 0.5 * np.tanh(0.5 * x) + 0.5


def swish(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = Tensor._wrap(a.data * s)
    tape = _tape_for(a)
    if tape:
        deriv = s * (1.0 + a.data * (1.0 - s))
        tape._record(out, (a,), lambda g: (g * deriv,))
    return out


def tsum(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.asarray(a.data.sum()))
    tape = _tape_for(a)
    if tape:
        shape = a.shape
        tape._record(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    return out


def mean(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.asarray(a.data.mean()))
    tape = _tape_for(a)
    if tape:
        shape, n = a.shape, a.size
        tape._record(out, (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor._wrap(a.data.reshape(shape))
    tape = _tape_for(a)
    if tape:
        old = a.shape
        tape._record(out, (a,), lambda g: (g.reshape(old),))
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = Tensor._wrap(np.ascontiguousarray(a.data.transpose(axes)))
    tape = _tape_for(a)
    if tape:
        inv = tuple(np.argsort(axes))
        tape._record(out, (a,), lambda g: (g.transpose(inv),))
    return out


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """``a [..., N] @ w [N, M] -> [..., M]``."""
    if w.ndim != 2 or a.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {w.shape}")
    out = Tensor._wrap(a.data @ w.data)
    tape = _tape_for(a, w)
    if tape:
        ad, wd = a.data, w.data

        def vjp(g):
            ga = g @ wd.T
            gw = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gw

        tape._record(out, (a, w), vjp)
    return out


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on the last axis; leading axes are treated as batch."""
    y = matmul(x, weights)
    return add(y, bias) if bias is not None else y


# ---------------------------------------------------------------------------
# Convolution


def _axis_geometry(extent: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Output extent and (before, after) zero padding for one axis."""
    if padding == "same":
        out = -(-extent // stride)
        total = max((out - 1) * stride + k - extent, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        if k > extent:
            raise ValueError(f"kernel extent {k} exceeds input extent {extent} (valid padding)")
        return (extent - k) // stride + 1, 0, 0
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _conv_geometry(spatial, kernel, stride, padding):
    outs, pads = [], []
    for n, k, s in zip(spatial, kernel, stride):
        o, pb, pa = _axis_geometry(n, k, s, padding)
        if padding == "same" and k > n + pb + pa:
            raise ValueError(f"kernel extent {k} exceeds padded input extent {n + pb + pa}")
        outs.append(o)
        pads.append((pb, pa))
    return tuple(outs), tuple(pads)


def _patch_view(xp: np.ndarray, outs, kernel, stride) -> np.ndarray:
    """Strided window view [B, *outs, *kernel, Cin] over the padded input."""
    nd = len(kernel)
    b_str, *sp_str, c_str = xp.strides
    shape = (xp.shape[0], *outs, *kernel, xp.shape[-1])
    strides = (b_str, *[sp_str[i] * stride[i] for i in range(nd)], *sp_str, c_str)
    return as_strided(xp, shape=shape, strides=strides)


def _conv_forward(xp: np.ndarray, w: np.ndarray, outs, stride) -> np.ndarray:
    """Convolution of the already padded input via chunked patch GEMMs."""
    nd = w.ndim - 2
    k_axes = list(range(nd + 1, 2 * nd + 2))
    per_example = int(np.prod(outs)) * int(np.prod(w.shape[: nd + 1]))
    chunk = max(1, _CONV_CHUNK_ELEMS // max(per_example, 1))
    parts = []
    for lo in range(0, xp.shape[0], chunk):
        view = _patch_view(xp[lo : lo + chunk], outs, w.shape[:nd], stride)
        parts.append(np.tensordot(view, w, axes=(k_axes, list(range(nd + 1)))))
    return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=0)


def _conv_backward(g, xp, w, outs, pads, stride, need_dx=True, need_dw=True):
    """Gradients for input and kernels; looping over kernel offsets keeps
    memory at one input-sized buffer."""
    nd = w.ndim - 2
    dw = None
    batch_out_axes = list(range(nd + 1))
    if need_dw:
        per_example = int(np.prod(outs)) * int(np.prod(w.shape[: nd + 1]))
        chunk = max(1, _CONV_CHUNK_ELEMS // max(per_example, 1))
        dw = np.zeros_like(w)
        for lo in range(0, xp.shape[0], chunk):
            view = _patch_view(xp[lo : lo + chunk], outs, w.shape[:nd], stride)
            dw += np.tensordot(view, g[lo : lo + chunk], axes=(batch_out_axes, batch_out_axes))
    if not need_dx:
        return None, dw
    dxp = np.zeros_like(xp)
    for idx in np.ndindex(*w.shape[:nd]):
        slices = tuple(
            slice(idx[i], idx[i] + stride[i] * outs[i], stride[i]) for i in range(nd)
        )
        dxp[(slice(None), *slices, slice(None))] += np.tensordot(g, w[idx], axes=([-1], [-1]))
    unpad = tuple(slice(pb, dxp.shape[i + 1] - pa) for i, (pb, pa) in enumerate(pads))
    return dxp[(slice(None), *unpad, slice(None))], dw


def _conv(a: Tensor, kernels: Tensor, stride, padding: str, nd: int) -> Tensor:
    if kernels.ndim != nd + 2:
        raise ValueError(f"kernels must have {nd + 2} axes, got {kernels.ndim}")
    batched = a.ndim == nd + 2
    if a.ndim not in (nd + 1, nd + 2):
        raise ValueError(f"input must have {nd + 1} or {nd + 2} axes, got {a.ndim}")
    if a.shape[-1] != kernels.shape[nd]:
        raise ValueError(
            f"input channels {a.shape[-1]} do not match kernel channels {kernels.shape[nd]}"
        )
    if isinstance(stride, int):
        stride = (stride,) * nd
    stride = tuple(int(s) for s in stride)
    if len(stride) != nd or any(s < 1 for s in stride):
        raise ValueError(f"stride must be {nd} positive ints, got {stride}")

    x = a.data if batched else a.data[None]
    nd_ = kernels.ndim - 2
    outs, pads = _conv_geometry(x.shape[1:-1], kernels.shape[:nd_], stride, padding)
    xp = np.pad(x, [(0, 0), *pads, (0, 0)]) if any(p != (0, 0) for p in pads) else x
    y = _conv_forward(xp, kernels.data, outs, stride)
    out = Tensor._wrap(y if batched else y[0])
    tape = _tape_for(a, kernels)
    if tape:
        wd = kernels.data
        need_dx, need_dw = tape.watches(a), tape.watches(kernels)

        def vjp(g):
            gb = g if batched else g[None]
            dx, dw = _conv_backward(
                np.ascontiguousarray(gb), xp, wd, outs, pads, stride, need_dx, need_dw
            )
            if dx is not None and not batched:
                dx = dx[0]
            return dx, dw

        tape._record(out, (a, kernels), vjp)
    return out


def conv3d(a: Tensor, kernels: Tensor, stride=(1, 1, 1), padding: str = "same") -> Tensor:
    """3-D convolution of ``[T,H,W,Cin]`` (or batched ``[B,T,H,W,Cin]``)
    with kernels ``[kt,kh,kw,Cin,Cout]``."""
    return _conv(a, kernels, stride, padding, nd=3)


def conv2d(a: Tensor, kernels: Tensor, stride=(1, 1), padding: str = "same") -> Tensor:
    """2-D convolution of ``[H,W,Cin]`` (or batched) with ``[kh,kw,Cin,Cout]``."""
    return _conv(a, kernels, stride, padding, nd=2)


def zero_pad2d(a: Tensor, pad: int = 1) -> Tensor:
    """Zero-pad the two spatial axes of ``[..., H, W, C]`` by ``pad`` on each side."""
    if pad < 0:
        raise ValueError("pad must be >= 0")
    widths = [(0, 0)] * (a.ndim - 3) + [(pad, pad), (pad, pad), (0, 0)]
    out = Tensor._wrap(np.pad(a.data, widths))
    tape = _tape_for(a)
    if tape and pad > 0:
        sl = (Ellipsis, slice(pad, -pad), slice(pad, -pad), slice(None))
        tape._record(out, (a,), lambda g: (g[sl],))
    elif tape:
        tape._record(out, (a,), lambda g: (g,))
    return out


def max_pool2d(a: Tensor, size: int = 2) -> Tensor:
    """Max pooling over the H and W axes of ``[..., H, W, C]``, stride = size."""
    H, W, C = a.shape[-3:]
    if H % size or W % size:
        raise ValueError(f"pool size {size} must divide spatial extents {(H, W)}")
    lead = a.shape[:-3]
    ho, wo = H // size, W // size
    xr = a.data.reshape(*lead, ho, size, wo, size, C)
    xm = np.moveaxis(xr, -4, -3).reshape(*lead, ho, wo, size * size, C)
    idx = xm.argmax(axis=-2)
    out_d = np.take_along_axis(xm, idx[..., None, :], axis=-2)[..., 0, :]
    out = Tensor._wrap(out_d)
    tape = _tape_for(a)
    if tape:
        in_shape = a.shape

        def vjp(g):
            gw = np.zeros((*lead, ho, wo, size * size, C))
            np.put_along_axis(gw, idx[..., None, :], g[..., None, :], axis=-2)
            gw = gw.reshape(*lead, ho, wo, size, size, C)
            return (np.moveaxis(gw, -3, -4).reshape(in_shape),)

        tape._record(out, (a,), vjp)
    return out


# ---------------------------------------------------------------------------
# Batch normalization


@dataclass
class BatchNormState:
    """Running per-channel statistics, updated by EMA in train mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.9, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), momentum, eps)

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.mean.copy(), self.var.copy(), self.momentum, self.eps)


def batch_norm(
    a: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
    update_stats: bool | None = None,
) -> Tensor:
    """Per-channel normalization over all leading axes of ``[B, ..., C]``.

    Train mode normalizes with the batch statistics and (unless
    ``update_stats`` is False) folds them into the running EMA; infer mode
    uses the stored running statistics.
    """
    C = a.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"gamma/beta must have shape ({C},)")
    if a.ndim < 2:
        raise ValueError("batch_norm input needs a leading batch axis")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    axes = tuple(range(a.ndim - 1))
    eps = state.eps

    if mode == "train":
        mu = a.data.mean(axis=axes)
        var = a.data.var(axis=axes)
        if update_stats or update_stats is None:
            m = state.momentum
            state.mean = m * state.mean + (1.0 - m) * mu
            state.var = m * state.var + (1.0 - m) * var
    else:
        mu = state.mean
        var = state.var

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = Tensor._wrap(xhat * gamma.data + beta.data)
    tape = _tape_for(a, gamma, beta)
    if tape:
        gd = gamma.data
        if mode == "train":
            n = a.size // C

            def vjp(g):
                dbeta = g.sum(axis=axes)
                dgamma = (g * xhat).sum(axis=axes)
                gx = g * gd
                dx = inv * (gx - gx.mean(axis=axes) - xhat * (gx * xhat).mean(axis=axes))
                return dx, dgamma, dbeta

        else:

            def vjp(g):
                dbeta = g.sum(axis=axes)
                dgamma = (g * xhat).sum(axis=axes)
                return g * (gd * inv), dgamma, dbeta

        tape._record(out, (a, gamma, beta), vjp)
    return out


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Bias-corrected Adam moments, one pair per named parameter."""

    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, Tensor], state: AdamState) -> None:
    """One Adam update, applied in place on the parameter mapping."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name].data
        m = state.m.get(name)
        if m is None:
            m = np.zeros(p.shape)
            state.m[name] = m
        v = state.v.get(name)
        if v is None:
            v = np.zeros(p.shape)
            state.v[name] = v
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        params[name] = Tensor._wrap(p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps))
