"""Reverse-mode automatic differentiation over dense float tensors.

The operation set is exactly what the enhancement model and its losses need:
broadcast elementwise arithmetic, direct 2-d convolution (grouped/depthwise),
matmul, a clamped power op, a small activation zoo, softmax, reductions, and
shape bookkeeping (reshape/transpose/slice).

Recording model: ops append backward rules to the innermost active `Tape`
(thread local). With no active tape nothing is recorded, so inference runs
tape-free. A tape supports one `backward()` pass and is consumed by it.

float32 is the working precision; building tensors from float64 arrays keeps
float64 throughout, which the finite-difference tests rely on.
"""

import math
import threading

import numpy as np

from .errors import ConfigurationError, ContractError, ShapeError

DEFAULT_DTYPE = np.float32

# tanh-form GELU constants: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _coerce(data, dtype=None):
    arr = np.asarray(data)
    if dtype is None:
        dtype = np.float64 if arr.dtype == np.float64 else DEFAULT_DTYPE
    arr = arr.astype(dtype, copy=False)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)  # 0-d arrays are already contiguous
    return arr


class Tensor:
    """Dense float array with an optional gradient slot.

    Tensors are immutable after creation except for `.data` updates made by
    the optimizer and `.grad` population by a backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    # arithmetic sugar; scalars lift to constants of the same dtype
    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return elementwise(self, self._lift(other), "add")

    def __radd__(self, other):
        return elementwise(self._lift(other), self, "add")

    def __sub__(self, other):
        return elementwise(self, self._lift(other), "sub")

    def __rsub__(self, other):
        return elementwise(self._lift(other), self, "sub")

    def __mul__(self, other):
        return elementwise(self, self._lift(other), "mul")

    def __rmul__(self, other):
        return elementwise(self._lift(other), self, "mul")

    def __neg__(self):
        return elementwise(self, self._lift(-1.0), "mul")

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None):
        return reduce(self, "sum", axes)

    def mean(self, axes=None):
        return reduce(self, "mean", axes)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return permute(self, axes)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{flag})"


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


# ---------------------------------------------------------------------------
# tape


_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops; one backward pass, then consumed."""

    def __init__(self):
        self._ops = []  # (output tensor, backward rule) in execution order
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape stack corrupted: exiting a non-innermost tape")
        stack.pop()
        return False

    def __len__(self):
        return len(self._ops)

    def backward(self, loss: Tensor):
        """Populate .grad for every requires_grad tensor reachable from loss."""
        if self._consumed:
            raise ContractError("tape already consumed by a previous backward pass")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self._ops:
            raise ContractError("backward on an empty tape")
        if not loss.requires_grad:
            raise ContractError("loss does not depend on any requires_grad tensor")
        loss.grad = np.ones_like(loss.data)
        for out, rule in reversed(self._ops):
            if out.grad is None:
                continue  # not reachable from the loss
            rule(out.grad)
        self._ops.clear()
        self._consumed = True


def backward(loss: Tensor, tape: Tape | None = None):
    """Run the backward pass on `tape` (default: the innermost active tape)."""
    if tape is None:
        tape = _active_tape()
        if tape is None:
            raise ContractError("backward called with no active tape")
    tape.backward(loss)


def _recording(*inputs) -> bool:
    """True when the op about to run will be recorded on a tape."""
    return _active_tape() is not None and any(t.requires_grad for t in inputs)


def _emit(data, inputs, make_rule) -> Tensor:
    """Wrap op output; record a backward rule if grads are being tracked."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._ops.append((out, make_rule(out)))
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    # grads are only ever rebound, never mutated in place, so views are safe
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce-sum g over broadcast dimensions so it matches `shape`."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    elif extra < 0:  # scalar-ish grad for a tensor of size-1 dims
        return g.reshape(shape)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Broadcasting add/sub/mul. Gradients reduce-sum over broadcast dims."""
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from None
    if kind == "add":
        data = a.data + b.data
    elif kind == "sub":
        data = a.data - b.data
    elif kind == "mul":
        data = a.data * b.data
    else:
        raise ConfigurationError(f"unknown elementwise kind {kind!r}")

    def make_rule(out):
        def rule(g):
            if kind == "add":
                _accumulate(a, g)
                _accumulate(b, g)
            elif kind == "sub":
                _accumulate(a, g)
                _accumulate(b, -g)
            else:
                _accumulate(a, g * b.data)
                _accumulate(b, g * a.data)

        return rule

    return _emit(data, (a, b), make_rule)


def absolute(x: Tensor) -> Tensor:
    """|x|; subgradient 0 at x == 0."""
    data = np.abs(x.data)

    def make_rule(out):
        sign = np.sign(x.data)
        return lambda g: _accumulate(x, g * sign)

    return _emit(data, (x,), make_rule)


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dims broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def make_rule(out):
        def rule(g):
            _accumulate(a, np.matmul(g, b.data.swapaxes(-1, -2)))
            _accumulate(b, np.matmul(a.data.swapaxes(-1, -2), g))

        return rule

    return _emit(data, (a, b), make_rule)


# ---------------------------------------------------------------------------
# convolution (direct shift-and-add; no im2col, no FFT)


def _conv_accum_fwd(w_off, xs, groups, cout):
    """One kernel-offset contribution, returned as (Cout, N, Ho, Wo)."""
    n = xs.shape[0]
    if groups == 1:
        return np.tensordot(w_off, xs, axes=([1], [1]))
    cin = xs.shape[1]
    if groups == cin and cout == cin:  # depthwise
        return w_off[:, 0, None, None, None] * xs.transpose(1, 0, 2, 3)
    cpg = cin // groups
    dpg = cout // groups
    out = np.empty((cout, n) + xs.shape[2:], dtype=xs.dtype)
    for gi in range(groups):
        wg = w_off[gi * dpg : (gi + 1) * dpg]
        xg = xs[:, gi * cpg : (gi + 1) * cpg]
        out[gi * dpg : (gi + 1) * dpg] = np.tensordot(wg, xg, axes=([1], [1]))
    return out


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-d convolution on NCHW input with [Cout, Cin/groups, kh, kw] weights.

    Symmetric zero padding; groups=Cin with Cout=Cin is the depthwise case.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d x and w, got {x.shape} and {w.shape}")
    n, cin, h, wdt = x.shape
    cout, cpg, kh, kw = w.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigurationError(
            f"groups={groups} must divide both Cin={cin} and Cout={cout}"
        )
    if cpg != cin // groups:
        raise ConfigurationError(
            f"weight expects {cpg} channels per group, input provides {cin // groups}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wdt + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"kernel {kh}x{kw} with padding {padding} does not fit input {h}x{wdt}"
        )

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    depthwise1 = groups == cin and cout == cin and n == 1
    acc = None  # (Cout, N, Ho, Wo), or (C, Ho, Wo) on the depthwise fast path
    tmp = None
    for dy in range(kh):
        for dx in range(kw):
            xs = xp[:, :, dy : dy + stride * ho : stride, dx : dx + stride * wo : stride]
            if depthwise1:
                wc = w.data[:, 0, dy, dx][:, None, None]
                if acc is None:
                    acc = wc * xs[0]
                    tmp = np.empty_like(acc)
                else:
                    np.multiply(wc, xs[0], out=tmp)
                    acc += tmp
            else:
                contrib = _conv_accum_fwd(w.data[:, :, dy, dx], xs, groups, cout)
                if acc is None:
                    acc = contrib
                else:
                    acc += contrib
    if n == 1:
        data = acc.reshape(1, cout, ho, wo)  # same buffer order, no copy
    else:
        data = np.ascontiguousarray(np.moveaxis(acc, 0, 1))
    if bias is not None:
        data += bias.data[None, :, None, None]

    pointwise1 = (
        kh == 1 and kw == 1 and stride == 1 and padding == 0 and groups == 1 and n == 1
    )

    def make_rule(out):
        def rule(g):
            if bias is not None and bias.requires_grad:
                _accumulate(bias, g.sum(axis=(0, 2, 3)))
            need_x = x.requires_grad
            need_w = w.requires_grad
            if not (need_x or need_w):
                return
            if pointwise1:  # plain gemms, no padding/slicing bookkeeping
                g2 = g[0].reshape(cout, ho * wo)
                if need_w:
                    x2 = x.data[0].reshape(cin, ho * wo)
                    _accumulate(w, (g2 @ x2.T).reshape(w.data.shape))
                if need_x:
                    w2 = w.data[:, :, 0, 0]
                    _accumulate(x, (w2.T @ g2).reshape(x.data.shape))
                return
            gxp = np.zeros_like(xp) if need_x else None
            gw = np.zeros_like(w.data) if need_w else None
            cpg_ = cin // groups
            dpg = cout // groups
            tmp = None
            for dy in range(kh):
                for dx in range(kw):
                    sl = (
                        slice(None),
                        slice(None),
                        slice(dy, dy + stride * ho, stride),
                        slice(dx, dx + stride * wo, stride),
                    )
                    if depthwise1:
                        g0 = g[0]
                        if need_w:
                            xs0 = xp[(0,) + sl[1:]]
                            if tmp is None:
                                tmp = np.empty_like(g0)
                            np.multiply(g0, xs0, out=tmp)
                            gw[:, 0, dy, dx] = tmp.sum(axis=(1, 2))
                        if need_x:
                            gxp[(0,) + sl[1:]] += w.data[:, 0, dy, dx][:, None, None] * g0
                        continue
                    if need_w:
                        xs = xp[sl]
                        if groups == 1:
                            gw[:, :, dy, dx] = np.tensordot(
                                g, xs, axes=([0, 2, 3], [0, 2, 3])
                            )
                        elif groups == cin and cout == cin:
                            gw[:, 0, dy, dx] = (g * xs).sum(axis=(0, 2, 3))
                        else:
                            for gi in range(groups):
                                gw[gi * dpg : (gi + 1) * dpg, :, dy, dx] = np.tensordot(
                                    g[:, gi * dpg : (gi + 1) * dpg],
                                    xs[:, gi * cpg_ : (gi + 1) * cpg_],
                                    axes=([0, 2, 3], [0, 2, 3]),
                                )
                    if need_x:
                        wo_ = w.data[:, :, dy, dx]
                        if groups == 1:
                            gxp[sl] += np.moveaxis(
                                np.tensordot(wo_, g, axes=([0], [1])), 0, 1
                            )
                        elif groups == cin and cout == cin:
                            gxp[sl] += wo_[None, :, 0, None, None] * g
                        else:
                            for gi in range(groups):
                                gxp[sl][:, gi * cpg_ : (gi + 1) * cpg_] += np.moveaxis(
                                    np.tensordot(
                                        wo_[gi * dpg : (gi + 1) * dpg],
                                        g[:, gi * dpg : (gi + 1) * dpg],
                                        axes=([0], [1]),
                                    ),
                                    0,
                                    1,
                                )
            if need_w:
                _accumulate(w, gw)
            if need_x:
                if padding:
                    _accumulate(x, gxp[:, :, padding:-padding, padding:-padding])
                else:
                    _accumulate(x, gxp)

        return rule

    inputs = (x, w) if bias is None else (x, w, bias)
    return _emit(data, inputs, make_rule)


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def pow_clamped(x: Tensor, gamma: Tensor, eps: float) -> Tensor:
    """max(x, eps)**gamma with gradients to both x and the scalar gamma.

    The x-gradient is defined as 0 on the clamped region (x <= eps).
    """
    if eps <= 0:
        raise ConfigurationError(f"eps must be > 0, got {eps}")
    if gamma.data.size != 1:
        raise ShapeError(f"gamma must be scalar, got shape {gamma.shape}")
    xc = np.maximum(x.data, eps)
    gval = float(gamma.data.reshape(()))
    data = xc**gval

    def make_rule(out):
        def rule(g):
            if x.requires_grad:
                gx = g * gval * xc ** (gval - 1.0)
                gx = np.where(x.data > eps, gx, 0.0).astype(x.data.dtype, copy=False)
                _accumulate(x, gx)
            if gamma.requires_grad:
                gg = (g * data * np.log(xc)).sum()
                _accumulate(gamma, np.asarray(gg, dtype=gamma.data.dtype))

        return rule

    return _emit(data, (x, gamma), make_rule)


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise relu / tanh / gelu with exact derivatives."""
    if kind == "relu":
        data = np.maximum(x.data, 0)

        def make_rule(out):
            mask = (x.data > 0).astype(x.data.dtype)
            return lambda g: _accumulate(x, g * mask)

    elif kind == "tanh":
        data = np.tanh(x.data)

        def make_rule(out):
            return lambda g: _accumulate(x, g * (1.0 - out.data * out.data))

    elif kind == "gelu":
        # tanh form (the common transformer variant); backward is its exact
        # derivative: 0.5*(1+t) + 0.5*x*(1-t^2)*c*(1+3a*x^2)
        xd = x.data
        if _recording(x):
            inner = _GELU_C * (xd + _GELU_A * xd * xd * xd)
            t = np.tanh(inner)
            data = 0.5 * xd * (1.0 + t)

            def make_rule(out):
                sech2 = 1.0 - t * t
                deriv = 0.5 * (1.0 + t) + 0.5 * xd * sech2 * _GELU_C * (
                    1.0 + 3.0 * _GELU_A * xd * xd
                )
                return lambda g: _accumulate(x, g * deriv)

        else:  # inference: same math fused in place, nothing retained
            buf = xd * xd
            buf *= xd
            buf *= _GELU_A
            buf += xd
            buf *= _GELU_C
            np.tanh(buf, out=buf)
            buf += 1.0
            buf *= xd
            buf *= 0.5
            data = buf
            make_rule = None  # never recorded on this path

    else:
        raise ConfigurationError(f"unknown activation kind {kind!r}")
    return _emit(data, (x,), make_rule)


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


def gelu(x: Tensor) -> Tensor:
    return activation(x, "gelu")


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), computed stably; derivative is the logistic sigmoid."""
    data = np.logaddexp(0.0, x.data).astype(x.data.dtype, copy=False)

    def make_rule(out):
        # stable sigmoid: exp(-softplus(-x))
        sig = np.exp(-np.logaddexp(0.0, -x.data)).astype(x.data.dtype, copy=False)
        return lambda g: _accumulate(x, g * sig)

    return _emit(data, (x,), make_rule)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Max-subtracted softmax along `axis`."""
    if not -x.ndim <= axis < x.ndim:
        raise ConfigurationError(f"axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def make_rule(out):
        def rule(g):
            y = out.data
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accumulate(x, (g - dot) * y)

        return rule

    return _emit(data, (x,), make_rule)


# ---------------------------------------------------------------------------
# reductions and shape ops


def reduce(x: Tensor, kind: str, axes=None) -> Tensor:
    """sum/mean over `axes` (None = all axes, [] = identity)."""
    if kind not in ("sum", "mean"):
        raise ConfigurationError(f"unknown reduce kind {kind!r}")
    if axes is None:
        ax = tuple(range(x.ndim))
    else:
        ax = tuple(int(a) % x.ndim if x.ndim else 0 for a in axes)
        if len(set(ax)) != len(ax):
            raise ConfigurationError(f"duplicate reduction axes in {axes}")
        for a in axes:
            if not -x.ndim <= int(a) < x.ndim:
                raise ConfigurationError(f"axis {a} out of range for shape {x.shape}")
    if not ax:
        data = x.data

        def make_rule(out):
            return lambda g: _accumulate(x, g)

        return _emit(data, (x,), make_rule)

    count = 1
    for a in ax:
        count *= x.shape[a]
    data = x.data.sum(axis=ax)
    if kind == "mean":
        data = data / count

    def make_rule(out):
        def rule(g):
            shape_kept = list(x.shape)
            for a in ax:
                shape_kept[a] = 1
            ge = np.broadcast_to(g.reshape(shape_kept), x.shape)
            if kind == "mean":
                ge = ge / count
            _accumulate(x, ge)

        return rule

    return _emit(data, (x,), make_rule)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def make_rule(out):
        return lambda g: _accumulate(x, g.reshape(x.data.shape))

    return _emit(data, (x,), make_rule)


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.transpose(x.data, axes)

    def make_rule(out):
        inv = np.argsort(axes)
        return lambda g: _accumulate(x, np.transpose(g, inv))

    return _emit(data, (x,), make_rule)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if not (0 <= start and start + length <= x.shape[axis]):
        raise ShapeError(
            f"slice [{start}:{start + length}) out of bounds for axis {axis} "
            f"of shape {x.shape}"
        )
    sl = tuple(
        slice(start, start + length) if i == axis else slice(None)
        for i in range(x.ndim)
    )
    data = x.data[sl]

    def make_rule(out):
        def rule(g):
            gx = np.zeros_like(x.data)
            gx[sl] = g
            _accumulate(x, gx)

        return rule

    return _emit(data, (x,), make_rule)
