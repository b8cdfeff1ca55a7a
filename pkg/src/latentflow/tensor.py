"""Minimal reverse-mode autodiff over NHWC numpy arrays.

Operations are recorded on the innermost active :class:`Tape` whenever one of
their inputs participates in differentiation (a leaf with ``requires_grad`` or
an output already recorded on that tape). Outside a tape everything runs as
plain numpy, which is what inference uses.

Broadcasting is deliberately not supported: binary ops take equal shapes or a
Python scalar.
"""

import threading

import numpy as np

from . import kernels


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


class NonFiniteError(FloatingPointError):
    """A tensor contains NaN or Inf."""


_state = threading.local()


def _tape_stack():
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "tape", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim > 4:
            raise ContractViolation(f"tensor order {arr.ndim} exceeds 4")
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id = None
        self.tape = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self):
        return Tensor(self.data, requires_grad=False, name=self.name)

    def is_finite(self):
        return bool(np.all(np.isfinite(self.data)))

    def check_finite(self):
        if not self.is_finite():
            raise NonFiniteError(f"non-finite values in tensor {self.name or ''} {self.shape}")
        return self

    def __repr__(self):
        tag = f" node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return sum_all(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; ``backward`` may be called once per recording.
    """

    def __init__(self):
        self.nodes = []
        self.gradients = None

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def tracks(self, t):
        return isinstance(t, Tensor) and (t.requires_grad or t.tape is self)

    def record(self, out, parents, backward):
        out.node_id = len(self.nodes)
        out.tape = self
        self.nodes.append(_Node(out, parents, backward))
        return out

    def reset(self):
        self.nodes = []
        self.gradients = None

    def backward(self, loss):
        """Reverse-accumulate d(loss)/d(t) for every tensor reachable from ``loss``.

        Returns a dict keyed by tensor identity. Leaves that never met the
        tape are absent from the map.
        """
        if self.gradients is not None:
            raise RuntimeError("backward already ran on this tape; call reset() first")
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ContractViolation("loss is not recorded on this tape")
        if loss.size != 1:
            raise ContractViolation(f"loss must be scalar, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        keep = {id(loss): loss}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            g = grads.get(id(node.out))
            if g is None:
                continue
            pgrads = node.backward(g)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or not self.tracks(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    keep[key] = parent
        self.gradients = GradientMap(keep, grads)
        return self.gradients


class GradientMap:
    """Gradients keyed by tensor; missing tensors read as zeros."""

    def __init__(self, tensors, grads):
        self._tensors = tensors
        self._grads = grads

    def __getitem__(self, t):
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t):
        return id(t) in self._grads

    def __len__(self):
        return len(self._grads)

    def items(self):
        for key, g in self._grads.items():
            yield self._tensors[key], g


def _make(data, parents, backward):
    """Wrap ``data`` and record it if any parent is tracked by the active tape."""
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(tape.tracks(p) for p in parents):
        tape.record(out, parents, backward)
    return out


def _needs(t):
    tape = active_tape()
    return tape is not None and tape.tracks(t)


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b):
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ContractViolation(f"add shape mismatch {a.shape} vs {b.shape}")
        return _make(a.data + b.data, (a, b), lambda g: (g, g))
    return _make(a.data + b, (a,), lambda g: (g,))


def sub(a, b):
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ContractViolation(f"sub shape mismatch {a.shape} vs {b.shape}")
        return _make(a.data - b.data, (a, b), lambda g: (g, -g))
    return _make(a.data - b, (a,), lambda g: (g,))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ContractViolation(f"mul shape mismatch {a.shape} vs {b.shape}")
        ad, bd = a.data, b.data
        return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))
    return _make(a.data * b, (a,), lambda g: (g * b,))


def square(a):
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2 * ad * g,))


def sum_all(a):
    shape, dtype = a.shape, a.dtype
    return _make(np.asarray(a.data.sum(dtype=np.float64), dtype=dtype), (a,),
                 lambda g: (np.full(shape, g, dtype=dtype),))


def squared_error(a, b):
    """Sum of squared differences ``sum((a - b)**2)`` as one node."""
    if a.shape != b.shape:
        raise ContractViolation(f"squared_error shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    dtype = a.dtype

    def backward(g):
        d = (2 * g) * diff
        return d, -d

    return _make(np.asarray(np.sum(diff * diff, dtype=np.float64), dtype=dtype), (a, b), backward)


def sum_squares(a):
    ad = a.data
    return _make(np.asarray(np.sum(ad * ad, dtype=np.float64), dtype=a.dtype), (a,),
                 lambda g: ((2 * g) * ad,))


def leaky_relu(x, slope=0.2):
    if not 0 <= slope < 1:
        raise ContractViolation(f"leaky_relu slope must be in [0,1), got {slope}")
    xd = x.data
    mask = xd >= 0
    scale = np.where(mask, 1, slope).astype(xd.dtype)
    return _make(xd * scale, (x,), lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat_channels(tensors):
    """Concatenate NHWC tensors along the channel axis."""
    sizes = [t.shape[-1] for t in tensors]
    lead = tensors[0].shape[:-1]
    for t in tensors:
        if t.shape[:-1] != lead:
            raise ContractViolation("concat_channels: leading extents differ")
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors), backward)


def channel_slice(x, start, stop):
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[..., start:stop] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[..., start:stop]), (x,), backward)


def stack(tensors):
    """Stack equally shaped tensors along a new leading axis."""

    def backward(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors]), tuple(tensors), backward)


# ---------------------------------------------------------------------------
# network primitives


def conv2d(x, kernel, bias=None):
    """Same-padded stride-1 cross-correlation. ``kernel`` is (k, k, Cin, Cout)."""
    if x.data.ndim != 4:
        raise ContractViolation(f"conv2d expects NHWC input, got shape {x.shape}")
    k, k2, cin, cout = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ContractViolation(f"conv2d kernel must be square and odd, got {kernel.shape}")
    B, H, W, C = x.shape
    if C != cin:
        raise ContractViolation(f"conv2d channel mismatch: input {C}, kernel {cin}")
    dtype = np.result_type(x.dtype, kernel.dtype)
    xd = x.data.astype(dtype, copy=False)
    wmat = kernel.data.astype(dtype, copy=False).reshape(k * k * cin, cout)
    col = kernels.im2col(xd, k) if k > 1 else np.ascontiguousarray(xd).reshape(-1, cin)
    y = col @ wmat
    if bias is not None:
        if bias.shape != (cout,):
            raise ContractViolation(f"conv2d bias shape {bias.shape} != ({cout},)")
        y += bias.data
    y = y.reshape(B, H, W, cout)
    need_x = _needs(x)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gk = (col.T @ g2).reshape(kernel.shape)
        gx = None
        if need_x:
            gcol = g2 @ wmat.T
            gx = kernels.col2im(gcol, (B, H, W, C), k) if k > 1 else gcol.reshape(B, H, W, C)
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    return _make(y, parents, backward)


def max_pool2(x):
    """Non-overlapping 2x2 max pooling; ties go to the first element in row-major order."""
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ContractViolation(f"max_pool2 needs even extents, got {H}x{W}")
    out, arg = kernels.maxpool2_forward(np.ascontiguousarray(x.data))
    shape = x.shape
    return _make(out, (x,), lambda g: (kernels.maxpool2_backward(g, arg, shape),))


def _resize_matrix(n_in, n_out, dtype):
    """Corner-aligned linear interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_out == 1 or n_in == 1:
        m[:, 0] = 1.0
        return m.astype(dtype)
    src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(src).astype(int), n_in - 2)
    f = src - i0
    rows = np.arange(n_out)
    m[rows, i0] += 1 - f
    m[rows, i0 + 1] += f
    return m.astype(dtype)


def resize_bilinear(x, out_h, out_w):
    """Separable corner-aligned bilinear resize of an NHWC tensor."""
    if out_h < 1 or out_w < 1:
        raise ContractViolation("resize target extents must be >= 1")
    B, H, W, C = x.shape
    if (H, W) == (out_h, out_w):
        return _make(x.data.copy(), (x,), lambda g: (g,))
    rh = _resize_matrix(H, out_h, x.dtype)
    rw = _resize_matrix(W, out_w, x.dtype)
    t = np.matmul(rh, x.data.reshape(B, H, W * C)).reshape(B * out_h, W, C)
    y = np.matmul(rw, t).reshape(B, out_h, out_w, C)

    def backward(g):
        gt = np.matmul(rw.T, g.reshape(B * out_h, out_w, C))
        gx = np.matmul(rh.T, gt.reshape(B, out_h, W * C))
        return (gx.reshape(B, H, W, C),)

    return _make(y, (x,), backward)


def sample_bilinear(x, pix):
    """Bilinear sample of ``x`` (B,H,W,C) at pixel coordinates ``pix`` (B,Ho,Wo,2).

    ``pix[..., 0]`` is the column and ``pix[..., 1]`` the row. Coordinates are
    clamped to the grid, so the boundary value extends outward.
    """
    if x.data.ndim != 4 or pix.data.ndim != 4 or pix.shape[-1] != 2 or pix.shape[0] != x.shape[0]:
        raise ContractViolation(f"sample_bilinear shapes {x.shape} / {pix.shape}")
    dtype = np.result_type(x.dtype, pix.dtype)
    xd = np.ascontiguousarray(x.data, dtype=dtype)
    pd = np.ascontiguousarray(pix.data, dtype=dtype)
    out = kernels.bilinear_forward(xd, pd)
    need_x, need_p = _needs(x), _needs(pix)

    def backward(g):
        gx, gp = kernels.bilinear_backward(xd, pd, np.ascontiguousarray(g, dtype=dtype), need_x, need_p)
        return gx, gp

    return _make(out, (x, pix), backward)


def affine(x, scale, shift):
    """``x * scale + shift`` with constant arrays that broadcast against ``x``."""
    scale = np.asarray(scale, dtype=x.dtype)
    shift = np.asarray(shift, dtype=x.dtype)
    out = x.data * scale + shift
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g * scale, shape).copy(),)

    return _make(out, (x,), backward)


def grid_sample(x, coords):
    """Bilinear sample at coordinates given in domain units of [0,1]^2.

    ``coords[..., 0]`` runs along the width, ``coords[..., 1]`` along the height;
    out-of-range coordinates clamp to the boundary.
    """
    H, W = x.shape[1], x.shape[2]
    pix = affine(coords, np.array([W - 1, H - 1]), 0.0)
    return sample_bilinear(x, pix)


def native_grid(H, W, dtype=np.float64):
    """Domain coordinates of the H x W grid, shape (H, W, 2) with (x, y) order."""
    ys = np.linspace(0.0, 1.0, H) if H > 1 else np.zeros(1)
    xs = np.linspace(0.0, 1.0, W) if W > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1).astype(dtype)


def pixel_grid(H, W, dtype=np.float64):
    """Integer pixel coordinates of the H x W grid, shape (H, W, 2) with (col, row) order."""
    gx, gy = np.meshgrid(np.arange(W), np.arange(H))
    return np.stack([gx, gy], axis=-1).astype(dtype)
