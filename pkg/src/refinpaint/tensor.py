"""Rank-4 tensors with reverse-mode automatic differentiation.

Every value is a dense (batch, channel, height, width) float array.  Shapes
are matched exactly by every operation; the only implicit broadcasts are a
channel bias (1, C, 1, 1), a per-sample gate (B, 1, 1, 1) and a scalar
(1, 1, 1, 1).  Anything else must be expanded explicitly (see
``expand_channels``), which keeps wiring mistakes loud.

float32 is the training dtype; float64 exists for finite-difference
verification and must be requested explicitly.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "NonFiniteError",
    "add", "sub", "mul", "neg", "add_scalar", "mul_scalar", "absolute",
    "relu", "leaky_relu", "sigmoid", "tanh", "instance_norm",
    "concat_channels", "expand_channels", "global_avg_pool", "linear",
    "sum_all", "mean_all", "mean_channels", "gram",
    "conv2d", "conv_transpose2d", "bilinear_resize",
    "zero_grads",
]


class ShapeError(ValueError):
    """Operand shapes incompatible with the operation."""


class NonFiniteError(FloatingPointError):
    """A tensor holds NaN or Inf values."""


def _as4d(data, dtype):
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1, 1, 1)
    if arr.ndim != 4:
        raise ShapeError(f"tensors are rank-4 (B,C,H,W); got shape {arr.shape}")
    return arr


class Tensor:
    """A (B, C, H, W) array plus an optional gradient accumulator.

    Tensors produced by tracked operations remember their inputs; calling
    ``backward()`` on a scalar result fills ``.grad`` on every tensor with
    ``requires_grad`` that participated.  Repeated backward calls accumulate.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (
                np.float32, np.float64) else np.float32
        self.data = _as4d(data, dtype)
        if not np.isfinite(self.data).all():
            raise NonFiniteError("tensor contains NaN/Inf")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False, dtype=np.float32):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def full(shape, value, requires_grad=False, dtype=np.float32):
        return Tensor(np.full(shape, value, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def scalar(value, requires_grad=False, dtype=np.float32):
        return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype), requires_grad=requires_grad)

    # -- basic properties ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def assert_finite(self, what="tensor"):
        if not np.isfinite(self.data).all():
            raise NonFiniteError(f"{what} contains NaN/Inf")

    def __repr__(self):
        return (f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, "
                f"requires_grad={self.requires_grad})")

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from a scalar.

        Visits the graph in reverse topological order; gradient fan-in is
        accumulated in node insertion order, so results are reproducible.
        """
        if self.shape != (1, 1, 1, 1):
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        # topo now lists parents before children; walk it backwards
        grads = {id(self): np.ones((1, 1, 1, 1), dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad or node._parents:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad = node.grad + g
            if node._backward_fn is None:
                continue
            parent_grads = node._backward_fn(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not (p.requires_grad or p._parents):
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg

    # -- operator sugar (thin wrappers over the functional ops) ---------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def _make(data, parents, backward_fn):
    track = any(p.requires_grad or p._parents for p in parents)
    out = Tensor(data)
    if track:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def zero_grads(params):
    """Clear gradient accumulators on an iterable or dict of tensors."""
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.zero_grad()


# -- broadcasting discipline --------------------------------------------------

def _check_pair(a: Tensor, b: Tensor, op: str):
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.dtype} vs {b.dtype}")
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    for small, big in ((sa, sb), (sb, sa)):
        if small == (1, 1, 1, 1):
            return
        if small == (1, big[1], 1, 1):       # channel bias
            return
        if small == (big[0], 1, 1, 1):       # per-sample gate
            return
    raise ShapeError(f"{op}: shapes {sa} and {sb} are not compatible "
                     "(only channel-bias, per-sample and scalar broadcasts allowed)")


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    axes = tuple(i for i in range(4) if shape[i] == 1 and grad.shape[i] != 1)
    return grad.sum(axis=axes, keepdims=True)


# -- elementwise arithmetic ----------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_reduce_to(g * b.data, a.shape),
                            _reduce_to(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + a.dtype.type(c), (a,), lambda g: (g,))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


# -- activations ---------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    slope = np.where(a.data > 0, a.dtype.type(1), a.dtype.type(alpha))
    return _make(a.data * slope, (a,), lambda g: (g * slope,))


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    y = y.astype(a.dtype, copy=False)
    return _make(y, (a,), lambda g: (g * y * (1 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1 - y * y),))


def instance_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the spatial extent."""
    m = a.data.mean(axis=(2, 3), keepdims=True)
    v = a.data.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(v + a.dtype.type(eps))
    y = (a.data - m) * inv

    def backward(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gym = (g * y).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _make(y.astype(a.dtype, copy=False), (a,), backward)


# -- shape / reduction ops -------------------------------------------------------

def concat_channels(tensors) -> Tensor:
    tensors = list(tensors)
    first = tensors[0]
    for t in tensors[1:]:
        if t.dtype != first.dtype:
            raise ShapeError("concat: mixed dtypes")
        if (t.shape[0], t.shape[2], t.shape[3]) != (first.shape[0], first.shape[2], first.shape[3]):
            raise ShapeError(f"concat: incompatible shapes {first.shape} vs {t.shape}")
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(sizes)))

    return _make(np.concatenate([t.data for t in tensors], axis=1), tensors, backward)


def expand_channels(a: Tensor, channels: int) -> Tensor:
    """Repeat a single-channel map across ``channels`` (masks over features)."""
    if a.shape[1] != 1:
        raise ShapeError(f"expand_channels needs a single-channel tensor, got {a.shape}")
    out = np.repeat(a.data, channels, axis=1)
    return _make(out, (a,), lambda g: (g.sum(axis=1, keepdims=True),))


def global_avg_pool(a: Tensor) -> Tensor:
    B, C, H, W = a.shape
    scale = 1.0 / (H * W)

    def backward(g):
        return (np.broadcast_to(g * a.dtype.type(scale), a.shape).copy(),)

    return _make(a.data.mean(axis=(2, 3), keepdims=True), (a,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fully connected layer on pooled features: (B,C,1,1) x (K,C,1,1) -> (B,K,1,1)."""
    B, C, H, W = x.shape
    if (H, W) != (1, 1):
        raise ShapeError(f"linear expects pooled (B,C,1,1) input, got {x.shape}")
    K, Cw = weight.shape[0], weight.shape[1]
    if Cw != C or weight.shape[2:] != (1, 1):
        raise ShapeError(f"linear weight {weight.shape} does not match input {x.shape}")
    if bias.shape != (1, K, 1, 1):
        raise ShapeError(f"linear bias must be (1,{K},1,1), got {bias.shape}")
    xm = x.data.reshape(B, C)
    wm = weight.data.reshape(K, C)
    out = xm @ wm.T + bias.data.reshape(1, K)

    def backward(g):
        gm = g.reshape(B, K)
        gx = (gm @ wm).reshape(B, C, 1, 1)
        gw = (gm.T @ xm).reshape(K, C, 1, 1)
        gb = gm.sum(axis=0).reshape(1, K, 1, 1)
        return gx, gw, gb

    return _make(out.reshape(B, K, 1, 1), (x, weight, bias), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum().reshape(1, 1, 1, 1), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    scale = 1.0 / a.data.size

    def backward(g):
        return (np.broadcast_to(g * a.dtype.type(scale), a.shape).copy(),)

    return _make(a.data.mean().reshape(1, 1, 1, 1), (a,), backward)


def mean_channels(a: Tensor) -> Tensor:
    C = a.shape[1]

    def backward(g):
        return (np.broadcast_to(g / a.dtype.type(C), a.shape).copy(),)

    return _make(a.data.mean(axis=1, keepdims=True), (a,), backward)


def gram(a: Tensor) -> Tensor:
    """Channel co-occurrence matrix F F^T / (C*H*W), shaped (B, C, C, 1)."""
    B, C, H, W = a.shape
    f = a.data.reshape(B, C, H * W)
    scale = 1.0 / (C * H * W)
    g_mat = np.matmul(f, f.transpose(0, 2, 1)) * scale

    def backward(g):
        gm = g.reshape(B, C, C)
        df = np.matmul(gm + gm.transpose(0, 2, 1), f) * scale
        return (df.reshape(B, C, H, W),)

    return _make(g_mat.reshape(B, C, C, 1).astype(a.dtype, copy=False), (a,), backward)


# -- convolution ------------------------------------------------------------------

_COL_CACHE = {}


def _col_indices(C, H, W, kH, kW, stride, padding, dilation):
    """Gather indices mapping a padded (C,Hp,Wp) plane to (C*kH*kW, L) columns."""
    key = (C, H, W, kH, kW, stride, padding, dilation)
    hit = _COL_CACHE.get(key)
    if hit is not None:
        return hit
    Hp, Wp = H + 2 * padding, W + 2 * padding
    out_h = (Hp - dilation * (kH - 1) - 1) // stride + 1
    out_w = (Wp - dilation * (kW - 1) - 1) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"convolution output would be empty for input {H}x{W}, "
            f"kernel {kH}x{kW}, stride {stride}, padding {padding}, dilation {dilation}")
    ki = np.repeat(np.arange(kH) * dilation, kW)
    kj = np.tile(np.arange(kW) * dilation, kH)
    oi = stride * np.repeat(np.arange(out_h), out_w)
    oj = stride * np.tile(np.arange(out_w), out_h)
    rows = ki[:, None] + oi[None, :]
    cols = kj[:, None] + oj[None, :]
    flat = rows * Wp + cols                                    # (kH*kW, L)
    idx = (np.arange(C)[:, None, None] * (Hp * Wp) + flat[None]).reshape(C * kH * kW, -1)
    entry = (idx, out_h, out_w, Hp, Wp)
    _COL_CACHE[key] = entry
    return entry


def _im2col(x: np.ndarray, kH, kW, stride, padding, dilation):
    B, C, H, W = x.shape
    idx, out_h, out_w, Hp, Wp = _col_indices(C, H, W, kH, kW, stride, padding, dilation)
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    cols = xp.reshape(B, C * Hp * Wp)[:, idx]                  # (B, C*kH*kW, L)
    return cols, idx, out_h, out_w, Hp, Wp


def _col2im(cols: np.ndarray, idx, B, C, H, W, Hp, Wp, padding, dtype):
    out = np.empty((B, C, Hp, Wp), dtype=dtype)
    flat_idx = idx.ravel()
    n = C * Hp * Wp
    for b in range(B):
        out[b] = np.bincount(flat_idx, weights=cols[b].ravel(), minlength=n).reshape(C, Hp, Wp)
    if padding:
        out = out[:, :, padding:Hp - padding, padding:Wp - padding]
    return out.astype(dtype, copy=False)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    weight is (outC, inC, kH, kW); output spatial size follows
    floor((H + 2p - d*(k-1) - 1) / s) + 1.
    """
    if stride < 1 or dilation < 1:
        raise ShapeError("stride and dilation must be >= 1")
    B, C, H, W = x.shape
    O, Cw, kH, kW = weight.shape
    if Cw != C:
        raise ShapeError(f"conv2d: input has {C} channels but weight expects {Cw}")
    if bias is not None and bias.shape != (1, O, 1, 1):
        raise ShapeError(f"conv2d: bias must be (1,{O},1,1), got {bias.shape}")
    cols, idx, out_h, out_w, Hp, Wp = _im2col(x.data, kH, kW, stride, padding, dilation)
    wmat = weight.data.reshape(O, C * kH * kW)
    out = np.matmul(wmat, cols)                                # (B, O, L)
    if bias is not None:
        out = out + bias.data.reshape(1, O, 1)
    out = out.reshape(B, O, out_h, out_w)

    def backward(g):
        gm = g.reshape(B, O, out_h * out_w)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gcols = np.matmul(wmat.T, gm)                          # (B, C*kH*kW, L)
        gx = _col2im(gcols, idx, B, C, H, W, Hp, Wp, padding, x.dtype)
        if bias is None:
            return gx, gw
        gb = gm.sum(axis=(0, 2)).reshape(1, O, 1, 1)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out.astype(x.dtype, copy=False), parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None,
                     stride: int = 2, padding: int = 1) -> Tensor:
    """Transposed convolution (upsampling); weight is (inC, outC, kH, kW).

    Output spatial size is (H-1)*stride - 2*padding + k.
    """
    B, C, H, W = x.shape
    Cw, O, kH, kW = weight.shape
    if Cw != C:
        raise ShapeError(f"conv_transpose2d: input has {C} channels but weight expects {Cw}")
    if bias is not None and bias.shape != (1, O, 1, 1):
        raise ShapeError(f"conv_transpose2d: bias must be (1,{O},1,1), got {bias.shape}")
    out_h = (H - 1) * stride - 2 * padding + kH
    out_w = (W - 1) * stride - 2 * padding + kW
    if out_h < 1 or out_w < 1:
        raise ShapeError("conv_transpose2d: output would be empty")
    # scatter-add through the same index map a forward conv (out -> in) would use
    idx, gh, gw_, Hp, Wp = _col_indices(O, out_h, out_w, kH, kW, stride, padding, 1)
    assert (gh, gw_) == (H, W), "transpose geometry mismatch"
    wmat = weight.data.reshape(C, O * kH * kW)
    cols = np.matmul(wmat.T, x.data.reshape(B, C, H * W))      # (B, O*kH*kW, L)
    out = _col2im(cols, idx, B, O, out_h, out_w, Hp, Wp, padding, x.dtype)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        if padding:
            gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        else:
            gp = g
        gcols = gp.reshape(B, O * Hp * Wp)[:, idx]             # (B, O*kH*kW, L)
        gx = np.matmul(wmat, gcols).reshape(B, C, H, W)
        gwt = np.matmul(gcols, x.data.reshape(B, C, H * W).transpose(0, 2, 1))
        gwt = gwt.sum(axis=0).T.reshape(weight.shape)
        if bias is None:
            return gx.astype(x.dtype, copy=False), gwt.astype(x.dtype, copy=False)
        gb = g.sum(axis=(0, 2, 3)).reshape(1, O, 1, 1)
        return gx.astype(x.dtype, copy=False), gwt.astype(x.dtype, copy=False), gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


# -- bilinear resize ---------------------------------------------------------------

_RESIZE_CACHE = {}


def _resize_plan(H, W, out_h, out_w):
    key = (H, W, out_h, out_w)
    hit = _RESIZE_CACHE.get(key)
    if hit is not None:
        return hit
    # align_corners=False source coordinates, clamped at the borders
    sy = (np.arange(out_h) + 0.5) * (H / out_h) - 0.5
    sx = (np.arange(out_w) + 0.5) * (W / out_w) - 0.5
    y0 = np.floor(sy)
    x0 = np.floor(sx)
    wy1 = np.clip(sy - y0, 0.0, 1.0)
    wx1 = np.clip(sx - x0, 0.0, 1.0)
    # clamp AFTER computing weights so borders replicate
    y0c = np.clip(y0, 0, H - 1).astype(np.int64)
    y1c = np.clip(y0 + 1, 0, H - 1).astype(np.int64)
    x0c = np.clip(x0, 0, W - 1).astype(np.int64)
    x1c = np.clip(x0 + 1, 0, W - 1).astype(np.int64)
    # out-of-range sy<0 gets weight wy1=0 toward y1, i.e. pure y0c: replication
    grid = []
    for yc, wy in ((y0c, 1.0 - wy1), (y1c, wy1)):
        for xc, wx in ((x0c, 1.0 - wx1), (x1c, wx1)):
            ids = (yc[:, None] * W + xc[None, :]).ravel()
            wgt = (wy[:, None] * wx[None, :]).ravel()
            grid.append((ids, wgt))
    _RESIZE_CACHE[key] = grid
    return grid


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear interpolation to (out_h, out_w), align_corners=False."""
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear_resize: target size must be >= 1")
    B, C, H, W = x.shape
    if (out_h, out_w) == (H, W):
        return _make(x.data.copy(), (x,), lambda g: (g,))
    grid = _resize_plan(H, W, out_h, out_w)
    xf = x.data.reshape(B, C, H * W)
    out = np.zeros((B, C, out_h * out_w), dtype=x.dtype)
    for ids, wgt in grid:
        out += xf[:, :, ids] * wgt.astype(x.dtype)

    def backward(g):
        gf = g.reshape(B * C, out_h * out_w)
        acc = np.zeros((B * C, H * W), dtype=x.dtype)
        plane = np.arange(B * C)[:, None] * (H * W)
        n = B * C * H * W
        for ids, wgt in grid:
            full = (plane + ids[None, :]).ravel()
            acc += np.bincount(full, weights=(gf * wgt).ravel(), minlength=n).reshape(
                B * C, H * W).astype(x.dtype)
        return (acc.reshape(B, C, H, W),)

    return _make(out.reshape(B, C, out_h, out_w), (x,), backward)
