"""Alignment and mask-aware filling operators.

This is the geometric core of the pipeline: offset-guided deformable
convolution warps reference features onto input features, partial
convolution fills masked regions with renormalized windows, and the
equalization gate keeps channel attention uniform after fusion.

Deformable sampling convention: for a k x k kernel the taps are enumerated
row-major; an offset field carries 2*k*k channels where channel 2n is the
vertical (dy) and channel 2n+1 the horizontal (dx) displacement of tap n,
in pixels.  Samples outside the feature extent read as zero, matching the
zero padding used by the plain convolutions.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import Conv2d, merge_params
from .tensor import ShapeError, Tensor, _im2col, _make


def bilinear_sample(feature, y: float, x: float, batch: int = 0, channel: int = 0) -> float:
    """Evaluate one fractional position of a feature map.

    Four-tap bilinear interpolation; neighbours outside [0,H-1]x[0,W-1]
    contribute zero.  Accepts a Tensor or a (B,C,H,W) array.
    """
    data = feature.data if isinstance(feature, Tensor) else np.asarray(feature)
    plane = data[batch, channel]
    H, W = plane.shape
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    ty, tx = y - y0, x - x0
    acc = 0.0
    for yy, wy in ((y0, 1.0 - ty), (y0 + 1, ty)):
        for xx, wx in ((x0, 1.0 - tx), (x0 + 1, tx)):
            if 0 <= yy < H and 0 <= xx < W:
                acc += wy * wx * float(plane[yy, xx])
    return acc


def kernel_tap_offsets(kH: int, kW: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major lattice positions of the kernel taps relative to the center."""
    ay = np.repeat(np.arange(kH) - (kH - 1) // 2, kW)
    ax = np.tile(np.arange(kW) - (kW - 1) // 2, kH)
    return ay, ax


def deformable_conv2d(x: Tensor, weight: Tensor, bias: Tensor, offsets: Tensor) -> Tensor:
    """Convolution whose taps sample at learnably displaced fractional positions.

    Stride 1, spatial size preserved.  Output at p0 sums, over taps n, the
    kernel weight times the bilinear sample of ``x`` at p0 + tap_n + offset_n(p0).
    Differentiable w.r.t. input, weight, bias and offsets.
    """
    B, C, H, W = x.shape
    O, Cw, kH, kW = weight.shape
    if Cw != C:
        raise ShapeError(f"deformable_conv2d: input has {C} channels, weight expects {Cw}")
    if kH % 2 == 0 or kW % 2 == 0:
        raise ShapeError("deformable_conv2d: kernel extents must be odd")
    N = kH * kW
    if offsets.shape != (B, 2 * N, H, W):
        raise ShapeError(
            f"offset field must be ({B},{2 * N},{H},{W}) for a {kH}x{kW} kernel, "
            f"got {offsets.shape}")
    ay, ax = kernel_tap_offsets(kH, kW)
    gy = np.arange(H, dtype=x.dtype)
    gx = np.arange(W, dtype=x.dtype)
    ys = ay.astype(x.dtype)[None, :, None, None] + gy[None, None, :, None] + offsets.data[:, 0::2]
    xs = ax.astype(x.dtype)[None, :, None, None] + gx[None, None, None, :] + offsets.data[:, 1::2]

    y0 = np.floor(ys)
    x0 = np.floor(xs)
    ty = ys - y0
    tx = xs - x0

    xf = x.data.reshape(B, C, H * W)
    corners = []           # (vals, w, dwdy, dwdx, idx, inb) per bilinear corner
    for yc, wy, dy in ((y0, 1.0 - ty, -1.0), (y0 + 1, ty, 1.0)):
        for xc, wx, dx in ((x0, 1.0 - tx, -1.0), (x0 + 1, tx, 1.0)):
            inb = (yc >= 0) & (yc < H) & (xc >= 0) & (xc < W)
            idx = (np.clip(yc, 0, H - 1) * W + np.clip(xc, 0, W - 1)).astype(np.int64)
            vals = np.take_along_axis(xf, idx.reshape(B, 1, -1), axis=2)
            vals = vals.reshape(B, C, N, H, W) * inb[:, None]
            w = (wy * wx * inb).astype(x.dtype)
            corners.append((vals, w, dy * wx * inb, dx * wy * inb, idx, inb))

    samples = np.zeros((B, C, N, H, W), dtype=x.dtype)
    for vals, w, _, _, _, _ in corners:
        samples += vals * w[:, None]

    wflat = weight.data.reshape(O, C, N)
    out = np.einsum("ocn,bcnhw->bohw", wflat, samples, optimize=True)
    out = out + bias.data

    def backward(g):
        g_samples = np.einsum("ocn,bohw->bcnhw", wflat, g, optimize=True)
        g_weight = np.einsum("bohw,bcnhw->ocn", g, samples, optimize=True).reshape(weight.shape)
        g_bias = g.sum(axis=(0, 2, 3)).reshape(1, O, 1, 1)

        g_input = np.zeros((B, C, H * W), dtype=x.dtype)
        g_dy = np.zeros((B, N, H, W), dtype=x.dtype)
        g_dx = np.zeros((B, N, H, W), dtype=x.dtype)
        chan = np.arange(C)[:, None] * (H * W)
        nfull = C * H * W
        for vals, w, dwdy, dwdx, idx, inb in corners:
            contrib = g_samples * w[:, None]                     # (B,C,N,H,W)
            for b in range(B):
                flat = (chan + idx[b].reshape(1, -1)).ravel()
                g_input[b] += np.bincount(
                    flat, weights=contrib[b].reshape(C, -1).ravel().astype(np.float64),
                    minlength=nfull).reshape(C, H * W).astype(x.dtype)
            gv = (g_samples * vals).sum(axis=1)                  # (B,N,H,W)
            g_dy += gv * dwdy.astype(x.dtype)
            g_dx += gv * dwdx.astype(x.dtype)

        g_off = np.empty_like(offsets.data)
        g_off[:, 0::2] = g_dy
        g_off[:, 1::2] = g_dx
        return g_input.reshape(B, C, H, W), g_weight, g_bias, g_off

    return _make(out.astype(x.dtype, copy=False), (x, weight, bias, offsets), backward)


def partial_conv2d(x: Tensor, mask: Tensor, weight: Tensor, bias: Tensor,
                   stride: int = 1, padding: int = 0) -> tuple[Tensor, Tensor]:
    """Mask-aware convolution with window renormalization.

    ``mask`` is single-channel {0,1} (1 = valid).  Windows holding s > 0 valid
    taps are rescaled by kH*kW/s; fully masked windows output the bias alone.
    Returns (output, updated_mask); the mask path carries no gradients.
    """
    B, C, H, W = x.shape
    O, Cw, kH, kW = weight.shape
    if mask.shape != (B, 1, H, W):
        raise ShapeError(f"partial_conv2d: mask must be ({B},1,{H},{W}), got {mask.shape}")
    mdata = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if not np.isin(mdata, (0.0, 1.0)).all():
        raise ValueError("partial_conv2d: mask values must be exactly 0 or 1")

    mcols, _, out_h, out_w, _, _ = _im2col(mdata.astype(x.dtype), kH, kW, stride, padding, 1)
    s = mcols.sum(axis=1).reshape(B, 1, out_h, out_w)
    n_taps = float(kH * kW)
    ratio = np.where(s > 0, n_taps / np.maximum(s, 1.0), 0.0).astype(x.dtype)

    masked = T.mul(x, T.expand_channels(Tensor(mdata.astype(x.dtype)), C))
    raw = T.conv2d(masked, weight, None, stride=stride, padding=padding)
    out = T.add(T.mul(raw, T.expand_channels(Tensor(ratio), O)), bias)
    updated = Tensor((s > 0).astype(x.dtype))
    return out, updated


def feature_equalize(f: Tensor, gate_weight: Tensor, gate_bias: Tensor) -> Tensor:
    """Scale a feature map by the mean of its per-channel attention gates.

    Gates come from a shared affine on the pooled channel means, so the whole
    map is multiplied by one per-sample value and every channel receives the
    same attention.  The shared affine (rather than a dense mixing matrix)
    keeps the operator equivariant under channel permutations.
    """
    pooled = T.global_avg_pool(f)
    gates = T.sigmoid(T.add(T.mul(pooled, gate_weight), gate_bias))
    mean_gate = T.mean_channels(gates)
    return T.mul(f, mean_gate)


class EqualizeGate:
    """Parameter holder for feature_equalize."""

    def __init__(self, dtype=np.float32):
        self.weight = Tensor(np.ones((1, 1, 1, 1), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros((1, 1, 1, 1), dtype=dtype), requires_grad=True)

    def __call__(self, f: Tensor) -> Tensor:
        return feature_equalize(f, self.weight, self.bias)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class OffsetEstimator:
    """Predicts per-tap displacements from concatenated target/reference features.

    Three blocks, each a bank of parallel 3x3 convolutions with dilations
    1/2/4 fused by a 1x1 convolution and LeakyReLU(0.2); the receptive field
    mix lets the estimator latch onto similarity from near to far.  The final
    1x1 projection is zero-initialized so training starts from the identity
    alignment.
    """

    DILATIONS = (1, 2, 4)

    def __init__(self, rng, in_channels: int, hidden: int, kernel_size: int,
                 blocks: int = 3, dtype=np.float32):
        self.kernel_size = kernel_size
        self.blocks = []
        c = in_channels
        for _ in range(blocks):
            bank = [Conv2d(rng, c, hidden, 3, padding=d, dilation=d, dtype=dtype)
                    for d in self.DILATIONS]
            fuse = Conv2d(rng, hidden * len(self.DILATIONS), hidden, 1, dtype=dtype)
            self.blocks.append((bank, fuse))
            c = hidden
        self.head = Conv2d(rng, hidden, 2 * kernel_size * kernel_size, 1,
                           zero_init=True, dtype=dtype)

    def __call__(self, f_t: Tensor, f_r: Tensor) -> Tensor:
        if f_t.shape != f_r.shape:
            raise ShapeError(f"offset estimator: shapes differ {f_t.shape} vs {f_r.shape}")
        y = T.concat_channels([f_t, f_r])
        for bank, fuse in self.blocks:
            y = T.leaky_relu(fuse(T.concat_channels([conv(y) for conv in bank])), 0.2)
        return self.head(y)

    def params(self, prefix: str) -> dict[str, Tensor]:
        groups = []
        for i, (bank, fuse) in enumerate(self.blocks):
            for j, conv in enumerate(bank):
                groups.append(conv.params(f"{prefix}.block{i}.dil{self.DILATIONS[j]}"))
            groups.append(fuse.params(f"{prefix}.block{i}.fuse"))
        groups.append(self.head.params(f"{prefix}.head"))
        return merge_params(*groups)


class FeatureAlignment:
    """Warp reference features onto input features and fuse them residually.

    offsets = estimator(F_i, F_r); A = deformable_conv(F_r, offsets);
    output = conv1x1(concat(F_i, A)) + F_i.  The residual form degrades
    gracefully to single-image behaviour when the reference is uninformative
    (e.g. the all-black no-reference mode).
    """

    def __init__(self, rng, channels: int, kernel_size: int = 3,
                 estimator_hidden: int | None = None, dtype=np.float32):
        hidden = estimator_hidden or max(channels // 2, 8)
        self.estimator = OffsetEstimator(rng, 2 * channels, hidden, kernel_size, dtype=dtype)
        k = kernel_size
        w = (rng.standard_normal((channels, channels, k, k)) *
             np.sqrt(2.0 / (channels * k * k))).astype(dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        self.fuse = Conv2d(rng, 2 * channels, channels, 1, dtype=dtype)

    def __call__(self, f_i: Tensor, f_r: Tensor, offsets_override: Tensor | None = None):
        if f_i.shape != f_r.shape:
            raise ShapeError(f"feature_align: shapes differ {f_i.shape} vs {f_r.shape}")
        offsets = offsets_override if offsets_override is not None \
            else self.estimator(f_i, f_r)
        aligned = deformable_conv2d(f_r, self.weight, self.bias, offsets)
        return T.add(self.fuse(T.concat_channels([f_i, aligned])), f_i)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return merge_params(
            self.estimator.params(f"{prefix}.estimator"),
            {f"{prefix}.deform.weight": self.weight, f"{prefix}.deform.bias": self.bias},
            self.fuse.params(f"{prefix}.fuse"),
        )
