"""Central finite-difference verification of analytic gradients.

Everything runs in float64: the derivative checks need more headroom than
the float32 training dtype provides.  Error is reported per parameter group
as max|analytic - numeric| / max(1, max|numeric|).
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, zero_grads


def numeric_gradient(func, target: Tensor, h: float = 1e-5,
                     elements=None) -> np.ndarray:
    """Central finite differences of func() w.r.t. target.data.

    ``elements`` optionally restricts the probe to a list of flat indices
    (entries elsewhere are returned as NaN so callers can mask them).
    """
    flat = target.data.reshape(-1)
    if elements is None:
        elements = range(flat.size)
        grad = np.zeros(flat.size, dtype=np.float64)
    else:
        grad = np.full(flat.size, np.nan, dtype=np.float64)
    for i in elements:
        orig = flat[i]
        flat[i] = orig + h
        f_plus = func().item()
        flat[i] = orig - h
        f_minus = func().item()
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(target.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    mask = np.isfinite(numeric)
    if not mask.any():
        return 0.0
    diff = np.abs(analytic[mask] - numeric[mask]).max()
    scale = max(1.0, np.abs(numeric[mask]).max())
    return float(diff / scale)


def check_gradients(func, named_tensors: dict[str, Tensor], h: float = 1e-5,
                    max_probes: int | None = None, rng=None) -> dict[str, float]:
    """Compare backward() gradients of func() against finite differences.

    Returns max relative error per named tensor.  ``max_probes`` caps the
    number of perturbed elements per tensor (random subset, for large
    parameter sets).
    """
    zero_grads(named_tensors)
    loss = func()
    loss.backward()
    analytic = {}
    for name, t in named_tensors.items():
        if t.grad is None:
            analytic[name] = np.zeros_like(t.data)
        else:
            analytic[name] = t.grad.copy()

    errors = {}
    for name, t in named_tensors.items():
        elements = None
        if max_probes is not None and t.data.size > max_probes:
            if rng is None:
                rng = np.random.default_rng(0)
            elements = rng.choice(t.data.size, size=max_probes, replace=False)
        numeric = numeric_gradient(func, t, h=h, elements=elements)
        errors[name] = relative_error(analytic[name], numeric)
    return errors


# --------------------------------------------------------------------------
# Named component checks (CLI surface).  Each builds a small float64 problem
# and returns {group_name: max_rel_error}; thresholds per component below.

OPERATOR_TOL = 1e-5
END_TO_END_TOL = 1e-4


def _rng(seed):
    return np.random.default_rng(seed)


def _t(rng, shape, scale=1.0):
    return Tensor((rng.standard_normal(shape) * scale).astype(np.float64),
                  requires_grad=True)


def _check_conv2d(seed):
    from . import tensor as T
    rng = _rng(seed)
    x = _t(rng, (1, 3, 6, 6))
    w = _t(rng, (4, 3, 3, 3), 0.5)
    b = _t(rng, (1, 4, 1, 1), 0.1)

    def f():
        return T.mean_all(T.mul(T.conv2d(x, w, b, stride=1, padding=1),
                                T.conv2d(x, w, b, stride=1, padding=1)))

    return check_gradients(f, {"input": x, "weight": w, "bias": b})


def _check_bilinear_sample(seed):
    # 1x1 deformable convolution with unit weight is exactly per-position
    # bilinear sampling; offsets are kept away from the integer lattice where
    # the interpolant is non-smooth.
    from . import tensor as T
    from .align import deformable_conv2d
    rng = _rng(seed)
    x = _t(rng, (1, 1, 6, 6))
    w = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
    b = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
    off = Tensor((rng.uniform(-1.2, 1.2, (1, 2, 6, 6)) + 0.3).astype(np.float64),
                 requires_grad=True)

    def f():
        y = deformable_conv2d(x, w, b, off)
        return T.mean_all(T.mul(y, y))

    return check_gradients(f, {"feature": x, "offsets": off})


def _check_deformable_conv(seed):
    from . import tensor as T
    from .align import deformable_conv2d
    rng = _rng(seed)
    x = _t(rng, (1, 2, 5, 5))
    w = _t(rng, (3, 2, 3, 3), 0.5)
    b = _t(rng, (1, 3, 1, 1), 0.1)
    off = Tensor((rng.uniform(-1.5, 1.5, (1, 18, 5, 5)) + 0.25).astype(np.float64),
                 requires_grad=True)

    def f():
        y = deformable_conv2d(x, w, b, off)
        return T.mean_all(T.mul(y, y))

    return check_gradients(f, {"input": x, "weight": w, "bias": b, "offsets": off})


def _check_partial_conv(seed):
    from . import tensor as T
    from .align import partial_conv2d
    rng = _rng(seed)
    x = _t(rng, (1, 2, 6, 6))
    w = _t(rng, (3, 2, 3, 3), 0.5)
    b = _t(rng, (1, 3, 1, 1), 0.1)
    mask = Tensor((rng.random((1, 1, 6, 6)) > 0.4).astype(np.float64))

    def f():
        y, _ = partial_conv2d(x, mask, w, b, padding=1)
        return T.mean_all(T.mul(y, y))

    return check_gradients(f, {"input": x, "weight": w, "bias": b})


def _check_fam(seed):
    from . import tensor as T
    from .align import FeatureAlignment
    rng = _rng(seed)
    fam = FeatureAlignment(rng, channels=4, estimator_hidden=6, dtype=np.float64)
    # nudge the zero-initialized head so gradients reach the estimator body and
    # the offsets are probed off-lattice
    fam.estimator.head.weight.data += rng.standard_normal(
        fam.estimator.head.weight.shape) * 0.05
    fam.estimator.head.bias.data += rng.uniform(0.05, 0.4, fam.estimator.head.bias.shape)
    f_i = _t(rng, (1, 4, 5, 5))
    f_r = _t(rng, (1, 4, 5, 5))

    def f():
        y = fam(f_i, f_r)
        return T.mean_all(T.mul(y, y))

    tensors = {"input_feat": f_i, "ref_feat": f_r}
    tensors.update(fam.params("fam"))
    return check_gradients(f, tensors, max_probes=40, rng=_rng(seed + 1))


def _check_equalize(seed):
    from . import tensor as T
    from .align import EqualizeGate
    rng = _rng(seed)
    gate = EqualizeGate(dtype=np.float64)
    x = _t(rng, (2, 5, 4, 4))

    def f():
        y = gate(x)
        return T.mean_all(T.mul(y, y))

    return check_gradients(f, {"input": x, "gate.weight": gate.weight,
                               "gate.bias": gate.bias})


def _check_losses(seed, which):
    from . import tensor as T
    from .losses import (FeaturePyramid, gram_style_loss, perceptual_loss,
                         ra_lsgan_loss, reconstruction_loss)
    rng = _rng(seed)
    out = Tensor(rng.random((1, 3, 8, 8)), requires_grad=True)
    target = Tensor(rng.random((1, 3, 8, 8)))
    mask = Tensor((rng.random((1, 1, 8, 8)) > 0.5).astype(np.float64))

    if which == "reconstruction":
        def f():
            return reconstruction_loss(out, target, mask)
        return check_gradients(f, {"output": out})
    if which == "perceptual":
        net = FeaturePyramid(seed=seed, stages=3, base_channels=4, dtype=np.float64)

        def f():
            return perceptual_loss(out, target, net)
        return check_gradients(f, {"output": out}, max_probes=60, rng=_rng(seed + 1))
    if which == "style":
        net = FeaturePyramid(seed=seed, stages=3, base_channels=4, dtype=np.float64)

        def f():
            return gram_style_loss(out, target, net)
        return check_gradients(f, {"output": out}, max_probes=60, rng=_rng(seed + 1))
    if which == "adversarial":
        real = Tensor(rng.standard_normal((2, 1, 4, 4)), requires_grad=True)
        fake = Tensor(rng.standard_normal((2, 1, 4, 4)), requires_grad=True)

        def f():
            return ra_lsgan_loss(real, fake, side="generator")
        return check_gradients(f, {"real_scores": real, "fake_scores": fake})
    raise ValueError(which)


def _check_end_to_end(seed):
    from . import tensor as T
    from .losses import LossWeights, total_training_loss
    from .network import Discriminator, InpaintingNetwork, NetworkConfig
    from .rtv import RtvParams, rtv_smooth

    rng = _rng(seed)
    cfg = NetworkConfig(image_size=16, base_channels=4, encoder_depth=3,
                        texture_stages=(1,), structure_stages=(2, 3),
                        branch_kernel_sizes=(3,), residual_blocks=1,
                        residual_dilations=(2,), dtype=np.float64)
    net = InpaintingNetwork(cfg, rng)
    # move the zero-initialized offset heads off the integer lattice, where
    # bilinear sampling is non-smooth and finite differences are undefined
    for fam in (net.fam_te, net.fam_st):
        head = fam.estimator.head
        head.weight.data += rng.standard_normal(head.weight.shape) * 0.05
        head.bias.data += rng.uniform(0.1, 0.45, head.bias.shape)
    disc = Discriminator(rng, base_channels=4, dtype=np.float64)
    image = Tensor(rng.random((1, 3, 16, 16)), requires_grad=True)
    reference = Tensor(rng.random((1, 3, 16, 16)))
    mask_np = np.ones((1, 1, 16, 16))
    mask_np[:, :, 5:11, 4:12] = 0.0
    mask = Tensor(mask_np)
    structure = rtv_smooth(image.data[0].transpose(1, 2, 0),
                           RtvParams(iterations=1))
    structure_t = Tensor(structure.transpose(2, 0, 1)[None])
    weights = LossWeights()

    from .losses import FeaturePyramid
    featnet = FeaturePyramid(seed=seed, stages=3, base_channels=4, dtype=np.float64)

    def f():
        res = net.forward(image, mask, reference)
        d_real = disc(image)
        d_fake = disc(res.composite)
        losses = total_training_loss(res, image, structure_t, mask, net,
                                     featnet, d_real, d_fake, weights)
        return losses["total"]

    params = dict(net.params())
    # probe a deterministic subset of parameter groups to keep runtime sane
    names = sorted(params)
    sel = {n: params[n] for i, n in enumerate(names) if i % 7 == 0}
    sel["input_image"] = image
    return check_gradients(f, sel, max_probes=4, rng=_rng(seed + 1))


COMPONENTS = {
    "conv2d": (_check_conv2d, 1e-6),
    "bilinear_sample": (_check_bilinear_sample, OPERATOR_TOL),
    "deformable_conv": (_check_deformable_conv, OPERATOR_TOL),
    "partial_conv": (_check_partial_conv, OPERATOR_TOL),
    "fam": (_check_fam, OPERATOR_TOL),
    "equalize": (_check_equalize, OPERATOR_TOL),
    "reconstruction_loss": (lambda s: _check_losses(s, "reconstruction"), OPERATOR_TOL),
    "perceptual_loss": (lambda s: _check_losses(s, "perceptual"), OPERATOR_TOL),
    "style_loss": (lambda s: _check_losses(s, "style"), OPERATOR_TOL),
    "adversarial_loss": (lambda s: _check_losses(s, "adversarial"), OPERATOR_TOL),
    "end_to_end": (_check_end_to_end, END_TO_END_TOL),
}


def run_component(name: str, seed: int = 0):
    """Run one registered gradient check; returns (errors, tolerance, passed)."""
    if name not in COMPONENTS:
        raise KeyError(f"unknown gradcheck component {name!r}; "
                       f"known: {', '.join(sorted(COMPONENTS))}")
    fn, tol = COMPONENTS[name]
    errors = fn(seed)
    return errors, tol, all(e < tol for e in errors.values())


def report(name: str, seed: int = 0, stream=None) -> bool:
    import sys
    stream = stream or sys.stdout
    errors, tol, ok = run_component(name, seed)
    for group, err in errors.items():
        mark = "ok" if err < tol else "FAIL"
        stream.write(f"{name:18s} {group:28s} max_rel_err={err:.3e}  tol={tol:.0e}  {mark}\n")
    return ok
