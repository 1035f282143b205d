"""Training objective: weighted reconstruction, perceptual, style,
relativistic average least-squares adversarial and branch supervision terms.

The perceptual/style feature extractor is a fixed (never trained) strided
convolution pyramid.  At desk scale its weights are seeded random; weights
exported from an external pretrained classifier can be imported through the
checkpoint archive format instead (``FeaturePyramid.from_archive``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import he_normal
from .tensor import Tensor

HOLE_WEIGHT = 6.0


@dataclass
class LossWeights:
    w_rec: float = 1.0
    w_perc: float = 0.1
    w_style: float = 250.0
    w_adv: float = 0.2
    w_branch: float = 1.0

    def __post_init__(self):
        for name, v in vars(self).items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0")


def l1(a: Tensor, b: Tensor) -> Tensor:
    return T.mean_all(T.absolute(T.sub(a, b)))


def reconstruction_loss(output: Tensor, target: Tensor, mask: Tensor) -> Tensor:
    """L1 with hole emphasis: mean over valid pixels + 6x mean over holes."""
    C = output.shape[1]
    diff = T.absolute(T.sub(output, target))
    m = mask.data
    valid_n = float(m.sum()) * C
    hole_n = float((1.0 - m).sum()) * C
    terms = []
    if valid_n > 0:
        vmask = T.expand_channels(Tensor(m.astype(output.dtype)), C)
        terms.append(T.mul_scalar(T.sum_all(T.mul(diff, vmask)), 1.0 / valid_n))
    if hole_n > 0:
        hmask = T.expand_channels(Tensor((1.0 - m).astype(output.dtype)), C)
        terms.append(T.mul_scalar(T.sum_all(T.mul(diff, hmask)), HOLE_WEIGHT / hole_n))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


class FeaturePyramid:
    """Fixed convolutional feature stack for perceptual/style distances.

    ``stages`` stride-2 3x3 convolutions with ReLU; channel widths grow from
    ``base_channels``.  Weights are frozen: seeded-random by default, or
    loaded from a tensor archive of a pretrained export.
    """

    def __init__(self, seed: int = 0, stages: int = 5, base_channels: int = 8,
                 in_channels: int = 3, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        c_in = in_channels
        for s in range(stages):
            c_out = base_channels * (s + 1)
            w = he_normal(rng, (c_out, c_in, 3, 3), c_in * 9, dtype)
            self.weights.append(Tensor(w))
            self.biases.append(Tensor(np.zeros((1, c_out, 1, 1), dtype=dtype)))
            c_in = c_out

    @staticmethod
    def from_archive(path: str) -> "FeaturePyramid":
        """Import stage weights from a checkpoint-format tensor archive.

        Expected names: ``stage{i}.weight`` / ``stage{i}.bias``, i from 0.
        """
        from .checkpoint import load_archive
        arrays, _ = load_archive(path)
        net = FeaturePyramid.__new__(FeaturePyramid)
        net.weights, net.biases = [], []
        i = 0
        while f"stage{i}.weight" in arrays:
            net.weights.append(Tensor(arrays[f"stage{i}.weight"]))
            b = arrays[f"stage{i}.bias"]
            net.biases.append(Tensor(b.reshape(1, -1, 1, 1)))
            i += 1
        if i == 0:
            raise ValueError(f"{path}: no stage0.weight entry; not a feature export")
        return net

    def __call__(self, image: Tensor) -> list[Tensor]:
        feats = []
        y = image
        for w, b in zip(self.weights, self.biases):
            y = T.relu(T.conv2d(y, w, b, stride=2, padding=1))
            feats.append(y)
        return feats


def perceptual_loss(output: Tensor, target: Tensor, featnet: FeaturePyramid) -> Tensor:
    fo = featnet(output)
    ft = featnet(target)
    total = l1(fo[0], ft[0])
    for a, b in zip(fo[1:], ft[1:]):
        total = T.add(total, l1(a, b))
    return total


def gram_style_loss(output: Tensor, target: Tensor, featnet: FeaturePyramid) -> Tensor:
    fo = featnet(output)
    ft = featnet(target)
    total = l1(T.gram(fo[0]), T.gram(ft[0]))
    for a, b in zip(fo[1:], ft[1:]):
        total = T.add(total, l1(T.gram(a), T.gram(b)))
    return total


def ra_lsgan_loss(d_real: Tensor, d_fake: Tensor, side: str) -> Tensor:
    """Relativistic average least-squares GAN objective.

    discriminator: E[(D(x_r) - E[D(x_f)] - 1)^2] + E[(D(x_f) - E[D(x_r)] + 1)^2]
    generator:     the same with the real/fake roles swapped.
    """
    if side not in ("generator", "discriminator"):
        raise ValueError(f"side must be 'generator' or 'discriminator', got {side!r}")
    mean_real = T.mean_all(d_real)
    mean_fake = T.mean_all(d_fake)
    rel_real = T.sub(d_real, mean_fake)
    rel_fake = T.sub(d_fake, mean_real)
    if side == "discriminator":
        pos, neg = rel_real, rel_fake
    else:
        pos, neg = rel_fake, rel_real
    a = T.add_scalar(pos, -1.0)
    b = T.add_scalar(neg, 1.0)
    return T.add(T.mean_all(T.mul(a, a)), T.mean_all(T.mul(b, b)))


def branch_supervision_loss(f_fte: Tensor, f_fst: Tensor, gt_image: Tensor,
                            gt_structure: Tensor, projections) -> Tensor:
    """L1 of the RGB-projected branch outputs against ground truth and its
    structure image.  ``projections`` are the (texture, structure) 1x1
    projection layers owned by the network."""
    proj_te, proj_st = projections
    H, W = gt_image.shape[2], gt_image.shape[3]
    rgb_te = T.bilinear_resize(proj_te(f_fte), H, W)
    rgb_st = T.bilinear_resize(proj_st(f_fst), H, W)
    return T.add(l1(rgb_te, gt_image), l1(rgb_st, gt_structure))


def total_loss(components: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum; missing components simply contribute nothing."""
    pairs = (("reconstruction", weights.w_rec), ("perceptual", weights.w_perc),
             ("style", weights.w_style), ("adversarial", weights.w_adv),
             ("branch", weights.w_branch))
    total = None
    for name, w in pairs:
        if name not in components:
            continue
        term = T.mul_scalar(components[name], w)
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ValueError("no loss components given")
    return total


def total_training_loss(result, gt_image: Tensor, gt_structure: Tensor,
                        mask: Tensor, network, featnet: FeaturePyramid,
                        d_real: Tensor, d_fake: Tensor,
                        weights: LossWeights) -> dict[str, Tensor]:
    """All generator-side components plus their weighted total.

    ``result`` is a network ForwardResult; adversarial scores come from the
    discriminator evaluated on the ground truth and the composite.
    """
    components = {
        "reconstruction": reconstruction_loss(result.raw, gt_image, mask),
        "perceptual": perceptual_loss(result.composite, gt_image, featnet),
        "style": gram_style_loss(result.composite, gt_image, featnet),
        "adversarial": ra_lsgan_loss(d_real, d_fake, side="generator"),
        "branch": branch_supervision_loss(
            result.f_fte, result.f_fst, gt_image, gt_structure,
            network.branch_projections()),
    }
    components["total"] = total_loss(components, weights)
    return components
