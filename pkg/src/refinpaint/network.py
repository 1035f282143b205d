"""Reference-based encoder-decoder network and its adversarial critic.

One shared-parameter encoder runs on both the masked input and the
reference.  Shallow stages are regrouped as texture features and deep
stages as structure features; each group is aligned against its reference
counterpart, filled by multi-kernel partial-convolution streams, fused,
equalized and decoded with skip connections back to an RGB image.  Valid
pixels are composited straight from the input, so the network is only ever
trusted inside the holes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .align import EqualizeGate, FeatureAlignment, partial_conv2d
from .layers import Conv2d, ConvTranspose2d, merge_params
from .tensor import ShapeError, Tensor


@dataclass
class NetworkConfig:
    image_size: int = 64
    base_channels: int = 16
    encoder_depth: int = 5
    texture_stages: tuple = (1, 2)          # shallow encoder stages (1-based)
    structure_stages: tuple = (3, 4, 5)     # deep encoder stages
    branch_kernel_sizes: tuple = (3, 5, 7)
    residual_blocks: int = 4
    residual_dilations: tuple = (2, 2, 4, 4)
    fam_kernel_size: int = 3
    dtype: type = np.float32

    def __post_init__(self):
        covered = sorted(set(self.texture_stages) | set(self.structure_stages))
        if covered != list(range(1, self.encoder_depth + 1)):
            raise ValueError("texture and structure stages must cover every "
                             f"encoder stage 1..{self.encoder_depth}, got {covered}")
        if any(k % 2 == 0 for k in self.branch_kernel_sizes):
            raise ValueError("branch kernel sizes must be odd")
        if self.image_size % (2 ** self.encoder_depth) != 0:
            raise ValueError(f"image size {self.image_size} not divisible by "
                             f"2^{self.encoder_depth}")
        if self.image_size % 8 != 0:
            raise ValueError("image size must be divisible by 8 (working resolution)")
        if len(self.residual_dilations) != self.residual_blocks:
            raise ValueError("need one dilation per residual block")

    @property
    def stage_channels(self) -> list[int]:
        return [min(self.base_channels * 2 ** i, self.base_channels * 8)
                for i in range(self.encoder_depth)]

    @property
    def work_channels(self) -> int:
        return self.base_channels * 4

    @property
    def stream_channels(self) -> int:
        return max(self.base_channels * 2, 4)

    @property
    def work_size(self) -> int:
        return self.image_size // 8


@dataclass
class ForwardResult:
    composite: Tensor      # holes from the network, valid pixels from the input
    raw: Tensor            # full network output before compositing
    f_fte: Tensor          # filled texture branch features
    f_fst: Tensor          # filled structure branch features
    f_sf: Tensor = None
    encoder_stages: list = field(default_factory=list)


def _ones_like_mask(image: Tensor) -> Tensor:
    B, _, H, W = image.shape
    return Tensor(np.ones((B, 1, H, W), dtype=image.dtype))


class InpaintingNetwork:
    """Generator: see module docstring.  All parameters live in a flat
    name -> Tensor dict (``params()``); the input and reference paths use
    the very same encoder tensors."""

    def __init__(self, config: NetworkConfig, rng: np.random.Generator):
        self.config = config
        c = config
        dt = c.dtype
        ch = c.stage_channels

        self.enc_stages = []
        in_c = 4                                 # masked RGB + mask channel
        for i in range(c.encoder_depth):
            self.enc_stages.append(Conv2d(rng, in_c, ch[i], 4, stride=2, padding=1,
                                          dtype=dt))
            in_c = ch[i]

        tex_c = sum(ch[i - 1] for i in c.texture_stages)
        st_c = sum(ch[i - 1] for i in c.structure_stages)
        self.texture_proj = Conv2d(rng, tex_c, c.work_channels, 1, dtype=dt)
        self.structure_proj = Conv2d(rng, st_c, c.work_channels, 1, dtype=dt)

        self.fam_te = FeatureAlignment(rng, c.work_channels, c.fam_kernel_size, dtype=dt)
        self.fam_st = FeatureAlignment(rng, c.work_channels, c.fam_kernel_size, dtype=dt)

        sc = c.stream_channels
        self.branches = {}
        for branch in ("te", "st"):
            streams = {}
            for k in c.branch_kernel_sizes:
                convs = [Conv2d(rng, c.work_channels if j == 0 else sc, sc, k,
                                padding=k // 2, dtype=dt) for j in range(3)]
                streams[k] = convs
            fuse = Conv2d(rng, sc * len(c.branch_kernel_sizes), c.work_channels, 1,
                          dtype=dt)
            self.branches[branch] = (streams, fuse)

        self.sf_fuse = Conv2d(rng, 2 * c.work_channels, c.work_channels, 1, dtype=dt)
        self.equalize = EqualizeGate(dtype=dt)

        deep = ch[-1]
        self.res_blocks = []
        for d in c.residual_dilations:
            conv1 = Conv2d(rng, deep, deep, 3, padding=d, dilation=d, dtype=dt)
            conv2 = Conv2d(rng, deep, deep, 3, padding=d, dilation=d, dtype=dt)
            self.res_blocks.append((conv1, conv2, d))

        self.decoder_ups = []
        cur = deep
        for j in range(c.encoder_depth - 2, -1, -1):
            up = ConvTranspose2d(rng, cur, ch[j], dtype=dt)
            fuse = Conv2d(rng, 2 * ch[j] + c.work_channels, ch[j], 3, padding=1,
                          dtype=dt)
            self.decoder_ups.append((up, fuse))
            cur = ch[j]
        self.final_up = ConvTranspose2d(rng, cur, cur, dtype=dt)
        self.out_conv = Conv2d(rng, cur + c.work_channels, 3, 3, padding=1, dtype=dt)

        self.proj_te = Conv2d(rng, c.work_channels, 3, 1, dtype=dt)
        self.proj_st = Conv2d(rng, c.work_channels, 3, 1, dtype=dt)

    # -- pipeline pieces ----------------------------------------------------

    def encode(self, image: Tensor, mask: Tensor | None = None) -> list[Tensor]:
        """Per-stage features of concat(image*mask, mask); halving spatial size.

        The reference image passes an all-ones mask (the default)."""
        B, C, H, W = image.shape
        if C != 3:
            raise ShapeError(f"encoder expects RGB input, got {C} channels")
        d = self.config.encoder_depth
        if H % (2 ** d) or W % (2 ** d):
            raise ShapeError(f"image {H}x{W} not divisible by 2^{d}")
        if mask is None:
            mask = _ones_like_mask(image)
        masked = T.mul(image, T.expand_channels(mask, 3))
        x = T.concat_channels([masked, mask])
        stages = []
        for i, conv in enumerate(self.enc_stages):
            x = conv(x)
            if i > 0:
                x = T.instance_norm(x)
            x = T.leaky_relu(x, 0.2)
            stages.append(x)
        return stages

    def split_texture_structure(self, stages: list[Tensor]) -> tuple[Tensor, Tensor]:
        """Shallow stages -> texture features, deep stages -> structure features,
        each resized to the working resolution and projected to a common width."""
        w = stages[0].shape[2] * 2 // 8          # working size for this input
        w = max(w, 1)
        tex = [T.bilinear_resize(stages[i - 1], w, w)
               for i in self.config.texture_stages]
        st = [T.bilinear_resize(stages[i - 1], w, w)
              for i in self.config.structure_stages]
        f_te = self.texture_proj(T.concat_channels(tex))
        f_st = self.structure_proj(T.concat_channels(st))
        return f_te, f_st

    def align(self, f_ite, f_ist, f_rte, f_rst,
              offsets_te=None, offsets_st=None) -> tuple[Tensor, Tensor]:
        f_ate = self.fam_te(f_ite, f_rte, offsets_override=offsets_te)
        f_ast = self.fam_st(f_ist, f_rst, offsets_override=offsets_st)
        return f_ate, f_ast

    def _fill_one_branch(self, feature: Tensor, mask_small: Tensor, branch: str):
        streams, fuse = self.branches[branch]
        outs, final_masks = [], []
        for k, convs in streams.items():
            x, m = feature, mask_small
            for conv in convs:
                x, m = partial_conv2d(x, m, conv.weight, conv.bias,
                                      padding=conv.padding)
                x = T.relu(x)
            outs.append(x)
            final_masks.append(m)
        return fuse(T.concat_channels(outs)), final_masks

    def fill_branches(self, f_ate: Tensor, f_ast: Tensor,
                      mask_small: Tensor) -> tuple[Tensor, Tensor]:
        """Hole filling at multiple kernel scales via stacked partial convs."""
        f_fte, _ = self._fill_one_branch(f_ate, mask_small, "te")
        f_fst, _ = self._fill_one_branch(f_ast, mask_small, "st")
        return f_fte, f_fst

    def fuse_and_equalize(self, f_fte: Tensor, f_fst: Tensor) -> Tensor:
        return self.equalize(self.sf_fuse(T.concat_channels([f_fte, f_fst])))

    def decode(self, f_sf: Tensor, stages: list[Tensor], image: Tensor,
               mask: Tensor) -> tuple[Tensor, Tensor]:
        """Dilated residual refinement, mirror upsampling with skip and f_sf
        injections, sigmoid RGB head, then hole compositing."""
        x = stages[-1]
        for conv1, conv2, _ in self.res_blocks:
            y = T.leaky_relu(T.instance_norm(conv1(x)), 0.2)
            y = T.instance_norm(conv2(y))
            x = T.leaky_relu(T.add(x, y), 0.2)
        for (up, fuse), j in zip(self.decoder_ups,
                                 range(self.config.encoder_depth - 2, -1, -1)):
            x = up(x)
            skip = stages[j]
            sf = T.bilinear_resize(f_sf, skip.shape[2], skip.shape[3])
            x = T.leaky_relu(T.instance_norm(fuse(T.concat_channels([x, skip, sf]))),
                             0.2)
        x = self.final_up(x)
        sf = T.bilinear_resize(f_sf, x.shape[2], x.shape[3])
        raw = T.sigmoid(self.out_conv(T.concat_channels([x, sf])))
        valid = T.expand_channels(mask, 3)
        hole = T.expand_channels(Tensor((1.0 - mask.data).astype(raw.dtype)), 3)
        composite = T.add(T.mul(raw, hole), T.mul(image, valid))
        return raw, composite

    def downsample_mask(self, mask: Tensor) -> Tensor:
        """Nearest-neighbour mask at the working resolution (non-differentiable)."""
        H = mask.shape[2]
        w = max(H // 8, 1)
        step = H // w
        return Tensor(mask.data[:, :, ::step, ::step].copy())

    def forward(self, image: Tensor, mask: Tensor, reference: Tensor) -> ForwardResult:
        """Full pipeline; also surfaces the branch features for supervision."""
        if image.shape != reference.shape:
            raise ShapeError(f"input {image.shape} and reference {reference.shape} "
                             "must match")
        stages_in = self.encode(image, mask)
        stages_ref = self.encode(reference)
        f_ite, f_ist = self.split_texture_structure(stages_in)
        f_rte, f_rst = self.split_texture_structure(stages_ref)
        f_ate, f_ast = self.align(f_ite, f_ist, f_rte, f_rst)
        mask_small = self.downsample_mask(mask)
        f_fte, f_fst = self.fill_branches(f_ate, f_ast, mask_small)
        f_sf = self.fuse_and_equalize(f_fte, f_fst)
        raw, composite = self.decode(f_sf, stages_in, image, mask)
        return ForwardResult(composite=composite, raw=raw, f_fte=f_fte, f_fst=f_fst,
                             f_sf=f_sf, encoder_stages=stages_in)

    def branch_projections(self):
        return self.proj_te, self.proj_st

    # -- parameters ----------------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        groups = []
        for i, conv in enumerate(self.enc_stages):
            groups.append(conv.params(f"enc.stage{i + 1}"))
        groups.append(self.texture_proj.params("split.texture"))
        groups.append(self.structure_proj.params("split.structure"))
        groups.append(self.fam_te.params("fam_te"))
        groups.append(self.fam_st.params("fam_st"))
        for branch, (streams, fuse) in self.branches.items():
            for k, convs in streams.items():
                for j, conv in enumerate(convs):
                    groups.append(conv.params(f"branch_{branch}.k{k}.conv{j}"))
            groups.append(fuse.params(f"branch_{branch}.fuse"))
        groups.append(self.sf_fuse.params("sf_fuse"))
        groups.append(self.equalize.params("equalize"))
        for r, (c1, c2, _) in enumerate(self.res_blocks):
            groups.append(c1.params(f"dec.res{r}.conv1"))
            groups.append(c2.params(f"dec.res{r}.conv2"))
        for u, (up, fuse) in enumerate(self.decoder_ups):
            groups.append(up.params(f"dec.up{u}.deconv"))
            groups.append(fuse.params(f"dec.up{u}.fuse"))
        groups.append(self.final_up.params("dec.final_up"))
        groups.append(self.out_conv.params("dec.out"))
        groups.append(self.proj_te.params("proj_te"))
        groups.append(self.proj_st.params("proj_st"))
        return merge_params(*groups)


class Discriminator:
    """Four stride-2 convolutions and a 1-channel head: a patch score map
    at 1/16 of the input resolution."""

    def __init__(self, rng: np.random.Generator, base_channels: int = 16,
                 in_channels: int = 3, dtype=np.float32):
        widths = [base_channels, base_channels * 2, base_channels * 4,
                  base_channels * 4]
        self.convs = []
        c = in_channels
        for w in widths:
            self.convs.append(Conv2d(rng, c, w, 4, stride=2, padding=1, dtype=dtype))
            c = w
        self.head = Conv2d(rng, c, 1, 3, padding=1, dtype=dtype)

    def __call__(self, image: Tensor) -> Tensor:
        x = image
        for conv in self.convs:
            x = T.leaky_relu(conv(x), 0.2)
        return self.head(x)

    def params(self) -> dict[str, Tensor]:
        groups = [conv.params(f"disc.conv{i}") for i, conv in enumerate(self.convs)]
        groups.append(self.head.params("disc.head"))
        return merge_params(*groups)
