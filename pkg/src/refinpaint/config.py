"""Flat key=value training configuration.

Every key is documented with its default in ``default_config_text()``;
unknown keys are rejected so typos fail loudly.  Tuple-valued keys are
comma-separated integers.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .losses import LossWeights
from .network import NetworkConfig
from .rtv import RtvParams


@dataclass
class TrainConfig:
    # optimization
    lr: float = 2e-4                  # Adam learning rate
    batch: int = 1                    # samples per step
    epochs: int = 1                   # passes over the pair set (toy default; full runs use 80)
    seed: int = 0                     # master seed: init, data order, masks
    checkpoint_interval: int = 200    # steps between periodic checkpoints

    # loss weights
    w_rec: float = 1.0
    w_perc: float = 0.1
    w_style: float = 250.0
    w_adv: float = 0.2
    w_branch: float = 1.0

    # network
    image_size: int = 64              # training resolution (full scale: 256)
    base_channels: int = 16           # encoder width (full scale: 64)
    encoder_depth: int = 5
    texture_stages: tuple = (1, 2)
    structure_stages: tuple = (3, 4, 5)
    branch_kernel_sizes: tuple = (3, 5, 7)
    residual_blocks: int = 4
    residual_dilations: tuple = (2, 2, 4, 4)
    fam_kernel_size: int = 3
    disc_base_channels: int = 16

    # structure supervision
    rtv_lambda: float = 0.01
    rtv_sigma: float = 3.0
    rtv_epsilon: float = 1e-3
    rtv_iterations: int = 4

    # perceptual feature network
    featnet_seed: int = 0
    featnet_weights: str = ""         # optional tensor-archive of pretrained features

    # data
    manifest: str = "pairs/manifest.txt"
    mask_dir: str = "masks"
    reference_mode: str = "real"      # real | black | shuffled
    out_dir: str = "runs/toy"

    def __post_init__(self):
        if self.lr <= 0 or self.batch < 1 or self.epochs < 0:
            raise ValueError("lr must be > 0, batch >= 1, epochs >= 0")
        if self.reference_mode not in ("real", "black", "shuffled"):
            raise ValueError(f"bad reference_mode {self.reference_mode!r}")

    # -- views ---------------------------------------------------------------

    def network_config(self, dtype=np.float32) -> NetworkConfig:
        return NetworkConfig(
            image_size=self.image_size, base_channels=self.base_channels,
            encoder_depth=self.encoder_depth,
            texture_stages=tuple(self.texture_stages),
            structure_stages=tuple(self.structure_stages),
            branch_kernel_sizes=tuple(self.branch_kernel_sizes),
            residual_blocks=self.residual_blocks,
            residual_dilations=tuple(self.residual_dilations),
            fam_kernel_size=self.fam_kernel_size, dtype=dtype)

    def loss_weights(self) -> LossWeights:
        return LossWeights(w_rec=self.w_rec, w_perc=self.w_perc,
                           w_style=self.w_style, w_adv=self.w_adv,
                           w_branch=self.w_branch)

    def rtv_params(self) -> RtvParams:
        return RtvParams(lam=self.rtv_lambda, sigma=self.rtv_sigma,
                         epsilon=self.rtv_epsilon, iterations=self.rtv_iterations)

    def snapshot(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @staticmethod
    def from_snapshot(d: dict) -> "TrainConfig":
        kwargs = {}
        for f in fields(TrainConfig):
            if f.name in d:
                v = d[f.name]
                kwargs[f.name] = tuple(v) if isinstance(v, list) else v
        return TrainConfig(**kwargs)


_TUPLE_KEYS = {"texture_stages", "structure_stages", "branch_kernel_sizes",
               "residual_dilations"}


def parse_config(text: str) -> TrainConfig:
    """Parse flat ``key = value`` lines; '#' starts a comment."""
    values = {}
    valid = {f.name: f.type for f in fields(TrainConfig)}
    defaults = TrainConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in valid:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in _TUPLE_KEYS:
            values[key] = tuple(int(s) for s in raw.split(",") if s.strip())
        else:
            default = getattr(defaults, key)
            if isinstance(default, bool):
                values[key] = raw.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                values[key] = int(raw)
            elif isinstance(default, float):
                values[key] = float(raw)
            else:
                values[key] = raw
    return TrainConfig(**values)


def load_config(path: str) -> TrainConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def default_config_text() -> str:
    """Documented template listing every key with its default."""
    lines = ["# training configuration (flat key=value; '#' comments)"]
    doc = {
        "lr": "Adam learning rate",
        "batch": "samples per optimizer step",
        "epochs": "passes over the pair set (toy 1, full-scale runs 80)",
        "seed": "master seed for init, data order and mask choice",
        "checkpoint_interval": "steps between periodic checkpoints",
        "w_rec": "reconstruction loss weight",
        "w_perc": "perceptual loss weight",
        "w_style": "style loss weight",
        "w_adv": "adversarial loss weight",
        "w_branch": "branch supervision weight",
        "image_size": "training resolution (toy 64, full 256)",
        "base_channels": "encoder width (toy 16, full 64)",
        "encoder_depth": "number of stride-2 encoder stages",
        "texture_stages": "encoder stages regrouped as texture features",
        "structure_stages": "encoder stages regrouped as structure features",
        "branch_kernel_sizes": "partial-conv kernel sizes, one stream each",
        "residual_blocks": "dilated residual blocks before the decoder",
        "residual_dilations": "dilation per residual block",
        "fam_kernel_size": "deformable kernel size in the alignment module",
        "disc_base_channels": "discriminator width",
        "rtv_lambda": "structure smoothing strength",
        "rtv_sigma": "structure smoothing window scale (px)",
        "rtv_epsilon": "structure smoothing division guard",
        "rtv_iterations": "structure smoothing reweighting passes",
        "featnet_seed": "seed of the fixed perceptual feature pyramid",
        "featnet_weights": "optional tensor-archive with pretrained features",
        "manifest": "pair manifest path",
        "mask_dir": "directory of mask PNGs (255=valid, 0=hole)",
        "reference_mode": "real | black | shuffled",
        "out_dir": "checkpoints and logs go here",
    }
    cfg = TrainConfig()
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(map(str, v))
        lines.append(f"{f.name} = {v}  # {doc[f.name]}")
    return "\n".join(lines) + "\n"
