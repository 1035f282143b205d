"""Bucketed evaluation, timing and single-image inference.

Test masks are grouped by hole-ratio bucket and handed to test images
round-robin across buckets under a fixed seed, so every bucket sees every
image family.  Assignment is keyed to image content (not list position),
which keeps the evaluation invariant to test-set ordering.  The report
mirrors the usual mask-ratio table: one row per reference mode, one column
per bucket plus the Average column, which is the mean of the bucket means
(buckets weigh equally, not images).
"""

from __future__ import annotations

import hashlib
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_checkpoint
from .config import TrainConfig
from .data import BUCKETS, OUT_OF_RANGE, classify_bucket, reference_for
from .metrics import psnr, ssim
from .network import Discriminator, InpaintingNetwork
from .optim import Adam
from .tensor import Tensor
from .train import resize_image, resize_mask, _to_tensor_image

MODE_LABELS = {"real": "with reference", "black": "no reference",
               "shuffled": "random reference"}


@dataclass
class BucketStats:
    count: int = 0
    psnr_sum: float = 0.0
    ssim_sum: float = 0.0

    @property
    def psnr_mean(self):
        return self.psnr_sum / self.count if self.count else float("nan")

    @property
    def ssim_mean(self):
        return self.ssim_sum / self.count if self.count else float("nan")


@dataclass
class EvalReport:
    mode: str
    buckets: dict = field(default_factory=dict)       # label -> BucketStats
    excluded_masks: int = 0
    seconds_per_image: float = 0.0
    sample_count: int = 0

    @property
    def average_psnr(self) -> float:
        means = [b.psnr_mean for b in self.buckets.values() if b.count]
        return float(np.mean(means)) if means else float("nan")

    @property
    def average_ssim(self) -> float:
        means = [b.ssim_mean for b in self.buckets.values() if b.count]
        return float(np.mean(means)) if means else float("nan")

    def row_cells(self) -> list[str]:
        cells = []
        for label in BUCKETS:
            st = self.buckets.get(label)
            if st is None or st.count == 0:
                cells.append("n/a")
            else:
                cells.append(f"{st.psnr_mean:.2f}/{st.ssim_mean:.3f}")
        if np.isnan(self.average_psnr):
            cells.append("n/a")
        else:
            cells.append(f"{self.average_psnr:.2f}/{self.average_ssim:.3f}")
        return cells


def render_table(reports: list[EvalReport]) -> str:
    header = ["Method"] + [b for b in BUCKETS] + ["Average"]
    rows = [["(Mask of Ratio -> PSNR/SSIM)"] + [""] * 6]
    for rep in reports:
        rows.append([MODE_LABELS.get(rep.mode, rep.mode)] + rep.row_cells())
    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) for i in range(7)]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(header))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(c.ljust(widths[i]) for i, c in enumerate(r)))
    return "\n".join(lines)


def assign_masks(masks: list[np.ndarray], n_images: int, seed: int = 0):
    """Round-robin bucket assignment: image i draws from bucket i mod #buckets,
    cycling through that bucket's masks in seeded order.  Returns a list of
    (mask_index, bucket_label) per image and the count of out-of-range masks."""
    rng = np.random.default_rng(seed)
    groups: dict[str, list[int]] = {label: [] for label in BUCKETS}
    excluded = 0
    for i, m in enumerate(masks):
        label = classify_bucket(m)
        if label == OUT_OF_RANGE:
            excluded += 1
            continue
        groups[label].append(i)
    for label in groups:
        if groups[label]:
            order = rng.permutation(len(groups[label]))
            groups[label] = [groups[label][j] for j in order]
    usable = [label for label in BUCKETS if groups[label]]
    if not usable:
        raise ValueError("no masks inside the 10%-60% hole-ratio range")
    assignment = []
    counters = {label: 0 for label in usable}
    for i in range(n_images):
        label = usable[i % len(usable)]
        bucket = groups[label]
        assignment.append((bucket[counters[label] % len(bucket)], label))
        counters[label] += 1
    return assignment, excluded


def evaluate(net: InpaintingNetwork, pairs, masks, mode: str = "real",
             seed: int = 0, image_size: int | None = None) -> EvalReport:
    """PSNR/SSIM of composited outputs, aggregated per hole-ratio bucket."""
    size = image_size or net.config.image_size
    positional, excluded = assign_masks(masks, len(pairs), seed=seed)
    # hand out the assignments in content order so reordering the test set
    # re-pairs nothing
    digests = [hashlib.sha256(np.ascontiguousarray(p.input_patch).tobytes()).hexdigest()
               for p in pairs]
    canonical = sorted(range(len(pairs)), key=lambda i: digests[i])
    assignment = [None] * len(pairs)
    for slot, i in enumerate(canonical):
        assignment[i] = positional[slot]
    report = EvalReport(mode=mode, excluded_masks=excluded)
    for label in BUCKETS:
        report.buckets[label] = BucketStats()
    elapsed = 0.0
    for i, pair in enumerate(pairs):
        mask_idx, label = assignment[i]
        gt = resize_image(pair.input_patch, size)
        mask = resize_mask(masks[mask_idx], size)
        ref_arr = resize_image(reference_for(pairs, i, mode, seed=seed), size)
        gt_t = _to_tensor_image(gt)
        mask_t = Tensor(mask[None, None].astype(np.float32))
        ref_t = _to_tensor_image(ref_arr)
        t0 = time.perf_counter()
        result = net.forward(gt_t, mask_t, ref_t)
        elapsed += time.perf_counter() - t0
        # the resized mask may land in a different bucket than source ratio
        st = report.buckets[label]
        st.count += 1
        st.psnr_sum += psnr(result.composite, gt_t)
        st.ssim_sum += ssim(result.composite, gt_t)
        report.sample_count += 1
    empty = [label for label in BUCKETS if report.buckets[label].count == 0]
    if empty:
        warnings.warn(f"empty buckets excluded from Average: {', '.join(empty)}")
    report.seconds_per_image = elapsed / max(report.sample_count, 1)
    return report


def load_model(checkpoint_path: str):
    """Rebuild the generator (and discriminator) a checkpoint was saved from."""
    from .checkpoint import load_archive
    _, meta = load_archive(checkpoint_path)
    cfg = TrainConfig.from_snapshot(meta.get("config", {}))
    rng = np.random.default_rng(cfg.seed)
    net = InpaintingNetwork(cfg.network_config(), rng)
    disc = Discriminator(rng, base_channels=cfg.disc_base_channels)
    net_params, disc_params = net.params(), disc.params()
    opt_g, opt_d = Adam(net_params, cfg.lr), Adam(disc_params, cfg.lr)
    load_checkpoint(checkpoint_path, net_params, disc_params, opt_g, opt_d)
    return net, disc, cfg


def inpaint_image(net: InpaintingNetwork, image: np.ndarray, mask: np.ndarray,
                  reference: np.ndarray | None = None) -> np.ndarray:
    """Single forward pass; no-reference mode substitutes a black image."""
    H, W = image.shape[:2]
    if mask.shape != (H, W):
        raise ValueError(f"mask {mask.shape} does not match image {(H, W)}")
    if reference is None:
        reference = np.zeros_like(image)
    if reference.shape != image.shape:
        raise ValueError(f"reference {reference.shape} does not match image "
                         f"{image.shape}")
    d = net.config.encoder_depth
    if H % (2 ** d) or W % (2 ** d):
        raise ValueError(f"image size {H}x{W} must be divisible by 2^{d}")
    result = net.forward(_to_tensor_image(image),
                         Tensor(mask[None, None].astype(np.float32)),
                         _to_tensor_image(reference))
    return result.composite.data[0].transpose(1, 2, 0).astype(np.float64)


def bench(net: InpaintingNetwork, n: int = 10, warmups: int = 3,
          seed: int = 0) -> tuple[float, float]:
    """Mean and std of forward wall-clock (ms) over n runs after warmups.

    Desk-scale CPU numbers; not comparable to published GPU timings of
    full-scale models.
    """
    if n < 10:
        raise ValueError("bench needs n >= 10")
    size = net.config.image_size
    rng = np.random.default_rng(seed)
    img = _to_tensor_image(rng.random((size, size, 3)))
    ref = _to_tensor_image(rng.random((size, size, 3)))
    m = np.ones((size, size))
    m[size // 4: size // 2, size // 4: size // 2] = 0
    mask = Tensor(m[None, None].astype(np.float32))
    for _ in range(warmups):
        net.forward(img, mask, ref)
    times = []
    for _ in range(n):
        t0 = time.perf_counter()
        net.forward(img, mask, ref)
        times.append((time.perf_counter() - t0) * 1000.0)
    return float(np.mean(times)), float(np.std(times))
