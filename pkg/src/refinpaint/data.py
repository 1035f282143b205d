"""Dataset construction and handling: keypoint-mined input/reference pairs,
hole masks with ratio buckets, reference ablation modes and PNG I/O.

Mask file convention: 255 = valid pixel, 0 = hole.  In memory masks are
{1, 0} float arrays with 1 = valid.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .sift import match_descriptors, sift_detect

BUCKETS = ("10-20%", "20-30%", "30-40%", "40-50%", "50-60%")
OUT_OF_RANGE = "out-of-range"
REFERENCE_MODES = ("real", "black", "shuffled")


# -- image I/O -----------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """8-bit RGB PNG -> (H, W, 3) float64 in [0, 1] (value / 255)."""
    with Image.open(path) as im:
        if im.mode != "RGB":
            if im.mode in ("RGBA", "L", "P", "I;16"):
                im = im.convert("RGB")
            else:
                raise ValueError(f"{path}: unsupported mode {im.mode}, RGB required")
        arr = np.asarray(im, dtype=np.float64)
    return arr / 255.0


def save_image(path, image: np.ndarray):
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def load_mask(path) -> np.ndarray:
    """Mask PNG -> (H, W) {0,1} float; pixel >= 128 counts as valid."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return (arr >= 128).astype(np.float64)


def save_mask(path, mask: np.ndarray):
    data = np.where(np.asarray(mask) >= 0.5, 255, 0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


# -- masks and buckets -----------------------------------------------------------

def hole_ratio(mask: np.ndarray) -> float:
    """Exact fraction of hole (zero) pixels."""
    m = np.asarray(mask)
    return float((m == 0).sum()) / m.size


def classify_bucket(mask: np.ndarray) -> str:
    """Half-open ratio buckets [0.1,0.2) ... [0.5,0.6); outside -> out-of-range."""
    r = hole_ratio(mask)
    for k, label in enumerate(BUCKETS):
        lo = 0.1 * (k + 1)
        if lo <= r < lo + 0.1:
            return label
    return OUT_OF_RANGE


@dataclass
class MaskSpec:
    mask: np.ndarray
    hole_ratio: float
    bucket: str

    @staticmethod
    def from_mask(mask: np.ndarray) -> "MaskSpec":
        return MaskSpec(mask=mask, hole_ratio=hole_ratio(mask),
                        bucket=classify_bucket(mask))


def random_stroke_mask(size: int, target_ratio: float, rng) -> np.ndarray:
    """Irregular mask from thick random walks; hole ratio lands near target."""
    mask = np.ones((size, size))
    y, x = rng.integers(0, size, 2)
    angle = rng.uniform(0, 2 * np.pi)
    while hole_ratio(mask) < target_ratio:
        angle += rng.uniform(-0.7, 0.7)
        step = rng.integers(2, max(size // 8, 3))
        y = int(np.clip(y + step * np.sin(angle), 0, size - 1))
        x = int(np.clip(x + step * np.cos(angle), 0, size - 1))
        r = int(rng.integers(max(size // 24, 2), max(size // 10, 3)))
        mask[max(y - r, 0):y + r, max(x - r, 0):x + r] = 0.0
        if rng.random() < 0.05:
            y, x = rng.integers(0, size, 2)
    return mask


# -- pair mining --------------------------------------------------------------------

@dataclass
class ImagePair:
    input_patch: np.ndarray        # (crop, crop, 3) in [0,1]
    reference_patch: np.ndarray
    source_input: str
    source_reference: str
    input_origin: tuple[int, int]  # (y, x) of the crop in the source image
    reference_origin: tuple[int, int]
    match_score: int               # interior keypoint matches supporting the pair


def mine_pairs(image_a: np.ndarray, image_b: np.ndarray, crop: int,
               min_matches: int = 20, num_crops: int = 8, rng=None,
               source_ids: tuple[str, str] = ("a", "b")) -> list[ImagePair]:
    """Cut matched input/reference patch pairs out of two photos of one scene.

    Random crops are taken from ``image_a``; for each, the keypoint matches
    landing inside the crop vote (by median displacement, robust to stray
    matches) for where the same content sits in ``image_b``, and the
    reference crop is taken there, clamped to the image bounds.  Crops
    supported by fewer than ``min_matches`` interior matches are discarded.
    """
    rng = rng or np.random.default_rng(0)
    ha, wa = image_a.shape[:2]
    hb, wb = image_b.shape[:2]
    if min(ha, wa) < crop or min(hb, wb) < crop:
        raise ValueError(f"images smaller than crop size {crop}")

    kp_a, desc_a = sift_detect(image_a)
    kp_b, desc_b = sift_detect(image_b)
    matches = match_descriptors(desc_a, desc_b)
    if not matches:
        return []
    pts_a = np.array([(kp_a[i].y, kp_a[i].x) for i, _ in matches])
    pts_b = np.array([(kp_b[j].y, kp_b[j].x) for _, j in matches])

    pairs = []
    for _ in range(num_crops):
        oy = int(rng.integers(0, ha - crop + 1))
        ox = int(rng.integers(0, wa - crop + 1))
        inside = ((pts_a[:, 0] >= oy) & (pts_a[:, 0] < oy + crop)
                  & (pts_a[:, 1] >= ox) & (pts_a[:, 1] < ox + crop))
        score = int(inside.sum())
        if score < min_matches:
            continue
        shift = np.median(pts_b[inside] - pts_a[inside], axis=0)
        ry = int(np.clip(round(oy + shift[0]), 0, hb - crop))
        rx = int(np.clip(round(ox + shift[1]), 0, wb - crop))
        pairs.append(ImagePair(
            input_patch=image_a[oy:oy + crop, ox:ox + crop].copy(),
            reference_patch=image_b[ry:ry + crop, rx:rx + crop].copy(),
            source_input=source_ids[0], source_reference=source_ids[1],
            input_origin=(oy, ox), reference_origin=(ry, rx),
            match_score=score))
    return pairs


# -- reference ablation modes ----------------------------------------------------------

def derangement(n: int, seed: int) -> np.ndarray:
    """Seeded permutation of range(n) with no fixed points."""
    if n < 2:
        raise ValueError("shuffled reference mode needs at least 2 pairs")
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def reference_for(pairs, index: int, mode: str, seed: int = 0) -> np.ndarray:
    """Reference image for one pair under an ablation mode.

    real: the mined reference; black: an all-zero image (no-reference
    operation); shuffled: the reference of another pair under a seeded
    derangement.
    """
    if mode not in REFERENCE_MODES:
        raise ValueError(f"unknown reference mode {mode!r}; expected {REFERENCE_MODES}")
    pair = pairs[index]
    if mode == "real":
        return pair.reference_patch
    if mode == "black":
        return np.zeros_like(pair.reference_patch)
    perm = derangement(len(pairs), seed)
    return pairs[perm[index]].reference_patch


# -- manifest --------------------------------------------------------------------------

def write_pairs(pairs: list[ImagePair], out_dir: str) -> str:
    """Save patches as PNGs plus a line-oriented manifest; returns manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w") as fh:
        fh.write("# input_png\treference_png\tsrc_in\tsrc_ref\t"
                 "in_y\tin_x\tref_y\tref_x\tmatch_score\n")
        for k, pair in enumerate(pairs):
            in_name = f"input_{k:05d}.png"
            ref_name = f"reference_{k:05d}.png"
            save_image(os.path.join(out_dir, in_name), pair.input_patch)
            save_image(os.path.join(out_dir, ref_name), pair.reference_patch)
            fh.write("\t".join(map(str, (
                in_name, ref_name, pair.source_input, pair.source_reference,
                pair.input_origin[0], pair.input_origin[1],
                pair.reference_origin[0], pair.reference_origin[1],
                pair.match_score))) + "\n")
    return manifest


def read_manifest(manifest_path: str) -> list[ImagePair]:
    base = os.path.dirname(manifest_path)
    pairs = []
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            (in_name, ref_name, src_in, src_ref,
             iy, ix, ry, rx, score) = line.split("\t")
            pairs.append(ImagePair(
                input_patch=load_image(os.path.join(base, in_name)),
                reference_patch=load_image(os.path.join(base, ref_name)),
                source_input=src_in, source_reference=src_ref,
                input_origin=(int(iy), int(ix)),
                reference_origin=(int(ry), int(rx)),
                match_score=int(score)))
    return pairs
