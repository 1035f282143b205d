"""Scale-invariant keypoint detection and descriptor matching, from scratch.

Classic difference-of-Gaussians recipe: a 4-octave pyramid with 3 intervals
per octave, 3D quadratic extremum refinement, contrast and edge-response
rejection, 36-bin orientation assignment and the 4x4x8 gradient-histogram
descriptor, L2-normalized with 0.2 clamping.  Matching is nearest-neighbour
with Lowe's ratio test plus a symmetric cross-check.

Pixel intensities are treated in [0, 1]; the 0.03 contrast threshold lives
on that scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter, minimum_filter

# pyramid構成
NUM_OCTAVES = 4
INTERVALS = 3            # scales per octave
BASE_SIGMA = 1.6
ASSUMED_BLUR = 0.5       # blur already present in the input
CONTRAST_THRESHOLD = 0.03
EDGE_RATIO = 10.0
IMAGE_BORDER = 5
MIN_IMAGE_SIZE = 32

# orientation assignment
ORI_BINS = 36
ORI_SIGMA_FACTOR = 1.5
ORI_RADIUS_FACTOR = 3.0
ORI_PEAK_RATIO = 0.8

# descriptor
DESC_WIDTH = 4
DESC_BINS = 8
DESC_SCALE_FACTOR = 3.0
DESC_CLAMP = 0.2


@dataclass
class Keypoint:
    y: float                 # sub-pixel row in input coordinates
    x: float                 # sub-pixel column in input coordinates
    scale: float             # sigma in input coordinates
    orientation: float       # radians in [0, 2*pi)
    response: float
    octave: int
    layer: int


def to_grayscale(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = 0.299 * arr[..., 0] + 0.587 * arr[..., 1] + 0.114 * arr[..., 2]
    if arr.max() > 1.5:     # 8-bit input
        arr = arr / 255.0
    return arr


def _gaussian_pyramid(gray: np.ndarray, n_octaves: int):
    sigmas = [BASE_SIGMA * 2.0 ** (k / INTERVALS) for k in range(INTERVALS + 3)]
    increments = [np.sqrt(max(BASE_SIGMA ** 2 - ASSUMED_BLUR ** 2, 0.01))]
    increments += [np.sqrt(sigmas[k] ** 2 - sigmas[k - 1] ** 2)
                   for k in range(1, INTERVALS + 3)]
    pyramid = []
    base = gray
    for _ in range(n_octaves):
        octave = [gaussian_filter(base, increments[0])]
        for inc in increments[1:]:
            octave.append(gaussian_filter(octave[-1], inc))
        pyramid.append(octave)
        base = octave[INTERVALS][::2, ::2]     # sigma doubled -> next octave seed
    return pyramid


def _dog_pyramid(gauss):
    return [[octave[k + 1] - octave[k] for k in range(len(octave) - 1)]
            for octave in gauss]


def _find_extrema(dog_octave):
    """Candidate (layer, y, x) triples: 26-neighbourhood extrema above prefilter."""
    vol = np.stack(dog_octave)
    mx = maximum_filter(vol, size=3, mode="constant", cval=-np.inf)
    mn = minimum_filter(vol, size=3, mode="constant", cval=np.inf)
    pre = 0.5 * CONTRAST_THRESHOLD / INTERVALS
    cand = ((vol == mx) & (vol > pre)) | ((vol == mn) & (vol < -pre))
    cand[0] = cand[-1] = False
    cand[:, :IMAGE_BORDER] = cand[:, -IMAGE_BORDER:] = False
    cand[:, :, :IMAGE_BORDER] = cand[:, :, -IMAGE_BORDER:] = False
    return np.argwhere(cand)


def _refine(dog_octave, layer, y, x):
    """3D quadratic fit; returns (layer_f, y_f, x_f, contrast) or None."""
    H, W = dog_octave[0].shape
    for _ in range(5):
        prev, cur, nxt = dog_octave[layer - 1], dog_octave[layer], dog_octave[layer + 1]
        g = np.array([
            0.5 * (cur[y, x + 1] - cur[y, x - 1]),
            0.5 * (cur[y + 1, x] - cur[y - 1, x]),
            0.5 * (nxt[y, x] - prev[y, x]),
        ])
        dxx = cur[y, x + 1] - 2 * cur[y, x] + cur[y, x - 1]
        dyy = cur[y + 1, x] - 2 * cur[y, x] + cur[y - 1, x]
        dss = nxt[y, x] - 2 * cur[y, x] + prev[y, x]
        dxy = 0.25 * (cur[y + 1, x + 1] - cur[y + 1, x - 1]
                      - cur[y - 1, x + 1] + cur[y - 1, x - 1])
        dxs = 0.25 * (nxt[y, x + 1] - nxt[y, x - 1] - prev[y, x + 1] + prev[y, x - 1])
        dys = 0.25 * (nxt[y + 1, x] - nxt[y - 1, x] - prev[y + 1, x] + prev[y - 1, x])
        hess = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
        try:
            offset = -np.linalg.solve(hess, g)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(offset) < 0.5):
            contrast = cur[y, x] + 0.5 * g @ offset
            if abs(contrast) < CONTRAST_THRESHOLD:
                return None
            # edge response on the 2x2 spatial Hessian
            tr = dxx + dyy
            det = dxx * dyy - dxy * dxy
            if det <= 0 or tr * tr / det >= (EDGE_RATIO + 1) ** 2 / EDGE_RATIO:
                return None
            return layer + offset[2], y + offset[1], x + offset[0], contrast
        x += int(round(offset[0]))
        y += int(round(offset[1]))
        layer += int(round(offset[2]))
        if not (1 <= layer <= INTERVALS
                and IMAGE_BORDER <= y < H - IMAGE_BORDER
                and IMAGE_BORDER <= x < W - IMAGE_BORDER):
            return None
    return None


def _orientations(gimg, y, x, sigma_oct):
    """Peak directions of the gradient histogram around (y, x)."""
    H, W = gimg.shape
    radius = int(round(ORI_RADIUS_FACTOR * ORI_SIGMA_FACTOR * sigma_oct))
    yc, xc = int(round(y)), int(round(x))
    y0, y1 = max(yc - radius, 1), min(yc + radius + 1, H - 1)
    x0, x1 = max(xc - radius, 1), min(xc + radius + 1, W - 1)
    if y1 - y0 < 3 or x1 - x0 < 3:
        return []
    win = gimg[y0 - 1:y1 + 1, x0 - 1:x1 + 1]
    dx = 0.5 * (win[1:-1, 2:] - win[1:-1, :-2])
    dy = 0.5 * (win[2:, 1:-1] - win[:-2, 1:-1])
    mag = np.sqrt(dx * dx + dy * dy)
    ang = np.arctan2(dy, dx) % (2 * np.pi)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    w_sigma = ORI_SIGMA_FACTOR * sigma_oct
    wgt = np.exp(-((yy - y) ** 2 + (xx - x) ** 2) / (2 * w_sigma ** 2))

    bins = (ang * ORI_BINS / (2 * np.pi)).astype(np.int64) % ORI_BINS
    hist = np.bincount(bins.ravel(), weights=(mag * wgt).ravel(), minlength=ORI_BINS)
    for _ in range(2):      # circular smoothing
        hist = (np.roll(hist, 1) + np.roll(hist, -1)) * 0.25 + hist * 0.5
    peak = hist.max()
    if peak <= 0:
        return []
    out = []
    for b in range(ORI_BINS):
        left, right = hist[(b - 1) % ORI_BINS], hist[(b + 1) % ORI_BINS]
        if hist[b] >= ORI_PEAK_RATIO * peak and hist[b] > left and hist[b] > right:
            interp = b + 0.5 * (left - right) / (left - 2 * hist[b] + right)
            out.append((interp % ORI_BINS) * 2 * np.pi / ORI_BINS)
    return out


def _descriptor(gimg, y, x, sigma_oct, orientation):
    """4x4x8 gradient histogram, trilinear-binned, clamped at 0.2, unit norm."""
    H, W = gimg.shape
    hist_width = DESC_SCALE_FACTOR * sigma_oct
    radius = int(round(hist_width * np.sqrt(2) * (DESC_WIDTH + 1) * 0.5))
    radius = min(radius, int(np.sqrt(H * H + W * W)))
    yc, xc = int(round(y)), int(round(x))
    y0, y1 = max(yc - radius, 1), min(yc + radius + 1, H - 1)
    x0, x1 = max(xc - radius, 1), min(xc + radius + 1, W - 1)
    if y1 - y0 < 2 or x1 - x0 < 2:
        return None
    win = gimg[y0 - 1:y1 + 1, x0 - 1:x1 + 1]
    dx = 0.5 * (win[1:-1, 2:] - win[1:-1, :-2])
    dy = 0.5 * (win[2:, 1:-1] - win[:-2, 1:-1])
    mag = np.sqrt(dx * dx + dy * dy).ravel()
    ang = np.arctan2(dy, dx).ravel()
    yy, xx = np.mgrid[y0:y1, x0:x1]
    ry = (yy - y).ravel()
    rx = (xx - x).ravel()

    cos_o, sin_o = np.cos(orientation), np.sin(orientation)
    # rotate into the keypoint frame, measured in histogram cells
    u = (cos_o * ry - sin_o * rx) / hist_width + DESC_WIDTH / 2 - 0.5
    v = (cos_o * rx + sin_o * ry) / hist_width + DESC_WIDTH / 2 - 0.5
    keep = (u > -1) & (u < DESC_WIDTH) & (v > -1) & (v < DESC_WIDTH) & (mag > 0)
    if not keep.any():
        return None
    u, v, mag, ang = u[keep], v[keep], mag[keep], ang[keep]
    wgt = np.exp(-(((u - DESC_WIDTH / 2 + 0.5) ** 2 + (v - DESC_WIDTH / 2 + 0.5) ** 2)
                   / (0.5 * DESC_WIDTH ** 2)))
    obin = ((ang - orientation) % (2 * np.pi)) * DESC_BINS / (2 * np.pi)

    hist = np.zeros((DESC_WIDTH + 2, DESC_WIDTH + 2, DESC_BINS))
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    o0 = np.floor(obin).astype(np.int64)
    fu, fv, fo = u - u0, v - v0, obin - o0
    contrib = mag * wgt
    for du, wu in ((0, 1 - fu), (1, fu)):
        for dv, wv in ((0, 1 - fv), (1, fv)):
            for do, wo in ((0, 1 - fo), (1, fo)):
                np.add.at(hist,
                          (u0 + du + 1, v0 + dv + 1, (o0 + do) % DESC_BINS),
                          contrib * wu * wv * wo)
    vec = hist[1:-1, 1:-1].ravel()
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        return None
    vec = np.minimum(vec / norm, DESC_CLAMP)
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        return None
    return vec / norm


def sift_detect(image) -> tuple[list[Keypoint], np.ndarray]:
    """Detect keypoints and compute their descriptors.

    Returns (keypoints, descriptors) with descriptors shaped (N, 128);
    N may be zero (featureless input).  Raises on images smaller than 32px.
    """
    gray = to_grayscale(image)
    H, W = gray.shape
    if min(H, W) < MIN_IMAGE_SIZE:
        raise ValueError(f"image too small for keypoint detection: {H}x{W} "
                         f"(minimum {MIN_IMAGE_SIZE})")
    n_octaves = min(NUM_OCTAVES, int(np.log2(min(H, W) / 8)))
    gauss = _gaussian_pyramid(gray, n_octaves)
    dogs = _dog_pyramid(gauss)

    keypoints: list[Keypoint] = []
    descriptors: list[np.ndarray] = []
    seen = set()
    for octave in range(n_octaves):
        for layer, y, x in _find_extrema(dogs[octave]):
            refined = _refine(dogs[octave], int(layer), int(y), int(x))
            if refined is None:
                continue
            layer_f, y_f, x_f, contrast = refined
            sigma_oct = BASE_SIGMA * 2.0 ** (layer_f / INTERVALS)
            gimg = gauss[octave][int(round(layer_f))]
            for orientation in _orientations(gimg, y_f, x_f, sigma_oct):
                key = (octave, round(y_f, 1), round(x_f, 1), round(orientation, 2))
                if key in seen:
                    continue
                seen.add(key)
                desc = _descriptor(gimg, y_f, x_f, sigma_oct, orientation)
                if desc is None:
                    continue
                scale_factor = 2.0 ** octave
                keypoints.append(Keypoint(
                    y=y_f * scale_factor, x=x_f * scale_factor,
                    scale=sigma_oct * scale_factor,
                    orientation=orientation,
                    response=abs(contrast), octave=octave,
                    layer=int(round(layer_f))))
                descriptors.append(desc)
    if descriptors:
        return keypoints, np.stack(descriptors)
    return keypoints, np.zeros((0, DESC_WIDTH * DESC_WIDTH * DESC_BINS))


def match_descriptors(desc_a: np.ndarray, desc_b: np.ndarray,
                      ratio: float = 0.75, cross_check: bool = True):
    """Nearest-neighbour matches passing Lowe's ratio test.

    Returns a list of (index_a, index_b) pairs.  With cross_check, a pair is
    kept only if each side is the other's best match.
    """
    if len(desc_a) == 0 or len(desc_b) == 0:
        return []
    d2 = np.maximum(
        (desc_a ** 2).sum(1)[:, None] + (desc_b ** 2).sum(1)[None, :]
        - 2.0 * desc_a @ desc_b.T, 0.0)

    def ratio_pass(dist):
        n = dist.shape[1]
        if n == 1:
            return np.zeros(dist.shape[0], dtype=np.int64), np.ones(dist.shape[0], bool)
        part = np.argpartition(dist, 1, axis=1)[:, :2]
        first = part[np.arange(len(dist)), np.argmin(
            dist[np.arange(len(dist))[:, None], part], axis=1)]
        d1 = dist[np.arange(len(dist)), first]
        dsort = np.sort(dist[np.arange(len(dist))[:, None], part], axis=1)
        d2nd = dsort[:, 1]
        return first, np.sqrt(d1) < ratio * np.sqrt(np.maximum(d2nd, 1e-30))

    fwd, ok_f = ratio_pass(d2)
    if not cross_check:
        return [(i, int(fwd[i])) for i in range(len(desc_a)) if ok_f[i]]
    bwd, ok_b = ratio_pass(d2.T)
    out = []
    for i in range(len(desc_a)):
        j = int(fwd[i])
        if ok_f[i] and ok_b[j] and int(bwd[j]) == i:
            out.append((i, j))
    return out
