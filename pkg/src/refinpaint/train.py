"""Training loop: batch-1 Adam on the generator and discriminator with
per-step tab-separated loss logging, periodic checkpoints and exact resume.

Determinism contract: the visit order of each epoch is a pure function of
(seed, epoch); every other random draw comes from one master generator
whose state lives in the checkpoint.  Resuming from a mid-run checkpoint
therefore reproduces the uninterrupted loss log byte for byte.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import load_mask, read_manifest, reference_for
from .losses import FeaturePyramid, total_training_loss, ra_lsgan_loss
from .network import Discriminator, InpaintingNetwork
from .optim import Adam
from .rtv import rtv_smooth
from .tensor import NonFiniteError, Tensor

LOG_HEADER = ("# step\tepoch\trec\tperc\tstyle\tadv\tbranch\ttotal\td_loss")


@dataclass
class TrainResult:
    final_checkpoint: str
    log_lines: list[str]
    steps: int
    halted: bool = False


def resize_image(arr: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of an (H, W, C) float image (plain array helper)."""
    if arr.shape[0] == size and arr.shape[1] == size:
        return arr
    t = Tensor(arr.transpose(2, 0, 1)[None].astype(np.float32))
    out = T.bilinear_resize(t, size, size)
    return out.data[0].transpose(1, 2, 0).astype(np.float64)


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    if mask.shape == (size, size):
        return mask
    ys = (np.arange(size) * mask.shape[0] / size).astype(np.int64)
    xs = (np.arange(size) * mask.shape[1] / size).astype(np.int64)
    return mask[np.ix_(ys, xs)]


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(seed * 100003 + epoch + 1).permutation(n)


def _structure_targets(pairs, cfg: TrainConfig, cache_dir: str | None):
    """RTV structure image per ground-truth patch, disk-cached when possible."""
    params = cfg.rtv_params()
    out = []
    for k, pair in enumerate(pairs):
        img = resize_image(pair.input_patch, cfg.image_size)
        cached = None
        if cache_dir is not None:
            os.makedirs(cache_dir, exist_ok=True)
            cache_path = os.path.join(cache_dir, f"structure_{k:05d}.npy")
            if os.path.exists(cache_path):
                cached = np.load(cache_path)
                if cached.shape != img.shape:
                    cached = None
        if cached is None:
            cached = rtv_smooth(img, params)
            if cache_dir is not None:
                np.save(os.path.join(cache_dir, f"structure_{k:05d}.npy"), cached)
        out.append(cached)
    return out


def _to_tensor_image(arr: np.ndarray) -> Tensor:
    return Tensor(arr.transpose(2, 0, 1)[None].astype(np.float32))


def train(cfg: TrainConfig, pairs=None, masks=None, resume: str | None = None,
          quiet: bool = True) -> TrainResult:
    """Run (or resume) training; returns the final checkpoint path and the
    per-step loss log lines produced during this call."""
    if pairs is None:
        pairs = read_manifest(cfg.manifest)
    if masks is None:
        mask_files = sorted(os.listdir(cfg.mask_dir)) if os.path.isdir(cfg.mask_dir) else []
        masks = [load_mask(os.path.join(cfg.mask_dir, f))
                 for f in mask_files if f.lower().endswith(".png")]
    if not pairs:
        raise ValueError("no training pairs")
    if not masks:
        raise ValueError("no masks")
    os.makedirs(cfg.out_dir, exist_ok=True)

    init_rng = np.random.default_rng(cfg.seed)
    net = InpaintingNetwork(cfg.network_config(), init_rng)
    disc = Discriminator(init_rng, base_channels=cfg.disc_base_channels)
    net_params = net.params()
    disc_params = disc.params()
    opt_g = Adam(net_params, lr=cfg.lr)
    opt_d = Adam(disc_params, lr=cfg.lr)
    if cfg.featnet_weights:
        featnet = FeaturePyramid.from_archive(cfg.featnet_weights)
    else:
        featnet = FeaturePyramid(seed=cfg.featnet_seed)
    weights = cfg.loss_weights()

    master = np.random.default_rng(cfg.seed + 1)
    start_epoch, start_step, global_step = 0, 0, 0
    if resume is not None:
        meta = load_checkpoint(resume, net_params, disc_params, opt_g, opt_d)
        start_epoch = int(meta["epoch"])
        start_step = int(meta["step"])
        global_step = int(meta.get("global_step", 0))
        master.bit_generator.state = meta["rng_state"]

    cache_dir = None
    if os.path.exists(cfg.manifest):
        cache_dir = os.path.join(os.path.dirname(cfg.manifest) or ".", "rtv_cache")
    structures = _structure_targets(pairs, cfg, cache_dir)

    sized_inputs = [resize_image(p.input_patch, cfg.image_size) for p in pairs]
    sized_masks = [resize_mask(m, cfg.image_size) for m in masks]

    def save(tag, epoch, step, gstep):
        path = os.path.join(cfg.out_dir, f"checkpoint_{tag}.ckpt")
        save_checkpoint(path, net_params, disc_params, opt_g, opt_d,
                        epoch=epoch, step=step, global_step=gstep,
                        config_snapshot=cfg.snapshot(),
                        rng_state=_jsonable(master.bit_generator.state))
        return path

    log_lines: list[str] = []
    log_path = os.path.join(cfg.out_dir, "train_log.tsv")
    log_fh = open(log_path, "a")
    if os.path.getsize(log_path) == 0:
        log_fh.write(LOG_HEADER + "\n")

    save("init" if resume is None else "resume", start_epoch, start_step, global_step)
    halted = False
    n = len(pairs)
    try:
        for epoch in range(start_epoch, cfg.epochs):
            order = epoch_order(cfg.seed, epoch, n)
            first = start_step if epoch == start_epoch else 0
            for k in range(first, n):
                idx = int(order[k])
                mask_idx = int(master.integers(len(sized_masks)))
                gt = _to_tensor_image(sized_inputs[idx])
                structure = _to_tensor_image(structures[idx])
                mask = Tensor(sized_masks[mask_idx][None, None].astype(np.float32))
                ref_arr = reference_for(pairs, idx, cfg.reference_mode, seed=cfg.seed)
                ref = _to_tensor_image(resize_image(ref_arr, cfg.image_size))

                try:
                    opt_g.zero_grad()
                    opt_d.zero_grad()
                    result = net.forward(gt, mask, ref)
                    d_real = disc(gt)
                    d_fake = disc(result.composite)
                    losses = total_training_loss(result, gt, structure, mask, net,
                                                 featnet, d_real, d_fake, weights)
                    losses["total"].backward()
                    opt_g.step()

                    opt_g.zero_grad()
                    opt_d.zero_grad()
                    d_real = disc(gt)
                    d_fake = disc(result.composite.detach())
                    d_loss = ra_lsgan_loss(d_real, d_fake, side="discriminator")
                    d_loss.backward()
                    opt_d.step()
                    opt_d.zero_grad()
                except NonFiniteError as exc:
                    log_fh.write(f"# halted at step {global_step}: {exc}\n")
                    halted = True
                    break

                global_step += 1
                line = "\t".join([str(global_step), str(epoch)] + [
                    f"{losses[c].item():.6f}"
                    for c in ("reconstruction", "perceptual", "style",
                              "adversarial", "branch", "total")]
                    + [f"{d_loss.item():.6f}"])
                log_lines.append(line)
                log_fh.write(line + "\n")
                if not quiet:
                    print(line)

                if global_step % cfg.checkpoint_interval == 0:
                    save(f"step{global_step:07d}", epoch, k + 1, global_step)
            if halted:
                break
            start_step = 0
            save(f"epoch{epoch + 1:03d}", epoch + 1, 0, global_step)
    finally:
        log_fh.close()

    final = save("final", cfg.epochs if not halted else start_epoch, 0, global_step)
    return TrainResult(final_checkpoint=final, log_lines=log_lines,
                       steps=global_step, halted=halted)


def _jsonable(state):
    """numpy bit-generator state -> plain JSON types."""
    if isinstance(state, dict):
        return {k: _jsonable(v) for k, v in state.items()}
    if isinstance(state, (np.integer,)):
        return int(state)
    if isinstance(state, np.ndarray):
        return state.tolist()
    return state
