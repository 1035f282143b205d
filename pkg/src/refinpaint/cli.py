"""Command line surface.

Subcommands: pairs mine, masks classify, rtv, train, eval, inpaint, bench,
gradcheck.  See README for walkthroughs.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np


def _cmd_pairs_mine(args):
    from .data import load_image, mine_pairs, write_pairs

    def list_pngs(d):
        return sorted(os.path.join(d, f) for f in os.listdir(d)
                      if f.lower().endswith(".png"))

    files_a, files_b = list_pngs(args.dir_a), list_pngs(args.dir_b)
    if len(files_a) != len(files_b):
        print(f"error: {args.dir_a} has {len(files_a)} PNGs but {args.dir_b} "
              f"has {len(files_b)}; they pair up by sorted order", file=sys.stderr)
        return 2
    rng = np.random.default_rng(args.seed)
    pairs = []
    for fa, fb in zip(files_a, files_b):
        mined = mine_pairs(load_image(fa), load_image(fb), crop=args.crop,
                           min_matches=args.min_matches, num_crops=args.num_crops,
                           rng=rng, source_ids=(os.path.basename(fa),
                                                os.path.basename(fb)))
        if not mined:
            print(f"note: no pairs passed min-matches={args.min_matches} "
                  f"for {fa} / {fb}")
        pairs.extend(mined)
    if not pairs:
        print("error: no pairs mined", file=sys.stderr)
        return 1
    manifest = write_pairs(pairs, args.out)
    print(f"wrote {len(pairs)} pairs and {manifest}")
    return 0


def _cmd_masks_classify(args):
    from .data import OUT_OF_RANGE, classify_bucket, hole_ratio, load_mask

    counts = {}
    for name in sorted(os.listdir(args.dir)):
        if not name.lower().endswith(".png"):
            continue
        mask = load_mask(os.path.join(args.dir, name))
        ratio = hole_ratio(mask)
        bucket = classify_bucket(mask)
        counts[bucket] = counts.get(bucket, 0) + 1
        print(f"{name}\t{ratio:.4f}\t{bucket}")
    if not counts:
        print("no mask PNGs found", file=sys.stderr)
        return 1
    print("# summary: " + ", ".join(f"{b}: {counts[b]}" for b in sorted(counts)))
    if OUT_OF_RANGE in counts:
        print(f"# {counts[OUT_OF_RANGE]} mask(s) outside the 10%-60% range")
    return 0


def _cmd_rtv(args):
    from .data import load_image, save_image
    from .rtv import RtvParams, rtv_smooth

    params = RtvParams(lam=args.lam, sigma=args.sigma, iterations=args.iters)
    image = load_image(args.input)
    save_image(args.output, rtv_smooth(image, params))
    print(f"wrote {args.output}")
    return 0


def _cmd_train(args):
    from .config import default_config_text, load_config
    from .train import train

    if args.write_config:
        with open(args.write_config, "w") as fh:
            fh.write(default_config_text())
        print(f"wrote {args.write_config}")
        return 0
    if not args.config:
        print("error: --config is required (or --write-config to emit a template)",
              file=sys.stderr)
        return 2
    cfg = load_config(args.config)
    result = train(cfg, resume=args.resume, quiet=args.quiet)
    status = "halted on non-finite loss" if result.halted else "done"
    print(f"{status}: {result.steps} step(s), final checkpoint "
          f"{result.final_checkpoint}")
    return 1 if result.halted else 0


def _common_eval_data(args, cfg):
    from .data import load_mask, read_manifest
    manifest = args.manifest or cfg.manifest
    mask_dir = args.mask_dir or cfg.mask_dir
    pairs = read_manifest(manifest)
    masks = [load_mask(os.path.join(mask_dir, f))
             for f in sorted(os.listdir(mask_dir)) if f.lower().endswith(".png")]
    return pairs, masks


def _cmd_eval(args):
    from .evaluate import evaluate, load_model, render_table

    net, _, cfg = load_model(args.checkpoint)
    pairs, masks = _common_eval_data(args, cfg)
    reports = []
    for mode in args.mode.split(","):
        rep = evaluate(net, pairs, masks, mode=mode.strip(), seed=args.seed)
        reports.append(rep)
        print(f"# {mode}: {rep.sample_count} images, "
              f"{rep.seconds_per_image * 1000:.0f} ms/image, "
              f"{rep.excluded_masks} mask(s) out of range")
    table = render_table(reports)
    print(table)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table + "\n")
    return 0


def _cmd_inpaint(args):
    from .data import load_image, load_mask, save_image
    from .evaluate import inpaint_image, load_model

    net, _, _ = load_model(args.checkpoint)
    image = load_image(args.input)
    mask = load_mask(args.mask)
    reference = None
    if args.reference and not args.no_reference:
        reference = load_image(args.reference)
    elif not args.no_reference and not args.reference:
        print("error: give a reference image or pass --no-reference",
              file=sys.stderr)
        return 2
    out = inpaint_image(net, image, mask, reference)
    save_image(args.out, out)
    print(f"wrote {args.out}")
    return 0


def _cmd_bench(args):
    from .evaluate import bench, load_model

    net, _, _ = load_model(args.checkpoint)
    mean_ms, std_ms = bench(net, n=args.n)
    size = net.config.image_size
    print(f"{size}x{size} forward: {mean_ms:.1f} ms/image (std {std_ms:.1f}, "
          f"n={args.n}, 3 warmups, CPU)")
    print("note: published GPU timings of full-scale models are not comparable "
          "to desk-scale CPU numbers")
    return 0


def _cmd_gradcheck(args):
    from .gradcheck import COMPONENTS, report

    names = sorted(COMPONENTS) if args.component == "all" else [args.component]
    ok = True
    for name in names:
        ok = report(name, seed=args.seed) and ok
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="refinpaint",
        description="reference-guided texture/structure inpainting toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    pairs = sub.add_parser("pairs", help="dataset pair construction")
    pairs_sub = pairs.add_subparsers(dest="pairs_command", required=True)
    mine = pairs_sub.add_parser("mine", help="mine input/reference patch pairs")
    mine.add_argument("dir_a", help="directory of input-side PNGs")
    mine.add_argument("dir_b", help="directory of reference-side PNGs")
    mine.add_argument("--crop", type=int, default=256)
    mine.add_argument("--min-matches", type=int, default=20)
    mine.add_argument("--num-crops", type=int, default=8,
                      help="random crops attempted per image pair")
    mine.add_argument("--seed", type=int, default=0)
    mine.add_argument("--out", required=True)
    mine.set_defaults(func=_cmd_pairs_mine)

    masks = sub.add_parser("masks", help="mask utilities")
    masks_sub = masks.add_subparsers(dest="masks_command", required=True)
    classify = masks_sub.add_parser("classify", help="hole-ratio bucket per mask")
    classify.add_argument("dir")
    classify.set_defaults(func=_cmd_masks_classify)

    rtv = sub.add_parser("rtv", help="structure image extraction")
    rtv.add_argument("input")
    rtv.add_argument("output")
    rtv.add_argument("--lambda", dest="lam", type=float, default=0.01)
    rtv.add_argument("--sigma", type=float, default=3.0)
    rtv.add_argument("--iters", type=int, default=4)
    rtv.set_defaults(func=_cmd_rtv)

    tr = sub.add_parser("train", help="train from a config file")
    tr.add_argument("--config")
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.add_argument("--quiet", action="store_true")
    tr.add_argument("--write-config", metavar="PATH",
                    help="write the documented default config and exit")
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="bucketed PSNR/SSIM evaluation")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--mode", default="real",
                    help="real | black | shuffled (comma-separate for several rows)")
    ev.add_argument("--manifest")
    ev.add_argument("--mask-dir")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", help="also write the table here")
    ev.set_defaults(func=_cmd_eval)

    inp = sub.add_parser("inpaint", help="fill one image")
    inp.add_argument("--checkpoint", required=True)
    inp.add_argument("input")
    inp.add_argument("mask")
    inp.add_argument("reference", nargs="?")
    inp.add_argument("--no-reference", action="store_true",
                     help="use a solid black reference")
    inp.add_argument("--out", "-o", required=True)
    inp.set_defaults(func=_cmd_inpaint)

    be = sub.add_parser("bench", help="forward timing")
    be.add_argument("--checkpoint", required=True)
    be.add_argument("-n", type=int, default=10)
    be.set_defaults(func=_cmd_bench)

    gc = sub.add_parser("gradcheck", help="finite-difference verification")
    gc.add_argument("component", help="component name or 'all'")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=_cmd_gradcheck)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
