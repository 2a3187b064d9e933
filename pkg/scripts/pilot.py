"""Calibration pilot: trains one stage on the benchmark and prints metrics
as training progresses.

    python scripts/pilot.py static --every 500 static.iterations=5000
    python scripts/pilot.py deform --static runs/static.ckpt --every 500 model.window=1

Overrides are ``section.field=value`` on the default run configuration.
"""

import argparse
import time
from dataclasses import replace

import numpy as np

from lipsplat.benchmark import generate_scene
from lipsplat.training import (DeformTrainer, RunConfig, StaticTrainer, gaussians_from_checkpoint,
                               load_checkpoint, save_checkpoint)


def override(cfg, item):
    key, value = item.split("=", 1)
    section, name = key.split(".", 1)
    sub = getattr(cfg, section)
    cur = getattr(sub, name)
    if isinstance(cur, bool):
        v = value.lower() in ("1", "true", "yes")
    elif isinstance(cur, tuple):
        v = tuple(type(cur[0])(x) for x in value.split(","))
    else:
        v = type(cur)(value)
    return replace(cfg, **{section: replace(sub, **{name: v})})


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("stage", choices=["static", "deform"])
    p.add_argument("overrides", nargs="*")
    p.add_argument("--every", type=int, default=500)
    p.add_argument("--static", help="static checkpoint (deform stage)")
    p.add_argument("--save", help="write the final checkpoint here")
    args = p.parse_args()
    cfg = RunConfig()
    for item in args.overrides:
        cfg = override(cfg, item)
    scene = generate_scene(cfg.scene, cfg.seed)
    t0 = time.time()
    if args.stage == "static":
        tr = StaticTrainer(scene, cfg)

        def report():
            ev = tr.evaluate()
            return f"psnr {ev['psnr']:.2f} (min {ev['psnr_min']:.2f}) n={ev['n_gaussians']}"
    else:
        if not args.static:
            p.error("--static is required for the deform stage")
        tr = DeformTrainer(scene, cfg, gaussians_from_checkpoint(load_checkpoint(args.static)))
        train = np.arange(2, tr.n_train, 4)

        def report():
            h, t = tr.evaluate(), tr.evaluate(train)
            return (f"held-out psnr {h['psnr']:.2f} lmd {h['lmd']:.3f}/{h['lmd_static']:.3f} "
                    f"ret {h['retrieval_top1']:.2f} | train psnr {t['psnr']:.2f} lmd {t['lmd']:.3f} "
                    f"ret {t['retrieval_top1']:.2f}")

    print(f"{args.stage} {' '.join(args.overrides)}")
    print(f"0 {report()}", flush=True)
    losses = []
    while not tr.done:
        losses.append(tr.step()["loss"])
        if tr.iteration % args.every == 0 or tr.done:
            print(f"{tr.iteration} {time.time() - t0:.0f}s loss {np.mean(losses[-args.every:]):.4f} {report()}",
                  flush=True)
    if args.save:
        save_checkpoint(args.save, tr.checkpoint())


if __name__ == "__main__":
    main()
