"""Command-line entry points.

Every subcommand writes its primary outputs plus ``run.json`` (subcommand,
config path, seed, threads, stage) into ``--out``. Wall-clock timings go to
``timing.csv`` only, so repeated runs reproduce everything else byte for byte.

CSV headers:

- ``train_log.csv``: iteration, loss, then the loss terms (l1, dssim; plus
  proxy, cl for the deformation stage), psnr of the sampled view
- ``eval.csv`` / ``metrics.csv``: frame, psnr, ssim, lmd (last row ``mean``)
- ``gradcheck.csv``: module, max_rel_err, tol, passed, worst, n_checked
- ``ablation.csv``: encoder, levels, features, psnr, ssim, lmd, lmd_static,
  retrieval_top1
- ``timing.csv``: step, seconds, threads
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .benchmark import (generate_scene, load_matrix, metric_lmd, metric_psnr, metric_ssim, read_frames, read_scene,
                        save_matrix, write_frames, write_scene)
from .conditions import load_features
from .errors import InvalidArgumentError, LipsplatError, StateError
from .raster import rasterize, set_threads
from .training import (DeformTrainer, RunConfig, StaticTrainer, config_from_dict, gaussians_from_checkpoint,
                       load_checkpoint, load_config, save_checkpoint, save_config, write_csv)

STAGES = ("static", "deform")


# ------------------------------------------------------------------ helpers

class Timer:
    def __init__(self, threads: int):
        self.rows, self.threads = [], threads

    def __call__(self, step: str, fn, *args, **kw):
        t0 = time.perf_counter()
        out = fn(*args, **kw)
        self.rows.append({"step": step, "seconds": round(time.perf_counter() - t0, 3), "threads": self.threads})
        return out


def _config(args, fallback: RunConfig | None = None) -> RunConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = fallback if fallback is not None else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise InvalidArgumentError("--threads must be >= 1")
        cfg = replace(cfg, threads=args.threads)
    set_threads(cfg.threads)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what: str) -> Path:
    if path is None:
        raise InvalidArgumentError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise InvalidArgumentError(f"{what} not found: {p}")
    return p


def _manifest(out: Path, args, cfg: RunConfig, stage: str | None) -> None:
    m = {"subcommand": args.command, "config": args.config, "seed": cfg.seed, "threads": cfg.threads,
         "out": str(args.out), "stage": stage}
    (out / "run.json").write_text(json.dumps(m, indent=1, sort_keys=True) + "\n")


def _checkpoint(path, stage: str | None = None):
    ck = load_checkpoint(_require(path, "--ckpt"))
    if stage is not None and ck.meta.get("stage") != stage:
        raise StateError(f"checkpoint stage is {ck.meta.get('stage')!r}, expected {stage!r}")
    return ck


def _frame_metrics(pred_imgs, ref_imgs, pred_lmk, ref_lmk, frames) -> list[dict]:
    rows = []
    for i, t in enumerate(frames):
        rows.append({"frame": int(t), "psnr": metric_psnr(pred_imgs[i], ref_imgs[i]),
                     "ssim": metric_ssim(pred_imgs[i], ref_imgs[i]),
                     "lmd": metric_lmd(pred_lmk[i:i + 1], ref_lmk[i:i + 1])})
    rows.append({"frame": "mean", "psnr": float(np.mean([r["psnr"] for r in rows])),
                 "ssim": float(np.mean([r["ssim"] for r in rows])), "lmd": metric_lmd(pred_lmk, ref_lmk)})
    return rows


def _deform_eval(dt: DeformTrainer, frames) -> list[dict]:
    imgs, lmks = [], []
    for t in frames:
        img, delta = dt.render(int(t))
        imgs.append(img)
        lmks.append(dt.landmarks(int(t), delta))
    return _frame_metrics(imgs, dt.scene.talk_images[frames], np.stack(lmks), dt.scene.landmarks[frames], frames)


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> None:
    cfg = _config(args)
    out = _out(args)
    timer = Timer(cfg.threads)
    scene = timer("generate", generate_scene, cfg.scene, cfg.seed)
    timer("write", write_scene, scene, out)
    save_config(out / "config.yaml", cfg)
    _manifest(out, args, cfg, None)
    write_csv(out / "timing.csv", timer.rows)
    print(f"wrote benchmark ({len(scene.static_cams)} static views, {len(scene.talk_cams)} talk frames) to {out}")


def cmd_train_static(args) -> None:
    cfg = _config(args)
    scene = read_scene(_require(args.data, "--data"))
    out = _out(args)
    timer = Timer(cfg.threads)
    tr = StaticTrainer(scene, cfg)
    timer("train", tr.run)
    save_checkpoint(out / "static.ckpt", tr.checkpoint())
    ev = tr.evaluate()
    write_csv(out / "train_log.csv", tr.log)
    write_csv(out / "eval.csv", [ev])
    save_config(out / "config.yaml", cfg)
    _manifest(out, args, cfg, "static")
    write_csv(out / "timing.csv", timer.rows)
    print(f"static: {tr.iteration} iterations, {ev['n_gaussians']} Gaussians, mean PSNR {ev['psnr']:.2f} dB")


def cmd_train_deform(args) -> None:
    ck = _checkpoint(args.ckpt, "static")
    cfg = _config(args, config_from_dict(ck.meta["config"]))
    scene = read_scene(_require(args.data, "--data"))
    out = _out(args)
    timer = Timer(cfg.threads)
    dt = timer("pretrain", DeformTrainer, scene, cfg, gaussians_from_checkpoint(ck))
    timer("train", dt.run)
    save_checkpoint(out / "deform.ckpt", dt.checkpoint())
    write_csv(out / "train_log.csv", dt.log)
    rows = timer("evaluate", _deform_eval, dt, dt.heldout_frames())
    write_csv(out / "eval.csv", rows)
    save_config(out / "config.yaml", cfg)
    _manifest(out, args, cfg, "deform")
    write_csv(out / "timing.csv", timer.rows)
    m = rows[-1]
    print(f"deform: {dt.iteration} iterations, held-out PSNR {m['psnr']:.2f} dB, LMD {m['lmd']:.3f} px")


def cmd_render(args) -> None:
    scene = read_scene(_require(args.data, "--data"))
    ck = _checkpoint(args.ckpt, args.stage)
    stage = ck.meta.get("stage")
    cfg = _config(args, config_from_dict(ck.meta["config"]))
    out = _out(args)
    timer = Timer(cfg.threads)
    cams = scene.talk_cams
    audio = load_features(_require(args.features, "--features")).features if args.features else None
    n = len(audio) if audio is not None else len(cams)
    if n > len(cams):
        raise InvalidArgumentError(f"feature file has {n} frames but the dataset has {len(cams)} talk cameras")
    if audio is not None and audio.shape[1] != scene.audio.n_features:
        raise InvalidArgumentError(f"feature file has {audio.shape[1]} bands, expected {scene.audio.n_features}")
    imgs, lmks = [], []
    t0 = time.perf_counter()
    if stage == "static":
        gs = gaussians_from_checkpoint(ck)
        for t in range(n):
            imgs.append(rasterize(gs, cams[t], cfg.raster)[0].color)
            lmks.append(cams[t].project_points(gs.means[gs.marker]))
    elif stage == "deform":
        dt = DeformTrainer.from_checkpoint(scene, ck)
        if audio is not None:
            dt.audio = audio
            dt.refresh_points()
        for t in range(n):
            img, delta = dt.render(t)
            imgs.append(img)
            lmks.append(dt.landmarks(t, delta))
    else:
        raise StateError(f"cannot render a checkpoint of stage {stage!r}")
    timer.rows.append({"step": "render", "seconds": round(time.perf_counter() - t0, 3), "threads": cfg.threads})
    write_frames(out / "frames", np.stack(imgs))
    save_matrix(out / "landmarks.txt", np.stack(lmks), "landmark pixels (T, K, 2)")
    _manifest(out, args, cfg, stage)
    write_csv(out / "timing.csv", timer.rows)
    print(f"rendered {n} frames from the {stage} checkpoint to {out / 'frames'}")


def _prediction(root: Path):
    """Frames and landmarks of a render output or of a dataset's talk track."""
    if (root / "manifest.json").exists():
        return read_frames(root / "talk" / "frames"), load_matrix(root / "talk" / "landmarks.txt")
    if not (root / "frames").is_dir() or not (root / "landmarks.txt").exists():
        raise InvalidArgumentError(f"{root} holds neither a dataset nor a render output")
    return read_frames(root / "frames"), load_matrix(root / "landmarks.txt")


def cmd_metrics(args) -> None:
    cfg = _config(args)
    scene = read_scene(_require(args.data, "--data"))
    imgs, lmks = _prediction(_require(args.pred, "--pred"))
    n = len(imgs)
    if n == 0 or n > len(scene.talk_images) or len(lmks) != n:
        raise InvalidArgumentError(f"prediction has {n} frames and {len(lmks)} landmark rows; "
                                   f"dataset has {len(scene.talk_images)} frames")
    out = _out(args)
    frames = np.arange(n)
    rows = _frame_metrics(imgs, scene.talk_images[:n], lmks, scene.landmarks[:n], frames)
    write_csv(out / "metrics.csv", rows)
    _manifest(out, args, cfg, args.stage)
    m = rows[-1]
    print(f"{n} frames: PSNR {m['psnr']:.2f} dB, SSIM {m['ssim']:.4f}, LMD {m['lmd']:.3f} px")


def cmd_gradcheck(args) -> int:
    from .checks import run_gradchecks

    cfg = _config(args)
    results = run_gradchecks(cfg.seed)
    rows = [{"module": r.module, "max_rel_err": r.max_rel_err, "tol": r.tol, "passed": r.passed,
             "worst": r.worst, "n_checked": r.n_checked} for r in results]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.module:<14} max rel err {r.max_rel_err:.2e} (tol {r.tol:.0e})")
    if args.out is not None:
        out = _out(args)
        write_csv(out / "gradcheck.csv", rows)
        write_csv(out / "timing.csv", [{"step": r.module, "seconds": round(r.seconds, 3), "threads": cfg.threads}
                                       for r in results])
        _manifest(out, args, cfg, None)
    return 0 if all(r.passed for r in results) else 1


def cmd_ablate_encoder(args) -> None:
    ck = _checkpoint(args.ckpt, "static")
    cfg = _config(args, config_from_dict(ck.meta["config"]))
    scene = read_scene(_require(args.data, "--data"))
    out = _out(args)
    timer = Timer(cfg.threads)
    gs = gaussians_from_checkpoint(ck)
    rows = []
    for enc in ("hashgrid", "triplane"):
        c = replace(cfg, model=replace(cfg.model, point_encoder=enc))
        dt = timer(f"{enc}.pretrain", DeformTrainer, scene, c, gs)
        timer(f"{enc}.train", dt.run)
        ev = timer(f"{enc}.evaluate", dt.evaluate)
        rows.append({"encoder": enc, "levels": c.model.point_levels, "features": c.model.point_features,
                     **{k: ev[k] for k in ("psnr", "ssim", "lmd", "lmd_static", "retrieval_top1")}})
        print(f"{enc:<9} PSNR {ev['psnr']:.2f} dB, LMD {ev['lmd']:.3f} px (static {ev['lmd_static']:.3f})")
    write_csv(out / "ablation.csv", rows)
    save_config(out / "config.yaml", cfg)
    _manifest(out, args, cfg, "deform")
    write_csv(out / "timing.csv", timer.rows)


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic benchmark dataset"),
    "train-static": (cmd_train_static, "fit the canonical Gaussian head to the static views"),
    "train-deform": (cmd_train_deform, "train the conditional deformation on the talk track"),
    "render": (cmd_render, "render frames from a checkpoint, optionally driven by a feature file"),
    "metrics": (cmd_metrics, "PSNR / SSIM / LMD of rendered frames against a dataset"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every backward pass"),
    "ablate-encoder": (cmd_ablate_encoder, "hash-grid vs tri-plane point encoder comparison"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (YAML)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker threads for the rasterizer and grids")
    common.add_argument("--stage", choices=STAGES, help="expected checkpoint stage")
    common.add_argument("--data", help="dataset directory written by gen-data")
    common.add_argument("--ckpt", help="checkpoint file")
    common.add_argument("--features", help="audio feature file driving render")
    common.add_argument("--pred", help="render output or dataset directory to score")
    p = argparse.ArgumentParser(prog="lipsplat", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_, description=help_)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    needs_out = args.command != "gradcheck"
    try:
        if needs_out and args.out is None:
            raise InvalidArgumentError("--out is required")
        code = COMMANDS[args.command][0](args)
    except (LipsplatError, OSError, ValueError, KeyError) as e:
        print(f"lipsplat {args.command}: error: {e}", file=sys.stderr)
        return 2
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
