"""Batch command-line front end.

Every subcommand takes ``--config`` (flat key = value file) and/or ``--seed``;
a seed is mandatory. Exit status is 0 on success, 2 on a configuration error
and 1 on any other failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .config import RunConfig, load_config, parse_config, write_resolved
from .data import load_pairs, make_corpus, read_image, read_split, write_corpus, write_image
from .errors import ConfigError, TapeStateError
from .metrics import psnr, ssim
from .model import ModelParams, load_checkpoint, save_checkpoint
from .pipeline import decompose, enhance, normalize_for_display
from .training import train_stage1, train_stage2

log = logging.getLogger("latent_retinex")

AXES = ("k", "scc", "steps")


def _config(args) -> RunConfig:
    overrides = {"seed": args.seed}
    if args.config:
        return load_config(args.config, overrides)
    if args.seed is None:
        raise ConfigError("a seed is required (--seed or seed = ... in --config)", key="seed")
    return parse_config("", overrides)


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _images(path) -> List[Path]:
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise OSError(f"no PNG images in {path}")
        return files
    if not path.exists():
        raise OSError(f"no such input {path}")
    return [path]


def _ckpt(args) -> ModelParams:
    if not args.ckpt:
        raise TapeStateError(f"{args.command} needs --ckpt")
    return load_checkpoint(args.ckpt)


def _write_table(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _print_table(rows: Sequence[dict]) -> None:
    keys = list(rows[0])
    print(" | ".join(keys))
    for r in rows:
        print(" | ".join(f"{r[k]:.4f}" if isinstance(r[k], float) else str(r[k]) for k in keys))


# -- subcommands ----------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> None:
    root = Path(args.out or cfg.data_dir)
    write_corpus(make_corpus(cfg.corpus()), root)
    write_resolved(cfg, root)
    print(f"corpus written to {root}")


def cmd_train(args, cfg: RunConfig) -> None:
    out = _out(args, "runs")
    write_resolved(cfg, out)
    data = Path(cfg.data_dir)
    if args.stage == 1:
        model = ModelParams.init(cfg.codec(), cfg.denoiser(), seed=cfg.seed, dtype=cfg.dtype)
        result = train_stage1(load_pairs(data, "stage1_pairs"), model, cfg.train(1), cfg.weights(),
                              cfg.retinex(), log_path=out / "stage1_log.csv")
        path = save_checkpoint(result.model, out / "stage1.ckpt")
    else:
        model = _ckpt(args)
        result = train_stage2(read_split(data, "stage2_low"), read_split(data, "stage2_high"),
                              model, cfg.train(2), cfg.weights(), cfg.retinex(), cfg.schedule(),
                              log_path=out / "stage2_log.csv")
        path = save_checkpoint(result.model, out / "stage2.ckpt")
    print(f"stage {args.stage} finished in {result.seconds:.1f}s, checkpoint {path}")


def cmd_enhance(args, cfg: RunConfig) -> None:
    if not args.input:
        raise ConfigError("enhance needs --input", key="input")
    model = _ckpt(args)
    out = _out(args, "enhanced")
    write_resolved(cfg, out)
    sched = cfg.schedule()
    for path in _images(args.input):
        result = enhance(read_image(path), model, cfg.S, sched, seed=cfg.seed)
        write_image(out / path.name, result)
    print(f"enhanced images written to {out}")


def cmd_decompose(args, cfg: RunConfig) -> None:
    if not args.input:
        raise ConfigError("decompose needs --input", key="input")
    model = _ckpt(args)
    out = _out(args, "decomposed")
    write_resolved(cfg, out)
    for path in _images(args.input):
        image = read_image(path)
        r, l = decompose(image, model, cfg.retinex())
        scale = image.shape[0] // r.shape[0]
        for tag, m in (("R", r.mean(axis=-1)), ("L", l[..., 0])):
            view = np.kron(normalize_for_display(m), np.ones((scale, scale)))
            write_image(out / f"{path.stem}_{tag}.png", np.repeat(view[..., None], 3, axis=-1))
    print(f"decompositions written to {out}")


def evaluate_pairs(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], names: Sequence[str]):
    rows = [dict(image=n, psnr=psnr(p, g), ssim=ssim(p, g)) for n, p, g in zip(names, preds, gts)]
    rows.append(dict(image="mean", psnr=float(np.mean([r["psnr"] for r in rows])),
                     ssim=float(np.mean([r["ssim"] for r in rows]))))
    return rows


def cmd_eval(args, cfg: RunConfig) -> None:
    if not args.input or not args.gt:
        raise ConfigError("eval needs --input and --gt", key="input")
    inputs, gts = _images(args.input), _images(args.gt)
    if len(inputs) != len(gts):
        raise OSError(f"{len(inputs)} inputs but {len(gts)} ground-truth images")
    preds = [read_image(p) for p in inputs]
    if args.ckpt:
        model = load_checkpoint(args.ckpt)
        sched = cfg.schedule()
        preds = [enhance(p, model, cfg.S, sched, seed=cfg.seed) for p in preds]
    rows = evaluate_pairs(preds, [read_image(g) for g in gts], [p.name for p in inputs])
    out = _out(args, "eval")
    write_resolved(cfg, out)
    _write_table(out / "metrics.csv", rows)
    _print_table(rows[-1:])


def cmd_dump_schedule(args, cfg: RunConfig) -> None:
    sched = cfg.schedule()
    out = _out(args, ".")
    path = out / "schedule.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "beta", "alpha_bar", "sigma2"])
        for t in range(1, sched.T + 1):
            writer.writerow([t, repr(float(sched.beta[t])), repr(float(sched.alpha_bar[t])),
                             repr(float(sched.sigma2[t]))])
    write_resolved(cfg, out)
    print(f"schedule written to {path}")


def _val_split(cfg: RunConfig):
    pairs = load_pairs(cfg.data_dir, "val")
    return pairs[:, 0], pairs[:, 1]


def _val_scores(model: ModelParams, cfg: RunConfig, low, gt, S: int):
    sched = cfg.schedule()
    start = time.perf_counter()
    preds = enhance(low, model, S, sched, seed=cfg.seed)
    seconds = (time.perf_counter() - start) / len(low)
    return (float(np.mean([psnr(p, g) for p, g in zip(preds, gt)])),
            float(np.mean([ssim(p, g) for p, g in zip(preds, gt)])), seconds)


def cmd_ablate(args, cfg: RunConfig) -> None:
    out = _out(args, "ablation")
    write_resolved(cfg, out)
    rows = []
    if args.axis == "k":
        # wall time of the inference path per image; weights are random since
        # every k needs its own codec
        image = np.full((cfg.image_size, cfg.image_size, 3), 0.2)
        for k in range(0, 4):
            kcfg = cfg.with_overrides(k=k)
            model = ModelParams.init(kcfg.codec(), kcfg.denoiser(), seed=cfg.seed, dtype=cfg.dtype)
            enhance(image, model, cfg.S, cfg.schedule(), seed=cfg.seed)  # warm-up
            start = time.perf_counter()
            enhance(image, model, cfg.S, cfg.schedule(), seed=cfg.seed)
            rows.append(dict(k=k, seconds_per_image=time.perf_counter() - start))
    else:
        model = _ckpt(args)
        low, gt = _val_split(cfg)
        if args.axis == "steps":
            for S in (1, 5, 10, 20, 50):
                if cfg.T % S == 0:
                    p, s, sec = _val_scores(model, cfg, low, gt, S)
                    rows.append(dict(S=S, psnr=p, ssim=s, seconds_per_image=sec))
        else:
            if not model.meta.get("stage1_done"):
                raise TapeStateError("the scc ablation needs a stage-1 checkpoint")
            data = Path(cfg.data_dir)
            lo, hi = read_split(data, "stage2_low"), read_split(data, "stage2_high")
            for lam in (0.0, cfg.lambda_1):
                run = cfg.with_overrides(lambda_1=lam)
                trained = train_stage2(lo, hi, model.copy(), run.train(2), run.weights(),
                                       run.retinex(), run.schedule()).model
                p, s, _ = _val_scores(trained, run, low, gt, run.S)
                rows.append(dict(lambda_1=lam, psnr=p, ssim=s))
    _write_table(out / f"ablation_{args.axis}.csv", rows)
    _print_table(rows)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "enhance": cmd_enhance,
    "decompose": cmd_decompose,
    "eval": cmd_eval,
    "dump-schedule": cmd_dump_schedule,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latent-retinex", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value run configuration")
        p.add_argument("--out", help="output directory")
        p.add_argument("--ckpt", help="model checkpoint")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        if name == "train":
            p.add_argument("--stage", type=int, choices=(1, 2), required=True)
        if name in ("enhance", "decompose", "eval"):
            p.add_argument("--input", help="PNG file or directory")
        if name == "eval":
            p.add_argument("--gt", help="ground-truth PNG file or directory")
        if name == "ablate":
            p.add_argument("--axis", choices=AXES, required=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors count as configuration errors
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error [{exc.key}]: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
