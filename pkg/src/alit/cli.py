"""Command-line entry point: ``alit <subcommand> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis as an
from . import training as tr
from .bitstream import decode_bitstream, encode_bitstream
from .config import TrainConfig, parse_config
from .data import ShapeDataset, gen_shapes, read_ppm, write_pgm, write_ppm
from .numerics import Rng
from .rollout import AlitModel, encode_adaptive, run_rollout

log = logging.getLogger("alit")


class UsageError(Exception):
    pass


def _config(args) -> TrainConfig:
    cfg = parse_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _dataset(args, cfg: TrainConfig) -> ShapeDataset:
    path = getattr(args, "data", None) or cfg.dataset
    if path:
        return ShapeDataset.load(path)
    return gen_shapes(cfg.n_train, cfg.seed)


def _load_model(path: str) -> tuple[AlitModel, Rng]:
    return tr.load_checkpoint(path).to_model()


def _require_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command} needs --out")
    return Path(args.out)


def _read_image(path: str, cfg: TrainConfig) -> np.ndarray:
    img = read_ppm(Path(path).read_bytes())
    if img.shape[:2] != (cfg.image_size, cfg.image_size):
        raise ValueError(f"image is {img.shape[1]}x{img.shape[0]}, model expects {cfg.image_size}x{cfg.image_size}")
    return img


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _require_out(args)
    ds = gen_shapes(args.n, cfg.seed, tuple(args.complexity))
    ds.save(out)
    print(f"wrote {len(ds)} scenes to {out}")
    return 0


def _train(args, stage: str) -> int:
    cfg = _config(args)
    out = _require_out(args)
    if args.steps is not None:
        key = {"base": "base_steps", "stage1": "stage1_steps", "stage2": "stage2_steps"}[stage]
        cfg = cfg.replace(**{key: args.steps})
    if args.init:
        ckpt = tr.load_checkpoint(args.init)
        model, rng = ckpt.to_model(cfg)
        if args.seed is not None:
            rng = Rng(cfg.seed)
    else:
        rng = Rng(cfg.seed)
        model = AlitModel(cfg, rng)
    ds = _dataset(args, cfg)
    metrics: list[dict] = []
    if stage == "base":
        tr.run_base_stage(model, ds.images, cfg, rng, metrics)
        header = tr.BASE_HEADER
    elif stage == "stage1":
        tr.stage1_pretrain(model, ds.images, cfg, rng, metrics)
        header = tr.METRICS_HEADER
    else:
        tr.stage2_finetune(model, ds.images, cfg, rng, metrics)
        header = tr.METRICS_HEADER
    tr.save_checkpoint(tr.Checkpoint.from_model(model, rng, stage=stage), out)
    metrics_path = Path(args.metrics) if args.metrics else out.with_suffix(".csv")
    tr.write_csv(metrics, header, metrics_path)
    print(f"wrote checkpoint {out} and metrics {metrics_path}")
    return 0


def cmd_encode(args) -> int:
    model, _ = _load_model(args.ckpt)
    cfg = model.cfg
    out = _require_out(args)
    img = _read_image(args.image, cfg)
    K = model.latent_codebook.size
    if args.budget is not None:
        if args.budget < cfg.atomic or args.budget > cfg.max_tokens or args.budget % cfg.atomic:
            raise UsageError(f"--budget must be a multiple of {cfg.atomic} in [{cfg.atomic}, {cfg.max_tokens}]")
        T = args.budget // cfg.atomic
        trace = run_rollout(model, model.base.encode_image(img[None]), T, decode="last")
        indices = trace.records[-1].latents.indices[0]
    else:
        indices, T = encode_adaptive(model, img[None], args.tsc_l1)[0]
    out.write_bytes(encode_bitstream(indices, K))
    print(f"encoded {len(indices)} tokens ({T} iterations) to {out}")
    return 0


def cmd_decode(args) -> int:
    model, _ = _load_model(args.ckpt)
    out = _require_out(args)
    indices, K = decode_bitstream(Path(args.bitstream).read_bytes())
    if K != model.latent_codebook.size:
        raise ValueError(f"bitstream codebook size {K} != model codebook size {model.latent_codebook.size}")
    if not 1 <= len(indices) <= model.cfg.max_tokens:
        raise ValueError(f"bitstream holds {len(indices)} tokens, model supports 1..{model.cfg.max_tokens}")
    img = model.decode_indices(indices[None])[0]
    out.write_bytes(write_ppm(img))
    print(f"decoded {len(indices)} tokens to {out}")
    return 0


def _images_arg(args, cfg: TrainConfig) -> np.ndarray:
    if args.image:
        return _read_image(args.image, cfg)[None]
    ds = _dataset(args, cfg)
    return ds.images[: args.limit] if args.limit else ds.images


def cmd_rollout_trace(args) -> int:
    model, _ = _load_model(args.ckpt)
    cfg = model.cfg
    images = _images_arg(args, cfg)
    T = args.iterations or cfg.iterations
    grid = model.base.encode_image(images)
    trace = run_rollout(model, grid, T, halting=args.halting, images=images)
    text = trace.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_tsc_curve(args) -> int:
    model, _ = _load_model(args.ckpt)
    cfg = model.cfg
    ds = _dataset(args, cfg)
    if args.limit:
        ds = ds.subset(np.arange(min(args.limit, len(ds))))
    summary = an.summarize(model, ds.images)
    points = an.dataset_representation_curve(summary, sorted(args.thresholds))
    text = an.curve_csv(points)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_attn_maps(args) -> int:
    model, _ = _load_model(args.ckpt)
    cfg = model.cfg
    out = _require_out(args)
    img = _read_image(args.image, cfg)
    amap = an.attention_maps(model, img[None], args.iteration, args.layer)[0]
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["token", "file", "iteration", "layer", "peak"])
    for j, m in enumerate(amap.maps):
        name = f"token_{j:03d}.pgm"
        (out / name).write_bytes(write_pgm(m / m.max() if m.max() > 0 else m))
        w.writerow([j, name, amap.iteration, amap.layer, f"{m.max():.6f}"])
    (out / "index.csv").write_text(buf.getvalue())
    print(f"wrote {len(amap.maps)} maps to {out}")
    return 0


def cmd_probe(args) -> int:
    model, _ = _load_model(args.ckpt)
    cfg = model.cfg
    train = ShapeDataset.load(args.train) if args.train else gen_shapes(args.n_train, cfg.seed)
    test = ShapeDataset.load(args.test) if args.test else gen_shapes(args.n_test, cfg.seed + 1)
    acc, _ = an.linear_probe(model, train, test, args.iteration or cfg.iterations, args.pool)
    line = f"accuracy {acc:.4f} on {len(test)} held-out scenes (pool={args.pool})\n"
    if args.out:
        Path(args.out).write_text(line)
    sys.stdout.write(line)
    return 0


def cmd_grad_check(args) -> int:
    from .gradsuite import run_suite

    results = run_suite(tol=args.tol, h=args.h)
    lines = [f"{name}[{k}] {rep}" for name, k, rep in results]
    ok = all(rep.passed for _, _, rep in results)
    lines.append(f"{sum(r.passed for _, _, r in results)}/{len(results)} passed")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="alit", description="Adaptive-length image tokenizer (desk scale).")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="generate a synthetic shapes dataset (.npz)")
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--complexity", type=int, nargs=2, default=(1, 6), metavar=("LO", "HI"))
    s.set_defaults(fn=cmd_gen_data)

    for name, stage, help_ in [("train-base", "base", "train the base VQ tokenizer"),
                               ("train-alit", "stage1", "latent-distillation pre-training"),
                               ("finetune", "stage2", "joint pixel-space fine-tuning")]:
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--data", help="dataset .npz (default: generate n_train scenes)")
        s.add_argument("--init", help="checkpoint to start from")
        s.add_argument("--steps", type=int)
        s.add_argument("--metrics", help="metrics CSV path (default: next to --out)")
        s.set_defaults(fn=lambda a, st=stage: _train(a, st))

    s = sub.add_parser("encode", parents=[common], help="image (PPM) -> token bitstream")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--budget", type=int, help="number of latent tokens")
    g.add_argument("--tsc-l1", type=float, help="smallest budget with pixel L1 below this value")
    s.set_defaults(fn=cmd_encode)

    s = sub.add_parser("decode", parents=[common], help="token bitstream -> image (PPM)")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--bitstream", required=True)
    s.set_defaults(fn=cmd_decode)

    s = sub.add_parser("rollout-trace", parents=[common], help="per-iteration CSV trace")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image")
    s.add_argument("--data")
    s.add_argument("--limit", type=int)
    s.add_argument("--iterations", type=int)
    s.add_argument("--halting", action="store_true")
    s.set_defaults(fn=cmd_rollout_trace)

    s = sub.add_parser("tsc-curve", parents=[common], help="token fraction vs reconstruction curve")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data")
    s.add_argument("--limit", type=int)
    s.add_argument("--thresholds", type=float, nargs="+", default=[0.02, 0.04, 0.06, 0.08, 0.1])
    s.set_defaults(fn=cmd_tsc_curve)

    s = sub.add_parser("attn-maps", parents=[common], help="per-token decoder attention maps (PGM)")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--iteration", type=int, default=1)
    s.add_argument("--layer", type=int, default=0)
    s.set_defaults(fn=cmd_attn_maps)

    s = sub.add_parser("probe", parents=[common], help="linear probe on pooled encoder features")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--train")
    s.add_argument("--test")
    s.add_argument("--n-train", type=int, default=500)
    s.add_argument("--n-test", type=int, default=256)
    s.add_argument("--iteration", type=int)
    s.add_argument("--pool", default="both")
    s.set_defaults(fn=cmd_probe)

    s = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--tol", type=float, default=1e-3)
    s.add_argument("--h", type=float, default=1e-3)
    s.set_defaults(fn=cmd_grad_check)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"alit {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # operational failure
        print(f"alit {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
