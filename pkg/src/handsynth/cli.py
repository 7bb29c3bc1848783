"""Command-line entry point: train, generate, evaluate, gradcheck, wavelet, make-data.

Exit codes: 0 success, 1 validation error (bad config, arguments or input
files), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("handsynth")


class UsageError(ValueError):
    pass


def _read_gray(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"))
    except (OSError, ValueError) as e:
        raise UsageError(f"cannot read image {path}: {e}") from None


def cmd_train(args) -> int:
    from .train import Trainer, format_config, load_checkpoint, load_config, save_checkpoint

    out = Path(args.out)
    metrics = out / "metrics.log"
    if args.resume:
        trainer = load_checkpoint(args.resume, metrics_path=metrics)
        log.info("resumed from %s at step %d", args.resume, trainer.step)
    else:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
        trainer = Trainer(cfg, metrics_path=metrics)

    def progress(step, values, seconds):
        if step % args.log_every == 0:
            log.info("step %d  d=%.4f g=%.4f r=%.4f  %.2fs", step, values["d_loss"], values["g_total"],
                     values["r_loss"], seconds)

    steps = args.steps if args.steps is not None else trainer.config.steps
    trainer.fit(steps, checkpoint_dir=out, progress=progress)
    path = save_checkpoint(trainer, out / "checkpoint.ckpt")
    trainer.metrics.close()
    print(f"checkpoint: {path}")
    return EXIT_OK


def cmd_generate(args) -> int:
    from . import tensor as T
    from .evaluate import generate_images
    from .text import UnknownCharacterError
    from .toygen import collate, GlyphSample, preprocess, to_uint8
    from .train import load_models

    cfg, models = load_models(args.ckpt)
    vocab = cfg.arch.make_vocab()
    if not args.text or not vocab.covers(args.text):
        raise UnknownCharacterError(f"text {args.text!r} has characters outside the vocabulary")
    if len(args.text) > cfg.arch.max_len:
        raise UsageError(f"text longer than max_len {cfg.arch.max_len}")
    if args.style_image:
        img, w = preprocess(_read_gray(args.style_image))
        ref = collate([GlyphSample(img, "x", -1, valid_width=w)])
        imgs, widths = generate_images(models, [args.text], ref.images, ref.widths)
    else:
        z = np.random.default_rng(args.seed).standard_normal((1, cfg.arch.style_dim))
        with T.default_dtype(np.float32):
            imgs, widths = generate_images(models, [args.text], None, z=z.astype(np.float32))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(imgs[0, 0, :, :int(widths[0])]), mode="L").save(out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluate import SCENARIOS, evaluate
    from .train import build_dataset, load_models

    cfg, models = load_models(args.ckpt)
    names = [s.strip() for s in args.scenarios.split(",") if s.strip()]
    bad = [s for s in names if s not in SCENARIOS]
    if bad:
        raise UsageError(f"unknown scenarios {bad}; choose from {', '.join(SCENARIOS)}")
    report = evaluate(models, build_dataset(cfg), names, n_per_scenario=args.n, seed=args.seed, out_dir=args.out)
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import get_case, run_case, CASES

    cases = [get_case(args.op)] if args.op else CASES
    failed = 0
    for case in cases:
        try:
            res = run_case(case, range(args.seeds))
        except Exception as e:  # noqa: BLE001
            failed += 1
            print(f"{case.name:24s} error: {type(e).__name__}: {e}")
            continue
        status = "ok" if res.passed else "FAIL"
        failed += not res.passed
        print(f"{res.name:24s} max_rel_err={res.max_rel_error:.3e} tol={res.tol:.0e} "
              f"seed={res.worst_seed} {res.seconds:.2f}s {status}")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


def cmd_wavelet(args) -> int:
    from .frequency import SUBBAND_NAMES, haar_dwt2
    from .tensor import Tensor
    from .toygen import normalize

    img = normalize(_read_gray(args.image))
    bands = haar_dwt2(Tensor(img[None, None])).bands()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, band in zip(SUBBAND_NAMES, bands):
        arr = np.asarray(band.data[0, 0], dtype=np.float64)
        np.save(out / f"{name}.npy", arr)
        lo, hi = arr.min(), arr.max()
        vis = np.zeros_like(arr) if hi - lo < 1e-12 else (arr - lo) / (hi - lo)
        Image.fromarray(np.round(vis * 255).astype(np.uint8), mode="L").save(out / f"{name}.png")
    print(f"wrote {', '.join(SUBBAND_NAMES)} to {out}")
    return EXIT_OK


def cmd_make_data(args) -> int:
    from .toygen import export_dataset, make_dataset
    from .train import load_config

    cfg = load_config(args.config)
    ds = make_dataset(cfg.num_writers, cfg.words_per_writer, seed=cfg.data_seed,
                      vocab=cfg.arch.make_vocab(), max_len=cfg.arch.max_len, workers=args.workers)
    out = export_dataset(ds, args.out)
    for name, words in (("lexicon_train.txt", ds.lexicon), ("lexicon_oov.txt", ds.oov_lexicon)):
        (out / name).write_text("\n".join(words) + "\n", encoding="utf-8")
    print(f"wrote {len(ds)} samples to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="handsynth", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a config file or resume a checkpoint")
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("--config")
    src.add_argument("--resume")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, help="total adversarial steps (default: config value)")
    t.add_argument("--out", default="run")
    t.add_argument("--log-every", type=int, default=10)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="render one word")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--text", required=True)
    style = g.add_mutually_exclusive_group()
    style.add_argument("--style-image")
    style.add_argument("--sample-prior", action="store_true")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="generated.png")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="scenario metrics and sample grids")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--scenarios", default="iv-s,iv-u,oov-s,oov-u,replication")
    e.add_argument("--out", default="eval")
    e.add_argument("--n", type=int, default=1000, help="generated images per scenario")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--op")
    c.add_argument("--seeds", type=int, default=10)
    c.set_defaults(func=cmd_gradcheck)

    w = sub.add_parser("wavelet", help="write the four Haar sub-bands of an image")
    w.add_argument("--image", required=True)
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_wavelet)

    d = sub.add_parser("make-data", help="build and export the toy dataset")
    d.add_argument("--config", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--workers", type=int, default=1)
    d.set_defaults(func=cmd_make_data)
    return p


def main(argv=None) -> int:
    from .losses import InfeasibleAlignmentError
    from .text import UnknownCharacterError
    from .train import CheckpointError, ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, UsageError, UnknownCharacterError, InfeasibleAlignmentError,
            KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
