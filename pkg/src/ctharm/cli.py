"""Command-line pipeline: data generation, pre-training, training,
harmonization, evaluation, and CAM export.

Every command is deterministic given its config and seed.  Progress goes
to stderr; machine-readable results go to files (the one exception is the
pre-training accuracy line on stdout).
"""

import os

# single-threaded BLAS before numpy loads: results must not depend on an
# ambient thread pool
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import sys

import numpy as np

from . import phantom, radiomics, training
from .checkpoint import CheckpointError, CheckpointMeta, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, parse_config
from .networks import (ArchitectureError, ENCODER_ARCH, PretrainError,
                       grad_cam, pretrain_encoder)
from .rng import CounterRng

_ERRORS = (phantom.PhantomError, phantom.ImageFormatError, phantom.DatasetError,
           radiomics.FeatureError, radiomics.MetricError, radiomics.ReportError,
           training.WindowError, training.TrainingError,
           ConfigError, CheckpointError, ArchitectureError, PretrainError,
           FileNotFoundError, NotADirectoryError, PermissionError)


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_config(path: str | None) -> RunConfig:
    return parse_config(path) if path else RunConfig()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

_NONSTANDARD = {"br40": (phantom.KERNEL_SMOOTH,),
                "bl57": (phantom.KERNEL_SHARP,),
                "both": (phantom.KERNEL_SMOOTH, phantom.KERNEL_SHARP)}


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    size = args.size if args.size is not None else cfg.image_size
    count = args.count if args.count is not None else cfg.phantom_count
    seed = args.seed if args.seed is not None else cfg.seed
    nonstandard = args.nonstandard or cfg.nonstandard
    if nonstandard not in _NONSTANDARD:
        raise phantom.PhantomError(f"--nonstandard must be br40|bl57|both, got {nonstandard!r}")
    os.makedirs(args.out, exist_ok=True)
    sim = cfg.kernel_sim()
    master = CounterRng(seed)
    rows = []
    for pid in range(count):
        raw_seed = master.derive("phantom", pid).key
        raw = phantom.generate_phantom(raw_seed, size)
        raw.phantom_id = pid
        for tag in (phantom.KERNEL_STANDARD,) + _NONSTANDARD[nonstandard]:
            noise_seed = master.derive("kernel", pid, tag).key
            img = phantom.apply_kernel(raw, tag, noise_seed, sim)
            rel = f"p{pid:05d}_{tag.lower()}.pgm"
            phantom.write_image(img, os.path.join(args.out, rel))
            rows.append((rel, tag, pid))
    phantom.write_manifest(os.path.join(args.out, "manifest.csv"), rows)
    _progress(f"wrote {len(rows)} images + manifest to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    datasets = phantom.build_dataset(os.path.join(args.data, "manifest.csv"),
                                     cfg.split_ratios())
    _progress(f"pre-training encoder on {len(datasets['train'])} train / "
              f"{len(datasets['val'])} val pairs")
    bundle, acc, epochs = pretrain_encoder(
        datasets["train"], datasets["val"], cfg,
        CounterRng(cfg.seed).derive("pretrain"),
        log_fn=lambda ep, a: _progress(f"pretrain epoch {ep:3d} val_acc {a:.3f}"))
    save_checkpoint(bundle, CheckpointMeta(epoch=epochs, mode="pretrain", seed=cfg.seed),
                    args.out)
    print(f"val_accuracy {acc:.4f}")
    _progress(f"encoder checkpoint written to {args.out} after {epochs} epochs")
    return 0


def _write_train_log(path: str, records) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("epoch,phase,window_lo,window_hi,d_loss,g_loss,val_acc\n")
        for r in records:
            fh.write(f"{r.epoch},{r.phase},{r.window.lo},{r.window.hi},"
                     f"{r.d_loss:.9g},{r.g_loss:.9g},{r.val_acc:.9g}\n")


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.mode:
        cfg.mode = args.mode
    if args.seed is not None:
        cfg.seed = args.seed
    encoder, _ = load_checkpoint(args.encoder)
    if encoder.architecture_id != ENCODER_ARCH:
        raise ArchitectureError(f"{args.encoder} holds {encoder.architecture_id!r}, "
                                f"expected an encoder checkpoint ({ENCODER_ARCH})")
    datasets = phantom.build_dataset(os.path.join(args.data, "manifest.csv"),
                                     cfg.split_ratios())
    for split in ("train", "val"):
        datasets[split] = phantom.filter_pairs(datasets[split], cfg.pair_kernel)
    tc = cfg.train_config()
    _progress(f"training mode={tc.mode} on {len(datasets['train'])} pairs "
              f"(val {len(datasets['val'])}), max {tc.max_epochs} epochs")

    def log_fn(rec):
        _progress(f"epoch {rec.epoch:3d} [{rec.phase}] window [{rec.window.lo}, "
                  f"{rec.window.hi}] d_loss {rec.d_loss:.4f} g_loss {rec.g_loss:.4f} "
                  f"val_acc {rec.val_acc:.3f}")

    bundle, state = training.train(tc, datasets, encoder, log_fn=log_fn)
    save_checkpoint(bundle, CheckpointMeta(epoch=state.epoch, mode=tc.mode, seed=tc.seed),
                    args.out)
    log_path = args.log or os.path.splitext(args.out)[0] + ".log.csv"
    _write_train_log(log_path, state.records)
    _progress(f"model checkpoint written to {args.out}, log to {log_path}")
    return 0


def _load_gan(path: str):
    bundle, meta = load_checkpoint(path)
    if not bundle.architecture_id.startswith("gan1-"):
        raise ArchitectureError(f"{path} holds {bundle.architecture_id!r}, "
                                f"expected a trained model checkpoint")
    return bundle, meta


def cmd_harmonize(args) -> int:
    cfg = _load_config(args.config)
    bundle, _ = _load_gan(args.model)
    img = phantom.read_image(args.in_path)
    out = training.harmonize(bundle, img, cfg.train_config())
    phantom.write_image(out, args.out)
    _progress(f"harmonized image written to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    bundle, _ = _load_gan(args.model)
    datasets = phantom.build_dataset(os.path.join(args.data, "manifest.csv"),
                                     cfg.split_ratios())
    test = phantom.filter_pairs(datasets["test"], cfg.pair_kernel)
    if not test.pairs:
        raise radiomics.ReportError("test split is empty")
    tc = cfg.train_config()
    _progress(f"evaluating on {len(test)} test pairs")
    harmonized = [(training.harmonize(bundle, x, tc), y) for x, y in test.pairs]
    report_in = radiomics.reproducibility_report(test.pairs, hu_min=cfg.hu_min,
                                                 hu_max=cfg.hu_max)
    report_harm = radiomics.reproducibility_report(harmonized, hu_min=cfg.hu_min,
                                                   hu_max=cfg.hu_max)
    with open(args.report, "w", encoding="utf-8", newline="") as fh:
        fh.write("condition,roi_lo,roi_hi,feature_name,ccc\n")
        for cond, rep in (("input", report_in), ("harmonized", report_harm)):
            feature_rows, _ = radiomics.report_rows(rep)
            for row in feature_rows:
                fh.write(",".join([cond] + row) + "\n")
        fh.write("condition,range,reproducible_count,mean_psnr,sd_psnr,mean_ssim,sd_ssim\n")
        for cond, rep in (("input", report_in), ("harmonized", report_harm)):
            _, summary_rows = radiomics.report_rows(rep)
            for row in summary_rows:
                fh.write(",".join([cond] + row) + "\n")
    _progress(f"report written to {args.report}")
    _progress(f"input      mean PSNR {report_in.mean_psnr:.3f} dB, "
              f"mean SSIM {report_in.mean_ssim:.5f}, counts {report_in.reproducible_counts}")
    _progress(f"harmonized mean PSNR {report_harm.mean_psnr:.3f} dB, "
              f"mean SSIM {report_harm.mean_ssim:.5f}, counts {report_harm.reproducible_counts}")
    return 0


def cmd_cam(args) -> int:
    cfg = _load_config(args.config)
    bundle, _ = _load_gan(args.model)
    tc = cfg.train_config()
    w = tc.full_window()
    x_img = phantom.read_image(args.in_path)
    cand_img = phantom.read_image(args.target)
    x = training.clip_normalize(x_img, w)
    cand = training.clip_normalize(cand_img, w)
    cam = grad_cam(bundle, x, cand, phantom_id=x_img.phantom_id)
    scaled = np.rint(cam.values.astype(np.float64) * 65535.0).astype(np.int64)
    phantom.write_pgm16(args.out, scaled, comments={"phantom_id": cam.source_phantom_id})
    _progress(f"CAM written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctharm",
        description="CT kernel harmonization on synthetic phantoms")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate phantoms, kernel variants, manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--nonstandard", choices=["br40", "bl57", "both"])
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pre-train the kernel-tag encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="adversarial training with window curriculum")
    p.add_argument("--data", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["fixed", "dynamic", "full"])
    p.add_argument("--seed", type=int)
    p.add_argument("--log")
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("harmonize", help="synthesize the standard-kernel image")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_harmonize)

    p = sub.add_parser("evaluate", help="reproducibility report on the test split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cam", help="export a Grad-CAM heat map")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_cam)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
