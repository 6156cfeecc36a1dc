#!/usr/bin/env python3
"""Train the fixed-growing-only and full window-curriculum variants with
identical seeds and report their test-split PSNR/SSIM side by side.

Expects a data directory and encoder checkpoint produced by
run_experiment.py (or the CLI directly).  Writes variants.csv.
"""

import argparse
import os
import sys

from ctharm.cli import main as ctharm_main
from ctharm.config import parse_config
from ctharm import phantom, radiomics, training
from ctharm.checkpoint import load_checkpoint


def run(argv):
    print(f"+ ctharm {' '.join(argv)}", file=sys.stderr)
    rc = ctharm_main(argv)
    if rc != 0:
        sys.exit(rc)


def evaluate(model_path, datadir, cfg):
    bundle, _ = load_checkpoint(model_path)
    splits = phantom.build_dataset(os.path.join(datadir, "manifest.csv"),
                                   cfg.split_ratios())
    test = phantom.filter_pairs(splits["test"], cfg.pair_kernel)
    tc = cfg.train_config()
    harmonized = [(training.harmonize(bundle, x, tc), y) for x, y in test.pairs]
    return radiomics.reproducibility_report(harmonized, hu_min=cfg.hu_min,
                                            hu_max=cfg.hu_max)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", required=True)
    ap.add_argument("--encoder", required=True)
    ap.add_argument("--config", required=True)
    ap.add_argument("--workdir", required=True)
    args = ap.parse_args()

    os.makedirs(args.workdir, exist_ok=True)
    cfg = parse_config(args.config)
    rows = []
    for mode in ("fixed", "full"):
        model = os.path.join(args.workdir, f"model_{mode}.ckpt")
        if not os.path.exists(model):
            run(["train", "--data", args.data, "--encoder", args.encoder,
                 "--out", model, "--mode", mode, "--config", args.config])
        report = evaluate(model, args.data, cfg)
        rows.append((mode, report))
        print(f"{mode:6s}: mean PSNR {report.mean_psnr:.3f} dB "
              f"(sd {report.sd_psnr:.3f}), mean SSIM {report.mean_ssim:.5f}",
              file=sys.stderr)

    out = os.path.join(args.workdir, "variants.csv")
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write("mode,mean_psnr,sd_psnr,mean_ssim,sd_ssim,n_pairs\n")
        for mode, rep in rows:
            fh.write(f"{mode},{rep.mean_psnr:.9g},{rep.sd_psnr:.9g},"
                     f"{rep.mean_ssim:.9g},{rep.sd_ssim:.9g},{rep.n_pairs}\n")
    print(f"side-by-side report written to {out}", file=sys.stderr)


if __name__ == "__main__":
    main()
