#!/usr/bin/env python3
"""End-to-end experiment driver: generate data, pre-train the encoder,
train the GAN, and evaluate reproducibility on the test split.

Everything funnels through the CLI so a run here is exactly reproducible
from the command line.  Outputs land under --workdir.
"""

import argparse
import os
import sys
import time

from ctharm.cli import main as ctharm_main


def write_config(path, **kv):
    with open(path, "w") as fh:
        for k, v in kv.items():
            fh.write(f"{k} = {v}\n")
    return path


def run(argv):
    print(f"+ ctharm {' '.join(argv)}", file=sys.stderr)
    rc = ctharm_main(argv)
    if rc != 0:
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--count", type=int, default=275)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--mode", default="full", choices=["fixed", "dynamic", "full"])
    ap.add_argument("--max-epochs", type=int, default=23)
    ap.add_argument("--th-eta", type=int, default=1)
    # the published-scale lr pairs with a ~100k-step budget; at desk scale
    # (thousands of steps) the optimizer cannot cover the distance, so the
    # experiment default is 10x higher
    ap.add_argument("--lr", type=float, default=1e-3)
    # 1.0 = every dynamic update degenerates to no_update and the window
    # stays full-range; lower values let the window track CAM hot-spots,
    # which at this step budget re-scales the generator away from the
    # full-window harmonize contract (see the training log to observe it)
    ap.add_argument("--th-fail", type=float, default=1.0)
    ap.add_argument("--batch-size", type=int, default=4)
    ap.add_argument("--train-frac", type=float, default=200 / 275)
    ap.add_argument("--val-frac", type=float, default=25 / 275)
    args = ap.parse_args()

    os.makedirs(args.workdir, exist_ok=True)
    data = os.path.join(args.workdir, "data")
    cfg = write_config(
        os.path.join(args.workdir, "run.cfg"),
        image_size=args.size,
        phantom_count=args.count,
        seed=args.seed,
        mode=args.mode,
        max_epochs=args.max_epochs,
        th_eta=args.th_eta,
        lr=args.lr,
        th_fail=args.th_fail,
        batch_size=args.batch_size,
        split_train=f"{args.train_frac:.12f}",
        split_val=f"{args.val_frac:.12f}",
        split_test=f"{1.0 - args.train_frac - args.val_frac:.12f}",
    )

    t0 = time.time()
    run(["gen-data", "--out", data, "--count", str(args.count),
         "--size", str(args.size), "--seed", str(args.seed),
         "--nonstandard", "both", "--config", cfg])
    t1 = time.time()
    encoder = os.path.join(args.workdir, "encoder.ckpt")
    run(["pretrain", "--data", data, "--out", encoder, "--config", cfg])
    t2 = time.time()
    model = os.path.join(args.workdir, f"model_{args.mode}.ckpt")
    run(["train", "--data", data, "--encoder", encoder, "--out", model,
         "--mode", args.mode, "--config", cfg])
    t3 = time.time()
    report = os.path.join(args.workdir, f"report_{args.mode}.csv")
    run(["evaluate", "--model", model, "--data", data, "--report", report,
         "--config", cfg])
    t4 = time.time()

    print(f"gen {t1 - t0:.0f}s | pretrain {t2 - t1:.0f}s | "
          f"train {t3 - t2:.0f}s | evaluate {t4 - t3:.0f}s | "
          f"total {t4 - t0:.0f}s", file=sys.stderr)


if __name__ == "__main__":
    main()
