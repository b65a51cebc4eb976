"""Reference runs on the toy synthetic scene.

    python benchmarks/toy_reference.py --experts 1 --out tests/fixtures/toy_baseline.json

Trains the toy preset and writes the validation metrics as JSON. The
single-expert run produces the baseline fixture the acceptance suite
compares against.
"""

import argparse
import json
import logging
import time

from hashmoe.evaluation import evaluate
from hashmoe.presets import toy_field, toy_sampling, toy_train
from hashmoe.scene import generate_synthetic
from hashmoe.trainer import train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--experts", type=int, default=8)
    ap.add_argument("--homogeneous", action="store_true")
    ap.add_argument("--steps", type=int, default=15_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--scene-seed", type=int, default=0)
    ap.add_argument("--lr0", type=float, default=None)
    ap.add_argument("--lr-final", type=float, default=None)
    ap.add_argument("--batch", type=int, default=None)
    ap.add_argument("--balance-weight", type=float, default=5e-4)
    ap.add_argument("--cache", default="tests/.cache")
    ap.add_argument("--run-dir", default=None)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    ds, _ = generate_synthetic(args.scene_seed, 32, 128, cache_dir=args.cache)
    fcfg = toy_field(ds.n_train, args.experts, heterogeneous=not args.homogeneous)
    over = {k: v for k, v in (("lr0", args.lr0), ("lr_final", args.lr_final), ("rays_per_batch", args.batch),
                             ("balance_weight", args.balance_weight)) if v is not None}
    tcfg = toy_train(args.steps, args.seed, **over)
    t0 = time.perf_counter()
    run = train(ds, fcfg, tcfg, out_dir=args.run_dir)
    train_s = time.perf_counter() - t0
    report = evaluate(run.state.model, ds, "val", toy_sampling())
    f_final = run.history[-1]["f"]
    result = {
        "experts": args.experts,
        "heterogeneous": not args.homogeneous,
        "steps": args.steps,
        "seed": args.seed,
        "scene_seed": args.scene_seed,
        "train": tcfg.to_dict(),
        "val_psnr": report.mean_psnr,
        "val_ssim": report.mean_ssim,
        "per_image_psnr": report.psnr,
        "final_f": f_final,
        "probe_rates": run.probe_rates,
        "train_seconds": train_s,
    }
    text = json.dumps(result, indent=1)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")


if __name__ == "__main__":
    main()
