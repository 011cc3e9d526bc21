"""Phase-1 training on the bundled static scene; reports train-view PSNR/SSIM."""

import argparse
import time

from coda4dgs.synthetic import bundled_spec, generate_dataset
from coda4dgs.trainer import Trainer, TrainingConfig, evaluate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--log", help="write the per-step loss log here")
    args = ap.parse_args()

    ds = generate_dataset(bundled_spec("static"), "reconstruction")
    cfg = TrainingConfig(total_steps=args.steps, static_phase_steps=args.steps, seed=args.seed)
    t0 = time.perf_counter()
    tr = Trainer.create(cfg, ds)
    print(f"initial Gaussians: {len(tr.model)}")

    def report(res):
        if res.step % 250 == 0:
            print(f"step {res.step:5d}  loss {res.report.total:.5f}  "
                  f"{time.perf_counter() - t0:6.1f}s", flush=True)

    tr.run(callback=report)
    table = evaluate(tr, ds, "reconstruction")
    print(table.to_csv(), end="")
    print(f"mean PSNR {table.mean('psnr'):.2f} dB, SSIM {table.mean('ssim'):.4f}, "
          f"{len(tr.model)} Gaussians, {time.perf_counter() - t0:.0f}s")
    if args.log:
        tr.write_loss_log(args.log)


if __name__ == "__main__":
    main()
