"""Train variants on the bundled emergent-object scene and compare held-out PSNR.

Variants: full, no-dcn, no-time, no-def, no-con.  The last three drop one
input of the compensation network.
"""

import argparse
import time

from coda4dgs.synthetic import bundled_spec, generate_dataset
from coda4dgs.trainer import Trainer, TrainingConfig, evaluate

PARTS = ("time", "def", "con")
VARIANTS = {"full": {}, "no-dcn": {"dcn_enabled": False}}
VARIANTS.update({f"no-{p}": {"dcn_inputs": tuple(q for q in PARTS if q != p)} for p in PARTS})


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("variants", nargs="*", default=list(VARIANTS), choices=list(VARIANTS))
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ds = generate_dataset(bundled_spec("emergent"))
    results = {}
    for name in args.variants:
        t0 = time.perf_counter()
        cfg = TrainingConfig(total_steps=args.steps, seed=args.seed, **VARIANTS[name])
        tr = Trainer.create(cfg, ds).run()
        table = evaluate(tr, ds, "nvs")
        results[name] = table
        frames = " ".join(f"{r.psnr:.2f}" for r in table.rows)
        print(f"{name:7s} PSNR {table.mean('psnr'):.2f}  PSNR* {table.mean('psnr_star'):.2f}  "
              f"per frame [{frames}]  {time.perf_counter() - t0:.0f}s", flush=True)
    if "full" in results:
        base = results["full"].mean("psnr")
        for name, table in results.items():
            if name != "full":
                print(f"full - {name}: {base - table.mean('psnr'):+.2f} dB")


if __name__ == "__main__":
    main()
