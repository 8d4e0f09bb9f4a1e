"""Run every command-line stage in order into one output directory.

    python scripts/run_pipeline.py --out runs/default [--config exp.json] [--seed 0]

Stops at the first stage that fails. A planning failure in ``plan`` is
reported but does not stop the comparison stage.
"""

import argparse
import sys
import time

from sdfgrasp.cli import EXIT_OK, EXIT_PLAN_FAILED, main

STAGES = [
    ["gen-corpus"],
    ["train-sdf"],
    ["eval-recon"],
    ["train-sdf", "--target", "planning"],
    ["gen-grasps"],
    ["train-grasp"],
    ["plan", "--scene", "0"],
    ["compare"],
]


def run(out, config=None, seed=None):
    common = ["--out", out]
    if config:
        common += ["--config", config]
    if seed is not None:
        common += ["--seed", str(seed)]
    for stage in STAGES:
        t0 = time.perf_counter()
        print(f"== {' '.join(stage)}", flush=True)
        code = main([*stage, *common])
        print(f"   exit {code} after {time.perf_counter() - t0:.0f} s", flush=True)
        if code not in (EXIT_OK, EXIT_PLAN_FAILED):
            return code
    return EXIT_OK


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/default")
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int)
    a = ap.parse_args()
    sys.exit(run(a.out, a.config, a.seed))
