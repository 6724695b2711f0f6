#!/usr/bin/env python3
"""Train the multitask_icd variant on a tiny phantom cohort and score it on
its own training subjects (expect lesion-wise TPR near 1, FPR near 0)."""

import argparse
import json

from clseg.experiments import overfit_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="out/overfit")
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--subjects", type=int, default=2)
    ap.add_argument("--base-channels", type=int, default=4)
    ap.add_argument("--input-patch", type=int, default=48)
    args = ap.parse_args()
    res = overfit_experiment(
        args.workdir, iterations=args.iterations, seed=args.seed,
        n_subjects=args.subjects, base_channels=args.base_channels,
        input_patch=args.input_patch)
    print(json.dumps(res, indent=2))


if __name__ == "__main__":
    main()
