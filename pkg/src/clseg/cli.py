"""Command-line entry points: phantom | train | infer | xval | report.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure. All outputs land under the out directory together with a
run-manifest JSON recording the config hash and package version.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .layers import ContractError, NonFiniteError
from .phantom import PhantomError, generate_cohort
from .pipeline import run_inference, run_report, run_training, run_xval, write_run_manifest
from .volume_io import VolumeError, check_cohort


class _UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract says 1
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="clseg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="run config JSON")
        sp.add_argument("--seed", type=int, help="override every seed (training/sampler/phantom)")
        sp.add_argument("--out", help="override paths.out_dir")
        sp.add_argument("--variant", choices=("baseline", "multitask", "multitask_icd"),
                        help="override the model variant (rewires icd/tissue head)")

    sp = sub.add_parser("phantom", help="generate a synthetic cohort")
    common(sp)
    sp.add_argument("--n-subjects", type=int, help="override phantom.n_subjects")

    sp = sub.add_parser("train", help="train on the configured cohort")
    common(sp)
    sp.add_argument("--no-resume", action="store_true", help="ignore existing checkpoints")

    sp = sub.add_parser("infer", help="predict one subject from a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--subject", required=True, help="subject directory")
    sp.add_argument("--drop-channel", choices=("t2s_epi", "t2s_gre"),
                    help="zero one T2* channel before inference")

    sp = sub.add_parser("xval", help="k-fold cross-validation with a pooled report")
    common(sp)
    sp.add_argument("--k", type=int, help="number of folds (default config.xval_folds)")

    sp = sub.add_parser("report", help="evaluate prediction dirs against the cohort")
    common(sp)
    sp.add_argument("--pred", action="append", default=[], metavar="NAME=DIR",
                    help="prediction directory per variant; repeatable")
    return p


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.variant:
        cfg = cfg.apply_variant(args.variant)
    if args.seed is not None:
        cfg = cfg.with_master_seed(args.seed)
    if args.out:
        cfg = dataclasses.replace(cfg, paths=dataclasses.replace(cfg.paths, out_dir=args.out))
    return cfg.validate()


def _cmd_phantom(args) -> int:
    cfg = _load(args)
    spec = cfg.phantom
    n = args.n_subjects if args.n_subjects is not None else spec.n_subjects
    if n < 1:
        raise _UsageError("--n-subjects must be >= 1")
    out = Path(cfg.paths.cohort_dir)
    generate_cohort(spec, n, out, seed=spec.seed)
    manifest = check_cohort([out / f"subject_{i:02d}" for i in range(n)])
    print(json.dumps(manifest.to_dict(), indent=2))
    return 0


def _cmd_train(args) -> int:
    cfg = _load(args)
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_run_manifest(out, cfg, "train")
    ckpt = run_training(cfg, out, resume=not args.no_resume)
    print(f"final checkpoint: {ckpt}")
    return 0


def _cmd_infer(args) -> int:
    cfg = _load(args)
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_run_manifest(out, cfg, "infer")
    subject = Path(args.subject)
    written = run_inference(args.checkpoint, subject, out / subject.name,
                            drop_channel=args.drop_channel)
    for name, path in written.items():
        print(f"{name}: {path}")
    return 0


def _cmd_xval(args) -> int:
    cfg = _load(args)
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_run_manifest(out, cfg, "xval")
    report = run_xval(cfg, out, k=args.k)
    row = report["models"][cfg.variant]["table1"]
    print(f"{cfg.variant}: LTPR={row['ltpr']:.3f} LFPR={row['lfpr']:.3f} "
          f"AVD={row['avd'] if row['avd'] is not None else 'n/a'} "
          f"Accuracy={row['accuracy']:.3f}")
    return 0


def _cmd_report(args) -> int:
    cfg = _load(args)
    pred_dirs = {}
    for item in args.pred:
        if "=" not in item:
            raise _UsageError(f"--pred expects NAME=DIR, got {item!r}")
        name, pdir = item.split("=", 1)
        pred_dirs[name] = pdir
    if not pred_dirs:
        raise _UsageError("report needs at least one --pred NAME=DIR")
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_run_manifest(out, cfg, "report")
    report = run_report(cfg.paths.cohort_dir, pred_dirs, out, cfg.eval)
    for name in sorted(report["models"]):
        row = report["models"][name]["table1"]
        print(f"{name}: LTPR={row['ltpr']:.3f} LFPR={row['lfpr']:.3f}")
    return 0


_COMMANDS = {
    "phantom": _cmd_phantom,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "xval": _cmd_xval,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (VolumeError, PhantomError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (NonFiniteError,) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except ContractError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
