"""Command-line entry point.

Subcommands: synth-data, train, eval, gradcheck, ablate, histogram.
Exit codes: 0 success, 1 runtime/numeric failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data as D
from . import gradcheck as G
from . import metrics as M
from . import train as TR
from .model import CrossLevelContextNet, ModelConfig
from .tensor import no_grad


def _print_config(name, values):
    print(f"[{name}] resolved configuration:")
    for key in sorted(values):
        print(f"  {key} = {values[key]}")


def _parse_size(text):
    try:
        h, w = text.lower().split("x")
        h, w = int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"size must look like 64x64, got {text!r}")
    if h % 16 or w % 16:
        raise argparse.ArgumentTypeError(
            f"size dims must be divisible by 16, got {text!r}")
    return h, w


def _parse_ablation(text):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3 or any(p not in ("0", "1") for p in parts):
        raise argparse.ArgumentTypeError(
            f"ablation must be three 0/1 flags like 1,0,1, got {text!r}")
    return tuple(int(p) for p in parts)


def _require_dataset(path):
    if not os.path.isdir(path):
        raise SystemExit2(f"dataset path does not exist: {path}")
    samples = D.load_dataset(path)
    if not samples:
        raise SystemExit2(f"no samples found under {path}")
    return samples


class SystemExit2(Exception):
    """Usage-level failure: reported and mapped to exit code 2."""


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth_data(args):
    _print_config("synth-data", vars(args))
    samples = D.synth_dataset(args.n, args.size, args.seed, args.difficulty)
    D.save_dataset(samples, args.out)
    lesioned = sum(1 for s in samples if s.mask.any())
    sizes = [int(s.mask.sum()) for s in samples if s.mask.any()]
    print(f"wrote {len(samples)} samples to {args.out}")
    print(f"lesion-bearing slices: {lesioned}/{len(samples)}")
    if sizes:
        print(f"lesion px per slice: min={min(sizes)} median={int(np.median(sizes))} "
              f"max={max(sizes)}")
    return 0


def _train_config(args):
    overrides = {}
    for key in ("epochs", "batch_size", "seed", "lr", "max_steps",
                "eval_every", "init_policy", "init_std", "stop_dsc"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if args.config:
        tc = TR.TrainConfig.from_file(args.config, **overrides)
    else:
        tc = TR.TrainConfig(**overrides)
    return tc


def cmd_train(args):
    samples = _require_dataset(args.data)
    tc = _train_config(args)
    tc.checkpoint_dir = args.out
    h, w = samples[0].mask.shape
    config = ModelConfig(
        use_aspp=bool(args.ablation[0]),
        use_clf=bool(args.ablation[1]),
        use_inference=bool(args.ablation[2]),
        width_factor=args.width_factor,
        input_size=(h, w),
    )
    _print_config("train", {**vars(args), **{f"tc.{k}": v for k, v in vars(tc).items()}})
    model = CrossLevelContextNet(config, seed=tc.seed,
                                 init_policy=tc.init_policy, init_std=tc.init_std)
    print(f"trainable parameters: {model.parameter_count()}")
    try:
        rows = TR.train(model, samples, tc)
    except TR.TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    vals = [r.val_dsc for r in rows if r.val_dsc is not None]
    last_val = vals[-1] if vals else TR.evaluate_dsc(model, samples, tc.threshold)
    print(f"final step={rows[-1].step} loss={rows[-1].loss:.6f} val_dsc={last_val:.6f}")
    return 0


def cmd_eval(args):
    samples = _require_dataset(args.data)
    _print_config("eval", vars(args))
    model = None
    if not args.truth_as_pred:
        if not args.checkpoint:
            raise SystemExit2("--checkpoint is required unless --truth-as-pred is set")
        model = CrossLevelContextNet.load_checkpoint(args.checkpoint)
    rows = []
    with no_grad():
        for s in samples:
            if args.truth_as_pred:
                pred = s.mask
            else:
                prob = model.forward(s.image, mode="eval")
                pred = M.binarize(prob.data[0, 0], args.threshold)
            rows.append(M.evaluate_pair(pred, s.mask, s.subject_id, s.slice_index))
    report = M.aggregate_report(rows)
    M.write_report_csv(report, args.out_csv)
    if args.dsc_list:
        M.write_dsc_column(report, args.dsc_list)
    print("DSC Precision Recall VOE RVD")
    print(f"{report.mean_dsc:.4f} {report.mean_precision:.4f} "
          f"{report.mean_recall:.4f} {report.mean_voe:.2f} "
          f"{report.mean_rvd_signed:.2f} (|RVD| {report.mean_rvd_abs:.2f})")
    return 0


def cmd_gradcheck(args):
    _print_config("gradcheck", vars(args))
    reports = G.run_checks(ops=args.ops, seed=args.seed, tolerance=args.tolerance)
    failed = 0
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: max_rel_err={r.max_rel_error:.3e} "
              f"(tol {r.tolerance:.1e})")
        failed += 0 if r.passed else 1
    print(f"{len(reports) - failed}/{len(reports)} checks passed")
    return 0 if failed == 0 else 1


def cmd_ablate(args):
    samples = _require_dataset(args.data)
    tc = _train_config(args)
    _print_config("ablate", {**vars(args), **{f"tc.{k}": v for k, v in vars(tc).items()}})
    results = TR.run_ablation_matrix(
        tc, samples, args.out,
        config_overrides={"width_factor": args.width_factor,
                          "input_size": samples[0].mask.shape})
    csv_path = os.path.join(args.out, "ablation.csv")
    TR.write_ablation_csv(results, csv_path)
    print(f"wrote {csv_path}")
    for row in results:
        print(f"aspp={row[0]} clf={row[1]} inference={row[2]} dsc={row[3]:.4f}")
    return 0


def cmd_histogram(args):
    samples = _require_dataset(args.data)
    _print_config("histogram", vars(args))
    manifest = D.SplitManifest.load(args.splits) if args.splits else None
    hist = D.lesion_size_histogram(samples, manifest, bins=args.bins)
    D.write_histogram_csv(hist, args.out_csv)
    totals = {name: sum(counts) for name, counts in hist.counts.items()}
    print(f"wrote {args.out_csv}; per-split lesion-bearing totals: {totals}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lesionseg",
        description="Lesion segmentation: synthetic data, training, "
                    "evaluation, gradient checks and the ablation matrix.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--size", type=_parse_size, default=(64, 64))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--difficulty", choices=("easy", "hard"), default="easy")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="key=value TrainConfig file")
    p.add_argument("--ablation", type=_parse_ablation, default=(1, 1, 1),
                   metavar="A,C,I")
    p.add_argument("--out", required=True)
    p.add_argument("--width-factor", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    p.add_argument("--eval-every", dest="eval_every", type=int, default=None)
    p.add_argument("--init-policy", dest="init_policy",
                   choices=("scaled", "fixed"), default=None)
    p.add_argument("--init-std", dest="init_std", type=float, default=None)
    p.add_argument("--stop-dsc", dest="stop_dsc", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--dsc-list", default=None,
                   help="also write a one-column per-sample DSC file")
    p.add_argument("--truth-as-pred", action="store_true",
                   help="score ground truth against itself (pipeline self-check)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--ops", default="all",
                   help="'all' or comma list of: " + ",".join(G.available_ops()))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train all 8 toggle combinations")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--width-factor", type=float, default=0.25)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    p.add_argument("--eval-every", dest="eval_every", type=int, default=None)
    p.add_argument("--init-policy", dest="init_policy",
                   choices=("scaled", "fixed"), default=None)
    p.add_argument("--init-std", dest="init_std", type=float, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("histogram", help="lesion-size distribution CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--splits", default=None, help="split manifest file")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--out-csv", required=True)
    p.set_defaults(func=cmd_histogram)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit2 as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
