"""Command-line entry point: ``redkit <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from redkit import detector, metrics
from redkit.errors import RedError
from redkit.model import RedModel
from redkit.pipeline import (
    DetectConfig, EvalConfig, derive_seed, evaluate_at_snr, load_config, perturb_split,
    run_experiment, run_suite, write_roc_csv,
)
from redkit.signal_sim import IQDataset, build_dataset
from redkit.trainer import load_checkpoint, train


def _snr(text):
    return math.inf if text.lower() in ("inf", "+inf") else float(text)


def cmd_gen_data(args):
    cfg = load_config(args.config)
    ds = build_dataset(cfg.dataset_config())
    ds.save(args.output)
    print(f"wrote {len(ds.labels)} records to {args.output}")


def cmd_train(args):
    cfg = load_config(args.config)
    ds = IQDataset.load(args.data)
    model = RedModel.build(cfg.arch(), seed=derive_seed(cfg.seed, "init"))
    log_path = args.log or str(Path(args.output).with_suffix(".log.jsonl"))
    _, _, log = train(model, ds, cfg.train_config(), checkpoint_path=args.output,
                      log_path=log_path, verbose=args.verbose)
    best = log.checkpoints[-1]["epoch"] if log.checkpoints else None
    print(f"wrote {args.output} (best epoch {best}), log {log_path}")


def cmd_detect(args):
    model, _ = load_checkpoint(args.ckpt)
    ds = IQDataset.load(args.data)
    seed = derive_seed(args.seed, "eval")
    x_ref, y_ref = ds.select("train")
    x_test, y_test = ds.select("test")
    x_test = perturb_split(x_test, args.snr, seed, "eval-test")
    x_ref = perturb_split(x_ref, args.snr, seed, "eval-ref")
    centers = detector.compute_centers(model.features(x_ref), y_ref, metric=args.metric)
    accepted, nearest, dmin = detector.decide_batch(model.features(x_test), centers, args.lam)
    is_known = ds.is_known(y_test)
    cc = metrics.ConfusionCounts.from_predictions(accepted, is_known)
    tpr, fpr = metrics.tpr_fpr(cc)
    summary = {"lambda": args.lam, "threshold": float(detector.threshold(args.lam, centers.dim)),
               "tpr": tpr, "fpr": fpr, "tp": cc.tp, "fn": cc.fn, "fp": cc.fp, "tn": cc.tn}
    if args.output:
        rows = [{"label": int(y), "decision": "known" if a else "rogue", "nearest_class": int(k),
                 "min_distance": float(d)} for y, a, k, d in zip(y_test, accepted, nearest, dmin)]
        Path(args.output).write_text(json.dumps({"summary": summary, "verdicts": rows},
                                                indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))


def cmd_eval(args):
    model, _ = load_checkpoint(args.ckpt)
    ds = IQDataset.load(args.data)
    snrs = [_snr(s) for s in args.snr_list.split(",") if s.strip()]
    detect_cfg = DetectConfig(metric=args.metric)
    eval_cfg = EvalConfig(snr_list=snrs, baselines=args.baselines)
    results = []
    out = Path(args.output)
    for snr in snrs:
        res, extras = evaluate_at_snr(model, ds, snr, detect_cfg, eval_cfg,
                                      derive_seed(args.seed, "eval"))
        write_roc_csv(out.with_name(f"{out.stem}_roc_snr{res['snr_db']}.csv"), extras["roc"])
        results.append(res)
        print(f"SNR {res['snr_db']:>4} dB  AUC {res['auc']:.4f}  SC {res['silhouette']:.4f}")
    out.write_text(json.dumps({"results": results}, indent=2, sort_keys=True) + "\n")


def cmd_run(args):
    manifest, report = run_experiment(load_config(args.config), args.output, verbose=args.verbose)
    for r in report["results"]:
        print(f"SNR {r['snr_db']:>4} dB  AUC {r['auc']:.4f}  SC {r['silhouette']:.4f}")
    print(f"manifest: {Path(args.output) / 'manifest.json'}")


def cmd_suite(args):
    cfg = load_config(args.config)
    out = args.output or f"suite_{args.kind}"
    table = run_suite(args.kind, cfg, out, verbose=args.verbose)
    for row in table["rows"]:
        print(json.dumps(row, sort_keys=True))


def cmd_gradcheck(args):
    from redkit.battery import main as battery
    if not battery(instances=args.instances, seed=args.seed):
        raise SystemExit(1)


def build_parser():
    p = argparse.ArgumentParser(prog="redkit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="simulate a dataset file")
    s.add_argument("config")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train a model checkpoint")
    s.add_argument("config")
    s.add_argument("--data", required=True)
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--log")
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("detect", help="known/rogue verdicts for the test split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--lambda", dest="lam", type=float, required=True)
    s.add_argument("--snr", type=_snr, default=math.inf)
    s.add_argument("--metric", default=detector.EUCLIDEAN,
                   choices=[detector.EUCLIDEAN, detector.MAHALANOBIS])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("eval", help="ROC/AUC report at several test-time SNRs")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--snr-list", default="0,20,30")
    s.add_argument("--metric", default=detector.EUCLIDEAN,
                   choices=[detector.EUCLIDEAN, detector.MAHALANOBIS])
    s.add_argument("--baselines", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("run", help="full pipeline for one config")
    s.add_argument("config")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("suite", help="SNR sweep, baseline comparison or ablation table")
    s.add_argument("kind", choices=["snr", "baselines", "ablation"])
    s.add_argument("config")
    s.add_argument("-o", "--output")
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_suite)

    s = sub.add_parser("gradcheck", help="finite-difference check of every layer and loss")
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    np.seterr(all="ignore")
    try:
        args.func(args)
    except (RedError, OSError, ValueError) as exc:
        print(f"redkit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
