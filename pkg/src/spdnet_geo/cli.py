"""Command-line interface.

Commands: synth, cov, align, train, eval, loso, gradcheck, table.
Bad flags exit 2 (argparse); numeric/data failures exit 1 with a
diagnostic on stderr. ``SPDNET_GEO_SEED`` provides the seed when no
``--seed`` flag is given.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import align as al
from . import classify as cl
from . import data as dat
from . import gradcheck as gc
from . import harness as hn
from .errors import SpdGeoError


def _env_seed():
    raw = os.environ.get("SPDNET_GEO_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise SpdGeoError(f"SPDNET_GEO_SEED must be an integer, got {raw!r}")


def _load_dataset(path):
    """Sniff the magic and load either covariances or epochs."""
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == b"SPDC":
        return dat.load_covariances(path)
    if magic == b"EPOC":
        return dat.load_epochs(path)
    raise SpdGeoError(f"unrecognized data file magic {magic!r} in {path}")


def _as_covariances(ds, shrinkage=False):
    if isinstance(ds, dat.EpochSet):
        return dat.estimate_covariances(ds, shrinkage=shrinkage)
    return ds


def cmd_synth(args):
    cfg = dat.SynthConfig(
        dim=args.dim, n_subjects=args.subjects, n_classes=args.classes,
        n_trials=args.trials, class_spread=args.class_spread,
        rotation_scale=args.rotation, dispersion_scale=args.dispersion,
        noise_scale=args.noise, seed=args.seed if args.seed is not None else _env_seed())
    ds = dat.synth_generate(cfg)
    dat.save_covariances(ds, args.out)
    if args.labels_csv:
        dat.export_labels_csv(ds, args.labels_csv)
    print(f"wrote {len(ds)} covariances (dim {ds.dim}, "
          f"{len(ds.subject_ids())} subjects, {len(ds.class_ids())} classes) to {args.out}")
    return 0


def cmd_cov(args):
    es = dat.load_epochs(args.data)
    cs = dat.estimate_covariances(es, shrinkage=args.shrinkage)
    dat.save_covariances(cs, args.out)
    print(f"wrote {len(cs)} covariances (dim {cs.dim}) to {args.out}")
    return 0


def cmd_align(args):
    ds = _as_covariances(_load_dataset(args.data), shrinkage=args.shrinkage)
    seed = args.seed if args.seed is not None else _env_seed()
    if args.method == "ra":
        model = al.ra_fit(ds, scope=args.ra_scope, mean_kind=args.ra_mean)
        out = al.ra_apply(model, ds)
    elif args.method == "rpa":
        model = al.rpa_fit(ds, dispersion=args.rpa_dispersion)
        out = al.rpa_apply(model, ds)
    elif args.method == "dcr":
        hyper = al.DcrHyper(lr=args.lr, steps=args.steps)
        model = al.dcr_fit(ds, hyper)
        out = al.dcr_apply(model, ds)
    elif args.method == "rifu":
        cfg = al.RifuConfig(lr=args.lr, steps=args.steps, batch_size=args.batch_size,
                            seed=seed)
        model = al.rifu_fit(ds, cfg)
        out = al.rifu_apply(model, ds)
    else:
        raise SpdGeoError(f"unknown alignment method '{args.method}'")
    dat.save_covariances(out, args.out)
    if args.model:
        al.save_align_model(model, args.model)
    print(f"aligned {len(out)} covariances with {args.method}; wrote {args.out}")
    return 0


def cmd_train(args):
    ds = _load_dataset(args.data)
    seed = args.seed if args.seed is not None else _env_seed()
    kind = args.classifier
    if kind == "csp-lda":
        if not isinstance(ds, dat.EpochSet):
            raise SpdGeoError("csp-lda trains on epoch files (.epoc)")
        model = cl.csp_fit(ds, m_filters=args.csp_filters, zscore=args.csp_z,
                           shrinkage=args.shrinkage)
    else:
        ds = _as_covariances(ds, shrinkage=args.shrinkage)
        if kind == "mdm":
            model = cl.mdm_fit(ds)
        elif kind == "tslr":
            model = cl.tslr_fit(ds, steps=args.steps, lr=args.lr,
                                batch_size=args.batch_size, seed=seed)
        elif kind == "tsa-lda":
            model = cl.tsa_lda_fit(ds)
        elif kind == "dcnet":
            cfg = cl.DcNetConfig(lr=args.lr, steps=args.steps,
                                 batch_size=args.batch_size, seed=seed)
            model = cl.dcnet_fit(ds, cfg)
        elif kind == "rifunet":
            cfg = cl.RifuNetConfig(lr=args.lr, steps=args.steps,
                                   batch_size=args.batch_size, seed=seed,
                                   base_mode=args.tslr_base)
            model = cl.rifunet_fit(ds, cfg)
        else:
            raise SpdGeoError(f"unknown classifier '{kind}'")
    cl.save_classifier(model, args.out)
    print(f"trained {kind} on {len(ds)} items; wrote {args.out}")
    return 0


def _predict_with(model, ds):
    if isinstance(model, cl.CspModel):
        return cl.csp_predict_set(model, ds)
    if isinstance(model, cl.MdmModel):
        return cl.mdm_predict_set(model, ds)
    if isinstance(model, cl.TslrModel):
        return cl.tslr_predict_set(model, ds)
    if isinstance(model, cl.TsaLdaModel):
        return cl.tsa_lda_predict_set(model, ds)
    if isinstance(model, cl.DcNetModel):
        return cl.dcnet_predict_set(model, ds)
    if isinstance(model, cl.RifuNetModel):
        return cl.rifunet_predict_set(model, ds)
    raise SpdGeoError(f"cannot predict with {type(model).__name__}")


def cmd_eval(args):
    model = cl.load_classifier(args.model)
    ds = _load_dataset(args.data)
    if not isinstance(model, cl.CspModel):
        ds = _as_covariances(ds, shrinkage=args.shrinkage)
    pred = _predict_with(model, ds)
    acc = 100.0 * float(np.mean(pred == ds.labels))
    print(f"accuracy: {acc:.2f}% over {len(pred)} items")
    if args.predictions:
        with open(args.predictions, "w") as f:
            f.write("index,subject,label,prediction\n")
            for i, (s, y, p) in enumerate(zip(ds.subjects, ds.labels, pred)):
                f.write(f"{i},{int(s)},{int(y)},{int(p)}\n")
    return 0


def cmd_loso(args):
    cfg = hn.RunConfig.from_json(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs is not None:
        cfg.jobs = args.jobs
    ds = _load_dataset(args.data)
    if cfg.classifier != "csp-lda":
        ds = _as_covariances(ds, shrinkage=cfg.shrinkage)
    report = hn.run_loso(cfg, ds)
    hn.write_report(report, args.out)
    text, _ = hn.emit_table([report])
    print(text, end="")
    if report.failed_subjects:
        print(f"failed folds: {report.failed_subjects}", file=sys.stderr)
        return 1
    return 0


def cmd_gradcheck(args):
    results = gc.run_suite(instances=args.instances, seed=args.seed or 2024)
    width = max(len(k) for k in results)
    failed = False
    for name in sorted(results):
        err = results[name]
        status = "ok" if err < gc.TOLERANCE else "FAIL"
        if err >= gc.TOLERANCE:
            failed = True
        print(f"{name.ljust(width)}  {err:.3e}  {status}")
    print(f"worst relative error: {max(results.values()):.3e} "
          f"(tolerance {gc.TOLERANCE:.0e})")
    return 1 if failed else 0


def cmd_table(args):
    reports = []
    for path in args.reports:
        with open(path) as f:
            d = json.load(f)
        subjects = [int(s) for s in d["subjects"]]
        accs = {s: d["accuracies"][str(s)] for s in subjects}
        arr = np.array([a for a in accs.values() if a is not None], dtype=float)
        reports.append(hn.LosoReport(
            method=d["method"], fingerprint=d.get("fingerprint", ""), config=d.get("config", {}),
            subjects=subjects, accuracies=accs,
            mean=float(d.get("mean", arr.mean())), std=float(d.get("std", arr.std())),
            confusions={s: np.zeros((0, 0)) for s in subjects},
            failed_subjects=d.get("failed_subjects", []),
            wall_clock={s: 0.0 for s in subjects},
            audits={s: [] for s in subjects}))
    text, csv_text = hn.emit_table(reports)
    if args.out_txt:
        with open(args.out_txt, "w") as f:
            f.write(text)
    if args.out_csv:
        with open(args.out_csv, "w") as f:
            f.write(csv_text)
    print(text, end="")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="spdnet-geo",
        description="SPD-manifold covariance alignment and classification harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cross-subject dataset")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--subjects", type=int, default=6)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--trials", type=int, default=40, help="trials per (subject, class)")
    p.add_argument("--class-spread", type=float, default=0.6)
    p.add_argument("--rotation", type=float, default=0.0)
    p.add_argument("--dispersion", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--labels-csv", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cov", help="estimate covariances from an epoch file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shrinkage", action="store_true")
    p.set_defaults(func=cmd_cov)

    p = sub.add_parser("align", help="fit an alignment stage and transform a dataset")
    p.add_argument("--method", required=True, choices=hn.ALIGN_STAGES)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", default=None, help="also save the fitted model")
    p.add_argument("--ra-scope", default="subject", choices=["subject", "train-global"])
    p.add_argument("--ra-mean", default="log-euclidean", choices=["log-euclidean", "karcher"])
    p.add_argument("--rpa-dispersion", default="log-scatter", choices=["log-scatter", "mean"])
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--shrinkage", action="store_true")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("train", help="train a classifier on a dataset")
    p.add_argument("--classifier", required=True, choices=hn.CLASSIFIERS)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--csp-filters", type=int, default=8)
    p.add_argument("--csp-z", action="store_true")
    p.add_argument("--tslr-base", default="train", choices=["train", "batch"])
    p.add_argument("--shrinkage", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved classifier on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--predictions", default=None, help="write per-item predictions CSV")
    p.add_argument("--shrinkage", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("loso", help="run the leave-one-subject-out protocol")
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(func=cmd_loso)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("table", help="render accuracy tables from reports")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--out-txt", default=None)
    p.add_argument("--out-csv", default=None)
    p.set_defaults(func=cmd_table)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SpdGeoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
