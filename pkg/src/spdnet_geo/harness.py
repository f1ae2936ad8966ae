"""LOSO pipeline runner: configuration, per-fold training with a
zero-shot audit, aggregation, and table emission.

``report.json`` is a pure function of config + data + seed (timings go
to a ``timings.json`` sidecar), so identical runs produce bit-identical
report files regardless of ``jobs``.
"""

import dataclasses
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import align as al
from . import classify as cl
from . import data as dat
from .errors import FormatError, ShapeError, TrainingError

ALIGN_STAGES = ("ra", "rpa", "dcr", "rifu")
CLASSIFIERS = ("mdm", "tslr", "tsa-lda", "csp-lda", "dcnet", "rifunet")


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 256
    steps: int = 1000


@dataclass
class RunConfig:
    classifier: str = "mdm"
    align: list = field(default_factory=lambda: ["ra"])
    seed: int = 0
    ra_scope: str = "subject"  # "subject" | "train-global"
    ra_mean: str = "log-euclidean"  # "log-euclidean" | "karcher"
    rpa_dispersion: str = "log-scatter"
    tslr_base: str = "train"  # "train" | "batch" (deep net head base point)
    csp_z: bool = False
    csp_filters: int = 8
    shrinkage: bool = False
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    stages: dict = field(default_factory=dict)  # per-stage hyper overrides
    jobs: int = 1

    def validated(self):
        if self.classifier not in CLASSIFIERS:
            raise ShapeError(f"unknown classifier '{self.classifier}'")
        if len(set(self.align)) != len(self.align):
            raise ShapeError("alignment stages must not repeat")
        for stage in self.align:
            if stage not in ALIGN_STAGES:
                raise ShapeError(f"unknown alignment stage '{stage}'")
        if self.classifier == "csp-lda" and self.align:
            raise ShapeError("csp-lda consumes raw epochs; alignment stages do not apply")
        return self

    def label(self):
        prefix = "+".join(self.align)
        return f"{prefix}/{self.classifier}" if prefix else self.classifier

    def to_dict(self):
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        opt = d.pop("optimizer", {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise FormatError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.optimizer = OptimizerConfig(**opt) if isinstance(opt, dict) else opt
        return cfg.validated()

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def fingerprint(self):
        """Hash of the semantically meaningful fields (jobs excluded)."""
        d = self.to_dict()
        d.pop("jobs", None)
        canonical = json.dumps(d, sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


@dataclass
class FoldResult:
    subject: int
    accuracy: float  # percent
    confusion: np.ndarray
    n_test: int
    wall_clock: float
    audit: list
    failed: bool = False
    error: str = ""


@dataclass
class LosoReport:
    method: str
    fingerprint: str
    config: dict
    subjects: list
    accuracies: dict  # subject -> percent
    mean: float
    std: float  # population std over per-subject accuracies
    confusions: dict  # subject -> (K, K) array
    failed_subjects: list
    wall_clock: dict  # subject -> seconds; sidecar only
    audits: dict  # subject -> audit trail

    def to_json_dict(self):
        """Deterministic report content; timings live in the sidecar.

        ``jobs`` is execution detail, not semantics, so it is dropped:
        the same config must produce byte-identical reports at any
        parallelism level.
        """
        config = {k: v for k, v in self.config.items() if k != "jobs"}
        return {
            "method": self.method,
            "fingerprint": self.fingerprint,
            "config": config,
            "subjects": [int(s) for s in self.subjects],
            "accuracies": {str(int(s)): self.accuracies[s] for s in self.subjects},
            "mean": self.mean,
            "std": self.std,
            "confusions": {
                str(int(s)): np.asarray(self.confusions[s]).tolist() for s in self.subjects
            },
            "failed_subjects": [int(s) for s in self.failed_subjects],
            "audits": {str(int(s)): self.audits[s] for s in self.subjects},
        }


class ZeroShotAudit:
    """Records which subjects each estimator saw; aborts on leakage.

    Label-free stages may see held-out data (they use no supervision);
    any labeled fit must never receive the held-out subject.
    """

    def __init__(self, held_out):
        self.held_out = int(held_out)
        self.events = []

    def check(self, stage, ds, uses_labels):
        seen = sorted(int(s) for s in np.unique(ds.subjects))
        self.events.append({"stage": stage, "subjects": seen, "uses_labels": uses_labels})
        if uses_labels and self.held_out in seen:
            raise TrainingError(
                f"zero-shot violation: supervised stage '{stage}' received "
                f"held-out subject {self.held_out}"
            )


def _stage_overrides(cfg, name):
    return dict(cfg.stages.get(name, {}))


def _fit_alignment(cfg, stage, train, test, audit, fold_seed):
    opt = cfg.optimizer
    if stage == "ra":
        audit.check("ra(train)", train, uses_labels=False)
        model = al.ra_fit(train, scope=cfg.ra_scope, mean_kind=cfg.ra_mean)
        train = al.ra_apply(model, train)
        if cfg.ra_scope == "subject":
            # held-out references come from the subject's own unlabeled data
            audit.check("ra(test)", test, uses_labels=False)
            test = al.ra_apply(al.ra_fit(test, scope="subject", mean_kind=cfg.ra_mean), test)
        else:
            test = al.ra_apply(model, test)
        return train, test
    if stage == "rpa":
        audit.check("rpa(train)", train, uses_labels=False)
        train = al.rpa_align(train, dispersion=cfg.rpa_dispersion)
        audit.check("rpa(test)", test, uses_labels=False)
        test = al.rpa_align(test, dispersion=cfg.rpa_dispersion)
        return train, test
    if stage == "dcr":
        audit.check("dcr", train, uses_labels=True)
        hyper = al.DcrHyper(lr=opt.lr, steps=opt.steps, **_stage_overrides(cfg, "dcr"))
        model = al.dcr_fit(train, hyper)
        return al.dcr_apply(model, train), al.dcr_apply(model, test)
    if stage == "rifu":
        audit.check("rifu", train, uses_labels=True)
        rcfg = al.RifuConfig(
            lr=opt.lr, weight_decay=opt.weight_decay, batch_size=opt.batch_size,
            steps=opt.steps, seed=fold_seed, **_stage_overrides(cfg, "rifu"))
        model = al.rifu_fit(train, rcfg)
        return al.rifu_apply(model, train), al.rifu_apply(model, test)
    raise ShapeError(f"unknown alignment stage '{stage}'")


def _fit_predict_classifier(cfg, train, test, audit, fold_seed):
    opt = cfg.optimizer
    kind = cfg.classifier
    audit.check(kind, train, uses_labels=True)
    if kind == "mdm":
        model = cl.mdm_fit(train)
        return cl.mdm_predict_set(model, test)
    if kind == "tslr":
        model = cl.tslr_fit(train, steps=opt.steps, lr=opt.lr,
                            weight_decay=opt.weight_decay,
                            batch_size=opt.batch_size, seed=fold_seed)
        return cl.tslr_predict_set(model, test)
    if kind == "tsa-lda":
        model = cl.tsa_lda_fit(train, **_stage_overrides(cfg, "tsa-lda"))
        return cl.tsa_lda_predict_set(model, test)
    if kind == "csp-lda":
        model = cl.csp_fit(train, m_filters=cfg.csp_filters, zscore=cfg.csp_z,
                           shrinkage=cfg.shrinkage)
        return cl.csp_predict_set(model, test)
    if kind == "dcnet":
        ncfg = cl.DcNetConfig(lr=opt.lr, weight_decay=opt.weight_decay,
                              batch_size=opt.batch_size, steps=opt.steps,
                              seed=fold_seed, **_stage_overrides(cfg, "dcnet"))
        model = cl.dcnet_fit(train, ncfg)
        return cl.dcnet_predict_set(model, test)
    if kind == "rifunet":
        ncfg = cl.RifuNetConfig(lr=opt.lr, weight_decay=opt.weight_decay,
                                batch_size=opt.batch_size, steps=opt.steps,
                                seed=fold_seed, base_mode=cfg.tslr_base,
                                **_stage_overrides(cfg, "rifunet"))
        model = cl.rifunet_fit(train, ncfg)
        return cl.rifunet_predict_set(model, test)
    raise ShapeError(f"unknown classifier '{kind}'")


def _confusion(truth, pred, classes):
    lookup = {int(c): i for i, c in enumerate(classes)}
    K = len(classes)
    M = np.zeros((K, K), dtype=int)
    for t, p in zip(truth, pred):
        M[lookup[int(t)], lookup.get(int(p), 0)] += 1
    return M


def run_fold(cfg, ds, split):
    """Fit the pipeline on the training subjects, evaluate the held-out one."""
    started = time.perf_counter()
    fold_seed = cfg.seed + int(split.held_out)
    audit = ZeroShotAudit(split.held_out)
    classes = ds.class_ids()
    try:
        train = ds.subset(split.train_idx)
        test = ds.subset(split.test_idx)
        for stage in cfg.align:
            train, test = _fit_alignment(cfg, stage, train, test, audit, fold_seed)
        pred = _fit_predict_classifier(cfg, train, test, audit, fold_seed)
        truth = test.labels
        accuracy = 100.0 * float(np.mean(pred == truth))
        confusion = _confusion(truth, pred, classes)
        return FoldResult(int(split.held_out), accuracy, confusion, len(truth),
                          time.perf_counter() - started, audit.events)
    except Exception as exc:  # fold failures are recorded, not fatal
        return FoldResult(int(split.held_out), float("nan"),
                          np.zeros((len(classes), len(classes)), dtype=int), 0,
                          time.perf_counter() - started, audit.events,
                          failed=True, error=f"{type(exc).__name__}: {exc}")


def _run_fold_star(args):
    return run_fold(*args)


def run_loso(cfg, ds):
    """LOSO evaluation: one fold per subject, aggregated mean +/- std."""
    cfg = cfg.validated()
    if cfg.classifier == "csp-lda" and not isinstance(ds, dat.EpochSet):
        raise ShapeError("csp-lda requires an epoch dataset (.epoc)")
    splits = loso_splits_for(ds)
    jobs = max(1, int(cfg.jobs))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold_star, [(cfg, ds, sp) for sp in splits]))
    else:
        results = [run_fold(cfg, ds, sp) for sp in splits]
    results.sort(key=lambda r: r.subject)

    ok = [r for r in results if not r.failed]
    accs = np.array([r.accuracy for r in ok])
    mean = float(accs.mean()) if len(ok) else float("nan")
    std = float(accs.std()) if len(ok) else float("nan")
    return LosoReport(
        method=cfg.label(),
        fingerprint=cfg.fingerprint(),
        config=cfg.to_dict(),
        subjects=[r.subject for r in results],
        accuracies={r.subject: (None if r.failed else r.accuracy) for r in results},
        mean=mean,
        std=std,
        confusions={r.subject: r.confusion for r in results},
        failed_subjects=[r.subject for r in results if r.failed],
        wall_clock={r.subject: r.wall_clock for r in results},
        audits={r.subject: r.audit for r in results},
    )


def loso_splits_for(ds):
    if isinstance(ds, dat.EpochSet):
        subjects = np.unique(ds.subjects)
        if len(subjects) < 2:
            raise dat.InsufficientSubjects(f"LOSO needs >= 2 subjects, got {len(subjects)}")
        return [
            dat.LosoSplit(int(s), np.flatnonzero(ds.subjects != s), np.flatnonzero(ds.subjects == s))
            for s in subjects
        ]
    return dat.loso_splits(ds)


# ---------------------------------------------------------------------------
# report emission


def write_report(report, out_dir):
    """report.json + timings.json sidecar + per-subject confusion CSVs."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(report.to_json_dict(), f, sort_keys=True, indent=2)
        f.write("\n")
    with open(os.path.join(out_dir, "timings.json"), "w") as f:
        json.dump({str(s): t for s, t in report.wall_clock.items()}, f, sort_keys=True, indent=2)
        f.write("\n")
    for s, M in report.confusions.items():
        path = os.path.join(out_dir, f"confusion_{int(s)}.csv")
        np.savetxt(path, np.asarray(M, dtype=int), fmt="%d", delimiter=",")
    text, csv_text = emit_table([report])
    with open(os.path.join(out_dir, "table.txt"), "w") as f:
        f.write(text)
    with open(os.path.join(out_dir, "table.csv"), "w") as f:
        f.write(csv_text)


def emit_table(reports):
    """Per-subject accuracy table across methods, with a Mean +/- Std row.

    Returns (text_table, csv_text). The std is the population standard
    deviation over per-subject accuracies.
    """
    if not reports:
        raise FormatError("emit_table needs at least one report")
    subjects = [int(s) for s in reports[0].subjects]
    for r in reports[1:]:
        if [int(s) for s in r.subjects] != subjects:
            raise FormatError("reports cover different subject sets")

    methods = [r.method for r in reports]
    header = ["Subject"] + methods
    rows = []
    for s in subjects:
        row = [f"S{s:02d}"]
        for r in reports:
            a = r.accuracies[s]
            row.append("failed" if a is None else f"{a:.2f}")
        rows.append(row)
    summary = ["Mean ± Std"] + [f"{r.mean:.2f} ± {r.std:.2f}" for r in reports]
    rows.append(summary)

    widths = [max(len(header[c]), *(len(row[c]) for row in rows)) for c in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows[:-1]:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    lines.append("  ".join(v.ljust(w) for v, w in zip(rows[-1], widths)))
    text = "\n".join(lines) + "\n"

    csv_lines = ["subject," + ",".join(methods)]
    for s, row in zip(subjects, rows[:-1]):
        csv_lines.append(",".join([str(s)] + row[1:]))
    csv_lines.append(",".join(["mean"] + [f"{r.mean:.2f}" for r in reports]))
    csv_lines.append(",".join(["std"] + [f"{r.std:.2f}" for r in reports]))
    csv_text = "\n".join(csv_lines) + "\n"
    return text, csv_text


def report_from_accuracies(method, accuracies):
    """Minimal report wrapper for external per-subject accuracy columns."""
    subjects = list(range(len(accuracies)))
    accs = {s: float(a) for s, a in zip(subjects, accuracies)}
    arr = np.array(accuracies, dtype=float)
    return LosoReport(
        method=method, fingerprint="", config={}, subjects=subjects,
        accuracies=accs, mean=float(arr.mean()), std=float(arr.std()),
        confusions={s: np.zeros((0, 0), dtype=int) for s in subjects},
        failed_subjects=[], wall_clock={s: 0.0 for s in subjects},
        audits={s: [] for s in subjects},
    )
