"""Covariance ingestion, LOSO splitting, synthetic generation, file I/O.

Binary formats (little-endian):

- covariance file ``.spdc``: magic ``SPDC``, version u32 = 1, dim u32,
  count u32; per record: subject u32, label u32, dim*dim float64
  row-major (full symmetric matrix stored dense).
- epoch file ``.epoc``: magic ``EPOC``, version u32 = 1, channels u32,
  count u32; per record: subject u32, label u32, T u32, C*T float64
  row-major.
"""

import csv
import struct
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from . import geometry as geo
from .errors import FormatError, InsufficientSubjects, NotPositiveDefinite, ShapeError

SHRINKAGE_DELTA = 1e-3


@dataclass
class CovarianceSet:
    """Trial covariances with subject and action labels."""

    dim: int
    subjects: np.ndarray  # (n,) int
    labels: np.ndarray  # (n,) int
    mats: np.ndarray  # (n, dim, dim)

    def __post_init__(self):
        self.subjects = np.asarray(self.subjects, dtype=int)
        self.labels = np.asarray(self.labels, dtype=int)
        self.mats = np.asarray(self.mats, dtype=float)
        n = len(self.subjects)
        if self.labels.shape != (n,) or self.mats.shape != (n, self.dim, self.dim):
            raise ShapeError("covariance set arrays are inconsistent")

    def __len__(self):
        return len(self.subjects)

    def subject_ids(self):
        return np.unique(self.subjects)

    def class_ids(self):
        return np.unique(self.labels)

    def subset(self, idx):
        return CovarianceSet(self.dim, self.subjects[idx], self.labels[idx], self.mats[idx])

    def with_mats(self, mats):
        return CovarianceSet(self.dim, self.subjects.copy(), self.labels.copy(), np.asarray(mats, dtype=float))


@dataclass
class EpochSet:
    """Raw channel-by-time epochs; T may vary per epoch."""

    channels: int
    subjects: np.ndarray
    labels: np.ndarray
    epochs: list  # list of (C, T) arrays

    def __post_init__(self):
        self.subjects = np.asarray(self.subjects, dtype=int)
        self.labels = np.asarray(self.labels, dtype=int)
        if len(self.subjects) != len(self.epochs) or len(self.labels) != len(self.epochs):
            raise ShapeError("epoch set arrays are inconsistent")

    def __len__(self):
        return len(self.epochs)

    def subset(self, idx):
        idx = np.asarray(idx)
        return EpochSet(
            self.channels,
            self.subjects[idx],
            self.labels[idx],
            [self.epochs[i] for i in idx],
        )


@dataclass(frozen=True)
class LosoSplit:
    held_out: int
    train_idx: np.ndarray
    test_idx: np.ndarray


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic cross-subject generator settings; the seed pins everything."""

    dim: int = 8
    n_subjects: int = 6
    n_classes: int = 4
    n_trials: int = 40  # per (subject, class)
    class_spread: float = 0.6
    rotation_scale: float = 0.0  # per-subject rotation angle scale
    dispersion_scale: float = 0.0  # per-subject log-scale range
    noise_scale: float = 0.0
    seed: int = 0

    def validated(self):
        if min(self.dim, self.n_subjects, self.n_classes, self.n_trials) < 1:
            raise ShapeError("synth config counts must be positive")
        if min(self.class_spread, self.rotation_scale, self.dispersion_scale, self.noise_scale) < 0:
            raise ShapeError("synth config scales must be nonnegative")
        return self


def trace_normalize(C):
    """Rescale so tr(C) = dim, making whitened matrices identity-scale."""
    C = np.asarray(C, dtype=float)
    d = C.shape[-1]
    tr = np.trace(C, axis1=-2, axis2=-1)
    if np.any(tr <= 0) or not np.all(np.isfinite(tr)):
        raise NotPositiveDefinite("trace is not positive")
    return C * (d / tr)[..., None, None]


def estimate_covariance(X, shrinkage=False):
    """Sample covariance (1/(T-1)) X X^T, shrunk if requested, trace-normalized."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ShapeError(f"epoch must be a (channels, samples) matrix, got {X.shape}")
    C_dim, T = X.shape
    if T < 2:
        raise ShapeError("covariance estimation needs at least 2 samples")
    if not np.all(np.isfinite(X)):
        raise NotPositiveDefinite("epoch contains non-finite samples")
    C = (X @ X.T) / (T - 1)
    if shrinkage:
        C = C + SHRINKAGE_DELTA * (np.trace(C) / C_dim) * np.eye(C_dim)
    C = trace_normalize(geo.sym(C))
    w = np.linalg.eigvalsh(C)
    if w.min() <= geo.EIG_FLOOR * w.max():
        raise NotPositiveDefinite(
            "rank-deficient epoch covariance; enable shrinkage for short epochs"
        )
    return C


def estimate_covariances(epochs, shrinkage=False):
    """Covariance per epoch; preserves subject/label alignment."""
    mats = np.stack([estimate_covariance(X, shrinkage=shrinkage) for X in epochs.epochs])
    return CovarianceSet(epochs.channels, epochs.subjects.copy(), epochs.labels.copy(), mats)


def loso_splits(ds):
    """One leave-one-subject-out split per subject, sorted by subject id."""
    subjects = ds.subject_ids()
    if len(subjects) < 2:
        raise InsufficientSubjects(f"LOSO needs >= 2 subjects, got {len(subjects)}")
    splits = []
    for s in subjects:
        mask = ds.subjects == s
        splits.append(
            LosoSplit(int(s), np.flatnonzero(~mask), np.flatnonzero(mask))
        )
    return splits


def _random_rotation(rng, d, angle_scale):
    G = rng.standard_normal((d, d))
    return expm(angle_scale * 0.5 * (G - G.T))


def synth_generate(cfg):
    """Deterministic synthetic cross-subject covariance set.

    Class prototypes ``P_k = exp(spread * S_k)`` are distorted per
    subject by ``G_s = R_s diag(exp(u_s))`` (rotation then dispersion),
    so trial = ``G_s exp(log P_k + noise) G_s^T``, trace-normalized.
    """
    cfg = cfg.validated()
    rng = np.random.default_rng(cfg.seed)
    d = cfg.dim

    # prototypes kept in the log domain so noise adds before exponentiation
    prototypes = [cfg.class_spread * _rand_sym(rng, d) for _ in range(cfg.n_classes)]

    distortions = []
    for _ in range(cfg.n_subjects):
        R = _random_rotation(rng, d, cfg.rotation_scale)
        u = rng.uniform(-cfg.dispersion_scale, cfg.dispersion_scale, size=d)
        distortions.append(R @ np.diag(np.exp(u)))

    subjects, labels, mats = [], [], []
    for s in range(cfg.n_subjects):
        G = distortions[s]
        for k in range(cfg.n_classes):
            for _ in range(cfg.n_trials):
                noise = cfg.noise_scale * _rand_sym(rng, d)
                C = geo.spd_exp(prototypes[k] + noise)
                C = geo.sym(G @ C @ G.T)
                mats.append(trace_normalize(C))
                subjects.append(s)
                labels.append(k)
    return CovarianceSet(d, np.array(subjects), np.array(labels), np.stack(mats))


def _rand_sym(rng, d):
    A = rng.standard_normal((d, d))
    return 0.5 * (A + A.T) / np.sqrt(d)


# ---------------------------------------------------------------------------
# binary file formats

_SPDC_MAGIC = b"SPDC"
_EPOC_MAGIC = b"EPOC"
_VERSION = 1
_MAX_ID = 2**31  # sanity bound for subject/label fields


def save_covariances(ds, path):
    with open(path, "wb") as f:
        f.write(_SPDC_MAGIC)
        f.write(struct.pack("<III", _VERSION, ds.dim, len(ds)))
        for s, y, C in zip(ds.subjects, ds.labels, ds.mats):
            f.write(struct.pack("<II", int(s), int(y)))
            f.write(np.ascontiguousarray(C, dtype="<f8").tobytes())


def load_covariances(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise FormatError("file too short for SPDC header", offset=0)
    if raw[:4] != _SPDC_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected SPDC", offset=0)
    version, dim, count = struct.unpack_from("<III", raw, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported SPDC version {version}", offset=4)
    if dim < 1:
        raise FormatError("dim must be >= 1", offset=8)
    offset = 16
    rec_bytes = 8 + dim * dim * 8
    subjects, labels, mats = [], [], []
    for i in range(count):
        if len(raw) < offset + rec_bytes:
            raise FormatError("truncated covariance record", offset=offset, record=i)
        s, y = struct.unpack_from("<II", raw, offset)
        if s >= _MAX_ID or y >= _MAX_ID:
            raise FormatError("subject/label out of range", offset=offset, record=i)
        C = np.frombuffer(raw, dtype="<f8", count=dim * dim, offset=offset + 8)
        if not np.all(np.isfinite(C)):
            raise FormatError("non-finite matrix entries", offset=offset + 8, record=i)
        subjects.append(s)
        labels.append(y)
        mats.append(C.reshape(dim, dim).copy())
        offset += rec_bytes
    if offset != len(raw):
        raise FormatError("trailing bytes after final record", offset=offset)
    return CovarianceSet(dim, np.array(subjects, dtype=int), np.array(labels, dtype=int),
                         np.stack(mats) if mats else np.zeros((0, dim, dim)))


def save_epochs(es, path):
    with open(path, "wb") as f:
        f.write(_EPOC_MAGIC)
        f.write(struct.pack("<III", _VERSION, es.channels, len(es)))
        for s, y, X in zip(es.subjects, es.labels, es.epochs):
            X = np.asarray(X, dtype=float)
            f.write(struct.pack("<III", int(s), int(y), X.shape[1]))
            f.write(np.ascontiguousarray(X, dtype="<f8").tobytes())


def load_epochs(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise FormatError("file too short for EPOC header", offset=0)
    if raw[:4] != _EPOC_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected EPOC", offset=0)
    version, channels, count = struct.unpack_from("<III", raw, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported EPOC version {version}", offset=4)
    if channels < 1:
        raise FormatError("channels must be >= 1", offset=8)
    offset = 16
    subjects, labels, epochs = [], [], []
    for i in range(count):
        if len(raw) < offset + 12:
            raise FormatError("truncated epoch header", offset=offset, record=i)
        s, y, T = struct.unpack_from("<III", raw, offset)
        if s >= _MAX_ID or y >= _MAX_ID:
            raise FormatError("subject/label out of range", offset=offset, record=i)
        nbytes = channels * T * 8
        if len(raw) < offset + 12 + nbytes:
            raise FormatError("truncated epoch samples", offset=offset + 12, record=i)
        X = np.frombuffer(raw, dtype="<f8", count=channels * T, offset=offset + 12)
        subjects.append(s)
        labels.append(y)
        epochs.append(X.reshape(channels, T).copy())
        offset += 12 + nbytes
    if offset != len(raw):
        raise FormatError("trailing bytes after final record", offset=offset)
    return EpochSet(channels, np.array(subjects, dtype=int), np.array(labels, dtype=int), epochs)


def export_labels_csv(ds, path):
    """CSV companion for external tooling: index,subject,label."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "subject", "label"])
        for i, (s, y) in enumerate(zip(ds.subjects, ds.labels)):
            writer.writerow([i, int(s), int(y)])
