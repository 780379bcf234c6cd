"""Subject data: ExtraSensory-format CSVs, folds, standardization, windows.

One subject is one CSV of per-minute rows: a unix-timestamp column, the
feature columns, then the "label:"-prefixed {0,1,empty} label columns and
an optional trailing label_source column. A non-IID synthetic generator
produces the same shape of data from per-subject Dirichlet label priors.
"""

from __future__ import annotations

import csv
import gzip
import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError
from .util import derive_seed

__all__ = [
    "EXTRASENSORY_FEATURES",
    "EXTRASENSORY_LABELS",
    "SubjectRecord",
    "parse_extrasensory_csv",
    "write_subject_csv",
    "load_subject_dir",
    "FoldPlan",
    "build_fold_plan",
    "Standardizer",
    "fit_standardizer",
    "apply_standardizer",
    "Window",
    "make_windows",
    "batch_arrays",
    "split_train_test",
    "carve_validation",
    "SplitWarning",
    "SyntheticSpec",
    "gen_synthetic",
]

EXTRASENSORY_FEATURES = 225
EXTRASENSORY_LABELS = 51

GAP_FACTOR = 5.0
STD_FLOOR = 1e-6


class SplitWarning(UserWarning):
    """A subject had too few windows for a meaningful train/test split."""


@dataclass
class SubjectRecord:
    """Time-ordered per-minute rows for one subject. NaN marks missing."""

    subject_id: str
    timestamps: np.ndarray  # int64 [N] seconds, strictly increasing
    features: np.ndarray    # float32 [N, F], NaN = missing
    labels: np.ndarray      # float32 [N, L], values {0, 1, NaN}
    feature_names: list[str] = field(default_factory=list)
    label_names: list[str] = field(default_factory=list)

    @property
    def n_minutes(self) -> int:
        return len(self.timestamps)


def parse_extrasensory_csv(
    source,
    subject_id: str | None = None,
    expected_features: int | None = None,
    expected_labels: int | None = None,
) -> SubjectRecord:
    """Parse one subject CSV (path, or text stream) into a SubjectRecord.

    Columns are classified by header name: "timestamp", "label:*" labels,
    optional trailing "label_source" (ignored), everything else a feature.
    Rows are sorted by timestamp. Empty feature cells become NaN, empty
    label cells become NaN (missing), other label cells must be 0 or 1.
    """
    if isinstance(source, (str, os.PathLike)):
        path = os.fspath(source)
        if subject_id is None:
            base = os.path.basename(path)
            for ext in (".csv.gz", ".csv"):
                if base.endswith(ext):
                    base = base[: -len(ext)]
                    break
            subject_id = base
        opener = gzip.open if path.endswith(".gz") else open
        with opener(path, "rt", encoding="utf-8", newline="") as fh:
            return parse_extrasensory_csv(fh, subject_id, expected_features, expected_labels)

    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("empty file: no header row") from None
    if not header or header[0] != "timestamp":
        raise FormatError(f"first column must be 'timestamp', got {header[:1]!r}")

    feature_idx, label_idx = [], []
    feature_names, label_names = [], []
    for i, name in enumerate(header[1:], start=1):
        if name == "label_source":
            if i != len(header) - 1:
                raise FormatError("label_source must be the trailing column")
            continue
        if name.startswith("label:"):
            label_idx.append(i)
            label_names.append(name)
        else:
            if label_idx:
                raise FormatError(f"feature column {name!r} after label columns")
            feature_idx.append(i)
            feature_names.append(name)

    if expected_features is not None and len(feature_idx) != expected_features:
        raise FormatError(
            f"expected {expected_features} feature columns, found {len(feature_idx)}")
    if expected_labels is not None and len(label_idx) != expected_labels:
        raise FormatError(
            f"expected {expected_labels} label columns, found {len(label_idx)}")
    if not feature_idx or not label_idx:
        raise FormatError("need at least one feature and one label column")

    times, feats, labs = [], [], []
    for row_no, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise FormatError(f"row {row_no}: {len(row)} cells, header has {len(header)}")
        try:
            times.append(int(float(row[0])))
        except ValueError:
            raise FormatError(f"row {row_no}: bad timestamp {row[0]!r}") from None
        frow = np.empty(len(feature_idx), dtype=np.float32)
        for j, col in enumerate(feature_idx):
            cell = row[col]
            if cell == "":
                frow[j] = np.nan
            else:
                try:
                    frow[j] = float(cell)
                except ValueError:
                    raise FormatError(
                        f"row {row_no}, column {header[col]!r}: bad value {cell!r}") from None
        lrow = np.empty(len(label_idx), dtype=np.float32)
        for j, col in enumerate(label_idx):
            cell = row[col]
            if cell == "":
                lrow[j] = np.nan
            elif cell in ("0", "1", "0.0", "1.0"):
                lrow[j] = float(cell)
            else:
                raise FormatError(
                    f"row {row_no}, column {header[col]!r}: label must be 0/1/empty, "
                    f"got {cell!r}")
        feats.append(frow)
        labs.append(lrow)

    if not times:
        raise FormatError("file has a header but no data rows")
    ts = np.asarray(times, dtype=np.int64)
    order = np.argsort(ts, kind="stable")
    ts = ts[order]
    if len(ts) > 1 and (np.diff(ts) == 0).any():
        raise FormatError("duplicate timestamps")
    return SubjectRecord(
        subject_id=subject_id or "unknown",
        timestamps=ts,
        features=np.stack(feats)[order],
        labels=np.stack(labs)[order],
        feature_names=feature_names,
        label_names=label_names,
    )


def write_subject_csv(record: SubjectRecord, path: str) -> None:
    """Write a SubjectRecord in the same format parse_extrasensory_csv reads."""
    feature_names = record.feature_names or [f"f{i:03d}" for i in range(record.features.shape[1])]
    label_names = record.label_names or [f"label:L{i:02d}" for i in range(record.labels.shape[1])]
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wt", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", *feature_names, *label_names])
        for i in range(record.n_minutes):
            row = [str(int(record.timestamps[i]))]
            for v in record.features[i]:
                row.append("" if np.isnan(v) else repr(float(v)))
            for v in record.labels[i]:
                row.append("" if np.isnan(v) else str(int(v)))
            writer.writerow(row)


def load_subject_dir(
    path: str,
    expected_features: int | None = None,
    expected_labels: int | None = None,
) -> list[SubjectRecord]:
    """Parse every *.csv / *.csv.gz in a directory, sorted by filename.

    All files must agree on feature/label counts; the first file sets them
    when no expectation is passed.
    """
    names = sorted(n for n in os.listdir(path)
                   if n.endswith(".csv") or n.endswith(".csv.gz"))
    if not names:
        raise FormatError(f"no subject CSVs found in {path}")
    records = []
    for name in names:
        rec = parse_extrasensory_csv(os.path.join(path, name),
                                     expected_features=expected_features,
                                     expected_labels=expected_labels)
        if expected_features is None:
            expected_features = rec.features.shape[1]
            expected_labels = rec.labels.shape[1]
        records.append(rec)
    return records


@dataclass
class FoldPlan:
    """Disjoint client folds plus, per fold, the complement base subjects."""

    n_folds: int
    seed: int
    folds: list[list[str]]
    base_subjects: list[list[str]]

    def to_json_dict(self) -> dict:
        return {"n_folds": self.n_folds, "seed": self.seed,
                "folds": self.folds, "base_subjects": self.base_subjects}

    @classmethod
    def from_json_dict(cls, d: dict) -> "FoldPlan":
        return cls(d["n_folds"], d["seed"], d["folds"], d["base_subjects"])

    def save(self, path: str) -> None:
        from .util import atomic_write_json
        atomic_write_json(path, self.to_json_dict())

    @classmethod
    def load(cls, path: str) -> "FoldPlan":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def build_fold_plan(subject_ids, seed: int, n_folds: int = 5) -> FoldPlan:
    """Shuffle subjects with the seed and cut them into n_folds equal folds."""
    ids = list(subject_ids)
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate subject ids in fold plan input")
    if n_folds < 1:
        raise ConfigError(f"n_folds must be >= 1, got {n_folds}")
    if not ids or len(ids) % n_folds != 0:
        raise ConfigError(
            f"{len(ids)} subjects cannot be split into {n_folds} equal folds")
    per = len(ids) // n_folds
    rng = np.random.default_rng(derive_seed(seed, "fold-plan"))
    shuffled = [ids[i] for i in rng.permutation(len(ids))]
    folds = [sorted(shuffled[i * per:(i + 1) * per]) for i in range(n_folds)]
    all_sorted = sorted(ids)
    base = [[s for s in all_sorted if s not in set(f)] for f in folds]
    return FoldPlan(n_folds=n_folds, seed=seed, folds=folds, base_subjects=base)


@dataclass
class Standardizer:
    """Per-feature mean/std fitted on present values of the base subjects."""

    mean: np.ndarray  # float64 [F]
    std: np.ndarray   # float64 [F], floored at STD_FLOOR

    def to_json_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=np.float64),
                   np.asarray(d["std"], dtype=np.float64))

    def save(self, path: str) -> None:
        from .util import atomic_write_json
        atomic_write_json(path, self.to_json_dict())

    @classmethod
    def load(cls, path: str) -> "Standardizer":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def fit_standardizer(records: list[SubjectRecord]) -> Standardizer:
    """Population mean/std per feature over present values only.

    Features with no present value get mean 0 / std 1; stds are floored at
    STD_FLOOR so constant columns standardize to exactly 0.
    """
    if not records:
        raise ConfigError("cannot fit a standardizer on zero records")
    x = np.concatenate([r.features for r in records]).astype(np.float64)
    present = ~np.isnan(x)
    count = present.sum(axis=0)
    safe = np.where(present, x, 0.0)
    total = safe.sum(axis=0)
    mean = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    sq = np.where(present, (x - mean) ** 2, 0.0).sum(axis=0)
    var = np.divide(sq, count, out=np.ones_like(sq), where=count > 0)
    std = np.where(count > 0, np.maximum(np.sqrt(var), STD_FLOOR), 1.0)
    return Standardizer(mean=mean, std=std)


def apply_standardizer(record: SubjectRecord, standardizer: Standardizer) -> SubjectRecord:
    """(x - mean) / std, then missing features -> 0."""
    if record.features.shape[1] != standardizer.mean.shape[0]:
        raise ConfigError(
            f"standardizer has {standardizer.mean.shape[0]} features, "
            f"record has {record.features.shape[1]}")
    z = (record.features.astype(np.float64) - standardizer.mean) / standardizer.std
    z = np.nan_to_num(z, nan=0.0).astype(np.float32)
    return SubjectRecord(
        subject_id=record.subject_id,
        timestamps=record.timestamps,
        features=z,
        labels=record.labels,
        feature_names=record.feature_names,
        label_names=record.label_names,
    )


@dataclass
class Window:
    """A fixed-length model input, zero-padded past its true length.

    label_mask is 0 where the label was missing or the position is padding;
    padded positions also have pad_mask 0 and zero features/targets.
    """

    subject_id: str
    features: np.ndarray    # float32 [P, F]
    targets: np.ndarray     # float32 [P, L] in {0, 1}
    label_mask: np.ndarray  # float32 [P, L] in {0, 1}
    pad_mask: np.ndarray    # float32 [P] in {0, 1}

    @property
    def true_length(self) -> int:
        return int(self.pad_mask.sum())


def make_windows(record: SubjectRecord, n_positions: int) -> list[Window]:
    """Cut a record into non-overlapping windows of n_positions minutes.

    A gap greater than GAP_FACTOR x the median sampling interval starts a
    new chunk; each chunk is sliced into windows, the final short window is
    zero-padded. Concatenating the unpadded positions of all windows in
    order reproduces the record's rows.
    """
    if n_positions < 1:
        raise ConfigError(f"n_positions must be >= 1, got {n_positions}")
    n = record.n_minutes
    if n == 0:
        return []
    if n > 1:
        gaps = np.diff(record.timestamps)
        threshold = GAP_FACTOR * float(np.median(gaps))
        breaks = np.flatnonzero(gaps > threshold) + 1
    else:
        breaks = np.array([], dtype=np.int64)
    starts = [0, *breaks.tolist(), n]

    n_feat = record.features.shape[1]
    n_lab = record.labels.shape[1]
    windows: list[Window] = []
    for c0, c1 in zip(starts[:-1], starts[1:]):
        for w0 in range(c0, c1, n_positions):
            w1 = min(w0 + n_positions, c1)
            length = w1 - w0
            feats = np.zeros((n_positions, n_feat), dtype=np.float32)
            targets = np.zeros((n_positions, n_lab), dtype=np.float32)
            mask = np.zeros((n_positions, n_lab), dtype=np.float32)
            pad = np.zeros(n_positions, dtype=np.float32)
            feats[:length] = np.nan_to_num(record.features[w0:w1], nan=0.0)
            raw = record.labels[w0:w1]
            present = ~np.isnan(raw)
            targets[:length] = np.where(present, raw, 0.0)
            mask[:length] = present.astype(np.float32)
            pad[:length] = 1.0
            windows.append(Window(record.subject_id, feats, targets, mask, pad))
    return windows


def batch_arrays(windows: list[Window]):
    """Stack windows into (x [B,P,F], pad [B,P], targets [B,P,L], mask [B,P,L])."""
    x = np.stack([w.features for w in windows])
    pad = np.stack([w.pad_mask for w in windows])
    targets = np.stack([w.targets for w in windows])
    mask = np.stack([w.label_mask for w in windows])
    return x, pad, targets, mask


def split_train_test(
    windows: list[Window], ratio: float = 0.8, seed: int = 0
) -> tuple[list[Window], list[Window]]:
    """Seeded per-subject random split at window granularity.

    Each subject keeps round(ratio * n) windows for training; both halves
    stay in chronological order. Subjects with fewer than two windows put
    everything in train and emit a SplitWarning.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    by_subject: dict[str, list[int]] = {}
    for i, w in enumerate(windows):
        by_subject.setdefault(w.subject_id, []).append(i)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for sid in sorted(by_subject):
        idx = by_subject[sid]
        if len(idx) < 2:
            warnings.warn(f"subject {sid} has {len(idx)} window(s); all go to train",
                          SplitWarning, stacklevel=2)
            train_idx.extend(idx)
            continue
        rng = np.random.default_rng(derive_seed(seed, "split", sid))
        perm = rng.permutation(len(idx))
        n_train = int(round(ratio * len(idx)))
        n_train = min(max(n_train, 1), len(idx) - 1)
        chosen = sorted(perm[:n_train])
        rest = sorted(perm[n_train:])
        train_idx.extend(idx[j] for j in chosen)
        test_idx.extend(idx[j] for j in rest)
    return [windows[i] for i in train_idx], [windows[i] for i in test_idx]


def carve_validation(
    train_windows: list[Window], frac: float = 0.1
) -> tuple[list[Window], list[Window]]:
    """Hold out the last ``frac`` of each subject's train windows for scoring."""
    if not 0.0 < frac < 1.0:
        raise ConfigError(f"validation fraction must be in (0, 1), got {frac}")
    by_subject: dict[str, list[int]] = {}
    for i, w in enumerate(train_windows):
        by_subject.setdefault(w.subject_id, []).append(i)
    keep_idx: list[int] = []
    val_idx: list[int] = []
    for sid in sorted(by_subject):
        idx = by_subject[sid]
        if len(idx) < 2:
            keep_idx.extend(idx)
            continue
        n_val = max(1, int(round(frac * len(idx))))
        keep_idx.extend(idx[:-n_val])
        val_idx.extend(idx[-n_val:])
    return ([train_windows[i] for i in sorted(keep_idx)],
            [train_windows[i] for i in sorted(val_idx)])


@dataclass
class SyntheticSpec:
    """Knobs for the non-IID synthetic generator."""

    n_subjects: int = 60
    minutes_per_subject: int = 240
    n_features: int = EXTRASENSORY_FEATURES
    n_labels: int = EXTRASENSORY_LABELS
    alpha: float = 0.2
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("n_subjects", "minutes_per_subject", "n_features", "n_labels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.alpha <= 0.0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.noise_std < 0.0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")


AR_COEF = 0.5
AR_STD = 0.1
ACTIVATION_RATE = 0.3
ACTIVATION_CAP = 0.9
_BASE_TIMESTAMP = 1_400_000_000


def gen_synthetic(spec: SyntheticSpec) -> list[SubjectRecord]:
    """Per-subject Dirichlet(alpha) label priors over shared label prototypes.

    Each label owns a global N(0,1) prototype vector. A minute's features
    are the sum of its active labels' prototypes plus an AR(1) drift
    (coefficient AR_COEF, innovation std AR_STD) plus white noise of
    spec.noise_std. Label l fires with probability
    min(ACTIVATION_CAP, n_labels * prior_l * ACTIVATION_RATE), so small
    alpha concentrates each subject on a few labels.
    """
    proto_rng = np.random.default_rng(derive_seed(spec.seed, "prototypes"))
    prototypes = proto_rng.normal(0.0, 1.0, size=(spec.n_labels, spec.n_features))
    feature_names = [f"f{i:03d}" for i in range(spec.n_features)]
    label_names = [f"label:SYN_{i:02d}" for i in range(spec.n_labels)]

    records = []
    minutes = spec.minutes_per_subject
    for s in range(spec.n_subjects):
        rng = np.random.default_rng(derive_seed(spec.seed, "subject", s))
        prior = rng.dirichlet(np.full(spec.n_labels, spec.alpha))
        p_active = np.minimum(ACTIVATION_CAP, spec.n_labels * prior * ACTIVATION_RATE)
        labels = (rng.random((minutes, spec.n_labels)) < p_active).astype(np.float32)

        innovations = rng.normal(0.0, AR_STD, size=(minutes, spec.n_features))
        ar = np.zeros((minutes, spec.n_features))
        drift = np.zeros(spec.n_features)
        for t in range(minutes):
            drift = AR_COEF * drift + innovations[t]
            ar[t] = drift
        feats = labels @ prototypes + ar
        if spec.noise_std > 0.0:
            feats = feats + rng.normal(0.0, spec.noise_std, size=feats.shape)

        records.append(SubjectRecord(
            subject_id=f"synth-{s:03d}",
            timestamps=_BASE_TIMESTAMP + 60 * np.arange(minutes, dtype=np.int64),
            features=feats.astype(np.float32),
            labels=labels,
            feature_names=feature_names,
            label_names=label_names,
        ))
    return records
