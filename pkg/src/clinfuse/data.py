"""Dataset handling: synthetic generation, disk I/O, preprocessing, folds.

A dataset is a list of patients, each carrying one clinical attribute vector,
one or more image slices, and a binary label. On disk that is a clinical CSV
(``patient_id,label,attr_...``) plus one MMT1 file per slice named
``<patient_id>_<slice>.mmt``; the synthetic generator writes the exact same
two formats.

The synthetic construction plants three separable signals so that richer
model variants have strictly more to work with:

* an image-only blob whose intensity tracks the label,
* label-shifted clinical attributes that never appear in the image,
* a cross-modal nuisance: one latent draw per patient that adds intensity to
  the same blob region and is exposed, noisily, through one clinical
  attribute. The latent is label-independent, so it carries no class
  information on its own; knowing it (from the clinical side) is purely a
  way to denoise the image reading.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import tensor_io

CLINICAL_SIGNAL_ATTRS = (0, 1)  # label-shifted attributes
SHARED_ATTR = 2                 # exposes the cross-modal latent


class DatasetError(ValueError):
    """Malformed dataset input or an impossible request."""


@dataclass
class PatientRecord:
    patient_id: str
    label: int
    clinical: np.ndarray        # (d_clin,)
    images: list                # each (1, S, S)


@dataclass
class DatasetMeta:
    d_clin: int
    image_size: int
    class_names: tuple = ("negative", "positive")


@dataclass
class NormalizationStats:
    """Per-attribute standardization and global intensity range, computed
    from training folds only."""

    clinical_mean: np.ndarray
    clinical_std: np.ndarray
    intensity_min: float
    intensity_max: float


@dataclass
class Dataset:
    records: list
    meta: DatasetMeta
    stats: Optional[NormalizationStats] = None  # set by preprocess

    def __post_init__(self):
        ids = [r.patient_id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DatasetError(f"duplicate patient ids: {dupes}")

    def record_by_id(self, patient_id: str) -> PatientRecord:
        for r in self.records:
            if r.patient_id == patient_id:
                return r
        raise KeyError(patient_id)

    def labels_by_id(self) -> dict:
        return {r.patient_id: r.label for r in self.records}


@dataclass
class FoldAssignment:
    folds: list  # k lists of patient ids

    @property
    def k(self) -> int:
        return len(self.folds)

    def test_ids(self, i: int) -> list:
        return list(self.folds[i])

    def train_ids(self, i: int) -> list:
        out = []
        for j, fold in enumerate(self.folds):
            if j != i:
                out.extend(fold)
        return out


@dataclass
class SynthSpec:
    n_patients: int = 1000
    slices_per_patient: int = 1
    d_clin: int = 12
    image_size: int = 17
    image_signal: float = 0.5    # label-driven blob intensity
    clinical_signal: float = 0.4  # label shift on the clinical-only attributes
    shared_signal: float = 0.8   # latent-driven intensity on the same blob
    noise_sigma: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if self.n_patients < 1 or self.slices_per_patient < 1:
            raise DatasetError("need at least one patient and one slice")
        if self.d_clin <= SHARED_ATTR:
            raise DatasetError(f"d_clin must be > {SHARED_ATTR}")
        if self.image_size < 4:
            raise DatasetError("image_size too small for the signal region")
        if min(self.image_signal, self.clinical_signal, self.shared_signal) < 0:
            raise DatasetError("signal strengths must be >= 0")
        if self.noise_sigma <= 0:
            raise DatasetError("noise_sigma must be positive")


def signal_region(image_size: int) -> tuple:
    """(row_slice, col_slice) of the square blob carrying both image signals."""
    lo = image_size // 4
    side = max(2, image_size // 3)
    hi = min(image_size, lo + side)
    return slice(lo, hi), slice(lo, hi)


def synth_generate(spec: SynthSpec) -> Dataset:
    """Deterministic synthetic dataset for the planted-signal construction."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    rows, cols = signal_region(spec.image_size)
    records = []
    for p in range(spec.n_patients):
        label = int(rng.integers(0, 2))
        latent = rng.normal()
        clinical = rng.normal(0.0, spec.noise_sigma, spec.d_clin)
        for a in CLINICAL_SIGNAL_ATTRS:
            clinical[a] += label * spec.clinical_signal
        clinical[SHARED_ATTR] += latent
        images = []
        for _ in range(spec.slices_per_patient):
            img = rng.normal(0.0, spec.noise_sigma,
                             (spec.image_size, spec.image_size))
            img[rows, cols] += (label * spec.image_signal
                                + latent * spec.shared_signal)
            images.append(img[None, :, :])
        records.append(PatientRecord(f"p{p:05d}", label, clinical, images))
    return Dataset(records, DatasetMeta(spec.d_clin, spec.image_size))


# ---------------------------------------------------------------------------
# disk I/O
# ---------------------------------------------------------------------------


def save_dataset(dataset: Dataset, out_dir) -> None:
    """Write clinical.csv plus images/<patient>_<slice>.mmt under out_dir."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "clinical.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "label"]
                        + [f"attr_{i:03d}" for i in range(dataset.meta.d_clin)])
        for r in dataset.records:
            writer.writerow([r.patient_id, r.label]
                            + [repr(float(v)) for v in r.clinical])
    for r in dataset.records:
        for s, img in enumerate(r.images):
            tensor_io.save(os.path.join(img_dir, f"{r.patient_id}_{s}.mmt"), img)


def _parse_clinical_csv(csv_path):
    with open(csv_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{csv_path}: empty file") from None
        if len(header) < 3 or header[0] != "patient_id" or header[1] != "label":
            raise DatasetError(
                f"{csv_path}: header must be patient_id,label,<attributes...>")
        attr_names = header[2:]
        rows = []
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(
                    f"{csv_path}: row {lineno} has {len(row)} fields, "
                    f"expected {len(header)}")
            pid = row[0]
            if not pid:
                raise DatasetError(f"{csv_path}: row {lineno} has empty patient_id")
            if pid in seen:
                raise DatasetError(f"{csv_path}: duplicate patient_id {pid!r} "
                                   f"at row {lineno}")
            seen.add(pid)
            try:
                label = int(row[1])
            except ValueError:
                raise DatasetError(
                    f"{csv_path}: row {lineno}: label {row[1]!r} is not an "
                    f"integer") from None
            if label not in (0, 1):
                raise DatasetError(
                    f"{csv_path}: row {lineno}: label must be 0 or 1, got {label}")
            values = np.empty(len(attr_names))
            for ci, cell in enumerate(row[2:]):
                try:
                    values[ci] = float(cell)
                except ValueError:
                    raise DatasetError(
                        f"{csv_path}: row {lineno}, column "
                        f"{attr_names[ci]!r}: cannot parse {cell!r} as a "
                        f"number") from None
            if not np.isfinite(values).all():
                raise DatasetError(
                    f"{csv_path}: row {lineno}: non-finite attribute value")
            rows.append((pid, label, values))
    return attr_names, rows


def load_dataset(clinical_csv, image_dir) -> Dataset:
    """Strict join of the clinical CSV against the image directory.

    Every CSV row must have at least one image file and every image file
    must have a CSV row; anything unmatched fails the load by name.
    """
    attr_names, rows = _parse_clinical_csv(clinical_csv)

    by_patient: dict = {}
    for fname in sorted(os.listdir(image_dir)):
        if not fname.endswith(".mmt"):
            continue
        stem = fname[:-4]
        pid, _, idx_str = stem.rpartition("_")
        if not pid or not idx_str.isdigit():
            raise DatasetError(
                f"{image_dir}/{fname}: expected <patient_id>_<slice>.mmt")
        by_patient.setdefault(pid, []).append((int(idx_str), fname))

    csv_ids = {pid for pid, _, _ in rows}
    missing_images = sorted(csv_ids - set(by_patient))
    if missing_images:
        raise DatasetError(f"patients with no image files: {missing_images}")
    orphan_images = sorted(set(by_patient) - csv_ids)
    if orphan_images:
        raise DatasetError(f"image files with no CSV row: {orphan_images}")

    size = None
    records = []
    for pid, label, values in rows:
        images = []
        for _, fname in sorted(by_patient[pid]):
            arr = tensor_io.load(os.path.join(image_dir, fname))
            if arr.ndim != 3 or arr.shape[0] != 1 or arr.shape[1] != arr.shape[2]:
                raise DatasetError(
                    f"{image_dir}/{fname}: expected shape (1, S, S), "
                    f"got {arr.shape}")
            if size is None:
                size = arr.shape[1]
            elif arr.shape[1] != size:
                raise DatasetError(
                    f"{image_dir}/{fname}: image size {arr.shape[1]} differs "
                    f"from {size}")
            images.append(arr)
        records.append(PatientRecord(pid, label, values, images))
    return Dataset(records, DatasetMeta(len(attr_names), size))


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def bilinear_resize(img: np.ndarray, size: int) -> np.ndarray:
    """Corner-aligned bilinear interpolation of a square 2-d image."""
    h, w = img.shape
    if (h, w) == (size, size):
        return img.copy()
    if size == 1:
        ys = np.array([(h - 1) / 2.0])
        xs = np.array([(w - 1) / 2.0])
    else:
        ys = np.linspace(0.0, h - 1, size)
        xs = np.linspace(0.0, w - 1, size)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    return (img[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
            + img[np.ix_(y0, x1)] * (1 - fy) * fx
            + img[np.ix_(y1, x0)] * fy * (1 - fx)
            + img[np.ix_(y1, x1)] * fy * fx)


def compute_normalization_stats(dataset: Dataset, patient_ids) -> NormalizationStats:
    """Attribute mean/std and intensity range over the given patients only."""
    wanted = set(patient_ids)
    recs = [r for r in dataset.records if r.patient_id in wanted]
    if not recs:
        raise DatasetError("no records selected for normalization stats")
    clin = np.stack([r.clinical for r in recs])
    pixels_min = min(float(img.min()) for r in recs for img in r.images)
    pixels_max = max(float(img.max()) for r in recs for img in r.images)
    return NormalizationStats(
        clinical_mean=clin.mean(axis=0),
        clinical_std=clin.std(axis=0),
        intensity_min=pixels_min,
        intensity_max=pixels_max,
    )


def preprocess(dataset: Dataset, stats: NormalizationStats,
               image_size: int) -> Dataset:
    """Standardize attributes, resize slices, scale intensity into [0, 1].

    Zero-variance attributes map to 0. Intensity uses the training-fold
    range; out-of-range values on held-out patients are clipped.
    """
    std = stats.clinical_std
    span = stats.intensity_max - stats.intensity_min
    records = []
    for r in dataset.records:
        clinical = np.where(std > 0, (r.clinical - stats.clinical_mean)
                            / np.where(std > 0, std, 1.0), 0.0)
        images = []
        for img in r.images:
            resized = bilinear_resize(img[0], image_size)
            if span > 0:
                scaled = np.clip((resized - stats.intensity_min) / span, 0.0, 1.0)
            else:
                scaled = np.zeros_like(resized)
            images.append(scaled[None, :, :])
        records.append(PatientRecord(r.patient_id, r.label, clinical, images))
    meta = replace(dataset.meta, image_size=image_size)
    return Dataset(records, meta, stats=stats)


# ---------------------------------------------------------------------------
# patient-level stratified folds
# ---------------------------------------------------------------------------


def kfold_split(dataset: Dataset, k: int = 5, seed: int = 0) -> FoldAssignment:
    """Stratified patient-level folds: disjoint, covering, per-fold class
    counts within one patient of n_class/k. Requires >= k patients per class."""
    if k < 2:
        raise DatasetError("k must be >= 2")
    by_class: dict = {}
    for r in dataset.records:
        by_class.setdefault(r.label, []).append(r.patient_id)
    for label, ids in sorted(by_class.items()):
        if len(ids) < k:
            raise DatasetError(
                f"class {label} has only {len(ids)} patients, need >= {k}")

    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    cursor = 0  # continues across classes so fold sizes stay within one
    for label in sorted(by_class):
        ids = sorted(by_class[label])
        rng.shuffle(ids)
        for pid in ids:
            folds[cursor % k].append(pid)
            cursor += 1
    return FoldAssignment(folds)


# ---------------------------------------------------------------------------
# flattening for the training loop
# ---------------------------------------------------------------------------


@dataclass
class SliceArrays:
    """Slice-level arrays: one sample per image slice."""

    images: np.ndarray    # [N, 1, S, S]
    clinical: np.ndarray  # [N, D]
    labels: np.ndarray    # [N]
    patients: list        # patient id per slice


def slice_arrays(dataset: Dataset, patient_ids=None) -> SliceArrays:
    if patient_ids is None:
        recs = dataset.records
    else:
        wanted = set(patient_ids)
        recs = [r for r in dataset.records if r.patient_id in wanted]
    if not recs:
        raise DatasetError("no records selected")
    images, clinical, labels, patients = [], [], [], []
    for r in recs:
        for img in r.images:
            images.append(img)
            clinical.append(r.clinical)
            labels.append(r.label)
            patients.append(r.patient_id)
    return SliceArrays(np.stack(images), np.stack(clinical),
                       np.asarray(labels, dtype=np.int64), patients)
