"""Dataset manifests, ingestion, combination presets, and image preprocessing.

Heterogeneous dataset layouts (CSV ground truth or benign/malignant folders)
are unified into a DatasetManifest: an ordered list of (image path, label,
source code) records. Manifests serialize to CSV with header
``image_path,label,source`` (UTF-8, LF).

Records also carry an in-memory ``augment_seed``: 0 for an original sample,
1..n for oversampled duplicates created by class balancing. The serialized
form has no seed column — duplicates of the same (path, source) pair are
re-numbered by occurrence order on load, which makes the round trip exact.

Preprocessing decodes JPEG/PNG, scales to [0, 1] by /255, bilinearly resizes
to target x target (in float64, by the exact formula mirrored in the browser
build), and emits a channels-first float32 tensor.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError
from .tensor_core import Tensor

logger = logging.getLogger(__name__)

LABELS = ("benign", "malignant")
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")


@dataclass(frozen=True)
class SampleRecord:
    """One labeled image. source_dataset is a short code (the shipped presets
    use a-k); augment_seed distinguishes oversampled duplicates."""

    image_path: str
    label: str
    source_dataset: str
    augment_seed: int = 0

    def __post_init__(self):
        if not self.image_path:
            raise DataError("record has an empty image path")
        if self.label not in LABELS:
            raise DataError(f"label must be one of {LABELS}, got {self.label!r}")
        if not self.source_dataset:
            raise DataError("record has an empty source code")
        if self.augment_seed < 0:
            raise DataError("augment_seed must be >= 0")

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.image_path, self.source_dataset, self.augment_seed)


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[SampleRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen: set[tuple[str, str, int]] = set()
        for record in self.records:
            if record.key in seen:
                raise DataError(
                    f"duplicate record for {record.image_path!r} from source "
                    f"{record.source_dataset!r} (augment seed {record.augment_seed})"
                )
            seen.add(record.key)

    @property
    def counts(self) -> dict[str, int]:
        out = {label: 0 for label in LABELS}
        for record in self.records:
            out[record.label] += 1
        return out

    @property
    def provenance(self) -> tuple[str, ...]:
        seen: list[str] = []
        for record in self.records:
            if record.source_dataset not in seen:
                seen.append(record.source_dataset)
        return tuple(seen)

    def __len__(self) -> int:
        return len(self.records)


class RejectedRow(NamedTuple):
    row_number: int  # 1-based, counting data rows (header excluded)
    image: str
    raw_label: str
    reason: str


class IngestResult(NamedTuple):
    """Accepted records plus the rows that could not be mapped; accepted +
    rejected always equals the number of input rows."""

    manifest: DatasetManifest
    rejects: tuple[RejectedRow, ...]


def _load_packaged_json(name: str):
    text = resources.files("melad.configs").joinpath(name).read_text("utf-8")
    return json.loads(text)


def default_aliases() -> dict[str, str]:
    """Case-insensitive raw-label -> benign|malignant map (keys lowercased)."""
    return {k.lower(): v for k, v in _load_packaged_json("label-aliases.json").items()}


def load_alias_table(path) -> dict[str, str]:
    try:
        with open(path, encoding="utf-8") as fh:
            table = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"alias table not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"alias table {path} is not valid JSON: {exc}")
    if not isinstance(table, dict):
        raise DataError(f"alias table {path} must be a JSON object")
    out = {}
    for raw, label in table.items():
        if label not in LABELS:
            raise DataError(
                f"alias table {path} maps {raw!r} to {label!r}; "
                f"targets must be one of {LABELS}"
            )
        out[str(raw).lower()] = label
    return out


def _normalize_aliases(aliases: Mapping[str, str] | None) -> dict[str, str]:
    if aliases is None:
        return default_aliases()
    return {str(k).strip().lower(): v for k, v in aliases.items()}


def map_label(raw: str, aliases: Mapping[str, str] | None = None) -> str | None:
    """Resolve a raw label string case-insensitively; None when unmappable."""
    return _normalize_aliases(aliases).get(str(raw).strip().lower())


def ingest_csv(
    csv_path,
    image_root=None,
    source: str = "local",
    image_column: str = "image",
    label_column: str = "label",
    aliases: Mapping[str, str] | None = None,
) -> IngestResult:
    """Read one CSV-labeled dataset. Rows with unmappable labels, empty
    paths, or duplicate (path, source) pairs land in the rejects report."""
    table = _normalize_aliases(aliases)
    try:
        fh = open(csv_path, encoding="utf-8-sig", newline="")
    except FileNotFoundError:
        raise DataError(f"dataset CSV not found: {csv_path}") from None
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"dataset CSV {csv_path} is empty")
        missing = [c for c in (image_column, label_column)
                   if c not in reader.fieldnames]
        if missing:
            raise DataError(
                f"dataset CSV {csv_path} lacks column(s) {missing}; "
                f"found {reader.fieldnames}"
            )
        records: list[SampleRecord] = []
        rejects: list[RejectedRow] = []
        seen: set[tuple[str, str]] = set()
        for row_number, row in enumerate(reader, start=1):
            image = (row.get(image_column) or "").strip()
            raw_label = (row.get(label_column) or "").strip()
            if not image:
                rejects.append(RejectedRow(row_number, image, raw_label,
                                           "empty image path"))
                continue
            label = table.get(raw_label.lower())
            if label is None:
                rejects.append(RejectedRow(row_number, image, raw_label,
                                           f"unmappable label {raw_label!r}"))
                continue
            path = os.path.join(str(image_root), image) if image_root else image
            if (path, source) in seen:
                rejects.append(RejectedRow(row_number, image, raw_label,
                                           "duplicate image path"))
                continue
            seen.add((path, source))
            records.append(SampleRecord(path, label, source))
    if not records:
        raise DataError(
            f"dataset CSV {csv_path} yielded zero valid rows "
            f"({len(rejects)} rejected)"
        )
    return IngestResult(DatasetManifest(tuple(records)), tuple(rejects))


def ingest_folders(root, source: str = "local") -> DatasetManifest:
    """Read a folder-labeled dataset: root/benign/ and root/malignant/
    (case-insensitive) holding JPEG/PNG files."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root is not a directory: {root}")
    class_dirs: dict[str, Path] = {}
    for entry in sorted(root.iterdir()):
        if not entry.is_dir():
            continue
        name = entry.name.lower()
        if name in LABELS:
            class_dirs[name] = entry
        else:
            logger.warning("ignoring unrelated directory %s", entry)
    if not class_dirs:
        raise DataError(
            f"{root} has neither a benign/ nor a malignant/ subdirectory"
        )
    records: list[SampleRecord] = []
    for label in LABELS:
        directory = class_dirs.get(label)
        if directory is None:
            logger.warning("%s has no %s/ subdirectory; count is 0", root, label)
            continue
        files = sorted(
            p for p in directory.iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not files:
            logger.warning("%s contains no image files; %s count is 0",
                           directory, label)
        records.extend(SampleRecord(str(p), label, source) for p in files)
    if not records:
        raise DataError(f"{root} contains no image files")
    return DatasetManifest(tuple(records))


def combine(
    manifests: Mapping[str, DatasetManifest], combo: Sequence[str]
) -> DatasetManifest:
    """Concatenate the named manifests in combo order. Every record is tagged
    with its map code so provenance follows the combination string."""
    if not combo:
        raise DataError("combination is empty")
    records: list[SampleRecord] = []
    for code in combo:
        if code not in manifests:
            raise DataError(
                f"unknown source code {code!r}; available: "
                f"{', '.join(sorted(manifests))}"
            )
        for record in manifests[code].records:
            if record.source_dataset != code:
                record = replace(record, source_dataset=code)
            records.append(record)
    return DatasetManifest(tuple(records))


def combination_presets() -> dict[str, tuple[str, ...]]:
    """Shipped named source combinations, mapping name -> source code list.

    Covers every multi-source trainset string the benchmark reports are
    expected to carry."""
    raw = _load_packaged_json("combinations.json")
    return {name: tuple(codes) for name, codes in raw.items()}


def dataset_codes() -> dict[str, str]:
    """Short source code -> dataset name for the shipped presets."""
    return dict(_load_packaged_json("dataset-codes.json"))


def parse_combo(text: str) -> tuple[str, ...]:
    """Split a combination string like "a+b+c" into source codes."""
    codes = tuple(part.strip() for part in text.split("+") if part.strip())
    if not codes:
        raise DataError(f"combination string {text!r} contains no codes")
    return codes


MANIFEST_HEADER = ("image_path", "label", "source")


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for record in manifest.records:
            writer.writerow((record.image_path, record.label,
                             record.source_dataset))


def load_manifest(path) -> DatasetManifest:
    """Read a manifest CSV. Repeated (path, source) rows are oversampled
    duplicates; they get augment seeds 0, 1, 2, ... by occurrence order."""
    try:
        fh = open(path, encoding="utf-8-sig", newline="")
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"manifest {path} is empty")
        if tuple(header) != MANIFEST_HEADER:
            raise DataError(
                f"manifest {path} has header {header}, "
                f"expected {list(MANIFEST_HEADER)}"
            )
        records: list[SampleRecord] = []
        occurrences: dict[tuple[str, str], int] = {}
        for row_number, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(
                    f"manifest {path} line {row_number}: expected 3 fields, "
                    f"got {len(row)}"
                )
            image_path, label, source = row
            if label not in LABELS:
                raise DataError(
                    f"manifest {path} line {row_number}: unknown label {label!r}"
                )
            seed = occurrences.get((image_path, source), 0)
            occurrences[(image_path, source)] = seed + 1
            records.append(SampleRecord(image_path, label, source, seed))
    if not records:
        raise DataError(f"manifest {path} has no records")
    return DatasetManifest(tuple(records))


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centers, in float64.

    Source coordinate for output index i is (i + 0.5) * (in / out) - 0.5,
    clipped to the valid range; edge pixels clamp. The browser build computes
    the identical formula so both paths see the same pixels.
    """
    src = np.asarray(image, dtype=np.float64)
    squeeze = src.ndim == 2
    if squeeze:
        src = src[:, :, None]
    if src.ndim != 3:
        raise ValueError(f"expected (H, W) or (H, W, C) image, got {src.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {out_h}x{out_w}")
    in_h, in_w = src.shape[:2]

    ys = np.clip((np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5, 0.0, in_h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]

    p00 = src[np.ix_(y0, x0)]
    p01 = src[np.ix_(y0, x1)]
    p10 = src[np.ix_(y1, x0)]
    p11 = src[np.ix_(y1, x1)]
    out = (p00 * (1.0 - wy) * (1.0 - wx)
           + p01 * (1.0 - wy) * wx
           + p10 * wy * (1.0 - wx)
           + p11 * wy * wx)
    return out[:, :, 0] if squeeze else out


def preprocess(image_path, target_size: int = 150) -> Tensor:
    """Decode an image file into a model-ready (3, target, target) tensor.

    Pixels are scaled to [0, 1] before resizing; interpolation runs in
    float64 and the result is cast to float32 channels-first. Grayscale
    images are replicated to three channels; alpha is dropped.
    """
    if target_size < 1:
        raise ValueError(f"target_size must be >= 1, got {target_size}")
    try:
        with Image.open(image_path) as img:
            rgb = img.convert("RGB")
    except FileNotFoundError:
        raise DataError(f"image not found: {image_path}") from None
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image {image_path}: {exc}") from exc
    arr = np.asarray(rgb, dtype=np.float64) / 255.0
    resized = bilinear_resize(arr, target_size, target_size)
    chw = np.ascontiguousarray(resized.transpose(2, 0, 1).astype(np.float32))
    return Tensor(chw)
