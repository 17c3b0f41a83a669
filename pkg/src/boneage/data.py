"""Manifest ingestion, dataset statistics, splits and synthetic datasets.

The manifest CSV follows the public RSNA release: a header ``id,boneage,male``
with one row per radiograph, ``boneage`` in whole months and ``male`` a
``True``/``False`` flag. Images live in a flat directory as ``<id>.png``.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import DuplicateId, InsufficientSamples, MalformedRow, ManifestError, MissingImage

MIN_AGE_MONTHS = 1
MAX_AGE_MONTHS = 288
MANIFEST_COLUMNS = ("id", "boneage", "male")
IMAGE_SUFFIX = ".png"

_TRUE = {"true", "1", "t", "yes"}
_FALSE = {"false", "0", "f", "no"}


@dataclass(frozen=True)
class SampleRecord:
    id: str
    image_path: Path
    bone_age: int
    male: bool


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[SampleRecord, ...]
    source: str

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.id in seen:
                raise DuplicateId(rec.id)
            seen.add(rec.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[SampleRecord]:
        return iter(self.records)

    def by_id(self) -> dict[str, SampleRecord]:
        return {r.id: r for r in self.records}

    def subset(self, ids: Sequence[str]) -> list[SampleRecord]:
        """Records for ``ids``, in the order given."""
        lookup = self.by_id()
        return [lookup[i] for i in ids]


@dataclass(frozen=True)
class DatasetStats:
    total: int
    male_count: int
    female_count: int
    bin_width: int
    age_histogram: dict[int, int]
    per_gender_histograms: dict[str, dict[int, int]]
    min_age: int
    max_age: int
    mean_age: float
    modal_bin: int | None

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "male_count": self.male_count,
            "female_count": self.female_count,
            "min": self.min_age,
            "max": self.max_age,
            "mean": self.mean_age,
            "bin_width": self.bin_width,
            "modal_bin": self.modal_bin,
            "histogram": [{"bin": b, "count": c} for b, c in sorted(self.age_histogram.items())],
            "per_gender_histograms": {
                g: [{"bin": b, "count": c} for b, c in sorted(h.items())]
                for g, h in self.per_gender_histograms.items()
            },
        }

    @classmethod
    def from_json(cls, payload: Mapping) -> "DatasetStats":
        def hist(rows):
            return {int(r["bin"]): int(r["count"]) for r in rows}

        return cls(
            total=int(payload["total"]),
            male_count=int(payload["male_count"]),
            female_count=int(payload["female_count"]),
            bin_width=int(payload.get("bin_width", 12)),
            age_histogram=hist(payload["histogram"]),
            per_gender_histograms={
                g: hist(rows) for g, rows in payload.get("per_gender_histograms", {}).items()
            },
            min_age=int(payload["min"]),
            max_age=int(payload["max"]),
            mean_age=float(payload["mean"]),
            modal_bin=payload.get("modal_bin"),
        )


@dataclass(frozen=True)
class SplitAssignment:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int
    sizes: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "sizes": dict(self.sizes),
            "train": list(self.train_ids),
            "val": list(self.val_ids),
            "test": list(self.test_ids),
        }

    @classmethod
    def from_json(cls, payload: Mapping) -> "SplitAssignment":
        return cls(
            train_ids=tuple(payload["train"]),
            val_ids=tuple(payload["val"]),
            test_ids=tuple(payload["test"]),
            seed=int(payload["seed"]),
            sizes={k: int(v) for k, v in payload["sizes"].items()},
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


DEFAULT_SPLIT_SIZES = {"train": 6000, "val": 2000, "test": 200}


def _parse_age(text: str, line: int) -> int:
    try:
        value = float(text)
    except ValueError:
        raise MalformedRow(line, f"bone age {text!r} is not a number") from None
    if not np.isfinite(value) or value != int(value):
        raise MalformedRow(line, f"bone age {text!r} is not a whole number of months")
    age = int(value)
    if not MIN_AGE_MONTHS <= age <= MAX_AGE_MONTHS:
        raise MalformedRow(line, f"bone age {age} outside [{MIN_AGE_MONTHS}, {MAX_AGE_MONTHS}]")
    return age


def _parse_male(text: str, line: int) -> bool:
    key = text.strip().lower()
    if key in _TRUE:
        return True
    if key in _FALSE:
        return False
    raise MalformedRow(line, f"gender flag {text!r} is not True/False")


def load_manifest(csv_path, image_dir, strict: bool = True) -> DatasetManifest:
    """Read an ``id,boneage,male`` CSV into a manifest.

    With ``strict`` every ``<image_dir>/<id>.png`` must exist. Errors name the
    physical CSV line (the header is line 1).
    """
    csv_path = Path(csv_path)
    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise ManifestError(f"image directory does not exist: {image_dir}")

    records: list[SampleRecord] = []
    seen: set[str] = set()
    with csv_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ManifestError(f"{csv_path} is empty (expected header {','.join(MANIFEST_COLUMNS)})")
        header = [h.strip().lstrip("﻿") for h in header]
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise ManifestError(f"{csv_path}: missing header column(s) {missing}")
        col = {name: header.index(name) for name in MANIFEST_COLUMNS}

        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise MalformedRow(line, f"expected {len(header)} fields, got {len(row)}")
            sample_id = row[col["id"]].strip()
            if not sample_id:
                raise MalformedRow(line, "empty id")
            age = _parse_age(row[col["boneage"]].strip(), line)
            male = _parse_male(row[col["male"]], line)
            if sample_id in seen:
                raise DuplicateId(sample_id, line)
            seen.add(sample_id)
            path = image_dir / f"{sample_id}{IMAGE_SUFFIX}"
            if strict and not path.is_file():
                raise MissingImage(sample_id, path)
            records.append(SampleRecord(sample_id, path, age, male))

    return DatasetManifest(tuple(records), source=f"{csv_path}|{image_dir}")


def _histogram(ages, bin_width: int) -> dict[int, int]:
    counts = Counter((a // bin_width) * bin_width for a in ages)
    return dict(sorted(counts.items()))


def compute_stats(manifest: DatasetManifest, bin_width: int = 12) -> DatasetStats:
    if bin_width < 1:
        raise ValueError(f"bin_width must be >= 1, got {bin_width}")
    ages = [r.bone_age for r in manifest.records]
    males = [r.bone_age for r in manifest.records if r.male]
    females = [r.bone_age for r in manifest.records if not r.male]
    hist = _histogram(ages, bin_width)
    modal = None
    if hist:
        top = max(hist.values())
        modal = min(b for b, c in hist.items() if c == top)
    return DatasetStats(
        total=len(ages),
        male_count=len(males),
        female_count=len(females),
        bin_width=bin_width,
        age_histogram=hist,
        per_gender_histograms={
            "male": _histogram(males, bin_width),
            "female": _histogram(females, bin_width),
        },
        min_age=min(ages, default=0),
        max_age=max(ages, default=0),
        mean_age=float(np.mean(ages)) if ages else 0.0,
        modal_bin=modal,
    )


def make_splits(manifest: DatasetManifest, sizes: Mapping[str, int] | None = None, seed: int = 42) -> SplitAssignment:
    """Draw disjoint train/val/test id sets uniformly without replacement."""
    sizes = dict(DEFAULT_SPLIT_SIZES if sizes is None else sizes)
    unknown = set(sizes) - {"train", "val", "test"}
    if unknown:
        raise ValueError(f"unknown split names: {sorted(unknown)}")
    n_train, n_val, n_test = (int(sizes.get(k, 0)) for k in ("train", "val", "test"))
    if min(n_train, n_val, n_test) < 0:
        raise ValueError(f"split sizes must be non-negative: {sizes}")
    requested = n_train + n_val + n_test
    if requested > len(manifest):
        raise InsufficientSamples(
            f"requested {requested} samples ({n_train}/{n_val}/{n_test}) from a manifest of {len(manifest)}"
        )
    order = np.random.default_rng(seed).permutation(len(manifest))
    ids = [manifest.records[i].id for i in order[:requested]]
    return SplitAssignment(
        train_ids=tuple(ids[:n_train]),
        val_ids=tuple(ids[n_train : n_train + n_val]),
        test_ids=tuple(ids[n_train + n_val :]),
        seed=int(seed),
        sizes={"train": n_train, "val": n_val, "test": n_test},
    )


# brightness = SYNTH_OFFSET + SYNTH_SLOPE * age; texture amplitude keeps pixels inside [0, 255]
SYNTH_OFFSET = 16.0
SYNTH_SLOPE = 200.0 / MAX_AGE_MONTHS
SYNTH_TEXTURE = 12.0
SYNTH_SIZE = 64


def synthetic_brightness(age) -> np.ndarray:
    return SYNTH_OFFSET + SYNTH_SLOPE * np.asarray(age, dtype=float)


def _synthetic_image(age: int, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    # a tilted "finger" pattern; mean removed so brightness carries only the age
    phase = rng.uniform(0, 2 * np.pi)
    freq = rng.uniform(2.0, 4.0)
    angle = rng.uniform(-0.3, 0.3)
    texture = np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
    texture -= texture.mean()
    texture *= SYNTH_TEXTURE / max(np.abs(texture).max(), 1e-12)
    pixels = synthetic_brightness(age) + texture
    return np.clip(np.rint(pixels), 0, 255).astype(np.uint8)


def build_synthetic_dataset(out_dir, n: int, seed: int = 0, size: int = SYNTH_SIZE) -> DatasetManifest:
    """Write ``n`` grayscale PNGs whose mean brightness encodes bone age.

    Produces ``<out_dir>/images/<id>.png`` and ``<out_dir>/manifest.csv``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    ages = rng.integers(MIN_AGE_MONTHS, MAX_AGE_MONTHS + 1, size=n)
    males = rng.random(n) < 0.5
    rows = []
    for idx in range(n):
        sample_id = f"syn{idx:05d}"
        pixels = _synthetic_image(int(ages[idx]), rng, size)
        Image.fromarray(pixels).save(image_dir / f"{sample_id}{IMAGE_SUFFIX}")
        rows.append((sample_id, int(ages[idx]), "True" if males[idx] else "False"))

    csv_path = out_dir / "manifest.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)

    manifest = load_manifest(csv_path, image_dir, strict=True)
    return DatasetManifest(manifest.records, source=f"synthetic:{seed}")


def write_manifest(records: Sequence[SampleRecord], csv_path) -> Path:
    csv_path = Path(csv_path)
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow((r.id, r.bone_age, "True" if r.male else "False"))
    return csv_path
