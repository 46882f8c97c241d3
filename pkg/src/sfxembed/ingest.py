"""Corpus manifests, audio conditioning, capped subsets and stratified splits."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import soundfile as sf
from scipy.signal import resample_poly

logger = logging.getLogger(__name__)

TARGET_RATE = 44100
SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.8, 0.1, 0.1)

_REQUIRED_FIELDS = ("dataset_id", "file_path", "class_label")
_OPTIONAL_FIELDS = ("fine_label", "fold", "duration_s")


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifest content."""


class AudioError(ValueError):
    """Raised when an audio file cannot be decoded or is empty."""


@dataclass(frozen=True)
class ManifestEntry:
    dataset_id: str
    file_path: str
    class_label: str
    fine_label: str | None = None
    fold: int | None = None
    duration_s: float | None = None

    def __post_init__(self):
        if not self.dataset_id:
            raise ManifestError("dataset_id must be non-empty")
        if not self.class_label:
            raise ManifestError("class_label must be non-empty")
        if self.fold is not None and self.fold < 1:
            raise ManifestError(f"fold must be >= 1, got {self.fold}")

    @property
    def key(self) -> tuple[str, str]:
        return (self.dataset_id, self.file_path)

    def to_record(self) -> dict:
        rec = {"dataset_id": self.dataset_id, "file_path": self.file_path,
               "class_label": self.class_label}
        for name in _OPTIONAL_FIELDS:
            value = getattr(self, name)
            if value is not None:
                rec[name] = value
        return rec


@dataclass
class Dataset:
    """Entries of one corpus plus its own (sorted) class vocabulary."""

    dataset_id: str
    entries: list[ManifestEntry]
    classes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.classes:
            self.classes = sorted({e.class_label for e in self.entries})
        vocab = set(self.classes)
        for e in self.entries:
            if e.dataset_id != self.dataset_id:
                raise ManifestError(f"entry {e.file_path} belongs to {e.dataset_id}, "
                                    f"not {self.dataset_id}")
            if e.class_label not in vocab:
                raise ManifestError(f"class {e.class_label!r} not in vocabulary of "
                                    f"{self.dataset_id}")

    def __len__(self):
        return len(self.entries)

    @property
    def class_index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.classes)}

    def class_counts(self) -> dict[str, int]:
        counts = Counter(e.class_label for e in self.entries)
        return {c: counts.get(c, 0) for c in self.classes}

    def labels(self, entries: Iterable[ManifestEntry] | None = None) -> np.ndarray:
        idx = self.class_index
        entries = self.entries if entries is None else entries
        return np.array([idx[e.class_label] for e in entries], dtype=np.int64)


@dataclass
class DatasetCollection:
    datasets: dict[str, Dataset] = field(default_factory=dict)
    root: Path | None = None

    def __getitem__(self, dataset_id: str) -> Dataset:
        return self.datasets[dataset_id]

    def __iter__(self):
        return iter(self.datasets.values())

    def __len__(self):
        return len(self.datasets)

    @property
    def dataset_ids(self) -> list[str]:
        return list(self.datasets)

    @property
    def taxonomy(self) -> dict[str, list[str]]:
        return {d.dataset_id: list(d.classes) for d in self}

    def merge(self, other: DatasetCollection) -> DatasetCollection:
        merged = dict(self.datasets)
        for ds_id, ds in other.datasets.items():
            if ds_id in merged:
                raise ManifestError(f"dataset {ds_id!r} defined in more than one manifest")
            merged[ds_id] = ds
        return DatasetCollection(merged, self.root or other.root)

    def resolve(self, entry: ManifestEntry) -> Path:
        path = Path(entry.file_path)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path


def _parse_record(rec: dict, lineno: int) -> ManifestEntry:
    if not isinstance(rec, dict):
        raise ManifestError(f"line {lineno}: expected an object")
    for name in _REQUIRED_FIELDS:
        value = rec.get(name)
        if not isinstance(value, str) or not value:
            raise ManifestError(f"line {lineno}: missing or empty field {name!r}")
    unknown = set(rec) - set(_REQUIRED_FIELDS) - set(_OPTIONAL_FIELDS)
    if unknown:
        logger.warning("line %d: ignoring unknown fields %s", lineno, sorted(unknown))
    fine = rec.get("fine_label")
    if fine is not None and not isinstance(fine, str):
        raise ManifestError(f"line {lineno}: fine_label must be a string")
    fold = rec.get("fold")
    if fold is not None and (isinstance(fold, bool) or not isinstance(fold, int)):
        raise ManifestError(f"line {lineno}: fold must be an integer")
    duration = rec.get("duration_s")
    if duration is not None and (isinstance(duration, bool)
                                 or not isinstance(duration, (int, float))):
        raise ManifestError(f"line {lineno}: duration_s must be a number")
    try:
        return ManifestEntry(rec["dataset_id"], rec["file_path"], rec["class_label"],
                             fine or None, fold,
                             None if duration is None else float(duration))
    except ManifestError as exc:
        raise ManifestError(f"line {lineno}: {exc}") from None


def collect(entries: Iterable[ManifestEntry], root: Path | None = None) -> DatasetCollection:
    """Group entries by dataset, keeping first-seen dataset order."""
    grouped: dict[str, list[ManifestEntry]] = defaultdict(list)
    seen = set()
    for e in entries:
        if e.key in seen:
            raise ManifestError(f"duplicate entry {e.key}")
        seen.add(e.key)
        grouped[e.dataset_id].append(e)
    return DatasetCollection({k: Dataset(k, v) for k, v in grouped.items()}, root)


def parse_manifest(path: str | Path) -> DatasetCollection:
    """Read a JSON-lines manifest. Relative file paths resolve against its directory."""
    path = Path(path)
    entries = []
    seen: dict[tuple[str, str], int] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            entry = _parse_record(rec, lineno)
            if entry.key in seen:
                raise ManifestError(f"line {lineno}: duplicate entry {entry.key} "
                                    f"(first at line {seen[entry.key]})")
            seen[entry.key] = lineno
            entries.append(entry)
    return collect(entries, root=path.parent.resolve())


def write_manifest(entries: Iterable[ManifestEntry], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_record(), sort_keys=True) + "\n")
    return path


# -- audio -------------------------------------------------------------------

@dataclass
class AudioClip:
    samples: np.ndarray
    rate: int = TARGET_RATE
    source: str | None = None

    def __len__(self):
        return len(self.samples)


def condition_audio(samples: np.ndarray, rate: int, target_rate: int = TARGET_RATE) -> np.ndarray:
    """Down-mix (channel mean), resample and peak-normalize to 1.0.

    Accepts ``(n,)`` or ``(n, channels)``. Silent input is returned unscaled.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    elif x.ndim != 1:
        raise AudioError(f"expected 1-d or 2-d samples, got shape {x.shape}")
    if x.size == 0:
        raise AudioError("zero-length audio")
    if rate != target_rate:
        g = math.gcd(int(rate), int(target_rate))
        x = resample_poly(x, target_rate // g, rate // g)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x / peak
    return x


def load_audio(path: str | Path, target_rate: int = TARGET_RATE) -> AudioClip:
    try:
        data, rate = sf.read(str(path), dtype="float64", always_2d=True)
    except Exception as exc:  # soundfile raises several unrelated types
        raise AudioError(f"cannot decode {path}: {exc}") from exc
    if data.shape[0] == 0:
        raise AudioError(f"zero-length audio: {path}")
    return AudioClip(condition_audio(data, rate, target_rate), target_rate, str(path))


# -- subsets and splits --------------------------------------------------------

def build_subset(dataset: Dataset, cap_per_class: int, balance: bool = False,
                 seed: int = 0) -> Dataset:
    """Cap each class by seeded sampling without replacement; optionally balance.

    Entry order of the input is preserved among the survivors.
    """
    if cap_per_class < 1:
        raise ValueError("cap_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[int]] = defaultdict(list)
    for i, e in enumerate(dataset.entries):
        by_class[e.class_label].append(i)

    kept: dict[str, np.ndarray] = {}
    for c in dataset.classes:
        idx = np.array(by_class.get(c, []), dtype=np.int64)
        if len(idx) > cap_per_class:
            idx = rng.choice(idx, size=cap_per_class, replace=False)
        kept[c] = idx
    if balance:
        smallest = min((len(v) for v in kept.values() if len(v)), default=0)
        for c, idx in kept.items():
            if len(idx) > smallest:
                kept[c] = rng.choice(idx, size=smallest, replace=False)

    survivors = sorted(int(i) for idx in kept.values() for i in idx)
    return Dataset(dataset.dataset_id, [dataset.entries[i] for i in survivors],
                   list(dataset.classes))


@dataclass
class SplitAssignment:
    assignment: dict[tuple[str, str], str]
    seed: int
    ratios: tuple[float, float, float] = DEFAULT_RATIOS

    def __getitem__(self, key: ManifestEntry | tuple[str, str]) -> str:
        if isinstance(key, ManifestEntry):
            key = key.key
        return self.assignment[key]

    def counts(self) -> dict[str, int]:
        c = Counter(self.assignment.values())
        return {s: c.get(s, 0) for s in SPLITS}

    def select(self, dataset: Dataset, split: str) -> list[ManifestEntry]:
        return [e for e in dataset.entries if self.assignment[e.key] == split]

    def subset(self, dataset: Dataset, split: str) -> Dataset:
        return Dataset(dataset.dataset_id, self.select(dataset, split), list(dataset.classes))


def largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    """Integer sizes summing to ``n``; leftover units go to the largest fractional parts."""
    raw = [n * r for r in ratios]
    sizes = [math.floor(x + 1e-9) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def stratified_split(dataset: Dataset, ratios: Sequence[float] = DEFAULT_RATIOS,
                     strat_key: str = "fine_label", seed: int = 0) -> SplitAssignment:
    """Per-stratum seeded shuffle cut into train/val/test by cumulative ratios."""
    if not dataset.entries:
        raise ValueError(f"dataset {dataset.dataset_id!r} is empty")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three values summing to 1, got {ratios}")
    if strat_key not in ("fine_label", "class_label"):
        raise ValueError(f"unknown strat_key {strat_key!r}")

    strata: dict[str, list[ManifestEntry]] = defaultdict(list)
    for e in dataset.entries:
        key = e.fine_label if strat_key == "fine_label" and e.fine_label else e.class_label
        strata[key].append(e)

    rng = np.random.default_rng(seed)
    assignment: dict[tuple[str, str], str] = {}
    for key in sorted(strata):
        members = sorted(strata[key], key=lambda e: e.file_path)
        if len(members) < 3:
            # train first, then test, then val
            for e, split in zip(members, ("train", "test", "val")):
                assignment[e.key] = split
            continue
        perm = rng.permutation(len(members))
        sizes = largest_remainder(len(members), ratios)
        bounds = np.cumsum(sizes)
        for pos, i in enumerate(perm):
            split = SPLITS[int(np.searchsorted(bounds, pos, side="right"))]
            assignment[members[i].key] = split
    return SplitAssignment(assignment, seed, tuple(ratios))


def split_collection(collection: DatasetCollection, seed: int = 0,
                     ratios: Sequence[float] = DEFAULT_RATIOS) -> dict[str, SplitAssignment]:
    return {d.dataset_id: stratified_split(d, ratios, "fine_label", seed) for d in collection}


def esc50_collection(root: str | Path, dataset_id: str = "ESC-50") -> DatasetCollection:
    """Fold-annotated collection from an ESC-50 checkout (``meta/esc50.csv`` + ``audio/``)."""
    root = Path(root)
    with (root / "meta" / "esc50.csv").open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    entries = [ManifestEntry(dataset_id, f"audio/{r['filename']}", r["category"],
                             fold=int(r["fold"])) for r in rows]
    return collect(entries, root=root.resolve())
