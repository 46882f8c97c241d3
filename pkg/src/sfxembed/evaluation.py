"""Embedding tables, z-scoring, nearest-neighbour probing, macro F-1 and DBI."""

from __future__ import annotations

import csv
import json
import os
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Hashable, Mapping, Sequence

import numpy as np

from .features import PATCH_FRAMES, file_spectrogram, sliding_patches
from .ingest import DatasetCollection, ManifestEntry, load_audio
from .model import FrozenEncoder

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-12
TABLE_MAGIC = "SFXEMB"
TABLE_VERSION = 1


class EvalError(ValueError):
    pass


@dataclass
class ZScoreStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> ZScoreStats:
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class EmbeddingTable:
    patch_ids: list[str]
    file_ids: list[str]
    dataset_ids: list[str]
    labels: list[str]
    vectors: np.ndarray
    stats: ZScoreStats | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors))
        n = len(self.patch_ids)
        if not (len(self.file_ids) == len(self.dataset_ids) == len(self.labels) == n
                and (n == 0 or self.vectors.shape[0] == n)):
            raise EvalError("embedding table columns have different lengths")
        if n and not np.all(np.isfinite(self.vectors)):
            raise EvalError("embedding table contains non-finite values")

    def __len__(self):
        return len(self.patch_ids)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1]) if self.vectors.ndim == 2 else 0

    def take(self, mask_or_index) -> EmbeddingTable:
        idx = np.arange(len(self))[mask_or_index]
        pick = lambda col: [col[i] for i in idx]  # noqa: E731
        return EmbeddingTable(pick(self.patch_ids), pick(self.file_ids), pick(self.dataset_ids),
                              pick(self.labels), self.vectors[idx], self.stats, dict(self.metadata))

    def for_dataset(self, dataset_id: str) -> EmbeddingTable:
        return self.take(np.array([d == dataset_id for d in self.dataset_ids], dtype=bool))

    def with_vectors(self, vectors: np.ndarray, stats: ZScoreStats | None) -> EmbeddingTable:
        return EmbeddingTable(list(self.patch_ids), list(self.file_ids), list(self.dataset_ids),
                              list(self.labels), vectors, stats, dict(self.metadata))

    def file_level(self) -> EmbeddingTable:
        """One row per file: the mean of its patch embeddings."""
        groups: dict[tuple[str, str], list[int]] = {}
        for i, key in enumerate(zip(self.dataset_ids, self.file_ids)):
            groups.setdefault(key, []).append(i)
        rows = list(groups.values())
        return EmbeddingTable(
            [self.file_ids[r[0]] for r in rows], [self.file_ids[r[0]] for r in rows],
            [self.dataset_ids[r[0]] for r in rows], [self.labels[r[0]] for r in rows],
            np.stack([self.vectors[r].mean(axis=0) for r in rows]) if rows else self.vectors[:0],
            self.stats, dict(self.metadata))

    @staticmethod
    def concat(tables: Sequence[EmbeddingTable]) -> EmbeddingTable:
        return EmbeddingTable(
            [p for t in tables for p in t.patch_ids], [f for t in tables for f in t.file_ids],
            [d for t in tables for d in t.dataset_ids], [x for t in tables for x in t.labels],
            np.concatenate([t.vectors for t in tables]), tables[0].stats if tables else None)


# -- table files --------------------------------------------------------------------

def write_table(table: EmbeddingTable, path: str | Path, binary: bool = True) -> Path:
    """Write a header line (``SFXEMB <json>``) then the rows.

    Binary rows: four uint16-length-prefixed UTF-8 strings (patch id, file id,
    dataset id, label) followed by ``dim`` little-endian float32 values. Text
    rows are tab separated with the vector as space separated ``%.9g`` values.
    """
    header = {"version": TABLE_VERSION, "dim": table.dim, "rows": len(table),
              "encoding": "binary" if binary else "text", "metadata": table.metadata,
              "stats": table.stats.to_dict() if table.stats is not None else None}
    path = Path(path)
    vectors = np.asarray(table.vectors, dtype="<f4")
    tmp = path.with_name(path.name + ".part")
    with tmp.open("wb") as fh:
        fh.write(f"{TABLE_MAGIC} {json.dumps(header)}\n".encode("utf-8"))
        for i in range(len(table)):
            cols = (table.patch_ids[i], table.file_ids[i], table.dataset_ids[i], table.labels[i])
            if binary:
                for c in cols:
                    raw = c.encode("utf-8")
                    fh.write(struct.pack("<H", len(raw)) + raw)
                fh.write(vectors[i].tobytes())
            else:
                if any(("\t" in c or "\n" in c) for c in cols):
                    raise EvalError(f"row {i}: text tables cannot hold tabs or newlines in ids")
                values = " ".join(f"{v:.9g}" for v in vectors[i].tolist())
                fh.write(("\t".join(cols) + "\t" + values + "\n").encode("utf-8"))
    os.replace(tmp, path)
    return path


def read_table(path: str | Path) -> EmbeddingTable:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    first = raw[:newline].decode("utf-8") if newline >= 0 else ""
    if not first.startswith(TABLE_MAGIC + " "):
        raise EvalError(f"{path}: not an embedding table")
    header = json.loads(first[len(TABLE_MAGIC) + 1:])
    dim, n_rows = int(header["dim"]), int(header["rows"])
    cols: list[list[str]] = [[], [], [], []]
    vectors = np.empty((n_rows, dim), dtype=np.float32)
    pos = newline + 1
    if header["encoding"] == "binary":
        for i in range(n_rows):
            for c in cols:
                (n,) = struct.unpack_from("<H", raw, pos)
                c.append(raw[pos + 2:pos + 2 + n].decode("utf-8"))
                pos += 2 + n
            chunk = raw[pos:pos + 4 * dim]
            if len(chunk) != 4 * dim:
                raise EvalError(f"{path}: truncated at row {i}")
            vectors[i] = np.frombuffer(chunk, dtype="<f4")
            pos += 4 * dim
    else:
        lines = raw[pos:].decode("utf-8").splitlines()
        lines = [ln for ln in lines if ln.strip()]
        if len(lines) != n_rows:
            raise EvalError(f"{path}: header says {n_rows} rows, found {len(lines)}")
        for i, line in enumerate(lines):
            parts = line.split("\t")
            if len(parts) != 5:
                raise EvalError(f"{path}: row {i} has {len(parts)} columns, expected 5")
            for c, value in zip(cols, parts[:4]):
                c.append(value)
            vec = np.array(parts[4].split(), dtype=np.float32)
            if len(vec) != dim:
                raise EvalError(f"{path}: row {i} has dimension {len(vec)}, expected {dim}")
            vectors[i] = vec
    stats = ZScoreStats.from_dict(header["stats"]) if header.get("stats") else None
    return EmbeddingTable(*cols, vectors, stats, header.get("metadata") or {})


def import_external_embeddings(path: str | Path,
                               frames_per_window: int | None = None) -> EmbeddingTable:
    """Load a table produced elsewhere (e.g. OpenL3 frames).

    With ``frames_per_window`` set, consecutive frame rows of each file are
    averaged into windows of that many frames; an incomplete tail window is
    dropped unless the file is shorter than one window.
    """
    table = read_table(path)
    if frames_per_window is None:
        return table
    if frames_per_window < 1:
        raise ValueError("frames_per_window must be >= 1")
    groups: dict[tuple[str, str], list[int]] = {}
    for i, key in enumerate(zip(table.dataset_ids, table.file_ids)):
        groups.setdefault(key, []).append(i)
    out: tuple[list, list, list, list] = ([], [], [], [])
    vecs = []
    for (ds, fid), rows in groups.items():
        windows = [rows[s:s + frames_per_window]
                   for s in range(0, len(rows) - frames_per_window + 1, frames_per_window)]
        if not windows:
            windows = [rows]
        for k, w in enumerate(windows):
            for col, value in zip(out, (f"{fid}#{k}", fid, ds, table.labels[w[0]])):
                col.append(value)
            vecs.append(table.vectors[w].astype(np.float64).mean(axis=0))
    vectors = np.stack(vecs) if vecs else np.empty((0, table.dim))
    return EmbeddingTable(*out, vectors, None, {**table.metadata,
                                                 "frames_per_window": frames_per_window})


# -- extraction and standardization ---------------------------------------------------

def extract_embeddings(encoder: FrozenEncoder, collection: DatasetCollection,
                       entries: Sequence[ManifestEntry] | None = None, overlap: float = 0.5,
                       norm_dataset: str | None = None, cache=None,
                       spectrograms: Mapping[str, np.ndarray] | None = None) -> EmbeddingTable:
    """One row per sliding patch of each file; undecodable files are skipped and counted."""
    if entries is None:
        entries = [e for ds in collection for e in ds.entries]
    cols: tuple[list, list, list, list] = ([], [], [], [])
    blocks, skipped = [], []
    for e in entries:
        try:
            if spectrograms is not None and e.file_path in spectrograms:
                spec = spectrograms[e.file_path]
            else:
                spec = file_spectrogram(load_audio(collection.resolve(e)), cache)
        except ValueError as exc:
            logger.warning("skipping %s: %s", e.file_path, exc)
            skipped.append(e.file_path)
            continue
        patches = sliding_patches(spec, PATCH_FRAMES, overlap)
        norm = e.dataset_id if e.dataset_id in encoder.norm_dataset_ids else norm_dataset
        blocks.append(encoder.embed(np.stack(patches), norm))
        for k in range(len(patches)):
            for col, value in zip(cols, (f"{e.file_path}#{k}", e.file_path, e.dataset_id,
                                         e.class_label)):
                col.append(value)
    vectors = np.concatenate(blocks) if blocks else np.empty((0, encoder.embedding_dim),
                                                             dtype=np.float32)
    return EmbeddingTable(*cols, vectors, None,
                          {"overlap": overlap, "skipped": len(skipped), "skipped_files": skipped})


def fit_zscore(table: EmbeddingTable) -> ZScoreStats:
    if not len(table):
        raise EvalError("cannot fit standardization on an empty table")
    x = table.vectors.astype(np.float64)
    return ZScoreStats(x.mean(axis=0), x.std(axis=0))


def zscore(table: EmbeddingTable, stats: ZScoreStats | None = None) -> EmbeddingTable:
    """Standardize per dimension; near-constant dimensions map to 0.

    Fits on ``table`` itself when no stats are provided.
    """
    stats = fit_zscore(table) if stats is None else stats
    if len(stats.mean) != table.dim:
        raise EvalError(f"stats dimension {len(stats.mean)} != table dimension {table.dim}")
    x = table.vectors.astype(np.float64)
    live = stats.std >= STD_FLOOR
    out = np.zeros_like(x)
    out[:, live] = (x[:, live] - stats.mean[live]) / stats.std[live]
    return table.with_vectors(out, stats)


# -- probe and metrics ----------------------------------------------------------------

def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def nn_probe(train: EmbeddingTable, query: EmbeddingTable, k: int = 1,
             chunk: int = 1024) -> list[str]:
    """Cosine nearest-neighbour labels; ties go to the lowest training-row index.

    For ``k > 1`` the majority label among the k nearest wins, ties resolved in
    favour of the label whose best neighbour ranks first.
    """
    if not len(train):
        raise EvalError("nn_probe needs a non-empty training table")
    if train.dim != query.dim:
        raise EvalError(f"dimension mismatch: train {train.dim} vs query {query.dim}")
    t = _unit_rows(train.vectors)
    q = _unit_rows(query.vectors)
    k = min(k, len(train))
    preds: list[str] = []
    for start in range(0, len(q), chunk):
        sims = q[start:start + chunk] @ t.T
        if k == 1:
            preds.extend(train.labels[i] for i in np.argmax(sims, axis=1))
            continue
        order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        for row in order:
            votes: dict[str, list[int]] = {}
            for rank, i in enumerate(row):
                votes.setdefault(train.labels[i], []).append(rank)
            preds.append(min(votes, key=lambda lab: (-len(votes[lab]), votes[lab][0])))
    return preds


def per_class_f1(preds: Sequence[Hashable], labels: Sequence[Hashable]) -> dict:
    preds, labels = list(np.asarray(preds).tolist()), list(np.asarray(labels).tolist())
    if len(preds) != len(labels):
        raise EvalError("predictions and labels differ in length")
    if not labels:
        raise EvalError("macro F-1 of an empty input")
    p_arr, l_arr = np.array(preds, dtype=object), np.array(labels, dtype=object)
    out = {}
    for c in sorted(set(labels), key=str):
        tp = int(np.sum((p_arr == c) & (l_arr == c)))
        fp = int(np.sum((p_arr == c) & (l_arr != c)))
        fn = int(np.sum((p_arr != c) & (l_arr == c)))
        denom = 2 * tp + fp + fn
        out[c] = 0.0 if tp == 0 else 2 * tp / denom
    return out


def macro_f1(preds: Sequence[Hashable], labels: Sequence[Hashable]) -> float:
    """Unweighted mean F1 over the classes present in ``labels``."""
    scores = per_class_f1(preds, labels)
    return float(np.mean(list(scores.values())))


def dbi(table_or_vectors, labels: Sequence[Hashable] | None = None) -> float:
    """Davies-Bouldin index with clusters given by the class labels (Euclidean)."""
    if isinstance(table_or_vectors, EmbeddingTable):
        x, labels = table_or_vectors.vectors, table_or_vectors.labels
    else:
        x = table_or_vectors
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=object)
    classes = sorted(set(labels.tolist()), key=str)
    if len(classes) < 2:
        raise EvalError("DBI needs at least two classes")
    centroids = np.stack([x[labels == c].mean(axis=0) for c in classes])
    scatter = np.array([np.linalg.norm(x[labels == c] - centroids[i], axis=1).mean()
                        for i, c in enumerate(classes)])
    dist = np.linalg.norm(centroids[:, None, :] - centroids[None, :, :], axis=2)
    np.fill_diagonal(dist, np.inf)
    close = np.argwhere(dist < 1e-12)
    if len(close):
        i, j = close[0]
        raise EvalError(f"coincident centroids for classes {classes[i]!r} and {classes[j]!r}")
    ratio = (scatter[:, None] + scatter[None, :]) / dist
    return float(ratio.max(axis=1).mean())


# -- reports --------------------------------------------------------------------------

@dataclass
class EvalReport:
    datasets: dict[str, dict] = field(default_factory=dict)
    config_digest: str | None = None
    folds: list[dict] = field(default_factory=list)
    mean_macro_f1: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        return path

    def write_per_class_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", "dataset_id", "class_label", "f1"])
            sections = [("", self.datasets)] + [(str(f["fold"]), f["datasets"]) for f in self.folds]
            for fold, datasets in sections:
                for ds, res in datasets.items():
                    for cls, f1 in res["per_class"].items():
                        w.writerow([fold, ds, cls, f"{f1:.6f}"])
        return path

    def plot_per_class(self, path: str | Path) -> Path:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        n = max(1, len(self.datasets))
        fig, axes = plt.subplots(n, 1, figsize=(8, 2.5 * n), squeeze=False)
        for ax, (ds, res) in zip(axes[:, 0], self.datasets.items()):
            names = list(res["per_class"])
            ax.bar(range(len(names)), [res["per_class"][c] for c in names])
            ax.set_xticks(range(len(names)), names, rotation=90, fontsize=6)
            ax.set_ylim(0, 1)
            ax.set_title(f"{ds}: macro F-1 {res['macro_f1']:.3f}")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        return Path(path)


def score_dataset(train: EmbeddingTable, test: EmbeddingTable, k: int = 1) -> dict:
    preds = nn_probe(train, test, k)
    per_class = per_class_f1(preds, test.labels)
    try:
        db = dbi(test)
    except EvalError as exc:
        logger.info("DBI unavailable: %s", exc)
        db = None
    return {"macro_f1": float(np.mean(list(per_class.values()))), "dbi": db,
            "per_class": per_class, "n_train": len(train), "n_test": len(test)}


def evaluate_tables(train: EmbeddingTable, test: EmbeddingTable, k: int = 1,
                    standardize: bool = True, file_level: bool = False) -> EvalReport:
    """Probe each dataset of ``test`` against the same dataset's rows in ``train``.

    Unstandardized train tables are z-scored with statistics fitted on ``train``;
    tables that already carry statistics are used as they are.
    """
    if standardize and train.stats is None:
        stats = fit_zscore(train)
        train, test = zscore(train, stats), zscore(test, stats)
    if file_level:
        train, test = train.file_level(), test.file_level()
    report = EvalReport(config_digest=test.metadata.get("config_digest"))
    for ds in dict.fromkeys(test.dataset_ids):
        tr = train.for_dataset(ds)
        if not len(tr):
            raise EvalError(f"no training rows for dataset {ds!r}")
        report.datasets[ds] = score_dataset(tr, test.for_dataset(ds), k)
    report.mean_macro_f1 = float(np.mean([r["macro_f1"] for r in report.datasets.values()]))
    return report


def kfold_eval(table: EmbeddingTable, folds: Mapping[str, int], k: int = 5,
               probe_k: int = 1, standardize: bool = True) -> EvalReport:
    """Probe-only k-fold protocol: fit on folds != f, test on fold f, for f = 1..k.

    ``folds`` maps file id to its fold number.
    """
    missing = sorted({f for f in table.file_ids if f not in folds})
    if missing:
        raise EvalError(f"no fold for {len(missing)} file(s), e.g. {missing[0]!r}")
    bad = sorted({folds[f] for f in table.file_ids if not 1 <= folds[f] <= k})
    if bad:
        raise EvalError(f"fold numbers {bad} outside 1..{k}")
    row_fold = np.array([folds[f] for f in table.file_ids])
    report = EvalReport(config_digest=table.metadata.get("config_digest"))
    for f in range(1, k + 1):
        train, test = table.take(row_fold != f), table.take(row_fold == f)
        if not len(test):
            raise EvalError(f"fold {f} is empty")
        fold_report = evaluate_tables(train, test, probe_k, standardize)
        report.folds.append({"fold": f, "datasets": fold_report.datasets,
                             "macro_f1": fold_report.mean_macro_f1, "n_test": len(test)})
    report.mean_macro_f1 = float(np.mean([f["macro_f1"] for f in report.folds]))
    return report


def kfold_train_eval(collection: DatasetCollection, config, k: int = 5, cache=None,
                     overlap: float = 0.5) -> EvalReport:
    """Full protocol: retrain the encoder for every fold, then probe the held-out fold.

    The training folds are split 8:1:1-style into train/val for early stopping;
    the probe is fitted on all rows of the training folds.
    """
    from .ingest import Dataset, SplitAssignment, stratified_split
    from .model import freeze_encoder
    from .training import DatasetData, TrainConfig, load_spectrograms, train

    if len(collection) != 1:
        raise EvalError("k-fold training expects a single-dataset manifest")
    ds = next(iter(collection))
    if any(e.fold is None for e in ds.entries):
        raise EvalError("every manifest entry needs a fold for k-fold evaluation")
    specs, _ = load_spectrograms(collection, ds.entries, cache)
    report = EvalReport()
    for f in range(1, k + 1):
        train_part = Dataset(ds.dataset_id, [e for e in ds.entries if e.fold != f], ds.classes)
        test_part = [e for e in ds.entries if e.fold == f]
        inner = stratified_split(train_part, (0.9, 0.1, 0.0), "class_label", config.seed)
        assignment = {key: "val" if split == "test" else split
                      for key, split in inner.assignment.items()}
        assignment.update({e.key: "test" for e in test_part})
        inner = SplitAssignment(assignment, inner.seed)
        full = Dataset(ds.dataset_id, ds.entries, ds.classes)
        sub = TrainConfig(**{**config.__dict__, "scenario": "within_dataset",
                             "datasets": [ds.dataset_id], "fdr": None})
        model, _ = train(sub, {ds.dataset_id: DatasetData(full, inner, specs)})
        enc = freeze_encoder(model)
        tr = extract_embeddings(enc, collection, train_part.entries, overlap, spectrograms=specs)
        te = extract_embeddings(enc, collection, test_part, overlap, spectrograms=specs)
        fold_report = evaluate_tables(tr, te)
        report.folds.append({"fold": f, "datasets": fold_report.datasets,
                             "macro_f1": fold_report.mean_macro_f1, "n_test": len(te)})
    report.mean_macro_f1 = float(np.mean([f["macro_f1"] for f in report.folds]))
    return report
