"""Batch samplers, epoch schedules, focal dataset reweighting and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np
import torch
import yaml

from .features import PATCH_FRAMES, file_spectrogram, random_patch, sliding_patches
from .ingest import (DEFAULT_RATIOS, Dataset, DatasetCollection, ManifestEntry,
                     SplitAssignment, build_subset, load_audio, stratified_split)
from .losses import LossConfig, compute_loss, cross_entropy
from .model import EncoderConfig, FrozenEncoder, Head, SfxModel, clone_state

logger = logging.getLogger(__name__)

BATCH_SIZE = 64
SCENARIOS = ("within_dataset", "transfer", "cross_dataset")
MIXINGS = ("sequential", "joint")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class TrainingDiverged(RuntimeError):
    pass


# -- batch plans -------------------------------------------------------------------

class Batch(NamedTuple):
    dataset_id: str
    items: tuple[tuple[str, int], ...]  # (file_path, patch seed)

    def __len__(self):
        return len(self.items)


def _seed_from(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))


def shuffled_batches(entries: Sequence[ManifestEntry], seed, batch_size: int = BATCH_SIZE,
                     dataset_id: str | None = None) -> list[Batch]:
    """One uniform permutation chunked into full batches; the short tail is dropped."""
    rng = np.random.default_rng(seed)
    if dataset_id is None:
        dataset_id = entries[0].dataset_id if entries else ""
    order = rng.permutation(len(entries))
    batches = []
    for start in range(0, len(order) - batch_size + 1, batch_size):
        items = tuple((entries[i].file_path, _seed_from(rng))
                      for i in order[start:start + batch_size])
        batches.append(Batch(dataset_id, items))
    return batches


def class_balanced_batches(entries: Sequence[ManifestEntry], seed, n_batches: int | None = None,
                           num_classes_per_batch: int = 16, per_class: int = 4) -> list[Batch]:
    """P x K batches: class slots drawn first, then entries within each class.

    Draws fall back to sampling with replacement when there are fewer classes
    than slots or fewer entries than ``per_class``; a small class still places
    each of its entries at least once. ``n_batches`` defaults to
    the number of full batches a plain shuffle would give (at least one).
    """
    if not entries:
        raise ValueError("cannot sample batches from an empty split")
    rng = np.random.default_rng(seed)
    dataset_id = entries[0].dataset_id
    by_class: dict[str, list[int]] = {}
    for i, e in enumerate(entries):
        by_class.setdefault(e.class_label, []).append(i)
    classes = sorted(by_class)
    batch_size = num_classes_per_batch * per_class
    if n_batches is None:
        n_batches = max(1, len(entries) // batch_size)

    batches = []
    for _ in range(n_batches):
        slot_classes = rng.choice(len(classes), size=num_classes_per_batch,
                                  replace=len(classes) < num_classes_per_batch)
        items = []
        for c in slot_classes:
            members = by_class[classes[c]]
            if len(members) >= per_class:
                picks = rng.choice(len(members), size=per_class, replace=False)
            else:
                # every member once, remaining slots drawn with replacement
                fill = rng.choice(len(members), size=per_class - len(members), replace=True)
                picks = rng.permutation(np.concatenate([np.arange(len(members)), fill]))
            items.extend((entries[members[p]].file_path, _seed_from(rng)) for p in picks)
        batches.append(Batch(dataset_id, tuple(items)))
    return batches


def schedule_epoch(plans: Mapping[str, Sequence[Batch]], mixing: str = "sequential",
                   seed=0) -> list[Batch]:
    """Concatenate (sequential) or randomly interleave (joint) per-dataset batch lists.

    Joint interleaving keeps each dataset's own batch order.
    """
    if mixing not in MIXINGS:
        raise ValueError(f"mixing must be one of {MIXINGS}")
    if mixing == "sequential":
        return [b for batches in plans.values() for b in batches]
    owners = [ds for ds, batches in plans.items() for _ in batches]
    owners = [owners[i] for i in np.random.default_rng(seed).permutation(len(owners))]
    cursors = {ds: iter(batches) for ds, batches in plans.items()}
    return [next(cursors[ds]) for ds in owners]


# -- convergence and dataset reweighting ----------------------------------------------

@dataclass
class RunRecord:
    """Append-only log of per-epoch, per-dataset losses and macro F-1."""

    rows: list[dict] = field(default_factory=list)
    steps: dict[int, int] = field(default_factory=dict)
    best_epoch: int | None = None
    alpha_history: list[dict[str, float]] = field(default_factory=list)

    def append(self, epoch: int, dataset_id: str, split: str, loss: float,
               macro_f1: float | None = None):
        if self.rows and epoch < self.rows[-1]["epoch"]:
            raise ValueError(f"epoch {epoch} precedes logged epoch {self.rows[-1]['epoch']}")
        self.rows.append({"epoch": int(epoch), "dataset_id": dataset_id, "split": split,
                          "loss": float(loss),
                          "macro_f1": None if macro_f1 is None else float(macro_f1)})

    @property
    def epochs(self) -> list[int]:
        return sorted({r["epoch"] for r in self.rows})

    def series(self, dataset_id: str, split: str, key: str = "loss") -> list[float]:
        return [r[key] for r in self.rows if r["dataset_id"] == dataset_id and r["split"] == split]

    def dataset_ids(self) -> list[str]:
        return list(dict.fromkeys(r["dataset_id"] for r in self.rows))

    def mean_val_losses(self) -> dict[int, float]:
        out: dict[int, list[float]] = {}
        for r in self.rows:
            if r["split"] == "val":
                out.setdefault(r["epoch"], []).append(r["loss"])
        return {e: float(np.mean(v)) for e, v in out.items()}

    def write_jsonl(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            for r in self.rows:
                fh.write(json.dumps(r) + "\n")
        return path

    @classmethod
    def read_jsonl(cls, path: str | Path) -> RunRecord:
        rec = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                r = json.loads(line)
                rec.append(r["epoch"], r["dataset_id"], r["split"], r["loss"], r.get("macro_f1"))
        return rec


def record_convergence(run: RunRecord, threshold: float = 0.9) -> dict[str, int]:
    """First (1-based) epoch whose train macro F-1 reaches ``threshold``, per dataset.

    Datasets that never get there are assigned the run length.
    """
    if not run.rows:
        raise ValueError("empty run record")
    n_epochs = max(run.epochs)
    n_e = {}
    for ds in run.dataset_ids():
        history = run.series(ds, "train", "macro_f1")
        crossing = next((i for i, f1 in enumerate(history, start=1)
                         if f1 is not None and f1 >= threshold), None)
        n_e[ds] = n_epochs if crossing is None else crossing
    return n_e


@dataclass
class FdrWeights:
    beta: float
    n_e: dict[str, int]
    raw: dict[str, float]
    alpha: dict[str, float]


def fdr_weights(n_e: Mapping[str, int], beta: float, n_datasets: int | None = None) -> FdrWeights:
    """Effective-number weights (1 - beta**n) / (1 - beta), rescaled to sum to D."""
    if not 0 < beta < 1:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    if any(n < 1 for n in n_e.values()):
        raise ValueError("every n_e must be >= 1")
    d = len(n_e) if n_datasets is None else n_datasets
    raw = {ds: (1.0 - beta ** n) / (1.0 - beta) for ds, n in n_e.items()}
    total = math.fsum(raw.values())
    alpha = {ds: d * a / total for ds, a in raw.items()}
    return FdrWeights(beta, dict(n_e), raw, alpha)


class EarlyStopping:
    """Tracks the best (lowest) value and signals a stop after ``patience`` misses."""

    def __init__(self, patience: int = 10):
        self.patience = patience
        self.best = math.inf
        self.best_epoch: int | None = None
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        """Returns True when ``value`` is a new best."""
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


# -- configuration -----------------------------------------------------------------------

@dataclass
class TrainConfig:
    scenario: str = "within_dataset"
    datasets: list[str] = field(default_factory=list)
    base_dataset: str | None = None
    mixing: str = "sequential"
    fdr: dict | None = None  # {"beta": ..., "threshold": 0.9, "n_e": {...} optional}
    dataset_aware_norm: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    batch_size: int = BATCH_SIZE
    channels: tuple[int, ...] = (64, 128, 256, 512)
    split_ratios: tuple[float, float, float] = DEFAULT_RATIOS
    cap_per_class: int | None = None
    balance: bool = False
    calibration_epochs: int | None = None

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.adam_betas = tuple(self.adam_betas)
        self.channels = tuple(self.channels)
        self.split_ratios = tuple(self.split_ratios)
        self.datasets = list(self.datasets)

    def validate(self, available: Sequence[str] | None = None) -> TrainConfig:
        if self.scenario not in SCENARIOS:
            raise ConfigError("scenario", f"must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.mixing not in MIXINGS:
            raise ConfigError("mixing", f"must be one of {MIXINGS}, got {self.mixing!r}")
        names = self.training_datasets(available)
        if self.scenario == "transfer" and not self.base_dataset:
            raise ConfigError("scenario", "transfer scenario needs exactly one base_dataset")
        if self.scenario in ("within_dataset", "transfer") and len(names) != 1:
            raise ConfigError("scenario", f"{self.scenario} trains on exactly one dataset, "
                                          f"got {names}")
        if self.scenario == "cross_dataset" and len(names) < 2:
            raise ConfigError("scenario", f"cross_dataset needs >= 2 datasets, got {names}")
        if available is not None:
            missing = [n for n in names if n not in available]
            if missing:
                raise ConfigError("datasets", f"not found in manifests: {missing}")
        if self.fdr is not None:
            beta = self.fdr.get("beta")
            if beta is None or not 0 < beta < 1:
                raise ConfigError("fdr", f"beta must lie in (0, 1), got {beta}")
        if self.batch_size < 2:
            raise ConfigError("batch_size", "must be >= 2")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs", "must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience", "must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr", "must be > 0")
        return self

    def training_datasets(self, available: Sequence[str] | None = None) -> list[str]:
        if self.scenario == "transfer" and self.base_dataset:
            return [self.base_dataset]
        if self.datasets:
            return list(self.datasets)
        return list(available or [])

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(channels=self.channels, dataset_aware=self.dataset_aware_norm)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("adam_betas", "channels", "split_ratios"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown config field")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError("loss", str(exc)) from None

    def dump(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> TrainConfig:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a mapping")
        return cls.from_dict(data)


# -- prepared data ---------------------------------------------------------------------

@dataclass
class DatasetData:
    """One dataset with its split and the per-file normalized spectrograms."""

    dataset: Dataset
    split: SplitAssignment
    spectrograms: dict[str, np.ndarray]

    @property
    def dataset_id(self) -> str:
        return self.dataset.dataset_id

    def entries(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.split.select(self.dataset, split) if e.file_path in self.spectrograms]

    def label_of(self) -> dict[str, int]:
        idx = self.dataset.class_index
        return {e.file_path: idx[e.class_label] for e in self.dataset.entries}


def load_spectrograms(collection: DatasetCollection, entries: Iterable[ManifestEntry],
                      cache=None, skip_errors: bool = False) -> tuple[dict[str, np.ndarray], list[str]]:
    specs, skipped = {}, []
    for e in entries:
        try:
            specs[e.file_path] = file_spectrogram(load_audio(collection.resolve(e)), cache)
        except ValueError as exc:
            if not skip_errors:
                raise
            logger.warning("skipping %s: %s", e.file_path, exc)
            skipped.append(e.file_path)
    return specs, skipped


def prepare_data(collection: DatasetCollection, config: TrainConfig,
                 dataset_ids: Sequence[str] | None = None, cache=None,
                 splits: Mapping[str, SplitAssignment] | None = None) -> dict[str, DatasetData]:
    """Subset, split and featurize the datasets a run needs."""
    out = {}
    ids = dataset_ids or collection.dataset_ids
    for ds_id in ids:
        ds = collection[ds_id]
        if config.cap_per_class:
            ds = build_subset(ds, config.cap_per_class, config.balance, config.seed)
        split = (splits or {}).get(ds_id) or stratified_split(ds, config.split_ratios,
                                                              "fine_label", config.seed)
        specs, _ = load_spectrograms(collection, ds.entries, cache)
        out[ds_id] = DatasetData(ds, split, specs)
    return out


def _patch_tensor(specs: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(specs).astype(np.float32)).unsqueeze(1)


def materialize(batch: Batch, data: DatasetData) -> tuple[torch.Tensor, torch.Tensor]:
    """Fresh random crops for a batch; each crop is driven by its own patch seed."""
    labels = data.label_of()
    patches = [random_patch(data.spectrograms[fp], PATCH_FRAMES, np.random.default_rng(s))
               for fp, s in batch.items]
    return _patch_tensor(patches), torch.tensor([labels[fp] for fp, _ in batch.items])


def eval_patches(data: DatasetData, split: str, overlap: float = 0.5):
    labels = data.label_of()
    xs, ys = [], []
    for e in data.entries(split):
        for p in sliding_patches(data.spectrograms[e.file_path], PATCH_FRAMES, overlap):
            xs.append(p)
            ys.append(labels[e.file_path])
    if not xs:
        raise ValueError(f"dataset {data.dataset_id!r} has an empty {split} split")
    return _patch_tensor(xs), torch.tensor(ys)


def _macro_f1(preds, labels) -> float:
    from .evaluation import macro_f1
    return macro_f1(np.asarray(preds), np.asarray(labels))


def epoch_plan(config: TrainConfig, data: Mapping[str, DatasetData], epoch: int) -> list[Batch]:
    plans = {}
    for d, (ds_id, dd) in enumerate(data.items()):
        seed = [config.seed, epoch, d]
        train_entries = dd.entries("train")
        if not train_entries:
            raise ValueError(f"dataset {ds_id!r} has an empty train split")
        if config.loss.metric is None:
            plans[ds_id] = shuffled_batches(train_entries, seed, config.batch_size, ds_id)
            if not plans[ds_id] and epoch == 1:
                logger.warning("dataset %r: %d train entries < batch size %d, no batches",
                               ds_id, len(train_entries), config.batch_size)
        else:
            per_class = 4
            plans[ds_id] = class_balanced_batches(train_entries, seed,
                                                  num_classes_per_batch=config.batch_size // per_class,
                                                  per_class=per_class)
    return schedule_epoch(plans, config.mixing, [config.seed, epoch])


# -- training loop -------------------------------------------------------------------

def _val_loss(model: SfxModel, ds_id: str, x, y, config: TrainConfig):
    losses, weights, preds = [], [], []
    with torch.no_grad():
        for start in range(0, len(x), config.batch_size):
            xb, yb = x[start:start + config.batch_size], y[start:start + config.batch_size]
            emb = model.encoder_forward(xb, ds_id, mode="eval")
            logits = model.head_forward(emb, ds_id)
            loss = compute_loss(logits, emb, yb, model.head(ds_id).fc2.weight, config.loss)
            losses.append(float(loss))
            weights.append(len(xb))
            preds.append(logits.argmax(1))
    return float(np.average(losses, weights=weights)), _macro_f1(torch.cat(preds), y)


def train(config: TrainConfig, data: DatasetCollection | Mapping[str, DatasetData],
          cache=None, callback: Callable[[int, RunRecord], None] | None = None):
    """Train encoder and heads; return the best-validation model and the run log."""
    if isinstance(data, DatasetCollection):
        config.validate(data.dataset_ids)
        data = prepare_data(data, config, config.training_datasets(data.dataset_ids), cache)
    else:
        config.validate(list(data))
        names = config.training_datasets(list(data))
        data = {k: data[k] for k in names}

    torch.manual_seed(config.seed)
    taxonomy = {ds_id: dd.dataset.classes for ds_id, dd in data.items()}
    model = SfxModel(taxonomy, config.encoder_config())
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.adam_betas,
                                 eps=config.adam_eps)
    record = RunRecord()

    alpha = {ds: 1.0 for ds in data}
    if config.fdr is not None:
        n_e = config.fdr.get("n_e") or calibrate(config, data)
        weights = fdr_weights({ds: n_e[ds] for ds in data}, config.fdr["beta"])
        alpha = weights.alpha
        record.alpha_history.append(dict(alpha))

    val_sets = {ds: eval_patches(dd, "val") for ds, dd in data.items()}
    stopper = EarlyStopping(config.patience)
    best_state = clone_state(model)

    for epoch in range(1, config.max_epochs + 1):
        plan = epoch_plan(config, data, epoch)
        sums = {ds: [0.0, 0] for ds in data}
        preds = {ds: ([], []) for ds in data}
        for batch in plan:
            ds = batch.dataset_id
            x, y = materialize(batch, data[ds])
            emb = model.encoder_forward(x, ds, mode="train")
            logits = model.head_forward(emb, ds)
            try:
                loss = compute_loss(logits, emb, y, model.head(ds).fc2.weight, config.loss) * alpha[ds]
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}, dataset {ds!r}: {exc}") from None
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} on dataset {ds!r}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            sums[ds][0] += loss.item() * len(batch)
            sums[ds][1] += len(batch)
            preds[ds][0].append(logits.argmax(1).detach())
            preds[ds][1].append(y)
        record.steps[epoch] = len(plan)

        for ds in data:
            total, count = sums[ds]
            if count:
                f1 = _macro_f1(torch.cat(preds[ds][0]), torch.cat(preds[ds][1]))
                record.append(epoch, ds, "train", total / count, f1)
        val_losses = {}
        for ds, (x, y) in val_sets.items():
            val_losses[ds], f1 = _val_loss(model, ds, x, y, config)
            record.append(epoch, ds, "val", val_losses[ds], f1)
        mean_val = float(np.mean(list(val_losses.values())))
        logger.info("epoch %d mean val loss %.5f", epoch, mean_val)
        if stopper.update(epoch, mean_val):
            best_state = clone_state(model)
            record.best_epoch = epoch
            model.metadata = {"epoch": epoch, "val_losses": val_losses, "mean_val_loss": mean_val}
        if callback is not None:
            callback(epoch, record)
        if stopper.should_stop:
            break

    metadata = model.metadata
    model.load_state_dict(best_state)
    model.metadata = {**metadata, "seed": config.seed, "scenario": config.scenario,
                      "split_ratios": list(config.split_ratios), "alpha": alpha}
    model.encoder.eval()
    return model, record


def calibrate(config: TrainConfig, data: Mapping[str, DatasetData]) -> dict[str, int]:
    """Per-dataset runs with reweighting off; n_e from each run's train macro F-1."""
    threshold = (config.fdr or {}).get("threshold", 0.9)
    n_e = {}
    for ds, dd in data.items():
        sub = TrainConfig(**{**config.__dict__, "scenario": "within_dataset", "datasets": [ds],
                             "base_dataset": None, "fdr": None})
        if config.calibration_epochs:
            sub.max_epochs = config.calibration_epochs
            sub.patience = config.calibration_epochs
        _, rec = train(sub, {ds: dd})
        n_e[ds] = record_convergence(rec, threshold)[ds]
        logger.info("calibration: %s crosses %.2f at epoch %d", ds, threshold, n_e[ds])
    return n_e


def transfer_head_finetune(encoder: FrozenEncoder, data: DatasetData, config: TrainConfig,
                           norm_dataset: str | None = None):
    """Fit a fresh head on frozen embeddings; the encoder is never modified."""
    torch.manual_seed(config.seed)
    ds = data.dataset_id
    head = Head(len(data.dataset.classes), encoder.embedding_dim)
    optimizer = torch.optim.Adam(head.parameters(), lr=config.lr, betas=config.adam_betas,
                                 eps=config.adam_eps)
    record = RunRecord()
    xv, yv = eval_patches(data, "val")
    ev = encoder(xv, norm_dataset)
    stopper = EarlyStopping(config.patience)
    best = clone_state(head)
    train_entries = data.entries("train")
    if not train_entries:
        raise ValueError(f"dataset {ds!r} has an empty train split")

    for epoch in range(1, config.max_epochs + 1):
        batches = shuffled_batches(train_entries, [config.seed, epoch], config.batch_size, ds)
        total, count, preds, truth = 0.0, 0, [], []
        for batch in batches:
            x, y = materialize(batch, data)
            logits = head(encoder(x, norm_dataset))
            loss = cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch)
            count += len(batch)
            preds.append(logits.argmax(1).detach())
            truth.append(y)
        record.steps[epoch] = len(batches)
        if count:
            record.append(epoch, ds, "train", total / count, _macro_f1(torch.cat(preds), torch.cat(truth)))
        with torch.no_grad():
            logits = head(ev)
            val = float(cross_entropy(logits, yv))
        record.append(epoch, ds, "val", val, _macro_f1(logits.argmax(1), yv))
        if stopper.update(epoch, val):
            best = clone_state(head)
            record.best_epoch = epoch
        if stopper.should_stop:
            break
    head.load_state_dict(best)
    return head, record
