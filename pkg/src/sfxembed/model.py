"""CNN9-max encoder with optional dataset-aware normalization and per-dataset heads."""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .features import N_MELS, PATCH_FRAMES

EMBED_DIM = 512


class ModelError(ValueError):
    pass


class CheckpointError(ModelError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple[int, ...] = (64, 128, 256, 512)
    patch_frames: int = PATCH_FRAMES
    n_mels: int = N_MELS
    dataset_aware: bool = False
    momentum: float = 0.1
    eps: float = 1e-5

    @property
    def embedding_dim(self) -> int:
        return self.channels[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EncoderConfig:
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def spatial_trace(frames: int = PATCH_FRAMES, bins: int = N_MELS, n_blocks: int = 4):
    """Feature-map sizes after each 2x2 max pool (floor division)."""
    sizes = [(frames, bins)]
    for _ in range(n_blocks):
        frames, bins = frames // 2, bins // 2
        sizes.append((frames, bins))
    return sizes


class DatasetAwareNorm(nn.Module):
    """BatchNorm2d that is either shared or selected per dataset id."""

    def __init__(self, channels: int, dataset_ids: Sequence[str] = (), momentum=0.1, eps=1e-5):
        super().__init__()
        self.dataset_ids = list(dataset_ids)
        n_sets = max(1, len(self.dataset_ids))
        self.sets = nn.ModuleList(nn.BatchNorm2d(channels, eps=eps, momentum=momentum)
                                  for _ in range(n_sets))

    @property
    def shared(self) -> bool:
        return not self.dataset_ids

    def select(self, dataset_id: str | None) -> nn.BatchNorm2d:
        if self.shared:
            return self.sets[0]
        try:
            return self.sets[self.dataset_ids.index(dataset_id)]
        except ValueError:
            raise ModelError(f"no normalization set for dataset {dataset_id!r}; "
                             f"known: {self.dataset_ids}") from None

    def forward(self, x, dataset_id=None):
        return self.select(dataset_id)(x)


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, dataset_ids=(), momentum=0.1, eps=1e-5):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, 1, 1, bias=False)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.norm1 = DatasetAwareNorm(out_ch, dataset_ids, momentum, eps)
        self.norm2 = DatasetAwareNorm(out_ch, dataset_ids, momentum, eps)
        nn.init.kaiming_uniform_(self.conv1.weight, nonlinearity="relu")
        nn.init.kaiming_uniform_(self.conv2.weight, nonlinearity="relu")

    def forward(self, x, dataset_id=None):
        x = F.relu(self.norm1(self.conv1(x), dataset_id))
        x = F.relu(self.norm2(self.conv2(x), dataset_id))
        return F.max_pool2d(x, kernel_size=2)


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig = EncoderConfig(), dataset_ids: Sequence[str] = ()):
        super().__init__()
        if config.dataset_aware and not dataset_ids:
            raise ModelError("dataset-aware normalization needs at least one dataset id")
        self.config = config
        self.norm_dataset_ids = list(dataset_ids) if config.dataset_aware else []
        chans = (1,) + tuple(config.channels)
        self.blocks = nn.ModuleList(
            ConvBlock(chans[i], chans[i + 1], self.norm_dataset_ids, config.momentum, config.eps)
            for i in range(len(config.channels)))

    def check_input(self, x: torch.Tensor):
        expected = (1, self.config.patch_frames, self.config.n_mels)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ModelError(f"expected input of shape (B, {', '.join(map(str, expected))}), "
                             f"got {tuple(x.shape)}")

    def feature_maps(self, x, dataset_id=None) -> list[torch.Tensor]:
        self.check_input(x)
        maps = [x]
        for block in self.blocks:
            maps.append(block(maps[-1], dataset_id))
        return maps

    def forward(self, x, dataset_id=None):
        self.check_input(x)
        if self.config.dataset_aware and dataset_id not in self.norm_dataset_ids:
            raise ModelError(f"unknown dataset {dataset_id!r} for dataset-aware encoder")
        for block in self.blocks:
            x = block(x, dataset_id)
        return torch.amax(x, dim=(2, 3))


class Head(nn.Module):
    def __init__(self, n_classes: int, embedding_dim: int = EMBED_DIM, hidden: int = EMBED_DIM):
        super().__init__()
        self.fc1 = nn.Linear(embedding_dim, hidden)
        self.fc2 = nn.Linear(hidden, n_classes)
        for layer in (self.fc1, self.fc2):
            nn.init.kaiming_uniform_(layer.weight, nonlinearity="relu")
            nn.init.zeros_(layer.bias)

    @property
    def n_classes(self) -> int:
        return self.fc2.out_features

    def forward(self, emb):
        return self.fc2(F.relu(self.fc1(emb)))


class SfxModel(nn.Module):
    """Shared encoder plus one classifier head per training dataset.

    ``taxonomy`` maps dataset id to its ordered class list; ``metadata`` carries
    training history (epoch, per-dataset validation losses, ...).
    """

    def __init__(self, taxonomy: dict[str, Sequence[str]], config: EncoderConfig = EncoderConfig(),
                 norm_datasets: Sequence[str] | None = None):
        super().__init__()
        self.config = config
        norm_datasets = list(taxonomy) if norm_datasets is None else list(norm_datasets)
        self.encoder = Encoder(config, norm_datasets)
        self.taxonomy: dict[str, list[str]] = {}
        self.heads = nn.ModuleList()
        self.metadata: dict = {}
        for ds_id, classes in taxonomy.items():
            self.add_head(ds_id, classes)

    @property
    def dataset_ids(self) -> list[str]:
        return list(self.taxonomy)

    @property
    def norm_dataset_ids(self) -> list[str]:
        return list(self.encoder.norm_dataset_ids)

    def add_head(self, dataset_id: str, classes: Sequence[str]) -> Head:
        if dataset_id in self.taxonomy:
            raise ModelError(f"head for {dataset_id!r} already exists")
        self.taxonomy[dataset_id] = list(classes)
        head = Head(len(classes), self.config.embedding_dim)
        self.heads.append(head)
        return head

    def head(self, dataset_id: str) -> Head:
        try:
            return self.heads[self.dataset_ids.index(dataset_id)]
        except ValueError:
            raise ModelError(f"no head registered for dataset {dataset_id!r}") from None

    def encoder_forward(self, batch: torch.Tensor, dataset_id: str | None = None,
                        mode: str = "eval") -> torch.Tensor:
        if mode not in ("train", "eval"):
            raise ModelError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.encoder.train(mode == "train")
        return self.encoder(batch, dataset_id)

    def head_forward(self, embeddings: torch.Tensor, dataset_id: str) -> torch.Tensor:
        return self.head(dataset_id)(embeddings)

    def forward(self, batch, dataset_id, mode="train"):
        return self.head_forward(self.encoder_forward(batch, dataset_id, mode), dataset_id)


def param_count(model: SfxModel | nn.Module, scope: str = "all") -> int:
    if scope not in ("encoder", "heads", "all"):
        raise ValueError(f"unknown scope {scope!r}")
    if isinstance(model, SfxModel):
        parts = {"encoder": [model.encoder], "heads": [model.heads],
                 "all": [model.encoder, model.heads]}[scope]
    else:
        parts = [model]
    return sum(p.numel() for part in parts for p in part.parameters() if p.requires_grad)


# -- frozen inference ------------------------------------------------------------

class FrozenEncoder:
    """Immutable embedding function over a copy of a trained encoder."""

    def __init__(self, encoder: Encoder):
        self._encoder = copy.deepcopy(encoder).eval()
        for p in self._encoder.parameters():
            p.requires_grad_(False)

    @property
    def config(self) -> EncoderConfig:
        return self._encoder.config

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    @property
    def norm_dataset_ids(self) -> list[str]:
        return list(self._encoder.norm_dataset_ids)

    def __call__(self, batch: torch.Tensor, dataset_id: str | None = None,
                 mode: str = "eval") -> torch.Tensor:
        if mode != "eval":
            raise ModelError("frozen encoder only supports eval-mode forward passes")
        with torch.no_grad():
            return self._encoder(batch, dataset_id)

    def embed(self, patches: np.ndarray, dataset_id: str | None = None,
              batch_size: int = 64) -> np.ndarray:
        """Embed an ``(n, frames, bins)`` stack of patches, returning float32 ``(n, dim)``."""
        patches = np.asarray(patches, dtype=np.float32)
        out = np.empty((len(patches), self.embedding_dim), dtype=np.float32)
        for start in range(0, len(patches), batch_size):
            chunk = torch.from_numpy(patches[start:start + batch_size]).unsqueeze(1)
            out[start:start + len(chunk)] = self(chunk, dataset_id).numpy()
        return out


def freeze_encoder(model: SfxModel) -> FrozenEncoder:
    return FrozenEncoder(model.encoder)


# -- checkpoints ------------------------------------------------------------------

_MAGIC = b"SFXCKPT\x00"
_FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")
_NORM_FIELDS = ("weight", "bias", "running_mean", "running_var", "num_batches_tracked")


def named_arrays(model: SfxModel) -> dict[str, torch.Tensor]:
    """Parameters and statistics under their stable checkpoint names."""
    out: dict[str, torch.Tensor] = {}
    for b, block in enumerate(model.encoder.blocks, start=1):
        for k in (1, 2):
            out[f"enc.block{b}.conv{k}.weight"] = getattr(block, f"conv{k}").weight
        for k in (1, 2):
            norm: DatasetAwareNorm = getattr(block, f"norm{k}")
            labels = ([""] if norm.shared else [f".ds:{d}" for d in norm.dataset_ids])
            for label, bn in zip(labels, norm.sets):
                for name in _NORM_FIELDS:
                    out[f"norm.block{b}.site{k}{label}.{name}"] = getattr(bn, name)
    for ds_id, head in zip(model.dataset_ids, model.heads):
        for layer in ("fc1", "fc2"):
            for name in ("weight", "bias"):
                out[f"head.ds:{ds_id}.{layer}.{name}"] = getattr(getattr(head, layer), name)
    return out


def save_checkpoint(model: SfxModel, path: str | Path) -> Path:
    """Write ``model`` as one little-endian container.

    Layout: magic, format version (uint32), header length (uint64), UTF-8 JSON
    header, float32 arrays in header order, then a SHA-256 of everything before.
    """
    arrays = named_arrays(model)
    index, blobs, offset = [], [], 0
    for name, tensor in arrays.items():
        data = tensor.detach().cpu().numpy().astype("<f4").tobytes()
        index.append({"name": name, "shape": list(tensor.shape),
                      "dtype": str(tensor.dtype).replace("torch.", ""),
                      "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "format_version": _FORMAT_VERSION,
        "config_digest": model.config.digest(),
        "config": model.config.to_dict(),
        "dataset_ids": model.dataset_ids,
        "norm_dataset_ids": model.norm_dataset_ids,
        "taxonomy": model.taxonomy,
        "metadata": model.metadata,
        "arrays": index,
    }
    head_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = _PREAMBLE.pack(_MAGIC, _FORMAT_VERSION, len(head_bytes)) + head_bytes + b"".join(blobs)
    path = Path(path)
    path.write_bytes(payload + hashlib.sha256(payload).digest())
    return path


def read_checkpoint_header(path: str | Path) -> dict:
    return _read(Path(path))[0]


def _read(path: Path) -> tuple[dict, bytes]:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _PREAMBLE.size + 32:
        raise CheckpointError(f"{path}: truncated checkpoint")
    payload, checksum = raw[:-32], raw[-32:]
    magic, version, head_len = _PREAMBLE.unpack_from(payload)
    if magic != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != _FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    if hashlib.sha256(payload).digest() != checksum:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    start = _PREAMBLE.size
    header = json.loads(payload[start:start + head_len].decode("utf-8"))
    return header, payload[start + head_len:]


def load_checkpoint(path: str | Path, expected: EncoderConfig | None = None) -> SfxModel:
    """Rebuild a model from ``save_checkpoint`` output.

    ``expected`` guards against loading weights for a different front end or
    architecture: its digest must match the stored one.
    """
    header, body = _read(Path(path))
    config = EncoderConfig.from_dict(header["config"])
    if config.digest() != header["config_digest"]:
        raise CheckpointError(f"{path}: header config does not match its digest")
    if expected is not None and expected.digest() != header["config_digest"]:
        raise CheckpointError(f"{path}: config digest {header['config_digest']} does not match "
                              f"expected {expected.digest()}")
    # JSON objects are key-sorted on disk; head order comes from the id list
    taxonomy = {ds: header["taxonomy"][ds] for ds in header["dataset_ids"]}
    model = SfxModel(taxonomy, config, header["norm_dataset_ids"] or None)
    model.metadata = header["metadata"]
    arrays = named_arrays(model)
    stored = {item["name"]: item for item in header["arrays"]}
    if set(stored) != set(arrays):
        raise CheckpointError(f"{path}: array names do not match the architecture")
    with torch.no_grad():
        for name, tensor in arrays.items():
            item = stored[name]
            end = item["offset"] + item["nbytes"]
            if end > len(body):
                raise CheckpointError(f"{path}: array {name} runs past end of file")
            values = np.frombuffer(body[item["offset"]:end], dtype="<f4").reshape(item["shape"])
            tensor.copy_(torch.from_numpy(values.copy()).to(tensor.dtype))
    return model


def clone_state(model: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def state_equal(a: dict[str, torch.Tensor], b: dict[str, torch.Tensor]) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)
