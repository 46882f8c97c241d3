"""Deterministic synthetic sound corpora: tone stacks over band-limited noise."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import soundfile as sf
import yaml

from .ingest import TARGET_RATE, ManifestEntry, write_manifest

FREQ_JITTER = 0.03
AMP_JITTER = 0.20


@dataclass
class ClassSignature:
    name: str
    tones: tuple[float, ...]
    noise_band: tuple[float, float] = (0.0, 0.0)
    amplitude: float = 0.5
    noise_level: float = 0.1

    def key(self):
        return (tuple(sorted(self.tones)), tuple(self.noise_band))


@dataclass
class DatasetSpec:
    dataset_id: str
    classes: list[ClassSignature]
    items_per_class: int = 10
    duration_s: float = 2.5
    label_noise_rate: float = 0.0
    dc_offset: float = 0.0
    gain: float = 1.0

    def __post_init__(self):
        self.classes = [c if isinstance(c, ClassSignature) else
                        ClassSignature(**{**c, "tones": tuple(c["tones"]),
                                          "noise_band": tuple(c.get("noise_band", (0.0, 0.0)))})
                        for c in self.classes]
        if not 0 <= self.label_noise_rate < 0.5:
            raise ValueError("label_noise_rate must lie in [0, 0.5)")
        keys = [c.key() for c in self.classes]
        if len(set(keys)) != len(keys):
            raise ValueError(f"{self.dataset_id}: class signatures must be pairwise distinct")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ValueError(f"{self.dataset_id}: duplicate class names")


@dataclass
class SynthSpec:
    datasets: list[DatasetSpec] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.datasets = [d if isinstance(d, DatasetSpec) else DatasetSpec(**d)
                         for d in self.datasets]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, path: str | Path) -> SynthSpec:
        return cls(**yaml.safe_load(Path(path).read_text(encoding="utf-8")))

    def dump(self, path: str | Path) -> Path:
        path = Path(path)
        d = self.to_dict()
        for ds in d["datasets"]:
            for c in ds["classes"]:
                c["tones"], c["noise_band"] = list(c["tones"]), list(c["noise_band"])
        path.write_text(yaml.safe_dump(d, sort_keys=False), encoding="utf-8")
        return path


def random_signatures(n_classes: int, seed, n_tones: int = 2, fmin: float = 200.0,
                      fmax: float = 8000.0, prefix: str = "class") -> list[ClassSignature]:
    """Well separated signatures: tones on a log grid plus a noise band per class."""
    rng = np.random.default_rng(seed)
    grid = np.geomspace(fmin, fmax, 4 * n_classes * n_tones)
    picks = rng.permutation(len(grid))[: n_classes * n_tones].reshape(n_classes, n_tones)
    sigs = []
    for i, row in enumerate(picks):
        tones = tuple(float(round(grid[j], 1)) for j in sorted(row))
        lo = float(rng.uniform(500.0, 12000.0))
        sigs.append(ClassSignature(f"{prefix}{i}", tones, (round(lo, 1), round(lo * 1.5, 1))))
    return sigs


def _band_noise(n: int, band: tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    lo, hi = band
    if hi <= lo:
        return np.zeros(n)
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / TARGET_RATE)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    x = np.fft.irfft(spec, n)
    peak = np.max(np.abs(x))
    return x / peak if peak > 0 else x


def render_item(sig: ClassSignature, duration_s: float, rng: np.random.Generator,
                dc_offset: float = 0.0, gain: float = 1.0) -> np.ndarray:
    n = int(round(duration_s * TARGET_RATE))
    t = np.arange(n) / TARGET_RATE
    x = np.zeros(n)
    for f in sig.tones:
        freq = f * (1 + rng.uniform(-FREQ_JITTER, FREQ_JITTER))
        amp = sig.amplitude * (1 + rng.uniform(-AMP_JITTER, AMP_JITTER))
        x += amp * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    noise_amp = sig.noise_level * (1 + rng.uniform(-AMP_JITTER, AMP_JITTER))
    x += noise_amp * _band_noise(n, sig.noise_band, rng)
    x = gain * x + dc_offset
    peak = np.max(np.abs(x))
    if peak > 0.99:
        x *= 0.99 / peak
    return x


def synth_corpus(spec: SynthSpec, out_dir: str | Path, manifest_name: str = "manifest.jsonl") -> Path:
    """Render every item to 16-bit WAV and write one manifest for all datasets."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(spec.seed)
    entries = []
    for ds, ds_seq in zip(spec.datasets, root.spawn(len(spec.datasets))):
        ds_dir = out_dir / ds.dataset_id
        ds_dir.mkdir(exist_ok=True)
        label_rng = np.random.default_rng(ds_seq.spawn(1)[0])
        item_seqs = ds_seq.spawn(len(ds.classes) * ds.items_per_class)
        for c_idx, sig in enumerate(ds.classes):
            for i in range(ds.items_per_class):
                rng = np.random.default_rng(item_seqs[c_idx * ds.items_per_class + i])
                audio = render_item(sig, ds.duration_s, rng, ds.dc_offset, ds.gain)
                rel = f"{ds.dataset_id}/{sig.name}_{i:04d}.wav"
                sf.write(out_dir / rel, audio, TARGET_RATE, subtype="PCM_16")
                label = sig.name
                if ds.label_noise_rate and label_rng.random() < ds.label_noise_rate:
                    others = [c.name for c in ds.classes if c.name != sig.name]
                    if others:
                        label = others[int(label_rng.integers(len(others)))]
                entries.append(ManifestEntry(ds.dataset_id, rel, label,
                                             duration_s=len(audio) / TARGET_RATE))
    return write_manifest(entries, out_dir / manifest_name)


def simple_spec(dataset_ids: Sequence[str], n_classes: int = 4, items_per_class: int = 10,
                duration_s: float = 2.5, seed: int = 0, label_noise: dict | None = None) -> SynthSpec:
    """Spec with independent random signatures per dataset."""
    label_noise = label_noise or {}
    datasets = [DatasetSpec(ds, random_signatures(n_classes, [seed, i], prefix=f"{ds.lower()}_"),
                            items_per_class, duration_s, label_noise.get(ds, 0.0))
                for i, ds in enumerate(dataset_ids)]
    return SynthSpec(datasets, seed)
