"""Log-mel front end and fixed-size patch extraction.

Frames use a 2048-sample Hann window with a 1024-sample hop at 44.1 kHz
(about 46 ms / 23 ms). Patches are 100 frames x 96 mel bins, min-max
normalized to [0, 1].
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import get_window

from .ingest import TARGET_RATE, AudioClip

N_MELS = 96
WINDOW = 2048
HOP = 1024
PATCH_FRAMES = 100
LOG_FLOOR = 1e-10
FMIN = 0.0
FMAX = TARGET_RATE / 2


class FeatureError(ValueError):
    pass


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = WINDOW, rate: int = TARGET_RATE,
                   fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Triangular filters with unit peak, centers equally spaced on the HTK mel scale.

    Returns an ``(n_mels, n_fft // 2 + 1)`` matrix.
    """
    freqs = np.linspace(0.0, rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


_FILTERBANK = mel_filterbank()
_HANN = get_window("hann", WINDOW, fftbins=True)


def frame_count(n_samples: int, window: int = WINDOW, hop: int = HOP) -> int:
    if n_samples < window:
        return 0
    return 1 + (n_samples - window) // hop


def mel_spectrogram(clip: AudioClip | np.ndarray) -> np.ndarray:
    """Log-compressed mel magnitude spectrogram, shape ``(frames, 96)``.

    No centre padding: ``frames = 1 + (N - 2048) // 1024``.
    """
    if isinstance(clip, AudioClip):
        if clip.rate != TARGET_RATE:
            raise FeatureError(f"expected {TARGET_RATE} Hz audio, got {clip.rate}")
        x = clip.samples
    else:
        x = clip
    x = np.asarray(x, dtype=np.float64)
    n_frames = frame_count(len(x))
    if n_frames == 0:
        raise FeatureError(f"clip of {len(x)} samples is shorter than one {WINDOW}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(x, WINDOW)[::HOP][:n_frames]
    mag = np.abs(np.fft.rfft(frames * _HANN, axis=1))
    return np.log10(mag @ _FILTERBANK.T + LOG_FLOOR)


def minmax_normalize(spec: np.ndarray) -> np.ndarray:
    spec = np.asarray(spec, dtype=np.float64)
    lo, hi = spec.min(), spec.max()
    if hi == lo:
        return np.zeros_like(spec)
    return (spec - lo) / (hi - lo)


def _tile(spec: np.ndarray, length: int) -> np.ndarray:
    reps = -(-length // len(spec))
    return np.concatenate([spec] * reps, axis=0)[:length]


def random_patch(spec: np.ndarray, length: int = PATCH_FRAMES,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """One ``(length, bins)`` crop at a uniform start; short inputs are tiled in time."""
    rng = np.random.default_rng() if rng is None else rng
    if len(spec) <= length:
        return minmax_normalize(_tile(spec, length))
    start = int(rng.integers(0, len(spec) - length + 1))
    return minmax_normalize(spec[start:start + length])


def patch_starts(n_frames: int, length: int = PATCH_FRAMES, overlap: float = 0.5) -> list[int]:
    if n_frames < length:
        return [0]
    hop = max(1, int(round(length * (1.0 - overlap))))
    return list(range(0, n_frames - length + 1, hop))


def sliding_patches(spec: np.ndarray, length: int = PATCH_FRAMES,
                    overlap: float = 0.5) -> list[np.ndarray]:
    if len(spec) < length:
        return [minmax_normalize(_tile(spec, length))]
    return [minmax_normalize(spec[s:s + length]) for s in patch_starts(len(spec), length, overlap)]


# -- on-disk cache -------------------------------------------------------------

_CACHE_MAGIC = b"SFXMEL\x00\x00"
_CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<8sIIIII")


@dataclass
class SpectrogramCache:
    """Normalized mel matrices stored per conditioned-audio content hash.

    Layout (little-endian): magic, version, frames, bins, hop, window as uint32,
    then ``frames * bins`` float32 values in row-major order.
    """

    directory: Path

    @classmethod
    def from_env(cls) -> SpectrogramCache | None:
        path = os.environ.get("SFX_CACHE_DIR")
        return cls(Path(path)) if path else None

    @staticmethod
    def key(samples: np.ndarray) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(samples, dtype="<f8").tobytes())
        h.update(f"rate={TARGET_RATE};win={WINDOW};hop={HOP};mels={N_MELS};"
                 f"fmin={FMIN};fmax={FMAX};floor={LOG_FLOOR};v={_CACHE_VERSION}".encode())
        return h.hexdigest()

    def path_for(self, key: str) -> Path:
        return self.directory / key[:2] / f"{key}.mel"

    def load(self, key: str) -> np.ndarray | None:
        path = self.path_for(key)
        if not path.exists():
            return None
        return read_mel(path)

    def store(self, key: str, spec: np.ndarray) -> Path:
        path = self.path_for(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        write_mel(tmp, spec)
        os.replace(tmp, path)
        return path


def write_mel(path: str | Path, spec: np.ndarray) -> None:
    spec = np.ascontiguousarray(spec, dtype="<f4")
    frames, bins = spec.shape
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(_CACHE_MAGIC, _CACHE_VERSION, frames, bins, HOP, WINDOW))
        fh.write(spec.tobytes())


def read_mel(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _CACHE_HEADER.size:
        raise FeatureError(f"truncated spectrogram cache file {path}")
    magic, version, frames, bins, hop, window = _CACHE_HEADER.unpack_from(raw)
    if magic != _CACHE_MAGIC or version != _CACHE_VERSION:
        raise FeatureError(f"{path} is not a version-{_CACHE_VERSION} spectrogram cache file")
    if (hop, window) != (HOP, WINDOW):
        raise FeatureError(f"{path}: cached with hop={hop} window={window}")
    body = raw[_CACHE_HEADER.size:]
    if len(body) != frames * bins * 4:
        raise FeatureError(f"truncated spectrogram cache file {path}")
    return np.frombuffer(body, dtype="<f4").reshape(frames, bins).astype(np.float64)


def file_spectrogram(clip: AudioClip, cache: SpectrogramCache | None = None) -> np.ndarray:
    """Min-max normalized log-mel of a whole clip, through the cache when given.

    Values are rounded to float32 either way so cached and fresh results agree.
    """
    if cache is None:
        return _f32(minmax_normalize(mel_spectrogram(clip)))
    key = cache.key(clip.samples)
    spec = cache.load(key)
    if spec is None:
        spec = _f32(minmax_normalize(mel_spectrogram(clip)))
        cache.store(key, spec)
    return spec


def _f32(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)
