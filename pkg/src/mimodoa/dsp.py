"""STFT encoder/decoder and WAV I/O.

Shapes follow ``[channels, frames, bins]`` for spectrograms and
``[channels, samples]`` for waveforms.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import InputError, WavIOError

DEFAULT_FS = 16000
FRAME_SIZE = 512
HOP = 256


@dataclass
class MultichannelWaveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_FS

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2:
            raise InputError(f"waveform must be [channels, samples], got shape {s.shape}")
        if self.sample_rate <= 0:
            raise InputError("sample_rate must be positive")
        if not np.all(np.isfinite(s)):
            raise InputError("waveform contains non-finite samples")
        self.samples = s

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]


@dataclass
class ComplexSpectrogram:
    values: np.ndarray
    frame_size: int = FRAME_SIZE
    hop: int = HOP
    num_samples: int | None = None

    def __post_init__(self):
        if self.values.ndim != 3:
            raise InputError("spectrogram values must be [channels, frames, bins]")
        if self.values.shape[2] != self.frame_size // 2 + 1:
            raise InputError(
                f"{self.values.shape[2]} bins inconsistent with frame_size {self.frame_size}"
            )
        if self.values.shape[1] < 1:
            raise InputError("spectrogram needs at least one frame")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]

    @property
    def bins(self) -> int:
        return self.values.shape[2]


def hamming(n: int) -> np.ndarray:
    """Periodic (DFT-even) Hamming window."""
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(n) / n)


def num_frames(num_samples: int, frame_size: int = FRAME_SIZE, hop: int = HOP) -> int:
    if num_samples < frame_size:
        return 0
    return 1 + (num_samples - frame_size) // hop


def frame_signal(x: np.ndarray, frame_size: int = FRAME_SIZE, hop: int = HOP) -> np.ndarray:
    """View ``x[..., samples]`` as ``[..., frames, frame_size]``; the trailing partial frame is dropped."""
    n = num_frames(x.shape[-1], frame_size, hop)
    if n == 0:
        raise InputError(f"signal of {x.shape[-1]} samples is shorter than one frame ({frame_size})")
    win = np.lib.stride_tricks.sliding_window_view(x, frame_size, axis=-1)
    return win[..., : (n - 1) * hop + 1 : hop, :]


def stft(wave: MultichannelWaveform | np.ndarray, frame_size: int = FRAME_SIZE,
         hop: int | None = None) -> ComplexSpectrogram:
    if hop is None:
        hop = frame_size // 2
    if 2 * hop != frame_size:
        raise InputError("only 50% overlap is supported (hop = frame_size / 2)")
    x = wave.samples if isinstance(wave, MultichannelWaveform) else np.atleast_2d(wave)
    frames = frame_signal(np.asarray(x, dtype=np.float64), frame_size, hop)
    values = np.fft.rfft(frames * hamming(frame_size), axis=-1)
    return ComplexSpectrogram(values, frame_size, hop, x.shape[-1])


def istft(spec: ComplexSpectrogram, sample_rate: int = DEFAULT_FS) -> MultichannelWaveform:
    """Overlap-add of the inverse DFT frames, divided by the accumulated window sum.

    Samples outside every frame (or where the window sum vanishes) are zero.
    """
    n, hop = spec.frame_size, spec.hop
    frames = np.fft.irfft(spec.values, n=n, axis=-1)
    length = (spec.frames - 1) * hop + n
    if spec.num_samples is not None:
        length = max(length, spec.num_samples)
    out = np.zeros((spec.channels, length))
    wsum = np.zeros(length)
    w = hamming(n)
    for t in range(spec.frames):
        out[:, t * hop : t * hop + n] += frames[:, t]
        wsum[t * hop : t * hop + n] += w
    nz = wsum > 1e-12
    out[:, nz] /= wsum[nz]
    out[:, ~nz] = 0.0
    return MultichannelWaveform(out, sample_rate)


def read_wav(path) -> MultichannelWaveform:
    path = Path(path)
    try:
        fs, data = wavfile.read(path)
    except FileNotFoundError:
        raise WavIOError(f"{path}: no such file") from None
    except (ValueError, EOFError, OSError) as e:
        raise WavIOError(f"{path}: cannot parse WAV ({e})") from e
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise WavIOError(f"{path}: unsupported sample format {data.dtype} (need PCM16 or float32)")
    x = x[None, :] if x.ndim == 1 else x.T
    return MultichannelWaveform(np.ascontiguousarray(x), int(fs))


def write_wav(path, wave: MultichannelWaveform, subtype: str = "float32") -> None:
    """Write ``wave`` as float32 (lossless for float32 data) or PCM16."""
    x = wave.samples.T
    if subtype == "float32":
        data = x.astype("<f4")
    elif subtype == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    else:
        raise WavIOError(f"unsupported WAV subtype {subtype!r}")
    if data.shape[1] == 1:
        data = data[:, 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, wave.sample_rate, data)
