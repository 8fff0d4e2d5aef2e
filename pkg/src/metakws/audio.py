"""WAV decoding, silence synthesis and MFCC features.

Features are (frames x coefficients) float32 arrays; for 1-second clips with
30 ms / 10 ms framing the shape is (98, 40).
"""

import hashlib
import io
import json
import os
import wave
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Optional, Tuple, Union

import numpy as np
import scipy.fft

SAMPLE_RATE = 16000
CLIP_SAMPLES = 16000

PathLike = Union[str, os.PathLike]


class AudioFormatError(ValueError):
    """Raised for WAV files outside 16 kHz / mono / 16-bit PCM."""

    def __init__(self, prop: str, detail: str):
        self.prop = prop
        super().__init__(f"{prop}: {detail}")


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.sample_rate != SAMPLE_RATE:
            raise AudioFormatError("sample_rate", f"expected {SAMPLE_RATE}, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples contain non-finite values")

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class FrontendConfig:
    frame_len: int = 480
    frame_step: int = 160
    fft_size: int = 512
    n_mels: int = 40
    n_coeffs: int = 40
    mel_low: float = 20.0
    mel_high: float = 7600.0
    log_floor: float = 1e-10
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.frame_len > self.fft_size:
            raise ValueError("frame_len must be <= fft_size")
        if self.frame_step > self.frame_len:
            raise ValueError("frame_step must be <= frame_len")
        if self.n_mels < self.n_coeffs:
            raise ValueError("n_mels must be >= n_coeffs")
        if not 0 <= self.mel_low < self.mel_high <= self.sample_rate / 2:
            raise ValueError("mel range must satisfy 0 <= low < high <= sample_rate / 2")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def mel_range(self) -> Tuple[float, float]:
        return self.mel_low, self.mel_high

    def n_frames(self, n_samples: int = CLIP_SAMPLES) -> int:
        return (n_samples - self.frame_len) // self.frame_step + 1

    def feature_shape(self) -> Tuple[int, int]:
        return self.n_frames(), self.n_coeffs

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:16]


def fit_length(samples: np.ndarray, length: int = CLIP_SAMPLES) -> np.ndarray:
    """Zero-pad or truncate at the end to exactly ``length`` samples."""
    if len(samples) >= length:
        return samples[:length]
    return np.concatenate([samples, np.zeros(length - len(samples), dtype=samples.dtype)])


def decode_wav(data: bytes, length: Optional[int] = CLIP_SAMPLES, source: str = "<bytes>") -> AudioClip:
    try:
        with wave.open(io.BytesIO(data), "rb") as wf:
            rate, channels, width = wf.getframerate(), wf.getnchannels(), wf.getsampwidth()
            frames = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        # the stdlib reader rejects anything that is not integer PCM
        raise AudioFormatError("encoding", f"{source}: {exc}") from None
    except EOFError:
        raise AudioFormatError("encoding", f"{source}: truncated file") from None
    if channels != 1:
        raise AudioFormatError("channels", f"{source}: expected mono, got {channels} channels")
    if width != 2:
        raise AudioFormatError("sample_width", f"{source}: expected 16-bit PCM, got {8 * width}-bit")
    if rate != SAMPLE_RATE:
        raise AudioFormatError("sample_rate", f"{source}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
    pcm = np.frombuffer(frames, dtype="<i2").astype(np.float32) / 32768.0
    if length is not None:
        pcm = fit_length(pcm, length)
    return AudioClip(pcm, rate)


def load_wav(path: PathLike, length: Optional[int] = CLIP_SAMPLES) -> AudioClip:
    """Read a 16 kHz mono 16-bit PCM WAV file.

    Clips are padded or truncated to ``length`` samples; pass ``length=None``
    to keep the native length (used for background-noise recordings).
    """
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_wav(data, length=length, source=str(path))


def write_wav(path: PathLike, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def synthesize_silence(noise: AudioClip, rng: np.random.Generator,
                       gain_range: Tuple[float, float] = (0.0, 1.0)) -> AudioClip:
    """A random 1-second crop of ``noise`` scaled by a uniform random gain."""
    start, gain = draw_silence_params(len(noise.samples), rng, gain_range)
    return render_silence(noise, start, gain)


def draw_silence_params(noise_len: int, rng: np.random.Generator,
                        gain_range: Tuple[float, float] = (0.0, 1.0)) -> Tuple[int, float]:
    if noise_len < CLIP_SAMPLES:
        raise ValueError(f"noise has {noise_len} samples, need at least {CLIP_SAMPLES}")
    start = int(rng.integers(0, noise_len - CLIP_SAMPLES + 1))
    gain = float(rng.uniform(gain_range[0], gain_range[1]))
    return start, gain


def render_silence(noise: AudioClip, start: int, gain: float) -> AudioClip:
    crop = noise.samples[start : start + CLIP_SAMPLES]
    if len(crop) != CLIP_SAMPLES:
        raise ValueError(f"crop at {start} runs past the end of the noise")
    return AudioClip((crop.astype(np.float64) * gain).astype(np.float32))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """(n_mels, fft_size // 2 + 1) matrix of unit-peak triangular filters."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.mel_low), hz_to_mel(cfg.mel_high), cfg.n_mels + 2))
    freqs = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=8)
def _window(frame_len: int) -> np.ndarray:
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(frame_len) / frame_len)


def frame_signal(samples: np.ndarray, frame_len: int, frame_step: int) -> np.ndarray:
    n = (len(samples) - frame_len) // frame_step + 1
    if n < 1:
        raise ValueError(f"signal of {len(samples)} samples is shorter than one frame")
    return np.lib.stride_tricks.sliding_window_view(samples, frame_len)[::frame_step][:n]


def mfcc(clip: AudioClip, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """MFCC feature map of a clip, shape (n_frames, n_coeffs), float32."""
    x = np.asarray(clip.samples, dtype=np.float64)
    frames = frame_signal(x, cfg.frame_len, cfg.frame_step) * _window(cfg.frame_len)
    power = np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1)) ** 2
    mel = power @ mel_filterbank(cfg).T
    logmel = np.log(np.maximum(mel, cfg.log_floor))
    cep = scipy.fft.dct(logmel, type=2, norm="ortho", axis=1)[:, : cfg.n_coeffs]
    return cep.astype(np.float32)
