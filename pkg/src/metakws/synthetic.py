"""Deterministic synthetic corpus in the Speech Commands v0.02 directory layout.

Every keyword gets a fixed "pronunciation": a sequence of voiced segments
(harmonic source shaped by gliding formants) and fricative bursts (band-limited
noise). Utterances vary by speaker pitch, vocal-tract scale, speaking rate,
onset time, loudness and background noise. The result is not speech, but it
exercises the whole pipeline with realistic file formats and class structure
when the real corpus is not available.
"""

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .audio import CLIP_SAMPLES, SAMPLE_RATE, write_wav
from .dataset import KEYWORDS_V2

NOISE_KINDS = ("white_noise", "pink_noise", "brown_noise", "hum", "running_tap", "babble")


@dataclass
class Segment:
    kind: str  # "voiced" or "fricative"
    duration: float
    f1: tuple = (0.0, 0.0)
    f2: tuple = (0.0, 0.0)
    center: float = 0.0
    bandwidth: float = 0.0


@dataclass
class Speaker:
    ident: str
    f0: float
    tract_scale: float
    rate: float
    breathiness: float


def _word_seed(word: str, seed: int) -> int:
    digest = hashlib.sha256(f"{seed}:{word}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def word_template(word: str, seed: int = 0) -> List[Segment]:
    rng = np.random.default_rng(_word_seed(word, seed))
    segments = []
    for _ in range(int(rng.integers(1, 4))):
        if rng.random() < 0.45:
            segments.append(Segment("fricative", float(rng.uniform(0.04, 0.10)),
                                    center=float(rng.uniform(2200, 6500)),
                                    bandwidth=float(rng.uniform(400, 1800))))
        f1 = (float(rng.uniform(280, 850)), float(rng.uniform(280, 850)))
        f2 = (float(rng.uniform(850, 2500)), float(rng.uniform(850, 2500)))
        segments.append(Segment("voiced", float(rng.uniform(0.09, 0.22)), f1=f1, f2=f2))
    if rng.random() < 0.3:
        segments.append(Segment("fricative", float(rng.uniform(0.04, 0.09)),
                                center=float(rng.uniform(2200, 6500)),
                                bandwidth=float(rng.uniform(400, 1800))))
    return segments


def make_speakers(n: int, rng: np.random.Generator) -> List[Speaker]:
    return [Speaker(ident=f"{int(rng.integers(0, 2**32)):08x}",
                    f0=float(rng.uniform(85, 260)),
                    tract_scale=float(rng.uniform(0.85, 1.15)),
                    rate=float(rng.uniform(0.8, 1.25)),
                    breathiness=float(rng.uniform(0.0, 0.25)))
            for _ in range(n)]


def _envelope(n: int, ramp: int) -> np.ndarray:
    env = np.ones(n)
    ramp = min(ramp, n // 2)
    if ramp > 0:
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = r
        env[n - ramp:] = r[::-1]
    return env


def _band_noise(n: int, center: float, bandwidth: float, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    spec *= np.exp(-0.5 * ((freqs - center) / bandwidth) ** 2)
    out = np.fft.irfft(spec, n)
    return out / (np.std(out) + 1e-12)


def _voiced(seg: Segment, n: int, spk: Speaker, rng: np.random.Generator) -> np.ndarray:
    frac = np.linspace(0.0, 1.0, n)
    f0 = spk.f0 * (1.0 + 0.08 * (0.5 - frac)) * (1.0 + 0.01 * rng.standard_normal())
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    f1 = spk.tract_scale * (seg.f1[0] + (seg.f1[1] - seg.f1[0]) * frac)
    f2 = spk.tract_scale * (seg.f2[0] + (seg.f2[1] - seg.f2[0]) * frac)
    f3 = spk.tract_scale * 2750.0
    n_harm = int(7000 // (spk.f0 * 1.05))
    k = np.arange(1, n_harm + 1)[:, None]
    hf = k * f0[None, :]
    amp = (np.exp(-0.5 * ((hf - f1) / 90.0) ** 2)
           + 0.7 * np.exp(-0.5 * ((hf - f2) / 120.0) ** 2)
           + 0.25 * np.exp(-0.5 * ((hf - f3) / 180.0) ** 2)
           + 0.02 / k)
    out = np.sum(amp * np.sin(k * phase[None, :]), axis=0)
    out /= np.std(out) + 1e-12
    if spk.breathiness:
        out += spk.breathiness * rng.standard_normal(n)
    return out


def render_utterance(word: str, spk: Speaker, rng: np.random.Generator, seed: int = 0,
                     noise_bank: Optional[Dict[str, np.ndarray]] = None) -> np.ndarray:
    """One second of audio for ``word`` spoken by ``spk``."""
    segments = word_template(word, seed)
    rate = spk.rate * float(rng.uniform(0.92, 1.08))
    lens = [max(int(s.duration * rate * SAMPLE_RATE), 64) for s in segments]
    total = sum(lens)
    if total > CLIP_SAMPLES - 1600:
        scale = (CLIP_SAMPLES - 1600) / total
        lens = [max(int(n * scale), 64) for n in lens]
        total = sum(lens)
    onset = int(rng.integers(800, CLIP_SAMPLES - total - 800 + 1))
    signal = np.zeros(CLIP_SAMPLES)
    pos = onset
    for seg, n in zip(segments, lens):
        if seg.kind == "voiced":
            part = _voiced(seg, n, spk, rng)
        else:
            part = 0.5 * _band_noise(n, seg.center * spk.tract_scale ** 0.5, seg.bandwidth, rng)
        signal[pos : pos + n] += part * _envelope(n, int(0.015 * SAMPLE_RATE))
        pos += n
    signal *= float(rng.uniform(0.05, 0.35)) / (np.max(np.abs(signal)) + 1e-12)
    if noise_bank:
        kind = sorted(noise_bank)[int(rng.integers(len(noise_bank)))]
        noise = noise_bank[kind]
        start = int(rng.integers(0, len(noise) - CLIP_SAMPLES + 1))
        snr_db = float(rng.uniform(5.0, 30.0))
        sig_rms = np.sqrt(np.mean(signal[onset:pos] ** 2)) + 1e-12
        nz = noise[start : start + CLIP_SAMPLES]
        nz_rms = np.sqrt(np.mean(nz ** 2)) + 1e-12
        signal += nz * (sig_rms / nz_rms) * 10 ** (-snr_db / 20.0)
    return np.clip(signal, -0.99, 0.99)


def make_noise(kind: str, seconds: float, rng: np.random.Generator) -> np.ndarray:
    n = int(seconds * SAMPLE_RATE)
    white = rng.standard_normal(n)
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    freqs[0] = freqs[1]
    if kind == "white_noise":
        out = white
    elif kind == "pink_noise":
        out = np.fft.irfft(np.fft.rfft(white) / np.sqrt(freqs), n)
    elif kind == "brown_noise":
        out = np.fft.irfft(np.fft.rfft(white) / freqs, n)
    elif kind == "hum":
        t = np.arange(n) / SAMPLE_RATE
        out = sum(np.sin(2 * np.pi * 50 * h * t + rng.uniform(0, 2 * np.pi)) / h for h in range(1, 8))
        out = out + 0.3 * white
    elif kind == "running_tap":
        out = _band_noise(n, 3000.0, 1500.0, rng) * (1.0 + 0.5 * np.sin(2 * np.pi * 3.0 * np.arange(n) / SAMPLE_RATE))
    elif kind == "babble":
        spk = make_speakers(8, rng)
        out = np.zeros(n)
        for i in range(0, n - CLIP_SAMPLES, CLIP_SAMPLES // 2):
            word = KEYWORDS_V2[int(rng.integers(len(KEYWORDS_V2)))]
            out[i : i + CLIP_SAMPLES] += render_utterance(word, spk[int(rng.integers(8))], rng, seed=99)
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    out = out - np.mean(out)
    return 0.3 * out / (np.max(np.abs(out)) + 1e-12)


def generate_corpus(root, clips_per_keyword=120, seed: int = 0,
                    keywords: Sequence[str] = KEYWORDS_V2, noise_seconds: float = 20.0,
                    n_speakers: int = 300) -> Path:
    """Write ``<root>/<keyword>/<speaker>_nohash_<n>.wav`` plus ``_background_noise_``.

    ``clips_per_keyword`` is an int or a keyword -> count mapping. Output is a
    pure function of the arguments.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    speakers = make_speakers(n_speakers, rng)
    noise_dir = root / "_background_noise_"
    noise_dir.mkdir(parents=True, exist_ok=True)
    bank = {}
    for i, kind in enumerate(NOISE_KINDS):
        bank[kind] = make_noise(kind, noise_seconds, np.random.default_rng([seed, 1000 + i]))
        write_wav(noise_dir / f"{kind}.wav", bank[kind])
    for wi, word in enumerate(keywords):
        count = clips_per_keyword[word] if isinstance(clips_per_keyword, dict) else clips_per_keyword
        wrng = np.random.default_rng([seed, wi])
        kdir = root / word
        kdir.mkdir(parents=True, exist_ok=True)
        reps: Dict[str, int] = {}
        for _ in range(count):
            spk = speakers[int(wrng.integers(len(speakers)))]
            rep = reps.get(spk.ident, 0)
            reps[spk.ident] = rep + 1
            audio = render_utterance(word, spk, wrng, seed=seed, noise_bank=bank)
            write_wav(kdir / f"{spk.ident}_nohash_{rep}.wav", audio)
    return root
