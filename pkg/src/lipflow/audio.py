"""WAV ingestion and log-mel speech features aligned to video frames."""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

SUPPORTED_RATES = (16000, 22050, 44100, 48000)
LOG_FLOOR_POWER = 1e-10


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read 16-bit PCM mono WAV into float samples in [-1, 1]."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters equally spaced on the mel scale, shape ``(n_mels, n_fft // 2 + 1)``."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    bin_mel = hz_to_mel(np.fft.rfftfreq(n_fft, 1.0 / sample_rate))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_mel[None] - lo) / (mid - lo)
    down = (hi - bin_mel[None]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def logmel_features(
    samples: np.ndarray,
    sample_rate: int,
    fps: float,
    n_frames: int,
    n_mels: int = 32,
    window: int = 2,
) -> np.ndarray:
    """Log-mel features ``(n_frames, window, n_mels)``.

    Each video frame's audio span is split into ``window`` equal sub-windows;
    each sub-window gets a Hann-windowed power spectrum pooled by the mel
    filterbank. Energies below ``LOG_FLOOR_POWER`` are floored, so digital
    silence maps to ``log(LOG_FLOOR_POWER)`` everywhere.
    """
    if sample_rate not in SUPPORTED_RATES:
        raise ValueError(f"unsupported sample rate {sample_rate}; expected one of {SUPPORTED_RATES}")
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected mono samples as a 1-D array")
    if x.size == 0:
        raise ValueError("empty audio")
    seg = int(round(sample_rate / (fps * window)))
    needed = int(np.ceil(n_frames * window * sample_rate / (fps * window)))
    if x.size < needed:
        raise ValueError(
            f"audio too short: {x.size / sample_rate:.3f}s for {n_frames} frames at {fps} fps"
        )
    n_fft = 1 << int(np.ceil(np.log2(seg)))
    starts = np.round(np.arange(n_frames * window) * sample_rate / (fps * window)).astype(int)
    frames = np.zeros((len(starts), seg))
    for k, s in enumerate(starts):
        chunk = x[s:s + seg]
        frames[k, :len(chunk)] = chunk
    power = np.abs(np.fft.rfft(frames * np.hanning(seg), n=n_fft)) ** 2
    mel = power @ mel_filterbank(n_mels, n_fft, sample_rate).T
    out = np.log(np.maximum(mel, LOG_FLOOR_POWER))
    return out.reshape(n_frames, window, n_mels).astype(np.float32)


def envelope_to_audio(envelope: np.ndarray, fps: float, sample_rate: int = 16000, carrier_hz: float = 220.0) -> np.ndarray:
    """An amplitude-modulated tone following a per-frame envelope, for demos."""
    env = np.asarray(envelope, dtype=np.float64)
    n = int(np.ceil(len(env) * sample_rate / fps))
    t = np.arange(n) / sample_rate
    amp = np.interp(t * fps, np.arange(len(env)), env)
    return 0.5 * amp * np.sin(2 * np.pi * carrier_hz * t)
