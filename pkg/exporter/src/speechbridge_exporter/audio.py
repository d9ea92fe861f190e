"""WAV ingestion built on the stdlib wave module.

Handles the integer PCM widths wave itself accepts (8/16/24/32 bit),
averages channels to mono, and normalizes to float64 in [-1, 1].
Anything wave cannot parse surfaces as DecodeError so the exporter can
skip the file with a logged reason instead of dying mid-corpus.
"""

from __future__ import annotations

import wave

import numpy as np


class DecodeError(ValueError):
    """The audio file could not be decoded."""


def read_wav(path) -> tuple:
    """Decode a PCM WAV file: (mono float64 signal in [-1, 1], sample rate)."""
    try:
        with wave.open(str(path), "rb") as w:
            n_channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            n_frames = w.getnframes()
            raw = w.readframes(n_frames)
    except (wave.Error, EOFError, OSError) as e:
        raise DecodeError(f"{path}: {e}") from e

    if width == 1:
        # 8-bit WAV is unsigned by convention
        samples = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
        samples = (samples - 128.0) / 128.0
    elif width == 2:
        samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 3:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        val = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        val = np.where(val >= 1 << 23, val - (1 << 24), val)
        samples = val.astype(np.float64) / float(1 << 23)
    elif width == 4:
        samples = np.frombuffer(raw, dtype="<i4").astype(np.float64) / float(1 << 31)
    else:
        raise DecodeError(f"{path}: unsupported sample width {width}")

    if n_channels < 1:
        raise DecodeError(f"{path}: no channels")
    if n_channels > 1:
        usable = (len(samples) // n_channels) * n_channels
        samples = samples[:usable].reshape(-1, n_channels).mean(axis=1)
    if rate <= 0:
        raise DecodeError(f"{path}: nonsensical sample rate {rate}")
    return samples, rate
