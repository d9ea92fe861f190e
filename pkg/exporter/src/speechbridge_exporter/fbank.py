"""80-band log-mel filterbank features: 25 ms windows every 10 ms.

Frames are centered by reflect-padding half a window on each side, so
the frame count tracks duration x frame rate to within one frame and
the first frame is anchored at t=0 rather than half a window in.
"""

from __future__ import annotations

import numpy as np

N_MELS = 80
WIN_SECONDS = 0.025
HOP_SECONDS = 0.010
FMIN_HZ = 20.0
LOG_FLOOR = 1e-10


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int = N_MELS,
                   fmin: float = FMIN_HZ, fmax=None) -> np.ndarray:
    """Triangular mel filters as a [n_mels, n_fft//2 + 1] matrix."""
    if fmax is None:
        fmax = sample_rate / 2.0
    if not 0 <= fmin < fmax <= sample_rate / 2.0:
        raise ValueError(f"need 0 <= fmin < fmax <= Nyquist, got {fmin}..{fmax}")
    n_bins = n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bin_hz - lo) / max(center - lo, 1e-12)
        down = (hi - bin_hz) / max(hi - center, 1e-12)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def fbank(signal, sample_rate: int) -> tuple:
    """Log-mel features for a mono signal: ([T, 80] float64, frame_rate_hz).

    T = number of hop positions covering the signal with centered
    windows; for a signal of n samples that is floor(n/hop) + 1 when the
    window length is even (it is, for common rates).
    """
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 1:
        raise ValueError(f"expected mono signal, got shape {signal.shape}")
    if len(signal) == 0:
        raise ValueError("empty signal")
    win = int(round(sample_rate * WIN_SECONDS))
    hop = int(round(sample_rate * HOP_SECONDS))
    if win < 2 or hop < 1:
        raise ValueError(f"sample rate {sample_rate} leaves a degenerate window")
    n_fft = 1
    while n_fft < win:
        n_fft *= 2

    half = win // 2
    # reflect padding needs at least half+1 samples; clips fall back to edge
    mode = "reflect" if len(signal) > half else "edge"
    padded = np.pad(signal, (half, half), mode=mode)
    n_frames = (len(padded) - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * np.hanning(win)[None, :]

    spectrum = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    mel = spectrum @ mel_filterbank(sample_rate, n_fft).T
    return np.log(np.maximum(mel, LOG_FLOOR)), sample_rate / hop
