import wave

import numpy as np
import pytest


def write_sine_wav(path, seconds=1.0, freq=440.0, sample_rate=16000,
                   width=2, channels=1, amplitude=0.5):
    """Sine-tone PCM WAV; the workhorse input for exporter tests."""
    n = int(round(seconds * sample_rate))
    t = np.arange(n) / sample_rate
    sig = amplitude * np.sin(2 * np.pi * freq * t)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(sample_rate)
        if width == 1:
            frames = ((sig * 127) + 128).astype(np.uint8)
        elif width == 2:
            frames = (sig * 32767).astype("<i2")
        elif width == 4:
            frames = (sig * (2**31 - 1)).astype("<i4")
        else:
            raise ValueError(f"unsupported width {width} in test helper")
        if channels > 1:
            frames = np.repeat(frames[:, None], channels, axis=1)
        w.writeframes(frames.tobytes())
    return path


@pytest.fixture
def sine_wav(tmp_path):
    return write_sine_wav(tmp_path / "tone.wav")
