"""Encoder registry.

An encoder is a callable (signal, sample_rate) -> (features [T, d],
frame_rate_hz or None). fbank80 is the no-dependency default; names of
the form hf:<model> load a pretrained model through transformers and
report no frame rate of their own (the export job must declare one).
"""

from __future__ import annotations

import numpy as np

from .fbank import fbank


class EncoderError(ValueError):
    """The requested encoder is unknown or unusable here."""


def fbank80(signal, sample_rate):
    return fbank(signal, sample_rate)


def _hf_encoder(model_name: str):
    try:
        import torch
        from transformers import AutoFeatureExtractor, AutoModel
    except ImportError as e:
        raise EncoderError(
            f"hf:{model_name} needs the 'hf' extra (transformers + torch): {e}"
        ) from e

    extractor = AutoFeatureExtractor.from_pretrained(model_name)
    model = AutoModel.from_pretrained(model_name)
    model.eval()

    def encode(signal, sample_rate):
        inputs = extractor(np.asarray(signal, dtype=np.float32),
                           sampling_rate=sample_rate, return_tensors="pt")
        with torch.no_grad():
            hidden = model(**inputs).last_hidden_state
        return hidden[0].cpu().numpy().astype(np.float64), None

    return encode


REGISTRY = {
    "fbank80": fbank80,
}


def get_encoder(name: str):
    if name in REGISTRY:
        return REGISTRY[name]
    if name.startswith("hf:"):
        return _hf_encoder(name[len("hf:"):])
    known = ", ".join(sorted(REGISTRY))
    raise EncoderError(f"unknown encoder {name!r} (available: {known}, or hf:<model>)")
