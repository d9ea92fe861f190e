"""The trainable part: frame downsampling, the two-layer projector,
and the chat-template composition that splices speech embeddings
between text tokens with a transcript-only loss mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .lm import LengthError, TinyCausalLM

PREFIX_TEXT = "USER: "
TAG_TEXT = " ASSISTANT: "


def downsample(h: T.Tensor, k: int) -> T.Tensor:
    """Stack each run of k consecutive frames into one wide row.

    [t, d] -> [t // k, k * d]; the tail of t mod k frames is dropped.
    Equivalent to a row-major reshape of the first (t // k) * k rows,
    which is how it is computed.
    """
    if k < 1:
        raise ValueError(f"downsample factor must be >= 1, got {k}")
    if h.data.ndim != 2:
        raise T.ShapeError(f"downsample expects [t, d], got {tuple(h.shape)}")
    t, d = h.shape
    n = t // k
    if n == 0:
        return T.reshape(T.narrow(h, 0, 0, 0), (0, k * d))
    return T.reshape(T.narrow(h, 0, 0, n * k), (n, k * d))


def count_projector_params(d_enc: int, k: int, d_hidden: int, d_llm: int) -> int:
    """Trainable parameter count of the two affine maps, biases included."""
    d_in = k * d_enc
    return d_in * d_hidden + d_hidden + d_hidden * d_llm + d_llm


class Projector:
    """Two affine maps with a hidden ReLU; the only trainable module
    in the default pipeline.
    """

    def __init__(self, d_enc: int, k: int, d_hidden: int, d_llm: int, seed: int = 0):
        for name, v in (("d_enc", d_enc), ("k", k), ("d_hidden", d_hidden), ("d_llm", d_llm)):
            if v < 1:
                raise ValueError(f"{name} must be positive, got {v}")
        self.d_enc, self.k, self.d_hidden, self.d_llm = d_enc, k, d_hidden, d_llm
        d_in = k * d_enc
        rng = np.random.default_rng(seed)
        self.params: dict[str, T.Tensor] = {
            "w1": T.Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, d_hidden)),
                           requires_grad=True),
            "b1": T.Tensor(np.zeros(d_hidden), requires_grad=True),
            "w2": T.Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_hidden), (d_hidden, d_llm)),
                           requires_grad=True),
            "b2": T.Tensor(np.zeros(d_llm), requires_grad=True),
        }

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def freeze(self) -> "Projector":
        for p in self.params.values():
            p.freeze()
        return self

    def unfreeze(self) -> "Projector":
        for p in self.params.values():
            p.unfreeze()
        return self

    def project(self, x: T.Tensor) -> T.Tensor:
        """[n, k * d_enc] downsampled features -> [n, d_llm] embeddings."""
        if x.data.ndim != 2 or x.shape[1] != self.k * self.d_enc:
            raise T.ShapeError(
                f"project expects [n, {self.k * self.d_enc}], got {tuple(x.shape)}"
            )
        p = self.params
        h = T.relu(T.affine(x, p["w1"], p["b1"]))
        return T.affine(h, p["w2"], p["b2"])


def speech_embedding(encoder, projector: Projector, frames) -> T.Tensor:
    """Raw frames -> LM-space rows: encode, downsample, project."""
    return projector.project(downsample(encoder.encode(frames), projector.k))


@dataclass
class ComposedSequence:
    """One utterance rendered for the LM: interleaved embeddings plus
    the per-position target ids (train mode only) and the segment map.
    """

    embeddings: T.Tensor  # [L, d_llm]
    target_ids: np.ndarray | None  # [L] ints, ignore_id outside transcript+EOS
    segments: dict  # name -> (start, end), spans partitioning [0, L)

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]

    @property
    def supervised(self) -> int:
        if self.target_ids is None:
            return 0
        from .data import IGNORE_ID

        return int((self.target_ids != IGNORE_ID).sum())


def compose(
    lm: TinyCausalLM,
    tokenizer,
    speech_emb: T.Tensor,
    prompt: str,
    mode: str,
    transcript: str | None = None,
) -> ComposedSequence:
    """Render "USER: <speech> <prompt> ASSISTANT: [<transcript>]".

    Train mode appends the transcript embeddings and supervises exactly
    the one-step-shifted transcript ids plus a final EOS; every other
    position carries ignore_id. Infer mode stops after the assistant
    tag and has no targets.
    """
    from .data import IGNORE_ID

    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "train" and transcript is None:
        raise ValueError("train mode requires a transcript")
    n = speech_emb.shape[0]
    if n == 0:
        raise ValueError("empty speech segment: no projected frames to attend to")
    if speech_emb.shape[1] != lm.config.dim:
        raise T.ShapeError(
            f"speech embeddings are {speech_emb.shape[1]}-d, LM expects {lm.config.dim}"
        )

    prefix_ids = tokenizer.encode_text(PREFIX_TEXT)
    prompt_ids = tokenizer.encode_text(prompt)
    tag_ids = tokenizer.encode_text(TAG_TEXT)
    transcript_ids = []
    if mode == "train":
        transcript_ids = tokenizer.encode_text(transcript)
        if not transcript_ids:
            raise ValueError("train mode requires a non-empty transcript")

    p1, p2, p3, m = len(prefix_ids), len(prompt_ids), len(tag_ids), len(transcript_ids)
    length = p1 + n + p2 + p3 + m
    if length > lm.config.max_positions:
        raise LengthError(
            f"composed sequence of {length} positions exceeds "
            f"max_positions {lm.config.max_positions}"
        )

    parts = [lm.embed(prefix_ids), speech_emb]
    if prompt_ids:
        parts.append(lm.embed(prompt_ids))
    parts.append(lm.embed(tag_ids))
    if transcript_ids:
        parts.append(lm.embed(transcript_ids))
    embeddings = T.concat(parts, axis=0)

    segments = {
        "prefix": (0, p1),
        "speech": (p1, p1 + n),
        "prompt": (p1 + n, p1 + n + p2),
        "assistant_tag": (p1 + n + p2, p1 + n + p2 + p3),
        "transcript": (p1 + n + p2 + p3, length),
    }

    target_ids = None
    if mode == "train":
        target_ids = np.full(length, IGNORE_ID, dtype=np.int64)
        base = length - m  # first transcript position
        target_ids[base - 1] = transcript_ids[0]
        for i in range(m - 1):
            target_ids[base + i] = transcript_ids[i + 1]
        target_ids[length - 1] = tokenizer.eos_id
    return ComposedSequence(embeddings=embeddings, target_ids=target_ids, segments=segments)
