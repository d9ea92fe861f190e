"""Synthetic speech-like data, binary feature files, manifests, and the
word-level tokenizer.

The synthetic task renders each word of a bigram-sampled sentence as a
short run of its codebook row plus Gaussian noise, i.e. speech-shaped
features whose ideal transcript is known exactly.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

IGNORE_ID = -1  # target sentinel for unsupervised positions; never a vocab id

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
EOS_TOKEN = "<eos>"

SLMF_MAGIC = b"SLMF"
SLMF_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """A binary or manifest file violates its declared layout."""


def normalize_text(text: str) -> str:
    """Lowercase and collapse all whitespace; applied before tokenizing
    and to both sides of every WER comparison."""
    return " ".join(text.lower().split())


class Tokenizer:
    """Word-level tokenizer over a fixed vocabulary with PAD/UNK/EOS."""

    def __init__(self, words):
        self.vocab = [PAD_TOKEN, UNK_TOKEN, EOS_TOKEN]
        seen = set(self.vocab)
        for w in words:
            if w not in seen:
                self.vocab.append(w)
                seen.add(w)
        self._ids = {w: i for i, w in enumerate(self.vocab)}

    pad_id = 0
    unk_id = 1
    eos_id = 2

    def __eq__(self, other):
        return isinstance(other, Tokenizer) and self.vocab == other.vocab

    __hash__ = None  # mutable value semantics

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode_text(self, text: str) -> list:
        return [self._ids.get(w, self.unk_id) for w in normalize_text(text).split()]

    def decode(self, ids) -> str:
        words = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.vocab):
                raise ValueError(f"token id {i} outside vocabulary of {len(self.vocab)}")
            words.append(self.vocab[i])
        return " ".join(words)

    def save(self, path) -> None:
        doc = {"version": 1, "words": self.vocab[3:]}
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
        if doc.get("version") != 1 or "words" not in doc:
            raise FormatError(f"{path}: not a version-1 tokenizer file")
        return cls(doc["words"])


# ---------------------------------------------------------------------------
# feature files: magic "SLMF", u32 version, u32 T, u32 d, T*d little-endian f32


def write_features(path, features) -> None:
    """Write a [T, d] feature matrix; storage is always single precision."""
    arr = np.asarray(features)
    if arr.ndim != 2:
        raise FormatError(f"feature matrix must be 2-d, got shape {arr.shape}")
    t, d = arr.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(SLMF_MAGIC, SLMF_VERSION, t, d))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    """Read a feature file back as float64 [T, d]; values are exactly the
    stored single-precision bits, widened."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise FormatError(
            f"{path}: truncated header, {len(blob)} bytes < {_HEADER.size}"
        )
    magic, version, t, d = _HEADER.unpack_from(blob, 0)
    if magic != SLMF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != SLMF_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    expected = _HEADER.size + t * d * 4
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload size mismatch, header implies {expected} bytes "
            f"(16 + {t}*{d}*4), file has {len(blob)}"
        )
    payload = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    return payload.reshape(t, d).astype(np.float64)


def read_feature_header(path):
    """(T, d) from the header alone; used for cheap manifest validation."""
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise FormatError(f"{path}: truncated header, {len(head)} bytes < {_HEADER.size}")
    magic, version, t, d = _HEADER.unpack(head)
    if magic != SLMF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != SLMF_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    return t, d


# ---------------------------------------------------------------------------
# manifests


@dataclass
class UtteranceRecord:
    id: str
    transcript: str
    feature_path: str  # relative to the manifest's directory
    num_frames: int
    frame_rate_hz: float
    dim: int

    _FIELDS = ("id", "transcript", "feature_path", "num_frames", "frame_rate_hz", "dim")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self._FIELDS}

    @classmethod
    def from_dict(cls, d: dict, where: str = "manifest") -> "UtteranceRecord":
        missing = [k for k in cls._FIELDS if k not in d]
        extra = [k for k in d if k not in cls._FIELDS]
        if missing or extra:
            raise FormatError(
                f"{where}: bad record fields (missing {missing or 'none'}, "
                f"unknown {extra or 'none'})"
            )
        rec = cls(**{k: d[k] for k in cls._FIELDS})
        if not rec.transcript.strip():
            raise FormatError(f"{where}: utterance {rec.id!r} has an empty transcript")
        return rec


def write_manifest(path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec.to_dict(), sort_keys=True))
            f.write("\n")


def read_manifest(path, validate_features: bool = True) -> list:
    """Parse a JSONL manifest; optionally cross-check each feature header."""
    base = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: not valid JSON ({e})") from e
            rec = UtteranceRecord.from_dict(doc, where=f"{path}:{lineno}")
            if validate_features:
                fpath = os.path.join(base, rec.feature_path)
                t, d = read_feature_header(fpath)
                if (t, d) != (rec.num_frames, rec.dim):
                    raise FormatError(
                        f"{path}:{lineno}: utterance {rec.id!r} declares "
                        f"{rec.num_frames}x{rec.dim} but {fpath} holds {t}x{d}"
                    )
            records.append(rec)
    return records


def load_features(record: UtteranceRecord, manifest_path) -> np.ndarray:
    base = os.path.dirname(os.path.abspath(manifest_path))
    return read_features(os.path.join(base, record.feature_path))


# ---------------------------------------------------------------------------
# synthetic task

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_words(n: int, reserved) -> list:
    """Deterministic CVC pseudo-words, skipping anything in `reserved`."""
    words = []
    for c1 in _CONSONANTS:
        for v in _VOWELS:
            for c2 in _CONSONANTS:
                w = c1 + v + c2
                if w not in reserved:
                    words.append(w)
                if len(words) == n:
                    return words
    raise ValueError(f"cannot build {n} distinct pseudo-words")


@dataclass
class SyntheticTaskSpec:
    """Everything needed to render and regenerate the synthetic corpus."""

    words: list  # vocab_size pseudo-words
    codebook: np.ndarray  # [vocab_size, d_enc], rows pairwise distinct
    bigram: np.ndarray  # [vocab_size, vocab_size], rows sum to 1
    frames_per_word: int = 5
    jitter: tuple = (-1, 0, 1)
    noise_sigma: float = 0.1
    frame_rate_hz: float = 50.0
    utt_len_min: int = 3
    utt_len_max: int = 12

    def __post_init__(self):
        self.codebook = np.asarray(self.codebook, dtype=np.float64)
        self.bigram = np.asarray(self.bigram, dtype=np.float64)
        v = len(self.words)
        if len(set(self.words)) != v:
            raise ValueError("task words must be distinct")
        if self.codebook.shape[0] != v or self.bigram.shape != (v, v):
            raise ValueError(
                f"codebook {self.codebook.shape} / bigram {self.bigram.shape} "
                f"inconsistent with vocab of {v}"
            )
        if not np.allclose(self.bigram.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("bigram transition rows must sum to 1")
        if (self.bigram < 0).any():
            raise ValueError("bigram transition probabilities must be non-negative")
        # pairwise-distinct codebook rows, else words are unrecoverable
        sorted_rows = self.codebook[np.lexsort(self.codebook.T[::-1])]
        if v > 1 and (np.diff(sorted_rows, axis=0) == 0).all(axis=1).any():
            raise ValueError("codebook rows must be pairwise distinct")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.frames_per_word + min(self.jitter) < 1:
            raise ValueError("jitter would allow words with zero frames")
        if not 1 <= self.utt_len_min <= self.utt_len_max:
            raise ValueError("need 1 <= utt_len_min <= utt_len_max")

    @property
    def vocab_size(self) -> int:
        return len(self.words)

    @property
    def d_enc(self) -> int:
        return int(self.codebook.shape[1])

    @classmethod
    def generate(
        cls,
        seed: int,
        vocab_size: int = 50,
        d_enc: int = 32,
        frames_per_word: int = 5,
        jitter=(-1, 0, 1),
        noise_sigma: float = 0.1,
        frame_rate_hz: float = 50.0,
        utt_len_min: int = 3,
        utt_len_max: int = 12,
        reserved_words=(),
    ) -> "SyntheticTaskSpec":
        rng = np.random.default_rng(seed)
        words = _pseudo_words(vocab_size, set(reserved_words))
        codebook = rng.normal(0.0, 1.0, (vocab_size, d_enc))
        bigram = rng.dirichlet(np.full(vocab_size, 0.3), size=vocab_size)
        return cls(
            words=words,
            codebook=codebook,
            bigram=bigram,
            frames_per_word=frames_per_word,
            jitter=tuple(jitter),
            noise_sigma=noise_sigma,
            frame_rate_hz=frame_rate_hz,
            utt_len_min=utt_len_min,
            utt_len_max=utt_len_max,
        )

    def to_dict(self) -> dict:
        return {
            "words": self.words,
            "codebook": self.codebook.tolist(),
            "bigram": self.bigram.tolist(),
            "frames_per_word": self.frames_per_word,
            "jitter": list(self.jitter),
            "noise_sigma": self.noise_sigma,
            "frame_rate_hz": self.frame_rate_hz,
            "utt_len_min": self.utt_len_min,
            "utt_len_max": self.utt_len_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        d = dict(d)
        d["jitter"] = tuple(d["jitter"])
        return cls(**d)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "SyntheticTaskSpec":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def sample_word_ids(spec: SyntheticTaskSpec, rng) -> np.ndarray:
    """Sentence of word indices: uniform start, then bigram transitions."""
    length = int(rng.integers(spec.utt_len_min, spec.utt_len_max + 1))
    ids = np.empty(length, dtype=np.int64)
    ids[0] = rng.integers(spec.vocab_size)
    for i in range(1, length):
        ids[i] = rng.choice(spec.vocab_size, p=spec.bigram[ids[i - 1]])
    return ids


def render_utterance(spec: SyntheticTaskSpec, word_ids, rng) -> np.ndarray:
    """Frames for a sentence: each word contributes frames_per_word plus
    jitter copies of its codebook row, with Gaussian noise on top."""
    jitter = np.asarray(spec.jitter)
    chunks = []
    for w in word_ids:
        n = spec.frames_per_word + int(jitter[rng.integers(len(jitter))])
        base = np.tile(spec.codebook[w], (n, 1))
        chunks.append(base + spec.noise_sigma * rng.standard_normal(base.shape))
    return np.concatenate(chunks, axis=0)


def gen_dataset(
    spec: SyntheticTaskSpec,
    out_dir,
    n_train: int,
    n_val: int,
    n_test: int,
    seed: int,
    tokenizer_extras=(),
    config_hash: str = "",
) -> dict:
    """Write feature files, split manifests, tokenizer, and task spec.

    Same spec and seed produce byte-identical output trees. Returns the
    manifest paths keyed by split name.
    """
    for name, n in (("n_train", n_train), ("n_val", n_val), ("n_test", n_test)):
        if n < 1:
            raise ValueError(f"{name} must be >= 1, got {n}")
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)

    manifests = {}
    for split_index, (split, count) in enumerate(
        (("train", n_train), ("val", n_val), ("test", n_test))
    ):
        rng = np.random.default_rng([seed, split_index])
        records = []
        for i in range(count):
            word_ids = sample_word_ids(spec, rng)
            frames = render_utterance(spec, word_ids, rng)
            utt_id = f"{split}-{i:05d}"
            rel = os.path.join("features", utt_id + ".slmf")
            write_features(os.path.join(out_dir, rel), frames)
            records.append(
                UtteranceRecord(
                    id=utt_id,
                    transcript=" ".join(spec.words[w] for w in word_ids),
                    feature_path=rel,
                    num_frames=frames.shape[0],
                    frame_rate_hz=spec.frame_rate_hz,
                    dim=spec.d_enc,
                )
            )
        manifest_path = os.path.join(out_dir, split + ".jsonl")
        write_manifest(manifest_path, records)
        manifests[split] = manifest_path

    tok_words = list(spec.words)
    for text in tokenizer_extras:
        for w in normalize_text(text).split():
            tok_words.append(w)
    tokenizer = Tokenizer(tok_words)
    tokenizer.save(os.path.join(out_dir, "tokenizer.json"))
    spec.save(os.path.join(out_dir, "task.json"))
    meta = {"seed": seed, "n_train": n_train, "n_val": n_val, "n_test": n_test,
            "config_hash": config_hash}
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
        f.write("\n")
    return manifests


def default_tokenizer_texts() -> list:
    """Template and prompt wordforms every dataset tokenizer should know."""
    from .projector import PREFIX_TEXT, TAG_TEXT
    from .prompts import DEFAULT_PROMPTS, LONG_PROMPT

    return [PREFIX_TEXT, TAG_TEXT, LONG_PROMPT, *DEFAULT_PROMPTS]
