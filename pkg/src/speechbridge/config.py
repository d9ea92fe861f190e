"""Run configuration: one JSON document per run, validated up front,
hashed so every artifact can be traced back to the exact settings.

All run kinds (LM pretraining, instruction tuning, projector training,
decoding, scoring) share one flat schema; each command checks that the
path fields it needs are present. Unknown keys are rejected so a typo
cannot silently fall back to a default.
"""

from __future__ import annotations

import hashlib
import json


class ConfigError(ValueError):
    """A config document is malformed; message names the offending field."""


_REQUIRED = object()


def _int(lo=None):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"expected an integer, got {v!r}")
        if lo is not None and v < lo:
            raise ConfigError(f"expected an integer >= {lo}, got {v}")
        return v
    return check


def _num(lo=None, positive=False):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"expected a number, got {v!r}")
        v = float(v)
        if positive and not v > 0:
            raise ConfigError(f"expected a positive number, got {v}")
        if lo is not None and v < lo:
            raise ConfigError(f"expected a number >= {lo}, got {v}")
        return v
    return check


def _str(v):
    if not isinstance(v, str) or not v:
        raise ConfigError(f"expected a non-empty string, got {v!r}")
    return v


def _bool(v):
    if not isinstance(v, bool):
        raise ConfigError(f"expected true or false, got {v!r}")
    return v


def _opt(check):
    return lambda v: None if v is None else check(v)


def _list_of(check):
    def inner(v):
        if not isinstance(v, list):
            raise ConfigError(f"expected a list, got {v!r}")
        return [check(x) for x in v]
    return inner


# name -> (checker, default); _REQUIRED means the document must set it
RUN_SCHEMA = {
    "seed": (_int(lo=0), 0),
    "dataset_dir": (_opt(_str), None),
    "out_dir": (_opt(_str), None),
    "lm_checkpoint": (_opt(_str), None),
    "encoder_checkpoint": (_opt(_str), None),
    # projector shape
    "k": (_int(lo=1), 5),
    "d_hidden": (_int(lo=1), 2048),
    # optimizer
    "lr_max": (_num(positive=True), 1e-4),
    "warmup": (_int(lo=1), 1000),
    "weight_decay": (_num(lo=0.0), 0.0),
    "batch_size": (_int(lo=1), 8),
    "max_steps": (_int(lo=1), 100_000),
    "val_every": (_int(lo=1), 500),
    "patience": (_int(lo=1), 5),
    # prompting and decoding
    "prompt_mode": (_str, "fixed"),
    "prompt_library": (_opt(_str), None),
    "beam": (_int(lo=1), 4),
    "max_new": (_int(lo=1), 16),
    "threads": (_opt(_int(lo=1)), None),
    # what trains and what holds still
    "freeze_lm": (_bool, True),
    "freeze_encoder": (_bool, True),
    "resume": (_bool, False),
    "max_val_utts": (_opt(_int(lo=1)), None),
    # LM architecture, used when a run creates the LM instead of loading it
    "lm_dim": (_int(lo=2), 64),
    "lm_layers": (_int(lo=1), 2),
    "lm_heads": (_int(lo=1), 4),
    "lm_max_positions": (_int(lo=8), 256),
    # corpus sizes for the text-only phases
    "pretrain_sentences": (_int(lo=1), 2000),
    "tune_examples": (_int(lo=1), 2000),
    "seq_len": (_int(lo=2), 32),
    "accuracy_floor": (_opt(_num(lo=0.0)), None),
    # instruction tuning flavor: "spans" trains on soft chunk mixtures of
    # word embeddings (what a projector actually produces), "tokens" on
    # plain id sequences
    "tune_style": (_str, "spans"),
    "copy_fraction": (_num(lo=0.0), 0.15),
    "emb_noise": (_num(lo=0.0), 0.1),
}

GEN_SCHEMA = {
    "seed": (_int(lo=0), 0),
    "vocab_size": (_int(lo=2), 50),
    "d_enc": (_int(lo=1), 32),
    "frames_per_word": (_int(lo=1), 5),
    "jitter": (_list_of(_int()), [-1, 0, 1]),
    "noise_sigma": (_num(lo=0.0), 0.1),
    "frame_rate_hz": (_num(positive=True), 50.0),
    "utt_len_min": (_int(lo=1), 3),
    "utt_len_max": (_int(lo=1), 12),
    "reserved_words": (_list_of(_str), []),
    "extra_texts": (_list_of(_str), []),
    "n_train": (_int(lo=1), _REQUIRED),
    "n_val": (_int(lo=1), _REQUIRED),
    "n_test": (_int(lo=1), _REQUIRED),
}

SWEEP_SCHEMA = {
    "out_dir": (_str, _REQUIRED),
    "lms": (_list_of(_str), _REQUIRED),
    "encoders": (_list_of(_opt(_str)), [None]),
    "prompt_modes": (_list_of(_str), ["fixed"]),
    "base": (lambda v: dict(v) if isinstance(v, dict) else _fail_dict(v), {}),
    "parallel": (_int(lo=1), 1),
    "split": (_str, "test"),
}


def _fail_dict(v):
    raise ConfigError(f"expected an object, got {v!r}")


def validate(doc, schema, where: str = "config") -> dict:
    """Check one JSON object against a schema; returns the defaulted doc."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected a JSON object, got {type(doc).__name__}")
    unknown = sorted(set(doc) - set(schema))
    if unknown:
        raise ConfigError(
            f"{where}: unknown key(s) {', '.join(unknown)}; "
            f"valid keys: {', '.join(sorted(schema))}"
        )
    out = {}
    for name, (check, default) in schema.items():
        if name in doc:
            try:
                out[name] = check(doc[name])
            except ConfigError as e:
                raise ConfigError(f"{where}: {name}: {e}") from None
        elif default is _REQUIRED:
            raise ConfigError(f"{where}: {name}: required key is missing")
        else:
            out[name] = default
    return out


def config_hash(doc: dict) -> str:
    """Digest of the fully defaulted document, so spelling a default out
    explicitly hashes the same as omitting it. 16 hex chars is plenty at
    the scale of a sweep and keeps log headers readable."""
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def read_json(path):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None


class RunConfig:
    """Validated run settings with attribute access and a stable hash."""

    def __init__(self, doc: dict, where: str = "config"):
        resolved = validate(doc, RUN_SCHEMA, where)
        if resolved["lm_dim"] % resolved["lm_heads"] != 0:
            raise ConfigError(
                f"{where}: lm_dim: {resolved['lm_dim']} is not divisible by "
                f"lm_heads={resolved['lm_heads']}"
            )
        self._doc = resolved
        self.hash = config_hash(resolved)
        self.__dict__.update(resolved)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls(read_json(path), where=str(path))

    def to_dict(self) -> dict:
        return dict(self._doc)

    def require(self, *names) -> None:
        """Raise unless every named path field was set in the document."""
        missing = [n for n in names if self._doc.get(n) is None]
        if missing:
            raise ConfigError(
                f"config: {', '.join(missing)}: required for this command"
            )
