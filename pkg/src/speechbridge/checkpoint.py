"""Checkpoint container: named parameter records in a flat binary file.

Layout: magic "SLMC", u32 version, then records until EOF; each record
is u32 name length, UTF-8 name, u32 rank, rank u32 dims, and a
little-endian IEEE-754 payload. Payloads are written double precision
regardless of compute precision so freeze comparisons and resumed runs
are bit-stable; loaders narrow on request.

Each checkpoint has a JSON sidecar `<file>.json` holding exactly
{step, val_loss, config_hash, seed}, and model files add `<file>.arch.json`
describing how to rebuild the module the parameters belong to.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from . import tensor as T
from .data import FormatError
from .lm import LMConfig, TinyCausalLM, ToySpeechEncoder
from .projector import Projector

SLMC_MAGIC = b"SLMC"
SLMC_VERSION = 1
_U32 = struct.Struct("<I")


def _as_array(value) -> np.ndarray:
    data = value.data if isinstance(value, T.Tensor) else value
    # note: ascontiguousarray would silently promote rank-0 to rank-1
    return np.asarray(data, dtype=np.float64, order="C")


def save_params(path, params: dict) -> None:
    """Write name -> Tensor/ndarray records in dict order."""
    with open(path, "wb") as f:
        f.write(SLMC_MAGIC)
        f.write(_U32.pack(SLMC_VERSION))
        for name, value in params.items():
            arr = _as_array(value)
            encoded = name.encode("utf-8")
            f.write(_U32.pack(len(encoded)))
            f.write(encoded)
            f.write(_U32.pack(arr.ndim))
            for dim in arr.shape:
                f.write(_U32.pack(dim))
            f.write(arr.astype("<f8").tobytes())


def load_params(path) -> dict:
    """Read records back, in file order, as float64 arrays."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated header, {len(blob)} bytes < 8")
    if blob[:4] != SLMC_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r} at offset 0")
    (version,) = _U32.unpack_from(blob, 4)
    if version != SLMC_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    params = {}
    offset = 8

    def take(n, what):
        nonlocal offset
        if offset + n > len(blob):
            raise FormatError(
                f"{path}: truncated while reading {what} at offset {offset}"
            )
        piece = blob[offset:offset + n]
        offset += n
        return piece

    while offset < len(blob):
        (name_len,) = _U32.unpack(take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = _U32.unpack(take(4, f"rank of {name!r}"))
        shape = tuple(
            _U32.unpack(take(4, f"dim {i} of {name!r}"))[0] for i in range(rank)
        )
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = take(count * 8, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
        if name in params:
            raise FormatError(f"{path}: duplicate record {name!r}")
        params[name] = arr
    return params


def sidecar_path(path) -> str:
    return str(path) + ".json"


def write_sidecar(path, step: int, val_loss, config_hash: str, seed: int) -> None:
    doc = {
        "step": step,
        "val_loss": None if val_loss is None else float(val_loss),
        "config_hash": config_hash,
        "seed": seed,
    }
    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")


_SIDECAR_KEYS = {"step", "val_loss", "config_hash", "seed"}


def read_sidecar(path) -> dict:
    with open(sidecar_path(path), encoding="utf-8") as f:
        doc = json.load(f)
    if set(doc) != _SIDECAR_KEYS:
        missing = _SIDECAR_KEYS - set(doc)
        extra = set(doc) - _SIDECAR_KEYS
        raise FormatError(
            f"{sidecar_path(path)}: sidecar keys disagree "
            f"(missing {sorted(missing) or 'none'}, unexpected {sorted(extra) or 'none'})"
        )
    return doc


def save_checkpoint(path, params, step, val_loss, config_hash, seed) -> None:
    save_params(path, params)
    write_sidecar(path, step, val_loss, config_hash, seed)


def assign_params(target: dict, loaded: dict, where: str = "checkpoint") -> None:
    """Copy loaded arrays into existing tensors, preserving freeze flags."""
    missing = [k for k in target if k not in loaded]
    extra = [k for k in loaded if k not in target]
    if missing or extra:
        raise FormatError(
            f"{where}: parameter names disagree (missing {missing or 'none'}, "
            f"unexpected {extra or 'none'})"
        )
    for name, tensor in target.items():
        arr = loaded[name]
        if arr.shape != tensor.shape:
            raise FormatError(
                f"{where}: {name!r} is {arr.shape}, model expects {tuple(tensor.shape)}"
            )
        tensor.data = arr.astype(tensor.data.dtype)
        tensor.zero_grad()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# model-aware wrappers: parameters plus an .arch.json describing the module


def _arch_path(path) -> str:
    return str(path) + ".arch.json"


def _write_arch(path, doc: dict) -> None:
    with open(_arch_path(path), "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")


def _read_arch(path, expected_kind: str) -> dict:
    with open(_arch_path(path), encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("kind") != expected_kind:
        raise FormatError(
            f"{_arch_path(path)}: kind {doc.get('kind')!r}, expected {expected_kind!r}"
        )
    return doc


def save_lm(path, lm: TinyCausalLM, step=0, val_loss=None, config_hash="", seed=0) -> None:
    save_params(path, lm.params)
    _write_arch(path, {"kind": "tiny_causal_lm", "config": lm.config.to_dict()})
    write_sidecar(path, step, val_loss, config_hash, seed)


def load_lm(path) -> TinyCausalLM:
    arch = _read_arch(path, "tiny_causal_lm")
    lm = TinyCausalLM(LMConfig.from_dict(arch["config"]))
    assign_params(lm.params, load_params(path), where=str(path))
    return lm


def save_encoder(path, enc: ToySpeechEncoder, step=0, val_loss=None,
                 config_hash="", seed=0) -> None:
    save_params(path, enc.params)
    _write_arch(path, {
        "kind": "toy_speech_encoder",
        "mode": enc.kind,
        "input_dim": enc.input_dim,
        "output_dim": enc.output_dim,
    })
    write_sidecar(path, step, val_loss, config_hash, seed)


def load_encoder(path) -> ToySpeechEncoder:
    arch = _read_arch(path, "toy_speech_encoder")
    enc = ToySpeechEncoder(arch["mode"], arch["input_dim"], arch["output_dim"])
    if enc.params:
        assign_params(enc.params, load_params(path), where=str(path))
    return enc


def save_projector(path, proj: Projector, step=0, val_loss=None,
                   config_hash="", seed=0) -> None:
    save_params(path, proj.params)
    _write_arch(path, {
        "kind": "projector",
        "d_enc": proj.d_enc,
        "k": proj.k,
        "d_hidden": proj.d_hidden,
        "d_llm": proj.d_llm,
    })
    write_sidecar(path, step, val_loss, config_hash, seed)


def load_projector(path) -> Projector:
    arch = _read_arch(path, "projector")
    proj = Projector(arch["d_enc"], arch["k"], arch["d_hidden"], arch["d_llm"])
    records = load_params(path)
    if "w1" not in records:
        # train-state bundle: projector records ride namespaced among
        # optimizer state; recover just them
        records = {
            name[len("projector."):]: arr
            for name, arr in records.items()
            if name.startswith("projector.")
        }
    assign_params(proj.params, records, where=str(path))
    return proj


def save_train_state(path, records: dict, proj: Projector, step, val_loss,
                     config_hash, seed) -> None:
    """Resume bundle: every trainable plus optimizer state.

    Also carries the projector arch description, so the file doubles as
    a projector checkpoint for load_projector.
    """
    save_params(path, records)
    _write_arch(path, {
        "kind": "projector",
        "d_enc": proj.d_enc,
        "k": proj.k,
        "d_hidden": proj.d_hidden,
        "d_llm": proj.d_llm,
    })
    write_sidecar(path, step, val_loss, config_hash, seed)
