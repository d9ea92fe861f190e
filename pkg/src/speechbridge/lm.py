"""Decoder-only causal transformer, small enough to train on a laptop.

Pre-layer-norm blocks, learned positions, untied output head, no KV
cache. The forward pass takes embedding rows directly so projected
speech vectors can be spliced between text-token embeddings; the
token-id path is a thin wrapper over the same code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T


class LengthError(ValueError):
    """Sequence does not fit the model's positional table."""


@dataclass
class LMConfig:
    vocab_size: int
    dim: int = 64
    layers: int = 2
    heads: int = 4
    max_positions: int = 256
    mlp_ratio: int = 4
    init_scale: float = 0.02
    eps: float = 1e-5

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        for field in ("dim", "layers", "heads", "max_positions", "mlp_ratio"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LMConfig":
        return cls(**d)


def build_attention_mask(t: int, lengths=None) -> np.ndarray:
    """Additive causal (+ key padding) mask, broadcastable over heads.

    Large-negative rather than -inf so a fully padded row degrades to a
    uniform distribution instead of NaN; such rows are always excluded
    from the loss anyway.
    """
    causal = np.triu(np.full((t, t), -1e30), k=1)
    if lengths is None:
        return causal[None]
    lengths = np.asarray(lengths)
    cols = np.arange(t)
    pad = np.where(cols[None, None, :] >= lengths[:, None, None], -1e30, 0.0)
    return causal[None] + pad


class TinyCausalLM:
    """The frozen text backbone of the alignment pipeline."""

    def __init__(self, config: LMConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        s = c.init_scale

        def w(*shape):
            return T.Tensor(rng.normal(0.0, s, shape), requires_grad=True)

        def zeros(*shape):
            return T.Tensor(np.zeros(shape), requires_grad=True)

        def ones(*shape):
            return T.Tensor(np.ones(shape), requires_grad=True)

        p = {}
        p["tok_emb"] = w(c.vocab_size, c.dim)
        p["pos_emb"] = w(c.max_positions, c.dim)
        for i in range(c.layers):
            pre = f"blocks.{i}."
            p[pre + "ln1.gain"] = ones(c.dim)
            p[pre + "ln1.bias"] = zeros(c.dim)
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + "attn." + name] = w(c.dim, c.dim)
                p[pre + "attn.b" + name[1]] = zeros(c.dim)
            p[pre + "ln2.gain"] = ones(c.dim)
            p[pre + "ln2.bias"] = zeros(c.dim)
            hidden = c.dim * c.mlp_ratio
            p[pre + "mlp.w1"] = w(c.dim, hidden)
            p[pre + "mlp.b1"] = zeros(hidden)
            p[pre + "mlp.w2"] = w(hidden, c.dim)
            p[pre + "mlp.b2"] = zeros(c.dim)
        p["ln_f.gain"] = ones(c.dim)
        p["ln_f.bias"] = zeros(c.dim)
        p["head.w"] = w(c.dim, c.vocab_size)
        self.params: dict[str, T.Tensor] = p

    def freeze(self) -> "TinyCausalLM":
        for p in self.params.values():
            p.freeze()
        return self

    def unfreeze(self) -> "TinyCausalLM":
        for p in self.params.values():
            p.unfreeze()
        return self

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.params.values())

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def embed(self, ids) -> T.Tensor:
        """Token embeddings without positions; forward adds those itself."""
        return T.embedding(self.params["tok_emb"], np.asarray(ids))

    def forward(self, x: T.Tensor, lengths=None) -> T.Tensor:
        """Causal logits over embedding rows: [B,t,d] -> [B,t,V] (or 2-d in/out).

        Differentiable w.r.t. `x` regardless of whether the LM itself is
        frozen, which is what lets the projector learn through it.
        """
        squeeze = x.data.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + tuple(x.shape))
        if x.data.ndim != 3 or x.shape[-1] != self.config.dim:
            raise T.ShapeError(
                f"forward expects [batch, t, {self.config.dim}], got {tuple(x.shape)}"
            )
        t = x.shape[1]
        if t > self.config.max_positions:
            raise LengthError(
                f"sequence length {t} exceeds max_positions {self.config.max_positions}"
            )
        p = self.params
        pos = T.narrow(p["pos_emb"], 0, 0, t)
        h = T.add(x, pos)
        mask = build_attention_mask(t, lengths)
        for i in range(self.config.layers):
            h = T.add(h, self._attention(i, h, mask))
            h = T.add(h, self._mlp(i, h))
        h = T.layer_norm(h, p["ln_f.gain"], p["ln_f.bias"], self.config.eps)
        logits = T.matmul(h, p["head.w"])
        if squeeze:
            logits = T.reshape(logits, (t, self.config.vocab_size))
        return logits

    def forward_ids(self, ids, lengths=None) -> T.Tensor:
        """Token-id path; exactly forward(embed(ids)) by construction."""
        return self.forward(self.embed(ids), lengths)

    def _attention(self, i: int, h: T.Tensor, mask: np.ndarray) -> T.Tensor:
        p = self.params
        pre = f"blocks.{i}."
        c = self.config
        hd = c.dim // c.heads
        x = T.layer_norm(h, p[pre + "ln1.gain"], p[pre + "ln1.bias"], c.eps)
        q = T.affine(x, p[pre + "attn.wq"], p[pre + "attn.bq"])
        k = T.affine(x, p[pre + "attn.wk"], p[pre + "attn.bk"])
        v = T.affine(x, p[pre + "attn.wv"], p[pre + "attn.bv"])
        heads = []
        for j in range(c.heads):
            qh = T.narrow(q, 2, j * hd, hd)
            kh = T.narrow(k, 2, j * hd, hd)
            vh = T.narrow(v, 2, j * hd, hd)
            scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(hd))
            probs = T.softmax_rows(scores, additive_mask=mask)
            heads.append(T.matmul(probs, vh))
        ctx = T.concat(heads, axis=2)
        return T.affine(ctx, p[pre + "attn.wo"], p[pre + "attn.bo"])

    def _mlp(self, i: int, h: T.Tensor) -> T.Tensor:
        p = self.params
        pre = f"blocks.{i}."
        x = T.layer_norm(h, p[pre + "ln2.gain"], p[pre + "ln2.bias"], self.config.eps)
        x = T.relu(T.affine(x, p[pre + "mlp.w1"], p[pre + "mlp.b1"]))
        return T.affine(x, p[pre + "mlp.w2"], p[pre + "mlp.b2"])


class ToySpeechEncoder:
    """Stand-in feature encoder: identity, or a seeded affine map.

    Frozen by default; the finetune toggle in the trainer unfreezes it
    to contrast against the projector-only setting.
    """

    KINDS = ("identity", "affine")

    def __init__(self, kind: str, input_dim: int, output_dim=None, seed: int = 0):
        if kind not in self.KINDS:
            raise ValueError(f"unknown encoder kind {kind!r}, expected one of {self.KINDS}")
        self.kind = kind
        self.input_dim = input_dim
        self.output_dim = input_dim if output_dim is None else output_dim
        if kind == "identity":
            if self.output_dim != input_dim:
                raise ValueError("identity encoder cannot change dimensionality")
            self.params: dict[str, T.Tensor] = {}
        else:
            rng = np.random.default_rng(seed)
            scale = 1.0 / math.sqrt(input_dim)
            self.params = {
                "w": T.Tensor(rng.normal(0.0, scale, (input_dim, self.output_dim))),
                "b": T.Tensor(np.zeros(self.output_dim)),
            }

    def freeze(self) -> "ToySpeechEncoder":
        for p in self.params.values():
            p.freeze()
        return self

    def unfreeze(self) -> "ToySpeechEncoder":
        for p in self.params.values():
            p.unfreeze()
        return self

    def encode(self, frames) -> T.Tensor:
        """[t, input_dim] frames -> [t, output_dim] features."""
        x = frames if isinstance(frames, T.Tensor) else T.Tensor(np.asarray(frames))
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise T.ShapeError(
                f"encode expects [t, {self.input_dim}], got {tuple(x.shape)}"
            )
        if self.kind == "identity":
            return x
        return T.affine(x, self.params["w"], self.params["b"])
