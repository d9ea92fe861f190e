"""Estimator facade over the alignment pipeline.

ProjectorAligner wraps dataset materialization, projector training,
and beam decoding behind the usual fit/transform/predict surface, so
the aligner drops into pipelines and grid searches that expect that
shape. Parameters are stored verbatim at construction and validated at
fit time, which is what makes the estimator cloneable.
"""

from __future__ import annotations

import os
import shutil
import tempfile

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .data import Tokenizer, UtteranceRecord, write_features, write_manifest
from .decoding import decode_corpus
from .metrics import score_corpus
from .projector import speech_embedding
from .prompts import prompt_for_mode
from .trainer import derive_rng, train_projector
from .validation import check_feature_list, check_is_fitted, check_transcripts


class ProjectorAligner:
    """Speech-to-text aligner that trains only a projector MLP.

    fit(X, y) takes a list of [T, d] feature matrices and their
    transcripts, holds out a validation slice, and trains the projector
    against the frozen LM named by `lm_checkpoint`. predict(X) beam
    decodes transcripts; transform(X) returns the projected embeddings
    the LM consumes; score(X, y) is 1 - corpus WER.

    The tokenizer must be the one the LM was trained with: token ids
    index the LM's embedding table.
    """

    _PARAMS = (
        "lm_checkpoint", "tokenizer", "encoder_checkpoint", "k", "d_hidden",
        "batch_size", "max_steps", "lr_max", "warmup", "weight_decay",
        "val_every", "patience", "val_fraction", "prompt_mode", "beam",
        "max_new", "freeze_lm", "freeze_encoder", "seed", "frame_rate_hz",
        "work_dir", "threads",
    )

    def __init__(self, lm_checkpoint=None, tokenizer=None,
                 encoder_checkpoint=None, k=5, d_hidden=2048, batch_size=8,
                 max_steps=100_000, lr_max=1e-4, warmup=1000,
                 weight_decay=0.0, val_every=500, patience=5,
                 val_fraction=0.1, prompt_mode="fixed", beam=4, max_new=16,
                 freeze_lm=True, freeze_encoder=True, seed=0,
                 frame_rate_hz=50.0, work_dir=None, threads=None):
        self.lm_checkpoint = lm_checkpoint
        self.tokenizer = tokenizer
        self.encoder_checkpoint = encoder_checkpoint
        self.k = k
        self.d_hidden = d_hidden
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.lr_max = lr_max
        self.warmup = warmup
        self.weight_decay = weight_decay
        self.val_every = val_every
        self.patience = patience
        self.val_fraction = val_fraction
        self.prompt_mode = prompt_mode
        self.beam = beam
        self.max_new = max_new
        self.freeze_lm = freeze_lm
        self.freeze_encoder = freeze_encoder
        self.seed = seed
        self.frame_rate_hz = frame_rate_hz
        self.work_dir = work_dir
        self.threads = threads

    # -- sklearn plumbing ---------------------------------------------

    def get_params(self, deep=True) -> dict:
        return {name: getattr(self, name) for name in self._PARAMS}

    def set_params(self, **params) -> "ProjectorAligner":
        for name, value in params.items():
            if name not in self._PARAMS:
                raise ValueError(
                    f"invalid parameter {name!r} for ProjectorAligner; "
                    f"valid parameters: {', '.join(self._PARAMS)}"
                )
            setattr(self, name, value)
        return self

    def __repr__(self):
        shown = ", ".join(f"{n}={getattr(self, n)!r}"
                          for n in ("lm_checkpoint", "k", "d_hidden", "seed"))
        return f"ProjectorAligner({shown})"

    # -- fitting ------------------------------------------------------

    def _resolve_tokenizer(self) -> Tokenizer:
        if isinstance(self.tokenizer, Tokenizer):
            return self.tokenizer
        if isinstance(self.tokenizer, (str, os.PathLike)):
            return Tokenizer.load(self.tokenizer)
        raise TypeError("tokenizer must be a Tokenizer or a path to one")

    def _materialize_dataset(self, root, X, y) -> None:
        """Write X, y as the on-disk layout the trainer consumes."""
        n = len(X)
        n_val = max(1, int(round(self.val_fraction * n)))
        if n_val >= n:
            raise ValueError(
                f"cannot hold out {n_val} of {n} utterances for validation; "
                "need at least one training utterance"
            )
        order = derive_rng(self.seed, "val_split").permutation(n)
        feat_dir = os.path.join(root, "features")
        os.makedirs(feat_dir, exist_ok=True)
        records = []
        for i, (frames, text) in enumerate(zip(X, y)):
            rel = os.path.join("features", f"u{i:05d}.slmf")
            write_features(os.path.join(root, rel), frames.astype(np.float32))
            records.append(UtteranceRecord(
                id=f"u{i:05d}", transcript=text, feature_path=rel,
                num_frames=frames.shape[0], frame_rate_hz=self.frame_rate_hz,
                dim=frames.shape[1],
            ))
        val_ids = set(order[:n_val])
        write_manifest(os.path.join(root, "train.jsonl"),
                       [records[i] for i in range(n) if i not in val_ids])
        write_manifest(os.path.join(root, "val.jsonl"),
                       [records[i] for i in range(n) if i in val_ids])
        self._resolve_tokenizer().save(os.path.join(root, "tokenizer.json"))

    def fit(self, X, y) -> "ProjectorAligner":
        if self.lm_checkpoint is None:
            raise ValueError("lm_checkpoint is required to fit")
        X = check_feature_list(X)
        y = check_transcripts(y, len(X))

        keep = self.work_dir is not None
        root = self.work_dir if keep else tempfile.mkdtemp(prefix="aligner-")
        try:
            os.makedirs(root, exist_ok=True)
            self._materialize_dataset(root, X, y)
            run_dir = os.path.join(root, "run")
            summary = train_projector(
                dataset_dir=root,
                out_dir=run_dir,
                lm_checkpoint=self.lm_checkpoint,
                encoder=self.encoder_checkpoint,
                k=self.k,
                d_hidden=self.d_hidden,
                batch_size=self.batch_size,
                max_steps=self.max_steps,
                lr_max=self.lr_max,
                warmup=self.warmup,
                weight_decay=self.weight_decay,
                val_every=self.val_every,
                patience=self.patience,
                prompt_mode=self.prompt_mode,
                freeze_lm=self.freeze_lm,
                freeze_encoder=self.freeze_encoder,
                seed=self.seed,
            )
            self.projector_ = ckpt.load_projector(summary["best_checkpoint"])
            self.lm_ = ckpt.load_lm(os.path.join(run_dir, "lm_final.slmc"))
            self.encoder_ = ckpt.load_encoder(
                os.path.join(run_dir, "encoder_final.slmc"))
            self.tokenizer_ = self._resolve_tokenizer()
            self.dim_ = X[0].shape[1]
            self.summary_ = summary
        finally:
            if not keep:
                shutil.rmtree(root, ignore_errors=True)
        return self

    # -- inference ----------------------------------------------------

    def _prompts(self, n: int, tag: str) -> list:
        fn = prompt_for_mode(self.prompt_mode)
        return [fn(derive_rng(self.seed, tag, i)) for i in range(n)]

    def predict(self, X) -> list:
        check_is_fitted(self)
        X = check_feature_list(X, expected_dim=self.dim_)
        results = decode_corpus(
            self.lm_, self.tokenizer_, self.encoder_, self.projector_,
            X, self._prompts(len(X), "predict"),
            beam=self.beam, max_new=self.max_new, threads=self.threads,
        )
        return [r["hyp"] for r in results]

    def transform(self, X) -> list:
        """Projected speech embeddings, one [floor(T/k), d_model] per input."""
        check_is_fitted(self)
        X = check_feature_list(X, expected_dim=self.dim_)
        out = []
        with T.no_grad():
            for frames in X:
                emb = speech_embedding(self.encoder_, self.projector_, frames)
                out.append(np.array(emb.data))
        return out

    def fit_transform(self, X, y) -> list:
        return self.fit(X, y).transform(X)

    def score(self, X, y) -> float:
        """1 - corpus WER; can go negative when insertions dominate."""
        check_is_fitted(self)
        y = check_transcripts(y, len(X))
        hyps = self.predict(X)
        refs = {f"u{i:05d}": t for i, t in enumerate(y)}
        report = score_corpus(refs, {f"u{i:05d}": h for i, h in enumerate(hyps)})
        return 1.0 - report["corpus_wer"]
