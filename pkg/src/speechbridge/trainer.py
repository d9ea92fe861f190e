"""Optimization: AdamW with warmup-then-constant schedule, CSV train
logs, early stopping, resume, and the training entry points
(LM pretraining, instruction tuning, span tuning, projector alignment).

Everything random is derived statelessly from (seed, purpose, indices),
so an interrupted run resumed from its last checkpoint replays the
exact batch, prompt, and update sequence of an uninterrupted one.
"""

from __future__ import annotations

import hashlib
import logging
import os
import shutil
import time
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .data import (
    IGNORE_ID,
    SyntheticTaskSpec,
    Tokenizer,
    load_features,
    read_manifest,
    sample_word_ids,
)
from .lm import LMConfig, TinyCausalLM, ToySpeechEncoder
from .projector import PREFIX_TEXT, TAG_TEXT, Projector, compose, speech_embedding
from .prompts import DEFAULT_PROMPTS, PromptLibrary, prompt_for_mode

log = logging.getLogger("speechbridge")


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from a tuple of ints/strings."""
    digest = hashlib.sha256(repr(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def lr_at(step: int, lr_max: float, warmup: int = 1000) -> float:
    """Linear ramp over the first `warmup` steps, then constant lr_max."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if warmup < 1:
        raise ValueError(f"warmup must be >= 1, got {warmup}")
    if step <= warmup:
        return lr_max * step / warmup
    return lr_max


class AdamW:
    """Bias-corrected AdamW; decoupled decay applied before the adaptive
    step as theta <- theta - lr*wd*theta.
    """

    def __init__(self, params: dict, lr_max: float, warmup: int = 1000,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr_max = lr_max
        self.warmup = warmup
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr=None) -> float:
        """One update over all owned parameters; returns the lr used."""
        self.step_count += 1
        t = self.step_count
        if lr is None:
            lr = lr_at(t, self.lr_max, self.warmup)
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                raise RuntimeError(f"parameter {name!r} has no grad buffer")
            if not np.isfinite(g).all():
                raise T.GradientError(f"non-finite gradient in {name!r} at step {t}")
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g)
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return lr

    def state_records(self, prefix: str = "optim.") -> dict:
        """State as flat named arrays for the checkpoint container."""
        records = {prefix + "step": np.asarray(float(self.step_count))}
        for name in self.params:
            records[prefix + "m." + name] = self.m[name]
            records[prefix + "v." + name] = self.v[name]
        return records

    def load_state_records(self, records: dict, prefix: str = "optim.") -> None:
        self.step_count = int(records[prefix + "step"])
        for name in self.params:
            self.m[name] = records[prefix + "m." + name].astype(self.m[name].dtype)
            self.v[name] = records[prefix + "v." + name].astype(self.v[name].dtype)


def masked_token_accuracy(logits, target_ids, ignore_id=IGNORE_ID) -> float:
    """Fraction of non-ignored positions where argmax(logits) hits the
    target; argmax ties resolve to the lowest id. Zero supervised
    positions is defined as 0.0 and logged."""
    arr = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
    targets = np.asarray(target_ids)
    flat = arr.reshape(-1, arr.shape[-1])
    tgt = targets.reshape(-1)
    if flat.shape[0] != tgt.shape[0]:
        raise T.ShapeError(
            f"accuracy: {flat.shape[0]} logit rows vs {tgt.shape[0]} targets"
        )
    valid = tgt != ignore_id
    total = int(valid.sum())
    if total == 0:
        log.warning("masked_token_accuracy over zero supervised positions")
        return 0.0
    pred = flat.argmax(axis=-1)
    return float((pred[valid] == tgt[valid]).sum() / total)


# ---------------------------------------------------------------------------
# train logs: CSV with a config-hash comment line


TRAIN_HEADER = "step,loss,masked_token_accuracy,lr,wall_ms"
VAL_HEADER = "val_step,val_loss,val_accuracy"


class TrainLogger:
    def __init__(self, out_dir, config_hash: str, resume: bool = False):
        self.train_path = os.path.join(out_dir, "train_log.csv")
        self.val_path = os.path.join(out_dir, "val_log.csv")
        fresh = not (resume and os.path.exists(self.train_path))
        self._train = open(self.train_path, "a" if not fresh else "w", encoding="utf-8")
        self._val = open(self.val_path, "a" if not fresh else "w", encoding="utf-8")
        if fresh:
            self._train.write(f"# config_hash={config_hash}\n{TRAIN_HEADER}\n")
            self._val.write(f"# config_hash={config_hash}\n{VAL_HEADER}\n")
            self._train.flush()
            self._val.flush()

    def log_step(self, step, loss, acc, lr, wall_ms) -> None:
        self._train.write(
            f"{step},{float(loss)!r},{float(acc)!r},{float(lr)!r},{wall_ms:.3f}\n"
        )
        self._train.flush()

    def log_val(self, step, val_loss, val_acc) -> None:
        self._val.write(f"{step},{float(val_loss)!r},{float(val_acc)!r}\n")
        self._val.flush()

    def close(self) -> None:
        self._train.close()
        self._val.close()


def read_log_rows(path) -> list:
    """Data rows of a train/val CSV; comment and header lines skipped."""
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line and line[0].isdigit():
                rows.append(line.split(","))
    return rows


def trainlog_fingerprint(out_dir) -> str:
    """Digest of the numeric training trace, excluding wall-clock times.

    Wall_ms is the one column that legitimately differs between equal
    runs, so determinism checks hash everything else.
    """
    h = hashlib.sha256()
    for row in read_log_rows(os.path.join(out_dir, "train_log.csv")):
        h.update(",".join(row[:4]).encode())
        h.update(b"\n")
    val = os.path.join(out_dir, "val_log.csv")
    if os.path.exists(val):
        for row in read_log_rows(val):
            h.update(",".join(row).encode())
            h.update(b"\n")
    return h.hexdigest()


def _truncate_log(path, max_step: int) -> None:
    """Drop rows past max_step so a resumed log continues seamlessly."""
    if not os.path.exists(path):
        return
    with open(path, encoding="utf-8") as f:
        lines = f.readlines()
    kept = []
    for line in lines:
        s = line.strip()
        if not s or s.startswith("#") or not s[0].isdigit():
            kept.append(line)
            continue
        if int(s.split(",", 1)[0]) <= max_step:
            kept.append(line)
    with open(path, "w", encoding="utf-8") as f:
        f.writelines(kept)


# ---------------------------------------------------------------------------
# alignment batches


def stack_composed(seqs):
    """Pad composed sequences to a common length and stack for one LM call.

    Returns (embeddings [B, Lmax, d], targets [B, Lmax], lengths). Pad
    positions carry zero rows and IGNORE_ID targets and are excluded
    from attention via the length mask.
    """
    lengths = [s.length for s in seqs]
    lmax = max(lengths)
    padded = T.stack([T.pad_rows(s.embeddings, lmax) for s in seqs])
    targets = np.full((len(seqs), lmax), IGNORE_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        targets[i, : s.length] = s.target_ids
    return padded, targets, lengths


def compose_batch(lm, tokenizer, encoder, projector, frames_list, transcripts, prompts):
    """Per-utterance compose over real features, then pad and stack."""
    seqs = []
    for frames, transcript, prompt in zip(frames_list, transcripts, prompts):
        emb = speech_embedding(encoder, projector, frames)
        seqs.append(compose(lm, tokenizer, emb, prompt, "train", transcript))
    return stack_composed(seqs)


def evaluate_alignment(lm, tokenizer, encoder, projector, frames_list, transcripts,
                       prompts, batch_size: int):
    """Pooled validation loss (total NLL / total supervised) and accuracy."""
    total_nll = 0.0
    hits = 0
    supervised = 0
    with T.no_grad():
        for lo in range(0, len(frames_list), batch_size):
            hi = min(lo + batch_size, len(frames_list))
            emb, targets, lengths = compose_batch(
                lm, tokenizer, encoder, projector,
                frames_list[lo:hi], transcripts[lo:hi], prompts[lo:hi],
            )
            logits = lm.forward(emb, lengths)
            res = T.softmax_cross_entropy(logits, targets, IGNORE_ID)
            total_nll += res.loss.item() * res.supervised
            supervised += res.supervised
            valid = targets.reshape(-1) != IGNORE_ID
            pred = logits.data.reshape(-1, logits.shape[-1]).argmax(axis=-1)
            hits += int((pred[valid] == targets.reshape(-1)[valid]).sum())
    if supervised == 0:
        raise RuntimeError("validation set has zero supervised positions")
    return total_nll / supervised, hits / supervised


# ---------------------------------------------------------------------------
# projector training


def train_projector(
    dataset_dir,
    out_dir,
    lm_checkpoint,
    encoder=None,
    k: int = 5,
    d_hidden: int = 2048,
    batch_size: int = 8,
    max_steps: int = 100_000,
    lr_max: float = 1e-4,
    warmup: int = 1000,
    weight_decay: float = 0.0,
    val_every: int = 500,
    patience: int = 5,
    prompt_mode: str = "fixed",
    prompt_library: PromptLibrary | None = None,
    freeze_lm: bool = True,
    freeze_encoder: bool = True,
    seed: int = 0,
    config_hash: str = "",
    resume: bool = False,
    max_val_utts=None,
) -> dict:
    """Align speech features to the LM by training (by default) only the
    projector. Writes best/last checkpoints, frozen-module snapshots,
    and the train/val CSV logs into out_dir.
    """
    os.makedirs(out_dir, exist_ok=True)
    tokenizer = Tokenizer.load(os.path.join(dataset_dir, "tokenizer.json"))
    train_manifest = os.path.join(dataset_dir, "train.jsonl")
    val_manifest = os.path.join(dataset_dir, "val.jsonl")
    train_recs = read_manifest(train_manifest)
    val_recs = read_manifest(val_manifest)
    if not train_recs or not val_recs:
        raise ValueError("empty train or val manifest")
    if max_val_utts is not None:
        val_recs = val_recs[:max_val_utts]
    train_frames = [load_features(r, train_manifest) for r in train_recs]
    val_frames = [load_features(r, val_manifest) for r in val_recs]
    train_texts = [r.transcript for r in train_recs]
    val_texts = [r.transcript for r in val_recs]

    lm = ckpt.load_lm(lm_checkpoint)
    if freeze_lm:
        lm.freeze()
    if encoder is None:
        encoder = ToySpeechEncoder("identity", train_recs[0].dim)
    elif isinstance(encoder, (str, os.PathLike)):
        encoder = ckpt.load_encoder(encoder)
    lm_input_path = os.path.join(out_dir, "lm_input.slmc")
    shutil.copyfile(lm_checkpoint, lm_input_path)
    encoder_input_path = os.path.join(out_dir, "encoder_input.slmc")
    ckpt.save_encoder(encoder_input_path, encoder, config_hash=config_hash, seed=seed)
    if freeze_encoder:
        encoder.freeze()
    else:
        encoder.unfreeze()

    projector = Projector(encoder.output_dim, k, d_hidden, lm.config.dim,
                          seed=derive_seed(seed, "projector"))
    ckpt.save_projector(os.path.join(out_dir, "projector_init.slmc"), projector,
                        config_hash=config_hash, seed=seed)

    trainables = {"projector." + n: p for n, p in projector.params.items()}
    if not freeze_encoder:
        trainables.update({"encoder." + n: p for n, p in encoder.params.items()})
    if not freeze_lm:
        trainables.update({"lm." + n: p for n, p in lm.params.items()})
    optimizer = AdamW(trainables, lr_max=lr_max, warmup=warmup,
                      weight_decay=weight_decay)

    prompt_fn = prompt_for_mode(prompt_mode, prompt_library)
    val_prompts = [prompt_fn(derive_rng(seed, "valprompt", i))
                   for i in range(len(val_recs))]

    best_path = os.path.join(out_dir, "best.slmc")
    last_path = os.path.join(out_dir, "last.slmc")
    start_step = 1
    best_val = float("inf")
    best_step = 0
    since_best = 0
    if resume and os.path.exists(last_path):
        records = ckpt.load_params(last_path)
        side = ckpt.read_sidecar(last_path)
        if config_hash and side.get("config_hash") not in ("", config_hash):
            raise ValueError(
                f"resume config hash {side.get('config_hash')!r} != {config_hash!r}"
            )
        ckpt.assign_params(
            {name: p for name, p in trainables.items()},
            {k_: v for k_, v in records.items() if k_ in trainables},
            where=last_path,
        )
        optimizer.load_state_records(records)
        best_val = float(records["trainstate.best_val"])
        best_step = int(records["trainstate.best_step"])
        since_best = int(records["trainstate.since_best"])
        start_step = int(side["step"]) + 1
        _truncate_log(os.path.join(out_dir, "train_log.csv"), side["step"])
        _truncate_log(os.path.join(out_dir, "val_log.csv"), side["step"])

    logger = TrainLogger(out_dir, config_hash, resume=resume and start_step > 1)

    def save_last(step, val_loss):
        records = dict(trainables)
        records.update(optimizer.state_records())
        records["trainstate.best_val"] = np.asarray(
            best_val if np.isfinite(best_val) else 1e300
        )
        records["trainstate.best_step"] = np.asarray(float(best_step))
        records["trainstate.since_best"] = np.asarray(float(since_best))
        ckpt.save_train_state(last_path, records, projector, step, val_loss,
                              config_hash, seed)

    n = len(train_recs)
    steps_per_epoch = max(1, n // batch_size)
    stop_reason = "max_steps"
    last_val_loss = None
    step = start_step - 1

    if max_steps == 0:
        ckpt.save_projector(best_path, projector, step=0, val_loss=None,
                            config_hash=config_hash, seed=seed)
        save_last(0, None)

    for step in range(start_step, max_steps + 1):
        t0 = time.perf_counter()
        epoch = (step - 1) // steps_per_epoch
        slot = (step - 1) % steps_per_epoch
        perm = derive_rng(seed, "perm", epoch).permutation(n)
        idx = perm[slot * batch_size: slot * batch_size + batch_size]
        prompts = [prompt_fn(derive_rng(seed, "prompt", epoch, int(i))) for i in idx]
        emb, targets, lengths = compose_batch(
            lm, tokenizer, encoder, projector,
            [train_frames[i] for i in idx], [train_texts[i] for i in idx], prompts,
        )
        logits = lm.forward(emb, lengths)
        res = T.softmax_cross_entropy(logits, targets, IGNORE_ID)
        loss = res.loss.item()
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite training loss {loss} at step {step}")
        acc = masked_token_accuracy(logits, targets, IGNORE_ID)
        optimizer.zero_grad()
        T.backward(res.loss)
        lr = optimizer.step(lr_at(step, lr_max, warmup))
        wall_ms = (time.perf_counter() - t0) * 1000.0
        logger.log_step(step, loss, acc, lr, wall_ms)

        if step % val_every == 0 or step == max_steps:
            val_loss, val_acc = evaluate_alignment(
                lm, tokenizer, encoder, projector, val_frames, val_texts,
                val_prompts, batch_size,
            )
            logger.log_val(step, val_loss, val_acc)
            last_val_loss = val_loss
            if val_loss < best_val:
                best_val = val_loss
                best_step = step
                since_best = 0
                ckpt.save_projector(best_path, projector, step=step,
                                    val_loss=val_loss, config_hash=config_hash,
                                    seed=seed)
            else:
                since_best += 1
            save_last(step, val_loss)
            if since_best >= patience:
                stop_reason = "early_stop"
                break

    if not os.path.exists(best_path):  # no validation happened before the end
        ckpt.save_projector(best_path, projector, step=step, val_loss=last_val_loss,
                            config_hash=config_hash, seed=seed)
    if step >= start_step:
        save_last(step, last_val_loss)
    ckpt.save_lm(os.path.join(out_dir, "lm_final.slmc"), lm,
                 step=step, config_hash=config_hash, seed=seed)
    ckpt.save_encoder(os.path.join(out_dir, "encoder_final.slmc"), encoder,
                      step=step, config_hash=config_hash, seed=seed)
    logger.close()
    summary = {
        "steps_run": step,
        "stop_reason": stop_reason,
        "best_val_loss": None if not np.isfinite(best_val) else best_val,
        "best_step": best_step,
        "best_checkpoint": best_path,
        "last_checkpoint": last_path,
        "train_log": logger.train_path,
        "val_log": logger.val_path,
    }
    return summary


# ---------------------------------------------------------------------------
# LM corpora and training


def build_pretrain_corpus(spec: SyntheticTaskSpec, tokenizer: Tokenizer,
                          n_sentences: int, seed: int) -> list:
    """Sentences from the task grammar as token-id documents."""
    rng = derive_rng(seed, "pretrain_corpus")
    docs = []
    for _ in range(n_sentences):
        ids = sample_word_ids(spec, rng)
        docs.append(tokenizer.encode_text(" ".join(spec.words[w] for w in ids)))
    return docs


def sample_bigram_stream(spec: SyntheticTaskSpec, tokenizer: Tokenizer,
                         n_tokens: int, seed: int) -> list:
    """One long boundary-free bigram chain; its best achievable next-token
    accuracy is computable in closed form from the transition table."""
    rng = derive_rng(seed, "bigram_stream")
    ids = np.empty(n_tokens, dtype=np.int64)
    ids[0] = rng.integers(spec.vocab_size)
    for i in range(1, n_tokens):
        ids[i] = rng.choice(spec.vocab_size, p=spec.bigram[ids[i - 1]])
    word_token = tokenizer.encode_text(" ".join(spec.words))
    return [word_token[i] for i in ids]


def build_copy_corpus(vocab_words, tokenizer: Tokenizer, n_examples: int,
                      seed: int, len_range=(1, 6)) -> list:
    """Chat-formatted copy tasks: "USER: w... ASSISTANT: w..." + EOS."""
    rng = derive_rng(seed, "copy_corpus")
    lo, hi = len_range
    docs = []
    for _ in range(n_examples):
        count = int(rng.integers(lo, hi + 1))
        words = [vocab_words[int(rng.integers(len(vocab_words)))] for _ in range(count)]
        text = PREFIX_TEXT + " ".join(words) + TAG_TEXT + " ".join(words)
        docs.append(tokenizer.encode_text(text) + [tokenizer.eos_id])
    return docs


def pack_windows(docs, eos_id: int, seq_len: int) -> np.ndarray:
    """Concatenate docs with EOS separators and cut [n, seq_len+1] windows."""
    stream = []
    for doc in docs:
        stream.extend(doc)
        stream.append(eos_id)
    n = len(stream) // (seq_len + 1)
    if n == 0:
        raise ValueError(
            f"corpus too small: {len(stream)} tokens < one window of {seq_len + 1}"
        )
    arr = np.asarray(stream[: n * (seq_len + 1)], dtype=np.int64)
    return arr.reshape(n, seq_len + 1)


def _window_loss(lm, windows) -> tuple:
    ids = windows[:, :-1]
    targets = windows[:, 1:]
    logits = lm.forward_ids(ids)
    res = T.softmax_cross_entropy(logits, targets, IGNORE_ID)
    return logits, res


def evaluate_windows(lm, windows, batch_size: int) -> tuple:
    total_nll, hits, count = 0.0, 0, 0
    with T.no_grad():
        for lo in range(0, len(windows), batch_size):
            batch = windows[lo: lo + batch_size]
            logits, res = _window_loss(lm, batch)
            total_nll += res.loss.item() * res.supervised
            count += res.supervised
            pred = logits.data.argmax(axis=-1)
            hits += int((pred == batch[:, 1:]).sum())
    return total_nll / count, hits / count


def pretrain_lm(
    corpus,
    lm_config: LMConfig,
    out_path,
    eos_id: int,
    steps: int,
    batch_size: int = 16,
    seq_len: int = 32,
    lr_max: float = 1e-3,
    warmup: int = 100,
    seed: int = 0,
    accuracy_floor=None,
    val_fraction: float = 0.05,
    config_hash: str = "",
) -> tuple:
    """Next-token pretraining over packed windows; returns (lm, metrics).

    Writes the checkpoint to out_path. If accuracy_floor is given and
    held-out accuracy lands below it, the run aborts.
    """
    corpus = [list(doc) for doc in corpus]
    if not corpus or all(len(d) == 0 for d in corpus):
        raise ValueError("pretraining corpus is empty")
    windows = pack_windows(corpus, eos_id, seq_len)
    n_val = max(1, int(round(len(windows) * val_fraction)))
    perm = derive_rng(seed, "window_split").permutation(len(windows))
    val_windows = windows[perm[:n_val]]
    train_windows = windows[perm[n_val:]]
    if len(train_windows) == 0:
        raise ValueError("corpus leaves no training windows after the val split")

    lm = TinyCausalLM(lm_config, seed=derive_seed(seed, "lm_init"))
    optimizer = AdamW({"lm." + n: p for n, p in lm.params.items()},
                      lr_max=lr_max, warmup=warmup)
    out_dir = os.path.dirname(os.path.abspath(out_path))
    os.makedirs(out_dir, exist_ok=True)
    logger = TrainLogger(out_dir, config_hash)

    n = len(train_windows)
    steps_per_epoch = max(1, n // batch_size)
    for step in range(1, steps + 1):
        t0 = time.perf_counter()
        epoch = (step - 1) // steps_per_epoch
        slot = (step - 1) % steps_per_epoch
        perm = derive_rng(seed, "perm", epoch).permutation(n)
        idx = perm[slot * batch_size: slot * batch_size + batch_size]
        logits, res = _window_loss(lm, train_windows[idx])
        loss = res.loss.item()
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite pretraining loss {loss} at step {step}")
        acc = masked_token_accuracy(logits, train_windows[idx][:, 1:], IGNORE_ID)
        optimizer.zero_grad()
        T.backward(res.loss)
        lr = optimizer.step(lr_at(step, lr_max, warmup))
        logger.log_step(step, loss, acc, lr, (time.perf_counter() - t0) * 1000.0)

    val_loss, val_acc = evaluate_windows(lm, val_windows, batch_size)
    logger.log_val(max(steps, 1), val_loss, val_acc)
    logger.close()
    if accuracy_floor is not None and val_acc < accuracy_floor:
        raise RuntimeError(
            f"pretrained LM held-out accuracy {val_acc:.4f} below the "
            f"configured floor {accuracy_floor:.4f}"
        )
    ckpt.save_lm(out_path, lm, step=steps, val_loss=val_loss,
                 config_hash=config_hash, seed=seed)
    return lm, {"val_loss": val_loss, "val_accuracy": val_acc}


def _chat_targets(doc, tag_id: int):
    ids = np.asarray(doc, dtype=np.int64)
    tag_pos = int(np.nonzero(ids == tag_id)[0][0])
    inputs = ids[:-1]
    targets = np.full(len(inputs), IGNORE_ID, dtype=np.int64)
    targets[tag_pos:] = ids[tag_pos + 1:]
    return inputs, targets


def instruction_tune(
    lm: TinyCausalLM,
    corpus,
    tokenizer: Tokenizer,
    out_path,
    steps: int,
    batch_size: int = 16,
    lr_max: float = 1e-3,
    warmup: int = 100,
    seed: int = 0,
    config_hash: str = "",
) -> tuple:
    """Continue training on chat-formatted documents, supervising only
    the response span (everything after the assistant tag)."""
    user_ids = tokenizer.encode_text(PREFIX_TEXT)
    tag_ids = tokenizer.encode_text(TAG_TEXT)
    if len(user_ids) != 1 or len(tag_ids) != 1:
        raise ValueError("template markers must each be a single token")
    user_id, tag_id = user_ids[0], tag_ids[0]
    if tokenizer.unk_id in (user_id, tag_id):
        # a marker outside the vocabulary makes tag-position search meaningless
        raise ValueError("template markers are not in the tokenizer vocabulary")
    corpus = [list(doc) for doc in corpus]
    if not corpus:
        raise ValueError("instruction corpus is empty")
    for i, doc in enumerate(corpus):
        if user_id not in doc or tag_id not in doc:
            raise ValueError(
                f"instruction corpus document {i} lacks the chat template markers"
            )
    pairs = [_chat_targets(doc, tag_id) for doc in corpus]

    optimizer = AdamW({"lm." + n: p for n, p in lm.params.items()},
                      lr_max=lr_max, warmup=warmup)
    out_dir = os.path.dirname(os.path.abspath(out_path))
    os.makedirs(out_dir, exist_ok=True)
    logger = TrainLogger(out_dir, config_hash)

    n = len(pairs)
    steps_per_epoch = max(1, n // batch_size)
    for step in range(1, steps + 1):
        t0 = time.perf_counter()
        epoch = (step - 1) // steps_per_epoch
        slot = (step - 1) % steps_per_epoch
        perm = derive_rng(seed, "perm", epoch).permutation(n)
        idx = perm[slot * batch_size: slot * batch_size + batch_size]
        batch = [pairs[i] for i in idx]
        lengths = [len(inp) for inp, _ in batch]
        lmax = max(lengths)
        ids = np.full((len(batch), lmax), tokenizer.pad_id, dtype=np.int64)
        targets = np.full((len(batch), lmax), IGNORE_ID, dtype=np.int64)
        for j, (inp, tgt) in enumerate(batch):
            ids[j, : len(inp)] = inp
            targets[j, : len(tgt)] = tgt
        logits = lm.forward_ids(ids, lengths)
        res = T.softmax_cross_entropy(logits, targets, IGNORE_ID)
        loss = res.loss.item()
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite tuning loss {loss} at step {step}")
        acc = masked_token_accuracy(logits, targets, IGNORE_ID)
        optimizer.zero_grad()
        T.backward(res.loss)
        lr = optimizer.step(lr_at(step, lr_max, warmup))
        logger.log_step(step, loss, acc, lr, (time.perf_counter() - t0) * 1000.0)
    logger.close()
    ckpt.save_lm(out_path, lm, step=steps, config_hash=config_hash, seed=seed)
    return lm, {"steps": steps}


# ---------------------------------------------------------------------------
# span tuning: the chat variant that can actually transcribe
#
# A projector never hands the LM exact embedding rows. Each word's frames
# drift against the k-frame grid, so a downsampled chunk straddles word
# boundaries and the best any per-chunk map can emit is a weighted blend
# of word embeddings. Tuning on token-level copies alone leaves the LM
# brittle off the embedding rows; tuning on simulated blends teaches it
# to read them.


@dataclass
class RenderedSpan:
    """One chat example whose user span arrives as embedding rows.

    The span is chunk_weights @ table[token_ids]: what an ideal projector
    would emit for these words under the task's frame protocol.
    """

    token_ids: np.ndarray  # [L] vocabulary ids of the spoken words
    chunk_weights: np.ndarray  # [N, L], rows sum to 1; one-hot row = pure word
    prompt: str
    transcript: str


def chunk_weight_matrix(counts, k: int) -> np.ndarray:
    """Word-occupancy weights of each k-frame chunk.

    counts[i] frames of word i are laid out consecutively and cut into
    floor(sum/k) full chunks; entry [c, i] is the fraction of chunk c
    covered by word i. Tail frames beyond the last full chunk are
    dropped, mirroring downsample.
    """
    counts = np.asarray(counts, dtype=np.int64)
    labels = np.repeat(np.arange(len(counts)), counts)
    n = len(labels) // k
    w = np.zeros((n, len(counts)))
    for c in range(n):
        for lab in labels[c * k:(c + 1) * k]:
            w[c, lab] += 1.0 / k
    return w


def build_span_corpus(spec: SyntheticTaskSpec, tokenizer: Tokenizer,
                      n_examples: int, seed: int, k: int = 5,
                      copy_fraction: float = 0.2, prompts=None) -> list:
    """Rendered spans over the task grammar.

    Word counts follow frames_per_word plus jitter, so the chunk-weight
    drift statistics match what gen_dataset features produce after
    downsampling. A copy_fraction of examples use exactly k frames per
    word instead (one-hot weights: plain copy tasks, which keep the
    chat LM's verbatim-copy behavior intact). Prompts are drawn
    uniformly; the default pool is the shipped library plus the empty
    prompt so every decode prompt_mode stays in distribution.
    """
    if prompts is None:
        prompts = [""] + list(DEFAULT_PROMPTS)
    if not prompts:
        raise ValueError("prompt pool is empty")
    rng = derive_rng(seed, "span_corpus")
    jitter = np.asarray(spec.jitter)
    out = []
    for _ in range(n_examples):
        word_ids = sample_word_ids(spec, rng)
        counts = (
            spec.frames_per_word
            + jitter[rng.integers(0, len(jitter), size=len(word_ids))]
        )
        if rng.random() < copy_fraction or counts.sum() < k:
            counts = np.full(len(word_ids), k)
        text = " ".join(spec.words[w] for w in word_ids)
        out.append(RenderedSpan(
            token_ids=np.asarray(tokenizer.encode_text(text), dtype=np.int64),
            chunk_weights=chunk_weight_matrix(counts, k),
            prompt=prompts[int(rng.integers(len(prompts)))],
            transcript=text,
        ))
    return out


def tune_on_spans(
    lm: TinyCausalLM,
    examples,
    tokenizer: Tokenizer,
    out_path,
    steps: int,
    batch_size: int = 16,
    lr_max: float = 1e-3,
    warmup: int = 100,
    emb_noise: float = 0.0,
    seed: int = 0,
    config_hash: str = "",
) -> tuple:
    """Instruction tuning whose user spans are embedding rows, not ids.

    Spans are rebuilt from the live embedding table every step, so
    gradients flow into the table through the blend weights. emb_noise
    adds Gaussian jitter of that fraction of the table's RMS coordinate
    to each span row: the tuned LM then tolerates inputs that merely
    approximate its rows, which is all a projector will ever produce.
    """
    examples = list(examples)
    if not examples:
        raise ValueError("span corpus is empty")
    optimizer = AdamW({"lm." + n: p for n, p in lm.params.items()},
                      lr_max=lr_max, warmup=warmup)
    out_dir = os.path.dirname(os.path.abspath(out_path))
    os.makedirs(out_dir, exist_ok=True)
    logger = TrainLogger(out_dir, config_hash)
    noise_std = emb_noise * float(np.sqrt(np.mean(lm.params["tok_emb"].data ** 2)))

    n = len(examples)
    steps_per_epoch = max(1, n // batch_size)
    for step in range(1, steps + 1):
        t0 = time.perf_counter()
        epoch = (step - 1) // steps_per_epoch
        slot = (step - 1) % steps_per_epoch
        perm = derive_rng(seed, "perm", epoch).permutation(n)
        idx = perm[slot * batch_size: slot * batch_size + batch_size]
        noise_rng = derive_rng(seed, "span_noise", step)
        seqs = []
        for i in idx:
            ex = examples[i]
            span = T.matmul(T.Tensor(ex.chunk_weights), lm.embed(ex.token_ids))
            if noise_std > 0.0:
                span = T.add(
                    span, T.Tensor(noise_std * noise_rng.standard_normal(span.shape))
                )
            seqs.append(compose(lm, tokenizer, span, ex.prompt, "train", ex.transcript))
        x, targets, lengths = stack_composed(seqs)
        logits = lm.forward(x, lengths)
        res = T.softmax_cross_entropy(logits, targets, IGNORE_ID)
        loss = res.loss.item()
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite tuning loss {loss} at step {step}")
        acc = masked_token_accuracy(logits, targets, IGNORE_ID)
        optimizer.zero_grad()
        T.backward(res.loss)
        lr = optimizer.step(lr_at(step, lr_max, warmup))
        logger.log_step(step, loss, acc, lr, (time.perf_counter() - t0) * 1000.0)
    logger.close()
    ckpt.save_lm(out_path, lm, step=steps, config_hash=config_hash, seed=seed)
    return lm, {"steps": steps}
