"""Autoregressive inference: beam search over a pluggable next-token
scorer, plus the adapters that drive it from a composed speech prefix
or a plain token prefix.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .projector import compose, speech_embedding


@dataclass(frozen=True)
class Hypothesis:
    """A (possibly finished) candidate continuation.

    ids exclude the EOS token; logprob includes the EOS step for
    finished hypotheses, so finished candidates compare on the full
    sequence probability.
    """

    ids: tuple
    logprob: float
    finished: bool
    truncated: bool = field(default=False, compare=False)

    def sort_key(self):
        # higher probability first, then lower token ids, then earlier finish
        return (-self.logprob, self.ids, len(self.ids))


def beam_search(score_fn, eos_id: int, beam: int, max_new: int, vocab_size: int) -> Hypothesis:
    """Breadth-limited search for the most probable finished sequence.

    `score_fn(prefixes)` maps a list of generated-id tuples to a
    [len(prefixes), vocab_size] array of next-token log probabilities.
    Each step every frontier hypothesis is expanded over the full
    vocabulary; an EOS expansion counts as finished and is kept only if
    it ranks inside the global top-`beam` candidates of its step (this
    is what makes beam=1 coincide with greedy decoding). The frontier
    carries the `beam` best unfinished candidates. Scores are plain
    summed log probabilities, no length normalization. The search stops
    once the best finished hypothesis strictly beats everything still
    on the frontier (extensions can only lower a score, so nothing
    reachable can win; on exact ties it keeps going because a later
    finish could still win the tie rules). If nothing finishes within
    max_new steps the best unfinished hypothesis is returned flagged
    truncated.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    if max_new < 1:
        raise ValueError(f"max_new must be >= 1, got {max_new}")
    frontier = [Hypothesis(ids=(), logprob=0.0, finished=False)]
    finished = []
    best_unfinished = frontier[0]
    for _ in range(max_new):
        logprobs = score_fn([h.ids for h in frontier])
        logprobs = np.asarray(logprobs)
        if logprobs.shape != (len(frontier), vocab_size):
            raise T.ShapeError(
                f"score_fn returned {logprobs.shape}, expected "
                f"({len(frontier)}, {vocab_size})"
            )
        candidates = []
        for h, row in zip(frontier, logprobs):
            for tok in range(vocab_size):
                if tok == eos_id:
                    # finished candidates drop the EOS id so the tie
                    # rules compare on the emitted sequence
                    candidates.append(
                        Hypothesis(ids=h.ids, logprob=h.logprob + float(row[tok]),
                                   finished=True)
                    )
                else:
                    candidates.append(
                        Hypothesis(ids=h.ids + (tok,),
                                   logprob=h.logprob + float(row[tok]),
                                   finished=False)
                    )
        candidates.sort(key=Hypothesis.sort_key)
        finished.extend(c for c in candidates[:beam] if c.finished)
        frontier = [c for c in candidates if not c.finished][:beam]
        if not frontier:
            break
        best_unfinished = frontier[0]
        if finished:
            best = min(finished, key=Hypothesis.sort_key)
            if best.logprob > frontier[0].logprob:
                break
    if finished:
        return min(finished, key=Hypothesis.sort_key)
    return Hypothesis(ids=best_unfinished.ids, logprob=best_unfinished.logprob,
                      finished=False, truncated=True)


def _log_softmax(row: np.ndarray) -> np.ndarray:
    z = row - row.max()
    return z - np.log(np.exp(z).sum())


def embedding_score_fn(lm, prefix_emb: T.Tensor):
    """Next-token scorer over a fixed embedding prefix.

    Generated ids are embedded and appended after the prefix; all live
    hypotheses are evaluated in one padded batch per step.
    """

    def score(prefixes):
        with T.no_grad():
            rows = []
            lengths = []
            for ids in prefixes:
                if ids:
                    e = T.concat([prefix_emb, lm.embed(np.asarray(ids))], axis=0)
                else:
                    e = prefix_emb
                rows.append(e)
                lengths.append(e.shape[0])
            lmax = max(lengths)
            x = T.stack([T.pad_rows(e, lmax) for e in rows])
            logits = lm.forward(x, lengths)
            out = np.stack(
                [_log_softmax(logits.data[i, lengths[i] - 1]) for i in range(len(rows))]
            )
        return out

    return score


def decode_ids(lm, prefix_ids, eos_id: int, beam: int = 4, max_new: int = 16) -> Hypothesis:
    """Beam-decode a continuation of a plain token-id prefix."""
    with T.no_grad():
        prefix_emb = lm.embed(np.asarray(prefix_ids))
    return beam_search(embedding_score_fn(lm, prefix_emb), eos_id=eos_id,
                       beam=beam, max_new=max_new, vocab_size=lm.config.vocab_size)


def decode_utterance(lm, tokenizer, encoder, projector, frames, prompt: str,
                     beam: int = 4, max_new: int = 16) -> tuple:
    """Transcribe one utterance; returns (text, Hypothesis)."""
    with T.no_grad():
        emb = speech_embedding(encoder, projector, frames)
        seq = compose(lm, tokenizer, emb, prompt, "infer")
    hyp = beam_search(embedding_score_fn(lm, seq.embeddings),
                      eos_id=tokenizer.eos_id, beam=beam, max_new=max_new,
                      vocab_size=lm.config.vocab_size)
    return tokenizer.decode(hyp.ids), hyp


def worker_count(requested=None) -> int:
    """Resolve a worker count, honoring the SLAM_ASR_THREADS cap."""
    cap = os.environ.get("SLAM_ASR_THREADS")
    limit = max(1, int(cap)) if cap else None
    n = requested if requested is not None else (limit or 1)
    if limit is not None:
        n = min(n, limit)
    return max(1, n)


def decode_corpus(lm, tokenizer, encoder, projector, frames_list, prompts,
                  beam: int = 4, max_new: int = 16, threads=None) -> list:
    """Decode utterances in parallel; output order follows input order
    regardless of thread count."""
    n_workers = worker_count(threads)

    def one(i):
        text, hyp = decode_utterance(lm, tokenizer, encoder, projector,
                                     frames_list[i], prompts[i],
                                     beam=beam, max_new=max_new)
        return {
            "hyp": text,
            "logprob": hyp.logprob,
            "finished": hyp.finished,
            "truncated": hyp.truncated,
        }
    with T.no_grad():
        if n_workers == 1:
            return [one(i) for i in range(len(frames_list))]
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            return list(pool.map(one, range(len(frames_list))))
