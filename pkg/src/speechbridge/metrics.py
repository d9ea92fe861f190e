"""Scoring: word error rate with a unique S/I/D decomposition, corpus
reports, and word-level perplexity.
"""

from __future__ import annotations

import json

import numpy as np

from . import tensor as T
from .data import IGNORE_ID, normalize_text
from .projector import compose, speech_embedding


def _edit_costs(ref, hyp):
    """DP over lexicographic cost (total_edits, substitutions).

    Minimizing substitutions as the tie-break pins down a unique
    (S, I, D) triple for every pair: with edits e and subs s fixed,
    I + D = e - s while I - D = len(hyp) - len(ref).
    """
    lr, lh = len(ref), len(hyp)
    prev = [(j, 0) for j in range(lh + 1)]
    for i in range(1, lr + 1):
        cur = [(i, 0)] + [None] * lh
        for j in range(1, lh + 1):
            de, ds = prev[j]
            ie, isub = cur[j - 1]
            best = min((de + 1, ds), (ie + 1, isub))
            se, ss = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                best = min(best, (se, ss))
            else:
                best = min(best, (se + 1, ss + 1))
            cur[j] = best
        prev = cur
    return prev[lh]


def wer(ref_words, hyp_words) -> dict:
    """Minimum-edit WER; may exceed 1. The reference must be nonempty."""
    ref = list(ref_words)
    hyp = list(hyp_words)
    if not ref:
        raise ValueError("WER is undefined against an empty reference")
    edits, subs = _edit_costs(ref, hyp)
    ins = (edits - subs + len(hyp) - len(ref)) // 2
    dels = edits - subs - ins
    return {
        "wer": edits / len(ref),
        "substitutions": subs,
        "insertions": ins,
        "deletions": dels,
    }


def wer_text(ref: str, hyp: str) -> dict:
    """WER over whitespace words after lowercasing both sides."""
    return wer(normalize_text(ref).split(), normalize_text(hyp).split())


def align_words(ref, hyp) -> list:
    """Operation list [(op, ref_word|None, hyp_word|None)] realizing the
    same lexicographic-minimal alignment the counts come from."""
    lr, lh = len(ref), len(hyp)
    cost = [[None] * (lh + 1) for _ in range(lr + 1)]
    for j in range(lh + 1):
        cost[0][j] = (j, 0)
    for i in range(1, lr + 1):
        cost[i][0] = (i, 0)
        for j in range(1, lh + 1):
            options = [
                (cost[i - 1][j][0] + 1, cost[i - 1][j][1]),
                (cost[i][j - 1][0] + 1, cost[i][j - 1][1]),
            ]
            if ref[i - 1] == hyp[j - 1]:
                options.append(cost[i - 1][j - 1])
            else:
                options.append((cost[i - 1][j - 1][0] + 1, cost[i - 1][j - 1][1] + 1))
            cost[i][j] = min(options)
    ops = []
    i, j = lr, lh
    while i > 0 or j > 0:
        here = cost[i][j]
        if i > 0 and j > 0:
            diag = cost[i - 1][j - 1]
            if ref[i - 1] == hyp[j - 1] and here == diag:
                ops.append(("match", ref[i - 1], hyp[j - 1]))
                i, j = i - 1, j - 1
                continue
            if here == (diag[0] + 1, diag[1] + 1):
                ops.append(("sub", ref[i - 1], hyp[j - 1]))
                i, j = i - 1, j - 1
                continue
        if i > 0 and here == (cost[i - 1][j][0] + 1, cost[i - 1][j][1]):
            ops.append(("del", ref[i - 1], None))
            i -= 1
            continue
        ops.append(("ins", None, hyp[j - 1]))
        j -= 1
    ops.reverse()
    return ops


def score_corpus(refs: dict, hyps: dict) -> dict:
    """Corpus WER report over id -> transcript maps.

    The id sets must match exactly; partial overlap is refused rather
    than silently intersected.
    """
    if set(refs) != set(hyps):
        only_ref = sorted(set(refs) - set(hyps))[:5]
        only_hyp = sorted(set(hyps) - set(refs))[:5]
        raise ValueError(
            f"ref/hyp utterance id sets differ (ref-only {only_ref}, "
            f"hyp-only {only_hyp})"
        )
    if not refs:
        raise ValueError("empty scoring job")
    per_utt = []
    total_edits = 0
    total_words = 0
    for utt_id in sorted(refs):
        ref = normalize_text(refs[utt_id])
        hyp = normalize_text(hyps[utt_id])
        counts = wer(ref.split(), hyp.split())
        per_utt.append({
            "id": utt_id,
            "ref": ref,
            "hyp": hyp,
            "S": counts["substitutions"],
            "I": counts["insertions"],
            "D": counts["deletions"],
        })
        total_edits += counts["substitutions"] + counts["insertions"] + counts["deletions"]
        total_words += len(ref.split())
    return {"corpus_wer": total_edits / total_words, "per_utterance": per_utt}


def write_report(report: dict, json_path, dump_path, config_hash: str = "") -> None:
    """Write the JSON report plus a plain-text alignment dump."""
    doc = dict(report)
    doc["config_hash"] = config_hash
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(dump_path, "w", encoding="utf-8") as f:
        f.write(f"# config_hash={config_hash}\n")
        f.write(f"# corpus_wer={report['corpus_wer']!r}\n")
        for utt in report["per_utterance"]:
            ops = align_words(utt["ref"].split(), utt["hyp"].split())
            f.write(f"== {utt['id']} (S={utt['S']} I={utt['I']} D={utt['D']})\n")
            ref_row = []
            hyp_row = []
            tag_row = []
            for op, r, h in ops:
                r = r or "*"
                h = h or "*"
                width = max(len(r), len(h))
                ref_row.append(r.ljust(width))
                hyp_row.append(h.ljust(width))
                tag = {"match": " ", "sub": "S", "ins": "I", "del": "D"}[op]
                tag_row.append(tag.ljust(width))
            f.write("REF: " + " ".join(ref_row) + "\n")
            f.write("HYP: " + " ".join(hyp_row) + "\n")
            f.write("     " + " ".join(tag_row) + "\n")


# ---------------------------------------------------------------------------
# word-level perplexity: divide total NLL by whitespace-word count


def _nll_of_targets(logits: T.Tensor, targets) -> float:
    res = T.softmax_cross_entropy(logits, targets, IGNORE_ID)
    return res.loss.item() * res.supervised


def word_ppl_text(lm, tokenizer, text: str) -> float:
    """Perplexity of raw text under the LM, per whitespace word.

    Conditioning starts from a leading EOS so every word token is
    predicted; a uniform LM over vocab V therefore scores exactly V
    when each word is one token.
    """
    words = normalize_text(text).split()
    if not words:
        raise ValueError("word_ppl needs at least one word")
    ids = tokenizer.encode_text(text)
    full = np.asarray([tokenizer.eos_id] + ids, dtype=np.int64)
    with T.no_grad():
        logits = lm.forward_ids(full[:-1])
        nll = _nll_of_targets(logits, full[1:])
    return float(np.exp(nll / len(words)))


def word_ppl_aligned(lm, tokenizer, encoder, projector, frames, transcript: str,
                     prompt: str = "") -> float:
    """Perplexity of a transcript given its speech, per whitespace word.

    NLL is summed over the supervised span (transcript plus EOS), then
    divided by the word count of the normalized transcript.
    """
    words = normalize_text(transcript).split()
    if not words:
        raise ValueError("word_ppl needs at least one word")
    with T.no_grad():
        emb = speech_embedding(encoder, projector, frames)
        seq = compose(lm, tokenizer, emb, prompt, "train", transcript)
        logits = lm.forward(seq.embeddings)
        nll = _nll_of_targets(logits, seq.target_ids)
    return float(np.exp(nll / len(words)))
