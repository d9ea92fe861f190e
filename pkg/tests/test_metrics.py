"""WER against exhaustive alignment enumeration; word-level perplexity."""

import itertools
import json

import numpy as np
import pytest

import speechbridge.tensor as T
from speechbridge.data import Tokenizer
from speechbridge.lm import LMConfig, TinyCausalLM
from speechbridge.metrics import (
    align_words,
    score_corpus,
    wer,
    wer_text,
    word_ppl_text,
    write_report,
)


def brute_force_counts(ref, hyp):
    """Minimum (edits, subs) over every alignment, by plain recursion."""

    def go(i, j):
        if i == len(ref):
            return (len(hyp) - j, 0)
        if j == len(hyp):
            return (len(ref) - i, 0)
        sub_e, sub_s = go(i + 1, j + 1)
        if ref[i] != hyp[j]:
            sub_e, sub_s = sub_e + 1, sub_s + 1
        del_e, del_s = go(i + 1, j)
        ins_e, ins_s = go(i, j + 1)
        return min((sub_e, sub_s), (del_e + 1, del_s), (ins_e + 1, ins_s))

    edits, subs = go(0, 0)
    ins = (edits - subs + len(hyp) - len(ref)) // 2
    dels = edits - subs - ins
    return edits, subs, ins, dels


# ---------------------------------------------------------------- hand examples

def test_identical_is_zero():
    out = wer(["a", "b", "c"], ["a", "b", "c"])
    assert out == {"wer": 0.0, "substitutions": 0, "insertions": 0, "deletions": 0}


def test_single_substitution():
    out = wer("a b c".split(), "a x c".split())
    assert out["wer"] == pytest.approx(1 / 3)
    assert (out["substitutions"], out["insertions"], out["deletions"]) == (1, 0, 0)


def test_two_insertions_exceed_one():
    out = wer(["x"], "x y y".split())
    assert out["wer"] == 2.0
    assert (out["substitutions"], out["insertions"], out["deletions"]) == (0, 2, 0)


def test_empty_reference_rejected():
    with pytest.raises(ValueError):
        wer([], ["a"])
    with pytest.raises(ValueError):
        wer_text("   ", "a")


def test_empty_hypothesis_is_all_deletions():
    out = wer("a b".split(), [])
    assert out["wer"] == 1.0
    assert out["deletions"] == 2


# ---------------------------------------------------------------- oracle sweeps

def test_exhaustive_small_pairs():
    words = ["a", "b", "c"]
    seqs = [list(s) for n in range(0, 4) for s in itertools.product(words, repeat=n)]
    for ref in seqs:
        if not ref:
            continue
        for hyp in seqs:
            got = wer(ref, hyp)
            edits, subs, ins, dels = brute_force_counts(ref, hyp)
            assert got["substitutions"] == subs
            assert got["insertions"] == ins
            assert got["deletions"] == dels
            assert got["wer"] == pytest.approx(edits / len(ref))


@pytest.mark.parametrize("seed", range(8))
def test_random_pairs_up_to_len6(seed):
    rng = np.random.default_rng(seed)
    words = ["a", "b", "c"]
    for _ in range(60):
        ref = [words[i] for i in rng.integers(0, 3, size=rng.integers(1, 7))]
        hyp = [words[i] for i in rng.integers(0, 3, size=rng.integers(0, 7))]
        got = wer(ref, hyp)
        edits, subs, ins, dels = brute_force_counts(ref, hyp)
        assert (got["substitutions"], got["insertions"], got["deletions"]) == \
            (subs, ins, dels)


@pytest.mark.parametrize("seed", range(5))
def test_swap_symmetry(seed):
    rng = np.random.default_rng(100 + seed)
    words = ["u", "v", "w", "z"]
    for _ in range(40):
        a = [words[i] for i in rng.integers(0, 4, size=rng.integers(1, 7))]
        b = [words[i] for i in rng.integers(0, 4, size=rng.integers(1, 7))]
        ab, ba = wer(a, b), wer(b, a)
        assert ab["substitutions"] == ba["substitutions"]
        assert ab["insertions"] == ba["deletions"]
        assert ab["deletions"] == ba["insertions"]


# ---------------------------------------------------------------- normalization

def test_text_normalization_applies_both_sides():
    out = wer_text("  The   CAT sat ", "the cat SAT")
    assert out["wer"] == 0.0


# ---------------------------------------------------------------- alignment dump

def test_align_words_consistent_with_counts():
    rng = np.random.default_rng(7)
    words = ["a", "b", "c", "d"]
    for _ in range(60):
        ref = [words[i] for i in rng.integers(0, 4, size=rng.integers(1, 8))]
        hyp = [words[i] for i in rng.integers(0, 4, size=rng.integers(0, 8))]
        ops = align_words(ref, hyp)
        counts = wer(ref, hyp)
        by_kind = {"match": 0, "sub": 0, "ins": 0, "del": 0}
        for kind, r, h in ops:
            by_kind[kind] += 1
        assert by_kind["sub"] == counts["substitutions"]
        assert by_kind["ins"] == counts["insertions"]
        assert by_kind["del"] == counts["deletions"]
        # the op stream reconstructs both sequences
        assert [r for k, r, h in ops if k in ("match", "sub", "del")] == ref
        assert [h for k, r, h in ops if k in ("match", "sub", "ins")] == hyp


# ---------------------------------------------------------------- corpus scoring

def test_score_corpus_pools_edits():
    refs = {"u1": "a b c", "u2": "a a"}
    hyps = {"u1": "a x c", "u2": "a a a"}
    out = score_corpus(refs, hyps)
    # 1 sub + 1 ins over 5 reference words
    assert out["corpus_wer"] == pytest.approx(2 / 5)
    assert len(out["per_utterance"]) == 2
    u1 = next(r for r in out["per_utterance"] if r["id"] == "u1")
    assert u1["S"] == 1 and u1["I"] == 0 and u1["D"] == 0


def test_score_corpus_rejects_id_mismatch():
    with pytest.raises(ValueError, match="u2"):
        score_corpus({"u1": "a", "u2": "b"}, {"u1": "a"})
    with pytest.raises(ValueError):
        score_corpus({}, {})


def test_write_report_round_trip(tmp_path):
    refs = {"u1": "a b"}
    hyps = {"u1": "a c"}
    report = score_corpus(refs, hyps)
    jpath, dpath = tmp_path / "r.json", tmp_path / "r.txt"
    write_report(report, jpath, dpath, config_hash="cafe01")
    loaded = json.loads(jpath.read_text())
    assert loaded["corpus_wer"] == report["corpus_wer"]
    assert loaded["config_hash"] == "cafe01"
    dump = dpath.read_text()
    assert "REF" in dump and "HYP" in dump and "u1" in dump


# ---------------------------------------------------------------- perplexity

class UniformLM:
    """Constant logits: every next token equally likely."""

    def __init__(self, vocab):
        self.config = LMConfig(vocab_size=vocab, dim=8, heads=2)

    def forward_ids(self, ids, lengths=None):
        return T.Tensor(np.zeros((len(ids), self.config.vocab_size)))


class MemorizedLM:
    """Near-deterministic on one pinned continuation of the EOS start."""

    def __init__(self, vocab, sequence):
        self.config = LMConfig(vocab_size=vocab, dim=8, heads=2)
        self.sequence = list(sequence)

    def forward_ids(self, ids, lengths=None):
        out = np.full((len(ids), self.config.vocab_size), -1e9)
        for pos in range(len(ids)):
            want = self.sequence[pos] if pos < len(self.sequence) else 0
            out[pos, want] = 1e9
        return T.Tensor(out)


def test_uniform_lm_ppl_equals_vocab_size():
    tok = Tokenizer(["alpha", "beta", "gamma"])
    lm = UniformLM(len(tok.vocab))
    ppl = word_ppl_text(lm, tok, "alpha beta gamma alpha")
    assert ppl == pytest.approx(len(tok.vocab), rel=1e-12)


def test_memorized_lm_ppl_approaches_one():
    tok = Tokenizer(["alpha", "beta"])
    ids = tok.encode_text("alpha beta alpha")
    lm = MemorizedLM(len(tok.vocab), ids)
    ppl = word_ppl_text(lm, tok, "alpha beta alpha")
    assert abs(ppl - 1.0) < 1e-9


def test_ppl_matches_hand_recomputation():
    tok = Tokenizer(["red", "green", "blue", "dog"])
    lm = TinyCausalLM(LMConfig(vocab_size=len(tok.vocab), dim=16, layers=1,
                               heads=2, max_positions=32), seed=6)
    text = "red dog blue blue green"
    got = word_ppl_text(lm, tok, text)

    ids = tok.encode_text(text)
    full = [tok.eos_id] + ids
    logits = lm.forward_ids(full).data
    nll = 0.0
    for pos, target in enumerate(ids):
        z = logits[pos]
        m = z.max()
        logp = z[target] - m - np.log(np.exp(z - m).sum())
        nll -= logp
    assert got == pytest.approx(np.exp(nll / 5), rel=1e-12)


def test_ppl_rejects_empty_text():
    tok = Tokenizer(["alpha"])
    lm = UniformLM(len(tok.vocab))
    with pytest.raises(ValueError):
        word_ppl_text(lm, tok, "   ")
