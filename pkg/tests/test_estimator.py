"""Estimator facade: parameter plumbing, validation, fit/predict/transform.

scikit-learn is imported here (tests only) to pin clone compatibility;
the package itself never depends on it.
"""

import numpy as np
import pytest

from speechbridge.checkpoint import save_lm
from speechbridge.data import (
    SyntheticTaskSpec,
    Tokenizer,
    default_tokenizer_texts,
    normalize_text,
    render_utterance,
    sample_word_ids,
)
from speechbridge.estimator import ProjectorAligner
from speechbridge.lm import LMConfig, TinyCausalLM
from speechbridge.trainer import derive_rng
from speechbridge.validation import (
    NotFittedError,
    check_feature_list,
    check_is_fitted,
    check_transcripts,
)


@pytest.fixture(scope="module")
def task(tmp_path_factory):
    """In-memory utterances plus a tokenizer-matched LM checkpoint."""
    root = tmp_path_factory.mktemp("est")
    spec = SyntheticTaskSpec.generate(
        seed=21, vocab_size=6, d_enc=4, frames_per_word=3, jitter=(0,),
        noise_sigma=0.02, utt_len_min=2, utt_len_max=3,
    )
    words = list(spec.words)
    for text in default_tokenizer_texts():
        words.extend(normalize_text(text).split())
    tok = Tokenizer(words)
    lm = TinyCausalLM(LMConfig(vocab_size=tok.vocab_size, dim=16, layers=1,
                               heads=2, max_positions=64), seed=3)
    lm_path = root / "lm.slmc"
    save_lm(lm_path, lm, step=0, config_hash="est", seed=3)

    rng = derive_rng(21, "est_data")
    X, y = [], []
    for _ in range(12):
        ids = sample_word_ids(spec, rng)
        X.append(render_utterance(spec, ids, rng))
        y.append(" ".join(spec.words[w] for w in ids))
    return {"X": X, "y": y, "tok": tok, "lm_path": str(lm_path)}


def make_estimator(task, **overrides):
    kw = dict(lm_checkpoint=task["lm_path"], tokenizer=task["tok"], k=3,
              d_hidden=8, batch_size=4, max_steps=10, val_every=5,
              lr_max=1e-3, warmup=2, val_fraction=0.25, seed=7)
    kw.update(overrides)
    return ProjectorAligner(**kw)


@pytest.fixture(scope="module")
def fitted(task):
    est = make_estimator(task)
    return est.fit(task["X"], task["y"])


# -------------------------------------------------------------- plumbing


def test_get_params_returns_constructor_args_verbatim(task):
    est = make_estimator(task)
    params = est.get_params()
    assert params["k"] == 3
    assert params["lm_checkpoint"] == task["lm_path"]
    assert params["tokenizer"] is task["tok"]
    assert set(params) == set(ProjectorAligner._PARAMS)


def test_set_params_round_trip(task):
    est = make_estimator(task)
    est.set_params(k=4, beam=2)
    assert est.k == 4 and est.beam == 2
    with pytest.raises(ValueError, match="num_beams"):
        est.set_params(num_beams=3)


def test_sklearn_clone_compatibility(task):
    from sklearn.base import clone

    est = make_estimator(task, seed=13)
    cloned = clone(est)
    assert cloned is not est
    assert cloned.get_params() == est.get_params()


def test_constructor_does_no_validation():
    # bad values must surface at fit time, not construction (clone contract)
    est = ProjectorAligner(k=-1, lm_checkpoint=None)
    assert est.k == -1


# -------------------------------------------------------------- validation


def test_check_feature_list_rejects_bad_inputs():
    with pytest.raises(TypeError, match="list"):
        check_feature_list(np.zeros((3, 4)))
    with pytest.raises(ValueError, match="empty"):
        check_feature_list([])
    with pytest.raises(ValueError, match=r"X\[0\]"):
        check_feature_list([np.zeros(3)])
    with pytest.raises(ValueError, match=r"X\[1\].*dim"):
        check_feature_list([np.zeros((3, 4)), np.zeros((3, 5))])
    with pytest.raises(ValueError, match="finite"):
        check_feature_list([np.full((2, 2), np.nan)])
    with pytest.raises(ValueError, match="frame"):
        check_feature_list([np.zeros((0, 4))])


def test_check_feature_list_pins_expected_dim():
    with pytest.raises(ValueError, match="dim 4 != 6"):
        check_feature_list([np.zeros((3, 4))], expected_dim=6)
    out = check_feature_list([[[1, 2], [3, 4]]], expected_dim=2)
    assert out[0].dtype == np.float64


def test_check_transcripts():
    with pytest.raises(ValueError, match="2 utterances but y has 1"):
        check_transcripts(["a"], 2)
    with pytest.raises(ValueError, match=r"y\[1\].*empty"):
        check_transcripts(["a", "   "], 2)
    with pytest.raises(TypeError, match=r"y\[0\]"):
        check_transcripts([3], 1)
    assert check_transcripts(["  A  b "], 1) == ["a b"]


def test_methods_require_fit(task):
    est = make_estimator(task)
    with pytest.raises(NotFittedError, match="fit"):
        est.predict(task["X"][:1])
    with pytest.raises(NotFittedError):
        est.transform(task["X"][:1])
    check_is_fitted(est, attributes=("k",))  # present attr passes


def test_fit_requires_lm(task):
    est = make_estimator(task, lm_checkpoint=None)
    with pytest.raises(ValueError, match="lm_checkpoint"):
        est.fit(task["X"], task["y"])


def test_fit_rejects_mismatched_lengths(task):
    est = make_estimator(task)
    with pytest.raises(ValueError, match="transcripts"):
        est.fit(task["X"], task["y"][:-1])


def test_fit_rejects_too_small_corpus(task):
    est = make_estimator(task, val_fraction=0.9)
    with pytest.raises(ValueError, match="hold out"):
        est.fit(task["X"][:2], task["y"][:2])


# -------------------------------------------------------------- behavior


def test_fit_returns_self_and_exposes_artifacts(task, fitted):
    assert isinstance(fitted, ProjectorAligner)
    assert fitted.dim_ == 4
    assert fitted.summary_["steps_run"] == 10
    assert fitted.lm_.config.dim == 16


def test_predict_shapes(task, fitted):
    hyps = fitted.predict(task["X"][:3])
    assert len(hyps) == 3
    assert all(isinstance(h, str) for h in hyps)


def test_predict_rejects_dim_drift(task, fitted):
    with pytest.raises(ValueError, match="dim"):
        fitted.predict([np.zeros((5, 9))])


def test_transform_row_count_follows_k(task, fitted):
    outs = fitted.transform(task["X"][:2])
    for frames, emb in zip(task["X"][:2], outs):
        assert emb.shape == (frames.shape[0] // fitted.k, fitted.lm_.config.dim)


def test_score_is_one_minus_wer(task, fitted):
    # scoring the model against its own predictions gives exactly 1.0;
    # a barely trained model may emit empty strings, which cannot serve
    # as WER references, so only the nonempty ones participate
    hyps = fitted.predict(task["X"][:4])
    keep = [i for i, h in enumerate(hyps) if h.strip()]
    if keep:
        assert fitted.score([task["X"][i] for i in keep],
                            [hyps[i] for i in keep]) == 1.0
    real = fitted.score(task["X"][:4], task["y"][:4])
    assert real <= 1.0


def test_fit_is_deterministic(task):
    a = make_estimator(task).fit(task["X"], task["y"])
    b = make_estimator(task).fit(task["X"], task["y"])
    for name, pa in a.projector_.params.items():
        assert np.array_equal(pa.data, b.projector_.params[name].data)
    assert a.predict(task["X"][:3]) == b.predict(task["X"][:3])


def test_work_dir_keeps_artifacts(task, tmp_path):
    keep = tmp_path / "kept"
    est = make_estimator(task, work_dir=str(keep))
    est.fit(task["X"], task["y"])
    assert (keep / "run" / "best.slmc").exists()
    assert (keep / "tokenizer.json").exists()
    assert (keep / "train.jsonl").exists()
