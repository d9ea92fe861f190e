"""CLI pipeline: every subcommand end to end on a toy task.

Calls main() in-process so exit codes and messages are asserted
directly; only the sweep test spawns real child processes.
"""

import json
import os

import pytest

from speechbridge.checkpoint import load_lm, read_sidecar
from speechbridge.cli import main
from speechbridge.config import RunConfig
from speechbridge.data import Tokenizer, read_manifest


def _write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


GEN = {
    "seed": 11, "vocab_size": 8, "d_enc": 4, "frames_per_word": 3,
    "jitter": [0], "noise_sigma": 0.05, "utt_len_min": 2, "utt_len_max": 4,
    "reserved_words": ["user:", "assistant:"],
    "n_train": 12, "n_val": 4, "n_test": 4,
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data -> pretrain-lm -> instruction-tune -> train-projector."""
    root = tmp_path_factory.mktemp("cli")
    gen = _write_json(root / "gen.json", GEN)
    assert main(["gen-data", "--spec", gen, "--out", str(root / "data")]) == 0

    pre = _write_json(root / "pre.json", {
        "dataset_dir": str(root / "data"), "out_dir": str(root / "lm_run"),
        "max_steps": 150, "batch_size": 8, "lr_max": 0.003, "warmup": 10,
        "seq_len": 16, "pretrain_sentences": 200, "lm_dim": 16,
        "lm_layers": 1, "lm_heads": 2, "lm_max_positions": 64, "seed": 1,
    })
    assert main(["pretrain-lm", "--config", pre]) == 0

    tune = _write_json(root / "tune.json", {
        "dataset_dir": str(root / "data"),
        "lm_checkpoint": str(root / "lm_run" / "lm.slmc"),
        "out_dir": str(root / "tune_run"), "max_steps": 60, "batch_size": 8,
        "lr_max": 0.003, "warmup": 5, "tune_examples": 40, "seed": 2,
    })
    assert main(["instruction-tune", "--config", tune]) == 0

    train_doc = {
        "dataset_dir": str(root / "data"),
        "lm_checkpoint": str(root / "tune_run" / "lm_tuned.slmc"),
        "out_dir": str(root / "proj_run"), "k": 3, "d_hidden": 8,
        "batch_size": 4, "max_steps": 20, "val_every": 10, "lr_max": 0.001,
        "warmup": 2, "max_val_utts": 2, "seed": 5,
    }
    train = _write_json(root / "train.json", train_doc)
    assert main(["train-projector", "--config", train]) == 0
    return {"root": root, "data": root / "data", "pre": pre, "tune": tune,
            "train": train, "train_doc": train_doc,
            "proj_run": root / "proj_run"}


def test_gen_data_artifacts(pipeline):
    data = pipeline["data"]
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "tokenizer.json",
                 "task.json", "meta.json"):
        assert (data / name).exists()
    # the dataset tokenizer must know the chat markers, not map them to UNK
    tok = Tokenizer.load(data / "tokenizer.json")
    assert tok.encode_text("user:")[0] != tok.unk_id
    assert tok.encode_text("assistant:")[0] != tok.unk_id
    assert len(read_manifest(data / "test.jsonl")) == 4


def test_gen_data_rejects_bad_spec(tmp_path, capsys):
    bad = _write_json(tmp_path / "bad.json", {**GEN, "n_frames": 2})
    assert main(["gen-data", "--spec", bad, "--out", str(tmp_path / "d")]) == 2
    assert "n_frames" in capsys.readouterr().err

    missing = _write_json(tmp_path / "m.json",
                          {k: v for k, v in GEN.items() if k != "n_train"})
    assert main(["gen-data", "--spec", missing, "--out", str(tmp_path / "d")]) == 2
    assert "n_train" in capsys.readouterr().err


def test_pretrain_embeds_config_hash(pipeline):
    lm_path = pipeline["root"] / "lm_run" / "lm.slmc"
    assert load_lm(lm_path).config.dim == 16
    side = read_sidecar(lm_path)
    assert side["config_hash"] == RunConfig.load(pipeline["pre"]).hash


def test_tuned_lm_loads(pipeline):
    lm = load_lm(pipeline["root"] / "tune_run" / "lm_tuned.slmc")
    assert lm.config.dim == 16


def test_tune_style_tokens_and_bad_value(pipeline, tmp_path, capsys):
    base = {
        "dataset_dir": str(pipeline["data"]),
        "lm_checkpoint": str(pipeline["root"] / "lm_run" / "lm.slmc"),
        "out_dir": str(tmp_path / "tok_run"), "max_steps": 10,
        "batch_size": 4, "lr_max": 0.003, "warmup": 2,
        "tune_examples": 12, "seed": 2,
    }
    tokens = _write_json(tmp_path / "tokens.json",
                         {**base, "tune_style": "tokens"})
    assert main(["instruction-tune", "--config", tokens]) == 0
    assert (tmp_path / "tok_run" / "lm_tuned.slmc").exists()

    bad = _write_json(tmp_path / "bad.json", {**base, "tune_style": "soups"})
    assert main(["instruction-tune", "--config", bad]) == 2
    assert "tune_style" in capsys.readouterr().err


def test_train_projector_artifacts(pipeline):
    run = pipeline["proj_run"]
    for name in ("best.slmc", "last.slmc", "train_log.csv", "val_log.csv",
                 "lm_final.slmc", "encoder_final.slmc"):
        assert (run / name).exists()
    cfg_hash = RunConfig.load(pipeline["train"]).hash
    first = (run / "train_log.csv").read_text().splitlines()[0]
    assert first == f"# config_hash={cfg_hash}"
    assert read_sidecar(run / "best.slmc")["config_hash"] == cfg_hash


def test_decode_writes_hypotheses_deterministically(pipeline):
    assert main(["decode", "--config", pipeline["train"], "--split", "test"]) == 0
    out = pipeline["proj_run"] / "hyps_test.json"
    doc = json.loads(out.read_text())
    ids = {r.id for r in read_manifest(pipeline["data"] / "test.jsonl")}
    assert set(doc["hyps"]) == ids
    assert doc["split"] == "test"
    assert doc["config_hash"] == RunConfig.load(pipeline["train"]).hash
    first_bytes = out.read_bytes()
    assert main(["decode", "--config", pipeline["train"], "--split", "test"]) == 0
    assert out.read_bytes() == first_bytes


def test_score_identical_files_is_zero(pipeline, tmp_path, capsys):
    refs = str(pipeline["data"] / "test.jsonl")
    code = main(["score", "--refs", refs, "--hyps", refs,
                 "--out", str(tmp_path)])
    assert code == 0
    assert "corpus WER 0.0000" in capsys.readouterr().out
    report = json.loads((tmp_path / "wer_report.json").read_text())
    assert report["corpus_wer"] == 0.0
    assert (tmp_path / "wer_alignments.txt").exists()


def test_score_decode_output(pipeline, tmp_path):
    assert main(["decode", "--config", pipeline["train"], "--split", "test"]) == 0
    hyps = str(pipeline["proj_run"] / "hyps_test.json")
    refs = str(pipeline["data"] / "test.jsonl")
    assert main(["score", "--refs", refs, "--hyps", hyps,
                 "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "wer_report.json").read_text())
    assert report["corpus_wer"] >= 0.0
    # report carries the decode run's config hash through
    assert report["config_hash"] == RunConfig.load(pipeline["train"]).hash


def test_score_refuses_mismatched_ids(pipeline, tmp_path, capsys):
    hyps = _write_json(tmp_path / "h.json", {"not-a-real-id": "bab bab"})
    code = main(["score", "--refs", str(pipeline["data"] / "test.jsonl"),
                 "--hyps", hyps])
    assert code == 1
    assert "id sets differ" in capsys.readouterr().err


def test_ppl_reports_positive_value(pipeline, capsys):
    assert main(["ppl", "--config", pipeline["train"], "--split", "test"]) == 0
    out = capsys.readouterr().out
    assert "word ppl" in out
    doc = json.loads((pipeline["proj_run"] / "ppl_test.json").read_text())
    assert doc["word_ppl"] > 1.0
    assert len(doc["per_utterance"]) == 4


def test_emit_curves(pipeline, tmp_path):
    svg = tmp_path / "c.svg"
    assert main(["emit-curves", "--log",
                 str(pipeline["proj_run"] / "train_log.csv"),
                 "--out", str(svg)]) == 0
    text = svg.read_text()
    assert text.startswith("<svg") and "polyline" in text
    csv_text = (tmp_path / "c.csv").read_text().splitlines()
    assert csv_text[0] == "step,loss,masked_token_accuracy,lr,wall_ms"
    assert len(csv_text) == 1 + 20  # header + one row per step


def test_emit_curves_missing_file(tmp_path, capsys):
    code = main(["emit-curves", "--log", str(tmp_path / "none.csv"),
                 "--out", str(tmp_path / "c.svg")])
    assert code == 1


def test_unknown_config_key_is_exit_2(pipeline, tmp_path, capsys):
    bad = _write_json(tmp_path / "bad.json", {"dataset_dir": "d", "bogus": 1})
    assert main(["train-projector", "--config", bad]) == 2
    assert "bogus" in capsys.readouterr().err


def test_missing_required_path_is_exit_2(tmp_path, capsys):
    cfg = _write_json(tmp_path / "c.json", {"out_dir": "o"})
    assert main(["train-projector", "--config", cfg]) == 2
    err = capsys.readouterr().err
    assert "dataset_dir" in err and "lm_checkpoint" in err


def test_runtime_failure_is_exit_1(pipeline, tmp_path, capsys):
    cfg = _write_json(tmp_path / "c.json", {
        "dataset_dir": str(pipeline["data"]),
        "lm_checkpoint": str(tmp_path / "missing.slmc"),
        "out_dir": str(tmp_path / "run"),
    })
    assert main(["train-projector", "--config", cfg]) == 1


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_sweep_base_vs_tuned(pipeline, tmp_path):
    root = pipeline["root"]
    grid = _write_json(tmp_path / "grid.json", {
        "out_dir": str(tmp_path / "sweep"),
        "lms": [str(root / "lm_run" / "lm.slmc"),
                str(root / "tune_run" / "lm_tuned.slmc")],
        "prompt_modes": ["fixed"],
        "split": "test",
        "base": pipeline["train_doc"] | {"out_dir": None},
    })
    assert main(["sweep", "--grid", grid]) == 0
    lines = (tmp_path / "sweep" / "summary.csv").read_text().splitlines()
    assert lines[0] == "run,lm,encoder,prompt_mode,config_hash,best_val_loss,wer"
    assert len(lines) == 3
    for line in lines[1:]:
        cells = line.split(",")
        assert float(cells[6]) >= 0.0          # wer column filled in
        run_dir = tmp_path / "sweep" / cells[0]
        assert (run_dir / "best.slmc").exists()
        assert (run_dir / "wer_report.json").exists()


def test_sweep_invalid_base_rejected_before_running(tmp_path, capsys):
    grid = _write_json(tmp_path / "grid.json", {
        "out_dir": str(tmp_path / "sweep"),
        "lms": ["x.slmc"],
        "base": {"dataset_dir": "d", "k": 0},
    })
    assert main(["sweep", "--grid", grid]) == 2
    assert "k" in capsys.readouterr().err
    assert not (tmp_path / "sweep" / "summary.csv").exists()
