"""Cross-component checks against the aligner package.

The exporter's production code never imports the aligner; the file
formats are the only contract. These tests import it on purpose to
prove both independent implementations agree on those formats.
"""

import json
from pathlib import Path

import numpy as np
import pytest

speechbridge_data = pytest.importorskip(
    "speechbridge.data", reason="aligner package not installed in this checkout"
)

from speechbridge_exporter.cli import ExportJob, export, parse_audio_list
from speechbridge_exporter.slmf import read_features as exporter_read
from speechbridge_exporter.slmf import write_features as exporter_write

from conftest import write_sine_wav

GOLDEN_DIR = Path(__file__).resolve().parents[2] / "golden"


def test_golden_file_reads_identically_in_both_components():
    ours = exporter_read(GOLDEN_DIR / "sample.slmf")
    theirs = speechbridge_data.read_features(GOLDEN_DIR / "sample.slmf")
    assert np.array_equal(ours, theirs)
    with open(GOLDEN_DIR / "sample.expected.json", encoding="utf-8") as f:
        doc = json.load(f)
    assert np.array_equal(ours, np.asarray(doc["values"]))


def test_exported_file_round_trips_through_aligner_reader(tmp_path):
    rng = np.random.default_rng(7)
    arr = rng.standard_normal((31, 80)).astype(np.float32)
    path = tmp_path / "x.slmf"
    exporter_write(path, arr)
    back = speechbridge_data.read_features(path)
    assert np.max(np.abs(back - arr.astype(np.float64))) == 0.0


def test_exported_manifest_parses_as_aligner_corpus(tmp_path):
    for i in range(2):
        write_sine_wav(tmp_path / f"u{i}.wav", seconds=0.5 + 0.5 * i)
    lst = tmp_path / "list.tsv"
    lst.write_text("u0\tu0.wav\thello there\nu1\tu1.wav\tgeneral utterance\n")
    out = tmp_path / "out"
    export(ExportJob("fbank80", parse_audio_list(lst), str(out)))

    records = speechbridge_data.read_manifest(out / "manifest.jsonl")
    assert [r.id for r in records] == ["u0", "u1"]
    for rec in records:
        feats = speechbridge_data.load_features(rec, out / "manifest.jsonl")
        assert feats.shape == (rec.num_frames, rec.dim)
        assert abs(rec.num_frames - (0.5 + 0.5 * int(rec.id[1]))
                   * rec.frame_rate_hz) <= 1
