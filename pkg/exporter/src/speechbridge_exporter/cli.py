"""Command line: slmf-export export --encoder NAME --audio-list list.tsv --out DIR

The audio list is TSV, one utterance per line:

    <id> <TAB> <wav path, relative to the list file> <TAB> <transcript>

Each decodable entry becomes <out>/<id>.slmf plus one manifest row in
<out>/manifest.jsonl; undecodable files are skipped with a logged
reason. A feature-dimension change mid-corpus aborts the job: mixed
dims in one manifest would poison downstream training.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .audio import DecodeError, read_wav
from .encoders import EncoderError, get_encoder
from .slmf import manifest_row, write_features, write_manifest

log = logging.getLogger("slmf_export")


class ExportError(RuntimeError):
    """The job cannot produce a coherent corpus."""


@dataclass
class ExportJob:
    encoder: str
    entries: list  # (id, audio_path, transcript) triples
    out_dir: str
    frame_rate_hz: float | None = None  # declared; overrides the encoder's own
    pad_to_seconds: float | None = None  # default is to leave clips trimmed
    jobs: int = 1
    skipped: list = field(default_factory=list)  # (id, reason), filled by export


def parse_audio_list(path) -> list:
    """(id, absolute audio path, transcript) per non-blank line."""
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ExportError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}"
                )
            utt_id, rel, transcript = (p.strip() for p in parts)
            if not utt_id or not transcript:
                raise ExportError(f"{path}:{lineno}: empty id or transcript")
            if utt_id in seen:
                raise ExportError(f"{path}:{lineno}: duplicate utterance id {utt_id!r}")
            seen.add(utt_id)
            entries.append((utt_id, os.path.join(base, rel), transcript))
    return entries


def _normalize_length(signal, sample_rate: int, pad_to_seconds) -> np.ndarray:
    if pad_to_seconds is None:
        return signal
    target = int(round(pad_to_seconds * sample_rate))
    if target < 1:
        raise ExportError(f"pad_to_seconds {pad_to_seconds} leaves no samples")
    if len(signal) >= target:
        return signal[:target]
    return np.pad(signal, (0, target - len(signal)))


def export(job: ExportJob) -> list:
    """Run the job; returns the manifest rows (also written to disk).

    Feature files are written as soon as each utterance is encoded
    (per-file parallelism is safe, no two utterances share a file); the
    manifest is written once at the end, in input order.
    """
    encoder = get_encoder(job.encoder)
    os.makedirs(job.out_dir, exist_ok=True)

    def one(entry):
        utt_id, audio_path, transcript = entry
        try:
            signal, rate = read_wav(audio_path)
        except DecodeError as e:
            log.warning("skipping %s: %s", utt_id, e)
            return ("skip", utt_id, str(e))
        signal = _normalize_length(signal, rate, job.pad_to_seconds)
        features, enc_rate = encoder(signal, rate)
        frame_rate = job.frame_rate_hz if job.frame_rate_hz is not None else enc_rate
        if frame_rate is None:
            raise ExportError(
                f"encoder {job.encoder!r} reports no frame rate; declare one"
            )
        fname = f"{utt_id}.slmf"
        write_features(os.path.join(job.out_dir, fname), features)
        row = manifest_row(utt_id, transcript, fname,
                           features.shape[0], frame_rate, features.shape[1])
        return ("row", utt_id, row)

    if job.jobs > 1 and len(job.entries) > 1:
        with ThreadPoolExecutor(max_workers=job.jobs) as pool:
            results = list(pool.map(one, job.entries))
    else:
        results = [one(e) for e in job.entries]

    rows = []
    dim = None
    for kind, utt_id, value in results:
        if kind == "skip":
            job.skipped.append((utt_id, value))
            continue
        if dim is None:
            dim = value["dim"]
        elif value["dim"] != dim:
            raise ExportError(
                f"feature dimension drifted: {utt_id!r} produced {value['dim']}, "
                f"corpus started at {dim}"
            )
        rows.append(value)

    write_manifest(os.path.join(job.out_dir, "manifest.jsonl"), rows)
    return rows


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slmf-export")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="encode an audio list into SLMF + manifest")
    p.add_argument("--encoder", required=True,
                   help="encoder name: fbank80 or hf:<model>")
    p.add_argument("--audio-list", required=True,
                   help="TSV of id, wav path, transcript")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--frame-rate", type=float, default=None,
                   help="declared output frame rate in Hz (required for hf:*)")
    p.add_argument("--pad-to-seconds", type=float, default=None,
                   help="zero-pad or cut every clip to this length before "
                        "encoding (default: leave clips as they are)")
    p.add_argument("--jobs", type=int, default=1, help="parallel encode workers")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        entries = parse_audio_list(args.audio_list)
        job = ExportJob(encoder=args.encoder, entries=entries, out_dir=args.out,
                        frame_rate_hz=args.frame_rate,
                        pad_to_seconds=args.pad_to_seconds, jobs=max(1, args.jobs))
        rows = export(job)
    except (ExportError, EncoderError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    log.info("wrote %d utterances (%d skipped) to %s",
             len(rows), len(job.skipped), args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
