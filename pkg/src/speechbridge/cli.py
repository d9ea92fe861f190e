"""Command-line operator surface.

One JSON config per run; flags only pick files and splits. Every
artifact a command writes carries the config hash, so a checkpoint or
report can always be traced back to its exact settings. Exit codes are
a stable contract: 0 success, 1 runtime failure, 2 config error.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import checkpoint as ckpt
from .config import (
    GEN_SCHEMA,
    SWEEP_SCHEMA,
    ConfigError,
    RunConfig,
    config_hash,
    read_json,
    validate,
)
from .data import (
    SyntheticTaskSpec,
    Tokenizer,
    default_tokenizer_texts,
    gen_dataset,
    load_features,
    read_manifest,
)
from .decoding import decode_corpus, worker_count
from .lm import LMConfig, TinyCausalLM, ToySpeechEncoder
from .metrics import score_corpus, word_ppl_text, write_report
from .prompts import PromptLibrary, prompt_for_mode
from .trainer import (
    build_copy_corpus,
    build_pretrain_corpus,
    build_span_corpus,
    derive_rng,
    instruction_tune,
    pretrain_lm,
    read_log_rows,
    train_projector,
    tune_on_spans,
)


def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_task(dataset_dir):
    spec = SyntheticTaskSpec.load(os.path.join(dataset_dir, "task.json"))
    tok = Tokenizer.load(os.path.join(dataset_dir, "tokenizer.json"))
    return spec, tok


def _load_split(dataset_dir, split):
    manifest = os.path.join(dataset_dir, split + ".jsonl")
    records = read_manifest(manifest)
    frames = [load_features(r, manifest) for r in records]
    return records, frames


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    g = validate(read_json(args.spec), GEN_SCHEMA, where=str(args.spec))
    ghash = config_hash(g)
    spec = SyntheticTaskSpec.generate(
        seed=g["seed"],
        vocab_size=g["vocab_size"],
        d_enc=g["d_enc"],
        frames_per_word=g["frames_per_word"],
        jitter=tuple(g["jitter"]),
        noise_sigma=g["noise_sigma"],
        frame_rate_hz=g["frame_rate_hz"],
        utt_len_min=g["utt_len_min"],
        utt_len_max=g["utt_len_max"],
        reserved_words=tuple(g["reserved_words"]),
    )
    # dataset tokenizers always know the template and prompt wordforms,
    # otherwise chat markers would land on UNK and tag search would lie
    extras = default_tokenizer_texts() + g["extra_texts"]
    manifests = gen_dataset(
        spec, args.out, n_train=g["n_train"], n_val=g["n_val"],
        n_test=g["n_test"], seed=g["seed"], tokenizer_extras=extras,
        config_hash=ghash,
    )
    for split in ("train", "val", "test"):
        print(f"{split}: {manifests[split]}")
    return 0


def cmd_pretrain_lm(args) -> int:
    cfg = RunConfig.load(args.config)
    cfg.require("dataset_dir", "out_dir")
    spec, tok = _load_task(cfg.dataset_dir)
    corpus = build_pretrain_corpus(spec, tok, cfg.pretrain_sentences, cfg.seed)
    lm_config = LMConfig(
        vocab_size=tok.vocab_size, dim=cfg.lm_dim, layers=cfg.lm_layers,
        heads=cfg.lm_heads, max_positions=cfg.lm_max_positions,
    )
    os.makedirs(cfg.out_dir, exist_ok=True)
    out_path = os.path.join(cfg.out_dir, "lm.slmc")
    _, metrics = pretrain_lm(
        corpus, lm_config, out_path, eos_id=tok.eos_id, steps=cfg.max_steps,
        batch_size=cfg.batch_size, seq_len=cfg.seq_len, lr_max=cfg.lr_max,
        warmup=cfg.warmup, seed=cfg.seed, accuracy_floor=cfg.accuracy_floor,
        config_hash=cfg.hash,
    )
    print(f"lm checkpoint: {out_path}")
    print(f"held-out accuracy: {metrics['val_accuracy']:.4f}")
    return 0


def cmd_instruction_tune(args) -> int:
    cfg = RunConfig.load(args.config)
    cfg.require("dataset_dir", "lm_checkpoint", "out_dir")
    spec, tok = _load_task(cfg.dataset_dir)
    lm = ckpt.load_lm(cfg.lm_checkpoint)
    os.makedirs(cfg.out_dir, exist_ok=True)
    out_path = os.path.join(cfg.out_dir, "lm_tuned.slmc")
    if cfg.tune_style == "spans":
        examples = build_span_corpus(
            spec, tok, n_examples=cfg.tune_examples, seed=cfg.seed,
            k=cfg.k, copy_fraction=cfg.copy_fraction,
        )
        tune_on_spans(
            lm, examples, tok, out_path, steps=cfg.max_steps,
            batch_size=cfg.batch_size, lr_max=cfg.lr_max, warmup=cfg.warmup,
            emb_noise=cfg.emb_noise, seed=cfg.seed, config_hash=cfg.hash,
        )
    elif cfg.tune_style == "tokens":
        corpus = build_copy_corpus(spec.words, tok,
                                   n_examples=cfg.tune_examples, seed=cfg.seed)
        instruction_tune(
            lm, corpus, tok, out_path, steps=cfg.max_steps,
            batch_size=cfg.batch_size, lr_max=cfg.lr_max, warmup=cfg.warmup,
            seed=cfg.seed, config_hash=cfg.hash,
        )
    else:
        raise ConfigError(f"tune_style: expected 'spans' or 'tokens', "
                          f"got {cfg.tune_style!r}")
    print(f"tuned checkpoint: {out_path}")
    return 0


def _prompt_library(cfg) -> PromptLibrary | None:
    if cfg.prompt_library is None:
        return None
    return PromptLibrary.load(cfg.prompt_library, seed=cfg.seed)


def cmd_train_projector(args) -> int:
    cfg = RunConfig.load(args.config)
    cfg.require("dataset_dir", "lm_checkpoint", "out_dir")
    summary = train_projector(
        dataset_dir=cfg.dataset_dir,
        out_dir=cfg.out_dir,
        lm_checkpoint=cfg.lm_checkpoint,
        encoder=cfg.encoder_checkpoint,
        k=cfg.k,
        d_hidden=cfg.d_hidden,
        batch_size=cfg.batch_size,
        max_steps=cfg.max_steps,
        lr_max=cfg.lr_max,
        warmup=cfg.warmup,
        weight_decay=cfg.weight_decay,
        val_every=cfg.val_every,
        patience=cfg.patience,
        prompt_mode=cfg.prompt_mode,
        prompt_library=_prompt_library(cfg),
        freeze_lm=cfg.freeze_lm,
        freeze_encoder=cfg.freeze_encoder,
        seed=cfg.seed,
        config_hash=cfg.hash,
        resume=cfg.resume,
        max_val_utts=cfg.max_val_utts,
    )
    print(f"steps: {summary['steps_run']} ({summary['stop_reason']})")
    if summary["best_val_loss"] is not None:
        print(f"best val loss: {summary['best_val_loss']:.6f} "
              f"at step {summary['best_step']}")
    print(f"best checkpoint: {summary['best_checkpoint']}")
    return 0


def _resolve_decode_parts(cfg, projector_path, feature_dim):
    """Pick the checkpoint files a decode should use.

    Snapshots written by training win over the config's inputs, so a run
    that unfroze the LM or encoder decodes with what it actually trained.
    """
    lm_final = os.path.join(cfg.out_dir, "lm_final.slmc")
    lm = ckpt.load_lm(lm_final if os.path.exists(lm_final) else cfg.lm_checkpoint)
    enc_final = os.path.join(cfg.out_dir, "encoder_final.slmc")
    if projector_path is None:
        projector_path = os.path.join(cfg.out_dir, "best.slmc")
    if os.path.exists(enc_final):
        encoder = ckpt.load_encoder(enc_final)
    elif cfg.encoder_checkpoint is not None:
        encoder = ckpt.load_encoder(cfg.encoder_checkpoint)
    else:
        encoder = ToySpeechEncoder("identity", feature_dim)
    projector = ckpt.load_projector(projector_path)
    return lm, encoder, projector


def cmd_decode(args) -> int:
    cfg = RunConfig.load(args.config)
    cfg.require("dataset_dir", "lm_checkpoint", "out_dir")
    _, tok = _load_task(cfg.dataset_dir)
    records, frames = _load_split(cfg.dataset_dir, args.split)
    lm, encoder, projector = _resolve_decode_parts(
        cfg, args.checkpoint, records[0].dim if records else 1)

    prompt_fn = prompt_for_mode(cfg.prompt_mode, _prompt_library(cfg))
    prompts = [prompt_fn(derive_rng(cfg.seed, "decode_prompt", args.split, i))
               for i in range(len(records))]
    results = decode_corpus(lm, tok, encoder, projector, frames, prompts,
                            beam=cfg.beam, max_new=cfg.max_new,
                            threads=cfg.threads)
    doc = {
        "config_hash": cfg.hash,
        "split": args.split,
        "beam": cfg.beam,
        "max_new": cfg.max_new,
        "hyps": {r.id: res for r, res in zip(records, results)},
    }
    out_path = os.path.join(cfg.out_dir, f"hyps_{args.split}.json")
    _write_json(out_path, doc)
    print(f"decoded {len(records)} utterances -> {out_path}")
    return 0


def _load_hyps(path):
    """id -> hypothesis text, from a decode output or a plain manifest.

    Accepting a manifest means `score --refs m.jsonl --hyps m.jsonl` is a
    valid smoke test that must report WER 0.
    """
    if str(path).endswith(".jsonl"):
        records = read_manifest(path, validate_features=False)
        return {r.id: r.transcript for r in records}, ""
    doc = read_json(path)
    if "hyps" in doc:
        table = {k: v["hyp"] if isinstance(v, dict) else v
                 for k, v in doc["hyps"].items()}
        return table, doc.get("config_hash", "")
    if not all(isinstance(v, str) for v in doc.values()):
        raise ConfigError(f"{path}: expected decode output or an id->text object")
    return dict(doc), ""


def cmd_score(args) -> int:
    records = read_manifest(args.refs, validate_features=False)
    refs = {r.id: r.transcript for r in records}
    hyps, hyp_hash = _load_hyps(args.hyps)
    report = score_corpus(refs, hyps)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.hyps))
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, "wer_report.json")
    write_report(report, json_path, os.path.join(out_dir, "wer_alignments.txt"),
                 config_hash=hyp_hash)
    n_utts = len(report["per_utterance"])
    print(f"corpus WER {report['corpus_wer']:.4f} over {n_utts} utterances")
    print(f"report: {json_path}")
    return 0


def cmd_ppl(args) -> int:
    cfg = RunConfig.load(args.config)
    cfg.require("dataset_dir", "lm_checkpoint", "out_dir")
    _, tok = _load_task(cfg.dataset_dir)
    records, _ = _load_split(cfg.dataset_dir, args.split)
    lm = ckpt.load_lm(cfg.lm_checkpoint)
    per_utt = {}
    total_log, total_words = 0.0, 0
    for r in records:
        ppl = word_ppl_text(lm, tok, r.transcript)
        n = len(r.transcript.split())
        per_utt[r.id] = ppl
        total_log += n * np.log(ppl)
        total_words += n
    corpus = float(np.exp(total_log / total_words))
    os.makedirs(cfg.out_dir, exist_ok=True)
    out_path = os.path.join(cfg.out_dir, f"ppl_{args.split}.json")
    _write_json(out_path, {"config_hash": cfg.hash, "split": args.split,
                           "word_ppl": corpus, "per_utterance": per_utt})
    print(f"word ppl {corpus:.4f} over {total_words} words")
    print(f"report: {out_path}")
    return 0


# ---------------------------------------------------------------- sweep


def _run_tag(lm, encoder, prompt_mode) -> str:
    def stem(p):
        return "none" if p is None else os.path.splitext(os.path.basename(p))[0]
    mode = prompt_mode if prompt_mode in ("none", "fixed", "library") else "custom"
    return f"{stem(lm)}__{stem(encoder)}__{mode}"


def _sweep_combos(grid) -> list:
    combos = []
    for lm in grid["lms"]:
        for enc in grid["encoders"]:
            for pm in grid["prompt_modes"]:
                combos.append((lm, enc, pm))
    return combos


def _one_sweep_run(run_dir, config_path, split):
    """train-projector + decode + score in child processes; one run per
    process keeps runs independent and mirrors single-run invocations."""
    base = [sys.executable, "-m", "speechbridge.cli"]
    steps = [
        base + ["train-projector", "--config", config_path],
        base + ["decode", "--config", config_path, "--split", split],
    ]
    for cmd in steps:
        proc = subprocess.run(cmd, capture_output=True, text=True)
        if proc.returncode != 0:
            return proc.returncode, proc.stderr.strip()
    return 0, ""


def cmd_sweep(args) -> int:
    grid = validate(read_json(args.grid), SWEEP_SCHEMA, where=str(args.grid))
    combos = _sweep_combos(grid)
    os.makedirs(grid["out_dir"], exist_ok=True)

    # materialize and validate every run config before starting any run
    runs = []
    for i, (lm, enc, pm) in enumerate(combos):
        run_dir = os.path.join(grid["out_dir"],
                               f"run_{i:03d}_{_run_tag(lm, enc, pm)}")
        doc = dict(grid["base"])
        doc.update({"lm_checkpoint": lm, "encoder_checkpoint": enc,
                    "prompt_mode": pm, "out_dir": run_dir})
        cfg = RunConfig(doc, where=f"sweep run {i}")
        cfg.require("dataset_dir", "lm_checkpoint")
        os.makedirs(run_dir, exist_ok=True)
        config_path = os.path.join(run_dir, "config.json")
        _write_json(config_path, doc)
        runs.append((run_dir, config_path, lm, enc, pm, cfg.hash))

    workers = worker_count(grid["parallel"])
    def launch(run):
        return _one_sweep_run(run[0], run[1], grid["split"])
    if workers == 1:
        outcomes = [launch(r) for r in runs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(launch, runs))

    dataset_dir = grid["base"]["dataset_dir"]
    refs_path = os.path.join(dataset_dir, grid["split"] + ".jsonl")
    rows = []
    failures = 0
    for (run_dir, _, lm, enc, pm, rhash), (code, err) in zip(runs, outcomes):
        wer_text, val_text = "", ""
        if code == 0:
            hyps, hyp_hash = _load_hyps(os.path.join(run_dir,
                                                     f"hyps_{grid['split']}.json"))
            refs = {r.id: r.transcript
                    for r in read_manifest(refs_path, validate_features=False)}
            report = score_corpus(refs, hyps)
            write_report(report, os.path.join(run_dir, "wer_report.json"),
                         os.path.join(run_dir, "wer_alignments.txt"),
                         config_hash=hyp_hash)
            wer_text = repr(report["corpus_wer"])
            side = ckpt.read_sidecar(os.path.join(run_dir, "best.slmc"))
            if side["val_loss"] is not None:
                val_text = repr(side["val_loss"])
        else:
            failures += 1
            print(f"run failed ({run_dir}): {err.splitlines()[-1] if err else code}",
                  file=sys.stderr)
        rows.append([os.path.basename(run_dir), lm, enc or "", pm, rhash,
                     val_text, wer_text])

    summary_path = os.path.join(grid["out_dir"], "summary.csv")
    with open(summary_path, "w", encoding="utf-8") as f:
        f.write("run,lm,encoder,prompt_mode,config_hash,best_val_loss,wer\n")
        for row in rows:
            f.write(",".join(row) + "\n")
    print(f"summary: {summary_path}")
    return 1 if failures else 0


# ---------------------------------------------------------------- curves

_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _svg_chart(series, width=640, height=400, margin=48) -> str:
    """Static line chart; one polyline per named series."""
    xs_all = [x for xs, _ in series.values() for x in xs]
    ys_all = [y for _, ys in series.values() for y in ys]
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0
    inner_w, inner_h = width - 2 * margin, height - 2 * margin

    def px(x):
        return margin + (x - x_lo) / x_span * inner_w

    def py(y):
        return height - margin - (y - y_lo) / y_span * inner_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<text x="{margin}" y="{height - margin + 28}" font-size="12">'
        f'{x_lo:g}</text>',
        f'<text x="{width - margin}" y="{height - margin + 28}" '
        f'font-size="12" text-anchor="end">{x_hi:g}</text>',
        f'<text x="{margin - 6}" y="{height - margin}" font-size="12" '
        f'text-anchor="end">{y_lo:.4g}</text>',
        f'<text x="{margin - 6}" y="{margin + 4}" font-size="12" '
        f'text-anchor="end">{y_hi:.4g}</text>',
    ]
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        points = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{color}" '
                     f'stroke-width="1.5" points="{points}"/>')
        parts.append(f'<text x="{width - margin - 4}" '
                     f'y="{margin + 16 + 16 * i}" font-size="12" '
                     f'text-anchor="end" fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_emit_curves(args) -> int:
    rows = read_log_rows(args.log)
    if not rows:
        print(f"error: {args.log}: no data rows", file=sys.stderr)
        return 1
    with open(args.log, encoding="utf-8") as f:
        header = None
        for line in f:
            if line.strip() and not line.startswith("#"):
                header = line.strip().split(",")
                break
    if header is None or len(header) != len(rows[0]):
        print(f"error: {args.log}: missing or inconsistent header", file=sys.stderr)
        return 1

    # CSV is the source of truth; the SVG is a convenience rendering
    csv_path = os.path.splitext(args.out)[0] + ".csv"
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(row) + "\n")

    steps = [float(r[0]) for r in rows]
    series = {}
    for col in range(1, len(header)):
        if header[col] == "wall_ms":
            continue
        series[header[col]] = (steps, [float(r[col]) for r in rows])
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(_svg_chart(series))
    print(f"curves: {csv_path} {args.out}")
    return 0


# ---------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speechbridge",
        description="Speech-to-LLM alignment pipeline (synthetic desk scale).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--spec", required=True, help="generation spec JSON")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain-lm", help="next-token pretrain a new LM")
    p.add_argument("--config", required=True, help="run config JSON")
    p.set_defaults(fn=cmd_pretrain_lm)

    p = sub.add_parser("instruction-tune",
                       help="tune an LM on chat-formatted copy tasks")
    p.add_argument("--config", required=True, help="run config JSON")
    p.set_defaults(fn=cmd_instruction_tune)

    p = sub.add_parser("train-projector",
                       help="align speech features to a frozen LM")
    p.add_argument("--config", required=True, help="run config JSON")
    p.set_defaults(fn=cmd_train_projector)

    p = sub.add_parser("decode", help="transcribe a dataset split")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--split", default="test", help="dataset split name")
    p.add_argument("--checkpoint", default=None,
                   help="projector checkpoint (default: best.slmc of the run)")
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("score", help="WER of hypotheses against a manifest")
    p.add_argument("--refs", required=True, help="reference manifest JSONL")
    p.add_argument("--hyps", required=True,
                   help="decode output JSON, id->text JSON, or manifest JSONL")
    p.add_argument("--out", default=None,
                   help="report directory (default: alongside --hyps)")
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("ppl", help="word-level text perplexity of a split")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--split", default="test", help="dataset split name")
    p.set_defaults(fn=cmd_ppl)

    p = sub.add_parser("sweep",
                       help="train/decode/score a grid of encoder x LM x prompt")
    p.add_argument("--grid", required=True, help="sweep grid JSON")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("emit-curves", help="render a training log as SVG + CSV")
    p.add_argument("--log", required=True, help="train or val log CSV")
    p.add_argument("--out", required=True, help="output SVG path")
    p.set_defaults(fn=cmd_emit_curves)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime contract: any failure is exit 1
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
