"""Command-line interface: train, caption, tts, eval, bench, judge-stub.

Standard output carries data; diagnostics go to standard error. Every
command writes a run manifest listing its inputs, outputs, seeds, and
config snapshot so a run can be reproduced bit-for-bit (mock judge).
Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric abort,
5 judge protocol error with no fallback available.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .decoder import DecodeParams
from .errors import (ConfigError, FormatError, JudgeProtocolError, NumericAbort,
                     SceneCapError)
from .metrics import evaluate_corpus, load_corpus_jsonl, load_idf, report_table
from .model import CaptionModel
from .pointcloud import load_scene
from .text_encoder import CaptionSequence
from .trainer import configs_from_values, fit, load_dataset, parse_config
from .tts import (DescriptorBank, HttpJudge, MockJudge, default_descriptor_path,
                  overhead_ratio, run_tts)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_JUDGE = 5


def _write_manifest(out_dir: Path, command: str, config: dict, seeds: dict,
                    inputs: list, outputs: list, wall_ms: float) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "wall_ms": round(wall_ms, 3),
    }
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def _emit(doc) -> None:
    json.dump(doc, sys.stdout, indent=1, sort_keys=True)
    sys.stdout.write("\n")


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    values = parse_config(args.config)
    model_cfg, train_cfg = configs_from_values(values)
    dataset, vocab = load_dataset(args.data_dir, min_count=values.get("min_count", 1))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab_path = out / "vocab.txt"
    vocab.save(vocab_path)
    model_cfg.feature_dim = dataset[0][0].feature_dim
    model = CaptionModel(model_cfg, vocab)
    fit(model, dataset, train_cfg, out_dir=out, vocab_path=vocab_path)
    outputs = [out / "model.ckpt", out / "model.ckpt.json",
               out / "trainlog.csv", vocab_path]
    manifest = _write_manifest(out, "train", values, {"seed": train_cfg.seed},
                               [args.config, args.data_dir], outputs,
                               (time.perf_counter() - t0) * 1000.0)
    print(f"wrote {outputs[0]} ({len(dataset)} pairs); manifest {manifest}",
          file=sys.stderr)
    return EXIT_OK


def cmd_caption(args) -> int:
    t0 = time.perf_counter()
    model = CaptionModel.load(args.checkpoint)
    cloud = load_scene(args.scene)
    seed = args.seed
    if args.strategy == "stochastic" and seed is None:
        seed = int.from_bytes(os.urandom(4), "big")  # auto-drawn, recorded below
    dp = DecodeParams(strategy=args.strategy,
                      seed=(seed, 0) if seed is not None else 0)
    caption, logprobs = model.decoder.decode_scored(
        model.scene_encoder.encode_scene(cloud), dp, model.vocab)
    print(caption.text)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sidecar = out / "caption.json"
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump({"caption": caption.text, "token_ids": caption.ids,
                   "logprobs": logprobs, "strategy": args.strategy,
                   "seed": seed}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "caption", {"strategy": args.strategy},
                    {"seed": seed}, [args.checkpoint, args.scene], [sidecar],
                    (time.perf_counter() - t0) * 1000.0)
    return EXIT_OK


def _make_judge(args):
    if args.judge == "mock":
        return MockJudge()
    endpoint = args.endpoint or os.environ.get("JUDGE_ENDPOINT")
    if not endpoint:
        raise ConfigError("http judge requires --endpoint or JUDGE_ENDPOINT")
    return HttpJudge(endpoint)


def _load_bank(args, model) -> DescriptorBank:
    path = args.bank or default_descriptor_path()
    return DescriptorBank.from_file(path, model)


def cmd_tts(args) -> int:
    t0 = time.perf_counter()
    model = CaptionModel.load(args.checkpoint)
    cloud = load_scene(args.scene)
    judge = _make_judge(args)
    bank = _load_bank(args, model)
    before = model.checksum()
    result = run_tts(cloud, model, bank, judge, n=args.n, k_s=args.ks,
                     seed=args.seed, baseline_total_ms=args.baseline_total_ms)
    assert model.checksum() == before, "search must not modify parameters"
    if result.fallback and result.error is not None and not result.selected.text:
        raise JudgeProtocolError(result.error)
    doc = result.to_json()
    _emit(doc)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = out / "tts_result.json"
    with open(report, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "tts",
                    {"n": args.n, "ks": args.ks, "judge": args.judge,
                     "baseline_total_ms": args.baseline_total_ms},
                    {"seed": args.seed}, [args.checkpoint, args.scene], [report],
                    (time.perf_counter() - t0) * 1000.0)
    return EXIT_OK


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    corpus = load_corpus_jsonl(args.corpus)
    thresholds = tuple(float(v) for v in args.iou.split(","))
    idf = load_idf(args.idf) if args.idf else None
    report = evaluate_corpus(corpus, thresholds=thresholds,
                             oracle_boxes=args.oracle_boxes, idf=idf)
    _emit(report)
    print(report_table(report, thresholds), file=sys.stderr)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "eval_report.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "eval",
                    {"oracle_boxes": args.oracle_boxes, "iou": args.iou},
                    {}, [args.corpus], [report_path],
                    (time.perf_counter() - t0) * 1000.0)
    return EXIT_OK


def cmd_bench(args) -> int:
    t0 = time.perf_counter()
    rows = []
    if args.fixture:
        with open(args.fixture, "r", encoding="utf-8") as fh:
            fixture = json.load(fh)
        baseline_ms = fixture["baseline_total_ms"]
        for row in fixture["rows"]:
            total = row["encode_ms"] + row["extra_ms"]
            rows.append({"n": row["n"], "encode_ms": row["encode_ms"],
                         "extra_ms": row["extra_ms"], "total_ms": total,
                         "overhead": overhead_ratio(total, baseline_ms)})
        inputs = [args.fixture]
    else:
        if not args.scenes:
            raise ConfigError("bench needs at least one scene (or --fixture)")
        model = CaptionModel.load(args.checkpoint)
        judge = _make_judge(args)
        bank = _load_bank(args, model)
        clouds = [load_scene(p) for p in args.scenes]
        baseline_ms = _measure_baseline(model, clouds)
        for n in (int(v) for v in args.n.split(",")):
            enc, extra, tot = [], [], []
            for ci, cloud in enumerate(clouds):
                r = run_tts(cloud, model, bank, judge, n=n, k_s=args.ks,
                            seed=args.seed + ci)
                enc.append(r.timing["encode_ms"])
                extra.append(r.timing["decode_judge_ms"])
                tot.append(r.timing["total_ms"])
            total = float(np.mean(tot))
            rows.append({"n": n, "encode_ms": float(np.mean(enc)),
                         "extra_ms": float(np.mean(extra)), "total_ms": total,
                         "overhead": overhead_ratio(total, baseline_ms)})
        inputs = [args.checkpoint] + list(args.scenes)
    table = {"baseline_total_ms": baseline_ms, "rows": rows}
    _emit(table)
    print("n\tencode_ms\textra_ms\ttotal_ms\toverhead", file=sys.stderr)
    for r in rows:
        print(f"{r['n']}\t{r['encode_ms']:.1f}\t{r['extra_ms']:.1f}"
              f"\t{r['total_ms']:.1f}\t{r['overhead']:.2f}x", file=sys.stderr)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bench_path = out / "bench.json"
    with open(bench_path, "w", encoding="utf-8") as fh:
        json.dump(table, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "bench", {"n": args.n, "judge": args.judge},
                    {"seed": args.seed}, inputs, [bench_path],
                    (time.perf_counter() - t0) * 1000.0)
    return EXIT_OK


def _measure_baseline(model, clouds) -> float:
    """Standard-decoding latency: one encode plus one greedy decode per scene."""
    times = []
    for cloud in clouds:
        t0 = time.perf_counter()
        scene = model.scene_encoder.encode_scene(cloud)
        model.decoder.decode(scene, DecodeParams(strategy="greedy"), model.vocab)
        times.append((time.perf_counter() - t0) * 1000.0)
    return float(np.mean(times))


def cmd_judge_stub(args) -> int:
    from .judge_stub import serve

    serve(port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scenecap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a captioning model")
    p.add_argument("config")
    p.add_argument("data_dir")
    p.add_argument("out_dir")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("caption", help="caption one scene")
    p.add_argument("checkpoint")
    p.add_argument("scene")
    p.add_argument("--strategy", default="greedy",
                   choices=["greedy", "beam", "stochastic"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(fn=cmd_caption)

    p = sub.add_parser("tts", help="best-of-N search with a judge")
    p.add_argument("checkpoint")
    p.add_argument("scene")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--ks", type=int, default=5)
    p.add_argument("--judge", default="mock", choices=["mock", "http"])
    p.add_argument("--endpoint", default=None)
    p.add_argument("--baseline-total-ms", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bank", default=None)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(fn=cmd_tts)

    p = sub.add_parser("eval", help="score a caption corpus")
    p.add_argument("corpus")
    p.add_argument("--oracle-boxes", action="store_true")
    p.add_argument("--iou", default="0.25,0.5")
    p.add_argument("--idf", default=None)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="latency table across candidate counts")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("scenes", nargs="*")
    p.add_argument("--n", default="1,2,4,8")
    p.add_argument("--ks", type=int, default=5)
    p.add_argument("--judge", default="mock", choices=["mock", "http"])
    p.add_argument("--endpoint", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bank", default=None)
    p.add_argument("--fixture", default=None)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("judge-stub", help="run the offline judge stub server")
    p.add_argument("--port", type=int, default=8787)
    p.set_defaults(fn=cmd_judge_stub)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except JudgeProtocolError as exc:
        print(f"judge protocol error: {exc}", file=sys.stderr)
        return EXIT_JUDGE
    except SceneCapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
