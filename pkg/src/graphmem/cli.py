"""Command-line entry points.

Subcommands: prepare, train, validate, score, trace, stats, edges, sweep,
gradcheck, paramcount. Configs are JSON files (see config_io); streams are
uint16 binaries with JSON sidecars; traces and logs are JSON Lines.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config_io import load_config_file
from .corpus import (
    SplitSpec,
    load_stream,
    load_tokenizer,
    read_documents,
    save_stream,
    split_documents,
    tokenize_documents,
)
from .diagnostics import (
    displacement_sweep,
    edge_structure_export,
    model_utilization,
    stream_from_text,
    trace_text,
)
from .errors import GraphMemError
from .evaluation import evaluate_choices, load_items
from .gradcheck import (
    FULL_MODEL_TOL,
    PRIMITIVE_TOL,
    full_model_gradcheck,
    primitive_gradchecks,
)
from .model import Model, parameter_count
from .training import Trainer, validate

logger = logging.getLogger("graphmem")


def _load_model(ckpt_path: str):
    model, meta, _, _ = load_checkpoint(ckpt_path)
    return model, meta


def cmd_prepare(args) -> int:
    tokenizer = load_tokenizer(args.tokenizer)
    docs = read_documents(args.input, doc_mode=args.doc_mode)
    train_docs, val_docs = split_documents(docs, SplitSpec(train_fraction=args.split))
    train_stream = tokenize_documents(train_docs, tokenizer)
    val_stream = tokenize_documents(val_docs, tokenizer)
    train_path = save_stream(train_stream, f"{args.out}.train")
    val_path = save_stream(val_stream, f"{args.out}.val")
    print(json.dumps({
        "documents": len(docs), "train_docs": len(train_docs),
        "val_docs": len(val_docs), "train_tokens": len(train_stream),
        "val_tokens": len(val_stream),
        "train_stream": str(train_path), "val_stream": str(val_path),
    }, indent=2))
    return 0


def cmd_train(args) -> int:
    model_config, train_config, data = load_config_file(args.config)
    if "train_stream" not in data:
        raise GraphMemError("config data section needs train_stream (and usually val_stream)")
    train_stream = load_stream(data["train_stream"])
    val_stream = load_stream(data["val_stream"]) if "val_stream" in data else None
    if args.resume:
        trainer = Trainer.resume(args.resume, train_stream, val_stream, args.out)
    else:
        model = Model(model_config, seed=train_config.seed)
        trainer = Trainer(model, train_stream, val_stream, train_config, args.out)
    result = trainer.run()
    trainer.save(Path(args.out) / "last.ckpt")
    print(json.dumps({"steps": result.steps, "best_val_loss": result.best_val_loss,
                      "final_val_loss": result.final_val_loss}, indent=2))
    return 0


def cmd_validate(args) -> int:
    model, meta = _load_model(args.ckpt)
    stream = load_stream(args.stream)
    val_loss, ppl = validate(model, stream, tau=meta["tau"],
                             adaptive_eval=not args.frozen)
    print(json.dumps({"val_loss": val_loss, "ppl": ppl,
                      "frozen": bool(args.frozen), "step": meta["step"]}, indent=2))
    return 0


def cmd_score(args) -> int:
    model, meta = _load_model(args.ckpt)
    tokenizer = load_tokenizer(args.tokenizer)
    items = load_items(args.items)
    report = evaluate_choices(model, items, tokenizer, tau=meta["tau"],
                              template=args.template, adaptive=args.adaptive)
    payload = json.dumps(report.to_json(), indent=2)
    if args.out:
        Path(args.out).write_text(payload + "\n")
        print(json.dumps({"acc_raw": report.acc_raw, "acc_norm": report.acc_norm,
                          "n": report.n, "skipped": report.skipped}, indent=2))
    else:
        print(payload)
    return 0


def cmd_trace(args) -> int:
    model, meta = _load_model(args.ckpt)
    tokenizer = load_tokenizer(args.tokenizer)
    text = Path(args.text).read_text(encoding="utf-8")
    records = trace_text(model, text, tokenizer, tau=meta["tau"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        for record in records:
            fh.write(json.dumps(record.to_json()) + "\n")
    print(json.dumps({"records": len(records), "out": str(out)}, indent=2))
    return 0


def cmd_stats(args) -> int:
    model, meta = _load_model(args.ckpt)
    trace = None
    if args.trace:
        rows = [json.loads(line) for line in Path(args.trace).read_text().splitlines()
                if line.strip()]
        from .diagnostics import TraceRecord

        trace = [TraceRecord(**row) for row in rows]
    stats = model_utilization(model, trace)
    payload = {"step": meta["step"],
               "source": "trace" if trace is not None else "smoothed_usage",
               "blocks": {str(i): s.to_json() for i, s in stats.items()}}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    print(json.dumps(payload, indent=2))
    return 0


def cmd_edges(args) -> int:
    model, meta = _load_model(args.ckpt)
    written = []
    out = Path(args.out)
    for i, block in enumerate(model.blocks):
        if block.cell is None or (args.block is not None and i != args.block):
            continue
        path = out if args.block is not None else out.with_name(
            f"{out.stem}.block{i}{out.suffix}")
        edge_structure_export(model, i, args.top, path)
        written.append(str(path))
    if not written:
        raise GraphMemError("model has no graph-memory blocks to export")
    print(json.dumps({"files": written, "top": args.top}, indent=2))
    return 0


def cmd_sweep(args) -> int:
    model, meta = _load_model(args.ckpt)
    tokenizer = load_tokenizer(args.tokenizer)
    text = Path(args.text).read_text(encoding="utf-8")
    stream = stream_from_text(text, tokenizer)
    alphas = [float(a) for a in args.alphas.split(",") if a != ""]
    table = displacement_sweep(model, stream, alphas, tau=meta["tau"])
    print("alpha,loss")
    for alpha, loss in table:
        print(f"{alpha},{loss:.10f}")
    return 0


def cmd_gradcheck(args) -> int:
    model_config, _, _ = load_config_file(args.config) if args.config else (None, None, None)
    failures = 0
    print("primitive gradient checks (tolerance {:.0e}):".format(PRIMITIVE_TOL))
    for name, err in primitive_gradchecks().items():
        ok = err <= PRIMITIVE_TOL
        failures += not ok
        print(f"  {'PASS' if ok else 'FAIL'} {name:<22} max rel err {err:.3e}")
    print("full-objective gradient check (tolerance {:.0e}):".format(FULL_MODEL_TOL))
    errors = full_model_gradcheck(model_config)
    worst = max(errors.values())
    for name, err in sorted(errors.items()):
        ok = err <= FULL_MODEL_TOL
        failures += not ok
        print(f"  {'PASS' if ok else 'FAIL'} {name:<28} max rel err {err:.3e}")
    print(f"worst full-model relative error: {worst:.3e}")
    return 1 if failures else 0


def cmd_paramcount(args) -> int:
    model_config, _, _ = load_config_file(args.config)
    breakdown = parameter_count(model_config)
    width = max(len(k) for k in breakdown)
    for key, value in breakdown.items():
        print(f"{key:<{width}}  {value:,}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphmem",
        description="Graph-routed-memory language model: preparation, training, diagnostics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="tokenize a document directory into train/val streams")
    p.add_argument("--input", required=True, help="directory of UTF-8 .txt files")
    p.add_argument("--out", required=True, help="stream base path (writes .train/.val pairs)")
    p.add_argument("--tokenizer", default="byte", help="'byte' or module:attr plugin")
    p.add_argument("--split", type=float, default=0.95, help="train document fraction")
    p.add_argument("--doc-mode", default="file", choices=["file", "block"],
                   help="one document per file, or per blank-line block")
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory (logs, checkpoints)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("validate", help="validation loss and perplexity of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--stream", required=True, help="stream base path")
    p.add_argument("--frozen", action="store_true",
                   help="disable adaptive memory during evaluation")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("score", help="multiple-choice log-likelihood scoring")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--items", required=True, help="JSONL of {question, choices, gold}")
    p.add_argument("--template", default="qa")
    p.add_argument("--tokenizer", default="byte")
    p.add_argument("--adaptive", action="store_true",
                   help="keep write-back active while scoring")
    p.add_argument("--out", help="write the full report JSON here")
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("trace", help="per-token routing trace over a text file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--out", required=True, help="JSONL output path")
    p.add_argument("--tokenizer", default="byte")
    p.set_defaults(fn=cmd_trace)

    p = sub.add_parser("stats", help="per-block utilization statistics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--trace", help="use a trace JSONL instead of smoothed usage")
    p.add_argument("--out", required=True, help="JSON output path")
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("edges", help="export top-usage transition rows as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--top", type=int, default=32)
    p.add_argument("--out", required=True, help="CSV path (per-block suffix added)")
    p.add_argument("--block", type=int, help="export only this block")
    p.set_defaults(fn=cmd_edges)

    p = sub.add_parser("sweep", help="loss vs displacement scale alpha")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--alphas", default="0,0.5,1,2", help="comma-separated scales")
    p.add_argument("--tokenizer", default="byte")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite (64-bit)")
    p.add_argument("--config", help="model config to check (default: built-in toy)")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("paramcount", help="exact trainable-parameter breakdown")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_paramcount)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except GraphMemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
