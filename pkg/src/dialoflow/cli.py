"""Command-line surface: train, generate, score, eval, project-flow, serve.

Exit codes: 0 success, 1 usage, 2 data error, 3 internal error.  With
--json, errors are emitted as machine-readable JSON on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import (
    CorpusError,
    EncodingError,
    build_vocab,
    encode_dialogue,
    load_corpus,
    normalize_sample,
    decode_tokens,
)
from .flow_score import (
    ConversationLog,
    CorrelationError,
    ScoringError,
    chatbot_level_eval,
    format_bot_table,
    load_logs,
    score_log,
)
from .gen_metrics import evaluate_testset, format_metric_table, load_testset
from .generation import DecodeConfig, decode_reply
from .model import ModelConfig, forward
from .trajectory import trajectory_points
from .training import CheckpointError, TrainConfig, load_checkpoint, train

DATA_ERRORS = (
    CorpusError,
    EncodingError,
    ScoringError,
    CorrelationError,
    CheckpointError,
    FileNotFoundError,
    json.JSONDecodeError,
    KeyError,
)


def _load_json_arg(value: str):
    value = value.strip()
    if value.startswith("{") or value.startswith("["):
        return json.loads(value)
    return json.loads(Path(value).read_text(encoding="utf-8"))


def _context_turns(obj) -> list[tuple[str, str]]:
    turns = obj["context"] if isinstance(obj, dict) else obj
    parsed = []
    for i, t in enumerate(turns):
        if isinstance(t, str):
            parsed.append(("A" if i % 2 == 0 else "B", t))
        else:
            parsed.append((t["speaker"], t["text"]))
    return parsed


def cmd_train(args) -> int:
    cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    model_cfg = ModelConfig.from_dict(cfg.get("model", {}))
    train_cfg = TrainConfig.from_dict(cfg.get("train", {}))
    vocab_cfg = cfg.get("vocab", {})

    samples = list(load_corpus(args.corpus))
    if not samples:
        raise CorpusError(f"corpus {args.corpus} has no usable dialogues")
    vocab = build_vocab(
        samples, vocab_cfg.get("min_freq", 1), vocab_cfg.get("max_size", model_cfg.vocab_size - 5)
    )
    model_cfg.vocab_size = max(model_cfg.vocab_size, vocab.size)

    encoded = []
    for s in samples:
        try:
            encoded.append(encode_dialogue(s, vocab, model_cfg.max_positions))
        except EncodingError as exc:
            print(f"skipping dialogue: {exc}", file=sys.stderr)
    val_encoded = None
    if args.val:
        val_encoded = [
            encode_dialogue(s, vocab, model_cfg.max_positions) for s in load_corpus(args.val)
        ]
    result = train(
        encoded,
        vocab,
        model_cfg,
        train_cfg,
        args.out,
        val_samples=val_encoded,
        resume_from=args.resume,
        log_cb=None if args.quiet else lambda r: print(json.dumps(r)),
    )
    print(f"final checkpoint: {result['final_checkpoint']}")
    return 0


def cmd_generate(args) -> int:
    params, model_cfg, vocab, _, _ = load_checkpoint(args.ckpt)
    decode_cfg = DecodeConfig(
        strategy="beam" if args.beam else "greedy",
        beam_width=args.beam or 5,
        max_new_tokens=args.max_new_tokens,
    )
    turns = _context_turns(_load_json_arg(args.context))
    sample = normalize_sample(turns)
    bot_segment = 1 if sample.utterances[-1][0] == "A" else 0
    prefix = encode_dialogue(
        sample, vocab, model_cfg.max_positions - decode_cfg.max_new_tokens - 1
    )
    reply = decode_reply(prefix, params, model_cfg, decode_cfg, bot_segment=bot_segment)
    print(decode_tokens(reply, vocab))
    return 0


def cmd_score(args) -> int:
    params, model_cfg, vocab, _, _ = load_checkpoint(args.ckpt)
    logs = load_logs(args.logs)
    if not logs:
        raise ScoringError(f"no conversations in {args.logs}")
    for log in logs:
        report = score_log(log, params, model_cfg, vocab)
        print(json.dumps({"bot_id": log.bot_id, **report.to_json()}))
    if args.with_correlation:
        result = chatbot_level_eval(logs, params, model_cfg, vocab)
        print(format_bot_table(result))
    return 0


def cmd_eval(args) -> int:
    params, model_cfg, vocab, _, _ = load_checkpoint(args.ckpt)
    testset = load_testset(args.testset)
    decode_cfg = DecodeConfig(
        strategy="beam" if args.beam else "greedy", beam_width=args.beam or 5
    )
    metrics = evaluate_testset(params, model_cfg, vocab, testset, decode_cfg)
    print(format_metric_table(metrics))
    print(json.dumps(metrics))
    return 0


def cmd_project_flow(args) -> int:
    params, model_cfg, vocab, _, _ = load_checkpoint(args.ckpt)
    logs = load_logs(args.log)
    if not logs:
        raise ScoringError(f"no conversations in {args.log}")
    outputs = []
    for log in logs:
        role_letter = {}
        turns = []
        for t in log.turns:
            if t["speaker"] not in role_letter:
                role_letter[t["speaker"]] = "A" if not role_letter else "B"
            turns.append((role_letter[t["speaker"]], t["text"]))
        sample = normalize_sample(turns)
        encoded = encode_dialogue(sample, vocab, model_cfg.max_positions)
        out = forward(encoded, params, model_cfg, train=False)
        speakers = [sp for sp, _ in sample.utterances][-encoded.n_utterances :]
        outputs.append({"bot_id": log.bot_id, "points": trajectory_points(out.contexts.data, speakers)})
    Path(args.out).write_text(json.dumps(outputs, indent=2), encoding="utf-8")
    print(f"wrote {len(outputs)} trajectories to {args.out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app

    app = create_app(args.ckpt, cors_origins=args.cors_origin or None)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dialoflow")
    parser.add_argument("--json", action="store_true", help="machine-readable errors on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a dialogue corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val")
    p.add_argument("--resume")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode a reply for a dialogue context")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--context", required=True, help="inline JSON or a path to a JSON file")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--beam", type=int)
    group.add_argument("--greedy", action="store_true")
    p.add_argument("--max-new-tokens", type=int, default=24)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("score", help="flow-score conversation logs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--logs", required=True)
    p.add_argument("--with-correlation", action="store_true")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="reference-based metrics on a testset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--testset", required=True)
    p.add_argument("--beam", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("project-flow", help="2-D context trajectory for a conversation log")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project_flow)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--ckpt")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--cors-origin", action="append")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0

    def report(code: int, kind: str, exc: Exception) -> int:
        if args.json:
            print(json.dumps({"error": kind, "detail": str(exc)}), file=sys.stderr)
        else:
            print(f"{kind}: {exc}", file=sys.stderr)
        return code

    try:
        return args.func(args)
    except DATA_ERRORS as exc:
        return report(2, "data error", exc)
    except ValueError as exc:
        return report(2, "data error", exc)
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        return report(3, "internal error", exc)


if __name__ == "__main__":
    sys.exit(main())
