"""Command-line interface.

Subcommands:
    synth-data      generate the synthetic sign corpus
    train           run the two-phase training pipeline
    eval            score a checkpoint on a data split
    infer           answer one question about one or more images
    route           show token routing for a question
    inspect-buffer  summarize the replay buffer inside a checkpoint
    gradcheck       run the finite-difference gradient suite
    count           closed-form parameter / FLOP accounting

Every command prints a human-readable report; pass --json for a
machine-readable one on stdout.
"""

import argparse
import json
import os
import sys

import numpy as np


def _emit(args, human, payload):
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2))
    else:
        print(human)


def cmd_synth_data(args):
    from .synth import generate_corpus
    summary = generate_corpus(args.out, seed=args.seed, frames=args.frames,
                              views=args.views, size=args.size)
    human = (f"wrote {summary['qa_records']} QA records over "
             f"{summary['frames']} frames ({summary['views']} view(s), "
             f"{summary['classes']} classes) to {args.out}")
    _emit(args, human, summary)
    return 0


def cmd_train(args):
    from .config import load_config
    from .training import run_training

    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        from .config import DEFAULTS, _coerce
        if key.strip() not in DEFAULTS:
            raise SystemExit(f"unknown config key {key.strip()!r}")
        overrides[key.strip()] = _coerce(key.strip(), raw.strip(),
                                         DEFAULTS[key.strip()])
    cfg = load_config(args.config, overrides)
    log = (lambda *a: None) if args.quiet else print
    report = run_training(cfg, args.data, args.out, log=log)
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        print(f"report written to {os.path.join(args.out, 'report.txt')}")
    return 0


def cmd_eval(args):
    from .data import load_records, split_records
    from .metrics import evaluate_pairs
    from .training import ImageCache, generate_answers, load_bundle

    bundle = load_bundle(args.checkpoint)
    cfg = bundle["config"]
    records = load_records(os.path.join(args.data, "qa.jsonl"))
    splits = split_records(records, cfg["seed"],
                           (cfg["train_ratio"], cfg["val_ratio"], cfg["test_ratio"]))
    subset = splits[args.split]
    if args.limit:
        subset = subset[:args.limit]
    cache = ImageCache(args.data, cfg["input_size"])
    hyps = generate_answers(bundle["encoder"], bundle["seq_model"],
                            bundle["router"], bundle["tokenizer"], subset,
                            cache, cfg["question_cap"], cfg["answer_cap"])
    refs = [r.answer for r in subset]
    scores = evaluate_pairs(refs, hyps)
    scores["exact_match"] = float(np.mean(
        [h.strip() == " ".join(r.lower().split()) for h, r in zip(hyps, refs)]))
    payload = {"split": args.split, "records": len(subset), "metrics": scores}
    human = (f"{args.split} split, {len(subset)} records\n"
             + "\n".join(f"  {k:18s} {v:.4f}" for k, v in scores.items()))
    _emit(args, human, payload)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
    return 0


def cmd_infer(args):
    from .data import load_image
    from .seqmodel import Tensor
    from .tensor import no_grad, reshape
    from .training import load_bundle, route_questions

    bundle = load_bundle(args.checkpoint)
    cfg = bundle["config"]
    encoder, seq_model = bundle["encoder"], bundle["seq_model"]
    if len(args.image) != cfg["views"]:
        raise SystemExit(f"checkpoint expects {cfg['views']} view(s), "
                         f"got {len(args.image)} images")
    views = np.stack([load_image(p, size=cfg["input_size"]) for p in args.image])
    tok = bundle["tokenizer"]
    q_ids, q_mask = tok.encode_question(args.question, cfg["question_cap"])
    with no_grad():
        embeds = encoder.encode_views(Tensor(views[None]))
        flat = reshape(embeds, (1, -1))
        kept_ids, kept_mask = route_questions(
            bundle["router"], seq_model.embed.weight.data,
            q_ids[None], q_mask[None])
        ids = seq_model.generate(Tensor(flat.data), kept_ids, kept_mask,
                                 max_len=cfg["answer_cap"])[0]
    answer = tok.decode(ids)
    _emit(args, f"Q: {args.question}\nA: {answer}",
          {"question": args.question, "answer": answer,
           "kept_tokens": int(kept_mask.sum())})
    return 0


def cmd_route(args):
    from .tokenizer import tokenize
    from .training import load_bundle

    bundle = load_bundle(args.checkpoint)
    cfg = bundle["config"]
    tok = bundle["tokenizer"]
    q_ids, q_mask = tok.encode_question(args.question, cfg["question_cap"])
    embeds = bundle["seq_model"].embed.weight.data[q_ids]
    routed = bundle["router"].route(embeds, q_mask)
    tokens = tokenize(args.question)[:cfg["question_cap"]]
    kept = set(routed.kept_positions.tolist())
    rows = [{"position": i, "token": t, "score": float(routed.scores[i]),
             "kept": i in kept} for i, t in enumerate(tokens)]
    human_rows = [f"  {'*' if r['kept'] else ' '} {r['position']:3d} "
                  f"{r['token']:15s} {r['score']:.4f}" for r in rows]
    human = (f"kept {routed.kept_count}/{routed.original_length} tokens "
             f"(budget {cfg['router_max_tokens']})\n" + "\n".join(human_rows))
    _emit(args, human, {"question": args.question,
                        "kept": routed.kept_positions.tolist(), "tokens": rows})
    return 0


def cmd_inspect_buffer(args):
    from .training import load_bundle

    bundle = load_bundle(args.checkpoint)
    buf = bundle["buffer"]
    if buf is None:
        print("checkpoint carries no buffer state")
        return 1
    pri = buf.priorities()
    probs = buf.probabilities()
    order = np.argsort(-pri)[:args.top]
    payload = {
        "fill": len(buf),
        "capacity": buf.capacity,
        "beta": buf.beta,
        "alpha": buf.alpha,
        "priority_mean": float(pri.mean()),
        "priority_min": float(pri.min()),
        "priority_max": float(pri.max()),
        "sum_tree_relative_error": buf.max_relative_sum_error(),
        "top": [{"slot": int(i), "item": buf.items()[i],
                 "priority": float(pri[i]), "probability": float(probs[i])}
                for i in order],
    }
    human = (f"buffer: {payload['fill']}/{payload['capacity']} records, "
             f"beta {payload['beta']:.3f}, alpha {payload['alpha']}\n"
             f"priorities: min {payload['priority_min']:.4f} "
             f"mean {payload['priority_mean']:.4f} max {payload['priority_max']:.4f}\n"
             f"sum-tree relative error: {payload['sum_tree_relative_error']:.2e}\n"
             + "\n".join(f"  slot {r['slot']:5d} item {r['item']!s:>8} "
                         f"priority {r['priority']:.4f} p {r['probability']:.5f}"
                         for r in payload["top"]))
    _emit(args, human, payload)
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_suite, suite_names

    if args.list:
        print("\n".join(suite_names()))
        return 0
    reports = run_suite(names=args.op or None,
                        seeds=tuple(range(args.seeds)),
                        tolerance=args.tolerance)
    failures = [r for r in reports if not r.passed]
    if args.json:
        print(json.dumps([{"name": r.name, "max_error": r.max_error,
                           "passed": r.passed} for r in reports], indent=2))
    else:
        for r in reports:
            print(r)
        print(f"{len(reports) - len(failures)}/{len(reports)} passed")
    return 1 if failures else 0


def cmd_count(args):
    from . import accounting

    summary = accounting.summarize(args.vocab, args.views * 24,
                                   views=args.views, input_size=args.input_size,
                                   enc_len=args.enc_len, dec_len=args.dec_len)
    if args.json:
        print(json.dumps(summary, indent=2))
        return 0
    p = summary["parameters"]
    f = summary["flops_forward"]
    lines = ["parameters:"]
    for part in ("vision_encoder", "seq_model"):
        lines.append(f"  {part}:")
        for k, v in p[part].items():
            lines.append(f"    {k:20s} {v:>14,}")
    lines.append(f"  total               {p['total']:>16,}")
    lines.append("forward flops (one sample):")
    for part in ("vision_encoder", "seq_model"):
        lines.append(f"  {part}:")
        for k, v in f[part].items():
            lines.append(f"    {k:20s} {v:>14,}")
    lines.append(f"  total               {f['total']:>16,}")
    print("\n".join(lines))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="drivevqa",
        description="Desk-scale driving VQA: synthetic data, training, "
                    "evaluation, and inspection.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=500)
    p.add_argument("--views", type=int, default=1)
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="run two-phase training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="val")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--report", default=None, help="also write JSON here")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="answer a question about image(s)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", action="append", required=True,
                   help="one per view, in view order")
    p.add_argument("--question", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("route", help="show token routing for a question")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--question", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("inspect-buffer", help="summarize buffer state")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect_buffer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--op", action="append", help="restrict to named op(s)")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--list", action="store_true", help="list op names")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("count", help="parameter / FLOP accounting")
    p.add_argument("--vocab", type=int, default=512)
    p.add_argument("--views", type=int, default=1)
    p.add_argument("--input-size", type=int, default=224)
    p.add_argument("--enc-len", type=int, default=65)
    p.add_argument("--dec-len", type=int, default=128)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_count)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
