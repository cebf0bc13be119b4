"""Single entry point exposing the whole pipeline as subcommands.

Typical desk-scale flow:

    charflip synth-corpus --out corpus.csv
    charflip train-source --corpus corpus.csv --out source.ckpt
    charflip gen-data --source source.ckpt --corpus corpus.csv --out pairs.jsonl
    charflip train-attacker --pairs pairs.jsonl --out attacker.ckpt
    charflip bench --source source.ckpt --attacker-ckpt attacker.ckpt \
        --corpus corpus.csv --out bench/
    charflip serve-mock --checkpoint other.ckpt --port 8470
    charflip blackbox --source source.ckpt --attacker-ckpt attacker.ckpt \
        --corpus corpus.csv --endpoint http://127.0.0.1:8470 --out transfer.jsonl

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite
artifact, 4 runtime failure. Errors are emitted as JSON on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import blackbox as blackbox_mod
from . import corpus as corpus_mod
from . import distill, evalbench, hotflip, nn
from . import source_model as sm
from .config import ConfigError, build_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_RUNTIME = 4


class MissingArtifactError(RuntimeError):
    pass


def _require(path, hint):
    if not path or not os.path.exists(path):
        raise MissingArtifactError(f"{path or '<unset>'} not found; {hint}")


def _emit(payload):
    print(json.dumps(payload, sort_keys=True))


def _load_corpus(cfg, path):
    _require(path, "run `charflip synth-corpus` first or point --corpus at a dataset CSV")
    vocab = corpus_mod.default_vocab()
    result = corpus_mod.ingest_csv(
        path, vocab, strict=cfg.strict_csv, lowercase=cfg.lowercase, max_chars=cfg.max_chars
    )
    return vocab, result


def _splits(cfg, sentences):
    return corpus_mod.split(sentences, corpus_mod.SplitSpec((0.8, 0.1, 0.1), cfg.split_seed))


def _pick_split(cfg, sentences, which):
    if which == "all":
        return list(sentences)
    train, val, test = _splits(cfg, sentences)
    return {"train": train, "val": val, "test": test}[which]


def _load_source(cfg, path):
    _require(path, "run `charflip train-source` first")
    return sm.SourceModel.load(path, corpus_mod.default_vocab())


def _load_attacker(path):
    _require(path, "run `charflip train-attacker` first")
    return distill.AttackerModel.load(path, corpus_mod.default_vocab())


def _toxic_scored(model, sentences, limit):
    picked = []
    for s in sentences:
        if s.label == 1 and model.score(s) > 0.5:
            picked.append(s)
        if limit and len(picked) >= limit:
            break
    return picked


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth_corpus(cfg, args):
    n = args.n or cfg.synth_n
    triggers = corpus_mod.DEFAULT_TRIGGERS
    if args.lexicon:
        _require(args.lexicon, "pass --lexicon a file with one trigger word per line")
        triggers = corpus_mod.load_lexicon(args.lexicon)
    sents = corpus_mod.synth_corpus(
        cfg.seed, n, triggers=triggers, toxic_fraction=cfg.synth_toxic_fraction,
        extra_trigger_prob=cfg.synth_extra_trigger,
    )
    corpus_mod.write_csv(sents, args.out)
    with open(args.out + ".config.json", "w", encoding="utf-8") as f:
        json.dump({"config": cfg.to_dict(), "sentences": n}, f, sort_keys=True, indent=2)
        f.write("\n")
    _emit({"out": args.out, "sentences": n, "toxic": sum(s.label for s in sents)})


def cmd_train_source(cfg, args):
    vocab, ingest = _load_corpus(cfg, args.corpus)
    train, val, _ = _splits(cfg, ingest.sentences)
    model, metrics = sm.train_source(
        train, val, vocab, cfg.source_config(), cfg.train_hyper(cfg.src_epochs), cfg.seed
    )
    model.save(args.out)
    metrics_path = args.metrics or args.out + ".metrics.jsonl"
    sm.write_metrics(metrics, metrics_path, cfg.to_dict())
    _emit({"out": args.out, "metrics": metrics_path, "ingest": ingest.summary(),
           "final": metrics[-1] if metrics else None})


def cmd_gen_data(cfg, args):
    model = _load_source(cfg, args.source)
    _, ingest = _load_corpus(cfg, args.corpus)
    chosen = _pick_split(cfg, ingest.sentences, args.split)
    toxic = [s for s in chosen if s.label == 1]
    if args.limit:
        toxic = toxic[: args.limit]
    pairs, report = distill.generate_dataset(
        model, toxic, search=args.search, tau=cfg.tau,
        max_flips=cfg.max_flips, exclude_oov=cfg.exclude_oov,
    )
    distill.write_pairs(args.out, pairs, model.vocab, cfg.to_dict())
    report_path = args.out + ".report.json"
    with open(report_path, "w", encoding="utf-8") as f:
        json.dump({"config": cfg.to_dict(), "report": report.to_dict()}, f,
                  sort_keys=True, indent=2)
        f.write("\n")
    _emit({"out": args.out, "report": report.to_dict()})


def cmd_train_attacker(cfg, args):
    _require(args.pairs, "run `charflip gen-data` first")
    vocab = corpus_mod.default_vocab()
    pairs = distill.load_pairs(args.pairs, vocab)
    if not pairs:
        raise RuntimeError(f"{args.pairs}: no training pairs found")
    train, val, _ = distill.split_pairs(pairs, seed=cfg.split_seed)
    model, metrics = distill.train_attacker(
        train, val, vocab, cfg.attacker_config(), cfg.train_hyper(cfg.atk_epochs),
        cfg.seed, pretrained_emb=cfg.pretrained_emb or None,
    )
    model.save(args.out)
    metrics_path = args.metrics or args.out + ".metrics.jsonl"
    sm.write_metrics(metrics, metrics_path, cfg.to_dict())
    _emit({"out": args.out, "metrics": metrics_path, "pairs": len(pairs),
           "final": metrics[-1] if metrics else None})


def _registry(cfg, names, source, attacker_model, stop, max_flips):
    return evalbench.make_attackers(
        names, source, attacker_model=attacker_model, seed=cfg.seed, stop=stop,
        max_flips=max_flips, prune_width=cfg.prune_width,
        exclude_oov=cfg.exclude_oov, allow_reflip=cfg.allow_reflip,
    )


def cmd_attack(cfg, args):
    source = _load_source(cfg, args.source)
    attacker_model = None
    if args.attacker == "distflip":
        attacker_model = _load_attacker(args.attacker_ckpt)
    if args.text:
        sentences = [corpus_mod.sentence_from_text(
            source.vocab, "cli", args.text, 1, cfg.lowercase, cfg.max_chars)]
    else:
        _, ingest = _load_corpus(cfg, args.corpus)
        chosen = _pick_split(cfg, ingest.sentences, args.split)
        sentences = _toxic_scored(source, chosen, args.limit or 10)
    stop = hotflip.prob_below(args.tau) if args.tau else hotflip.prediction_flipped()
    registry = _registry(cfg, [args.attacker], source, attacker_model, stop, cfg.max_flips)
    attack = registry[args.attacker]
    traces = [attack(s) for s in sentences]
    for trace in traces:
        _emit(hotflip.trace_to_dict(trace, source.vocab))
    if args.out:
        hotflip.write_traces(args.out, traces, source.vocab, cfg.to_dict())


def cmd_bench(cfg, args):
    source = _load_source(cfg, args.source)
    names = [n.strip() for n in (args.attackers or cfg.bench_attackers).split(",") if n.strip()]
    attacker_model = _load_attacker(args.attacker_ckpt) if "distflip" in names else None
    _, ingest = _load_corpus(cfg, args.corpus)
    chosen = _pick_split(cfg, ingest.sentences, args.split)
    sentences = _toxic_scored(source, chosen, args.limit)
    registry = _registry(
        cfg, names, source, attacker_model, hotflip.prediction_flipped(), cfg.bench_max_flips
    )
    report = evalbench.run_bench(
        registry, sentences, cfg.bench_max_flips,
        reference=args.reference or cfg.reference, timing_repeats=cfg.timing_repeats,
    )
    written = evalbench.export_report(report, args.out, config_dict=cfg.to_dict())
    summary = {
        name: {
            "mean_flips_capped": s.mean_flips_capped,
            "success_rate": s.success_rate,
            "slowdown": report.slowdown(name),
        }
        for name, s in report.stats.items()
    }
    _emit({"out": written, "sentences": len(sentences), "attackers": summary})


def cmd_blackbox(cfg, args):
    source = _load_source(cfg, args.source)
    attacker_model = _load_attacker(args.attacker_ckpt)
    _, ingest = _load_corpus(cfg, args.corpus)
    chosen = _pick_split(cfg, ingest.sentences, args.split)
    sentences = _toxic_scored(source, chosen, args.limit)
    client = blackbox_mod.ApiClient(
        args.endpoint or cfg.endpoint,
        timeout=cfg.timeout,
        retries=cfg.retries,
        backoff=cfg.backoff,
        rate_limit_rps=args.rate or cfg.rate_limit_rps,
        token=args.token or cfg.api_token or None,
    )
    result = blackbox_mod.transfer_attack(
        attacker_model, source, client, sentences,
        stop=hotflip.prediction_flipped(), max_flips=cfg.max_flips,
        exclude_oov=cfg.exclude_oov,
        concurrency=args.concurrency or cfg.concurrency,
    )
    blackbox_mod.write_transfer(args.out, result, cfg.to_dict())
    _emit({"out": args.out, "summary": result.summary(), "api_calls": client.calls})


def cmd_serve_mock(cfg, args):
    _require(args.checkpoint, "run `charflip train-source` first (any model checkpoint works)")
    vocab = corpus_mod.default_vocab()
    model = sm.SourceModel.load(args.checkpoint, vocab)
    server = blackbox_mod.MockServer(model, host=args.host, port=args.port)
    _emit({"serving": server.url, "checkpoint": args.checkpoint})
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.stop()


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable; flags win)")

    parser = argparse.ArgumentParser(
        prog="charflip",
        description="Character-flip adversarial attacks: train, distill, benchmark, transfer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", parents=[common],
                       help="generate the synthetic desk-scale corpus CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="number of sentences (default from config)")
    p.add_argument("--lexicon", help="trigger lexicon file, one word per line")
    p.set_defaults(fn=cmd_synth_corpus)

    p = sub.add_parser("train-source", parents=[common], help="train the toxicity classifier")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    p.set_defaults(fn=cmd_train_source)

    p = sub.add_parser("gen-data", parents=[common],
                       help="attack toxic sentences and harvest flip pairs")
    p.add_argument("--source", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--search", default="hotflip-5",
                   help="hotflip-<K> or hotflip-plus (default hotflip-5)")
    p.add_argument("--split", default="train", choices=["train", "val", "test", "all"])
    p.add_argument("--limit", type=int)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-attacker", parents=[common], help="train the distilled attacker")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    p.set_defaults(fn=cmd_train_attacker)

    p = sub.add_parser("attack", parents=[common], help="attack text or corpus sentences")
    p.add_argument("--source", required=True)
    p.add_argument("--attacker", default="distflip",
                   help="distflip | hotflip-<K> | hotflip-plus | random | attention")
    p.add_argument("--attacker-ckpt")
    p.add_argument("--text", help="attack this text instead of corpus sentences")
    p.add_argument("--corpus")
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--limit", type=int)
    p.add_argument("--tau", type=float, help="stop threshold (default 0.5)")
    p.add_argument("--out", help="also write traces JSONL here")
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("bench", parents=[common], help="run the attacker benchmark")
    p.add_argument("--source", required=True)
    p.add_argument("--attacker-ckpt")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--attackers", help="comma-separated list (default from config)")
    p.add_argument("--reference")
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--limit", type=int)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("blackbox", parents=[common],
                       help="transfer attack against an external scoring endpoint")
    p.add_argument("--source", required=True)
    p.add_argument("--attacker-ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--endpoint")
    p.add_argument("--token", help="bearer token sent to the endpoint")
    p.add_argument("--rate", type=float, help="requests per second")
    p.add_argument("--concurrency", type=int, help="parallel API jobs")
    p.add_argument("--split", default="val", choices=["train", "val", "test", "all"])
    p.add_argument("--limit", type=int)
    p.set_defaults(fn=cmd_blackbox)

    p = sub.add_parser("serve-mock", parents=[common],
                       help="serve a checkpointed model over the scoring protocol")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8470)
    p.set_defaults(fn=cmd_serve_mock)

    return parser


def _error(code, kind, message):
    sys.stderr.write(json.dumps({"error": {"code": code, "kind": kind, "message": message}},
                                sort_keys=True) + "\n")
    return code


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args.config, args.set, args.seed)
        args.fn(cfg, args)
        return EXIT_OK
    except (ConfigError, evalbench.AttackerRegistryError) as e:
        return _error(EXIT_CONFIG, "config", str(e))
    except MissingArtifactError as e:
        return _error(EXIT_MISSING, "missing-artifact", str(e))
    except FileNotFoundError as e:
        return _error(EXIT_MISSING, "missing-artifact", str(e))
    except (nn.CheckpointError, nn.NanGradientError, sm.TrainingDiverged,
            corpus_mod.IngestError, blackbox_mod.ApiError, RuntimeError, ValueError) as e:
        return _error(EXIT_RUNTIME, type(e).__name__, str(e))


if __name__ == "__main__":
    sys.exit(main())
