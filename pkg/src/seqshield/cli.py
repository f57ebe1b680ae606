"""Command-line entry points.

Subcommands: ingest, synth, attack, train-detector, sweep-budget,
sweep-detect, report. All experiment state flows through JSON/CSV files so
runs are reproducible from their configs alone.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .attacks import AttackBudget, gray_box_attack, random_attack, save_attack, white_box_attack
from .datasets import SyntheticConfig, generate_synthetic, ingest_instacart, load_corpus, save_corpus, split_clean_polluted
from .detectors import DetectorConfig, save_detector, train_baseline, train_gan_detector
from .embeddings import embed_items
from .experiments import (ExperimentConfig, emit_report, load_report,
                          run_budget_sweep, run_detection_sweep, select_target)


def _cmd_ingest(args) -> int:
    corpus = ingest_instacart(args.orders, args.order_products, args.products,
                              session_cap=args.session_cap)
    save_corpus(corpus, args.out)
    print(f"wrote {args.out}: {len(corpus.sessions)} sessions, "
          f"{corpus.num_users} users, {corpus.num_items} items")
    return 0


def _cmd_synth(args) -> int:
    config = SyntheticConfig(num_users=args.num_users, num_items=args.num_items,
                             num_sessions=args.num_sessions,
                             session_len_range=(args.len_min, args.len_max),
                             num_clusters=args.clusters, cluster_skew=args.skew,
                             seed=args.seed)
    corpus = generate_synthetic(config)
    if args.clean_fraction is not None:
        corpus = split_clean_polluted(corpus, args.clean_fraction, args.seed)
    save_corpus(corpus, args.out)
    print(f"wrote {args.out}: {len(corpus.sessions)} sessions, "
          f"{corpus.num_users} users, {corpus.num_items} items")
    return 0


def _cmd_attack(args) -> int:
    corpus = load_corpus(args.corpus)
    target = args.target if args.target is not None else select_target(corpus, "bottom_quartile")
    budget = AttackBudget(num_malicious_users=args.num_users,
                          sessions_per_user=args.sessions_per_user,
                          session_length=args.session_length,
                          budget_cap=args.budget if args.budget is not None
                          else args.num_users * args.sessions_per_user)
    if args.algorithm == "random":
        mset = random_attack(corpus, target, budget, args.seed)
    elif args.algorithm == "white-box":
        mset, _ = white_box_attack(corpus, target, budget,
                                   num_candidates=args.candidates, r=args.r, seed=args.seed)
    else:
        mset = gray_box_attack(corpus, target, budget, num_candidates=args.candidates,
                               visibility_pct=args.visibility, warmup_ratio=args.warmup,
                               r=args.r, seed=args.seed)
    save_attack(mset, args.out)
    print(f"wrote {args.out}: {len(mset.sessions)} injected sessions targeting item {target}")
    return 0


def _cmd_train_detector(args) -> int:
    corpus = load_corpus(args.corpus)
    emb = embed_items(corpus.items, args.dim, args.embedding_seed)
    config = DetectorConfig()
    if args.config:
        config = DetectorConfig(**json.loads(Path(args.config).read_text(encoding="utf-8")))
    clean = corpus.clean_sessions()
    if args.detector == "baseline":
        det = train_baseline(clean, emb, config, args.seed, corpus=corpus)
        extra = f"threshold={det.nll_threshold:.4f}"
    else:
        det = train_gan_detector(clean, emb, config, args.seed, corpus=corpus)
        extra = f"threshold={det.score_threshold:.6f}"
    save_detector(det, args.out)
    print(f"wrote {args.out}: {args.detector} detector, {extra}")
    return 0


def _cmd_sweep(args, runner) -> int:
    config = ExperimentConfig.from_file(args.config)
    if args.out_dir:
        config.out_dir = args.out_dir
    report = runner(config)
    for path in emit_report(report, config.out_dir):
        print(f"wrote {path}")
    return 0


def _cmd_report(args) -> int:
    report = load_report(args.report)
    for path in emit_report(report, args.out_dir, formats=("csv",)):
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqshield")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build a corpus from Instacart-style CSVs")
    p.add_argument("--orders", required=True)
    p.add_argument("--order-products", required=True)
    p.add_argument("--products", required=True)
    p.add_argument("--session-cap", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--num-users", type=int, required=True)
    p.add_argument("--num-items", type=int, required=True)
    p.add_argument("--num-sessions", type=int, required=True)
    p.add_argument("--clusters", type=int, default=10)
    p.add_argument("--skew", type=float, default=0.9)
    p.add_argument("--len-min", type=int, default=4)
    p.add_argument("--len-max", type=int, default=12)
    p.add_argument("--clean-fraction", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("attack", help="generate a malicious session set")
    p.add_argument("--corpus", required=True)
    p.add_argument("--algorithm", choices=["random", "white-box", "gray-box"], required=True)
    p.add_argument("--target", type=int, default=None)
    p.add_argument("--num-users", type=int, required=True)
    p.add_argument("--sessions-per-user", type=int, default=2)
    p.add_argument("--session-length", type=int, default=8)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--candidates", type=int, default=5)
    p.add_argument("--visibility", type=float, default=10.0)
    p.add_argument("--warmup", type=float, default=0.2)
    p.add_argument("-r", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("train-detector", help="train a detector on the clean partition")
    p.add_argument("--corpus", required=True)
    p.add_argument("--detector", choices=["baseline", "gan"], required=True)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--embedding-seed", type=int, default=0)
    p.add_argument("--config", default=None, help="JSON file of DetectorConfig overrides")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_detector)

    p = sub.add_parser("sweep-budget", help="run the attacker-budget sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=lambda a: _cmd_sweep(a, run_budget_sweep))

    p = sub.add_parser("sweep-detect", help="run the detection sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=lambda a: _cmd_sweep(a, run_detection_sweep))

    p = sub.add_parser("report", help="re-emit CSV from a JSON report")
    p.add_argument("--report", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface a diagnostic, nonzero exit
        print(f"seqshield: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
