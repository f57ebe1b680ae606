"""Experiment orchestration: seeded budget and detection sweeps with
machine-readable, byte-reproducible reports.

The budget sweep rebuilds the recommender under each attack/budget/seed cell
and records the target's hit-ratio against the pre-attack reference. The
detection sweep trains both detectors on the clean partition once per seed,
then scores every polluted-partition session under each attack and
injected-session fraction.
"""

from __future__ import annotations

import dataclasses
import json
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .attacks import AttackBudget, MaliciousSessionSet, gray_box_attack, random_attack, white_box_attack
from .datasets import (INJECTED, ORGANIC, Corpus, SyntheticConfig, generate_synthetic,
                       ingest_instacart, load_corpus, split_clean_polluted)
from .detectors import (DetectorConfig, baseline_classify_many, gan_classify_many,
                        train_baseline, train_gan_detector)
from .embeddings import embed_items
from .recommender import (build_rating_matrix, build_similarity, hit_ratio,
                          item_hit_ratios)


class ExperimentError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: dict
    seeds: list[int]
    r_values: list[int] = field(default_factory=lambda: [5, 10, 20])
    target_rule: str | int = "bottom_quartile"
    budget_grid: list[int] = field(default_factory=lambda: [50, 100, 200, 300, 400, 500])
    sessions_per_user: int = 2
    session_length: int = 8
    num_candidates: int = 5
    visibility_pct: float = 10.0
    warmup_ratio: float = 0.2
    attacks: list[str] = field(default_factory=lambda: ["random", "gray_box", "white_box"])
    injected_fractions: list[float] = field(default_factory=lambda: [0.05, 0.10, 0.15, 0.20])
    clean_fraction: float = 0.5
    embedding_dim: int = 16
    embedding_seed: int = 0
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    out_dir: str = "runs"

    def validate(self) -> None:
        for name in ("seeds", "r_values", "budget_grid", "attacks", "injected_fractions"):
            if not getattr(self, name):
                raise ExperimentError(f"{name} must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ExperimentError("seeds must be distinct")
        unknown = set(self.attacks) - {"random", "gray_box", "white_box"}
        if unknown:
            raise ExperimentError(f"unknown attacks: {sorted(unknown)}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        det = doc.pop("detector", {})
        cfg = cls(**doc, detector=DetectorConfig(**det))
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class MetricsReport:
    kind: str
    config: dict
    code_version: str
    rows: list[dict]


BUDGET_COLUMNS = ["attack", "num_malicious_users", "sessions_per_user", "session_length",
                  "injected_sessions", "r", "seed", "target",
                  "pre_best_hit_ratio", "pre_target_hit_ratio", "post_target_hit_ratio"]
DETECTION_COLUMNS = ["attack", "injected_fraction", "num_malicious_users",
                     "injected_sessions", "seed", "detector",
                     "tp", "fp", "fn", "precision", "recall", "f1"]


def build_corpus(config: ExperimentConfig) -> Corpus:
    ds = config.dataset
    kind = ds.get("kind")
    if kind == "synthetic":
        spec = {k: v for k, v in ds.items() if k != "kind"}
        spec["session_len_range"] = tuple(spec["session_len_range"])
        return generate_synthetic(SyntheticConfig(**spec))
    if kind == "corpus":
        return load_corpus(ds["path"])
    if kind == "instacart":
        return ingest_instacart(ds["orders"], ds["order_products"], ds["products"])
    raise ExperimentError(f"unknown dataset kind {kind!r}")


def select_target(corpus: Corpus, rule: str | int) -> int:
    """Default rule: the median item of the bottom popularity quartile among
    items with at least one organic interaction."""
    if isinstance(rule, int):
        if not 0 <= rule < corpus.num_items:
            raise ExperimentError(f"target item {rule} out of range")
        return rule
    if rule != "bottom_quartile":
        raise ExperimentError(f"unknown target rule {rule!r}")
    counts = np.zeros(corpus.num_items, dtype=np.int64)
    for s in corpus.sessions:
        if s.origin == ORGANIC:
            for v in s.items:
                counts[v] += 1
    eligible = [(int(counts[i]), i) for i in range(corpus.num_items) if counts[i] >= 1]
    if not eligible:
        raise ExperimentError("no item has an organic interaction")
    eligible.sort()
    quartile = eligible[:max(1, len(eligible) // 4)]
    return quartile[len(quartile) // 2][1]


def _attack_seed(seed: int, attack: str, *extra: int) -> int:
    idx = {"random": 0, "gray_box": 1, "white_box": 2}[attack]
    ss = np.random.SeedSequence([seed, idx, *extra])
    return int(ss.generate_state(1)[0])


def _run_attack(attack: str, corpus: Corpus, target: int, budget: AttackBudget,
                config: ExperimentConfig, r: int, seed: int) -> MaliciousSessionSet:
    if attack == "random":
        return random_attack(corpus, target, budget, seed)
    if attack == "white_box":
        mset, _ = white_box_attack(corpus, target, budget,
                                   num_candidates=config.num_candidates, r=r, seed=seed)
        return mset
    if attack == "gray_box":
        return gray_box_attack(corpus, target, budget,
                               num_candidates=config.num_candidates,
                               visibility_pct=config.visibility_pct,
                               warmup_ratio=config.warmup_ratio, r=r, seed=seed)
    raise ExperimentError(f"unknown attack {attack!r}")


def run_budget_sweep(config: ExperimentConfig) -> MetricsReport:
    config.validate()
    corpus = build_corpus(config)
    target = select_target(corpus, config.target_rule)
    normal_users = list(range(corpus.num_users))
    organic = [s for s in corpus.sessions if s.origin == ORGANIC]
    matrix0 = build_rating_matrix(organic, corpus.num_users, corpus.num_items)
    sim0 = build_similarity(matrix0)

    pre_best, pre_target = {}, {}
    for r in config.r_values:
        ratios = item_hit_ratios(matrix0, sim0, normal_users, r)
        pre_best[r] = float(ratios.max())
        pre_target[r] = hit_ratio(matrix0, sim0, normal_users, target, r)

    rows = []
    for attack in config.attacks:
        for n_users in config.budget_grid:
            for r in config.r_values:
                for seed in config.seeds:
                    budget = AttackBudget(num_malicious_users=n_users,
                                          sessions_per_user=config.sessions_per_user,
                                          session_length=config.session_length,
                                          budget_cap=n_users * config.sessions_per_user)
                    if n_users == 0:
                        post = pre_target[r]
                        injected = 0
                    else:
                        mset = _run_attack(attack, corpus, target, budget, config, r,
                                           _attack_seed(seed, attack, n_users, r))
                        injected = len(mset.sessions)
                        extra_users = (max(s.user_id for s in mset.sessions) + 1
                                       if mset.sessions else corpus.num_users)
                        matrix = build_rating_matrix(organic + mset.sessions,
                                                     max(extra_users, corpus.num_users),
                                                     corpus.num_items)
                        sim = build_similarity(matrix)
                        post = hit_ratio(matrix, sim, normal_users, target, r)
                    rows.append({"attack": attack, "num_malicious_users": n_users,
                                 "sessions_per_user": config.sessions_per_user,
                                 "session_length": config.session_length,
                                 "injected_sessions": injected, "r": r, "seed": seed,
                                 "target": target,
                                 "pre_best_hit_ratio": pre_best[r],
                                 "pre_target_hit_ratio": pre_target[r],
                                 "post_target_hit_ratio": post})
    return MetricsReport(kind="budget_sweep", config=config.to_dict(),
                         code_version=__version__, rows=rows)


def compute_prf(ground_truth: Sequence[bool], flags: Sequence[bool]
                ) -> tuple[float | None, float | None, float | None]:
    """Precision/recall/F1 with the injected class positive; zero denominators
    yield None instead of a fabricated zero."""
    if len(ground_truth) != len(flags):
        raise ExperimentError("ground truth and flags must have equal length")
    gt = np.asarray(ground_truth, dtype=bool)
    fl = np.asarray(flags, dtype=bool)
    tp = int((gt & fl).sum())
    fp = int((~gt & fl).sum())
    fn = int((gt & ~fl).sum())
    precision = tp / (tp + fp) if tp + fp > 0 else None
    recall = tp / (tp + fn) if tp + fn > 0 else None
    f1 = None
    if precision is not None and recall is not None and precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def run_detection_sweep(config: ExperimentConfig) -> MetricsReport:
    config.validate()
    base = build_corpus(config)
    target = select_target(base, config.target_rule)
    emb = embed_items(base.items, config.embedding_dim, config.embedding_seed)
    total_sessions = len([s for s in base.sessions if s.origin == ORGANIC])

    rows = []
    for seed in config.seeds:
        corpus = split_clean_polluted(base, config.clean_fraction, seed)
        clean_train = corpus.clean_sessions()
        baseline = train_baseline(clean_train, emb, config.detector, seed, corpus=corpus)
        gan = train_gan_detector(clean_train, emb, config.detector, seed, corpus=corpus)
        polluted_organic = corpus.polluted_sessions()

        for attack in config.attacks:
            for fraction in config.injected_fractions:
                n_users = int(round(fraction * total_sessions / config.sessions_per_user))
                if n_users == 0:
                    for det_name in ("baseline", "gan"):
                        rows.append({"attack": attack, "injected_fraction": fraction,
                                     "num_malicious_users": 0, "injected_sessions": 0,
                                     "seed": seed, "detector": det_name,
                                     "tp": 0, "fp": 0, "fn": 0,
                                     "precision": None, "recall": None, "f1": None})
                    continue
                budget = AttackBudget(num_malicious_users=n_users,
                                      sessions_per_user=config.sessions_per_user,
                                      session_length=config.session_length,
                                      budget_cap=n_users * config.sessions_per_user)
                mset = _run_attack(attack, corpus, target, budget, config,
                                   config.r_values[0],
                                   _attack_seed(seed, attack, n_users))
                eval_sessions = polluted_organic + mset.sessions
                gt = [s.origin == INJECTED for s in eval_sessions]
                for det_name, results in (
                        ("baseline", baseline_classify_many(baseline, emb, eval_sessions)),
                        ("gan", gan_classify_many(gan, emb, eval_sessions))):
                    flags = [res.flagged for res in results]
                    precision, recall, f1 = compute_prf(gt, flags)
                    gt_arr = np.asarray(gt)
                    fl_arr = np.asarray(flags)
                    rows.append({"attack": attack, "injected_fraction": fraction,
                                 "num_malicious_users": n_users,
                                 "injected_sessions": len(mset.sessions),
                                 "seed": seed, "detector": det_name,
                                 "tp": int((gt_arr & fl_arr).sum()),
                                 "fp": int((~gt_arr & fl_arr).sum()),
                                 "fn": int((gt_arr & ~fl_arr).sum()),
                                 "precision": precision, "recall": recall, "f1": f1})
    return MetricsReport(kind="detection_sweep", config=config.to_dict(),
                         code_version=__version__, rows=rows)


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

def _columns_for(kind: str) -> list[str]:
    if kind == "budget_sweep":
        return BUDGET_COLUMNS
    if kind == "detection_sweep":
        return DETECTION_COLUMNS
    raise ExperimentError(f"unknown report kind {kind!r}")


def _render_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_report(report: MetricsReport, out_dir, formats: Sequence[str] = ("csv", "json")
                ) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        path = out / f"{report.kind}.csv"
        columns = _columns_for(report.kind)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            for row in report.rows:
                writer.writerow([_render_cell(row.get(c)) for c in columns])
        written.append(path)
    if "json" in formats:
        path = out / f"{report.kind}.json"
        doc = {"kind": report.kind, "config": report.config,
               "code_version": report.code_version, "rows": report.rows}
        path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        written.append(path)
    return written


def load_report(path) -> MetricsReport:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return MetricsReport(kind=doc["kind"], config=doc["config"],
                         code_version=doc["code_version"], rows=doc["rows"])
