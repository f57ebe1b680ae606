"""Session-injection attacks: random baseline, white-box, and gray-box.

The white-box attacker sees the whole corpus, picks reference items with the
best hit-ratios, and fills sessions from each reference item's co-occurrence
distribution before planting the target. The gray-box attacker only sees p%
of the sessions, spends a warm-up slice of its user budget probing the live
recommender, and mimics whatever reference items the probes surface. Among
candidate pollutions, the one whose sessions look most like organic traffic
under a first-order transition model wins.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .datasets import INJECTED, ORGANIC, SESSION_CAP, Corpus, Session
from .recommender import (RatingMatrix, SimilarityMatrix, build_rating_matrix,
                          build_similarity, item_hit_ratios)


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackBudget:
    num_malicious_users: int
    sessions_per_user: int
    session_length: int
    budget_cap: int

    def validate(self) -> None:
        if self.num_malicious_users < 0 or self.sessions_per_user < 1:
            raise AttackError("need non-negative users and >=1 session per user")
        if self.num_malicious_users * self.sessions_per_user > self.budget_cap:
            raise AttackError("user budget exceeds the session budget cap")
        if not 1 <= self.session_length <= SESSION_CAP:
            raise AttackError(f"session length must lie in [1, {SESSION_CAP}]")

    @property
    def total_sessions(self) -> int:
        return self.num_malicious_users * self.sessions_per_user


@dataclass
class MaliciousSessionSet:
    sessions: list[Session]
    target: int
    reference_item: int | None
    algorithm: str
    seed: int | None = None


@dataclass(frozen=True)
class CandidateScore:
    reference_item: int
    log_likelihood: float


# ---------------------------------------------------------------------------
# Sampling helpers
# ---------------------------------------------------------------------------

def _sample_distinct(rng: np.random.Generator, p: np.ndarray, size: int) -> list[int]:
    """Draw `size` distinct indices: sample with replacement, resample collisions."""
    if np.count_nonzero(p) < size:
        raise AttackError(f"cannot draw {size} distinct items from a support of "
                          f"{np.count_nonzero(p)}")
    cs = np.cumsum(p)
    cs /= cs[-1]
    chosen: list[int] = []
    seen: set[int] = set()
    while len(chosen) < size:
        draws = np.searchsorted(cs, rng.random(size - len(chosen)), side="right")
        for d in draws:
            d = int(min(d, p.size - 1))
            if d not in seen:
                seen.add(d)
                chosen.append(d)
    return chosen


def _fresh_user_sessions(item_lists: list[list[int]], first_user: int,
                         sessions_per_user: int) -> list[Session]:
    out = []
    for j, items in enumerate(item_lists):
        out.append(Session(user_id=first_user + j // sessions_per_user,
                           items=tuple(items), origin=INJECTED))
    return out


# ---------------------------------------------------------------------------
# Random attack
# ---------------------------------------------------------------------------

def random_attack(corpus: Corpus, target: int, budget: AttackBudget, seed: int) -> MaliciousSessionSet:
    """Sessions of uniform-random distinct items with the target planted once."""
    budget.validate()
    num_items = corpus.num_items
    if budget.session_length > num_items:
        raise AttackError("session length exceeds the item vocabulary")
    rng = np.random.default_rng(seed)
    uniform = np.ones(num_items)
    uniform[target] = 0.0
    lists = []
    for _ in range(budget.total_sessions):
        items = _sample_distinct(rng, uniform, budget.session_length - 1)
        pos = int(rng.integers(0, budget.session_length))
        items.insert(pos, target)
        lists.append(items)
    sessions = _fresh_user_sessions(lists, corpus.num_users, budget.sessions_per_user)
    return MaliciousSessionSet(sessions=sessions, target=target, reference_item=None,
                               algorithm="random", seed=seed)


# ---------------------------------------------------------------------------
# Shared white/gray machinery
# ---------------------------------------------------------------------------

def top_hit_ratio_items(matrix: RatingMatrix, sim: SimilarityMatrix,
                        normal_users: Sequence[int], r: int, count: int) -> list[int]:
    """The `count` items with the highest hit-ratios, ties by ascending id."""
    if count < 1:
        raise AttackError("count must be >= 1")
    ratios = item_hit_ratios(matrix, sim, normal_users, r)
    ids = np.arange(matrix.num_items)
    order = np.lexsort((ids, -ratios))
    return [int(v) for v in order[:count]]


def interaction_distribution(sessions: Sequence[Session], num_items: int,
                             reference_item: int) -> np.ndarray:
    """Categorical over items co-occurring with the reference item.

    Probability of item j is proportional to the number of sessions containing
    both j and the reference item, plus one (add-one smoothing keeps the
    support full); the reference item itself is excluded and the rest
    renormalized.
    """
    if not 0 <= reference_item < num_items:
        raise AttackError(f"reference item {reference_item} out of range")
    weights = np.ones(num_items, dtype=np.float64)
    for s in sessions:
        uniq = set(s.items)
        if reference_item in uniq:
            for j in uniq:
                if j != reference_item:
                    weights[j] += 1.0
    weights[reference_item] = 0.0
    return weights / weights.sum()


@dataclass
class TransitionModel:
    """First-order item-transition counts with add-one smoothing at query time."""
    num_items: int
    pair_counts: dict[tuple[int, int], int]
    row_totals: np.ndarray

    def log_prob(self, i: int, j: int) -> float:
        c = self.pair_counts.get((i, j), 0)
        return math.log((c + 1.0) / (self.row_totals[i] + self.num_items))


def fit_transition_model(sessions: Sequence[Session], num_items: int) -> TransitionModel:
    pairs: dict[tuple[int, int], int] = {}
    totals = np.zeros(num_items, dtype=np.float64)
    for s in sessions:
        for a, b in zip(s.items, s.items[1:]):
            pairs[(a, b)] = pairs.get((a, b), 0) + 1
            totals[a] += 1.0
    return TransitionModel(num_items=num_items, pair_counts=pairs, row_totals=totals)


def _mean_transition_loglik(model: TransitionModel, item_lists: Sequence[Sequence[int]]) -> float:
    total, n = 0.0, 0
    for items in item_lists:
        for a, b in zip(items, items[1:]):
            total += model.log_prob(a, b)
            n += 1
    return total / n if n else 0.0


def score_candidate(injected_sessions: Sequence[Session], corpus: Corpus) -> float:
    """Mean per-transition log-likelihood of injected sessions under a
    transition model fit on the corpus's organic sessions. Higher means the
    pollution blends in better; an empty set scores 0.
    """
    organic = [s for s in corpus.sessions if s.origin == ORGANIC]
    model = fit_transition_model(organic, corpus.num_items)
    return _mean_transition_loglik(model, [s.items for s in injected_sessions])


def _build_candidate_sessions(rng: np.random.Generator, dist: np.ndarray, target: int,
                              num_sessions: int, session_length: int) -> list[list[int]]:
    """Alg. 1 construction: draw a distinct-item session from the reference
    distribution, then replace a uniform-random position with the target."""
    p = dist.copy()
    p[target] = 0.0
    total = p.sum()
    if total <= 0.0:
        raise AttackError("reference distribution has no support besides the target")
    p /= total
    lists = []
    for _ in range(num_sessions):
        items = _sample_distinct(rng, p, session_length)
        pos = int(rng.integers(0, session_length))
        items[pos] = target
        lists.append(items)
    return lists


def _select_candidate(scored: list[tuple[int, list[list[int]]]],
                      model: TransitionModel) -> tuple[int, list[list[int]], list[CandidateScore]]:
    scores = [CandidateScore(reference_item=b, log_likelihood=_mean_transition_loglik(model, lists))
              for b, lists in scored]
    best = min(range(len(scores)),
               key=lambda k: (-scores[k].log_likelihood, scores[k].reference_item))
    return scored[best][0], scored[best][1], scores


# ---------------------------------------------------------------------------
# White-box attack (full data and recommender knowledge)
# ---------------------------------------------------------------------------

def white_box_attack(corpus: Corpus, target: int, budget: AttackBudget,
                     num_candidates: int = 5, r: int = 10,
                     seed: int = 0) -> tuple[MaliciousSessionSet, list[CandidateScore]]:
    budget.validate()
    if num_candidates < 1:
        raise AttackError("need at least one candidate reference item")
    if budget.session_length > corpus.num_items - 1:
        raise AttackError("session length exceeds the non-target vocabulary")

    organic = [s for s in corpus.sessions if s.origin == ORGANIC]
    matrix = build_rating_matrix(organic, corpus.num_users, corpus.num_items)
    sim = build_similarity(matrix)
    refs = top_hit_ratio_items(matrix, sim, range(corpus.num_users), r, num_candidates)
    model = fit_transition_model(organic, corpus.num_items)

    children = np.random.SeedSequence(seed).spawn(len(refs))
    scored = []
    for b, child in zip(refs, children):
        rng = np.random.default_rng(child)
        dist = interaction_distribution(organic, corpus.num_items, b)
        lists = _build_candidate_sessions(rng, dist, target,
                                          budget.total_sessions, budget.session_length)
        scored.append((b, lists))
    best_b, best_lists, scores = _select_candidate(scored, model)
    sessions = _fresh_user_sessions(best_lists, corpus.num_users, budget.sessions_per_user)
    return (MaliciousSessionSet(sessions=sessions, target=target, reference_item=best_b,
                                algorithm="white_box", seed=seed), scores)


# ---------------------------------------------------------------------------
# Gray-box attack (p% data visibility, warm-up probing)
# ---------------------------------------------------------------------------

def gray_box_attack(corpus: Corpus, target: int, budget: AttackBudget,
                    num_candidates: int = 5, visibility_pct: float = 10.0,
                    warmup_ratio: float = 0.2, r: int = 10,
                    seed: int = 0) -> MaliciousSessionSet:
    budget.validate()
    if not 0.0 < visibility_pct <= 100.0:
        raise AttackError("visibility percentage must lie in (0, 100]")
    if not 0.0 < warmup_ratio < 1.0:
        raise AttackError("warm-up ratio must lie in (0, 1)")
    if budget.session_length > corpus.num_items - 1:
        raise AttackError("session length exceeds the non-target vocabulary")
    n_warm = math.ceil(warmup_ratio * budget.num_malicious_users)
    n_attack = budget.num_malicious_users - n_warm
    if n_warm < 1 or n_attack < 1:
        raise AttackError("budget too small for at least one warm-up and one attack user")

    children = np.random.SeedSequence(seed).spawn(2 + num_candidates)
    rng_sample = np.random.default_rng(children[0])
    rng_warm = np.random.default_rng(children[1])

    organic = [s for s in corpus.sessions if s.origin == ORGANIC]
    n_visible = max(1, round(visibility_pct / 100.0 * len(organic)))
    idx = np.sort(rng_sample.choice(len(organic), size=n_visible, replace=False))
    visible = [organic[int(i)] for i in idx]

    # Warm-up users interact "normally": popularity-weighted sessions from the
    # visible data, never touching the target.
    popularity = np.zeros(corpus.num_items, dtype=np.float64)
    for s in visible:
        for v in s.items:
            popularity[v] += 1.0
    popularity[target] = 0.0
    if popularity.sum() == 0.0:
        popularity = np.ones(corpus.num_items)
        popularity[target] = 0.0
    popularity /= popularity.sum()

    warm_lists = [_sample_distinct(rng_warm, popularity, budget.session_length)
                  for _ in range(n_warm * budget.sessions_per_user)]
    warm_sessions = _fresh_user_sessions(warm_lists, corpus.num_users, budget.sessions_per_user)
    warm_ids = list(range(corpus.num_users, corpus.num_users + n_warm))

    approx_matrix = build_rating_matrix(list(visible) + warm_sessions,
                                        corpus.num_users + n_warm, corpus.num_items)
    approx_sim = build_similarity(approx_matrix)
    refs = top_hit_ratio_items(approx_matrix, approx_sim, warm_ids, r, num_candidates)

    model = fit_transition_model(visible, corpus.num_items)
    scored = []
    for b, child in zip(refs, children[2:]):
        rng = np.random.default_rng(child)
        dist = interaction_distribution(visible, corpus.num_items, b)
        lists = _build_candidate_sessions(rng, dist, target,
                                          n_attack * budget.sessions_per_user,
                                          budget.session_length)
        scored.append((b, lists))
    best_b, best_lists, _ = _select_candidate(scored, model)
    sessions = _fresh_user_sessions(best_lists, corpus.num_users, budget.sessions_per_user)
    return MaliciousSessionSet(sessions=sessions, target=target, reference_item=best_b,
                               algorithm="gray_box", seed=seed)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def attack_to_json(mset: MaliciousSessionSet) -> dict:
    return {
        "target": mset.target,
        "algorithm": mset.algorithm,
        "seed": mset.seed,
        "reference_item": mset.reference_item,
        "sessions": [list(s.items) for s in mset.sessions],
    }


def save_attack(mset: MaliciousSessionSet, path) -> None:
    Path(path).write_text(json.dumps(attack_to_json(mset), sort_keys=True), encoding="utf-8")
