"""Item-based collaborative filtering over implicit counts.

Ratings are raw interaction counts, item-item similarity is column cosine
over the user axis, and a user's recommendations are the top-r unrated items
scored by similarity-weighted counts. Hit-ratio measures how often a target
item shows up in normal users' top-r lists.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .datasets import Session


class RecommenderError(ValueError):
    pass


@dataclass
class RatingMatrix:
    counts: sparse.csr_matrix  # (num_users, num_items), int64 counts >= 1
    num_users: int
    num_items: int

    def get(self, user: int, item: int) -> int:
        return int(self.counts[user, item])

    def user_counts(self, user: int) -> np.ndarray:
        return np.asarray(self.counts.getrow(user).todense()).ravel()


@dataclass
class SimilarityMatrix:
    sim: sparse.csr_matrix  # (num_items, num_items), symmetric, values in [0, 1]
    num_items: int

    def get(self, i: int, j: int) -> float:
        return float(self.sim[i, j])

    def entries(self) -> Iterable[tuple[int, int, float]]:
        coo = self.sim.tocoo()
        yield from zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist())


def build_rating_matrix(sessions: Sequence[Session], num_users: int, num_items: int) -> RatingMatrix:
    """q(u, i) = number of interactions of user u with item i, duplicates included."""
    users, items = [], []
    for s in sessions:
        users.extend([s.user_id] * len(s.items))
        items.extend(s.items)
    data = np.ones(len(users), dtype=np.int64)
    counts = sparse.csr_matrix((data, (users, items)), shape=(num_users, num_items), dtype=np.int64)
    counts.sum_duplicates()
    return RatingMatrix(counts=counts, num_users=num_users, num_items=num_items)


def cosine_similarity(matrix: RatingMatrix, i: int, j: int) -> float:
    """Cosine between item columns i and j; 0 if either column is all-zero."""
    col_i = np.asarray(matrix.counts.getcol(i).todense(), dtype=np.float64).ravel()
    col_j = np.asarray(matrix.counts.getcol(j).todense(), dtype=np.float64).ravel()
    ni = np.sqrt(np.dot(col_i, col_i))
    nj = np.sqrt(np.dot(col_j, col_j))
    if ni == 0.0 or nj == 0.0:
        return 0.0
    return float(np.dot(col_i, col_j) / (ni * nj))


def build_similarity(matrix: RatingMatrix) -> SimilarityMatrix:
    """Cosine similarity for every co-rated item pair; omitted pairs are 0."""
    counts = matrix.counts.astype(np.float64).tocsc()
    gram = (counts.T @ counts).tocoo()
    norms = np.sqrt(np.asarray(counts.multiply(counts).sum(axis=0)).ravel())
    denom = norms[gram.row] * norms[gram.col]
    vals = np.minimum(gram.data / denom, 1.0)
    vals[gram.row == gram.col] = 1.0
    sim = sparse.csr_matrix((vals, (gram.row, gram.col)),
                            shape=(matrix.num_items, matrix.num_items))
    return SimilarityMatrix(sim=sim, num_items=matrix.num_items)


def _score_users(matrix: RatingMatrix, sim: SimilarityMatrix, users: Sequence[int]) -> np.ndarray:
    """Dense (len(users), num_items) scores: score(u, j) = sum_i CS(i, j) q(i, u)."""
    sub = matrix.counts[list(users), :].astype(np.float64)
    return np.asarray((sub @ sim.sim).todense())


def _top_r_from_scores(q_row: np.ndarray, scores: np.ndarray, r: int) -> list[int]:
    cand = np.where((q_row == 0) & (scores > 0.0))[0]
    if cand.size == 0:
        return []
    order = np.lexsort((cand, -scores[cand]))
    return [int(v) for v in cand[order][:r]]


def recommend(matrix: RatingMatrix, sim: SimilarityMatrix, user: int, r: int) -> list[int]:
    """Top-r unrated items for a user, scored by similarity-weighted counts.

    Ties break by ascending item id; zero-score items are excluded. A user
    with no ratings gets an empty list.
    """
    q_row = matrix.user_counts(user)
    if not np.any(q_row):
        return []
    scores = _score_users(matrix, sim, [user])[0]
    return _top_r_from_scores(q_row, scores, r)


def all_top_r(matrix: RatingMatrix, sim: SimilarityMatrix,
              users: Sequence[int], r: int) -> list[list[int]]:
    """recommend() for many users at once (single sparse matmul)."""
    scores = _score_users(matrix, sim, users)
    sub = matrix.counts[list(users), :]
    out = []
    for k in range(len(users)):
        q_row = np.asarray(sub.getrow(k).todense()).ravel()
        out.append(_top_r_from_scores(q_row, scores[k], r) if q_row.any() else [])
    return out


def hit_ratio(matrix: RatingMatrix, sim: SimilarityMatrix, normal_users: Sequence[int],
              target: int, r: int) -> float:
    """Fraction of normal users whose top-r list contains the target item."""
    if len(normal_users) == 0:
        raise RecommenderError("hit_ratio needs at least one normal user")
    if not 0 <= target < matrix.num_items:
        raise RecommenderError(f"target item {target} out of range")
    scores = _score_users(matrix, sim, normal_users)
    sub = matrix.counts[list(normal_users), :]
    hits = 0
    ids = np.arange(matrix.num_items)
    for k in range(len(normal_users)):
        q_row = np.asarray(sub.getrow(k).todense()).ravel()
        s = scores[k]
        if q_row[target] != 0 or s[target] <= 0.0:
            continue
        cand_mask = (q_row == 0) & (s > 0.0)
        better = cand_mask & ((s > s[target]) | ((s == s[target]) & (ids < target)))
        if int(better.sum()) < r:
            hits += 1
    return hits / len(normal_users)


def item_hit_ratios(matrix: RatingMatrix, sim: SimilarityMatrix,
                    normal_users: Sequence[int], r: int) -> np.ndarray:
    """Hit-ratio of every item in one pass over the users' top-r lists."""
    if len(normal_users) == 0:
        raise RecommenderError("item_hit_ratios needs at least one normal user")
    counts = np.zeros(matrix.num_items, dtype=np.int64)
    for top in all_top_r(matrix, sim, normal_users, r):
        counts[top] += 1
    return counts / len(normal_users)


@dataclass
class RecommendationTable:
    r: int
    lists: dict[int, list[int]]


def build_recommendation_table(matrix: RatingMatrix, sim: SimilarityMatrix,
                               users: Sequence[int], r: int) -> RecommendationTable:
    tops = all_top_r(matrix, sim, users, r)
    return RecommendationTable(r=r, lists={int(u): top for u, top in zip(users, tops)})


def export_recommendations(table: RecommendationTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user_id", "rank", "item_id"])
        for user in sorted(table.lists):
            for rank, item in enumerate(table.lists[user], start=1):
                writer.writerow([user, rank, item])
