"""Session corpora: Instacart ingestion, synthetic generation, clean/polluted splits.

A corpus is the ground-truth world: items with text features, user sessions
(ordered item interactions), and a per-user clean/polluted partition. Origin
labels (organic vs injected) live on sessions and are used for evaluation
only, never by detectors at inference time.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

# Max items kept per session; longer ingested orders are truncated.
SESSION_CAP = 50

ORGANIC = "organic"
INJECTED = "injected"
CLEAN = "clean"
POLLUTED = "polluted"

# Within-cluster popularity decay for the synthetic generator.
ZIPF_EXPONENT = 1.0


class CorpusError(ValueError):
    """Raised for malformed input files or invariant violations."""


@dataclass(frozen=True)
class Item:
    id: int
    text: str


@dataclass(frozen=True)
class Session:
    user_id: int
    items: tuple[int, ...]
    origin: str = ORGANIC


@dataclass
class Corpus:
    items: list[Item]
    sessions: list[Session]
    num_users: int
    partition: dict[int, str]
    # Original external ids, kept only for ingested corpora.
    user_id_map: dict[int, int] = field(default_factory=dict)
    item_id_map: dict[int, int] = field(default_factory=dict)

    @property
    def num_items(self) -> int:
        return len(self.items)

    def clean_sessions(self) -> list[Session]:
        return [s for s in self.sessions if self.partition[s.user_id] == CLEAN]

    def polluted_sessions(self) -> list[Session]:
        return [s for s in self.sessions if self.partition[s.user_id] == POLLUTED]

    def validate(self) -> None:
        ids = [it.id for it in self.items]
        if ids != list(range(len(ids))):
            raise CorpusError("item ids must be dense 0..|V|-1")
        if set(self.partition) != set(range(self.num_users)):
            raise CorpusError("partition must cover exactly users 0..|U|-1")
        for s in self.sessions:
            if not 0 <= s.user_id < self.num_users:
                raise CorpusError(f"session user {s.user_id} out of range")
            if not 1 <= len(s.items) <= SESSION_CAP:
                raise CorpusError(f"session length {len(s.items)} outside [1, {SESSION_CAP}]")
            if any(not 0 <= v < len(ids) for v in s.items):
                raise CorpusError("session references unknown item")
            if s.origin == INJECTED and self.partition[s.user_id] == CLEAN:
                raise CorpusError("injected session under a clean user")


@dataclass(frozen=True)
class SyntheticConfig:
    num_users: int
    num_items: int
    num_sessions: int
    session_len_range: tuple[int, int]
    num_clusters: int
    cluster_skew: float
    seed: int

    def validate(self) -> None:
        lo, hi = self.session_len_range
        if min(self.num_users, self.num_items, self.num_sessions, self.num_clusters) <= 0:
            raise CorpusError("all synthetic counts must be positive")
        if not 1 <= lo <= hi <= SESSION_CAP:
            raise CorpusError(f"session_len_range must satisfy 1 <= min <= max <= {SESSION_CAP}")
        if not 0.0 < self.cluster_skew <= 1.0:
            raise CorpusError("cluster_skew must lie in (0, 1]")


# ---------------------------------------------------------------------------
# Instacart ingestion
# ---------------------------------------------------------------------------

def _read_csv_rows(path, required: tuple[str, ...]):
    """Yield (line_number, row_dict), enforcing the required header columns."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise CorpusError(f"{path}: empty file, header row required")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise CorpusError(f"{path}: missing required columns {missing}")
        for row in reader:
            yield reader.line_num, row


def _parse_int(path, line_num: int, row: dict, col: str) -> int:
    raw = row.get(col)
    if raw is None:
        raise CorpusError(f"{path}:{line_num}: missing field {col!r}")
    try:
        return int(raw)
    except ValueError:
        raise CorpusError(f"{path}:{line_num}: field {col!r}={raw!r} is not an integer") from None


def ingest_instacart(orders_path, order_products_path, products_path,
                     session_cap: int = SESSION_CAP) -> Corpus:
    """Build a corpus from Instacart-style CSV dumps, one session per order.

    Items within a session follow add-to-cart position; users and items are
    re-indexed densely (original ids retained in the corpus side maps).
    """
    products: dict[int, str] = {}
    for ln, row in _read_csv_rows(products_path, ("product_id", "product_name")):
        pid = _parse_int(products_path, ln, row, "product_id")
        products[pid] = row.get("product_name") or ""

    order_user: dict[int, int] = {}
    for ln, row in _read_csv_rows(orders_path, ("order_id", "user_id")):
        oid = _parse_int(orders_path, ln, row, "order_id")
        order_user[oid] = _parse_int(orders_path, ln, row, "user_id")

    order_items: dict[int, list[tuple[int, int]]] = {}
    for ln, row in _read_csv_rows(order_products_path,
                                  ("order_id", "product_id", "add_to_cart_order")):
        oid = _parse_int(order_products_path, ln, row, "order_id")
        pid = _parse_int(order_products_path, ln, row, "product_id")
        pos = _parse_int(order_products_path, ln, row, "add_to_cart_order")
        if pid not in products:
            raise CorpusError(f"{order_products_path}:{ln}: unknown product id {pid}")
        if oid not in order_user:
            raise CorpusError(f"{order_products_path}:{ln}: unknown order id {oid}")
        order_items.setdefault(oid, []).append((pos, pid))

    item_index = {pid: i for i, pid in enumerate(sorted(products))}
    user_index = {uid: i for i, uid in enumerate(sorted(set(order_user.values())))}

    sessions = []
    for oid in sorted(order_items):
        pairs = sorted(order_items[oid], key=lambda t: t[0])
        items = tuple(item_index[pid] for _, pid in pairs)[:session_cap]
        sessions.append(Session(user_id=user_index[order_user[oid]], items=items))

    num_users = len(user_index)
    return Corpus(
        items=[Item(id=i, text=products[pid]) for pid, i in sorted(item_index.items(), key=lambda t: t[1])],
        sessions=sessions,
        num_users=num_users,
        partition={u: CLEAN for u in range(num_users)},
        user_id_map={v: k for k, v in user_index.items()},
        item_id_map={v: k for k, v in item_index.items()},
    )


# ---------------------------------------------------------------------------
# Clean / polluted split
# ---------------------------------------------------------------------------

def split_clean_polluted(corpus: Corpus, clean_fraction: float, seed: int) -> Corpus:
    """Assign each user to the clean or polluted side, uniformly at random.

    Exactly round(clean_fraction * |U|) users land on the clean side; the
    assignment is a pure function of (corpus, clean_fraction, seed).
    """
    if not 0.0 < clean_fraction < 1.0:
        raise CorpusError("clean_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(corpus.num_users)
    n_clean = int(math.floor(clean_fraction * corpus.num_users + 0.5))
    clean_set = set(int(u) for u in order[:n_clean])
    partition = {u: (CLEAN if u in clean_set else POLLUTED) for u in range(corpus.num_users)}
    return replace(corpus, partition=partition)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

def synthetic_item_clusters(config: SyntheticConfig) -> np.ndarray:
    """Cluster id of each item (contiguous blocks)."""
    block = -(-config.num_items // config.num_clusters)
    return np.arange(config.num_items) // block


def synthetic_user_cluster(config: SyntheticConfig, user_id: int) -> int:
    """Home cluster a user's sessions are drawn around."""
    return user_id % config.num_clusters


def _item_text(item_id: int, cluster: int, tier: int) -> str:
    words = [f"topic{cluster}core", f"topic{cluster}ware", f"topic{cluster}line",
             f"brand{cluster}t{tier}", f"item{item_id:05d}"]
    return " ".join(words)


def generate_synthetic(config: SyntheticConfig) -> Corpus:
    """Generate a cluster-structured corpus with popularity-skewed sessions.

    Items split into topic clusters; each pick within a session stays in the
    session's cluster with probability cluster_skew and otherwise falls back
    to a global popularity draw. Item text carries cluster and popularity-tier
    tokens so text embeddings reflect the cluster geometry.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    clusters = synthetic_item_clusters(config)
    n_items = config.num_items
    n_clusters = config.num_clusters

    # Per-cluster Zipf popularity over within-cluster rank.
    weights = np.zeros(n_items)
    tiers = np.zeros(n_items, dtype=int)
    cluster_members: list[np.ndarray] = []
    for c in range(n_clusters):
        members = np.where(clusters == c)[0]
        cluster_members.append(members)
        if members.size == 0:
            continue
        ranks = np.arange(members.size)
        weights[members] = 1.0 / (ranks + 1.0) ** ZIPF_EXPONENT
        tiers[members] = np.minimum(3, 4 * ranks // max(1, members.size))
    global_p = weights / weights.sum()
    cluster_p = [weights[m] / weights[m].sum() if m.size else np.zeros(0) for m in cluster_members]

    items = [Item(id=i, text=_item_text(i, int(clusters[i]), int(tiers[i]))) for i in range(n_items)]

    lo, hi = config.session_len_range
    users = rng.integers(0, config.num_users, size=config.num_sessions)
    lengths = rng.integers(lo, hi + 1, size=config.num_sessions)
    sessions = []
    for u, k in zip(users, lengths):
        c = synthetic_user_cluster(config, int(u))
        members = cluster_members[c]
        picks = np.empty(int(k), dtype=int)
        stay = rng.random(int(k)) < config.cluster_skew
        for j in range(int(k)):
            if stay[j] and members.size:
                picks[j] = members[_draw(rng, cluster_p[c])]
            else:
                picks[j] = _draw(rng, global_p)
        sessions.append(Session(user_id=int(u), items=tuple(int(v) for v in picks)))

    return Corpus(
        items=items,
        sessions=sessions,
        num_users=config.num_users,
        partition={u: CLEAN for u in range(config.num_users)},
    )


def _draw(rng: np.random.Generator, p: np.ndarray) -> int:
    """Categorical draw via inverse CDF (stable across numpy versions)."""
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    return min(idx, p.size - 1)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_corpus(corpus: Corpus, path) -> None:
    doc = {
        "num_users": corpus.num_users,
        "items": [[it.id, it.text] for it in corpus.items],
        "sessions": [[s.user_id, list(s.items), s.origin] for s in corpus.sessions],
        "partition": {str(u): side for u, side in sorted(corpus.partition.items())},
        "user_id_map": {str(k): v for k, v in sorted(corpus.user_id_map.items())},
        "item_id_map": {str(k): v for k, v in sorted(corpus.item_id_map.items())},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_corpus(path) -> Corpus:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    corpus = Corpus(
        items=[Item(id=i, text=t) for i, t in doc["items"]],
        sessions=[Session(user_id=u, items=tuple(v), origin=o) for u, v, o in doc["sessions"]],
        num_users=doc["num_users"],
        partition={int(u): side for u, side in doc["partition"].items()},
        user_id_map={int(k): v for k, v in doc.get("user_id_map", {}).items()},
        item_id_map={int(k): v for k, v in doc.get("item_id_map", {}).items()},
    )
    corpus.validate()
    return corpus
