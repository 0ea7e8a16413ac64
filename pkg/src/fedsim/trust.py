"""Per-cluster voting trust and trust-weighted aggregation.

Trust is built from vote counts rather than raw similarity values: within
each cluster every member nominates its k nearest peers, so colluders who
submit near-identical updates gain at most one vote from each accomplice
per cluster, however high their mutual similarity. Vote totals pass
through a softmax into per-round trust, which is discounted into a running
score; clients scoring below the previous round's median are dropped for a
round before the surviving updates are averaged direction-wise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Sequence, Set

import numpy as np

from .errors import ConfigError, ShapeError
from .model import ModelParams, ModelUpdate

ZERO_NORM_EPS = 1e-12


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Standard cosine; degenerate (near-zero) vectors score 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"vector lengths differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < ZERO_NORM_EPS or nb < ZERO_NORM_EPS:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def similarity_matrix(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Pairwise cosine matrix for the given per-client vectors."""
    k = len(vectors)
    S = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            S[i, j] = S[j, i] = cosine_similarity(vectors[i], vectors[j])
        if np.linalg.norm(vectors[i]) < ZERO_NORM_EPS:
            S[i, i] = 0.0
    return S


def cluster_votes(
    x: np.ndarray, vectors: Sequence[np.ndarray], k_vote: int
) -> np.ndarray:
    """Total nearest-neighbour votes per client over all clusters.

    `x` is the cluster assignment (clusters by rows) over exactly the
    clients whose vectors are supplied, column-aligned. In each cluster,
    every member votes for its most similar peers; the vote budget is
    k_vote, reduced to floor(members/2) in clusters smaller than the
    target size so that votes stay selective (never one vote for every
    peer in clusters of three or more). Similarity ties break toward the
    lower column index. Clusters with fewer than two members cast no
    votes.
    """
    if k_vote < 1:
        raise ConfigError("k_vote must be >= 1")
    x = np.asarray(x, dtype=np.uint8)
    if x.ndim != 2 or x.shape[1] != len(vectors):
        raise ShapeError("assignment columns must match the vector list")
    votes = np.zeros(x.shape[1], dtype=np.int64)
    for row in x:
        members = np.flatnonzero(row)
        if members.size < 2:
            continue
        S = similarity_matrix([vectors[j] for j in members])
        take = max(1, min(k_vote, members.size // 2))
        for a in range(members.size):
            sims = S[a].copy()
            sims[a] = -np.inf
            # stable sort on (-similarity, index): ties go to the lower index
            order = np.lexsort((np.arange(members.size), -sims))
            for b in order[:take]:
                votes[members[b]] += 1
    return votes


def immediate_trust(K: np.ndarray) -> np.ndarray:
    """Softmax of vote counts; sums to one over the round's clients."""
    K = np.asarray(K, dtype=np.float64)
    z = K - K.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass
class TrustLedger:
    """Per-client voting and trust state carried across rounds.

    `accumulated_raw` holds the undiscounted-sum recursion acc <- gamma*acc
    + T_now for selected clients (frozen while unselected); `accumulated`
    is its per-round normalized snapshot used as aggregation weights.
    `immediate_history` keeps each round's (client -> immediate trust) map
    for the next round's median discard.
    """

    num_clients: int
    gamma: float = 0.1
    votes: np.ndarray = field(init=False)
    immediate: np.ndarray = field(init=False)
    accumulated_raw: np.ndarray = field(init=False)
    accumulated: np.ndarray = field(init=False)
    immediate_history: List[Dict[int, float]] = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ConfigError("gamma must lie strictly between 0 and 1")
        self.votes = np.zeros(self.num_clients, dtype=np.int64)
        self.immediate = np.zeros(self.num_clients)
        self.accumulated_raw = np.zeros(self.num_clients)
        self.accumulated = np.zeros(self.num_clients)

    def previous_immediate(self) -> Dict[int, float]:
        """Last round's immediate-trust map (empty before the first round)."""
        return self.immediate_history[-1] if self.immediate_history else {}

    def update(self, selected: Sequence[int], K_selected: np.ndarray) -> np.ndarray:
        """Record a round's votes; returns normalized accumulated trust per selected client."""
        selected = list(selected)
        if len(selected) != len(K_selected):
            raise ShapeError("selected ids and vote counts disagree on length")
        T_now = immediate_trust(np.asarray(K_selected))
        for cid, k, t in zip(selected, K_selected, T_now):
            self.votes[cid] = int(k)
            self.immediate[cid] = float(t)
        self.immediate_history.append({cid: float(t) for cid, t in zip(selected, T_now)})
        return accumulate_trust(self, T_now, selected)


def accumulate_trust(
    ledger: TrustLedger, T_now: np.ndarray, selected: Sequence[int]
) -> np.ndarray:
    """Discounted running trust for the selected clients, normalized to sum to one.

    Equivalent to normalizing sum_s gamma^(t-s) T^s for clients selected in
    every round; unselected clients keep their stored value untouched.
    """
    selected = list(selected)
    T_now = np.asarray(T_now, dtype=np.float64)
    if len(selected) != T_now.size:
        raise ShapeError("selected ids and trust values disagree on length")
    for cid, t in zip(selected, T_now):
        ledger.accumulated_raw[cid] = ledger.gamma * ledger.accumulated_raw[cid] + t
    raw = ledger.accumulated_raw[selected]
    total = raw.sum()
    normalized = raw / total if total > 0 else np.full(len(selected), 1.0 / len(selected))
    for cid, v in zip(selected, normalized):
        ledger.accumulated[cid] = float(v)
    return normalized


def median_discard(
    prev_immediate: Mapping[int, float], selected: Iterable[int]
) -> Set[int]:
    """Currently selected clients whose last-round trust fell strictly below the median.

    Clients absent from the previous round's map are never discarded.
    """
    if not prev_immediate:
        return set()
    median = float(np.median(list(prev_immediate.values())))
    return {
        cid
        for cid in selected
        if cid in prev_immediate and prev_immediate[cid] < median
    }


def aggregate(
    theta: ModelParams,
    updates: Sequence[ModelUpdate],
    trust: Sequence[float],
    lr_server: float,
    toward_clients: bool = True,
) -> ModelParams:
    """Trust-weighted average of direction-normalized updates applied to the global model.

    Each update is scaled to unit norm first so magnitude boosting buys an
    attacker nothing; zero-norm updates are skipped. `toward_clients`
    selects the convergent sign (global model moves toward the clients');
    False applies the raw update-subtracting rule instead.
    """
    if len(updates) != len(trust):
        raise ShapeError("updates and trust weights disagree on length")
    if any(t < 0 for t in trust):
        raise ConfigError("trust weights must be >= 0")
    step = np.zeros_like(theta.flat)
    for upd, t in zip(updates, trust):
        norm = np.linalg.norm(upd.delta)
        if norm < ZERO_NORM_EPS:
            continue
        step += t * upd.delta / norm
    sign = 1.0 if toward_clients else -1.0
    return ModelParams(theta.flat + sign * lr_server * step, list(theta.shapes))
