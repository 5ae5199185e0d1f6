"""
Evaluation Service.
Embedding quality (activity intrusion, diagnosis clustering) and prediction
quality (next-day Recall@k, remaining-LOS RMSE) with their baselines.
All functions are pure given their inputs and seed.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import bootstrap

from services import tensor_core as tc
from services.corpus import Cohort, VisitRecord
from services.errors import InputError, NumericalError

logger = logging.getLogger(__name__)

SET_SIZE = 6
N_NEIGHBOURS = 5
RECALL_KS = (5, 10, 20)
DIAGNOSIS_MODES = ("day_mean", "first_day", "flatten_pad")


# ---------------------------------------------------------------------------
# distances and intrusion
# ---------------------------------------------------------------------------

def pairwise_euclidean(vectors) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise ValueError(f"expected a 2-D array of vectors, got shape {vectors.shape}")
    if vectors.shape[0] < 2:
        raise ValueError("need at least two vectors")
    return cdist(vectors, vectors, metric="euclidean")


def ranked_by_distance(distances: np.ndarray, anchor: int) -> np.ndarray:
    """Ids ordered by distance to `anchor`, ties broken by lower id; anchor excluded."""
    row = distances[anchor]
    order = np.lexsort((np.arange(row.shape[0]), row))
    return order[order != anchor]


@dataclass(frozen=True)
class IntrusionSet:
    anchor: int
    neighbours: Tuple[int, ...]
    intruder: int
    pick: Optional[int] = None

    @property
    def members(self) -> Tuple[int, ...]:
        return self.neighbours + (self.intruder,)


def build_intrusion_sets(embeddings, n_sets: int, seed: int = 0) -> List[IntrusionSet]:
    """
    Anchor sampled uniformly (with replacement); its five nearest activities
    plus one intruder drawn from the farthest half.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n = embeddings.shape[0]
    if n < 2 * SET_SIZE:
        raise InputError(f"Intrusion sets need at least {2 * SET_SIZE} activities, got {n}")
    if n_sets <= 0:
        return []
    distances = pairwise_euclidean(embeddings)
    rng = np.random.default_rng(seed)
    n_far = math.ceil(n / 2)
    sets = []
    for anchor in rng.integers(n, size=n_sets):
        ranked = ranked_by_distance(distances, int(anchor))
        neighbours = tuple(int(i) for i in ranked[:N_NEIGHBOURS])
        row = distances[anchor]
        farthest = np.lexsort((np.arange(n), -row))[:n_far]
        members = neighbours + (int(anchor),)
        farthest = farthest[~np.isin(farthest, members)]
        if farthest.size == 0:
            # equidistant activities: the farthest half is the set itself
            logger.debug(f"No far activity for anchor {anchor}; drawing from all non-members")
            farthest = np.setdiff1d(np.arange(n), members)
        sets.append(IntrusionSet(int(anchor), neighbours, int(rng.choice(farthest))))
    return sets


def oracle_pick(members: Sequence[int], labels: np.ndarray, embeddings: np.ndarray) -> int:
    """
    The member whose cluster differs from the strict plurality of the other five;
    with zero or several such members, the candidate farthest from the set centroid.
    """
    members = list(members)
    candidates = []
    for i, m in enumerate(members):
        others = [labels[o] for j, o in enumerate(members) if j != i]
        values, counts = np.unique(others, return_counts=True)
        top = counts.max()
        majority = values[counts == top]
        if len(majority) > 1 or labels[m] != majority[0]:
            candidates.append(m)
    if len(candidates) == 1:
        return candidates[0]
    pool = candidates or members
    centroid = embeddings[members].mean(axis=0)
    gaps = np.linalg.norm(embeddings[pool] - centroid, axis=1)
    return pool[int(np.argmax(gaps))]


def intrusion_precision_oracle(sets: Sequence[IntrusionSet], labels, embeddings) -> float:
    """Fraction of sets where the oracle picks the designated intruder."""
    labels = np.asarray(labels)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if not sets:
        return 0.0
    hits = sum(oracle_pick(s.members, labels, embeddings) == s.intruder for s in sets)
    return hits / len(sets)


@dataclass
class IntrusionReport:
    precision: float
    control_precision: float
    n_sets: int
    sets: List[IntrusionSet] = field(default_factory=list, repr=False)


def evaluate_intrusion(embeddings, labels, n_sets: int = 500, seed: int = 0) -> IntrusionReport:
    """Oracle precision plus the same oracle judging with shuffled cluster labels."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    sets = build_intrusion_sets(embeddings, n_sets, seed)
    picked = [
        IntrusionSet(s.anchor, s.neighbours, s.intruder, oracle_pick(s.members, labels, embeddings))
        for s in sets
    ]
    shuffled = np.random.default_rng([seed, 1]).permutation(labels)
    return IntrusionReport(
        precision=intrusion_precision_oracle(sets, labels, embeddings),
        control_precision=intrusion_precision_oracle(sets, shuffled, embeddings),
        n_sets=len(sets),
        sets=picked,
    )


def nearest_activities(embeddings, query: int, k: int = 5) -> List[Tuple[int, float]]:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    distances = np.linalg.norm(embeddings - embeddings[query], axis=1)
    order = np.lexsort((np.arange(len(distances)), distances))
    order = order[order != query][:k]
    return [(int(i), float(distances[i])) for i in order]


# ---------------------------------------------------------------------------
# diagnosis clustering
# ---------------------------------------------------------------------------

def diagnosis_vectors(source, mode: str = "day_mean") -> np.ndarray:
    """
    One vector per diagnosis from a trained model (or checkpoint).

    Args:
        source: Inpatient2Vec model or Checkpoint
        mode: day_mean (mean of the N_g rows), first_day, or flatten_pad
            (rows concatenated, short matrices padded by repeating their last row)
    """
    if mode not in DIAGNOSIS_MODES:
        raise ValueError(f"unknown diagnosis vector mode {mode!r}; expected one of {DIAGNOSIS_MODES}")
    model = getattr(source, "model", source)
    vocab = model.vocabulary
    if model.tables.diagnosis is None:
        # diagnoses live in the activity table as extra tokens
        return model.tables.activity.data[vocab.n_tokens:vocab.n_tokens + vocab.n_diagnoses].copy()
    matrices = [model.tables.diagnosis_matrix(g).data for g in range(vocab.n_diagnoses)]
    if mode == "day_mean":
        return np.stack([m.mean(axis=0) for m in matrices])
    if mode == "first_day":
        return np.stack([m[0] for m in matrices])
    longest = max(m.shape[0] for m in matrices)
    padded = [np.vstack([m, np.repeat(m[-1:], longest - m.shape[0], axis=0)]) for m in matrices]
    return np.stack([p.reshape(-1) for p in padded])


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centers: np.ndarray
    inertia: float
    n_iter: int
    history: List[float] = field(default_factory=list)


def _kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        if closest.sum() > 0:
            nxt = int(rng.choice(n, p=closest / closest.sum()))
        else:
            nxt = int(rng.choice(np.setdiff1d(np.arange(n), chosen)))
        chosen.append(nxt)
        closest = np.minimum(closest, np.sum((points - points[nxt]) ** 2, axis=1))
    return points[chosen].copy()


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300) -> KMeansResult:
    """Lloyd's algorithm from a k-means++ start; empty clusters move to the worst-served point."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_plus_plus(points, k, rng)
    assignments = None
    history: List[float] = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        sq = cdist(points, centers, metric="sqeuclidean")
        new = np.argmin(sq, axis=1)
        cost = sq[np.arange(n), new]
        counts = np.bincount(new, minlength=k)
        for c in np.flatnonzero(counts == 0):
            # only points whose cluster keeps another member may move
            donors = np.where(counts[new] > 1, cost, -np.inf)
            worst = int(np.argmax(donors))
            counts[new[worst]] -= 1
            counts[c] = 1
            centers[c] = points[worst]
            new[worst] = c
            cost[worst] = 0.0
        inertia = float(np.sum((points - centers[new]) ** 2))
        if history and inertia > history[-1] * (1.0 + 1e-12) + 1e-12:
            raise NumericalError(f"k-means inertia increased at iteration {n_iter}")
        history.append(inertia)
        if assignments is not None and np.array_equal(new, assignments):
            break
        assignments = new
        centers = np.stack([points[assignments == c].mean(axis=0) for c in range(k)])
    final = float(np.sum((points - centers[assignments]) ** 2))
    return KMeansResult(assignments, centers, final, n_iter, history)


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(labels_a, labels_b) -> float:
    """Normalized mutual information with geometric-mean normalisation."""
    a, b = np.asarray(labels_a), np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValueError(f"label arrays differ in length: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("need at least one label")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1.0)
    h_a, h_b = _entropy(table.sum(axis=1)), _entropy(table.sum(axis=0))
    if h_a == 0.0 and h_b == 0.0:
        return 1.0
    if h_a == 0.0 or h_b == 0.0:
        return 0.0
    joint = table / a.size
    outer = np.outer(joint.sum(axis=1), joint.sum(axis=0))
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / outer[nz])))
    return float(np.clip(mi / math.sqrt(h_a * h_b), 0.0, 1.0))


@dataclass
class ClusteringResult:
    mode: str
    k: int
    assignments: np.ndarray
    nmi: float
    seed: int
    control_nmi: Optional[float] = None


def evaluate_clustering(vectors, labels, k: Optional[int] = None, seed: int = 0, mode: str = "day_mean") -> ClusteringResult:
    """K-means on diagnosis vectors scored against family labels, with a random-vector control."""
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    k = k or len(np.unique(labels))
    if k < 2:
        raise InputError("Diagnosis clustering needs at least two families")
    if k > vectors.shape[0]:
        raise InputError(f"k={k} exceeds the {vectors.shape[0]} diagnoses available")
    found = kmeans(vectors, k, seed)
    random_vectors = np.random.default_rng([seed, 1]).standard_normal(vectors.shape)
    control = kmeans(random_vectors, k, seed)
    return ClusteringResult(mode, k, found.assignments, nmi(found.assignments, labels), seed,
                            nmi(control.assignments, labels))


# ---------------------------------------------------------------------------
# recall and LOS
# ---------------------------------------------------------------------------

def recall_at_k(predicted_ranking: Sequence[int], true_day_set, k: int) -> float:
    """|top-k ∩ true| / min(k, |true|)."""
    truth = set(int(a) for a in true_day_set)
    if not truth:
        raise ValueError("true day set is empty")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    hits = len(truth.intersection(int(a) for a in predicted_ranking[:k]))
    return hits / min(k, len(truth))


def adaptive_recall(predicted_ranking: Sequence[int], true_day_set) -> float:
    """Recall@A: k is the size of the true day set."""
    return recall_at_k(predicted_ranking, true_day_set, len(set(true_day_set)))


def standard_recall(predicted_ranking: Sequence[int], true_day_set, k: int) -> float:
    truth = set(int(a) for a in true_day_set)
    if not truth:
        raise ValueError("true day set is empty")
    return len(truth.intersection(int(a) for a in predicted_ranking[:k])) / len(truth)


Slot = Tuple[str, int]


def confidence_interval(values, confidence: float = 0.95, n_resamples: int = 1000, seed: int = 0) -> Tuple[float, float]:
    """Percentile bootstrap interval of the mean over day-slots."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2 or np.all(values == values[0]):
        v = float(values.mean()) if values.size else float("nan")
        return v, v
    result = bootstrap((values,), np.mean, confidence_level=confidence, n_resamples=n_resamples,
                       method="percentile", random_state=np.random.default_rng(seed))
    return float(result.confidence_interval.low), float(result.confidence_interval.high)


@dataclass
class RecallReport:
    """Columns of `values`: Recall@A, @5, @10, @20; `standard` holds plain recall @5, @10, @20."""

    values: np.ndarray
    standard: np.ndarray
    slots: List[Slot] = field(default_factory=list)

    @property
    def count(self) -> int:
        return self.values.shape[0]

    def _mean(self, column: int) -> float:
        return float(self.values[:, column].mean()) if self.count else 0.0

    @property
    def recall_a(self) -> float:
        return self._mean(0)

    @property
    def recall_5(self) -> float:
        return self._mean(1)

    @property
    def recall_10(self) -> float:
        return self._mean(2)

    @property
    def recall_20(self) -> float:
        return self._mean(3)

    def interval(self, column: int = 0, seed: int = 0) -> Tuple[float, float]:
        return confidence_interval(self.values[:, column], seed=seed)

    def to_dict(self) -> Dict:
        standard = self.standard.mean(axis=0) if self.count else np.zeros(len(RECALL_KS))
        return {
            "recall_a": self.recall_a,
            "recall_5": self.recall_5,
            "recall_10": self.recall_10,
            "recall_20": self.recall_20,
            "recall_a_ci95": list(self.interval()),
            "standard_recall": {f"at_{k}": float(v) for k, v in zip(RECALL_KS, standard)},
            "count": self.count,
        }

    @classmethod
    def from_rankings(cls, rankings: Sequence[Sequence[int]], truths: Sequence, slots: Sequence[Slot]) -> "RecallReport":
        rows, plain = [], []
        for ranking, truth in zip(rankings, truths):
            rows.append([adaptive_recall(ranking, truth)] + [recall_at_k(ranking, truth, k) for k in RECALL_KS])
            plain.append([standard_recall(ranking, truth, k) for k in RECALL_KS])
        return cls(
            np.array(rows, dtype=np.float64).reshape(-1, 1 + len(RECALL_KS)),
            np.array(plain, dtype=np.float64).reshape(-1, len(RECALL_KS)),
            list(slots),
        )


@dataclass
class LosReport:
    rmse: float
    residuals: np.ndarray
    slots: List[Slot] = field(default_factory=list)

    @classmethod
    def from_predictions(cls, predicted, actual, slots: Sequence[Slot]) -> "LosReport":
        residuals = np.asarray(predicted, dtype=np.float64) - np.asarray(actual, dtype=np.float64)
        rmse = float(np.sqrt(np.mean(residuals ** 2))) if residuals.size else 0.0
        return cls(rmse, residuals, list(slots))

    def to_dict(self) -> Dict:
        return {"los_rmse": self.rmse, "count": int(self.residuals.size)}


def next_day_slots(cohort: Cohort) -> Tuple[List[Slot], List[Tuple[int, ...]]]:
    """(visit_id, t) for every t ≥ 2 with the true activity set of day t."""
    slots, truths = [], []
    for visit in cohort.visits:
        for t in range(2, visit.los + 1):
            slots.append((visit.visit_id, t))
            truths.append(visit.days[t - 1].activities)
    return slots, truths


def remaining_los_slots(cohort: Cohort) -> Tuple[List[Slot], np.ndarray]:
    slots, targets = [], []
    for visit in cohort.visits:
        for t in range(2, visit.los + 1):
            slots.append((visit.visit_id, t))
            targets.append(visit.los - t)
    return slots, np.array(targets, dtype=np.float64)


def rank_activities(scores: np.ndarray) -> np.ndarray:
    """Descending by score, ties to the lower id."""
    return np.argsort(-np.asarray(scores), axis=-1, kind="stable")


def activity_frequencies(cohort: Cohort) -> np.ndarray:
    counts = np.zeros(cohort.vocabulary.n_activities, dtype=np.int64)
    for visit in cohort.visits:
        for day in visit.days:
            counts[list(day.activities)] += 1
    return counts


def frequency_baseline(train: Cohort, test: Cohort) -> RecallReport:
    """Every day-slot gets the same ranking: global training frequency."""
    if len(train) == 0:
        raise InputError("Frequency baseline needs a non-empty training split")
    ranking = rank_activities(activity_frequencies(train).astype(np.float64))
    slots, truths = next_day_slots(test)
    return RecallReport.from_rankings([ranking] * len(slots), truths, slots)


def constant_los_report(test: Cohort, value: Optional[float] = None) -> LosReport:
    """Predict one number everywhere; by default the mean remaining LOS of `test`."""
    slots, targets = remaining_los_slots(test)
    if value is None:
        value = float(targets.mean()) if targets.size else 0.0
    return LosReport.from_predictions(np.full(targets.shape, value), targets, slots)


def map_visits(
    fn: Callable[[Sequence[VisitRecord]], np.ndarray],
    visits: Sequence[VisitRecord],
    chunk_size: int = 32,
    threads: int = 1,
) -> List[np.ndarray]:
    """
    Apply a read-only model function to visit chunks, possibly on several
    threads; results come back in visit order.
    """
    chunks = [visits[i:i + chunk_size] for i in range(0, len(visits), chunk_size)]

    def run(chunk):
        with tc.no_grad():
            return fn(chunk)

    if threads <= 1 or len(chunks) <= 1:
        return [run(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, chunks))
