"""Identity matching: exhaustive score matrices, closed-set top-1 recall,
1:1 verification and template-vs-image similarity distributions."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .embedder import Embedding, EmbedderModel, embed_images

HIST_BINS = 64


class DimensionMismatchError(ValueError):
    pass


class OpenSetError(ValueError):
    """A query identity has no eligible key of the same identity."""


def _as_matrix(embeddings) -> np.ndarray:
    if isinstance(embeddings, np.ndarray):
        m = embeddings
    else:
        items = list(embeddings)
        if not items:
            raise ValueError("embedding list is empty")
        m = np.stack([e.vector if isinstance(e, Embedding) else np.asarray(e) for e in items])
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or len(m) == 0:
        raise ValueError("expected a nonempty list of equal-length vectors")
    return m


def _labels(values, n: int, what: str) -> np.ndarray | None:
    if values is None:
        return None
    arr = np.asarray(list(values))
    if len(arr) != n:
        raise DimensionMismatchError(f"{what} has {len(arr)} entries for {n} rows")
    return arr


@dataclass
class ScoreMatrix:
    scores: np.ndarray
    query_labels: np.ndarray
    key_labels: np.ndarray
    query_ids: np.ndarray | None = None
    key_ids: np.ndarray | None = None
    query_source: str | None = None
    key_source: str | None = None

    def __post_init__(self):
        q, k = self.scores.shape
        self.query_labels = _labels(self.query_labels, q, "query_labels")
        self.key_labels = _labels(self.key_labels, k, "key_labels")
        self.query_ids = _labels(self.query_ids, q, "query_ids")
        self.key_ids = _labels(self.key_ids, k, "key_ids")
        if self.scores.size and (self.scores.min() < -1.0 or self.scores.max() > 1.0):
            raise ValueError("scores must lie in [-1, 1]")

    def self_mask(self) -> np.ndarray:
        """True where the query and key are the same sample."""
        if self.query_ids is None or self.key_ids is None:
            return np.zeros(self.scores.shape, dtype=bool)
        return self.query_ids[:, None] == self.key_ids[None, :]


def score_matrix(queries, keys, query_labels=None, key_labels=None, query_ids=None, key_ids=None,
                 query_source: str | None = None, key_source: str | None = None, workers: int = 1) -> ScoreMatrix:
    """Exact cosine scores between every query and every key.

    Each row is computed independently with the same matrix-vector product, so
    the result does not depend on ``workers``.
    """
    q = _as_matrix(queries)
    k = _as_matrix(keys)
    if q.shape[1] != k.shape[1]:
        raise DimensionMismatchError(f"query dim {q.shape[1]} != key dim {k.shape[1]}")
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    kn = k / np.linalg.norm(k, axis=1, keepdims=True)

    def row(i: int) -> np.ndarray:
        return kn @ qn[i]

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(row, range(len(qn))))
    else:
        rows = [row(i) for i in range(len(qn))]
    scores = np.clip(np.stack(rows), -1.0, 1.0)
    ql = np.arange(len(q)) if query_labels is None else query_labels
    kl = np.arange(len(k)) if key_labels is None else key_labels
    return ScoreMatrix(scores, ql, kl, query_ids, key_ids, query_source, key_source)


@dataclass
class RecallResult:
    recall: float
    n_queries: int
    n_correct: int
    ties: int
    self_pairs_excluded: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def top1_details(matrix: ScoreMatrix) -> RecallResult:
    """Top-1 recall with self-pairs masked; ties go to the lowest key index."""
    scores = matrix.scores.copy()
    mask = matrix.self_mask()
    scores[mask] = -np.inf
    ql, kl = matrix.query_labels, matrix.key_labels
    for i, label in enumerate(ql):
        eligible = (kl == label) & ~mask[i]
        if not eligible.any():
            raise OpenSetError(f"query {i} identity {label!r} has no eligible key (closed-set protocol)")
    best = scores.max(axis=1)
    ties = int(np.sum((scores == best[:, None]).sum(axis=1) > 1))
    pick = np.argmax(scores, axis=1)
    correct = int(np.sum(kl[pick] == ql))
    return RecallResult(correct / len(ql), len(ql), correct, ties, int(mask.sum()))


def top1_recall(matrix: ScoreMatrix) -> float:
    return top1_details(matrix).recall


@dataclass
class EmbeddingSet:
    """Embeddings of one domain (a protector's templates or original images)."""

    vectors: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.vectors = _as_matrix(self.vectors)
        self.labels = np.asarray(self.labels)
        self.sample_ids = np.asarray(self.sample_ids)
        if not (len(self.vectors) == len(self.labels) == len(self.sample_ids)):
            raise DimensionMismatchError("vectors, labels and sample_ids must have equal length")


@dataclass
class LinkageGrid:
    query_domains: list[str]
    key_domains: list[str]
    recall: np.ndarray
    ties: np.ndarray

    def cell(self, query: str, key: str) -> float:
        return float(self.recall[self.query_domains.index(query), self.key_domains.index(key)])

    def to_dict(self) -> dict:
        return {
            "query_domains": self.query_domains,
            "key_domains": self.key_domains,
            "top1_recall": self.recall.tolist(),
            "ties": self.ties.tolist(),
            "protocol": "closed-set top-1; a query never matches a key with its own sample_id",
        }


def linkage_matrix(sets: Mapping[str, EmbeddingSet], query_domains: Sequence[str] | None = None,
                   key_domains: Sequence[str] | None = None) -> LinkageGrid:
    """Top-1 recall for every (query domain, key domain) pair.

    Keys sharing the query's sample id are always excluded, so a template is
    never credited for matching the image it was made from.
    """
    if not sets:
        raise ValueError("no embedding sets given")
    universes = {name: set(s.labels.tolist()) for name, s in sets.items()}
    first = next(iter(universes.values()))
    if len(first) < 2:
        raise ValueError("linkage needs at least two identities")
    for name, u in universes.items():
        if u != first:
            raise ValueError(f"domain {name!r} covers a different identity universe")
    qd = list(query_domains or sets)
    kd = list(key_domains or sets)
    recall = np.zeros((len(qd), len(kd)))
    ties = np.zeros((len(qd), len(kd)), dtype=int)
    for i, a in enumerate(qd):
        for j, b in enumerate(kd):
            sa, sb = sets[a], sets[b]
            m = score_matrix(sa.vectors, sb.vectors, sa.labels, sb.labels, sa.sample_ids, sb.sample_ids, a, b)
            r = top1_details(m)
            recall[i, j] = r.recall
            ties[i, j] = r.ties
    return LinkageGrid(qd, kd, recall, ties)


def _summary(x: np.ndarray) -> dict:
    return {"count": int(len(x)), "mean": float(x.mean()), "std": float(x.std()),
            "min": float(x.min()), "max": float(x.max())}


@dataclass
class VerificationReport:
    accuracy: float
    auroc: float
    threshold: float
    genuine: dict
    impostor: dict

    def __post_init__(self):
        if not (0.0 <= self.auroc <= 1.0 and 0.0 <= self.accuracy <= 1.0):
            raise ValueError("auroc and accuracy must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "auroc": self.auroc, "threshold": self.threshold,
                "accuracy_definition": "balanced accuracy at the best pooled-score threshold (score >= t accepts)",
                "genuine": self.genuine, "impostor": self.impostor}


def auroc(genuine: Sequence[float], impostor: Sequence[float]) -> float:
    """P(genuine > impostor) + 0.5 P(tie), via average ranks (Mann-Whitney U)."""
    g = np.asarray(genuine, dtype=np.float64)
    i = np.asarray(impostor, dtype=np.float64)
    if len(g) == 0 or len(i) == 0:
        raise ValueError("genuine and impostor score lists must be nonempty")
    ranks = rankdata(np.concatenate([g, i]), method="average")
    u = ranks[: len(g)].sum() - len(g) * (len(g) + 1) / 2.0
    return float(u / (len(g) * len(i)))


def best_balanced_threshold(genuine: np.ndarray, impostor: np.ndarray) -> tuple[float, float]:
    """Threshold among pooled scores maximizing (TPR + TNR) / 2; smallest wins ties."""
    cands = np.unique(np.concatenate([genuine, impostor]))
    gs, is_ = np.sort(genuine), np.sort(impostor)
    tpr = 1.0 - np.searchsorted(gs, cands, side="left") / len(gs)
    tnr = np.searchsorted(is_, cands, side="left") / len(is_)
    bal = 0.5 * (tpr + tnr)
    k = int(np.argmax(bal))
    return float(cands[k]), float(bal[k])


def verification_eval(genuine: Sequence[float], impostor: Sequence[float]) -> VerificationReport:
    g = np.asarray(genuine, dtype=np.float64)
    i = np.asarray(impostor, dtype=np.float64)
    if len(g) == 0 or len(i) == 0:
        raise ValueError("genuine and impostor score lists must be nonempty")
    threshold, acc = best_balanced_threshold(g, i)
    return VerificationReport(acc, auroc(g, i), threshold, _summary(g), _summary(i))


def verification_pairs(query: EmbeddingSet, key: EmbeddingSet, max_impostors: int | None = 100_000,
                       seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Genuine (same identity, different sample) and impostor scores between two domains."""
    m = score_matrix(query.vectors, key.vectors, query.labels, key.labels, query.sample_ids, key.sample_ids)
    same = m.query_labels[:, None] == m.key_labels[None, :]
    valid = ~m.self_mask()
    genuine = m.scores[same & valid]
    impostor = m.scores[~same & valid]
    if max_impostors is not None and len(impostor) > max_impostors:
        idx = np.sort(np.random.default_rng(seed).choice(len(impostor), max_impostors, replace=False))
        impostor = impostor[idx]
    return genuine, impostor


def _hist(values: np.ndarray) -> dict:
    counts, edges = np.histogram(values, bins=HIST_BINS, range=(-1.0, 1.0))
    return {"bin_edges": edges.tolist(), "counts": counts.tolist()}


@dataclass
class SimilarityDistributionReport:
    template_to_source: np.ndarray
    same_identity: np.ndarray
    skipped_identities: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def mean_template_to_source(self) -> float:
        return float(self.template_to_source.mean())

    @property
    def mean_same_identity(self) -> float:
        return float(self.same_identity.mean()) if len(self.same_identity) else float("nan")

    @property
    def mean_difference(self) -> float:
        return self.mean_template_to_source - self.mean_same_identity

    def to_dict(self) -> dict:
        return {
            "template_to_source": {"mean": self.mean_template_to_source, "n": int(len(self.template_to_source)),
                                   "histogram": _hist(self.template_to_source)},
            "same_identity_images": {"mean": self.mean_same_identity, "n": int(len(self.same_identity)),
                                     "histogram": _hist(self.same_identity)},
            "mean_difference": self.mean_difference,
            "skipped_single_image_identities": self.skipped_identities,
            **self.extra,
        }


def similarity_from_embeddings(student_emb: np.ndarray, teacher_emb: np.ndarray,
                               labels: Sequence) -> SimilarityDistributionReport:
    s = np.asarray(student_emb, dtype=np.float64)
    t = np.asarray(teacher_emb, dtype=np.float64)
    labels = np.asarray(labels)
    a = np.clip(np.sum(s * t, axis=1), -1.0, 1.0)
    b, skipped = [], 0
    for label in np.unique(labels):
        idx = np.flatnonzero(labels == label)
        if len(idx) < 2:
            skipped += 1
            continue
        g = t[idx] @ t[idx].T
        b.append(g[np.triu_indices(len(idx), 1)])
    b = np.clip(np.concatenate(b), -1.0, 1.0) if b else np.empty(0)
    return SimilarityDistributionReport(a, b, skipped)


def similarity_distributions(teacher: EmbedderModel, student: EmbedderModel, pixels: np.ndarray, labels: Sequence,
                             oracle: Callable[[np.ndarray], np.ndarray]) -> SimilarityDistributionReport:
    """Set A: student(T(x)) vs teacher(x). Set B: teacher(x) vs teacher(x') for same-identity x != x'."""
    t = embed_images(teacher, pixels)
    s = student.embed_array(oracle(pixels))
    return similarity_from_embeddings(s, t, labels)
