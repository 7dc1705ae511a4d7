"""Cosine retrieval with Recall@K, and zero-shot classification from prompt ensembles."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embeddings import EmbeddingError, normalize

PROMPT_TEMPLATES = (
    "a photo of a {}.",
    "a blurry photo of a {}.",
    "a black and white photo of a {}.",
    "a low contrast photo of a {}.",
    "a high contrast photo of a {}.",
    "a bad photo of a {}.",
    "a good photo of a {}.",
    "a photo of a small {}.",
    "a photo of a big {}.",
    "a photo of the {}.",
    "a blurry photo of the {}.",
    "a black and white photo of the {}.",
    "a low contrast photo of the {}.",
    "a high contrast photo of the {}.",
    "a bad photo of the {}.",
    "a good photo of the {}.",
    "a photo of the small {}.",
    "a photo of the big {}.",
)

RECALL_KS = (1, 5, 10)


class DegenerateClassError(EmbeddingError):
    """A class's averaged prompt embedding is (numerically) zero."""


@dataclass(frozen=True)
class CandidatePool:
    embeddings: np.ndarray
    keys: tuple[str, ...]
    space_id: str = ""
    _unit: np.ndarray = field(init=False, repr=False, compare=False)
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        keys = tuple(self.keys)
        if emb.ndim != 2 or emb.shape[0] == 0:
            raise ValueError("candidate pool must be a non-empty (N, D) matrix")
        if emb.shape[0] != len(keys):
            raise ValueError("one key per candidate is required")
        index = {k: i for i, k in enumerate(keys)}
        if len(index) != len(keys):
            raise ValueError("candidate keys must be unique")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "_unit", normalize(emb))
        object.__setattr__(self, "_index", index)

    @classmethod
    def from_cache(cls, cache) -> "CandidatePool":
        return cls(cache.matrix, cache.keys, cache.space_id)

    def __len__(self):
        return len(self.keys)

    @property
    def dimension(self) -> int:
        return self.embeddings.shape[1]

    def position(self, key: str) -> int:
        try:
            return self._index[key]
        except KeyError:
            raise KeyError(f"ground-truth key {key!r} is not in the candidate pool") from None

    def similarities(self, queries) -> np.ndarray:
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if q.shape[1] != self.dimension:
            raise ValueError(f"query dimension {q.shape[1]} does not match pool dimension {self.dimension}")
        return normalize(q) @ self._unit.T


def _descending_order(scores: np.ndarray) -> np.ndarray:
    # stable sort on -score keeps ascending index order among ties
    return np.argsort(-scores, axis=-1, kind="stable")


def rank_candidates(query, pool: CandidatePool) -> list[str]:
    order = _descending_order(pool.similarities(query)[0])
    return [pool.keys[i] for i in order]


def ground_truth_ranks(queries, ground_truth_keys: Sequence[str], pool: CandidatePool) -> np.ndarray:
    """1-based rank of each query's ground truth under the index tie-break."""
    sims = pool.similarities(queries)
    if sims.shape[0] != len(ground_truth_keys):
        raise ValueError("one ground-truth key per query is required")
    gt = np.array([pool.position(k) for k in ground_truth_keys])
    target = sims[np.arange(len(gt)), gt][:, None]
    idx = np.arange(len(pool))[None, :]
    ahead = (sims > target) | ((sims == target) & (idx < gt[:, None]))
    return ahead.sum(axis=1) + 1


def recall_from_ranks(ranks, k: int) -> float:
    ranks = np.asarray(ranks)
    return float(100.0 * np.mean(ranks <= k))


def recall_at_k(queries, ground_truth_keys, pool: CandidatePool, k: int) -> float:
    return recall_from_ranks(ground_truth_ranks(queries, ground_truth_keys, pool), k)


def mean_recall(queries, ground_truth_keys, pool: CandidatePool, ks: Sequence[int] = RECALL_KS) -> float:
    return retrieval_report(queries, ground_truth_keys, pool, ks)["mean_recall"]


def retrieval_report(queries, ground_truth_keys, pool: CandidatePool, ks: Sequence[int] = RECALL_KS) -> dict:
    ranks = ground_truth_ranks(queries, ground_truth_keys, pool)
    report = {f"recall@{k}": recall_from_ranks(ranks, k) for k in ks}
    report["mean_recall"] = float(sum(report[f"recall@{k}"] for k in ks) / len(ks))
    report["per_query_rank"] = [int(r) for r in ranks]
    return report


# --------------------------------------------------------------------------
# Zero-shot classification
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassWeights:
    classes: tuple[str, ...]
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape[0] != len(self.classes):
            raise ValueError("one weight row per class is required")
        if not np.allclose(np.linalg.norm(w, axis=1), 1.0, atol=1e-9):
            raise ValueError("class weight rows must be unit-normalized")
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "weights", w)


def fill_templates(class_name: str, templates: Sequence[str]) -> list[str]:
    return [t.format(class_name) for t in templates]


def build_class_weights(class_names: Sequence[str], templates: Sequence[str], text_provider,
                        degenerate_tol: float = 1e-8) -> ClassWeights:
    """Average each class's filled-template text embeddings and normalize the mean."""
    if not templates:
        raise ValueError("at least one template is required")
    rows = []
    for name in class_names:
        emb = np.asarray(text_provider.embed_texts(fill_templates(name, templates)), dtype=np.float64)
        mean = emb.mean(axis=0)
        if np.linalg.norm(mean) <= degenerate_tol:
            raise DegenerateClassError(f"class {name!r}: prompt embeddings average to zero")
        rows.append(mean / np.linalg.norm(mean))
    return ClassWeights(tuple(class_names), np.stack(rows))


def class_scores(embeddings, weights: ClassWeights) -> np.ndarray:
    q = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if q.shape[1] != weights.weights.shape[1]:
        raise ValueError("embedding dimension does not match class weights")
    return normalize(q) @ weights.weights.T


def classify(embedding, weights: ClassWeights, k: int = 1) -> list[str] | list[list[str]]:
    """Top-``k`` classes by cosine; ties go to the lower class index."""
    if k > len(weights.classes):
        raise ValueError(f"k={k} exceeds the number of classes ({len(weights.classes)})")
    single = np.asarray(embedding).ndim == 1
    order = _descending_order(class_scores(embedding, weights))[:, :k]
    out = [[weights.classes[i] for i in row] for row in order]
    return out[0] if single else out


def accuracy(predictions: Sequence[Sequence[str]], labels: Sequence[str], k: int = 1) -> float:
    if len(predictions) != len(labels):
        raise ValueError("one prediction list per label is required")
    hits = [label in list(pred)[:k] for pred, label in zip(predictions, labels)]
    return float(100.0 * np.mean(hits))


def classification_report(embeddings, labels: Sequence[str], weights: ClassWeights,
                          ks: Sequence[int] = (1, 5), item_keys: Sequence[str] | None = None) -> dict:
    kmax = min(max(ks), len(weights.classes))
    preds = classify(np.atleast_2d(embeddings), weights, kmax)
    report = {f"top{k}": accuracy(preds, labels, k) for k in ks if k <= len(weights.classes)}
    keys = item_keys or [str(i) for i in range(len(labels))]
    report["per_item"] = [
        {"key": key, "label": label, "predictions": pred} for key, label, pred in zip(keys, labels, preds)
    ]
    return report


def load_external_class_weights(path) -> ClassWeights:
    """Class weights produced elsewhere (e.g. from learned prompt contexts).

    Expects an ``.npz`` with ``classes`` (C strings) and ``weights`` (C x D);
    rows are normalized on load.
    """
    with np.load(path, allow_pickle=False) as doc:
        classes = tuple(str(c) for c in doc["classes"])
        weights = normalize(doc["weights"])
    return ClassWeights(classes, weights)
