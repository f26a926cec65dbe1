"""Visual vocabulary, weighted bag-of-words vectors, and similarity retrieval.

Vocabulary words are flat k-means centroids of descriptors under the L1
metric. A map's vector holds one entry per observed word, weighted by a
term-frequency / inverse-document-frequency product further scaled by
exp(-d/lambda) with d the descriptor-to-word distance, so descriptors far from
any word count less.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist


@dataclass
class Vocabulary:
    words: np.ndarray  # (k, d) centroid descriptors
    idf: np.ndarray  # (k,) non-negative word weights
    lambda_w: float  # distance-weighting scale
    seed: int = 0

    def __post_init__(self):
        self.words = np.asarray(self.words, dtype=float)
        self.idf = np.asarray(self.idf, dtype=float)
        if self.words.shape[0] < 2:
            raise ValueError("vocabulary needs at least two words")
        if np.any(self.idf < 0):
            raise ValueError("idf weights must be non-negative")

    @property
    def k(self) -> int:
        return self.words.shape[0]


@dataclass
class BowVector:
    """Sparse word-id -> weight map; weights are non-negative."""

    entries: dict[int, float] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def l1(self) -> float:
        return float(sum(self.entries.values()))


@dataclass
class BowDatabase:
    items: list[tuple[int, BowVector]] = field(default_factory=list)

    def add(self, map_id: int, vector: BowVector) -> None:
        if any(i == map_id for i, _ in self.items):
            raise ValueError(f"map id {map_id} already registered")
        self.items.append((map_id, vector))


def _assign(words: np.ndarray, descriptors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest word per descriptor under L1; ties go to the lowest word index."""
    d = cdist(descriptors, words, metric="cityblock")
    idx = np.argmin(d, axis=1)
    return idx, d[np.arange(len(idx)), idx]


def build_vocabulary(corpus: list[np.ndarray], k: int, seed: int = 0, max_iters: int = 50) -> Vocabulary:
    """k-means++ clustering of all corpus descriptors; idf from per-image occurrence.

    `corpus` is one descriptor array per training image.
    """
    per_image = [np.asarray(c, dtype=float) for c in corpus if len(c)]
    if not per_image:
        raise ValueError("empty descriptor corpus")
    data = np.vstack(per_image)
    if data.shape[0] < k:
        raise ValueError(f"corpus of {data.shape[0]} descriptors is too small for k={k}")
    rng = np.random.default_rng(seed)

    # k-means++ seeding under L1
    centers = [data[rng.integers(data.shape[0])]]
    d_min = np.abs(data - centers[0]).sum(axis=1)
    for _ in range(1, k):
        total = d_min.sum()
        if total <= 0:
            centers.append(data[rng.integers(data.shape[0])])
            continue
        probs = d_min / total
        centers.append(data[rng.choice(data.shape[0], p=probs)])
        d_min = np.minimum(d_min, np.abs(data - centers[-1]).sum(axis=1))
    words = np.array(centers)

    assign = np.full(data.shape[0], -1)
    for _ in range(max_iters):
        new_assign, _ = _assign(words, data)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for w in range(k):
            members = data[assign == w]
            if len(members):
                words[w] = members.mean(axis=0)
            else:
                # re-seed an empty word on the descriptor farthest from its center
                _, dists = _assign(words, data)
                words[w] = data[int(np.argmax(dists))]

    assign, dists = _assign(words, data)
    n_images = len(per_image)
    seen = np.zeros((n_images, k), dtype=bool)
    pos = 0
    for i, img in enumerate(per_image):
        seen[i, np.unique(assign[pos : pos + len(img)])] = True
        pos += len(img)
    n_w = seen.sum(axis=0)
    idf = np.maximum(np.log(n_images / (1.0 + n_w)), 0.0)
    lam = float(np.median(dists))
    return Vocabulary(words=words, idf=idf, lambda_w=max(lam, 1e-12), seed=seed)


def bow_vector(vocab: Vocabulary, descriptors: np.ndarray) -> BowVector:
    """Aggregate descriptors into per-word weights w = mean(exp(-d/lambda)) * idf * tf."""
    descriptors = np.asarray(descriptors, dtype=float)
    if descriptors.size == 0:
        return BowVector()
    assign, dists = _assign(vocab.words, descriptors)
    total = len(assign)
    entries = {}
    for w in np.unique(assign):
        sel = assign == w
        tf = sel.sum() / total
        w_star = float(np.exp(-dists[sel] / vocab.lambda_w).mean())
        weight = w_star * float(vocab.idf[w]) * tf
        if weight > 0:
            entries[int(w)] = weight
    return BowVector(entries)


def similarity(v1: BowVector, v2: BowVector) -> float:
    """1 - 0.5 * |v1/|v1| - v2/|v2||_1, in [0, 1]; 0 when either vector is empty."""
    n1, n2 = v1.l1(), v2.l1()
    if n1 <= 0 or n2 <= 0:
        return 0.0
    keys = set(v1.entries) | set(v2.entries)
    diff = sum(abs(v1.entries.get(k, 0.0) / n1 - v2.entries.get(k, 0.0) / n2) for k in keys)
    return 1.0 - 0.5 * diff


def db_query(db: BowDatabase, v: BowVector, top_k: int = 2, exclude_id: int | None = None) -> list[tuple[int, float]]:
    """Top-scoring database entries, ties kept in insertion order."""
    scored = [
        (map_id, similarity(v, vec))
        for map_id, vec in db.items
        if exclude_id is None or map_id != exclude_id
    ]
    scored.sort(key=lambda t: -t[1])  # stable: insertion order preserved on ties
    return scored[:top_k]


def save_vocabulary(path: str, vocab: Vocabulary) -> None:
    payload = {
        "k": vocab.k,
        "dim": vocab.words.shape[1],
        "words": base64.b64encode(np.ascontiguousarray(vocab.words, dtype="<f4").tobytes()).decode("ascii"),
        "idf": vocab.idf.tolist(),
        "lambda_w": vocab.lambda_w,
        "seed": vocab.seed,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=1)


def load_vocabulary(path: str) -> Vocabulary:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    words = np.frombuffer(base64.b64decode(payload["words"]), dtype="<f4").astype(float)
    words = words.reshape(payload["k"], payload["dim"])
    return Vocabulary(
        words=words,
        idf=np.array(payload["idf"], dtype=float),
        lambda_w=float(payload["lambda_w"]),
        seed=int(payload["seed"]),
    )
