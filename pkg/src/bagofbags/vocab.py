"""Per-page visual-word vocabularies.

Each page's component embeddings are clustered into K prototypes; the
prototype set with cluster-mass weights is the page's bag representation.
The same k-means core (optionally point-weighted) also fits the shared
codebook used by the histogram baselines.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import artifacts


@dataclass
class KMeansConfig:
    K: int = 20
    max_iters: int = 100
    tol: float = 1e-6  # relative inertia change
    seed: int = 0
    n_init: int = 4

    def validate(self) -> None:
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.max_iters < 1 or self.n_init < 1:
            raise ValueError("max_iters and n_init must be >= 1")


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (K, d) float64
    assignments: np.ndarray  # (n,) int64
    inertia: float
    quant_error: float
    n_iter: int
    history: list[float] = field(default_factory=list)  # inertia per iteration


@dataclass
class BobVocabulary:
    """Bag of prototypes for one page: (mu_a, pi_a) with populations m_a."""

    page_id: str
    prototypes: np.ndarray  # (K, d) float32
    masses: np.ndarray  # (K,) float64, sums to 1
    populations: np.ndarray  # (K,) uint32, sums to n_components
    n_components: int
    quant_error: float

    @property
    def K(self) -> int:
        return self.prototypes.shape[0]

    @property
    def d(self) -> int:
        return self.prototypes.shape[1]

    def validate(self) -> None:
        if abs(float(self.masses.sum()) - 1.0) > 1e-9:
            raise ValueError("masses must sum to 1")
        if int(self.populations.sum()) != self.n_components:
            raise ValueError("populations must sum to n_components")
        if not np.isfinite(self.prototypes).all():
            raise ValueError("prototypes must be finite")


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(n, K) squared Euclidean distances via the expanded-norm identity."""
    pp = np.einsum("ij,ij->i", points, points)[:, None]
    cc = np.einsum("ij,ij->i", centers, centers)[None, :]
    d2 = pp + cc - 2.0 * (points @ centers.T)
    return np.maximum(d2, 0.0)


def _seed_plusplus(
    points: np.ndarray, weights: np.ndarray, K: int, rng: np.random.Generator
) -> np.ndarray:
    """k-means++ seeding; weights scale both the first draw and the D^2
    distribution. Falls back to uniform over unchosen points when every
    remaining D^2 mass is zero (duplicate-heavy inputs)."""
    n = points.shape[0]
    chosen = np.empty(K, dtype=np.int64)
    taken = np.zeros(n, dtype=bool)
    p = weights / weights.sum()
    chosen[0] = rng.choice(n, p=p)
    taken[chosen[0]] = True
    d2 = _sq_dists(points, points[chosen[0]][None, :])[:, 0]
    for k in range(1, K):
        mass = weights * d2
        total = mass.sum()
        if total <= 0.0:
            pool = np.flatnonzero(~taken)
            idx = int(pool[rng.integers(pool.size)])
        else:
            idx = int(rng.choice(n, p=mass / total))
        chosen[k] = idx
        taken[idx] = True
        d2 = np.minimum(d2, _sq_dists(points, points[idx][None, :])[:, 0])
    return chosen


def _repair_empty(
    assignments: np.ndarray, d2_assigned: np.ndarray, counts: np.ndarray, K: int
) -> None:
    """Move the farthest point of a multi-member cluster into each empty
    cluster (ascending index). Mutates assignments/counts in place."""
    d2 = d2_assigned.copy()
    for empty in range(K):
        if counts[empty] > 0:
            continue
        movable = counts[assignments] > 1
        if not movable.any():
            continue
        cand = np.where(movable, d2, -np.inf)
        far = int(np.argmax(cand))
        counts[assignments[far]] -= 1
        assignments[far] = empty
        counts[empty] += 1
        d2[far] = 0.0


def _lloyd(
    points: np.ndarray, weights: np.ndarray, K: int, cfg: KMeansConfig, rng: np.random.Generator
) -> KMeansResult:
    n, d = points.shape
    centroids = points[_seed_plusplus(points, weights, K, rng)].copy()
    prev_inertia = np.inf
    assignments = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    n_iter = 0
    for n_iter in range(1, cfg.max_iters + 1):
        d2 = _sq_dists(points, centroids)
        new_assign = np.argmin(d2, axis=1)
        counts = np.bincount(new_assign, minlength=K)
        if (counts == 0).any():
            _repair_empty(new_assign, d2[np.arange(n), new_assign], counts, K)
        unchanged = bool(np.array_equal(new_assign, assignments))
        assignments = new_assign

        wsum = np.bincount(assignments, weights=weights, minlength=K)
        centroids = np.zeros((K, d))
        for j in range(d):
            centroids[:, j] = np.bincount(assignments, weights=weights * points[:, j], minlength=K)
        centroids /= wsum[:, None]

        diffs = points - centroids[assignments]
        inertia = float(np.sum(weights * np.einsum("ij,ij->i", diffs, diffs)))
        history.append(inertia)
        converged = np.isfinite(prev_inertia) and prev_inertia - inertia <= cfg.tol * prev_inertia
        if unchanged or converged:
            break
        prev_inertia = inertia

    diffs = points - centroids[assignments]
    dists = np.sqrt(np.einsum("ij,ij->i", diffs, diffs))
    quant_error = float(np.sum(weights * dists) / weights.sum())
    return KMeansResult(centroids, assignments, inertia, quant_error, n_iter, history)


def kmeans(
    points: np.ndarray, cfg: KMeansConfig, weights: np.ndarray | None = None
) -> KMeansResult:
    """Best-of-n_init weighted Lloyd's algorithm with k-means++ seeding.

    Restart ties keep the earliest restart. Empty clusters are repaired so
    exactly K clusters are populated in the returned assignment.
    """
    cfg.validate()
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be a 2-d array")
    n = points.shape[0]
    if n < cfg.K:
        raise ValueError(f"need at least K={cfg.K} points, got {n}")
    if weights is None:
        weights = np.ones(n)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (n,) or (weights <= 0).any():
            raise ValueError("weights must be positive, one per point")

    best: KMeansResult | None = None
    for restart in range(cfg.n_init):
        rng = np.random.default_rng([cfg.seed, restart])
        res = _lloyd(points, weights, cfg.K, cfg, rng)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def build_vocab(
    embeddings: np.ndarray, cfg: KMeansConfig, page_id: str = ""
) -> BobVocabulary:
    """Cluster one page's embeddings into its bag of prototypes.

    Clusters are ordered by descending population; ties keep the cluster
    whose first member appears earliest.
    """
    embeddings = np.asarray(embeddings)
    n = embeddings.shape[0]
    if n < cfg.K:
        raise ValueError(f"page {page_id!r}: {n} embeddings < K={cfg.K}")
    res = kmeans(embeddings, cfg)
    populations = np.bincount(res.assignments, minlength=cfg.K)
    first_member = np.full(cfg.K, n, dtype=np.int64)
    uniq, first_idx = np.unique(res.assignments, return_index=True)
    first_member[uniq] = first_idx
    order = np.lexsort((first_member, -populations))

    vocab = BobVocabulary(
        page_id=page_id,
        prototypes=res.centroids[order].astype(np.float32),
        masses=(populations[order] / n).astype(np.float64),
        populations=populations[order].astype(np.uint32),
        n_components=n,
        quant_error=res.quant_error,
    )
    vocab.validate()
    return vocab


def write_vocab(path: str | Path, vocab: BobVocabulary) -> None:
    vocab.validate()
    header = {
        "page_id": vocab.page_id,
        "K": int(vocab.K),
        "d": int(vocab.d),
        "n_components": int(vocab.n_components),
        "quant_error": float(vocab.quant_error),
    }
    with open(path, "wb") as fh:
        artifacts.write_header(fh, artifacts.MAGIC_VOCAB, header)
        artifacts.write_array(fh, vocab.prototypes, "f4")
        artifacts.write_array(fh, vocab.masses, "f8")
        artifacts.write_array(fh, vocab.populations, "u4")


def read_vocab(path: str | Path) -> BobVocabulary:
    with open(path, "rb") as fh:
        _, header = artifacts.read_header(fh, artifacts.MAGIC_VOCAB)
        K, d = int(header["K"]), int(header["d"])
        vocab = BobVocabulary(
            page_id=header["page_id"],
            prototypes=artifacts.read_array(fh, (K, d), "f4"),
            masses=artifacts.read_array(fh, (K,), "f8"),
            populations=artifacts.read_array(fh, (K,), "u4"),
            n_components=int(header["n_components"]),
            quant_error=float(header["quant_error"]),
        )
    vocab.validate()
    return vocab
