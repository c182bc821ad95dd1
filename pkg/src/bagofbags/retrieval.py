"""Ranking, retrieval metrics, separation diagnostics, two-stage
reranking, and wall-clock profiling over precomputed distance matrices.

Relevance is cluster co-membership: for a query page, every other page
of its join cluster is relevant. Queries whose cluster has no other
member are excluded from aggregation.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from .setdist import DistanceMatrix


@dataclass
class JoinLabels:
    page_ids: list[str]
    cluster_of: dict[str, int]

    @classmethod
    def from_pairs(cls, pairs: list[tuple[str, int]]) -> "JoinLabels":
        ids = [p for p, _ in pairs]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate page ids in labels")
        return cls(page_ids=ids, cluster_of=dict(pairs))

    def clusters(self) -> dict[int, list[str]]:
        out: dict[int, list[str]] = {}
        for pid in self.page_ids:
            out.setdefault(self.cluster_of[pid], []).append(pid)
        return out

    def validate(self) -> None:
        if set(self.page_ids) != set(self.cluster_of):
            raise ValueError("labels do not partition the listed pages")
        if any(len(members) < 1 for members in self.clusters().values()):
            raise ValueError("empty cluster")

    def n_relevant(self, page_id: str) -> int:
        c = self.cluster_of[page_id]
        return sum(1 for p in self.page_ids if p != page_id and self.cluster_of[p] == c)


@dataclass
class RankedList:
    query: str
    ranked: list[str]
    distances: np.ndarray

    def validate(self) -> None:
        if self.query in self.ranked:
            raise ValueError("query present in its own ranking")
        if (np.diff(self.distances) < 0).any():
            raise ValueError("distances not non-decreasing")


@dataclass
class MetricsReport:
    hit_at: dict[int, float]
    map_at: dict[int, float]
    mrr: float
    macro_f1_at_1: float
    n_queries_used: int

    def to_dict(self) -> dict:
        return {
            "hit_at": {str(k): v for k, v in self.hit_at.items()},
            "map_at": {str(k): v for k, v in self.map_at.items()},
            "mrr": self.mrr,
            "macro_f1_at_1": self.macro_f1_at_1,
            "n_queries_used": self.n_queries_used,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class SeparationReport:
    intra_mean: float
    inter_mean: float
    gap: float
    ks: float
    auc: float
    cohens_d: float

    def to_dict(self) -> dict:
        return {
            "intra_mean": self.intra_mean,
            "inter_mean": self.inter_mean,
            "gap": self.gap,
            "ks": self.ks,
            "auc": self.auc,
            "cohens_d": self.cohens_d,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def rank(query: str, dmatrix: DistanceMatrix, labels: JoinLabels | None = None) -> RankedList:
    """All other pages in ascending distance; exact ties fall back to
    page-id lexical order so rankings are deterministic."""
    ids = dmatrix.page_ids
    if query not in ids:
        raise ValueError(f"unknown query page {query!r}")
    qi = ids.index(query)
    order = sorted(
        (i for i in range(len(ids)) if i != qi),
        key=lambda i: (dmatrix.values[qi, i], ids[i]),
    )
    return RankedList(
        query=query,
        ranked=[ids[i] for i in order],
        distances=dmatrix.values[qi, order].astype(np.float64),
    )


def _ap_at_k(rel: np.ndarray, k: int, n_relevant: int) -> float:
    """Truncated average precision: (1/min(k, R)) * sum rel_i * P@i."""
    top = rel[:k]
    hits = np.cumsum(top)
    precision = hits / np.arange(1, top.size + 1)
    return float(np.sum(top * precision) / min(k, n_relevant))


def evaluate(
    dmatrix: DistanceMatrix, labels: JoinLabels, ks: tuple[int, ...] = (1, 5, 10)
) -> MetricsReport:
    """Hit@k, mAP@k, MRR, and MacroF1@1 over all usable queries."""
    labels.validate()
    missing = [p for p in dmatrix.page_ids if p not in labels.cluster_of]
    if missing:
        raise ValueError(f"pages without labels: {missing[:3]}")
    return evaluate_rankings([rank(q, dmatrix) for q in dmatrix.page_ids], labels, ks)


def evaluate_rankings(
    rankings: list[RankedList], labels: JoinLabels, ks: tuple[int, ...] = (1, 5, 10)
) -> MetricsReport:
    """Metrics over precomputed per-query rankings; queries whose cluster
    has no other member are skipped."""
    labels.validate()
    hit_sums = {k: 0.0 for k in ks}
    ap_sums = {k: 0.0 for k in ks}
    mrr_sum = 0.0
    used = 0
    truths: list[int] = []
    predictions: list[int] = []
    for ranking in rankings:
        query = ranking.query
        n_rel = labels.n_relevant(query)
        if n_rel == 0:
            continue
        used += 1
        qc = labels.cluster_of[query]
        rel = np.array([labels.cluster_of[p] == qc for p in ranking.ranked], dtype=np.float64)
        first = int(np.argmax(rel)) + 1  # rel has at least one hit
        mrr_sum += 1.0 / first
        for k in ks:
            hit_sums[k] += 1.0 if rel[:k].any() else 0.0
            ap_sums[k] += _ap_at_k(rel, k, n_rel)
        truths.append(qc)
        predictions.append(labels.cluster_of[ranking.ranked[0]])
    if used == 0:
        raise ValueError("no query has a positive mate")

    f1s = []
    for cluster in sorted(set(truths)):  # clusters with at least one used query
        tp = sum(1 for t, p in zip(truths, predictions) if t == cluster and p == cluster)
        fp = sum(1 for t, p in zip(truths, predictions) if t != cluster and p == cluster)
        fn = sum(1 for t, p in zip(truths, predictions) if t == cluster and p != cluster)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2.0 * prec * rec / (prec + rec) if prec + rec else 0.0)

    return MetricsReport(
        hit_at={k: hit_sums[k] / used for k in ks},
        map_at={k: ap_sums[k] / used for k in ks},
        mrr=mrr_sum / used,
        macro_f1_at_1=float(np.mean(f1s)),
        n_queries_used=used,
    )


def separation(dmatrix: DistanceMatrix, labels: JoinLabels) -> SeparationReport:
    """Intra- vs inter-cluster distance statistics: mean gap, KS,
    tie-aware AUC via rank statistics, and Cohen's d."""
    labels.validate()
    ids = dmatrix.page_ids
    intra, inter = [], []
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            same = labels.cluster_of[ids[i]] == labels.cluster_of[ids[j]]
            (intra if same else inter).append(float(dmatrix.values[i, j]))
    if not intra or not inter:
        raise ValueError("need at least one intra and one inter pair")
    intra_arr = np.array(intra)
    inter_arr = np.array(inter)

    support = np.sort(np.concatenate([intra_arr, inter_arr]))
    ecdf_intra = np.searchsorted(np.sort(intra_arr), support, side="right") / intra_arr.size
    ecdf_inter = np.searchsorted(np.sort(inter_arr), support, side="right") / inter_arr.size
    ks = float(np.abs(ecdf_intra - ecdf_inter).max())

    # P(inter > intra) with ties counting half, exact via midranks
    ranks = rankdata(np.concatenate([intra_arr, inter_arr]))
    u = float(ranks[intra_arr.size :].sum()) - inter_arr.size * (inter_arr.size + 1) / 2.0
    auc = u / (intra_arr.size * inter_arr.size)

    gap = float(inter_arr.mean() - intra_arr.mean())
    n1, n2 = intra_arr.size, inter_arr.size
    var1 = float(intra_arr.var(ddof=1)) if n1 > 1 else 0.0
    var2 = float(inter_arr.var(ddof=1)) if n2 > 1 else 0.0
    dof = n1 + n2 - 2
    pooled = np.sqrt(((n1 - 1) * var1 + (n2 - 1) * var2) / dof) if dof > 0 else 0.0
    if pooled > 0:
        cohens_d = gap / pooled
    else:
        cohens_d = 0.0 if gap == 0.0 else float(np.inf) * np.sign(gap)

    return SeparationReport(
        intra_mean=float(intra_arr.mean()),
        inter_mean=float(inter_arr.mean()),
        gap=gap,
        ks=ks,
        auc=float(auc),
        cohens_d=float(cohens_d),
    )


def two_stage(
    query: str,
    bow_dmatrix: DistanceMatrix,
    bob_ot: DistanceMatrix | Callable[[str, str], float],
    M: int = 30,
) -> RankedList:
    """Shortlist the top-M pages by the first-stage matrix, rerank the
    shortlist by the second-stage distance, and keep the remaining pages
    in their first-stage order (their distances stay first-stage values,
    so the output mixes scales and is a ranking, not a metric row)."""
    if M < 1:
        raise ValueError("M must be >= 1")
    base = rank(query, bow_dmatrix)
    M = min(M, len(base.ranked))

    if isinstance(bob_ot, DistanceMatrix):
        ids = bob_ot.page_ids
        qi = ids.index(query)

        def ot_distance(candidate: str) -> float:
            return float(bob_ot.values[qi, ids.index(candidate)])

    else:
        def ot_distance(candidate: str) -> float:
            return float(bob_ot(query, candidate))

    shortlist = base.ranked[:M]
    scored = sorted((ot_distance(p), p) for p in shortlist)
    ranked = [p for _, p in scored] + base.ranked[M:]
    distances = np.concatenate(
        [np.array([d for d, _ in scored]), base.distances[M:]]
    )
    return RankedList(query=query, ranked=ranked, distances=distances)


def profile(
    methods: dict[str, Callable[[str], object]],
    queries: list[str],
) -> dict[str, float]:
    """Median wall-clock milliseconds per query for each named method."""
    out = {}
    for name, fn in methods.items():
        times = []
        for q in queries:
            t0 = time.perf_counter()
            fn(q)
            times.append((time.perf_counter() - t0) * 1e3)
        out[name] = float(np.median(times))
    return out


_COLUMNS = ("Hit@1", "mAP@1", "Hit@5", "mAP@5", "Hit@10", "mAP@10", "MRR", "MacroF1@1")


def format_metrics_table(rows: list[tuple[str, str, MetricsReport]]) -> str:
    """Fixed-width table, one row per (family, method, report)."""
    header = f"{'Family':<14}{'Method':<24}" + "".join(f"{c:>10}" for c in _COLUMNS)
    lines = [header, "-" * len(header)]
    for family, method, rep in rows:
        vals = [
            rep.hit_at.get(1), rep.map_at.get(1),
            rep.hit_at.get(5), rep.map_at.get(5),
            rep.hit_at.get(10), rep.map_at.get(10),
            rep.mrr, rep.macro_f1_at_1,
        ]
        cells = "".join(f"{v:>10.3f}" if v is not None else f"{'-':>10}" for v in vals)
        lines.append(f"{family:<14}{method:<24}" + cells)
    return "\n".join(lines)
