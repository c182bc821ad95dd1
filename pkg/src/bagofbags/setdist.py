"""Set-to-set distances between prototype bags.

Three families: Chamfer (no correspondence constraint), assignment
distance (global bijection, equals W1 for uniform equal-size bags), and
mass-weighted exact optimal transport. Includes the quantization bound
checker relating component-level W1 to prototype-level OT.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from . import artifacts
from .vocab import BobVocabulary

METHOD_IDS = {
    "chamfer": 1,
    "hungarian": 2,
    "ot": 3,
    "bow-l2": 4,
    "bow-cosine": 5,
    "bow-chi2": 6,
    "bow-hellinger": 7,
    "meanpool": 8,
    "maxpool": 9,
}
METHOD_NAMES = {v: k for k, v in METHOD_IDS.items()}

MASS_TOL = 1e-6
FEAS_TOL = 1e-8


@dataclass
class TransportPlan:
    matrix: np.ndarray  # (K_I, K_J) float64, non-negative
    row_marginals: np.ndarray
    col_marginals: np.ndarray

    def validate(self) -> None:
        if (self.matrix < -FEAS_TOL).any():
            raise ValueError("transport plan has negative entries")
        if np.abs(self.matrix.sum(axis=1) - self.row_marginals).max() > FEAS_TOL:
            raise ValueError("row marginals violated")
        if np.abs(self.matrix.sum(axis=0) - self.col_marginals).max() > FEAS_TOL:
            raise ValueError("column marginals violated")


@dataclass
class EmdResult:
    distance: float
    plan: TransportPlan


@dataclass
class HungarianResult:
    distance: float
    permutation: np.ndarray  # row_to_col, (K_I,) int64


@dataclass
class Prop1Result:
    lhs: float
    bound: float
    holds: bool


def cost_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise L2 distances between row vectors, float64."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    aa = np.einsum("ij,ij->i", A, A)[:, None]
    bb = np.einsum("ij,ij->i", B, B)[None, :]
    d2 = np.maximum(aa + bb - 2.0 * (A @ B.T), 0.0)
    return np.sqrt(d2)


def chamfer(V_I: BobVocabulary, V_J: BobVocabulary) -> float:
    """Mean nearest-prototype distance, averaged over both directions.

    Ignores masses; well-defined for unequal K.
    """
    C = cost_matrix(V_I.prototypes, V_J.prototypes)
    return 0.5 * (float(C.min(axis=1).mean()) + float(C.min(axis=0).mean()))


def _solve_assignment(cost: list[list[float]], n: int, m: int) -> list[int]:
    """Shortest-augmenting-path assignment with potentials, O(n^2 m).

    Requires n <= m; returns row_to_col. Plain Python on purpose: the
    cubic inner loop is the dominant cost at every K used here, making
    runtime scale cleanly with problem size.
    """
    INF = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)  # p[j] = row matched to column j, 1-based, 0 free
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            row = cost[i0 - 1]
            ui0 = u[i0]
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - ui0 - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = [0] * n
    for j in range(1, m + 1):
        if p[j] > 0:
            row_to_col[p[j] - 1] = j - 1
    return row_to_col


def hungarian(
    V_I: BobVocabulary, V_J: BobVocabulary, allow_unequal: bool = False
) -> HungarianResult:
    """Optimal one-to-one prototype matching, cost averaged over matches.

    Equal bag sizes by default; with allow_unequal the smaller side is
    fully matched and the average is over min(K_I, K_J) pairs.
    """
    if V_I.K != V_J.K and not allow_unequal:
        raise ValueError(f"bag sizes differ ({V_I.K} vs {V_J.K}); pass allow_unequal")
    C = cost_matrix(V_I.prototypes, V_J.prototypes)
    transposed = C.shape[0] > C.shape[1]
    work = C.T if transposed else C
    n, m = work.shape
    row_to_col = _solve_assignment(work.tolist(), n, m)
    total = float(work[np.arange(n), row_to_col].sum())
    if transposed:
        perm = np.full(C.shape[0], -1, dtype=np.int64)
        for i, j in enumerate(row_to_col):
            perm[j] = i
    else:
        perm = np.asarray(row_to_col, dtype=np.int64)
    return HungarianResult(distance=total / n, permutation=perm)


def _solve_transport(C: np.ndarray, pi: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Exact transportation LP; returns the optimal plan."""
    nI, nJ = C.shape
    ones = np.ones(nI * nJ)
    var = np.arange(nI * nJ)
    rows = sparse.csr_matrix((ones, (np.repeat(np.arange(nI), nJ), var)), shape=(nI, nI * nJ))
    cols = sparse.csr_matrix((ones, (np.tile(np.arange(nJ), nI), var)), shape=(nJ, nI * nJ))
    res = linprog(
        C.ravel(),
        A_eq=sparse.vstack([rows, cols], format="csr"),
        b_eq=np.concatenate([pi, rho]),
        bounds=(0, None),
        method="highs",
    )
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return np.maximum(res.x.reshape(nI, nJ), 0.0)


def _emd_points(
    A: np.ndarray, B: np.ndarray, pi: np.ndarray, rho: np.ndarray
) -> EmdResult:
    pi = np.asarray(pi, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    if (pi < 0).any() or (rho < 0).any():
        raise ValueError("masses must be non-negative")
    if abs(pi.sum() - rho.sum()) > MASS_TOL:
        raise ValueError(f"mass sums differ: {pi.sum()} vs {rho.sum()}")
    pi = pi / pi.sum()
    rho = rho / rho.sum()

    keep_i = np.flatnonzero(pi > 0)
    keep_j = np.flatnonzero(rho > 0)
    C = cost_matrix(A, B)
    T_red = _solve_transport(C[np.ix_(keep_i, keep_j)], pi[keep_i], rho[keep_j])
    T = np.zeros_like(C)
    T[np.ix_(keep_i, keep_j)] = T_red
    plan = TransportPlan(matrix=T, row_marginals=pi, col_marginals=rho)
    plan.validate()
    return EmdResult(distance=float((T * C).sum()), plan=plan)


def emd(V_I: BobVocabulary, V_J: BobVocabulary) -> EmdResult:
    """Exact mass-weighted optimal transport between two bags."""
    return _emd_points(V_I.prototypes, V_J.prototypes, V_I.masses, V_J.masses)


def w1_uniform(points_A: np.ndarray, points_B: np.ndarray) -> float:
    """Exact W1 between uniform empirical measures on two point sets."""
    points_A = np.atleast_2d(np.asarray(points_A, dtype=np.float64))
    points_B = np.atleast_2d(np.asarray(points_B, dtype=np.float64))
    nA, nB = points_A.shape[0], points_B.shape[0]
    if nA == 0 or nB == 0:
        raise ValueError("point sets must be nonempty")
    return _emd_points(points_A, points_B, np.full(nA, 1.0 / nA), np.full(nB, 1.0 / nB)).distance


def prop1_check(
    emb_I: np.ndarray,
    emb_J: np.ndarray,
    vocab_I: BobVocabulary,
    vocab_J: BobVocabulary,
    slack: float = 1e-6,
) -> Prop1Result:
    """Check |W1(components) - OT(bags)| <= eps_I + eps_J.

    eps is each page's mean quantization distance; the bound follows from
    the assignment-induced transport plans between components and their
    prototypes.
    """
    emb_I = np.asarray(emb_I, dtype=np.float64)
    emb_J = np.asarray(emb_J, dtype=np.float64)
    for emb, vocab in ((emb_I, vocab_I), (emb_J, vocab_J)):
        if emb.shape[0] != vocab.n_components or emb.shape[1] != vocab.d:
            raise ValueError(
                f"vocabulary for page {vocab.page_id!r} does not match the embeddings "
                f"({emb.shape} vs n={vocab.n_components}, d={vocab.d})"
            )
    lhs = abs(w1_uniform(emb_I, emb_J) - emd(vocab_I, vocab_J).distance)
    bound = vocab_I.quant_error + vocab_J.quant_error
    return Prop1Result(lhs=lhs, bound=bound, holds=bool(lhs <= bound + slack))


# ------------------------------------------------------------- matrices


@dataclass
class DistanceMatrix:
    page_ids: list[str]
    method: str
    values: np.ndarray  # (N, N) float32

    def validate(self) -> None:
        n = len(self.page_ids)
        if self.values.shape != (n, n):
            raise ValueError("distance matrix shape does not match page count")
        if self.method not in METHOD_IDS:
            raise ValueError(f"unknown method {self.method!r}")
        if not np.isfinite(self.values).all():
            raise ValueError("distances must be finite")
        if np.abs(np.diagonal(self.values)).max(initial=0.0) != 0.0:
            raise ValueError("diagonal must be zero")

    def index_of(self, page_id: str) -> int:
        return self.page_ids.index(page_id)


def pairwise_distances(
    items: list,
    fn,
    page_ids: list[str],
    method: str,
    workers: int = 1,
) -> DistanceMatrix:
    """Symmetric N x N matrix of fn(items[i], items[j]) over i < j.

    fn must be a picklable callable when workers > 1; cells are
    independent, so the schedule never changes the result.
    """
    n = len(items)
    if len(page_ids) != n:
        raise ValueError("one page_id per item required")
    values = np.zeros((n, n), dtype=np.float32)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(
                ex.map(fn, (items[i] for i, _ in pairs), (items[j] for _, j in pairs), chunksize=64)
            )
    else:
        results = [fn(items[i], items[j]) for i, j in pairs]
    for (i, j), dist in zip(pairs, results):
        values[i, j] = values[j, i] = np.float32(dist)
    dm = DistanceMatrix(page_ids=list(page_ids), method=method, values=values)
    dm.validate()
    return dm


def write_distances(path: str | Path, dm: DistanceMatrix, meta: dict | None = None) -> None:
    """Fixed binary layout: magic, version, N, method id, page-id table,
    N x N float32. Provenance goes to a JSON sidecar, not the binary."""
    dm.validate()
    with open(path, "wb") as fh:
        fh.write(artifacts.MAGIC_DISTANCES)
        fh.write(struct.pack("<I", artifacts.FORMAT_VERSION))
        fh.write(struct.pack("<I", len(dm.page_ids)))
        fh.write(struct.pack("<B", METHOD_IDS[dm.method]))
        artifacts.write_string_table(fh, dm.page_ids)
        artifacts.write_array(fh, dm.values, "f4")
    if meta is not None:
        Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_distances(path: str | Path) -> DistanceMatrix:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != artifacts.MAGIC_DISTANCES:
            raise artifacts.ArtifactError(f"bad magic {magic!r}")
        version, n = struct.unpack("<II", fh.read(8))
        if version > artifacts.FORMAT_VERSION:
            raise artifacts.ArtifactError(f"unsupported version {version}")
        (method_id,) = struct.unpack("<B", fh.read(1))
        if method_id not in METHOD_NAMES:
            raise artifacts.ArtifactError(f"unknown method id {method_id}")
        page_ids = artifacts.read_string_table(fh, n)
        values = artifacts.read_array(fh, (n, n), "f4")
    dm = DistanceMatrix(page_ids=page_ids, method=METHOD_NAMES[method_id], values=values)
    dm.validate()
    return dm
