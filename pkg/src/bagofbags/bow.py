"""Shared-codebook baselines: a global k-means codebook, tf-idf page
histograms with four distances, and mean/max pooled page vectors.

Two codebook sources share this machinery: "centroids" pools every
page's prototypes weighted by their populations; "raw_patches" pools the
raw component embeddings, bypassing per-page clustering.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import artifacts
from .vocab import BobVocabulary, KMeansConfig, kmeans

CODEBOOK_SOURCES = ("centroids", "raw_patches")
HIST_DISTANCES = ("l2", "cosine", "chi2", "hellinger")


@dataclass
class GlobalCodebook:
    codewords: np.ndarray  # (K_g, d) float32
    source: str  # "centroids" or "raw_patches"
    seed: int = 0

    @property
    def K_g(self) -> int:
        return self.codewords.shape[0]

    @property
    def d(self) -> int:
        return self.codewords.shape[1]

    def validate(self) -> None:
        if self.source not in CODEBOOK_SOURCES:
            raise ValueError(f"unknown codebook source {self.source!r}")
        if self.codewords.ndim != 2 or self.codewords.shape[0] < 1:
            raise ValueError(f"codewords must be (K_g, d), got {self.codewords.shape}")
        if not np.isfinite(self.codewords).all():
            raise ValueError("codewords contain non-finite values")


@dataclass
class IdfVector:
    idf: np.ndarray  # (K_g,) float64, every entry >= 1
    n_pages: int

    def validate(self) -> None:
        if (self.idf < 1.0 - 1e-12).any():
            raise ValueError("idf entries must be >= 1")
        if self.n_pages < 1:
            raise ValueError("idf needs at least one page")


@dataclass
class BowHistogram:
    page_id: str
    tf: np.ndarray  # (K_g,) float64, sums to 1
    weighted: np.ndarray  # (K_g,) float64 tf-idf, l2-normalized
    empty: bool = False  # page hit zero codewords; weighted stays all-zero


def pool_prototypes(vocabs: list[BobVocabulary]) -> tuple[np.ndarray, np.ndarray]:
    """Stack all pages' prototypes with their populations as weights."""
    pts = np.concatenate([v.prototypes for v in vocabs]).astype(np.float64)
    wts = np.concatenate([v.populations for v in vocabs]).astype(np.float64)
    return pts, wts


def fit_codebook(
    vectors: np.ndarray,
    K_g: int = 100,
    seed: int = 0,
    source: str = "raw_patches",
    weights: np.ndarray | None = None,
) -> GlobalCodebook:
    """Weighted k-means over the pooled vectors (weights are the
    prototype populations in centroids mode, absent in raw mode)."""
    if source not in CODEBOOK_SOURCES:
        raise ValueError(f"unknown codebook source {source!r}")
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.shape[0] < K_g:
        raise ValueError(f"{vectors.shape[0]} pooled vectors < K_g={K_g}")
    res = kmeans(vectors, KMeansConfig(K=K_g, seed=seed), weights=weights)
    book = GlobalCodebook(
        codewords=res.centroids.astype(np.float32), source=source, seed=seed
    )
    book.validate()
    return book


def fit_codebook_centroids(
    vocabs: list[BobVocabulary], K_g: int = 100, seed: int = 0
) -> GlobalCodebook:
    pts, wts = pool_prototypes(vocabs)
    return fit_codebook(pts, K_g, seed, source="centroids", weights=wts)


def fit_codebook_raw(
    embeddings: np.ndarray, K_g: int = 100, seed: int = 0
) -> GlobalCodebook:
    return fit_codebook(embeddings, K_g, seed, source="raw_patches")


def assign_codewords(vectors: np.ndarray, codebook: GlobalCodebook) -> np.ndarray:
    """Nearest codeword per vector; exact distance ties take the lowest
    codeword index (argmin keeps the first minimum)."""
    v = np.asarray(vectors, dtype=np.float64)
    c = codebook.codewords.astype(np.float64)
    vv = np.einsum("ij,ij->i", v, v)[:, None]
    cc = np.einsum("ij,ij->i", c, c)[None, :]
    d2 = vv + cc - 2.0 * (v @ c.T)
    return np.argmin(d2, axis=1)


def tf_from_vocab(vocab: BobVocabulary, codebook: GlobalCodebook) -> np.ndarray:
    """tf[r] = (1/n_I) * sum_a m_a * 1(nn(mu_a) = c_r)."""
    idx = assign_codewords(vocab.prototypes, codebook)
    counts = np.bincount(idx, weights=vocab.populations.astype(np.float64),
                         minlength=codebook.K_g)
    return counts / float(vocab.n_components)


def tf_from_embeddings(vectors: np.ndarray, codebook: GlobalCodebook) -> np.ndarray:
    """Each component embedding votes for its nearest codeword, weight 1/n_I."""
    vectors = np.asarray(vectors)
    if vectors.shape[0] == 0:
        raise ValueError("page has no embeddings")
    idx = assign_codewords(vectors, codebook)
    counts = np.bincount(idx, minlength=codebook.K_g).astype(np.float64)
    return counts / float(vectors.shape[0])


def idf(tf_rows: np.ndarray) -> IdfVector:
    """Smoothed idf[r] = ln((N+1)/(df[r]+1)) + 1 with df counting pages
    whose tf[r] is strictly positive."""
    rows = np.atleast_2d(np.asarray(tf_rows, dtype=np.float64))
    n_pages = rows.shape[0]
    df = (rows > 0).sum(axis=0)
    vec = np.log((n_pages + 1.0) / (df + 1.0)) + 1.0
    out = IdfVector(idf=vec, n_pages=n_pages)
    out.validate()
    return out


def histogram(page_id: str, tf_vec: np.ndarray, idf_vec: IdfVector) -> BowHistogram:
    """tf-idf weighting followed by l2 normalization; an all-zero row is
    kept all-zero and flagged."""
    tf_vec = np.asarray(tf_vec, dtype=np.float64)
    w = tf_vec * idf_vec.idf
    norm = float(np.linalg.norm(w))
    if norm == 0.0:
        return BowHistogram(page_id=page_id, tf=tf_vec, weighted=w, empty=True)
    return BowHistogram(page_id=page_id, tf=tf_vec, weighted=w / norm)


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"histogram shapes differ: {a.shape} vs {b.shape}")
    return a, b


def hist_distance(a: np.ndarray, b: np.ndarray, kind: str) -> float:
    """Distance between two page histograms (their weighted vectors).

    l2 and cosine accept any vectors (cosine of a zero vector is taken as
    the maximal distance 1); chi2 and hellinger require non-negative
    entries, and hellinger renormalizes to unit l1 mass first.
    """
    a, b = _check_pair(a, b)
    if kind == "l2":
        return float(np.linalg.norm(a - b))
    if kind == "cosine":
        na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
        if na == 0.0 or nb == 0.0:
            return 1.0
        return 1.0 - float(np.dot(a, b) / (na * nb))
    if kind == "chi2":
        if (a < 0).any() or (b < 0).any():
            raise ValueError("chi2 requires non-negative histograms")
        denom = a + b
        num = (a - b) ** 2
        mask = denom > 0  # 0/0 terms contribute nothing
        return float(0.5 * np.sum(num[mask] / denom[mask]))
    if kind == "hellinger":
        if (a < 0).any() or (b < 0).any():
            raise ValueError("hellinger requires non-negative histograms")
        sa, sb = float(a.sum()), float(b.sum())
        p = a / sa if sa > 0 else a
        q = b / sb if sb > 0 else b
        return float(np.linalg.norm(np.sqrt(p) - np.sqrt(q)) / np.sqrt(2.0))
    raise ValueError(f"unknown histogram distance {kind!r}")


def pool(vectors: np.ndarray, kind: str) -> np.ndarray:
    """Element-wise mean or max over a page's component embeddings."""
    vectors = np.asarray(vectors)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise ValueError(f"expected a nonempty (n, d) set, got {vectors.shape}")
    if kind == "mean":
        return vectors.mean(axis=0)
    if kind == "max":
        return vectors.max(axis=0)
    raise ValueError(f"unknown pooling {kind!r}")


def write_codebook(
    path: str | Path,
    codebook: GlobalCodebook,
    idf_vec: IdfVector,
    meta: dict | None = None,
) -> None:
    codebook.validate()
    idf_vec.validate()
    if idf_vec.idf.shape != (codebook.K_g,):
        raise ValueError("idf length does not match the codebook")
    header = {
        "K_g": int(codebook.K_g),
        "d": int(codebook.d),
        "source": codebook.source,
        "seed": int(codebook.seed),
        "n_pages": int(idf_vec.n_pages),
        **(meta or {}),
    }
    with open(path, "wb") as fh:
        artifacts.write_header(fh, artifacts.MAGIC_CODEBOOK, header)
        artifacts.write_array(fh, codebook.codewords, "f4")
        artifacts.write_array(fh, idf_vec.idf, "f8")


def read_codebook(path: str | Path) -> tuple[GlobalCodebook, IdfVector]:
    with open(path, "rb") as fh:
        _, header = artifacts.read_header(fh, artifacts.MAGIC_CODEBOOK)
        K_g, d = int(header["K_g"]), int(header["d"])
        book = GlobalCodebook(
            codewords=artifacts.read_array(fh, (K_g, d), "f4"),
            source=header["source"],
            seed=int(header["seed"]),
        )
        idf_vec = IdfVector(
            idf=artifacts.read_array(fh, (K_g,), "f8"),
            n_pages=int(header["n_pages"]),
        )
    book.validate()
    idf_vec.validate()
    return book, idf_vec


def write_histograms(path: str | Path, hists: list[BowHistogram], meta: dict | None = None) -> None:
    """Per-page float32 tf and weighted rows, keyed by a page-id table."""
    if not hists:
        raise ValueError("no histograms to write")
    K_g = hists[0].tf.shape[0]
    for h in hists:
        if h.tf.shape != (K_g,) or h.weighted.shape != (K_g,):
            raise ValueError(f"page {h.page_id!r}: histogram width != {K_g}")
    header = {"K_g": int(K_g), "n_pages": len(hists), **(meta or {})}
    with open(path, "wb") as fh:
        artifacts.write_header(fh, artifacts.MAGIC_HISTOGRAMS, header)
        artifacts.write_string_table(fh, [h.page_id for h in hists])
        for h in hists:
            artifacts.write_array(fh, h.tf, "f4")
            artifacts.write_array(fh, h.weighted, "f4")


def read_histograms(path: str | Path) -> list[BowHistogram]:
    out = []
    with open(path, "rb") as fh:
        _, header = artifacts.read_header(fh, artifacts.MAGIC_HISTOGRAMS)
        K_g = int(header["K_g"])
        page_ids = artifacts.read_string_table(fh, int(header["n_pages"]))
        for pid in page_ids:
            tf_row = artifacts.read_array(fh, (K_g,), "f4").astype(np.float64)
            w_row = artifacts.read_array(fh, (K_g,), "f4").astype(np.float64)
            out.append(
                BowHistogram(page_id=pid, tf=tf_row, weighted=w_row,
                             empty=not w_row.any())
            )
    return out
