"""Run orchestration: one command per pipeline stage, cached artifacts.

Every stage writes its artifact under one run directory plus a
``<artifact>.meta.json`` sidecar recording the stage's config hash, input
hash, and seed. A stage is skipped when an existing sidecar matches both
hashes, so expensive stages (training, per-page clustering) are reused
across distance-method sweeps. All randomness funnels through
``RunConfig.seed``, fanned out to the per-module seeds.
"""

from __future__ import annotations

import json
import shutil
import time
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path

import numpy as np

from . import artifacts, bow, setdist
from .corpus import SynthConfig, generate_synth, load_manifest
from .encoder import (
    EncoderArch,
    TrainConfig,
    encode_batch,
    load_checkpoint,
    read_embeddings,
    save_checkpoint,
    train,
    write_embeddings,
)
from .pagegrid import (
    ExtractionConfig,
    PageExtraction,
    Patch,
    extract_file,
    read_patch_store,
    write_patch_store,
)
from .retrieval import (
    JoinLabels,
    evaluate,
    evaluate_rankings,
    format_metrics_table,
    profile,
    rank,
    separation,
    two_stage,
)
from .vocab import BobVocabulary, KMeansConfig, build_vocab, read_vocab, write_vocab


class ConfigError(ValueError):
    """Invalid configuration or flags; maps to exit code 2."""


class DataError(RuntimeError):
    """Missing or unusable data artifacts; maps to exit code 3."""


SET_METHODS = ("chamfer", "hungarian", "ot")
BOW_METHODS = ("bow-l2", "bow-cosine", "bow-chi2", "bow-hellinger")
POOL_METHODS = ("meanpool", "maxpool")
TWO_STAGE_BASE = "bow-cosine"

_FAMILIES = {
    **{m: "BoB" for m in SET_METHODS},
    **{m: "BoW" for m in BOW_METHODS},
    **{m: "Pooling" for m in POOL_METHODS},
}


@dataclass
class RunConfig:
    """All stage configs plus run-level knobs, serialized as one JSON doc.

    ``seed`` is authoritative: it is fanned out to every section that does
    not set its own seed explicitly in the JSON (a --seed override fans
    out unconditionally).
    """

    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    arch: EncoderArch = field(default_factory=EncoderArch)
    train: TrainConfig = field(default_factory=TrainConfig)
    kmeans: KMeansConfig = field(default_factory=KMeansConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    K_g: int = 100
    codebook_source: str = "centroids"
    method: str = "chamfer"
    ks: tuple[int, ...] = (1, 5, 10)
    M: int = 30
    seed: int = 0
    threads: int = 1
    ablate_Ks: tuple[int, ...] = (10, 20, 40)
    ablate_ds: tuple[int, ...] = (32, 128)
    explicit_seeds: frozenset = field(default=frozenset(), repr=False, compare=False)

    _SECTIONS = {
        "extraction": ExtractionConfig,
        "arch": EncoderArch,
        "train": TrainConfig,
        "kmeans": KMeansConfig,
        "synth": SynthConfig,
    }
    _TUPLE_KEYS = ("ks", "ablate_Ks", "ablate_ds")

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        kwargs: dict = {}
        explicit = set()
        for name, typ in cls._SECTIONS.items():
            if name not in raw:
                continue
            section = raw.pop(name)
            if not isinstance(section, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            if "seed" in section:
                explicit.add(name)
            section = dict(section)
            for key in ("conv_channels", "pages_per_cluster"):
                if key in section:
                    section[key] = tuple(section[key])
            try:
                kwargs[name] = typ(**section)
            except TypeError as exc:
                raise ConfigError(f"config section {name!r}: {exc}") from None
        for key in ("K_g", "codebook_source", "method", "M", "seed", "threads"):
            if key in raw:
                kwargs[key] = raw.pop(key)
        for key in cls._TUPLE_KEYS:
            if key in raw:
                kwargs[key] = tuple(raw.pop(key))
        if raw:
            raise ConfigError(f"unknown config keys: {sorted(raw)}")
        kwargs["explicit_seeds"] = frozenset(explicit)
        return cls(**kwargs)

    def apply_seed(self, force: bool = False) -> None:
        """Fan the master seed out to the per-stage configs."""
        for name in ("train", "kmeans", "synth"):
            if force or name not in self.explicit_seeds:
                getattr(self, name).seed = self.seed

    def validate(self) -> None:
        self.extraction.validate()
        self.train.validate()
        self.kmeans.validate()
        self.synth.validate()
        if self.arch.d < 1:
            raise ConfigError("arch.d must be >= 1")
        if self.arch.input_side != self.extraction.patch_side:
            raise ConfigError(
                f"arch.input_side={self.arch.input_side} must equal "
                f"extraction.patch_side={self.extraction.patch_side}"
            )
        if self.arch.input_side % (self.arch.stride ** len(self.arch.conv_channels)) != 0:
            raise ConfigError("arch.input_side must be divisible by stride^n_convs")
        if self.K_g < 1:
            raise ConfigError("K_g must be >= 1")
        if self.codebook_source not in bow.CODEBOOK_SOURCES:
            raise ConfigError(f"unknown codebook_source {self.codebook_source!r}")
        if self.method not in setdist.METHOD_IDS:
            raise ConfigError(f"unknown method {self.method!r}")
        if not self.ks or list(self.ks) != sorted(set(self.ks)) or self.ks[0] < 1:
            raise ConfigError("ks must be strictly increasing positive ints")
        if self.M < 1:
            raise ConfigError("M must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def to_dict(self) -> dict:
        out: dict = {name: getattr(self, name).to_dict() if hasattr(getattr(self, name), "to_dict") else dict(getattr(self, name).__dict__) for name in self._SECTIONS}
        out["arch"] = {**self.arch.__dict__, "conv_channels": list(self.arch.conv_channels)}
        for key in ("K_g", "codebook_source", "method", "M", "seed", "threads"):
            out[key] = getattr(self, key)
        for key in self._TUPLE_KEYS:
            out[key] = list(getattr(self, key))
        return out


def load_run_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from an optional JSON file plus flag overrides."""
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config root must be a JSON object")
    cfg = RunConfig.from_dict(raw)

    overrides = overrides or {}
    if "seed" in overrides:
        cfg.seed = int(overrides["seed"])
    if "K" in overrides:
        cfg.kmeans = replace(cfg.kmeans, K=int(overrides["K"]))
    if "Kg" in overrides:
        cfg.K_g = int(overrides["Kg"])
    if "d" in overrides:
        cfg.arch = replace(cfg.arch, d=int(overrides["d"]))
    if "M" in overrides:
        cfg.M = int(overrides["M"])
    if "method" in overrides:
        cfg.method = str(overrides["method"])
    if "codebook_source" in overrides:
        src = str(overrides["codebook_source"])
        cfg.codebook_source = {"raw": "raw_patches"}.get(src, src)
    if "threads" in overrides:
        cfg.threads = int(overrides["threads"])
    cfg.apply_seed(force="seed" in overrides)
    try:
        cfg.validate()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


# ------------------------------------------------------------ artifact cache

PRODUCED_BY = {
    "patches.bobp": "preprocess",
    "checkpoint.bobe": "train",
    "embeddings.bobx": "encode",
    "vocabs.json": "vocab",
    "codebook.bobc": "codebook",
    "histograms.bobh": "codebook",
}


def dist_artifact(method: str) -> str:
    return f"dist_{method}.bobd"


def _meta_path(path: Path) -> Path:
    return Path(str(path) + ".meta.json")


def _write_sidecar(path: Path, meta: dict) -> None:
    _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _is_cached(path: Path, meta: dict) -> bool:
    side = _meta_path(path)
    if not path.exists() or not side.is_file():
        return False
    try:
        old = json.loads(side.read_text())
    except json.JSONDecodeError:
        return False
    return all(old.get(k) == v for k, v in meta.items())


def _require(out_dir: Path, name: str, producer: str | None = None) -> Path:
    p = out_dir / name
    if not p.is_file():
        producer = producer or PRODUCED_BY.get(name, "the producing command")
        raise DataError(f"missing artifact {p}; run `bagofbags {producer}` first")
    return p


def _file_hash(*paths: Path) -> str:
    return artifacts.data_hash(*[Path(p).read_bytes() for p in paths])


# ------------------------------------------------------------------ commands


def cmd_synth(cfg: RunConfig, out_dir: Path) -> dict:
    out_dir = Path(out_dir)
    corpus_dir = out_dir / "corpus"
    manifest_path = corpus_dir / "manifest.csv"
    meta = {
        "command": "synth",
        "config_hash": artifacts.config_hash(cfg.synth.to_dict()),
        "input_hash": "",
        "seed": cfg.synth.seed,
    }
    if _is_cached(manifest_path, meta):
        man, _ = load_manifest(manifest_path)
        cached = True
    else:
        t0 = time.perf_counter()
        man = generate_synth(cfg.synth, corpus_dir)
        meta["seconds"] = round(time.perf_counter() - t0, 3)
        _write_sidecar(manifest_path, meta)
        cached = False
    return {
        "command": "synth",
        "cached": cached,
        "manifest": str(manifest_path),
        "n_pages": len(man),
        "n_clusters": len(man.cluster_sizes()),
        "cluster_sizes": {str(k): v for k, v in man.cluster_sizes().items()},
    }


def cmd_preprocess(cfg: RunConfig, out_dir: Path, manifest_path: str | Path) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    man, _ = load_manifest(manifest_path)
    store_path = out_dir / "patches.bobp"
    meta = {
        "command": "preprocess",
        "config_hash": artifacts.config_hash(cfg.extraction.to_dict()),
        "input_hash": _file_hash(Path(manifest_path), *[e.image_path for e in man.entries]),
        "seed": cfg.seed,
    }
    stats_path = out_dir / "patches.stats.jsonl"
    if _is_cached(store_path, meta):
        header, pages = read_patch_store(store_path)
        return {
            "command": "preprocess",
            "cached": True,
            "patch_store": str(store_path),
            "n_pages": len(pages),
            "n_excluded": len(man) - len(pages),
            "n_patches_total": int(sum(len(p[1]) for p in pages)),
        }

    extractions = [
        extract_file(e.image_path, cfg.extraction, page_id=e.page_id) for e in man.entries
    ]
    write_patch_store(store_path, extractions, cfg.extraction)
    with open(stats_path, "w") as fh:
        for ex in extractions:
            fh.write(ex.stats.to_json() + "\n")
    _write_sidecar(store_path, meta)
    excluded = [ex.page_id for ex in extractions if ex.excluded]
    return {
        "command": "preprocess",
        "cached": False,
        "patch_store": str(store_path),
        "stats": str(stats_path),
        "n_pages": len(extractions) - len(excluded),
        "n_excluded": len(excluded),
        "excluded_pages": excluded,
        "n_patches_total": int(sum(len(ex.patches) for ex in extractions if not ex.excluded)),
    }


def _load_store_pages(store_path: Path) -> list[PageExtraction]:
    _, raw = read_patch_store(store_path)
    if not raw:
        raise DataError(f"{store_path} holds no pages; every input page was excluded")
    pages = []
    for pid, patch_arr, labels in raw:
        patches = [
            Patch(data=patch_arr[i], component_label=int(labels[i]), page_id=pid)
            for i in range(len(patch_arr))
        ]
        pages.append(PageExtraction(page_id=pid, patches=patches, excluded=False))
    return pages


def cmd_train(cfg: RunConfig, out_dir: Path) -> dict:
    out_dir = Path(out_dir)
    store_path = _require(out_dir, "patches.bobp")
    ckpt_path = out_dir / "checkpoint.bobe"
    log_path = out_dir / "training_log.jsonl"
    meta = {
        "command": "train",
        "config_hash": artifacts.config_hash(
            {"train": cfg.train.__dict__, "arch": cfg.arch.__dict__}
        ),
        "input_hash": _file_hash(store_path),
        "seed": cfg.train.seed,
    }
    if _is_cached(ckpt_path, meta) and log_path.is_file():
        from .encoder import TrainingLog

        log = TrainingLog.read_jsonl(log_path)
        return {
            "command": "train",
            "cached": True,
            "checkpoint": str(ckpt_path),
            "epochs_run": len(log.epochs),
            "best_epoch": log.best_epoch,
            "stopped_early": log.stopped_early,
        }

    pages = _load_store_pages(store_path)
    t0 = time.perf_counter()
    params, log = train(pages, cfg.train, arch=cfg.arch)
    seconds = round(time.perf_counter() - t0, 3)
    save_checkpoint(
        ckpt_path,
        params,
        train_config={
            **cfg.train.__dict__,
            "arch": {**cfg.arch.__dict__, "conv_channels": list(cfg.arch.conv_channels)},
            "config_hash": meta["config_hash"],
            "input_hash": meta["input_hash"],
        },
    )
    log.write_jsonl(log_path)
    _write_sidecar(ckpt_path, meta)
    best = next(r for r in log.epochs if r.epoch == log.best_epoch)
    return {
        "command": "train",
        "cached": False,
        "checkpoint": str(ckpt_path),
        "epochs_run": len(log.epochs),
        "best_epoch": log.best_epoch,
        "stopped_early": log.stopped_early,
        "best_recon": best.recon,
        "best_total": best.total,
        "seconds": seconds,
    }


def cmd_encode(cfg: RunConfig, out_dir: Path) -> dict:
    out_dir = Path(out_dir)
    store_path = _require(out_dir, "patches.bobp")
    ckpt_path = _require(out_dir, "checkpoint.bobe")
    emb_path = out_dir / "embeddings.bobx"
    meta = {
        "command": "encode",
        "config_hash": artifacts.config_hash({"arch": cfg.arch.__dict__}),
        "input_hash": _file_hash(store_path, ckpt_path),
        "seed": cfg.seed,
    }
    if _is_cached(emb_path, meta):
        header, pages = read_embeddings(emb_path)
        return {
            "command": "encode",
            "cached": True,
            "embeddings": str(emb_path),
            "n_pages": len(pages),
            "d": int(header["d"]),
            "n_embeddings": int(sum(len(z) for _, z, _ in pages)),
        }

    params, _ = load_checkpoint(ckpt_path)
    _, raw = read_patch_store(store_path)
    if not raw:
        raise DataError(f"{store_path} holds no pages; every input page was excluded")
    encoded = []
    for pid, patch_arr, labels in raw:
        latents = encode_batch(params, patch_arr.astype(np.float32))
        encoded.append((pid, latents, labels.astype(np.uint32)))
    write_embeddings(emb_path, encoded, meta={"config_hash": meta["config_hash"], "input_hash": meta["input_hash"], "seed": cfg.seed})
    _write_sidecar(emb_path, meta)
    return {
        "command": "encode",
        "cached": False,
        "embeddings": str(emb_path),
        "n_pages": len(encoded),
        "d": int(encoded[0][1].shape[1]),
        "n_embeddings": int(sum(len(z) for _, z, _ in encoded)),
    }


def cmd_vocab(cfg: RunConfig, out_dir: Path) -> dict:
    out_dir = Path(out_dir)
    emb_path = _require(out_dir, "embeddings.bobx")
    index_path = out_dir / "vocabs.json"
    meta = {
        "command": "vocab",
        "config_hash": artifacts.config_hash(cfg.kmeans.__dict__),
        "input_hash": _file_hash(emb_path),
        "seed": cfg.kmeans.seed,
    }
    if _is_cached(index_path, meta):
        idx = json.loads(index_path.read_text())
        if all((out_dir / rec["file"]).is_file() for rec in idx["pages"]):
            return {
                "command": "vocab",
                "cached": True,
                "index": str(index_path),
                "n_pages": len(idx["pages"]),
                "K": idx["K"],
            }

    _, pages = read_embeddings(emb_path)
    vocab_dir = out_dir / "vocabs"
    vocab_dir.mkdir(exist_ok=True)
    index = []
    clamped = []
    t0 = time.perf_counter()
    for i, (pid, latents, _) in enumerate(pages):
        K_page = min(cfg.kmeans.K, len(latents))
        if K_page < cfg.kmeans.K:
            clamped.append(pid)
        vocab = build_vocab(latents, replace(cfg.kmeans, K=K_page), page_id=pid)
        fname = f"vocabs/v{i:05d}.bobv"
        write_vocab(out_dir / fname, vocab)
        index.append(
            {
                "page_id": pid,
                "file": fname,
                "K": K_page,
                "n_components": int(vocab.n_components),
                "quant_error": float(vocab.quant_error),
            }
        )
    index_path.write_text(
        json.dumps({"K": cfg.kmeans.K, "pages": index}, indent=2, sort_keys=True) + "\n"
    )
    _write_sidecar(index_path, meta)
    return {
        "command": "vocab",
        "cached": False,
        "index": str(index_path),
        "n_pages": len(index),
        "K": cfg.kmeans.K,
        "clamped_pages": clamped,
        "mean_quant_error": float(np.mean([rec["quant_error"] for rec in index])),
        "seconds": round(time.perf_counter() - t0, 3),
    }


def _load_vocabs(out_dir: Path) -> list[BobVocabulary]:
    index_path = _require(out_dir, "vocabs.json")
    idx = json.loads(index_path.read_text())
    vocabs = []
    for rec in idx["pages"]:
        path = out_dir / rec["file"]
        if not path.is_file():
            raise DataError(f"missing artifact {path}; run `bagofbags vocab` first")
        vocabs.append(read_vocab(path))
    return vocabs


def cmd_codebook(cfg: RunConfig, out_dir: Path) -> dict:
    out_dir = Path(out_dir)
    book_path = out_dir / "codebook.bobc"
    hist_path = out_dir / "histograms.bobh"
    source = cfg.codebook_source

    if source == "centroids":
        input_path = _require(out_dir, "vocabs.json")
    else:
        input_path = _require(out_dir, "embeddings.bobx")
    meta = {
        "command": "codebook",
        "config_hash": artifacts.config_hash(
            {"K_g": cfg.K_g, "source": source, "seed": cfg.seed}
        ),
        "input_hash": _file_hash(input_path),
        "seed": cfg.seed,
    }
    if _is_cached(book_path, meta) and hist_path.is_file():
        book, idf_vec = bow.read_codebook(book_path)
        return {
            "command": "codebook",
            "cached": True,
            "codebook": str(book_path),
            "histograms": str(hist_path),
            "K_g": book.K_g,
            "source": book.source,
            "n_pages": idf_vec.n_pages,
        }

    t0 = time.perf_counter()
    if source == "centroids":
        vocabs = _load_vocabs(out_dir)
        prototypes, populations = bow.pool_prototypes(vocabs)
        book = bow.fit_codebook(
            prototypes, K_g=cfg.K_g, seed=cfg.seed, source=source, weights=populations
        )
        page_ids = [v.page_id for v in vocabs]
        tf_rows = np.stack([bow.tf_from_vocab(v, book) for v in vocabs])
    else:
        _, pages = read_embeddings(input_path)
        pooled = np.concatenate([z for _, z, _ in pages])
        book = bow.fit_codebook(pooled, K_g=cfg.K_g, seed=cfg.seed, source=source)
        page_ids = [pid for pid, _, _ in pages]
        tf_rows = np.stack([bow.tf_from_embeddings(z, book) for _, z, _ in pages])

    idf_vec = bow.idf(tf_rows)
    hists = [bow.histogram(pid, tf_rows[i], idf_vec) for i, pid in enumerate(page_ids)]
    prov = {"config_hash": meta["config_hash"], "input_hash": meta["input_hash"]}
    bow.write_codebook(book_path, book, idf_vec, meta=prov)
    bow.write_histograms(hist_path, hists, meta=prov)
    _write_sidecar(book_path, meta)
    return {
        "command": "codebook",
        "cached": False,
        "codebook": str(book_path),
        "histograms": str(hist_path),
        "K_g": book.K_g,
        "source": source,
        "n_pages": len(hists),
        "n_empty_pages": int(sum(h.empty for h in hists)),
        "seconds": round(time.perf_counter() - t0, 3),
    }


def hungarian_distance(a: BobVocabulary, b: BobVocabulary) -> float:
    return setdist.hungarian(a, b, allow_unequal=True).distance


def ot_distance(a: BobVocabulary, b: BobVocabulary) -> float:
    return setdist.emd(a, b).distance


_SET_FNS = {"chamfer": setdist.chamfer, "hungarian": hungarian_distance, "ot": ot_distance}


def cmd_dist(cfg: RunConfig, out_dir: Path, method: str | None = None) -> dict:
    out_dir = Path(out_dir)
    method = method or cfg.method
    if method not in setdist.METHOD_IDS:
        raise ConfigError(f"unknown method {method!r}")
    dist_path = out_dir / dist_artifact(method)

    if method in SET_METHODS:
        input_path = _require(out_dir, "vocabs.json")
    elif method in BOW_METHODS:
        input_path = _require(out_dir, "histograms.bobh")
    else:
        input_path = _require(out_dir, "embeddings.bobx")
    meta = {
        "command": "dist",
        "method": method,
        "config_hash": artifacts.config_hash({"method": method}),
        "input_hash": _file_hash(input_path),
        "seed": cfg.seed,
    }
    if _is_cached(dist_path, meta):
        dm = setdist.read_distances(dist_path)
        return {
            "command": "dist",
            "cached": True,
            "method": method,
            "distances": str(dist_path),
            "n_pages": len(dm.page_ids),
        }

    t0 = time.perf_counter()
    if method in SET_METHODS:
        vocabs = _load_vocabs(out_dir)
        page_ids = [v.page_id for v in vocabs]
        dm = setdist.pairwise_distances(
            vocabs, _SET_FNS[method], page_ids, method, workers=cfg.threads
        )
    elif method in BOW_METHODS:
        hists = bow.read_histograms(input_path)
        page_ids = [h.page_id for h in hists]
        items = [h.weighted.astype(np.float64) for h in hists]
        fn = partial(bow.hist_distance, kind=method.split("-", 1)[1])
        dm = setdist.pairwise_distances(items, fn, page_ids, method, workers=cfg.threads)
    else:
        _, pages = read_embeddings(input_path)
        page_ids = [pid for pid, _, _ in pages]
        kind = "mean" if method == "meanpool" else "max"
        items = [bow.pool(z, kind) for _, z, _ in pages]
        fn = partial(bow.hist_distance, kind="cosine" if method == "meanpool" else "l2")
        dm = setdist.pairwise_distances(items, fn, page_ids, method, workers=cfg.threads)

    off_diag = dm.values[~np.eye(len(dm.page_ids), dtype=bool)] if len(dm.page_ids) > 1 else np.zeros(1)
    setdist.write_distances(dist_path, dm, meta=meta)
    return {
        "command": "dist",
        "cached": False,
        "method": method,
        "distances": str(dist_path),
        "n_pages": len(dm.page_ids),
        "mean_distance": float(off_diag.mean()),
        "max_distance": float(off_diag.max()),
        "seconds": round(time.perf_counter() - t0, 3),
    }


def cmd_retrieve(cfg: RunConfig, out_dir: Path, method: str | None = None) -> dict:
    out_dir = Path(out_dir)
    method = method or cfg.method
    dist_path = _require(out_dir, dist_artifact(method), f"dist --method {method}")
    dm = setdist.read_distances(dist_path)
    k = max(cfg.ks)
    rankings = {}
    for query in dm.page_ids:
        ranking = rank(query, dm)
        rankings[query] = [
            [pid, float(dist)] for pid, dist in zip(ranking.ranked[:k], ranking.distances[:k])
        ]
    out_path = out_dir / f"rankings_{method}.json"
    out_path.write_text(
        json.dumps({"method": method, "k": k, "rankings": rankings}, indent=2, sort_keys=True)
        + "\n"
    )
    return {
        "command": "retrieve",
        "method": method,
        "rankings": str(out_path),
        "n_queries": len(rankings),
        "k": k,
    }


def _labels_for(dm_page_ids: list[str], manifest_path: str | Path) -> JoinLabels:
    _, labels = load_manifest(manifest_path)
    missing = [p for p in dm_page_ids if p not in labels.cluster_of]
    if missing:
        raise DataError(
            f"manifest {manifest_path} lacks labels for pages {missing[:3]} "
            f"({len(missing)} total)"
        )
    return labels


def _subset_labels(labels: JoinLabels, page_ids: list[str]) -> JoinLabels:
    return JoinLabels.from_pairs([(p, labels.cluster_of[p]) for p in page_ids])


def cmd_eval(
    cfg: RunConfig, out_dir: Path, manifest_path: str | Path, method: str | None = None
) -> dict:
    out_dir = Path(out_dir)
    if method is not None:
        methods = [method]
    else:
        methods = [m for m in setdist.METHOD_IDS if (out_dir / dist_artifact(m)).is_file()]
        if not methods:
            raise DataError(
                f"no distance matrices under {out_dir}; run `bagofbags dist --method <m>` first"
            )
    rows = []
    reports = {}
    for m in methods:
        dm = setdist.read_distances(_require(out_dir, dist_artifact(m), f"dist --method {m}"))
        labels = _subset_labels(_labels_for(dm.page_ids, manifest_path), dm.page_ids)
        report = evaluate(dm, labels, ks=cfg.ks)
        reports[m] = report.to_dict()
        rows.append((_FAMILIES.get(m, "?"), m, report))
    table = format_metrics_table(rows)
    metrics_path = out_dir / "metrics.json"
    metrics_path.write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n")
    return {
        "command": "eval",
        "metrics": str(metrics_path),
        "methods": reports,
        "table": table,
    }


class _OnTheFlyOt:
    """Memoized pairwise OT over a set of per-page vocabularies."""

    def __init__(self, vocabs: list[BobVocabulary]):
        self.by_id = {v.page_id: v for v in vocabs}
        self.cache: dict[tuple[str, str], float] = {}
        self.calls = 0

    def __call__(self, a: str, b: str) -> float:
        key = (a, b) if a <= b else (b, a)
        if key not in self.cache:
            self.calls += 1
            self.cache[key] = ot_distance(self.by_id[a], self.by_id[b])
        return self.cache[key]


def cmd_rerank(cfg: RunConfig, out_dir: Path, manifest_path: str | Path) -> dict:
    out_dir = Path(out_dir)
    base_path = _require(
        out_dir, dist_artifact(TWO_STAGE_BASE), f"dist --method {TWO_STAGE_BASE}"
    )
    base_dm = setdist.read_distances(base_path)
    vocabs = _load_vocabs(out_dir)
    have = {v.page_id for v in vocabs}
    missing = [p for p in base_dm.page_ids if p not in have]
    if missing:
        raise DataError(f"vocabs missing for pages {missing[:3]}; run `bagofbags vocab` first")
    labels = _subset_labels(_labels_for(base_dm.page_ids, manifest_path), base_dm.page_ids)

    ot_fn = _OnTheFlyOt(vocabs)
    t0 = time.perf_counter()
    rankings = [two_stage(q, base_dm, ot_fn, M=cfg.M) for q in base_dm.page_ids]
    seconds = round(time.perf_counter() - t0, 3)
    report = evaluate_rankings(rankings, labels, ks=cfg.ks)

    k = max(cfg.ks)
    out_path = out_dir / f"rerank_M{cfg.M}.json"
    payload = {
        "base": TWO_STAGE_BASE,
        "rerank": "ot",
        "M": cfg.M,
        "metrics": report.to_dict(),
        "rankings": {
            r.query: [[pid, float(d)] for pid, d in zip(r.ranked[:k], r.distances[:k])]
            for r in rankings
        },
    }
    out_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    table = format_metrics_table([("TwoStage", f"{TWO_STAGE_BASE}+ot(M={cfg.M})", report)])
    return {
        "command": "rerank",
        "output": str(out_path),
        "M": cfg.M,
        "base": TWO_STAGE_BASE,
        "metrics": report.to_dict(),
        "ot_pairs_computed": ot_fn.calls,
        "seconds": seconds,
        "table": table,
    }


def cmd_separation(
    cfg: RunConfig, out_dir: Path, manifest_path: str | Path, method: str | None = None
) -> dict:
    out_dir = Path(out_dir)
    method = method or cfg.method
    dm = setdist.read_distances(
        _require(out_dir, dist_artifact(method), f"dist --method {method}")
    )
    labels = _subset_labels(_labels_for(dm.page_ids, manifest_path), dm.page_ids)
    report = separation(dm, labels)
    out_path = out_dir / f"separation_{method}.json"
    out_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return {"command": "separation", "method": method, "output": str(out_path), **report.to_dict()}


def cmd_profile(cfg: RunConfig, out_dir: Path) -> dict:
    """Median per-query retrieval time for every method with artifacts."""
    out_dir = Path(out_dir)
    methods: dict = {}

    vocabs = None
    if (out_dir / "vocabs.json").is_file():
        vocabs = _load_vocabs(out_dir)
        by_id = {v.page_id: v for v in vocabs}
        ids = [v.page_id for v in vocabs]
        for name in SET_METHODS:
            fn = _SET_FNS[name]
            methods[name] = lambda q, fn=fn: [
                fn(by_id[q], by_id[g]) for g in ids if g != q
            ]
    if (out_dir / "histograms.bobh").is_file():
        hists = bow.read_histograms(out_dir / "histograms.bobh")
        hist_by_id = {h.page_id: h.weighted.astype(np.float64) for h in hists}
        hids = [h.page_id for h in hists]
        for name in BOW_METHODS:
            kind = name.split("-", 1)[1]
            methods[name] = lambda q, kind=kind: [
                bow.hist_distance(hist_by_id[q], hist_by_id[g], kind) for g in hids if g != q
            ]
    if vocabs is not None and (out_dir / dist_artifact(TWO_STAGE_BASE)).is_file():
        base_dm = setdist.read_distances(out_dir / dist_artifact(TWO_STAGE_BASE))
        if all(p in {v.page_id for v in vocabs} for p in base_dm.page_ids):
            methods["two_stage"] = lambda q: two_stage(
                q, base_dm, _OnTheFlyOt(vocabs), M=cfg.M
            )
    if not methods:
        raise DataError(
            f"no artifacts to profile under {out_dir}; run `bagofbags vocab` or "
            "`bagofbags codebook` first"
        )

    queries = (
        [v.page_id for v in vocabs] if vocabs is not None else [h.page_id for h in hists]
    )[:10]
    prof = profile(methods, queries)
    out_path = out_dir / "profile.json"
    out_path.write_text(json.dumps(prof, indent=2, sort_keys=True) + "\n")
    return {
        "command": "profile",
        "output": str(out_path),
        "n_queries": len(queries),
        "median_ms_per_query": prof,
    }


# -------------------------------------------------------------------- ablate

_SHARED_ARTIFACTS = (
    "patches.bobp",
    "checkpoint.bobe",
    "training_log.jsonl",
    "embeddings.bobx",
)


def _seed_subrun(parent: Path, child: Path) -> None:
    """Copy reusable artifacts into a sweep subdir; the per-stage hash
    checks decide whether each copy is actually valid there."""
    child.mkdir(parents=True, exist_ok=True)
    for name in _SHARED_ARTIFACTS:
        src = parent / name
        if src.is_file():
            shutil.copy2(src, child / name)
            side = _meta_path(src)
            if side.is_file():
                shutil.copy2(side, _meta_path(child / name))


def run_chain(cfg: RunConfig, out_dir: Path, manifest_path: str | Path, methods: list[str]) -> dict:
    """Run every stage needed to evaluate the given methods."""
    out_dir = Path(out_dir)
    summary = {
        "preprocess": cmd_preprocess(cfg, out_dir, manifest_path),
        "train": cmd_train(cfg, out_dir),
        "encode": cmd_encode(cfg, out_dir),
    }
    if any(m in SET_METHODS for m in methods) or cfg.codebook_source == "centroids":
        summary["vocab"] = cmd_vocab(cfg, out_dir)
    if any(m in BOW_METHODS for m in methods):
        summary["codebook"] = cmd_codebook(cfg, out_dir)
    for m in methods:
        summary[f"dist_{m}"] = cmd_dist(cfg, out_dir, method=m)
    summary["eval"] = cmd_eval(cfg, out_dir, manifest_path, method=None)
    return summary


def cmd_ablate(cfg: RunConfig, out_dir: Path, manifest_path: str | Path) -> dict:
    """Sweep vocabulary size, latent width, sparsity, and normalization
    mode; each point reruns only the stages its change invalidates."""
    out_dir = Path(out_dir)
    points: list[tuple[str, object, RunConfig]] = []
    for K in cfg.ablate_Ks:
        points.append(("K", K, replace(cfg, kmeans=replace(cfg.kmeans, K=int(K)))))
    for d in cfg.ablate_ds:
        points.append(("d", d, replace(cfg, arch=replace(cfg.arch, d=int(d)))))
    for flag in (True, False):
        points.append(
            ("sparsity", flag, replace(cfg, train=replace(cfg.train, sparsity_enabled=flag)))
        )
    for mode in ("preserved", "stretched"):
        points.append(
            (
                "normalization",
                mode,
                replace(cfg, extraction=replace(cfg.extraction, normalization_mode=mode)),
            )
        )

    rows = []
    for name, value, sub_cfg in points:
        sub_out = out_dir / "ablate" / f"{name}_{value}"
        _seed_subrun(out_dir, sub_out)
        sub_cfg.validate()
        chain = run_chain(sub_cfg, sub_out, manifest_path, methods=[cfg.method])
        metrics = chain["eval"]["methods"][cfg.method]
        rows.append({"sweep": name, "value": value, "metrics": metrics})

    out_path = out_dir / "ablate.json"
    out_path.write_text(json.dumps({"method": cfg.method, "rows": rows}, indent=2, sort_keys=True) + "\n")
    lines = []
    for row in rows:
        m = row["metrics"]
        lines.append(
            f"{row['sweep']}={row['value']}: hit@1={m['hit_at']['1']:.3f} "
            f"mrr={m['mrr']:.3f} macro_f1@1={m['macro_f1_at_1']:.3f}"
        )
    return {
        "command": "ablate",
        "method": cfg.method,
        "output": str(out_path),
        "rows": rows,
        "table": "\n".join(lines),
    }
