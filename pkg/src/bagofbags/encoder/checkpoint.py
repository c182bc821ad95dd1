"""Checkpoint files: JSON header plus raw little-endian float32 tensors.

The header carries the architecture, a training-config echo, the seed,
and a tensor manifest (name, shape, byte offset) in serialization order.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .. import artifacts
from .model import TENSOR_ORDER, EncoderArch, EncoderParams


def save_checkpoint(
    path: str | Path, params: EncoderParams, train_config: dict | None = None
) -> None:
    params.validate()
    manifest = []
    offset = 0
    for name in TENSOR_ORDER:
        t = params.tensors[name]
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.size * 4
    header = {
        "arch": params.arch.to_dict(),
        "train_config": train_config or {},
        "seed": params.rng_seed,
        "tensors": manifest,
    }
    with open(path, "wb") as fh:
        artifacts.write_header(fh, artifacts.MAGIC_CHECKPOINT, header)
        for name in TENSOR_ORDER:
            artifacts.write_array(fh, params.tensors[name], "f4")


def load_checkpoint(path: str | Path) -> tuple[EncoderParams, dict]:
    with open(path, "rb") as fh:
        _, header = artifacts.read_header(fh, artifacts.MAGIC_CHECKPOINT)
        arch = EncoderArch(**header["arch"])
        names = [entry["name"] for entry in header["tensors"]]
        if names != list(TENSOR_ORDER):
            raise artifacts.ArtifactError(f"{path}: unexpected tensor manifest {names}")
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            tensors[entry["name"]] = artifacts.read_array(fh, shape, "f4")
    params = EncoderParams(
        arch=arch, tensors=tensors, rng_seed=int(header.get("seed", 0))
    )
    params.validate()
    return params, header.get("train_config", {})


def write_embeddings(
    path: str | Path,
    pages: list[tuple[str, np.ndarray, np.ndarray]],
    meta: dict | None = None,
) -> None:
    """Per-page latent codes: [(page_id, (n, d) float32, (n,) uint32 labels)]."""
    if not pages:
        raise ValueError("no embeddings to write")
    d = int(pages[0][1].shape[1])
    header = {
        "d": d,
        "pages": [{"page_id": pid, "n": int(vecs.shape[0])} for pid, vecs, _ in pages],
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        artifacts.write_header(fh, artifacts.MAGIC_EMBEDDINGS, header)
        for pid, vecs, labels in pages:
            if vecs.shape[1] != d:
                raise ValueError(f"page {pid!r}: latent width {vecs.shape[1]} != {d}")
            artifacts.write_array(fh, np.asarray(labels), "u4")
            artifacts.write_array(fh, vecs, "f4")


def read_embeddings(path: str | Path) -> tuple[dict, list[tuple[str, np.ndarray, np.ndarray]]]:
    out = []
    with open(path, "rb") as fh:
        _, header = artifacts.read_header(fh, artifacts.MAGIC_EMBEDDINGS)
        d = int(header["d"])
        for entry in header["pages"]:
            n = int(entry["n"])
            labels = artifacts.read_array(fh, (n,), "u4")
            vecs = artifacts.read_array(fh, (n, d), "f4")
            out.append((entry["page_id"], vecs, labels))
    return header, out
