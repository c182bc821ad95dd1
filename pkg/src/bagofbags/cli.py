"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 2 configuration error (also used by argparse for
bad flags), 3 data error (missing files, corrupt artifacts).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .artifacts import ArtifactError
from .corpus import ManifestError
from .pipeline import ConfigError, DataError
from .setdist import METHOD_IDS

_COMMANDS = (
    ("synth", "generate a synthetic labeled corpus under <out>/corpus"),
    ("preprocess", "extract and filter character patches from manifest pages"),
    ("train", "train the patch autoencoder on the patch store"),
    ("encode", "embed every stored patch with the trained encoder"),
    ("vocab", "cluster each page's embeddings into its bag of prototypes"),
    ("codebook", "fit the global codebook and tf-idf page histograms"),
    ("dist", "compute one pairwise page-distance matrix"),
    ("retrieve", "write per-query ranked lists for one method"),
    ("eval", "score distance matrices against join labels"),
    ("rerank", "two-stage retrieval: shortlist by bow-cosine, rerank by ot"),
    ("separation", "intra- vs inter-cluster distance statistics"),
    ("profile", "median per-query retrieval time per available method"),
    ("ablate", "sweep vocabulary size, latent width, sparsity, normalization"),
)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="run configuration JSON")
    common.add_argument("--manifest", metavar="PATH", help="page manifest CSV")
    common.add_argument("--out", metavar="DIR", required=True, help="run directory for artifacts")
    common.add_argument("--method", choices=sorted(METHOD_IDS), help="distance method")
    common.add_argument(
        "--codebook-source",
        choices=["centroids", "raw"],
        dest="codebook_source",
        help="global codebook source",
    )
    common.add_argument("--K", type=int, help="per-page vocabulary size")
    common.add_argument("--Kg", type=int, help="global codebook size")
    common.add_argument("--d", type=int, help="embedding width")
    common.add_argument("--M", type=int, help="two-stage shortlist length")
    common.add_argument("--seed", type=int, help="master seed, fanned out to all stages")
    common.add_argument("--threads", type=int, help="worker cap for pairwise distances")

    parser = argparse.ArgumentParser(
        prog="bagofbags",
        description="Manuscript join retrieval over bags of character-patch prototypes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in _COMMANDS:
        sub.add_parser(name, parents=[common], help=help_text, description=help_text)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    out = {}
    for key in ("K", "Kg", "d", "M", "seed", "method", "codebook_source", "threads"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    return out


def _need_manifest(args: argparse.Namespace) -> Path:
    if not args.manifest:
        raise ConfigError(f"--manifest is required for `bagofbags {args.command}`")
    return Path(args.manifest)


def _dispatch(args: argparse.Namespace, cfg: pipeline.RunConfig, out: Path) -> dict:
    cmd = args.command
    if cmd == "synth":
        return pipeline.cmd_synth(cfg, out)
    if cmd == "preprocess":
        return pipeline.cmd_preprocess(cfg, out, _need_manifest(args))
    if cmd == "train":
        return pipeline.cmd_train(cfg, out)
    if cmd == "encode":
        return pipeline.cmd_encode(cfg, out)
    if cmd == "vocab":
        return pipeline.cmd_vocab(cfg, out)
    if cmd == "codebook":
        return pipeline.cmd_codebook(cfg, out)
    if cmd == "dist":
        return pipeline.cmd_dist(cfg, out, method=args.method)
    if cmd == "retrieve":
        return pipeline.cmd_retrieve(cfg, out, method=args.method)
    if cmd == "eval":
        return pipeline.cmd_eval(cfg, out, _need_manifest(args), method=args.method)
    if cmd == "rerank":
        return pipeline.cmd_rerank(cfg, out, _need_manifest(args))
    if cmd == "separation":
        return pipeline.cmd_separation(cfg, out, _need_manifest(args), method=args.method)
    if cmd == "profile":
        return pipeline.cmd_profile(cfg, out)
    if cmd == "ablate":
        return pipeline.cmd_ablate(cfg, out, _need_manifest(args))
    raise ConfigError(f"unknown command {cmd!r}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = pipeline.load_run_config(args.config, _overrides(args))
        summary = _dispatch(args, cfg, Path(args.out))
        table = summary.pop("table", None)
        if table:
            print(table)
        print(json.dumps(summary, indent=2, sort_keys=True))
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ManifestError, ArtifactError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
