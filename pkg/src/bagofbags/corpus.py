"""Synthetic manuscript corpus generation and manifest IO.

Pages are grids of procedurally drawn glyphs. Each join cluster plays the
role of one scribe: per-class stroke parameters (width, slant, corner
rounding, control-point offsets) are drawn once per scribe, and every
glyph instance adds a smaller jitter on top. The instance jitter is a
fixed fraction of the style jitter, so pages from the same scribe stay
closer in parameter space than pages from different scribes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .retrieval import JoinLabels

MANIFEST_HEADER = ["page_id", "image_path", "cluster_id"]

# Per-instance parameter noise as a fraction of the per-scribe style
# jitter; must stay < 1 so scribes remain separable.
INSTANCE_JITTER_FRAC = 0.3


class ManifestError(ValueError):
    """Raised when a manifest file is malformed or references bad data."""


@dataclass
class ManifestEntry:
    page_id: str
    image_path: Path
    cluster_id: int


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def page_ids(self) -> list[str]:
        return [e.page_id for e in self.entries]

    def labels(self) -> JoinLabels:
        return JoinLabels.from_pairs([(e.page_id, e.cluster_id) for e in self.entries])

    def cluster_sizes(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for e in self.entries:
            out[e.cluster_id] = out.get(e.cluster_id, 0) + 1
        return dict(sorted(out.items()))


def load_manifest(path: str | Path) -> tuple[Manifest, JoinLabels]:
    """Read a page manifest CSV and the join labels it encodes.

    Rows are ``page_id,image_path,cluster_id``; image paths are resolved
    relative to the manifest's directory. Errors carry the offending
    line number.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1:
                if row != MANIFEST_HEADER:
                    raise ManifestError(
                        f"{path}:1: expected header {','.join(MANIFEST_HEADER)!r}, got {','.join(row)!r}"
                    )
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            page_id, image_path, cluster_raw = (c.strip() for c in row)
            if not page_id:
                raise ManifestError(f"{path}:{lineno}: empty page_id")
            if page_id in seen:
                raise ManifestError(
                    f"{path}:{lineno}: duplicate page_id {page_id!r} (first seen on line {seen[page_id]})"
                )
            try:
                cluster_id = int(cluster_raw)
            except ValueError:
                raise ManifestError(
                    f"{path}:{lineno}: cluster_id must be an integer, got {cluster_raw!r}"
                ) from None
            resolved = Path(image_path)
            if not resolved.is_absolute():
                resolved = root / resolved
            if not resolved.is_file():
                raise ManifestError(f"{path}:{lineno}: image not found: {resolved}")
            seen[page_id] = lineno
            entries.append(ManifestEntry(page_id, resolved, cluster_id))
    if not entries:
        raise ManifestError(f"{path}: manifest lists no pages")
    manifest = Manifest(entries)
    labels = manifest.labels()
    labels.validate()
    return manifest, labels


def write_manifest(path: str | Path, manifest: Manifest) -> None:
    """Write a manifest CSV; paths under the CSV's directory are stored relative."""
    path = Path(path)
    root = path.parent.resolve()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for e in manifest.entries:
            p = Path(e.image_path).resolve()
            try:
                rel = p.relative_to(root)
            except ValueError:
                rel = p
            writer.writerow([e.page_id, rel.as_posix(), e.cluster_id])


def write_pgm(path: str | Path, data: np.ndarray) -> None:
    """Write an 8-bit grayscale image as binary PGM (P5)."""
    data = np.asarray(data)
    if data.ndim != 2 or data.dtype != np.uint8:
        raise ValueError("expected a 2-d uint8 image")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


@dataclass
class SynthConfig:
    """Knobs for the synthetic corpus generator.

    ``style_jitter`` scales the per-scribe parameter draws; the
    per-instance noise reuses the same scale times INSTANCE_JITTER_FRAC.
    ``noise`` is a per-pixel speckle probability; speckle blobs stay far
    below the component-area floor so the extraction filters drop them.
    """

    n_clusters: int = 10
    pages_per_cluster: tuple[int, int] = (2, 9)
    glyphs_per_page: int = 220
    n_glyph_classes: int = 32
    style_jitter: float = 0.35
    noise: float = 0.002
    seed: int = 0
    cell_side: int = 44
    margin: int = 8
    base_width: float = 6.0
    ink_level: int = 25
    bg_level: int = 235

    def validate(self) -> None:
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        lo, hi = self.pages_per_cluster
        if not (1 <= lo <= hi):
            raise ValueError("pages_per_cluster must satisfy 1 <= lo <= hi")
        if self.glyphs_per_page < 1:
            raise ValueError("glyphs_per_page must be >= 1")
        if self.n_glyph_classes < 2:
            raise ValueError("n_glyph_classes must be >= 2")
        if self.style_jitter < 0:
            raise ValueError("style_jitter must be >= 0")
        if not (0.0 <= self.noise < 1.0):
            raise ValueError("noise must be in [0, 1)")
        if self.cell_side < 24:
            raise ValueError("cell_side must be >= 24")
        if not (0 <= self.ink_level < self.bg_level <= 255):
            raise ValueError("need 0 <= ink_level < bg_level <= 255")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["pages_per_cluster"] = list(self.pages_per_cluster)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "pages_per_cluster" in d:
            d["pages_per_cluster"] = tuple(d["pages_per_cluster"])
        return cls(**d)


def _class_skeletons(cfg: SynthConfig) -> list[np.ndarray]:
    """One fixed control polyline per glyph class, in unit coordinates.

    Class shapes depend only on (seed, class index) so every scribe
    writes the same alphabet with different stroke styles.
    """
    skeletons = []
    for c in range(cfg.n_glyph_classes):
        rng = np.random.default_rng([cfg.seed, 7, c])
        n_pts = int(rng.integers(5, 9))
        ang = rng.uniform(0.0, 2.0 * np.pi)
        pts = [rng.uniform(0.25, 0.75, size=2)]
        for _ in range(n_pts - 1):
            ang += rng.uniform(-1.4, 1.4)
            step = rng.uniform(0.4, 0.65)
            pts.append(pts[-1] + step * np.array([np.cos(ang), np.sin(ang)]))
        arr = np.array(pts)
        arr -= arr.min(axis=0)
        span = np.maximum(arr.max(axis=0), 0.2)
        skeletons.append(arr / span)
    return skeletons


@dataclass
class _ScribeStyle:
    width_mul: np.ndarray  # (n_classes,)
    slant: np.ndarray  # (n_classes,)
    corner: np.ndarray  # (n_classes,) corner-cut weight in [0, 0.45]
    offsets: list[np.ndarray]  # per class (n_pts, 2) control-point shifts


def _scribe_style(cfg: SynthConfig, scribe: int, skeletons: list[np.ndarray]) -> _ScribeStyle:
    rng = np.random.default_rng([cfg.seed, 5, scribe])
    n = cfg.n_glyph_classes
    width_mul = 1.0 + cfg.style_jitter * rng.uniform(-0.5, 0.5, n)
    slant = 0.6 * cfg.style_jitter * rng.uniform(-1.0, 1.0, n)
    corner = np.clip(rng.uniform(0.0, 0.45, n) * (0.3 + cfg.style_jitter), 0.0, 0.45)
    offsets = [rng.normal(0.0, 0.05 * cfg.style_jitter, size=sk.shape) for sk in skeletons]
    return _ScribeStyle(width_mul, slant, corner, offsets)


def _cut_corners(pts: np.ndarray, t: float) -> np.ndarray:
    """Replace each interior vertex with two points pulled toward its
    neighbors; t in [0, 0.5) controls the rounding strength."""
    if t <= 0.0 or len(pts) < 3:
        return pts
    out = [pts[0]]
    for i in range(1, len(pts) - 1):
        prev, cur, nxt = pts[i - 1], pts[i], pts[i + 1]
        out.append(cur + t * (prev - cur))
        out.append(cur + t * (nxt - cur))
    out.append(pts[-1])
    return np.array(out)


def _densify(pts: np.ndarray, spacing: float = 0.45) -> np.ndarray:
    """Resample a polyline so consecutive points sit <= spacing apart."""
    out = [pts[:1]]
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(int(np.ceil(np.hypot(*(b - a)) / spacing)), 1)
        t = np.linspace(0.0, 1.0, n + 1)[1:, None]
        out.append(a + t * (b - a))
    return np.vstack(out)

# Glyph pixel counts are pushed into [AREA_FLOOR, ...] by widening the
# stroke; with the radius cap the resulting areas stay far below the
# 3000 upper area bound of the extraction defaults.
AREA_FLOOR = 330
MAX_RADIUS = 5.0


def _render_glyph(
    cell: int,
    skeleton: np.ndarray,
    width: float,
    slant: float,
    corner: float,
    grid_y: np.ndarray,
    grid_x: np.ndarray,
) -> np.ndarray:
    """Rasterize one glyph into a (cell, cell) boolean mask.

    The stroke is the set of pixels within width/2 of the densified
    control polyline; if that leaves fewer than AREA_FLOOR pixels the
    radius is widened just enough to reach the floor.
    """
    pts = skeleton.copy()
    pts[:, 0] += slant * (0.5 - pts[:, 1])
    pts = np.clip(pts, 0.0, 1.0)
    lo, hi = 6.0, float(cell - 6)
    pts = lo + pts * (hi - lo)
    pts = _cut_corners(pts, corner)
    dense = _densify(pts)
    d2 = (grid_x[:, :, None] - dense[None, None, :, 0]) ** 2
    d2 += (grid_y[:, :, None] - dense[None, None, :, 1]) ** 2
    d2 = d2.min(axis=2)
    r = float(np.clip(width / 2.0, 1.6, MAX_RADIUS))
    if int((d2 <= r * r).sum()) < AREA_FLOOR:
        d2_sorted = np.sort(d2, axis=None)
        r = min(float(np.sqrt(d2_sorted[AREA_FLOOR - 1])) + 1e-3, MAX_RADIUS)
    return d2 <= r * r


def generate_synth(cfg: SynthConfig, out_dir: str | Path) -> Manifest:
    """Generate a labeled synthetic corpus under out_dir.

    Writes images/<page_id>.pgm for every page, manifest.csv, and
    synth_config.json echoing the configuration. Page content depends
    only on (seed, page index), so regeneration is byte-identical and
    pages could be rendered in any order.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    skeletons = _class_skeletons(cfg)
    cols = int(np.ceil(np.sqrt(cfg.glyphs_per_page)))
    rows = int(np.ceil(cfg.glyphs_per_page / cols))
    cell = cfg.cell_side
    height = rows * cell + 2 * cfg.margin
    width = cols * cell + 2 * cfg.margin
    gy, gx = np.mgrid[0:cell, 0:cell].astype(np.float64)

    entries: list[ManifestEntry] = []
    page_index = 0
    for scribe in range(cfg.n_clusters):
        style = _scribe_style(cfg, scribe, skeletons)
        lo, hi = cfg.pages_per_cluster
        n_pages = int(np.random.default_rng([cfg.seed, 4, scribe]).integers(lo, hi + 1))
        for p in range(n_pages):
            rng = np.random.default_rng([cfg.seed, 3, page_index])
            page_index += 1
            classes = rng.integers(0, cfg.n_glyph_classes, size=cfg.glyphs_per_page)
            mask = np.zeros((height, width), dtype=bool)
            for g, c in enumerate(classes):
                c = int(c)
                jit = INSTANCE_JITTER_FRAC * cfg.style_jitter
                w = cfg.base_width * style.width_mul[c] * (1.0 + jit * rng.uniform(-0.5, 0.5))
                sl = style.slant[c] + 0.6 * jit * rng.uniform(-1.0, 1.0)
                sk = skeletons[c] + style.offsets[c] + rng.normal(0.0, 0.05 * jit, skeletons[c].shape)
                glyph = _render_glyph(cell, sk, w, sl, float(style.corner[c]), gy, gx)
                r, q = divmod(g, cols)
                y0 = cfg.margin + r * cell
                x0 = cfg.margin + q * cell
                mask[y0 : y0 + cell, x0 : x0 + cell] |= glyph

            img = np.full((height, width), cfg.bg_level, dtype=np.int16)
            img += rng.integers(-6, 7, size=img.shape, dtype=np.int16)
            ink = np.int16(cfg.ink_level) + rng.integers(-6, 7, size=img.shape, dtype=np.int16)
            img[mask] = ink[mask]
            if cfg.noise > 0:
                speckle = rng.random(img.shape) < cfg.noise
                img[speckle & ~mask] = cfg.ink_level
            data = np.clip(img, 0, 255).astype(np.uint8)

            page_id = f"s{scribe:02d}p{p:02d}"
            path = images_dir / f"{page_id}.pgm"
            write_pgm(path, data)
            entries.append(ManifestEntry(page_id, path, scribe))

    manifest = Manifest(entries)
    write_manifest(out_dir / "manifest.csv", manifest)
    echo = {"synth_config": cfg.to_dict(), "n_pages": len(entries), "image_format": "pgm"}
    with open(out_dir / "synth_config.json", "w") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
