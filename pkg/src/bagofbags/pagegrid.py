"""Character-anchored patch extraction from binarized fragment images.

A grayscale page is thresholded (Otsu), oriented so ink is foreground,
split into 8-connected components, filtered by area and ink density, and
each surviving component is rescaled into a 64x64 binary patch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class ImageLoadError(IOError):
    """Raised when an input image cannot be read or is not 8-bit grayscale."""


@dataclass
class GrayImage:
    """8-bit grayscale raster, row-major."""

    data: np.ndarray  # (height, width) uint8

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.ndim != 2 or self.data.size == 0:
            raise ValueError("grayscale image must be a nonempty 2-d array")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass
class BinaryPage:
    """Binarized page; True marks ink (foreground after orientation)."""

    mask: np.ndarray  # (height, width) bool
    page_id: str = ""
    source_path: str = ""
    degenerate: bool = False

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def height(self) -> int:
        return self.mask.shape[0]


@dataclass
class Component:
    """One 8-connected foreground component.

    ``pixels`` holds (x, y) coordinates; ``bbox`` is (x0, y0, x1, y1) with
    inclusive bounds.
    """

    label: int
    pixel_count: int
    bbox: tuple[int, int, int, int]
    pixels: np.ndarray  # (n, 2) int32, columns (x, y)


@dataclass
class Patch:
    """Scale-normalized binary character patch."""

    data: np.ndarray  # (patch_side, patch_side) uint8 in {0, 1}
    component_label: int
    page_id: str = ""


@dataclass
class ExtractionConfig:
    area_min: int = 300
    area_max: int = 3000
    target_side: int = 60
    patch_side: int = 64
    bbox_white_min: float = 0.05
    patch_white_min: float = 0.02
    min_components_per_page: int = 200
    invert_threshold: int = 128
    normalization_mode: str = "preserved"  # or "stretched"

    def validate(self) -> None:
        if not (0 < self.area_min <= self.area_max):
            raise ValueError("need 0 < area_min <= area_max")
        if not (0 < self.target_side <= self.patch_side):
            raise ValueError("need 0 < target_side <= patch_side")
        for name in ("bbox_white_min", "patch_white_min"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1]")
        if self.normalization_mode not in ("preserved", "stretched"):
            raise ValueError(f"unknown normalization_mode {self.normalization_mode!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class PageStats:
    page_id: str
    n_components: int = 0
    n_after_area: int = 0
    n_after_bbox_filter: int = 0
    n_patches: int = 0
    excluded: bool = True

    def to_json(self) -> str:
        return json.dumps(
            {
                "page_id": self.page_id,
                "n_components": self.n_components,
                "n_after_area": self.n_after_area,
                "n_after_bbox_filter": self.n_after_bbox_filter,
                "n_patches": self.n_patches,
                "excluded": self.excluded,
            }
        )


@dataclass
class PageExtraction:
    page_id: str
    patches: list[Patch] = field(default_factory=list)
    excluded: bool = True
    stats: PageStats | None = None


def load_gray_image(path: str | Path) -> GrayImage:
    """Read an 8-bit grayscale PNG or PGM (P5) file."""
    from PIL import Image

    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                raise ImageLoadError(f"{path}: expected 8-bit grayscale, got mode {img.mode!r}")
            return GrayImage(np.asarray(img, dtype=np.uint8))
    except ImageLoadError:
        raise
    except Exception as exc:
        raise ImageLoadError(f"{path}: cannot read image ({exc})") from exc


def otsu_threshold(hist: np.ndarray) -> int:
    """Smallest threshold maximizing between-class variance over 256 bins.

    Pixels <= t form one class and pixels > t the other.
    """
    hist = np.asarray(hist, dtype=np.float64)
    total = hist.sum()
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    sum0 = np.cumsum(hist * levels)
    w1 = total - w0
    mu_total = sum0[-1]
    # between-class variance for t = 0..255; zero where a class is empty
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = sum0 / w0
        mu1 = (mu_total - sum0) / w1
        var_b = w0 * w1 * (mu0 - mu1) ** 2
    var_b = np.nan_to_num(var_b, nan=0.0, posinf=0.0, neginf=0.0)
    return int(np.argmax(var_b))


def otsu_binarize(
    img: GrayImage,
    cfg: ExtractionConfig | None = None,
    page_id: str = "",
    source_path: str = "",
) -> tuple[BinaryPage, int]:
    """Binarize a page and orient it so text pixels are foreground.

    A constant image yields an all-background mask flagged degenerate, with
    the constant value as the reported threshold.
    """
    cfg = cfg or ExtractionConfig()
    hist = np.bincount(img.data.ravel(), minlength=256)
    nonzero = np.flatnonzero(hist)
    if nonzero.size == 1:
        mask = np.zeros_like(img.data, dtype=bool)
        page = BinaryPage(mask, page_id=page_id, source_path=source_path, degenerate=True)
        return page, int(nonzero[0])

    t = otsu_threshold(hist)
    mask = img.data > t
    if float(img.data.mean()) > cfg.invert_threshold:
        mask = ~mask
    page = BinaryPage(mask, page_id=page_id, source_path=source_path)
    return page, t


def connected_components(page: BinaryPage) -> list[Component]:
    """8-connected foreground components, labeled 1..n in the raster order
    of each component's first pixel."""
    labeled, n = ndimage.label(page.mask, structure=EIGHT_CONNECTED)
    if n == 0:
        return []
    flat = labeled.ravel()
    fg = np.flatnonzero(flat)
    raw = flat[fg]
    # map scipy labels to first-encounter raster order
    _, first_pos = np.unique(raw, return_index=True)
    order = np.argsort(first_pos, kind="stable")
    remap = np.empty(n + 1, dtype=np.int64)
    remap[np.unique(raw)[order]] = np.arange(1, n + 1)

    new_labels = remap[raw]
    sort_idx = np.argsort(new_labels, kind="stable")
    fg_sorted = fg[sort_idx]
    counts = np.bincount(new_labels, minlength=n + 1)[1:]
    width = page.width
    ys, xs = np.divmod(fg_sorted, width)

    comps: list[Component] = []
    start = 0
    for lbl in range(1, n + 1):
        stop = start + int(counts[lbl - 1])
        x = xs[start:stop]
        y = ys[start:stop]
        pixels = np.stack([x, y], axis=1).astype(np.int32)
        bbox = (int(x.min()), int(y.min()), int(x.max()), int(y.max()))
        comps.append(Component(label=lbl, pixel_count=stop - start, bbox=bbox, pixels=pixels))
        start = stop
    return comps


def bbox_foreground_fraction(comp: Component, page: BinaryPage) -> float:
    """Ink fraction of the page mask inside the component's bounding box.

    The crop is taken from the full page mask, so ink from overlapping
    neighbors counts too; the same crop is used for normalization.
    """
    x0, y0, x1, y1 = comp.bbox
    crop = page.mask[y0 : y1 + 1, x0 : x1 + 1]
    return float(crop.mean())


def filter_components(
    comps: list[Component], cfg: ExtractionConfig, page: BinaryPage
) -> list[Component]:
    """Keep components with area in [area_min, area_max] (inclusive) whose
    bounding-box crop has at least ``bbox_white_min`` ink. Order preserved."""
    out = []
    for c in comps:
        if not (cfg.area_min <= c.pixel_count <= cfg.area_max):
            continue
        if bbox_foreground_fraction(c, page) < cfg.bbox_white_min:
            continue
        out.append(c)
    return out


def _resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resample of a binary mask.

    Endpoint-aligned index mapping: output index i samples input index
    round(i * (in - 1) / (out - 1)), so both borders of the crop are always
    sampled and a bounding-box-tight crop keeps its extent on upscaling.
    """
    in_h, in_w = mask.shape

    def index_map(n_out: int, n_in: int) -> np.ndarray:
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out, dtype=np.int64) if n_in == 1 else np.array(
                [(n_in - 1) // 2] * n_out, dtype=np.int64
            )
        return np.floor(np.arange(n_out) * (n_in - 1) / (n_out - 1) + 0.5).astype(np.int64)

    rows = index_map(out_h, in_h)
    cols = index_map(out_w, in_w)
    return mask[np.ix_(rows, cols)]


def normalize_patch(
    comp: Component, page: BinaryPage, cfg: ExtractionConfig
) -> Patch | None:
    """Rescale a component's bounding-box crop into a binary patch.

    preserved: longest side scaled to ``target_side`` keeping aspect ratio,
    centered in a zero patch (odd padding remainder goes right/bottom).
    stretched: crop resized directly to the full patch.
    Returns None when the result has less than ``patch_white_min`` ink.
    """
    x0, y0, x1, y1 = comp.bbox
    crop = page.mask[y0 : y1 + 1, x0 : x1 + 1]
    h, w = crop.shape
    side = cfg.patch_side

    if cfg.normalization_mode == "stretched":
        scaled = _resize_nearest(crop, side, side)
        patch = scaled.astype(np.uint8)
    else:
        longest = max(h, w)
        new_h = max(1, int(round(h * cfg.target_side / longest)))
        new_w = max(1, int(round(w * cfg.target_side / longest)))
        scaled = _resize_nearest(crop, new_h, new_w)
        patch = np.zeros((side, side), dtype=np.uint8)
        top = (side - new_h) // 2
        left = (side - new_w) // 2
        patch[top : top + new_h, left : left + new_w] = scaled

    if float(patch.mean()) < cfg.patch_white_min:
        return None
    return Patch(data=patch, component_label=comp.label, page_id=page.page_id)


def extract_page(
    img: GrayImage, cfg: ExtractionConfig | None = None, page_id: str = "", source_path: str = ""
) -> PageExtraction:
    """Full per-page extraction: binarize, label, filter, normalize.

    ``excluded`` is set when fewer than ``min_components_per_page`` patches
    survive; the patches are still returned so callers can inspect them.
    """
    cfg = cfg or ExtractionConfig()
    cfg.validate()
    stats = PageStats(page_id=page_id)
    page, _ = otsu_binarize(img, cfg, page_id=page_id, source_path=source_path)

    comps = connected_components(page)
    stats.n_components = len(comps)

    by_area = [c for c in comps if cfg.area_min <= c.pixel_count <= cfg.area_max]
    stats.n_after_area = len(by_area)

    kept = [c for c in by_area if bbox_foreground_fraction(c, page) >= cfg.bbox_white_min]
    stats.n_after_bbox_filter = len(kept)

    patches = []
    for comp in kept:
        patch = normalize_patch(comp, page, cfg)
        if patch is not None:
            patches.append(patch)
    stats.n_patches = len(patches)
    stats.excluded = len(patches) < cfg.min_components_per_page
    return PageExtraction(page_id=page_id, patches=patches, excluded=stats.excluded, stats=stats)


def extract_file(path: str | Path, cfg: ExtractionConfig | None = None, page_id: str = "") -> PageExtraction:
    img = load_gray_image(path)
    return extract_page(img, cfg, page_id=page_id or Path(path).stem, source_path=str(path))


def patches_to_array(patches: list[Patch]) -> np.ndarray:
    """Stack patches into an (n, side, side) uint8 array."""
    if not patches:
        raise ValueError("no patches to stack")
    return np.stack([p.data for p in patches]).astype(np.uint8)


def write_patch_store(
    path: str | Path,
    pages: list[PageExtraction],
    cfg: ExtractionConfig,
) -> None:
    """Persist the non-excluded pages' patches as bit-packed rasters."""
    from . import artifacts

    kept = [p for p in pages if not p.excluded and p.patches]
    header = {
        "patch_side": cfg.patch_side,
        "config": cfg.to_dict(),
        "config_hash": artifacts.config_hash(cfg.to_dict()),
        "pages": [{"page_id": p.page_id, "n": len(p.patches)} for p in kept],
    }
    with open(path, "wb") as fh:
        artifacts.write_header(fh, artifacts.MAGIC_PATCHES, header)
        for page in kept:
            labels = np.array([pt.component_label for pt in page.patches], dtype=np.uint32)
            artifacts.write_array(fh, labels, "u4")
            bits = np.packbits(patches_to_array(page.patches), axis=None)
            fh.write(bits.tobytes())


def read_patch_store(path: str | Path) -> tuple[dict, list[tuple[str, np.ndarray, np.ndarray]]]:
    """Load a patch store; returns (header, [(page_id, patches, labels), ...])."""
    from . import artifacts

    out = []
    with open(path, "rb") as fh:
        _, header = artifacts.read_header(fh, artifacts.MAGIC_PATCHES)
        side = int(header["patch_side"])
        n_bytes_per_patch = (side * side + 7) // 8
        for entry in header["pages"]:
            n = int(entry["n"])
            labels = artifacts.read_array(fh, (n,), "u4")
            raw = fh.read(n * n_bytes_per_patch)
            if len(raw) != n * n_bytes_per_patch:
                raise artifacts.ArtifactError(f"{path}: truncated patch data")
            bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=n * side * side)
            out.append((entry["page_id"], bits.reshape(n, side, side).astype(np.uint8), labels))
    return header, out
