"""Procedural stand-in dataset: textured objects, injected defects, masks.

Every generator is a pure function of its seed arguments, and all pixel values
are snapped to the 8-bit grid before they leave this module, so in-memory
arrays match what a PNG round trip returns and reruns are byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

Array = np.ndarray

OBJECT_KIND_NAMES = ("stripes", "checker", "radial", "speckle")
DEFECT_CATEGORY_NAMES = ("blob", "scratch", "stain", "hole")


class NoFitError(RuntimeError):
    """No mask template fits the foreground region, even after shrinking."""


@dataclass(frozen=True)
class Quadruplet:
    id: str
    object_kind: int
    defect_category: int
    normal: Array          # (H, W, 3) float32 in [0, 1]
    abnormal: Array        # (H, W, 3) float32 in [0, 1]
    mask: Array            # (H, W) bool
    split: str             # "train" | "eval"


@dataclass
class MaskTemplateRepo:
    """Cluster-representative binary masks per defect category."""
    templates: dict[int, list[Array]]

    def cluster_count(self, category: int) -> int:
        return len(self.templates[category])


@dataclass
class DataConfig:
    object_kinds: int = 4
    categories: int = 4
    per_cell: int = 10
    height: int = 64
    width: int = 64
    eval_fraction: float = 0.2
    area_lo: float = 0.003
    area_hi: float = 0.06
    seed: int = 0


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    object_kind: int
    defect_category: int
    normal_path: str
    abnormal_path: str
    mask_path: str
    split: str


def _quantize(img: Array) -> Array:
    """Snap to the 8-bit grid so disk and memory agree exactly."""
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


# ---------------------------------------------------------------------------
# normal-object textures
# ---------------------------------------------------------------------------

def gen_normal(seed: int, object_kind: int, size: tuple[int, int] = (64, 64)) -> Array:
    """Deterministic procedural texture for one object family."""
    h, w = size
    if h < 16 or w < 16:
        raise ValueError(f"image size must be at least 16x16, got {size}")
    if not 0 <= object_kind < len(OBJECT_KIND_NAMES):
        raise ValueError(f"unknown object kind {object_kind}")
    rng = np.random.default_rng([int(seed), int(object_kind), h, w])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base = rng.uniform(0.35, 0.75, size=3)

    if object_kind == 0:  # stripes
        angle = rng.uniform(0, np.pi)
        period = rng.uniform(6, 14)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period + phase)
        img = base[None, None, :] + 0.18 * wave[:, :, None]
    elif object_kind == 1:  # checker
        block = int(rng.integers(5, 10))
        oy, ox = rng.integers(0, block, size=2)
        tiles = (((yy + oy) // block + (xx + ox) // block) % 2)
        other = rng.uniform(0.3, 0.85, size=3)
        img = np.where(tiles[:, :, None] > 0, base[None, None, :], other[None, None, :])
    elif object_kind == 2:  # radial gradient
        cy = rng.uniform(0.3, 0.7) * h
        cx = rng.uniform(0.3, 0.7) * w
        r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) / np.sqrt(h * h + w * w)
        other = rng.uniform(0.3, 0.85, size=3)
        t = np.clip(r * 2.2, 0, 1)[:, :, None]
        img = base[None, None, :] * (1 - t) + other[None, None, :] * t
    else:  # speckle
        noise = rng.uniform(size=(h, w, 3))
        img = ndimage.uniform_filter(noise, size=(4, 4, 0))
        lo, hi = rng.uniform(0.3, 0.45), rng.uniform(0.6, 0.8)
        img = lo + (hi - lo) * (img - img.min()) / max(img.max() - img.min(), 1e-9)

    img = img + rng.normal(scale=0.015, size=(h, w, 3))
    return _quantize(img)


# ---------------------------------------------------------------------------
# defect masks and appearance
# ---------------------------------------------------------------------------

def _ellipse_mask(h: int, w: int, rng: np.random.Generator, area: float,
                  aspect_hi: float = 2.5) -> Array:
    aspect = rng.uniform(1.0, aspect_hi)
    a = np.sqrt(area * aspect / np.pi)
    b = np.sqrt(area / (aspect * np.pi))
    theta = rng.uniform(0, np.pi)
    margin = max(a, b) + 1
    cy = rng.uniform(min(margin, h / 2), max(h - margin, h / 2))
    cx = rng.uniform(min(margin, w / 2), max(w - margin, w / 2))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / max(a, 0.8)) ** 2 + (v / max(b, 0.8)) ** 2 <= 1.0


def _segment_mask(h: int, w: int, rng: np.random.Generator, area: float) -> Array:
    length = min(0.8 * min(h, w), max(6.0, area / 1.5))
    width = max(1.0, area / length)
    theta = rng.uniform(0, np.pi)
    cy = rng.uniform(0.25 * h, 0.75 * h)
    cx = rng.uniform(0.25 * w, 0.75 * w)
    y0, x0 = cy - 0.5 * length * np.sin(theta), cx - 0.5 * length * np.cos(theta)
    y1, x1 = cy + 0.5 * length * np.sin(theta), cx + 0.5 * length * np.cos(theta)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = y1 - y0, x1 - x0
    t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / max(dy * dy + dx * dx, 1e-9), 0, 1)
    dist = np.sqrt((yy - (y0 + t * dy)) ** 2 + (xx - (x0 + t * dx)) ** 2)
    return dist <= max(width / 2.0, 0.71)


def _make_mask(h: int, w: int, category: int, rng: np.random.Generator,
               area_ratio: float) -> Array:
    area = area_ratio * h * w
    if category == 0:    # blob: one connected ellipse
        return _ellipse_mask(h, w, rng, area)
    if category == 1:    # scratch: capsule around a segment
        return _segment_mask(h, w, rng, area)
    if category == 2:    # stain: 1-3 ellipses
        parts = int(rng.integers(1, 4))
        mask = np.zeros((h, w), dtype=bool)
        for _ in range(parts):
            mask |= _ellipse_mask(h, w, rng, area / parts, aspect_hi=1.8)
        return mask
    if category == 3:    # hole: near-circular
        return _ellipse_mask(h, w, rng, area, aspect_hi=1.2)
    raise ValueError(f"unknown defect category {category}")


def _apply_appearance(normal: Array, mask: Array, category: int,
                      rng: np.random.Generator) -> Array:
    out = normal.copy()
    h, w = mask.shape
    idx = mask.nonzero()
    n = idx[0].size
    if category == 0:    # blob: dark matte brown fill with a per-sample tint
        tint = np.array([rng.uniform(0.20, 0.34), rng.uniform(0.10, 0.20),
                         rng.uniform(0.05, 0.14)])
        fill = tint[None, :] + rng.normal(scale=0.02, size=(n, 3))
        out[idx] = 0.15 * out[idx] + 0.85 * fill
    elif category == 1:  # scratch: bright streak
        level = rng.uniform(0.84, 0.97)
        fill = np.full((n, 3), level) + rng.normal(scale=0.02, size=(n, 3))
        out[idx] = 0.1 * out[idx] + 0.9 * fill
    elif category == 2:  # stain: strong channel tint
        gains = np.array([rng.uniform(1.35, 1.8), rng.uniform(0.35, 0.6),
                          rng.uniform(0.35, 0.6)])
        if rng.uniform() < 0.5:
            gains = gains[[2, 0, 1]]
        out[idx] = np.clip(out[idx] * gains[None, :] + 0.06, 0, 1)
    else:                # hole: near-black core with a bright rim
        core = rng.uniform(0.01, 0.06)
        out[idx] = core + rng.normal(scale=0.01, size=(n, 3))
        rim = mask & ~ndimage.binary_erosion(mask, iterations=1)
        ridx = rim.nonzero()
        out[ridx] = rng.uniform(0.85, 0.97) + rng.normal(scale=0.02, size=(ridx[0].size, 3))
    return _quantize(out)


def inject_defect(normal: Array, category: int, seed: int,
                  area_range: tuple[float, float] = (0.003, 0.06),
                  ) -> tuple[Array, Array]:
    """Add one category-specific defect; pixels outside the mask are untouched."""
    h, w = normal.shape[:2]
    for attempt in range(16):
        rng = np.random.default_rng([int(seed), int(category), attempt])
        ratio = rng.uniform(*area_range)
        mask = _make_mask(h, w, category, rng, ratio)
        if not mask.any():
            continue
        abnormal = _apply_appearance(normal, mask, category, rng)
        abnormal[~mask] = normal[~mask]
        delta = np.abs(abnormal[mask] - normal[mask]).mean()
        if delta > 0.05:
            return abnormal, mask
    raise RuntimeError(f"could not realize a visible defect (category={category}, seed={seed})")


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

def save_image(path, img: Array) -> None:
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path)


def load_image(path) -> Array:
    return (np.asarray(Image.open(path), dtype=np.float32) / 255.0)


def save_mask(path, mask: Array) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def load_mask(path) -> Array:
    return np.asarray(Image.open(path)) > 127


def build_dataset(config: DataConfig, root) -> list[ManifestRecord]:
    """Generate quadruplets to `root/{normal,abnormal,mask}` plus a manifest."""
    if config.per_cell <= 0 or config.object_kinds <= 0 or config.categories <= 0:
        raise ValueError("dataset config requests zero samples")
    root = Path(root)
    for sub in ("normal", "abnormal", "mask"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    n_eval = int(round(config.per_cell * config.eval_fraction))
    records: list[ManifestRecord] = []
    for kind in range(config.object_kinds):
        for cat in range(config.categories):
            for i in range(config.per_cell):
                qid = f"k{kind}c{cat}i{i:03d}"
                sample_seed = int(np.random.default_rng(
                    [config.seed, kind, cat, i]).integers(0, 2 ** 31))
                normal = gen_normal(sample_seed, kind, (config.height, config.width))
                abnormal, mask = inject_defect(normal, cat, sample_seed,
                                               (config.area_lo, config.area_hi))
                split = "eval" if i >= config.per_cell - n_eval else "train"
                rec = ManifestRecord(
                    id=qid, object_kind=kind, defect_category=cat,
                    normal_path=f"normal/{qid}.png",
                    abnormal_path=f"abnormal/{qid}.png",
                    mask_path=f"mask/{qid}.png", split=split)
                save_image(root / rec.normal_path, normal)
                save_image(root / rec.abnormal_path, abnormal)
                save_mask(root / rec.mask_path, mask)
                records.append(rec)
    write_manifest(records, root / "manifest.jsonl")
    return records


def write_manifest(records: Sequence[ManifestRecord], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.__dict__, sort_keys=True) + "\n")


def read_manifest(path) -> list[ManifestRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(ManifestRecord(**json.loads(line)))
    return records


def load_quadruplet(root, rec: ManifestRecord) -> Quadruplet:
    root = Path(root)
    return Quadruplet(
        id=rec.id, object_kind=rec.object_kind, defect_category=rec.defect_category,
        normal=load_image(root / rec.normal_path),
        abnormal=load_image(root / rec.abnormal_path),
        mask=load_mask(root / rec.mask_path), split=rec.split)


def load_quadruplets(root, split: str | None = None) -> list[Quadruplet]:
    root = Path(root)
    records = read_manifest(root / "manifest.jsonl")
    if split is not None:
        records = [r for r in records if r.split == split]
    return [load_quadruplet(root, r) for r in records]


# ---------------------------------------------------------------------------
# mask template repository
# ---------------------------------------------------------------------------

def cluster_templates(masks: Sequence[Array], k: int) -> list[Array]:
    """k cluster-medoid masks via Lloyd's algorithm (max 50 iterations).

    Initialization is deterministic farthest-point seeding over the distinct
    masks; each returned template is a real member mask (the one nearest its
    cluster centroid).
    """
    if len(masks) == 0:
        raise ValueError("cluster_templates needs at least one mask")
    if k < 1:
        raise ValueError("k must be >= 1")
    shape = masks[0].shape
    for m in masks:
        if m.shape != shape:
            raise ValueError("all masks must share one shape")
    flat = np.stack([np.asarray(m).astype(np.float32).ravel() for m in masks])
    distinct, first_idx = np.unique(flat, axis=0, return_index=True)
    if len(distinct) <= k:
        order = np.sort(first_idx)
        return [np.asarray(masks[i]).astype(bool) for i in order]

    # farthest-point init on the distinct rows
    centers = [0]
    d2 = np.sum((distinct - distinct[0]) ** 2, axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(d2))
        centers.append(nxt)
        d2 = np.minimum(d2, np.sum((distinct - distinct[nxt]) ** 2, axis=1))
    centroids = distinct[centers].copy()

    assign = None
    for _ in range(50):
        dist = ((flat[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(dist, axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = flat[assign == c]
            if len(members):
                centroids[c] = members.mean(axis=0)

    templates = []
    for c in range(k):
        member_idx = np.nonzero(assign == c)[0]
        if member_idx.size == 0:
            continue
        d = ((flat[member_idx] - centroids[c]) ** 2).sum(axis=1)
        medoid = member_idx[int(np.argmin(d))]
        templates.append(np.asarray(masks[medoid]).astype(bool))
    return templates


def build_template_repo(quads: Sequence[Quadruplet], k: int = 8) -> MaskTemplateRepo:
    by_cat: dict[int, list[Array]] = {}
    for q in quads:
        by_cat.setdefault(q.defect_category, []).append(q.mask)
    return MaskTemplateRepo({c: cluster_templates(ms, k) for c, ms in sorted(by_cat.items())})


def _crop_to_bbox(mask: Array) -> Array:
    ys, xs = mask.nonzero()
    return mask[ys.min():ys.max() + 1, xs.min():xs.max() + 1]


def _place(tile: Array, shape: tuple[int, int], cy: int, cx: int) -> Array | None:
    th, tw = tile.shape
    y0 = cy - th // 2
    x0 = cx - tw // 2
    if y0 < 0 or x0 < 0 or y0 + th > shape[0] or x0 + tw > shape[1]:
        return None
    out = np.zeros(shape, dtype=bool)
    out[y0:y0 + th, x0:x0 + tw] = tile
    return out


def _shrink(tile: Array, factor: float) -> Array:
    th, tw = tile.shape
    nh = max(1, int(round(th * factor)))
    nw = max(1, int(round(tw * factor)))
    ys = np.round(np.linspace(0, th - 1, nh)).astype(int)
    xs = np.round(np.linspace(0, tw - 1, nw)).astype(int)
    out = tile[np.ix_(ys, xs)]
    if not out.any():
        out = out.copy()
        out[nh // 2, nw // 2] = True
    return out


def retrieve_template_info(repo: MaskTemplateRepo, category: int, fg_region: Array,
                           seed: int) -> tuple[Array, bool]:
    """(mask, shrunk_flag): a template placed inside `fg_region`."""
    if category not in repo.templates or not repo.templates[category]:
        raise ValueError(f"category {category} not present in template repo")
    fg = np.asarray(fg_region).astype(bool)
    if not fg.any():
        raise ValueError("foreground region is empty")
    rng = np.random.default_rng([int(seed), int(category)])
    tiles = [_crop_to_bbox(t) for t in repo.templates[category]]
    fg_pts = np.argwhere(fg)
    for _ in range(32):
        tile = tiles[int(rng.integers(len(tiles)))]
        cy, cx = fg_pts[int(rng.integers(len(fg_pts)))]
        placed = _place(tile, fg.shape, int(cy), int(cx))
        if placed is not None and not (placed & ~fg).any():
            return placed, False
    # fallback: smallest-area template, shrunk until it fits at the fg centroid
    smallest = min(tiles, key=lambda t: int(t.sum()))
    cy, cx = np.round(fg_pts.mean(axis=0)).astype(int)
    factor = 1.0
    for _ in range(10):
        tile = _shrink(smallest, factor)
        placed = _place(tile, fg.shape, int(cy), int(cx))
        if placed is not None and not (placed & ~fg).any():
            return placed, True
        factor *= 0.7
    raise NoFitError(f"no template of category {category} fits the foreground region")


def retrieve_template(repo: MaskTemplateRepo, category: int, fg_region: Array,
                      seed: int) -> Array:
    mask, _ = retrieve_template_info(repo, category, fg_region, seed)
    return mask
