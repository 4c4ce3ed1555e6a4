"""Reference-crop, diptych, quality-scoring, and pair-sampling data path.

Geometry conventions: images are float32 (H, W, 3) in [0, 1], masks are bool
(H, W). White fill is 1.0. Resizing is bilinear with half-pixel centers and is
an exact identity at equal sizes; resized masks threshold the bilinear output
at 0.5.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from scipy import ndimage

from .synthworld import Quadruplet

Array = np.ndarray
log = logging.getLogger(__name__)


@dataclass
class CropParams:
    beta_min: float = 0.6        # crop ratio at zero defect area
    area_threshold: float = 0.1  # defect-area ratio above which no expansion
    out_side: int = 64           # side length of each diptych half

    def __post_init__(self):
        if not 0 < self.beta_min <= 1:
            raise ValueError(f"beta_min must be in (0, 1], got {self.beta_min}")
        if not 0 < self.area_threshold < 1:
            raise ValueError(f"area_threshold must be in (0, 1), got {self.area_threshold}")
        if self.out_side < 16:
            raise ValueError(f"out_side must be >= 16, got {self.out_side}")


@dataclass
class QualityWeights:
    w_area: float = 0.3
    w_conn: float = 0.4
    w_color: float = 0.3
    sigma_color: float = 0.1


class Strategy(str, Enum):
    DEFECT_FILL = "defect_fill"
    INTRA_OBJECT_CROSS = "intra_object_cross"
    CROSS_OBJECT = "cross_object"


@dataclass
class PairSample:
    reference: Quadruplet
    target: Quadruplet
    strategy: Strategy
    quality: float


@dataclass
class DiptychTriplet:
    """Side-by-side reference/source construction.

    `ref_mask` carries the reference-defect pixels through the same crop
    geometry as the left half; the attention machinery needs it.
    """
    d_src: Array    # (S, 2S, 3) masked input
    d_res: Array    # (S, 2S, 3) reconstruction target
    d_mask: Array   # (S, 2S) bool, left half all False
    ref_mask: Array  # (S, S) bool


# ---------------------------------------------------------------------------
# geometry primitives
# ---------------------------------------------------------------------------

def resize_bilinear(img: Array, out_hw: tuple[int, int]) -> Array:
    """Half-pixel-center bilinear resize; identity when sizes already match."""
    h, w = img.shape[:2]
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return np.asarray(img, dtype=np.float32).copy()
    ys = (np.arange(oh, dtype=np.float64) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow, dtype=np.float64) + 0.5) * (w / ow) - 0.5
    y0f = np.floor(ys)
    x0f = np.floor(xs)
    wy = (ys - y0f)[:, None]
    wx = (xs - x0f)[None, :]
    y0 = np.clip(y0f, 0, h - 1).astype(int)
    y1 = np.clip(y0f + 1, 0, h - 1).astype(int)
    x0 = np.clip(x0f, 0, w - 1).astype(int)
    x1 = np.clip(x0f + 1, 0, w - 1).astype(int)
    if img.ndim == 3:
        wy = wy[:, :, None]
        wx = wx[:, :, None]
    p00 = img[y0[:, None], x0[None, :]]
    p01 = img[y0[:, None], x1[None, :]]
    p10 = img[y1[:, None], x0[None, :]]
    p11 = img[y1[:, None], x1[None, :]]
    out = (p00 * (1 - wy) * (1 - wx) + p01 * (1 - wy) * wx
           + p10 * wy * (1 - wx) + p11 * wy * wx)
    return out.astype(np.float32)


def resize_mask(mask: Array, out_hw: tuple[int, int]) -> Array:
    return resize_bilinear(mask.astype(np.float32), out_hw) >= 0.5


def pad_to_square(img: Array, fill: float = 1.0) -> Array:
    h, w = img.shape[:2]
    side = max(h, w)
    if h == w:
        return np.asarray(img, dtype=np.float32).copy()
    out_shape = (side, side) + img.shape[2:]
    out = np.full(out_shape, fill, dtype=np.float32)
    y0 = (side - h) // 2
    x0 = (side - w) // 2
    out[y0:y0 + h, x0:x0 + w] = img
    return out


def pad_mask_to_square(mask: Array) -> Array:
    return pad_to_square(mask.astype(np.float32), fill=0.0) >= 0.5


# ---------------------------------------------------------------------------
# adaptive reference crop
# ---------------------------------------------------------------------------

def crop_ratio(s: float, params: CropParams) -> float:
    """Piecewise-linear crop ratio: beta at s=0 rising to 1 at the threshold."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"area ratio must be in [0, 1], got {s}")
    beta, thr = params.beta_min, params.area_threshold
    if s >= thr:
        return 1.0
    return beta + (1.0 - beta) / thr * s


def expanded_bbox(mask: Array, params: CropParams) -> tuple[int, int, int, int]:
    """(y0, y1, x0, x1) exclusive bounds: tight bbox grown by sqrt(1/r) per side,
    clipped to the image."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("reference mask is empty")
    h, w = mask.shape
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    s = float(mask.sum()) / (h * w)
    r = crop_ratio(s, params)
    scale = np.sqrt(1.0 / r)
    cy, cx = (y0 + y1) / 2.0, (x0 + x1) / 2.0
    hh, hw = (y1 - y0) / 2.0 * scale, (x1 - x0) / 2.0 * scale
    return (max(0, int(np.floor(cy - hh))), min(h, int(np.ceil(cy + hh))),
            max(0, int(np.floor(cx - hw))), min(w, int(np.ceil(cx + hw))))


def adaptive_crop_with_mask(i_ref: Array, m_ref: Array,
                            params: CropParams) -> tuple[Array, Array]:
    """Whiten outside the mask, crop the expanded bbox, square, resize to S."""
    if not np.asarray(m_ref).any():
        raise ValueError("reference mask is empty")
    whitened = np.where(m_ref[:, :, None], i_ref, np.float32(1.0)).astype(np.float32)
    y0, y1, x0, x1 = expanded_bbox(m_ref, params)
    crop = whitened[y0:y1, x0:x1]
    crop_mask = m_ref[y0:y1, x0:x1]
    side = (params.out_side, params.out_side)
    out = resize_bilinear(pad_to_square(crop, 1.0), side)
    out_mask = resize_mask(pad_mask_to_square(crop_mask), side)
    return np.clip(out, 0.0, 1.0), out_mask


def adaptive_crop_reference(i_ref: Array, m_ref: Array, params: CropParams) -> Array:
    return adaptive_crop_with_mask(i_ref, m_ref, params)[0]


def dilate_mask(m: Array) -> Array:
    """Two passes of dilation with an all-ones 7x7 structuring element."""
    return ndimage.binary_dilation(np.asarray(m).astype(bool),
                                   structure=np.ones((7, 7), dtype=bool), iterations=2)


def build_diptych(ref_image: Array, ref_mask: Array, src: Array, m_tar: Array,
                  params: CropParams) -> DiptychTriplet:
    """Assemble (d_src, d_res, d_mask) from a reference pair and a source scene.

    The masked side is derived from the resized full source (resize first,
    blank after) so the identity d_src == d_res * (1 - d_mask) holds exactly
    at every output size, not only when no resampling happens.
    """
    if not np.asarray(m_tar).any():
        raise ValueError("target mask is empty")
    left, left_mask = adaptive_crop_with_mask(ref_image, ref_mask, params)
    side = (params.out_side, params.out_side)
    m_d = dilate_mask(m_tar)
    right_res = np.clip(resize_bilinear(pad_to_square(src, 1.0), side), 0.0, 1.0)
    m_right = resize_mask(pad_mask_to_square(m_d), side)
    if not m_right.any():
        raise ValueError("target mask vanished during resizing")
    right_src = right_res * (~m_right[:, :, None]).astype(np.float32)
    d_res = np.concatenate([left, right_res], axis=1)
    d_src = np.concatenate([left, right_src], axis=1)
    d_mask = np.concatenate([np.zeros(side, dtype=bool), m_right], axis=1)
    return DiptychTriplet(d_src=d_src, d_res=d_res, d_mask=d_mask, ref_mask=left_mask)


# ---------------------------------------------------------------------------
# candidate quality and reference selection
# ---------------------------------------------------------------------------

def _area_score(r_area: float) -> float:
    if 0.005 <= r_area <= 0.01:
        return 1.0
    if 0.01 < r_area <= 0.05:
        return 0.7
    if 0.001 <= r_area < 0.005:
        return 0.5
    return 0.1


def quality_score(ref_img: Array, ref_mask: Array, tar_img: Array, tar_mask: Array,
                  weights: QualityWeights = QualityWeights()) -> float:
    """Area/connectivity/color quality of a candidate reference for a target."""
    ref_mask = np.asarray(ref_mask).astype(bool)
    tar_mask = np.asarray(tar_mask).astype(bool)
    if not ref_mask.any() or not tar_mask.any():
        raise ValueError("quality_score needs non-empty masks")
    r_area = float(ref_mask.mean())
    n_cc = int(ndimage.label(ref_mask)[1])
    if n_cc == 1:
        s_conn = 1.0
    elif n_cc in (2, 3):
        s_conn = 0.5
    else:
        s_conn = 0.0
    mu_ref = np.asarray(ref_img, dtype=np.float64)[ref_mask].mean(axis=0)
    mu_tar = np.asarray(tar_img, dtype=np.float64)[tar_mask].mean(axis=0)
    d_color = float(np.linalg.norm(mu_ref - mu_tar))
    s_color = float(np.exp(-d_color ** 2 / (2.0 * weights.sigma_color ** 2)))
    return (weights.w_area * _area_score(r_area) + weights.w_conn * s_conn
            + weights.w_color * s_color)


def select_reference(target: Quadruplet, candidates: Sequence[Quadruplet],
                     weights: QualityWeights = QualityWeights(), seed: int = 0,
                     ) -> Quadruplet:
    """Uniform pick among the top-3 candidates ranked by quality score."""
    if not candidates:
        raise ValueError("no candidates to select a reference from")
    scored = sorted(
        ((quality_score(c.abnormal, c.mask, target.abnormal, target.mask, weights), c)
         for c in candidates),
        key=lambda qc: (-qc[0], qc[1].id))
    top = scored[:3]
    rng = np.random.default_rng([int(seed) & 0x7FFFFFFF, zlib.crc32(target.id.encode())])
    return top[int(rng.integers(len(top)))][1]


# ---------------------------------------------------------------------------
# training-pair sampling
# ---------------------------------------------------------------------------

def _self_quality(q: Quadruplet, weights: QualityWeights) -> float:
    return quality_score(q.abnormal, q.mask, q.abnormal, q.mask, weights)


def sample_training_pairs(quads: Sequence[Quadruplet],
                          proportions: tuple[float, float, float] = (1.0, 1.0, 1.0),
                          seed: int = 0,
                          weights: QualityWeights = QualityWeights(),
                          ) -> list[PairSample]:
    """Build the three sampling distributions in one pass, then subsample.

    Within each strategy a quadruplet is used at most once as a reference and
    once as a target. Categories too small for a cross strategy are skipped
    with a logged count; an entirely empty result is an error.
    """
    props = tuple(float(p) for p in proportions)
    if len(props) != 3 or any(p < 0 for p in props) or not any(props):
        raise ValueError(f"proportions must be 3 non-negative values, not all zero: {props}")
    quads = sorted(quads, key=lambda q: q.id)

    built: dict[Strategy, list[PairSample]] = {s: [] for s in Strategy}
    skipped = 0

    if props[0] > 0:
        for q in quads:
            built[Strategy.DEFECT_FILL].append(
                PairSample(q, q, Strategy.DEFECT_FILL, _self_quality(q, weights)))

    if props[1] > 0:
        groups: dict[tuple[int, int], list[Quadruplet]] = {}
        for q in quads:
            groups.setdefault((q.object_kind, q.defect_category), []).append(q)
        for key in sorted(groups):
            members = groups[key]
            if len(members) < 2:
                skipped += 1
                continue
            used_ref: set[str] = set()
            for tar in members:
                cands = [c for c in members if c.id != tar.id and c.id not in used_ref]
                if not cands:
                    continue
                ref = select_reference(tar, cands, weights, seed=seed ^ 0x5EED1)
                used_ref.add(ref.id)
                qual = quality_score(ref.abnormal, ref.mask, tar.abnormal, tar.mask, weights)
                built[Strategy.INTRA_OBJECT_CROSS].append(
                    PairSample(ref, tar, Strategy.INTRA_OBJECT_CROSS, qual))

    if props[2] > 0:
        by_cat: dict[int, list[Quadruplet]] = {}
        for q in quads:
            by_cat.setdefault(q.defect_category, []).append(q)
        for cat in sorted(by_cat):
            members = by_cat[cat]
            kinds = {q.object_kind for q in members}
            if len(kinds) < 2:
                skipped += 1
                continue
            used_ref = set()
            for tar in members:
                cands = [c for c in members
                         if c.object_kind != tar.object_kind and c.id not in used_ref]
                if not cands:
                    continue
                ref = select_reference(tar, cands, weights, seed=seed ^ 0x5EED2)
                used_ref.add(ref.id)
                qual = quality_score(ref.abnormal, ref.mask, tar.abnormal, tar.mask, weights)
                built[Strategy.CROSS_OBJECT].append(
                    PairSample(ref, tar, Strategy.CROSS_OBJECT, qual))

    if skipped:
        log.warning("pair sampling skipped %d under-populated groups", skipped)

    # subsample each strategy to the requested ratio
    order = [Strategy.DEFECT_FILL, Strategy.INTRA_OBJECT_CROSS, Strategy.CROSS_OBJECT]
    unit = None
    for w, s in zip(props, order):
        if w > 0 and built[s]:
            unit = min(unit, len(built[s]) / w) if unit is not None else len(built[s]) / w
    if unit is None:
        raise ValueError("pair sampling produced no pairs for the requested proportions")

    rng = np.random.default_rng([int(seed) & 0x7FFFFFFF, 0x9A125])
    final: list[PairSample] = []
    for w, s in zip(props, order):
        pool = built[s]
        if w <= 0 or not pool:
            continue
        want = min(len(pool), int(round(w * unit)))
        idx = rng.permutation(len(pool))[:want]
        final.extend(pool[i] for i in sorted(idx))
    perm = rng.permutation(len(final))
    final = [final[i] for i in perm]
    if not final:
        raise ValueError("pair sampling produced an empty list")
    return final


def write_pairs_jsonl(pairs: Sequence[PairSample], path) -> None:
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(json.dumps({
                "strategy": p.strategy.value, "ref_id": p.reference.id,
                "tar_id": p.target.id, "quality": round(p.quality, 6)}) + "\n")
