"""Detection, localization, segmentation, and diversity metrics.

Conventions, chosen once and used by both the implementations and the test
oracles:

* AUROC is the Mann-Whitney statistic (ties count half), computed from
  midranks.
* AP uses step interpolation sum((R_k - R_{k-1}) * P_k) over descending
  distinct-score groups, so constant scores give the positive fraction.
* PRO sweeps every distinct heat value, records (FPR, mean per-component
  overlap) operating points, and integrates them as a step function (value 0
  before the first point) up to `fpr_limit`, normalized by the limit.
* Intra-cluster distances are RMS differences per feature element, which makes
  two images differing by a constant c everywhere sit at distance c. The pixel
  feature is a 4x block-mean downsample; this is a stand-in for a perceptual
  embedding and is labeled as an analogue in reports.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

Array = np.ndarray


# ---------------------------------------------------------------------------
# binary ranking metrics
# ---------------------------------------------------------------------------

def binary_rank_metrics(scores, labels) -> tuple[float, float]:
    """(AUROC, AP) for scores against 0/1 labels. Needs both classes."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC undefined: both classes must be present")

    order = np.argsort(s, kind="stable")
    sorted_s = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    # midranks over tie groups
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[y == 1].sum()
    auroc = (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    desc = np.argsort(-s, kind="stable")
    s_desc = s[desc]
    y_desc = y[desc]
    # group boundaries: last index of each distinct score
    boundary = np.nonzero(np.diff(s_desc))[0]
    ends = np.concatenate([boundary, [s.size - 1]])
    tp = np.cumsum(y_desc)[ends]
    total = ends + 1
    recall = tp / n_pos
    precision = tp / total
    prev_r = np.concatenate([[0.0], recall[:-1]])
    ap = float(np.sum((recall - prev_r) * precision))
    return float(auroc), ap


# ---------------------------------------------------------------------------
# per-region overlap
# ---------------------------------------------------------------------------

def _label_components(gt: Array) -> Array:
    """4-connected component ids, labeled per 2-D slice for stacked inputs."""
    if gt.ndim == 2:
        labels, _ = ndimage.label(gt)
        return labels
    out = np.zeros(gt.shape, dtype=np.int64)
    offset = 0
    for k in range(gt.shape[0]):
        labels, n = ndimage.label(gt[k])
        out[k] = np.where(labels > 0, labels + offset, 0)
        offset += n
    return out


def pro_score(heatmap, gt_mask, fpr_limit: float = 0.3) -> float:
    """Area under the (FPR, mean per-component overlap) step curve.

    Accepts a single (H, W) pair or stacked (N, H, W) arrays; components are
    labeled per image while the threshold sweep and FPR are global.
    """
    heat = np.asarray(heatmap, dtype=np.float64)
    gt = np.asarray(gt_mask).astype(bool)
    if heat.shape != gt.shape:
        raise ValueError(f"heatmap {heat.shape} and mask {gt.shape} differ")
    if not gt.any():
        raise ValueError("PRO undefined for an empty ground-truth mask")

    comp = _label_components(gt)
    n_comp = int(comp.max())
    areas = np.bincount(comp.ravel(), minlength=n_comp + 1)[1:].astype(np.float64)

    flat_heat = heat.ravel()
    flat_comp = comp.ravel()
    neg = flat_comp == 0
    n_neg = int(neg.sum())

    order = np.argsort(-flat_heat, kind="stable")
    sorted_heat = flat_heat[order]
    sorted_comp = flat_comp[order]

    # mean overlap after a prefix = sum of per-pixel weights 1/(C * area_c)
    weights = np.zeros(flat_heat.size, dtype=np.float64)
    in_comp = sorted_comp > 0
    weights[in_comp] = 1.0 / (n_comp * areas[sorted_comp[in_comp] - 1])
    overlap_cum = np.cumsum(weights)
    fp_cum = np.cumsum(neg[order].astype(np.float64))
    fpr_cum = fp_cum / n_neg if n_neg > 0 else np.zeros_like(fp_cum)

    ends = np.concatenate([np.nonzero(np.diff(sorted_heat))[0], [flat_heat.size - 1]])
    fprs = fpr_cum[ends]
    overlaps = overlap_cum[ends]

    area = 0.0
    for k in range(len(ends)):
        left = min(fprs[k], fpr_limit)
        right = fpr_limit if k + 1 == len(ends) else min(fprs[k + 1], fpr_limit)
        if right > left:
            area += (right - left) * overlaps[k]
    return float(area / fpr_limit)


# ---------------------------------------------------------------------------
# multi-class segmentation
# ---------------------------------------------------------------------------

def multiclass_miou(pred_labels, gt_labels, num_classes: int) -> tuple[float, float, float]:
    """(mIoU, FG-mIoU, BG-IoU) over classes present in pred or gt.

    Class 0 is background. Aggregates absent from the inputs come back as NaN.
    """
    pred = np.asarray(pred_labels).astype(np.int64).ravel()
    gt = np.asarray(gt_labels).astype(np.int64).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"label maps differ: {pred.shape} vs {gt.shape}")
    ious: dict[int, float] = {}
    for cls in range(num_classes):
        p = pred == cls
        g = gt == cls
        union = int(np.logical_or(p, g).sum())
        if union == 0:
            continue
        ious[cls] = float(np.logical_and(p, g).sum() / union)
    miou = float(np.mean(list(ious.values()))) if ious else float("nan")
    fg = [v for c, v in ious.items() if c != 0]
    fg_miou = float(np.mean(fg)) if fg else float("nan")
    bg_miou = ious.get(0, float("nan"))
    return miou, fg_miou, bg_miou


# ---------------------------------------------------------------------------
# intra-cluster diversity
# ---------------------------------------------------------------------------

def _block_mean(img: Array, factor: int = 4) -> Array:
    h, w = img.shape[:2]
    hc, wc = (h // factor) * factor, (w // factor) * factor
    x = img[:hc, :wc]
    x = x.reshape(hc // factor, factor, wc // factor, factor, -1)
    return x.mean(axis=(1, 3))


def _rms(a: Array, b: Array) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.sqrt(np.mean(np.square(d))))


def intra_cluster_distance(images: Sequence[Array], masks: Sequence[Array] | None = None,
                           feature: str = "pixel",
                           embedder: Callable[[Array], Array] | None = None,
                           ) -> tuple[float, float | None]:
    """Mean pairwise feature distance in a cluster, globally and defect-masked.

    The masked variant zeroes everything outside the union of the two defect
    masks before featurizing, keeping the per-element normalization, so it is
    bounded by the global value whenever the defects are the only difference.
    """
    if len(images) < 2:
        raise ValueError("intra-cluster distance needs at least 2 images")
    if feature == "pixel":
        feat = _block_mean
    elif feature == "recog_embed":
        if embedder is None:
            raise ValueError("feature 'recog_embed' needs an embedder")
        feat = embedder
    else:
        raise ValueError(f"unknown feature space {feature!r}")

    feats = [feat(np.asarray(img, dtype=np.float32)) for img in images]
    dists = []
    dists_masked = [] if masks is not None else None
    for i in range(len(images)):
        for j in range(i + 1, len(images)):
            dists.append(_rms(feats[i], feats[j]))
            if masks is not None:
                union = (np.asarray(masks[i]) | np.asarray(masks[j])).astype(np.float32)
                mi = np.asarray(images[i], dtype=np.float32) * union[..., None]
                mj = np.asarray(images[j], dtype=np.float32) * union[..., None]
                dists_masked.append(_rms(feat(mi), feat(mj)))
    il = float(np.mean(dists))
    il_a = float(np.mean(dists_masked)) if dists_masked is not None else None
    return il, il_a


# ---------------------------------------------------------------------------
# report container
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    auroc_i: float | None = None
    ap_i: float | None = None
    auroc_p: float | None = None
    ap_p: float | None = None
    pro_p: float | None = None
    acc: float | None = None
    miou: float | None = None
    fg_miou: float | None = None
    bg_miou: float | None = None
    il: float | None = None
    il_a: float | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def save_report_csv(path, rows: Sequence[dict]) -> None:
    """Per-category metric rows as CSV; columns are the union of row keys."""
    if not rows:
        raise ValueError("no rows to write")
    keys: list[str] = []
    for row in rows:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys, restval="")
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# downstream evaluation on generated data
# ---------------------------------------------------------------------------

@dataclass
class GeneratedSample:
    image: Array            # (H, W, 3) float in [0, 1]
    mask: Array             # (H, W) bool, intended defect region
    category: int
    source_normal: Array | None = None
    source_id: str = ""


def downstream_eval(generated: Sequence[GeneratedSample], eval_quads: Sequence,
                    num_categories: int, steps: int = 250, batch: int = 16,
                    lr: float = 3e-3, seed: int = 0,
                    il_feature: str = "pixel") -> MetricReport:
    """Train fresh recognition nets on the generated set, score the eval split.

    `eval_quads` are Quadruplets; missing categories are reported in
    `extras["missing_categories"]` rather than silently scored as zero.
    """
    from . import nets

    if not generated:
        raise ValueError("empty generated set")
    present = {g.category for g in generated}
    missing = sorted(set(range(num_categories)) - present)

    gen_imgs = np.stack([g.image for g in generated]).astype(np.float32)
    gen_masks = np.stack([g.mask for g in generated]).astype(bool)
    gen_cats = np.array([g.category for g in generated], dtype=np.int64)

    # classifier data: generated defects labeled category+1, source normals 0
    cls_imgs = [gen_imgs]
    cls_labels = [gen_cats + 1]
    normals = [g.source_normal for g in generated if g.source_normal is not None]
    if normals:
        cls_imgs.append(np.stack(normals).astype(np.float32))
        cls_labels.append(np.zeros(len(normals), dtype=np.int64))
    cls_x = np.concatenate(cls_imgs)
    cls_y = np.concatenate(cls_labels)

    seg_labels = np.where(gen_masks, (gen_cats + 1)[:, None, None], 0).astype(np.int64)

    n_classes = num_categories + 1
    clf = nets.train_classifier(cls_x, cls_y, n_classes, steps=steps, batch=batch,
                                lr=lr, seed=seed)
    seg = nets.train_segmenter(gen_imgs, seg_labels, n_classes, steps=steps, batch=batch,
                               lr=lr, seed=seed + 1)

    eval_abn = np.stack([q.abnormal for q in eval_quads]).astype(np.float32)
    eval_nrm = np.stack([q.normal for q in eval_quads]).astype(np.float32)
    eval_masks = np.stack([q.mask for q in eval_quads]).astype(bool)
    eval_cats = np.array([q.defect_category for q in eval_quads], dtype=np.int64)

    # classification accuracy over abnormal eval images
    probs = nets.classifier_probs(clf, eval_abn)
    acc = float(np.mean(np.argmax(probs, axis=1) == eval_cats + 1))

    # pixel metrics from the segmenter's defect probability
    heat_abn = nets.segmenter_heatmaps(seg, eval_abn)
    heat_nrm = nets.segmenter_heatmaps(seg, eval_nrm)
    pix_scores = np.concatenate([heat_abn.ravel(), heat_nrm.ravel()])
    pix_labels = np.concatenate([eval_masks.ravel().astype(int),
                                 np.zeros(heat_nrm.size, dtype=int)])
    auroc_p, ap_p = binary_rank_metrics(pix_scores, pix_labels)
    pro_p = pro_score(heat_abn, eval_masks)

    # image metrics: max heat as the anomaly score
    img_scores = np.concatenate([heat_abn.reshape(len(eval_abn), -1).max(axis=1),
                                 heat_nrm.reshape(len(eval_nrm), -1).max(axis=1)])
    img_labels = np.concatenate([np.ones(len(eval_abn), dtype=int),
                                 np.zeros(len(eval_nrm), dtype=int)])
    auroc_i, ap_i = binary_rank_metrics(img_scores, img_labels)

    pred_maps = nets.segmenter_argmax(seg, eval_abn)
    gt_maps = np.where(eval_masks, (eval_cats + 1)[:, None, None], 0)
    miou, fg_miou, bg_miou = multiclass_miou(pred_maps, gt_maps, n_classes)

    # diversity of the generated set, per category cluster
    ils, ilas = [], []
    for cat in sorted(present):
        idx = np.nonzero(gen_cats == cat)[0]
        if idx.size < 2:
            continue
        il, il_a = intra_cluster_distance([gen_imgs[i] for i in idx],
                                          [gen_masks[i] for i in idx],
                                          feature=il_feature)
        ils.append(il)
        ilas.append(il_a)

    return MetricReport(
        auroc_i=auroc_i, ap_i=ap_i, auroc_p=auroc_p, ap_p=ap_p, pro_p=pro_p,
        acc=acc, miou=miou, fg_miou=fg_miou, bg_miou=bg_miou,
        il=float(np.mean(ils)) if ils else None,
        il_a=float(np.mean(ilas)) if ilas else None,
        extras={"missing_categories": missing, "il_feature": f"{il_feature}-analogue"},
    )
