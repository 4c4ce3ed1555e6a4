"""Reward models for reinforcement fine-tuning.

The task-aware reward trains a small defect classifier (categories + normal)
and a per-pixel segmenter on the synthetic training split and scores a
generated image by category match plus pixel AUROC/AP/PRO against the target
mask. The reference-consistency reward is rule-based: the candidate-quality
score of the (reference, generated) pair, damped by how much the background
deviates from the source.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nets
from .editcore import QualityWeights, quality_score
from .evalmetrics import binary_rank_metrics, pro_score

Array = np.ndarray


@dataclass
class RewardBreakdown:
    r_gen: float
    r_det: float
    r: float
    advantage: float | None = None


@dataclass
class RecogConfig:
    steps: int = 400
    batch: int = 16
    lr: float = 3e-3
    seed: int = 0
    cls_target: float = 0.90
    seg_target: float = 0.90
    max_extensions: int = 3          # extra training rounds before giving up
    budget_seconds: float = 600.0
    cls_channels: tuple = (8, 16, 24)
    seg_channels: tuple = (10, 14)


@dataclass
class RecogModels:
    classifier: dict[str, ad.DTensor]
    segmenter: dict[str, ad.DTensor]
    num_categories: int

    def save(self, out_dir) -> tuple[str, str]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cls_path = out_dir / "classifier.udgc"
        seg_path = out_dir / "segmenter.udgc"
        meta = {"num_categories": self.num_categories}
        ad.save_checkpoint(cls_path, self.classifier, meta)
        ad.save_checkpoint(seg_path, self.segmenter, meta)
        return str(cls_path), str(seg_path)

    @classmethod
    def load(cls, out_dir) -> "RecogModels":
        out_dir = Path(out_dir)
        cls_tensors, meta = ad.load_checkpoint(out_dir / "classifier.udgc")
        seg_tensors, _ = ad.load_checkpoint(out_dir / "segmenter.udgc")
        return cls(classifier={k: ad.parameter(v) for k, v in cls_tensors.items()},
                   segmenter={k: ad.parameter(v) for k, v in seg_tensors.items()},
                   num_categories=int(meta["num_categories"]))


def _recog_arrays(quads: Sequence) -> tuple[Array, Array, Array, Array]:
    abn = np.stack([q.abnormal for q in quads]).astype(np.float32)
    nrm = np.stack([q.normal for q in quads]).astype(np.float32)
    cats = np.array([q.defect_category for q in quads], dtype=np.int64)
    masks = np.stack([q.mask for q in quads]).astype(bool)
    return abn, nrm, cats, masks


def evaluate_recog(models: RecogModels, eval_quads: Sequence) -> dict[str, float]:
    abn, nrm, cats, masks = _recog_arrays(eval_quads)
    images = np.concatenate([abn, nrm])
    labels = np.concatenate([cats + 1, np.zeros(len(nrm), dtype=np.int64)])
    probs = nets.classifier_probs(models.classifier, images)
    acc = float(np.mean(np.argmax(probs, axis=1) == labels))
    normal_probs = probs[len(abn):, 0]
    heat_abn = nets.segmenter_heatmaps(models.segmenter, abn)
    heat_nrm = nets.segmenter_heatmaps(models.segmenter, nrm)
    scores = np.concatenate([heat_abn.ravel(), heat_nrm.ravel()])
    pix_labels = np.concatenate([masks.ravel().astype(int),
                                 np.zeros(heat_nrm.size, dtype=int)])
    auroc, _ = binary_rank_metrics(scores, pix_labels)
    return {"cls_acc": acc, "seg_auroc": float(auroc),
            "normal_prob_over_half": float(np.mean(normal_probs > 0.5))}


def train_recog(train_quads: Sequence, eval_quads: Sequence, num_categories: int,
                cfg: RecogConfig = RecogConfig(), out_dir=None) -> RecogModels:
    """Train classifier + segmenter to the configured eval targets.

    Extends training a few rounds if the first budget falls short; raises with
    the final metrics if the targets stay unreachable.
    """
    if not train_quads:
        raise ValueError("empty training split")
    t0 = time.monotonic()
    abn, nrm, cats, masks = _recog_arrays(train_quads)
    cls_x = np.concatenate([abn, nrm])
    cls_y = np.concatenate([cats + 1, np.zeros(len(nrm), dtype=np.int64)])
    seg_labels = np.where(masks, (cats + 1)[:, None, None], 0).astype(np.int64)
    n_classes = num_categories + 1

    rng = np.random.default_rng(cfg.seed)
    classifier = nets.build_classifier_params(rng, n_classes, cfg.cls_channels)
    segmenter = nets.build_segmenter_params(rng, n_classes, cfg.seg_channels)
    cls_opt = ad.Adam(classifier, lr=cfg.lr)
    seg_opt = ad.Adam(segmenter, lr=cfg.lr)
    models = RecogModels(classifier, segmenter, num_categories)

    metrics: dict[str, float] = {}
    cls_done = seg_done = False
    for round_idx in range(1 + cfg.max_extensions):
        round_rng = np.random.default_rng([cfg.seed, round_idx])
        if not cls_done:
            for idx in nets._iterate_batches(len(cls_x), min(cfg.batch, len(cls_x)),
                                             cfg.steps, round_rng):
                cls_opt.zero_grad()
                loss = nets.cross_entropy(nets.classifier_logits(classifier, cls_x[idx]),
                                          cls_y[idx], n_classes)
                ad.backward(loss)
                cls_opt.step()
        if not seg_done:
            for idx in nets._iterate_batches(len(abn), min(cfg.batch, len(abn)),
                                             cfg.steps, round_rng):
                seg_opt.zero_grad()
                loss = nets.cross_entropy(nets.segmenter_logits(segmenter, abn[idx]),
                                          seg_labels[idx], n_classes)
                ad.backward(loss)
                seg_opt.step()
        metrics = evaluate_recog(models, eval_quads)
        cls_done = metrics["cls_acc"] >= cfg.cls_target
        seg_done = metrics["seg_auroc"] >= cfg.seg_target
        if (cls_done and seg_done) or time.monotonic() - t0 > cfg.budget_seconds:
            break
    if metrics["cls_acc"] < cfg.cls_target or metrics["seg_auroc"] < cfg.seg_target:
        raise RuntimeError(f"recognition models below target after budget: {metrics}")
    if out_dir is not None:
        models.save(out_dir)
    return models


# ---------------------------------------------------------------------------
# rewards
# ---------------------------------------------------------------------------

def detection_score(cat_correct: bool, heat: Array, target_mask: Array) -> float:
    """Mean of category match, pixel AUROC, pixel AP, and PRO, each in [0, 1]."""
    target_mask = np.asarray(target_mask).astype(bool)
    if not target_mask.any():
        raise ValueError("detection score needs a non-empty target mask")
    if target_mask.all():
        raise ValueError("target mask covers the whole image; pixel AUROC undefined")
    auroc, ap = binary_rank_metrics(heat.ravel(), target_mask.ravel().astype(int))
    pro = pro_score(heat, target_mask)
    return float((float(cat_correct) + auroc + ap + pro) / 4.0)


def recog_reward(image: Array, target_mask: Array, category: int,
                 models: RecogModels) -> float:
    """Task-aware reward from the trained classifier and segmenter."""
    probs = nets.classifier_probs(models.classifier, image[None].astype(np.float32))[0]
    cat_correct = int(np.argmax(probs)) == category + 1
    heat = nets.segmenter_heatmaps(models.segmenter, image[None].astype(np.float32))[0]
    return detection_score(cat_correct, heat, target_mask)


def consistency_reward(ref_img: Array, ref_mask: Array, gen_img: Array, gen_mask: Array,
                       source_img: Array,
                       weights: QualityWeights = QualityWeights()) -> float:
    """Reference adherence (candidate-quality machinery) times background
    preservation exp(-10 * MSE outside the generated mask), clipped to [0, 1]."""
    q = quality_score(ref_img, ref_mask, gen_img, gen_mask, weights)
    outside = ~np.asarray(gen_mask).astype(bool)
    gen = np.asarray(gen_img, dtype=np.float64)
    src = np.asarray(source_img, dtype=np.float64)
    mse = float(np.mean((gen[outside] - src[outside]) ** 2)) if outside.any() else 0.0
    return float(np.clip(q * np.exp(-10.0 * mse), 0.0, 1.0))


def composite_reward(r_gen: float, r_det: float, w_gen: float = 0.5,
                     w_det: float = 0.5) -> float:
    if w_gen < 0 or w_det < 0:
        raise ValueError("reward weights must be non-negative")
    return w_gen * r_gen + w_det * r_det


def segmenter_embedder(models: RecogModels):
    """Feature extractor over the segmenter's penultimate activations."""
    def embed(image: Array) -> Array:
        return nets.segmenter_penultimate(models.segmenter,
                                          image[None].astype(np.float32))[0]
    return embed
