import numpy as np
import pytest

from defectlab import autodiff as ad
from defectlab import nets
from defectlab import rewardlab as rl
from defectlab.editcore import quality_score


def _fake_models(num_categories, predicted_class, bg_logit=8.0):
    """Hand-built nets: classifier always argmaxes `predicted_class`, the
    segmenter emits a constant all-background (heat ~ 0) map."""
    rng = np.random.default_rng(0)
    n_classes = num_categories + 1
    cls = nets.build_classifier_params(rng, n_classes)
    seg = nets.build_segmenter_params(rng, n_classes)
    for name in ("w1", "w2", "w3"):
        cls[name] = ad.parameter(np.zeros_like(cls[name].data))
    for name in ("b1", "b2", "b3"):
        cls[name] = ad.parameter(np.zeros_like(cls[name].data))
    cls["head_w"] = ad.parameter(np.zeros_like(cls["head_w"].data))
    head_b = np.zeros(n_classes, dtype=np.float32)
    head_b[predicted_class] = 5.0
    cls["head_b"] = ad.parameter(head_b)
    for name in ("w1", "w2", "b1", "b2"):
        seg[name] = ad.parameter(np.zeros_like(seg[name].data))
    seg["head_w"] = ad.parameter(np.zeros_like(seg["head_w"].data))
    seg_b = np.zeros(n_classes, dtype=np.float32)
    seg_b[0] = bg_logit
    seg["head_b"] = ad.parameter(seg_b)
    return rl.RecogModels(cls, seg, num_categories)


# ---------------------------------------------------------------------------
# trained recognition models (shared fixture)
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_recog_training_reaches_targets(recog_models, default_dataset):
    metrics = rl.evaluate_recog(recog_models, default_dataset["eval"])
    assert metrics["cls_acc"] >= 0.90
    assert metrics["seg_auroc"] >= 0.90


@pytest.mark.slow
def test_normals_classified_normal(recog_models, default_dataset):
    metrics = rl.evaluate_recog(recog_models, default_dataset["eval"])
    assert metrics["normal_prob_over_half"] >= 0.90


@pytest.mark.slow
def test_recog_reward_high_on_ground_truth(recog_models, default_dataset):
    scores = [
        rl.recog_reward(q.abnormal, q.mask, q.defect_category, recog_models)
        for q in default_dataset["eval"][:12]
    ]
    assert np.mean(scores) >= 0.8


@pytest.mark.slow
def test_recog_checkpoint_round_trip(recog_models, default_dataset, tmp_path):
    recog_models.save(tmp_path)
    loaded = rl.RecogModels.load(tmp_path)
    q = default_dataset["eval"][0]
    a = rl.recog_reward(q.abnormal, q.mask, q.defect_category, recog_models)
    b = rl.recog_reward(q.abnormal, q.mask, q.defect_category, loaded)
    assert a == b


# ---------------------------------------------------------------------------
# detection-score composition
# ---------------------------------------------------------------------------

def test_degenerate_constant_heatmap_formula():
    # wrong class + flat heat map: (0 + 0.5 + area_fraction + 0) / 4
    mask = np.zeros((32, 32), dtype=bool)
    mask[10:14, 10:18] = True
    models = _fake_models(4, predicted_class=0)
    img = np.random.default_rng(1).uniform(size=(32, 32, 3)).astype(np.float32)
    r = rl.recog_reward(img, mask, category=2, models=models)
    area_fraction = mask.mean()
    assert r == pytest.approx((0.0 + 0.5 + area_fraction + 0.0) / 4.0, abs=1e-6)


def test_perfect_heatmap_and_class():
    mask = np.zeros((16, 16), dtype=bool)
    mask[4:7, 5:10] = True
    assert rl.detection_score(True, mask.astype(np.float64), mask) == pytest.approx(1.0)


def test_detection_score_monotone_in_components():
    mask = np.zeros((16, 16), dtype=bool)
    mask[4:8, 4:8] = True
    heat_good = mask.astype(np.float64)
    rng = np.random.default_rng(2)
    heat_noisy = np.clip(heat_good + rng.normal(scale=0.3, size=heat_good.shape), 0, 1)
    assert rl.detection_score(True, heat_good, mask) >= rl.detection_score(True, heat_noisy, mask)
    assert rl.detection_score(True, heat_noisy, mask) > rl.detection_score(False, heat_noisy, mask)


def test_detection_score_mask_validation():
    heat = np.zeros((8, 8))
    with pytest.raises(ValueError):
        rl.detection_score(True, heat, np.zeros((8, 8), dtype=bool))
    with pytest.raises(ValueError):
        rl.detection_score(True, heat, np.ones((8, 8), dtype=bool))


# ---------------------------------------------------------------------------
# consistency reward
# ---------------------------------------------------------------------------

def _self_pair():
    from defectlab import synthworld as sw
    normal = sw.gen_normal(5, 1, (32, 32))
    abnormal, mask = sw.inject_defect(normal, 0, seed=3)
    return normal, abnormal, mask


def test_consistency_reward_ground_truth_generation():
    normal, abnormal, mask = _self_pair()
    r = rl.consistency_reward(abnormal, mask, abnormal, mask, source_img=abnormal)
    q = quality_score(abnormal, mask, abnormal, mask)
    assert r == pytest.approx(min(q, 1.0), abs=1e-7)


def test_consistency_reward_background_damping():
    normal, abnormal, mask = _self_pair()
    source = abnormal.copy()
    outside = ~mask
    # corrupt the generated background so MSE outside the mask is exactly 0.1
    gen = abnormal.copy()
    gen[outside] = gen[outside] + np.sqrt(0.1)
    r_clean = rl.consistency_reward(abnormal, mask, abnormal, mask, source)
    r_dirty = rl.consistency_reward(abnormal, mask, gen, mask, source)
    assert r_dirty == pytest.approx(r_clean * np.exp(-1.0), rel=1e-3)


def test_consistency_reward_total_on_empty_change():
    normal, abnormal, mask = _self_pair()
    r = rl.consistency_reward(abnormal, mask, normal, mask, source_img=normal)
    assert 0.0 <= r <= 1.0


def test_consistency_reward_maximal_needs_clean_background():
    normal, abnormal, mask = _self_pair()
    gen = abnormal.copy()
    gen[~mask] += 0.05
    r = rl.consistency_reward(abnormal, mask, gen, mask, source_img=abnormal)
    r_clean = rl.consistency_reward(abnormal, mask, abnormal, mask, source_img=abnormal)
    assert r < r_clean


# ---------------------------------------------------------------------------
# composite reward
# ---------------------------------------------------------------------------

def test_composite_reward_hand_values():
    assert rl.composite_reward(0.8, 0.6, 0.5, 0.5) == pytest.approx(0.7)
    assert rl.composite_reward(0.8, 0.6, 0.5, 0.0) == pytest.approx(0.4)
    assert rl.composite_reward(1.0, 1.0, 0.5, 0.5) == pytest.approx(1.0)


def test_composite_reward_linearity():
    rng = np.random.default_rng(3)
    for _ in range(20):
        rg, rd = rng.uniform(size=2)
        wg, wd = rng.uniform(size=2)
        assert rl.composite_reward(rg, rd, wg, wd) == pytest.approx(wg * rg + wd * rd)


def test_composite_reward_rejects_negative_weights():
    with pytest.raises(ValueError):
        rl.composite_reward(0.5, 0.5, -0.1, 0.5)


def test_reward_breakdown_dataclass():
    rb = rl.RewardBreakdown(r_gen=0.8, r_det=0.6, r=0.7)
    assert rb.advantage is None
    assert rb.r == pytest.approx(rl.composite_reward(rb.r_gen, rb.r_det, 0.5, 0.5))
