import numpy as np
import pytest

from defectlab import editcore as ec
from defectlab import synthworld as sw


PARAMS = ec.CropParams()


def make_quad(qid, kind, cat, seed, size=(64, 64)):
    normal = sw.gen_normal(seed, kind, size)
    abnormal, mask = sw.inject_defect(normal, cat, seed)
    return sw.Quadruplet(qid, kind, cat, normal, abnormal, mask, "train")


# ---------------------------------------------------------------------------
# crop ratio
# ---------------------------------------------------------------------------

def test_crop_ratio_at_zero():
    assert ec.crop_ratio(0.0, PARAMS) == pytest.approx(0.6)


def test_crop_ratio_hand_value():
    # beta + (1 - beta)/T * s = 0.6 + 4 * 0.05
    assert ec.crop_ratio(0.05, PARAMS) == pytest.approx(0.8)


def test_crop_ratio_saturates_and_is_continuous():
    assert ec.crop_ratio(0.1, PARAMS) == 1.0
    assert ec.crop_ratio(0.0999999, PARAMS) == pytest.approx(1.0, abs=1e-5)
    assert ec.crop_ratio(0.7, PARAMS) == 1.0


def test_crop_ratio_monotone_in_range():
    grid = np.linspace(0, 1, 201)
    vals = [ec.crop_ratio(float(s), PARAMS) for s in grid]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert min(vals) >= 0.6 and max(vals) <= 1.0


def test_crop_ratio_domain_error():
    with pytest.raises(ValueError):
        ec.crop_ratio(-0.1, PARAMS)
    with pytest.raises(ValueError):
        ec.crop_ratio(1.5, PARAMS)


# ---------------------------------------------------------------------------
# adaptive crop
# ---------------------------------------------------------------------------

def test_expanded_bbox_hand_case():
    # 8x8 defect in 64x64: s = 64/4096, r = 0.6 + 4 * 0.015625 = 0.6625,
    # side scale sqrt(1/0.6625) ~ 1.2288 so the window grows 8 -> ~10
    mask = np.zeros((64, 64), dtype=bool)
    mask[28:36, 28:36] = True
    s = mask.mean()
    r = ec.crop_ratio(float(s), PARAMS)
    assert r == pytest.approx(0.6625)
    assert np.sqrt(1 / r) == pytest.approx(1.2288, abs=5e-4)
    y0, y1, x0, x1 = ec.expanded_bbox(mask, PARAMS)
    assert 9 <= (y1 - y0) <= 11
    assert 9 <= (x1 - x0) <= 11


def test_expanded_bbox_no_growth_above_threshold():
    mask = np.zeros((64, 64), dtype=bool)
    mask[10:40, 12:44] = True  # 30*32/4096 = 0.234 >= T
    y0, y1, x0, x1 = ec.expanded_bbox(mask, PARAMS)
    assert (y0, y1, x0, x1) == (10, 40, 12, 44)


def test_adaptive_crop_shape_range_and_whitening():
    q = make_quad("a", 0, 0, 3)
    out = ec.adaptive_crop_reference(q.abnormal, q.mask, PARAMS)
    assert out.shape == (64, 64, 3)
    assert out.min() >= 0.0 and out.max() <= 1.0
    # corners of the crop are whitened background for a small central defect
    crop, crop_mask = ec.adaptive_crop_with_mask(q.abnormal, q.mask, PARAMS)
    assert np.isclose(crop[~crop_mask].mean(), 1.0, atol=0.05)


def test_adaptive_crop_empty_mask_raises():
    q = make_quad("a", 0, 0, 3)
    with pytest.raises(ValueError):
        ec.adaptive_crop_reference(q.abnormal, np.zeros((64, 64), dtype=bool), PARAMS)


# ---------------------------------------------------------------------------
# dilation
# ---------------------------------------------------------------------------

def test_dilate_unit_pixel_gives_13x13_block():
    m = np.zeros((31, 31), dtype=bool)
    m[15, 15] = True
    out = ec.dilate_mask(m)
    want = np.zeros((31, 31), dtype=bool)
    want[9:22, 9:22] = True  # Chebyshev radius 3 applied twice = radius 6
    assert np.array_equal(out, want)


def test_dilate_fixed_points():
    zeros = np.zeros((16, 16), dtype=bool)
    ones = np.ones((16, 16), dtype=bool)
    assert not ec.dilate_mask(zeros).any()
    assert ec.dilate_mask(ones).all()


def test_dilate_is_extensive_and_translation_equivariant():
    rng = np.random.default_rng(0)
    for _ in range(10):
        m = np.zeros((40, 40), dtype=bool)
        m[14:20, 14:20] = rng.uniform(size=(6, 6)) < 0.5
        if not m.any():
            continue
        out = ec.dilate_mask(m)
        assert (out | m).sum() == out.sum()  # output contains input
        shifted = np.roll(m, (3, 2), axis=(0, 1))
        assert np.array_equal(ec.dilate_mask(shifted), np.roll(out, (3, 2), axis=(0, 1)))


# ---------------------------------------------------------------------------
# diptych
# ---------------------------------------------------------------------------

def diptych_invariants(trip):
    s = trip.d_mask.shape[0]
    assert trip.d_src.shape == (s, 2 * s, 3)
    assert trip.d_res.shape == (s, 2 * s, 3)
    assert not trip.d_mask[:, :s].any()
    assert np.array_equal(trip.d_src[:, :s], trip.d_res[:, :s])
    right_masked = trip.d_res[:, s:] * (~trip.d_mask[:, s:][:, :, None])
    assert np.array_equal(trip.d_src[:, s:], right_masked)


def test_build_diptych_invariants_default_size():
    q = make_quad("a", 1, 2, 5)
    trip = ec.build_diptych(q.abnormal, q.mask, q.abnormal, q.mask, PARAMS)
    diptych_invariants(trip)


def test_build_diptych_invariants_resized():
    q = make_quad("a", 2, 1, 9)
    trip = ec.build_diptych(q.abnormal, q.mask, q.abnormal, q.mask,
                            ec.CropParams(out_side=32))
    diptych_invariants(trip)


def test_build_diptych_random_property():
    rng = np.random.default_rng(1)
    for i in range(40):
        kind = int(rng.integers(4))
        cat = int(rng.integers(4))
        q = make_quad(f"q{i}", kind, cat, int(rng.integers(10000)))
        trip = ec.build_diptych(q.abnormal, q.mask, q.normal, q.mask, PARAMS)
        diptych_invariants(trip)


def test_build_diptych_empty_target_mask_raises():
    q = make_quad("a", 0, 0, 2)
    with pytest.raises(ValueError):
        ec.build_diptych(q.abnormal, q.mask, q.normal,
                         np.zeros((64, 64), dtype=bool), PARAMS)


# ---------------------------------------------------------------------------
# quality score
# ---------------------------------------------------------------------------

def _synthetic_case(r_area, n_cc, d_color, size=100):
    """Build (ref_img, ref_mask, tar_img, tar_mask) realizing the given stats."""
    h = w = size
    ref_mask = np.zeros((h, w), dtype=bool)
    total = int(round(r_area * h * w))
    per = total // n_cc
    for c in range(n_cc):
        y = 2 + c * 4  # rows of length `per`, separated so they never touch
        ref_mask[y, 2:2 + per] = True
    ref_img = np.zeros((h, w, 3), dtype=np.float32)
    tar_img = np.full((h, w, 3), d_color / np.sqrt(3.0), dtype=np.float32)
    tar_mask = np.zeros((h, w), dtype=bool)
    tar_mask[h - 3, 2:12] = True
    return ref_img, ref_mask, tar_img, tar_mask


def test_quality_score_hand_value():
    # r_area = 3%, N_cc = 3, d_color = 0.1, sigma = 0.1:
    # 0.3*0.7 + 0.4*0.5 + 0.3*exp(-0.5) = 0.59196
    ref_img, ref_mask, tar_img, tar_mask = _synthetic_case(0.03, 3, 0.1)
    q = ec.quality_score(ref_img, ref_mask, tar_img, tar_mask)
    assert q == pytest.approx(0.3 * 0.7 + 0.4 * 0.5 + 0.3 * np.exp(-0.5), abs=1e-4)


def test_quality_score_ideal_case():
    ref_img, ref_mask, tar_img, tar_mask = _synthetic_case(0.007, 1, 0.0)
    assert ec.quality_score(ref_img, ref_mask, tar_img, tar_mask) == pytest.approx(1.0, abs=1e-9)


def test_quality_score_self_pair_max():
    h = w = 100
    mask = np.zeros((h, w), dtype=bool)
    mask[40:47, 40:50] = True  # 70 px = 0.7% of 10000, single component
    img = np.random.default_rng(0).uniform(size=(h, w, 3)).astype(np.float32)
    assert ec.quality_score(img, mask, img, mask) == pytest.approx(1.0, abs=1e-9)


def test_quality_score_bounds_property():
    rng = np.random.default_rng(2)
    for _ in range(30):
        a = make_quad("a", int(rng.integers(4)), int(rng.integers(4)), int(rng.integers(1000)))
        b = make_quad("b", int(rng.integers(4)), int(rng.integers(4)), int(rng.integers(1000)))
        q = ec.quality_score(a.abnormal, a.mask, b.abnormal, b.mask)
        assert 0.03 <= q <= 1.0


def test_quality_score_empty_mask_raises():
    img = np.zeros((32, 32, 3), dtype=np.float32)
    empty = np.zeros((32, 32), dtype=bool)
    full = np.ones((32, 32), dtype=bool)
    with pytest.raises(ValueError):
        ec.quality_score(img, empty, img, full)
    with pytest.raises(ValueError):
        ec.quality_score(img, full, img, empty)


# ---------------------------------------------------------------------------
# reference selection
# ---------------------------------------------------------------------------

def _graded_candidates(target):
    """Candidates whose color distance to the target grades their scores."""
    cands = []
    for i, shade in enumerate([0.0, 0.25, 0.5, 0.9]):
        img = np.full((64, 64, 3), shade, dtype=np.float32)
        mask = np.zeros((64, 64), dtype=bool)
        mask[30:34, 30:38], = (slice(None),)  # 32 px single blob, 0.78% area
        mask[30:34, 30:38] = True
        cands.append(sw.Quadruplet(f"c{i}", 0, 0, img, img, mask, "train"))
    return cands


def test_select_reference_single_candidate():
    target = make_quad("t", 0, 0, 1)
    only = make_quad("c", 0, 0, 2)
    assert ec.select_reference(target, [only], seed=0).id == "c"


def test_select_reference_always_in_top3():
    target = sw.Quadruplet(
        "t", 0, 0, np.zeros((64, 64, 3), np.float32), np.zeros((64, 64, 3), np.float32),
        _graded_candidates(None)[0].mask, "train")
    cands = _graded_candidates(target)
    scores = {c.id: ec.quality_score(c.abnormal, c.mask, target.abnormal, target.mask)
              for c in cands}
    top3 = set(sorted(scores, key=lambda k: (-scores[k], k))[:3])
    seen = set()
    for seed in range(100):
        pick = ec.select_reference(target, cands, seed=seed)
        assert pick.id in top3
        seen.add(pick.id)
    assert len(seen) == 3  # the uniform draw actually reaches every slot


def test_select_reference_deterministic():
    target = make_quad("t", 1, 1, 3)
    cands = [make_quad(f"c{i}", 1, 1, 10 + i) for i in range(5)]
    a = ec.select_reference(target, cands, seed=42)
    b = ec.select_reference(target, cands, seed=42)
    assert a.id == b.id


def test_select_reference_empty_raises():
    target = make_quad("t", 0, 0, 1)
    with pytest.raises(ValueError):
        ec.select_reference(target, [], seed=0)


# ---------------------------------------------------------------------------
# pair sampling
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_world():
    quads = []
    for kind in range(2):
        for cat in range(2):
            for i in range(8):
                quads.append(make_quad(f"k{kind}c{cat}i{i:03d}", kind, cat,
                                       seed=kind * 100 + cat * 10 + i, size=(32, 32)))
    return quads


def test_pairs_defect_fill_only(small_world):
    pairs = ec.sample_training_pairs(small_world, (1, 0, 0), seed=0)
    assert pairs
    assert all(p.strategy == ec.Strategy.DEFECT_FILL for p in pairs)
    assert all(p.reference.id == p.target.id for p in pairs)


def test_pairs_intra_cross_only(small_world):
    pairs = ec.sample_training_pairs(small_world, (0, 1, 0), seed=0)
    assert pairs
    for p in pairs:
        assert p.strategy == ec.Strategy.INTRA_OBJECT_CROSS
        assert p.reference.id != p.target.id
        assert p.reference.object_kind == p.target.object_kind
        assert p.reference.defect_category == p.target.defect_category


def test_pairs_cross_object_only(small_world):
    pairs = ec.sample_training_pairs(small_world, (0, 0, 1), seed=0)
    assert pairs
    for p in pairs:
        assert p.strategy == ec.Strategy.CROSS_OBJECT
        assert p.reference.object_kind != p.target.object_kind
        assert p.reference.defect_category == p.target.defect_category


def test_pairs_balanced_counts(small_world):
    pairs = ec.sample_training_pairs(small_world, (1, 1, 1), seed=0)
    counts = {s: 0 for s in ec.Strategy}
    for p in pairs:
        counts[p.strategy] += 1
    values = list(counts.values())
    assert max(values) - min(values) <= 1


def test_pairs_usage_caps(small_world):
    pairs = ec.sample_training_pairs(small_world, (0, 1, 1), seed=1)
    for strat in (ec.Strategy.INTRA_OBJECT_CROSS, ec.Strategy.CROSS_OBJECT):
        refs = [p.reference.id for p in pairs if p.strategy == strat]
        tars = [p.target.id for p in pairs if p.strategy == strat]
        assert len(refs) == len(set(refs))
        assert len(tars) == len(set(tars))


def test_pairs_deterministic(small_world):
    a = ec.sample_training_pairs(small_world, (1, 1, 1), seed=7)
    b = ec.sample_training_pairs(small_world, (1, 1, 1), seed=7)
    assert [(p.reference.id, p.target.id, p.strategy) for p in a] == \
           [(p.reference.id, p.target.id, p.strategy) for p in b]


def test_pairs_bad_proportions(small_world):
    with pytest.raises(ValueError):
        ec.sample_training_pairs(small_world, (0, 0, 0), seed=0)


def test_pairs_jsonl(tmp_path, small_world):
    pairs = ec.sample_training_pairs(small_world, (1, 1, 1), seed=0)
    path = tmp_path / "pairs.jsonl"
    ec.write_pairs_jsonl(pairs, path)
    import json
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == len(pairs)
    assert set(rows[0]) == {"strategy", "ref_id", "tar_id", "quality"}
