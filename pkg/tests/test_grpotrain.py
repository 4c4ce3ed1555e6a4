import numpy as np
import pytest

from defectlab import autodiff as ad
from defectlab import editcore as ec
from defectlab import grpotrain as gt
from defectlab import rewardlab as rl
from defectlab import sfttrain as st
from defectlab import synthworld as sw
from defectlab.denoiser import ModelConfig, VelocityModel


# ---------------------------------------------------------------------------
# advantages
# ---------------------------------------------------------------------------

def test_advantages_equal_rewards_are_zero():
    a = gt.compute_advantages([0.4] * 8, eps=1e-5)
    assert np.allclose(a, 0.0)


def test_advantages_hand_case():
    a = gt.compute_advantages([0.0, 2.0], eps=0.0)
    assert np.allclose(a, [-1.0, 1.0])


def test_advantages_shift_invariance_exact():
    rng = np.random.default_rng(0)
    r = rng.uniform(size=8)
    a1 = gt.compute_advantages(r, eps=1e-5)
    a2 = gt.compute_advantages(r + 3.7, eps=1e-5)
    assert np.allclose(a1, a2, atol=1e-12)


def test_advantages_scale_invariance_at_zero_eps():
    rng = np.random.default_rng(1)
    r = rng.uniform(size=8)
    a1 = gt.compute_advantages(r, eps=0.0)
    a2 = gt.compute_advantages(4.2 * r, eps=0.0)
    assert np.allclose(a1, a2, atol=1e-12)


def test_advantages_sum_to_zero():
    rng = np.random.default_rng(2)
    a = gt.compute_advantages(rng.uniform(size=8), eps=0.0)
    assert abs(a.sum()) <= 1e-6


def test_advantages_reject_small_group():
    with pytest.raises(ValueError):
        gt.compute_advantages([0.5], eps=0.0)


# ---------------------------------------------------------------------------
# clipped policy loss
# ---------------------------------------------------------------------------

def test_policy_loss_identity_ratio_is_minus_mean_advantage():
    old = np.zeros((4, 3), dtype=np.float32)
    cur = ad.dtensor(old.copy())
    adv = np.array([1.0, -0.5, 0.25, 0.75])
    loss = gt.grpo_policy_loss(cur, old, adv, clip_eps=0.2)
    assert float(loss.data) == pytest.approx(-adv.mean(), abs=1e-7)


def test_policy_loss_clip_arithmetic():
    # rho = 2, A = 1: the surrogate takes min(2, 1.2) = 1.2
    old = np.zeros((1, 1), dtype=np.float32)
    cur = ad.dtensor(np.log(np.full((1, 1), 2.0)))
    loss = gt.grpo_policy_loss(cur, old, np.array([1.0]), clip_eps=0.2)
    assert float(loss.data) == pytest.approx(-1.2, abs=1e-6)


def test_policy_loss_zero_advantage_zero_gradient():
    old = np.zeros((2, 3), dtype=np.float32)
    cur = ad.parameter(np.random.default_rng(0).normal(size=(2, 3)) * 0.1)
    loss = gt.grpo_policy_loss(cur, old, np.zeros(2), clip_eps=0.2)
    assert float(loss.data) == 0.0
    ad.backward(loss)
    assert cur.grad is None or not cur.grad.any()


def test_policy_loss_clipped_region_gradient_is_zero():
    # positive advantage with rho far above the clip window: min selects the
    # clipped branch whose gradient is zero
    old = np.zeros((1, 1), dtype=np.float32)
    cur = ad.parameter(np.log(np.full((1, 1), 3.0)))
    loss = gt.grpo_policy_loss(cur, old, np.array([1.0]), clip_eps=0.2)
    ad.backward(loss)
    assert not cur.grad.any()
    # and the unclipped branch keeps gradient when rho is inside the window
    cur2 = ad.parameter(np.zeros((1, 1)))
    ad.backward(gt.grpo_policy_loss(cur2, old, np.array([1.0]), clip_eps=0.2))
    assert cur2.grad.any()


def test_policy_loss_shape_validation():
    with pytest.raises(ValueError):
        gt.grpo_policy_loss(ad.dtensor(np.zeros((2, 3))), np.zeros((2, 4)),
                            np.zeros(2), 0.2)
    with pytest.raises(ValueError):
        gt.grpo_policy_loss(ad.dtensor(np.zeros((2, 3))), np.zeros((2, 3)),
                            np.zeros(3), 0.2)


# ---------------------------------------------------------------------------
# KL anchor
# ---------------------------------------------------------------------------

def test_kl_zero_when_identical():
    mean = ad.dtensor(np.random.default_rng(0).normal(size=(2, 4, 8, 3)))
    mask = np.ones((4, 8), dtype=bool)
    kl = gt.kl_anchor_loss([mean], [mean.data.copy()], [0.5], mask)
    assert float(kl.data) == 0.0


def test_kl_single_coordinate_hand_value():
    mean = np.zeros((1, 1, 2, 3), dtype=np.float32)
    ref = mean.copy()
    mean[0, 0, 1, 0] = 1.0
    mask = np.zeros((1, 2), dtype=bool)
    mask[0, 1] = True
    kl = gt.kl_anchor_loss([ad.dtensor(mean)], [ref], [1.0], mask)
    assert float(kl.data) == pytest.approx(0.5, abs=1e-7)


def test_kl_quarter_scaling_with_sigma():
    rng = np.random.default_rng(1)
    mean = ad.dtensor(rng.normal(size=(2, 4, 8, 3)))
    ref = rng.normal(size=(2, 4, 8, 3)).astype(np.float32)
    mask = np.ones((4, 8), dtype=bool)
    k1 = float(gt.kl_anchor_loss([mean], [ref], [0.5], mask).data)
    k2 = float(gt.kl_anchor_loss([mean], [ref], [1.0], mask).data)
    assert k2 == pytest.approx(k1 / 4.0, rel=1e-5)


def test_kl_rejects_zero_sigma():
    mean = ad.dtensor(np.zeros((1, 2, 4, 3)))
    with pytest.raises(ValueError):
        gt.kl_anchor_loss([mean], [mean.data.copy()], [0.0], np.ones((2, 4), dtype=bool))


# ---------------------------------------------------------------------------
# full iteration machinery (tiny world)
# ---------------------------------------------------------------------------

TINY_MODEL = ModelConfig(patch=8, dim=16, heads=2, blocks=1, cond_tokens=2)
TINY_CROP = ec.CropParams(out_side=16)


def tiny_world():
    quads = []
    for kind in range(2):
        for cat in range(2):
            for i in range(3):
                seed = kind * 1000 + cat * 100 + i
                normal = sw.gen_normal(seed, kind, (16, 16))
                abnormal, mask = sw.inject_defect(normal, cat, seed,
                                                  area_range=(0.02, 0.08))
                quads.append(sw.Quadruplet(f"k{kind}c{cat}i{i:03d}", kind, cat,
                                           normal, abnormal, mask, "train"))
    return quads


def fake_recog():
    import defectlab.nets as nets
    rng = np.random.default_rng(0)
    return rl.RecogModels(nets.build_classifier_params(rng, 3),
                          nets.build_segmenter_params(rng, 3), 2)


@pytest.fixture(scope="module")
def tiny_rft_setup(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_rft")
    quads = tiny_world()
    cfg = st.SftConfig(lr=0.5, batch=8, steps=15, seed=0, checkpoint_every=0)
    result = st.train_sft(quads, TINY_MODEL, TINY_CROP, cfg, out_dir=out)
    return {"quads": quads, "sft_ckpt": result.checkpoint_path, "out": out}


def test_rft_iteration_first_epoch_ratio_is_one(tiny_rft_setup):
    policy = VelocityModel.load(tiny_rft_setup["sft_ckpt"])
    ref = policy.clone()
    prompts = gt.build_prompts(tiny_rft_setup["quads"], seed=0, limit=1)
    cfg = gt.GrpoConfig(group_size=4, sde_steps=3, seed=0)
    opt = ad.Adam(policy.params, lr=cfg.lr)
    metrics = gt.rft_iteration(prompts, policy, ref, fake_recog(), cfg, TINY_CROP,
                               opt, np.random.default_rng(0))
    assert metrics["first_epoch_max_ratio_dev"] == 0.0
    assert np.isfinite(metrics["loss"])
    assert np.isfinite(metrics["kl"])


def test_rft_iteration_equal_rewards_zero_policy_gradient(tiny_rft_setup, monkeypatch):
    policy = VelocityModel.load(tiny_rft_setup["sft_ckpt"])
    ref = policy.clone()
    prompts = gt.build_prompts(tiny_rft_setup["quads"], seed=0, limit=1)
    cfg = gt.GrpoConfig(group_size=4, sde_steps=2, kl_beta=0.0, inner_epochs=1, seed=0)
    monkeypatch.setattr(gt, "score_final_image",
                        lambda *a, **k: rl.RewardBreakdown(0.5, 0.5, 0.5))
    before = policy.state_arrays()
    opt = ad.Adam(policy.params, lr=1e-2)
    gt.rft_iteration(prompts, policy, ref, fake_recog(), cfg, TINY_CROP,
                     opt, np.random.default_rng(1))
    after = policy.state_arrays()
    for k in before:
        assert np.array_equal(before[k], after[k]), k


def test_rft_iteration_beta_zero_matches_pure_policy_loss(tiny_rft_setup):
    prompts = gt.build_prompts(tiny_rft_setup["quads"], seed=0, limit=1)
    recog = fake_recog()
    losses = {}
    for beta in (0.0, 0.1):
        policy = VelocityModel.load(tiny_rft_setup["sft_ckpt"])
        cfg = gt.GrpoConfig(group_size=4, sde_steps=2, kl_beta=beta,
                            inner_epochs=1, seed=0)
        opt = ad.Adam(policy.params, lr=cfg.lr)
        m = gt.rft_iteration(prompts, policy, policy.clone(), recog, cfg, TINY_CROP,
                             opt, np.random.default_rng(2))
        losses[beta] = m["loss"]
    # ref == policy on the first epoch, so the KL contribution is ~0 and the
    # two runs agree
    assert losses[0.0] == pytest.approx(losses[0.1], abs=1e-6)


def test_build_prompts_structure(tiny_rft_setup):
    prompts = gt.build_prompts(tiny_rft_setup["quads"], seed=3)
    assert prompts
    for p in prompts:
        ref_id, tar_id = p.key.split("->")
        assert ref_id != tar_id


def test_train_rft_missing_artifacts(tiny_rft_setup, tmp_path):
    cfg = gt.GrpoConfig(group_size=2, sde_steps=2, seed=0)
    with pytest.raises(FileNotFoundError):
        gt.train_rft(tiny_rft_setup["quads"], tmp_path / "nope.udgc", fake_recog(),
                     cfg, TINY_CROP, iterations=1)
    with pytest.raises(FileNotFoundError):
        gt.train_rft(tiny_rft_setup["quads"], tiny_rft_setup["sft_ckpt"],
                     tmp_path / "no_rewards", cfg, TINY_CROP, iterations=1)


def test_train_rft_reproducible_and_logs(tiny_rft_setup, tmp_path):
    cfg = gt.GrpoConfig(group_size=3, sde_steps=2, inner_epochs=1, seed=5)
    recog = fake_recog()
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        res = gt.train_rft(tiny_rft_setup["quads"], tiny_rft_setup["sft_ckpt"], recog,
                           cfg, TINY_CROP, iterations=3, out_dir=out)
        runs.append(res)
        assert (out / "rft_policy.udgc").exists()
        assert (out / "rft_ema.udgc").exists()
        lines = (out / "rft_rewards.csv").read_text().splitlines()
        assert lines[0] == "iter,mean_r,mean_r_gen,mean_r_det,kl,loss"
        assert len(lines) == 4
    a, b = runs
    assert [r["mean_r"] for r in a.rows] == [r["mean_r"] for r in b.rows]
    for k in a.policy.params:
        assert np.array_equal(a.policy.params[k].data, b.policy.params[k].data)


def test_grpo_config_validation():
    with pytest.raises(ValueError):
        gt.GrpoConfig(group_size=1)
    with pytest.raises(ValueError):
        gt.GrpoConfig(clip=1.5)
    with pytest.raises(ValueError):
        gt.GrpoConfig(adv_eps=-1.0)
