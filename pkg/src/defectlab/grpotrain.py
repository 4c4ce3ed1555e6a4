"""Reinforcement fine-tuning with group-relative policy optimization.

Each iteration samples G stochastic rollouts per prompt under the frozen
current policy, scores them with the composite reward, normalizes rewards
into group advantages, then runs K clipped-surrogate updates against the
recorded log-probabilities with a KL anchor to the supervised reference
model. Sampling and update passes share batch shapes and op sequences, so the
first inner-epoch importance ratio is exactly one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import flowcore as fc
from .denoiser import VelocityModel
from .editcore import CropParams, build_diptych, select_reference
from .rewardlab import RecogModels, RewardBreakdown, composite_reward, consistency_reward, recog_reward

Array = np.ndarray


@dataclass
class GrpoConfig:
    group_size: int = 8
    inner_epochs: int = 2
    clip: float = 0.2
    adv_eps: float = 1e-5
    kl_beta: float = 0.001
    lr: float = 1e-4
    sde_steps: int = 8
    sde_eta: float = 0.7
    ema_decay: float = 0.99
    w_gen: float = 0.5
    w_det: float = 0.5
    kl_ceiling: float = 50.0
    prompts_per_iter: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError(f"group_size must be >= 2, got {self.group_size}")
        if not 0.0 < self.clip < 1.0:
            raise ValueError(f"clip must be in (0, 1), got {self.clip}")
        if self.adv_eps < 0:
            raise ValueError(f"adv_eps must be >= 0, got {self.adv_eps}")


@dataclass
class Prompt:
    """One generation task: a reference defect to paint into a target scene."""
    key: str
    ref_image: Array
    ref_mask: Array
    source: Array          # normal scene, right diptych half
    m_tar: Array
    category: int


@dataclass
class PromptTensors:
    d_src: Array
    d_mask: Array
    ref_crop: Array        # (S, S, 3) left diptych half
    ref_mask_s: Array      # (S, S) reference-defect pixels in crop space
    source_right: Array    # (S, S, 3)
    m_right: Array         # (S, S)


def build_prompt_tensors(prompt: Prompt, params: CropParams) -> PromptTensors:
    trip = build_diptych(prompt.ref_image, prompt.ref_mask, prompt.source,
                         prompt.m_tar, params)
    s = params.out_side
    return PromptTensors(
        d_src=trip.d_src, d_mask=trip.d_mask, ref_crop=trip.d_src[:, :s],
        ref_mask_s=trip.ref_mask, source_right=trip.d_res[:, s:],
        m_right=trip.d_mask[:, s:])


# ---------------------------------------------------------------------------
# GRPO primitives
# ---------------------------------------------------------------------------

def compute_advantages(rewards: Sequence[float], eps: float) -> Array:
    """Group-normalized advantages (population standard deviation)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError(f"advantages need a group of >= 2, got {r.size}")
    mu = r.mean()
    sigma = r.std()
    return (r - mu) / (sigma + eps)


def grpo_policy_loss(current_logprobs: ad.DTensor, old_logprobs: Array,
                     advantages: Array, clip_eps: float) -> ad.DTensor:
    """Clipped surrogate: -mean over samples and steps of
    min(rho * A, clip(rho, 1-eps, 1+eps) * A).

    `current_logprobs` is a (B, T) graph tensor; per-step constants shared by
    both policies cancel inside the ratio, so quadratic terms alone are fine.
    """
    old = np.asarray(old_logprobs, dtype=np.float32)
    if tuple(current_logprobs.shape) != old.shape:
        raise ValueError(f"logprob shapes differ: {current_logprobs.shape} vs {old.shape}")
    adv = np.asarray(advantages, dtype=np.float32)
    if adv.shape != (old.shape[0],):
        raise ValueError(f"advantages must be one per sample: {adv.shape} vs {old.shape}")
    ratio = ad.exp(ad.add_const(current_logprobs, -old))
    adv_col = adv[:, None]
    surr = ad.mul_const(ratio, adv_col)
    surr_clip = ad.mul_const(ad.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps), adv_col)
    return ad.scale(ad.mean(ad.minimum(surr, surr_clip)), -1.0)


def kl_anchor_loss(policy_means: Sequence[ad.DTensor], ref_means: Sequence[Array],
                   sigmas: Sequence[float], d_mask: Array) -> ad.DTensor:
    """Mean over steps of |mu_theta - mu_ref|^2 / (2 sigma_t^2) on masked
    coordinates (summed over coordinates, averaged over batch)."""
    if len(policy_means) != len(ref_means) or len(policy_means) != len(sigmas):
        raise ValueError("per-step mean/sigma lists must align")
    terms = []
    for mean_t, ref_t, sigma in zip(policy_means, ref_means, sigmas):
        if sigma <= 0:
            raise ValueError("sigma_t must be positive")
        diff = ad.add_const(mean_t, -np.asarray(ref_t, dtype=np.float32))
        mask3 = np.broadcast_to(d_mask[None, :, :, None], diff.shape).astype(np.float32)
        masked = ad.mul_const(diff, mask3)
        ss = ad.sum(ad.mul(masked, masked), axis=tuple(range(1, len(diff.shape))))
        terms.append(ad.reshape(ad.scale(ad.mean(ss), 1.0 / (2.0 * sigma * sigma)), (1,)))
    return ad.mean(ad.concat(terms, axis=0))


# ---------------------------------------------------------------------------
# one RFT iteration
# ---------------------------------------------------------------------------

def score_final_image(image: Array, prompt: Prompt, pt: PromptTensors,
                      recog: RecogModels, cfg: GrpoConfig) -> RewardBreakdown:
    r_det = recog_reward(image, pt.m_right, prompt.category, recog)
    r_gen = consistency_reward(prompt.ref_image, prompt.ref_mask, image,
                               pt.m_right, pt.source_right)
    return RewardBreakdown(r_gen=r_gen, r_det=r_det,
                           r=composite_reward(r_gen, r_det, cfg.w_gen, cfg.w_det))


def _group_condition(policy: VelocityModel, pt: PromptTensors, g: int):
    refs = np.repeat(pt.ref_crop[None], g, axis=0)
    ref_masks = np.repeat(pt.ref_mask_s[None], g, axis=0)
    masks = np.repeat(pt.d_mask[None], g, axis=0)
    return policy.make_condition(refs, ref_masks, masks)


def rft_iteration(prompts: Sequence[Prompt], policy: VelocityModel,
                  ref_model: VelocityModel, recog: RecogModels, cfg: GrpoConfig,
                  crop_params: CropParams, optimizer, rng: np.random.Generator,
                  ema_state: dict[str, Array] | None = None) -> dict[str, float]:
    """Sample G rollouts per prompt, score, and run K clipped updates."""
    g = cfg.group_size
    dt = 1.0 / cfg.sde_steps
    groups = []
    for prompt in prompts:
        pt = build_prompt_tensors(prompt, crop_params)
        bundle = _group_condition(policy, pt, g)
        rngs = rng.spawn(g)
        trajs = fc.sde_rollout_group(policy, pt.d_src, pt.d_mask, bundle,
                                     cfg.sde_steps, cfg.sde_eta, rngs)
        breakdowns = []
        for traj in trajs:
            rb = score_final_image(traj.final_image, prompt, pt, recog, cfg)
            traj.reward = rb
            breakdowns.append(rb)
        advantages = compute_advantages([rb.r for rb in breakdowns], cfg.adv_eps)
        for rb, a in zip(breakdowns, advantages):
            rb.advantage = float(a)
        z_stacks = [np.stack([t.latents[k] for t in trajs]) for k in range(cfg.sde_steps + 1)]
        old_quads = np.stack([t.quad_terms for t in trajs])  # (G, T)
        groups.append({
            "pt": pt, "trajs": trajs, "advantages": advantages,
            "old_quads": old_quads, "z_stacks": z_stacks,
            "sigmas": trajs[0].sigmas, "times": trajs[0].times,
            "rewards": breakdowns, "ref_means": None,
        })

    metrics = {"mean_r": float(np.mean([rb.r for grp in groups for rb in grp["rewards"]])),
               "mean_r_gen": float(np.mean([rb.r_gen for grp in groups for rb in grp["rewards"]])),
               "mean_r_det": float(np.mean([rb.r_det for grp in groups for rb in grp["rewards"]])),
               "mean_abs_adv": float(np.mean([abs(rb.advantage) for grp in groups
                                              for rb in grp["rewards"]]))}

    kl_value = 0.0
    loss_value = 0.0
    for epoch in range(cfg.inner_epochs):
        prompt_losses = []
        kl_terms = []
        for grp in groups:
            pt = grp["pt"]
            bundle = _group_condition(policy, pt, g)
            masks = np.repeat(pt.d_mask[None], g, axis=0)
            quad_cols = []
            policy_means = []
            compute_ref = grp["ref_means"] is None
            if compute_ref:
                ref_bundle = _group_condition(ref_model, pt, g)
                ref_means = []
            for k in range(cfg.sde_steps):
                t_k = grp["times"][k]
                sigma = grp["sigmas"][k]
                z_t = grp["z_stacks"][k]
                z_next = grp["z_stacks"][k + 1]
                v = policy.forward_velocity(z_t, masks, bundle, np.full(g, t_k))
                mean_t = ad.add_const(ad.mul_const(v, np.float32(-dt)), z_t)
                quad = fc.gaussian_quad(z_next, mean_t, sigma, masks)
                quad_cols.append(ad.reshape(quad, (g, 1)))
                policy_means.append(mean_t)
                if compute_ref:
                    v_ref = ref_model.forward_velocity(z_t, masks, ref_bundle,
                                                       np.full(g, t_k)).data
                    ref_means.append(z_t - np.float32(dt) * v_ref)
            if compute_ref:
                grp["ref_means"] = ref_means
            current = ad.concat(quad_cols, axis=1)
            pol = grpo_policy_loss(current, grp["old_quads"], grp["advantages"], cfg.clip)
            kl = kl_anchor_loss(policy_means, grp["ref_means"], grp["sigmas"], pt.d_mask)
            kl_terms.append(float(kl.data))
            prompt_losses.append(ad.add(pol, ad.scale(kl, cfg.kl_beta)))
            if epoch == 0:
                ratio_check = np.exp(current.data.astype(np.float64)
                                     - grp["old_quads"].astype(np.float64))
                metrics["first_epoch_max_ratio_dev"] = max(
                    metrics.get("first_epoch_max_ratio_dev", 0.0),
                    float(np.max(np.abs(ratio_check - 1.0))))
        total = prompt_losses[0]
        for extra in prompt_losses[1:]:
            total = ad.add(total, extra)
        total = ad.scale(total, 1.0 / len(prompt_losses))
        if not np.isfinite(total.data):
            stats = [(grp["advantages"].tolist(), [rb.r for rb in grp["rewards"]])
                     for grp in groups]
            raise RuntimeError(f"non-finite GRPO loss; group (advantages, rewards): {stats}")
        optimizer.zero_grad()
        ad.backward(total)
        optimizer.step()
        kl_value = float(np.mean(kl_terms))
        loss_value = float(total.data)

    if ema_state is not None:
        for k, p in policy.params.items():
            ema_state[k] = cfg.ema_decay * ema_state[k] + (1.0 - cfg.ema_decay) * p.data

    metrics["kl"] = kl_value
    metrics["loss"] = loss_value
    return metrics


# ---------------------------------------------------------------------------
# prompt construction and evaluation
# ---------------------------------------------------------------------------

def build_prompts(quads: Sequence, seed: int = 0, limit: int | None = None) -> list[Prompt]:
    """Same-object cross-reference prompts: paint another instance's defect
    into this scene's own target region."""
    groups: dict[tuple[int, int], list] = {}
    for q in sorted(quads, key=lambda q: q.id):
        groups.setdefault((q.object_kind, q.defect_category), []).append(q)
    prompts = []
    for key in sorted(groups):
        members = groups[key]
        if len(members) < 2:
            continue
        for tar in members:
            cands = [c for c in members if c.id != tar.id]
            ref = select_reference(tar, cands, seed=seed)
            prompts.append(Prompt(key=f"{ref.id}->{tar.id}", ref_image=ref.abnormal,
                                  ref_mask=ref.mask, source=tar.normal,
                                  m_tar=tar.mask, category=tar.defect_category))
    rng = np.random.default_rng([seed, 0x9C0])
    order = rng.permutation(len(prompts))
    prompts = [prompts[i] for i in order]
    return prompts[:limit] if limit is not None else prompts


def eval_prompt_reward(model: VelocityModel, prompts: Sequence[Prompt],
                       recog: RecogModels, cfg: GrpoConfig, crop_params: CropParams,
                       ode_steps: int = 8, seed: int = 123) -> dict[str, float]:
    """Deterministic ODE generation on a frozen prompt set, mean rewards."""
    r_all, rg_all, rd_all = [], [], []
    for i, prompt in enumerate(prompts):
        pt = build_prompt_tensors(prompt, crop_params)
        bundle = _group_condition(model, pt, 1)
        rng = np.random.default_rng([seed, i])
        image = fc.ode_sample(model, pt.d_src, pt.d_mask, bundle, ode_steps, rng=rng)
        rb = score_final_image(image, prompt, pt, recog, cfg)
        r_all.append(rb.r)
        rg_all.append(rb.r_gen)
        rd_all.append(rb.r_det)
    return {"mean_r": float(np.mean(r_all)), "mean_r_gen": float(np.mean(rg_all)),
            "mean_r_det": float(np.mean(rd_all))}


# ---------------------------------------------------------------------------
# the outer loop
# ---------------------------------------------------------------------------

@dataclass
class RftResult:
    policy: VelocityModel
    ema_state: dict[str, Array]
    rows: list[dict] = field(default_factory=list)
    policy_path: str | None = None
    ema_path: str | None = None


def train_rft(train_quads, sft_checkpoint, recog: RecogModels | str, cfg: GrpoConfig,
              crop_params: CropParams, iterations: int, out_dir=None,
              prompts: Sequence[Prompt] | None = None) -> RftResult:
    """Alg.-2 outer loop: iterate rft_iteration over prompt batches."""
    if isinstance(recog, (str, Path)):
        recog_dir = Path(recog)
        if not (recog_dir / "classifier.udgc").exists():
            raise FileNotFoundError(
                f"reward checkpoints missing under {recog_dir} (run reward training first)")
        recog = RecogModels.load(recog_dir)
    sft_path = Path(sft_checkpoint)
    if not sft_path.exists():
        raise FileNotFoundError(f"SFT checkpoint not found: {sft_path}")
    policy = VelocityModel.load(sft_path)
    ref_model = policy.clone()
    if prompts is None:
        prompts = build_prompts(train_quads, seed=cfg.seed)
    if not prompts:
        raise ValueError("no usable prompts (need >= 2 quadruplets per object/category)")
    optimizer = ad.Adam(policy.params, lr=cfg.lr)
    ema_state = policy.state_arrays()
    rows = []
    for it in range(iterations):
        rng = np.random.default_rng([cfg.seed, 0xF7, it])
        start = (it * cfg.prompts_per_iter) % len(prompts)
        batch = [prompts[(start + j) % len(prompts)] for j in range(cfg.prompts_per_iter)]
        metrics = rft_iteration(batch, policy, ref_model, recog, cfg, crop_params,
                                optimizer, rng, ema_state=ema_state)
        rows.append({"iter": it, "mean_r": metrics["mean_r"],
                     "mean_r_gen": metrics["mean_r_gen"],
                     "mean_r_det": metrics["mean_r_det"],
                     "kl": metrics["kl"], "loss": metrics["loss"]})
    result = RftResult(policy=policy, ema_state=ema_state, rows=rows)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.policy_path = str(out_dir / "rft_policy.udgc")
        policy.save(result.policy_path)
        result.ema_path = str(out_dir / "rft_ema.udgc")
        ad.save_checkpoint(result.ema_path, ema_state, {"model": policy.config.to_dict()})
        with open(out_dir / "rft_rewards.csv", "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["iter", "mean_r", "mean_r_gen", "mean_r_det", "kl", "loss"])
            writer.writeheader()
            writer.writerows(rows)
    return result
