"""Supervised fine-tuning: flow-matching objective over the three pair
distributions plus the normal-regularization hinge on the target region.

Pair tensors (diptychs, crops, masks) are deterministic per pair, so they are
prepared once up front; each step then only draws (t, noise), interpolates,
and runs the model.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import flowcore as fc
from .denoiser import ModelConfig, VelocityModel
from .editcore import CropParams, PairSample, build_diptych, pad_to_square, resize_bilinear
from .editcore import sample_training_pairs

Array = np.ndarray


@dataclass
class SftConfig:
    lr: float = 1e-3
    batch: int = 16
    steps: int = 2000
    lambda_reg: float = 0.1
    tau: float = 0.5
    proportions: tuple[float, float, float] = (1.0, 1.0, 1.0)
    momentum: float = 0.9
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")
        if self.lambda_reg < 0:
            raise ValueError(f"lambda_reg must be >= 0, got {self.lambda_reg}")
        self.proportions = tuple(float(p) for p in self.proportions)


@dataclass
class PairTensors:
    """Geometry-resolved training sample; everything except (t, noise)."""
    d_src: Array        # (S, 2S, 3)
    d_res: Array        # (S, 2S, 3)
    d_mask: Array       # (S, 2S) bool
    ref_mask: Array     # (S, S) bool
    normal_right: Array  # (S, S, 3) the target's normal counterpart, resized


def prepare_pair_tensors(pair: PairSample, params: CropParams) -> PairTensors:
    trip = build_diptych(pair.reference.abnormal, pair.reference.mask,
                         pair.target.abnormal, pair.target.mask, params)
    side = (params.out_side, params.out_side)
    normal_right = np.clip(resize_bilinear(pad_to_square(pair.target.normal, 1.0), side), 0, 1)
    return PairTensors(d_src=trip.d_src, d_res=trip.d_res, d_mask=trip.d_mask,
                       ref_mask=trip.ref_mask, normal_right=normal_right)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def normal_reg_loss(z_target, z_orig: Array, mask: Array, tau: float) -> ad.DTensor:
    """Hinge on the mean masked cosine similarity to the normal counterpart.

    `z_target` is (B, S, S, 3) and differentiable; `z_orig` and `mask` are
    constants. Zero loss (and zero gradient) once the mean similarity of every
    sample is at or below the margin.
    """
    mask = np.asarray(mask).astype(bool)
    counts = mask.reshape(mask.shape[0], -1).sum(axis=1)
    if (counts == 0).any():
        raise ValueError("normal_reg_loss needs a non-empty mask per sample")
    cos = ad.cosine_similarity(z_target, ad.dtensor(np.asarray(z_orig, dtype=np.float32)),
                               axis=-1)
    masked = ad.mul_const(cos, mask.astype(np.float32))
    sums = ad.sum(masked, axis=(1, 2))
    s_bar = ad.mul_const(sums, (1.0 / counts).astype(np.float32))
    hinge = ad.relu(ad.add_const(s_bar, -float(tau)))
    return ad.mean(hinge)


def _draw_step_inputs(batch: Sequence[PairTensors], rng: np.random.Generator):
    d_res = np.stack([p.d_res for p in batch])
    d_mask = np.stack([p.d_mask for p in batch])
    t = fc.sample_t_batch(rng, len(batch))
    noise = rng.standard_normal(d_res.shape).astype(np.float32)
    mask3 = d_mask[..., None]
    x1_eff = np.where(mask3, noise, d_res)
    z_t = fc.interpolate(d_res, x1_eff, t)
    return d_res, d_mask, t, x1_eff, z_t


def sft_losses(batch: Sequence[PairTensors], model: VelocityModel, cfg: SftConfig,
               d_res: Array, d_mask: Array, t: Array, x1_eff: Array, z_t: Array,
               ) -> tuple[ad.DTensor, dict[str, float]]:
    """Total loss graph plus a float breakdown for logging."""
    side = d_mask.shape[1]
    ref_crops = np.stack([p.d_src[:, :side] for p in batch])
    ref_masks = np.stack([p.ref_mask for p in batch])
    bundle = model.make_condition(ref_crops, ref_masks, d_mask)
    v = model.forward_velocity(z_t, d_mask, bundle, t)
    l_cfm = fc.cfm_loss(v, d_res, x1_eff)
    breakdown = {"cfm": float(l_cfm.data)}
    if cfg.lambda_reg > 0:
        # one-step denoised estimate x0_hat = z_t - t * v, compared on the right half
        t_full = t.reshape(-1, 1, 1, 1).astype(np.float32)
        x0_hat = ad.add_const(ad.mul_const(v, -t_full), z_t)
        z_target = ad.slice_(x0_hat, (slice(None), slice(None), slice(side, 2 * side)))
        z_orig = np.stack([p.normal_right for p in batch])
        mask_right = d_mask[:, :, side:]
        l_reg = normal_reg_loss(z_target, z_orig, mask_right, cfg.tau)
        total = ad.add(l_cfm, ad.scale(l_reg, cfg.lambda_reg))
        breakdown["reg"] = float(l_reg.data)
    else:
        total = l_cfm
        breakdown["reg"] = 0.0
    breakdown["total"] = float(total.data)
    return total, breakdown


def sft_step(batch: Sequence[PairTensors], model: VelocityModel, optimizer,
             cfg: SftConfig, rng: np.random.Generator) -> dict[str, float]:
    """One optimizer update on a batch; returns the loss breakdown."""
    if not batch:
        raise ValueError("empty batch")
    d_res, d_mask, t, x1_eff, z_t = _draw_step_inputs(batch, rng)
    total, breakdown = sft_losses(batch, model, cfg, d_res, d_mask, t, x1_eff, z_t)
    optimizer.zero_grad()
    ad.backward(total)
    optimizer.step()
    return breakdown


def evaluate_cfm(model: VelocityModel, tensors: Sequence[PairTensors], cfg: SftConfig,
                 seed: int = 1234, batch: int = 16) -> float:
    """Mean CFM loss on fixed (t, noise) draws; comparable across models."""
    losses = []
    for i in range(0, len(tensors), batch):
        chunk = tensors[i:i + batch]
        rng = np.random.default_rng([seed, i])
        d_res, d_mask, t, x1_eff, z_t = _draw_step_inputs(chunk, rng)
        side = d_mask.shape[1]
        ref_crops = np.stack([p.d_src[:, :side] for p in chunk])
        ref_masks = np.stack([p.ref_mask for p in chunk])
        bundle = model.make_condition(ref_crops, ref_masks, d_mask)
        v = model.forward_velocity(z_t, d_mask, bundle, t)
        losses.append(float(fc.cfm_loss(v, d_res, x1_eff).data))
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class SftResult:
    model: VelocityModel
    log_rows: list[dict] = field(default_factory=list)
    checkpoint_path: str | None = None
    log_path: str | None = None


def train_sft(train_quads, model_cfg: ModelConfig, crop_params: CropParams,
              cfg: SftConfig, out_dir=None, pairs: Sequence[PairSample] | None = None,
              ) -> SftResult:
    """Diversity-SFT: sample pairs, iterate sft_step, log CSV, checkpoint."""
    if pairs is None:
        pairs = sample_training_pairs(train_quads, cfg.proportions, seed=cfg.seed)
    if not pairs:
        raise ValueError("no training pairs")
    tensors = [prepare_pair_tensors(p, crop_params) for p in pairs]
    model = VelocityModel(model_cfg, seed=cfg.seed)
    optimizer = ad.SGD(model.params, lr=cfg.lr, momentum=cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 0x5F7])
    order = rng.permutation(len(tensors))
    pos = 0
    rows = []
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = None
    for step in range(cfg.steps):
        bsz = min(cfg.batch, len(tensors))
        if pos + bsz > len(tensors):
            order = rng.permutation(len(tensors))
            pos = 0
        batch = [tensors[i] for i in order[pos:pos + bsz]]
        pos += bsz
        breakdown = sft_step(batch, model, optimizer, cfg, rng)
        rows.append({"step": step, **breakdown})
        if out_dir is not None and cfg.checkpoint_every > 0 \
                and (step + 1) % cfg.checkpoint_every == 0:
            out_dir.mkdir(parents=True, exist_ok=True)
            model.save(out_dir / f"sft_step{step + 1:06d}.udgc")
    log_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = str(out_dir / "sft_final.udgc")
        model.save(ckpt_path)
        log_path = str(out_dir / "sft_loss.csv")
        with open(log_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["step", "cfm", "reg", "total"])
            writer.writeheader()
            writer.writerows(rows)
    return SftResult(model=model, log_rows=rows, checkpoint_path=ckpt_path,
                     log_path=log_path)
