"""Rectified-flow machinery: timestep sampling, interpolation, CFM loss,
deterministic Euler sampling, and stochastic sampling with per-step
Gaussian log-probabilities.

Log-probabilities are stored as quad + const where `quad` is the masked
quadratic term computed through the same float32 op sequence in both the
sampling pass and any later re-evaluation (bit-identical by construction) and
`const` is the float64 normalization -(d_m/2) log(2 pi sigma^2). The constant
cancels in importance ratios but keeps the stored values proper densities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad

Array = np.ndarray


@dataclass
class FlowConfig:
    mu: float = 0.0
    sigma: float = 1.0
    ode_steps: int = 28
    sde_steps: int = 8
    sde_eta: float = 0.7

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.ode_steps < 1 or self.sde_steps < 1:
            raise ValueError("step counts must be >= 1")
        if self.sde_eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.sde_eta}")


@dataclass
class Trajectory:
    """A stochastic sampling rollout with everything needed to re-score it."""
    latents: list[Array]          # T+1 diptych states
    step_logprobs: list[float]    # T transition log-densities (quad + const)
    quad_terms: list[float]       # the float32-exact quadratic parts
    means: list[Array]            # T predicted transition means
    sigmas: list[float]           # T noise scales
    times: list[float]            # T times the model was queried at
    final_image: Array            # right diptych half, clipped to [0, 1]
    reward: object | None = field(default=None)


# ---------------------------------------------------------------------------
# timestep sampling and interpolation
# ---------------------------------------------------------------------------

def sample_t(rng: np.random.Generator, mu: float = 0.0, sigma: float = 1.0) -> float:
    """One logit-normal draw: logistic(mu + sigma * N(0, 1))."""
    return float(sample_t_batch(rng, 1, mu, sigma)[0])


def sample_t_batch(rng: np.random.Generator, n: int, mu: float = 0.0,
                   sigma: float = 1.0) -> Array:
    x = mu + sigma * rng.standard_normal(n)
    t = 1.0 / (1.0 + np.exp(-x))
    return np.clip(t, 1e-12, 1.0 - 1e-12)


def interpolate(x0: Array, x1: Array, t) -> Array:
    """Linear path t*x1 + (1-t)*x0; `t` is a scalar or one value per sample."""
    x0 = np.asarray(x0, dtype=np.float32)
    x1 = np.asarray(x1, dtype=np.float32)
    if x0.shape != x1.shape:
        raise ValueError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    t_arr = np.asarray(t, dtype=np.float32)
    if t_arr.ndim == 1:
        t_arr = t_arr.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (t_arr * x1 + (1.0 - t_arr) * x0).astype(np.float32)


def cfm_loss(v_pred: ad.DTensor, x0: Array, x1: Array) -> ad.DTensor:
    """Mean squared error between the prediction and the target velocity x1-x0."""
    x0 = np.asarray(x0, dtype=np.float32)
    x1 = np.asarray(x1, dtype=np.float32)
    if v_pred.shape != x0.shape or x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: v {v_pred.shape}, x0 {x0.shape}, x1 {x1.shape}")
    diff = ad.add_const(v_pred, -(x1 - x0))
    return ad.mean(ad.mul(diff, diff))


# ---------------------------------------------------------------------------
# deterministic sampling
# ---------------------------------------------------------------------------

def _prepare_initial(d_src: Array, d_mask: Array, rng: np.random.Generator | None,
                     init_noise: Array | None) -> Array:
    z = np.asarray(d_src, dtype=np.float32).copy()
    if init_noise is None:
        if rng is None:
            raise ValueError("ode/sde sampling needs an rng or explicit initial noise")
        init_noise = rng.standard_normal(z.shape)
    z[d_mask] = np.asarray(init_noise, dtype=np.float32)[d_mask]
    return z


def ode_sample(model, d_src: Array, d_mask: Array, cond, steps: int,
               rng: np.random.Generator | None = None,
               init_noise: Array | None = None) -> Array:
    """Euler-integrate the flow from noise to the inpainted diptych.

    The unmasked pixels are reassigned to the known source content after
    every step, so they pass through bit-identical. Returns the right half.
    """
    out = ode_sample_batch(model, d_src[None], d_mask[None], cond, steps,
                           rng=rng,
                           init_noise=None if init_noise is None else init_noise[None])
    return out[0]


def ode_sample_batch(model, d_src: Array, d_mask: Array, cond, steps: int,
                     rng: np.random.Generator | None = None,
                     init_noise: Array | None = None) -> Array:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    b = d_src.shape[0]
    if init_noise is None:
        if rng is None:
            raise ValueError("ode sampling needs an rng or explicit initial noise")
        init_noise = rng.standard_normal(d_src.shape)
    z = np.asarray(d_src, dtype=np.float32).copy()
    z[d_mask] = np.asarray(init_noise, dtype=np.float32)[d_mask]
    dt = 1.0 / steps
    for k in range(steps):
        t = 1.0 - k * dt
        v = model.forward_velocity(z, d_mask, cond, np.full(b, t)).data
        z = z - np.float32(dt) * v
        z[~d_mask] = np.asarray(d_src, dtype=np.float32)[~d_mask]
    side = d_src.shape[1]
    return np.clip(z[:, :, side:, :], 0.0, 1.0)


# ---------------------------------------------------------------------------
# stochastic sampling with log-probabilities
# ---------------------------------------------------------------------------

def gaussian_quad(z_next: Array, mean, sigma: float, d_mask: Array) -> ad.DTensor:
    """Masked quadratic term -sum(delta^2)/(2 sigma^2), one value per sample.

    `mean` may be a graph-carrying tensor (policy updates) or a plain array
    (sampling); both run the identical float32 op sequence.
    """
    mean_t = mean if isinstance(mean, ad.DTensor) else ad.dtensor(mean)
    delta = ad.add_const(ad.scale(mean_t, -1.0), np.asarray(z_next, dtype=np.float32))
    mask3 = np.broadcast_to(d_mask[..., None], delta.shape).astype(np.float32)
    masked = ad.mul_const(delta, mask3)
    ss = ad.sum(ad.mul(masked, masked), axis=tuple(range(1, len(delta.shape))))
    return ad.scale(ss, -1.0 / (2.0 * sigma * sigma))


def gaussian_log_const(n_masked: int, sigma: float) -> float:
    return -0.5 * n_masked * float(np.log(2.0 * np.pi * sigma * sigma))


def sde_step(model, z: Array, t: float, dt: float, eta: float,
             rng: np.random.Generator, d_src: Array, d_mask: Array, cond,
             ) -> tuple[Array, float]:
    """One stochastic transition; returns (z_next, log-probability)."""
    z_next, quad, _, sigma = _sde_step_full(model, z[None], t, dt, eta, [rng],
                                            d_src[None], d_mask[None], cond)
    n_masked = int(d_mask.sum()) * z.shape[-1]
    return z_next[0], float(quad[0] + gaussian_log_const(n_masked, sigma))


def _sde_step_full(model, z: Array, t: float, dt: float, eta: float,
                   rngs: Sequence[np.random.Generator], d_src: Array,
                   d_mask: Array, cond) -> tuple[Array, Array, Array, float]:
    """Batched transition: (z_next, quad_terms, means, sigma)."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if eta <= 0:
        raise ValueError("stochastic sampling needs eta > 0 (degenerate density)")
    b = z.shape[0]
    sigma = float(eta * np.sqrt(dt))
    v = model.forward_velocity(z, d_mask, cond, np.full(b, t)).data
    means = z - np.float32(dt) * v
    z_next = means.copy()
    src = np.asarray(d_src, dtype=np.float32)
    for i in range(b):
        eps = rngs[i].standard_normal(z.shape[1:]).astype(np.float32)
        z_next[i][d_mask[i]] += np.float32(sigma) * eps[d_mask[i]]
        z_next[i][~d_mask[i]] = src[i][~d_mask[i]]
    quad = gaussian_quad(z_next, means, sigma, d_mask).data.astype(np.float64)
    return z_next, quad, means, sigma


def sde_rollout(model, d_src: Array, d_mask: Array, cond, t_steps: int, eta: float,
                rng: np.random.Generator, init_noise: Array | None = None) -> Trajectory:
    """T stochastic transitions from t=1 to 0, recording latents and log-probs."""
    return sde_rollout_group(model, d_src, d_mask, cond, t_steps, eta, [rng],
                             init_noise=None if init_noise is None else init_noise[None])[0]


def sde_rollout_group(model, d_src: Array, d_mask: Array, cond, t_steps: int,
                      eta: float, rngs: Sequence[np.random.Generator],
                      init_noise: Array | None = None) -> list[Trajectory]:
    """G member rollouts advanced together so every forward pass is batched.

    All members share one prompt (d_src, d_mask, cond tokens) but draw their
    own noise streams.
    """
    if t_steps < 1:
        raise ValueError("t_steps must be >= 1")
    g = len(rngs)
    src = np.broadcast_to(np.asarray(d_src, dtype=np.float32), (g,) + d_src.shape).copy()
    masks = np.broadcast_to(d_mask, (g,) + d_mask.shape)
    z = src.copy()
    if init_noise is None:
        for i in range(g):
            noise = rngs[i].standard_normal(d_src.shape).astype(np.float32)
            z[i][d_mask] = noise[d_mask]
    else:
        z[masks] = np.asarray(init_noise, dtype=np.float32)[masks]
    dt = 1.0 / t_steps
    n_masked = int(d_mask.sum()) * d_src.shape[-1]
    latents = [z.copy()]
    logprobs = np.zeros((g, t_steps))
    quads = np.zeros((g, t_steps))
    means_steps: list[Array] = []
    sigmas: list[float] = []
    times: list[float] = []
    for k in range(t_steps):
        t = 1.0 - k * dt
        z, quad, means, sigma = _sde_step_full(model, z, t, dt, eta, rngs, src, masks, cond)
        latents.append(z.copy())
        quads[:, k] = quad
        logprobs[:, k] = quad + gaussian_log_const(n_masked, sigma)
        means_steps.append(means)
        sigmas.append(sigma)
        times.append(t)
    side = d_src.shape[0]
    finals = np.clip(z[:, :, side:, :], 0.0, 1.0)
    trajectories = []
    for i in range(g):
        trajectories.append(Trajectory(
            latents=[snap[i] for snap in latents],
            step_logprobs=[float(x) for x in logprobs[i]],
            quad_terms=[float(x) for x in quads[i]],
            means=[m[i] for m in means_steps],
            sigmas=list(sigmas),
            times=list(times),
            final_image=finals[i]))
    return trajectories


def verify_trajectory_logprobs(traj: Trajectory, d_mask: Array) -> list[float]:
    """Recompute every stored transition density from the stored pieces."""
    n_masked = int(d_mask.sum()) * traj.latents[0].shape[-1]
    out = []
    for k in range(len(traj.step_logprobs)):
        quad = gaussian_quad(traj.latents[k + 1][None], traj.means[k][None],
                             traj.sigmas[k], d_mask[None]).data.astype(np.float64)[0]
        out.append(float(quad + gaussian_log_const(n_masked, traj.sigmas[k])))
    return out


# ---------------------------------------------------------------------------
# trajectory serialization (offline reward replay)
# ---------------------------------------------------------------------------

def save_trajectory(path, traj: Trajectory) -> None:
    tensors = {
        "latents": np.stack(traj.latents),
        "means": np.stack(traj.means),
        "final_image": traj.final_image,
        "step_logprobs": np.asarray(traj.step_logprobs, dtype=np.float32),
        "quad_terms": np.asarray(traj.quad_terms, dtype=np.float32),
        "sigmas": np.asarray(traj.sigmas, dtype=np.float32),
        "times": np.asarray(traj.times, dtype=np.float32),
    }
    meta = {"steps": len(traj.step_logprobs),
            "logprobs_f64": traj.step_logprobs, "quads_f64": traj.quad_terms}
    ad.save_checkpoint(path, tensors, meta)


def load_trajectory(path) -> Trajectory:
    tensors, meta = ad.load_checkpoint(path)
    steps = int(meta["steps"])
    return Trajectory(
        latents=[tensors["latents"][i] for i in range(steps + 1)],
        step_logprobs=[float(x) for x in meta["logprobs_f64"]],
        quad_terms=[float(x) for x in meta["quads_f64"]],
        means=[tensors["means"][i] for i in range(steps)],
        sigmas=[float(x) for x in tensors["sigmas"]],
        times=[float(x) for x in tensors["times"]],
        final_image=tensors["final_image"])
