"""Velocity network: patch tokens over the diptych, rotary positions,
joint attention over image and condition tokens, defect attention bias.

The diptych image and its inpainting mask are tokenized directly (pixel-space
latent); condition tokens come from a small patch-pool encoder over the
cropped reference. Condition tokens sit at rotary position 0; image tokens use
their row-major patch index.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from . import autodiff as ad

Array = np.ndarray


@dataclass
class ModelConfig:
    patch: int = 8
    dim: int = 64
    heads: int = 4
    blocks: int = 4
    cond_tokens: int = 8
    attn_alpha: float = 2.0
    ff_mult: int = 4
    guidance_scale: float = 0.0  # experimental condition-gain knob, off by default

    def __post_init__(self):
        if self.dim % (2 * self.heads) != 0:
            raise ValueError(f"dim {self.dim} must be divisible by 2*heads={2 * self.heads}")
        if self.attn_alpha < 1.0:
            raise ValueError(f"attn_alpha must be >= 1, got {self.attn_alpha}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConditionBundle:
    cond: ad.DTensor          # (B, l, d) reference-defect tokens (graph-carrying)
    token_bias: Array         # (B, N) additive column bias, log(alpha) on members
    mask_token_sets: list     # per-sample sorted index lists
    text_slot: Array | None = None  # (l_t, d); zero rows are dropped entirely


# ---------------------------------------------------------------------------
# patch tokenization
# ---------------------------------------------------------------------------

def patchify_np(x: Array, patch: int) -> Array:
    """(B, H, W, C) -> (B, n, C*patch^2) row-major patch tokens."""
    b, h, w, c = x.shape
    if h % patch or w % patch:
        raise ValueError(f"spatial dims {h}x{w} not divisible by patch {patch}")
    hp, wp = h // patch, w // patch
    x = x.reshape(b, hp, patch, wp, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x).reshape(b, hp * wp, patch * patch * c)


def unpatchify(tokens: ad.DTensor, hw: tuple[int, int], patch: int, channels: int) -> ad.DTensor:
    """Differentiable inverse of `patchify_np`."""
    h, w = hw
    hp, wp = h // patch, w // patch
    b = tokens.shape[0]
    x = ad.reshape(tokens, (b, hp, wp, patch, patch, channels))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b, h, w, channels))


def unpatchify_np(tokens: Array, hw: tuple[int, int], patch: int, channels: int) -> Array:
    h, w = hw
    hp, wp = h // patch, w // patch
    b = tokens.shape[0]
    x = tokens.reshape(b, hp, wp, patch, patch, channels)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x).reshape(b, h, w, channels)


# ---------------------------------------------------------------------------
# rotary embedding and attention bias
# ---------------------------------------------------------------------------

def rope_tables(positions: Array, head_dim: int) -> tuple[Array, Array]:
    """(cos, sin) tables of shape (len(positions), head_dim // 2)."""
    if head_dim % 2:
        raise ValueError(f"head dim must be even for rotary pairs, got {head_dim}")
    j = np.arange(head_dim // 2, dtype=np.float64)
    freqs = 10000.0 ** (-2.0 * j / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)


def apply_rope(q, k, positions: Array) -> tuple[ad.DTensor, ad.DTensor]:
    """Rotate (..., T, dh) query/key tensors by their token positions."""
    head_dim = q.shape[-1] if isinstance(q, ad.DTensor) else np.asarray(q).shape[-1]
    cos, sin = rope_tables(positions, head_dim)
    return ad.apply_rope(q, cos, sin), ad.apply_rope(k, cos, sin)


def build_attention_bias(m_set: Sequence[int], alpha: float, n_total: int) -> Array:
    """(N, N) additive bias: log(alpha) on columns in the member set."""
    if alpha < 1.0:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    bias = np.zeros((n_total, n_total), dtype=np.float32)
    idx = list(m_set)
    if idx:
        bias[:, idx] = np.log(alpha)
    return bias


def mask_token_set(ref_mask: Array, d_mask: Array, patch: int, cond_tokens: int) -> list[int]:
    """Token indices biased by defect attention.

    An image token joins when at least half of its patch pixels are masked
    (reference-defect pixels on the left half, target-mask pixels on the
    right); every condition token joins unconditionally.
    """
    s = ref_mask.shape[0]
    combined = d_mask.astype(np.float32).copy()
    combined[:, :s] = ref_mask.astype(np.float32)
    hp, wp = combined.shape[0] // patch, combined.shape[1] // patch
    cov = combined.reshape(hp, patch, wp, patch).mean(axis=(1, 3))
    img_idx = np.nonzero(cov.ravel() >= 0.5)[0].tolist()
    n = hp * wp
    return img_idx + list(range(n, n + cond_tokens))


def _sinusoidal_features(t: Array, dim: int) -> Array:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * 1000.0 * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------

class VelocityModel:
    """Tiny transformer predicting the flow velocity over the diptych."""

    IN_CHANNELS = 4   # RGB + inpainting-mask channel
    OUT_CHANNELS = 3

    def __init__(self, config: ModelConfig, params: dict[str, ad.DTensor] | None = None,
                 seed: int = 0):
        self.config = config
        self.params = params if params is not None else self._init_params(seed)

    def _init_params(self, seed: int) -> dict[str, ad.DTensor]:
        cfg = self.config
        rng = np.random.default_rng([seed, 0xD17])
        d = cfg.dim
        p2 = cfg.patch * cfg.patch

        def lin(fan_in, fan_out, scale=1.0):
            return ad.parameter(rng.standard_normal((fan_in, fan_out))
                                * (scale / np.sqrt(fan_in)))

        params: dict[str, ad.DTensor] = {
            "in_w": lin(self.IN_CHANNELS * p2, d),
            "in_b": ad.parameter(np.zeros(d)),
            "time_w1": lin(d, d), "time_b1": ad.parameter(np.zeros(d)),
            "time_w2": lin(d, d), "time_b2": ad.parameter(np.zeros(d)),
            "cond_w1": lin(3 * p2, d), "cond_b1": ad.parameter(np.zeros(d)),
            "cond_w2": lin(d, d), "cond_b2": ad.parameter(np.zeros(d)),
            "head_w": lin(d, self.OUT_CHANNELS * p2, scale=0.05),
            "head_b": ad.parameter(np.zeros(self.OUT_CHANNELS * p2)),
            # raw-patch skip into the head: the optimal velocity has a local
            # linear term in z_t that the d-dim trunk bottleneck cannot carry
            "skip_w": lin(self.IN_CHANNELS * p2, self.OUT_CHANNELS * p2, scale=0.05),
            # multiplicative time gain on the head; the optimal velocity carries
            # a 1/t amplitude that additive conditioning cannot express
            "gain_w": lin(d, self.OUT_CHANNELS * p2, scale=0.05),
            "gain_b": ad.parameter(np.zeros(self.OUT_CHANNELS * p2)),
        }
        for i in range(cfg.blocks):
            for name in ("q", "k", "v", "o"):
                params[f"blk{i}_{name}_w"] = lin(d, d)
                params[f"blk{i}_{name}_b"] = ad.parameter(np.zeros(d))
            params[f"blk{i}_ff1_w"] = lin(d, cfg.ff_mult * d)
            params[f"blk{i}_ff1_b"] = ad.parameter(np.zeros(cfg.ff_mult * d))
            params[f"blk{i}_ff2_w"] = lin(cfg.ff_mult * d, d)
            params[f"blk{i}_ff2_b"] = ad.parameter(np.zeros(d))
        return params

    # -- conditioning -------------------------------------------------------

    def encode_reference(self, ref_crops: Array) -> ad.DTensor:
        """(B, S, S, 3) cropped references -> (B, l, d) condition tokens."""
        cfg = self.config
        b = ref_crops.shape[0]
        tokens = patchify_np(ref_crops.astype(np.float32), cfg.patch)
        m = tokens.shape[1]
        if m % cfg.cond_tokens:
            raise ValueError(f"{m} reference patches not divisible into "
                             f"{cfg.cond_tokens} condition tokens")
        x = ad.dtensor(tokens.reshape(b * m, -1))
        x = ad.silu(ad.add(ad.matmul(x, self.params["cond_w1"]), self.params["cond_b1"]))
        x = ad.reshape(x, (b, cfg.cond_tokens, m // cfg.cond_tokens, cfg.dim))
        x = ad.mean(x, axis=2)
        x = ad.reshape(x, (b * cfg.cond_tokens, cfg.dim))
        x = ad.add(ad.matmul(x, self.params["cond_w2"]), self.params["cond_b2"])
        return ad.reshape(x, (b, cfg.cond_tokens, cfg.dim))

    def make_condition(self, ref_crops: Array, ref_masks: Array, d_masks: Array,
                       text_slot: Array | None = None) -> ConditionBundle:
        """Condition tokens plus per-sample defect-attention bias columns."""
        cfg = self.config
        cond = self.encode_reference(ref_crops)
        if cfg.guidance_scale > 0:
            cond = ad.scale(cond, cfg.guidance_scale)
        b = ref_crops.shape[0]
        n_img = d_masks.shape[1] // cfg.patch * (d_masks.shape[2] // cfg.patch)
        n_text = self._active_text_rows(text_slot).shape[0]
        n_total = n_img + cfg.cond_tokens + n_text
        bias = np.zeros((b, n_total), dtype=np.float32)
        sets = []
        for i in range(b):
            m = mask_token_set(ref_masks[i], d_masks[i], cfg.patch, cfg.cond_tokens)
            bias[i, m] = np.log(cfg.attn_alpha)
            sets.append(m)
        return ConditionBundle(cond=cond, token_bias=bias, mask_token_sets=sets,
                               text_slot=text_slot)

    @staticmethod
    def _active_text_rows(text_slot: Array | None) -> Array:
        """Zero-padded text rows contribute nothing and are dropped outright."""
        if text_slot is None:
            return np.zeros((0, 0), dtype=np.float32)
        rows = np.asarray(text_slot, dtype=np.float32)
        keep = np.any(rows != 0.0, axis=1)
        return rows[keep]

    # -- attention ----------------------------------------------------------

    def _positions(self, n_img: int, n_other: int) -> Array:
        return np.concatenate([np.arange(n_img), np.zeros(n_other)]).astype(np.float64)

    def _attention(self, x: ad.DTensor, block: int, n_img: int, bias: Array) -> ad.DTensor:
        cfg = self.config
        b, n, d = x.shape
        dh = d // cfg.heads
        flat = ad.reshape(x, (b * n, d))

        def proj(name):
            y = ad.add(ad.matmul(flat, self.params[f"blk{block}_{name}_w"]),
                       self.params[f"blk{block}_{name}_b"])
            y = ad.reshape(y, (b, n, cfg.heads, dh))
            return ad.transpose(y, (0, 2, 1, 3))

        q, k, v = proj("q"), proj("k"), proj("v")
        pos = self._positions(n_img, n - n_img)
        cos, sin = rope_tables(pos, dh)
        q = ad.apply_rope(q, cos, sin)
        k = ad.apply_rope(k, cos, sin)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        # bias per sample: either column weights (B, N) or a full (B, N, N) matrix
        if bias.ndim == 2:
            scores = ad.add_const(scores, bias[:, None, None, :])
        else:
            scores = ad.add_const(scores, bias[:, None, :, :])
        attn = ad.softmax(scores, axis=-1)
        out = ad.matmul(attn, v)
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b * n, d))
        out = ad.add(ad.matmul(out, self.params[f"blk{block}_o_w"]),
                     self.params[f"blk{block}_o_b"])
        return ad.reshape(out, (b, n, d))

    def mm_attention(self, tokens_img, tokens_cond, bias: Array, block: int = 0) -> ad.DTensor:
        """Single-sample fused attention over [image tokens; condition tokens].

        `bias` is an (N, N) additive matrix, e.g. from `build_attention_bias`.
        """
        img = tokens_img if isinstance(tokens_img, ad.DTensor) else ad.dtensor(tokens_img)
        cond = tokens_cond if isinstance(tokens_cond, ad.DTensor) else ad.dtensor(tokens_cond)
        if img.shape[-1] != cond.shape[-1]:
            raise ad.ShapeError(f"token dims differ: {img.shape} vs {cond.shape}")
        n_img = img.shape[0]
        x = ad.concat([img, cond], axis=0)
        x = ad.reshape(x, (1,) + x.shape)
        out = self._attention(x, block, n_img, np.asarray(bias, dtype=np.float32)[None])
        return ad.reshape(out, out.shape[1:])

    # -- forward ------------------------------------------------------------

    def forward_velocity(self, z: Array, d_mask: Array, cond: ConditionBundle,
                         t: Array) -> ad.DTensor:
        """Predict the velocity field for noisy diptych `z` at times `t`."""
        cfg = self.config
        z = np.asarray(z, dtype=np.float32)
        b, h, w, _ = z.shape
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if np.any(t < 0) or np.any(t > 1):
            raise ValueError(f"timesteps must lie in [0, 1], got {t}")
        if d_mask.ndim == 2:
            d_mask = np.broadcast_to(d_mask, (b,) + d_mask.shape)

        x_in = np.concatenate([z, d_mask[..., None].astype(np.float32)], axis=-1)
        tokens = patchify_np(x_in, cfg.patch)
        n_img = tokens.shape[1]
        x = ad.add(ad.matmul(ad.dtensor(tokens.reshape(b * n_img, -1)),
                             self.params["in_w"]), self.params["in_b"])
        x = ad.reshape(x, (b, n_img, cfg.dim))

        extra = [cond.cond]
        text_rows = self._active_text_rows(cond.text_slot)
        if text_rows.shape[0]:
            text = np.broadcast_to(text_rows[None], (b,) + text_rows.shape)
            extra.append(ad.dtensor(np.ascontiguousarray(text)))
        x = ad.concat([x] + extra, axis=1)
        n_total = x.shape[1]
        if cond.token_bias.shape[1] != n_total:
            raise ad.ShapeError(
                f"bias covers {cond.token_bias.shape[1]} tokens, sequence has {n_total}")

        temb = ad.dtensor(_sinusoidal_features(t, cfg.dim))
        temb = ad.silu(ad.add(ad.matmul(temb, self.params["time_w1"]), self.params["time_b1"]))
        temb = ad.add(ad.matmul(temb, self.params["time_w2"]), self.params["time_b2"])
        x = ad.add(x, ad.expand(ad.reshape(temb, (b, 1, cfg.dim)), 1, n_total))

        for i in range(cfg.blocks):
            attn = self._attention(ad.rms_norm(x, axis=-1), i, n_img, cond.token_bias)
            x = ad.add(x, attn)
            hseq = ad.reshape(ad.rms_norm(x, axis=-1), (b * n_total, cfg.dim))
            ff = ad.silu(ad.add(ad.matmul(hseq, self.params[f"blk{i}_ff1_w"]),
                                self.params[f"blk{i}_ff1_b"]))
            ff = ad.add(ad.matmul(ff, self.params[f"blk{i}_ff2_w"]),
                        self.params[f"blk{i}_ff2_b"])
            x = ad.add(x, ad.reshape(ff, (b, n_total, cfg.dim)))

        x = ad.rms_norm(x, axis=-1)
        img_tokens = ad.slice_(x, (slice(None), slice(0, n_img)))
        flat = ad.reshape(img_tokens, (b * n_img, cfg.dim))
        out = ad.add(ad.matmul(flat, self.params["head_w"]), self.params["head_b"])
        out = ad.add(out, ad.matmul(ad.dtensor(tokens.reshape(b * n_img, -1)),
                                    self.params["skip_w"]))
        out = ad.reshape(out, (b, n_img, self.OUT_CHANNELS * cfg.patch ** 2))
        gain = ad.add_const(ad.add(ad.matmul(ad.silu(temb), self.params["gain_w"]),
                                   self.params["gain_b"]), np.float32(1.0))
        out_channels = self.OUT_CHANNELS * cfg.patch ** 2
        gain = ad.expand(ad.reshape(gain, (b, 1, out_channels)), 1, n_img)
        out = ad.mul(out, gain)
        return unpatchify(out, (h, w), cfg.patch, self.OUT_CHANNELS)

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.params, {"model": self.config.to_dict()})

    @classmethod
    def load(cls, path) -> "VelocityModel":
        tensors, meta = ad.load_checkpoint(path)
        if not meta or "model" not in meta:
            raise ValueError(f"{path}: checkpoint carries no model config")
        cfg = ModelConfig(**meta["model"])
        params = {k: ad.parameter(v) for k, v in tensors.items()}
        return cls(cfg, params=params)

    def clone(self) -> "VelocityModel":
        params = {k: ad.parameter(p.data.copy()) for k, p in self.params.items()}
        return VelocityModel(self.config, params=params)

    def state_arrays(self) -> dict[str, Array]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_arrays(self, state: dict[str, Array]) -> None:
        for k, p in self.params.items():
            p.data = state[k].astype(np.float32).copy()
