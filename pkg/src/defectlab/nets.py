"""Small convolutional recognition nets shared by the reward models and the
downstream evaluation harness.

The classifier pools three conv stages down to a global feature; the
segmenter keeps full resolution and emits per-pixel class logits. Both train
with Adam on cross-entropy. Class 0 is always "normal"/background.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

Array = np.ndarray


def _he(rng: np.random.Generator, shape, fan_in: int) -> Array:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def build_classifier_params(rng: np.random.Generator, num_classes: int,
                            channels=(12, 24, 32)) -> dict[str, ad.DTensor]:
    c1, c2, c3 = channels
    return {
        "w1": ad.parameter(_he(rng, (3, 3, 3, c1), 27)),
        "b1": ad.parameter(np.zeros(c1, dtype=np.float32)),
        "w2": ad.parameter(_he(rng, (3, 3, c1, c2), 9 * c1)),
        "b2": ad.parameter(np.zeros(c2, dtype=np.float32)),
        "w3": ad.parameter(_he(rng, (3, 3, c2, c3), 9 * c2)),
        "b3": ad.parameter(np.zeros(c3, dtype=np.float32)),
        "head_w": ad.parameter(_he(rng, (2 * c3, num_classes), 2 * c3)),
        "head_b": ad.parameter(np.zeros(num_classes, dtype=np.float32)),
    }


def classifier_logits(params: dict[str, ad.DTensor], images: Array) -> ad.DTensor:
    x = ad.dtensor(images)
    x = ad.avg_pool2d(ad.relu(ad.conv2d(x, params["w1"], params["b1"])), 2)
    x = ad.avg_pool2d(ad.relu(ad.conv2d(x, params["w2"], params["b2"])), 2)
    x = ad.relu(ad.conv2d(x, params["w3"], params["b3"]))
    # defects are localized: max pooling keeps their activations from being
    # averaged away, mean pooling keeps the texture statistics
    pooled = ad.concat([ad.amax(x, axis=(1, 2)), ad.mean(x, axis=(1, 2))], axis=1)
    return ad.add(ad.matmul(pooled, params["head_w"]), params["head_b"])


def build_segmenter_params(rng: np.random.Generator, num_classes: int,
                           channels=(12, 16)) -> dict[str, ad.DTensor]:
    c1, c2 = channels
    return {
        "w1": ad.parameter(_he(rng, (3, 3, 3, c1), 27)),
        "b1": ad.parameter(np.zeros(c1, dtype=np.float32)),
        "w2": ad.parameter(_he(rng, (3, 3, c1, c2), 9 * c1)),
        "b2": ad.parameter(np.zeros(c2, dtype=np.float32)),
        "head_w": ad.parameter(_he(rng, (1, 1, c2, num_classes), c2)),
        "head_b": ad.parameter(np.zeros(num_classes, dtype=np.float32)),
    }


def segmenter_logits(params: dict[str, ad.DTensor], images: Array) -> ad.DTensor:
    x = ad.dtensor(images)
    x = ad.relu(ad.conv2d(x, params["w1"], params["b1"]))
    x = ad.relu(ad.conv2d(x, params["w2"], params["b2"]))
    return ad.conv2d(x, params["head_w"], params["head_b"], padding=0)


def segmenter_penultimate(params: dict[str, ad.DTensor], images: Array) -> Array:
    """Activations right before the 1x1 head; the IL embedding space."""
    x = ad.dtensor(images)
    x = ad.relu(ad.conv2d(x, params["w1"], params["b1"]))
    x = ad.relu(ad.conv2d(x, params["w2"], params["b2"]))
    return x.data


def cross_entropy(logits: ad.DTensor, labels: Array, num_classes: int) -> ad.DTensor:
    """Mean CE; labels index the last axis of `logits` (any leading shape)."""
    shift = logits.data.max(axis=-1, keepdims=True)
    shifted = ad.add_const(logits, -shift)
    lse = ad.log(ad.sum(ad.exp(shifted), axis=-1, keepdims=True))
    logp = ad.sub(shifted, ad.expand(lse, lse.data.ndim - 1, num_classes))
    onehot = np.eye(num_classes, dtype=np.float32)[labels]
    picked = ad.sum(ad.mul_const(logp, onehot), axis=-1)
    return ad.scale(ad.mean(picked), -1.0)


def _iterate_batches(n: int, batch: int, steps: int, rng: np.random.Generator):
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch > n:
            order = rng.permutation(n)
            pos = 0
        yield order[pos:pos + batch]
        pos += batch


def train_classifier(images: Array, labels: Array, num_classes: int, steps: int = 400,
                     batch: int = 16, lr: float = 3e-3, seed: int = 0,
                     channels=(12, 24, 32)) -> dict[str, ad.DTensor]:
    rng = np.random.default_rng(seed)
    params = build_classifier_params(rng, num_classes, channels)
    opt = ad.Adam(params, lr=lr)
    batch = min(batch, len(images))
    for idx in _iterate_batches(len(images), batch, steps, rng):
        opt.zero_grad()
        loss = cross_entropy(classifier_logits(params, images[idx]), labels[idx], num_classes)
        ad.backward(loss)
        opt.step()
    return params


def train_segmenter(images: Array, label_maps: Array, num_classes: int, steps: int = 400,
                    batch: int = 16, lr: float = 3e-3, seed: int = 0,
                    channels=(12, 16)) -> dict[str, ad.DTensor]:
    rng = np.random.default_rng(seed)
    params = build_segmenter_params(rng, num_classes, channels)
    opt = ad.Adam(params, lr=lr)
    batch = min(batch, len(images))
    for idx in _iterate_batches(len(images), batch, steps, rng):
        opt.zero_grad()
        loss = cross_entropy(segmenter_logits(params, images[idx]), label_maps[idx], num_classes)
        ad.backward(loss)
        opt.step()
    return params


def _softmax_np(x: Array) -> Array:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def classifier_probs(params, images: Array, chunk: int = 64) -> Array:
    outs = [
        _softmax_np(classifier_logits(params, images[i:i + chunk]).data)
        for i in range(0, len(images), chunk)
    ]
    return np.concatenate(outs)


def segmenter_probs(params, images: Array, chunk: int = 32) -> Array:
    outs = [
        _softmax_np(segmenter_logits(params, images[i:i + chunk]).data)
        for i in range(0, len(images), chunk)
    ]
    return np.concatenate(outs)


def segmenter_heatmaps(params, images: Array) -> Array:
    """Defect probability per pixel: 1 - P(background)."""
    return 1.0 - segmenter_probs(params, images)[..., 0]


def segmenter_argmax(params, images: Array) -> Array:
    return np.argmax(segmenter_probs(params, images), axis=-1)
