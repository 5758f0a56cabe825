"""Small convolutional segmenter for the toy cup/disc task."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .nn import Adam, Conv2d, Module, autograd as ag, checkpoint

log = logging.getLogger(__name__)

N_CLASSES = 3


class NonFiniteLoss(FloatingPointError):
    pass


class ToySegmenter(Module):
    """Four 3x3 convolutions: full-res features, two stride-2 stages, and a
    classifier over the upsampled coarse features joined with the full-res ones."""

    def __init__(self, width=16, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c1 = Conv2d(1, width, 3, rng=rng)
        self.c2 = Conv2d(width, width, 3, 2, rng=rng)
        self.c3 = Conv2d(width, width, 3, 2, rng=rng)
        self.c4 = Conv2d(2 * width, N_CLASSES, 3, rng=rng)

    def __call__(self, images):
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"image size {h}x{w} must be divisible by 4")
        x = ag.as_tensor(x[:, None])
        f1 = ag.leaky_relu(self.c1(x), 0.1)
        f2 = ag.leaky_relu(self.c2(f1), 0.1)
        f3 = ag.leaky_relu(self.c3(f2), 0.1)
        up = ag.upsample2x(ag.upsample2x(f3))
        return self.c4(ag.concat([f1, up], axis=1))  # (N, 3, H, W) logits


def segmentation_loss(logits, labels):
    """Pixel-mean cross-entropy plus soft Dice loss averaged over classes."""
    labels = np.asarray(labels)
    onehot = np.stack([labels == k for k in range(N_CLASSES)], axis=1).astype(np.float64)
    logp = ag.log_softmax(logits, axis=1)
    ce = ag.mul(ag.mean(ag.tsum(ag.mul(logp, onehot), axis=1)), -1.0)
    p = ag.exp(logp)
    inter = ag.tsum(ag.mul(p, onehot), axis=(0, 2, 3))
    denom = ag.add(ag.tsum(p, axis=(0, 2, 3)), onehot.sum(axis=(0, 2, 3)) + 1.0)
    dice = ag.div(ag.add(ag.mul(inter, 2.0), 1.0), denom)
    return ag.add(ce, ag.sub(1.0, ag.mean(dice)))


def predict(model, images, batch=32):
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    out = [np.argmax(model(images[i:i + batch]).data, axis=1).astype(np.uint8)
           for i in range(0, len(images), batch)]
    return np.concatenate(out)


@dataclass
class SegConfig:
    width: int = 16
    steps: int = 600
    lr: float = 3e-3
    batch_size: int = 8
    synth_noise: float = 0.0  # Gaussian noise added to synthetic inputs during training
    seed: int = 0


def train_segmenter(images, masks, config=None, rng=None, synthetic=None, callback=None):
    """Fit a :class:`ToySegmenter`; ``synthetic`` flags rows that get ``synth_noise`` added."""
    config = config or SegConfig()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    images = np.asarray(images, dtype=np.float64)
    masks = np.asarray(masks)
    if len(images) == 0:
        raise ValueError("no training images")
    if images.shape != masks.shape:
        raise ValueError(f"image stack {images.shape} does not match mask stack {masks.shape}")
    synthetic = np.zeros(len(images), bool) if synthetic is None else np.asarray(synthetic, bool)
    model = ToySegmenter(config.width, np.random.default_rng(rng.integers(2**63)))
    opt = Adam(model.named_parameters(), lr=config.lr)
    losses = []
    for step in range(config.steps):
        idx = rng.integers(0, len(images), size=min(config.batch_size, len(images)))
        x = images[idx]
        if config.synth_noise > 0:
            noise = config.synth_noise * rng.standard_normal(x.shape)
            x = np.clip(x + noise * synthetic[idx, None, None], 0.0, 1.0)
        loss = segmentation_loss(model(x), masks[idx])
        value = float(loss.data)
        if not np.isfinite(value):
            raise NonFiniteLoss(f"segmentation loss became {value} at step {step}")
        ag.backward(loss)
        opt.step()
        losses.append(value)
        if callback is not None:
            callback(step, value)
    return model, losses


def save_segmenter(path, model):
    checkpoint.save(path, model.state_dict())


def load_segmenter(path):
    state = checkpoint.load(path)
    model = ToySegmenter(state["c1.weight"].shape[0])
    model.load_state_dict(state)
    return model
