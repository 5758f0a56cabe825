"""Mask-conditioned toy image synthesis with a zero-gated control branch.

A small convolutional autoencoder (stem -> block -> head) is trained on toy
images and frozen. Conditioning adds a trainable copy of the middle block whose
input and output pass through 1x1 convolutions that start at exactly zero::

    y_c = F(x) + Z2(F_copy(x + Z1(E(c))))

so a fresh control block reproduces the frozen base bit for bit.
"""

from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .codec import BACKGROUND, CUP, DISC
from .nn import Adam, Conv2d, Module, ShapeError, autograd as ag, checkpoint, zero_conv

log = logging.getLogger(__name__)

CHANNELS = 16
LEVELS = {BACKGROUND: 0.15, DISC: 0.5, CUP: 0.9}
GRADIENT_AMPLITUDE = 0.05


class FrozenDriftError(RuntimeError):
    """A parameter that must stay frozen changed during training."""


class UntrainedWarning(UserWarning):
    pass


# toy renderer

def render_clean(mask, rng):
    """Piecewise-constant intensities plus a random planar illumination ramp.

    The ramp never exceeds ``GRADIENT_AMPLITUDE`` in magnitude, so cup pixels stay
    within [0.85, 0.95] before noise.
    """
    mask = np.asarray(mask)
    h, w = mask.shape
    img = np.zeros((h, w))
    for label, level in LEVELS.items():
        img[mask == label] = level
    theta = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    u = (np.cos(theta) * (xx - (w - 1) / 2) / max(w - 1, 1)
         + np.sin(theta) * (yy - (h - 1) / 2) / max(h - 1, 1))
    # u lies in [-1/sqrt(2), 1/sqrt(2)]
    return img + GRADIENT_AMPLITUDE * np.sqrt(2.0) * u


def make_toy_pairs(masks, rng, noise=0.05, blur=0.0):
    """Render each mask to a grayscale target in [0, 1] (seeded noise, clipped).

    ``blur`` is the sigma in pixels of an optional Gaussian acquisition blur applied
    before the noise.
    """
    pairs = []
    for m in masks:
        clean = render_clean(m, rng)
        if blur > 0:
            clean = ndimage.gaussian_filter(clean, blur, mode="nearest")
        img = np.clip(clean + noise * rng.standard_normal(clean.shape), 0.0, 1.0)
        pairs.append((np.asarray(m, dtype=np.uint8), img))
    return pairs


def one_hot(masks):
    masks = np.asarray(masks)
    if masks.ndim == 2:
        masks = masks[None]
    return np.stack([masks == k for k in (BACKGROUND, DISC, CUP)], axis=1).astype(np.float64)


def read_image_png(path):
    img = Image.open(path)
    if img.mode != "L":
        raise ValueError(f"{path}: expected 8-bit grayscale PNG, got mode {img.mode}")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_image_png(path, image):
    img = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise ValueError("image has non-finite values")
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


# networks

def _act(x):
    return ag.leaky_relu(x, 0.1)


class ResBlock(Module):
    def __init__(self, ch, rng):
        self.c1 = Conv2d(ch, ch, 3, rng=rng)
        self.c2 = Conv2d(ch, ch, 3, rng=rng)
        self.c2.weight.data *= 0.1

    def __call__(self, h):
        return ag.add(h, self.c2(_act(self.c1(h))))


class BaseNet(Module):
    """Autoencoder: two stride-2 convs down to 1/4 resolution, a residual block, two upsampling convs."""

    def __init__(self, ch=CHANNELS, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stem = [Conv2d(1, ch, 3, 2, rng=rng), Conv2d(ch, ch, 3, 2, rng=rng)]
        self.block = ResBlock(ch, rng)
        self.head = [Conv2d(ch, ch, 3, rng=rng), Conv2d(ch, 1, 3, rng=rng)]

    def encode(self, img):
        x = ag.as_tensor(_batch_images(img))
        return _act(self.stem[1](_act(self.stem[0](x))))

    def decode(self, y):
        h = _act(self.head[0](ag.upsample2x(y)))
        out = self.head[1](ag.upsample2x(h))
        return ag.reshape(out, (out.shape[0],) + out.shape[2:])

    def __call__(self, img):
        return self.decode(self.block(self.encode(img)))


class ConditionEncoder(Module):
    """One-hot mask -> features at the block resolution (two stride-2 convs)."""

    def __init__(self, ch=CHANNELS, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c1 = Conv2d(3, ch, 3, 2, rng=rng)
        self.c2 = Conv2d(ch, ch, 3, 2, rng=rng)

    def __call__(self, masks):
        return self.c2(_act(self.c1(one_hot(masks))))


def _batch_images(img):
    img = np.asarray(img.data if isinstance(img, ag.Tensor) else img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim == 3:
        img = img[:, None]
    return img


class ControlBlock(Module):
    """Frozen base plus trainable copy, zero convolutions and condition encoder."""

    def __init__(self, base, canvas, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.base = base.freeze()
        ch = base.block.c1.weight.shape[0]
        self.copy = copy.deepcopy(base.block).unfreeze()
        self.z1 = zero_conv(ch)
        self.z2 = zero_conv(ch)
        self.encoder = ConditionEncoder(ch, rng)
        self.canvas = np.asarray(canvas, dtype=np.float64)
        self.trained = False

    def trainable(self):
        out = {}
        for section in ("copy", "z1", "z2", "encoder"):
            out.update({f"{section}.{k}": p
                        for k, p in getattr(self, section).named_parameters().items()})
        return out

    def base_checksum(self):
        return checkpoint.checksum(self.base.state_dict())

    def features(self, n=1):
        """Frozen stem features of the mean canvas, the unconditioned input x."""
        return self.base.encode(np.broadcast_to(self.canvas, (n,) + self.canvas.shape)).data

    def to_arrays(self):
        arrays = {}
        for section in ("base", "copy", "z1", "z2", "encoder"):
            arrays.update({f"{section}.{k}": v
                           for k, v in getattr(self, section).state_dict().items()})
        arrays["meta.canvas"] = self.canvas
        arrays["meta.trained"] = np.array(float(self.trained))
        return arrays

    @classmethod
    def from_arrays(cls, arrays):
        ch = arrays["base.block.c1.weight"].shape[0]
        base = BaseNet(ch)
        base.load_state_dict(_section(arrays, "base"))
        block = cls(base, arrays["meta.canvas"])
        for section in ("copy", "z1", "z2", "encoder"):
            getattr(block, section).load_state_dict(_section(arrays, section))
        block.trained = bool(arrays["meta.trained"])
        return block

    def save(self, path):
        checkpoint.save(path, self.to_arrays())

    @classmethod
    def load(cls, path):
        return cls.from_arrays(checkpoint.load(path))


def _section(arrays, name):
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def control_forward(x, c, block):
    """``F(x) + Z2(F_copy(x + Z1(E(c))))`` on block-resolution features ``x``."""
    x = ag.as_tensor(x)
    cf = block.encoder(c)
    if cf.shape[0] != x.shape[0] and cf.shape[0] == 1:
        cf = ag.broadcast_to(cf, x.shape)
    if cf.shape != x.shape:
        raise ShapeError(f"condition features {cf.shape} do not match input features {x.shape}")
    base_out = block.base.block(x)
    branch = block.copy(ag.add(x, block.z1(cf)))
    return ag.add(base_out, block.z2(branch))


# training

@dataclass
class ControlConfig:
    channels: int = CHANNELS
    ae_steps: int = 400
    ae_lr: float = 3e-3
    steps: int = 1000
    lr: float = 2e-3
    batch_size: int = 8
    min_pairs: int = 1
    seed: int = 0


def _minibatches(n, batch, rng):
    while True:
        yield rng.integers(0, n, size=min(batch, n))


def pretrain_base(images, config=None, rng=None, callback=None):
    """Fit the autoencoder on toy images; returns the (unfrozen) base and its losses."""
    config = config or ControlConfig()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    imgs = np.asarray(images, dtype=np.float64)
    base = BaseNet(config.channels, np.random.default_rng(rng.integers(2**63)))
    opt = Adam(base.named_parameters(), lr=config.ae_lr)
    losses = []
    batches = _minibatches(len(imgs), config.batch_size, rng)
    for step in range(config.ae_steps):
        x = imgs[next(batches)]
        loss = ag.mean(ag.square(ag.sub(base(x), x)))
        ag.backward(loss)
        opt.step()
        losses.append(float(loss.data))
        if callback is not None:
            callback(step, losses[-1])
    return base, losses


def build_control(pairs, config=None, rng=None, callback=None):
    """Pretrain and freeze a base on the pair images, then wrap it in a fresh control block."""
    config = config or ControlConfig()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    images = np.stack([img for _, img in pairs])
    base, _ = pretrain_base(images, config, rng, callback)
    return ControlBlock(base, images.mean(axis=0), np.random.default_rng(rng.integers(2**63)))


def train_control(pairs, block, config=None, rng=None, callback=None):
    """Fit the control branch so that ``head(y_c)`` reconstructs the target images.

    The base checksum is compared before and after; any change raises
    :class:`FrozenDriftError`.
    """
    config = config or ControlConfig()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    if len(pairs) < config.min_pairs:
        raise ValueError(f"need at least {config.min_pairs} pairs, got {len(pairs)}")
    masks = np.stack([m for m, _ in pairs])
    targets = np.stack([img for _, img in pairs])
    if masks.shape != targets.shape:
        raise ShapeError(f"mask stack {masks.shape} does not match image stack {targets.shape}")
    before = block.base_checksum()
    opt = Adam(block.trainable(), lr=config.lr)
    x_all = block.features(1)
    losses = []
    batches = _minibatches(len(pairs), config.batch_size, rng)
    for step in range(config.steps):
        idx = next(batches)
        x = np.broadcast_to(x_all, (len(idx),) + x_all.shape[1:])
        pred = block.base.decode(control_forward(x, masks[idx], block))
        loss = ag.mean(ag.square(ag.sub(pred, targets[idx])))
        ag.backward(loss)
        opt.step()
        losses.append(float(loss.data))
        if callback is not None:
            callback(step, losses[-1])
    after = block.base_checksum()
    if after != before:
        raise FrozenDriftError(f"frozen base changed during training ({before[:12]} -> {after[:12]})")
    block.trained = True
    return losses


def synth_images(masks, block):
    """Deterministic renders for a stack of masks, clamped to [0, 1]."""
    if not block.trained:
        warnings.warn("control block is untrained; output is the base network's unconditioned render",
                      UntrainedWarning, stacklevel=2)
    masks = np.asarray(masks)
    if masks.ndim == 2:
        masks = masks[None]
    x = block.features(1)
    out = []
    for start in range(0, len(masks), 32):
        chunk = masks[start:start + 32]
        xb = np.broadcast_to(x, (len(chunk),) + x.shape[1:])
        out.append(block.base.decode(control_forward(xb, chunk, block)).data)
    return np.clip(np.concatenate(out), 0.0, 1.0)


def synth_image(mask, block):
    return synth_images(np.asarray(mask)[None], block)[0]
