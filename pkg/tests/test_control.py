import numpy as np
import pytest
from scipy import signal

from fairdiff import codec, control as C
from fairdiff.nn import ShapeError, autograd as ag


def small_masks(rng, n, size=32):
    return [codec.random_ellipse_pair(rng, size=size, radius_range=(7.0, 11.0)) for _ in range(n)]


def fresh_block(size=32, seed=0):
    rng = np.random.default_rng(seed)
    base = C.BaseNet(8, rng)
    return C.ControlBlock(base, rng.uniform(0, 1, (size, size)), rng)


def test_renderer_levels_and_determinism():
    rng = np.random.default_rng(0)
    masks = small_masks(rng, 5)
    for m in masks:
        clean = C.render_clean(m, np.random.default_rng(1))
        cup = clean[m == codec.CUP]
        assert cup.min() >= 0.8 and cup.max() <= 1.0
        assert clean[m == codec.BACKGROUND].max() < clean[m == codec.DISC].min() + 0.15
    a = C.make_toy_pairs(masks, np.random.default_rng(3))
    b = C.make_toy_pairs(masks, np.random.default_rng(3))
    for (ma, ia), (mb, ib) in zip(a, b):
        np.testing.assert_array_equal(ma, mb)
        np.testing.assert_array_equal(ia, ib)
        assert ia.min() >= 0 and ia.max() <= 1


def test_rendered_histogram_has_three_modes():
    m = codec.random_ellipse_pair(np.random.default_rng(2), size=128, radius_range=(40, 50))
    (_, img), = C.make_toy_pairs([m], np.random.default_rng(0), noise=0.03)
    hist, _ = np.histogram(img, bins=50, range=(0, 1))
    smooth = np.convolve(hist, np.ones(3) / 3, mode="same")
    peaks, _ = signal.find_peaks(smooth, prominence=0.05 * smooth.max())
    assert len(peaks) == 3


def test_fresh_block_is_bit_identical_to_base():
    block = fresh_block()
    rng = np.random.default_rng(5)
    for _ in range(10):
        x = rng.standard_normal((2, 8, 8, 8))
        masks = np.stack(small_masks(rng, 2))
        y = control_out = C.control_forward(x, masks, block).data
        np.testing.assert_array_equal(control_out, block.base.block(x).data)
        assert y.dtype == np.float64


def test_zeroing_output_gate_reverts_to_base():
    block = fresh_block()
    rng = np.random.default_rng(1)
    for p in block.trainable().values():
        p.data = p.data + rng.normal(0, 0.1, p.data.shape)
    x = rng.standard_normal((1, 8, 8, 8))
    masks = np.stack(small_masks(rng, 1))
    assert not np.array_equal(C.control_forward(x, masks, block).data, block.base.block(x).data)
    block.z2.weight.data[...] = 0.0
    block.z2.bias.data[...] = 0.0
    np.testing.assert_array_equal(C.control_forward(x, masks, block).data, block.base.block(x).data)


def test_gradient_reaches_output_gate_at_init():
    block = fresh_block()
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 8, 8, 8))
    y = C.control_forward(x, np.stack(small_masks(rng, 2)), block)
    ag.backward(ag.mean(ag.square(ag.sub(y, rng.standard_normal(y.shape)))))
    assert np.any(block.z2.weight.grad != 0)
    assert np.all(block.z1.weight.grad == 0)  # blocked by the zero output gate
    assert all(p.grad is None for p in block.base.parameters())


def test_dimension_mismatch_rejected():
    block = fresh_block()
    with pytest.raises(ShapeError):
        C.control_forward(np.zeros((1, 8, 4, 4)), np.zeros((1, 32, 32), dtype=np.uint8), block)


def test_overfit_single_pair():
    rng = np.random.default_rng(0)
    m = codec.random_ellipse_pair(rng, size=16, radius_range=(5.0, 6.0))
    pairs = C.make_toy_pairs([m], rng)
    block = fresh_block(16)
    before = block.base_checksum()
    cfg = C.ControlConfig(steps=400, lr=3e-3, batch_size=1)
    losses = C.train_control(pairs, block, cfg, np.random.default_rng(1))
    assert min(losses[-20:]) < 0.1 * losses[0]
    assert block.base_checksum() == before
    assert np.any(block.z1.weight.data != 0) and np.any(block.z2.weight.data != 0)


def test_frozen_drift_is_fatal():
    rng = np.random.default_rng(0)
    pairs = C.make_toy_pairs(small_masks(rng, 2, 16), rng)
    block = fresh_block(16)

    def tamper(step, loss):
        block.base.head[0].bias.data = block.base.head[0].bias.data + 1e-12

    with pytest.raises(C.FrozenDriftError):
        C.train_control(pairs, block, C.ControlConfig(steps=2), rng, callback=tamper)
    assert not block.trained


def test_min_pairs_enforced():
    with pytest.raises(ValueError):
        C.train_control([], fresh_block(), C.ControlConfig(min_pairs=1))


def test_untrained_synthesis_warns():
    block = fresh_block()
    with pytest.warns(C.UntrainedWarning):
        C.synth_image(small_masks(np.random.default_rng(0), 1)[0], block)


@pytest.fixture(scope="module")
def trained():
    rng = np.random.default_rng(4)
    masks = small_masks(rng, 40)
    pairs = C.make_toy_pairs(masks, rng)
    cfg = C.ControlConfig(channels=8, ae_steps=300, steps=600, batch_size=8)
    block = C.build_control(pairs, cfg, np.random.default_rng(0))
    C.train_control(pairs, block, cfg, np.random.default_rng(1))
    return block


def test_trained_synthesis_properties(trained, tmp_path):
    rng = np.random.default_rng(9)
    m = small_masks(rng, 1)[0]
    a, b = C.synth_image(m, trained), C.synth_image(m.copy(), trained)
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1

    small = codec.ellipse_pair_mask(32, 32, (16, 16), (10, 10), (16, 16), (4, 4))
    large = codec.ellipse_pair_mask(32, 32, (16, 16), (10, 10), (16, 16), (7.5, 7.5))
    s, l = C.synth_images(np.stack([small, large]), trained)
    thr = np.quantile(np.concatenate([s.ravel(), l.ravel()]), 0.9)
    assert (l >= thr).sum() > (s >= thr).sum()
    assert np.linalg.norm(s - l) > 0

    bg = C.synth_image(np.zeros((32, 32), dtype=np.uint8), trained)
    assert np.sqrt(np.mean((bg - C.LEVELS[codec.BACKGROUND]) ** 2)) < 0.1

    held = small_masks(rng, 6)
    imgs = C.synth_images(np.stack(held), trained)
    assert all(np.linalg.norm(imgs[i] - imgs[i + 1]) > 0 for i in range(5))

    path = tmp_path / "ctrl.fdnn"
    trained.save(path)
    keys = C.checkpoint.load(path).keys()
    assert {k.split(".")[0] for k in keys} == {"base", "copy", "z1", "z2", "encoder", "meta"}
    back = C.ControlBlock.load(path)
    np.testing.assert_array_equal(C.synth_image(m, back), a)
