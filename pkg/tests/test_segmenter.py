import numpy as np
import pytest

from fairdiff import codec, control, metrics, segmenter as S
from fairdiff.nn import autograd as ag, checkpoint
from gradcheck import check


def toy(n, size=32, seed=0, noise=0.05):
    rng = np.random.default_rng(seed)
    masks = [codec.random_ellipse_pair(rng, size=size, radius_range=(7.0, 11.0)) for _ in range(n)]
    pairs = control.make_toy_pairs(masks, rng, noise)
    return np.stack([p[1] for p in pairs]), np.stack(masks)


def test_output_shape_and_finiteness():
    x, _ = toy(2)
    out = S.ToySegmenter(8)(x)
    assert out.shape == (2, 3, 32, 32)
    assert np.all(np.isfinite(out.data))
    assert S.predict(S.ToySegmenter(8), x).shape == (2, 32, 32)
    with pytest.raises(ValueError):
        S.ToySegmenter(8)(np.zeros((1, 30, 30)))


def test_loss_is_positive_and_differentiable():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, size=(2, 4, 4))
    for scale in (0.1, 10.0, 100.0):
        logits = scale * rng.standard_normal((2, 3, 4, 4))
        assert float(S.segmentation_loss(ag.Tensor(logits), labels).data) > 0
    onehot = np.stack([labels == k for k in range(3)], axis=1)
    assert float(S.segmentation_loss(ag.Tensor(5.0 * onehot), labels).data) > 0
    # at extreme margins the log-sum-exp rounds to the max logit and the loss underflows to 0
    assert float(S.segmentation_loss(ag.Tensor(50.0 * onehot), labels).data) >= 0
    assert check(lambda t: S.segmentation_loss(t, labels), [rng.standard_normal((2, 3, 4, 4))]) < 1e-6


def test_overfits_five_samples():
    x, y = toy(5)
    model, losses = S.train_segmenter(x, y, S.SegConfig(width=8, steps=300, batch_size=5),
                                      np.random.default_rng(0))
    assert min(losses) > 0
    preds = S.predict(model, x)
    d = [np.mean([metrics.dice(p, t, "cup"), metrics.dice(p, t, "rim")]) for p, t in zip(preds, y)]
    assert np.mean(d) > 0.9


def test_training_is_deterministic(tmp_path):
    x, y = toy(4)
    cfg = S.SegConfig(width=4, steps=5, synth_noise=0.1)
    flags = np.array([0, 1, 0, 1])
    a, la = S.train_segmenter(x, y, cfg, np.random.default_rng(3), flags)
    b, lb = S.train_segmenter(x, y, cfg, np.random.default_rng(3), flags)
    S.save_segmenter(tmp_path / "a.fdnn", a)
    S.save_segmenter(tmp_path / "b.fdnn", b)
    assert (tmp_path / "a.fdnn").read_bytes() == (tmp_path / "b.fdnn").read_bytes()
    assert la == lb
    back = S.load_segmenter(tmp_path / "a.fdnn")
    np.testing.assert_array_equal(S.predict(back, x), S.predict(a, x))
    assert checkpoint.checksum(back.state_dict()) == checkpoint.checksum(a.state_dict())


def test_nonfinite_loss_aborts():
    x, y = toy(2)
    x[0, 0, 0] = np.nan
    with pytest.raises(S.NonFiniteLoss, match="step 0"):
        S.train_segmenter(x, y, S.SegConfig(width=4, steps=3, batch_size=2))
    with pytest.raises(ValueError):
        S.train_segmenter(x[:0], y[:0])
