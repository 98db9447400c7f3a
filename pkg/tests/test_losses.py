import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mvinv.losses import (
    Extractors,
    IdentityEmbedding,
    LossWeights,
    PyramidFeatures,
    ZeroEmbeddingError,
    combined_loss,
    id_loss,
    l2_loss,
    latent_reg,
    perceptual_loss,
    weighted_sum,
)

R = 32


def correlate3x3(x: np.ndarray, k: np.ndarray, stride: int = 1) -> np.ndarray:
    """Zero-padded 3x3 cross-correlation of (C, H, W) with (O, C, 3, 3), by explicit loops over offsets."""
    c, h, w = x.shape
    padded = np.zeros((c, h + 2, w + 2))
    padded[:, 1:-1, 1:-1] = x
    out = np.zeros((k.shape[0], h, w))
    for dy in range(3):
        for dx in range(3):
            patch = padded[:, dy:dy + h, dx:dx + w]
            out += np.einsum("oc,chw->ohw", k[:, :, dy, dx], patch)
    return out[:, ::stride, ::stride]


def pool2(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def pyramid_oracle(fx: PyramidFeatures, image: np.ndarray) -> np.ndarray:
    x = image.transpose(2, 0, 1)
    feats = []
    for level, kernel in enumerate(fx.kernels):
        if level:
            x = pool2(x)
        feats.append(np.tanh(correlate3x3(x, kernel)).ravel())
    return np.concatenate(feats)


def identity_oracle(fx: IdentityEmbedding, image: np.ndarray) -> np.ndarray:
    x = image.transpose(2, 0, 1)
    for kernel in fx.kernels:
        x = np.tanh(correlate3x3(x, kernel, stride=2))
    e = fx.projection @ x.ravel()
    return e / np.linalg.norm(e)


@pytest.fixture(scope="module")
def pair():
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(R, R, 3))
    b = np.clip(a + 0.1 * rng.standard_normal((R, R, 3)), 0, 1)
    return a, b


@pytest.fixture(scope="module")
def ex():
    return Extractors.default(R)


def t(x):
    return torch.as_tensor(x, dtype=torch.float64)


def test_pyramid_matches_independent_implementation(pair, ex):
    a, b = pair
    np.testing.assert_allclose(ex.perceptual(t(a)).numpy(), pyramid_oracle(ex.perceptual, a), atol=1e-12)
    expected = np.mean((pyramid_oracle(ex.perceptual, a) - pyramid_oracle(ex.perceptual, b)) ** 2)
    assert float(perceptual_loss(t(a), t(b), ex.perceptual)) == pytest.approx(expected, abs=1e-12)


def test_id_loss_matches_manual_embedding(pair, ex):
    a, b = pair
    ea, eb = identity_oracle(ex.identity, a), identity_oracle(ex.identity, b)
    assert float(id_loss(t(a), t(b), ex.identity)) == pytest.approx(1 - ea @ eb, abs=1e-12)


def test_l2_matches_direct_sum(pair):
    a, b = pair
    expected = sum((a - b).ravel() ** 2) / a.size
    assert float(l2_loss(t(a), t(b))) == pytest.approx(expected, abs=1e-12)


def test_latent_reg_matches_direct_sum():
    rng = np.random.default_rng(1)
    w, w_avg = rng.standard_normal((4, 16)), rng.standard_normal((4, 16))
    assert float(latent_reg(t(w), t(w_avg))) == pytest.approx(((w - w_avg) ** 2).sum() / 64, abs=1e-12)


def test_identical_images_give_zero_losses(pair, ex):
    a = t(pair[0])
    assert float(l2_loss(a, a)) == 0.0
    assert float(perceptual_loss(a, a, ex.perceptual)) == 0.0
    assert float(id_loss(a, a, ex.identity)) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_losses_symmetric_and_nonnegative(seed):
    ex = Extractors.default(R)
    rng = np.random.default_rng(seed)
    a, b = t(rng.uniform(size=(R, R, 3))), t(rng.uniform(size=(R, R, 3)))
    for fn in (l2_loss, lambda x, y: perceptual_loss(x, y, ex.perceptual), lambda x, y: id_loss(x, y, ex.identity)):
        assert float(fn(a, b)) == pytest.approx(float(fn(b, a)), abs=1e-12)
        assert float(fn(a, b)) >= -1e-12


def test_identity_embedding_is_odd(pair, ex):
    a = t(pair[0] - 0.5)
    np.testing.assert_allclose(ex.identity(-a).numpy(), -ex.identity(a).numpy(), atol=1e-14)


def test_zero_embedding_raises(ex):
    with pytest.raises(ZeroEmbeddingError):
        id_loss(torch.zeros(R, R, 3, dtype=torch.float64), torch.ones(R, R, 3, dtype=torch.float64), ex.identity)


def test_batched_losses_reduce_per_pair(ex):
    rng = np.random.default_rng(2)
    a, b = t(rng.uniform(size=(3, R, R, 3))), t(rng.uniform(size=(3, R, R, 3)))
    batched = perceptual_loss(a, b, ex.perceptual)
    assert batched.shape == (3,)
    for i in range(3):
        assert float(batched[i]) == pytest.approx(float(perceptual_loss(a[i], b[i], ex.perceptual)), abs=1e-14)


def test_combined_loss_is_manual_view_sum(ex):
    rng = np.random.default_rng(3)
    imgs, tgts = t(rng.uniform(size=(3, R, R, 3))), t(rng.uniform(size=(3, R, R, 3)))
    w, w_avg = t(rng.standard_normal((4, 16))), t(rng.standard_normal((4, 16)))
    lw = LossWeights(1.0, 0.1, 1.0, 1.0)
    manual = 0.0
    for i in range(3):
        a, b = imgs[i].numpy(), tgts[i].numpy()
        manual += 1.0 * np.mean((pyramid_oracle(ex.perceptual, a) - pyramid_oracle(ex.perceptual, b)) ** 2)
        manual += 0.1 * np.mean((a - b) ** 2)
        manual += 1.0 * np.mean((w.numpy() - w_avg.numpy()) ** 2)
        manual += 1.0 * (1 - identity_oracle(ex.identity, a) @ identity_oracle(ex.identity, b))
    from mvinv.generator import RenderOutput
    renders = RenderOutput(imgs, torch.zeros(3, R, R, dtype=torch.float64))
    assert float(combined_loss(renders, tgts, w, w_avg, lw, ex)) == pytest.approx(manual, abs=1e-12)


def test_view_weights_mask_views(ex):
    from mvinv.generator import RenderOutput
    rng = np.random.default_rng(4)
    imgs, tgts = t(rng.uniform(size=(3, R, R, 3))), t(rng.uniform(size=(3, R, R, 3)))
    w = t(rng.standard_normal((4, 16)))
    lw = LossWeights()
    full = combined_loss(RenderOutput(imgs, imgs[..., 0]), tgts, w, w * 0, lw, ex, view_weights=[1, 1, 0])
    two = combined_loss(RenderOutput(imgs[:2], imgs[:2, ..., 0]), tgts[:2], w, w * 0, lw, ex)
    assert float(full) == pytest.approx(float(two), abs=1e-12)


def test_invalid_weights():
    with pytest.raises(ValueError):
        LossWeights(lambda_p=-1.0)
    with pytest.raises(ValueError):
        weighted_sum({}, LossWeights())


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        l2_loss(torch.zeros(R, R, 3), torch.zeros(R, R + 2, 3))
