import math

import numpy as np
import pytest
import torch

from mvinv.camera import CameraPose
from mvinv.generator import ToyGenerator, ToyGeneratorConfig
from mvinv.generator.raymarch import render_blobs, render_reference

from conftest import SMALL, random_latents

# sum of average_latent(1024, seed=0) of the default float64 generator, from an independent rerun
AVERAGE_LATENT_SUM = 0.2755500036175848

PCG_MULT = 0x2360ED051FC65DA44385DF649FCCF645
MASK64 = (1 << 64) - 1
MASK128 = (1 << 128) - 1


def pcg64_raw(state: int, inc: int, count: int) -> list[int]:
    """Pure-Python PCG64 (XSL-RR 128/64): advance the LCG, then permute the new state."""
    out = []
    for _ in range(count):
        state = (state * PCG_MULT + inc) & MASK128
        xored = ((state >> 64) ^ state) & MASK64
        rot = state >> 122
        out.append(((xored >> rot) | (xored << ((64 - rot) & 63))) & MASK64)
    return out


def numpy_mapping(gen: ToyGenerator, z: np.ndarray) -> np.ndarray:
    arrays = gen.mapping_arrays()
    h = np.tanh(z @ arrays["mapping.fc0"].T)
    w = arrays["mapping.canonical"] + h @ arrays["mapping.fc1"].T
    return np.repeat(w[..., None, :], gen.num_ws, axis=-2)


def directional_fd(fn, x, direction, h=1e-5):
    return (fn(x + h * direction) - fn(x - h * direction)) / (2 * h)


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


# ------------------------------------------------------------------ mapping


def test_pcg64_stream_matches_independent_implementation():
    bitgen = np.random.PCG64(0)
    st = bitgen.state["state"]
    np.testing.assert_array_equal(bitgen.random_raw(64), np.array(pcg64_raw(st["state"], st["inc"], 64), dtype=np.uint64))


def test_average_latent_golden():
    gen = ToyGenerator(dtype=torch.float64)
    w_avg = gen.average_latent(1024, seed=0)
    assert float(w_avg.sum()) == pytest.approx(AVERAGE_LATENT_SUM, abs=1e-12)
    z = np.random.Generator(np.random.PCG64(0)).standard_normal((1024, gen.z_dim))
    np.testing.assert_allclose(w_avg.numpy(), numpy_mapping(gen, z).mean(axis=0), atol=1e-14)


def test_mapping_jacobian_matches_finite_differences():
    gen = ToyGenerator(dtype=torch.float64)
    z = torch.as_tensor(np.random.default_rng(3).standard_normal(gen.z_dim))
    jac = torch.autograd.functional.jacobian(lambda v: gen.mapping(v), z).reshape(-1, gen.z_dim)
    fd = torch.stack([directional_fd(gen.mapping, z, e).reshape(-1) for e in torch.eye(gen.z_dim, dtype=z.dtype)], 1)
    assert float((jac - fd).norm() / jac.norm()) < 1e-4


def test_mapping_rejects_wrong_dimension(gen):
    with pytest.raises(ValueError):
        gen.mapping(torch.zeros(gen.z_dim + 1))


def test_average_latent_rejects_zero_samples(gen):
    with pytest.raises(ValueError):
        gen.average_latent(0)


# ---------------------------------------------------------------- rendering


def test_canonical_frontal_has_foreground(gen):
    out = gen.synthesize(gen.canonical_latent(), CameraPose(0.0))
    assert float((out.depth < gen.far - 1e-3).float().mean()) >= 0.01


def test_synthesis_ranges_over_sweep(small_gen):
    ws = random_latents(small_gen, 12, seed=1)
    poses = [CameraPose(math.radians(y)) for y in np.linspace(-60, 60, 12)]
    out = small_gen.synthesize_batch(ws, poses)
    assert torch.isfinite(out.image).all() and torch.isfinite(out.depth).all()
    assert float(out.image.min()) >= 0.0 and float(out.image.max()) <= 1.0
    assert float(out.depth.min()) > small_gen.near and float(out.depth.max()) <= small_gen.far + 1e-5


def test_synthesis_deterministic(small_gen):
    w = random_latents(small_gen, 1, seed=2)[0]
    a = small_gen.synthesize(w, CameraPose(0.3, 0.1))
    b = ToyGenerator(SMALL).synthesize(w, CameraPose(0.3, 0.1))
    assert torch.equal(a.image, b.image) and torch.equal(a.depth, b.depth)


def test_batch_matches_single(small_gen):
    # batched einsum may reorder float32 sums, so agreement is to rounding level
    ws = random_latents(small_gen, 3, seed=4)
    poses = [CameraPose(-0.4), CameraPose(0.0), CameraPose(0.5, -0.2)]
    batch = small_gen.synthesize_batch(ws, poses)
    for i in range(3):
        single = small_gen.synthesize(ws[i], poses[i])
        assert float((batch.image[i] - single.image).abs().max()) < 1e-6


def test_kernel_matches_reference_renderer(gen64):
    ws = random_latents(gen64, 2, seed=5)
    mu, inv_s, amp, alb = gen64.decode(ws)
    rays = [gen64.rays(CameraPose(y)) for y in (-0.5, 0.4)]
    origin = torch.stack([r[0] for r in rays])
    dirs = torch.stack([r[1] for r in rays])
    bg = torch.tensor(gen64.config.background, dtype=torch.float64)
    args = (mu, inv_s, amp, alb, origin, dirs, bg, gen64.near, gen64.far, gen64.config.samples)
    rgb, depth = render_blobs(*args)
    rgb_ref, depth_ref = render_reference(*args)
    np.testing.assert_allclose(rgb.numpy(), rgb_ref.numpy(), atol=1e-12)
    np.testing.assert_allclose(depth.numpy(), depth_ref.numpy(), atol=1e-12)


def test_bias_only_generator_is_mirror_symmetric():
    gen = ToyGenerator(SMALL, torch.float64)
    weights = {k: (torch.zeros_like(v) if k.endswith("_weight") else v) for k, v in gen.weights.items()}
    w = gen.canonical_latent()
    left = gen.synthesize(w, CameraPose(0.35), weights)
    right = gen.synthesize(w, CameraPose(-0.35), weights)
    np.testing.assert_allclose(left.image.numpy(), right.image.flip(1).numpy(), atol=1e-10)
    np.testing.assert_allclose(left.depth.numpy(), right.depth.flip(1).numpy(), atol=1e-10)


def test_every_wplus_row_changes_the_render(small_gen):
    w = small_gen.canonical_latent().clone()
    base = small_gen.synthesize(w, CameraPose(0.2)).image
    for row in range(small_gen.num_ws):
        moved = w.clone()
        moved[row] += 0.1
        assert float((small_gen.synthesize(moved, CameraPose(0.2)).image - base).abs().max()) > 1e-3


def test_weight_shape_checked(small_gen):
    weights = small_gen.weights
    weights["center_weight"] = weights["center_weight"][:, :3]
    with pytest.raises(ValueError):
        small_gen.set_weights(weights)


# ---------------------------------------------------------------- gradients


def _probe(out, r_img, r_depth):
    return float((out.image * r_img).sum() + (out.depth * r_depth).sum())


@pytest.mark.parametrize("instance", range(10))
def test_latent_gradient_matches_finite_differences(gen64, instance):
    rng = np.random.default_rng(100 + instance)
    w = random_latents(gen64, 1, seed=200 + instance)[0]
    pose = CameraPose(float(rng.uniform(-0.7, 0.7)), float(rng.uniform(-0.2, 0.2)))
    R = gen64.resolution
    r_img = torch.as_tensor(rng.standard_normal((R, R, 3)))
    r_depth = torch.as_tensor(rng.standard_normal((R, R)))
    direction = torch.as_tensor(rng.standard_normal(w.shape))
    direction /= direction.norm()

    w_req = w.clone().requires_grad_(True)
    out = gen64.synthesize(w_req, pose)
    ((out.image * r_img).sum() + (out.depth * r_depth).sum()).backward()
    analytic = float((w_req.grad * direction).sum())
    fd = directional_fd(lambda x: _probe(gen64.synthesize(x, pose), r_img, r_depth), w, direction)
    assert rel_err(analytic, fd) < 1e-3


@pytest.mark.parametrize("instance", range(10))
def test_weight_gradient_matches_finite_differences(gen64, instance):
    rng = np.random.default_rng(300 + instance)
    w = random_latents(gen64, 1, seed=400 + instance)[0]
    pose = CameraPose(float(rng.uniform(-0.7, 0.7)))
    R = gen64.resolution
    r_img = torch.as_tensor(rng.standard_normal((R, R, 3)))
    r_depth = torch.as_tensor(rng.standard_normal((R, R)))
    base = gen64.weights
    dirs = {k: torch.as_tensor(rng.standard_normal(v.shape)) for k, v in base.items()}
    norm = math.sqrt(sum(float((d * d).sum()) for d in dirs.values()))
    dirs = {k: d / norm for k, d in dirs.items()}

    params = {k: v.clone().requires_grad_(True) for k, v in base.items()}
    out = gen64.synthesize(w, pose, params)
    ((out.image * r_img).sum() + (out.depth * r_depth).sum()).backward()
    analytic = sum(float((params[k].grad * dirs[k]).sum()) for k in base)

    def probe(h):
        return _probe(gen64.synthesize(w, pose, {k: base[k] + h * dirs[k] for k in base}), r_img, r_depth)

    fd = (probe(1e-5) - probe(-1e-5)) / 2e-5
    assert rel_err(analytic, fd) < 1e-3


def test_image_sum_directional_derivative(gen64):
    rng = np.random.default_rng(11)
    w = gen64.canonical_latent().clone()
    direction = torch.as_tensor(rng.standard_normal(w.shape))
    w_req = w.clone().requires_grad_(True)
    gen64.synthesize(w_req, CameraPose(0.0)).image.sum().backward()
    analytic = float((w_req.grad * direction).sum())
    fd = directional_fd(lambda x: float(gen64.synthesize(x, CameraPose(0.0)).image.sum()), w, direction)
    assert rel_err(analytic, fd) < 1e-3


def test_float32_copy_matches_float64(gen64):
    w = random_latents(gen64, 1, seed=9)[0]
    g32 = gen64.to(torch.float32)
    a = gen64.synthesize(w, CameraPose(0.1)).image
    b = g32.synthesize(w.float(), CameraPose(0.1)).image
    assert float((a - b.double()).abs().max()) < 1e-4
