import math

import numpy as np
import pytest
import torch

from mvinv.camera import CameraPose, PosedFrame
from mvinv.generator import ToyGenerator, ToyGeneratorConfig
from mvinv.inversion import MultiLatentSet
from mvinv.losses import Extractors

SMALL = ToyGeneratorConfig(resolution=32, samples=24)


@pytest.fixture(scope="session")
def gen():
    return ToyGenerator()


@pytest.fixture(scope="session")
def small_gen():
    return ToyGenerator(SMALL)


@pytest.fixture(scope="session")
def gen64():
    """Small generator in double precision, for gradient and exactness checks."""
    return ToyGenerator(SMALL, torch.float64)


@pytest.fixture(scope="session")
def small_extractors():
    return Extractors.default(SMALL.resolution)


def random_latents(gen, count, seed, spread=0.05):
    """Codes scattered around the canonical latent."""
    rng = np.random.default_rng(seed)
    base = gen.canonical_latent().to(torch.float64).numpy()
    noise = rng.standard_normal((count, *base.shape)) * spread
    return torch.as_tensor(base[None] + noise, dtype=gen.dtype)


def latent_set(gen, yaws_deg, seed=0, spread=0.05):
    ws = random_latents(gen, len(yaws_deg), seed, spread)
    poses = tuple(CameraPose(math.radians(y)) for y in yaws_deg)
    return MultiLatentSet(ws, poses, gen.canonical_latent().clone())


def rendered_frames(gen, w, yaws_deg):
    """Frames rendered from one code, quantization-free."""
    poses = [CameraPose(math.radians(y)) for y in yaws_deg]
    with torch.no_grad():
        out = gen.synthesize_batch(w.expand(len(poses), *w.shape), poses)
    return [PosedFrame(out.image[i].double().numpy().clip(0, 1), p, i) for i, p in enumerate(poses)]


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
