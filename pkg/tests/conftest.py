import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from bmisim import optics, psfmap  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def mono():
    return optics.builtin_prescription("monocentric")


@pytest.fixture(scope="session")
def dgauss():
    return optics.builtin_prescription("double_gauss")


def random_tensor(seed=0, depths=(1.0, 1.1, 1.2), thetas=psfmap.DEFAULT_THETAS, n=128):
    """Unit-sum random PSFs whose energy stays clear of the grid border."""
    rng = np.random.default_rng(seed)
    s = np.zeros((3, len(thetas), len(depths), n, n))
    s[..., 20:n - 20, 20:n - 20] = rng.random((3, len(thetas), len(depths), n - 40, n - 40)) ** 4
    s /= s.sum(axis=(-2, -1), keepdims=True)
    return psfmap.PsfTensor(s, tuple(thetas), tuple(depths))


@pytest.fixture(scope="session")
def rand_tensor():
    return random_tensor()


@pytest.fixture(scope="session")
def traced_tensor(mono):
    """Full-size traced tensor at coarse pupil sampling (shared by slow tests)."""
    return psfmap.build_psf_tensor(mono, pupil_samples=64 * 64)


@pytest.fixture(scope="session")
def traced_cache_path(traced_tensor, tmp_path_factory):
    path = tmp_path_factory.mktemp("cache") / "psfmap.bin"
    psfmap.build_psf_map_cache(traced_tensor, psfmap.SensorGeometry(), path)
    return path


@pytest.fixture(scope="session")
def traced_cache(traced_cache_path):
    return psfmap.PsfCache.open(traced_cache_path)


def gaussian_kernel(sigma, n=15):
    x = np.arange(n) - n // 2
    g = np.exp(-(x[:, None] ** 2 + x[None] ** 2) / (2 * sigma**2))
    return g / g.sum()


def defocus_provider(config, focus=2.0, n=15):
    """Gaussian per layer whose width grows with dioptric distance from focus."""
    from bmisim.formation import UniformPsf

    sig = 0.4 + 4.0 * np.abs(1 / config.depths - 1 / focus)
    per_layer = np.stack([gaussian_kernel(s, n) for s in sig])
    return UniformPsf(np.stack([per_layer] * 3))


def boundary_scene(seed, H=96, W=128):
    """Smoothly shaded disc at 0.8-1.5 m over a smoothly shaded 3-8 m background."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:H, :W]

    def shade():
        base = rng.uniform(0.2, 0.8, 3)
        grad = rng.uniform(-0.1, 0.1, (2, 3))
        return base + (yy[..., None] * grad[0] + xx[..., None] * grad[1]) / max(H, W)

    fg, bg = shade(), shade()
    cy, cx = rng.uniform(0.35, 0.65) * H, rng.uniform(0.35, 0.65) * W
    r = rng.uniform(0.15, 0.3) * H
    inside = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
    rgb = np.where(inside[..., None], fg, bg)
    depth = np.where(inside, rng.uniform(0.8, 1.5), rng.uniform(3.0, 8.0))
    return rgb, depth


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; printed now and again in the terminal summary."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(number, title, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:2d}  {title}" + (f"  [{detail}]" if detail else "")
        print(line)
        lines.append((number, line))
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
