import numpy as np
import pytest

from gvifusion.raster import NrgbImage, save_image


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_image(rng, h=6, w=5, low=0.05, invalid=0.0):
    planes = rng.uniform(low, 1.0, (4, h, w))
    mask = rng.random((h, w)) >= invalid
    return NrgbImage(planes, mask)


def write_dataset(root, images, with_mask=True):
    """Lay out images as rgb/, nir/ and mask/ subdirectories."""
    for sub in ("rgb", "nir") + (("mask",) if with_mask else ()):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, im in enumerate(images):
        name = f"im{i:02d}.png"
        save_image(im, root / "rgb" / name, root / "nir" / name,
                   root / "mask" / name if with_mask else None)
    return root


ACCEPTANCE_LINES = {}


def record_acceptance(number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
