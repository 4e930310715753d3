import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from straighten import datagen


def blob_sources(n=30, size=16, seed=0):
    """Small smooth random shapes standing in for digits (label = index mod 10)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size] / (size - 1)
    out = []
    for i in range(n):
        img = np.zeros((size, size))
        for _ in range(3):
            cy, cx = rng.uniform(0.25, 0.75, 2)
            r = rng.uniform(0.08, 0.2)
            img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        out.append(datagen.SourceImage(np.clip(img / img.max(), 0, 1), i, i % 10))
    return out


@pytest.fixture(scope="session")
def digit_sources():
    return blob_sources()


@pytest.fixture(scope="session")
def digit_dataset(digit_sources):
    return datagen.generate_dataset(digit_sources, datagen.GenConfig(n_sequences=24, T=6), seed=0)


ROOT = Path(__file__).resolve().parents[1]
DIGIT_IMAGES = ROOT / "data" / "digits-images-idx3-ubyte"
DIGIT_LABELS = ROOT / "data" / "digits-labels-idx1-ubyte"


def ensure_digits():
    """The bundled scikit-learn digits as IDX files, written on first use."""
    if not (DIGIT_IMAGES.exists() and DIGIT_LABELS.exists()):
        subprocess.run([sys.executable, str(ROOT / "scripts" / "make_digits_idx.py"), "--out", str(ROOT / "data")],
                       check=True)
    return DIGIT_IMAGES, DIGIT_LABELS


@pytest.fixture(scope="session")
def real_digits():
    return datagen.load_idx(*ensure_digits())


# criterion -> (passed, [(check, ok, detail)]), filled by test_acceptance
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, rows = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}")
        for name, good, detail in rows:
            terminalreporter.write_line(f"    [{'ok' if good else '--'}] {name} {detail}")
