import numpy as np
import pytest
import torch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


@pytest.fixture
def crand(rng):
    return lambda *shape: torch.from_numpy(crandn(rng, *shape))


def dft2c_oracle(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Direct O(N^2) centered orthonormal DFT with centered index offsets."""
    h, w = x.shape
    sign = 1 if inverse else -1
    cy, cx = h // 2, w // 2
    out = np.zeros((h, w), dtype=np.complex128)
    for u in range(h):
        for v in range(w):
            acc = 0j
            for m in range(h):
                for n in range(w):
                    phase = (u - cy) * (m - cy) / h + (v - cx) * (n - cx) / w
                    acc += x[m, n] * np.exp(sign * 2j * np.pi * phase)
            out[u, v] = acc / np.sqrt(h * w)
    return out


def mask_oracle(width: int, acceleration: int, acs: int) -> list[int]:
    """Column enumeration of the documented equispaced rule."""
    start = (width - acs) // 2
    return [j for j in range(width) if start <= j < start + acs or j % acceleration == 0]


# acceptance criteria verdicts, printed once at the end of the session
ACCEPTANCE: dict[int, str] = {}
ACCEPTANCE_NOTES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE and not ACCEPTANCE_NOTES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_NOTES:
        terminalreporter.write_line(line)
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
