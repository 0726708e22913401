"""Shared fixtures and numeric helpers for the test suite."""

import numpy as np
import pytest
import torch

from satlab.data import ImageBatch, make_toy_dataset
from satlab.models import build_model


def finite_difference_grad(fn, x, eps=1e-5):
    """Central-difference gradient of a scalar function at a double tensor.

    fn receives the perturbed tensor and must return a python float (or a
    0-dim tensor). The probe runs in float64 so the truncation error of the
    central stencil (O(eps^2)) dominates round-off.
    """
    x = x.detach().clone().to(torch.float64)
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(fn(x))
            flat[i] = orig - eps
            lo = float(fn(x))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    np.testing.assert_allclose(
        analytic.detach().cpu().numpy(),
        numeric.detach().cpu().numpy(),
        rtol=rtol,
        atol=atol,
    )


def rand_batch(seed, b=4, shape=(3, 8, 8), classes=2, dtype=torch.float32):
    """Uniform pixels in [-1, 1] with labels cycling through the classes."""
    g = torch.Generator().manual_seed(seed)
    pixels = (torch.rand((b, *shape), generator=g, dtype=dtype) * 2.0) - 1.0
    labels = torch.arange(b, dtype=torch.int64) % classes
    return ImageBatch(pixels, labels)


@pytest.fixture(scope="session")
def blob_dataset():
    return make_toy_dataset("blobs", n_per_class=30, classes=3, seed=7)


@pytest.fixture(scope="session")
def tiny_model():
    return build_model("tiny-cnn", in_shape=(3, 8, 8), num_classes=3, seed=1, width=4)


@pytest.fixture(scope="session")
def linear_2d():
    """Two-pixel linear model used by the closed-form attack oracles."""
    return build_model("linear", in_shape=(1, 1, 2), num_classes=2, seed=3)


ACCEPTANCE_LINES = []


def record_criterion(number, title, passed, detail=""):
    """One pass/fail line per acceptance criterion, echoed in the summary."""
    status = "PASS" if passed else "FAIL"
    line = f"criterion {number:02d} [{status}] {title}"
    if detail:
        line += f" -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
