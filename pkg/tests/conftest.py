from __future__ import annotations

from typing import Callable

import numpy as np
import pytest
import torch

from stas.config import GeneratorConfig, desk_train_config
from stas.data import generate_dataset

ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = "PASS" if report.outcome == "passed" else report.outcome.upper()
        if report.when == "call" or number not in ACCEPTANCE:
            ACCEPTANCE[number] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, title = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}")


# ---------------------------------------------------------------------------
# finite differences

def central_difference(f: Callable[[], torch.Tensor], x: torch.Tensor, h: float = 1e-6,
                       coords: np.ndarray | None = None) -> np.ndarray:
    """Central-difference derivative of scalar f() w.r.t. entries of x (modified in place)."""
    flat = x.data.view(-1)
    idx = np.arange(flat.numel()) if coords is None else coords
    out = np.zeros(len(idx))
    with torch.no_grad():
        for n, i in enumerate(idx):
            old = flat[i].item()
            flat[i] = old + h
            up = f().item()
            flat[i] = old - h
            down = f().item()
            flat[i] = old
            out[n] = (up - down) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradient_error(f: Callable[[], torch.Tensor], tensors: list[torch.Tensor], h: float = 1e-6,
                   max_coords: int = 60, seed: int = 0) -> float:
    """Worst relative error between autograd and central differences over `tensors`.

    Tensors larger than max_coords are checked on a random subset of entries.
    The small default step (meant for float64) keeps a perturbation from
    straddling a ReLU or bilinear-sampling kink.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        if t.grad is not None:
            t.grad = None
    f().backward()
    worst = 0.0
    for t in tensors:
        n = t.numel()
        coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
        analytic = t.grad.detach().view(-1).numpy()[coords]
        numeric = central_difference(f, t, h, coords)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


# ---------------------------------------------------------------------------
# shared tiny problem

TINY_GENERATOR = dict(height=33, width=33, n_timestamps=40, n_stations=3, scale_ladder=(7, 5, 3))
TINY_TRAIN = dict(latent_size=4, enc_channels=4, msm_channels=2, mtm_channels=2, lstm_hidden=4,
                  epochs=2, eval_every=1, sfm_epochs=1, tfm_epochs=1, batch_size=16,
                  eval_batch_size=16)


def tiny_generator_config(**overrides) -> GeneratorConfig:
    return GeneratorConfig(**{**TINY_GENERATOR, **overrides})


def tiny_train_config(**overrides):
    return desk_train_config(**{**TINY_TRAIN, **overrides})


@pytest.fixture(scope="session")
def tiny_splits():
    return generate_dataset(tiny_generator_config(), seed=3)


@pytest.fixture
def double_precision():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)
