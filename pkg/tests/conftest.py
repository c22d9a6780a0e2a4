import os

import numpy as np
import pytest
import torch

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))


STEPS = (1e-6, 1e-7, 1e-8)


def _smooth_difference(f, steps, tol):
    """Central difference of the scalar map ``f(t)`` at t = 0.

    PReLU kinks and the cusp of ``|z|**p`` at z = 0 make the losses only piecewise smooth.
    A central difference that straddles such a point is off by about half the slope jump
    no matter how small the step, so the step ladder is walked until the two one-sided
    differences agree to ``tol`` (no kink inside [-h, h]); the smallest step is the fallback.
    """
    f0 = f(0.0)
    for h in steps:
        plus, minus = f(h), f(-h)
        fwd, bwd = (plus - f0) / h, (f0 - minus) / h
        if abs(fwd - bwd) <= tol * max(abs(fwd), abs(bwd), 1e-12):
            break
    return (plus - minus) / (2 * h)


def directional_fd_error(fn, tensors, n_dirs: int = 3, steps=STEPS, seed: int = 0, tol: float = 1e-5) -> float:
    """Worst relative error between autograd and a central difference along random directions.

    ``fn`` maps the (float64, requires_grad) ``tensors`` to a scalar.
    """
    gen = torch.Generator().manual_seed(seed)
    out = fn(*tensors)
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [torch.randn(t.shape, generator=gen, dtype=t.dtype) for t in tensors]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs) if g is not None)

        def along(h):
            with torch.no_grad():
                return float(fn(*[t + h * d for t, d in zip(tensors, dirs)]))

        numeric = _smooth_difference(along, steps, tol)
        worst = max(worst, abs(analytic - numeric) / max(abs(numeric), abs(analytic), 1e-12))
    return worst


def param_fd_error(module: torch.nn.Module, loss_fn, n_dirs: int = 3, steps=STEPS, seed: int = 0,
                   tol: float = 1e-5) -> float:
    """Same check over all parameters of ``module`` (perturbed in place along random directions)."""
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad()
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs) if g is not None)
        originals = [p.detach().clone() for p in params]

        def along(h):
            with torch.no_grad():
                for p, p0, d in zip(params, originals, dirs):
                    p.copy_(p0 + h * d)
                value = float(loss_fn())
                for p, p0 in zip(params, originals):
                    p.copy_(p0)
            return value

        numeric = _smooth_difference(along, steps, tol)
        worst = max(worst, abs(analytic - numeric) / max(abs(numeric), abs(analytic), 1e-12))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def speech_pair():
    """A 1.5 s synthetic speech signal and a noisy copy (16 kHz, float64)."""
    from spatial_dccrn.simulation import synth_noise, synth_speech

    r = np.random.default_rng(7)
    clean = synth_speech(1.5, 16000, r)
    noise = synth_noise("white", 1.5, 16000, r)
    return clean, clean + 0.5 * noise


ACCEPTANCE: list[str] = []


def record_acceptance(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE.append(f"[criterion {criterion}] {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
