import numpy as np
import pytest

from cdsrnp import autodiff as ad
from cdsrnp import data
from cdsrnp import model as M


def numeric_grad(fn, x, step=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        gf[i] = (up - down) / (2 * step)
    return g


def rel_err(a, b):
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check_grad(build, arrays, tol=1e-6):
    """``build(*tensors)`` returns a scalar Tensor; compare its gradient to finite differences."""
    tensors = [ad.tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    out.backward()
    for t in tensors:
        def f():
            with ad.no_grad():
                return build(*[ad.tensor(s.data) for s in tensors]).item()
        num = numeric_grad(f, t.data)
        assert rel_err(t.grad, num) < tol, (t.grad, num)


@pytest.fixture(scope="session")
def small_split():
    rows = data.synth_generate(data.SynthConfig(users=120, items_a=30, items_b=30, overlap_frac=0.5,
                                                latent_dim=3, min_len=6, max_len=10, seed=3))
    return data.prepare(rows, seed=3, k_u=0.75, min_user=1, min_item=1)


@pytest.fixture(scope="session")
def small_cfg(small_split):
    return M.ModelConfig(D=8, T=6, n_items_a=small_split.vocab.size("A"),
                         n_items_b=small_split.vocab.size("B"))


@pytest.fixture(scope="session")
def desk_split():
    """The acceptance-scale synthetic world."""
    rows = data.synth_generate(data.SynthConfig(seed=0))
    return data.prepare(rows, seed=0, k_u=0.75)


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line and asserts it."""
    def record(n, ok, detail):
        ACCEPTANCE[n] = (bool(ok), detail)
        assert ok, f"criterion {n}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
