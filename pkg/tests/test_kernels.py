import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from workbench import kernels

needs_numba = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")


@pytest.mark.parametrize("shape", [(1, 2, 3), (5, 8, 4), (40, 64, 64)])
def test_affine_backends_agree(shape):
    n, d, h = shape
    rng = np.random.default_rng(0)
    x, W, b, g = rng.random((n, d)), rng.standard_normal((d, h)), rng.standard_normal(h), rng.standard_normal((n, h))
    np.testing.assert_allclose(kernels.affine(x, W, b), kernels.affine_numpy(x, W, b), rtol=1e-12, atol=1e-12)
    for got, ref in zip(kernels.affine_backward(g, x, W), kernels.affine_backward_numpy(g, x, W)):
        np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.floats(0.0, 0.5), st.integers(0, 2**31))
def test_projections_feasible_and_agree(n, d, eps, seed):
    rng = np.random.default_rng(seed)
    x = rng.random((n, d))
    xa = x + rng.normal(0, 1, (n, d))
    for fast, ref, norm in (
        (kernels.project_linf, kernels.project_linf_numpy, lambda v: np.abs(v).max(axis=1)),
        (kernels.project_l2, kernels.project_l2_numpy, lambda v: np.sqrt((v * v).sum(axis=1))),
    ):
        out = fast(xa, x, eps)
        np.testing.assert_allclose(out, ref(xa, x, eps), atol=1e-12)
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert np.all(norm(out - x) <= eps + 1e-9)


def test_sign():
    g = np.array([[-2.0, 0.0, 3.0]])
    assert np.array_equal(kernels.sign(g), [[-1.0, 0.0, 1.0]])


def test_project_rejects_unknown_norm():
    with pytest.raises(ValueError):
        kernels.project(np.zeros((1, 2)), np.zeros((1, 2)), "1", 0.1)


def _run(backend, code):
    env = {**os.environ, "WORKBENCH_BACKEND": backend}
    return subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)


def test_env_var_selects_numpy():
    out = _run("numpy", "from workbench import kernels; print(kernels.BACKEND)")
    assert out.stdout.strip() == "numpy"


def test_env_var_rejects_garbage():
    out = _run("fortran", "import workbench.kernels")
    assert out.returncode != 0 and "WORKBENCH_BACKEND" in out.stderr


@needs_numba
def test_backends_give_same_attack():
    code = (
        "import numpy as np\n"
        "from workbench import data, models\n"
        "from workbench.attacks import ThreatModel, AttackBudget, pgd\n"
        "ds = data.make_dataset('rings2d', 50, 0)\n"
        "m = models.init_classifier((2, 16), 2, seed=0)\n"
        "o = pgd(m, 'ce', ds.x, ds.y, ThreatModel('inf', 0.05), AttackBudget(iterations=5))\n"
        "print(repr(o.best_loss.round(10).tolist()))\n"
    )
    a, b = _run("numba", code), _run("numpy", code)
    assert a.returncode == 0 and b.returncode == 0, a.stderr + b.stderr
    assert a.stdout == b.stdout
