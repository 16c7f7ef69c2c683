import os
import subprocess
import sys

import numpy as np
import pytest

from refedit import _kernels
from refedit._kernels import _fallback

compiled = pytest.importorskip("refedit._kernels._ckernels")


@pytest.fixture(params=[np.float32, np.float64], ids=["f32", "f64"])
def dtype(request):
    return request.param


def tol(dtype):
    return dict(rtol=1e-5, atol=1e-5) if dtype == np.float32 else dict(rtol=1e-11, atol=1e-11)


def rows(dtype, shape=(37, 19), seed=0, scale=3.0):
    return np.ascontiguousarray(np.random.default_rng(seed).standard_normal(shape) * scale, dtype=dtype)


def test_softmax_backends_agree(dtype):
    x, dy = rows(dtype), rows(dtype, seed=1)
    y = compiled.softmax_fwd(x)
    np.testing.assert_allclose(y, _fallback.softmax_fwd(x.copy()), **tol(dtype))
    np.testing.assert_allclose(compiled.softmax_bwd(y, dy), _fallback.softmax_bwd(y, dy), **tol(dtype))


def test_layernorm_backends_agree(dtype):
    x, dy = rows(dtype), rows(dtype, seed=1)
    g, b = rows(dtype, (19,), seed=2), rows(dtype, (19,), seed=3)
    got, want = compiled.layernorm_fwd(x, g, b, 1e-5), _fallback.layernorm_fwd(x, g, b, 1e-5)
    for a, w in zip(got, want):
        np.testing.assert_allclose(a, w, **tol(dtype))
    _, mean, rstd = want
    for a, w in zip(compiled.layernorm_bwd(dy, x, mean, rstd, g), _fallback.layernorm_bwd(dy, x, mean, rstd, g)):
        np.testing.assert_allclose(a, w, **tol(dtype))


def test_gelu_backends_agree(dtype):
    x, dy = rows(dtype, scale=6.0), rows(dtype, seed=1)
    np.testing.assert_allclose(compiled.gelu_fwd(x), _fallback.gelu_fwd(x), **tol(dtype))
    np.testing.assert_allclose(compiled.gelu_bwd(x, dy), _fallback.gelu_bwd(x, dy), **tol(dtype))


def test_gelu_extreme_inputs_stay_finite(dtype):
    x = np.array([[-1e4, -50.0, 0.0, 50.0, 1e4]], dtype=dtype)
    y = compiled.gelu_fwd(x)
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, [[0.0, 0.0, 0.0, 50.0, 1e4]], atol=1e-6)


def test_compiled_backend_selected_by_default():
    assert _kernels.BACKEND == "compiled"


def test_env_var_forces_fallback():
    code = "from refedit import _kernels; print(_kernels.BACKEND)"
    env = dict(os.environ, REFEDIT_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
