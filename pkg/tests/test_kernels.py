import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitfed import kernels

compiled = kernels.compiled_backend
python = kernels.python_backend
needs_ext = pytest.mark.skipif(compiled is None, reason="compiled extension not built")

shapes = st.tuples(st.integers(1, 4), st.integers(1, 3), st.integers(1, 5), st.integers(1, 5))


def test_backend_is_reported():
    assert kernels.BACKEND in ("cython", "python")


def test_env_var_forces_python_fallback():
    code = "import splitfed; print(splitfed.BACKEND)"
    env = dict(os.environ, SPLITFED_BACKEND="python")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@given(shape=shapes, k=st.sampled_from([1, 3]), seed=st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_im2col_col2im_bit_identical(dtype, shape, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape).astype(dtype)
    pad = (k - 1) // 2
    a, b = compiled.im2col(x, k, pad), python.im2col(x, k, pad)
    assert a.dtype == b.dtype and a.tobytes() == b.tobytes()
    cols = rng.standard_normal(a.shape).astype(dtype)
    assert compiled.col2im(cols, shape, k, pad).tobytes() == python.col2im(cols, shape, k, pad).tobytes()


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@given(shape=shapes, seed=st.integers(0, 2**31), ties=st.booleans())
@settings(max_examples=40, deadline=None)
def test_pool_and_upsample_bit_identical(dtype, shape, seed, ties):
    rng = np.random.default_rng(seed)
    c, b, h, w = shape
    x = rng.standard_normal((c, b, 2 * h, 2 * w)).astype(dtype)
    if ties:
        x = np.round(x)
    (o1, i1), (o2, i2) = compiled.maxpool2_forward(x), python.maxpool2_forward(x)
    assert o1.tobytes() == o2.tobytes() and np.array_equal(np.asarray(i1), np.asarray(i2))
    d = rng.standard_normal(o1.shape).astype(dtype)
    assert compiled.maxpool2_backward(d, i1).tobytes() == python.maxpool2_backward(d, i2).tobytes()
    assert compiled.upsample2_forward(x).tobytes() == python.upsample2_forward(x).tobytes()
    assert compiled.upsample2_backward(x).tobytes() == python.upsample2_backward(x).tobytes()


@needs_ext
def test_compiled_accepts_read_only_input():
    x = np.ones((2, 1, 4, 4), np.float32)
    x.flags.writeable = False
    assert compiled.im2col(x, 3, 1).shape == (18, 16)
    assert compiled.maxpool2_forward(x)[0].shape == (2, 1, 2, 2)
