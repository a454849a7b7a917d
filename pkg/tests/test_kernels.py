import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xmbench import _kernels as K

needs_numba = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba backend not active")


@st.composite
def ranked_rel(draw):
    q = draw(st.integers(1, 5))
    n = draw(st.integers(1, 12))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    rel = (rng.random((q, n)) < draw(st.floats(0.0, 1.0))).astype(np.uint8)
    steps = (rng.random((q, n)) < draw(st.floats(0.1, 1.0))).astype(np.int64)
    steps[:, 0] = 0
    return rel, np.cumsum(steps, axis=1)


@needs_numba
@given(ranked_rel())
def test_ap_backends_agree_exactly(inst):
    rel, _ = inst
    np.testing.assert_array_equal(K.ap_sorted_numba(rel), K.ap_sorted_numpy(rel))


@needs_numba
@given(ranked_rel())
def test_expected_ap_backends_agree(inst):
    rel, gid = inst
    np.testing.assert_allclose(K.expected_ap_sorted_numba(rel, gid), K.expected_ap_sorted_numpy(rel, gid),
                               rtol=0, atol=1e-13, equal_nan=True)


@needs_numba
@given(ranked_rel(), st.booleans())
def test_cmc_backends_agree(inst, expected):
    rel, gid = inst
    s1, c1 = K.cmc_accumulate_numba(rel, gid, expected)
    s2, c2 = K.cmc_accumulate_numpy(rel, gid, expected)
    assert c1 == c2
    np.testing.assert_allclose(s1, s2, atol=1e-12)


@needs_numba
@given(st.integers(1, 6), st.integers(1, 9), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_hamming_backends_agree(q, g, nbytes, seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 256, (q, nbytes), dtype=np.uint8)
    b = rng.integers(0, 256, (g, nbytes), dtype=np.uint8)
    np.testing.assert_array_equal(K.hamming_numba(a, b), K.hamming_numpy(a, b))


def test_expected_ap_singleton_groups_reduce_to_ap():
    rel = np.array([[1, 0, 1, 1, 0, 0, 1]], np.uint8)
    gid = np.arange(7)[None, :]
    np.testing.assert_allclose(K.expected_ap_sorted(rel, gid), K.ap_sorted(rel), rtol=0, atol=1e-15)


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, XMBENCH_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "from xmbench import _kernels as k; print(k.BACKEND, k.HAVE_NUMBA)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "False"]


def test_numpy_backend_computes_same_metrics_end_to_end():
    code = (
        "import numpy as np\n"
        "from xmbench.retrieval import rank_scores, TieOrderingPolicy\n"
        "from xmbench.metrics import batch_ap, batch_cmc\n"
        "rng = np.random.default_rng(0)\n"
        "s = rng.integers(0, 4, (20, 30)).astype(float)\n"
        "rel = (rng.random((20, 30)) < 0.3).astype(np.uint8)\n"
        "b = rank_scores(s, TieOrderingPolicy('expected_ap_analytic'))\n"
        "print(float(np.nansum(batch_ap(b, rel))), float(batch_cmc(b, rel).values.sum()))\n"
    )
    results = []
    for flag in ("1", "0"):
        env = dict(os.environ, XMBENCH_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        results.append([float(v) for v in out.stdout.split()])
    np.testing.assert_allclose(results[0], results[1], rtol=1e-12)


@needs_numba
def test_benchmark_script_runs(tmp_path):
    bench = os.path.join(os.path.dirname(__file__), os.pardir, "benchmarks", "bench_kernels.py")
    out = subprocess.run([sys.executable, bench, "--queries", "20", "--gallery", "50", "--repeat", "1",
                          "--json", str(tmp_path / "t.json")], capture_output=True, text=True, check=True)
    assert "expected_ap_sorted" in out.stdout
    assert (tmp_path / "t.json").is_file()
