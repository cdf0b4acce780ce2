from __future__ import annotations

import os
import subprocess
import sys
from array import array

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from skillforge import _pykernels as py
from skillforge import kernels
from skillforge.text import shingles

try:
    from skillforge import _kernels as cy
except ImportError:  # extension not built
    cy = None

needs_ext = pytest.mark.skipif(cy is None, reason="compiled kernels not built")

texts = st.text(alphabet="abc de_f1\n", max_size=60)


def test_fnv1a_reference_vectors():
    # published FNV-1a 64-bit test vectors
    assert py.fingerprint("") == 0xCBF29CE484222325
    assert py.fingerprint("a") == 0xAF63DC4C8601EC8C
    assert py.fingerprint("foobar") == 0x85944171F73967E8


@given(texts)
def test_fingerprint_matches_oracle(s):
    assert kernels.fingerprint(s) == oracles.fnv1a(s)


def test_jaccard_edge_cases():
    e = array("Q")
    assert py.jaccard_sorted(e, e) == 0.0
    a = py.fingerprints(["x", "y"])
    assert py.jaccard_sorted(a, a) == 1.0
    assert py.jaccard_sorted(a, e) == 0.0


def test_embedding_is_unit_or_zero():
    v = py.hashed_embedding(shingles("one two three four"), 256)
    assert abs(py.dot(v, v) - 1.0) < 1e-12
    assert list(py.hashed_embedding([], 8)) == [0.0] * 8


def test_error_overlap_is_clipped():
    f = py.fingerprints(["a b c"])
    w = py.pair_weight(f, f, array("d", [0.0]), array("d", [0.0]), f, f, 0.0, 0.0, 1.0, 1.7)
    assert w == 1.0


@needs_ext
def test_backend_selected():
    assert kernels.BACKEND == cy.BACKEND != py.BACKEND


@needs_ext
@settings(max_examples=200)
@given(st.lists(texts, max_size=8), st.lists(texts, max_size=8), st.floats(0, 1), st.floats(0, 1))
def test_backends_bit_identical(xs, ys, alpha, beta):
    sx = [g for t in xs for g in shingles(t)]
    sy = [g for t in ys for g in shingles(t)]
    assert list(cy.fingerprints(sx)) == list(py.fingerprints(sx))
    fa, fb = py.fingerprints(sx), py.fingerprints(sy)
    assert cy.jaccard_sorted(fa, fb) == py.jaccard_sorted(fa, fb)
    ea, eb = py.hashed_embedding(sx, 64), py.hashed_embedding(sy, 64)
    assert list(cy.hashed_embedding(sx, 64)) == list(ea)
    assert cy.dot(ea, eb) == py.dot(ea, eb)
    gamma = max(0.0, 1.0 - alpha - beta)
    args = (fa, fb, ea, eb, fb, fa, alpha, beta, gamma, 1.7)
    assert cy.pair_weight(*args) == py.pair_weight(*args)
    others = [(fb, eb, fa), (fa, ea, fb)]
    assert cy.weights_against(fa, ea, fb, others, alpha, beta, gamma, 1.7) == \
        py.weights_against(fa, ea, fb, others, alpha, beta, gamma, 1.7)


def test_pure_python_override():
    env = dict(os.environ, SKILLFORGE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from skillforge import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_benchmark_smoke(capsys):
    import importlib.util
    from pathlib import Path

    path = Path(__file__).parents[1] / "benchmarks" / "bench_kernels.py"
    spec = importlib.util.spec_from_file_location("bench_kernels", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    mod.main(["--nodes", "6", "--repeat", "1"])
    assert "weights_against" in capsys.readouterr().out
