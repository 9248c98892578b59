import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vecfl import _kernels

F = _kernels.fallback
C = _kernels.compiled

needs_core = pytest.mark.skipif(C is None, reason="compiled core not built")

coord = st.floats(-50, 50, allow_nan=False)


@st.composite
def objects(draw, max_n=25):
    n = draw(st.integers(0, max_n))
    # a coarse grid makes exact ties (touching discs, boundary distances) likely
    grid = st.integers(-40, 40).map(lambda k: k * 0.5)
    cx = np.array(draw(st.lists(grid, min_size=n, max_size=n)), dtype=np.float64)
    cy = np.array(draw(st.lists(grid, min_size=n, max_size=n)), dtype=np.float64)
    rad = np.array(draw(st.lists(st.sampled_from([0.25, 0.5, 1.0, 2.0]), min_size=n, max_size=n)))
    return cx, cy, rad


@needs_core
@given(objects(), coord, coord, st.floats(0, 2 * np.pi), st.floats(0.1, np.pi), st.booleans(),
       st.floats(1, 80))
def test_wedge_visibility_backends_agree(objs, sx, sy, yaw, half, full, rng):
    cx, cy, rad = objs
    args = (sx, sy, np.cos(yaw), np.sin(yaw), np.cos(half), full, rng * rng, cx, cy, rad)
    assert np.array_equal(np.asarray(C.wedge_visibility(*args)), F.wedge_visibility(*args))


@st.composite
def points(draw, max_n=40):
    grid = st.integers(-20, 20).map(float)
    n = draw(st.integers(0, max_n))
    return (np.array(draw(st.lists(grid, min_size=n, max_size=n)), dtype=np.float64),
            np.array(draw(st.lists(grid, min_size=n, max_size=n)), dtype=np.float64))


@needs_core
@given(points(12), points(), st.lists(st.sampled_from([0.0, 1.0, 9.0, 25.0, 100.0]), min_size=12, max_size=12))
def test_coverage_kernels_backends_agree(sites, errs, r2):
    px, py = sites
    r2 = np.array(r2[: len(px)], dtype=np.float64)
    ex, ey = errs
    a = np.asarray(C.cover_matrix(px, py, r2, ex, ey))
    assert np.array_equal(a, F.cover_matrix(px, py, r2, ex, ey))
    assert np.array_equal(np.asarray(C.count_within(px, py, r2, ex, ey)), F.count_within(px, py, r2, ex, ey))


@needs_core
@given(st.integers(1, 10), st.integers(0, 30), st.integers(0, 2**32), st.floats(0, 8), st.booleans())
def test_greedy_cover_backends_agree(p, m, seed, budget, by_ratio):
    rng = np.random.default_rng(seed)
    cover = (rng.random((p, m)) < 0.3).astype(np.uint8)
    weight = rng.integers(1, 4, m).astype(np.int64)
    cost = rng.choice([0.5, 1.0, 2.0], p)
    group = np.sort(rng.integers(0, max(1, p // 2), p)).astype(np.int64)
    a = np.asarray(C.greedy_cover(cover, weight, cost, group, budget, by_ratio))
    assert np.array_equal(a, F.greedy_cover(cover, weight, cost, group, budget, by_ratio))


def test_backend_is_reported():
    assert _kernels.BACKEND in ("cython", "python")
    if C is not None and os.environ.get("VECFL_PURE_PYTHON") != "1":
        assert _kernels.BACKEND == "cython"


def test_forced_fallback_gives_same_demo_results():
    code = ("from vecfl import _kernels, config; from vecfl.demo import demo_config;"
            "import json, pathlib, importlib.resources as r;"
            "run = config.assemble(demo_config(), pathlib.Path(str(r.files('vecfl').joinpath('data'))));"
            "reg = run.registry();"
            "print(_kernels.BACKEND, len(reg), run.placement('vrcsp', reg).site_ids,"
            " run.placement('density').site_ids)")
    outs = {}
    for flag in ("1", "0"):
        env = dict(os.environ, VECFL_PURE_PYTHON=flag)
        res = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env)
        assert res.returncode == 0, res.stderr
        outs[flag] = res.stdout.split(" ", 1)
    assert outs["1"][0] == "python"
    assert outs["1"][1] == outs["0"][1]
