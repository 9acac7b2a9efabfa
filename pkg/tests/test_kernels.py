import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quickin import kernels
from quickin.domain import GeoPoint, haversine_distance

numba_only = pytest.mark.skipif(kernels.numba_backend is None, reason="numba disabled")


def _rand_points(rng, n):
    return rng.uniform(-89, 89, n), rng.uniform(-179, 179, n)


def test_backend_flag():
    assert kernels.BACKEND in ("numba", "numpy")


@pytest.mark.parametrize("backend", ["numpy_backend", "numba_backend"])
def test_distance_matrix_matches_scalar(backend):
    impl = getattr(kernels, backend)
    if impl is None:
        pytest.skip("numba disabled")
    rng = np.random.default_rng(1)
    alat, alon = _rand_points(rng, 7)
    blat, blon = _rand_points(rng, 5)
    got = impl.distance_matrix_m(alat, alon, blat, blon)
    for i in range(7):
        for j in range(5):
            want = 1000 * haversine_distance(GeoPoint(alat[i], alon[i]), GeoPoint(blat[j], blon[j]))
            assert got[i, j] == pytest.approx(want, rel=1e-9, abs=1e-6)


@numba_only
def test_backends_agree():
    rng = np.random.default_rng(2)
    nb, npb = kernels.numba_backend, kernels.numpy_backend
    alat, alon = _rand_points(rng, 30)
    blat, blon = _rand_points(rng, 11)
    d1 = nb.distance_matrix_m(alat, alon, blat, blon)
    d2 = npb.distance_matrix_m(alat, alon, blat, blon)
    np.testing.assert_allclose(d1, d2, rtol=1e-9, atol=1e-6)
    tx = rng.uniform(-70, -50, 11)
    d2[0, 0] = 0.0
    np.testing.assert_allclose(nb.rssi_matrix(d2, tx, 2.3), npb.rssi_matrix(d2, tx, 2.3), rtol=1e-12)
    np.testing.assert_allclose(nb.haversine_km(alat, alon, alat[::-1], alon[::-1]),
                               npb.haversine_km(alat, alon, alat[::-1], alon[::-1]), rtol=1e-9, atol=1e-9)


def _polylines(rng, n, k):
    offsets = np.arange(0, (n + 1) * k, k, dtype=np.int64)
    lat = rng.uniform(44, 45, n * k)
    lon = rng.uniform(11, 12, n * k)
    steps = rng.uniform(0, 300, (n, k))
    steps[:, 0] = 0
    steps[0, 2] = 0  # zero-length segment
    cum = np.cumsum(steps, axis=1).ravel()
    return offsets, cum, lat, lon


@numba_only
@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(-100, 2000))
def test_interpolation_agrees(seed, shift):
    rng = np.random.default_rng(seed)
    offsets, cum, lat, lon = _polylines(rng, 4, 5)
    s = np.full(4, shift)
    a = kernels.numba_backend.interpolate_polylines(offsets, cum, lat, lon, s)
    b = kernels.numpy_backend.interpolate_polylines(offsets, cum, lat, lon, s)
    np.testing.assert_allclose(a[0], b[0], rtol=0, atol=1e-12)
    np.testing.assert_allclose(a[1], b[1], rtol=0, atol=1e-12)


def test_interpolation_endpoints():
    offsets = np.array([0, 3])
    cum = np.array([0.0, 100.0, 300.0])
    lat = np.array([44.0, 44.1, 44.3])
    lon = np.array([11.0, 11.0, 11.0])
    got_lat, _ = kernels.interpolate_polylines(offsets, cum, lat, lon, np.array([200.0]))
    assert got_lat[0] == pytest.approx(44.2)
    got_lat, _ = kernels.interpolate_polylines(offsets, cum, lat, lon, np.array([1e9]))
    assert got_lat[0] == 44.3


def _window_oracle(present, n):
    flags = [i in set(present) for i in range(n)]
    run = best = 0
    for f in flags:
        run = 0 if f else run + 1
        best = max(best, run)
    return len(present), best


@given(st.integers(1, 60).flatmap(
    lambda n: st.tuples(st.just(n), st.sets(st.integers(0, n - 1)))))
def test_window_stats_oracle(case):
    n, present = case
    idx = np.array(sorted(present), dtype=np.int64)
    want = _window_oracle(sorted(present), n)
    assert kernels.numpy_backend.window_stats(idx, n) == want
    if kernels.numba_backend is not None:
        assert kernels.numba_backend.window_stats(idx, n) == want


def test_numpy_fallback_by_env():
    out = subprocess.run([sys.executable, "-c", "from quickin import kernels; print(kernels.BACKEND)"],
                         env={"QUICKIN_DISABLE_NUMBA": "1", "PATH": ""}, capture_output=True, text=True)
    assert out.stdout.strip() == "numpy"
