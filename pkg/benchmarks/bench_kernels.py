"""Compare the numba and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Numba timings exclude the first (compiling) call.
"""
import argparse
import time

import numpy as np

from quickin import kernels


def _cases(rng):
    riders, stations = 400, 40
    alat = 44.35 + rng.normal(0, 0.02, riders)
    alon = 11.71 + rng.normal(0, 0.02, riders)
    blat = 44.35 + rng.normal(0, 0.02, stations)
    blon = 11.71 + rng.normal(0, 0.02, stations)
    dist = kernels.numpy_backend.distance_matrix_m(alat, alon, blat, blon)
    tx = np.full(stations, -59.0)

    n_lines, pts = 50, 12
    offsets = np.arange(0, (n_lines + 1) * pts, pts, dtype=np.int64)
    lat = 44.35 + rng.normal(0, 0.01, n_lines * pts)
    lon = 11.71 + rng.normal(0, 0.01, n_lines * pts)
    cum = np.concatenate([np.r_[0.0, np.cumsum(rng.uniform(100, 400, pts - 1))] for _ in range(n_lines)])
    s = np.array([rng.uniform(0, cum[offsets[i + 1] - 1]) for i in range(n_lines)])

    present = np.sort(rng.choice(20000, size=12000, replace=False)).astype(np.int64)
    return {
        "distance_matrix_m": lambda b: b.distance_matrix_m(alat, alon, blat, blon),
        "rssi_matrix": lambda b: b.rssi_matrix(dist, tx, 2.0),
        "interpolate_polylines": lambda b: b.interpolate_polylines(offsets, cum, lat, lon, s),
        "window_stats": lambda b: b.window_stats(present, 20000),
    }


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    cases = _cases(np.random.default_rng(args.seed))
    backends = [("numpy", kernels.numpy_backend)]
    if kernels.numba_backend is not None:
        backends.append(("numba", kernels.numba_backend))
    print(f"{'kernel':<24}" + "".join(f"{name:>14}" for name, _ in backends) + f"{'speedup':>10}")
    for name, case in cases.items():
        times = []
        for _, backend in backends:
            case(backend)  # warm-up / compile
            times.append(_time(lambda: case(backend), args.repeat))
        speedup = f"{times[0] / times[1]:.1f}x" if len(times) == 2 else "-"
        print(f"{name:<24}" + "".join(f"{t * 1e6:>12.1f}us" for t in times) + f"{speedup:>10}")


if __name__ == "__main__":
    main()
