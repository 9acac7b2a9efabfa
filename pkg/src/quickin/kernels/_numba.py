"""numba-compiled kernels, loop-for-loop equivalents of the numpy path."""
import math

import numpy as np
from numba import njit

EARTH_RADIUS_KM = 6371.0


@njit(cache=True)
def _hav(lat1, lon1, lat2, lon2):
    p1 = math.radians(lat1)
    p2 = math.radians(lat2)
    dphi = p2 - p1
    dlmb = math.radians(lon2) - math.radians(lon1)
    h = math.sin(dphi / 2.0) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlmb / 2.0) ** 2
    if h > 1.0:
        h = 1.0
    return 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(h))


@njit(cache=True)
def _haversine_km_1d(lat1, lon1, lat2, lon2):
    n = lat1.shape[0]
    out = np.empty(n)
    for i in range(n):
        out[i] = _hav(lat1[i], lon1[i], lat2[i], lon2[i])
    return out


def haversine_km(lat1, lon1, lat2, lon2):
    lat1, lon1, lat2, lon2 = np.broadcast_arrays(
        np.asarray(lat1, dtype=np.float64),
        np.asarray(lon1, dtype=np.float64),
        np.asarray(lat2, dtype=np.float64),
        np.asarray(lon2, dtype=np.float64),
    )
    shape = lat1.shape
    out = _haversine_km_1d(
        np.ascontiguousarray(lat1).ravel(),
        np.ascontiguousarray(lon1).ravel(),
        np.ascontiguousarray(lat2).ravel(),
        np.ascontiguousarray(lon2).ravel(),
    )
    return out.reshape(shape)


@njit(cache=True)
def distance_matrix_m(alat, alon, blat, blon):
    n = alat.shape[0]
    m = blat.shape[0]
    out = np.empty((n, m))
    # per-column trig is shared by every row
    bp = np.empty(m)
    bl = np.empty(m)
    bc = np.empty(m)
    for j in range(m):
        bp[j] = math.radians(blat[j])
        bl[j] = math.radians(blon[j])
        bc[j] = math.cos(bp[j])
    for i in range(n):
        ap = math.radians(alat[i])
        al = math.radians(alon[i])
        ac = math.cos(ap)
        for j in range(m):
            sp = math.sin((bp[j] - ap) / 2.0)
            sl = math.sin((bl[j] - al) / 2.0)
            h = sp * sp + ac * bc[j] * sl * sl
            if h > 1.0:
                h = 1.0
            out[i, j] = 2000.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(h))
    return out


@njit(cache=True)
def rssi_matrix(dist_m, tx_power_dbm, exponent):
    n, m = dist_m.shape
    out = np.empty((n, m))
    k = 10.0 * exponent / math.log(10.0)
    for i in range(n):
        for j in range(m):
            d = dist_m[i, j]
            if d < 0.1:
                d = 0.1
            out[i, j] = tx_power_dbm[j] - k * math.log(d)
    return out


@njit(cache=True)
def interpolate_polylines(offsets, cum, lat, lon, s):
    n = offsets.shape[0] - 1
    out_lat = np.empty(n)
    out_lon = np.empty(n)
    for v in range(n):
        a = offsets[v]
        b = offsets[v + 1]
        x = s[v]
        if x <= cum[a]:
            out_lat[v] = lat[a]
            out_lon[v] = lon[a]
            continue
        if x >= cum[b - 1]:
            out_lat[v] = lat[b - 1]
            out_lon[v] = lon[b - 1]
            continue
        k = a
        while cum[k + 1] < x:
            k += 1
        seg = cum[k + 1] - cum[k]
        t = 0.0 if seg == 0.0 else (x - cum[k]) / seg
        out_lat[v] = lat[k] + t * (lat[k + 1] - lat[k])
        out_lon[v] = lon[k] + t * (lon[k + 1] - lon[k])
    return out_lat, out_lon


@njit(cache=True)
def _window_stats(present_idx, n_total):
    count = present_idx.shape[0]
    if count == 0:
        return 0, n_total
    longest = present_idx[0]
    for i in range(1, count):
        g = present_idx[i] - present_idx[i - 1] - 1
        if g > longest:
            longest = g
    tail = n_total - present_idx[count - 1] - 1
    if tail > longest:
        longest = tail
    return count, longest


def window_stats(present_idx, n_total):
    c, g = _window_stats(np.asarray(present_idx, dtype=np.int64), np.int64(n_total))
    return int(c), int(g)
