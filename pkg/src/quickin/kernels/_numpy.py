"""Pure-numpy kernels. Reference path and fallback when numba is disabled."""
import numpy as np

EARTH_RADIUS_KM = 6371.0


def haversine_km(lat1, lon1, lat2, lon2):
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2) - np.radians(lon1)
    h = np.sin(dphi / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2.0) ** 2
    h = np.minimum(h, 1.0)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(h))


def distance_matrix_m(alat, alon, blat, blon):
    return 1000.0 * haversine_km(
        alat[:, None], alon[:, None], blat[None, :], blon[None, :]
    )


def rssi_matrix(dist_m, tx_power_dbm, exponent):
    d = np.maximum(dist_m, 0.1)
    return tx_power_dbm[None, :] - 10.0 * exponent * np.log10(d)


def interpolate_polylines(offsets, cum, lat, lon, s):
    n = offsets.shape[0] - 1
    out_lat = np.empty(n)
    out_lon = np.empty(n)
    for v in range(n):
        a, b = offsets[v], offsets[v + 1]
        c = cum[a:b]
        out_lat[v] = np.interp(s[v], c, lat[a:b])
        out_lon[v] = np.interp(s[v], c, lon[a:b])
    return out_lat, out_lon


def window_stats(present_idx, n_total):
    """Count of present windows and the longest run of absent ones in [0, n_total)."""
    if present_idx.shape[0] == 0:
        return 0, int(n_total)
    edges = np.concatenate(([-1], present_idx, [n_total]))
    gaps = np.diff(edges) - 1
    return int(present_idx.shape[0]), int(gaps.max())
