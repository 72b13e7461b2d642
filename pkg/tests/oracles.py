"""Independent reference computations shared by the unit and acceptance tests."""

import math

import numpy as np

from scenevae.dataset import ImageSample
from scenevae.rng import Rng

# per-route image counts of the curated scene dataset
ROUTE_TABLE = {
    "rural": {"Jarrahdale Perth": 33, "Missouri Ozarks": 22, "Southern Illinois": 43,
              "Stockport Buxton": 25, "Utah": 75},
    "suburban": {"Hawaii": 8, "Howth": 17, "Melbourne": 33, "Stockport Buxton": 17, "Wimbledon": 21},
    "urban": {"Indianapolis": 30, "Nashville": 21, "Paris": 24, "St Louis": 52, "Toronto": 33},
}

# total frames and evaluated frames for each driving video
VIDEO_TABLE = {"Dublin": (14677, 11022), "Vancouver": (64672, 51018),
               "Wicklow": (60509, 47688), "Redwood": (45253, 35483)}


def table_manifest():
    samples = []
    for li, (label, routes) in enumerate(ROUTE_TABLE.items()):
        for route, n in routes.items():
            key = f"{label}/{route}"
            samples.extend(ImageSample(id=f"{key}/{i:03d}", label=li, route=key) for i in range(n))
    return samples


def kl_monte_carlo(mu, logvar, n=10**6, seed=0):
    """E_q[log q(z) - log p(z)] from ``n`` antithetic draws of q = N(mu, exp(logvar))."""
    half = Rng(seed, "kl-mc").normal(n // 2)
    eps = np.concatenate([half, -half])
    z = mu + math.exp(logvar / 2) * eps
    log_q = -0.5 * eps ** 2 - 0.5 * logvar
    log_p = -0.5 * z ** 2
    return float((log_q - log_p).mean())


def two_pass_covariance(x):
    """Population covariance by explicit loops: means first, then centered products."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    means = [sum(x[i, j] for i in range(n)) / n for j in range(d)]
    cov = np.zeros((d, d))
    for a in range(d):
        for b in range(d):
            cov[a, b] = sum((x[i, a] - means[a]) * (x[i, b] - means[b]) for i in range(n)) / n
    return cov


def dip_oracle(x, lambda_d, lambda_od):
    cov = two_pass_covariance(x)
    d = cov.shape[0]
    off = sum(cov[a, b] ** 2 for a in range(d) for b in range(d) if a != b)
    diag = sum((cov[a, a] - 1) ** 2 for a in range(d))
    return lambda_od * off + lambda_d * diag


def phog_oracle(gray, bins=60, levels=3):
    """Per-pixel, per-cell PHOG with no vectorized binning or level reuse."""
    gray = np.asarray(gray, dtype=np.float64)
    h, w = gray.shape
    p = np.pad(gray, 1, mode="edge")
    vec = []
    mags = np.zeros((h, w))
    idx = np.zeros((h, w), dtype=int)
    for r in range(h):
        for c in range(w):
            win = p[r:r + 3, c:c + 3]
            gx = (win[:, 2] * [1, 2, 1]).sum() - (win[:, 0] * [1, 2, 1]).sum()
            gy = (win[2] * [1, 2, 1]).sum() - (win[0] * [1, 2, 1]).sum()
            mags[r, c] = math.hypot(gx, gy)
            ang = math.atan2(gy, gx) % (2 * math.pi)
            idx[r, c] = min(bins - 1, int(ang / (2 * math.pi) * bins))
    for level in range(levels):
        cells = 2 ** level
        re = [(i * h) // cells for i in range(cells + 1)]
        ce = [(i * w) // cells for i in range(cells + 1)]
        for i in range(cells):
            for j in range(cells):
                hist = np.zeros(bins)
                for r in range(re[i], re[i + 1]):
                    for c in range(ce[j], ce[j + 1]):
                        hist[idx[r, c]] += mags[r, c]
                vec.append(hist)
    vec = np.concatenate(vec)
    total = vec.sum()
    return vec / total if total > 0 else vec


def step_edge(size=64, column=None, low=0.2, high=0.8):
    """Vertical step: dark left half, bright right half."""
    column = size // 2 if column is None else column
    img = np.full((size, size), low)
    img[:, column:] = high
    return img
