"""Independent reference computations used by the tests.

Nothing here calls the package's arc parametrization: circles are rebuilt
from the chord S-D and the inscribed angle, and images are sampled directly.
"""

import math

import numpy as np
from scipy.ndimage import map_coordinates


def arc_points(p, beta, omega, n=20000):
    """Fine samples (points, arc-length weights) on both scanning arcs.

    Each arc is the locus of points P with angle S-P-D = pi - omega; the two
    circles through S and D with that inscribed angle have radius
    |SD| / (2 sin omega). On each circle we keep the side of the chord that
    sees S-D under pi - omega.
    """
    s = np.zeros(2)
    gamma = 2 * beta + math.pi / 2
    d = np.array([p / 2 * math.cos(gamma), -p / 2 + p / 2 * math.sin(gamma)])
    chord = np.linalg.norm(d - s)
    radius = chord / (2 * math.sin(omega))
    mid = (s + d) / 2
    normal = np.array([-(d - s)[1], (d - s)[0]]) / chord
    offset = math.sqrt(max(radius**2 - (chord / 2) ** 2, 0.0))
    pts, wts = [], []
    alpha = (np.arange(n) + 0.5) * 2 * math.pi / n
    for sign in (1.0, -1.0):
        c = mid + sign * offset * normal
        q = c + radius * np.stack([np.cos(alpha), np.sin(alpha)], axis=1)
        v1, v2 = s - q, d - q
        ang = np.arccos(np.clip(np.sum(v1 * v2, 1) / (np.linalg.norm(v1, axis=1) * np.linalg.norm(v2, axis=1)),
                                -1, 1))
        keep = np.abs(ang - (math.pi - omega)) < np.abs(ang - omega)
        pts.append(q[keep])
        wts.append(np.full(keep.sum(), radius * 2 * math.pi / n))
    return np.concatenate(pts), np.concatenate(wts)


def _inside(pts, p):
    return pts[:, 0] ** 2 + (pts[:, 1] + p / 2) ** 2 <= (p / 2) ** 2


def _pixel_coords(pts, h, w, p):
    ps = p / w
    col = (pts[:, 0] + p / 2) / ps - 0.5
    row = -pts[:, 1] / ps - 0.5
    return row, col


def row_nearest(image, p, beta, omega, n=20000):
    """Arc integral of ``image`` with nearest-pixel lookup."""
    h, w = image.shape
    pts, wts = arc_points(p, beta, omega, n)
    m = _inside(pts, p)
    row, col = _pixel_coords(pts[m], h, w, p)
    r = np.clip(np.rint(row).astype(int), 0, h - 1)
    c = np.clip(np.rint(col).astype(int), 0, w - 1)
    return float(np.sum(image[r, c] * wts[m]))


def row_bilinear(image, p, beta, omega, n=20000):
    """Arc integral with bilinear interpolation between pixel centres (edge-clamped)."""
    h, w = image.shape
    pts, wts = arc_points(p, beta, omega, n)
    m = _inside(pts, p)
    row, col = _pixel_coords(pts[m], h, w, p)
    vals = map_coordinates(image, [row, col], order=1, mode="nearest")
    return float(np.sum(vals * wts[m]))


def sinogram(fn, image, betas, omegas, p=1.0, n=20000):
    return np.array([[fn(image, p, b, w, n) for w in omegas] for b in betas])
