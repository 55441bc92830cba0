"""Small analytic phase-field constructions used across the tests."""

import numpy as np

from mskit.energy import PhaseField


def supersampled(grid, indicator, n=4):
    """Cell-average of an indicator(x, y[, z]) via n^d point sampling."""
    vals = np.zeros(grid.shape)
    offs = (np.arange(n) + 0.5) / n
    grids1d = [np.arange(grid.dims[a]) for a in range(grid.d)]
    import itertools
    for shift in itertools.product(offs, repeat=grid.d):
        coords = [
            (grids1d[a].reshape([-1 if b == a else 1 for b in range(grid.d)])
             + shift[a]) * grid.spacing[a]
            for a in range(grid.d)
        ]
        vals = vals + indicator(*[np.broadcast_to(c, grid.shape) for c in coords])
    return vals / len(offs) ** grid.d


def disk_fraction(grid, center, R, n=4):
    def inside(*coords):
        r2 = sum((c - cc) ** 2 for c, cc in zip(coords, center))
        return r2 <= R * R
    return supersampled(grid, inside, n=n)


def binary_disk(grid, center, R):
    return PhaseField(grid, (disk_fraction(grid, center, R) > 0.5).astype(float))


def relaxed_disk(grid, center, R):
    return PhaseField(grid, disk_fraction(grid, center, R))


def stripe(grid, x_cut=0.5):
    X = grid.meshes()[0]
    return PhaseField(grid, (X < x_cut).astype(float))
