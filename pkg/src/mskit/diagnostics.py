"""Potentials, metric slopes, multipliers, and the dissipation ledger.

The transfer potential of a partial step solves the Neumann problem with
source (chi_bar - chi_anchor)/tau; half its Dirichlet energy is the
squared-slope surrogate entering the sharp dissipation bookkeeping.
Lagrange multipliers for the mass constraint come from pairing the
interface first variation with a constructed wall-tangential direction
field, and the relative entropy measures how far the interface measure
is from a unit reference direction field.
"""

from dataclasses import dataclass

import numpy as np

from .fields import (
    MeanZeroField,
    Potential,
    ScalarField,
    VectorField,
    div_adjoint,
    div_mirror,
    grad_centered,
    h1_inner,
    hminus_norm_sq,
    mollify,
    neumann_solve,
    require_same_grid,
)
from .energy import (
    PHASE_MASS_RTOL,
    _c1_seminorm,
    constraint_integral,
    default_tangential_fields,
    energy,
    first_variation,
    interface_measure,
    velocity_pairing_field,
)

NORMALIZER_FLOOR = 1e-6


@dataclass(frozen=True)
class StepRecord:
    """One ledger row. lambda_ carries the mass-constraint multiplier."""

    n: int
    t: float
    E_bulk: float
    E_boundary: float
    E_total: float
    vel_sq: float
    slope_sq: float
    lambda_: float
    gt_residual: float
    relaxation_gap: float
    dissipation_margin: float
    mass: float

    def __post_init__(self):
        if self.E_total < -1e-12:
            raise ValueError("negative total energy in ledger row")
        if self.vel_sq < -1e-12 or self.slope_sq < -1e-12:
            raise ValueError("negative squared norm in ledger row")


@dataclass(frozen=True)
class Ledger:
    records: tuple
    E0: float

    def __post_init__(self):
        ts = [r.t for r in self.records]
        if ts != sorted(ts):
            raise ValueError("ledger records are not time-ordered")
        if self.records and abs(self.E0 - self.records[0].E_total) > 1e-12:
            raise ValueError("E0 does not match the first record")


def potential_w(chi_bar, chi_anchor, tau):
    """Neumann potential of the transfer rate between two equal-mass states."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    require_same_grid(chi_bar, chi_anchor)
    grid = chi_bar.domain
    if abs(chi_bar.integral() - chi_anchor.integral()) > PHASE_MASS_RTOL * grid.volume:
        raise ValueError("non-conservative source: masses differ")
    src = (chi_bar.values - chi_anchor.values) / tau
    src = src - src.mean()
    return neumann_solve(MeanZeroField(grid, src))


def metric_slope_potential(w):
    """Half the Dirichlet energy of the transfer potential."""
    return 0.5 * h1_inner(w, w)


def metric_slope_variational(chi, slc, p, fields):
    """Best descent estimate over a dictionary of admissible directions.

    Each candidate contributes its first variation minus half the squared
    dual norm of the induced interface velocity; fields must already be
    volume preserving for the phase (projected, see the flows module).
    """
    if not fields:
        raise ValueError("empty dictionary of variation fields")
    grid = chi.domain
    best = -np.inf
    for B in fields:
        ci = constraint_integral(chi, B)
        if abs(ci) > 1e-8 * (1.0 + B.max_norm()):
            raise ValueError(
                "dictionary field is not volume preserving: %.3e" % ci
            )
        g = velocity_pairing_field(chi, B)
        g = g - g.mean()
        val = first_variation(slc, B, p) - 0.5 * hminus_norm_sq(
            MeanZeroField(grid, g)
        )
        best = max(best, val)
    return float(best)


def construct_xi(chi, eps):
    """Wall-tangential direction field with a positive volume pairing.

    Gradient of the Neumann potential sourced by the mollified phase;
    even reflection at the walls makes the normal component vanish there
    discretely. The pairing integral chi div(xi) acts as the multiplier
    normalizer and must stay away from zero.
    """
    grid = chi.domain
    if not (0.0 < chi.m0 < grid.volume):
        raise ValueError("phase must occupy a proper subvolume")
    smoothed = mollify(chi.values, grid, eps)
    phi = neumann_solve(MeanZeroField(grid, smoothed - smoothed.mean()))
    xi = VectorField(grid, grad_centered(phi.values, grid), tangential=True)
    if constraint_integral(chi, xi) < NORMALIZER_FLOOR:
        raise ValueError("degenerate multiplier normalizer")
    return xi


def lagrange_multiplier(chi, slc, w, xi, p):
    """Mass-constraint multiplier from the xi-pairing of the first variation."""
    grid = chi.domain
    denom = constraint_integral(chi, xi)
    if denom < NORMALIZER_FLOOR:
        raise ValueError("degenerate multiplier normalizer")
    flux = [w.values * c for c in xi.components]
    div = div_mirror(flux, grid, tangential=xi.tangential)
    wpair = float(np.sum(chi.values * div)) * grid.cell_volume
    return (first_variation(slc, xi, p) - wpair) / denom


def gibbs_thomson_residual(chi, slc, w, lam, p, basis):
    """Worst normalized defect of the curvature-potential relation."""
    grid = chi.domain
    worst = 0.0
    for B in basis:
        if not B.tangential:
            raise ValueError("Gibbs-Thomson basis fields must be tangential")
        flux = [(w.values + lam) * c for c in B.components]
        div = div_mirror(flux, grid, tangential=True)
        pair = float(np.sum(chi.values * div)) * grid.cell_volume
        resid = abs(first_variation(slc, B, p) - pair)
        worst = max(worst, resid / (1.0 + B.max_norm() + _c1_seminorm(B, grid)))
    return worst


def curvature_field(w, lam, c0, slc):
    """Generalized curvature (w + lambda)/c0 on the interface band."""
    dens = slc.density.values
    mask = dens > 0.1 * float(dens.max())
    vals = np.where(mask, (w.values + lam) / c0, 0.0)
    return ScalarField(slc.domain, vals)


def relative_entropy(chi, slc, reference_xi, p):
    """Interface energy against the pairing with a unit direction field.

    The pairing uses the same mollified phase the slice was built from,
    integrated against the flux-free adjoint divergence; cell by cell the
    sum then dominates both zero and the tilt excess whenever the
    reference field has length at most one, which is enforced here.
    """
    grid = chi.domain
    require_same_grid(chi, slc.density)
    if reference_xi.max_norm() > 1.0 + 1e-12:
        raise ValueError("reference direction field exceeds unit length")
    smoothed = mollify(chi.values, grid, slc.epsilon)
    div = div_adjoint(list(reference_xi.components), grid)
    pairing = float(np.sum(smoothed * div)) * grid.cell_volume
    return slc.slice_energy(p).total + p.c0 * pairing


def tilt_excess(slc, reference_xi, p):
    """Quadratic misalignment of slice normals against the reference field."""
    n = slc.normal.components
    sq = sum(
        (n[a] - reference_xi.components[a]) ** 2 for a in range(slc.domain.d)
    )
    return 0.5 * p.c0 * float(np.sum(sq * slc.density.values)) * slc.domain.cell_volume


def reference_normal_field(slc):
    """Mollified slice normals: a unit-capped matched reference direction."""
    grid = slc.domain
    comps = [mollify(c, grid, slc.epsilon) for c in slc.normal.components]
    return VectorField(grid, comps, tangential=True)


def _slope_from_samples(chi_anchor, samples, h, vel_sq):
    """Trapezoid average of squared slopes over De Giorgi sample times.

    samples holds (tau, field) pairs strictly inside (0, h); the
    integrand vanishes at tau = 0 and equals vel_sq at tau = h.
    """
    if not samples:
        return vel_sq
    taus = [tau for tau, _field in samples]
    vals = []
    for tau, field in samples:
        w = potential_w(field, chi_anchor, tau)
        vals.append(h1_inner(w, w))
    nodes = [0.0] + taus + [h]
    integrand = [0.0] + vals + [vel_sq]
    integral = 0.0
    for i in range(len(nodes) - 1):
        integral += 0.5 * (integrand[i] + integrand[i + 1]) * (nodes[i + 1] - nodes[i])
    return integral / h


def dissipation_ledger(traj, p, cfg, eps=None, basis=None):
    """Per-step energies, velocities, slopes, multipliers, and margins.

    The margin of row n is the initial energy minus the current energy
    minus the accumulated half-sums of squared velocity and slope, so a
    nonnegative column certifies the sharp dissipation inequality up to
    solver tolerance. Slopes use the full-step transfer potential, or the
    trapezoid rule over the trajectory's De Giorgi snapshots when present.
    """
    states = traj.states()
    grid = states[0].domain
    if eps is None:
        eps = 4.0 * max(grid.spacing)
    if basis is None:
        basis = default_tangential_fields(grid, count=6)

    records = []
    E0 = None
    cum = 0.0
    zero_w = Potential(grid, np.zeros(grid.shape))
    for n, chi in enumerate(states):
        br = energy(chi, p)
        slc = interface_measure(chi, eps)
        xi = construct_xi(chi, eps)
        if n == 0:
            w = zero_w
            vel_sq = 0.0
            slope_sq = 0.0
            gap = 0.0
        else:
            prev = states[n - 1]
            w = potential_w(chi, prev, traj.h)
            vel_sq = h1_inner(w, w)
            samples = [
                (t - (n - 1) * traj.h, field)
                for t, field in traj.interpolant_snapshots
                if (n - 1) * traj.h < t < n * traj.h
            ]
            slope_sq = _slope_from_samples(prev, samples, traj.h, vel_sq)
            gap = traj.steps[n - 1].relaxation_gap
            cum += traj.h * (0.5 * vel_sq + 0.5 * slope_sq)
        lam = lagrange_multiplier(chi, slc, w, xi, p)
        gt = gibbs_thomson_residual(chi, slc, w, lam, p, basis)
        if E0 is None:
            E0 = br.total
        records.append(StepRecord(
            n=n,
            t=n * traj.h,
            E_bulk=br.bulk,
            E_boundary=br.boundary,
            E_total=br.total,
            vel_sq=vel_sq,
            slope_sq=slope_sq,
            lambda_=lam,
            gt_residual=gt,
            relaxation_gap=gap,
            dissipation_margin=E0 - (br.total + cum),
            mass=chi.integral(),
        ))
    return Ledger(records=tuple(records), E0=E0)
