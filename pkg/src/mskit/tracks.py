"""Cross-step interface-measure bookkeeping and time-integrated energy audits.

A track records one interface slice per step of a trajectory, preferring
the partial-step sample when the run kept any, and carries the slice
energy series. Comparing the time integral of that series across grid
and step refinements is the practical convergence check for a run: if
the integrals agree to a few percent the discrete flow has stopped
moving energy between resolutions.
"""

from dataclasses import dataclass, field

import numpy as np

from .energy import interface_measure

HORIZON_RTOL = 1e-9


@dataclass(frozen=True)
class VarifoldTrack:
    """Interface slices at recorded times with their energy split."""

    times: tuple
    slices: tuple
    bulk: tuple
    boundary: tuple

    def __post_init__(self):
        n = len(self.times)
        if not (len(self.slices) == len(self.bulk) == len(self.boundary) == n):
            raise ValueError("track series lengths disagree")
        if n == 0:
            raise ValueError("track must record at least one time")
        for a, b in zip(self.times, self.times[1:]):
            if not b > a:
                raise ValueError("recorded times must be strictly increasing")
        for series in (self.bulk, self.boundary):
            if not all(np.isfinite(v) for v in series):
                raise ValueError("track energies must be finite")

    @property
    def total(self):
        return tuple(b + w for b, w in zip(self.bulk, self.boundary))

    @property
    def horizon(self):
        return self.times[-1]


def _recorded_states(traj):
    """(time, state) pairs: the start, then one entry per step.

    A step is represented by its last partial-step sample when the run
    stored any for that window, else by the step output at the step end.
    """
    h = traj.h
    out = [(0.0, traj.chi0)]
    snaps = sorted(traj.interpolant_snapshots, key=lambda ts: ts[0])
    for n, step in enumerate(traj.steps, start=1):
        in_window = [
            (t, s) for (t, s) in snaps if (n - 1) * h < t < n * h
        ]
        if in_window:
            out.append(in_window[-1])
        else:
            out.append((n * h, step.chi_next))
    return out


def build_track(traj, epsilon, p):
    """Slice the trajectory into an interface-measure track.

    epsilon is the mollification width in physical units; keeping it
    fixed across resolutions makes the energy series comparable.
    """
    times = []
    slices = []
    bulk = []
    boundary = []
    for t, state in _recorded_states(traj):
        slc = interface_measure(state, epsilon)
        e = slc.slice_energy(p)
        times.append(t)
        slices.append(slc)
        bulk.append(e.bulk)
        boundary.append(e.boundary)
    return VarifoldTrack(
        times=tuple(times),
        slices=tuple(slices),
        bulk=tuple(bulk),
        boundary=tuple(boundary),
    )


@dataclass(frozen=True)
class EnergyAuditReport:
    integrals: tuple
    rel_diffs: tuple
    converged: bool
    contracting: bool


def energy_convergence_audit(tracks, tol=0.05):
    """Compare time-integrated slice energies across refinements.

    Tracks must cover the same horizon; each is integrated on its own
    time grid by the trapezoid rule. Consecutive pairs are compared
    relative to the finer member, and the report flags both closeness
    (all differences within tol) and contraction (differences not
    growing under refinement).
    """
    tracks = tuple(tracks)
    if len(tracks) < 2:
        raise ValueError("need at least two tracks to compare")
    T = tracks[0].horizon
    for tr in tracks[1:]:
        if abs(tr.horizon - T) > HORIZON_RTOL * max(abs(T), 1.0):
            raise ValueError(
                "incompatible time horizons: %.12g vs %.12g"
                % (T, tr.horizon)
            )
    integrals = []
    for tr in tracks:
        if len(tr.times) == 1:
            integrals.append(0.0)
        else:
            integrals.append(
                float(np.trapezoid(np.asarray(tr.total), np.asarray(tr.times)))
            )
    diffs = []
    for a, b in zip(integrals, integrals[1:]):
        scale = max(abs(b), 1e-300)
        diffs.append(abs(a - b) / scale)
    converged = all(d <= tol for d in diffs)
    contracting = all(
        b <= a + HORIZON_RTOL for a, b in zip(diffs, diffs[1:])
    ) if len(diffs) >= 2 else True
    return EnergyAuditReport(
        integrals=tuple(integrals),
        rel_diffs=tuple(diffs),
        converged=converged,
        contracting=contracting,
    )
