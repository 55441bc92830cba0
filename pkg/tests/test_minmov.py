import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mskit import minmov as mv
from mskit.energy import EnergyParams, PhaseField, energy
from mskit.fields import ScalarField, hminus_norm_sq, make_grid, project_mean_zero
from mskit.minmov import (
    StepConfig,
    de_giorgi_interpolant,
    mass_threshold,
    mm_step,
    movement_penalty,
    run_trajectory,
    solve_relaxed,
)

from shapes import binary_disk, stripe

hyp = settings(max_examples=20, deadline=None, derandomize=True)

P = EnergyParams(c0=1.0, alpha=np.pi / 2)


def grid2(n=32):
    return make_grid(2, (n, n), (1.0, 1.0))


def quick_cfg(grid, **kw):
    kw.setdefault("h", grid.spacing[0] ** 2)
    kw.setdefault("pd_tol", 1e-5)
    return StepConfig(**kw)


def objective(u, anchor, tau, p=P):
    return energy(u, p).total + movement_penalty(u, anchor, tau)


# ---------------------------------------------------------------------------
# configuration validation
# ---------------------------------------------------------------------------

class TestStepConfig:
    def test_defaults_valid(self):
        cfg = StepConfig(h=1e-4)
        assert cfg.threshold_policy == "mass-quantile"
        assert cfg.interpolant_samples == 0

    def test_nonpositive_h(self):
        with pytest.raises(ValueError, match="h must be positive"):
            StepConfig(h=0.0)

    def test_iteration_floor(self):
        with pytest.raises(ValueError, match="at least 100"):
            StepConfig(h=1e-4, pd_max_iters=50)

    def test_tolerance_range(self):
        with pytest.raises(ValueError, match="pd_tol"):
            StepConfig(h=1e-4, pd_tol=1e-2)
        with pytest.raises(ValueError, match="pd_tol"):
            StepConfig(h=1e-4, pd_tol=0.0)

    def test_unknown_policy(self):
        with pytest.raises(ValueError, match="threshold policy"):
            StepConfig(h=1e-4, threshold_policy="otsu")

    def test_negative_samples(self):
        with pytest.raises(ValueError, match="interpolant_samples"):
            StepConfig(h=1e-4, interpolant_samples=-1)


# ---------------------------------------------------------------------------
# box-and-mass projection
# ---------------------------------------------------------------------------

class TestProjection:
    @given(
        st.lists(st.floats(-2.0, 3.0), min_size=4, max_size=24),
        st.floats(0.05, 0.95),
    )
    @hyp
    def test_feasible_and_closest(self, vals, frac):
        v = np.asarray(vals)
        u = mv._project_box_mass(v, frac)
        assert u.min() >= 0.0 and u.max() <= 1.0
        assert abs(float(u.mean()) - frac) <= 1e-9
        # no feasible competitor sits closer to v than the projection
        rng = np.random.default_rng(7)
        for _ in range(4):
            w = mv._project_box_mass(rng.uniform(-1.0, 2.0, v.size), frac)
            assert np.sum((u - v) ** 2) <= np.sum((w - v) ** 2) + 1e-8

    def test_already_feasible_fixed(self):
        v = np.array([0.25, 0.75, 0.5, 0.5])
        u = mv._project_box_mass(v, 0.5)
        assert np.allclose(u, v, atol=1e-9)


# ---------------------------------------------------------------------------
# mass threshold
# ---------------------------------------------------------------------------

class TestMassThreshold:
    def test_decreasing_ramp_gives_left_half(self):
        g = grid2(32)
        X = g.meshes()[0]
        u = PhaseField(g, 1.0 - X, m0=0.5)
        out = mass_threshold(u)
        assert out.binary
        np.testing.assert_array_equal(out.values, (X < 0.5).astype(float))

    def test_binary_input_unchanged(self):
        g = grid2(32)
        chi = binary_disk(g, (0.5, 0.5), 0.3)
        out = mass_threshold(chi)
        np.testing.assert_array_equal(out.values, chi.values)

    def test_constant_rejected(self):
        g = grid2(16)
        u = PhaseField(g, np.full(g.shape, 0.4), m0=0.4)
        with pytest.raises(ValueError, match="no interface"):
            mass_threshold(u)

    def test_mass_match_random(self):
        g = grid2(24)
        rng = np.random.default_rng(11)
        u = PhaseField(g, rng.uniform(0.0, 1.0, g.shape))
        out = mass_threshold(u)
        assert abs(out.values.mean() * g.volume - u.m0) <= g.cell_volume

    def test_tie_break_prefers_low_index(self):
        g = grid2(16)
        vals = np.zeros(g.shape)
        vals[0, 1] = 0.9
        vals[0, 2] = 0.9
        for ij in ((5, 5), (2, 7), (9, 0)):
            vals[ij] = 0.5
        u = PhaseField(g, vals)
        out = mass_threshold(u)
        assert out.values[0, 1] == 1.0 and out.values[0, 2] == 1.0
        assert out.values[2, 7] == 1.0
        assert out.values[5, 5] == 0.0 and out.values[9, 0] == 0.0


# ---------------------------------------------------------------------------
# relaxed inner solve
# ---------------------------------------------------------------------------

class TestSolveRelaxed:
    def test_nonpositive_tau(self):
        g = grid2()
        chi = binary_disk(g, (0.5, 0.5), 0.3)
        with pytest.raises(ValueError, match="tau must be positive"):
            solve_relaxed(chi, 0.0, P, quick_cfg(g))

    def test_output_box_mass_and_info(self):
        g = grid2()
        chi = binary_disk(g, (0.5, 0.5), 0.3)
        cfg = quick_cfg(g)
        u = solve_relaxed(chi, cfg.h, P, cfg)
        assert u.values.min() >= 0.0 and u.values.max() <= 1.0
        assert abs(u.values.mean() * g.volume - chi.m0) <= 1e-10
        assert u.pd_info.converged
        assert u.pd_info.residual <= cfg.pd_tol

    def test_beats_anchor_competitor(self):
        g = grid2()
        chi = binary_disk(g, (0.5, 0.5), 0.3)
        cfg = quick_cfg(g)
        u = solve_relaxed(chi, cfg.h, P, cfg)
        assert objective(u, chi, cfg.h) <= objective(chi, chi, cfg.h) + 1e-8

    def test_small_tau_returns_to_anchor(self):
        g = grid2()
        chi = binary_disk(g, (0.5, 0.5), 0.3)
        cfg = StepConfig(h=1e-3, pd_tol=1e-5)
        diffs = []
        for k in range(0, 6, 2):
            u = solve_relaxed(chi, cfg.h / 2 ** k, P, cfg)
            diffs.append(float(np.linalg.norm(u.values - chi.values)))
        assert diffs[-1] <= diffs[0] + 1e-12
        assert diffs[-1] <= 0.5 * diffs[0] + 1e-6

    def test_disk_stable_at_small_tau(self):
        g = grid2(16)
        chi = binary_disk(g, (0.5, 0.5), 0.3)
        cfg = quick_cfg(g)
        u = solve_relaxed(chi, 4e-6, P, cfg)
        l1 = float(np.sum(np.abs(u.values - chi.values))) * g.cell_volume
        assert l1 <= 3.0 * g.cell_volume


# ---------------------------------------------------------------------------
# the implicit step
# ---------------------------------------------------------------------------

class TestMMStep:
    def test_descent_guarantee(self):
        g = grid2()
        chi = binary_disk(g, (0.5, 0.5), 0.3)
        cfg = quick_cfg(g)
        res = mm_step(chi, P, cfg)
        comp = objective(res.chi_next, chi, cfg.h)
        assert comp <= energy(chi, P).total + 1e-12

    def test_output_binary_mass_conserved(self):
        g = grid2()
        chi = binary_disk(g, (0.5, 0.5), 0.3)
        cfg = quick_cfg(g)
        res = mm_step(chi, P, cfg)
        assert res.chi_next.binary
        assert abs(res.chi_next.m0 - chi.m0) <= g.cell_volume

    def test_stationary_disk_moves_little(self):
        from scipy import ndimage

        g = grid2(48)
        chi = binary_disk(g, (0.5, 0.5), 0.3)
        cfg = quick_cfg(g)
        res = mm_step(chi, P, cfg)
        changed = res.chi_next.values != chi.values
        if changed.any():
            # changed cells must hug the old interface: displacement in
            # cells is the distance to the nearest sign change of chi
            inside = chi.values > 0.5
            edge = inside & ~ndimage.binary_erosion(inside)
            dist = ndimage.distance_transform_edt(~edge)
            assert float(dist[changed].max()) <= 2.0

    def test_gap_not_below_solver_floor(self):
        g = grid2()
        chi = binary_disk(g, (0.5, 0.5), 0.3)
        cfg = quick_cfg(g)
        res = mm_step(chi, P, cfg)
        floor = cfg.pd_tol * (1.0 + abs(res.objective))
        assert res.relaxation_gap >= -floor
        assert res.converged

    def test_interpolant_at_h_matches_step(self):
        g = grid2()
        chi = binary_disk(g, (0.5, 0.5), 0.3)
        cfg = quick_cfg(g)
        res = mm_step(chi, P, cfg)
        snap = de_giorgi_interpolant(chi, cfg.h, P, cfg)
        np.testing.assert_array_equal(snap.values, res.chi_next.values)


# ---------------------------------------------------------------------------
# variational interpolants
# ---------------------------------------------------------------------------

class TestInterpolant:
    def test_tau_bounds(self):
        g = grid2()
        chi = binary_disk(g, (0.5, 0.5), 0.3)
        cfg = quick_cfg(g)
        with pytest.raises(ValueError, match="tau must be positive"):
            de_giorgi_interpolant(chi, 0.0, P, cfg)
        with pytest.raises(ValueError, match="must not exceed"):
            de_giorgi_interpolant(chi, 2 * cfg.h, P, cfg)

    def test_tiny_tau_is_anchor(self):
        g = grid2()
        chi = binary_disk(g, (0.5, 0.5), 0.3)
        cfg = quick_cfg(g)
        snap = de_giorgi_interpolant(chi, 1e-3 * cfg.h, P, cfg)
        np.testing.assert_array_equal(snap.values, chi.values)

    def test_binary_samples_never_raise_energy(self):
        g = grid2()
        chi = binary_disk(g, (0.5, 0.5), 0.3)
        cfg = quick_cfg(g)
        E0 = energy(chi, P).total
        for j in (1, 2, 4, 8):
            snap = de_giorgi_interpolant(chi, cfg.h * j / 8.0, P, cfg)
            assert energy(snap, P).total <= E0 + 1e-12

    def test_binary_sample_sequences_monotone(self):
        g = grid2()
        chi = binary_disk(g, (0.5, 0.5), 0.3)
        cfg = quick_cfg(g)
        E0 = energy(chi, P).total
        dists, values = [], []
        for j in range(1, 9):
            tau = cfg.h * j / 8.0
            snap = de_giorgi_interpolant(chi, tau, P, cfg)
            diff = project_mean_zero(ScalarField(g, snap.values - chi.values))
            d2 = hminus_norm_sq(diff)
            dists.append(np.sqrt(d2))
            values.append(energy(snap, P).total + d2 / (2.0 * tau))
        scale = 1.0 + abs(E0)
        for a, b in zip(dists, dists[1:]):
            assert b >= a - 1e-9 * scale
        for a, b in zip(values, values[1:]):
            assert b <= a + 1e-9 * scale

    def test_relaxed_sample_sequences_monotone(self):
        g = grid2()
        chi = binary_disk(g, (0.5, 0.5), 0.3)
        cfg = quick_cfg(g, relaxed_output=True)
        dists, values = [], []
        for j in range(1, 9):
            tau = cfg.h * j / 8.0
            u = de_giorgi_interpolant(chi, tau, P, cfg)
            diff = project_mean_zero(ScalarField(g, u.values - chi.values))
            d2 = hminus_norm_sq(diff)
            dists.append(np.sqrt(d2))
            values.append(energy(u, P).total + d2 / (2.0 * tau))
        # slack reflects the inner solver tolerance, not an exact identity
        scale = 1e-3 * (1.0 + abs(values[0]))
        for a, b in zip(dists, dists[1:]):
            assert b >= a - scale
        for a, b in zip(values, values[1:]):
            assert b <= a + scale


# ---------------------------------------------------------------------------
# trajectory driver
# ---------------------------------------------------------------------------

class TestTrajectory:
    def test_zero_steps(self):
        g = grid2()
        chi = binary_disk(g, (0.5, 0.5), 0.3)
        traj = run_trajectory(chi, P, quick_cfg(g), 0)
        assert traj.n_steps == 0
        assert traj.states() == [chi]
        assert traj.final_time == 0.0

    def test_negative_steps(self):
        g = grid2()
        chi = binary_disk(g, (0.5, 0.5), 0.3)
        with pytest.raises(ValueError, match="nonnegative"):
            run_trajectory(chi, P, quick_cfg(g), -1)

    def test_energy_nonincreasing_mass_constant(self):
        g = grid2()
        chi = binary_disk(g, (0.5, 0.5), 0.3)
        traj = run_trajectory(chi, P, quick_cfg(g), 6)
        energies = [energy(s, P).total for s in traj.states()]
        for a, b in zip(energies, energies[1:]):
            assert b <= a + 1e-12
        for s in traj.states():
            assert abs(s.values.mean() * g.volume - chi.m0) <= g.cell_volume

    def test_fixed_point_replicates(self):
        g = grid2()
        chi = binary_disk(g, (0.5, 0.5), 0.3)
        traj = run_trajectory(chi, P, quick_cfg(g), 12)
        assert traj.n_steps == 12
        assert not traj.aborted
        tail = traj.states()[-6:]
        for s in tail[1:]:
            np.testing.assert_array_equal(s.values, tail[0].values)

    def test_nonconverged_step_aborts(self):
        g = grid2()
        chi = binary_disk(g, (0.5, 0.5), 0.3)
        cfg = quick_cfg(g, pd_max_iters=100, pd_tol=1e-12)
        traj = run_trajectory(chi, P, cfg, 5)
        assert traj.aborted
        assert traj.n_steps == 1
        assert not traj.steps[0].converged

    def test_snapshot_times(self):
        g = grid2()
        chi = binary_disk(g, (0.5, 0.5), 0.3)
        cfg = quick_cfg(g, interpolant_samples=4)
        traj = run_trajectory(chi, P, cfg, 2)
        times = [t for t, _ in traj.interpolant_snapshots]
        h = cfg.h
        expect = [h / 4, h / 2, 3 * h / 4, h + h / 4, h + h / 2, h + 3 * h / 4]
        assert np.allclose(times, expect)

    def test_single_sample_stores_nothing(self):
        g = grid2()
        chi = binary_disk(g, (0.5, 0.5), 0.3)
        cfg = quick_cfg(g, interpolant_samples=1)
        traj = run_trajectory(chi, P, cfg, 2)
        assert traj.interpolant_snapshots == []

    def test_deterministic_rerun(self):
        g = grid2()
        chi = binary_disk(g, (0.45, 0.55), 0.27)
        cfg = quick_cfg(g, interpolant_samples=2)
        t1 = run_trajectory(chi, P, cfg, 3)
        t2 = run_trajectory(chi, P, cfg, 3)
        for a, b in zip(t1.states(), t2.states()):
            np.testing.assert_array_equal(a.values, b.values)
        for (ta, sa), (tb, sb) in zip(
            t1.interpolant_snapshots, t2.interpolant_snapshots
        ):
            assert ta == tb
            np.testing.assert_array_equal(sa.values, sb.values)


# ---------------------------------------------------------------------------
# movement penalty
# ---------------------------------------------------------------------------

def test_movement_penalty_matches_direct_norm():
    g = grid2()
    a = binary_disk(g, (0.5, 0.5), 0.3)
    b = binary_disk(g, (0.52, 0.5), 0.3)
    diff = project_mean_zero(ScalarField(g, b.values - a.values))
    tau = 1e-4
    assert movement_penalty(b, a, tau) == pytest.approx(
        hminus_norm_sq(diff) / (2 * tau), rel=1e-12
    )


def test_stripe_is_lazy_fixed_point():
    g = grid2(48)
    chi = stripe(g, 0.5)
    cfg = quick_cfg(g)
    res = mm_step(chi, P, cfg)
    np.testing.assert_array_equal(res.chi_next.values, chi.values)
