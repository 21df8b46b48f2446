"""Splitting solver: termination, fidelity, physical invariants, sweeps."""
import numpy as np
import pytest

from otvec import (
    ChannelGraph,
    GridSpec,
    Problem,
    SolverOptions,
    balanced_problem,
    complete_edges,
    initial_state,
    interpolation_frames,
    reaction_energy,
    scalar_problem,
    solve,
    sweep,
    vector_problem,
)


def _gaussian_1d(n, center, width=0.07):
    x = (np.arange(n) + 0.5) / n
    return np.exp(-((x - center) / width) ** 2)


def _pair_1d(n=16, c0=0.3, c1=0.55):
    r0 = _gaussian_1d(n, c0)
    r1 = _gaussian_1d(n, c1)
    r1 *= r0.sum() / r1.sum()
    return r0, r1


# -- validation ---------------------------------------------------------------

@pytest.mark.parametrize("kwargs,message", [
    (dict(step=0.0), "step must be positive"),
    (dict(relaxation=2.0), "relaxation must lie in"),
    (dict(relaxation=-0.1), "relaxation must lie in"),
    (dict(max_iters=0), "max_iters must be >= 1"),
    (dict(energy_rtol=-1e-5), "tolerances must be nonnegative"),
    (dict(projection="lu"), "projection must be 'spectral' or 'cg'"),
])
def test_options_validation(kwargs, message):
    with pytest.raises(ValueError, match=message):
        SolverOptions(**kwargs).validate()


def test_problem_needs_two_slabs():
    rho = np.ones((1, 2, 2))
    with pytest.raises(ValueError, match="nt >= 2"):
        balanced_problem(rho, rho, ChannelGraph(1, []), nt=1)


def test_balanced_problem_rejects_unequal_totals():
    rho = np.ones((1, 2, 2))
    with pytest.raises(ValueError, match="augment the problem first"):
        balanced_problem(rho, 2.0 * rho, ChannelGraph(1, []), nt=4)


def test_complete_edges():
    assert complete_edges(3) == [(0, 1), (0, 2), (1, 2)]
    assert complete_edges(1) == []


# -- initial state ------------------------------------------------------------

def test_initial_state_identity_is_constant():
    rho = 0.5 + np.random.default_rng(50).random((1, 3, 3))
    problem = balanced_problem(rho, rho.copy(), ChannelGraph(1, []), nt=4)
    s = initial_state(problem)
    for k in range(5):
        np.testing.assert_allclose(s.rho[k], rho, atol=1e-12)
    assert np.abs(s.face().px).max() <= 1e-12
    assert s.u.shape == (4, 0, 3, 3)    # no edges, no flux variables


def test_initial_state_is_feasible_with_constant_mass():
    rng = np.random.default_rng(51)
    r0 = 0.2 + rng.random((2, 4, 4))
    r1 = 0.2 + rng.random((2, 4, 4))
    r1 *= r0.sum() / r1.sum()
    problem = balanced_problem(r0, r1, ChannelGraph(2, [(0, 1)]), nt=5)
    s = initial_state(problem)
    assert problem.system().residual_norm(s) <= 1e-8
    node_mass = s.rho.sum(axis=(1, 2, 3))
    np.testing.assert_allclose(node_mass, r0.sum(), rtol=1e-9)


# -- solve: basics ------------------------------------------------------------

def test_identity_problem_is_free():
    rho = _gaussian_1d(12, 0.4)
    sol = solve(scalar_problem(rho, rho.copy(), nt=4))
    assert sol.converged
    assert sol.energy.total <= 1e-6 * rho.sum()
    assert np.abs(sol.state.face().px).max() <= 1e-4
    assert np.abs(sol.state.u).max() <= 1e-4
    # endpoints of the returned state are the extended endpoints, bit for bit
    np.testing.assert_array_equal(sol.state.rho[0], sol.problem.rho0_ext)
    np.testing.assert_array_equal(sol.state.rho[-1], sol.problem.rho1_ext)


def test_returned_state_is_feasible_even_at_the_iteration_cap():
    r0, r1 = _pair_1d()
    opts = SolverOptions(max_iters=5)
    sol = solve(scalar_problem(r0, r1, nt=4, options=opts))
    assert not sol.converged and sol.n_iter == 5
    assert len(sol.history_energy) == 5
    assert sol.history_parts.shape == (5, 3)
    assert sol.problem.system().residual_norm(sol.state) <= 1e-7
    masses = sol.channel_masses()
    assert np.ptp(masses) <= 1e-8 * masses[0]


def test_solve_is_deterministic():
    r0, r1 = _pair_1d(12)
    a = solve(scalar_problem(r0, r1, nt=4, gamma=10.0))
    b = solve(scalar_problem(r0, r1, nt=4, gamma=10.0))
    assert a.energy.total == b.energy.total
    assert np.array_equal(a.state.rho, b.state.rho)
    assert np.array_equal(a.state.px, b.state.px)
    assert np.array_equal(a.state.u, b.state.u)
    assert a.n_iter == b.n_iter


def test_single_cell_growth_matches_reaction_cost():
    sol = solve(scalar_problem(np.array([1.0]), np.array([2.0]), nt=8))
    assert sol.converged
    exact = reaction_energy(1.0, 2.0, 1.0)
    assert sol.energy.total == pytest.approx(exact, rel=0.05)
    # created mass balances the endpoint deficit exactly
    created = sol.source.sum() * sol.problem.g.ht
    assert created == pytest.approx(1.0, abs=1e-9)


# -- solve: physical invariants ------------------------------------------------

def test_time_reversal_symmetry():
    r0, r1 = _pair_1d()
    fwd = solve(scalar_problem(r0, r1, nt=8, gamma=1e3))
    bwd = solve(scalar_problem(r1, r0, nt=8, gamma=1e3))
    assert fwd.converged and bwd.converged
    scale = max(abs(fwd.energy.total), 1e-10)
    tol = 2.0 * fwd.problem.options.energy_rtol
    assert abs(fwd.energy.total - bwd.energy.total) <= tol * scale


def test_whole_cell_translation_equivariance():
    r0, r1 = _pair_1d(16, c0=0.25, c1=0.45)
    base = solve(scalar_problem(r0, r1, nt=8, gamma=1e3))
    shifted = solve(scalar_problem(np.roll(r0, 3), np.roll(r1, 3), nt=8,
                                   gamma=1e3))
    scale = max(abs(base.energy.total), 1e-10)
    assert abs(base.energy.total - shifted.energy.total) <= 1e-3 * scale
    # the interpolation translates along with the data
    mid_a = interpolation_frames(base)[4, 0, 0]
    mid_b = interpolation_frames(shifted)[4, 0, 0]
    assert np.abs(np.roll(mid_a, 3) - mid_b).max() <= 1e-2 * mid_a.max()


def test_midpoint_frame_centroid():
    n = 16
    r0, r1 = _pair_1d(n)
    sol = solve(scalar_problem(r0, r1, nt=8, gamma=1e3))
    frames = interpolation_frames(sol)
    x = (np.arange(n) + 0.5) / n
    mid = frames[4, 0, 0]
    centroid = (mid * x).sum() / mid.sum()
    c0 = (r0 * x).sum() / r0.sum()
    c1 = (r1 * x).sum() / r1.sum()
    assert abs(centroid - 0.5 * (c0 + c1)) <= 1.0 / n


def test_decoupled_channels_solve_independently():
    # no edges at all: the joint run must reproduce two scalar runs exactly
    # (fixed iteration count so all three runs do identical work)
    rng = np.random.default_rng(52)
    r0 = 0.2 + rng.random((2, 1, 8))
    r1 = 0.2 + rng.random((2, 1, 8))
    r1[0] *= r0[0].sum() / r1[0].sum()
    r1[1] *= r0[1].sum() / r1[1].sum()
    opts = SolverOptions(max_iters=60, energy_rtol=0.0, residual_tol=0.0)
    graph = ChannelGraph(2, [], require_connected=False)
    joint = solve(balanced_problem(r0, r1, graph, nt=4, options=opts))
    for c in range(2):
        single = solve(balanced_problem(r0[c:c + 1], r1[c:c + 1],
                                        ChannelGraph(1, []), nt=4,
                                        options=opts))
        a = joint.energy.spatial_by_channel[c]
        b = single.energy.spatial_by_channel[0]
        assert abs(a - b) <= 1e-8 * max(1.0, abs(a))


# -- frames --------------------------------------------------------------------

def test_frames_clip_tiny_negatives_and_flag_real_ones():
    r0, r1 = _pair_1d(8)
    sol = solve(scalar_problem(r0, r1, nt=4))
    assert sol.converged
    scale = float(np.abs(sol.state.rho).max())
    sol.state.rho[2, 0, 0, 3] = -1e-9 * scale
    frames = interpolation_frames(sol)
    assert frames.min() >= 0.0
    assert frames[2, 0, 0, 3] == 0.0
    sol.state.rho[2, 0, 0, 3] = -0.1 * scale
    with pytest.raises(ValueError, match="negative values beyond tolerance"):
        interpolation_frames(sol)


# -- sweep ----------------------------------------------------------------------

def test_sweep_singleton_matches_direct_solve():
    r0, r1 = _pair_1d(10)

    def make(gamma):
        return scalar_problem(r0, r1, nt=4, gamma=gamma)

    rows = sweep(make, {"gamma": [3.0]})
    direct = solve(make(3.0))
    assert len(rows) == 1
    assert rows[0]["gamma"] == 3.0
    assert rows[0]["energy"] == direct.energy.total
    assert rows[0]["iterations"] == direct.n_iter
    assert rows[0]["converged"] == direct.converged
    assert rows[0]["corrected_energy"] <= rows[0]["energy"]


def test_sweep_records_failures_and_continues():
    r0, r1 = _pair_1d(8)

    def make(gamma):
        return scalar_problem(r0, r1, nt=4, gamma=gamma)

    rows = sweep(make, {"gamma": [-1.0, 2.0]})
    assert "error" in rows[0] and "positive" in rows[0]["error"]
    assert "energy" not in rows[0]
    assert "error" not in rows[1] and rows[1]["energy"] > 0.0


def test_sweep_rows_follow_grid_order_and_threads_do_not_change_results():
    r0, r1 = _pair_1d(8)

    def make(gamma, nt):
        return scalar_problem(r0, r1, nt=nt, gamma=gamma)

    grid = {"nt": [4, 5], "gamma": [0.5, 2.0]}
    serial = sweep(make, grid, n_jobs=1)
    threaded = sweep(make, grid, n_jobs=2)
    # row order: sorted parameter names, row-major over the grid
    assert [(r["gamma"], r["nt"]) for r in serial] == [
        (0.5, 4), (0.5, 5), (2.0, 4), (2.0, 5)]
    assert [r["energy"] for r in serial] == [r["energy"] for r in threaded]


def test_vector_problem_round_trip_end_to_end():
    rng = np.random.default_rng(53)
    r0 = 0.2 + rng.random((2, 1, 6))
    r1 = 0.2 + rng.random((2, 1, 6))
    problem = vector_problem(r0, r1, nt=4, gamma=5.0, eta=2.0)
    assert problem.graph.n_channels == 3
    assert problem.graph.source_layer == 2
    sol = solve(problem)
    assert sol.problem.system().residual_norm(sol.state) <= 1e-7
    masses = sol.channel_masses()
    assert np.ptp(masses) <= 1e-8 * masses[0]
    assert sol.source.shape == (4, 2, 1, 6)
