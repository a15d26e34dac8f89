import numpy as np
import pytest
from hypothesis import given, settings

from dsehs import model, solver, structure
from dsehs.solver import ValueTable

from conftest import small_configs


def grid(f, shape=(6, 5, 2)):
    b, e, h = np.indices(shape)
    return f(b.astype(float), e.astype(float), h.astype(float))


class TestChecks:
    def test_constant_table_passes_everything(self):
        t = np.full((4, 4, 2), 3.0)
        for d in ("non-decreasing", "non-increasing"):
            assert structure.check_monotone(t, "buffer", d).passed
        for ax in ("buffer", "battery"):
            assert structure.check_increasing_differences(t, ax).passed
        r = structure.check_submodular(t)
        assert r.passed and r.worst_violation == 0.0

    def test_planted_violation_witness(self):
        t = grid(lambda b, e, h: b)
        t[3, 2, 1] -= 2.0
        r = structure.check_monotone(t, "buffer", "non-decreasing")
        assert not r.passed
        assert r.witness == (2, 2, 1) and r.worst_violation == pytest.approx(1.0)

    def test_convex_passes_concave_fails(self):
        assert structure.check_increasing_differences(grid(lambda b, e, h: b ** 2), "buffer").passed
        r = structure.check_increasing_differences(grid(lambda b, e, h: np.sqrt(b)), "buffer")
        assert not r.passed and r.witness[0] == 1

    def test_battery_axis(self):
        assert structure.check_increasing_differences(grid(lambda b, e, h: (4 - e) ** 2), "battery").passed
        assert not structure.check_increasing_differences(grid(lambda b, e, h: -e ** 2), "battery").passed

    def test_separable_is_modular(self):
        assert structure.check_submodular(grid(lambda b, e, h: b ** 2 - 3 * e + h)).passed

    def test_product_is_supermodular(self):
        r = structure.check_submodular(grid(lambda b, e, h: b * e))
        assert not r.passed and r.worst_violation == pytest.approx(1.0)
        assert structure.check_submodular(grid(lambda b, e, h: -b * e)).passed

    def test_short_axis_rejected(self):
        with pytest.raises(ValueError, match="at least 3"):
            structure.check_increasing_differences(np.zeros((2, 4, 1)), "buffer")
        with pytest.raises(ValueError, match="axis"):
            structure.check_monotone(np.zeros((3, 3, 1)), "channel", "non-decreasing")

    def test_tolerance_edge(self):
        t = grid(lambda b, e, h: b)
        t[3, 0, 0] -= 1.0 + 5e-10
        assert structure.check_monotone(t, "buffer", "non-decreasing", tol=1e-9).passed
        t[3, 0, 0] -= 1e-8
        assert not structure.check_monotone(t, "buffer", "non-decreasing", tol=1e-9).passed


class TestKernelChecks:
    def test_table1_dominance(self, table1):
        for ax in ("battery", "buffer"):
            assert structure.check_stochastic_dominance(table1, ax).passed

    def test_deterministic_arrivals(self):
        cfg = model.tiny_config(arrival_pmf=[0.0, 1.0], harvest_pmf=[1.0])
        assert structure.check_stochastic_dominance(cfg, "buffer").passed
        assert structure.check_stochastic_dominance(cfg, "battery").passed

    def test_cost_monotone(self, table1):
        assert structure.check_cost_monotonicity(table1).passed
        assert structure.check_cost_monotonicity(table1.replace(overflow_penalty=0.0)).passed

    def test_auxiliary_cost_flat_in_battery_away_from_boundary(self, table1):
        d = structure.auxiliary_cost_table(table1)
        # only the step into e = e_TX changes the cost
        assert (np.diff(d[:, 1:], axis=1) == 0).all()


class TestDecomposition:
    def test_holds_for_solution(self, tiny):
        sol = solver.pds_value_iteration(tiny, 1e-12)
        assert structure.check_value_decomposition(sol.value, sol.pds, sol.policy, tiny).passed

    def test_always_lose_state(self):
        cfg = model.tiny_config(plr=[1.0, 0.3])
        sol = solver.pds_value_iteration(cfg, 1e-12)
        assert structure.check_value_decomposition(sol.value, sol.pds, sol.policy, cfg).passed

    def test_detects_tampering(self, tiny):
        sol = solver.pds_value_iteration(tiny, 1e-12)
        V = sol.value.values.copy()
        V[1, 1, 1] += 1e-6
        r = structure.check_value_decomposition(ValueTable(V), sol.pds, sol.policy, tiny)
        assert not r.passed and r.witness == (1, 1, 1)


class TestSuite:
    def test_table1_all_pass(self, table1, table1_solution):
        reports = structure.run_full_suite(table1, 1e-6, solution=table1_solution)
        by = {r.name: r for r in reports}
        assert not [r.name for r in reports if not r.passed]
        assert by["pds_increasing_differences_buffer"].caveat == structure.FINITE_BUFFER_CAVEAT
        assert by["value_decomposition"].tolerance == 1e-8
        assert "brute_force_agreement" not in by
        assert by["residual_contraction"].passed

    def test_tiny_with_brute_force(self, tiny):
        reports = structure.run_full_suite(tiny, 1e-10)
        by = {r.name: r for r in reports}
        assert by["brute_force_agreement"].passed
        assert all(r.passed for r in reports)

    def test_noise_breaks_structure(self, table1, table1_solution):
        rng = np.random.default_rng(0)
        W = table1_solution.pds.values + 1e-3 * rng.standard_normal(table1.shape)
        V = table1_solution.value.values + 1e-3 * rng.standard_normal(table1.shape)
        reports = structure.structural_checks(table1, ValueTable(V), ValueTable(W, solver.PDS),
                                              table1_solution.policy)
        assert any(r.hard_failure for r in reports)

    def test_not_converged_raises(self, table1):
        with pytest.raises(solver.NotConverged):
            structure.run_full_suite(table1, tau_max=2)

    def test_report_roundtrip(self, tmp_path, tiny):
        reports = structure.run_full_suite(tiny, 1e-10)
        path = tmp_path / "p.csv"
        structure.write_report(path, reports)
        assert structure.read_report(path) == reports
        assert path.read_text().splitlines()[0] == ",".join(structure.REPORT_COLUMNS)


class TestFiniteInstanceLimits:
    """Small exact instances where the convexity-type properties do not hold.

    Both are confirmed by exhaustive policy search, so they describe the
    model rather than a solver defect.
    """

    def test_submodularity_fails_near_full_buffer(self):
        cfg = model.ModelConfig(
            3, 1, [0.33566446], [[1.0]], [0.02570661, 0.97429339], [0.6732769, 0.3267231],
            overflow_penalty=1.6751730756521854, discount=0.844224783153378)
        sol = solver.pds_value_iteration(cfg, 1e-12)
        Vb, _ = solver.brute_force_optimal(cfg)
        assert sol.value.sup_distance(Vb) < 1e-9
        r = structure.check_submodular(sol.pds)
        assert not r.passed
        assert r.witness == (1, 0, 0) and r.worst_violation == pytest.approx(0.2738, abs=1e-3)

    def test_battery_convexity_fails_with_two_unit_transmissions(self):
        cfg = model.ModelConfig(3, 4, [0.2], [[1.0]], [0.5, 0.5], [0.7, 0.3], tx_energy=2,
                                overflow_penalty=10.0, discount=0.9)
        sol = solver.pds_value_iteration(cfg, 1e-12)
        Vb, _ = solver.brute_force_optimal(cfg)
        assert sol.value.sup_distance(Vb) < 1e-9
        r = structure.check_increasing_differences(sol.pds, "battery")
        assert not r.passed
        assert r.witness == (3, 1, 0) and r.worst_violation == pytest.approx(0.4404, abs=1e-3)


def test_thresholds_descriptive(table1, table1_solution):
    rows = structure.transmit_thresholds(table1_solution.policy, table1)
    assert len(rows) == 25 * 8
    assert all(e is None or e >= 1 for _, _, e in rows)


@settings(max_examples=40, deadline=None)
@given(small_configs())
def test_monotone_value_everywhere(cfg):
    sol = solver.pds_value_iteration(cfg, 1e-11)
    assert structure.check_monotone(sol.value, "buffer", "non-decreasing", 1e-8).passed
    assert structure.check_monotone(sol.value, "battery", "non-increasing", 1e-8).passed
    assert structure.check_cost_monotonicity(cfg).passed
    assert structure.check_stochastic_dominance(cfg, "battery").passed
    assert structure.check_stochastic_dominance(cfg, "buffer").passed
    assert structure.check_value_decomposition(sol.value, sol.pds, sol.policy, cfg).passed
