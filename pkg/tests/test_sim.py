import csv

import numpy as np
import pytest

from dsehs import model, sim, solver
from dsehs.solver import Policy

# Evaluation config, optimal policy at theta = 1e-6, p = 0.4, seed 0, 50,000 slots
REFERENCE = dict(avg_backlog=10.59636, avg_battery=5.47672, overflow_prob=0.03448447700204316,
                 overflow_per_slot=0.01384, outage_prob=0.11416, delay=27.363805392004963,
                 throughput=0.38724)


@pytest.mark.parametrize("s, etx, expect", [
    ((3, 1, 0), 1, 1), ((0, 5, 0), 1, 0), ((3, 0, 0), 1, 0), ((3, 1, 0), 2, 0), ((3, 2, 1), 2, 1),
])
def test_greedy_policy(s, etx, expect):
    cfg = model.tiny_config(tx_energy=etx)
    if s[1] > cfg.battery_capacity:
        cfg = cfg.replace(battery_capacity=s[1])
    assert sim.greedy_policy(s, cfg) == expect


def test_no_arrivals_stays_empty(tiny):
    tr = sim.simulate("greedy", tiny.replace(arrival_pmf=[1.0]), 500, 0)
    assert (tr.b == 0).all() and (tr.a == 0).all()
    m = sim.compute_metrics(tr)
    assert m.avg_backlog == 0 and m.overflow_prob == 0 and m.outage_prob == 0 and m.delay == 0


def test_no_harvest_from_empty_battery(tiny):
    tr = sim.simulate("greedy", tiny.replace(harvest_pmf=[1.0]), 300, 1, initial=(0, 0, 0))
    assert (tr.a == 0).all() and (tr.e == 0).all()
    m = sim.compute_metrics(tr)
    assert m.throughput == 0 and m.delay == np.inf
    assert m.outage_prob == pytest.approx(float((tr.b > 0).mean()))


def test_every_arrival_dropped():
    cfg = model.ModelConfig(0, 1, [0.5], [[1.0]], [0.0, 1.0], [1.0])
    m = sim.compute_metrics(sim.simulate("greedy", cfg, 100, 0))
    assert m.overflow_prob == 1.0 and m.overflow_per_slot == 1.0


def test_deterministic(table1):
    a = sim.simulate("greedy", table1, 2000, 7)
    b = sim.simulate("greedy", table1, 2000, 7)
    c = sim.simulate("greedy", table1, 2000, 8)
    for col in ("b", "e", "h", "a", "f", "l", "e_h", "dropped"):
        np.testing.assert_array_equal(getattr(a, col), getattr(b, col))
    assert not np.array_equal(a.b, c.b)


def test_trace_invariants(table1, table1_solution):
    tr = sim.simulate(table1_solution.policy, table1, 20_000, 3)
    assert sim.validate_trace(tr, table1)
    assert (tr.a[(tr.b == 0) | (tr.e < table1.tx_energy)] == 0).all()
    # energy conservation with per-slot clipping at capacity
    e_full = np.append(tr.e, tr.final_state.e)
    clipped = e_full[1:] - (tr.e - tr.a * table1.tx_energy)
    assert e_full[-1] - e_full[0] == clipped.sum() - table1.tx_energy * tr.a.sum()
    assert (clipped <= tr.e_h).all()
    # packet conservation
    assert tr.final_state.b - tr.b[0] == tr.l.sum() - tr.f.sum() - tr.dropped.sum()


def test_validate_catches_tampering(tiny):
    tr = sim.simulate("greedy", tiny, 200, 0)
    tr.b[5] = (tr.b[5] + 1) % 3
    with pytest.raises(sim.SimulationError, match="recursion"):
        sim.validate_trace(tr, tiny)


def test_infeasible_policy_raises(tiny):
    with pytest.raises(sim.SimulationError, match="infeasible"):
        sim.simulate(Policy(np.ones(tiny.shape)), tiny, 100, 0)


def test_callable_policy_matches_greedy(tiny):
    a = sim.simulate("greedy", tiny, 500, 2)
    b = sim.simulate(lambda s: sim.greedy_policy(s, tiny), tiny, 500, 2)
    np.testing.assert_array_equal(a.a, b.a)


def test_initial_channel_is_stationary(table1):
    h0 = [sim.simulate("greedy", table1, 1, s).h[0] for s in range(4000)]
    freq = np.bincount(h0, minlength=8) / 4000
    np.testing.assert_allclose(freq, np.array([1, 2, 2, 2, 2, 2, 2, 1]) / 14, atol=0.02)


def test_matches_stationary_law(tiny):
    sol = solver.pds_value_iteration(tiny, 1e-12)
    law = sim.stationary_law(sol.policy, tiny)
    mean_b = float((law.sum(axis=(1, 2)) * np.arange(3)).sum())
    mean_e = float((law.sum(axis=(0, 2)) * np.arange(3)).sum())
    for seed in range(3):
        tr = sim.simulate(sol.policy, tiny, 200_000, seed)
        assert tr.b.mean() == pytest.approx(mean_b, rel=0.02)
        assert tr.e.mean() == pytest.approx(mean_e, rel=0.02)


def test_reference_metrics(table1, table1_solution):
    m = sim.compute_metrics(sim.simulate(table1_solution.policy, table1, 50_000, 0))
    for k, v in REFERENCE.items():
        assert getattr(m, k) == pytest.approx(v, rel=1e-12)


def test_common_random_numbers(table1):
    rows = sim.paired_run(table1, {"x": "greedy", "y": "greedy"}, 5000, 4)
    assert rows[0].metrics == rows[1].metrics
    rows = sim.paired_run(table1, {"x": "greedy", "y": "greedy"}, 5000, 4, common_random=False)
    assert rows[0].metrics != rows[1].metrics


def test_uniform_loss_optimal_is_greedy():
    cfg = model.table1_config(0.6, plr=[0.8] * 8, allow_nonstrict_plr=True)
    sol = solver.pds_value_iteration(cfg)
    greedy = solver.greedy_table(cfg)
    np.testing.assert_array_equal(sol.policy.actions, greedy.actions)
    rows = sim.paired_run(cfg, {"optimal": sol.policy, "greedy": "greedy"}, 20_000, 0)
    assert rows[0].metrics == rows[1].metrics


def test_light_load_nearly_identical(table1):
    rows = sim.compare_policies(table1, [0.1], horizon=20_000, seeds=(0,))
    by = {r.policy: r.metrics for r in rows}
    assert abs(by["optimal"].avg_backlog - by["greedy"].avg_backlog) < 0.05
    assert by["optimal"].overflow_prob == by["greedy"].overflow_prob == 0.0


def test_compare_policies_order_and_jobs(table1, tmp_path):
    seen = []
    rows = sim.compare_policies(table1, [0.5, 0.2], horizon=2000, seeds=(1, 0), on_point=seen.append)
    assert [(r.p, r.policy, r.seed) for r in rows] == [
        (0.2, "greedy", 0), (0.2, "greedy", 1), (0.2, "optimal", 0), (0.2, "optimal", 1),
        (0.5, "greedy", 0), (0.5, "greedy", 1), (0.5, "optimal", 0), (0.5, "optimal", 1)]
    assert [len(s) for s in seen] == [4, 8]
    par = sim.compare_policies(table1, [0.5, 0.2], horizon=2000, seeds=(1, 0), jobs=2)
    assert par == rows

    path = tmp_path / "m.csv"
    sim.write_metrics(path, rows)
    with open(path) as fh:
        recs = list(csv.DictReader(fh))
    assert len(recs) == 8 and float(recs[0]["p"]) == 0.2


def test_loaded_policy_is_labelled(table1, table1_solution):
    rows = sim.compare_policies(table1, [0.4], horizon=1000, policy=table1_solution.policy)
    assert {r.policy for r in rows} == {"loaded", "greedy"}


def test_trace_csv(tmp_path, tiny):
    tr = sim.simulate("greedy", tiny, 50, 0)
    tr.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == ",".join(sim.TRACE_COLUMNS) and len(lines) == 51
