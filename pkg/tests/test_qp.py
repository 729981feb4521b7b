import numpy as np
import pytest

from flexloop.qp import (
    STATUS_INFEASIBLE,
    STATUS_MAX_ITER,
    STATUS_OPTIMAL,
    QpProblem,
    kkt_residuals,
    solve_qp,
)

from oracles import enumerate_qp


def test_unconstrained_projection_is_negated_gradient():
    sol = solve_qp(QpProblem(g=np.array([1.0, -2.0])))
    assert sol.status == STATUS_OPTIMAL
    np.testing.assert_allclose(sol.w, [-1.0, 2.0], atol=1e-12)
    assert sol.stationarity < 1e-12
    assert sol.active_set == ()


def test_one_dimensional_box_active():
    # g = -3, u = 0, alpha = 1, device box forces alpha*w <= 1
    p = QpProblem(g=np.array([-3.0]), alpha=1.0, ub_box=np.array([1.0]))
    sol = solve_qp(p)
    assert sol.status == STATUS_OPTIMAL
    assert sol.w[0] == pytest.approx(1.0, abs=1e-10)
    # row ids: no eq, no ineq -> box[0]:hi is id 1
    assert sol.active_set == (1,)
    assert sol.multipliers.box_hi[0] == pytest.approx(4.0, abs=1e-8)


def _random_problem(rng, n, with_eq=True, soft=False):
    g = rng.uniform(-2, 2, n)
    w_feas = rng.uniform(-1, 1, n)
    a_eq = b_eq = eq_soft = None
    alpha = float(rng.uniform(0.2, 1.5))
    if with_eq:
        m = int(rng.integers(1, 3))
        a_eq = rng.uniform(-1, 1, (m, n))
        b_eq = alpha * (a_eq @ w_feas)
        eq_soft = np.full(m, soft)
    # box on a subset of coordinates, centered to keep w_feas feasible
    lb_box = np.full(n, -np.inf)
    ub_box = np.full(n, np.inf)
    for j in rng.choice(n, size=min(n, 3), replace=False):
        lb_box[j] = alpha * w_feas[j] - rng.uniform(0.1, 1.5)
        ub_box[j] = alpha * w_feas[j] + rng.uniform(0.1, 1.5)
    # up to two two-sided rows around the feasible point
    k = int(rng.integers(0, 3))
    a_in = lb_in = ub_in = None
    if k:
        a_in = rng.uniform(-1, 1, (k, n))
        mid = alpha * (a_in @ w_feas)
        lb_in = mid - rng.uniform(0.05, 1.0, k)
        ub_in = mid + rng.uniform(0.05, 1.0, k)
    return QpProblem(
        g=g, alpha=alpha, a_eq=a_eq, b_eq=b_eq, eq_soft=eq_soft,
        a_in=a_in, lb_in=lb_in, ub_in=ub_in, lb_box=lb_box, ub_box=ub_box,
    )


def test_random_problems_match_enumeration_oracle():
    rng = np.random.default_rng(42)
    for trial in range(60):
        n = int(rng.integers(2, 7))
        p = _random_problem(rng, n, with_eq=trial % 2 == 0)
        sol = solve_qp(p)
        assert sol.status == STATUS_OPTIMAL, f"trial {trial}"
        oracle = enumerate_qp(p)
        assert oracle is not None
        np.testing.assert_allclose(sol.w, oracle[0], atol=1e-7)
        assert max(sol.stationarity, sol.primal, sol.complementarity) < 1e-8


def test_objective_never_above_oracle():
    rng = np.random.default_rng(17)
    for trial in range(20):
        n = int(rng.integers(2, 7))
        p = _random_problem(rng, n)
        sol = solve_qp(p)
        oracle = enumerate_qp(p)
        obj = float(np.dot(sol.w + p.g, sol.w + p.g))
        assert obj <= oracle[1] + 1e-9


def test_kkt_residuals_zero_at_unconstrained_optimum():
    p = QpProblem(g=np.array([1.0, -2.0]))
    sol = solve_qp(p)
    stat, primal, comp = kkt_residuals(p, sol.w, sol.multipliers)
    assert stat < 1e-12 and primal < 1e-12 and comp < 1e-12


def test_kkt_stationarity_of_perturbed_point():
    p = QpProblem(g=np.array([1.0, -2.0]))
    sol = solve_qp(p)
    w = sol.w.copy()
    w[0] += 1e-3  # free coordinate; objective gradient is 2(w + g)
    stat, _, _ = kkt_residuals(p, w, sol.multipliers)
    assert stat == pytest.approx(2e-3, rel=1e-6)


def test_kkt_residuals_on_oracle_solution():
    rng = np.random.default_rng(5)
    p = _random_problem(rng, 5)
    sol = solve_qp(p)
    stat, primal, comp = kkt_residuals(p, sol.w, sol.multipliers)
    assert max(stat, primal, comp) < 1e-8


def test_scaling_invariance_of_minimizer():
    rng = np.random.default_rng(9)
    base = _random_problem(rng, 4)
    scaled = QpProblem(
        g=base.g, alpha=base.alpha, a_eq=base.a_eq, b_eq=base.b_eq,
        eq_soft=base.eq_soft, a_in=base.a_in, lb_in=base.lb_in, ub_in=base.ub_in,
        lb_box=base.lb_box, ub_box=base.ub_box, scale=7.5,
    )
    s1 = solve_qp(base)
    s2 = solve_qp(scaled)
    np.testing.assert_allclose(s1.w, s2.w, atol=1e-9)
    # multipliers scale with the objective
    np.testing.assert_allclose(7.5 * s1.multipliers.eq, s2.multipliers.eq, atol=1e-6)
    np.testing.assert_allclose(7.5 * s1.multipliers.box_hi, s2.multipliers.box_hi, atol=1e-6)


def test_determinism():
    rng = np.random.default_rng(3)
    p = _random_problem(rng, 6)
    a = solve_qp(p)
    b = solve_qp(p)
    assert np.array_equal(a.w, b.w)
    assert a.active_set == b.active_set


def test_soft_equality_fallback_reports_slack():
    # box forces alpha*w <= 0.5 but the (soft) equality asks for 2.0
    p = QpProblem(
        g=np.zeros(1),
        alpha=1.0,
        a_eq=np.array([[1.0]]),
        b_eq=np.array([2.0]),
        eq_soft=np.array([True]),
        ub_box=np.array([0.5]),
    )
    sol = solve_qp(p)
    assert sol.status == STATUS_OPTIMAL
    assert sol.softened
    assert sol.w[0] == pytest.approx(0.5, abs=1e-9)  # best effort at the box
    assert sol.eq_slack[0] == pytest.approx(-1.5, abs=1e-8)
    # oracle on the penalized objective agrees
    oracle = enumerate_qp(p, soften=True)
    np.testing.assert_allclose(sol.w, oracle[0], atol=1e-9)


def test_hard_equality_preferred_when_feasible():
    p = QpProblem(
        g=np.array([1.0, 1.0]),
        a_eq=np.array([[1.0, -1.0]]),
        b_eq=np.array([0.4]),
        eq_soft=np.array([True]),
    )
    sol = solve_qp(p)
    assert sol.status == STATUS_OPTIMAL
    assert not sol.softened
    assert abs(sol.eq_slack[0]) < 1e-10


def test_infeasible_names_most_violated_row():
    # two hard box rows that contradict a hard equality
    p = QpProblem(
        g=np.zeros(2),
        a_eq=np.array([[1.0, 1.0]]),
        b_eq=np.array([4.0]),
        eq_soft=np.array([False]),
        ub_box=np.array([1.0, 1.0]),
    )
    sol = solve_qp(p)
    assert sol.status == STATUS_INFEASIBLE
    assert sol.most_violated == 0  # the equality row is the unreachable one
    assert sol.primal > 0.5


def test_infeasible_between_boxes():
    p = QpProblem(
        g=np.zeros(1),
        a_in=np.array([[1.0]]),
        lb_in=np.array([2.0]),
        ub_in=np.array([3.0]),
        ub_box=np.array([1.0]),
    )
    sol = solve_qp(p)
    assert sol.status == STATUS_INFEASIBLE
    assert sol.most_violated is not None


def test_iteration_cap_reports_max_iter():
    rng = np.random.default_rng(11)
    p = _random_problem(rng, 6)
    sol = solve_qp(p, max_iter=1)
    assert sol.status in (STATUS_MAX_ITER, STATUS_OPTIMAL)
    # with a real budget the same problem certifies
    assert solve_qp(p).status == STATUS_OPTIMAL


def test_degenerate_equal_bounds():
    # lb == ub on a box entry pins that coordinate
    p = QpProblem(
        g=np.array([1.0, 1.0]),
        lb_box=np.array([0.25, -np.inf]),
        ub_box=np.array([0.25, np.inf]),
    )
    sol = solve_qp(p)
    assert sol.status == STATUS_OPTIMAL
    assert sol.w[0] == pytest.approx(0.25, abs=1e-10)
    assert sol.w[1] == pytest.approx(-1.0, abs=1e-10)


def test_replay_round_trip_via_json():
    import json

    rng = np.random.default_rng(21)
    p = _random_problem(rng, 5)
    blob = json.dumps(p.to_dict())
    replayed = QpProblem.from_dict(json.loads(blob))
    a = solve_qp(p)
    b = solve_qp(replayed)
    assert np.array_equal(a.w, b.w)
    assert a.active_set == b.active_set


def test_dimension_validation():
    with pytest.raises(ValueError):
        QpProblem(g=np.array([1.0]), a_eq=np.array([[1.0, 2.0]]), b_eq=np.array([0.0]))
    with pytest.raises(ValueError, match="lower bound"):
        QpProblem(g=np.array([1.0]), lb_box=np.array([1.0]), ub_box=np.array([0.0]))
