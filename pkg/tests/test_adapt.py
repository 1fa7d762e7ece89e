import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hmtplan.adapt.ahp import DEFAULT_PAIRWISE, ahp_weights, consistent_matrix
from hmtplan.adapt.context import ContextEvent, parse_trace
from hmtplan.adapt.loop import LoopConfig, run_loop
from hmtplan.adapt.pareto import (Candidate, DesignSpace, Evaluator, audit, dominates, evolve_front, exact_front,
                                  nondominated)
from hmtplan.adapt.select import scores, select_online
from hmtplan.cost.estimate import DeploymentPlan, PerformanceEstimate
from hmtplan.cost.profiles import load_fleet
from hmtplan.errors import SchemaError
from hmtplan.ir.zoo import build_zoo_model

# -- AHP ------------------------------------------------------------------------------------


def test_all_ones_gives_equal_weights():
    w = ahp_weights(np.ones((3, 3))).weights
    np.testing.assert_allclose(w, [1 / 3] * 3, atol=1e-12)


def test_two_by_two_closed_form():
    # principal eigenvector of [[1, a], [1/a, 1]] is (a, 1) / (a + 1)
    res = ahp_weights([[1, 3], [1 / 3, 1]])
    np.testing.assert_allclose(res.weights, [0.75, 0.25], atol=1e-12)
    assert res.consistency_ratio == pytest.approx(0.0, abs=1e-12)


def test_consistent_three_by_three_round_trip():
    res = ahp_weights(consistent_matrix([0.6, 0.3, 0.1]))
    np.testing.assert_allclose(res.weights, [0.6, 0.3, 0.1], atol=1e-6)
    assert res.lambda_max == pytest.approx(3.0) and res.consistent


def test_default_pairwise_is_consistent():
    res = ahp_weights(DEFAULT_PAIRWISE)
    assert res.consistent
    np.testing.assert_allclose(res.weights, [0.5, 0.25, 0.125, 0.125], atol=1e-9)


@pytest.mark.parametrize("bad", [
    [[1, 2], [2, 1]],  # not reciprocal
    [[1, -1], [-1, 1]],  # not positive
    [[2, 1], [1, 2]],  # diagonal not 1
    [[1, 2, 3]],  # not square
])
def test_invalid_matrices_rejected(bad):
    with pytest.raises(ValueError):
        ahp_weights(bad)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 10), min_size=2, max_size=8))
def test_consistent_matrices_recover_weights(raw):
    w = np.array(raw) / np.sum(raw)
    res = ahp_weights(consistent_matrix(w))
    np.testing.assert_allclose(res.weights, w, atol=1e-9)
    assert res.consistency_ratio < 1e-9


def test_inconsistent_matrix_flagged():
    m = np.array([[1, 9, 1 / 9], [1 / 9, 1, 9], [9, 1 / 9, 1]])
    assert not ahp_weights(m).consistent


# -- online selection -----------------------------------------------------------------------------


def cand(cid: str, A: float, E: float, T: float = 1.0, M: int = 100, offloaded: bool = False) -> Candidate:
    est = PerformanceEstimate(A, T, E, M, 0, offloaded=offloaded)
    return Candidate(cid, DeploymentPlan(), (), est)


def event(M=1000.0, T=10.0, battery=0.5) -> ContextEvent:
    return ContextEvent(0.0, M, T, battery)


def test_single_candidate_always_chosen():
    c = cand("only", 70.0, 5.0)
    for mu in (0.0, 0.3, 1.0):
        sel = select_online([c], event(battery=mu))
        assert sel.candidate.id == "only" and sel.feasible


def test_full_battery_picks_accuracy():
    front = [cand("acc", 75.0, 9.0), cand("eco", 60.0, 1.0)]
    assert select_online(front, event(battery=1.0)).candidate.id == "acc"
    assert select_online(front, event(battery=0.0)).candidate.id == "eco"


def test_three_candidates_match_brute_force_scoring():
    # hand-set estimates; "fat" busts the memory budget and "slow" the time budget
    front = [cand("c1", 70.0, 10.0, 1.0, 100), cand("c2", 66.0, 4.0, 2.0, 200), cand("c3", 62.0, 2.0, 9.0, 400),
             cand("fat", 72.0, 3.0, 1.0, 900), cand("slow", 71.0, 1.0, 12.0, 50)]
    # battery levels away from the score crossings at 1/3, 1/2 and 3/5
    for mu in (0.0, 0.1, 0.2, 0.3, 0.45, 0.55, 0.7, 0.9, 1.0):
        ev = ContextEvent(0.0, 500.0, 10.0, mu)
        feasible = [c for c in front if c.estimate.T <= 10.0 and c.estimate.M <= 500.0]
        assert [c.id for c in feasible] == ["c1", "c2", "c3"]
        # min-max over the feasible set: A spans 62..70, E spans 2..10
        by_hand = {c.id: mu * (c.estimate.A - 62.0) / 8.0 - (1 - mu) * (c.estimate.E - 2.0) / 8.0 for c in feasible}
        best = max(by_hand.values())
        assert sorted(by_hand.values())[-2] < best - 1e-9  # no ties at these battery levels
        sel = select_online(front, ev, tie_band=0.0)
        assert by_hand[sel.candidate.id] == best
        assert sel.scores == pytest.approx(by_hand)


def test_scores_match_formula():
    ests = [c.estimate for c in (cand("a", 70, 10), cand("b", 65, 4), cand("c", 60, 2))]
    mu = 0.4
    A = np.array([70, 65, 60.0])
    E = np.array([10, 4, 2.0])
    want = mu * (A - 60) / 10 - (1 - mu) * (E - 2) / 8
    np.testing.assert_allclose(scores(ests, mu), want, atol=1e-15)


def test_nothing_feasible_is_flagged():
    front = [cand("big", 70, 5, 1.0, 2000), cand("slow", 70, 5, 30.0, 100)]
    sel = select_online(front, event(M=1000.0, T=10.0))
    assert not sel.feasible
    # worst ratios: big 2.0, slow 3.0
    assert sel.candidate.id == "big"


def test_tie_prefers_on_device_plan():
    front = [cand("remote", 70, 5, offloaded=True), cand("local", 70, 5)]
    assert select_online(front, event()).candidate.id == "local"


def test_unresolved_budget_rejected():
    with pytest.raises(ValueError):
        select_online([cand("a", 1, 1)], ContextEvent(0.0, "50%", 1.0, 0.5))
    with pytest.raises(ValueError):
        select_online([], event())


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(1, 100), st.floats(0.01, 1e6)), min_size=2, max_size=8), st.sampled_from([0.0, 1.0]))
def test_log_and_minmax_agree_at_extreme_battery(points, mu):
    front = [cand(f"c{i}", a, e) for i, (a, e) in enumerate(points)]
    a = select_online(front, event(battery=mu), norm="minmax", tie_band=0.0)
    b = select_online(front, event(battery=mu), norm="log", tie_band=0.0)
    key = (lambda c: c.estimate.A) if mu == 1.0 else (lambda c: -c.estimate.E)
    assert key(a.candidate) == key(b.candidate) == max(key(c) for c in front)


# -- Pareto fronts ----------------------------------------------------------------------------------


def test_dominance_and_filter():
    a, b, c = cand("a", 70, 5), cand("b", 60, 6), cand("c", 80, 9)
    assert dominates(a.estimate, b.estimate) and not dominates(a.estimate, c.estimate)
    assert [x.id for x in nondominated([a, b, c])] == ["c", "a"]
    assert audit([a, b, c]) == [("a", "b")]


def brute_front(cands):
    return {c.id for c in cands if not any(dominates(o.estimate, c.estimate) for o in cands if o is not c)}


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20)), min_size=1, max_size=30))
def test_nondominated_matches_brute_force(points):
    cands = [cand(f"c{i:02d}", float(a), float(e)) for i, (a, e) in enumerate(points)]
    got = nondominated(cands)
    assert {c.id for c in got} == brute_front(cands)
    assert audit(got) == []


@pytest.fixture(scope="module")
def small_space():
    g = build_zoo_model("resnet18")
    fleet = load_fleet("vehicle_drone")
    cfg = {"families": {"channel_prune": [0.5]}, "exits": [2, 3], "placements": ["local", "offload"],
           "quant_bits": [32, 8]}
    return DesignSpace.from_config(g, cfg, fleet), Evaluator(g, fleet)


def test_one_candidate_space():
    g = build_zoo_model("mobilenetv2")
    fleet = load_fleet("single_cpu")
    space = DesignSpace.from_config(g, {}, fleet)
    assert space.size == 1
    ev = Evaluator(g, fleet)
    front = evolve_front(space, ev, 4, 3, 0)
    assert len(front.candidates) == 1
    assert front.ids() == exact_front(space, ev).ids()


def test_linkless_fleet_drops_remote_placements():
    g = build_zoo_model("mobilenetv2")
    space = DesignSpace.from_config(g, {"placements": ["local", "offload", "split:0.3"]}, load_fleet("single_cpu"))
    assert len(space.placements) == 1


def test_evolved_front_inside_exact_front(small_space):
    space, ev = small_space
    exact = set(exact_front(space, ev).ids())
    for seed in range(3):
        front = evolve_front(space, ev, 8, 20, seed)
        assert set(front.ids()) <= exact
        assert audit(list(front.candidates)) == []
    assert evolve_front(space, ev, 8, 20, 5).ids() == evolve_front(space, ev, 8, 20, 5).ids()


def test_evolve_argument_checks(small_space):
    space, ev = small_space
    with pytest.raises(ValueError):
        evolve_front(space, ev, 2, 10, 0)


def test_enumeration_is_distinct(small_space):
    space, _ = small_space
    cands = space.enumerate()
    assert len({c.id for c in cands}) == len(cands) <= space.size


# -- loop ---------------------------------------------------------------------------------------------


def test_constant_trace_never_switches(small_space):
    space, ev = small_space
    g, fleet = ev.graph, ev.fleet
    trace = [ContextEvent(float(t), "80%", "150%", 0.6) for t in range(5)]
    cfg = LoopConfig(space={"families": {"channel_prune": [0.5]}, "exits": [2, 3],
                            "placements": ["local", "offload"], "quant_bits": [32, 8]},
                     search="exact")
    tl = run_loop(g, fleet, trace, cfg)
    assert len({s.candidate.id for s in tl.steps}) == 1
    assert not any(s.switched for s in tl.steps)
    lines = tl.to_csv().splitlines()
    assert lines[0] == "t,candidate_id,A,T,E,M_peak,feasible,switched" and len(lines) == 6


def test_percent_budgets_resolve_against_reference(small_space):
    _, ev = small_space
    cfg = LoopConfig(space={"exits": [3]}, search="exact")
    tl = run_loop(ev.graph, ev.fleet, [ContextEvent(0.0, "50%", "200%", 1.0)], cfg)
    assert tl.steps[0].event.mem_budget == pytest.approx(0.5 * tl.reference.memory)
    assert tl.steps[0].event.time_budget == pytest.approx(2.0 * tl.reference.latency)


def test_trace_validation():
    with pytest.raises(SchemaError):
        parse_trace([])
    with pytest.raises(SchemaError):
        parse_trace([{"t": 1, "M_bgt": 1, "T_bgt": 1, "battery": 0.5}, {"t": 0, "M_bgt": 1, "T_bgt": 1, "battery": 0.5}])
    with pytest.raises(SchemaError):
        parse_trace([{"t": 0, "M_bgt": -5, "T_bgt": 1, "battery": 0.5}])
    with pytest.raises(SchemaError):
        parse_trace([{"t": 0, "M_bgt": 1, "T_bgt": 1, "battery": 1.5}])
    with pytest.raises(SchemaError):
        parse_trace([{"t": 0, "M_bgt": 1, "T_bgt": 1, "battery": 0.5, "surprise": True}])
    evs = parse_trace({"trace_version": 1, "events": [{"t": 0, "M_bgt": "75%", "T_bgt": 2.5, "battery": 0.5}]})
    assert evs[0].mem_budget == "75%" and evs[0].time_budget == 2.5
    assert ContextEvent.from_dict(json.loads(json.dumps(evs[0].to_dict()))) == evs[0]
