import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from femzz.adaptivity import (
    AdaptConfig, TimestepUnderflow, explicit_timestep_adapt, implicit_timestep_control, max_strategy,
    run_adaptive, select_coarsening,
)
from femzz.benchmarks import problem_1, problem_2
from femzz.indicators import recompute_eta2


def test_max_strategy_examples():
    e = np.array([1.0, 0.5, 0.9, 0.0])
    assert list(max_strategy(e, 1.0)) == [0]
    assert list(max_strategy(e, 0.0)) == [0, 1, 2]
    assert list(max_strategy(e, 0.7)) == [0, 2]
    assert max_strategy(np.zeros(3), 0.5).size == 0
    assert max_strategy([], 0.5).size == 0


@given(e=st.lists(st.floats(0, 1e3), min_size=1, max_size=50), xi=st.floats(0, 1))
def test_max_strategy_marks_the_maximum(e, xi):
    e = np.array(e)
    m = max_strategy(e, xi)
    if e.max() > 0:
        assert int(np.argmax(e)) in m
        assert np.all(e[m] ** 2 >= xi * e.max() ** 2)


class _P:
    def __init__(self, v):
        self.vertex = v

    def __hash__(self):
        return self.vertex

    def __eq__(self, other):
        return self.vertex == other.vertex


@given(g=st.lists(st.floats(0, 1), max_size=30), budget=st.floats(0, 5))
def test_greedy_coarsening_budget(g, budget):
    pre = {_P(i): v for i, v in enumerate(g)}
    chosen, total = select_coarsening(pre, budget)
    assert total <= budget
    assert total == pytest.approx(sum(pre[q] for q in chosen))
    rest = [v for q, v in pre.items() if q not in chosen]
    if rest:
        assert min(rest) >= max((pre[q] for q in chosen), default=0.0)
    assert all(pre[q] == 0.0 for q in select_coarsening(pre, 0.0)[0])


@pytest.mark.parametrize("kw", [
    dict(tol_eps=-1), dict(xi=1.5), dict(tol_theta_min=2.0), dict(k_max=-1), dict(tau0=0), dict(timestep="x"),
])
def test_config_validation(kw):
    base = dict(tol_eps=1, tol_gamma=1, tol_theta=1, tol_theta_min=0.5)
    base.update(kw)
    with pytest.raises(ValueError):
        AdaptConfig(**base)


def test_global_tolerance():
    c = AdaptConfig(tol_eps=0.3, tol_gamma=0.4, tol_theta=1.2, tol_theta_min=0.1, T=0.5)
    assert c.global_tol == pytest.approx(math.sqrt(0.5 * (0.09 + 0.16 + 1.44)))


def _cfg(**kw):
    base = dict(tol_eps=0.5, tol_gamma=0.05, tol_theta=1.0, tol_theta_min=0.2, tau0=0.05, T=0.3, k_max=2,
                initial_refinements=3)
    base.update(kw)
    return AdaptConfig(**base)


def test_explicit_run_bookkeeping():
    res = explicit_timestep_adapt(problem_1(), _cfg())
    assert res.final.t == pytest.approx(0.3)
    assert sum(res.taus) == pytest.approx(0.3)
    assert res.redos == 0 and res.steps == len(res.taus) > 0
    allowed = [0.05 * 2 ** (m / 2) for m in range(-40, 20)]
    for tau in res.taus[:-1]:
        assert min(abs(tau - a) / a for a in allowed) < 1e-12
    assert res.total_dof == sum(r.dof for r in res.history)
    assert res.accumulator.eta2 == pytest.approx(recompute_eta2(res.history), rel=1e-12)
    etas = [r.eta_cum for r in res.history]
    assert all(b >= a for a, b in zip(etas, etas[1:]))
    assert res.error > 0 and res.ei == pytest.approx(res.eta / res.error)


def test_zero_coarsening_tolerance_never_coarsens():
    res = run_adaptive(problem_1(), _cfg(tol_gamma=0.0))
    assert all(r.gamma == 0.0 and r.coarsen_loss == 0.0 for r in res.history)


def test_uniform_mode_keeps_the_mesh():
    res = run_adaptive(problem_1(), _cfg(timestep="uniform"))
    assert len({r.dof for r in res.history}) == 1
    assert all(t == pytest.approx(0.05) for t in res.taus)


def test_infinite_theta_tolerance_means_no_redos():
    res = implicit_timestep_control(problem_2(T=0.05), _cfg(timestep="implicit", tol_theta=math.inf, T=0.05,
                                                            tau0=0.01))
    assert res.redos == 0


def test_implicit_control_redoes_steps_on_fast_problem():
    kw = dict(tol_theta=0.4, tol_theta_min=0.1, T=0.05, tau0=0.01, tol_eps=1.0, tol_gamma=0.1)
    imp = run_adaptive(problem_2(T=0.05), _cfg(timestep="implicit", **kw))
    exp = run_adaptive(problem_2(T=0.05), _cfg(timestep="explicit", **kw))
    assert imp.redos >= 1 and exp.redos == 0
    assert all(r.theta <= 0.4 or r.redos == 20 for r in imp.history)
    assert sum(imp.taus) == pytest.approx(0.05)


def test_timestep_underflow_raises():
    cfg = _cfg(timestep="implicit", tol_theta=1e-9, tol_theta_min=1e-10, tau_min=1e-3, T=0.05, tau0=0.01)
    with pytest.raises(TimestepUnderflow) as exc:
        run_adaptive(problem_2(T=0.05), cfg)
    assert exc.value.result.aborted


def test_runner_mode_checks():
    with pytest.raises(ValueError):
        explicit_timestep_adapt(problem_1(), _cfg(timestep="implicit"))
    with pytest.raises(ValueError):
        implicit_timestep_control(problem_1(), _cfg())


def test_snapshots_are_recorded():
    res = run_adaptive(problem_1(), _cfg(snapshot_times=(0.1, 0.2)))
    assert [s.t >= a - 1e-12 for s, a in zip(res.snapshots, (0.1, 0.2))] == [True, True]
    assert res.snapshots[0].U.space.leafset == res.snapshots[0].leafset
