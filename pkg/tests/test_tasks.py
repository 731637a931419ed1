"""Benchmark scenes: builders, rewards, observations, feasibility."""

import types

import numpy as np
import pytest

from shellsim import tasks
from shellsim.tasks import (
    BEND_UNIT, FLOOR_REWARD, TASK_IDS, RewardReport, build_task, observe,
    resume_rollout, reward, reward_gradients, rollout, state_hash, task_spec,
    zero_actions)

RNG = np.random.default_rng(23)

# task construction can be expensive (goal rollouts, settling); build each
# benchmark scene once and share it across read-only tests
_CACHE = {}


def _task(tid, **kw):
    key = (tid, tuple(sorted(kw.items())))
    if key not in _CACHE:
        _CACHE[key] = build_task(task_spec(tid, **kw))
    return _CACHE[key]


def _names(task):
    sim, _ = task.fresh()
    return [o.name for o in sim.scene.objects]


def _hinge_oracle(p):
    """Scalar signed-dihedral reference for one (e0, e1, oa, ob) quad."""
    e = p[1] - p[0]
    na = np.cross(p[1] - p[0], p[2] - p[0])
    nb = np.cross(p[0] - p[1], p[3] - p[1])
    e = e / np.linalg.norm(e)
    na = na / np.linalg.norm(na)
    nb = nb / np.linalg.norm(nb)
    return float(np.arctan2(np.dot(np.cross(nb, na), e), np.dot(na, nb)))


# ---------------------------------------------------------------------------
# specs and construction
# ---------------------------------------------------------------------------

def test_task_ids_complete():
    assert TASK_IDS == ("Lifting", "Separating", "Following", "FoldingU",
                        "FoldingL", "PickFolding", "Forming", "Sliding",
                        "Bouncing", "Card")


def test_spec_defaults_wiring():
    fl = task_spec("FoldingL")
    assert fl.mu_pair["cloth|table"] == 5.0
    assert fl.mu_pair["cloth|manip"] == 5.0
    assert fl.bend_stiffness == 400.0
    assert fl.yield_angle == 0.04
    assert fl.horizon == 25 and fl.action_clamp == 1e-3
    assert task_spec("Separating").action_clamp == 2e-3
    assert task_spec("Sliding").eps_v == 4e-4
    assert task_spec("Card").force_limit == 200.0
    assert task_spec("Lifting").mode == "trajectory"
    for tid in ("Sliding", "Bouncing", "Card"):
        assert task_spec(tid).mode == "parameters"


def test_spec_overrides_and_validation():
    s = task_spec("Lifting", horizon=5, obs_samples=4)
    assert s.horizon == 5 and s.obs_samples == 4
    with pytest.raises(ValueError):
        task_spec("NoSuchTask")
    with pytest.raises(ValueError):
        task_spec("Lifting", nonsense=1)
    with pytest.raises(ValueError):
        task_spec("Lifting", resolution=4)
    with pytest.raises(ValueError):
        task_spec("Lifting", resolution=64)
    with pytest.raises(ValueError):
        task_spec("Lifting", mode="banana")
    with pytest.raises(ValueError):
        task_spec("Lifting", horizon=0)
    with pytest.raises(ValueError):
        build_task("NoSuchTask")
    # each call hands out an independent friction table
    assert task_spec("Lifting").mu_pair is not task_spec("Lifting").mu_pair


def test_all_tasks_build():
    expected_dofs = {"Lifting": 18, "Separating": 7, "Following": 7,
                     "FoldingU": 6, "FoldingL": 6, "PickFolding": 12,
                     "Forming": 6, "Sliding": 6, "Bouncing": 0, "Card": 18}
    for tid in TASK_IDS:
        task = _task(tid)
        assert task.spec.task_id == tid
        assert task.n_action_dofs == expected_dofs[tid]
        if task.spec.mode == "trajectory":
            assert task.scripted is None
            assert task.design_params == ()
        else:
            assert task.scripted.shape == (task.spec.horizon,
                                           task.n_action_dofs)
            assert task.design_params
            for route in task.design_params:
                assert route in task.param_init and route in task.param_box
                lo, hi = task.param_box[route]
                assert lo < task.param_init[route] < hi
        sim, state = task.fresh()
        classes = [o.collision_class for o in sim.scene.objects]
        assert task.manip_objects == tuple(
            i for i, c in enumerate(classes) if c == "manip")
        assert task.cloth_objects == tuple(
            i for i, c in enumerate(classes) if c == "cloth")
        assert sim.n_action_dofs == task.n_action_dofs
        assert len(state.manipulator_poses) == task.n_action_dofs


def test_material_and_contact_plumbing():
    sim, _ = _task("FoldingL").fresh()
    strip = sim.scene.objects[sim.scene.object_index("strip")]
    assert strip.material.K_b == pytest.approx(400.0 * BEND_UNIT)
    assert strip.material.yield_angle == 0.04
    assert sim.params.mu_pair["cloth|table"] == 5.0
    sim, _ = _task("Sliding").fresh()
    assert sim.params.eps_v == 4e-4
    assert sim.params.mu_pair["cloth|cloth"] == 0.2
    assert sim.action_clamp == 1e-3


def test_lifting_scene_has_no_table():
    assert "table" not in _names(_task("Lifting"))


def test_design_parameter_overrides():
    sl = _task("Sliding")
    sim, _ = sl.fresh({"friction:cloth|cloth": 0.7})
    assert sim.params.mu_pair["cloth|cloth"] == 0.7
    bc = _task("Bouncing")
    sim, _ = bc.fresh({"bend_k:sheet": 5e-3})
    obj = sim.scene.objects[sim.scene.object_index("sheet")]
    assert obj.material.K_b == pytest.approx(5e-3)
    oi = sim.scene.object_index("sheet")
    assert (sim.scene.bend_k[sim.scene.bend_owner == oi] == 5e-3).all()
    assert bc.param_init["bend_k:sheet"] == pytest.approx(50.0 * BEND_UNIT)
    with pytest.raises(ValueError):
        sl.fresh({"bogus:thing": 1.0})


def test_build_determinism():
    a = build_task("FoldingL")
    b = build_task("FoldingL")
    _, sa = a.fresh()
    _, sb = b.fresh()
    assert state_hash(sa) == state_hash(sb)
    assert np.array_equal(a.reward_data["upper"], b.reward_data["upper"])
    assert np.array_equal(a.reward_data["lower"], b.reward_data["lower"])
    assert np.array_equal(a.sample_ids, b.sample_ids)


def test_forming_goal_determinism_and_contrast():
    a = build_task("Forming")
    b = build_task("Forming")
    assert np.array_equal(a.reward_data["goal"], b.reward_data["goal"])
    sim, state = a.fresh()
    lo, hi = a.reward_data["sheet"]
    # the goal shape is a deformed configuration, not the rest arch
    assert np.abs(a.reward_data["goal"] - state.x[lo:hi]).max() > 1e-3


# ---------------------------------------------------------------------------
# rewards against brute-force oracles
# ---------------------------------------------------------------------------

def _perturbed_state(task, scale=1e-4):
    _, state = task.fresh()
    state.x = state.x + scale * RNG.standard_normal(state.x.shape)
    if len(state.rest_angles):
        state.rest_angles = state.rest_angles \
            + scale * RNG.standard_normal(len(state.rest_angles))
    return state


def test_reward_goal_tasks_oracle():
    for tid, key in (("Lifting", "block"), ("Forming", "sheet")):
        task = _task(tid)
        state = _perturbed_state(task)
        lo, hi = task.reward_data[key]
        want = -sum(float(np.dot(d, d)) for d in
                    (state.x[lo:hi] - task.reward_data["goal"]))
        got = reward(task, state)
        assert got.reward == pytest.approx(want, rel=1e-12, abs=1e-15)
        assert got.feasible and "raw" in got.terms


def test_reward_separating_oracle():
    task = _task("Separating")
    state = _perturbed_state(task)
    d = task.reward_data
    lo, hi = d["block"]
    plo, phi = d["sheet"]
    want = (sum(float(state.x[i, 0]) for i in range(lo, hi))
            - d["ratio"] * sum(float(state.x[i, 0])
                               for i in range(plo, phi)) - d["base"])
    assert reward(task, state).reward == pytest.approx(want, rel=1e-12,
                                                       abs=1e-15)
    # zero displacement reads exactly zero by construction
    _, rest = task.fresh()
    assert abs(reward(task, rest).reward) < 1e-12


def test_reward_following_oracle():
    task = _task("Following")
    state = _perturbed_state(task)
    lo, hi = task.reward_data["block"]
    want = task.reward_data["base"] \
        - sum(float(state.x[i, 0]) for i in range(lo, hi)) / (hi - lo)
    assert reward(task, state).reward == pytest.approx(want, rel=1e-12,
                                                       abs=1e-15)


def test_reward_folding_oracle_and_mirror():
    tu, tl = _task("FoldingU"), _task("FoldingL")
    state = _perturbed_state(tu)
    d = tu.reward_data
    up = d["sign"] * sum(float(state.rest_angles[i]) for i in d["upper"])
    low = d["sign"] * sum(float(state.rest_angles[i]) for i in d["lower"])
    ru = reward(tu, state).reward
    rl = reward(tl, state).reward
    assert ru == pytest.approx(up - low, rel=1e-12, abs=1e-15)
    assert rl == pytest.approx(low - up, rel=1e-12, abs=1e-15)
    assert ru == pytest.approx(-rl, rel=1e-12)
    # equal-size bands of identical curl hinges start at (numerically) zero
    _, rest = tu.fresh()
    assert abs(reward(tu, rest).reward) < 1e-12
    assert abs(reward(tl, rest).reward) < 1e-12


def test_reward_pickfolding_oracle():
    task = _task("PickFolding")
    state = _perturbed_state(task)
    d = task.reward_data
    want = d["sign"] * sum(_hinge_oracle(state.x[q]) for q in d["quads"])
    assert reward(task, state).reward == pytest.approx(want, rel=1e-12)
    assert d["sign"] in (-1.0, 1.0)


def test_reward_sliding_bouncing_card_oracle():
    sl = _task("Sliding")
    state = _perturbed_state(sl)
    lo, hi = sl.reward_data["bottom"]
    want = sl.reward_data["base"] \
        - sum(float(state.x[i, 0]) for i in range(lo, hi))
    assert reward(sl, state).reward == pytest.approx(want, rel=1e-12,
                                                     abs=1e-15)

    bc = _task("Bouncing")
    state = _perturbed_state(bc)
    verts = bc.reward_data["crease_verts"]
    want = sum(float(state.x[i, 2]) for i in verts) - bc.reward_data["base"]
    assert reward(bc, state).reward == pytest.approx(want, rel=1e-12,
                                                     abs=1e-15)

    cd = _task("Card")
    state = _perturbed_state(cd)
    lo, hi = cd.reward_data["card"]
    want = cd.reward_data["sign"] * (
        sum(float(state.x[i, 0]) for i in range(lo, hi))
        - cd.reward_data["base"])
    assert reward(cd, state).reward == pytest.approx(want, rel=1e-12,
                                                     abs=1e-15)


def test_reward_gradients_match_finite_differences():
    for tid in ("Lifting", "Following", "PickFolding", "Card"):
        task = _task(tid)
        state = _perturbed_state(task)
        gx, _ = reward_gradients(task, state)
        dx = RNG.standard_normal(state.x.shape)
        eps = 1e-6
        xs = state.x.copy()
        state.x = xs + eps * dx
        rp = reward(task, state).reward
        state.x = xs - eps * dx
        rm = reward(task, state).reward
        state.x = xs
        fd = (rp - rm) / (2 * eps)
        assert float((gx * dx).sum()) == pytest.approx(fd, rel=1e-5,
                                                       abs=1e-10)


def test_reward_gradients_rest_angle_route():
    task = _task("FoldingU")
    state = _perturbed_state(task)
    _, gr = reward_gradients(task, state)
    dr = RNG.standard_normal(len(state.rest_angles))
    eps = 1e-6
    rs = state.rest_angles.copy()
    state.rest_angles = rs + eps * dr
    rp = reward(task, state).reward
    state.rest_angles = rs - eps * dr
    rm = reward(task, state).reward
    state.rest_angles = rs
    assert float((gr * dr).sum()) == pytest.approx((rp - rm) / (2 * eps),
                                                   rel=1e-7)
    d = task.reward_data
    untouched = np.setdiff1d(np.arange(len(gr)),
                             np.concatenate([d["upper"], d["lower"]]))
    assert not gr[untouched].any()


def test_reward_is_pure():
    task = _task("Lifting")
    _, state = task.fresh()
    before = state_hash(state)
    r1 = reward(task, state).reward
    r2 = reward(task, state).reward
    assert r1 == r2
    assert state_hash(state) == before
    with pytest.raises(ValueError):
        bogus = types.SimpleNamespace(spec=task_spec("Lifting"),
                                      reward_data={})
        bogus.spec.task_id = "Mystery"
        reward(types.SimpleNamespace(spec=bogus.spec, reward_data={}), state)


# ---------------------------------------------------------------------------
# observation
# ---------------------------------------------------------------------------

def test_observe_layout():
    task = _task("Separating")
    sim, state = task.fresh()
    ids = task.sample_ids
    assert len(ids) <= task.spec.obs_samples
    assert (np.diff(ids) > 0).all()
    names = ("sheet", "block")
    allowed = np.concatenate([
        np.arange(sim.scene.vertex_slice(n).start,
                  sim.scene.vertex_slice(n).stop) for n in names])
    assert np.isin(ids, allowed).all()
    state.v = state.v + RNG.standard_normal(state.v.shape)
    obs = observe(task, state)
    assert obs.shape == (6 * len(ids) + task.n_action_dofs,)
    assert np.array_equal(obs[:3], state.x[ids[0]])
    assert np.array_equal(obs[3:6], state.v[ids[0]])
    assert np.array_equal(obs[-task.n_action_dofs:],
                          state.manipulator_poses)


# ---------------------------------------------------------------------------
# feasibility filter
# ---------------------------------------------------------------------------

def _rec(report):
    return types.SimpleNamespace(contact_report=report)


def test_feasibility_no_manipulator_always_passes():
    task = _task("Bouncing")
    assert tasks._feasibility(task, _rec({})) == (True, 0.0)


def test_feasibility_trajectory_requires_cloth_touch():
    task = _task("FoldingL")           # objects: strip 0, table 1, pad 2
    assert tasks._feasibility(task, _rec({})) == (False, 0.0)
    ok, force = tasks._feasibility(task, _rec({(0, 2): (3, 1.5)}))
    assert ok and force == 1.5
    # cloth-table contact neither counts as force nor as manipulator touch
    ok, force = tasks._feasibility(task, _rec({(0, 1): (5, 1e4)}))
    assert (ok, force) == (False, 0.0)
    ok, force = tasks._feasibility(
        task, _rec({(0, 1): (5, 1e4), (0, 2): (1, 2.0)}))
    assert ok and force == 2.0
    # force cap (default 50 N) applies to manipulator-cloth normal force
    ok, force = tasks._feasibility(task, _rec({(0, 2): (3, 1e3)}))
    assert (ok, force) == (False, 1e3)


def test_feasibility_manip_manip_excluded():
    task = _task("Lifting")     # sheet 0, block 1, pads 2-4
    ok, force = tasks._feasibility(
        task, _rec({(2, 3): (9, 1e6), (0, 4): (2, 1.0)}))
    assert ok and force == 1.0
    # pad-block force counts toward the cap but is not a cloth touch
    ok, force = tasks._feasibility(task, _rec({(1, 2): (1, 5.0)}))
    assert (ok, force) == (False, 5.0)


def test_feasibility_parameters_mode_may_release():
    task = _task("Sliding")
    assert tasks._feasibility(task, _rec({})) == (True, 0.0)
    ok, force = tasks._feasibility(task, _rec({(2, 4): (4, 30.0)}))
    assert ok and force == 30.0        # under the 50 N cap
    ok, _ = tasks._feasibility(task, _rec({(2, 4): (4, 2e3)}))
    assert not ok


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------

def test_rollout_shape_check():
    task = _task("FoldingL")
    with pytest.raises(ValueError):
        rollout(task, np.zeros((3, task.n_action_dofs + 1)))
    za = zero_actions(task)
    assert za.shape == (task.spec.horizon, task.n_action_dofs)


def test_folding_press_yields_and_persists():
    task = _task("FoldingL")
    acts = zero_actions(task)
    acts[:12, 2] = -3e-4               # press the apex pad down, then hold
    res = rollout(task, acts)
    assert res.feasible and not res.unreliable
    assert res.steps_run == task.spec.horizon
    assert len(res.rewards) == res.steps_run
    # pressing flattens the upper band: positive by the fold convention,
    # and plastic, so the reward survives the 13 hands-off steps
    assert res.report.reward > 1e-4
    assert res.rewards[-1] == pytest.approx(res.report.reward)
    yields = sum(int(r.yielded.sum()) for r in res.sim.tape.records)
    assert yields > 0
    # the mirrored objective reads the same motion as counterproductive
    assert reward(_task("FoldingU"), res.state).reward < -1e-4


def test_force_cap_floors_rollout():
    task = build_task(task_spec("Lifting", force_limit=1e-2))
    res = rollout(task, zero_actions(task))
    assert not res.feasible
    assert res.report.reward == FLOOR_REWARD
    assert not res.report.feasible
    assert res.steps_run < task.spec.horizon
    assert len(res.rewards) == res.steps_run
    assert res.report.terms["manip_force"] > 1e-2


def test_contact_loss_floors_trajectory_rollout():
    task = _task("FoldingL")
    acts = zero_actions(task)
    acts[:, 2] = 1e-3                  # lift the pad straight off the strip
    res = rollout(task, acts)
    assert not res.feasible
    assert res.report.reward == FLOOR_REWARD
    assert 1 < res.steps_run <= 8


def test_unreliable_flag_on_nonconvergence():
    task = _task("FoldingL", resolution=8)
    sim, state = task.fresh()
    sim.newton_tol = 0.0               # unattainable: every step "fails"
    res = resume_rollout(task, sim, state,
                         np.zeros((2, task.n_action_dofs)))
    assert res.unreliable
    assert res.feasible
    assert res.steps_run == 2


def test_rollout_rewards_are_cumulative_history():
    task = _task("FoldingL")
    acts = zero_actions(task)
    acts[:6, 2] = -3e-4
    res = rollout(task, acts)
    sim, state = task.fresh()
    for t in range(4):
        state, _ = sim.step(state, acts[t])
    assert reward(task, state).reward == pytest.approx(res.rewards[3],
                                                       abs=1e-12)


# ---------------------------------------------------------------------------
# hashing
# ---------------------------------------------------------------------------

def test_state_hash_sensitivity():
    task = _task("FoldingL")
    _, a = task.fresh()
    _, b = task.fresh()
    assert state_hash(a) == state_hash(b)
    b.x[0, 0] += 1e-12
    assert state_hash(a) != state_hash(b)
    b.x[0, 0] -= 1e-12
    b.time_index += 1
    assert state_hash(a) != state_hash(b)


def test_reward_report_defaults():
    rep = RewardReport(1.5)
    assert rep.feasible and rep.terms == {}
