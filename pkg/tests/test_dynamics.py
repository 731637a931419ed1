"""Implicit stepping: Newton behavior, constraints, manipulators, tape."""

import numpy as np
import pytest
import scipy.sparse as sp

from shellsim.contact import ContactParams
from shellsim.dynamics import (
    ElementTables, IncrementalPotential, Manipulator, NewtonResult,
    SparseSystem, Simulator, fix_dofs, newton_solve, rotated_vector_jacobian,
    rotvec_matrix, solve_spd)
from shellsim.energy import MaterialParams
from shellsim.geometry import Scene, SceneObject, build_block, build_shell

RNG = np.random.default_rng(11)


def _sheet_scene(rows=4, cols=4, size=0.02, mat=None, gravity=(0, 0, -9.8)):
    mesh = build_shell(rows, cols, size=size)
    mat = mat or MaterialParams(K_e=1000.0, K_a=1000.0, K_b=100.0)
    return Scene([SceneObject("sheet", mesh, mat)], gravity=gravity)


def _potential(sim, state, pairs=None):
    from shellsim.contact import ContactSet
    xf = state.x.reshape(-1)
    y = xf + sim.h * state.v.reshape(-1) + sim.h ** 2 * sim.accel
    y[sim.fixed_mask] = xf[sim.fixed_mask]
    return IncrementalPotential(
        sim.tables, sim.masses, sim.h, y, state.rest_angles,
        pairs if pairs is not None else ContactSet(), state.x.copy(),
        sim.params, sim.fixed_mask, sim.anchor_springs)


# ---------------------------------------------------------------------------
# sparse system / fix_dofs / solve_spd
# ---------------------------------------------------------------------------

def test_fix_dofs_matches_reduced_system():
    n = 30
    a = RNG.standard_normal((n, n))
    a = a @ a.T + n * np.eye(n)
    b = RNG.standard_normal(n)
    mask = np.zeros(n, dtype=bool)
    mask[RNG.choice(n, 8, replace=False)] = True

    coo = sp.coo_matrix(a)
    system = fix_dofs(SparseSystem(coo.row, coo.col, coo.data, b, n), mask)
    u = solve_spd(system)

    free = ~mask
    u_ref = np.linalg.solve(a[np.ix_(free, free)], b[free])
    assert np.abs(u[mask]).max() == 0.0
    assert np.abs(u[free] - u_ref).max() < 1e-12 * max(1, np.abs(u_ref).max())


def test_solve_spd_residual_contract():
    n = 50
    a = sp.random(n, n, density=0.1, random_state=3)
    a = (a @ a.T + 10 * sp.eye(n)).tocoo()
    b = RNG.standard_normal(n)
    u = solve_spd(SparseSystem(a.row, a.col, a.data, b, n))
    resid = np.abs(a.tocsr() @ u - b).max()
    assert resid <= 1e-10 * (1 + np.abs(b).max())


def test_solve_spd_rejects_singular():
    rows = np.array([0, 1]); cols = np.array([0, 1])
    data = np.array([1.0, 0.0])           # structurally singular row
    with pytest.raises(RuntimeError):
        solve_spd(SparseSystem(rows, cols, data, np.ones(2), 2))


# ---------------------------------------------------------------------------
# newton on analytic cases
# ---------------------------------------------------------------------------

def test_quadratic_energy_converges_in_one_iteration():
    # zero-stiffness sheet + anchor springs: g is exactly quadratic
    mat = MaterialParams(K_e=0.0, K_a=0.0, K_b=0.0)
    scene = _sheet_scene(3, 3, mat=mat, gravity=(0, 0, 0))
    n = scene.n_vertices
    targets = scene.x0 + RNG.normal(scale=0.01, size=(n, 3))
    sim = Simulator(scene, ContactParams(),
                    anchor_springs=(np.arange(n), targets, 50.0))
    state = scene.initial_state()
    state.x = scene.x0 + RNG.normal(scale=0.005, size=(n, 3))

    ip = _potential(sim, state)
    res = newton_solve(ip, state.x.reshape(-1))
    assert res.converged
    assert res.iters == 1


def test_free_fall_matches_inertia_target():
    mat = MaterialParams(K_e=0.0, K_a=0.0, K_b=0.0)
    scene = _sheet_scene(3, 3, mat=mat)
    sim = Simulator(scene, ContactParams(), h=5e-3)
    state = scene.initial_state()
    x0 = state.x.copy()
    state, rec = sim.step(state, np.zeros(0))
    expect = x0 + sim.h ** 2 * np.array([0.0, 0.0, -9.8])
    assert np.abs(state.x - expect).max() < 1e-12
    assert np.abs(state.v - (state.x - x0) / sim.h).max() == 0.0
    assert rec.newton_iters == 1

    # second step: v carries over, y = 2 x - x_prev + h^2 g
    x1 = state.x.copy()
    state, _ = sim.step(state, np.zeros(0))
    expect = 2 * x1 - x0 + sim.h ** 2 * np.array([0.0, 0.0, -9.8])
    assert np.abs(state.x - expect).max() < 1e-12


def test_fixed_vertices_do_not_move():
    scene = _sheet_scene(4, 4)
    scene.fix_vertices("sheet", np.array([0, 3]))
    sim = Simulator(scene, ContactParams())
    state = scene.initial_state()
    held = state.x[[0, 3]].copy()
    for _ in range(5):
        state, rec = sim.step(state, np.zeros(0))
        assert rec.converged
    assert np.array_equal(state.x[[0, 3]], held)
    assert state.x[:, 2].min() < -1e-5      # the rest sagged


def test_hanging_strip_reaches_force_balance():
    # strip hanging straight down from its fixed top edge: gravity load is
    # axial, transients are stiff stretch modes that implicit damping kills
    from shellsim.geometry import build_shell_from_arrays
    mesh = build_shell(8, 3, size=0.02)
    verts = mesh.vertices.copy()
    verts[:, 2] = -verts[:, 0]              # rotate into the xz-plane
    verts[:, 0] = verts[:, 1]
    verts[:, 1] = 0.0
    mesh2 = build_shell_from_arrays(verts, mesh.triangles)
    scene = Scene([SceneObject("strip", mesh2, MaterialParams())])
    top = np.nonzero(np.abs(verts[:, 2]) < 1e-12)[0]
    scene.fix_vertices("strip", top)
    sim = Simulator(scene, ContactParams(), h=5e-3, newton_tol=1e-10)
    state = scene.initial_state()
    for _ in range(120):
        state, rec = sim.step(state, np.zeros(0))
        assert rec.converged
    assert np.abs(state.v).max() < 1e-8

    # elastic gradient balances per-DOF gravity load on every free DOF
    from shellsim.contact import ContactSet
    xf = state.x.reshape(-1)
    ip = IncrementalPotential(sim.tables, sim.masses, sim.h, xf.copy(),
                              state.rest_angles, ContactSet(), state.x,
                              sim.params, sim.fixed_mask)
    resid = ip.gradient(xf) - sim.masses * sim.accel
    assert np.abs(resid[~sim.fixed_mask]).max() < 1e-6


def test_momentum_update_matches_total_weight():
    scene = _sheet_scene(4, 4)
    sim = Simulator(scene, ContactParams(), h=5e-3, newton_tol=1e-13)
    state = scene.initial_state()
    state.v = RNG.normal(scale=0.1, size=state.v.shape)
    m = sim.masses.reshape(-1, 3)
    for _ in range(3):
        p0 = (m * state.v).sum(axis=0)
        state, _ = sim.step(state, np.zeros(0))
        p1 = (m * state.v).sum(axis=0)
        impulse = sim.h * (m * sim.accel.reshape(-1, 3)).sum(axis=0)
        assert np.abs(p1 - p0 - impulse).max() < 1e-10


def test_line_search_keeps_g_monotone():
    # large incompatible initial velocities force real line-search work
    scene = _sheet_scene(5, 5, size=0.02)
    sim = Simulator(scene, ContactParams())
    state = scene.initial_state()
    state.v = RNG.normal(scale=2.0, size=state.v.shape)
    for _ in range(10):
        state, rec = sim.step(state, np.zeros(0))
        hist = np.asarray(rec.g_history)
        assert (np.diff(hist) <= 1e-12 * np.maximum(1, np.abs(hist[:-1]))).all()
        assert rec.converged


def test_determinism_bit_identical():
    def run():
        scene = _sheet_scene(5, 4)
        scene.fix_vertices("sheet", np.array([0]))
        sim = Simulator(scene, ContactParams())
        state = scene.initial_state()
        state.v = np.full_like(state.v, 0.05)
        for _ in range(20):
            state, _ = sim.step(state, np.zeros(0))
        return state.x.copy(), state.v.copy()

    xa, va = run()
    xb, vb = run()
    assert np.array_equal(xa, xb)
    assert np.array_equal(va, vb)


# ---------------------------------------------------------------------------
# contact in the loop
# ---------------------------------------------------------------------------

def _drop_scene():
    from shellsim.geometry import build_shell_from_arrays
    sheet = build_shell(4, 4, size=0.02)
    v = sheet.vertices.copy()
    v[:, 2] = 5e-4                       # hover just above the table
    sheet = build_shell_from_arrays(v, sheet.triangles)
    table = build_shell(6, 6, size=0.02)
    vt = table.vertices.copy()
    vt[:, :2] -= 0.02
    table = build_shell_from_arrays(vt, table.triangles)
    scene = Scene([
        SceneObject("sheet", sheet, MaterialParams(), collision_class="cloth"),
        SceneObject("table", table, MaterialParams(),
                    collision_class="table"),
    ])
    scene.fix_vertices("table", np.arange(table.n_vertices))
    return scene


def test_sheet_rests_on_table_without_tunneling():
    scene = _drop_scene()
    params = ContactParams(k_r=1e4, eps_r=1e-3, mu_default=0.0)
    sim = Simulator(scene, params)
    state = scene.initial_state()
    for _ in range(80):
        state, rec = sim.step(state, np.zeros(0))
        assert rec.converged
    sheet_z = state.x[scene.vertex_slice("sheet")][:, 2]
    assert (sheet_z > -params.eps_r).all()        # no tunneling
    assert len(sim.pairs) > 0
    assert sim.pairs.lam.sum() > 0.0
    rep = rec.contact_report
    assert rep and all(cnt > 0 for cnt, _ in rep.values())


# ---------------------------------------------------------------------------
# manipulators
# ---------------------------------------------------------------------------

def test_manipulator_rigid_transform_preserves_shape():
    x0 = RNG.standard_normal((6, 3))
    man = Manipulator("single", np.arange(6), x0)
    d0 = np.linalg.norm(x0[:, None] - x0[None], axis=-1)
    for _ in range(10):
        act = np.concatenate([RNG.normal(scale=1e-3, size=3),
                              RNG.normal(scale=0.2, size=3)])
        man.advance(act)
    d1 = np.linalg.norm(man.x_att[:, None] - man.x_att[None], axis=-1)
    assert np.abs(d1 - d0).max() < 1e-12


def test_manipulator_translation_accumulates():
    x0 = np.zeros((2, 3))
    man = Manipulator("single", np.array([0, 1]), x0)
    man.advance(np.array([1e-3, 0, 0, 0, 0, 0]))
    man.advance(np.array([1e-3, 0, 0, 0, 0, 0]))
    assert np.allclose(man.x_att[:, 0], 2e-3)
    assert np.allclose(man.center, [2e-3, 0, 0])


def test_manipulator_rotation_about_center():
    x0 = np.array([[0.01, 0.0, 0.0], [-0.01, 0.0, 0.0]])
    man = Manipulator("single", np.array([0, 1]), x0)
    man.advance(np.array([0, 0, 0, 0, 0, np.pi / 2]))
    assert np.allclose(man.x_att, [[0, 0.01, 0], [0, -0.01, 0]], atol=1e-15)


def test_gripper_opening_moves_pads_apart():
    x0 = np.array([[0.0, 0.0, 0.01], [0.0, 0.0, -0.01]])
    man = Manipulator("gripper", np.array([0, 1]), x0, axis=(0, 0, 1),
                      pad_split=1)
    man.advance(np.array([0, 0, 0, 0, 0, 0, 2e-3]))
    assert np.allclose(man.x_att[0], [0, 0, 0.011])
    assert np.allclose(man.x_att[1], [0, 0, -0.011])
    # closing by the same amount restores the original gap
    man.advance(np.array([0, 0, 0, 0, 0, 0, -2e-3]))
    assert np.allclose(man.x_att[:, 2], [0.01, -0.01])


def test_gripper_axis_follows_rotation():
    x0 = np.array([[0.0, 0.0, 0.01], [0.0, 0.0, -0.01]])
    man = Manipulator("gripper", np.array([0, 1]), x0, axis=(0, 0, 1),
                      pad_split=1)
    man.advance(np.array([0, 0, 0, np.pi / 2, 0, 0, 0]))
    assert np.allclose(man.axis, [0, -1, 0], atol=1e-15)


def test_rotated_vector_jacobian_matches_fd():
    for _ in range(10):
        w = RNG.normal(scale=0.5, size=3)
        v = RNG.standard_normal(3)
        jac = rotated_vector_jacobian(w, v)
        fd = np.empty((3, 3))
        eps = 1e-7
        for k in range(3):
            dp = w.copy(); dp[k] += eps
            dm = w.copy(); dm[k] -= eps
            fd[:, k] = (rotvec_matrix(dp) @ v - rotvec_matrix(dm) @ v) \
                / (2 * eps)
        assert np.abs(jac - fd).max() < 1e-6
    # tiny-angle branch
    jac = rotated_vector_jacobian(np.zeros(3), np.array([1.0, 2.0, 3.0]))
    vx = np.array([[0, -3, 2], [3, 0, -1], [-2, 1, 0.0]])
    assert np.abs(jac - (-vx)).max() < 1e-12


def test_driven_vertices_follow_commands_and_drag_sheet():
    # pad pressed onto a free sheet lying on a frictionless table, then
    # dragged sideways: pad friction must carry the sheet along
    from shellsim.geometry import build_shell_from_arrays
    table = build_shell(8, 8, size=0.01)
    vt = table.vertices.copy()
    vt[:, :2] -= 0.01
    table = build_shell_from_arrays(vt, table.triangles)
    sheet = build_shell(6, 6, size=0.01)
    vs = sheet.vertices.copy()
    vs[:, 2] = 1e-3
    sheet = build_shell_from_arrays(vs, sheet.triangles)
    pad = build_block(2, 2, 1, size=0.01, origin=(0.015, 0.015, 2.5e-3))
    vp = pad.vertices
    scene = Scene([
        SceneObject("sheet", sheet, MaterialParams(), collision_class="cloth"),
        SceneObject("table", table, MaterialParams(),
                    collision_class="table"),
        SceneObject("pad", pad, MaterialParams(lame_mu=1e5, lame_lambda=1e5,
                                               density=1000.0),
                    collision_class="manip"),
    ])
    scene.fix_vertices("table", np.arange(table.n_vertices))
    pad_slice = scene.vertex_slice("pad")
    top = pad_slice.start + np.nonzero(vp[:, 2] > vp[:, 2].max() - 1e-9)[0]
    man = Manipulator("single", top, scene.x0[top])
    params = ContactParams(mu_pair={"cloth|manip": 0.5, "cloth|table": 0.0},
                           mu_default=0.0)
    sim = Simulator(scene, params, manipulators=[man], h=5e-3)
    state = scene.initial_state(man.n_dofs)

    down = np.array([0, 0, -4e-4, 0, 0, 0])
    for _ in range(8):
        state, rec = sim.step(state, down)
        assert rec.converged
    assert np.allclose(state.x[top], man.x_att)
    assert sim.pairs.lam.sum() > 0.0

    sheet_ids = np.arange(*scene.dofmap.vertex_ranges["sheet"])
    x_before = state.x[sheet_ids].copy()
    side = np.array([4e-4, 0, 0, 0, 0, 0])
    for _ in range(8):
        state, rec = sim.step(state, side)
        assert rec.converged
    moved = state.x[sheet_ids, 0] - x_before[:, 0]
    assert moved.mean() > 5e-4            # sheet carried along, not left behind
    assert np.allclose(state.manipulator_poses[:3], [4e-4 * 8, 0, -4e-4 * 8])


def test_action_validation():
    scene = _sheet_scene(3, 3)
    man = Manipulator("single", np.array([0]), scene.x0[:1])
    sim = Simulator(scene, ContactParams(), manipulators=[man],
                    action_clamp=1e-3, strict_actions=True)
    state = scene.initial_state(6)
    with pytest.raises(ValueError):
        sim.step(state, np.array([5e-3, 0, 0, 0, 0, 0]))
    with pytest.raises(ValueError):
        sim.step(state, np.zeros(4))
    with pytest.raises(ValueError):
        Manipulator("gripper", np.array([0]), scene.x0[:1])   # no pad_split
    with pytest.raises(ValueError):
        Manipulator("weird", np.array([0]), scene.x0[:1])
