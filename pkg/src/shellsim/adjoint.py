"""Reverse-mode differentiation of taped rollouts.

Each taped step is an implicit function x^{t+1}(x^t, x^{t-1}, r^t, c^t)
defined by the stationarity of the incremental potential with the
contact pair set, cached contact strengths, and plasticity yield
decisions frozen as step constants.  One adjoint linear solve per step
against the unprojected Hessian propagates loss gradients to earlier
states, rest angles, manipulator actions, and scalar material/contact
parameters (which enter the forces linearly, so their gradients are
dot products with the adjoint vector).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import contact as contact_mod
from . import energy as energy_mod
from .dynamics import (REG_RETRIES, REG_TAU_INIT, SparseSystem, Simulator,
                       _dof_indices, _tet_w, fix_dofs,
                       rotated_vector_jacobian, rotvec_matrix, solve_spd)

log = logging.getLogger(__name__)


@dataclass
class BackwardResult:
    """Gradients produced by one backward sweep over a tape."""

    action_grads: np.ndarray       # (T, n_action_dofs)
    x0_grad: np.ndarray            # (N, 3) gradient wrt initial positions
    r0_grad: np.ndarray            # (B,) gradient wrt initial rest angles
    param_grads: dict = field(default_factory=dict)
    adjoint_norms: list = field(default_factory=list)


def _normalize_param(spec):
    if isinstance(spec, str):
        parts = spec.split(":")
        return (parts[0], parts[1]) if len(parts) == 2 else (parts[0], None)
    return tuple(spec) if len(spec) == 2 else (spec[0], None)


def _check_params(specs, sim):
    out = []
    names = {o.name for o in sim.scene.objects}
    for spec in specs:
        kind, arg = _normalize_param(spec)
        if kind == "yield_angle":
            raise ValueError(
                "yield_angle has no usable gradient: the return map is "
                "piecewise constant in it between yield events")
        if kind not in ("bend_k", "friction", "k_r", "lame_mu",
                        "lame_lambda"):
            raise ValueError("unknown parameter %r" % (spec,))
        if kind in ("bend_k", "lame_mu", "lame_lambda") and arg not in names:
            raise ValueError("parameter %r names unknown object" % (spec,))
        out.append((kind, arg))
    return out


def _adjoint_solve(system, fixed_mask, w):
    """Solve H z = w on the free DOFs with the exact (unprojected) Hessian.

    Falls back to a diagonal regularization ladder if the factorization
    breaks down or loses the residual contract.
    """
    system.rhs = w.copy()
    system = fix_dofs(system, fixed_mask)
    tau = REG_TAU_INIT
    for attempt in range(REG_RETRIES + 1):
        try:
            return solve_spd(system)
        except RuntimeError:
            diag = np.where(fixed_mask, 0.0, tau)
            system = SparseSystem(
                np.concatenate([system.rows, np.arange(system.n)]),
                np.concatenate([system.cols, np.arange(system.n)]),
                np.concatenate([system.data, diag]),
                system.rhs, system.n, constrained=True)
            log.warning("adjoint solve regularized with tau=%.1e", tau)
            tau *= 10.0
    raise RuntimeError("adjoint solve failed after regularization ladder")


def backward_sweep(sim: Simulator, grad_x, grad_r=None, params=()):
    """Propagate per-step loss gradients backward through sim.tape.

    grad_x[t] is dL/d(positions after step t) as (N, 3) or None;
    grad_r[t] likewise for the post-step rest angles.  Returns gradients
    for every action DOF, the initial state, and the requested scalar
    parameters.
    """
    tape = sim.tape
    t_steps = len(tape)
    if t_steps == 0:
        raise ValueError("empty tape")
    n3 = sim.masses.shape[0]
    n_bend = sim.scene.bends.shape[0]
    specs = _check_params(params, sim)
    mass_h2 = sim.masses / sim.h ** 2
    stencil = sim.tables.bend_stencil

    acc_x = {}
    acc_r = {}
    pgrad = {spec: 0.0 for spec in specs}
    attach_grads = [np.zeros((t_steps, len(m.attached), 3))
                    for m in sim.manipulators]
    norms = []

    def bump(store, key, value):
        cur = store.get(key)
        store[key] = value if cur is None else cur + value

    for t in reversed(range(t_steps)):
        rec = tape[t]
        w = acc_x.pop(t + 1, None)
        w = np.zeros(n3) if w is None else w
        if grad_x is not None and grad_x[t] is not None:
            w = w + np.asarray(grad_x[t], dtype=np.float64).reshape(-1)
        wr = acc_r.pop(t + 1, None)
        wr = np.zeros(n_bend) if wr is None else wr
        if grad_r is not None and grad_r[t] is not None:
            wr = wr + np.asarray(grad_r[t], dtype=np.float64)

        # plasticity: yielded hinges took r^{t+1} = theta(x^{t+1}) - s kappa
        wr_cur = wr.copy()
        if rec.yielded.any():
            ids = np.nonzero(rec.yielded)[0]
            gt = energy_mod.hinge_theta_grad(rec.x_next[stencil[ids]])
            dofs = _dof_indices(stencil[ids])
            w = w + np.bincount(
                dofs.ravel(),
                weights=(wr[ids, None, None] * gt).ravel(), minlength=n3)
            wr_cur[ids] = 0.0

        ip = sim.build_potential(rec)
        xf = rec.x_next.reshape(-1)
        system = ip.hessian(xf, project=False)
        h_full = system.matrix().tocsr()
        z = _adjoint_solve(system, ip.fixed_mask, w)
        norms.append(float(np.abs(z).max(initial=0.0)))

        # implicit coupling to the commanded (fixed) DOFs: w_A - (H z)_A
        hz = h_full @ z
        grad_fixed = np.where(rec.fixed_mask, w - hz, 0.0).reshape(-1, 3)
        for mi, man in enumerate(sim.manipulators):
            attach_grads[mi][t] = grad_fixed[man.attached]

        # inertia target y = (2 or 1) x^t - x^{t-1} + const on free DOFs
        factor = 1.0 if rec.first_step else 2.0
        gx_cur = factor * mass_h2 * z
        if not rec.first_step:
            bump(acc_x, t - 1, -mass_h2 * z)

        pairs = rec.pairs
        if len(pairs):
            pair_stencil = pairs.stencil()
            pair_dofs = _dof_indices(pair_stencil)
            xs = rec.x_next[pair_stencil]
            xs_ref = rec.x_start[pair_stencil]
            coeff = pairs.mu * pairs.lam
            # friction couples x^{t+1} to the reference positions x^t with
            # mixed second derivative equal to minus the x^{t+1} Hessian
            _, _, hf = contact_mod.friction_energy_batch(
                xs, xs_ref, pairs.normal, pairs.anchor, coeff,
                sim.params.eps_v)
            zp = z[pair_dofs]
            gx_cur = gx_cur + np.bincount(
                pair_dofs.ravel(),
                weights=np.einsum("bij,bj->bi", hf, zp).ravel(),
                minlength=n3)
        bump(acc_x, t, gx_cur)

        # bend forces are linear in (theta - r): the solve couples to r^t
        if n_bend:
            gt_all = energy_mod.hinge_theta_grad(rec.x_next[stencil])
            zb = z[_dof_indices(stencil)]
            zdot = np.einsum("bki,bki->b", gt_all.reshape(-1, 4, 3),
                             zb.reshape(-1, 4, 3))
            coeff_b = sim.scene.bend_k * sim.scene.bend_rest_len \
                / sim.scene.bend_height
            wr_cur = wr_cur + 2.0 * coeff_b * zdot
        bump(acc_r, t, wr_cur)

        for spec in specs:
            pgrad[spec] += _param_route(spec, sim, rec, z)

    action_grads = _manipulator_chain(sim, tape, attach_grads)
    x0 = acc_x.pop(0, None)
    r0 = acc_r.pop(0, None)
    return BackwardResult(
        action_grads=action_grads,
        x0_grad=(np.zeros(n3) if x0 is None else x0).reshape(-1, 3),
        r0_grad=np.zeros(n_bend) if r0 is None else r0,
        param_grads={_param_name(s): v for s, v in pgrad.items()},
        adjoint_norms=norms[::-1])


def _param_name(spec):
    kind, arg = spec
    return kind if arg is None else "%s:%s" % (kind, arg)


def _param_route(spec, sim, rec, z):
    """-z . d(force residual)/d(eta) for one scalar parameter."""
    kind, arg = spec
    s = sim.scene
    if kind == "bend_k":
        if not s.bends.shape[0]:
            return 0.0
        mask = s.bend_owner == s.object_index(arg)
        if not mask.any():
            return 0.0
        stencil = sim.tables.bend_stencil[mask]
        xb = rec.x_next[stencil]
        theta = energy_mod.hinge_theta(xb)
        gt = energy_mod.hinge_theta_grad(xb)
        coeff_unit = s.bend_rest_len[mask] / s.bend_height[mask]
        gb = (2.0 * coeff_unit
              * (theta - rec.rest_angles[mask]))[:, None, None] * gt
        zb = z[_dof_indices(stencil)].reshape(-1, 4, 3)
        return -float(np.einsum("bki,bki->", gb, zb))

    if kind in ("lame_mu", "lame_lambda"):
        if not s.tets.shape[0]:
            return 0.0
        mask = s.tet_owner == s.object_index(arg)
        if not mask.any():
            return 0.0
        tets = s.tets[mask]
        wmap = _tet_w(s.tet_dm_inv[mask])
        f = np.einsum("bpi,bpj->bij", rec.x_next[tets], wmap)
        cof = energy_mod._cofactor(f)
        if kind == "lame_mu":
            p_unit = f - cof
        else:
            j = np.linalg.det(f)
            p_unit = (j - 1.0)[:, None, None] * cof
        g = s.tet_vol[mask][:, None, None] \
            * np.einsum("bij,bpj->bpi", p_unit, wmap)
        zt = z[_dof_indices(tets)].reshape(-1, 4, 3)
        return -float(np.einsum("bki,bki->", g, zt))

    pairs = rec.pairs
    if not len(pairs):
        return 0.0
    pair_stencil = pairs.stencil()
    pair_dofs = _dof_indices(pair_stencil)
    xs = rec.x_next[pair_stencil]
    xs_ref = rec.x_start[pair_stencil]

    if kind == "friction":
        mask = np.array([k == arg for k in pairs.mu_key])
        if not mask.any():
            return 0.0
        g = contact_mod._friction_grad(
            xs[mask], xs_ref[mask], pairs.normal[mask], pairs.anchor[mask],
            pairs.lam[mask], sim.params.eps_v)
        zp = z[pair_dofs[mask]].reshape(-1, 4, 3)
        return -float(np.einsum("bki,bki->", g, zp))

    if kind == "k_r":
        # both the penalty force and the cached friction strength
        # lambda = k_r * max(eps_r - d, 0) scale linearly with k_r
        gp = contact_mod._penalty_grad(xs, pairs.side, sim.params.k_r,
                                       sim.params.eps_r)
        gf = contact_mod._friction_grad(xs, xs_ref, pairs.normal,
                                        pairs.anchor, pairs.mu * pairs.lam,
                                        sim.params.eps_v)
        zp = z[pair_dofs].reshape(-1, 4, 3)
        return -float(np.einsum("bki,bki->", gp + gf, zp)) / sim.params.k_r

    raise AssertionError("unreachable: %r" % (spec,))


def _manipulator_chain(sim, tape, attach_grads):
    """Back-propagate commanded-position gradients through the rigid drive.

    The drive recursion per step is X' = R(w)(X - c) + c + dt (+- half
    opening along the rotated axis for grippers); adjoints on (X, c,
    axis) run backward to per-step action gradients.
    """
    t_steps = len(tape)
    out = np.zeros((t_steps, sim.n_action_dofs))
    col = 0
    for mi, man in enumerate(sim.manipulators):
        nd = man.n_dofs
        xbar = np.zeros((len(man.attached), 3))
        cbar = np.zeros(3)
        abar = np.zeros(3)
        signs = man.pad_signs()
        for t in reversed(range(t_steps)):
            rec = tape[t]
            xbar = xbar + attach_grads[mi][t]
            c_prev, a_prev, x_prev = rec.man_pre[mi]
            act = rec.actions[mi]
            dw = act[3:6]
            r = rotvec_matrix(dw)
            jr = _right_jacobian_t(dw)

            vtil = x_prev - c_prev
            if man.kind == "gripper":
                vtil = vtil + (0.5 * act[6] * signs)[:, None] * a_prev

            g_dt = xbar.sum(axis=0) + cbar
            rtx = xbar @ r                     # rows R^T xbar_i
            g_dw = jr @ (np.cross(vtil, rtx).sum(axis=0)
                         + np.cross(a_prev, r.T @ abar))
            out[t, col:col + 3] = g_dt
            out[t, col + 3:col + 6] = g_dw
            if man.kind == "gripper":
                axis_new = r @ a_prev
                out[t, col + 6] = 0.5 * float(
                    (signs[:, None] * xbar * axis_new).sum())
                abar = r.T @ abar + 0.5 * act[6] * (signs[:, None] * rtx).sum(
                    axis=0)
            else:
                abar = r.T @ abar
            cbar = cbar + xbar.sum(axis=0) - rtx.sum(axis=0)
            xbar = rtx
        col += nd
    return out


def _right_jacobian_t(w):
    """Transpose of the rotation right Jacobian (see dynamics)."""
    from .dynamics import rotation_right_jacobian
    return rotation_right_jacobian(w).T


def trajectory_gradient(sim: Simulator, grad_x, grad_r=None):
    """dL/d(action) for every step, shape (T, n_action_dofs)."""
    return backward_sweep(sim, grad_x, grad_r).action_grads


def parameter_gradient(sim: Simulator, grad_x, params, grad_r=None):
    """Scalar parameter gradients {name: dL/d eta}."""
    return backward_sweep(sim, grad_x, grad_r, params=params).param_grads


# ---------------------------------------------------------------------------
# discrete-structure signatures (finite-difference straddle detection)
# ---------------------------------------------------------------------------

def rollout_signature(sim: Simulator):
    """Per-step discrete structure: pair keys, active penalties, yields.

    Two rollouts whose signatures differ crossed a contact-set,
    activation-set, or yield-set boundary; finite differences across
    such a pair straddle a derivative discontinuity.
    """
    sig = []
    for rec in sim.tape:
        pairs = rec.pairs
        keys = tuple(zip(pairs.vertex.tolist(), pairs.tri_rows.tolist()))
        if len(pairs):
            d, _ = contact_mod.plane_distances(rec.x_next, pairs.vertex,
                                               pairs.tris, pairs.side)
            active = tuple((d < sim.params.eps_r).tolist())
        else:
            active = ()
        sig.append((keys, active, tuple(rec.yielded.tolist())))
    return sig


def signatures_match(sig_a, sig_b):
    return sig_a == sig_b
