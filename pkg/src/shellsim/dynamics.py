"""Implicit-Euler forward stepping via Newton minimization.

Each timestep minimizes the incremental potential

    g(x) = 1/(2 h^2) ||x - y||^2_M + U(x),    y = x^t + h v^t + h^2 g_vec

over the free DOFs, with manipulator-driven and boundary vertices held
fixed.  The per-step tape records everything the adjoint needs to
re-assemble the system at the converged point with the frozen contact
set and yield decisions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial.transform import Rotation

from . import contact as contact_mod
from . import energy as energy_mod
from .geometry import SceneState, triangle_areas, vec_norm

log = logging.getLogger(__name__)

NEWTON_TOL = 1e-8
NEWTON_MAX_ITERS = 50
LINESEARCH_SHRINK = 0.5
LINESEARCH_C = 1e-4
LINESEARCH_MIN_STEP = 2.0 ** -20
LINESEARCH_NOISE = 1e-14        # evaluation-noise slack in the Armijo test
REG_TAU_INIT = 1e-8
REG_RETRIES = 6


# ---------------------------------------------------------------------------
# sparse system
# ---------------------------------------------------------------------------

@dataclass
class SparseSystem:
    """Symmetric sparse system H u = rhs in triplet form."""

    rows: np.ndarray
    cols: np.ndarray
    data: np.ndarray
    rhs: np.ndarray
    n: int
    constrained: bool = False

    def matrix(self):
        return sp.coo_matrix((self.data, (self.rows, self.cols)),
                             shape=(self.n, self.n)).tocsc()


def fix_dofs(system: SparseSystem, mask) -> SparseSystem:
    """Zero masked rows/columns, set unit diagonal, zero masked RHS.

    The solution of the constrained system leaves masked DOFs exactly
    unchanged.
    """
    keep = ~(mask[system.rows] | mask[system.cols])
    fixed_idx = np.nonzero(mask)[0]
    rows = np.concatenate([system.rows[keep], fixed_idx])
    cols = np.concatenate([system.cols[keep], fixed_idx])
    data = np.concatenate([system.data[keep], np.ones(len(fixed_idx))])
    rhs = system.rhs.copy()
    rhs[mask] = 0.0
    return SparseSystem(rows, cols, data, rhs, system.n, constrained=True)


def solve_spd(system: SparseSystem):
    """Sparse direct solve with a hard residual contract.

    Raises on factorization breakdown or when the residual exceeds
    1e-10 * (1 + ||b||_inf); stiff ill-conditioned systems get a few
    rounds of iterative refinement before giving up, and the caller
    owns the regularization ladder beyond that.
    """
    a = system.matrix()
    try:
        lu = spla.splu(a)
        u = lu.solve(system.rhs)
    except Exception as exc:               # singular factorization
        raise RuntimeError("sparse solve failed: %s" % exc)
    if not np.isfinite(u).all():
        raise RuntimeError("sparse solve produced non-finite values")
    bound = 1e-10 * (1.0 + np.abs(system.rhs).max())
    resid = np.abs(a @ u - system.rhs).max()
    for _ in range(3):
        if resid <= bound:
            break
        du = lu.solve(system.rhs - a @ u)
        if not np.isfinite(du).all():
            break
        u = u + du
        resid = np.abs(a @ u - system.rhs).max()
    if resid > bound:
        raise RuntimeError("solve residual %.3e exceeds contract" % resid)
    return u


# ---------------------------------------------------------------------------
# manipulators
# ---------------------------------------------------------------------------

def rotvec_matrix(w):
    return Rotation.from_rotvec(w).as_matrix()


def rotation_right_jacobian(w):
    """Right Jacobian J_r of the exponential map on rotations.

    d exp([w + dw]) = exp([w]) exp([J_r dw]) to first order; used to
    differentiate rotated vectors exactly: d(R(w) v)/dw = -R [v]x J_r.
    """
    th = np.linalg.norm(w)
    wx = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]],
                   [-w[1], w[0], 0.0]])
    if th < 1e-7:
        return np.eye(3) - 0.5 * wx + wx @ wx / 6.0
    return (np.eye(3) - (1.0 - np.cos(th)) / th ** 2 * wx
            + (th - np.sin(th)) / th ** 3 * (wx @ wx))


def rotated_vector_jacobian(w, v):
    """d(R(w) v)/dw as a 3x3 matrix (exact for any w)."""
    r = rotvec_matrix(w)
    vx = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]],
                   [-v[1], v[0], 0.0]])
    return -r @ vx @ rotation_right_jacobian(w)


class Manipulator:
    """Rigidly driven attachment set with 6 (single) or 7 (gripper) DOFs.

    The per-step action is (dx, dy, dz, wx, wy, wz[, dg]): a translation
    delta, a rotation-vector delta applied about the current center, and
    for grippers an opening-width delta that moves the two pads
    symmetrically along the gripper axis.
    """

    def __init__(self, kind, attached, x_att, center=None,
                 axis=(0.0, 0.0, 1.0), pad_split=None):
        if kind not in ("single", "gripper"):
            raise ValueError("kind must be 'single' or 'gripper'")
        self.kind = kind
        self.attached = np.asarray(attached, dtype=np.int64)
        self.x_att = np.asarray(x_att, dtype=np.float64).copy()
        self.center = (self.x_att.mean(axis=0) if center is None
                       else np.asarray(center, dtype=np.float64).copy())
        self.axis = np.asarray(axis, dtype=np.float64)
        self.axis = self.axis / vec_norm(self.axis[None])[0]
        if kind == "gripper":
            if pad_split is None:
                raise ValueError("gripper needs pad_split")
            self.pad_split = int(pad_split)
        else:
            self.pad_split = None

    @property
    def n_dofs(self):
        return 7 if self.kind == "gripper" else 6

    def pad_signs(self):
        """+1 for the first pad's vertices, -1 for the second (gripper)."""
        s = np.ones(len(self.attached))
        if self.kind == "gripper":
            s[self.pad_split:] = -1.0
        return s

    def state_tuple(self):
        return (self.center.copy(), self.axis.copy(), self.x_att.copy())

    def advance(self, action):
        """Apply one action; returns the new commanded positions."""
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.n_dofs,):
            raise ValueError("expected %d manipulator DOFs" % self.n_dofs)
        dt, dw = action[:3], action[3:6]
        r = rotvec_matrix(dw)
        self.x_att = (self.x_att - self.center) @ r.T + self.center + dt
        self.axis = r @ self.axis
        self.center = self.center + dt
        if self.kind == "gripper":
            half = 0.5 * action[6]
            signs = self.pad_signs()
            self.x_att = self.x_att + (half * signs)[:, None] * self.axis
        return self.x_att


# ---------------------------------------------------------------------------
# incremental potential
# ---------------------------------------------------------------------------

def _dof_indices(verts):
    """(B, k) vertex ids -> (B, 3k) scalar DOF ids."""
    b, k = verts.shape
    return (verts[:, :, None] * 3 + np.arange(3)).reshape(b, 3 * k)


class ElementTables:
    """Static per-scene index caches for assembly."""

    def __init__(self, scene):
        self.scene = scene
        self.edge_dofs = _dof_indices(scene.edges)
        self.tri_dofs = _dof_indices(scene.tris)
        bend_stencil = scene.bends[:, [2, 3, 0, 1]]   # (e0, e1, opp_a, opp_b)
        self.bend_stencil = bend_stencil
        self.bend_dofs = _dof_indices(bend_stencil)
        self.tet_dofs = _dof_indices(scene.tets)

    @staticmethod
    def coo_block(dofs):
        """Row/col index arrays for dense per-element blocks."""
        b, k = dofs.shape
        rows = np.repeat(dofs, k, axis=1).ravel()
        cols = np.tile(dofs, (1, k)).ravel()
        return rows, cols


class IncrementalPotential:
    """g(x) = inertia + elastic + contact for one timestep.

    Holds the step constants: inertia target y, rest angles, the frozen
    pair set with cached lambdas, and the friction reference positions.
    """

    def __init__(self, tables: ElementTables, masses, h, y, rest_angles,
                 pairs: contact_mod.ContactSet, x_friction_ref,
                 params: contact_mod.ContactParams, fixed_mask,
                 anchor_springs=None):
        self.tables = tables
        self.scene = tables.scene
        self.masses = masses
        self.h = h
        self.y = y                      # (3N,)
        self.rest_angles = rest_angles
        self.pairs = pairs
        self.params = params
        self.fixed_mask = fixed_mask
        self.free_mask = ~fixed_mask
        self.x_ref = x_friction_ref     # (N, 3): previous-step positions
        self.anchor_springs = anchor_springs   # (vert_ids, targets, k) or None
        if len(pairs):
            self.pair_stencil = pairs.stencil()
            self.pair_dofs = _dof_indices(self.pair_stencil)
            self.fric_coeff = pairs.mu * pairs.lam
            self.xs_ref = x_friction_ref[self.pair_stencil]
        else:
            self.pair_stencil = None

    # -- energy pieces -----------------------------------------------------
    def _inertia_value(self, xf):
        d = (xf - self.y)[self.free_mask]
        m = self.masses[self.free_mask]
        return 0.5 / self.h ** 2 * (m * d * d).sum()

    def elastic_value(self, x):
        s, t = self.scene, self.tables
        total = 0.0
        if len(s.edges):
            d = x[s.edges[:, 1]] - x[s.edges[:, 0]]
            el = vec_norm(d)
            r = 1.0 - el / s.edge_rest
            total += (s.edge_k * r * r * s.edge_rest).sum()
        if len(s.tris):
            a = triangle_areas(x, s.tris)
            r = 1.0 - a / s.tri_rest
            total += (s.tri_k * r * r * s.tri_rest).sum()
        if len(s.bends):
            th = energy_mod.hinge_theta(x[t.bend_stencil])
            dth = th - self.rest_angles
            total += (s.bend_k * s.bend_rest_len / s.bend_height
                      * dth * dth).sum()
        if len(s.tets):
            f = np.einsum("bpi,bpj->bij", x[s.tets], _tet_w(s.tet_dm_inv))
            psi, _, _ = energy_mod.neo_hookean_batch(f, s.tet_mu, s.tet_lambda)
            total += (s.tet_vol * psi).sum()
        if self.pair_stencil is not None:
            xs = x[self.pair_stencil]
            e_pen, _, _, _ = contact_mod.penalty_energy_batch(
                xs, self.pairs.side, self.params.k_r, self.params.eps_r,
                with_hessian=False)
            e_fric, _, _ = contact_mod.friction_energy_batch(
                xs, self.xs_ref, self.pairs.normal, self.pairs.anchor,
                self.fric_coeff, self.params.eps_v, with_hessian=False)
            total += e_pen.sum() + e_fric.sum()
        if self.anchor_springs is not None:
            ids, targets, k = self.anchor_springs
            d = x[ids] - targets
            total += 0.5 * k * (d * d).sum()
        return total

    def value(self, xf):
        return self._inertia_value(xf) + self.elastic_value(xf.reshape(-1, 3))

    def gradient(self, xf):
        """Full (3N,) gradient of g (no fixed-DOF masking)."""
        s, t = self.scene, self.tables
        n = xf.shape[0]
        g = self.masses * (xf - self.y) / self.h ** 2
        g[self.fixed_mask] = 0.0        # inertia only acts on free DOFs
        x = xf.reshape(-1, 3)

        def scatter(dofs, vals):
            nonlocal g
            g = g + np.bincount(dofs.ravel(), weights=vals.ravel(),
                                minlength=n)

        if len(s.edges):
            _, ge, _, _ = energy_mod.stretch_edge_batch(
                x[s.edges], s.edge_rest, s.edge_k)
            scatter(t.edge_dofs, ge)
        if len(s.tris):
            ga = energy_mod._area_grad(x[s.tris], s.tri_rest, s.tri_k)
            scatter(t.tri_dofs, ga)
        if len(s.bends):
            xb = x[t.bend_stencil]
            th = energy_mod.hinge_theta(xb)
            coeff = s.bend_k * s.bend_rest_len / s.bend_height
            gt = energy_mod.hinge_theta_grad(xb)
            gb = (2.0 * coeff * (th - self.rest_angles))[:, None, None] * gt
            scatter(t.bend_dofs, gb)
        if len(s.tets):
            _, gq, _ = energy_mod.neo_hookean_element_batch(
                x[s.tets], s.tet_dm_inv, s.tet_vol, s.tet_mu, s.tet_lambda)
            scatter(t.tet_dofs, gq)
        if self.pair_stencil is not None:
            xs = x[self.pair_stencil]
            gp = contact_mod._penalty_grad(xs, self.pairs.side,
                                           self.params.k_r, self.params.eps_r)
            gf = contact_mod._friction_grad(xs, self.xs_ref, self.pairs.normal,
                                            self.pairs.anchor, self.fric_coeff,
                                            self.params.eps_v)
            scatter(self.pair_dofs, gp + gf)
        if self.anchor_springs is not None:
            ids, targets, k = self.anchor_springs
            ga = k * (x[ids] - targets)
            scatter(_dof_indices(ids[:, None]), ga)
        return g

    def hessian(self, xf, project=True):
        """Assembled sparse Hessian of g as an unconstrained SparseSystem.

        project=True applies the per-element SPD projection used by the
        forward Newton solve; project=False yields the exact symmetric
        Hessian for the adjoint.
        """
        s, t = self.scene, self.tables
        n = xf.shape[0]
        x = xf.reshape(-1, 3)
        rows_l, cols_l, data_l = [], [], []

        mass_diag = self.masses / self.h ** 2
        mass_diag = np.where(self.fixed_mask, 0.0, mass_diag)
        rows_l.append(np.arange(n)); cols_l.append(np.arange(n))
        data_l.append(mass_diag)

        def add_blocks(dofs, blocks):
            r, c = ElementTables.coo_block(dofs)
            rows_l.append(r); cols_l.append(c)
            data_l.append(blocks.ravel())

        maybe = (energy_mod.project_spd_batch if project
                 else (lambda b: b))

        if len(s.edges):
            _, _, he, _ = energy_mod.stretch_edge_batch(
                x[s.edges], s.edge_rest, s.edge_k)
            add_blocks(t.edge_dofs, maybe(he))
        if len(s.tris):
            ha = energy_mod.complex_step_hessian(
                energy_mod._area_grad, x[s.tris], s.tri_rest, s.tri_k)
            add_blocks(t.tri_dofs, maybe(ha))
        if len(s.bends):
            _, _, hb, _, _ = energy_mod.bend_hinge_batch(
                x[t.bend_stencil], self.rest_angles, s.bend_rest_len,
                s.bend_height, s.bend_k)
            add_blocks(t.bend_dofs, maybe(hb))
        if len(s.tets):
            _, _, hq = energy_mod.neo_hookean_element_batch(
                x[s.tets], s.tet_dm_inv, s.tet_vol, s.tet_mu, s.tet_lambda)
            add_blocks(t.tet_dofs, maybe(hq))
        if self.pair_stencil is not None:
            xs = x[self.pair_stencil]
            _, _, hp, _ = contact_mod.penalty_energy_batch(
                xs, self.pairs.side, self.params.k_r, self.params.eps_r)
            _, _, hf = contact_mod.friction_energy_batch(
                xs, self.xs_ref, self.pairs.normal, self.pairs.anchor,
                self.fric_coeff, self.params.eps_v)
            add_blocks(self.pair_dofs, maybe(hp + hf))
        if self.anchor_springs is not None:
            ids, targets, k = self.anchor_springs
            dofs = _dof_indices(ids[:, None])
            add_blocks(dofs, np.broadcast_to(
                k * np.eye(3), (len(ids), 3, 3)).copy())

        rows = np.concatenate(rows_l)
        cols = np.concatenate(cols_l)
        data = np.concatenate(data_l)
        return SparseSystem(rows, cols, data, np.zeros(n), n)


def _tet_w(dm_inv):
    """(B, 4, 3) linear maps from tet vertex positions to F columns."""
    b = dm_inv.shape[0]
    w = np.empty((b, 4, 3))
    w[:, 1:, :] = dm_inv
    w[:, 0, :] = -dm_inv.sum(axis=1)
    return w


# ---------------------------------------------------------------------------
# newton
# ---------------------------------------------------------------------------

@dataclass
class NewtonResult:
    x: np.ndarray
    converged: bool
    iters: int
    g_final: float
    regularized: float = 0.0
    g_history: list = field(default_factory=list)


def newton_solve(ip: IncrementalPotential, x_init, tol=NEWTON_TOL,
                 max_iters=NEWTON_MAX_ITERS):
    """Minimize g from x_init; fixed DOFs are held at their x_init values.

    Convergence on the free-DOF gradient infinity norm, scaled by the
    initial inertial force magnitude.  Backtracking line search keeps g
    monotone; singular systems climb a diagonal regularization ladder.
    """
    xf = np.asarray(x_init, dtype=np.float64).reshape(-1).copy()
    free = ip.free_mask
    scale = max(1.0, np.abs((ip.masses * (xf - ip.y))[free]).max(initial=0.0)
                / ip.h ** 2)
    tau_used = 0.0
    g_cur = ip.value(xf)
    history = [g_cur]

    for it in range(max_iters):
        grad = ip.gradient(xf)
        if np.abs(grad[free]).max(initial=0.0) <= tol * scale:
            return NewtonResult(xf, True, it, g_cur, tau_used, history)
        system = ip.hessian(xf, project=True)
        system.rhs = -grad
        system = fix_dofs(system, ip.fixed_mask)

        u = None
        tau = REG_TAU_INIT
        for attempt in range(REG_RETRIES + 1):
            try:
                u = solve_spd(system)
                break
            except RuntimeError:
                diag = np.where(ip.fixed_mask, 0.0, tau)
                system = SparseSystem(
                    np.concatenate([system.rows, np.arange(system.n)]),
                    np.concatenate([system.cols, np.arange(system.n)]),
                    np.concatenate([system.data, diag]),
                    system.rhs, system.n, constrained=True)
                tau_used = tau
                tau *= 10.0
        if u is None:
            log.error("newton: linear solve failed after regularization")
            return NewtonResult(xf, False, it + 1, g_cur, tau_used, history)

        slope = float(grad[free] @ u[free])
        # the Armijo test carries a float64 evaluation-noise slack: near
        # the optimum the predicted decrease underflows the rounding noise
        # of g itself, and without the slack the search stalls before the
        # gradient reaches its attainable floor
        slack = LINESEARCH_NOISE * max(1.0, abs(g_cur))
        alpha = 1.0
        accepted = False
        while alpha >= LINESEARCH_MIN_STEP:
            xt = xf + alpha * u
            gt = ip.value(xt)
            if np.isfinite(gt) and \
                    gt <= g_cur + LINESEARCH_C * alpha * slope + slack:
                xf, g_cur = xt, gt
                history.append(g_cur)
                accepted = True
                break
            alpha *= LINESEARCH_SHRINK
        if not accepted:
            log.warning("newton: line search stalled at iteration %d", it)
            return NewtonResult(xf, False, it + 1, g_cur, tau_used, history)

    grad = ip.gradient(xf)
    converged = bool(np.abs(grad[free]).max(initial=0.0) <= tol * scale)
    return NewtonResult(xf, converged, max_iters, g_cur, tau_used, history)


# ---------------------------------------------------------------------------
# simulator
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    """Everything the adjoint needs to replay one step in reverse."""

    x_start: np.ndarray            # (N, 3) positions at step start (pre-move)
    x_next: np.ndarray             # (N, 3) converged positions
    y: np.ndarray                  # (3N,) inertia target used
    rest_angles: np.ndarray        # r^t used in the solve
    rest_angles_after: np.ndarray  # r^{t+1} after plasticity
    yielded: np.ndarray            # yield mask frozen for the backward pass
    pairs: contact_mod.ContactSet  # frozen pair snapshot (with lambdas)
    fixed_mask: np.ndarray
    actions: list                  # per-manipulator action arrays
    man_pre: list                  # per-manipulator (center, axis, x_att)
    newton_iters: int = 0
    converged: bool = True
    first_step: bool = False       # y used the independent initial velocity
    contact_report: dict = field(default_factory=dict)
    g_history: list = field(default_factory=list)


class Tape:
    def __init__(self):
        self.records = []

    def append(self, rec):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]


class Simulator:
    """Owns a scene, its manipulators, and the stepping loop."""

    def __init__(self, scene, params: contact_mod.ContactParams,
                 manipulators=(), h=5e-3, action_clamp=None,
                 anchor_springs=None, strict_actions=False,
                 newton_tol=NEWTON_TOL):
        self.scene = scene
        self.params = params
        self.manipulators = list(manipulators)
        self.h = h
        self.action_clamp = action_clamp
        self.strict_actions = strict_actions
        self.anchor_springs = anchor_springs
        self.newton_tol = newton_tol
        self.tables = ElementTables(scene)
        self.masses = scene.masses
        self.pairs = contact_mod.ContactSet()
        self.tape = Tape()
        fm = scene.dofmap.fixed_mask.copy()
        for mi, man in enumerate(self.manipulators):
            fm.reshape(-1, 3)[man.attached] = True
            scene.dofmap.driven_by[man.attached] = mi
        self.fixed_mask = fm
        gvec = np.tile(scene.gravity, scene.n_vertices)
        self.accel = gvec                       # per-DOF external acceleration
        self._kappa = self._per_bend_kappa()

    def _per_bend_kappa(self):
        s = self.scene
        if not len(s.bends):
            return np.zeros(0)
        kap = np.empty(len(s.bends))
        for oi, obj in enumerate(s.objects):
            kap[s.bend_owner == oi] = obj.material.yield_angle
        return kap

    @property
    def n_action_dofs(self):
        return sum(m.n_dofs for m in self.manipulators)

    def split_action(self, flat):
        out, k = [], 0
        for m in self.manipulators:
            out.append(np.asarray(flat[k:k + m.n_dofs], dtype=np.float64))
            k += m.n_dofs
        if k != len(flat):
            raise ValueError("action length %d != %d" % (len(flat), k))
        return out

    def step(self, state: SceneState, action_flat):
        """Advance one timestep; returns (state, StepRecord)."""
        actions = self.split_action(action_flat)
        if self.action_clamp is not None:
            clamped = [np.clip(a, -self.action_clamp, self.action_clamp)
                       for a in actions]
            if any((c != a).any() for c, a in zip(clamped, actions)):
                if self.strict_actions:
                    raise ValueError("action exceeds clamp")
                log.info("action clamped at step %d", state.time_index)
            actions = clamped

        x_start = state.x.copy()
        man_pre = [m.state_tuple() for m in self.manipulators]
        x = state.x.copy()
        for man, act in zip(self.manipulators, actions):
            x[man.attached] = man.advance(act)

        self.pairs = contact_mod.detect_collisions(x, self.scene, self.params,
                                                   prev=self.pairs)
        xf = x.reshape(-1)
        y = xf + self.h * state.v.reshape(-1) + self.h ** 2 * self.accel
        y[self.fixed_mask] = xf[self.fixed_mask]

        ip = IncrementalPotential(
            self.tables, self.masses, self.h, y, state.rest_angles,
            self.pairs, x_start, self.params, self.fixed_mask,
            self.anchor_springs)
        res = newton_solve(ip, xf, tol=self.newton_tol)
        x_next = res.x.reshape(-1, 3)

        # snapshot carries the lambdas the solve actually used; the refresh
        # below only feeds the next step (and the force report)
        pairs_snap = self.pairs.snapshot()
        contact_mod.update_lambda(self.pairs, x_next, self.params)
        report = self._contact_report()

        r_before = state.rest_angles.copy()
        state.x = x_next.copy()
        state.v = (x_next - x_start) / self.h
        yielded = energy_mod.apply_bending_plasticity(
            state, self.scene.bends, self._kappa)
        first = state.time_index == 0

        rec = StepRecord(
            x_start=x_start, x_next=x_next.copy(), y=y,
            rest_angles=r_before, rest_angles_after=state.rest_angles.copy(),
            yielded=yielded, pairs=pairs_snap,
            fixed_mask=self.fixed_mask.copy(), actions=actions,
            man_pre=man_pre, newton_iters=res.iters, converged=res.converged,
            first_step=first, contact_report=report,
            g_history=res.g_history)
        self.tape.append(rec)

        if self.n_action_dofs:
            state.manipulator_poses = state.manipulator_poses \
                + np.concatenate(actions)
        state.time_index += 1
        return state, rec

    def _contact_report(self):
        """Per object-pair contact pair counts and total normal force."""
        out = {}
        if not len(self.pairs):
            return out
        vo = self.scene.vertex_object()
        to = self.scene.collision_tri_object
        for i in range(len(self.pairs)):
            a = int(vo[self.pairs.vertex[i]])
            b = int(to[self.pairs.tri_rows[i]])
            key = (min(a, b), max(a, b))
            cnt, lam = out.get(key, (0, 0.0))
            out[key] = (cnt + 1, lam + float(self.pairs.lam[i]))
        return out

    def build_potential(self, rec: StepRecord):
        """Re-create the incremental potential of a taped step (adjoint)."""
        return IncrementalPotential(
            self.tables, self.masses, self.h, rec.y, rec.rest_angles,
            rec.pairs, rec.x_start, self.params, rec.fixed_mask,
            self.anchor_springs)
