"""Element potential energies with analytic gradients and Hessians.

Every kernel comes in a batched form (arrays of elements, used by the
assembly loop) plus a single-element wrapper returning an `EnergyEval`.
Gradients are hand-derived; Hessians are either closed-form or obtained
by complex-step differentiation of the analytic gradient, which is exact
to machine precision and free of subtractive cancellation.  All kernels
are therefore written complex-safe: norms via sqrt of squared sums,
branch decisions on real parts only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import SceneState, atan2_smooth, vec_cross, vec_norm

log = logging.getLogger(__name__)

SPD_EIGENVALUE_FLOOR = 1e-10
_CS_STEP = 1e-30   # complex-step size; second-order error ~1e-60 is below ulp


@dataclass(frozen=True)
class MaterialParams:
    """Material coefficients for one object.

    lame_mu / lame_lambda act on volumetric elements; K_e / K_a / K_b on
    shells.  yield_angle is the bending-plasticity threshold (np.inf
    disables yielding).  Stretch and bending stiffnesses are kept in the
    task-level unit system of the benchmark scenes.
    """

    lame_mu: float = 1e5
    lame_lambda: float = 1e5
    K_e: float = 1000.0
    K_a: float = 1000.0
    K_b: float = 100.0
    yield_angle: float = np.inf
    density: float = 1000.0
    thickness: float = 1e-3

    def __post_init__(self):
        if min(self.lame_mu, self.lame_lambda, self.K_e, self.K_a, self.K_b) < 0:
            raise ValueError("stiffnesses must be non-negative")
        if not self.yield_angle > 0:
            raise ValueError("yield angle must be positive")
        if self.density <= 0:
            raise ValueError("density must be positive")


@dataclass
class EnergyEval:
    """Value / gradient / Hessian triple for one element.

    gradient has one 3-vector per involved vertex (flattened); hessian is
    the dense per-element block.  `projected` marks SPD-projected blocks,
    `degenerate` marks elements evaluated at a measure-zero configuration
    where the gradient was defined by a limit convention.
    """

    value: float
    gradient: np.ndarray
    hessian: np.ndarray = None
    projected: bool = False
    degenerate: bool = False


# ---------------------------------------------------------------------------
# complex-step machinery
# ---------------------------------------------------------------------------

def complex_step_hessian(grad_fn, x, *args):
    """Hessian of an energy whose gradient is `grad_fn(x, *args)`.

    x has shape (B, P, 3); the result is (B, 3P, 3P).  grad_fn must accept
    complex x and return (B, P, 3).  Each column of the Hessian is the
    imaginary part of the gradient at a point displaced by i*h along one
    coordinate.
    """
    b, p, _ = x.shape
    h = _CS_STEP
    out = np.empty((b, 3 * p, 3 * p))
    xc = x.astype(np.complex128)
    for k in range(3 * p):
        xp = xc.copy()
        xp[:, k // 3, k % 3] += 1j * h
        out[:, :, k] = grad_fn(xp, *args).reshape(b, 3 * p).imag / h
    return 0.5 * (out + out.transpose(0, 2, 1))


# ---------------------------------------------------------------------------
# edge stretch: U = K (1 - |e|/rest)^2 rest
# ---------------------------------------------------------------------------

def stretch_edge_batch(x, rest, k):
    """Energy/gradient/Hessian for edge elements.

    x: (B, 2, 3); rest, k: (B,).  Fully analytic.  Coincident endpoints
    get a zero gradient (limit convention) and a PSD fallback Hessian.
    """
    d = x[:, 1] - x[:, 0]
    length = vec_norm(d)
    ratio = 1.0 - length / rest
    energy = k * ratio * ratio * rest

    degenerate = length < 1e-12
    safe = np.where(degenerate, 1.0, length)
    dhat = d / safe[:, None]
    du_dl = -2.0 * k * ratio                      # dU/d|e|
    g1 = du_dl[:, None] * dhat
    g1[degenerate] = 0.0
    grad = np.stack([-g1, g1], axis=1)

    b = x.shape[0]
    outer = dhat[:, :, None] * dhat[:, None, :]
    perp = np.eye(3)[None] - outer
    hl = (2.0 * k / rest)[:, None, None] * outer \
        + (du_dl / safe)[:, None, None] * perp
    hl[degenerate] = (2.0 * k[degenerate] / rest[degenerate])[:, None, None] \
        * np.eye(3)[None]
    hess = np.empty((b, 6, 6))
    hess[:, :3, :3] = hl
    hess[:, 3:, 3:] = hl
    hess[:, :3, 3:] = -hl
    hess[:, 3:, :3] = -hl
    return energy, grad, hess, degenerate


def stretch_edge(x0, x1, rest_length, k_e):
    """EnergyEval for a single stretch edge."""
    if rest_length <= 0:
        raise ValueError("rest length must be positive")
    x = np.asarray([x0, x1], dtype=np.float64)[None]
    e, g, h, dg = stretch_edge_batch(x, np.array([rest_length]),
                                     np.array([k_e]))
    return EnergyEval(float(e[0]), g[0].reshape(6), h[0],
                      degenerate=bool(dg[0]))


# ---------------------------------------------------------------------------
# area stretch: U = K (1 - A/rest)^2 rest
# ---------------------------------------------------------------------------

def _area_grad(x, rest, k):
    """Gradient of the area energy; complex-safe for Hessian stepping."""
    d1 = x[:, 1] - x[:, 0]
    d2 = x[:, 2] - x[:, 0]
    n = vec_cross(d1, d2)
    nlen = vec_norm(n)
    degenerate = np.real(nlen) < 1e-14
    safe = np.where(degenerate, 1.0, nlen)
    nhat = n / safe[:, None]
    area = 0.5 * nlen
    du_da = -2.0 * k * (1.0 - area / rest)
    # dA/dx1 = 0.5 * (x2-x0) x nhat ; dA/dx2 = 0.5 * nhat x (x1-x0)
    ga1 = 0.5 * vec_cross(d2, nhat)
    ga2 = 0.5 * vec_cross(nhat, d1)
    g1 = du_da[:, None] * ga1
    g2 = du_da[:, None] * ga2
    grad = np.stack([-(g1 + g2), g1, g2], axis=1)
    grad[degenerate] = 0.0
    return grad


def stretch_area_batch(x, rest, k):
    """Energy/gradient/Hessian for triangle area elements.

    x: (B, 3, 3).  Gradient analytic, Hessian by complex step.
    """
    d1 = x[:, 1] - x[:, 0]
    d2 = x[:, 2] - x[:, 0]
    nlen = vec_norm(vec_cross(d1, d2))
    area = 0.5 * nlen
    ratio = 1.0 - area / rest
    energy = k * ratio * ratio * rest
    grad = _area_grad(x, rest, k)
    hess = complex_step_hessian(_area_grad, x, rest, k)
    return energy, grad, hess, nlen < 1e-14


def stretch_area(x0, x1, x2, rest_area, k_a):
    """EnergyEval for a single triangle area element."""
    if rest_area <= 0:
        raise ValueError("rest area must be positive")
    x = np.asarray([x0, x1, x2], dtype=np.float64)[None]
    e, g, h, dg = stretch_area_batch(x, np.array([rest_area]),
                                     np.array([k_a]))
    return EnergyEval(float(e[0]), g[0].reshape(9), h[0],
                      degenerate=bool(dg[0]))


# ---------------------------------------------------------------------------
# hinge bending: U = K (theta - rest_angle)^2 |e| / h
# ---------------------------------------------------------------------------

def hinge_theta(x):
    """Signed dihedral angle for hinge stencils x: (B, 4, 3).

    Rows are (e0, e1, opp_a, opp_b): shared edge as traversed by the
    first triangle, then the two opposite vertices.  Complex-safe.
    """
    e0, e1, oa, ob = x[:, 0], x[:, 1], x[:, 2], x[:, 3]
    n_a = vec_cross(e1 - e0, oa - e0)
    n_b = vec_cross(e0 - e1, ob - e1)
    eh = e1 - e0
    eh = eh / vec_norm(eh)[:, None]
    n_a = n_a / vec_norm(n_a)[:, None]
    n_b = n_b / vec_norm(n_b)[:, None]
    s = (vec_cross(n_b, n_a) * eh).sum(axis=-1)
    c = (n_a * n_b).sum(axis=-1)
    return atan2_smooth(s, c)


def hinge_theta_grad(x):
    """d theta / dx for hinge stencils x: (B, 4, 3); complex-safe.

    Discrete-shells form: the opposite vertices move along their triangle
    normals scaled by edge length over squared (doubled) area; the edge
    endpoints take the complementary barycentric combinations.
    """
    e0, e1, oa, ob = x[:, 0], x[:, 1], x[:, 2], x[:, 3]
    e = e1 - e0
    elen = vec_norm(e)
    n_a = vec_cross(e1 - e0, oa - e0)
    n_b = vec_cross(e0 - e1, ob - e1)
    na2 = (n_a * n_a).sum(axis=-1)
    nb2 = (n_b * n_b).sum(axis=-1)
    ga = (elen / na2)[:, None] * n_a
    gb = (elen / nb2)[:, None] * n_b
    ta = ((oa - e0) * e).sum(axis=-1) / (elen * elen)
    tb = ((ob - e0) * e).sum(axis=-1) / (elen * elen)
    g0 = -(1.0 - ta)[:, None] * ga - (1.0 - tb)[:, None] * gb
    g1 = -ta[:, None] * ga - tb[:, None] * gb
    return np.stack([g0, g1, ga, gb], axis=1)


def bend_hinge_batch(x, rest_angle, rest_len, rest_h, k, skip_tol=1e-10):
    """Energy/gradient/Hessian for hinge elements.

    x: (B, 4, 3) rows (e0, e1, opp_a, opp_b).  Elements whose triangle
    altitude collapses below skip_tol (relative to edge length) are
    skipped with a warning: the hinge gradient is unbounded there.
    Hessian = 2K c [grad grad^T + (theta - rest) hess(theta)] with
    hess(theta) by complex step of the analytic gradient.
    """
    b = x.shape[0]
    e0, e1, oa, ob = x[:, 0], x[:, 1], x[:, 2], x[:, 3]
    elen = vec_norm(e1 - e0)
    alt_a = vec_norm(vec_cross(e1 - e0, oa - e0)) / elen
    alt_b = vec_norm(vec_cross(e0 - e1, ob - e1)) / elen
    skipped = (alt_a < skip_tol * elen) | (alt_b < skip_tol * elen)
    if skipped.any():
        log.warning("skipping %d degenerate hinge(s)", int(skipped.sum()))
        x = x.copy()
        # replace with a well-conditioned dummy stencil; outputs zeroed below
        x[skipped] = np.array([[0., 0, 0], [1, 0, 0], [.5, 1, 0], [.5, -1, 0]])

    coeff = k * rest_len / rest_h
    theta = hinge_theta(x)
    dtheta = theta - rest_angle
    energy = coeff * dtheta * dtheta
    gt = hinge_theta_grad(x)
    grad = (2.0 * coeff * dtheta)[:, None, None] * gt
    ht = complex_step_hessian(hinge_theta_grad, x)
    gflat = gt.reshape(b, 12)
    hess = 2.0 * coeff[:, None, None] * (
        gflat[:, :, None] * gflat[:, None, :] + dtheta[:, None, None] * ht)
    energy[skipped] = 0.0
    grad[skipped] = 0.0
    hess[skipped] = 0.0
    return energy, grad, hess, theta, skipped


def bend_hinge(x0, x1, x2, x3, rest_angle, rest_len, rest_h, k_b):
    """EnergyEval for one hinge; x0, x1 are the shared edge endpoints."""
    if rest_len <= 0 or rest_h <= 0:
        raise ValueError("rest length and height must be positive")
    x = np.asarray([x0, x1, x2, x3], dtype=np.float64)[None]
    e, g, h, _, skipped = bend_hinge_batch(
        x, np.array([rest_angle]), np.array([rest_len]),
        np.array([rest_h]), np.array([k_b]))
    return EnergyEval(float(e[0]), g[0].reshape(12), h[0],
                      degenerate=bool(skipped[0]))


# ---------------------------------------------------------------------------
# stable Neo-Hookean: psi = mu/2 (I_C - 3) - mu (J - 1) + lambda/2 (J - 1)^2
# ---------------------------------------------------------------------------

def _cofactor(f):
    """Cofactor matrix dJ/dF, columns are cross products of F's columns."""
    c0, c1, c2 = f[..., :, 0], f[..., :, 1], f[..., :, 2]
    return np.stack([vec_cross(c1, c2), vec_cross(c2, c0),
                     vec_cross(c0, c1)], axis=-1)


def _cross_mat(a):
    """(B, 3) -> (B, 3, 3) with M v = a x v."""
    b = a.shape[0]
    m = np.zeros((b, 3, 3), dtype=a.dtype)
    m[:, 0, 1] = -a[:, 2]
    m[:, 0, 2] = a[:, 1]
    m[:, 1, 0] = a[:, 2]
    m[:, 1, 2] = -a[:, 0]
    m[:, 2, 0] = -a[:, 1]
    m[:, 2, 1] = a[:, 0]
    return m


def _det_hessian(f):
    """d^2 J / dF^2 as (B, 3, 3, 3, 3) indexed [i, j, m, n]."""
    b = f.shape[0]
    c0, c1, c2 = f[:, :, 0], f[:, :, 1], f[:, :, 2]
    h = np.zeros((b, 3, 3, 3, 3), dtype=f.dtype)
    h[:, :, 0, :, 1] = -_cross_mat(c2)
    h[:, :, 0, :, 2] = _cross_mat(c1)
    h[:, :, 1, :, 0] = _cross_mat(c2)
    h[:, :, 1, :, 2] = -_cross_mat(c0)
    h[:, :, 2, :, 0] = -_cross_mat(c1)
    h[:, :, 2, :, 1] = _cross_mat(c0)
    return h


def neo_hookean_batch(f, mu, lam):
    """Stable Neo-Hookean density psi(F) with dpsi/dF and d2psi/dF2.

    f: (B, 3, 3).  Total function: finite for every finite F including
    inverted (J <= 0) elements -- no logarithms anywhere.
    Returns (psi, P, A) with P (B,3,3) and A (B,3,3,3,3) [i,j,m,n].
    """
    jdet = np.linalg.det(f)
    ic = (f * f).sum(axis=(1, 2))
    cof = _cofactor(f)
    psi = 0.5 * mu * (ic - 3.0) - mu * (jdet - 1.0) \
        + 0.5 * lam * (jdet - 1.0) ** 2
    scale = lam * (jdet - 1.0) - mu
    p = mu[:, None, None] * f + scale[:, None, None] * cof
    eye = np.einsum("im,jn->ijmn", np.eye(3), np.eye(3))
    a = mu[:, None, None, None, None] * eye[None] \
        + lam[:, None, None, None, None] * np.einsum("bij,bmn->bijmn", cof, cof) \
        + scale[:, None, None, None, None] * _det_hessian(f)
    return psi, p, a


def neo_hookean(f, mu, lam):
    """EnergyEval (per unit volume) of the Stable Neo-Hookean density.

    gradient is dpsi/dF flattened row-major (9,), hessian the (9, 9)
    second derivative in the same layout.
    """
    f = np.asarray(f, dtype=np.float64)[None]
    psi, p, a = neo_hookean_batch(f, np.array([1.0]) * mu,
                                  np.array([1.0]) * lam)
    return EnergyEval(float(psi[0]), p[0].reshape(9), a[0].reshape(9, 9))


def neo_hookean_element_batch(x, dm_inv, vol, mu, lam):
    """Per-tet energy with gradient/Hessian on the 12 vertex DOFs.

    x: (B, 4, 3).  F = X^T W with the linear map W built from the rest
    shape inverse, so chain rule reduces to einsums.
    """
    b = x.shape[0]
    w = np.empty((b, 4, 3), dtype=x.dtype)
    w[:, 1:, :] = dm_inv
    w[:, 0, :] = -dm_inv.sum(axis=1)
    f = np.einsum("bpi,bpj->bij", x, w)
    psi, p, a = neo_hookean_batch(f, mu, lam)
    energy = vol * psi
    grad = vol[:, None, None] * np.einsum("bij,bpj->bpi", p, w)
    hess = vol[:, None, None] * np.einsum(
        "bpj,bijmn,bqn->bpiqm", w, a, w).reshape(b, 12, 12)
    return energy, grad, hess


# ---------------------------------------------------------------------------
# SPD projection and plasticity
# ---------------------------------------------------------------------------

def project_spd_batch(h, floor=SPD_EIGENVALUE_FLOOR):
    """Clamp eigenvalues of symmetric blocks (B, n, n) to >= floor."""
    w, v = np.linalg.eigh(h)
    w = np.maximum(w, floor)
    return np.einsum("bik,bk,bjk->bij", v, w, v)


def project_spd(h, floor=SPD_EIGENVALUE_FLOOR):
    """SPD projection of one symmetric block; rejects asymmetric input."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ValueError("expected a square matrix")
    if np.abs(h - h.T).max() > 1e-9:
        raise ValueError("matrix is not symmetric")
    hs = 0.5 * (h + h.T)
    return project_spd_batch(hs[None], floor)[0]


def apply_bending_plasticity(state: SceneState, quads, kappa):
    """Yield-update of hinge rest angles after a completed step.

    For hinges with |theta - rest| > kappa the rest angle moves to
    theta - sign(theta - rest) * kappa, leaving a residual elastic angle
    of exactly kappa; all others are untouched (exact no-op).  Returns
    the yielded mask; state.rest_angles is updated in place.
    """
    if quads.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    x = state.x
    quads_local = quads[:, [2, 3, 0, 1]]     # (e0, e1, opp_a, opp_b)
    theta = hinge_theta(x[quads_local])
    delta = theta - state.rest_angles
    yielded = np.abs(delta) > kappa
    if yielded.any():
        state.rest_angles = state.rest_angles.copy()
        state.rest_angles[yielded] = (
            theta[yielded] - np.sign(delta[yielded]) * np.asarray(
                np.broadcast_to(kappa, delta.shape))[yielded])
    return yielded
