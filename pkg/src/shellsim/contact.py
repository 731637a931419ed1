"""Vertex-triangle contact: broad phase, pair management, penalty + friction.

Pairs are created when a vertex's projection falls inside a non-incident
triangle within a detection shell, and keep a locked normal (direction
and side) from creation until release.  The penalty acts on the signed
plane distance measured on the locked side, so a vertex that entered
from one side of a thin shell can never be pushed through to the other.
Friction follows the smooth per-step kernel with the cached previous-step
normal force strength lambda_k.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import vec_cross, vec_norm

log = logging.getLogger(__name__)

_TINY = 1e-14


@dataclass
class ContactParams:
    """Contact model coefficients.

    mu_pair maps a sorted collision-class pair "a|b" to a friction
    coefficient; lookups fall back to mu_default.  eps_v is the friction
    smoothing tolerance in meters per step (the per-step displacement
    formulation folds the timestep into it).
    """

    k_r: float = 1e4
    eps_r: float = 1e-3
    eps_v: float = 1e-5
    mu_pair: dict = field(default_factory=dict)
    mu_default: float = 0.0
    margin: float = 3e-3            # detection shell beyond eps_r
    release_factor: float = 1.5     # release at d > release_factor * eps_r
    exit_slack: float = 0.25        # barycentric slack before lateral release

    def __post_init__(self):
        if self.k_r <= 0 or self.eps_r <= 0 or self.eps_v <= 0:
            raise ValueError("k_r, eps_r, eps_v must be positive")
        if self.mu_default < 0 or any(v < 0 for v in self.mu_pair.values()):
            raise ValueError("friction coefficients must be non-negative")

    @staticmethod
    def pair_key(class_a, class_b):
        return "|".join(sorted((class_a, class_b)))

    def mu(self, class_a, class_b):
        return self.mu_pair.get(self.pair_key(class_a, class_b),
                                self.mu_default)


# ---------------------------------------------------------------------------
# broad phase
# ---------------------------------------------------------------------------

class SpatialHash:
    """Triangles bucketed by the cell of their circumcenter.

    The cell size must exceed the largest circumradius plus the query
    threshold so a 3x3x3 neighborhood scan around a query point is
    complete.
    """

    def __init__(self, x, triangles, threshold, cell_size=None):
        p0 = x[triangles[:, 0]]
        p1 = x[triangles[:, 1]]
        p2 = x[triangles[:, 2]]
        center, radius = _circumcircles(p0, p1, p2)
        max_radius = radius.max() if radius.size else 0.0
        if cell_size is None:
            cell_size = 1.01 * max_radius + threshold
        if cell_size <= max_radius:
            raise ValueError(
                "cell size %.3g not greater than max circumradius %.3g"
                % (cell_size, max_radius))
        self.cell_size = cell_size
        self.threshold = threshold
        self.buckets = {}
        cells = np.floor(center / cell_size).astype(np.int64)
        for t in range(len(triangles)):
            key = (cells[t, 0], cells[t, 1], cells[t, 2])
            self.buckets.setdefault(key, []).append(t)

    def query(self, points):
        """Candidate triangle indices near each point (3x3x3 cells).

        Returns (point_idx, tri_idx) arrays covering every triangle whose
        circumcenter lies within one cell of the point's cell.
        """
        cells = np.floor(points / self.cell_size).astype(np.int64)
        pi, ti = [], []
        offsets = [(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1)
                   for k in (-1, 0, 1)]
        for p in range(points.shape[0]):
            cx, cy, cz = cells[p]
            for ox, oy, oz in offsets:
                bucket = self.buckets.get((cx + ox, cy + oy, cz + oz))
                if bucket:
                    pi.extend([p] * len(bucket))
                    ti.extend(bucket)
        return (np.asarray(pi, dtype=np.int64),
                np.asarray(ti, dtype=np.int64))


def _circumcircles(p0, p1, p2):
    """Circumcenter and circumradius of each triangle (batched)."""
    a = p1 - p0
    b = p2 - p0
    ab = vec_cross(a, b)
    denom = 2.0 * (ab * ab).sum(axis=-1)
    denom = np.maximum(denom, _TINY)
    a2 = (a * a).sum(axis=-1)
    b2 = (b * b).sum(axis=-1)
    rel = (vec_cross(a2[:, None] * b - b2[:, None] * a, ab)) / denom[:, None]
    center = p0 + rel
    radius = vec_norm(rel)
    return center, radius


# ---------------------------------------------------------------------------
# pair set
# ---------------------------------------------------------------------------

@dataclass
class ContactPair:
    """One vertex-triangle pair (scalar view of a ContactSet row)."""

    vertex: int
    triangle: np.ndarray          # (3,) vertex indices
    locked_normal: np.ndarray     # unit vector on the approach side
    side: float                   # +1/-1: sign of the plane distance at creation
    anchor: np.ndarray            # (3,) barycentric weights at creation
    lam: float = 0.0              # cached previous-step normal force, N
    mu: float = 0.0
    active: bool = True

    def __post_init__(self):
        n = np.asarray(self.locked_normal, dtype=np.float64)
        if abs(vec_norm(n[None])[0] - 1.0) > 1e-9:
            raise ValueError("locked normal must be unit length")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


class ContactSet:
    """Struct-of-arrays container for the active pairs of one scene.

    Rows are kept sorted by (vertex, triangle-row) so assembly order --
    and therefore floating-point reduction order -- is deterministic.
    """

    def __init__(self, vertex=None, tri_rows=None, tris=None, normal=None,
                 side=None, anchor=None, lam=None, mu=None, mu_key=None):
        z = np.zeros
        self.vertex = z(0, dtype=np.int64) if vertex is None else vertex
        self.tri_rows = z(0, dtype=np.int64) if tri_rows is None else tri_rows
        self.tris = z((0, 3), dtype=np.int64) if tris is None else tris
        self.normal = z((0, 3)) if normal is None else normal
        self.side = z(0) if side is None else side
        self.anchor = z((0, 3)) if anchor is None else anchor
        self.lam = z(0) if lam is None else lam
        self.mu = z(0) if mu is None else mu
        self.mu_key = ([] if mu_key is None else mu_key)   # list of str

    def __len__(self):
        return self.vertex.shape[0]

    def snapshot(self):
        """Deep copy for the tape (backward pass consumes it frozen)."""
        out = ContactSet(self.vertex.copy(), self.tri_rows.copy(),
                         self.tris.copy(), self.normal.copy(),
                         self.side.copy(), self.anchor.copy(),
                         self.lam.copy(), self.mu.copy(), list(self.mu_key))
        return out

    def pair(self, i):
        return ContactPair(int(self.vertex[i]), self.tris[i],
                           self.normal[i], float(self.side[i]),
                           self.anchor[i], float(self.lam[i]),
                           float(self.mu[i]))

    def stencil(self):
        """(P, 4) global vertex indices: vertex then triangle corners."""
        return np.concatenate([self.vertex[:, None], self.tris], axis=1)


def plane_distances(x, vertex, tris, side):
    """Signed plane distance d = side * det[...]/C for each pair.

    Returns (d, degenerate_mask); degenerate means the triangle collapsed
    (C below tolerance) and the pair should be skipped.
    """
    p = x[vertex]
    p1, p2, p3 = x[tris[:, 0]], x[tris[:, 1]], x[tris[:, 2]]
    a = p2 - p1
    b = p3 - p1
    c = p - p1
    n = vec_cross(a, b)
    cval = vec_norm(n)
    degenerate = np.real(cval) < _TINY
    cval = np.where(degenerate, 1.0, cval)
    d = side * (n * c).sum(axis=-1) / cval
    return d, degenerate


def barycentric_weights(x, vertex, tris):
    """Barycentric coordinates of each vertex's in-plane projection."""
    p = x[vertex]
    p1, p2, p3 = x[tris[:, 0]], x[tris[:, 1]], x[tris[:, 2]]
    a = p2 - p1
    b = p3 - p1
    c = p - p1
    aa = (a * a).sum(axis=-1)
    bb = (b * b).sum(axis=-1)
    ab = (a * b).sum(axis=-1)
    ca = (c * a).sum(axis=-1)
    cb = (c * b).sum(axis=-1)
    denom = aa * bb - ab * ab
    denom = np.where(np.abs(denom) < _TINY, _TINY, denom)
    w2 = (bb * ca - ab * cb) / denom
    w3 = (aa * cb - ab * ca) / denom
    return np.stack([1.0 - w2 - w3, w2, w3], axis=1)


def detect_collisions(x, scene, params: ContactParams, prev: ContactSet = None,
                      shash: SpatialHash = None):
    """Update the pair set for positions x.

    Existing pairs keep their locked normal, side, anchor, lambda and mu;
    they are released when the plane distance exceeds
    release_factor * eps_r or the projection leaves the triangle by more
    than exit_slack.  New pairs are created for vertices whose projection
    falls inside a non-incident collision triangle within eps_r + margin
    of its plane, with the normal locked on the approach side.
    """
    tris = scene.collision_tris
    if tris.shape[0] == 0:
        return ContactSet()
    threshold = params.eps_r + params.margin

    # candidate vertices: everything that appears on a collision surface
    cand_verts = np.unique(tris)
    if shash is None:
        shash = SpatialHash(x, tris, threshold)
    pi, ti = shash.query(x[cand_verts])
    v_ids = cand_verts[pi]

    keep = np.ones(len(v_ids), dtype=bool)
    tri_v = tris[ti]
    keep &= ~(tri_v == v_ids[:, None]).any(axis=1)     # incident exclusion
    v_ids, ti, tri_v = v_ids[keep], ti[keep], tri_v[keep]

    # narrow phase: |plane distance| within shell and projection inside
    d_raw, degen = plane_distances(x, v_ids, tri_v, np.ones(len(v_ids)))
    w = barycentric_weights(x, v_ids, tri_v)
    inside = (w >= 0.0).all(axis=1)
    near = (np.abs(d_raw) <= threshold) & inside & ~degen
    v_ids, ti, d_raw, w = v_ids[near], ti[near], d_raw[near], w[near]

    # dedupe and canonical order
    if len(v_ids):
        order = np.lexsort((ti, v_ids))
        v_ids, ti, d_raw, w = v_ids[order], ti[order], d_raw[order], w[order]
        dup = np.concatenate([[False], (np.diff(v_ids) == 0)
                              & (np.diff(ti) == 0)])
        v_ids, ti, d_raw, w = v_ids[~dup], ti[~dup], d_raw[~dup], w[~dup]

    existing = {}
    if prev is not None and len(prev):
        d_prev, degen_prev = plane_distances(x, prev.vertex, prev.tris,
                                             prev.side)
        w_prev = barycentric_weights(x, prev.vertex, prev.tris)
        release = (d_prev > params.release_factor * params.eps_r) \
            | (w_prev < -params.exit_slack).any(axis=1) | degen_prev
        for i in range(len(prev)):
            if not release[i]:
                existing[(int(prev.vertex[i]), int(prev.tri_rows[i]))] = i

    vert_obj = scene.vertex_object()
    classes = [o.collision_class for o in scene.objects]
    tri_obj = scene.collision_tri_object

    rows = []    # (vertex, tri_row, source, src_index)
    for j in range(len(v_ids)):
        key = (int(v_ids[j]), int(ti[j]))
        if key not in existing:
            rows.append((key[0], key[1], "new", j))
    for key, i in existing.items():
        rows.append((key[0], key[1], "old", i))
    rows.sort(key=lambda r: (r[0], r[1]))

    n = len(rows)
    out = ContactSet(
        vertex=np.empty(n, dtype=np.int64),
        tri_rows=np.empty(n, dtype=np.int64),
        tris=np.empty((n, 3), dtype=np.int64),
        normal=np.empty((n, 3)), side=np.empty(n),
        anchor=np.empty((n, 3)), lam=np.zeros(n), mu=np.empty(n),
        mu_key=[None] * n)
    for r, (v, t, src, idx) in enumerate(rows):
        out.vertex[r] = v
        out.tri_rows[r] = t
        if src == "old":
            out.tris[r] = prev.tris[idx]
            out.normal[r] = prev.normal[idx]
            out.side[r] = prev.side[idx]
            out.anchor[r] = prev.anchor[idx]
            out.lam[r] = prev.lam[idx]
            out.mu[r] = prev.mu[idx]
            out.mu_key[r] = prev.mu_key[idx]
        else:
            tv = tris[t]
            out.tris[r] = tv
            p1, p2, p3 = x[tv[0]], x[tv[1]], x[tv[2]]
            nvec = vec_cross((p2 - p1)[None], (p3 - p1)[None])[0]
            nvec = nvec / vec_norm(nvec[None])[0]
            side = 1.0 if d_raw[idx] >= 0 else -1.0
            out.normal[r] = side * nvec
            out.side[r] = side
            out.anchor[r] = w[idx]
            key = ContactParams.pair_key(classes[vert_obj[v]],
                                         classes[tri_obj[t]])
            out.mu[r] = params.mu_pair.get(key, params.mu_default)
            out.mu_key[r] = key
    return out


# ---------------------------------------------------------------------------
# penalty potential
# ---------------------------------------------------------------------------

def _penalty_grad(xs, side, k_r, eps_r):
    """Gradient of the penalty energy on (B, 4, 3) stencils; complex-safe.

    Stencil rows: vertex, then the triangle corners p1, p2, p3.
    """
    p, p1, p2, p3 = xs[:, 0], xs[:, 1], xs[:, 2], xs[:, 3]
    a = p2 - p1
    b = p3 - p1
    c = p - p1
    n = vec_cross(a, b)
    cval = vec_norm(n)
    dval = side * (n * c).sum(axis=-1) / cval
    active = np.real(dval) < eps_r

    nhat = n / cval[:, None]
    # dD: derivatives of det[a, b, c] via cross products
    d_a = vec_cross(b, c)
    d_b = vec_cross(c, a)
    d_c = n
    # dC routed through a and b
    c_a = vec_cross(b, nhat)
    c_b = vec_cross(nhat, a)
    dddx = np.empty_like(xs)
    dval_c = (n * c).sum(axis=-1)
    inv_c = 1.0 / cval
    coeff = (side * inv_c)[:, None]
    # d(D/C) = dD/C - D dC/C^2
    dddx[:, 0] = coeff * d_c
    dddx[:, 2] = coeff * (d_a - (dval_c * inv_c)[:, None] * c_a)
    dddx[:, 3] = coeff * (d_b - (dval_c * inv_c)[:, None] * c_b)
    dddx[:, 1] = -(dddx[:, 0] + dddx[:, 2] + dddx[:, 3])
    scale = np.where(active, k_r * (dval - eps_r), 0.0)
    return scale[:, None, None] * dddx


def penalty_energy_batch(xs, side, k_r, eps_r, with_hessian=True):
    """Penalty energy/gradient/Hessian over (B, 4, 3) stencils.

    Active when the locked-side plane distance is below eps_r.  Skips
    (zeroes) degenerate triangles.
    """
    from .energy import complex_step_hessian

    p, p1, p2, p3 = xs[:, 0], xs[:, 1], xs[:, 2], xs[:, 3]
    n = vec_cross(p2 - p1, p3 - p1)
    cval = vec_norm(n)
    degen = cval < _TINY
    if degen.any():
        log.warning("skipping %d degenerate contact pair(s)", int(degen.sum()))
        xs = xs.copy()
        xs[degen] = np.array([[0., 0, 1e3], [0, 0, 0], [1, 0, 0], [0, 1, 0]])
        p, p1, p2, p3 = xs[:, 0], xs[:, 1], xs[:, 2], xs[:, 3]
        n = vec_cross(p2 - p1, p3 - p1)
        cval = vec_norm(n)
    dval = side * (n * (p - p1)).sum(axis=-1) / cval
    gap = dval - eps_r
    energy = np.where(dval < eps_r, 0.5 * k_r * gap * gap, 0.0)
    grad = _penalty_grad(xs, side, k_r, eps_r)
    hess = (complex_step_hessian(_penalty_grad, xs, side, k_r, eps_r)
            if with_hessian else None)
    energy[degen] = 0.0
    grad[degen] = 0.0
    if with_hessian:
        hess[degen] = 0.0
    return energy, grad, hess, degen


def penalty_energy(pair: ContactPair, x, k_r=1e4, eps_r=1e-3):
    """EnergyEval of the repulsive penalty for one pair (12 DOFs)."""
    from .energy import EnergyEval

    xs = np.concatenate([x[pair.vertex][None], x[pair.triangle]],
                        axis=0)[None]
    e, g, h, degen = penalty_energy_batch(
        xs, np.array([pair.side]), k_r, eps_r)
    return EnergyEval(float(e[0]), g[0].reshape(12), h[0],
                      degenerate=bool(degen[0]))


# ---------------------------------------------------------------------------
# friction potential
# ---------------------------------------------------------------------------

def f0_kernel(y, eps_v):
    """Smooth friction mobilization: C1, f0'(0) = 0, f0'(y >= eps_v) = 1."""
    y = np.asarray(y, dtype=np.float64)
    inside = y <= eps_v
    cubic = -y ** 3 / (3.0 * eps_v ** 2) + y * y / eps_v + eps_v / 3.0
    return np.where(inside, cubic, y)


def f0_prime(y, eps_v):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y <= eps_v, -y * y / eps_v ** 2 + 2.0 * y / eps_v,
                    np.ones_like(y))


def _friction_grad(xs, xs_prev, normal, anchor, coeff, eps_v):
    """Gradient of the friction energy on (B, 4, 3) stencils; complex-safe.

    coeff = mu * lambda per pair.  The tangential relative displacement
    since the previous step is measured against the creation anchor and
    projected off the locked normal; xs_prev, normal, anchor, coeff are
    step constants.
    """
    rel = xs[:, 0] - np.einsum("bt,bti->bi", anchor, xs[:, 1:])
    rel_prev = xs_prev[:, 0] - np.einsum("bt,bti->bi", anchor, xs_prev[:, 1:])
    u = rel - rel_prev
    u_t = u - (u * normal).sum(axis=-1)[:, None] * normal
    y2 = (u_t * u_t).sum(axis=-1)
    y = np.sqrt(np.where(np.real(y2) < _TINY, 1.0, y2))
    still = np.real(y2) < _TINY

    # f0'(y)/y stays bounded: 2/eps_v - y/eps_v^2 inside, 1/y outside
    slope = np.where(np.real(y) <= eps_v,
                     2.0 / eps_v - y / eps_v ** 2,
                     1.0 / y)
    slope = np.where(still, 2.0 / eps_v, slope)
    gvert = (coeff * slope)[:, None] * u_t
    # project through the tangent projector's dependence on u only (normal
    # and anchor are constants), then scatter: d u / d p = I, d u / d p_i = -w_i I
    grad = np.empty_like(xs)
    grad[:, 0] = gvert
    grad[:, 1:] = -anchor[:, :, None] * gvert[:, None, :]
    return grad


def friction_energy_batch(xs, xs_prev, normal, anchor, coeff, eps_v,
                          with_hessian=True):
    """Friction energy/gradient/Hessian over (B, 4, 3) stencils."""
    from .energy import complex_step_hessian

    rel = xs[:, 0] - np.einsum("bt,bti->bi", anchor, xs[:, 1:])
    rel_prev = xs_prev[:, 0] - np.einsum("bt,bti->bi", anchor, xs_prev[:, 1:])
    u = rel - rel_prev
    u_t = u - (u * normal).sum(axis=-1)[:, None] * normal
    y = np.sqrt((u_t * u_t).sum(axis=-1))
    energy = coeff * f0_kernel(y, eps_v)
    grad = _friction_grad(xs, xs_prev, normal, anchor, coeff, eps_v)
    hess = (complex_step_hessian(_friction_grad, xs, xs_prev, normal, anchor,
                                 coeff, eps_v) if with_hessian else None)
    return energy, grad, hess


def friction_energy(pair: ContactPair, x, x_prev, eps_v=1e-5):
    """EnergyEval of the friction potential for one pair (12 DOFs)."""
    from .energy import EnergyEval

    stencil = np.concatenate([[pair.vertex], pair.triangle])
    xs = x[stencil][None]
    xp = x_prev[stencil][None]
    coeff = np.array([pair.mu * pair.lam])
    e, g, h = friction_energy_batch(xs, xp, pair.locked_normal[None],
                                    pair.anchor[None], coeff, eps_v)
    return EnergyEval(float(e[0]), g[0].reshape(12), h[0])


def update_lambda(pairs: ContactSet, x, params: ContactParams):
    """Refresh cached normal-force strengths at the converged positions."""
    if len(pairs) == 0:
        return pairs
    d, degen = plane_distances(x, pairs.vertex, pairs.tris, pairs.side)
    lam = params.k_r * np.maximum(params.eps_r - d, 0.0)
    lam[degen] = 0.0
    pairs.lam = lam
    return pairs


def brute_force_pairs(x, scene, params: ContactParams):
    """O(V*T) reference broad phase used by tests as a completeness oracle.

    Returns the set of (vertex, tri_row) with projection inside and plane
    distance within eps_r.
    """
    tris = scene.collision_tris
    out = set()
    cand = np.unique(tris)
    for v in cand:
        for t in range(tris.shape[0]):
            if v in tris[t]:
                continue
            d, degen = plane_distances(x, np.array([v]), tris[t][None],
                                       np.ones(1))
            if degen[0]:
                continue
            w = barycentric_weights(x, np.array([v]), tris[t][None])
            if (w >= 0).all() and abs(d[0]) <= params.eps_r:
                out.add((int(v), t))
    return out
