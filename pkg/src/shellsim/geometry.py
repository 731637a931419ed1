"""Mesh discretization, rest configuration, and canonical simulation state.

Triangle shells carry stretch/area/bending rest quantities; tetrahedral
volumes carry per-element rest frames.  A `Scene` bundles several objects
into one global DOF numbering used by the dynamics and adjoint passes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

log = logging.getLogger(__name__)

_DEGENERATE_AREA = 1e-14
_DEGENERATE_VOL = 1e-18


# ---------------------------------------------------------------------------
# small vector helpers (complex-safe: no np.linalg.norm, branches on .real)
# ---------------------------------------------------------------------------

def vec_cross(a, b):
    """Cross product over the last axis; works for real and complex arrays."""
    return np.stack([
        a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
        a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
        a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
    ], axis=-1)


def vec_norm(a):
    """Euclidean norm over the last axis via sqrt(sum of squares)."""
    return np.sqrt((a * a).sum(axis=-1))


def atan2_smooth(s, c):
    """atan2 that admits complex dual parts.

    For real input this is np.arctan2.  For complex input the real parts
    select the branch and the imaginary part carries the first-order
    perturbation d(atan2) = (c ds - s dc) / (s^2 + c^2), which is what a
    complex-step derivative needs.
    """
    if np.iscomplexobj(s) or np.iscomplexobj(c):
        sr, cr = np.real(s), np.real(c)
        base = np.arctan2(sr, cr)
        denom = sr * sr + cr * cr
        dual = (cr * np.imag(s) - sr * np.imag(c)) / denom
        return base + 1j * dual
    return np.arctan2(s, c)


def hinge_angles(x, quads):
    """Signed dihedral angle for each hinge quadruple.

    `quads` columns are (opp_a, opp_b, e0, e1): the two vertices opposite
    the shared edge, then the shared edge endpoints as traversed by the
    first adjacent triangle.  The angle is positive when the hinge folds
    toward the side of the first triangle's normal, and is measured with
    atan2 so the full (-pi, pi) range is stable.
    """
    oa, ob = x[quads[:, 0]], x[quads[:, 1]]
    e0, e1 = x[quads[:, 2]], x[quads[:, 3]]
    n_a = vec_cross(e1 - e0, oa - e0)
    n_b = vec_cross(e0 - e1, ob - e1)
    eh = e1 - e0
    eh = eh / vec_norm(eh)[..., None]
    n_a = n_a / vec_norm(n_a)[..., None]
    n_b = n_b / vec_norm(n_b)[..., None]
    s = (vec_cross(n_b, n_a) * eh).sum(axis=-1)
    c = (n_a * n_b).sum(axis=-1)
    return atan2_smooth(s, c)


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------

@dataclass
class TriShellMesh:
    """Triangulated thin shell with rest quantities.

    bend_edges rows are (opp_a, opp_b, e0, e1); (e0, e1) is oriented as
    traversed by the lower-indexed adjacent triangle, which fixes the
    dihedral sign convention.  rest_heights is one third of the average
    altitude of the two triangles adjacent to each bend edge.
    """

    vertices: np.ndarray          # (n, 3) float64
    triangles: np.ndarray         # (t, 3) int
    edges: np.ndarray             # (e, 2) int, unique, lexicographic
    bend_edges: np.ndarray        # (b, 4) int
    bend_edge_ids: np.ndarray     # (b,) index of the shared edge in `edges`
    rest_edge_lengths: np.ndarray = field(default=None)  # (e,)
    rest_areas: np.ndarray = field(default=None)         # (t,)
    rest_heights: np.ndarray = field(default=None)       # (b,)
    rest_angles: np.ndarray = field(default=None)        # (b,)
    thickness: float = 1e-3

    @property
    def n_vertices(self):
        return self.vertices.shape[0]


@dataclass
class TetMesh:
    """Tetrahedral volume with per-element rest frames."""

    vertices: np.ndarray               # (n, 3) float64
    tets: np.ndarray                   # (t, 4) int
    rest_shape_inverses: np.ndarray = field(default=None)  # (t, 3, 3)
    rest_volumes: np.ndarray = field(default=None)         # (t,)

    @property
    def n_vertices(self):
        return self.vertices.shape[0]


@dataclass
class SceneState:
    """Canonical simulation state S = (x, v, r, M)."""

    x: np.ndarray                  # (N_v, 3) positions, m
    v: np.ndarray                  # (N_v, 3) velocities, m/s
    rest_angles: np.ndarray        # (N_e,) mutable via plasticity, rad
    manipulator_poses: np.ndarray  # (N_m,) cumulative pose scalars
    time_index: int = 0

    def copy(self):
        return SceneState(self.x.copy(), self.v.copy(), self.rest_angles.copy(),
                          self.manipulator_poses.copy(), self.time_index)


@dataclass
class DofMap:
    """Global DOF bookkeeping for a multi-object scene.

    vertex_ranges maps object name -> (start, stop) vertex indices; the
    ranges partition [0, N_v).  fixed_mask flags scalar DOFs (length
    3*N_v) that are boundary conditions or manipulator-driven.  driven_by
    holds, per vertex, the driving manipulator index or -1.
    """

    vertex_ranges: dict
    fixed_mask: np.ndarray     # (3*N_v,) bool
    driven_by: np.ndarray      # (N_v,) int

    def validate(self):
        n = self.driven_by.shape[0]
        seen = np.zeros(n, dtype=bool)
        for start, stop in self.vertex_ranges.values():
            if start < 0 or stop > n or start >= stop:
                raise ValueError("bad vertex range (%d, %d)" % (start, stop))
            if seen[start:stop].any():
                raise ValueError("overlapping vertex ranges")
            seen[start:stop] = True
        if not seen.all():
            raise ValueError("vertex ranges do not partition the scene")
        if self.fixed_mask.shape[0] != 3 * n:
            raise ValueError("fixed mask length mismatch")
        # a driven vertex must have all three coords fixed
        driven = self.driven_by >= 0
        if driven.any():
            m = self.fixed_mask.reshape(-1, 3)[driven]
            if not m.all():
                raise ValueError("manipulator-driven vertex with free DOFs")


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _unique_edges(triangles):
    """Undirected unique edges, lexicographically sorted for determinism."""
    raw = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]],
                          triangles[:, [2, 0]]], axis=0)
    raw = np.sort(raw, axis=1)
    return np.unique(raw, axis=0)


def _build_bend_edges(triangles):
    """Hinge quadruples (opp_a, opp_b, e0, e1) for interior edges.

    The first triangle of each hinge is the lower-indexed one, and (e0, e1)
    follows its winding.  Raises if an interior edge is traversed in the
    same direction by both triangles (inconsistent orientation) or shared
    by more than two.
    """
    owners = {}
    for t, (a, b, c) in enumerate(triangles):
        for (i, j) in ((a, b), (b, c), (c, a)):
            key = (min(i, j), max(i, j))
            owners.setdefault(key, []).append((t, i, j))
    quads = []
    edge_keys = []
    for key, occ in owners.items():
        if len(occ) > 2:
            raise ValueError("non-manifold edge %s shared by %d triangles"
                             % (key, len(occ)))
        if len(occ) < 2:
            continue
        (ta, ia, ja), (tb, ib, jb) = sorted(occ)
        if (ia, ja) == (ib, jb):
            raise ValueError("inconsistent orientation across edge %s" % (key,))
        opp_a = int(np.setdiff1d(triangles[ta], [ia, ja])[0])
        opp_b = int(np.setdiff1d(triangles[tb], [ib, jb])[0])
        quads.append((opp_a, opp_b, ia, ja))
        edge_keys.append(key)
    if not quads:
        return (np.zeros((0, 4), dtype=np.int64),
                np.zeros((0, 2), dtype=np.int64))
    order = np.lexsort((np.array(edge_keys)[:, 1], np.array(edge_keys)[:, 0]))
    return np.array(quads, dtype=np.int64)[order], np.array(edge_keys, dtype=np.int64)[order]


def _edge_lookup(edges, keys):
    """Row index in `edges` for each (sorted) key pair."""
    n = edges[:, 0].max() + 1 if edges.size else 1
    flat = edges[:, 0] * (n + 1) + edges[:, 1]
    want = keys[:, 0] * (n + 1) + keys[:, 1]
    order = np.argsort(flat)
    pos = np.searchsorted(flat[order], want)
    return order[pos]


def triangle_areas(x, triangles):
    d1 = x[triangles[:, 1]] - x[triangles[:, 0]]
    d2 = x[triangles[:, 2]] - x[triangles[:, 0]]
    return 0.5 * vec_norm(vec_cross(d1, d2))


def compute_rest_config(mesh):
    """Populate rest fields from the mesh's current vertex positions.

    Shells get |e|, |A|, h_e, theta_e; tets get shape inverses and volumes.
    Pure recompute: calling twice on an unchanged mesh is bit-identical.
    """
    if isinstance(mesh, TetMesh):
        d = mesh.vertices[mesh.tets[:, 1:]] - mesh.vertices[mesh.tets[:, :1]]
        dm = d.transpose(0, 2, 1)            # columns are edge vectors
        vol = np.linalg.det(dm) / 6.0
        bad = np.nonzero(vol <= _DEGENERATE_VOL)[0]
        if bad.size:
            raise ValueError("degenerate/inverted rest tet at index %d" % bad[0])
        mesh.rest_shape_inverses = np.linalg.inv(dm)
        mesh.rest_volumes = vol
        return mesh

    x = mesh.vertices
    areas = triangle_areas(x, mesh.triangles)
    bad = np.nonzero(areas <= _DEGENERATE_AREA)[0]
    if bad.size:
        raise ValueError("degenerate rest triangle at index %d" % bad[0])
    mesh.rest_areas = areas
    mesh.rest_edge_lengths = vec_norm(x[mesh.edges[:, 1]] - x[mesh.edges[:, 0]])

    if mesh.bend_edges.shape[0]:
        q = mesh.bend_edges
        elen = mesh.rest_edge_lengths[mesh.bend_edge_ids]
        # altitude of the opposite vertex over the shared edge, per side
        h_a = 2.0 * _hinge_side_areas(x, q, 0) / elen
        h_b = 2.0 * _hinge_side_areas(x, q, 1) / elen
        mesh.rest_heights = (h_a + h_b) / 2.0 / 3.0   # third of mean altitude
        mesh.rest_angles = hinge_angles(x, q)
    else:
        mesh.rest_heights = np.zeros(0)
        mesh.rest_angles = np.zeros(0)
    return mesh


def _hinge_side_areas(x, quads, side):
    opp = x[quads[:, side]]
    e0, e1 = x[quads[:, 2]], x[quads[:, 3]]
    return 0.5 * vec_norm(vec_cross(e1 - e0, opp - e0))


def build_shell(rows, cols, size, thickness=1e-3):
    """Regular triangulated grid in the xy-plane.

    rows x cols vertices with spacing `size` between neighbors; each grid
    cell is split along its (+x,+y) diagonal into two triangles wound
    counterclockwise seen from +z.  Rest angles are all zero (flat sheet).
    """
    if rows < 2 or cols < 2:
        raise ValueError("grid needs at least 2x2 vertices")
    if size <= 0:
        raise ValueError("grid spacing must be positive")
    jj, ii = np.meshgrid(np.arange(cols), np.arange(rows))
    verts = np.stack([jj.ravel() * size, ii.ravel() * size,
                      np.zeros(rows * cols)], axis=1).astype(np.float64)
    tris = []
    for i in range(rows - 1):
        for j in range(cols - 1):
            v00 = i * cols + j
            v01 = v00 + 1
            v10 = v00 + cols
            v11 = v10 + 1
            tris.append((v00, v01, v11))
            tris.append((v00, v11, v10))
    tris = np.array(tris, dtype=np.int64)
    return build_shell_from_arrays(verts, tris, thickness)


def build_shell_from_arrays(vertices, triangles, thickness=1e-3):
    """Shell mesh from explicit arrays; computes connectivity and rest state."""
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    edges = _unique_edges(triangles)
    quads, keys = _build_bend_edges(triangles)
    ids = (_edge_lookup(edges, keys) if quads.shape[0]
           else np.zeros(0, dtype=np.int64))
    mesh = TriShellMesh(vertices=vertices, triangles=triangles, edges=edges,
                        bend_edges=quads, bend_edge_ids=ids,
                        thickness=thickness)
    return compute_rest_config(mesh)


def build_block(nx, ny, nz, size, origin=(0.0, 0.0, 0.0)):
    """Axis-aligned tetrahedralized block (nx x ny x nz cells).

    Each cube cell is split into six tets sharing the main diagonal, which
    keeps orientations consistent and all rest volumes positive.
    """
    if min(nx, ny, nz) < 1 or size <= 0:
        raise ValueError("block needs >= 1 cell per axis and positive size")
    gx, gy, gz = nx + 1, ny + 1, nz + 1
    ii, jj, kk = np.meshgrid(np.arange(gx), np.arange(gy), np.arange(gz),
                             indexing="ij")
    verts = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1) * size
    verts = verts.astype(np.float64) + np.asarray(origin, dtype=np.float64)

    def vid(i, j, k):
        return (i * gy + j) * gz + k

    # six tets around the (0,0,0)-(1,1,1) diagonal of each cell
    corner_splits = [
        (0, 1, 3, 7), (0, 3, 2, 7), (0, 2, 6, 7),
        (0, 6, 4, 7), (0, 4, 5, 7), (0, 5, 1, 7),
    ]
    offs = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0),
            (0, 0, 1), (1, 0, 1), (0, 1, 1), (1, 1, 1)]
    tets = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                cell = [vid(i + o[0], j + o[1], k + o[2]) for o in offs]
                for split in corner_splits:
                    tets.append([cell[c] for c in split])
    mesh = TetMesh(vertices=verts, tets=np.array(tets, dtype=np.int64))
    return compute_rest_config(mesh)


def surface_triangles(mesh: TetMesh):
    """Boundary triangles of a tet mesh, wound with outward normals."""
    faces = {}
    local = [(1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1)]
    for tet in mesh.tets:
        for tri in local:
            f = tuple(int(tet[i]) for i in tri)
            key = tuple(sorted(f))
            if key in faces:
                faces.pop(key)
            else:
                faces[key] = f
    out = np.array(sorted(faces.values()), dtype=np.int64)
    return out if out.size else np.zeros((0, 3), dtype=np.int64)


def lumped_mass(meshes, densities, thickness=None):
    """Diagonal mass matrix entries, kg per scalar DOF.

    Each vertex receives one third (shell) or one quarter (tet) of every
    incident element's mass.  Returns the concatenated (3 * N_total,)
    diagonal; raises on any isolated zero-mass vertex.
    """
    per_vertex = []
    for idx, (mesh, rho) in enumerate(zip(meshes, densities)):
        if rho <= 0:
            raise ValueError("density must be positive")
        m = np.zeros(mesh.n_vertices)
        if isinstance(mesh, TetMesh):
            share = rho * mesh.rest_volumes / 4.0
            for c in range(4):
                np.add.at(m, mesh.tets[:, c], share)
        else:
            t = mesh.thickness if thickness is None else thickness
            share = rho * t * mesh.rest_areas / 3.0
            for c in range(3):
                np.add.at(m, mesh.triangles[:, c], share)
        if (m <= 0).any():
            raise ValueError("isolated zero-mass vertex in mesh %d" % idx)
        per_vertex.append(m)
    diag = np.concatenate(per_vertex) if per_vertex else np.zeros(0)
    return np.repeat(diag, 3)


# ---------------------------------------------------------------------------
# OBJ I/O
# ---------------------------------------------------------------------------

def load_obj(path):
    """Vertices and (fan-triangulated) faces from a Wavefront OBJ file."""
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
    if not verts:
        raise ValueError("no vertices in %s" % path)
    return (np.asarray(verts, dtype=np.float64),
            np.asarray(faces, dtype=np.int64))


def save_obj(path, vertices, triangles):
    with open(path, "w") as fh:
        for v in vertices:
            fh.write("v %.9g %.9g %.9g\n" % (v[0], v[1], v[2]))
        for t in triangles:
            fh.write("f %d %d %d\n" % (t[0] + 1, t[1] + 1, t[2] + 1))


# ---------------------------------------------------------------------------
# scene registry
# ---------------------------------------------------------------------------

@dataclass
class SceneObject:
    """One simulated object: a mesh plus its material and contact class."""

    name: str
    mesh: object                 # TriShellMesh | TetMesh
    material: object             # energy.MaterialParams
    collision_class: str = "default"
    collide: bool = True


class Scene:
    """Registry of scene objects with one global vertex/DOF numbering.

    Builds the concatenated element tables (with per-element stiffness
    coefficients resolved from each object's material) that the energy
    assembly iterates over.
    """

    def __init__(self, objects, gravity=(0.0, 0.0, -9.8)):
        self.objects = list(objects)
        self.gravity = np.asarray(gravity, dtype=np.float64)
        names = [o.name for o in self.objects]
        if len(set(names)) != len(names):
            raise ValueError("duplicate object names")

        ranges = {}
        xs = []
        offset = 0
        for obj in self.objects:
            n = obj.mesh.n_vertices
            ranges[obj.name] = (offset, offset + n)
            xs.append(obj.mesh.vertices)
            offset += n
        self.n_vertices = offset
        self.x0 = np.concatenate(xs, axis=0)
        self.dofmap = DofMap(vertex_ranges=ranges,
                             fixed_mask=np.zeros(3 * offset, dtype=bool),
                             driven_by=np.full(offset, -1, dtype=np.int64))

        self.masses = lumped_mass([o.mesh for o in self.objects],
                                  [o.material.density for o in self.objects])

        self._assemble_elements()

    # -- element tables ----------------------------------------------------
    def _assemble_elements(self):
        edges, e_rest, e_k = [], [], []
        tris, t_rest, t_k = [], [], []
        bends, b_len, b_h, b_k, b_rest = [], [], [], [], []
        b_owner = []
        tets, q_inv, q_vol, q_mu, q_lam = [], [], [], [], []
        q_owner = []
        coll_tris, coll_tri_obj = [], []

        for oi, obj in enumerate(self.objects):
            off = self.dofmap.vertex_ranges[obj.name][0]
            mesh, mat = obj.mesh, obj.material
            if isinstance(mesh, TetMesh):
                tets.append(mesh.tets + off)
                q_inv.append(mesh.rest_shape_inverses)
                q_vol.append(mesh.rest_volumes)
                q_mu.append(np.full(len(mesh.tets), mat.lame_mu))
                q_lam.append(np.full(len(mesh.tets), mat.lame_lambda))
                q_owner.append(np.full(len(mesh.tets), oi))
                if obj.collide:
                    st = surface_triangles(mesh) + off
                    coll_tris.append(st)
                    coll_tri_obj.append(np.full(len(st), oi))
            else:
                edges.append(mesh.edges + off)
                e_rest.append(mesh.rest_edge_lengths)
                e_k.append(np.full(len(mesh.edges), mat.K_e))
                tris.append(mesh.triangles + off)
                t_rest.append(mesh.rest_areas)
                t_k.append(np.full(len(mesh.triangles), mat.K_a))
                if mesh.bend_edges.shape[0]:
                    bends.append(mesh.bend_edges + off)
                    b_len.append(mesh.rest_edge_lengths[mesh.bend_edge_ids])
                    b_h.append(mesh.rest_heights)
                    b_k.append(np.full(len(mesh.bend_edges), mat.K_b))
                    b_rest.append(mesh.rest_angles)
                    b_owner.append(np.full(len(mesh.bend_edges), oi))
                if obj.collide:
                    coll_tris.append(mesh.triangles + off)
                    coll_tri_obj.append(np.full(len(mesh.triangles), oi))

        def cat(parts, shape, dtype=np.float64):
            return (np.concatenate(parts, axis=0) if parts
                    else np.zeros(shape, dtype=dtype))

        self.edges = cat(edges, (0, 2), np.int64)
        self.edge_rest = cat(e_rest, (0,))
        self.edge_k = cat(e_k, (0,))
        self.tris = cat(tris, (0, 3), np.int64)
        self.tri_rest = cat(t_rest, (0,))
        self.tri_k = cat(t_k, (0,))
        self.bends = cat(bends, (0, 4), np.int64)
        self.bend_rest_len = cat(b_len, (0,))
        self.bend_height = cat(b_h, (0,))
        self.bend_k = cat(b_k, (0,))
        self.bend_rest_angles0 = cat(b_rest, (0,))
        self.bend_owner = cat(b_owner, (0,), np.int64)
        self.tets = cat(tets, (0, 4), np.int64)
        self.tet_dm_inv = cat(q_inv, (0, 3, 3))
        self.tet_vol = cat(q_vol, (0,))
        self.tet_mu = cat(q_mu, (0,))
        self.tet_lambda = cat(q_lam, (0,))
        self.tet_owner = cat(q_owner, (0,), np.int64)
        self.collision_tris = cat(coll_tris, (0, 3), np.int64)
        self.collision_tri_object = cat(coll_tri_obj, (0,), np.int64)
        self.n_bend_edges = self.bends.shape[0]

    # -- lookups -----------------------------------------------------------
    def object_index(self, name):
        for i, o in enumerate(self.objects):
            if o.name == name:
                return i
        raise KeyError(name)

    def vertex_slice(self, name):
        start, stop = self.dofmap.vertex_ranges[name]
        return slice(start, stop)

    def vertex_object(self):
        """(N_v,) object index per vertex."""
        out = np.empty(self.n_vertices, dtype=np.int64)
        for i, o in enumerate(self.objects):
            start, stop = self.dofmap.vertex_ranges[o.name]
            out[start:stop] = i
        return out

    def initial_state(self, n_manipulator_dofs=0):
        return SceneState(x=self.x0.copy(),
                          v=np.zeros_like(self.x0),
                          rest_angles=self.bend_rest_angles0.copy(),
                          manipulator_poses=np.zeros(n_manipulator_dofs),
                          time_index=0)

    def fix_vertices(self, idx, local=None):
        """Pin vertices: fix_vertices(global_ids) or fix_vertices(name, ids)."""
        if isinstance(idx, str):
            idx = self.dofmap.vertex_ranges[idx][0] \
                + np.asarray(local, dtype=np.int64)
        mask = self.dofmap.fixed_mask.reshape(-1, 3)
        mask[np.asarray(idx, dtype=np.int64)] = True

    def set_bend_stiffness(self, name, value):
        """Override K_b for one object across the assembled tables."""
        oi = self.object_index(name)
        self.bend_k[self.bend_owner == oi] = value
        self.objects[oi].material = replace(self.objects[oi].material,
                                            K_b=float(value))
