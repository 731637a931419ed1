"""Benchmark manipulation and inverse-design scenes.

Ten deterministic desk-scale scenes: seven where a trajectory of rigid
manipulator pose deltas is optimized (Lifting, Separating, Following,
FoldingU, FoldingL, PickFolding, Forming) and three where a scripted
trajectory is fixed and a scalar physical parameter is optimized
(Sliding, Bouncing, Card).  Each task bundles a scene builder, reward
function with analytic state gradients, observation downsampling, and a
feasibility-filtered rollout loop.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import contact as contact_mod
from . import energy as energy_mod
from .dynamics import Manipulator, Simulator
from .energy import MaterialParams
from .geometry import (Scene, SceneObject, build_block, build_shell,
                       build_shell_from_arrays)

log = logging.getLogger(__name__)

TASK_IDS = ("Lifting", "Separating", "Following", "FoldingU", "FoldingL",
            "PickFolding", "Forming", "Sliding", "Bouncing", "Card")

H_STEP = 5e-3                  # simulation timestep, s
SHEET_EXTENT = 0.04            # side length of the standard sheet, m
SHEET_Z = 1e-3                 # rest height of a sheet lying on the table
GRIP_GAP = 9.95e-4             # pad-to-sheet distance: just inside the
                               # contact shell, so pads start engaged
BEND_UNIT = 1e-4               # task stiffness units -> joules per hinge
FLOOR_REWARD = -1e6
MIN_RESOLUTION = 8
MAX_RESOLUTION = 32

# per-task defaults: horizon (steps), per-step action clamp (m / rad),
# friction table by collision-class pair, bending stiffness (task units),
# plastic yield threshold (rad), grid resolution, optimization mode
_DEFAULTS = {
    "Lifting": dict(
        horizon=40, clamp=1e-3, bend=100.0, yield_angle=np.inf, res=8,
        mode="trajectory", mu={"cloth|manip": 5.0, "cloth|object": 5.0}),
    "Separating": dict(
        horizon=30, clamp=2e-3, bend=100.0, yield_angle=np.inf, res=8,
        mode="trajectory", mu={"object|table": 0.0, "cloth|table": 0.2,
                               "cloth|manip": 5.0, "cloth|object": 0.2}),
    "Following": dict(
        horizon=30, clamp=2e-3, bend=100.0, yield_angle=np.inf, res=8,
        mode="trajectory", mu={"object|table": 0.0, "cloth|table": 0.2,
                               "cloth|manip": 5.0, "cloth|object": 0.2}),
    "FoldingU": dict(
        horizon=25, clamp=1e-3, bend=400.0, yield_angle=0.04, res=12,
        mode="trajectory", mu={"cloth|table": 5.0, "cloth|manip": 5.0}),
    "FoldingL": dict(
        horizon=25, clamp=1e-3, bend=400.0, yield_angle=0.04, res=12,
        mode="trajectory", mu={"cloth|table": 5.0, "cloth|manip": 5.0}),
    "PickFolding": dict(
        horizon=40, clamp=1e-3, bend=5.0, yield_angle=0.04, res=9,
        mode="trajectory", mu={"cloth|table": 0.1, "cloth|manip": 5.0}),
    "Forming": dict(
        horizon=30, clamp=1e-3, bend=200.0, yield_angle=np.inf, res=8,
        mode="trajectory", mu={"cloth|table": 5.0, "cloth|manip": 5.0}),
    "Sliding": dict(
        horizon=30, clamp=1e-3, bend=1000.0, yield_angle=np.inf, res=8,
        mode="parameters", eps_v=4e-4,
        mu={"cloth|table": 0.4, "cloth|manip": 1.0, "cloth|cloth": 0.2}),
    "Bouncing": dict(
        horizon=20, clamp=1e-3, bend=50.0, yield_angle=np.inf, res=8,
        mode="parameters", mu={"cloth|table": 0.5}),
    "Card": dict(
        horizon=30, clamp=1e-3, bend=10.0, yield_angle=np.inf, res=8,
        mode="parameters", eps_v=4e-4, force_limit=200.0,
        mu={"cloth|table": 1.0, "cloth|manip": 1.0}),
}


# ---------------------------------------------------------------------------
# task specification
# ---------------------------------------------------------------------------

@dataclass
class TaskSpec:
    """Configuration of one benchmark scene.

    bend_stiffness is in task units and maps to the hinge energy
    coefficient via BEND_UNIT.  mu_pair keys are sorted collision-class
    pairs.  mode selects whether trajectories or physical parameters are
    the optimization variables.
    """

    task_id: str
    horizon: int
    action_clamp: float
    mu_pair: dict
    bend_stiffness: float
    yield_angle: float
    resolution: int
    mode: str
    h: float = H_STEP
    obs_samples: int = 16
    goal_seed: int = 1
    force_limit: float = 50.0
    eps_v: float = 0.0             # friction smoothing override (0 = default)
    gamma: float = 1.0

    def validate(self):
        if self.task_id not in TASK_IDS:
            raise ValueError("unknown task id %r" % (self.task_id,))
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if not MIN_RESOLUTION <= self.resolution <= MAX_RESOLUTION:
            raise ValueError("resolution %d outside [%d, %d]"
                             % (self.resolution, MIN_RESOLUTION,
                                MAX_RESOLUTION))
        if self.action_clamp <= 0 or self.force_limit <= 0:
            raise ValueError("action clamp and force limit must be positive")
        if self.mode not in ("trajectory", "parameters"):
            raise ValueError("mode must be 'trajectory' or 'parameters'")


def task_spec(task_id, **overrides):
    """TaskSpec with per-task defaults, optionally overridden."""
    if task_id not in _DEFAULTS:
        raise ValueError("unknown task id %r" % (task_id,))
    d = _DEFAULTS[task_id]
    spec = TaskSpec(task_id=task_id, horizon=d["horizon"],
                    action_clamp=d["clamp"], mu_pair=dict(d["mu"]),
                    bend_stiffness=d["bend"], yield_angle=d["yield_angle"],
                    resolution=d["res"], mode=d["mode"],
                    eps_v=d.get("eps_v", 0.0),
                    force_limit=d.get("force_limit", 50.0))
    for key, val in overrides.items():
        if not hasattr(spec, key):
            raise ValueError("unknown TaskSpec field %r" % (key,))
        setattr(spec, key, dict(val) if key == "mu_pair" else val)
    spec.validate()
    return spec


@dataclass
class RewardReport:
    """Scalar reward with a per-term breakdown and feasibility flag."""

    reward: float
    terms: dict = field(default_factory=dict)
    feasible: bool = True


@dataclass
class RolloutResult:
    """Outcome of driving one trajectory through a fresh simulator."""

    rewards: np.ndarray            # per-step reward history (steps run)
    report: RewardReport           # final report (floor if infeasible)
    sim: Simulator                 # carries the tape for the adjoint
    state: object                  # final SceneState
    feasible: bool
    unreliable: bool               # >10% of steps failed to converge
    steps_run: int


@dataclass
class Task:
    """A built benchmark scene: builder plus reward/observation wiring."""

    spec: TaskSpec
    builder: object                # callable(params|None) -> (sim, state)
    sample_ids: np.ndarray         # observation downsampling vertex ids
    n_action_dofs: int
    reward_data: dict
    manip_objects: tuple           # scene object indices of manipulator pads
    cloth_objects: tuple           # scene object indices of thin shells
    scripted: np.ndarray = None    # fixed trajectory for parameter tasks
    design_params: tuple = ()
    param_init: dict = field(default_factory=dict)
    param_box: dict = field(default_factory=dict)
    floor_reward: float = FLOOR_REWARD

    def fresh(self, params=None):
        """New simulator + initial state (optionally with parameter
        overrides {route: value} for the design parameters)."""
        return self.builder(params)


def build_task(spec, resolution=None):
    """Construct the deterministic scene for a TaskSpec (or task id)."""
    if isinstance(spec, str):
        spec = task_spec(spec)
    if resolution is not None:
        spec = replace(spec, resolution=int(resolution),
                       mu_pair=dict(spec.mu_pair))
    spec.validate()
    return _BUILDER_FNS[spec.task_id](spec)


# ---------------------------------------------------------------------------
# scene construction helpers
# ---------------------------------------------------------------------------

def _shell_material(spec):
    return MaterialParams(K_b=spec.bend_stiffness * BEND_UNIT,
                          yield_angle=spec.yield_angle)


def _table_object(extent=0.14, center=(0.02, 0.02)):
    """One-cell fixed shell spanning the work area at z = 0."""
    mesh = build_shell(2, 2, size=extent)
    v = mesh.vertices.copy()
    v[:, 0] += center[0] - extent / 2.0
    v[:, 1] += center[1] - extent / 2.0
    return SceneObject("table", build_shell_from_arrays(v, mesh.triangles),
                       MaterialParams(), collision_class="table")


def _pad_object(name, center_xy, z_low, size=8e-3):
    """Kinematic cube pad; every vertex is manipulator-driven."""
    mesh = build_block(1, 1, 1, size=size,
                       origin=(center_xy[0] - size / 2.0,
                               center_xy[1] - size / 2.0, z_low))
    return SceneObject(name, mesh, MaterialParams(),
                       collision_class="manip")


def _sheet_object(spec, name="sheet", extent=SHEET_EXTENT, z=SHEET_Z,
                  rows=None, cols=None, heights=None):
    """Grid shell; heights optionally bends it into a stress-free arch."""
    r = spec.resolution
    rows = r if rows is None else rows
    cols = r if cols is None else cols
    size = extent / (cols - 1)
    mesh = build_shell(rows, cols, size=size)
    v = mesh.vertices.copy()
    v[:, 2] = z if heights is None else z + heights(v[:, 0])
    mesh = build_shell_from_arrays(v, mesh.triangles)
    return SceneObject(name, mesh, _shell_material(spec),
                       collision_class="cloth"), rows, cols, size


def _attach_all(scene, names):
    """Single 6-DoF manipulators driving every vertex of each named pad."""
    mans = []
    for name in names:
        sl = scene.vertex_slice(name)
        ids = np.arange(sl.start, sl.stop)
        mans.append(Manipulator("single", ids, scene.x0[ids]))
    return mans


def _make_sim(scene, spec, manipulators, params=None):
    kw = {"mu_pair": dict(spec.mu_pair)}
    if spec.eps_v:
        kw["eps_v"] = spec.eps_v
    cp = contact_mod.ContactParams(**kw)
    sim = Simulator(scene, cp, manipulators=manipulators, h=spec.h,
                    action_clamp=spec.action_clamp)
    for route, value in (params or {}).items():
        kind, _, arg = route.partition(":")
        if kind == "friction":
            sim.params.mu_pair[arg] = float(value)
        elif kind == "bend_k":
            scene.set_bend_stiffness(arg, float(value))
        else:
            raise ValueError("unsupported parameter route %r" % (route,))
    return sim


def _column_hinges(mesh, cols):
    """Hinges over grid edges running along y (fold lines across x).

    Returns local hinge ids and the grid column of each hinge edge.
    """
    e0, e1 = mesh.bend_edges[:, 2], mesh.bend_edges[:, 3]
    sel = np.abs(e0 - e1) == cols
    ids = np.nonzero(sel)[0]
    return ids, e0[ids] % cols


def _global_hinges(scene, name, local_ids):
    oi = scene.object_index(name)
    return np.nonzero(scene.bend_owner == oi)[0][local_ids]


def _sample_vertices(scene, names, n_samples):
    """Evenly spaced deterministic sample of the deformable vertices."""
    ids = np.concatenate([np.arange(scene.vertex_slice(n).start,
                                    scene.vertex_slice(n).stop)
                          for n in names])
    n = min(n_samples, len(ids))
    pick = np.linspace(0, len(ids) - 1, n).round().astype(np.int64)
    return ids[np.unique(pick)]


def _fold_sign(x, bend_rows, dz):
    """Sign of the mean hinge angle after displacing vertices by dz in z.

    Resolves the orientation convention of a fold direction
    geometrically, so reward signs do not depend on mesh winding.
    bend_rows are (opp_a, opp_b, e0, e1) stencils.
    """
    probe = x.copy()
    probe[:, 2] += dz
    th = energy_mod.hinge_theta(probe[bend_rows[:, [2, 3, 0, 1]]])
    s = th.mean()
    if abs(s) < 1e-12:
        raise RuntimeError("fold-sign probe produced no angle")
    return 1.0 if s >= 0 else -1.0


def _object_classes(scene):
    manips = tuple(i for i, o in enumerate(scene.objects)
                   if o.collision_class == "manip")
    cloth = tuple(i for i, o in enumerate(scene.objects)
                  if o.collision_class == "cloth")
    return manips, cloth


# ---------------------------------------------------------------------------
# builders: trajectory tasks
# ---------------------------------------------------------------------------

def _build_lifting(spec):
    # sheet pinched at one edge by a three-pad grip (two below, one above);
    # a block rests on the far end; no table -- everything hangs from the
    # pinch.  Goal: carry the block to a translated target.
    def make(params=None):
        sheet, _, _, _ = _sheet_object(spec)
        block = build_block(1, 1, 1, size=0.01,
                            origin=(0.026, SHEET_EXTENT / 2 - 0.005,
                                    SHEET_Z + 1e-3))
        ly = SHEET_EXTENT
        objs = [
            sheet,
            SceneObject("block", block, MaterialParams(),
                        collision_class="object"),
            _pad_object("pad_low_a", (4e-3, ly / 4), SHEET_Z - GRIP_GAP - 8e-3),
            _pad_object("pad_low_b", (4e-3, 3 * ly / 4),
                        SHEET_Z - GRIP_GAP - 8e-3),
            _pad_object("pad_top", (4e-3, ly / 2), SHEET_Z + GRIP_GAP),
        ]
        scene = Scene(objs)
        mans = _attach_all(scene, ("pad_low_a", "pad_low_b", "pad_top"))
        sim = _make_sim(scene, spec, mans, params)
        return sim, scene.initial_state(sim.n_action_dofs)

    sim0, _ = make()
    scene = sim0.scene
    bsl = scene.vertex_slice("block")
    goal = scene.x0[bsl] + np.array([-0.012, 0.0, 0.02])
    manips, cloth = _object_classes(scene)
    return Task(
        spec=spec, builder=make,
        sample_ids=_sample_vertices(scene, ("sheet", "block"),
                                    spec.obs_samples),
        n_action_dofs=sim0.n_action_dofs,
        reward_data={"block": (bsl.start, bsl.stop), "goal": goal},
        manip_objects=manips, cloth_objects=cloth)


def _gripper_scene(spec, params=None):
    # shared by Separating / Following: the sheet overhangs the table edge
    # by a centimetre, a block sits on its supported half, and a two-pad
    # parallel gripper pinches the overhang
    sheet, _, _, _ = _sheet_object(spec)
    block = build_block(1, 1, 1, size=0.012,
                        origin=(0.022, SHEET_EXTENT / 2 - 6e-3,
                                SHEET_Z + 1e-3))
    ly = SHEET_EXTENT
    objs = [
        sheet,
        SceneObject("block", block, MaterialParams(),
                    collision_class="object"),
        _table_object(center=(0.08, 0.02)),   # table edge at x = 0.01
        _pad_object("pad_up", (4e-3, ly / 2), SHEET_Z + GRIP_GAP, size=8e-3),
        _pad_object("pad_down", (4e-3, ly / 2), SHEET_Z - GRIP_GAP - 8e-3,
                    size=8e-3),
    ]
    scene = Scene(objs)
    scene.fix_vertices("table", np.arange(4))
    up = scene.vertex_slice("pad_up")
    down = scene.vertex_slice("pad_down")
    ids = np.concatenate([np.arange(up.start, up.stop),
                          np.arange(down.start, down.stop)])
    man = Manipulator("gripper", ids, scene.x0[ids],
                      axis=(0.0, 0.0, 1.0), pad_split=up.stop - up.start)
    sim = _make_sim(scene, spec, [man], params)
    return sim, scene.initial_state(sim.n_action_dofs)


def _build_separating(spec):
    def make(params=None):
        return _gripper_scene(spec, params)

    sim0, _ = make()
    scene = sim0.scene
    bsl = scene.vertex_slice("block")
    psl = scene.vertex_slice("sheet")
    ratio = (bsl.stop - bsl.start) / float(psl.stop - psl.start)
    base = (scene.x0[bsl.start:bsl.stop, 0].sum()
            - ratio * scene.x0[psl.start:psl.stop, 0].sum())
    manips, cloth = _object_classes(scene)
    return Task(
        spec=spec, builder=make,
        sample_ids=_sample_vertices(scene, ("sheet", "block"),
                                    spec.obs_samples),
        n_action_dofs=sim0.n_action_dofs,
        reward_data={"block": (bsl.start, bsl.stop),
                     "sheet": (psl.start, psl.stop), "ratio": ratio,
                     "base": base},
        manip_objects=manips, cloth_objects=cloth)


def _build_following(spec):
    def make(params=None):
        return _gripper_scene(spec, params)

    sim0, _ = make()
    scene = sim0.scene
    bsl = scene.vertex_slice("block")
    base = scene.x0[bsl.start:bsl.stop, 0].mean()
    manips, cloth = _object_classes(scene)
    return Task(
        spec=spec, builder=make,
        sample_ids=_sample_vertices(scene, ("sheet", "block"),
                                    spec.obs_samples),
        n_action_dofs=sim0.n_action_dofs,
        reward_data={"block": (bsl.start, bsl.stop), "base": base},
        manip_objects=manips, cloth_objects=cloth)


def _folding_scene(spec, params=None):
    # a strip lying flat for three columns, then curling through ~210
    # degrees into a stress-free loop; the first two columns are pinned
    rows, cols = 3, spec.resolution
    sp = 0.066 / (cols - 1)
    sp_w = 6e-3
    n_flat = 3
    turn = 3.67
    rho = (cols - n_flat) * sp / turn
    x_c = np.empty(cols)
    z_c = np.empty(cols)
    x_e = (n_flat - 1) * sp
    for j in range(cols):
        if j < n_flat:
            x_c[j], z_c[j] = j * sp, SHEET_Z
        else:
            phi = (j - n_flat + 1) * sp / rho
            x_c[j] = x_e + rho * np.sin(phi)
            z_c[j] = SHEET_Z + rho * (1.0 - np.cos(phi))
    base = build_shell(rows, cols, size=sp)
    v = base.vertices.copy()
    jj = np.arange(rows * cols) % cols
    ii = np.arange(rows * cols) // cols
    v[:, 0] = x_c[jj]
    v[:, 1] = ii * sp_w
    v[:, 2] = z_c[jj]
    strip = build_shell_from_arrays(v, base.triangles)

    j_apex = int(np.argmax(z_c))
    objs = [
        SceneObject("strip", strip, _shell_material(spec),
                    collision_class="cloth"),
        _table_object(center=(0.02, 6e-3)),
        _pad_object("pad", (x_c[j_apex], sp_w), z_c[j_apex] + GRIP_GAP),
    ]
    scene = Scene(objs)
    scene.fix_vertices("strip", np.nonzero(jj < 2)[0])
    scene.fix_vertices("table", np.arange(4))
    mans = _attach_all(scene, ("pad",))
    sim = _make_sim(scene, spec, mans, params)
    return sim, scene.initial_state(sim.n_action_dofs)


def _build_folding(spec):
    def make(params=None):
        return _folding_scene(spec, params)

    sim0, _ = make()
    scene = sim0.scene
    strip = scene.objects[scene.object_index("strip")].mesh
    local, _ = _column_hinges(strip, spec.resolution)
    rest = strip.rest_angles[local]
    # keep only full-curl hinges (interior arc): their rest angles are all
    # identical, so equal-size bands start the reward at exactly zero
    amax = np.abs(rest).max()
    if amax < 1e-6:
        raise RuntimeError("strip has no curved hinges")
    curved = local[np.abs(rest) > 0.9 * amax]
    sgn = np.sign(strip.rest_angles[curved])
    if not (sgn == sgn[0]).all():
        raise RuntimeError("inconsistent curl sign along the strip")
    mid_z = 0.5 * (strip.vertices[strip.bend_edges[curved, 2], 2]
                   + strip.vertices[strip.bend_edges[curved, 3], 2])
    order = np.argsort(mid_z, kind="stable")
    k = len(curved) // 3
    lower = np.sort(curved[order[:k]])
    upper = np.sort(curved[order[-k:]])
    manips, cloth = _object_classes(scene)
    return Task(
        spec=spec, builder=make,
        sample_ids=_sample_vertices(scene, ("strip",), spec.obs_samples),
        n_action_dofs=sim0.n_action_dofs,
        reward_data={"upper": _global_hinges(scene, "strip", upper),
                     "lower": _global_hinges(scene, "strip", lower),
                     "sign": float(sgn[0])},
        manip_objects=manips, cloth_objects=cloth)


def _build_pickfolding(spec):
    # flat sheet balanced on a fixed arched rail; one pad under each
    # overhanging edge; the goal crease runs up the central column
    rho_a = 8e-3
    x_mid = SHEET_EXTENT / 2.0

    def make(params=None):
        sheet, rows, cols, size = _sheet_object(spec, z=rho_a + SHEET_Z)
        arch_cols = 9
        phi = np.linspace(np.pi, 0.0, arch_cols)
        ax = x_mid + rho_a * np.cos(phi)
        az = rho_a * np.sin(phi)
        arch_base = build_shell(3, arch_cols, size=1.0)
        av = arch_base.vertices.copy()
        ji = np.arange(3 * arch_cols) % arch_cols
        ri = np.arange(3 * arch_cols) // arch_cols
        av[:, 0] = ax[ji]
        av[:, 1] = -5e-3 + ri * (SHEET_EXTENT + 1e-2) / 2.0
        av[:, 2] = az[ji]
        arch = build_shell_from_arrays(av, arch_base.triangles)
        ly = SHEET_EXTENT
        objs = [
            sheet,
            SceneObject("table", arch, MaterialParams(),
                        collision_class="table"),
            _pad_object("pad_a", (x_mid - 0.0175, ly / 2),
                        rho_a + SHEET_Z - GRIP_GAP - 7e-3, size=7e-3),
            _pad_object("pad_b", (x_mid + 0.0175, ly / 2),
                        rho_a + SHEET_Z - GRIP_GAP - 7e-3, size=7e-3),
        ]
        scene = Scene(objs)
        scene.fix_vertices("table", np.arange(3 * arch_cols))
        mans = _attach_all(scene, ("pad_a", "pad_b"))
        sim = _make_sim(scene, spec, mans, params)
        return sim, scene.initial_state(sim.n_action_dofs)

    sim0, _ = make()
    scene = sim0.scene
    sheet = scene.objects[scene.object_index("sheet")].mesh
    cols = spec.resolution
    size = SHEET_EXTENT / (cols - 1)
    local, col = _column_hinges(sheet, cols)
    mid = local[np.abs(col * size - x_mid) < 0.51 * size]
    if not mid.size:
        raise RuntimeError("no central crease hinges found")
    gmid = _global_hinges(scene, "sheet", mid)
    # tent probe: folding both halves up around the centre resolves the
    # angle sign convention for "folded" at these hinges
    ssl = scene.vertex_slice("sheet")
    dz = np.zeros(scene.n_vertices)
    dz[ssl] = 2e-3 * np.abs(scene.x0[ssl, 0] - x_mid) / x_mid
    sign = _fold_sign(scene.x0, scene.bends[gmid], dz)
    manips, cloth = _object_classes(scene)
    return Task(
        spec=spec, builder=make,
        sample_ids=_sample_vertices(scene, ("sheet",), spec.obs_samples),
        n_action_dofs=sim0.n_action_dofs,
        reward_data={"quads": scene.bends[gmid][:, [2, 3, 0, 1]],
                     "sign": sign},
        manip_objects=manips, cloth_objects=cloth)


def _build_forming(spec):
    # stress-free arched sheet with one fixed edge and a pad on the apex;
    # the goal shape is the end of a seeded random rollout
    amp = 8e-3

    def make(params=None):
        sheet, rows, cols, size = _sheet_object(
            spec, heights=lambda x: amp * np.sin(np.pi * x / SHEET_EXTENT))
        apex_x = SHEET_EXTENT / 2.0
        objs = [
            sheet,
            _table_object(),
            _pad_object("pad", (apex_x, SHEET_EXTENT / 2),
                        SHEET_Z + amp + GRIP_GAP),
        ]
        scene = Scene(objs)
        scene.fix_vertices("sheet", np.nonzero(
            np.arange(rows * cols) % cols == 0)[0])
        scene.fix_vertices("table", np.arange(4))
        mans = _attach_all(scene, ("pad",))
        sim = _make_sim(scene, spec, mans, params)
        return sim, scene.initial_state(sim.n_action_dofs)

    sim0, state0 = make()
    rng = np.random.default_rng(spec.goal_seed)
    acts = rng.uniform(-spec.action_clamp, spec.action_clamp,
                       (spec.horizon, sim0.n_action_dofs))
    # bias the goal rollout into a firm press so the goal shape differs
    # visibly from the rest arch; lateral motion stays seeded-random
    acts[:12, 2] = -6e-4
    acts[12:, 2] = 0.0
    for t in range(spec.horizon):
        state0, _ = sim0.step(state0, acts[t])
    scene = sim0.scene
    sl = scene.vertex_slice("sheet")
    goal = state0.x[sl].copy()
    manips, cloth = _object_classes(scene)
    return Task(
        spec=spec, builder=make,
        sample_ids=_sample_vertices(scene, ("sheet",), spec.obs_samples),
        n_action_dofs=sim0.n_action_dofs,
        reward_data={"sheet": (sl.start, sl.stop), "goal": goal},
        manip_objects=manips, cloth_objects=cloth)


# ---------------------------------------------------------------------------
# builders: inverse-design tasks (fixed scripted trajectories)
# ---------------------------------------------------------------------------

def _build_sliding(spec):
    # three stacked sheets; the pad presses on the top one and drags it
    # backward; the optimized quantity is the sheet-sheet friction
    def make(params=None):
        # staggered gaps: each sheet starts outside the layer below's
        # repulsion shell but inside detection range, then settles
        z_top = 3.45e-3
        s0, _, _, _ = _sheet_object(spec, name="sheet_bottom", z=SHEET_Z)
        s1, _, _, _ = _sheet_object(spec, name="sheet_mid", z=2.2e-3)
        s2, _, _, _ = _sheet_object(spec, name="sheet_top", z=z_top)
        objs = [
            s0, s1, s2,
            _table_object(),
            _pad_object("pad", (SHEET_EXTENT / 2, SHEET_EXTENT / 2),
                        z_top + GRIP_GAP),
        ]
        scene = Scene(objs)
        scene.fix_vertices("table", np.arange(4))
        mans = _attach_all(scene, ("pad",))
        sim = _make_sim(scene, spec, mans, params)
        return sim, scene.initial_state(sim.n_action_dofs)

    sim0, _ = make()
    scene = sim0.scene
    sl = scene.vertex_slice("sheet_bottom")
    base = scene.x0[sl, 0].sum()
    script = np.zeros((spec.horizon, 6))
    script[:8, 2] = -8e-5                     # press: follow the stack
    script[8:28, 0] = -8e-4                   # as it settles, then drag
    manips, cloth = _object_classes(scene)
    return Task(
        spec=spec, builder=make,
        sample_ids=_sample_vertices(
            scene, ("sheet_bottom", "sheet_mid", "sheet_top"),
            spec.obs_samples),
        n_action_dofs=sim0.n_action_dofs,
        reward_data={"bottom": (sl.start, sl.stop), "base": base},
        manip_objects=manips, cloth_objects=cloth,
        scripted=script,
        design_params=("friction:cloth|cloth",),
        param_init={"friction:cloth|cloth": spec.mu_pair["cloth|cloth"]},
        param_box={"friction:cloth|cloth": (1e-3, 10.0)})


def _build_bouncing(spec):
    # flat sheet with two creased rest-angle columns; the stored hinge
    # energy folds the flaps against the table and kicks the body up;
    # no manipulator
    def make(params=None):
        r = spec.resolution
        size = SHEET_EXTENT / (r - 1)
        mesh = build_shell(r, r, size=size)
        v = mesh.vertices.copy()
        v[:, 2] = SHEET_Z
        mesh = build_shell_from_arrays(v, mesh.triangles)
        local, col = _column_hinges(mesh, r)
        c_lo, c_hi = r // 3, r - 1 - r // 3
        crease = local[(col == c_lo) | (col == c_hi)]
        # flap-down probe: lowering both outer flaps resolves the angle
        # sign convention for "folded toward the table"
        jv = np.arange(r * r) % r
        dz = np.zeros(r * r)
        dz[jv < c_lo] = -2e-3 * (c_lo - jv[jv < c_lo]) / c_lo
        dz[jv > c_hi] = -2e-3 * (jv[jv > c_hi] - c_hi) / (r - 1 - c_hi)
        sgn = _fold_sign(mesh.vertices, mesh.bend_edges[crease], dz)
        mesh.rest_angles[crease] = sgn * 0.9
        objs = [
            SceneObject("sheet", mesh, _shell_material(spec),
                        collision_class="cloth"),
            _table_object(),
        ]
        scene = Scene(objs)
        scene.fix_vertices("table", np.arange(4))
        sim = _make_sim(scene, spec, [], params)
        return sim, scene.initial_state(0)

    sim0, _ = make()
    scene = sim0.scene
    r = spec.resolution
    mesh = scene.objects[0].mesh
    local, col = _column_hinges(mesh, r)
    crease = local[(col == r // 3) | (col == r - 1 - r // 3)]
    verts = np.unique(mesh.bend_edges[crease][:, 2:].ravel())
    sl = scene.vertex_slice("sheet")
    base = scene.x0[verts + sl.start, 2].sum()
    manips, cloth = _object_classes(scene)
    return Task(
        spec=spec, builder=make,
        sample_ids=_sample_vertices(scene, ("sheet",), spec.obs_samples),
        n_action_dofs=0,
        reward_data={"crease_verts": verts + sl.start, "base": base},
        manip_objects=manips, cloth_objects=cloth,
        scripted=np.zeros((spec.horizon, 0)),
        design_params=("bend_k:sheet",),
        param_init={"bend_k:sheet": spec.bend_stiffness * BEND_UNIT},
        param_box={"bend_k:sheet": (1e-6, 1.0)})


def _build_card(spec):
    # card pinned near its far end by two pads while a pusher block rams
    # its free edge, buckling it against the pins; releasing the pins
    # lets the stored bending energy snap the card straight and launch
    # it forward off the table edge
    def make(params=None):
        r = spec.resolution
        rows = max(3, (r + 1) // 2)
        length = 0.03
        size = length / (r - 1)
        mesh = build_shell(rows, r, size=size)
        v = mesh.vertices.copy()
        # slight stress-free arch: breaks the buckling symmetry so
        # compression always bows the card upward; the flat ends start
        # just inside the table's repulsion shell so the resting weight
        # is carried from the first step
        v[:, 2] = (SHEET_Z - 5e-6
                   + 2e-4 * np.sin(np.pi * v[:, 0] / length))
        mesh = build_shell_from_arrays(v, mesh.triangles)
        wy = (rows - 1) * size
        objs = [
            SceneObject("card", mesh, _shell_material(spec),
                        collision_class="cloth"),
            # table edge at x = 5e-3 so the pusher block, whose bottom
            # sits below z = 0, never meets it
            _table_object(center=(0.075, wy / 2)),
            _pad_object("pin_a", (length - 2e-3, wy / 4),
                        SHEET_Z + GRIP_GAP, size=5e-3),
            _pad_object("pin_b", (length - 2e-3, 3 * wy / 4),
                        SHEET_Z + GRIP_GAP, size=5e-3),
            _pad_object("push", (-7e-3 - GRIP_GAP, wy / 2),
                        SHEET_Z - 7e-3, size=14e-3),
        ]
        scene = Scene(objs)
        scene.fix_vertices("table", np.arange(4))
        mans = _attach_all(scene, ("pin_a", "pin_b", "push"))
        sim = _make_sim(scene, spec, mans, params)
        state = scene.initial_state(sim.n_action_dofs)
        # settle the arch to its gravity equilibrium before the episode:
        # the sag crosses a shallow snap-through that is slow to solve,
        # and doing it here keeps the rollout's first step cheap
        zero = np.zeros(sim.n_action_dofs)
        for _ in range(8):
            state, _ = sim.step(state, zero)
        state.v[:] = 0.0
        state.time_index = 0
        sim.tape.records.clear()
        return sim, state

    sim0, state0 = make()
    scene = sim0.scene
    sl = scene.vertex_slice("card")
    base = state0.x[sl, 0].sum()       # settled, not as-built
    # dof layout: pin_a 0-5, pin_b 6-11, push 12-17 (x, y, z, rotations)
    script = np.zeros((spec.horizon, 18))
    script[:4, 2] = -4e-5                     # pins press down
    script[:4, 8] = -4e-5
    script[4:16, 12] = 4e-4                   # pusher rams the free edge
    script[17:23, 2] = 1e-3                   # pins release: the card
    script[17:23, 8] = 1e-3                   # snaps straight and launches
    manips, cloth = _object_classes(scene)
    return Task(
        spec=spec, builder=make,
        sample_ids=_sample_vertices(scene, ("card",), spec.obs_samples),
        n_action_dofs=sim0.n_action_dofs,
        reward_data={"card": (sl.start, sl.stop), "base": base,
                     "sign": 1.0},
        manip_objects=manips, cloth_objects=cloth,
        scripted=script,
        design_params=("bend_k:card",),
        param_init={"bend_k:card": spec.bend_stiffness * BEND_UNIT},
        param_box={"bend_k:card": (1e-6, 1.0)})


_BUILDER_FNS = {
    "Lifting": _build_lifting,
    "Separating": _build_separating,
    "Following": _build_following,
    "FoldingU": _build_folding,
    "FoldingL": _build_folding,
    "PickFolding": _build_pickfolding,
    "Forming": _build_forming,
    "Sliding": _build_sliding,
    "Bouncing": _build_bouncing,
    "Card": _build_card,
}


# ---------------------------------------------------------------------------
# rewards
# ---------------------------------------------------------------------------

def _log_view(raw):
    """Monotone -log10(-raw) view of a non-positive squared-distance
    reward, saturated near zero so it stays finite."""
    return -np.log10(max(-raw, 1e-12))


def reward(task: Task, state) -> RewardReport:
    """Scalar task reward for one state (pure: state in, report out)."""
    d = task.reward_data
    tid = task.spec.task_id
    if tid in ("Lifting", "Forming"):
        key = "block" if tid == "Lifting" else "sheet"
        lo, hi = d[key]
        diff = state.x[lo:hi] - d["goal"]
        raw = -float((diff * diff).sum())
        return RewardReport(raw, {"raw": raw, "log10": _log_view(raw)})
    if tid == "Separating":
        lo, hi = d["block"]
        plo, phi = d["sheet"]
        bx = float(state.x[lo:hi, 0].sum())
        px = float(state.x[plo:phi, 0].sum())
        r = bx - d["ratio"] * px - d["base"]
        return RewardReport(r, {"block_x": bx, "sheet_x": px})
    if tid == "Following":
        lo, hi = d["block"]
        r = d["base"] - float(state.x[lo:hi, 0].mean())
        return RewardReport(r, {"mean_x": float(state.x[lo:hi, 0].mean())})
    if tid in ("FoldingU", "FoldingL"):
        up = float(state.rest_angles[d["upper"]].sum()) * d["sign"]
        low = float(state.rest_angles[d["lower"]].sum()) * d["sign"]
        r = up - low if tid == "FoldingU" else low - up
        return RewardReport(r, {"upper": up, "lower": low})
    if tid == "PickFolding":
        th = energy_mod.hinge_theta(state.x[d["quads"]])
        r = d["sign"] * float(th.sum())
        return RewardReport(r, {"mean_angle": float(th.mean())})
    if tid == "Sliding":
        lo, hi = d["bottom"]
        r = d["base"] - float(state.x[lo:hi, 0].sum())
        return RewardReport(r, {"drag_x": r / (hi - lo)})
    if tid == "Bouncing":
        r = float(state.x[d["crease_verts"], 2].sum()) - d["base"]
        return RewardReport(r, {"lift_z": r / len(d["crease_verts"])})
    if tid == "Card":
        lo, hi = d["card"]
        r = d["sign"] * (float(state.x[lo:hi, 0].sum()) - d["base"])
        return RewardReport(r, {"shot_x": r / (hi - lo)})
    raise ValueError("unknown task id %r" % (tid,))


def reward_gradients(task: Task, state):
    """(d reward / d x, d reward / d rest angles) at one state."""
    d = task.reward_data
    tid = task.spec.task_id
    gx = np.zeros_like(state.x)
    gr = np.zeros_like(state.rest_angles)
    if tid in ("Lifting", "Forming"):
        key = "block" if tid == "Lifting" else "sheet"
        lo, hi = d[key]
        gx[lo:hi] = -2.0 * (state.x[lo:hi] - d["goal"])
    elif tid == "Separating":
        lo, hi = d["block"]
        plo, phi = d["sheet"]
        gx[lo:hi, 0] = 1.0
        gx[plo:phi, 0] = -d["ratio"]
    elif tid == "Following":
        lo, hi = d["block"]
        gx[lo:hi, 0] = -1.0 / (hi - lo)
    elif tid in ("FoldingU", "FoldingL"):
        s = d["sign"] if tid == "FoldingU" else -d["sign"]
        gr[d["upper"]] = s
        gr[d["lower"]] = -s
    elif tid == "PickFolding":
        gt = energy_mod.hinge_theta_grad(state.x[d["quads"]])
        np.add.at(gx, d["quads"].ravel(),
                  (d["sign"] * gt).reshape(-1, 3))
    elif tid == "Sliding":
        lo, hi = d["bottom"]
        gx[lo:hi, 0] = -1.0
    elif tid == "Bouncing":
        gx[d["crease_verts"], 2] = 1.0
    elif tid == "Card":
        lo, hi = d["card"]
        gx[lo:hi, 0] = d["sign"]
    else:
        raise ValueError("unknown task id %r" % (tid,))
    return gx, gr


# ---------------------------------------------------------------------------
# observation
# ---------------------------------------------------------------------------

def observe(task: Task, state):
    """Sampled positions+velocities followed by manipulator poses."""
    ids = task.sample_ids
    block = np.concatenate([state.x[ids], state.v[ids]], axis=1)
    return np.concatenate([block.ravel(), state.manipulator_poses])


# ---------------------------------------------------------------------------
# rollout with feasibility filter
# ---------------------------------------------------------------------------

def _feasibility(task, rec):
    """(feasible, manipulator force) from one step's contact report.

    The total normal force on manipulators is always capped; trajectory
    tasks additionally require a manipulator to stay in contact with a
    thin shell (scripted parameter tasks may release on purpose).
    """
    if not task.manip_objects:
        return True, 0.0
    force = 0.0
    touching = False
    manips = set(task.manip_objects)
    cloth = set(task.cloth_objects)
    for (a, b), (count, lam) in rec.contact_report.items():
        in_a, in_b = a in manips, b in manips
        if in_a == in_b:     # manip-manip and non-manip pairs don't count
            continue
        force += lam
        other = b if in_a else a
        if other in cloth and count > 0:
            touching = True
    if force > task.spec.force_limit:
        return False, force
    if task.spec.mode == "trajectory" and not touching:
        return False, force
    return True, force


def rollout(task: Task, actions) -> RolloutResult:
    """Drive one trajectory through a fresh simulator.

    Aborts with the floor reward as soon as the feasibility filter
    trips; flags the result unreliable if over 10% of the executed
    steps failed to converge.
    """
    actions = np.asarray(actions, dtype=np.float64)
    if actions.shape != (task.spec.horizon, task.n_action_dofs):
        raise ValueError("trajectory shape %s != (%d, %d)"
                         % (actions.shape, task.spec.horizon,
                            task.n_action_dofs))
    sim, state = task.fresh()
    return resume_rollout(task, sim, state, actions)


def resume_rollout(task, sim, state, actions):
    """Rollout body on an existing simulator (parameter overrides)."""
    rewards = []
    nonconv = 0
    for t in range(actions.shape[0]):
        state, rec = sim.step(state, actions[t])
        nonconv += 0 if rec.converged else 1
        rewards.append(reward(task, state).reward)
        ok, force = _feasibility(task, rec)
        if not ok:
            log.info("rollout infeasible at step %d (force %.2f N)",
                     t, force)
            rep = RewardReport(task.floor_reward,
                               {"floor": task.floor_reward,
                                "manip_force": force}, feasible=False)
            return RolloutResult(np.asarray(rewards), rep, sim, state,
                                 False, False, t + 1)
    rep = reward(task, state)
    unreliable = nonconv > 0.1 * actions.shape[0]
    if unreliable:
        log.warning("rollout unreliable: %d/%d steps unconverged",
                    nonconv, actions.shape[0])
    return RolloutResult(np.asarray(rewards), rep, sim, state, True,
                         unreliable, actions.shape[0])


def zero_actions(task: Task):
    return np.zeros((task.spec.horizon, task.n_action_dofs))


def state_hash(state):
    """Deterministic hex digest of a simulation state."""
    h = hashlib.sha256()
    for arr in (state.x, state.v, state.rest_angles,
                state.manipulator_poses):
        a = np.ascontiguousarray(arr, dtype=np.float64)
        h.update(np.asarray(a.shape, dtype=np.int64).tobytes())
        h.update(a.tobytes())
    h.update(np.int64(state.time_index).tobytes())
    return h.hexdigest()
