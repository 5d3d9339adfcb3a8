"""Deterministic 2-D pick-and-place world on the unit square.

A point gripper moves in clipped steps, grasps circular objects, and
carries the goal object to a goal location. Observations are token
lattices (8x8 by default) rendered from a main view and two slightly
shifted virtual side views; occlusion replaces a configured region of
one side view with pure noise, with exact ground-truth corruption
flags. Everything is a pure function of (seed, config).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import RngStream

GRID = 8
N_TOKENS = GRID * GRID
C_MONO = 5  # occupancy, depth, class, goal, gripper
C_VIEW = 4  # occupancy, depth, class, goal
MAX_STEP = 0.05
GRASP_RADIUS = 0.06
MAX_EPISODE_STEPS = 120
SUCCESS_TOL = 0.04
Q_DIM = 8  # gripper x/y, closed, held, target x/y, goal x/y
ACTION_DIM = 3

# side cameras sit exactly one token pitch off the main axis, so the known
# extrinsics reduce to a one-column lattice shift and the views can be
# registered into the main frame exactly (edge column replicated)
VIEW_OFFSETS = {"main": (0.0, 0.0), "left": (-1.0 / GRID, 0.0), "right": (1.0 / GRID, 0.0)}


class LayoutError(RuntimeError):
    pass


@dataclass(frozen=True)
class ObjectState:
    oid: int
    x: float
    y: float
    radius: float
    height: float = 0.5
    held: bool = False


@dataclass(frozen=True)
class Goal:
    x: float
    y: float
    target_id: int


@dataclass(frozen=True)
class WorldState:
    gripper: tuple[float, float]
    gripper_closed: bool
    objects: tuple[ObjectState, ...]
    goal: Goal
    step_count: int = 0

    def target(self) -> ObjectState:
        return self.objects[self.goal.target_id]


@dataclass(frozen=True)
class LayoutParams:
    n_objects: int = 2
    spread: float = 1.0
    min_separation: float = 0.16
    gripper_jitter: float = 0.0


@dataclass(frozen=True)
class OcclusionConfig:
    side: str = "none"  # none | left | right
    col_lo: int = 0
    col_hi: int = GRID // 2  # occluded token columns [col_lo, col_hi)
    noise_std: float = 1.0

    def corrupted_mask(self) -> np.ndarray:
        """(N_TOKENS,) bool mask of the corrupted lattice positions."""
        mask = np.zeros((GRID, GRID), dtype=bool)
        if self.side != "none":
            mask[:, self.col_lo : self.col_hi] = True
        return mask.reshape(-1)


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str = "none"  # none | camera | noise | light | layout
    magnitude: float = 0.0


_ANCHORS = [(0.25, 0.3), (0.75, 0.3), (0.25, 0.7), (0.75, 0.7)]
_GOAL_ANCHOR = (0.5, 0.82)
_GRIPPER_START = (0.5, 0.12)


def reset(seed: int, layout: LayoutParams = LayoutParams()) -> WorldState:
    rng = RngStream(seed, stream=101)
    for _ in range(1000):
        objects = []
        ok = True
        for i in range(layout.n_objects):
            ax, ay = _ANCHORS[i % len(_ANCHORS)]
            x = float(np.clip(ax + layout.spread * rng.uniform(low=-0.18, high=0.18), 0.08, 0.92))
            y = float(np.clip(ay + layout.spread * rng.uniform(low=-0.18, high=0.18), 0.08, 0.92))
            r = 0.04 + 0.02 * rng.uniform()
            for o in objects:
                if np.hypot(x - o.x, y - o.y) < layout.min_separation:
                    ok = False
            # height is drawn independently of radius: footprint channels
            # (occupancy/class) then carry no depth information, so depth can
            # only be read from a depth channel
            height = 0.3 + 0.4 * rng.uniform()
            objects.append(ObjectState(oid=i, x=x, y=y, radius=float(r), height=float(height)))
        gx = float(np.clip(_GOAL_ANCHOR[0] + layout.spread * rng.uniform(low=-0.15, high=0.15), 0.08, 0.92))
        gy = float(np.clip(_GOAL_ANCHOR[1] + layout.spread * rng.uniform(low=-0.12, high=0.12), 0.08, 0.92))
        target = int(rng.integers(0, layout.n_objects))
        px = float(np.clip(_GRIPPER_START[0] + layout.gripper_jitter * rng.uniform(low=-0.3, high=0.3), 0.02, 0.98))
        py = float(np.clip(_GRIPPER_START[1] + layout.gripper_jitter * rng.uniform(low=-0.1, high=0.1), 0.02, 0.98))
        if ok:
            return WorldState(
                gripper=(px, py),
                gripper_closed=False,
                objects=tuple(objects),
                goal=Goal(gx, gy, target),
            )
    raise LayoutError(f"could not place {layout.n_objects} objects after 1000 attempts (seed={seed})")


def step(state: WorldState, action: np.ndarray) -> WorldState:
    dx = float(np.clip(action[0], -MAX_STEP, MAX_STEP))
    dy = float(np.clip(action[1], -MAX_STEP, MAX_STEP))
    grip = float(action[2])
    gx = float(np.clip(state.gripper[0] + dx, 0.0, 1.0))
    gy = float(np.clip(state.gripper[1] + dy, 0.0, 1.0))

    objects = list(state.objects)
    closed = grip >= 0.0
    held_idx = next((i for i, o in enumerate(objects) if o.held), None)

    if not closed and held_idx is not None:
        objects[held_idx] = replace(objects[held_idx], held=False)
        held_idx = None
    if closed and held_idx is None:
        # closed near an object grasps it, whether or not it just closed
        dists = [np.hypot(o.x - gx, o.y - gy) for o in objects]
        j = int(np.argmin(dists))
        if dists[j] <= GRASP_RADIUS:
            objects[j] = replace(objects[j], held=True)
            held_idx = j
    if held_idx is not None:
        objects[held_idx] = replace(objects[held_idx], x=gx, y=gy)

    return WorldState(
        gripper=(gx, gy),
        gripper_closed=closed,
        objects=tuple(objects),
        goal=state.goal,
        step_count=state.step_count + 1,
    )


def evaluate_success(state: WorldState, goal: Goal | None = None, tol: float = SUCCESS_TOL) -> bool:
    goal = goal or state.goal
    obj = state.objects[goal.target_id]
    return (not obj.held) and np.hypot(obj.x - goal.x, obj.y - goal.y) < tol


def state_vector(state: WorldState) -> np.ndarray:
    obj = state.target()
    return np.array(
        [
            state.gripper[0],
            state.gripper[1],
            1.0 if state.gripper_closed else 0.0,
            1.0 if obj.held else 0.0,
            obj.x,
            obj.y,
            state.goal.x,
            state.goal.y,
        ]
    )


def expert_action(state: WorldState) -> np.ndarray:
    """Proportional controller: approach, grasp, carry, release."""
    obj = state.target()
    gx, gy = state.gripper
    if obj.held:
        dx, dy = state.goal.x - gx, state.goal.y - gy
        if np.hypot(dx, dy) < 0.012:
            return np.array([0.0, 0.0, -1.0])  # at goal: release
        return np.array([np.clip(dx, -MAX_STEP, MAX_STEP), np.clip(dy, -MAX_STEP, MAX_STEP), 1.0])
    if evaluate_success(state):
        return np.array([0.0, 0.0, -1.0])
    dx, dy = obj.x - gx, obj.y - gy
    if np.hypot(dx, dy) < 0.015:
        return np.array([0.0, 0.0, 1.0])  # in reach: close
    return np.array([np.clip(dx, -MAX_STEP, MAX_STEP), np.clip(dy, -MAX_STEP, MAX_STEP), -1.0])


def scripted_expert(state: WorldState, h: int) -> np.ndarray:
    """Next h expert actions, obtained by simulating the plan forward."""
    sim = state
    chunk = np.zeros((h, ACTION_DIM))
    for i in range(h):
        a = expert_action(sim)
        chunk[i] = a
        sim = step(sim, a)
    return chunk


# -- rendering -----------------------------------------------------------


@dataclass
class RenderOutput:
    mono: np.ndarray  # (N, C_MONO)
    left: np.ndarray  # (M, C_VIEW)
    right: np.ndarray  # (M, C_VIEW)
    depth_truth: np.ndarray  # (N,) clean main-view depth
    corrupted_left: np.ndarray  # (M,) bool
    corrupted_right: np.ndarray  # (M,) bool


def _token_centers() -> np.ndarray:
    axis = (np.arange(GRID) + 0.5) / GRID
    xx, yy = np.meshgrid(axis, axis, indexing="xy")
    return np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)  # (N, 2), row-major (row=y, col=x)


_CENTERS = _token_centers()


def _render_channels(state: WorldState, offset: tuple[float, float], with_gripper: bool) -> np.ndarray:
    pts = _CENTERS + np.asarray(offset)
    n_obj = len(state.objects)
    occ = np.zeros(N_TOKENS)
    depth = np.ones(N_TOKENS)
    cls = np.zeros(N_TOKENS)
    best = np.full(N_TOKENS, -1.0)
    for o in state.objects:
        d2 = (pts[:, 0] - o.x) ** 2 + (pts[:, 1] - o.y) ** 2
        sig = o.radius + 0.04
        bump = np.exp(-d2 / (2 * sig * sig))
        occ = np.maximum(occ, bump)
        better = bump > best
        depth = np.where(better, 1.0 - o.height * bump, depth)  # taller reads nearer
        cls = np.where(better, (o.oid + 1) / n_obj * bump, cls)
        best = np.maximum(best, bump)
    d2g = (pts[:, 0] - state.goal.x) ** 2 + (pts[:, 1] - state.goal.y) ** 2
    goal_ch = np.exp(-d2g / (2 * 0.06**2))
    chans = [occ, depth, cls, goal_ch]
    if with_gripper:
        d2p = (pts[:, 0] - state.gripper[0]) ** 2 + (pts[:, 1] - state.gripper[1]) ** 2
        grip_ch = (0.5 + 0.5 * (1.0 if state.gripper_closed else 0.0)) * np.exp(-d2p / (2 * 0.05**2))
        chans.append(grip_ch)
    return np.stack(chans, axis=1)


def render_views(
    state: WorldState,
    occlusion: OcclusionConfig = OcclusionConfig(),
    rng: RngStream | None = None,
    depth_noise_std: float = 0.25,
    view_noise_std: float = 0.0,
    mono_noise_std: float = 0.0,
) -> RenderOutput:
    rng = rng or RngStream(0, 999)
    mono = _render_channels(state, VIEW_OFFSETS["main"], with_gripper=True)
    # register the side views into the main frame using the known camera
    # extrinsics (a one-column shift); noise and occlusion are applied after
    # registration so they stay independent per delivered token
    left = _shift_grid(_render_channels(state, VIEW_OFFSETS["left"], with_gripper=False), -1)
    right = _shift_grid(_render_channels(state, VIEW_OFFSETS["right"], with_gripper=False), 1)
    # crop both to the cameras' common overlap (replicate both edge columns in
    # both views): each view would otherwise have exactly one invalid edge
    # column, a built-in information asymmetry between the sides
    left = _crop_to_overlap(left)
    right = _crop_to_overlap(right)
    depth_truth = mono[:, 1].copy()
    if depth_noise_std > 0:
        mono[:, 1] = mono[:, 1] + depth_noise_std * rng.normal(N_TOKENS)
    if mono_noise_std > 0:
        # monocular ambiguity: the single main view is unreliable across all
        # channels, so reliable scene geometry has to come from the side views
        other = [c for c in range(mono.shape[1]) if c != 1]
        mono[:, other] = mono[:, other] + mono_noise_std * rng.normal((N_TOKENS, len(other)))
    if view_noise_std > 0:
        # independent sensor noise per side view: averaging the two clean
        # views then beats either one alone, which is what keeps the gate
        # away from a degenerate single-view collapse
        left = left + view_noise_std * rng.normal(left.shape)
        right = right + view_noise_std * rng.normal(right.shape)

    corrupted = occlusion.corrupted_mask()
    none_mask = np.zeros(N_TOKENS, dtype=bool)
    corrupted_left = corrupted if occlusion.side == "left" else none_mask
    corrupted_right = corrupted if occlusion.side == "right" else none_mask
    if occlusion.side == "left":
        left[corrupted] = occlusion.noise_std * rng.normal((int(corrupted.sum()), C_VIEW))
    elif occlusion.side == "right":
        right[corrupted] = occlusion.noise_std * rng.normal((int(corrupted.sum()), C_VIEW))
    return RenderOutput(mono, left, right, depth_truth, corrupted_left, corrupted_right)


def _crop_to_overlap(tokens: np.ndarray) -> np.ndarray:
    """Replicate both edge columns from their interior neighbors."""
    grid = tokens.reshape(GRID, GRID, -1).copy()
    grid[:, 0] = grid[:, 1]
    grid[:, -1] = grid[:, -2]
    return grid.reshape(tokens.shape)


def _shift_grid(tokens: np.ndarray, shift: int) -> np.ndarray:
    """Shift token columns by `shift` with edge padding; (N, C) layout."""
    grid = tokens.reshape(GRID, GRID, -1)
    out = np.empty_like(grid)
    for j in range(GRID):
        src = int(np.clip(j - shift, 0, GRID - 1))
        out[:, j] = grid[:, src]
    return out.reshape(tokens.shape)


def apply_perturbation(render: RenderOutput, spec: PerturbationSpec, rng: RngStream) -> RenderOutput:
    if spec.magnitude < 0:
        raise ValueError("perturbation magnitude must be >= 0")
    if spec.kind in ("none", "layout") or spec.magnitude == 0.0:
        return render
    if spec.kind == "camera":
        s = int(np.ceil(spec.magnitude))
        return RenderOutput(
            _shift_grid(render.mono, s), _shift_grid(render.left, s), _shift_grid(render.right, s),
            render.depth_truth, render.corrupted_left, render.corrupted_right,
        )
    if spec.kind == "noise":
        return RenderOutput(
            render.mono + spec.magnitude * rng.normal(render.mono.shape),
            render.left + spec.magnitude * rng.normal(render.left.shape),
            render.right + spec.magnitude * rng.normal(render.right.shape),
            render.depth_truth, render.corrupted_left, render.corrupted_right,
        )
    if spec.kind == "light":
        k = 1.0 + spec.magnitude
        return RenderOutput(
            k * render.mono, k * render.left, k * render.right,
            render.depth_truth, render.corrupted_left, render.corrupted_right,
        )
    raise ValueError(f"unknown perturbation kind: {spec.kind!r}")


# -- episodes and datasets ----------------------------------------------


@dataclass
class EpisodeRecord:
    seed: int
    success: bool
    goal: np.ndarray  # (3,) goal x, goal y, target id
    states_q: np.ndarray  # (T, Q_DIM)
    actions: np.ndarray  # (T, ACTION_DIM)
    mono: np.ndarray | None = None  # (T, N, C_MONO)
    left: np.ndarray | None = None
    right: np.ndarray | None = None
    depth_truth: np.ndarray | None = None  # (T, N)


@dataclass
class Dataset:
    h: int
    with_views: bool
    episodes: list[EpisodeRecord]
    action_mean: np.ndarray  # (ACTION_DIM,)
    action_std: np.ndarray
    occlusion: OcclusionConfig = field(default_factory=OcclusionConfig)

    def normalize(self, actions: np.ndarray) -> np.ndarray:
        return (actions - self.action_mean) / self.action_std

    def denormalize(self, actions: np.ndarray) -> np.ndarray:
        return actions * self.action_std + self.action_mean

    def windows(self):
        """Overlapping H-step windows: (q, chunk, episode idx, step idx)."""
        qs, chunks, eps, steps = [], [], [], []
        for e_idx, ep in enumerate(self.episodes):
            t_total = ep.actions.shape[0]
            for t in range(t_total - self.h + 1):
                qs.append(ep.states_q[t])
                chunks.append(ep.actions[t : t + self.h])
                eps.append(e_idx)
                steps.append(t)
        return np.asarray(qs), np.asarray(chunks), np.asarray(eps), np.asarray(steps)


def rollout_expert(
    seed: int,
    h: int,
    layout: LayoutParams = LayoutParams(),
    with_views: bool = False,
    occlusion: OcclusionConfig = OcclusionConfig(),
    depth_noise_std: float = 0.25,
    view_noise_std: float = 0.0,
    mono_noise_std: float = 0.0,
) -> EpisodeRecord:
    state = reset(seed, layout)
    qs, actions, monos, lefts, rights, depths = [], [], [], [], [], []

    def record(s: WorldState, t: int):
        qs.append(state_vector(s))
        if with_views:
            render = render_views(s, occlusion, RngStream(seed, 2000 + t), depth_noise_std,
                                  view_noise_std, mono_noise_std)
            monos.append(render.mono)
            lefts.append(render.left)
            rights.append(render.right)
            depths.append(render.depth_truth)

    t = 0
    while t < MAX_EPISODE_STEPS and not evaluate_success(state):
        record(state, t)
        a = expert_action(state)
        actions.append(a)
        state = step(state, a)
        t += 1
    success = evaluate_success(state)
    # trailing window so every timestep has a full H-chunk ahead of it
    for _ in range(h):
        record(state, t)
        a = expert_action(state)
        actions.append(a)
        state = step(state, a)
        t += 1

    return EpisodeRecord(
        seed=seed,
        success=success,
        goal=np.array([state.goal.x, state.goal.y, float(state.goal.target_id)]),
        states_q=np.asarray(qs),
        actions=np.asarray(actions),
        mono=np.asarray(monos) if with_views else None,
        left=np.asarray(lefts) if with_views else None,
        right=np.asarray(rights) if with_views else None,
        depth_truth=np.asarray(depths) if with_views else None,
    )


def generate_dataset(
    n_episodes: int,
    h: int,
    seed: int,
    occlusion: OcclusionConfig = OcclusionConfig(),
    with_views: bool = False,
    layout: LayoutParams = LayoutParams(),
    depth_noise_std: float = 0.25,
    view_noise_std: float = 0.0,
    mono_noise_std: float = 0.0,
) -> Dataset:
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    episodes = [
        rollout_expert(seed * 100003 + i, h, layout, with_views, occlusion, depth_noise_std,
                       view_noise_std, mono_noise_std)
        for i in range(n_episodes)
    ]
    all_actions = np.concatenate([ep.actions for ep in episodes], axis=0)
    mean = all_actions.mean(axis=0)
    std = all_actions.std(axis=0)
    std = np.maximum(std, 1e-6)
    return Dataset(h=h, with_views=with_views, episodes=episodes, action_mean=mean, action_std=std, occlusion=occlusion)


# -- binary dataset file -------------------------------------------------

MAGIC = b"TOYW"
VERSION = 1


class DatasetFormatError(RuntimeError):
    pass


def _write_array(f, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    f.write(struct.pack("<I", arr.ndim))
    for s in arr.shape:
        f.write(struct.pack("<I", s))
    f.write(arr.tobytes())


def _read_array(f) -> np.ndarray:
    (ndim,) = struct.unpack("<I", f.read(4))
    shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
    n = int(np.prod(shape)) if shape else 1
    return np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape).copy()


def save_dataset(ds: Dataset, path):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<IBI", ds.h, 1 if ds.with_views else 0, len(ds.episodes)))
        occ = ds.occlusion
        side_code = {"none": 0, "left": 1, "right": 2}[occ.side]
        f.write(struct.pack("<BIId", side_code, occ.col_lo, occ.col_hi, occ.noise_std))
        _write_array(f, ds.action_mean)
        _write_array(f, ds.action_std)
        for ep in ds.episodes:
            f.write(struct.pack("<QB", ep.seed & 0xFFFFFFFFFFFFFFFF, 1 if ep.success else 0))
            _write_array(f, ep.goal)
            _write_array(f, ep.states_q)
            _write_array(f, ep.actions)
            if ds.with_views:
                _write_array(f, ep.mono)
                _write_array(f, ep.left)
                _write_array(f, ep.right)
                _write_array(f, ep.depth_truth)


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise DatasetFormatError(f"unsupported dataset version {version}, expected {VERSION}")
        h, with_views, n_eps = struct.unpack("<IBI", f.read(9))
        side_code, col_lo, col_hi, noise_std = struct.unpack("<BIId", f.read(17))
        occ = OcclusionConfig(side={0: "none", 1: "left", 2: "right"}[side_code],
                              col_lo=col_lo, col_hi=col_hi, noise_std=noise_std)
        mean = _read_array(f)
        std = _read_array(f)
        episodes = []
        for _ in range(n_eps):
            seed, success = struct.unpack("<QB", f.read(9))
            goal = _read_array(f)
            states_q = _read_array(f)
            actions = _read_array(f)
            mono = left = right = depth = None
            if with_views:
                mono = _read_array(f)
                left = _read_array(f)
                right = _read_array(f)
                depth = _read_array(f)
            episodes.append(EpisodeRecord(int(seed), bool(success), goal, states_q, actions, mono, left, right, depth))
    return Dataset(h=h, with_views=bool(with_views), episodes=episodes,
                   action_mean=mean, action_std=std, occlusion=occ)
