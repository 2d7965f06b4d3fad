"""Analytic articulated-scene simulator with exact ground truth.

Scenes live in a ~1 m^3 workspace. An articulated object is a kinematic
chain of revolute/prismatic joints actuated sequentially (level L moves
joints 1..L, never overlapping) with smoothstep easing. Frames are not
photorealistic renders: every entity paints a smooth Gaussian blob with a
fixed per-entity channel signature onto a C=3 feature image over textured
background, and occluders paint over targets. Depth maps are analytic
(nearest painted entity, far background), so 2D->3D lifting has exact
ground truth.

Entity signatures are indexed by entity slot and constant across scenes
and seeds: the seed controls geometry and schedules only. This is what
makes a persistent query learnable as a cross-sequence semantic anchor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Camera, GeometryError, look_at, project, rodrigues

WORKSPACE_CENTER = np.array([0.0, 0.0, 0.5])
BACKGROUND_DEPTH = 4.0  # just beyond the deepest entity: a close backdrop
                        # keeps lifted-depth cliffs commensurate with the
                        # workspace so smoothness losses stay informative
BLOB_SIGMA = 2.2          # px, target/distractor blob width
OCCLUDER_SIGMA = 4.5      # px, occluders are wider so they fully cover
DEPTH_DISC_RADIUS = 3.0   # px, radius of the exact-depth disc per entity
DEPTH_SKIRT = 4.0         # px, smooth blend from disc depth to backdrop:
                          # keeps lifted trajectories differentiable near
                          # entities instead of cliff-edged
OCCLUDER_STANDOFF = 0.05  # m, occluder sits just in front of the target
BACKGROUND_AMPLITUDE = 0.15
FEATURE_RANGE = 1.0       # nominal blob peak amplitude; add_noise sigma is a
                          # fraction of this range

# fixed appearance palette; targets take the first slots, distractors the
# next, occluders are always gray
_PALETTE = np.array(
    [
        [1.00, 0.15, 0.10],
        [0.10, 1.00, 0.20],
        [0.15, 0.25, 1.00],
        [1.00, 0.90, 0.10],
        [1.00, 0.20, 0.95],
        [0.10, 0.95, 0.90],
        [0.95, 0.55, 0.10],
        [0.55, 0.10, 1.00],
        [0.60, 1.00, 0.30],
        [0.30, 0.60, 0.70],
        [0.80, 0.40, 0.40],
        [0.40, 0.80, 0.60],
    ]
)
_OCCLUDER_COLOR = np.array([0.5, 0.5, 0.5])

REVOLUTE = "revolute"
PRISMATIC = "prismatic"


class SimError(Exception):
    pass


@dataclass
class Joint:
    """One chain element: rotation about (axis, pivot) or translation
    along axis, actuated over [start_frame, end_frame] with smoothstep
    easing from lo to hi."""

    kind: str
    axis: np.ndarray
    pivot: np.ndarray
    lo: float
    hi: float
    start_frame: int = 0
    end_frame: int = 0
    easing: str = "smoothstep"

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=np.float64)
        n = np.linalg.norm(self.axis)
        if abs(n - 1.0) > 1e-9:
            self.axis = self.axis / n
        self.pivot = np.asarray(self.pivot, dtype=np.float64)
        if self.lo > self.hi:
            raise SimError("joint range lo must be <= hi")

    def value_at(self, t: int) -> float:
        if self.end_frame <= self.start_frame:
            return self.lo
        u = (t - self.start_frame) / (self.end_frame - self.start_frame)
        u = min(max(u, 0.0), 1.0)
        eased = u * u * (3.0 - 2.0 * u)  # smoothstep: continuous velocity
        return self.lo + (self.hi - self.lo) * eased

    def transform(self, value: float) -> tuple[np.ndarray, np.ndarray]:
        """Rigid motion (rot, trans) induced by this joint at ``value``."""
        if not (self.lo - 1e-12 <= value <= self.hi + 1e-12):
            raise SimError(f"joint value {value} outside [{self.lo}, {self.hi}]")
        if self.kind == REVOLUTE:
            rot = rodrigues(self.axis, value)
            return rot, self.pivot - rot @ self.pivot
        if self.kind == PRISMATIC:
            return np.eye(3), value * self.axis
        raise SimError(f"unknown joint kind {self.kind!r}")


@dataclass
class ArticulatedObject:
    """Kinematic chain with interaction targets and scene distractors.

    Targets are (joint_index, rest-pose world point): the point rides link
    ``joint_index`` and moves under joints 1..joint_index. Distractors are
    static points, or mirrored copies of a target across the x=0 symmetry
    plane (same appearance signature: the ambiguity stress case).
    """

    joints: list[Joint]
    targets: list[tuple[int, np.ndarray]]
    static_distractors: list[np.ndarray] = field(default_factory=list)
    mirrored_of: list[int] = field(default_factory=list)

    def __post_init__(self):
        for j, _ in self.targets:
            if not 0 <= j < len(self.joints):
                raise SimError(f"target references invalid joint index {j}")

    def chain_transforms(self, joint_values) -> list[tuple[np.ndarray, np.ndarray]]:
        """Cumulative world transform up to and including each joint."""
        if len(joint_values) != len(self.joints):
            raise SimError("joint_values length mismatch")
        out = []
        rot, trans = np.eye(3), np.zeros(3)
        for joint, value in zip(self.joints, joint_values):
            jr, jt = joint.transform(float(value))
            # parent-to-child composition: world = parent ∘ joint
            rot, trans = rot @ jr, rot @ jt + trans
            out.append((rot, trans))
        return out

    def fk(self, joint_values) -> np.ndarray:
        """World positions of all targets at the given joint values."""
        chain = self.chain_transforms(joint_values)
        pts = []
        for j, local in self.targets:
            rot, trans = chain[j]
            pts.append(rot @ local + trans)
        return np.asarray(pts)

    def fk_axes(self, joint_values) -> list[tuple[np.ndarray, np.ndarray]]:
        """Current (direction, point) of each joint axis line (for tests)."""
        chain = self.chain_transforms(joint_values)
        axes = []
        for idx, joint in enumerate(self.joints):
            if idx == 0:
                rot, trans = np.eye(3), np.zeros(3)
            else:
                rot, trans = chain[idx - 1]
            axes.append((rot @ joint.axis, rot @ joint.pivot + trans))
        return axes

    def entity_positions(self, joint_values) -> np.ndarray:
        """Targets followed by distractors (static, then mirrored)."""
        targets = self.fk(joint_values)
        rows = [targets]
        if self.static_distractors:
            rows.append(np.asarray(self.static_distractors))
        for k in self.mirrored_of:
            m = targets[k].copy()
            m[0] = -m[0] + 2 * WORKSPACE_CENTER[0]
            rows.append(m[None, :])
        return np.concatenate(rows, axis=0)


@dataclass
class Sequence:
    """One generated episode as seen from a single static camera."""

    frames: np.ndarray        # (T, C, H, W) feature images
    depth: np.ndarray         # (T, H, W) meters
    cams: list[Camera]        # the rendering camera (one per sequence)
    gt2d: np.ndarray          # (T, K, 2) normalized [0,1]^2
    gt3d: np.ndarray          # (T, K, 3) world meters
    vis: np.ndarray           # (T, K) bool
    flow3d: np.ndarray        # (T-1, K, 3) gt3d[t+1] - gt3d[t]
    entities2d: np.ndarray    # (T, E, 2) all entities: targets then distractors
    joint_values: np.ndarray  # (T, L)
    joint_kinds: list[str]
    level: int
    seed: int
    view: int
    occ_target: int = 0       # scheduled occlusion: target index and interval
    occ_start: int = 0
    occ_end: int = 0          # exclusive; start == end means no occlusion

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_targets(self) -> int:
        return self.gt2d.shape[1]

    @property
    def camera(self) -> Camera:
        return self.cams[0]


# ---------------------------------------------------------------------------
# scene construction


def _random_unit(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


_GOLDEN_ANGLE = 2.399963229728653


def build_object(level: int, rng, n_targets: int, n_distractors: int,
                 preset: str = "standard") -> ArticulatedObject:
    """Seeded articulated object for a given articulation level.

    Targets are fanned around their joint axes (golden-angle spacing plus
    jitter) and distractors are rejection-sampled away from target rest
    positions, keeping entity blobs separable in the rendered views.
    """
    joints = []
    for j in range(level):
        kind = REVOLUTE if j == 0 or rng.random() < 0.6 else PRISMATIC
        pivot = WORKSPACE_CENTER + rng.uniform(-0.3, 0.3, 3)
        axis = _random_unit(rng)
        hi = rng.uniform(0.7, 1.2) if kind == REVOLUTE else rng.uniform(0.15, 0.3)
        joints.append(Joint(kind, axis, pivot, 0.0, hi))

    targets = []
    rest_points = []
    for k in range(n_targets):
        j = k % level
        joint = joints[j]
        # offset perpendicular to the axis so revolute targets sweep arcs;
        # among seeded candidates keep the one farthest from placed targets
        best, best_sep = None, -1.0
        for c in range(10):
            perp = _random_unit(rng)
            perp = perp - (perp @ joint.axis) * joint.axis
            while np.linalg.norm(perp) < 1e-6:
                perp = _random_unit(rng)
                perp = perp - (perp @ joint.axis) * joint.axis
            perp = perp / np.linalg.norm(perp)
            radius = rng.uniform(0.18, 0.45)
            along = rng.uniform(-0.2, 0.2)
            cand = joint.pivot + radius * perp + along * joint.axis
            sep = min((np.linalg.norm(cand - p) for p in rest_points), default=1.0)
            if sep > best_sep:
                best, best_sep = cand, sep
        targets.append((j, best))
        rest_points.append(best)

    statics = []
    for _ in range(n_distractors):
        best, best_sep = None, -1.0
        for _ in range(40):  # keep distractors away from every other entity
            cand = WORKSPACE_CENTER + rng.uniform(-0.45, 0.45, 3)
            existing = rest_points + statics
            sep = min(np.linalg.norm(cand - p) for p in existing)
            if sep > best_sep:
                best, best_sep = cand, sep
            if best_sep > 0.3:
                break
        statics.append(best)
    mirrored = [0] if preset == "symmetric" else []
    return ArticulatedObject(joints, targets, statics, mirrored)


def _schedule_joints(joints: list[Joint], n_frames: int) -> None:
    """Sequential non-overlapping actuation: joint j finishes before j+1
    starts, with idle margins at both ends."""
    n = len(joints)
    margin = max(2, int(0.05 * n_frames))
    usable = n_frames - 2 * margin
    slot = usable // n
    for j, joint in enumerate(joints):
        start = margin + j * slot
        active = max(2, int(slot * 0.8))
        joint.start_frame = start
        joint.end_frame = min(start + active, start + slot - 1)


def make_cameras(n_views: int, image_size: int, rng) -> list[Camera]:
    """Static ring of cameras looking at the workspace center."""
    cams = []
    for v in range(n_views):
        azim = 2 * math.pi * v / n_views + rng.uniform(-0.15, 0.15)
        elev = rng.uniform(0.3, 0.6)
        dist = rng.uniform(2.0, 2.4)
        eye = WORKSPACE_CENTER + dist * np.array(
            [math.cos(azim) * math.cos(elev),
             math.sin(azim) * math.cos(elev),
             math.sin(elev)]
        )
        rot, trans = look_at(eye, WORKSPACE_CENTER)
        f = 1.8 * image_size
        cams.append(Camera(fx=f, fy=f, cx=image_size / 2, cy=image_size / 2,
                           width=image_size, height=image_size, rot=rot, trans=trans))
    return cams


# ---------------------------------------------------------------------------
# rendering


def _paint_blob(img, alpha_grid, color):
    img *= 1.0 - alpha_grid
    img += color[:, None, None] * alpha_grid


def _blob_alpha(px, py, xs, ys, sigma):
    d2 = (xs[None, :] - px) ** 2 + (ys[:, None] - py) ** 2
    return np.exp(-d2 / (2 * sigma * sigma))


def _background(rng, image_size: int) -> np.ndarray:
    """Smooth low-frequency texture, static over the sequence."""
    coarse = rng.uniform(0.0, BACKGROUND_AMPLITUDE, (3, 9, 9))
    y = np.linspace(0, 8, image_size)
    x = np.linspace(0, 8, image_size)
    y0 = np.clip(y.astype(int), 0, 7)
    x0 = np.clip(x.astype(int), 0, 7)
    wy = (y - y0)[:, None]
    wx = (x - x0)[None, :]
    c00 = coarse[:, y0][:, :, x0]
    c01 = coarse[:, y0][:, :, x0 + 1]
    c10 = coarse[:, y0 + 1][:, :, x0]
    c11 = coarse[:, y0 + 1][:, :, x0 + 1]
    return (c00 * (1 - wy) * (1 - wx) + c01 * (1 - wy) * wx
            + c10 * wy * (1 - wx) + c11 * wy * wx)


# ---------------------------------------------------------------------------
# generation


def generate(level: int, n_frames: int, seed: int, *, views: int = 3, view: int = 0,
             n_targets: int = 4, n_distractors: int = 2, preset: str = "standard",
             noise_sigma: float = 0.0, image_size: int = 64) -> Sequence:
    """Deterministically generate one sequence for one camera view.

    The scene (object, schedules, cameras) is a pure function of
    (level, n_frames, seed, views, ...); ``view`` only selects which of the
    ``views`` static cameras renders it, so multi-view data is obtained by
    calling this once per view index.
    """
    if not 1 <= level <= 4:
        raise SimError(f"level must be in 1..4, got {level}")
    if n_frames < 8:
        raise SimError("n_frames must be >= 8")
    if level == 4 and n_frames < 240:
        raise SimError("level-4 long-horizon sequences require n_frames >= 240")
    if not 0 <= view < views:
        raise SimError(f"view must be in 0..{views - 1}")

    rng = np.random.default_rng(np.random.SeedSequence([seed, level, n_frames]))
    obj = build_object(level, rng, n_targets, n_distractors, preset)
    _schedule_joints(obj.joints, n_frames)
    cams = make_cameras(views, image_size, rng)
    cam = cams[view]

    joint_values = np.stack(
        [[j.value_at(t) for j in obj.joints] for t in range(n_frames)]
    )

    # occlusion schedule: one target, one deterministic interval
    occ_target = int(rng.integers(0, n_targets))
    frac = 0.85 if preset == "stress_occlusion" else rng.uniform(0.2, 0.5)
    occ_len = int(frac * n_frames)
    start_hi = max(0.9 - frac, 0.05)
    start_lo = min(0.25, start_hi)
    occ_start = int(rng.uniform(start_lo, start_hi) * n_frames)
    occ_end = min(occ_start + occ_len, n_frames)

    n_entities = n_targets + n_distractors + (1 if preset == "symmetric" else 0)
    frames = np.empty((n_frames, 3, image_size, image_size))
    depth = np.empty((n_frames, image_size, image_size))
    gt2d = np.empty((n_frames, n_targets, 2))
    gt3d = np.empty((n_frames, n_targets, 3))
    vis = np.empty((n_frames, n_targets), dtype=bool)
    entities2d = np.empty((n_frames, n_entities, 2))

    colors = [_PALETTE[e % len(_PALETTE)] for e in range(n_targets + n_distractors)]
    if preset == "symmetric":
        colors.append(colors[0])  # the mirror shares target 0's signature

    bg = _background(rng, image_size)
    xs = np.arange(image_size) + 0.5
    ys = np.arange(image_size) + 0.5

    for t in range(n_frames):
        entities = obj.entity_positions(joint_values[t])
        uv, z = project(entities, cam)
        gt3d[t] = entities[:n_targets]
        gt2d[t] = uv[:n_targets]
        entities2d[t] = uv

        in_frame = np.all((gt2d[t] >= 0.0) & (gt2d[t] <= 1.0), axis=1)
        occluded = np.zeros(n_targets, dtype=bool)
        if occ_start <= t < occ_end:
            occluded[occ_target] = True
        vis[t] = in_frame & ~occluded

        paint = [(z[e], uv[e], colors[e], BLOB_SIGMA, DEPTH_DISC_RADIUS)
                 for e in range(n_entities)]
        if occ_start <= t < occ_end:
            # occluder hovers just in front of the occluded target
            tgt = gt3d[t, occ_target]
            eye = cam.to_world(np.zeros(3))
            ray = tgt - eye
            occ_pos = tgt - OCCLUDER_STANDOFF * ray / np.linalg.norm(ray)
            ouv, oz = project(occ_pos, cam)
            paint.append((oz, ouv, _OCCLUDER_COLOR, OCCLUDER_SIGMA,
                          1.6 * DEPTH_DISC_RADIUS))

        img = bg.copy()
        dep = np.full((image_size, image_size), BACKGROUND_DEPTH)
        for ez, euv, color, sigma, disc in sorted(paint, key=lambda p: -p[0]):
            if ez >= BACKGROUND_DEPTH:
                raise SimError("entity behind the backdrop; widen BACKGROUND_DEPTH")
            px, py = euv[0] * image_size, euv[1] * image_size
            alpha = _blob_alpha(px, py, xs, ys, sigma)
            _paint_blob(img, alpha, color)
            # exact depth inside the disc, smoothstep skirt out to the
            # backdrop beyond it
            r = np.hypot(xs[None, :] - px, ys[:, None] - py)
            u = np.clip((r - disc) / DEPTH_SKIRT, 0.0, 1.0)
            blend = u * u * (3.0 - 2.0 * u)
            dep = np.minimum(dep, ez + (BACKGROUND_DEPTH - ez) * blend)
        frames[t] = img
        depth[t] = dep

    seq = Sequence(
        frames=frames, depth=depth, cams=[cam], gt2d=gt2d, gt3d=gt3d, vis=vis,
        flow3d=gt3d[1:] - gt3d[:-1], entities2d=entities2d,
        joint_values=joint_values, joint_kinds=[j.kind for j in obj.joints],
        level=level, seed=seed, view=view,
        occ_target=occ_target, occ_start=occ_start, occ_end=occ_end,
    )
    if noise_sigma > 0:
        seq = add_noise(seq, noise_sigma, seed=seed + 1)
    return seq


def add_noise(seq: Sequence, sigma: float, seed: int = 0) -> Sequence:
    """I.i.d. Gaussian perturbation of the frame features only.

    ``sigma`` is a fraction of the nominal feature range (1.0 = blob peak
    amplitude). Ground-truth fields are returned unchanged.
    """
    if sigma < 0:
        raise SimError("noise sigma must be >= 0")
    if sigma == 0:
        return seq
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA01]))
    noisy = seq.frames + rng.normal(0.0, sigma * FEATURE_RANGE, seq.frames.shape)
    return replace(seq, frames=noisy)
