"""Procedural synthetic RGB-D scenes with an analytic ray-cast renderer.

A scene is an axis-aligned room box seen from inside plus axis-aligned
furniture cuboids seen from outside, each face carrying a deterministic
texture (checkerboard, linear gradient, or value noise). Ray casting is
exact slab intersection, so rendered color/depth are closed-form ground
truth for the rest of the pipeline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from splatstream.core import CameraPose, FrameRGBD, look_at_quaternion
from splatstream.enhance import is_far_from_inputs

DEFAULT_WIDTH = 64
DEFAULT_HEIGHT = 48
DEFAULT_FOV_DEG = 70.0
# cameras keep generous clearance: splat granularity is a few centimeters,
# so viewpoints much closer than ~1 m would see individual splats as mush
WALL_MARGIN = 0.9
FURNITURE_MARGIN = 0.55


# ---------------------------------------------------------------------------
# textures
# ---------------------------------------------------------------------------

def _hash2(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic integer-lattice hash to [0,1) (splitmix-style);
    uint64 wraparound is the point, so overflow warnings are muted."""
    with np.errstate(over="ignore"):
        h = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
             ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
             ^ (np.uint64(seed & 0xFFFFFFFF) + np.uint64(1))
             * np.uint64(0x165667B19E3779F9))
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


@dataclass(frozen=True)
class Texture:
    """Per-face color field, deterministic in the face-local (u, v)."""

    kind: str                       # checker | gradient | noise
    c1: tuple = (1.0, 1.0, 1.0)
    c2: tuple = (0.0, 0.0, 0.0)
    size: float = 0.5               # checker cell edge in meters
    seed: int = 0
    scale: float = 0.7              # noise feature size in meters

    def sample(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        u = np.asarray(u, np.float64)
        v = np.asarray(v, np.float64)
        c1 = np.asarray(self.c1, np.float64)
        c2 = np.asarray(self.c2, np.float64)
        if self.kind == "checker":
            parity = (np.floor(u / self.size) + np.floor(v / self.size)) % 2
            return np.where(parity[..., None] == 0, c1, c2)
        if self.kind == "gradient":
            # mirrored ramp with a fixed 3 m period: deterministic in u
            frac = np.mod(u / 3.0, 1.0)
            t = (2.0 * np.abs(frac - 0.5))[..., None]
            return c1 * (1 - t) + c2 * t
        if self.kind == "noise":
            gu, gv = u / self.scale, v / self.scale
            iu, iv = np.floor(gu), np.floor(gv)
            fu, fv = gu - iu, gv - iv
            fu = fu * fu * (3 - 2 * fu)
            fv = fv * fv * (3 - 2 * fv)
            v00 = _hash2(iu, iv, self.seed)
            v10 = _hash2(iu + 1, iv, self.seed)
            v01 = _hash2(iu, iv + 1, self.seed)
            v11 = _hash2(iu + 1, iv + 1, self.seed)
            val = ((v00 * (1 - fu) + v10 * fu) * (1 - fv)
                   + (v01 * (1 - fu) + v11 * fu) * fv)[..., None]
            return c1 * (1 - val) + c2 * val
        raise ValueError(f"unknown texture kind '{self.kind}'")

    def to_json(self) -> dict:
        return {"kind": self.kind, "c1": list(self.c1), "c2": list(self.c2),
                "size": self.size, "seed": self.seed, "scale": self.scale}

    @classmethod
    def from_json(cls, d: dict) -> "Texture":
        return cls(d["kind"], tuple(d["c1"]), tuple(d["c2"]), d["size"],
                   d["seed"], d["scale"])


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray
    face_textures: tuple            # 6 textures: -x,+x,-y,+y,-z,+z

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, np.float64))
        object.__setattr__(self, "hi", np.asarray(self.hi, np.float64))
        if np.any(self.hi <= self.lo):
            raise ValueError("box extents must be positive")
        if len(self.face_textures) != 6:
            raise ValueError("need 6 face textures")

    def contains(self, p: np.ndarray, margin: float = 0.0) -> np.ndarray:
        p = np.atleast_2d(p)
        return np.all((p >= self.lo + margin) & (p <= self.hi - margin),
                      axis=1)


@dataclass(frozen=True)
class SyntheticScene:
    room: Box
    furniture: tuple = ()
    seed: int = 0

    def free_space(self, p: np.ndarray, margin: float = WALL_MARGIN,
                   furniture_margin: float | None = None) -> np.ndarray:
        """Inside the room (with margin) and clear of every cuboid."""
        fm = furniture_margin if furniture_margin is not None \
            else min(margin, FURNITURE_MARGIN)
        p = np.atleast_2d(p)
        ok = self.room.contains(p, margin)
        for box in self.furniture:
            ok &= ~box.contains(p, -fm)
        return ok

    def to_json(self) -> dict:
        def box_json(b):
            return {"lo": b.lo.tolist(), "hi": b.hi.tolist(),
                    "faces": [t.to_json() for t in b.face_textures]}
        return {"room": box_json(self.room),
                "furniture": [box_json(b) for b in self.furniture],
                "seed": self.seed}

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticScene":
        def box_from(bd):
            return Box(np.array(bd["lo"]), np.array(bd["hi"]),
                       tuple(Texture.from_json(t) for t in bd["faces"]))
        return cls(box_from(d["room"]),
                   tuple(box_from(b) for b in d["furniture"]), d["seed"])


def save_scene(scene: SyntheticScene, path) -> None:
    with open(path, "w") as fh:
        json.dump(scene.to_json(), fh, indent=1, sort_keys=True)


def load_scene(path) -> SyntheticScene:
    with open(path) as fh:
        return SyntheticScene.from_json(json.load(fh))


def make_scene(seed: int = 0, room_size=(5.4, 4.4, 2.8),
               n_furniture: int = 2) -> SyntheticScene:
    """A deterministic room: textured walls plus low cuboids near the walls
    (the room center stays clear for camera paths)."""
    rng = np.random.default_rng(seed)
    size = np.asarray(room_size, np.float64)

    def palette():
        return tuple(rng.uniform(0.1, 1.0, 3))

    def random_texture(i):
        kind = ("checker", "gradient", "noise")[int(rng.integers(0, 3))]
        return Texture(kind, palette(), palette(),
                       size=float(rng.uniform(0.25, 0.7)),
                       seed=int(rng.integers(0, 2 ** 31)),
                       scale=float(rng.uniform(0.4, 1.0)))

    room = Box(np.zeros(3), size, tuple(random_texture(i) for i in range(6)))
    furniture = []
    for k in range(n_furniture):
        extent = rng.uniform([0.5, 0.5, 0.4], [1.1, 1.1, 0.9])
        # alternate between the -y and +y walls
        lo = np.array([rng.uniform(0.3, size[0] - extent[0] - 0.3),
                       0.25 if k % 2 == 0 else size[1] - extent[1] - 0.25,
                       0.0])
        furniture.append(Box(lo, lo + extent,
                             tuple(random_texture(i) for i in range(6))))
    return SyntheticScene(room, tuple(furniture), seed)


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------

_FACE_AXES = {0: (1, 2), 1: (0, 2), 2: (0, 1)}


def _face_color(box: Box, face: int, hit: np.ndarray) -> np.ndarray:
    axis = face // 2
    ua, va = _FACE_AXES[axis]
    return box.face_textures[face].sample(hit[..., ua], hit[..., va])


def raycast_render(scene: SyntheticScene, cam: CameraPose) -> FrameRGBD:
    """Exact first-hit color and camera-z depth per pixel."""
    if not scene.free_space(cam.translation, margin=0.0)[0]:
        raise ValueError("camera inside solid geometry")
    h, w = cam.height, cam.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dirs_cam = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy,
                         np.ones_like(xs)], axis=-1)
    dirs = dirs_cam.reshape(-1, 3) @ cam.rotation_matrix().T
    origin = cam.translation

    # with unnormalized directions (z_cam = 1), the hit parameter t IS the
    # camera-space depth
    best_t = np.full(len(dirs), np.inf)
    best_face = np.full(len(dirs), -1)
    best_box: list = [None] * len(dirs)

    def slab_hits(box: Box, exit_face: bool):
        with np.errstate(divide="ignore", invalid="ignore"):
            t_lo = (box.lo - origin) / dirs
            t_hi = (box.hi - origin) / dirs
        t_near = np.minimum(t_lo, t_hi)
        t_far = np.maximum(t_lo, t_hi)
        enter = t_near.max(axis=1)
        leave = t_far.min(axis=1)
        if exit_face:
            # room seen from inside: the relevant hit is the exit
            t = leave
            axis_pick = np.argmin(t_far, axis=1)
            sign_hi = np.take_along_axis(t_hi, axis_pick[:, None],
                                         axis=1)[:, 0] == t
        else:
            t = enter
            axis_pick = np.argmax(t_near, axis=1)
            sign_hi = np.take_along_axis(t_hi, axis_pick[:, None],
                                         axis=1)[:, 0] == t
            t = np.where((enter <= leave) & (t > 1e-9), t, np.inf)
        face = axis_pick * 2 + sign_hi.astype(int)
        return t, face

    t_room, face_room = slab_hits(scene.room, exit_face=True)
    improved = t_room < best_t
    best_t = np.where(improved, t_room, best_t)
    best_face = np.where(improved, face_room, best_face)
    box_pick = np.zeros(len(dirs), dtype=np.int64)      # 0 = room

    for bi, box in enumerate(scene.furniture):
        t_box, face_box = slab_hits(box, exit_face=False)
        improved = t_box < best_t
        best_t = np.where(improved, t_box, best_t)
        best_face = np.where(improved, face_box, best_face)
        box_pick = np.where(improved, bi + 1, box_pick)

    hits = origin + best_t[:, None] * dirs
    color = np.zeros((len(dirs), 3))
    boxes = [scene.room, *scene.furniture]
    for bi, box in enumerate(boxes):
        for face in range(6):
            sel = (box_pick == bi) & (best_face == face)
            if np.any(sel):
                color[sel] = _face_color(box, face, hits[sel])
    depth = best_t.reshape(h, w)
    if not np.all(np.isfinite(depth)):
        raise ValueError("ray escaped the room: malformed scene")
    return FrameRGBD(np.clip(color.reshape(h, w, 3), 0, 1), depth, cam)


# ---------------------------------------------------------------------------
# trajectories and evaluation views
# ---------------------------------------------------------------------------

def default_camera(scene: SyntheticScene, eye, target,
                   width: int = DEFAULT_WIDTH, height: int = DEFAULT_HEIGHT,
                   fov_deg: float = DEFAULT_FOV_DEG) -> CameraPose:
    f = width / (2.0 * np.tan(np.radians(fov_deg) / 2.0))
    return CameraPose(look_at_quaternion(eye, target), np.asarray(eye, float),
                      f, f, width / 2.0, height / 2.0, width, height)


def _sample_free_points(scene, rng, n, z_range=(0.9, 1.9)):
    out = []
    lo = scene.room.lo + WALL_MARGIN
    hi = scene.room.hi - WALL_MARGIN
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 10000:
            raise ValueError("cannot place waypoints in free space")
        p = rng.uniform(lo, hi)
        p[2] = rng.uniform(*z_range)
        if scene.free_space(p)[0]:
            out.append(p)
    return np.array(out)


def generate_trajectories(scene: SyntheticScene, n_contributors: int,
                          frames_each: int, seed: int,
                          width: int = DEFAULT_WIDTH,
                          height: int = DEFAULT_HEIGHT,
                          fov_deg: float = DEFAULT_FOV_DEG) -> list[FrameRGBD]:
    """Smooth per-contributor camera paths with rendered RGB-D frames.

    Contributor k roams sector k of the room (split along x), so coverage
    grows as contributors accumulate. Poses spline through free-space
    waypoints and look at targets inside the contributor's sector.
    """
    if n_contributors < 1 or frames_each < 1:
        raise ValueError("need at least one contributor and one frame")
    rng = np.random.default_rng(seed)
    frames = []
    room_lo, room_hi = scene.room.lo, scene.room.hi
    sector_w = (room_hi[0] - room_lo[0]) / n_contributors
    for k in range(n_contributors):
        sector_lo = room_lo.copy()
        sector_hi = room_hi.copy()
        sector_lo[0] = room_lo[0] + k * sector_w
        sector_hi[0] = room_lo[0] + (k + 1) * sector_w
        sub = SyntheticScene(Box(sector_lo, sector_hi,
                                 scene.room.face_textures),
                             scene.furniture, scene.seed)
        n_way = max(4, frames_each // 6)
        waypoints = _sample_free_points(sub, rng, n_way)
        targets = _sample_free_points(sub, rng, n_way,
                                      z_range=(0.6, 1.8))
        ts = np.linspace(0, 1, n_way)
        pos_spline = CubicSpline(ts, waypoints, axis=0)
        tgt_spline = CubicSpline(ts, targets, axis=0)
        samples = np.linspace(0, 1, frames_each)
        for t in samples:
            eye = pos_spline(t)
            if not scene.free_space(eye)[0]:
                # spline wandered into furniture: nudge to nearest waypoint
                eye = waypoints[int(round(t * (n_way - 1)))]
            target = tgt_spline(t)
            if np.linalg.norm(target - eye) < 0.2:
                target = eye + np.array([np.cos(6.28 * t), np.sin(6.28 * t),
                                         0.0])
            cam = default_camera(scene, eye, target, width, height, fov_deg)
            frame = raycast_render(scene, cam)
            frames.append(FrameRGBD(frame.color, frame.depth, cam,
                                    contributor_id=k))
    return frames


def generate_eval_views(scene: SyntheticScene, n_positions: int,
                        n_rotations: int, seed: int,
                        input_poses: list[CameraPose],
                        width: int = DEFAULT_WIDTH,
                        height: int = DEFAULT_HEIGHT,
                        fov_deg: float = DEFAULT_FOV_DEG):
    """(interpolated, extrapolated) ground-truth view sets.

    A view is extrapolated iff it is far from every input pose under the
    enhancement closeness predicate; ground truth comes from the ray-cast
    oracle.
    """
    if n_positions < 1 or n_rotations < 1:
        raise ValueError("counts must be >= 1")
    rng = np.random.default_rng(seed)
    positions = _sample_free_points(scene, rng, n_positions)
    interp, extrap = [], []
    for pos in positions:
        for _ in range(n_rotations):
            target = rng.uniform(scene.room.lo + 0.1, scene.room.hi - 0.1)
            if np.linalg.norm(target - pos) < 0.2:
                target = pos + np.array([1.0, 0.0, 0.0])
            cam = default_camera(scene, pos, target, width, height, fov_deg)
            frame = raycast_render(scene, cam)
            if is_far_from_inputs(cam, input_poses):
                extrap.append(frame)
            else:
                interp.append(frame)
    return interp, extrap
