"""Synthetic scenes, trajectories, and a procedural patch-feature oracle.

Stands in for an image encoder plus real capture data: scenes are random
point sets with appearance latents, views are camera poses on a jittered
orbit, and the feature oracle turns (appearance, view direction, condition)
into patch embeddings. The `condition` scalar controls a reproducible
embedding drift between mapping (condition 0) and query views, which is
the knob that creates a mapping-to-query generalization gap.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import binio
from .geometry import Intrinsics, PoseSE3, Z_MIN, look_at, project_many, random_rotation

SCENE_MAGIC = b"ACEGSCN1"
SCENE_VERSION = 1

ROLE_MAPPING = 0
ROLE_QUERY = 1


@dataclass
class WorldConfig:
    n_points: int = 512
    box: tuple[float, float, float] = (4.0, 4.0, 3.0)   # centered on the origin
    latent_dim: int = 16
    d_feat: int = 32
    alpha: float = 0.5          # condition-shift strength
    beta: float = 0.1           # view-direction dependence
    sigma_noise: float = 0.05
    image_size: tuple[int, int] = (256, 256)            # (W, H)
    focal: float = 128.0
    orbit_frames: int = 24
    min_visible: int = 32

    def intrinsics(self) -> Intrinsics:
        w, h = self.image_size
        return Intrinsics(self.focal, self.focal, w / 2.0, h / 2.0)


@dataclass
class Scene:
    points: np.ndarray           # (n, 3) float64
    latents: np.ndarray          # (n, k) float64, unit norm rows
    box: tuple[float, float, float]
    scene_id: str
    seed: int

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass
class PatchObservation:
    pixel: np.ndarray            # (2,)
    embedding: np.ndarray        # (d_feat,) float32
    point_index: int
    y_world: np.ndarray          # (3,)


@dataclass
class ViewRender:
    pose: PoseSE3
    intrinsics: Intrinsics
    condition: float
    role: int                    # ROLE_MAPPING or ROLE_QUERY
    observations: list[PatchObservation] = field(default_factory=list)

    def pixels(self) -> np.ndarray:
        return np.array([o.pixel for o in self.observations])

    def embeddings(self) -> np.ndarray:
        return np.array([o.embedding for o in self.observations])

    def points(self) -> np.ndarray:
        return np.array([o.y_world for o in self.observations])


@dataclass
class SplitConfig:
    scheme: str = "interspersed"      # or "query-mapping-query"
    min_interval: int = 2
    max_interval: int = 6
    mirror: bool = False              # optional axis flip during augmentation


class FeatureOracle:
    """Frozen random nonlinear maps from appearance/view to embeddings.

    e = F(a) + alpha * condition * G(a) + beta * B(v) + noise, with F, G, B
    fixed per experiment by the oracle seed and shared across scenes.
    """

    def __init__(self, latent_dim: int, d_feat: int, alpha: float, beta: float,
                 sigma_noise: float, seed: int):
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(latent_dim)
        self.w_f = rng.normal(0, scale, size=(d_feat, latent_dim))
        self.b_f = rng.normal(0, 0.3, size=d_feat)
        self.w_g = rng.normal(0, scale, size=(d_feat, latent_dim))
        self.b_g = rng.normal(0, 0.3, size=d_feat)
        self.w_b = rng.normal(0, 1.0 / np.sqrt(3.0), size=(d_feat, 3))
        self.alpha = alpha
        self.beta = beta
        self.sigma_noise = sigma_noise
        self.seed = seed

    def embed(self, appearance: np.ndarray, view_dir: np.ndarray, condition: float,
              noise_rng: np.random.Generator | None = None) -> np.ndarray:
        """Batched: appearance (n, k), view_dir (n, 3) unit rows -> (n, d_feat)."""
        if not 0.0 <= condition <= 1.0:
            raise ValueError("condition must be in [0, 1]")
        appearance = np.atleast_2d(appearance)
        view_dir = np.atleast_2d(view_dir)
        e = np.tanh(appearance @ self.w_f.T + self.b_f)
        e = e + self.alpha * condition * np.tanh(appearance @ self.w_g.T + self.b_g)
        e = e + self.beta * np.tanh(view_dir @ self.w_b.T)
        if noise_rng is not None and self.sigma_noise > 0:
            e = e + noise_rng.normal(0, self.sigma_noise, size=e.shape)
        return e


def gen_scene(cfg: WorldConfig, seed: int, scene_id: str = "") -> Scene:
    """Uniform points in the centered box, unit-norm appearance latents."""
    if cfg.n_points < 1:
        raise ValueError("need at least one point")
    rng = np.random.default_rng(seed)
    half = np.array(cfg.box) / 2.0
    points = rng.uniform(-half, half, size=(cfg.n_points, 3))
    latents = rng.normal(size=(cfg.n_points, cfg.latent_dim))
    latents /= np.linalg.norm(latents, axis=1, keepdims=True)
    return Scene(points, latents, cfg.box, scene_id or f"scene-{seed}", seed)


def _count_visible(scene: Scene, pose: PoseSE3, K: Intrinsics, image_size) -> int:
    w, h = image_size
    pix, z = project_many(K, pose, scene.points)
    ok = (z > Z_MIN) & (pix[:, 0] >= 0) & (pix[:, 0] < w) & (pix[:, 1] >= 0) & (pix[:, 1] < h)
    return int(ok.sum())


def gen_trajectory(scene: Scene, cfg: WorldConfig, seed: int,
                   n_frames: int | None = None) -> list[PoseSE3]:
    """Smooth jittered arc around the scene centroid; every frame must see
    at least cfg.min_visible points.

    Step angle and positional jitter are bounded so consecutive camera
    centers move by less than 10% of the orbit radius.
    """
    n_frames = n_frames or cfg.orbit_frames
    if n_frames < 2:
        raise ValueError("need at least two frames")
    rng = np.random.default_rng(seed)
    K = cfg.intrinsics()
    center = scene.centroid
    base_radius = 1.1 * float(np.linalg.norm(np.array(scene.box)))
    for _ in range(32):  # bounded retries for the visibility constraint
        phase = rng.uniform(0, 2 * np.pi)
        step = rng.uniform(0.03, 0.05)  # radians per frame
        radius = base_radius * rng.uniform(0.9, 1.15)
        height = rng.uniform(0.1, 0.5) * scene.box[2]
        frames = []
        ok = True
        for i in range(n_frames):
            ang = phase + step * i
            jitter = 0.01 * radius * rng.uniform(-1.0, 1.0, size=3)
            cam = center + np.array([radius * np.cos(ang), radius * np.sin(ang), height]) + jitter
            target = center + 0.08 * np.array(scene.box) * rng.uniform(-1.0, 1.0, size=3)
            pose = look_at(cam, target)
            if _count_visible(scene, pose, K, cfg.image_size) < cfg.min_visible:
                ok = False
                break
            frames.append(pose)
        if ok:
            return frames
    raise RuntimeError("could not satisfy the visibility constraint")


def render_view(scene: Scene, pose: PoseSE3, cfg: WorldConfig, oracle: FeatureOracle,
                condition: float, role: int, noise_seed: int) -> ViewRender:
    """Project all visible points and attach oracle embeddings."""
    K = cfg.intrinsics()
    w, h = cfg.image_size
    pix, z = project_many(K, pose, scene.points)
    ok = (z > Z_MIN) & (pix[:, 0] >= 0) & (pix[:, 0] < w) & (pix[:, 1] >= 0) & (pix[:, 1] < h)
    idx = np.flatnonzero(ok)
    dirs = scene.points[idx] - pose.translation
    dirs = (dirs @ pose.rotation) / np.linalg.norm(dirs, axis=1, keepdims=True)
    noise_rng = np.random.default_rng(noise_seed)
    embs = oracle.embed(scene.latents[idx], dirs, condition, noise_rng).astype(np.float32)
    view = ViewRender(pose, K, condition, role)
    for j, i in enumerate(idx):
        view.observations.append(PatchObservation(pix[i].copy(), embs[j], int(i),
                                                  scene.points[i].copy()))
    return view


def sample_split(n_frames: int, cfg: SplitConfig, seed: int) -> tuple[list[int], list[int]]:
    """Disjoint mapping/query frame index sets under the configured scheme."""
    if n_frames < 4:
        raise ValueError("need at least 4 frames to split")
    rng = np.random.default_rng(seed)
    lo, hi = cfg.min_interval, cfg.max_interval
    if cfg.scheme == "interspersed":
        mapping, query = [], []
        pos = 0
        is_mapping = bool(rng.integers(0, 2))
        while pos < n_frames:
            length = int(rng.integers(lo, hi + 1))
            dest = mapping if is_mapping else query
            dest.extend(range(pos, min(pos + length, n_frames)))
            pos += length
            is_mapping = not is_mapping
        if not mapping or not query:
            return sample_split(n_frames, cfg, seed + 1)
        return mapping, query
    if cfg.scheme == "query-mapping-query":
        q1 = int(rng.integers(lo, hi + 1))
        q2 = int(rng.integers(lo, hi + 1))
        q1 = min(q1, n_frames - 2)
        map_len = n_frames - q1 - q2
        if map_len < 1:
            q2 = max(1, n_frames - q1 - 1)
            map_len = n_frames - q1 - q2
        mapping = list(range(q1, q1 + map_len))
        query = list(range(0, q1)) + list(range(q1 + map_len, n_frames))
        if not mapping or not query:
            raise ValueError("degenerate query-mapping-query split")
        return mapping, query
    raise ValueError(f"unknown split scheme {cfg.scheme!r}")


@dataclass
class SceneTuple:
    """One rendered mapping/query configuration of a scene."""

    scene: Scene
    mapping_views: list[ViewRender]
    query_views: list[ViewRender]
    tuple_id: str


def render_tuple(scene: Scene, cfg: WorldConfig, oracle: FeatureOracle,
                 split_cfg: SplitConfig, seed: int, tuple_id: str = "",
                 query_condition: float = 1.0) -> SceneTuple:
    """Trajectory + split + renders: mapping at condition 0, queries shifted."""
    seq = np.random.SeedSequence(seed)
    traj_seed, split_seed, noise_seed = [int(s.generate_state(1)[0]) for s in seq.spawn(3)]
    frames = gen_trajectory(scene, cfg, traj_seed)
    map_idx, query_idx = sample_split(len(frames), split_cfg, split_seed)
    mapping_views = [render_view(scene, frames[i], cfg, oracle, 0.0, ROLE_MAPPING,
                                 noise_seed + 2 * i) for i in map_idx]
    query_views = [render_view(scene, frames[i], cfg, oracle, query_condition, ROLE_QUERY,
                               noise_seed + 2 * i + 1) for i in query_idx]
    return SceneTuple(scene, mapping_views, query_views, tuple_id or scene.scene_id)


def apply_augment(tup: SceneTuple, seed: int, mirror: bool = False) -> SceneTuple:
    """Rigidly rotate (and optionally mirror) a rendered tuple.

    Points and poses co-transform about the scene centroid, so every stored
    pixel stays consistent with its ground-truth 3D point. Mirroring flips
    the world x axis together with the camera x axis and pixel x
    coordinates, keeping the projection equations satisfied.
    """
    rng = np.random.default_rng(seed)
    rot = random_rotation(rng)
    center = tup.scene.centroid
    do_mirror = mirror and bool(rng.integers(0, 2))
    mir = np.diag([-1.0, 1.0, 1.0])

    def map_point(p):
        q = rot @ (p - center) + center
        if do_mirror:
            q = mir @ (q - center) + center
        return q

    def map_pose(pose: PoseSE3) -> PoseSE3:
        r = rot @ pose.rotation
        t = rot @ (pose.translation - center) + center
        if do_mirror:
            # reflecting world and camera x axes keeps det(R) = +1
            r = mir @ r @ mir
            t = mir @ (t - center) + center
        return PoseSE3(r, t)

    new_points = np.array([map_point(p) for p in tup.scene.points])
    scene = Scene(new_points, tup.scene.latents.copy(), tup.scene.box,
                  tup.scene.scene_id, tup.scene.seed)

    def map_view(view: ViewRender) -> ViewRender:
        K = view.intrinsics
        out = ViewRender(map_pose(view.pose), K, view.condition, view.role)
        for obs in view.observations:
            pixel = obs.pixel.copy()
            if do_mirror:
                pixel = np.array([2.0 * K.cx - pixel[0], pixel[1]])
            out.observations.append(PatchObservation(pixel, obs.embedding,
                                                     obs.point_index,
                                                     map_point(obs.y_world)))
        return out

    return SceneTuple(scene, [map_view(v) for v in tup.mapping_views],
                      [map_view(v) for v in tup.query_views], tup.tuple_id)


# -- scene tuple file format -------------------------------------------------

def save_scene_tuple(path, tup: SceneTuple, cfg: WorldConfig) -> None:
    views = [(v, ROLE_MAPPING) for v in tup.mapping_views] + \
            [(v, ROLE_QUERY) for v in tup.query_views]
    with open(path, "wb") as fh:
        binio.write_magic(fh, SCENE_MAGIC)
        binio.write_u32(fh, SCENE_VERSION)
        binio.write_str(fh, tup.tuple_id)
        binio.write_str(fh, tup.scene.scene_id)
        binio.write_u32(fh, tup.scene.seed & 0xFFFFFFFF)
        binio.write_f64(fh, 1.0)  # scene-units scale
        for extent in tup.scene.box:
            binio.write_f64(fh, extent)
        binio.write_u32(fh, cfg.image_size[0])
        binio.write_u32(fh, cfg.image_size[1])
        binio.write_array(fh, tup.scene.points)
        binio.write_array(fh, tup.scene.latents)
        binio.write_u32(fh, len(views))
        for view, role in views:
            fh.write(struct.pack("<B", role))
            binio.write_f64(fh, view.condition)
            binio.write_array(fh, view.intrinsics.as_array())
            binio.write_array(fh, view.pose.rotation)
            binio.write_array(fh, view.pose.translation)
            binio.write_u32(fh, len(view.observations))
            binio.write_array(fh, np.array([o.point_index for o in view.observations],
                                           dtype=np.uint32))
            binio.write_array(fh, view.pixels().astype(np.float64))
            binio.write_array(fh, view.embeddings().astype(np.float32))


def load_scene_tuple(path) -> tuple[SceneTuple, dict]:
    with open(path, "rb") as fh:
        binio.read_magic(fh, SCENE_MAGIC)
        version = binio.read_u32(fh)
        if version != SCENE_VERSION:
            raise binio.FormatError(f"unsupported scene version {version}")
        tuple_id = binio.read_str(fh)
        scene_id = binio.read_str(fh)
        seed = binio.read_u32(fh)
        scale = binio.read_f64(fh)
        box = tuple(binio.read_f64(fh) for _ in range(3))
        image_size = (binio.read_u32(fh), binio.read_u32(fh))
        points = binio.read_array(fh)
        latents = binio.read_array(fh)
        scene = Scene(points, latents, box, scene_id, seed)
        n_views = binio.read_u32(fh)
        mapping_views, query_views = [], []
        for _ in range(n_views):
            (role,) = struct.unpack("<B", fh.read(1))
            condition = binio.read_f64(fh)
            k = binio.read_array(fh)
            rot = binio.read_array(fh)
            trans = binio.read_array(fh)
            n_obs = binio.read_u32(fh)
            point_idx = binio.read_array(fh)
            pixels = binio.read_array(fh)
            embs = binio.read_array(fh)
            if len(point_idx) != n_obs:
                raise binio.FormatError("observation count mismatch")
            view = ViewRender(PoseSE3(rot, trans), Intrinsics(*k.tolist()), condition, role)
            for j in range(n_obs):
                pi = int(point_idx[j])
                view.observations.append(PatchObservation(pixels[j], embs[j], pi, points[pi]))
            (mapping_views if role == ROLE_MAPPING else query_views).append(view)
    meta = {"scale": scale, "image_size": image_size}
    return SceneTuple(scene, mapping_views, query_views, tuple_id), meta
