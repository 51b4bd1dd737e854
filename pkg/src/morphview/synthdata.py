"""Procedural multi-view dataset: morphable blob-head subjects rendered on a
spherical camera rig with a deterministic software rasterizer.

Every array in a dataset is a pure function of (config, seed). Expressions
are a fixed table of named coefficient patterns shared by all subjects, so
"hold out expression X" and "sample a different expression" are well defined
across the corpus.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import archive
from .errors import ConfigurationError
from .geometry import CameraParams, look_at_extrinsics, project
from .morphable import (
    MorphCoeffs,
    MorphableModel,
    build_mesh,
    load_model,
    make_default_model,
    mesh_keypoints_3d,
    save_model,
)
from .utils import config_hash, derive_seed, sha256_bytes

FRUSTUM_LENGTH = math.sqrt(3.0) / 2.0

# Named expression patterns over the 6 default expression-basis slices.
EXPRESSION_TABLE = [
    ("neutral", {}),
    ("mouth_open", {0: 1.0}),
    ("pucker", {0: -1.0}),
    ("jaw_left", {1: 1.0}),
    ("jaw_right", {1: -1.0}),
    ("brow_raise", {2: 1.0}),
    ("brow_furrow", {2: -1.0}),
    ("puff_left", {3: 1.0}),
    ("puff_right", {4: 1.0}),
    ("lip_raise", {5: 1.0}),
    ("lip_drop", {5: -1.0}),
    ("puff_both", {3: 0.7, 4: 0.7}),
]


@dataclass
class DatasetConfig:
    subjects: int = 64
    expressions: int = 8
    views: int = 16
    image_size: int = 32
    elevation_deg: float = 30.0
    radius: float = 1.5
    focal_scale: float = 4.0 / 3.0   # focal length in pixels = scale * image_size
    seed: int = 0
    test_subjects: int = 8
    subdivisions: int = 3
    identity_dim: int = 8
    expression_dim: int = 6
    expression_strength: float = 2.5

    def __post_init__(self):
        if self.subjects < 1 or self.views < 1 or self.expressions < 1:
            raise ConfigurationError("dataset needs subjects, views, expressions >= 1")
        if self.expressions > len(EXPRESSION_TABLE):
            raise ConfigurationError(
                f"at most {len(EXPRESSION_TABLE)} named expressions available")
        if not (0 <= self.test_subjects < self.subjects):
            raise ConfigurationError("test_subjects must leave at least one train subject")
        if self.image_size < 8:
            raise ConfigurationError("image_size must be at least 8")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class Scene:
    subject_id: int
    coeffs: MorphCoeffs
    mesh: Tensor            # (n_v, 3)
    faces: Tensor           # (n_f, 3)
    vertex_colors: Tensor   # (n_v, 3) in [0, 1]
    light_direction: Tensor  # unit 3-vector, toward the light

    def __post_init__(self):
        colors = torch.as_tensor(self.vertex_colors, dtype=torch.float64)
        light = torch.as_tensor(self.light_direction, dtype=torch.float64)
        object.__setattr__(self, "vertex_colors", colors)
        object.__setattr__(self, "light_direction", light)
        if colors.min() < 0 or colors.max() > 1:
            raise ConfigurationError("vertex colors must lie in [0, 1]")
        if abs(light.norm().item() - 1.0) > 1e-9:
            raise ConfigurationError("light direction must be a unit vector")


@dataclass(frozen=True)
class TrainingItem:
    input_image: Tensor        # (h, w, 3), expression A
    input_camera: CameraParams
    target_images: Tensor      # (N, h, w, 3), expression B
    target_cameras: list
    target_mesh: Tensor        # (n_v, 3), expression B
    keypoints_2d_gt: Tensor    # (N, k, 2)
    subject: int = 0
    input_expression: str = ""
    target_expression: str = ""
    input_view: int = 0


def expression_theta(name: str, expression_dim: int, strength: float) -> Tensor:
    for entry, pattern in EXPRESSION_TABLE:
        if entry == name:
            theta = torch.zeros(expression_dim, dtype=torch.float64)
            for slot, value in pattern.items():
                if slot >= expression_dim:
                    raise ConfigurationError(
                        f"expression {name!r} needs basis slice {slot}")
                theta[slot] = value * strength
            return theta
    raise ConfigurationError(f"unknown expression {name!r}")


def generate_subject(seed: int, model: MorphableModel,
                     coeff_scale: float = 0.9) -> tuple[MorphCoeffs, Tensor]:
    """Deterministic identity coefficients and a smooth vertex color field."""
    rng = np.random.default_rng(seed)
    beta = np.clip(rng.standard_normal(model.identity_dim) * coeff_scale, -3.0, 3.0)
    base = colorsys.hsv_to_rgb(rng.uniform(0, 1),
                               rng.uniform(0.55, 0.85),
                               rng.uniform(0.55, 0.9))
    colors = np.tile(np.asarray(base), (model.n_vertices, 1))
    if model.vertex_color_basis is not None:
        mod_coeffs = np.clip(rng.standard_normal(model.identity_dim), -2.0, 2.0)
        colors = colors + (model.vertex_color_basis.numpy() @ mod_coeffs)
    colors = np.clip(colors, 0.0, 1.0)
    coeffs = MorphCoeffs(identity=beta, expression=np.zeros(model.expression_dim))
    return coeffs, torch.from_numpy(colors)


def subject_light(seed: int) -> Tensor:
    rng = np.random.default_rng(derive_seed(seed, "light"))
    raw = np.array([0.25 * rng.uniform(-1, 1),
                    0.45 + 0.2 * rng.uniform(-1, 1),
                    0.85])
    return torch.from_numpy(raw / np.linalg.norm(raw))


def make_camera_rig(n_views: int, elevation_deg: float, radius: float,
                    image_size: int, focal_px: float | None = None) -> list[CameraParams]:
    """Equally spaced azimuths on a circle at fixed elevation, all aimed at
    the origin, sharing intrinsics; near/far bracket the scene sphere with
    the standard frustum length."""
    if n_views < 1:
        raise ConfigurationError("need at least one view")
    if focal_px is None:
        focal_px = (4.0 / 3.0) * image_size
    half = FRUSTUM_LENGTH / 2.0
    if radius <= half:
        raise ConfigurationError("camera radius must exceed half the frustum length")
    cams = []
    el = math.radians(elevation_deg)
    for i in range(n_views):
        az = math.radians(i * 360.0 / n_views)
        pos = (radius * math.cos(el) * math.sin(az),
               radius * math.sin(el),
               radius * math.cos(el) * math.cos(az))
        R, T = look_at_extrinsics(pos)
        K = [[focal_px, 0.0, image_size / 2.0],
             [0.0, focal_px, image_size / 2.0],
             [0.0, 0.0, 1.0]]
        cams.append(CameraParams(K=K, R=R, T=T, image_size=(image_size, image_size),
                                 near=radius - half, far=radius + half))
    return cams


def camera_angles(camera: CameraParams) -> tuple[float, float]:
    """(azimuth, elevation) of the camera center in degrees; azimuth 0 is +z."""
    c = camera.center
    r = c.norm().item()
    el = math.degrees(math.asin(c[1].item() / r))
    az = math.degrees(math.atan2(c[0].item(), c[2].item()))
    return az, el


def render_view(scene: Scene, camera: CameraParams) -> Tensor:
    """Rasterize the scene: z-buffered triangles, Lambertian shading of
    interpolated vertex colors, white background. Pure and deterministic;
    ties at equal depth go to the lowest triangle index."""
    H, W = camera.image_size
    verts = scene.mesh.to(torch.float64)
    uvz, valid = project(verts, camera)
    uv = uvz[:, :2].numpy()
    z = uvz[:, 2].numpy()
    vmask = valid.numpy()
    faces = scene.faces.numpy()
    colors = scene.vertex_colors.numpy()
    light = scene.light_direction.numpy()

    world = verts.numpy()
    n_pix = H * W
    xs = (np.arange(W) + 0.5)
    ys = (np.arange(H) + 0.5)

    zbuf = np.full(n_pix, np.inf)
    ibuf = np.full(n_pix, -1, dtype=np.int64)
    lbuf = np.zeros((n_pix, 3))

    tri_ok = vmask[faces].all(axis=1)
    for start in range(0, len(faces), 64):
        chunk = faces[start:start + 64]
        ok = tri_ok[start:start + 64]
        if not ok.any():
            continue
        p0, p1, p2 = uv[chunk[:, 0]], uv[chunk[:, 1]], uv[chunk[:, 2]]
        z0, z1, z2 = z[chunk[:, 0]], z[chunk[:, 1]], z[chunk[:, 2]]
        area = ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
                - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0]))
        ok = ok & (np.abs(area) > 1e-12)
        if not ok.any():
            continue
        # restrict work to the chunk's projected bounding rectangle
        us = np.concatenate([p0[ok, 0], p1[ok, 0], p2[ok, 0]])
        vs = np.concatenate([p0[ok, 1], p1[ok, 1], p2[ok, 1]])
        j0 = max(int(us.min() - 0.5), 0)
        j1 = min(int(us.max() + 0.5) + 1, W)
        i0 = max(int(vs.min() - 0.5), 0)
        i1 = min(int(vs.max() + 0.5) + 1, H)
        if i0 >= i1 or j0 >= j1:
            continue
        px, py = np.meshgrid(xs[j0:j1], ys[i0:i1])
        px = px.reshape(-1)
        py = py.reshape(-1)
        pix_idx = (np.arange(i0, i1)[:, None] * W + np.arange(j0, j1)[None, :]).reshape(-1)

        inv_area = np.where(ok, 1.0 / np.where(area == 0, 1.0, area), 0.0)
        e0 = ((p2[:, 0] - p1[:, 0])[:, None] * (py[None, :] - p1[:, 1, None])
              - (p2[:, 1] - p1[:, 1])[:, None] * (px[None, :] - p1[:, 0, None]))
        e1 = ((p0[:, 0] - p2[:, 0])[:, None] * (py[None, :] - p2[:, 1, None])
              - (p0[:, 1] - p2[:, 1])[:, None] * (px[None, :] - p2[:, 0, None]))
        e2 = ((p1[:, 0] - p0[:, 0])[:, None] * (py[None, :] - p0[:, 1, None])
              - (p1[:, 1] - p0[:, 1])[:, None] * (px[None, :] - p0[:, 0, None]))
        l0 = e0 * inv_area[:, None]
        l1 = e1 * inv_area[:, None]
        l2 = e2 * inv_area[:, None]
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0) & ok[:, None]
        inv_z = (l0 / z0[:, None] + l1 / z1[:, None] + l2 / z2[:, None])
        depth = np.where(inside & (inv_z > 0), 1.0 / np.maximum(inv_z, 1e-12), np.inf)
        best = depth.argmin(axis=0)
        cols = np.arange(len(pix_idx))
        z_best = depth[best, cols]
        better = z_best < zbuf[pix_idx]
        if not better.any():
            continue
        tgt = pix_idx[better]
        zbuf[tgt] = z_best[better]
        ibuf[tgt] = start + best[better]
        lbuf[tgt, 0] = l0[best[better], cols[better]]
        lbuf[tgt, 1] = l1[best[better], cols[better]]
        lbuf[tgt, 2] = l2[best[better], cols[better]]

    img = np.ones((n_pix, 3))
    covered = ibuf >= 0
    if covered.any():
        tri = faces[ibuf[covered]]
        lam = lbuf[covered]
        zc = z[tri]                                  # (m, 3) vertex depths
        w = lam / zc                                  # perspective-correct weights
        w = w / w.sum(axis=1, keepdims=True)
        col = (w[:, :, None] * colors[tri]).sum(axis=1)
        a = world[tri[:, 1]] - world[tri[:, 0]]
        b = world[tri[:, 2]] - world[tri[:, 0]]
        normal = np.cross(a, b)
        norm = np.linalg.norm(normal, axis=1, keepdims=True)
        normal = normal / np.maximum(norm, 1e-12)
        shade = np.maximum(normal @ light, 0.0)
        img[covered] = col * shade[:, None]
    return torch.from_numpy(img.reshape(H, W, 3).astype(np.float32))


class SyntheticDataset:
    """All renders, meshes, and keypoints for a config, generated in memory."""

    def __init__(self, config: DatasetConfig, model: MorphableModel,
                 cameras: list[CameraParams], images: Tensor, meshes: Tensor,
                 keypoints_2d: Tensor, subject_coeffs: Tensor,
                 subject_colors: Tensor, subject_lights: Tensor):
        self.config = config
        self.model = model
        self.cameras = cameras
        self.images = images            # (S, E, V, h, w, 3) float32 in [0, 1]
        self.meshes = meshes            # (S, E, n_v, 3) float64
        self.keypoints_2d = keypoints_2d  # (S, E, V, k, 2) float64
        self.subject_coeffs = subject_coeffs  # (S, I)
        self.subject_colors = subject_colors  # (S, n_v, 3)
        self.subject_lights = subject_lights  # (S, 3)

    @property
    def expression_names(self) -> list[str]:
        return [EXPRESSION_TABLE[i][0] for i in range(self.config.expressions)]

    @property
    def train_subjects(self) -> list[int]:
        return list(range(self.config.subjects - self.config.test_subjects))

    @property
    def test_subjects(self) -> list[int]:
        return list(range(self.config.subjects - self.config.test_subjects,
                          self.config.subjects))

    def expression_index(self, name: str) -> int:
        try:
            return self.expression_names.index(name)
        except ValueError:
            raise ConfigurationError(f"expression {name!r} not in dataset") from None

    def rig_hash(self) -> str:
        return config_hash([c.to_json_dict() for c in self.cameras])

    def item(self, subject: int, input_expression: str, input_view: int,
             target_expression: str) -> TrainingItem:
        ei = self.expression_index(input_expression)
        et = self.expression_index(target_expression)
        return TrainingItem(
            input_image=self.images[subject, ei, input_view],
            input_camera=self.cameras[input_view],
            target_images=self.images[subject, et],
            target_cameras=self.cameras,
            target_mesh=self.meshes[subject, et],
            keypoints_2d_gt=self.keypoints_2d[subject, et],
            subject=subject,
            input_expression=input_expression,
            target_expression=target_expression,
            input_view=input_view,
        )


def build_dataset(config: DatasetConfig) -> SyntheticDataset:
    model = make_default_model(subdivisions=config.subdivisions,
                               identity_dim=config.identity_dim,
                               expression_dim=config.expression_dim,
                               seed=derive_seed(config.seed, "model"))
    cameras = make_camera_rig(config.views, config.elevation_deg, config.radius,
                              config.image_size,
                              focal_px=config.focal_scale * config.image_size)
    S, E, V = config.subjects, config.expressions, config.views
    h = w = config.image_size
    images = torch.zeros((S, E, V, h, w, 3), dtype=torch.float32)
    meshes = torch.zeros((S, E, model.n_vertices, 3), dtype=torch.float64)
    k = model.keypoint_count
    keypoints = torch.zeros((S, E, V, k, 2), dtype=torch.float64)
    coeffs_all = torch.zeros((S, model.identity_dim), dtype=torch.float64)
    colors_all = torch.zeros((S, model.n_vertices, 3), dtype=torch.float64)
    lights_all = torch.zeros((S, 3), dtype=torch.float64)

    for s in range(S):
        subj_seed = derive_seed(config.seed, "subject", s)
        coeffs, colors = generate_subject(subj_seed, model)
        light = subject_light(subj_seed)
        coeffs_all[s] = coeffs.identity
        colors_all[s] = colors
        lights_all[s] = light
        for e in range(E):
            name = EXPRESSION_TABLE[e][0]
            theta = expression_theta(name, config.expression_dim,
                                     config.expression_strength)
            full = MorphCoeffs(identity=coeffs.identity, expression=theta)
            mesh = build_mesh(model, full)
            meshes[s, e] = mesh
            scene = Scene(subject_id=s, coeffs=full, mesh=mesh, faces=model.faces,
                          vertex_colors=colors, light_direction=light)
            kp3d = mesh_keypoints_3d(model, mesh)
            for v, cam in enumerate(cameras):
                images[s, e, v] = render_view(scene, cam)
                uvz, valid = project(kp3d, cam)
                if not bool(valid.all()):
                    raise ConfigurationError(
                        f"keypoint behind camera for subject {s}, view {v}")
                keypoints[s, e, v] = uvz[:, :2]
    return SyntheticDataset(config, model, cameras, images, meshes, keypoints,
                            coeffs_all, colors_all, lights_all)


def sample_training_item(dataset: SyntheticDataset, generator: torch.Generator,
                         shuffled: bool, exclude: tuple[str, ...] = (),
                         subject_pool: str = "train") -> TrainingItem:
    """Draw one training item: random subject, input expression+view, and a
    target expression that differs from the input one when shuffled."""
    for name in exclude:
        dataset.expression_index(name)  # validate early
    allowed = [n for n in dataset.expression_names if n not in exclude]
    if not allowed:
        raise ConfigurationError("all expressions excluded")
    if shuffled and len(allowed) < 2:
        raise ConfigurationError("shuffled sampling needs at least 2 expressions")
    pool = dataset.train_subjects if subject_pool == "train" else dataset.test_subjects
    subject = pool[int(torch.randint(len(pool), (1,), generator=generator).item())]
    input_expr = allowed[int(torch.randint(len(allowed), (1,), generator=generator).item())]
    input_view = int(torch.randint(dataset.config.views, (1,), generator=generator).item())
    if shuffled:
        rest = [n for n in allowed if n != input_expr]
        target_expr = rest[int(torch.randint(len(rest), (1,), generator=generator).item())]
    else:
        target_expr = input_expr
    return dataset.item(subject, input_expr, input_view, target_expr)


# ---------------------------------------------------------------------------
# On-disk layout:
#   <root>/manifest.json
#   <root>/model.bin
#   <root>/subject_%03d/<expression>/{view_%02d.png, camera_%02d.json,
#                                     mesh.bin, keypoints.json}

def write_dataset(dataset: SyntheticDataset, root, force: bool = False) -> str:
    from PIL import Image

    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise ConfigurationError(f"{root} exists and is not empty (use force)")
    root.mkdir(parents=True, exist_ok=True)
    save_model(dataset.model, root / "model.bin")
    files = {}

    def record(path: Path):
        files[str(path.relative_to(root))] = sha256_bytes(path.read_bytes())

    record(root / "model.bin")
    cfg = dataset.config
    for s in range(cfg.subjects):
        for e, name in enumerate(dataset.expression_names):
            leaf = root / f"subject_{s:03d}" / name
            leaf.mkdir(parents=True, exist_ok=True)
            for v in range(cfg.views):
                img = (dataset.images[s, e, v].numpy() * 255.0).round().astype(np.uint8)
                path = leaf / f"view_{v:02d}.png"
                Image.fromarray(img).save(path)
                record(path)
                cam_path = leaf / f"camera_{v:02d}.json"
                cam_path.write_text(dataset.cameras[v].to_json())
                record(cam_path)
            mesh_path = leaf / "mesh.bin"
            archive.write_archive(mesh_path, {"kind": "mesh"}, {
                "vertices": dataset.meshes[s, e].numpy().astype(np.float32)})
            record(mesh_path)
            kp_path = leaf / "keypoints.json"
            kp_path.write_text(json.dumps(
                {"keypoints_2d": dataset.keypoints_2d[s, e].tolist()}))
            record(kp_path)
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg.to_dict()),
        "rig_hash": dataset.rig_hash(),
        "expressions": dataset.expression_names,
        "files": files,
    }
    manifest["manifest_hash"] = config_hash(manifest)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest["manifest_hash"]


def load_dataset(root) -> SyntheticDataset:
    from PIL import Image

    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    config = DatasetConfig(**manifest["config"])
    model = load_model(root / "model.bin")
    S, E, V = config.subjects, config.expressions, config.views
    h = w = config.image_size
    cameras = None
    images = torch.zeros((S, E, V, h, w, 3), dtype=torch.float32)
    meshes = torch.zeros((S, E, model.n_vertices, 3), dtype=torch.float64)
    keypoints = torch.zeros((S, E, V, model.keypoint_count, 2), dtype=torch.float64)
    names = manifest["expressions"]
    for s in range(S):
        for e, name in enumerate(names):
            leaf = root / f"subject_{s:03d}" / name
            if cameras is None:
                cameras = [CameraParams.from_json((leaf / f"camera_{v:02d}.json").read_text())
                           for v in range(V)]
            for v in range(V):
                arr = np.asarray(Image.open(leaf / f"view_{v:02d}.png"), dtype=np.float32)
                images[s, e, v] = torch.from_numpy(arr / 255.0)
            _, arrays = archive.read_archive(leaf / "mesh.bin")
            meshes[s, e] = torch.from_numpy(arrays["vertices"].astype(np.float64))
            kp = json.loads((leaf / "keypoints.json").read_text())
            keypoints[s, e] = torch.tensor(kp["keypoints_2d"], dtype=torch.float64)
    return SyntheticDataset(config, model, cameras, images, meshes, keypoints,
                            torch.zeros((S, model.identity_dim)),
                            torch.zeros((S, model.n_vertices, 3)),
                            torch.zeros((S, 3)))
