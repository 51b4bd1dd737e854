"""Linear blendshape mesh model: identity/expression coefficients to vertices.

The model is a plain linear basis expansion over a template mesh. It feeds
both the conditioning stack (as a vertex cloud) and the synthetic renderer
(faces + optional per-vertex appearance basis). Designated keypoint vertices
give exact 2D keypoint ground truth once projected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from . import archive
from .errors import ConfigurationError, DegenerateNormalizerError

COEFF_BOUND = 3.0


@dataclass(frozen=True)
class MorphableModel:
    template: Tensor             # (n_v, 3) float64
    identity_basis: Tensor       # (n_v, 3, I)
    expression_basis: Tensor     # (n_v, 3, E)
    faces: Tensor                # (n_f, 3) long
    keypoint_indices: Tensor     # (k,) long
    eye_corner_slots: tuple[int, int] = (0, 1)  # slots within keypoint_indices
    vertex_color_basis: Tensor | None = None    # (n_v, 3, I), optional

    def __post_init__(self):
        t = torch.as_tensor(self.template, dtype=torch.float64)
        object.__setattr__(self, "template", t)
        object.__setattr__(self, "identity_basis",
                           torch.as_tensor(self.identity_basis, dtype=torch.float64))
        object.__setattr__(self, "expression_basis",
                           torch.as_tensor(self.expression_basis, dtype=torch.float64))
        object.__setattr__(self, "faces", torch.as_tensor(self.faces, dtype=torch.long))
        object.__setattr__(self, "keypoint_indices",
                           torch.as_tensor(self.keypoint_indices, dtype=torch.long))
        if self.vertex_color_basis is not None:
            object.__setattr__(self, "vertex_color_basis",
                               torch.as_tensor(self.vertex_color_basis, dtype=torch.float64))
        n_v = self.template.shape[0]
        if self.template.ndim != 2 or self.template.shape[1] != 3:
            raise ConfigurationError("template must be (n_v, 3)")
        for name in ("identity_basis", "expression_basis"):
            b = getattr(self, name)
            if b.ndim != 3 or b.shape[:2] != (n_v, 3) or b.shape[2] < 1:
                raise ConfigurationError(f"{name} must be (n_v, 3, >=1)")
            if not torch.isfinite(b).all():
                raise ConfigurationError(f"{name} contains non-finite values")
        if self.faces.numel() == 0:
            raise ConfigurationError("mesh needs at least one triangle")
        if self.faces.max() >= n_v or self.faces.min() < 0:
            raise ConfigurationError("face index out of range")
        kp = self.keypoint_indices
        if kp.unique().numel() != kp.numel() or kp.max() >= n_v or kp.min() < 0:
            raise ConfigurationError("keypoint indices must be distinct and < n_v")
        a, b = self.eye_corner_slots
        if a == b or not (0 <= a < kp.numel()) or not (0 <= b < kp.numel()):
            raise ConfigurationError("eye corner slots must be two distinct keypoint slots")

    @property
    def n_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def identity_dim(self) -> int:
        return self.identity_basis.shape[2]

    @property
    def expression_dim(self) -> int:
        return self.expression_basis.shape[2]

    @property
    def keypoint_count(self) -> int:
        return self.keypoint_indices.numel()


@dataclass(frozen=True)
class MorphCoeffs:
    identity: Tensor    # (I,)
    expression: Tensor  # (E,)
    bound: float = COEFF_BOUND

    def __post_init__(self):
        object.__setattr__(self, "identity",
                           torch.as_tensor(self.identity, dtype=torch.float64).reshape(-1))
        object.__setattr__(self, "expression",
                           torch.as_tensor(self.expression, dtype=torch.float64).reshape(-1))
        for name in ("identity", "expression"):
            v = getattr(self, name)
            if not torch.isfinite(v).all():
                raise ConfigurationError(f"{name} coefficients must be finite")
            if v.numel() and v.abs().max().item() > self.bound + 1e-12:
                raise ConfigurationError(
                    f"{name} coefficients exceed |.| <= {self.bound}")


def build_mesh(model: MorphableModel, coeffs: MorphCoeffs) -> Tensor:
    """Vertices = template + identity_basis . beta + expression_basis . theta."""
    if coeffs.identity.numel() != model.identity_dim:
        raise ConfigurationError(
            f"identity coeffs have dim {coeffs.identity.numel()}, model wants {model.identity_dim}")
    if coeffs.expression.numel() != model.expression_dim:
        raise ConfigurationError(
            f"expression coeffs have dim {coeffs.expression.numel()}, model wants {model.expression_dim}")
    return (model.template
            + model.identity_basis @ coeffs.identity
            + model.expression_basis @ coeffs.expression)


def mesh_keypoints_3d(model: MorphableModel, vertices: Tensor) -> Tensor:
    """Gather the designated keypoint vertices, preserving slot order."""
    return vertices[model.keypoint_indices]


def intercanthal_distance(keypoints_2d: Tensor, eye_corner_slots: tuple[int, int]) -> float:
    """Pixel distance between the two inner-eye-corner keypoints."""
    a, b = eye_corner_slots
    if a == b:
        raise ConfigurationError("eye corner slots must differ")
    k = keypoints_2d.shape[0]
    if not (0 <= a < k and 0 <= b < k):
        raise ConfigurationError("eye corner slot out of range")
    pa = torch.as_tensor(keypoints_2d[a], dtype=torch.float64)
    pb = torch.as_tensor(keypoints_2d[b], dtype=torch.float64)
    dist = torch.linalg.norm(pa - pb).item()
    if dist < 1e-6:
        raise DegenerateNormalizerError(
            f"intercanthal distance {dist:.2e} px is degenerate; exclude this frame")
    return dist


# ---------------------------------------------------------------------------
# Template construction

def icosphere(subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere; subdivision 3 gives 642 vertices / 1280 faces."""
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        verts_list = [v for v in verts]
        midpoint = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoint:
                m = verts_list[i] + verts_list[j]
                m /= np.linalg.norm(m)
                midpoint[key] = len(verts_list)
                verts_list.append(m)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=np.int64)
    return verts, faces


def _nearest_vertex(verts: np.ndarray, direction) -> int:
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    return int(np.argmax(verts @ d))


def _angular_bump(dirs: np.ndarray, center, width: float) -> np.ndarray:
    """Smooth weight in [0, 1] peaking at `center`, falling off over `width` radians."""
    c = np.asarray(center, dtype=np.float64)
    c = c / np.linalg.norm(c)
    ang = np.arccos(np.clip(dirs @ c, -1.0, 1.0))
    return np.exp(-(ang / width) ** 2)


# Front of the subject faces +z; +y is up; cameras orbit in the xz-plane.
_EYE_L_DIR = (0.45, 0.35, 0.82)
_EYE_R_DIR = (-0.45, 0.35, 0.82)
_MOUTH_DIR = (0.0, -0.45, 0.89)
_BROW_DIR = (0.0, 0.62, 0.78)


def make_default_model(subdivisions: int = 3, identity_dim: int = 8,
                       expression_dim: int = 6, seed: int = 0,
                       radius: float = 0.3, identity_scale: float = 0.012,
                       expression_scale: float = 0.04,
                       with_color_basis: bool = True) -> MorphableModel:
    """Blob-head morphable model on an icosphere template.

    Identity slices are broad radial bumps in pseudo-random directions.
    Expression slices are localized displacements around the mouth/brow so
    expression changes produce clearly visible keypoint motion:
      slice 0: mouth region, radial (mouth open / pucker)
      slice 1: mouth region, lateral x (jaw left / right)
      slice 2: brow band, vertical y (brow raise)
      slice 3: left cheek, lateral +x
      slice 4: right cheek, lateral -x
      slice 5: mouth region, vertical y (lip raise)
    Extra slices past 6 fall back to random smooth radial fields.
    """
    verts, faces = icosphere(subdivisions)
    dirs = verts.copy()
    template = verts * radius
    n_v = len(verts)
    rng = np.random.default_rng(seed)

    identity = np.zeros((n_v, 3, identity_dim))
    for i in range(identity_dim):
        center = rng.standard_normal(3)
        center /= np.linalg.norm(center)
        w = _angular_bump(dirs, center, width=rng.uniform(0.6, 1.1))
        identity[:, :, i] = identity_scale * w[:, None] * dirs

    expr_specs = [
        (_MOUTH_DIR, "radial", 0.45),
        (_MOUTH_DIR, "x", 0.55),
        (_BROW_DIR, "y", 0.5),
        ((0.75, -0.1, 0.65), "x", 0.45),
        ((-0.75, -0.1, 0.65), "x", 0.45),
        (_MOUTH_DIR, "y", 0.5),
    ]
    expression = np.zeros((n_v, 3, expression_dim))
    for e in range(expression_dim):
        if e < len(expr_specs):
            center, mode, width = expr_specs[e]
            w = _angular_bump(dirs, center, width)
            if mode == "radial":
                disp = w[:, None] * dirs
            elif mode == "x":
                disp = np.zeros((n_v, 3))
                disp[:, 0] = w
            else:
                disp = np.zeros((n_v, 3))
                disp[:, 1] = w
        else:
            center = rng.standard_normal(3)
            center /= np.linalg.norm(center)
            disp = _angular_bump(dirs, center, 0.7)[:, None] * dirs
        expression[:, :, e] = expression_scale * disp

    color_basis = None
    if with_color_basis:
        color_basis = np.zeros((n_v, 3, identity_dim))
        for i in range(identity_dim):
            center = rng.standard_normal(3)
            center /= np.linalg.norm(center)
            w = _angular_bump(dirs, center, width=rng.uniform(0.7, 1.2))
            tint = rng.uniform(-0.25, 0.25, size=3)
            color_basis[:, :, i] = w[:, None] * tint[None, :]

    mouth_ring = []
    for dx, dy in [(-0.28, 0.0), (0.28, 0.0), (0.0, -0.18), (0.0, 0.18),
                   (-0.15, -0.12), (0.15, -0.12)]:
        d = np.asarray(_MOUTH_DIR) + np.array([dx, dy, 0.0])
        mouth_ring.append(_nearest_vertex(verts, d))
    extra_dirs = [
        _BROW_DIR, (0.3, 0.62, 0.7), (-0.3, 0.62, 0.7),
        (0.0, 0.05, 1.0),                                  # nose tip
        (0.8, -0.15, 0.55), (-0.8, -0.15, 0.55),           # cheeks
        (0.0, -0.8, 0.55),                                 # chin
        (0.0, 0.95, 0.3),                                  # crown
    ]
    keypoints = [_nearest_vertex(verts, _EYE_L_DIR), _nearest_vertex(verts, _EYE_R_DIR)]
    keypoints += mouth_ring
    keypoints += [_nearest_vertex(verts, d) for d in extra_dirs]
    # drop accidental duplicates while preserving order, then pad from the front
    seen, kp = set(), []
    for idx in keypoints:
        if idx not in seen:
            seen.add(idx)
            kp.append(idx)
    front_order = np.argsort(-verts[:, 2])
    for idx in front_order:
        if len(kp) >= 16:
            break
        if int(idx) not in seen:
            seen.add(int(idx))
            kp.append(int(idx))

    return MorphableModel(
        template=template,
        identity_basis=identity,
        expression_basis=expression,
        faces=faces,
        keypoint_indices=np.asarray(kp[:16], dtype=np.int64),
        eye_corner_slots=(0, 1),
        vertex_color_basis=color_basis,
    )


def mouth_keypoint_slots(model: MorphableModel) -> list[int]:
    """Slots of keypoints inside the mouth region (used for PCK-mouth)."""
    verts = model.template.numpy()
    dirs = verts / np.linalg.norm(verts, axis=1, keepdims=True)
    m = np.asarray(_MOUTH_DIR) / np.linalg.norm(_MOUTH_DIR)
    slots = []
    for slot, idx in enumerate(model.keypoint_indices.tolist()):
        if dirs[idx] @ m > math.cos(0.55):
            slots.append(slot)
    return slots


# ---------------------------------------------------------------------------
# Archive serialization (metadata JSON + raw little-endian float32 arrays)

def save_model(model: MorphableModel, path) -> None:
    meta = {
        "kind": "morphable-model",
        "n_vertices": model.n_vertices,
        "identity_dim": model.identity_dim,
        "expression_dim": model.expression_dim,
        "eye_corner_slots": list(model.eye_corner_slots),
        "has_color_basis": model.vertex_color_basis is not None,
    }
    arrays = {
        "template": model.template.numpy().astype(np.float32),
        "identity_basis": model.identity_basis.numpy().astype(np.float32),
        "expression_basis": model.expression_basis.numpy().astype(np.float32),
        "faces": model.faces.numpy().astype(np.int64),
        "keypoint_indices": model.keypoint_indices.numpy().astype(np.int64),
    }
    if model.vertex_color_basis is not None:
        arrays["vertex_color_basis"] = model.vertex_color_basis.numpy().astype(np.float32)
    archive.write_archive(path, meta, arrays)


def load_model(path) -> MorphableModel:
    meta, arrays = archive.read_archive(path)
    if meta.get("kind") != "morphable-model":
        raise ConfigurationError(f"{path}: not a morphable model archive")
    return MorphableModel(
        template=arrays["template"],
        identity_basis=arrays["identity_basis"],
        expression_basis=arrays["expression_basis"],
        faces=arrays["faces"],
        keypoint_indices=arrays["keypoint_indices"],
        eye_corner_slots=tuple(meta["eye_corner_slots"]),
        vertex_color_basis=arrays.get("vertex_color_basis"),
    )
