"""Synthetic linear blendshape face model.

Vertices are reconstructed as ``rigid(pose) o (mean + exp_basis @ alpha_exp
+ id_basis @ alpha_id)``; a pre-defined mouth vertex subset supplies the
retrieval keys and the supervision targets, and a perspective point
projection rasterizes the guide image that conditions the renderer.

Geometry computations run in float64; stored arrays are float32 so that
persisted bases and datasets round-trip bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ArgumentError, DomainError
from .tensor_store import read_manifest, write_manifest
from .validation import check_array, check_count


@dataclass
class BlendshapeBasis:
    """Mean vertices plus linear expression/identity bases."""

    mean_vertices: np.ndarray   # [V, 3] float32
    exp_basis: np.ndarray       # [V, 3, h_c] float32, unit Frobenius columns
    id_basis: np.ndarray        # [V, 3, h_id] float32, unit Frobenius columns
    mouth_index_set: np.ndarray  # [h_v] int64, unique, < V
    seed: int

    @property
    def v_total(self) -> int:
        return self.mean_vertices.shape[0]

    @property
    def h_c(self) -> int:
        return self.exp_basis.shape[2]

    @property
    def h_id(self) -> int:
        return self.id_basis.shape[2]

    @property
    def h_v(self) -> int:
        return self.mouth_index_set.shape[0]


@dataclass
class FaceCoefficients:
    """Identity, expression, and pose coefficients for one frame."""

    alpha_id: np.ndarray    # [h_id]
    alpha_exp: np.ndarray   # [h_c]
    alpha_pose: np.ndarray  # [6]: 3 rotation angles (radians) + 3 translation

    @classmethod
    def zeros(cls, h_c: int, h_id: int) -> "FaceCoefficients":
        return cls(np.zeros(h_id), np.zeros(h_c), np.zeros(6))


@dataclass
class MouthVertexSet:
    """Coordinates of the mouth-related vertex subset, shape [h_v, 3]."""

    coords: np.ndarray

    def __post_init__(self):
        self.coords = check_array("coords", self.coords, ndim=2, finite=True)
        if self.coords.shape[1] != 3:
            raise ArgumentError(f"coords must be [h_v, 3], got {self.coords.shape}")


@dataclass
class CameraSpec:
    """Pinhole perspective camera over an H x W canvas."""

    focal: float
    principal_point: tuple  # (cx, cy) in pixels
    canvas: tuple           # (H, W)

    def __post_init__(self):
        if self.focal <= 0:
            raise ArgumentError(f"focal must be positive, got {self.focal}")
        if self.canvas[0] <= 0 or self.canvas[1] <= 0:
            raise ArgumentError(f"canvas must be positive, got {self.canvas}")

    @classmethod
    def default(cls, image_size: int = 64) -> "CameraSpec":
        return cls(
            focal=float(image_size),
            principal_point=(image_size / 2.0, image_size / 2.0),
            canvas=(image_size, image_size),
        )


def make_synthetic_basis(
    seed: int, v_total: int, h_c: int, h_id: int, h_v: int
) -> BlendshapeBasis:
    """Seeded random basis: column-normalized bases, permuted mouth indices.

    The mean face sits around z=3 so the default camera sees every vertex
    at positive depth.
    """
    v_total = check_count("v_total", v_total)
    h_c = check_count("h_c", h_c)
    h_id = check_count("h_id", h_id)
    h_v = check_count("h_v", h_v)
    if h_v > v_total:
        raise ArgumentError(f"h_v ({h_v}) must not exceed v_total ({v_total})")

    rng = np.random.default_rng(seed)
    mean = np.empty((v_total, 3))
    mean[:, :2] = rng.normal(0.0, 0.35, size=(v_total, 2))
    mean[:, 2] = rng.normal(3.0, 0.15, size=v_total)

    def normalized(block: np.ndarray) -> np.ndarray:
        norms = np.sqrt((block**2).sum(axis=(0, 1), keepdims=True))
        return block / norms

    exp_basis = normalized(rng.normal(size=(v_total, 3, h_c)))
    id_basis = normalized(rng.normal(size=(v_total, 3, h_id)))
    mouth = rng.permutation(v_total)[:h_v]

    return BlendshapeBasis(
        mean_vertices=mean.astype(np.float32),
        exp_basis=exp_basis.astype(np.float32),
        id_basis=id_basis.astype(np.float32),
        mouth_index_set=mouth.astype(np.int64),
        seed=int(seed),
    )


def rotation_matrix(angles: np.ndarray) -> np.ndarray:
    """Composed rotation R = Rz(c) @ Ry(b) @ Rx(a) from [a, b, c] radians."""
    a, b, c = float(angles[0]), float(angles[1]), float(angles[2])
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cc, sc = np.cos(c), np.sin(c)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]])
    return rz @ ry @ rx


def reconstruct_vertices(basis: BlendshapeBasis, coeffs: FaceCoefficients) -> np.ndarray:
    """All-vertex reconstruction, float64, linear in alpha_exp at fixed pose."""
    alpha_exp = check_array("alpha_exp", coeffs.alpha_exp, shape=(basis.h_c,), finite=True)
    alpha_id = check_array("alpha_id", coeffs.alpha_id, shape=(basis.h_id,), finite=True)
    alpha_pose = check_array("alpha_pose", coeffs.alpha_pose, shape=(6,), finite=True)

    shape = (
        basis.mean_vertices.astype(np.float64)
        + np.einsum("vck,k->vc", basis.exp_basis.astype(np.float64), alpha_exp.astype(np.float64))
        + np.einsum("vck,k->vc", basis.id_basis.astype(np.float64), alpha_id.astype(np.float64))
    )
    rot = rotation_matrix(alpha_pose[:3])
    return shape @ rot.T + alpha_pose[3:6].astype(np.float64)


def extract_mouth_vertices(vertices: np.ndarray, basis: BlendshapeBasis) -> MouthVertexSet:
    """Gather mouth rows in index-set order."""
    vertices = check_array("vertices", vertices, shape=(basis.v_total, 3))
    return MouthVertexSet(coords=vertices[basis.mouth_index_set])


def project_to_guide_image(vertices: np.ndarray, camera: CameraSpec) -> np.ndarray:
    """Splat each vertex as intensity 1/z into its nearest pixel.

    Collisions max-compose; vertices falling off the canvas are dropped;
    nonpositive depth is a domain error naming the vertex.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    h, w = camera.canvas
    image = np.zeros((h, w), dtype=np.float64)
    if vertices.size == 0:
        return image.astype(np.float32)
    vertices = check_array("vertices", vertices, ndim=2)
    if vertices.shape[1] != 3:
        raise ArgumentError(f"vertices must be [n, 3], got {vertices.shape}")

    z = vertices[:, 2]
    bad = np.where(z <= 0)[0]
    if bad.size:
        raise DomainError(f"vertex {bad[0]} has nonpositive depth {z[bad[0]]}")

    cx, cy = camera.principal_point
    u = camera.focal * vertices[:, 0] / z + cx
    v = camera.focal * vertices[:, 1] / z + cy
    col = np.floor(u + 0.5).astype(np.int64)
    row = np.floor(v + 0.5).astype(np.int64)
    keep = (row >= 0) & (row < h) & (col >= 0) & (col < w)
    np.maximum.at(image, (row[keep], col[keep]), 1.0 / z[keep])
    return image.astype(np.float32)


def mouth_projection_center(vertices: np.ndarray, camera: CameraSpec) -> tuple:
    """(row, col) of the projected centroid of a vertex set, in pixels."""
    vertices = np.asarray(vertices, dtype=np.float64)
    z = vertices[:, 2]
    cx, cy = camera.principal_point
    u = camera.focal * vertices[:, 0] / z + cx
    v = camera.focal * vertices[:, 1] / z + cy
    return float(v.mean()), float(u.mean())


def save_basis(basis: BlendshapeBasis, directory: Path) -> str:
    meta = {
        "seed": basis.seed,
        "mouth_index_set": [int(i) for i in basis.mouth_index_set],
        "dims": {
            "v_total": basis.v_total,
            "h_c": basis.h_c,
            "h_id": basis.h_id,
            "h_v": basis.h_v,
        },
    }
    arrays = {
        "mean_vertices": basis.mean_vertices,
        "exp_basis": basis.exp_basis,
        "id_basis": basis.id_basis,
    }
    return write_manifest(directory, arrays, meta, kind="memtalk-basis-v1")


def load_basis(directory: Path) -> BlendshapeBasis:
    arrays, meta = read_manifest(directory, kind="memtalk-basis-v1")
    return BlendshapeBasis(
        mean_vertices=arrays["mean_vertices"],
        exp_basis=arrays["exp_basis"],
        id_basis=arrays["id_basis"],
        mouth_index_set=np.asarray(meta["mouth_index_set"], dtype=np.int64),
        seed=int(meta["seed"]),
    )


def mouth_basis_tensors(basis: BlendshapeBasis, dtype=torch.float32) -> dict:
    """Torch copies of the mouth-row slices, for differentiable losses."""
    idx = basis.mouth_index_set
    return {
        "mean": torch.as_tensor(basis.mean_vertices[idx], dtype=dtype),
        "exp": torch.as_tensor(basis.exp_basis[idx], dtype=dtype),
        "id": torch.as_tensor(basis.id_basis[idx], dtype=dtype),
    }


def mouth_vertices_from_exp(
    mouth_tensors: dict, alpha_exp: torch.Tensor, alpha_id: torch.Tensor | None = None
) -> torch.Tensor:
    """Differentiable [T, h_v, 3] mouth vertices from [T, h_c] expressions.

    Pose is applied by the caller when nonzero; the synthetic datasets use
    identity pose throughout.
    """
    out = mouth_tensors["mean"].unsqueeze(0) + torch.einsum(
        "vck,tk->tvc", mouth_tensors["exp"], alpha_exp
    )
    if alpha_id is not None:
        out = out + torch.einsum("vck,tk->tvc", mouth_tensors["id"], alpha_id)
    return out
