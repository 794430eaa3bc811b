"""Per-identity explicit memory: mouth-vertex keys paired with image patches.

The bank keeps the N most mutually dissimilar mouth shapes found by a
greedy swap pass: repeatedly locate the closest pair of selected keys and
try to replace one member with a pool candidate so the minimum pairwise
RMS distance strictly increases. Construction iterates passes until a full
pass accepts no swap, so every returned bank is locally optimal under
single swaps of closest-pair members.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError
from .face_model import CameraSpec, MouthVertexSet, mouth_projection_center
from .tensor_store import read_manifest, write_manifest
from .validation import check_same_shape


@dataclass
class VertexPatchPair:
    """One memory slot: a mouth shape and its image patch."""

    key: MouthVertexSet
    value: np.ndarray        # [P, P, C] float32 in [0, 1]
    source_frame: int


@dataclass
class ExplicitMemoryBank:
    """N fixed vertex-patch pairs for one identity."""

    pairs: list
    identity_tag: str
    min_pair_distance: float
    seed: int = 0

    @property
    def n(self) -> int:
        return len(self.pairs)

    def keys_array(self) -> np.ndarray:
        return np.stack([p.key.coords for p in self.pairs])

    def values_array(self) -> np.ndarray:
        return np.stack([p.value for p in self.pairs])

    def source_frames(self) -> list:
        return [p.source_frame for p in self.pairs]


def rms_distance(a: MouthVertexSet, b: MouthVertexSet) -> float:
    """Root-mean-square distance between two equal-shape vertex sets."""
    check_same_shape("a", a.coords, "b", b.coords)
    diff = a.coords.astype(np.float64) - b.coords.astype(np.float64)
    return float(np.sqrt((diff**2).sum(axis=1).mean()))


def _key_stack(keys) -> np.ndarray:
    coords = [k.coords if isinstance(k, MouthVertexSet) else np.asarray(k) for k in keys]
    return np.stack(coords).astype(np.float64)


def _distance_matrix(stack: np.ndarray) -> np.ndarray:
    diff = stack[:, None, :, :] - stack[None, :, :, :]
    return np.sqrt((diff**2).sum(axis=3).mean(axis=2))


def _distances_to(stack: np.ndarray, key: np.ndarray) -> np.ndarray:
    diff = stack - key[None]
    return np.sqrt((diff**2).sum(axis=2).mean(axis=1))


def closest_pair(keys) -> tuple:
    """(i, j, d_min) with i < j; ties broken lexicographically on (i, j)."""
    if len(keys) < 2:
        raise ArgumentError(f"closest_pair needs at least 2 keys, got {len(keys)}")
    stack = _key_stack(keys)
    dist = _distance_matrix(stack)
    iu, ju = np.triu_indices(len(keys), k=1)
    flat = dist[iu, ju]
    best = int(np.argmin(flat))  # first minimum in row-major order = lexicographic
    return int(iu[best]), int(ju[best]), float(flat[best])


def _closest_from_matrix(dist: np.ndarray) -> tuple:
    n = dist.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    flat = dist[iu, ju]
    best = int(np.argmin(flat))
    return int(iu[best]), int(ju[best]), float(flat[best])


def _min_excluding(dist: np.ndarray, member: int) -> float:
    """Minimum pairwise distance after dropping one selection member."""
    n = dist.shape[0]
    if n <= 2:
        return np.inf
    keep = np.arange(n) != member
    sub = dist[np.ix_(keep, keep)]
    iu, ju = np.triu_indices(sub.shape[0], k=1)
    return float(sub[iu, ju].min())


def initial_selection_indices(pool_size: int, n: int, seed: int) -> np.ndarray:
    """The seeded random initialization shared by build and its tests."""
    rng = np.random.default_rng(seed)
    return rng.choice(pool_size, size=n, replace=False)


def build_explicit_memory(
    pool,
    n: int,
    seed: int,
    identity_tag: str = "",
    max_passes: int | None = None,
) -> ExplicitMemoryBank:
    """Greedy max-min selection of ``n`` pairs from the pool.

    ``max_passes=1`` gives the strictly single-pass variant; the default
    repeats passes until one accepts no swap, which makes the stability
    postcondition unconditional.
    """
    if n < 2:
        raise ArgumentError(f"bank size must be >= 2, got {n}")
    if n > len(pool):
        raise ArgumentError(f"bank size {n} exceeds pool size {len(pool)}")

    selected = [pool[i] for i in initial_selection_indices(len(pool), n, seed)]
    stack = _key_stack([p.key for p in selected])
    pool_stack = _key_stack([p.key for p in pool])
    dist = _distance_matrix(stack)
    m1, m2, d_min = _closest_from_matrix(dist)
    rest_min = {m1: _min_excluding(dist, m1), m2: _min_excluding(dist, m2)}

    passes = 0
    while True:
        passes += 1
        accepted_in_pass = False
        for cand_idx in range(len(pool)):
            cand_key = pool_stack[cand_idx]
            d_cand = _distances_to(stack, cand_key)
            options = {}
            for member in (m1, m2):
                other = np.delete(d_cand, member)
                options[member] = min(rest_min[member], float(other.min()) if other.size else np.inf)
            d1, d2 = options[m1], options[m2]
            if max(d1, d2) > d_min:
                member = m1 if d1 > d2 else m2
                selected[member] = pool[cand_idx]
                stack[member] = cand_key
                new_row = _distances_to(stack, cand_key)
                new_row[member] = 0.0
                dist[member, :] = new_row
                dist[:, member] = new_row
                m1, m2, d_min = _closest_from_matrix(dist)
                rest_min = {m1: _min_excluding(dist, m1), m2: _min_excluding(dist, m2)}
                accepted_in_pass = True
        if not accepted_in_pass:
            break
        if max_passes is not None and passes >= max_passes:
            break

    return ExplicitMemoryBank(
        pairs=list(selected),
        identity_tag=identity_tag,
        min_pair_distance=d_min,
        seed=int(seed),
    )


def stability_check(bank: ExplicitMemoryBank, pool) -> bool:
    """True iff no single closest-pair swap strictly increases d_min."""
    stack = _key_stack([p.key for p in bank.pairs])
    dist = _distance_matrix(stack)
    m1, m2, d_min = _closest_from_matrix(dist)
    rest_min = {m1: _min_excluding(dist, m1), m2: _min_excluding(dist, m2)}
    for pair in pool:
        d_cand = _distances_to(stack, np.asarray(pair.key.coords, dtype=np.float64))
        for member in (m1, m2):
            other = np.delete(d_cand, member)
            new_min = min(rest_min[member], float(other.min()) if other.size else np.inf)
            if new_min > d_min:
                return False
    return True


def rebuild_for_identity(
    pool_new, n: int, seed: int, identity_tag: str
) -> ExplicitMemoryBank:
    """Fresh bank for a new speaker's pool."""
    return build_explicit_memory(pool_new, n, seed, identity_tag=identity_tag)


def build_pool_from_records(records, camera: CameraSpec, patch_size: int) -> list:
    """Vertex-patch pool from dataset records: patch cropped at the
    projected mouth centroid of each frame."""
    pool = []
    for record in records:
        row, col = mouth_projection_center(record.mouth_vertices.coords, camera)
        h, w = record.gt_image.shape[:2]
        top = int(np.clip(int(np.floor(row + 0.5)) - patch_size // 2, 0, h - patch_size))
        left = int(np.clip(int(np.floor(col + 0.5)) - patch_size // 2, 0, w - patch_size))
        patch = record.gt_image[top : top + patch_size, left : left + patch_size].copy()
        pool.append(
            VertexPatchPair(
                key=record.mouth_vertices, value=patch, source_frame=record.frame_id
            )
        )
    return pool


def save_bank(bank: ExplicitMemoryBank, directory: Path) -> str:
    values = bank.values_array()
    meta = {
        "identity_tag": bank.identity_tag,
        "n": bank.n,
        "p": int(values.shape[1]),
        "c": int(values.shape[3]),
        "h_v": int(bank.pairs[0].key.coords.shape[0]),
        "seed": bank.seed,
        "d_min": bank.min_pair_distance,
        "source_frames": [int(f) for f in bank.source_frames()],
    }
    arrays = {"keys": bank.keys_array(), "values": values}
    return write_manifest(directory, arrays, meta, kind="memtalk-bank-v1")


def load_bank(directory: Path) -> ExplicitMemoryBank:
    arrays, meta = read_manifest(directory, kind="memtalk-bank-v1")
    pairs = [
        VertexPatchPair(
            key=MouthVertexSet(coords=arrays["keys"][i]),
            value=arrays["values"][i],
            source_frame=int(meta["source_frames"][i]),
        )
        for i in range(meta["n"])
    ]
    return ExplicitMemoryBank(
        pairs=pairs,
        identity_tag=meta["identity_tag"],
        min_pair_distance=float(meta["d_min"]),
        seed=int(meta["seed"]),
    )
