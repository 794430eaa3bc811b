"""Seeded synthetic dataset with an explicit one-to-many structure.

A latent token sequence drives both the audio features (shared token
embedding plus small noise) and the expression coefficients (a fixed
prototype-mixture map of the smoothed token embedding plus a per-style
offset), so one audio stream maps to several valid expression streams.
The prototype-mixture form makes the audio-to-expression map a genuine
soft lookup, which is the regime the sequence model's memory is built
for. Ground-truth frames are an analytic render: an identity-specific
background, a mouth ellipse whose texture phase follows the leading
expression coefficients, and a per-frame illumination scale, so the
renderer has a learnable target whose mouth detail genuinely benefits
from patch retrieval.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DataConfig, ModelDims
from .errors import ArgumentError
from .face_model import (
    BlendshapeBasis,
    CameraSpec,
    MouthVertexSet,
    make_synthetic_basis,
    project_to_guide_image,
)
from .tensor_store import read_manifest, write_manifest


@dataclass
class IdentitySpec:
    """Per-speaker generation parameters."""

    basis_seed: int
    texture_seed: int
    style_offsets: np.ndarray       # [S, h_c]
    illumination_levels: tuple
    identity_tag: str


@dataclass
class SampleRecord:
    """One frame of paired audio, geometry, and imagery."""

    audio: np.ndarray            # [h_a] float32
    exp: np.ndarray              # [h_c] float32
    mouth_vertices: MouthVertexSet
    guide: np.ndarray            # [H, W] float32
    gt_image: np.ndarray         # [H, W, C] float32 in [0, 1]
    masked_template: np.ndarray  # [H, W, C] float32
    style_id: int
    frame_id: int
    identity_tag: str


@dataclass
class SequenceSample:
    """A contiguous same-style window used for sequence training."""

    audio: np.ndarray   # [T, h_a]
    exp: np.ndarray     # [T, h_c]
    mouth: np.ndarray   # [T, h_v, 3]


def mask_rect(image_size: int) -> tuple:
    """(y0, y1, x0, x1) of the fixed lower-half template mask."""
    return (image_size // 2, image_size, 0, image_size)


def apply_mask(image: np.ndarray) -> np.ndarray:
    y0, y1, x0, x1 = mask_rect(image.shape[0])
    out = image.copy()
    out[y0:y1, x0:x1] = 0.0
    return out


def token_maps(dims: ModelDims, cfg: DataConfig) -> tuple:
    """Shared token embedding plus the prototype-mixture expression map.

    Returns ``(audio_map, centers, protos)``: expressions are read off as
    ``softmax(temp * smooth(audio_map[tokens]) @ centers.T) @ protos``.
    """
    rng = np.random.default_rng(cfg.token_seed)
    audio_map = rng.normal(0.0, 1.0, size=(cfg.vocab_size, dims.h_a))
    centers = rng.normal(0.0, 1.0 / np.sqrt(dims.h_a), size=(cfg.n_prototypes, dims.h_a))
    protos = rng.normal(0.0, 0.9, size=(cfg.n_prototypes, dims.h_c))
    return audio_map, centers, protos


def expression_stream(clean_audio: np.ndarray, centers: np.ndarray, protos: np.ndarray, temp: float) -> np.ndarray:
    """Prototype-mixture read-out of a clean audio stream."""
    logits = temp * (clean_audio @ centers.T)
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ protos


def generate_identity(seed: int, dims: ModelDims, cfg: DataConfig) -> IdentitySpec:
    """Deterministic speaker spec with well-separated style modes."""
    rng = np.random.default_rng(seed)
    floor = cfg.separation_floor * 1.3
    while True:
        offsets = rng.normal(0.0, cfg.style_offset_scale, size=(cfg.styles, dims.h_c))
        seps = [
            np.sqrt(((offsets[i] - offsets[j]) ** 2).mean())
            for i in range(cfg.styles)
            for j in range(i + 1, cfg.styles)
        ]
        if min(seps) >= floor:
            break
    return IdentitySpec(
        basis_seed=int(seed),
        texture_seed=int(seed) + 7919,
        style_offsets=offsets,
        illumination_levels=tuple(cfg.illumination_levels),
        identity_tag=f"id{int(seed):04d}",
    )


def identity_basis(identity: IdentitySpec, dims: ModelDims) -> BlendshapeBasis:
    return make_synthetic_basis(
        identity.basis_seed, dims.v_total, dims.h_c, dims.h_id, dims.h_v
    )


def _smooth(stream: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return stream
    padded = np.pad(stream, ((width // 2, width - 1 - width // 2), (0, 0)), mode="edge")
    kernel = np.ones(width) / width
    return np.stack(
        [np.convolve(padded[:, j], kernel, mode="valid") for j in range(stream.shape[1])],
        axis=1,
    )


def _background(identity: IdentitySpec, size: int, channels: int) -> np.ndarray:
    rng = np.random.default_rng(identity.texture_seed)
    low = rng.normal(0.0, 1.0, size=(8, 8, channels))
    ys = np.linspace(0, 7, size)
    xs = np.linspace(0, 7, size)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, 7)
    x1 = np.minimum(x0 + 1, 7)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    img = (
        low[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + low[np.ix_(y0, x1)] * (1 - fy) * fx
        + low[np.ix_(y1, x0)] * fy * (1 - fx)
        + low[np.ix_(y1, x1)] * fy * fx
    )
    img = (img - img.min()) / (img.max() - img.min() + 1e-12)
    return 0.25 + 0.5 * img


def _render_frame(
    identity: IdentitySpec,
    mouth_coords: np.ndarray,
    exp: np.ndarray,
    illum: float,
    background: np.ndarray,
    camera: CameraSpec,
) -> np.ndarray:
    h, w, channels = background.shape
    coords = mouth_coords.astype(np.float64)
    z = coords[:, 2]
    cx, cy = camera.principal_point
    us = camera.focal * coords[:, 0] / z + cx
    vs = camera.focal * coords[:, 1] / z + cy
    cu, cv = us.mean(), vs.mean()
    ra = max(3.0, 1.8 * us.std())
    rb = max(2.0, 1.4 * vs.std())

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    inside = ((xs - cu) / ra) ** 2 + ((ys - cv) / rb) ** 2 <= 1.0

    rng = np.random.default_rng(identity.texture_seed + 31)
    base_phase = rng.uniform(0, 2 * np.pi, size=channels)
    # per-identity mouth tint: a first-moment identity signature the
    # explicit memory carries into the renderer (backgrounds are drawn
    # independently, so patches are the only source of the mouth color)
    gains = rng.uniform(0.45, 1.0, size=channels)
    freq = 0.55 + 0.1 * float(exp[2])
    phase_x = 2.2 * float(exp[0])
    phase_y = 2.2 * float(exp[1])
    frame = background.copy()
    for c in range(channels):
        pattern = gains[c] * (
            0.5
            + 0.42
            * np.sin(freq * (xs - cu) + phase_x + base_phase[c])
            * np.cos(0.8 * freq * (ys - cv) + phase_y)
        )
        frame[:, :, c] = np.where(inside, pattern, frame[:, :, c])
    return np.clip(frame * illum, 0.0, 1.0)


def generate_sequence(
    identity: IdentitySpec,
    n_frames: int,
    style_id: int,
    seed: int,
    dims: ModelDims,
    cfg: DataConfig,
    basis: BlendshapeBasis | None = None,
    camera: CameraSpec | None = None,
    frame_id_start: int = 0,
) -> list:
    """Frames for one style; identical audio across styles at equal seed."""
    if style_id >= cfg.styles or style_id < 0:
        raise ArgumentError(f"style_id {style_id} out of range [0, {cfg.styles})")
    basis = basis if basis is not None else identity_basis(identity, dims)
    camera = camera if camera is not None else CameraSpec.default(dims.image_size)
    audio_map, centers, protos = token_maps(dims, cfg)

    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, cfg.vocab_size, size=n_frames)
    audio_noise = rng.normal(0.0, 1.0, size=(n_frames, dims.h_a)) * cfg.noise_amp
    illum_idx = rng.integers(0, len(identity.illumination_levels), size=n_frames)

    clean = _smooth(audio_map[tokens], cfg.smoothing)
    audio = clean + audio_noise
    exp = expression_stream(clean, centers, protos, cfg.proto_temp)
    exp = exp + identity.style_offsets[style_id]
    exp = np.clip(exp, -dims.exp_clamp, dims.exp_clamp)

    mean_mouth = basis.mean_vertices[basis.mouth_index_set].astype(np.float64)
    exp_mouth = basis.exp_basis[basis.mouth_index_set].astype(np.float64)
    mouth_all = mean_mouth[None] + np.einsum("vck,tk->tvc", exp_mouth, exp)

    background = _background(identity, dims.image_size, dims.channels)
    records = []
    for t in range(n_frames):
        mouth_f32 = mouth_all[t].astype(np.float32)
        guide = project_to_guide_image(mouth_f32, camera)
        illum = identity.illumination_levels[illum_idx[t]]
        gt = _render_frame(identity, mouth_f32, exp[t], illum, background, camera)
        gt = gt.astype(np.float32)
        records.append(
            SampleRecord(
                audio=audio[t].astype(np.float32),
                exp=exp[t].astype(np.float32),
                mouth_vertices=MouthVertexSet(coords=mouth_f32),
                guide=guide,
                gt_image=gt,
                masked_template=apply_mask(gt),
                style_id=int(style_id),
                frame_id=frame_id_start + t,
                identity_tag=identity.identity_tag,
            )
        )
    return records


def generate_split(
    identity: IdentitySpec,
    dims: ModelDims,
    cfg: DataConfig,
    seed: int,
    basis: BlendshapeBasis | None = None,
) -> tuple:
    """(train_records, heldout_records) across all styles, shared audio."""
    basis = basis if basis is not None else identity_basis(identity, dims)
    per_style_train = cfg.n_train_frames // cfg.styles
    per_style_held = cfg.n_heldout_frames // cfg.styles
    train, held = [], []
    for style in range(cfg.styles):
        train += generate_sequence(
            identity, per_style_train, style, seed, dims, cfg, basis,
            frame_id_start=style * 100000,
        )
        held += generate_sequence(
            identity, per_style_held, style, seed + 500, dims, cfg, basis,
            frame_id_start=style * 100000 + per_style_train,
        )
    return train, held


def sequence_windows(records, window: int, stride: int) -> list:
    """Same-style contiguous windows as SequenceSample batches."""
    by_style = {}
    for rec in records:
        by_style.setdefault(rec.style_id, []).append(rec)
    samples = []
    for style in sorted(by_style):
        recs = by_style[style]
        for start in range(0, len(recs) - window + 1, stride):
            chunk = recs[start : start + window]
            samples.append(
                SequenceSample(
                    audio=np.stack([r.audio for r in chunk]),
                    exp=np.stack([r.exp for r in chunk]),
                    mouth=np.stack([r.mouth_vertices.coords for r in chunk]),
                )
            )
    if not samples and records:
        raise ArgumentError(
            f"window {window} is longer than the available per-style sequences"
        )
    return samples


def write_dataset(records, directory: Path, extra_meta: dict | None = None) -> str:
    """Lossless float32 dataset directory with a verifying manifest."""
    if not records:
        raise ArgumentError("cannot write an empty dataset")
    tags = {r.identity_tag for r in records}
    if len(tags) != 1:
        raise ArgumentError(f"records span multiple identities: {sorted(tags)}")
    arrays = {
        "audio": np.stack([r.audio for r in records]),
        "exp": np.stack([r.exp for r in records]),
        "vertices": np.stack([r.mouth_vertices.coords for r in records]),
        "guide": np.stack([r.guide for r in records]),
        "gt": np.stack([r.gt_image for r in records]),
        "template": np.stack([r.masked_template for r in records]),
    }
    meta = {
        "identity_tag": records[0].identity_tag,
        "frames": len(records),
        "style_ids": [r.style_id for r in records],
        "frame_ids": [r.frame_id for r in records],
        "dims": {
            "h_a": int(arrays["audio"].shape[1]),
            "h_c": int(arrays["exp"].shape[1]),
            "h_v": int(arrays["vertices"].shape[1]),
            "H": int(arrays["gt"].shape[1]),
            "W": int(arrays["gt"].shape[2]),
            "C": int(arrays["gt"].shape[3]),
        },
    }
    if extra_meta:
        meta.update(extra_meta)
    return write_manifest(directory, arrays, meta, kind="memtalk-dataset-v1")


def read_dataset(directory: Path) -> list:
    """Records from a dataset directory; integrity-checked."""
    arrays, meta = read_manifest(directory, kind="memtalk-dataset-v1")
    records = []
    for t in range(meta["frames"]):
        records.append(
            SampleRecord(
                audio=arrays["audio"][t],
                exp=arrays["exp"][t],
                mouth_vertices=MouthVertexSet(coords=arrays["vertices"][t]),
                guide=arrays["guide"][t],
                gt_image=arrays["gt"][t],
                masked_template=arrays["template"][t],
                style_id=int(meta["style_ids"][t]),
                frame_id=int(meta["frame_ids"][t]),
                identity_tag=meta["identity_tag"],
            )
        )
    return records


def read_dataset_meta(directory: Path) -> dict:
    _, meta = read_manifest(directory, kind="memtalk-dataset-v1")
    return meta
