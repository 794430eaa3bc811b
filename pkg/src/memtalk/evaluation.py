"""Metrics, ablation matrix, memory-size sweeps, and probe experiments.

Every ablation cell for one seed consumes the same generated dataset
(recorded by manifest hash), so metric differences are attributable to the
variant. Cells append JSON logs as they finish; the CSV report is a pure
function of those logs and can be regenerated bit-identically.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import traceback
from dataclasses import dataclass, field

import numpy as np
import torch

from .a2e import (
    A2EModel,
    evaluate_vertex_rmse,
    explicit_a2e_bank,
    train_a2e,
)
from .config import RunConfig
from .errors import ArgumentError
from .explicit_memory import build_explicit_memory, build_pool_from_records
from .face_model import BlendshapeBasis, CameraSpec
from .renderer import (
    Discriminator,
    FixedFeatureExtractor,
    RendererModel,
    _feature_distance_t,
    _to_chw,
    bank_tensors,
    train_renderer,
)
from .synth_data import generate_identity, generate_split, identity_basis, sequence_windows
from .tensor_store import canonical_json, sha256_bytes
from .validation import check_same_shape


def vertex_rmse(pred, gt, basis: BlendshapeBasis | None = None) -> float:
    """Mean over frames of the per-frame RMS mouth-vertex distance.

    Accepts [T, h_c] expression streams (converted through ``basis`` at
    identity pose) or [T, h_v, 3] vertex streams.
    """
    pred_v = _as_vertex_stream(pred, basis)
    gt_v = _as_vertex_stream(gt, basis)
    if pred_v.shape != gt_v.shape:
        raise ArgumentError(
            f"vertex stream shapes disagree: {pred_v.shape} vs {gt_v.shape}"
        )
    diff = pred_v - gt_v
    per_frame = np.sqrt((diff**2).sum(axis=2).mean(axis=1))
    return float(per_frame.mean())


def _as_vertex_stream(value, basis: BlendshapeBasis | None) -> np.ndarray:
    coeffs = getattr(value, "coeffs", value)
    arr = np.asarray(coeffs, dtype=np.float64)
    if arr.ndim == 3:
        return arr
    if arr.ndim != 2:
        raise ArgumentError(f"expected [T, h_c] or [T, h_v, 3], got {arr.shape}")
    if basis is None:
        raise ArgumentError("expression input requires a blendshape basis")
    mouth_mean = basis.mean_vertices[basis.mouth_index_set].astype(np.float64)
    mouth_exp = basis.exp_basis[basis.mouth_index_set].astype(np.float64)
    return mouth_mean[None] + np.einsum("vck,tk->tvc", mouth_exp, arr)


def image_metrics(pred_stream, gt_stream, extractor: FixedFeatureExtractor | None = None) -> dict:
    """{mse, psnr, feat_dist} averaged over frames; psnr is +inf at mse 0."""
    pred = np.asarray(pred_stream, dtype=np.float64)
    gt = np.asarray(gt_stream, dtype=np.float64)
    check_same_shape("pred", pred, "gt", gt)
    if extractor is None:
        extractor = FixedFeatureExtractor(channels=pred.shape[-1])
    mse = float(((pred - gt) ** 2).mean())
    psnr = math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)
    with torch.no_grad():
        pa = torch.stack([_to_chw(f, torch.float32) for f in pred])
        ga = torch.stack([_to_chw(f, torch.float32) for f in gt])
        feats = [
            float(_feature_distance_t(pa[t : t + 1], ga[t : t + 1], extractor))
            for t in range(pa.shape[0])
        ]
    return {"mse": mse, "psnr": psnr, "feat_dist": float(np.mean(feats))}


def render_records(model: RendererModel, records, bank) -> np.ndarray:
    """[T, H, W, C] renders of a record stream."""
    dtype = next(model.parameters()).dtype
    keys = values = None
    if model.memory_mode == "explicit":
        keys, values = bank_tensors(bank, dtype)
    guides = torch.stack([_to_chw(r.guide, dtype) for r in records])
    templates = torch.stack([_to_chw(r.masked_template, dtype) for r in records])
    queries = torch.as_tensor(
        np.stack([r.mouth_vertices.coords.reshape(-1) for r in records]).astype(np.float64),
        dtype=dtype,
    )
    model.eval()
    with torch.no_grad():
        out = model(guides, templates, queries, keys, values)
    return out.permute(0, 2, 3, 1).numpy()


def toy_randomize_implicit_memory(model: A2EModel, seed: int) -> A2EModel:
    """Copy of the model with its memory resampled from the init law."""
    if model.bank is None:
        raise ArgumentError("model has no implicit memory to randomize")
    out = copy.deepcopy(model)
    out.bank.randomize_(seed)
    return out


def toy_swap_explicit_memory(
    model: RendererModel,
    bank_own,
    bank_other,
    heldout_records,
    extractor: FixedFeatureExtractor | None = None,
) -> dict:
    """Metric deltas when held-out frames render against a foreign bank."""
    gt = np.stack([r.gt_image for r in heldout_records])
    with_own = image_metrics(render_records(model, heldout_records, bank_own), gt, extractor)
    with_other = image_metrics(
        render_records(model, heldout_records, bank_other), gt, extractor
    )
    return {
        "own": with_own,
        "swapped": with_other,
        "delta_mse": with_other["mse"] - with_own["mse"],
        "delta_feat_dist": with_other["feat_dist"] - with_own["feat_dist"],
        "swapped_identity": bank_other.identity_tag,
    }


@dataclass
class AblationVariant:
    a2e_memory: str = "implicit"    # none | implicit | explicit
    nr_memory: str = "explicit"     # none | implicit | explicit

    @property
    def label(self) -> str:
        return f"a2e={self.a2e_memory},nr={self.nr_memory}"


@dataclass
class AblationPlan:
    variants: list = field(
        default_factory=lambda: [
            AblationVariant("implicit", "explicit"),
            AblationVariant("none", "explicit"),
            AblationVariant("explicit", "explicit"),
            AblationVariant("implicit", "none"),
            AblationVariant("implicit", "implicit"),
        ]
    )
    m_sweep: list = field(default_factory=lambda: [500, 1000, 1500, 2000])
    n_sweep: list = field(default_factory=lambda: [100, 200, 300, 500])
    d_sweep: list = field(default_factory=lambda: [32, 64, 96, 128])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])

    def to_dict(self) -> dict:
        return {
            "variants": [
                {"a2e_memory": v.a2e_memory, "nr_memory": v.nr_memory} for v in self.variants
            ],
            "m_sweep": list(self.m_sweep),
            "n_sweep": list(self.n_sweep),
            "d_sweep": list(self.d_sweep),
            "seeds": list(self.seeds),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "AblationPlan":
        plan = cls()
        if "variants" in payload:
            plan.variants = [AblationVariant(**v) for v in payload["variants"]]
        for key in ("m_sweep", "n_sweep", "d_sweep", "seeds"):
            if key in payload:
                setattr(plan, key, list(payload[key]))
        if not plan.variants or not plan.seeds:
            raise ArgumentError("ablation plan needs at least one variant and one seed")
        return plan


@dataclass
class AblationReport:
    cells: list

    def rows(self) -> list:
        return sorted(self.cells, key=lambda c: c["cell_id"])

    def summary(self) -> list:
        """Seed medians and spreads per cell family."""
        groups = {}
        for cell in self.cells:
            if cell.get("status") != "ok":
                continue
            key_fields = {
                "variant": cell.get("a2e_memory", "") and f"a2e={cell['a2e_memory']},nr={cell['nr_memory']}",
                "m_sweep": f"m={cell.get('m')}",
                "n_sweep": f"n={cell.get('n')}",
                "d_sweep": f"d={cell.get('d')}",
            }
            label = f"{cell['kind']}:{key_fields.get(cell['kind'], '')}"
            groups.setdefault(label, []).append(cell)
        rows = []
        for label in sorted(groups):
            cells = groups[label]
            entry = {"group": label, "seeds": len(cells)}
            for metric in ("vertex_rmse", "mse", "feat_dist"):
                values = [c[metric] for c in cells if metric in c]
                if values:
                    entry[f"{metric}_median"] = float(np.median(values))
                    entry[f"{metric}_spread"] = float(np.max(values) - np.min(values))
            rows.append(entry)
        return rows


@dataclass
class SeedData:
    """Everything one ablation seed shares across its cells."""

    identity: object
    basis: BlendshapeBasis
    train_records: list
    held_records: list
    train_windows: list
    held_windows: list
    data_hash: str


def prepare_seed_data(config: RunConfig, seed: int) -> SeedData:
    identity = generate_identity(config.identity_seed, config.dims, config.data)
    basis = identity_basis(identity, config.dims)
    train, held = generate_split(identity, config.dims, config.data, seed=seed, basis=basis)
    payload = {
        "identity": identity.identity_tag,
        "seed": seed,
        "frame_ids": [r.frame_id for r in train + held],
        "audio_hash": sha256_bytes(
            np.stack([r.audio for r in train + held]).tobytes()
        ),
    }
    data_hash = sha256_bytes(canonical_json(payload).encode())
    return SeedData(
        identity=identity,
        basis=basis,
        train_records=train,
        held_records=held,
        train_windows=sequence_windows(train, config.a2e.window, config.a2e.window_stride),
        held_windows=sequence_windows(held, config.a2e.window, config.a2e.window),
        data_hash=data_hash,
    )


def make_a2e_variant(kind: str, config: RunConfig, data: SeedData, seed: int) -> A2EModel:
    kwargs = {}
    if kind == "explicit":
        keys, values = explicit_a2e_bank(
            data.train_records, config.a2e.memory_size, seed
        )
        kwargs = {"explicit_keys": keys, "explicit_values": values}
    return A2EModel(
        h_a=config.dims.h_a,
        h_c=config.dims.h_c,
        memory_mode=kind,
        memory_size=config.a2e.memory_size,
        memory_dim=config.a2e.memory_dim,
        layers=config.a2e.enc_layers,
        heads=config.a2e.heads,
        seed=seed,
        bank_init_std=config.a2e.memory_init_std,
        ffn_dim=config.a2e.ffn_dim,
        **kwargs,
    )


def run_a2e_cell(kind: str, config: RunConfig, data: SeedData, seed: int) -> dict:
    cfg = copy.deepcopy(config.a2e)
    cfg.seed = seed
    model = make_a2e_variant(kind, config, data, seed)
    train_a2e(model, data.train_windows, data.basis, cfg)
    return {
        "vertex_rmse": evaluate_vertex_rmse(model, data.held_windows, data.basis),
    }


def run_nr_cell(
    kind: str, config: RunConfig, data: SeedData, seed: int, n_override: int | None = None
) -> dict:
    cfg = copy.deepcopy(config.nr)
    cfg.seed = seed
    n_pairs = n_override if n_override is not None else cfg.n_explicit
    camera = CameraSpec.default(config.dims.image_size)
    bank = None
    if kind == "explicit":
        pool = build_pool_from_records(data.train_records, camera, config.dims.patch_size)
        n_pairs = min(n_pairs, len(pool))
        bank = build_explicit_memory(
            pool, n_pairs, seed, identity_tag=data.train_records[0].identity_tag
        )
    model = RendererModel(
        image_size=config.dims.image_size,
        channels=config.dims.channels,
        base_channels=cfg.base_channels,
        depth=cfg.depth,
        h_v=config.dims.h_v,
        patch_size=config.dims.patch_size,
        memory_mode=kind,
        sim_kind=cfg.sim_kind,
        key_hidden=cfg.key_hidden,
        seed=seed,
    )
    disc = Discriminator(channels=config.dims.channels, seed=seed + 1)
    extractor = FixedFeatureExtractor(channels=config.dims.channels)
    train_renderer(model, disc, data.train_records, bank, cfg, extractor=extractor)
    preds = render_records(model, data.held_records, bank)
    gt = np.stack([r.gt_image for r in data.held_records])
    return image_metrics(preds, gt, extractor)


def run_ablation(plan: AblationPlan, config: RunConfig, workdir) -> AblationReport:
    """Train every planned cell; failures are recorded, not raised."""
    from pathlib import Path

    workdir = Path(workdir)
    cell_dir = workdir / "cells"
    cell_dir.mkdir(parents=True, exist_ok=True)
    cells = []

    def run_cell(cell_id: str, seed: int, kind: str, params: dict, fn) -> None:
        row = {"cell_id": cell_id, "seed": seed, "kind": kind, **params}
        try:
            row.update(fn())
            row["status"] = "ok"
        except Exception as exc:  # cell failures must not kill the sweep
            row["status"] = "failed"
            row["diagnostic"] = f"{type(exc).__name__}: {exc}"
            traceback.print_exc()
        cells.append(row)
        (cell_dir / f"{cell_id}.json").write_text(canonical_json(row))

    for seed in plan.seeds:
        data = prepare_seed_data(config, seed)
        common = {"data_hash": data.data_hash}
        for variant in plan.variants:
            run_cell(
                f"seed{seed}.variant.{variant.label}",
                seed,
                "variant",
                {**common, "a2e_memory": variant.a2e_memory, "nr_memory": variant.nr_memory},
                lambda v=variant, s=seed, d=data: {
                    **run_a2e_cell(v.a2e_memory, config, d, s),
                    **run_nr_cell(v.nr_memory, config, d, s),
                },
            )
        for m in plan.m_sweep:
            cfg_m = copy.deepcopy(config)
            cfg_m.a2e.memory_size = m
            run_cell(
                f"seed{seed}.m_sweep.{m}",
                seed,
                "m_sweep",
                {**common, "m": m},
                lambda c=cfg_m, s=seed, d=data: run_a2e_cell("implicit", c, d, s),
            )
        for n in plan.n_sweep:
            run_cell(
                f"seed{seed}.n_sweep.{n}",
                seed,
                "n_sweep",
                {**common, "n": n},
                lambda s=seed, d=data, nn=n: run_nr_cell("explicit", config, d, s, n_override=nn),
            )
        for dim in plan.d_sweep:
            cfg_d = copy.deepcopy(config)
            cfg_d.a2e.memory_dim = dim
            run_cell(
                f"seed{seed}.d_sweep.{dim}",
                seed,
                "d_sweep",
                {**common, "d": dim},
                lambda c=cfg_d, s=seed, d=data: run_a2e_cell("implicit", c, d, s),
            )

    report = AblationReport(cells=cells)
    write_report(report, workdir)
    return report


REPORT_COLUMNS = [
    "cell_id", "kind", "seed", "status", "a2e_memory", "nr_memory", "m", "n", "d",
    "vertex_rmse", "mse", "psnr", "feat_dist", "data_hash", "diagnostic",
]


def report_csv_text(report: AblationReport) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(
        buf, fieldnames=REPORT_COLUMNS, extrasaction="ignore", lineterminator="\n"
    )
    writer.writeheader()
    for row in report.rows():
        writer.writerow({k: _csv_value(row.get(k)) for k in REPORT_COLUMNS})
    return buf.getvalue()


def _csv_value(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))
    return value


SUMMARY_COLUMNS = [
    "group", "seeds", "vertex_rmse_median", "vertex_rmse_spread",
    "mse_median", "mse_spread", "feat_dist_median", "feat_dist_spread",
]


def direction_notes(report: AblationReport) -> list:
    """Directional comparisons of the memory variants against their
    memoryless baselines (directions only, magnitudes are desk-scale).

    The a2e explicit-memory variant uses per-frame audio-feature keys.
    """
    summary = {row["group"]: row for row in report.summary()}
    notes = []

    def compare(metric, mem_group, base_group, label):
        mem = summary.get(f"variant:{mem_group}")
        base = summary.get(f"variant:{base_group}")
        if not mem or not base or f"{metric}_median" not in mem or f"{metric}_median" not in base:
            return
        a, b = mem[f"{metric}_median"], base[f"{metric}_median"]
        notes.append(
            f"{label}: {metric} median {a:.6f} (memory) vs {b:.6f} (baseline) "
            f"-> memory {'<=' if a <= b else '>'} baseline"
        )

    compare("vertex_rmse", "a2e=implicit,nr=explicit", "a2e=none,nr=explicit",
            "a2e implicit vs none")
    compare("vertex_rmse", "a2e=implicit,nr=explicit", "a2e=explicit,nr=explicit",
            "a2e implicit vs explicit")
    compare("mse", "a2e=implicit,nr=explicit", "a2e=implicit,nr=none",
            "renderer explicit vs none")
    compare("feat_dist", "a2e=implicit,nr=explicit", "a2e=implicit,nr=none",
            "renderer explicit vs none")
    compare("mse", "a2e=implicit,nr=explicit", "a2e=implicit,nr=implicit",
            "renderer explicit vs implicit")
    return notes


def write_report(report: AblationReport, workdir) -> None:
    from pathlib import Path

    workdir = Path(workdir)
    (workdir / "report.csv").write_text(report_csv_text(report))
    buf = io.StringIO()
    writer = csv.DictWriter(
        buf, fieldnames=SUMMARY_COLUMNS, extrasaction="ignore", lineterminator="\n"
    )
    writer.writeheader()
    for row in report.summary():
        writer.writerow({k: _csv_value(row.get(k)) for k in SUMMARY_COLUMNS})
    (workdir / "summary.csv").write_text(buf.getvalue())
    notes = direction_notes(report)
    if notes:
        (workdir / "directions.txt").write_text("\n".join(notes) + "\n")
    for kind, metric in (("m_sweep", "vertex_rmse"), ("d_sweep", "vertex_rmse"), ("n_sweep", "mse")):
        rows = [c for c in report.rows() if c["kind"] == kind]
        if not rows:
            continue
        lines = [f"{'cell':40s} {metric:>16s}"]
        for row in rows:
            val = row.get(metric)
            lines.append(f"{row['cell_id']:40s} {'' if val is None else f'{val:16.8f}'}")
        (workdir / f"{kind}_table.txt").write_text("\n".join(lines) + "\n")


def regenerate_report(workdir) -> str:
    """Rebuild the CSV purely from the stored per-cell logs."""
    from pathlib import Path

    cell_dir = Path(workdir) / "cells"
    cells = [json.loads(p.read_text()) for p in sorted(cell_dir.glob("*.json"))]
    return report_csv_text(AblationReport(cells=cells))
