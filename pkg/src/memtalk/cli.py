"""Command-line pipeline orchestration.

Every command writes into its own run directory with the resolved config
snapshot copied in, emits manifest-hashed artifacts, and skips work it has
already completed (detected via a ``done.json`` marker naming the output
hashes). Failures exit nonzero with one machine-parseable line:
``error: <category>: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import a2e as a2e_mod
from . import renderer as nr_mod
from .config import RunConfig
from .errors import MemtalkError
from .evaluation import (
    AblationPlan,
    image_metrics,
    run_ablation,
    vertex_rmse,
)
from .explicit_memory import (
    build_explicit_memory,
    build_pool_from_records,
    load_bank,
    save_bank,
)
from .face_model import (
    CameraSpec,
    MouthVertexSet,
    load_basis,
    project_to_guide_image,
    save_basis,
)
from .renderer import FixedFeatureExtractor, RenderInput
from .synth_data import (
    generate_identity,
    generate_split,
    identity_basis,
    read_dataset,
    sequence_windows,
    write_dataset,
)
from .tensor_store import manifest_hash

EXIT_CODES = {
    "config-error": 2,
    "argument-error": 2,
    "domain-error": 2,
    "integrity-error": 3,
    "numeric-error": 4,
    "io-error": 5,
    "error": 1,
}


def _out_root() -> Path:
    return Path(os.environ.get("MEMTALK_OUT_ROOT", "."))


def _resolve_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig.desk()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.a2e.seed = args.seed
        cfg.nr.seed = args.seed
    if getattr(args, "identity_seed", None) is not None:
        cfg.identity_seed = args.identity_seed
    if getattr(args, "epochs", None) is not None:
        cfg.a2e.epochs = args.epochs
        cfg.nr.epochs = args.epochs
    return cfg


def _run_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out) if args.out else _out_root() / "memtalk-run"
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    return out


def _mark_done(out: Path, payload: dict) -> None:
    (out / "done.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def _already_done(out: Path) -> dict | None:
    marker = out / "done.json"
    if not marker.exists():
        return None
    try:
        payload = json.loads(marker.read_text())
        for rel, expected in payload.get("hashes", {}).items():
            if manifest_hash(out / rel) != expected:
                return None
        return payload
    except (OSError, json.JSONDecodeError, KeyError):
        return None


def _write_metrics_csv(path: Path, rows: list, columns: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {k: repr(v) if isinstance(v, float) else v for k, v in row.items()}
            )


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    out = _run_dir(args, cfg)
    if _already_done(out):
        print(f"gen-data: complete under {out}, skipping")
        return 0
    identity = generate_identity(cfg.identity_seed, cfg.dims, cfg.data)
    basis = identity_basis(identity, cfg.dims)
    train, held = generate_split(identity, cfg.dims, cfg.data, seed=cfg.seed, basis=basis)
    extra = {"identity_seed": cfg.identity_seed, "sequence_seed": cfg.seed}
    hashes = {
        "basis": save_basis(basis, out / "basis"),
        "train": write_dataset(train, out / "train", extra),
        "heldout": write_dataset(held, out / "heldout", extra),
    }
    _mark_done(out, {"command": "gen-data", "hashes": hashes})
    print(f"gen-data: wrote {len(train)} train / {len(held)} held-out frames to {out}")
    return 0


def cmd_train_a2e(args) -> int:
    cfg = _resolve_config(args)
    out = _run_dir(args, cfg)
    if _already_done(out):
        print(f"train-a2e: complete under {out}, skipping")
        return 0
    data_dir = Path(args.data)
    train = read_dataset(data_dir / "train")
    held = read_dataset(data_dir / "heldout")
    basis = load_basis(data_dir / "basis")
    windows = sequence_windows(train, cfg.a2e.window, cfg.a2e.window_stride)
    held_windows = sequence_windows(held, cfg.a2e.window, cfg.a2e.window)
    model = a2e_mod.A2EModel(
        h_a=cfg.dims.h_a,
        h_c=cfg.dims.h_c,
        memory_mode=args.memory,
        memory_size=cfg.a2e.memory_size,
        memory_dim=cfg.a2e.memory_dim,
        layers=cfg.a2e.enc_layers,
        heads=cfg.a2e.heads,
        seed=cfg.seed,
        bank_init_std=cfg.a2e.memory_init_std,
        ffn_dim=cfg.a2e.ffn_dim,
    )
    result = a2e_mod.train_a2e(model, windows, basis, cfg.a2e, heldout=held_windows)
    ck_hash = a2e_mod.save_a2e_checkpoint(
        model, out / "checkpoint", optimizers=result.optimizers, rng_state=result.rng_state
    )
    _write_metrics_csv(
        out / "history.csv",
        result.history,
        ["epoch", "l_cof", "l_vtx", "l_reg", "total", "heldout_vertex_rmse"],
    )
    _mark_done(out, {"command": "train-a2e", "hashes": {"checkpoint": ck_hash}})
    final = result.history[-1]
    print(
        f"train-a2e: {result.steps} steps, heldout vertex RMSE "
        f"{final.get('heldout_vertex_rmse', float('nan')):.6f}, checkpoint at {out}"
    )
    return 0


def cmd_build_mem(args) -> int:
    cfg = _resolve_config(args)
    out = _run_dir(args, cfg)
    if _already_done(out):
        print(f"build-mem: complete under {out}, skipping")
        return 0
    records = read_dataset(Path(args.data) / "train")
    camera = CameraSpec.default(cfg.dims.image_size)
    pool = build_pool_from_records(records, camera, cfg.dims.patch_size)
    n_pairs = min(cfg.nr.n_explicit, len(pool))
    bank = build_explicit_memory(
        pool, n_pairs, cfg.seed, identity_tag=records[0].identity_tag
    )
    bank_hash = save_bank(bank, out / "bank")
    _mark_done(out, {"command": "build-mem", "hashes": {"bank": bank_hash}})
    print(
        f"build-mem: {bank.n} pairs, min pair distance {bank.min_pair_distance:.6f}, "
        f"bank at {out}"
    )
    return 0


def cmd_train_nr(args) -> int:
    cfg = _resolve_config(args)
    out = _run_dir(args, cfg)
    if _already_done(out):
        print(f"train-nr: complete under {out}, skipping")
        return 0
    data_dir = Path(args.data)
    train = read_dataset(data_dir / "train")
    held = read_dataset(data_dir / "heldout")
    bank = load_bank(Path(args.bank) / "bank") if args.memory == "explicit" else None
    model = nr_mod.RendererModel(
        image_size=cfg.dims.image_size,
        channels=cfg.dims.channels,
        base_channels=cfg.nr.base_channels,
        depth=cfg.nr.depth,
        h_v=cfg.dims.h_v,
        patch_size=cfg.dims.patch_size,
        memory_mode=args.memory,
        sim_kind=cfg.nr.sim_kind,
        key_hidden=cfg.nr.key_hidden,
        seed=cfg.seed,
    )
    disc = nr_mod.Discriminator(channels=cfg.dims.channels, seed=cfg.seed + 1)
    result = nr_mod.train_renderer(model, disc, train, bank, cfg.nr, heldout=held)
    ck_hash = nr_mod.save_renderer_checkpoint(
        model, disc, out / "checkpoint", optimizers=result.optimizers, rng_state=result.rng_state
    )
    _write_metrics_csv(
        out / "history.csv",
        result.history,
        ["epoch", "l_rec", "l_adv_d", "l_adv_nr", "total_nr", "heldout_mse", "heldout_feat_dist"],
    )
    _mark_done(out, {"command": "train-nr", "hashes": {"checkpoint": ck_hash}})
    final = result.history[-1]
    print(
        f"train-nr: {result.steps} steps, heldout MSE "
        f"{final.get('heldout_mse', float('nan')):.6f}, checkpoint at {out}"
    )
    return 0


def _infer_sequences(cfg, records, basis, a2e_model, nr_model, bank):
    """Full pipeline on a record stream, grouped by style."""
    camera = CameraSpec.default(cfg.dims.image_size)
    by_style = {}
    for rec in records:
        by_style.setdefault(rec.style_id, []).append(rec)
    rows, frames = [], []
    extractor = FixedFeatureExtractor(channels=cfg.dims.channels)
    for style in sorted(by_style):
        recs = by_style[style]
        audio = np.stack([r.audio for r in recs])
        pred_exp = a2e_mod.predict_expressions(a2e_model, audio).coeffs
        mouth_mean = basis.mean_vertices[basis.mouth_index_set].astype(np.float64)
        mouth_exp = basis.exp_basis[basis.mouth_index_set].astype(np.float64)
        pred_mouth = mouth_mean[None] + np.einsum("vck,tk->tvc", mouth_exp, pred_exp)
        gt_mouth = np.stack([r.mouth_vertices.coords for r in recs])
        v_rmse = vertex_rmse(pred_mouth, gt_mouth)

        preds = []
        for t, rec in enumerate(recs):
            coords32 = pred_mouth[t].astype(np.float32)
            guide = project_to_guide_image(coords32, camera)
            inp = RenderInput(
                guide_image=guide,
                masked_template=rec.masked_template,
                query_vertices=MouthVertexSet(coords=coords32),
            )
            preds.append(nr_mod.render(nr_model, inp, bank))
        preds = np.stack(preds)
        gt = np.stack([r.gt_image for r in recs])
        metrics = image_metrics(preds, gt, extractor)
        rows.append({"style": style, "vertex_rmse": v_rmse, **metrics})
        frames.append(preds)
    overall = {
        "style": "all",
        "vertex_rmse": float(np.mean([r["vertex_rmse"] for r in rows])),
        "mse": float(np.mean([r["mse"] for r in rows])),
        "psnr": float(np.mean([r["psnr"] for r in rows])),
        "feat_dist": float(np.mean([r["feat_dist"] for r in rows])),
    }
    return rows + [overall], np.concatenate(frames)


def _write_frames(frames: np.ndarray, directory: Path) -> None:
    from PIL import Image

    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for t, frame in enumerate(frames):
        data = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
        name = f"frame_{t:05d}.png"
        Image.fromarray(data).save(directory / name)
        names.append(name)
    (directory / "frames.json").write_text(
        json.dumps({"count": len(names), "files": names}, indent=2)
    )


def cmd_infer(args) -> int:
    cfg = _resolve_config(args)
    out = _run_dir(args, cfg)
    data_dir = Path(args.data)
    records = read_dataset(data_dir / args.split)
    basis = load_basis(data_dir / "basis")
    a2e_model, _ = a2e_mod.load_a2e_checkpoint(Path(args.a2e) / "checkpoint")
    nr_model, _ = nr_mod.load_renderer_checkpoint(Path(args.nr) / "checkpoint")
    bank = load_bank(Path(args.bank) / "bank") if args.bank else None
    rows, frames = _infer_sequences(cfg, records, basis, a2e_model, nr_model, bank)
    _write_frames(frames, out / "frames")
    _write_metrics_csv(
        out / "metrics.csv", rows, ["style", "vertex_rmse", "mse", "psnr", "feat_dist"]
    )
    print(f"infer: {len(frames)} frames, metrics at {out / 'metrics.csv'}")
    return 0


def cmd_adapt(args) -> int:
    from dataclasses import replace

    from .explicit_memory import rebuild_for_identity

    cfg = _resolve_config(args)
    out = _run_dir(args, cfg)
    budget = args.frames if args.frames is not None else cfg.adapt.frame_budget

    a2e_model, _ = a2e_mod.load_a2e_checkpoint(Path(args.a2e) / "checkpoint")
    nr_model, disc = nr_mod.load_renderer_checkpoint(Path(args.nr) / "checkpoint")

    new_identity = generate_identity(args.identity_seed, cfg.dims, cfg.data)
    basis = identity_basis(new_identity, cfg.dims)
    adapt_data_cfg = replace(
        cfg.data, n_train_frames=budget, n_heldout_frames=cfg.data.n_heldout_frames
    )
    train, held = generate_split(new_identity, cfg.dims, adapt_data_cfg, seed=cfg.seed, basis=basis)

    camera = CameraSpec.default(cfg.dims.image_size)
    pool = build_pool_from_records(train, camera, cfg.dims.patch_size)
    bank = rebuild_for_identity(
        pool, min(cfg.nr.n_explicit, len(pool)), cfg.seed, new_identity.identity_tag
    )

    held_windows = sequence_windows(held, cfg.a2e.window, cfg.a2e.window)
    before_rows, _ = _infer_sequences(cfg, held, basis, a2e_model, nr_model, bank)

    a2e_cfg = replace(
        cfg.a2e, lr=cfg.adapt.a2e_lr, epochs=cfg.adapt.a2e_epochs, seed=cfg.seed
    )
    windows = sequence_windows(train, cfg.a2e.window, cfg.a2e.window_stride)
    a2e_result = a2e_mod.adapt_a2e(a2e_model, windows, basis, a2e_cfg, heldout=held_windows)

    nr_cfg = replace(cfg.nr, lr=cfg.adapt.nr_lr, epochs=cfg.adapt.nr_epochs, seed=cfg.seed)
    nr_result = nr_mod.adapt_renderer(nr_model, disc, train, bank, nr_cfg, heldout=held)

    after_rows, _ = _infer_sequences(cfg, held, basis, a2e_model, nr_model, bank)

    hashes = {
        "bank": save_bank(bank, out / "bank"),
        "a2e-checkpoint": a2e_mod.save_a2e_checkpoint(
            a2e_model, out / "a2e-checkpoint",
            optimizers=a2e_result.optimizers, rng_state=a2e_result.rng_state,
        ),
        "nr-checkpoint": nr_mod.save_renderer_checkpoint(
            nr_model, disc, out / "nr-checkpoint",
            optimizers=nr_result.optimizers, rng_state=nr_result.rng_state,
        ),
    }
    rows = [{"phase": "before", **row} for row in before_rows] + [
        {"phase": "after", **row} for row in after_rows
    ]
    _write_metrics_csv(
        out / "metrics.csv",
        rows,
        ["phase", "style", "vertex_rmse", "mse", "psnr", "feat_dist"],
    )
    _mark_done(out, {"command": "adapt", "hashes": hashes})
    before_all = before_rows[-1]
    after_all = after_rows[-1]
    print(
        f"adapt: {budget} frames, vertex RMSE {before_all['vertex_rmse']:.6f} -> "
        f"{after_all['vertex_rmse']:.6f}, MSE {before_all['mse']:.6f} -> "
        f"{after_all['mse']:.6f}, outputs at {out}"
    )
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out = _run_dir(args, cfg)
    if args.plan:
        plan = AblationPlan.from_dict(json.loads(Path(args.plan).read_text()))
    else:
        plan = AblationPlan()
    report = run_ablation(plan, cfg, out)
    failed = [c for c in report.cells if c["status"] != "ok"]
    print(
        f"ablate: {len(report.cells)} cells, {len(failed)} failed, "
        f"report at {out / 'report.csv'}"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = _run_dir(args, cfg)
    data_dir = Path(args.data)
    records = read_dataset(data_dir / args.split)
    basis = load_basis(data_dir / "basis")
    a2e_model, _ = a2e_mod.load_a2e_checkpoint(Path(args.a2e) / "checkpoint")
    nr_model, _ = nr_mod.load_renderer_checkpoint(Path(args.nr) / "checkpoint")
    bank = load_bank(Path(args.bank) / "bank") if args.bank else None
    rows, _ = _infer_sequences(cfg, records, basis, a2e_model, nr_model, bank)
    _write_metrics_csv(
        out / "metrics.csv", rows, ["style", "vertex_rmse", "mse", "psnr", "feat_dist"]
    )
    print(f"eval: metrics at {out / 'metrics.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memtalk",
        description="Memory-augmented two-stage talking-face pipeline (synthetic).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="RunConfig JSON file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=None, help="run directory")

    p = sub.add_parser("gen-data", help="generate a synthetic identity dataset")
    common(p)
    p.add_argument("--identity-seed", type=int, default=None, dest="identity_seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-a2e", help="train the audio-to-expression model")
    common(p)
    p.add_argument("--data", type=str, required=True, help="gen-data run directory")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--memory", choices=["none", "implicit", "explicit"], default="implicit")
    p.set_defaults(func=cmd_train_a2e)

    p = sub.add_parser("build-mem", help="build the explicit memory bank")
    common(p)
    p.add_argument("--data", type=str, required=True)
    p.set_defaults(func=cmd_build_mem)

    p = sub.add_parser("train-nr", help="train the neural renderer")
    common(p)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--bank", type=str, default=None, help="build-mem run directory")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--memory", choices=["none", "implicit", "explicit"], default="explicit")
    p.set_defaults(func=cmd_train_nr)

    p = sub.add_parser("infer", help="audio to rendered frames plus metrics")
    common(p)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--split", choices=["train", "heldout"], default="heldout")
    p.add_argument("--a2e", type=str, required=True)
    p.add_argument("--nr", type=str, required=True)
    p.add_argument("--bank", type=str, default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("adapt", help="adapt both stages to a new identity")
    common(p)
    p.add_argument("--a2e", type=str, required=True)
    p.add_argument("--nr", type=str, required=True)
    p.add_argument("--identity-seed", type=int, required=True, dest="identity_seed")
    p.add_argument("--frames", type=int, default=None, help="adaptation frame budget")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("ablate", help="run the ablation matrix and sweeps")
    common(p)
    p.add_argument("--plan", type=str, default=None, help="AblationPlan JSON file")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="metrics for stored checkpoints on a dataset")
    common(p)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--split", choices=["train", "heldout"], default="heldout")
    p.add_argument("--a2e", type=str, required=True)
    p.add_argument("--nr", type=str, required=True)
    p.add_argument("--bank", type=str, default=None)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MemtalkError as exc:
        message = str(exc).replace("\n", " ")
        print(f"error: {exc.category}: {message}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except FileNotFoundError as exc:
        print(f"error: io-error: {exc}", file=sys.stderr)
        return EXIT_CODES["io-error"]


if __name__ == "__main__":
    sys.exit(main())
