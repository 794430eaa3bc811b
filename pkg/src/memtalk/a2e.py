"""Audio-to-expression sequence model with a trainable implicit memory.

The encoder output queries the memory bank; the attention result is added
element-wise back onto the query before decoding, so zeroing the output
projection recovers the memoryless encoder-decoder exactly. Training
optionally alternates model and memory updates during the first half of
the schedule, then updates everything jointly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .attention import AttentionParams, ImplicitMemoryBank, attend, pairwise_cosine_corr
from .config import TrainConfig
from .errors import ArgumentError, NumericError
from .face_model import (
    BlendshapeBasis,
    FaceCoefficients,
    mouth_basis_tensors,
    mouth_vertices_from_exp,
    rotation_matrix,
)
from .tensor_store import read_manifest, write_manifest


@dataclass
class AudioFeatureSequence:
    features: np.ndarray  # [T, h_a]
    frame_rate: float = 25.0


@dataclass
class ExpressionSequence:
    coeffs: np.ndarray  # [T, h_c]


def sinusoidal_positions(length: int, width: int, dtype, device) -> torch.Tensor:
    position = torch.arange(length, dtype=dtype, device=device).unsqueeze(1)
    div = torch.exp(
        torch.arange(0, width, 2, dtype=dtype, device=device)
        * (-math.log(10000.0) / width)
    )
    pe = torch.zeros(length, width, dtype=dtype, device=device)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div[: width // 2])
    return pe


class SequenceStack(nn.Module):
    """A few pre-norm self-attention blocks at a fixed width."""

    def __init__(self, width: int, layers: int, heads: int, ffn_dim: int | None = None):
        super().__init__()
        block = nn.TransformerEncoderLayer(
            d_model=width,
            nhead=heads,
            dim_feedforward=ffn_dim if ffn_dim is not None else 2 * width,
            dropout=0.0,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.blocks = nn.TransformerEncoder(
            block, num_layers=layers, enable_nested_tensor=False
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x)


class A2EModel(nn.Module):
    """Encoder, memory lookup, decoder. ``memory_mode`` is one of
    ``none`` (plain encoder-decoder), ``implicit`` (trainable bank), or
    ``explicit`` (frozen audio-feature keys and expression values)."""

    def __init__(
        self,
        h_a: int = 64,
        h_c: int = 85,
        memory_mode: str = "implicit",
        memory_size: int = 1000,
        memory_dim: int = 64,
        layers: int = 2,
        heads: int = 4,
        seed: int = 0,
        sim_kind: str = "dot",
        bank_init_std: float | None = None,
        ffn_dim: int | None = None,
        explicit_keys: np.ndarray | None = None,
        explicit_values: np.ndarray | None = None,
    ):
        super().__init__()
        if memory_mode not in ("none", "implicit", "explicit"):
            raise ArgumentError(f"unknown memory_mode {memory_mode!r}")
        torch.manual_seed(seed)
        self.h_a = h_a
        self.h_c = h_c
        self.memory_mode = memory_mode
        self.memory_dim = memory_dim
        self.ffn_dim = ffn_dim if ffn_dim is not None else 2 * memory_dim
        self.arch = {"layers": layers, "heads": heads, "width": memory_dim}
        self.seed = seed

        # shared components first so every mode shares their initialization
        self.input_proj = nn.Linear(h_a, memory_dim)
        self.encoder = SequenceStack(memory_dim, layers, heads, self.ffn_dim)
        self.decoder = SequenceStack(memory_dim, layers, heads, self.ffn_dim)
        self.output_proj = nn.Linear(memory_dim, h_c)

        self.bank = None
        self.mem_params = None
        if memory_mode == "implicit":
            self.bank = ImplicitMemoryBank(
                memory_size, memory_dim, seed=seed + 1, init_std=bank_init_std
            )
            self.mem_params = AttentionParams(
                memory_dim, memory_dim, memory_dim, memory_dim, memory_dim,
                sim_kind=sim_kind,
            )
        elif memory_mode == "explicit":
            if explicit_keys is None or explicit_values is None:
                raise ArgumentError("explicit memory_mode needs keys and values")
            keys = torch.as_tensor(np.asarray(explicit_keys), dtype=torch.float32)
            values = torch.as_tensor(np.asarray(explicit_values), dtype=torch.float32)
            if keys.shape[0] != values.shape[0]:
                raise ArgumentError("explicit keys/values row counts differ")
            self.register_buffer("explicit_keys", keys)
            self.register_buffer("explicit_values", values)
            self.mem_params = AttentionParams(
                memory_dim, keys.shape[1], memory_dim, values.shape[1], memory_dim,
                sim_kind=sim_kind,
            )

    def memory_parameters(self) -> list:
        return [] if self.bank is None else [self.bank.keys, self.bank.values]

    def model_parameters(self) -> list:
        memory = set(id(p) for p in self.memory_parameters())
        return [p for p in self.parameters() if id(p) not in memory]

    def encode(self, features: torch.Tensor) -> torch.Tensor:
        q = self.input_proj(features)
        pe = sinusoidal_positions(q.shape[1], q.shape[2], q.dtype, q.device)
        return self.encoder(q + pe.unsqueeze(0))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """[B, T, h_a] -> [B, T, h_c]."""
        if features.ndim != 3 or features.shape[2] != self.h_a:
            raise ArgumentError(
                f"features must be [B, T, {self.h_a}], got {tuple(features.shape)}"
            )
        q = self.encode(features)
        if self.memory_mode == "implicit":
            flat = q.reshape(-1, q.shape[2])
            looked = attend(flat, self.bank.keys, self.bank.values, self.mem_params)
            q = q + looked.reshape(q.shape)
        elif self.memory_mode == "explicit":
            flat = q.reshape(-1, q.shape[2])
            looked = attend(flat, self.explicit_keys, self.explicit_values, self.mem_params)
            q = q + looked.reshape(q.shape)
        return self.output_proj(self.decoder(q))


@dataclass
class A2ELossReport:
    l_cof: float
    l_vtx: float
    l_reg: float
    total: float
    lambdas: tuple
    total_tensor: torch.Tensor | None = field(default=None, repr=False, compare=False)


def _pose_id_tensors(gt_pose_id, length: int, dtype):
    """Per-frame id coefficients and rigid transforms from a coefficient
    stream (None means identity pose and zero id)."""
    if gt_pose_id is None:
        return None, None, None
    if isinstance(gt_pose_id, FaceCoefficients):
        gt_pose_id = [gt_pose_id] * length
    if len(gt_pose_id) != length:
        raise ArgumentError(
            f"gt_pose_id length {len(gt_pose_id)} does not match frames {length}"
        )
    ids = torch.as_tensor(
        np.stack([np.asarray(c.alpha_id, dtype=np.float64) for c in gt_pose_id]), dtype=dtype
    )
    rots = torch.as_tensor(
        np.stack([rotation_matrix(np.asarray(c.alpha_pose)[:3]) for c in gt_pose_id]),
        dtype=dtype,
    )
    trans = torch.as_tensor(
        np.stack([np.asarray(c.alpha_pose, dtype=np.float64)[3:6] for c in gt_pose_id]),
        dtype=dtype,
    )
    return ids, rots, trans


def _mouth_vertices(mouth_t, exp, ids, rots, trans) -> torch.Tensor:
    verts = mouth_vertices_from_exp(mouth_t, exp, ids)
    if rots is not None:
        verts = torch.einsum("tij,tvj->tvi", rots, verts) + trans.unsqueeze(1)
    return verts


def a2e_loss(
    model: A2EModel,
    audio,
    gt_exp,
    basis: BlendshapeBasis,
    gt_pose_id=None,
    lambdas: tuple = (1.0, 1.0, 0.1),
) -> A2ELossReport:
    """Coefficient, vertex, and memory-regularization losses for one sequence.

    Norms are the mean over frames of the per-frame Euclidean norm, which
    keeps the loss weights scale-stable across sequence lengths.
    """
    features = audio.features if isinstance(audio, AudioFeatureSequence) else audio
    target = gt_exp.coeffs if isinstance(gt_exp, ExpressionSequence) else gt_exp
    dtype = next(model.parameters()).dtype
    feats = torch.as_tensor(np.asarray(features), dtype=dtype).unsqueeze(0)
    target_t = torch.as_tensor(np.asarray(target), dtype=dtype)
    if feats.shape[1] != target_t.shape[0]:
        raise ArgumentError(
            f"audio frames {feats.shape[1]} != expression frames {target_t.shape[0]}"
        )

    pred = model(feats).squeeze(0)
    mouth_t = mouth_basis_tensors(basis, dtype=dtype)
    ids, rots, trans = _pose_id_tensors(gt_pose_id, pred.shape[0], dtype)
    pred_mouth = _mouth_vertices(mouth_t, pred, ids, rots, trans)
    gt_mouth = _mouth_vertices(mouth_t, target_t, ids, rots, trans)

    l_cof = (pred - target_t).norm(dim=1).mean()
    l_vtx = (pred_mouth - gt_mouth).reshape(pred.shape[0], -1).norm(dim=1).mean()
    l_reg = _memory_regularizer(model)
    return _assemble_report(l_cof, l_vtx, l_reg, lambdas)


def _memory_regularizer(model: A2EModel) -> torch.Tensor:
    if model.bank is None:
        return torch.zeros((), dtype=next(model.parameters()).dtype)
    m = model.bank.size
    if m < 2:
        return torch.zeros((), dtype=model.bank.keys.dtype)
    corr = pairwise_cosine_corr(model.bank.keys) + pairwise_cosine_corr(model.bank.values)
    return corr / (m * (m - 1))


def _assemble_report(l_cof, l_vtx, l_reg, lambdas) -> A2ELossReport:
    lam_cof, lam_vtx, lam_reg = (float(x) for x in lambdas)
    total_tensor = lam_cof * l_cof + lam_vtx * l_vtx + lam_reg * l_reg
    cof, vtx, reg = (float(x.detach()) for x in (l_cof, l_vtx, l_reg))
    return A2ELossReport(
        l_cof=cof,
        l_vtx=vtx,
        l_reg=reg,
        total=lam_cof * cof + lam_vtx * vtx + lam_reg * reg,
        lambdas=(lam_cof, lam_vtx, lam_reg),
        total_tensor=total_tensor,
    )


def _batch_loss(model, audio_b, exp_b, mouth_b, mouth_t, lambdas) -> A2ELossReport:
    """Loss over a [B, T, ...] batch with stored ground-truth vertices."""
    pred = model(audio_b)
    b, t, _ = pred.shape
    pred_mouth = mouth_vertices_from_exp(mouth_t, pred.reshape(b * t, -1)).reshape(
        b, t, -1, 3
    )
    l_cof = (pred - exp_b).norm(dim=2).mean()
    l_vtx = (pred_mouth - mouth_b).reshape(b, t, -1).norm(dim=2).mean()
    l_reg = _memory_regularizer(model)
    return _assemble_report(l_cof, l_vtx, l_reg, lambdas)


def predict_expressions(model: A2EModel, audio) -> ExpressionSequence:
    """Deterministic inference for one audio sequence."""
    features = audio.features if isinstance(audio, AudioFeatureSequence) else audio
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[1] != model.h_a:
        raise ArgumentError(
            f"audio features must be [T, {model.h_a}], got {features.shape}"
        )
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        pred = model(torch.as_tensor(features, dtype=dtype).unsqueeze(0)).squeeze(0)
    return ExpressionSequence(coeffs=pred.numpy())


def evaluate_vertex_rmse(model: A2EModel, samples, basis: BlendshapeBasis) -> float:
    """Held-out lip-sync proxy: mean per-frame RMS vertex distance."""
    mouth_t = mouth_basis_tensors(basis, dtype=torch.float64)
    total, frames = 0.0, 0
    for sample in samples:
        pred = predict_expressions(model, sample.audio).coeffs
        pred_mouth = mouth_vertices_from_exp(
            mouth_t, torch.as_tensor(pred, dtype=torch.float64)
        ).numpy()
        diff = pred_mouth - sample.mouth.astype(np.float64)
        per_frame = np.sqrt((diff**2).sum(axis=2).mean(axis=1))
        total += per_frame.sum()
        frames += per_frame.shape[0]
    return float(total / max(frames, 1))


@dataclass
class TrainResult:
    history: list
    steps: int
    optimizers: dict | None = None
    rng_state: bytes | None = None


def _fit(
    model: A2EModel,
    samples,
    basis: BlendshapeBasis,
    config: TrainConfig,
    heldout=None,
    step_hook=None,
    min_epochs: int = 1,
) -> TrainResult:
    if len(samples) == 0:
        raise ArgumentError("training requires a nonempty dataset")
    if config.epochs < min_epochs:
        raise ArgumentError(f"epochs must be >= {min_epochs}, got {config.epochs}")
    if config.epochs == 0:
        return TrainResult(history=[], steps=0)

    lambdas = (config.lambda_cof, config.lambda_vtx, config.lambda_reg)
    dtype = next(model.parameters()).dtype
    audio_all = torch.as_tensor(
        np.stack([s.audio for s in samples]), dtype=dtype
    )
    exp_all = torch.as_tensor(np.stack([s.exp for s in samples]), dtype=dtype)
    mouth_all = torch.as_tensor(np.stack([s.mouth for s in samples]), dtype=dtype)
    mouth_t = mouth_basis_tensors(basis, dtype=dtype)

    mem_params = model.memory_parameters()
    opt_model = torch.optim.Adam(model.model_parameters(), lr=config.lr)
    opt_mem = torch.optim.Adam(mem_params, lr=config.lr) if mem_params else None

    gen = torch.Generator().manual_seed(config.seed)
    history = []
    step = 0
    model.train()
    for epoch in range(config.epochs):
        first_half = epoch < config.epochs / 2
        order = torch.randperm(len(samples), generator=gen)
        sums = {"l_cof": 0.0, "l_vtx": 0.0, "l_reg": 0.0, "total": 0.0}
        batches = 0
        for start in range(0, len(samples), config.batch_size):
            idx = order[start : start + config.batch_size]
            report = _batch_loss(
                model, audio_all[idx], exp_all[idx], mouth_all[idx], mouth_t, lambdas
            )
            if not math.isfinite(report.total):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, step {step}: {report}"
                )
            opt_model.zero_grad()
            if opt_mem is not None:
                opt_mem.zero_grad()
            report.total_tensor.backward()

            alternating = config.alternate and first_half and opt_mem is not None
            if alternating:
                if step % 2 == 0:
                    opt_model.step()
                else:
                    opt_mem.step()
            else:
                opt_model.step()
                if opt_mem is not None:
                    opt_mem.step()
            step += 1
            if step_hook is not None:
                step_hook(step - 1)
            for key in ("l_cof", "l_vtx", "l_reg", "total"):
                sums[key] += getattr(report, key)
            batches += 1

        entry = {"epoch": epoch, **{k: v / batches for k, v in sums.items()}}
        if heldout:
            entry["heldout_vertex_rmse"] = evaluate_vertex_rmse(model, heldout, basis)
            model.train()
        history.append(entry)
    model.eval()
    optimizers = {"model": opt_model}
    if opt_mem is not None:
        optimizers["memory"] = opt_mem
    return TrainResult(
        history=history,
        steps=step,
        optimizers=optimizers,
        rng_state=bytes(gen.get_state().numpy().tobytes()),
    )


def train_a2e(
    model: A2EModel,
    samples,
    basis: BlendshapeBasis,
    config: TrainConfig,
    heldout=None,
    step_hook=None,
) -> TrainResult:
    """Full training run; alternates model/memory updates in the first half."""
    return _fit(model, samples, basis, config, heldout, step_hook, min_epochs=1)


def adapt_a2e(
    model: A2EModel,
    samples,
    basis: BlendshapeBasis,
    config: TrainConfig | None = None,
    heldout=None,
) -> TrainResult:
    """Fine-tune a pretrained model on a small set; zero epochs is a no-op."""
    if config is None:
        config = TrainConfig(lr=5e-6, epochs=200)
    return _fit(model, samples, basis, config, heldout, min_epochs=0)


def _state_arrays(model: A2EModel) -> dict:
    return {
        f"param.{name}": tensor.detach().numpy()
        for name, tensor in model.state_dict().items()
    }


def save_a2e_checkpoint(
    model: A2EModel,
    directory,
    optimizers: dict | None = None,
    rng_state: bytes | None = None,
) -> str:
    """Manifest + float32 blobs: parameters, bank, optimizer moments, RNG."""
    arrays = _state_arrays(model)
    meta = {
        "kind": "a2e",
        "arch": {
            "h_a": model.h_a,
            "h_c": model.h_c,
            "memory_mode": model.memory_mode,
            "memory_size": model.bank.size if model.bank is not None else 0,
            "memory_dim": model.memory_dim,
            "layers": model.arch["layers"],
            "heads": model.arch["heads"],
            "seed": model.seed,
            "sim_kind": model.mem_params.sim_kind if model.mem_params else "dot",
            "bank_init_std": model.bank.init_std if model.bank is not None else 0.02,
            "ffn_dim": model.ffn_dim,
        },
        "optim_steps": {},
        "rng_state": rng_state.hex() if rng_state else "",
    }
    if optimizers:
        for opt_name, opt in optimizers.items():
            for group_idx, group in enumerate(opt.param_groups):
                for param_idx, param in enumerate(group["params"]):
                    state = opt.state.get(param, {})
                    if not state:
                        continue
                    stem = f"optim.{opt_name}.{group_idx}.{param_idx}"
                    arrays[f"{stem}.exp_avg"] = state["exp_avg"].numpy()
                    arrays[f"{stem}.exp_avg_sq"] = state["exp_avg_sq"].numpy()
                    meta["optim_steps"][stem] = float(state["step"])
    return write_manifest(directory, arrays, meta, kind="memtalk-checkpoint-v1")


def load_a2e_checkpoint(directory) -> tuple:
    """Rebuild the model from a checkpoint; returns (model, aux)."""
    arrays, meta = read_manifest(directory, kind="memtalk-checkpoint-v1")
    if meta.get("kind") != "a2e":
        raise ArgumentError(f"checkpoint under {directory} is not an a2e checkpoint")
    arch = meta["arch"]
    kwargs = {}
    if arch["memory_mode"] == "explicit":
        kwargs["explicit_keys"] = arrays["param.explicit_keys"]
        kwargs["explicit_values"] = arrays["param.explicit_values"]
    model = A2EModel(
        h_a=arch["h_a"],
        h_c=arch["h_c"],
        memory_mode=arch["memory_mode"],
        memory_size=max(arch["memory_size"], 1),
        memory_dim=arch["memory_dim"],
        layers=arch["layers"],
        heads=arch["heads"],
        seed=arch["seed"],
        sim_kind=arch["sim_kind"],
        bank_init_std=arch.get("bank_init_std"),
        ffn_dim=arch.get("ffn_dim"),
        **kwargs,
    )
    state = {
        name[len("param."):]: torch.as_tensor(arr)
        for name, arr in arrays.items()
        if name.startswith("param.")
    }
    model.load_state_dict(state)
    model.eval()
    aux = {
        "optim_arrays": {k: v for k, v in arrays.items() if k.startswith("optim.")},
        "optim_steps": meta.get("optim_steps", {}),
        "rng_state": bytes.fromhex(meta["rng_state"]) if meta.get("rng_state") else None,
        "arch": arch,
    }
    return model, aux


def explicit_a2e_bank(records, size: int, seed: int) -> tuple:
    """Frozen (audio feature, expression) pairs drawn from training frames."""
    if size > len(records):
        size = len(records)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(records), size=size, replace=False)
    keys = np.stack([records[i].audio for i in idx])
    values = np.stack([records[i].exp for i in idx])
    return keys, values
