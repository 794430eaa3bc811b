"""Neural renderer with explicit-memory attention at the bottleneck.

A skip-connected encoder-decoder consumes the guide image and the masked
template; retrieved mouth patches are encoded into bottleneck-shaped
feature maps, combined by attention weights over the bank keys, passed
through a 1x1 fusion projection, and added to the bottleneck feature.
Zeroing the fusion projection reproduces the memoryless render exactly.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .attention import AttentionParams, ImplicitMemoryBank, similarity
from .errors import ArgumentError, NumericError
from .explicit_memory import ExplicitMemoryBank
from .face_model import MouthVertexSet
from .tensor_store import read_manifest, write_manifest

LOGIT_CLAMP = 15.0


@dataclass
class RenderInput:
    """Conditioning for one frame."""

    guide_image: np.ndarray       # [H, W]
    masked_template: np.ndarray   # [H, W, C]
    query_vertices: MouthVertexSet


def _to_chw(image: np.ndarray, dtype) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(image), dtype=dtype)
    if t.ndim == 2:
        return t.unsqueeze(0)
    return t.permute(2, 0, 1)


class RendererModel(nn.Module):
    """Encoder-decoder image network, optionally memory-augmented.

    ``memory_mode``: ``explicit`` retrieves bank patches; ``implicit``
    uses a jointly trained vector bank (ablation variant); ``none`` is the
    plain encoder-decoder baseline.
    """

    def __init__(
        self,
        image_size: int = 64,
        channels: int = 3,
        base_channels: int = 16,
        depth: int = 3,
        h_v: int = 69,
        patch_size: int = 16,
        memory_mode: str = "explicit",
        sim_kind: str = "neg_l2",
        key_hidden: int = 32,
        implicit_size: int = 32,
        seed: int = 0,
    ):
        super().__init__()
        if memory_mode not in ("none", "explicit", "implicit"):
            raise ArgumentError(f"unknown memory_mode {memory_mode!r}")
        if image_size % (2**depth) != 0:
            raise ArgumentError(f"image_size {image_size} not divisible by 2^{depth}")
        torch.manual_seed(seed)
        self.image_size = image_size
        self.channels = channels
        self.depth = depth
        self.patch_size = patch_size
        self.h_v = h_v
        self.memory_mode = memory_mode
        self.seed = seed
        self.arch = {"channels": base_channels, "depth": depth}

        # shared encoder/decoder first: every mode draws identical weights
        widths = [base_channels * (2**i) for i in range(depth + 1)]
        self.stem = nn.Conv2d(1 + channels, widths[0], 3, padding=1)
        self.downs = nn.ModuleList(
            [nn.Conv2d(widths[i], widths[i + 1], 4, stride=2, padding=1) for i in range(depth)]
        )
        self.ups = nn.ModuleList(
            [
                nn.ConvTranspose2d(widths[i + 1], widths[i], 4, stride=2, padding=1)
                for i in reversed(range(depth))
            ]
        )
        self.merges = nn.ModuleList(
            [nn.Conv2d(2 * widths[i], widths[i], 3, padding=1) for i in reversed(range(depth))]
        )
        self.head = nn.Conv2d(widths[0], channels, 3, padding=1)

        bottleneck = widths[-1]
        self.bottleneck_channels = bottleneck
        self.bottleneck_size = image_size // (2**depth)
        self.key_params = None
        self.value_encoder = None
        self.fuse_projection = None
        self.implicit_bank = None
        self.implicit_value_proj = None
        if memory_mode == "explicit":
            self.key_params = AttentionParams(
                3 * h_v, 3 * h_v, key_hidden, sim_kind=sim_kind
            )
            if patch_size < self.bottleneck_size or patch_size % self.bottleneck_size:
                raise ArgumentError(
                    f"patch size {patch_size} incompatible with bottleneck "
                    f"{self.bottleneck_size}"
                )
            n_down = int(math.log2(patch_size // self.bottleneck_size))
            stack = []
            width = channels
            for _ in range(n_down):
                stack += [nn.Conv2d(width, bottleneck // 2, 4, stride=2, padding=1), nn.SiLU()]
                width = bottleneck // 2
            stack.append(nn.Conv2d(width, bottleneck, 3, padding=1))
            self.value_encoder = nn.Sequential(*stack)
            self.fuse_projection = nn.Conv2d(bottleneck, bottleneck, 1)
        elif memory_mode == "implicit":
            self.key_params = AttentionParams(3 * h_v, key_hidden, key_hidden, sim_kind="dot")
            self.implicit_bank = ImplicitMemoryBank(implicit_size, key_hidden, seed=seed + 1)
            self.implicit_value_proj = nn.Linear(key_hidden, bottleneck)
            self.fuse_projection = nn.Conv2d(bottleneck, bottleneck, 1)

    def attention_weights(self, query: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
        """Row-stochastic weights the forward pass uses for retrieval."""
        return similarity(query, keys, self.key_params)

    def forward(
        self,
        guide: torch.Tensor,      # [B, 1, H, W]
        template: torch.Tensor,   # [B, C, H, W]
        query: torch.Tensor,      # [B, 3 * h_v]
        bank_keys: torch.Tensor | None = None,    # [N, 3 * h_v]
        bank_values: torch.Tensor | None = None,  # [N, C, P, P]
    ) -> torch.Tensor:
        x = torch.cat([guide, template], dim=1)
        skips = [F.silu(self.stem(x))]
        for down in self.downs:
            skips.append(F.silu(down(skips[-1])))
        feat = skips.pop()

        if self.memory_mode == "explicit":
            if bank_keys is None or bank_values is None:
                raise ArgumentError("explicit memory_mode requires bank tensors")
            if bank_values.shape[-1] != self.patch_size:
                raise ArgumentError(
                    f"bank patch size {bank_values.shape[-1]} does not match "
                    f"model patch size {self.patch_size}"
                )
            weights = self.attention_weights(query, bank_keys)
            value_feats = self.value_encoder(bank_values)
            fused = torch.einsum("bn,nchw->bchw", weights, value_feats)
            feat = feat + self.fuse_projection(fused)
        elif self.memory_mode == "implicit":
            weights = self.attention_weights(query, self.implicit_bank.keys)
            vectors = weights @ self.implicit_value_proj(self.implicit_bank.values)
            fused = vectors[:, :, None, None].expand(
                -1, -1, feat.shape[2], feat.shape[3]
            )
            feat = feat + self.fuse_projection(fused)

        for up, merge in zip(self.ups, self.merges):
            feat = F.silu(up(feat))
            skip = skips.pop()
            feat = F.silu(merge(torch.cat([feat, skip], dim=1)))
        return torch.sigmoid(self.head(feat))


class Discriminator(nn.Module):
    """Conv stack producing a patch logits map smaller than the input."""

    def __init__(self, channels: int = 3, base_channels: int = 16, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.net = nn.Sequential(
            nn.Conv2d(channels, base_channels, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(base_channels, 2 * base_channels, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * base_channels, 1, 3, padding=1),
        )

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.net(image)


class FixedFeatureExtractor(nn.Module):
    """Frozen, seeded 3-layer stride-2 conv stack used as a perceptual
    stand-in; activations are tanh so the distance stays smooth."""

    def __init__(self, channels: int = 3, seed: int = 0, widths=(8, 16, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        w_in = channels
        for w_out in widths:
            conv = nn.Conv2d(w_in, w_out, 3, stride=2, padding=1)
            fan_in = w_in * 9
            with torch.no_grad():
                conv.weight.copy_(
                    torch.empty_like(conv.weight).normal_(0, 1, generator=gen)
                    / math.sqrt(fan_in)
                )
                conv.bias.zero_()
            layers.append(conv)
            w_in = w_out
        self.convs = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x: torch.Tensor) -> list:
        out = []
        for conv in self.convs:
            x = torch.tanh(conv(x))
            out.append(x)
        return out


def _feature_distance_t(a: torch.Tensor, b: torch.Tensor, extractor) -> torch.Tensor:
    total = None
    for fa, fb in zip(extractor.features(a), extractor.features(b)):
        term = ((fa - fb) ** 2).mean()
        total = term if total is None else total + term
    return torch.sqrt(total)


def fixed_feature_distance(a, b, extractor: FixedFeatureExtractor | None = None) -> float:
    """Symmetric perceptual distance between two [H, W, C] images."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ArgumentError(f"image shapes differ: {a.shape} vs {b.shape}")
    if extractor is None:
        extractor = FixedFeatureExtractor(channels=a.shape[2])
    with torch.no_grad():
        ta = _to_chw(a, torch.float32).unsqueeze(0)
        tb = _to_chw(b, torch.float32).unsqueeze(0)
        return float(_feature_distance_t(ta, tb, extractor))


@dataclass
class NRLossReport:
    l_rec: float
    l_adv_d: float
    l_adv_nr: float
    total_nr: float
    lambdas: tuple
    total_tensor: torch.Tensor | None = field(default=None, repr=False, compare=False)


@contextlib.contextmanager
def _frozen(module: nn.Module):
    states = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, state in zip(module.parameters(), states):
            p.requires_grad_(state)


def bank_tensors(bank: ExplicitMemoryBank, dtype=torch.float32) -> tuple:
    keys = torch.as_tensor(bank.keys_array().reshape(bank.n, -1), dtype=dtype)
    values = torch.as_tensor(
        bank.values_array().transpose(0, 3, 1, 2).copy(), dtype=dtype
    )
    return keys, values


def render(model: RendererModel, inp: RenderInput, bank: ExplicitMemoryBank | None) -> np.ndarray:
    """One frame in [0, 1], shape [H, W, C]."""
    guide = np.asarray(inp.guide_image)
    template = np.asarray(inp.masked_template)
    size = model.image_size
    if guide.shape != (size, size):
        raise ArgumentError(f"guide must be [{size}, {size}], got {guide.shape}")
    if template.shape != (size, size, model.channels):
        raise ArgumentError(
            f"template must be [{size}, {size}, {model.channels}], got {template.shape}"
        )
    if inp.query_vertices.coords.shape[0] != model.h_v:
        raise ArgumentError(
            f"query has {inp.query_vertices.coords.shape[0]} vertices, model expects {model.h_v}"
        )
    dtype = next(model.parameters()).dtype
    keys = values = None
    if model.memory_mode == "explicit":
        if bank is None:
            raise ArgumentError("explicit renderer requires a memory bank")
        keys, values = bank_tensors(bank, dtype)
    query = torch.as_tensor(
        inp.query_vertices.coords.reshape(1, -1).astype(np.float64), dtype=dtype
    )
    model.eval()
    with torch.no_grad():
        out = model(
            _to_chw(guide, dtype).unsqueeze(0),
            _to_chw(template, dtype).unsqueeze(0),
            query,
            keys,
            values,
        )
    return out.squeeze(0).permute(1, 2, 0).numpy()


def _adv_logits(disc: Discriminator, image: torch.Tensor) -> torch.Tensor:
    return torch.clamp(disc(image), -LOGIT_CLAMP, LOGIT_CLAMP)


def discriminator_loss(disc: Discriminator, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """Vanilla GAN discriminator loss over patch logits; fake is detached."""
    if real.shape != fake.shape:
        raise ArgumentError(f"real/fake shapes differ: {real.shape} vs {fake.shape}")
    logits_real = _adv_logits(disc, real)
    logits_fake = _adv_logits(disc, fake.detach())
    return -F.logsigmoid(logits_real).mean() - F.logsigmoid(-logits_fake).mean()


def _generator_loss_batch(
    pred: torch.Tensor,
    gt: torch.Tensor,
    disc: Discriminator,
    extractor: FixedFeatureExtractor,
    lambdas: tuple = (20.0, 1.0),
) -> NRLossReport:
    """Reconstruction + perceptual + adversarial generator losses.

    Gradients flow to the generator through the frozen discriminator; the
    discriminator's own parameters receive none.
    """
    if pred.shape != gt.shape:
        raise ArgumentError(f"pred/gt shapes differ: {pred.shape} vs {gt.shape}")
    lam_rec, lam_adv = (float(x) for x in lambdas)
    l_rec = F.mse_loss(pred, gt) + _feature_distance_t(pred, gt, extractor)
    with _frozen(disc):
        l_adv_nr = F.logsigmoid(-_adv_logits(disc, pred)).mean()
    with torch.no_grad():
        l_adv_d = discriminator_loss(disc, gt, pred)
    total_tensor = lam_rec * l_rec + lam_adv * l_adv_nr
    rec, adv_nr = float(l_rec.detach()), float(l_adv_nr.detach())
    return NRLossReport(
        l_rec=rec,
        l_adv_d=float(l_adv_d),
        l_adv_nr=adv_nr,
        total_nr=lam_rec * rec + lam_adv * adv_nr,
        lambdas=(lam_rec, lam_adv),
        total_tensor=total_tensor,
    )


def renderer_generator_loss(
    model: RendererModel,
    inp: RenderInput,
    bank: ExplicitMemoryBank | None,
    gt_image: np.ndarray,
    disc: Discriminator,
    extractor: FixedFeatureExtractor | None = None,
    lambdas: tuple = (20.0, 1.0),
) -> NRLossReport:
    """Generator losses for one frame; ``total_tensor`` is differentiable."""
    gt_image = np.asarray(gt_image)
    if gt_image.shape != (model.image_size, model.image_size, model.channels):
        raise ArgumentError(
            f"gt image shape {gt_image.shape} does not match the model canvas"
        )
    dtype = next(model.parameters()).dtype
    if extractor is None:
        extractor = FixedFeatureExtractor(channels=model.channels)
    keys = values = None
    if model.memory_mode == "explicit":
        keys, values = bank_tensors(bank, dtype)
    pred = model(
        _to_chw(np.asarray(inp.guide_image), dtype).unsqueeze(0),
        _to_chw(np.asarray(inp.masked_template), dtype).unsqueeze(0),
        torch.as_tensor(
            inp.query_vertices.coords.reshape(1, -1).astype(np.float64), dtype=dtype
        ),
        keys,
        values,
    )
    gt_t = _to_chw(gt_image, dtype).unsqueeze(0)
    return _generator_loss_batch(pred, gt_t, disc, extractor, lambdas)


@dataclass
class RenderTrainResult:
    history: list
    steps: int
    optimizers: dict | None = None
    rng_state: bytes | None = None


def _record_tensors(records, dtype) -> dict:
    return {
        "guide": torch.stack([_to_chw(r.guide, dtype) for r in records]),
        "template": torch.stack([_to_chw(r.masked_template, dtype) for r in records]),
        "query": torch.as_tensor(
            np.stack([r.mouth_vertices.coords.reshape(-1) for r in records]).astype(np.float64),
            dtype=dtype,
        ),
        "gt": torch.stack([_to_chw(r.gt_image, dtype) for r in records]),
    }


def _fit_renderer(
    model: RendererModel,
    disc: Discriminator,
    records,
    bank: ExplicitMemoryBank | None,
    config,
    heldout=None,
    extractor: FixedFeatureExtractor | None = None,
    min_epochs: int = 1,
) -> RenderTrainResult:
    if len(records) == 0:
        raise ArgumentError("training requires a nonempty dataset")
    if config.epochs < min_epochs:
        raise ArgumentError(f"epochs must be >= {min_epochs}, got {config.epochs}")
    if model.memory_mode == "explicit":
        if bank is None:
            raise ArgumentError("explicit renderer requires a memory bank")
        tags = {r.identity_tag for r in records}
        if bank.identity_tag not in tags:
            raise ArgumentError(
                f"bank identity {bank.identity_tag!r} does not match dataset {sorted(tags)}"
            )
    if config.epochs == 0:
        return RenderTrainResult(history=[], steps=0)

    dtype = next(model.parameters()).dtype
    if extractor is None:
        extractor = FixedFeatureExtractor(channels=model.channels)
    data = _record_tensors(records, dtype)
    held = _record_tensors(heldout, dtype) if heldout else None
    keys = values = None
    if model.memory_mode == "explicit":
        keys, values = bank_tensors(bank, dtype)

    lambdas = (config.lambda_rec, config.lambda_adv)
    opt_g = torch.optim.Adam(model.parameters(), lr=config.lr)
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)

    history = []
    step = 0
    model.train()
    for epoch in range(config.epochs):
        order = torch.randperm(len(records), generator=gen)
        sums = {"l_rec": 0.0, "l_adv_d": 0.0, "l_adv_nr": 0.0, "total_nr": 0.0}
        batches = 0
        for start in range(0, len(records), config.batch_size):
            idx = order[start : start + config.batch_size]
            pred = model(
                data["guide"][idx], data["template"][idx], data["query"][idx], keys, values
            )
            report = _generator_loss_batch(pred, data["gt"][idx], disc, extractor, lambdas)
            if not math.isfinite(report.total_nr):
                raise NumericError(
                    f"non-finite generator loss at epoch {epoch}, step {step}: {report}"
                )
            opt_g.zero_grad()
            report.total_tensor.backward()
            opt_g.step()

            d_loss = discriminator_loss(disc, data["gt"][idx], pred.detach())
            if not math.isfinite(float(d_loss.detach())):
                raise NumericError(
                    f"non-finite discriminator loss at epoch {epoch}, step {step}"
                )
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            step += 1
            batches += 1
            for key_name in ("l_rec", "l_adv_d", "l_adv_nr", "total_nr"):
                sums[key_name] += getattr(report, key_name)

        entry = {"epoch": epoch, **{k: v / batches for k, v in sums.items()}}
        if held is not None:
            entry.update(_heldout_metrics(model, held, keys, values, extractor))
            model.train()
        history.append(entry)
    model.eval()
    return RenderTrainResult(
        history=history,
        steps=step,
        optimizers={"generator": opt_g, "discriminator": opt_d},
        rng_state=bytes(gen.get_state().numpy().tobytes()),
    )


def _heldout_metrics(model, held, keys, values, extractor) -> dict:
    model.eval()
    with torch.no_grad():
        pred = model(held["guide"], held["template"], held["query"], keys, values)
        mse = float(F.mse_loss(pred, held["gt"]))
        feat = float(_feature_distance_t(pred, held["gt"], extractor))
    return {"heldout_mse": mse, "heldout_feat_dist": feat}


def train_renderer(
    model: RendererModel,
    disc: Discriminator,
    records,
    bank: ExplicitMemoryBank | None,
    config,
    heldout=None,
    extractor: FixedFeatureExtractor | None = None,
) -> RenderTrainResult:
    """Alternating 1:1 generator/discriminator training."""
    return _fit_renderer(model, disc, records, bank, config, heldout, extractor, min_epochs=1)


def adapt_renderer(
    model: RendererModel,
    disc: Discriminator,
    records,
    new_bank: ExplicitMemoryBank | None,
    config,
    heldout=None,
    extractor: FixedFeatureExtractor | None = None,
) -> RenderTrainResult:
    """Fine-tune on a new identity with its rebuilt bank; 0 epochs is a no-op."""
    return _fit_renderer(model, disc, records, new_bank, config, heldout, extractor, min_epochs=0)


def save_renderer_checkpoint(
    model: RendererModel,
    disc: Discriminator,
    directory,
    optimizers: dict | None = None,
    rng_state: bytes | None = None,
) -> str:
    arrays = {
        f"param.model.{name}": tensor.detach().numpy()
        for name, tensor in model.state_dict().items()
    }
    arrays.update(
        {
            f"param.disc.{name}": tensor.detach().numpy()
            for name, tensor in disc.state_dict().items()
        }
    )
    meta = {
        "kind": "renderer",
        "arch": {
            "image_size": model.image_size,
            "channels": model.channels,
            "base_channels": model.arch["channels"],
            "depth": model.depth,
            "h_v": model.h_v,
            "patch_size": model.patch_size,
            "memory_mode": model.memory_mode,
            "sim_kind": model.key_params.sim_kind if model.key_params else "neg_l2",
            "key_hidden": model.key_params.h if model.key_params else 32,
            "implicit_size": model.implicit_bank.size if model.implicit_bank else 32,
            "seed": model.seed,
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


def load_renderer_checkpoint(directory) -> tuple:
    arrays, meta = read_manifest(directory, kind="memtalk-checkpoint-v1")
    if meta.get("kind") != "renderer":
        raise ArgumentError(f"checkpoint under {directory} is not a renderer checkpoint")
    arch = meta["arch"]
    model = RendererModel(
        image_size=arch["image_size"],
        channels=arch["channels"],
        base_channels=arch["base_channels"],
        depth=arch["depth"],
        h_v=arch["h_v"],
        patch_size=arch["patch_size"],
        memory_mode=arch["memory_mode"],
        sim_kind=arch["sim_kind"],
        key_hidden=arch["key_hidden"],
        implicit_size=arch["implicit_size"],
        seed=arch["seed"],
    )
    disc = Discriminator(channels=arch["channels"])
    model.load_state_dict(
        {
            name[len("param.model."):]: torch.as_tensor(arr)
            for name, arr in arrays.items()
            if name.startswith("param.model.")
        }
    )
    disc.load_state_dict(
        {
            name[len("param.disc."):]: torch.as_tensor(arr)
            for name, arr in arrays.items()
            if name.startswith("param.disc.")
        }
    )
    model.eval()
    disc.eval()
    return model, disc
