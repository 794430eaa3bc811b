"""Key-value memory attention and the pairwise-cosine regularizer.

``attend(Q, K, V) = [sim(Q, K) @ V W_V] W_O`` where ``sim`` is a softmax
over scaled query-key scores. Two score kinds are supported: scaled inner
product (the default) and scaled negative squared L2 distance, which
guarantees that an exact key match receives the largest weight.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ArgumentError, NumericError


class AttentionParams(nn.Module):
    """Projections W_Q, W_K, W_V, W_O around one memory lookup.

    ``d_v``/``d_out`` may be omitted for similarity-only use (the renderer
    replaces the value path with a patch encoder).
    """

    def __init__(
        self,
        d_q: int,
        d_k: int,
        h: int,
        d_v: int | None = None,
        d_out: int | None = None,
        sim_kind: str = "dot",
    ):
        super().__init__()
        if h <= 0:
            raise ArgumentError(f"hidden size h must be positive, got {h}")
        if sim_kind not in ("dot", "neg_l2"):
            raise ArgumentError(f"sim_kind must be 'dot' or 'neg_l2', got {sim_kind!r}")
        self.h = h
        self.sim_kind = sim_kind
        self.w_q = nn.Parameter(torch.empty(d_q, h))
        nn.init.normal_(self.w_q, std=d_q**-0.5)
        if sim_kind == "neg_l2":
            # tied projections: an exact key match then scores the maximal
            # (zero) distance logit, so retrieval honors vertex closeness
            if d_q != d_k:
                raise ArgumentError("neg_l2 similarity requires d_q == d_k")
            self.w_k = self.w_q
        else:
            self.w_k = nn.Parameter(torch.empty(d_k, h))
            nn.init.normal_(self.w_k, std=d_k**-0.5)
        if d_v is not None and d_out is not None:
            self.w_v = nn.Parameter(torch.empty(d_v, h))
            self.w_o = nn.Parameter(torch.empty(h, d_out))
            nn.init.normal_(self.w_v, std=d_v**-0.5)
            nn.init.normal_(self.w_o, std=h**-0.5)
        else:
            self.w_v = None
            self.w_o = None

    @classmethod
    def identity(cls, dim: int = 1, sim_kind: str = "dot") -> "AttentionParams":
        """All projections set to the identity; convenient for direct checks."""
        params = cls(dim, dim, dim, dim, dim, sim_kind=sim_kind)
        with torch.no_grad():
            for w in (params.w_q, params.w_k, params.w_v, params.w_o):
                w.copy_(torch.eye(dim))
        return params


def _as_2d(name: str, x) -> torch.Tensor:
    t = torch.as_tensor(x)
    if t.ndim != 2:
        raise ArgumentError(f"{name} must be 2-D, got shape {tuple(t.shape)}")
    return t


def similarity(Q, K, params: AttentionParams) -> torch.Tensor:
    """Row-stochastic [T, M] attention weights over the key set."""
    Q = _as_2d("Q", Q)
    K = _as_2d("K", K)
    if Q.shape[1] != params.w_q.shape[0]:
        raise ArgumentError(
            f"Q width {Q.shape[1]} does not match W_Q input {params.w_q.shape[0]}"
        )
    if K.shape[1] != params.w_k.shape[0]:
        raise ArgumentError(
            f"K width {K.shape[1]} does not match W_K input {params.w_k.shape[0]}"
        )
    q_proj = Q.to(params.w_q.dtype) @ params.w_q
    k_proj = K.to(params.w_k.dtype) @ params.w_k
    scale = math.sqrt(params.h)
    if params.sim_kind == "dot":
        logits = q_proj @ k_proj.T / scale
    else:
        diff = q_proj.unsqueeze(1) - k_proj.unsqueeze(0)
        logits = -(diff * diff).sum(-1) / scale
    if not torch.isfinite(logits).all():
        raise NumericError("attention logits are not finite")
    # max-subtraction keeps the softmax exactly invariant to constant shifts
    logits = logits - logits.max(dim=1, keepdim=True).values
    weights = torch.softmax(logits, dim=1)
    return weights


def attend(Q, keys, values, params: AttentionParams) -> torch.Tensor:
    """Memory lookup: weighted values through W_V then W_O."""
    if params.w_v is None or params.w_o is None:
        raise ArgumentError("attend requires params constructed with d_v and d_out")
    values = _as_2d("values", values)
    keys = _as_2d("keys", keys)
    if values.shape[0] != keys.shape[0]:
        raise ArgumentError(
            f"keys and values row counts differ: {keys.shape[0]} vs {values.shape[0]}"
        )
    weights = similarity(Q, keys, params)
    return (weights @ (values.to(params.w_v.dtype) @ params.w_v)) @ params.w_o


def pairwise_cosine_corr(X) -> torch.Tensor:
    """Sum of cosine similarities over ordered row pairs i != j."""
    X = _as_2d("X", torch.as_tensor(X))
    m = X.shape[0]
    if m < 2:
        raise ArgumentError(f"pairwise_cosine_corr needs at least 2 rows, got {m}")
    norms = X.norm(dim=1)
    zero = torch.where(norms == 0)[0]
    if zero.numel():
        raise NumericError(f"row {int(zero[0])} has zero norm")
    unit = X / norms.unsqueeze(1)
    gram = unit @ unit.T
    return gram.sum() - gram.diagonal().sum()


class ImplicitMemoryBank(nn.Module):
    """M trainable key and value vectors of width D."""

    INIT_STD = 0.02

    def __init__(self, size: int, dim: int, seed: int = 0, init_std: float | None = None):
        super().__init__()
        if size < 1:
            raise ArgumentError(f"memory size must be >= 1, got {size}")
        self.init_std = self.INIT_STD if init_std is None else init_std
        gen = torch.Generator().manual_seed(seed)
        keys = torch.empty(size, dim).normal_(0.0, 1.0, generator=gen) * self.init_std
        values = torch.empty(size, dim).normal_(0.0, 1.0, generator=gen) * self.init_std
        self.keys = nn.Parameter(keys)
        self.values = nn.Parameter(values)

    @property
    def size(self) -> int:
        return self.keys.shape[0]

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def randomize_(self, seed: int, init_std: float | None = None) -> None:
        """Resample keys and values from the init distribution, in place."""
        std = self.init_std if init_std is None else init_std
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.keys.copy_(torch.empty_like(self.keys).normal_(0.0, 1.0, generator=gen) * std)
            self.values.copy_(
                torch.empty_like(self.values).normal_(0.0, 1.0, generator=gen) * std
            )
