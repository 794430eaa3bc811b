"""Scikit-learn style facades over the two trainable stages.

These wrappers expose ``fit``/``predict``/``get_params`` so the sequence
regressor and the renderer compose with sklearn tooling (clone, pipelines,
grid search). They delegate to the package training loops; constructor
arguments are stored verbatim as sklearn requires.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .a2e import A2EModel, predict_expressions, train_a2e
from .config import RenderTrainConfig, TrainConfig
from .errors import ArgumentError
from .explicit_memory import ExplicitMemoryBank
from .face_model import make_synthetic_basis
from .renderer import Discriminator, RendererModel, render, train_renderer
from .synth_data import SequenceSample
from .validation import check_array


class ExpressionRegressor(BaseEstimator):
    """Sequence regressor from audio features to expression coefficients.

    ``fit`` expects ``X`` of shape [n_sequences, T, h_a] and ``y`` of shape
    [n_sequences, T, h_c]. When no blendshape basis is supplied, a seeded
    synthetic one provides the vertex-space part of the loss.
    """

    def __init__(
        self,
        h_a: int = 64,
        h_c: int = 85,
        memory_mode: str = "implicit",
        memory_size: int = 64,
        memory_dim: int = 64,
        layers: int = 2,
        heads: int = 4,
        lr: float = 1e-3,
        epochs: int = 20,
        batch_size: int = 8,
        lambda_cof: float = 1.0,
        lambda_vtx: float = 1.0,
        lambda_reg: float = 0.1,
        alternate: bool = True,
        basis=None,
        seed: int = 0,
    ):
        self.h_a = h_a
        self.h_c = h_c
        self.memory_mode = memory_mode
        self.memory_size = memory_size
        self.memory_dim = memory_dim
        self.layers = layers
        self.heads = heads
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.lambda_cof = lambda_cof
        self.lambda_vtx = lambda_vtx
        self.lambda_reg = lambda_reg
        self.alternate = alternate
        self.basis = basis
        self.seed = seed

    def _resolved_basis(self):
        if self.basis is not None:
            return self.basis
        return make_synthetic_basis(self.seed, 32, self.h_c, 4, 16)

    def fit(self, X, y):
        X = check_array("X", X, ndim=3, finite=True)
        y = check_array("y", y, ndim=3, finite=True)
        if X.shape[:2] != y.shape[:2]:
            raise ArgumentError(
                f"X and y must pair sequences, got {X.shape} vs {y.shape}"
            )
        if X.shape[2] != self.h_a or y.shape[2] != self.h_c:
            raise ArgumentError(
                f"expected widths ({self.h_a}, {self.h_c}), got"
                f" ({X.shape[2]}, {y.shape[2]})"
            )
        basis = self._resolved_basis()
        mouth_mean = basis.mean_vertices[basis.mouth_index_set].astype(np.float64)
        mouth_exp = basis.exp_basis[basis.mouth_index_set].astype(np.float64)
        samples = []
        for audio, exp in zip(X, y):
            mouth = mouth_mean[None] + np.einsum("vck,tk->tvc", mouth_exp, exp)
            samples.append(
                SequenceSample(
                    audio=audio.astype(np.float32),
                    exp=exp.astype(np.float32),
                    mouth=mouth.astype(np.float32),
                )
            )
        config = TrainConfig(
            lr=self.lr,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lambda_cof=self.lambda_cof,
            lambda_vtx=self.lambda_vtx,
            lambda_reg=self.lambda_reg,
            memory_size=self.memory_size,
            memory_dim=self.memory_dim,
            seed=self.seed,
            alternate=self.alternate,
        )
        self.model_ = A2EModel(
            h_a=self.h_a,
            h_c=self.h_c,
            memory_mode=self.memory_mode,
            memory_size=self.memory_size,
            memory_dim=self.memory_dim,
            layers=self.layers,
            heads=self.heads,
            seed=self.seed,
        )
        result = train_a2e(self.model_, samples, basis, config)
        self.history_ = result.history
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise ArgumentError("predict called before fit")
        X = check_array("X", X, ndim=3, finite=True)
        return np.stack(
            [predict_expressions(self.model_, seq).coeffs for seq in X]
        )

    def score(self, X, y) -> float:
        """Negative mean per-frame coefficient error (higher is better)."""
        y = check_array("y", y, ndim=3)
        pred = self.predict(X)
        return -float(np.linalg.norm(pred - y, axis=2).mean())


class NeuralRendererEstimator(BaseEstimator):
    """Image renderer over dataset records, with an optional memory bank.

    ``fit`` takes a list of :class:`memtalk.synth_data.SampleRecord`;
    ``predict`` renders records to [n, H, W, C] images in [0, 1].
    """

    def __init__(
        self,
        image_size: int = 64,
        channels: int = 3,
        base_channels: int = 8,
        depth: int = 3,
        h_v: int = 69,
        patch_size: int = 16,
        bank: ExplicitMemoryBank | None = None,
        lr: float = 2e-4,
        epochs: int = 5,
        batch_size: int = 8,
        lambda_rec: float = 20.0,
        lambda_adv: float = 1.0,
        seed: int = 0,
    ):
        self.image_size = image_size
        self.channels = channels
        self.base_channels = base_channels
        self.depth = depth
        self.h_v = h_v
        self.patch_size = patch_size
        self.bank = bank
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.lambda_rec = lambda_rec
        self.lambda_adv = lambda_adv
        self.seed = seed

    def fit(self, X, y=None):
        records = list(X)
        if not records:
            raise ArgumentError("fit requires at least one record")
        config = RenderTrainConfig(
            lr=self.lr,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lambda_rec=self.lambda_rec,
            lambda_adv=self.lambda_adv,
            seed=self.seed,
            base_channels=self.base_channels,
            depth=self.depth,
        )
        self.model_ = RendererModel(
            image_size=self.image_size,
            channels=self.channels,
            base_channels=self.base_channels,
            depth=self.depth,
            h_v=self.h_v,
            patch_size=self.patch_size,
            memory_mode="explicit" if self.bank is not None else "none",
            seed=self.seed,
        )
        self.disc_ = Discriminator(channels=self.channels, seed=self.seed + 1)
        result = train_renderer(
            self.model_, self.disc_, records, self.bank, config
        )
        self.history_ = result.history
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise ArgumentError("predict called before fit")
        from .renderer import RenderInput

        frames = []
        for record in X:
            inp = RenderInput(
                guide_image=record.guide,
                masked_template=record.masked_template,
                query_vertices=record.mouth_vertices,
            )
            frames.append(render(self.model_, inp, self.bank))
        return np.stack(frames)
