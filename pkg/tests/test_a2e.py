import copy

import numpy as np
import pytest
import torch

from memtalk.a2e import (
    A2EModel,
    AudioFeatureSequence,
    a2e_loss,
    adapt_a2e,
    evaluate_vertex_rmse,
    explicit_a2e_bank,
    load_a2e_checkpoint,
    predict_expressions,
    save_a2e_checkpoint,
    train_a2e,
)
from memtalk.config import DataConfig, ModelDims, TrainConfig
from memtalk.errors import ArgumentError
from memtalk.face_model import FaceCoefficients, make_synthetic_basis
from memtalk.synth_data import generate_identity, generate_split

DIMS = dict(h_a=12, h_c=6)


@pytest.fixture(scope="module")
def basis():
    return make_synthetic_basis(1, 20, DIMS["h_c"], 3, 8)


def small_model(mode="implicit", seed=0, **kw):
    return A2EModel(
        h_a=DIMS["h_a"],
        h_c=DIMS["h_c"],
        memory_mode=mode,
        memory_size=5,
        memory_dim=16,
        layers=1,
        heads=2,
        seed=seed,
        **kw,
    )


def make_windows(basis, n=6, t=5, seed=0):
    rng = np.random.default_rng(seed)
    from memtalk.synth_data import SequenceSample

    mouth_mean = basis.mean_vertices[basis.mouth_index_set].astype(np.float64)
    mouth_exp = basis.exp_basis[basis.mouth_index_set].astype(np.float64)
    samples = []
    for _ in range(n):
        audio = rng.normal(size=(t, DIMS["h_a"])).astype(np.float32)
        exp = rng.normal(size=(t, DIMS["h_c"])).astype(np.float32)
        mouth = mouth_mean[None] + np.einsum("vck,tk->tvc", mouth_exp, exp.astype(np.float64))
        samples.append(
            SequenceSample(audio=audio, exp=exp, mouth=mouth.astype(np.float32))
        )
    return samples


def test_memory_zeroed_wo_equals_memoryless(basis):
    # Eq-3-style wiring: zero output projection -> plain encoder-decoder
    mem = small_model("implicit", seed=4)
    plain = small_model("none", seed=4)
    with torch.no_grad():
        mem.mem_params.w_o.zero_()
    audio = np.random.default_rng(0).normal(size=(7, DIMS["h_a"])).astype(np.float32)
    out_mem = predict_expressions(mem, audio).coeffs
    out_plain = predict_expressions(plain, audio).coeffs
    assert np.array_equal(out_mem, out_plain)


def test_predict_deterministic_and_context_sensitive(basis):
    model = small_model(seed=0)
    audio = np.random.default_rng(1).normal(size=(6, DIMS["h_a"])).astype(np.float32)
    a = predict_expressions(model, AudioFeatureSequence(features=audio)).coeffs
    b = predict_expressions(small_model(seed=0), audio).coeffs
    assert np.array_equal(a, b)
    # one frame alone vs inside a longer context: outputs differ
    single = predict_expressions(model, audio[:1]).coeffs[0]
    in_context = a[0]
    assert not np.allclose(single, in_context)


def test_predict_width_mismatch(basis):
    model = small_model()
    with pytest.raises(ArgumentError):
        predict_expressions(model, np.zeros((4, DIMS["h_a"] + 1), dtype=np.float32))


def test_loss_zero_when_prediction_perfect(basis):
    model = small_model(seed=2).double()
    # orthonormal bank rows make the regularizer vanish
    with torch.no_grad():
        eye = torch.eye(model.bank.keys.shape[1], dtype=torch.float64)
        model.bank.keys.copy_(eye[:5])
        model.bank.values.copy_(eye[5:10])
    audio = np.random.default_rng(2).normal(size=(4, DIMS["h_a"]))
    target = predict_expressions(model, audio).coeffs
    report = a2e_loss(model, audio, target, basis)
    assert report.l_cof == pytest.approx(0.0, abs=1e-9)
    assert report.l_vtx == pytest.approx(0.0, abs=1e-9)
    assert report.l_reg == pytest.approx(0.0, abs=1e-12)
    assert report.total == pytest.approx(0.0, abs=1e-9)


def test_loss_hand_example_single_coefficient(basis):
    # one frame, one coefficient off by 2, zero basis -> l_cof 2, l_vtx 0
    zero_basis = copy.deepcopy(basis)
    zero_basis.exp_basis = np.zeros_like(zero_basis.exp_basis)

    class FixedModel(A2EModel):
        def forward(self, features):
            out = torch.zeros(
                features.shape[0], features.shape[1], self.h_c,
                dtype=features.dtype,
            )
            return out

    model = FixedModel(
        h_a=DIMS["h_a"], h_c=DIMS["h_c"], memory_mode="none", memory_dim=16,
        layers=1, heads=2, seed=0,
    )
    gt = np.zeros((1, DIMS["h_c"]), dtype=np.float64)
    gt[0, 3] = 2.0
    report = a2e_loss(model, np.zeros((1, DIMS["h_a"])), gt, zero_basis)
    assert report.l_cof == pytest.approx(2.0, abs=1e-7)
    assert report.l_vtx == pytest.approx(0.0, abs=1e-9)


def test_loss_report_composition_identity(basis):
    model = small_model(seed=3)
    rng = np.random.default_rng(3)
    audio = rng.normal(size=(5, DIMS["h_a"]))
    gt = rng.normal(size=(5, DIMS["h_c"]))
    lambdas = (1.0, 1.0, 0.1)
    report = a2e_loss(model, audio, gt, basis, lambdas=lambdas)
    recomputed = (
        lambdas[0] * report.l_cof
        + lambdas[1] * report.l_vtx
        + lambdas[2] * report.l_reg
    )
    assert abs(report.total - recomputed) < 1e-10
    assert report.lambdas == lambdas


def test_loss_gradients_reach_all_components(basis):
    model = small_model(seed=5)
    rng = np.random.default_rng(5)
    audio = rng.normal(size=(4, DIMS["h_a"]))
    gt = rng.normal(size=(4, DIMS["h_c"]))
    report = a2e_loss(model, audio, gt, basis)
    report.total_tensor.backward()
    groups = {
        "encoder": model.encoder.parameters(),
        "decoder": model.decoder.parameters(),
        "bank": [model.bank.keys, model.bank.values],
        "projections": model.mem_params.parameters(),
    }
    for name, params in groups.items():
        assert any(
            p.grad is not None and p.grad.abs().sum() > 0 for p in params
        ), f"no gradient reached {name}"


def test_loss_with_pose_id_stream(basis):
    model = small_model(seed=6)
    rng = np.random.default_rng(6)
    audio = rng.normal(size=(3, DIMS["h_a"]))
    gt = rng.normal(size=(3, DIMS["h_c"]))
    coeffs = FaceCoefficients(
        alpha_id=rng.normal(size=3),
        alpha_exp=np.zeros(DIMS["h_c"]),
        alpha_pose=np.array([0.1, -0.2, 0.05, 1.0, 0.0, -0.5]),
    )
    report = a2e_loss(model, audio, gt, basis, gt_pose_id=[coeffs] * 3)
    assert np.isfinite(report.total)


def test_train_requires_data_and_epochs(basis):
    model = small_model()
    cfg = TrainConfig(epochs=1, batch_size=2, memory_size=5, memory_dim=16)
    with pytest.raises(ArgumentError):
        train_a2e(model, [], basis, cfg)
    cfg.epochs = 0
    with pytest.raises(ArgumentError):
        train_a2e(model, make_windows(basis), basis, cfg)


def test_train_lr_zero_leaves_parameters_bitwise(basis):
    model = small_model(seed=7)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    cfg = TrainConfig(lr=0.0, epochs=1, batch_size=2, memory_size=5, memory_dim=16, seed=7)
    train_a2e(model, make_windows(basis, n=2), basis, cfg)
    after = model.state_dict()
    for key, tensor in before.items():
        assert torch.equal(tensor, after[key]), key


def test_alternating_schedule_freezes_inactive_group(basis):
    model = small_model(seed=8)
    samples = make_windows(basis, n=8, seed=8)
    cfg = TrainConfig(
        lr=1e-2, epochs=2, batch_size=2, memory_size=5, memory_dim=16,
        seed=8, alternate=True,
    )
    mem_ids = {id(p) for p in model.memory_parameters()}
    snapshots = []

    def hook(step):
        snapshots.append(
            {
                "step": step,
                "mem": [p.detach().clone() for p in model.memory_parameters()],
                "model": [
                    p.detach().clone() for p in model.model_parameters()
                ],
            }
        )

    train_a2e(model, samples, basis, cfg, step_hook=hook)
    # epochs=2 -> first epoch is the alternating half (4 steps per epoch)
    first_half_steps = len(samples) // cfg.batch_size
    for i in range(1, first_half_steps):
        prev, cur = snapshots[i - 1], snapshots[i]
        step = cur["step"]
        if step % 2 == 0:  # even step updated model only; memory untouched
            for a, b in zip(prev["mem"], cur["mem"]):
                assert torch.equal(a, b)
            assert any(
                not torch.equal(a, b) for a, b in zip(prev["model"], cur["model"])
            )
        else:  # odd step updated memory only
            for a, b in zip(prev["model"], cur["model"]):
                assert torch.equal(a, b)
            assert any(
                not torch.equal(a, b) for a, b in zip(prev["mem"], cur["mem"])
            )


def test_train_loss_decreases_on_toy_task(basis):
    wins = 0
    for seed in range(5):
        model = small_model(seed=seed)
        samples = make_windows(basis, n=12, t=6, seed=seed)
        cfg = TrainConfig(
            lr=1e-3, epochs=12, batch_size=4, memory_size=5, memory_dim=16, seed=seed
        )
        result = train_a2e(model, samples, basis, cfg)
        wins += result.history[-1]["total"] < result.history[0]["total"]
    assert wins >= 4


def test_adapt_on_pretraining_set_is_stable(basis):
    # fine-tuning on the data the model was trained on must not degrade
    # held-out RMSE by more than 10%
    model = small_model(seed=21)
    samples = make_windows(basis, n=10, t=6, seed=21)
    held = make_windows(basis, n=4, t=6, seed=22)
    cfg = TrainConfig(lr=1e-3, epochs=20, batch_size=4, memory_size=5, memory_dim=16, seed=21)
    train_a2e(model, samples, basis, cfg)
    before = evaluate_vertex_rmse(model, held, basis)
    adapt_cfg = TrainConfig(
        lr=1e-4, epochs=5, batch_size=4, memory_size=5, memory_dim=16, seed=21
    )
    adapt_a2e(model, samples, basis, adapt_cfg)
    after = evaluate_vertex_rmse(model, held, basis)
    assert after <= before * 1.10


def test_adapt_zero_epochs_is_identity(basis):
    model = small_model(seed=9)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    cfg = TrainConfig(lr=1e-3, epochs=0, batch_size=2, memory_size=5, memory_dim=16)
    result = adapt_a2e(model, make_windows(basis, n=2), basis, cfg)
    assert result.steps == 0
    for key, tensor in before.items():
        assert torch.equal(tensor, model.state_dict()[key])


def test_adapt_default_schedule():
    import inspect

    from memtalk import a2e

    source = inspect.getsource(a2e.adapt_a2e)
    assert "5e-6" in source and "200" in source


def test_checkpoint_round_trip(tmp_path, basis):
    model = small_model(seed=10)
    samples = make_windows(basis, n=4, seed=10)
    cfg = TrainConfig(lr=1e-3, epochs=2, batch_size=2, memory_size=5, memory_dim=16, seed=10)
    train_a2e(model, samples, basis, cfg)
    save_a2e_checkpoint(model, tmp_path / "ck", rng_state=torch.Generator().get_state().numpy().tobytes())
    loaded, aux = load_a2e_checkpoint(tmp_path / "ck")
    for key, tensor in model.state_dict().items():
        assert torch.equal(tensor, loaded.state_dict()[key]), key
    audio = np.random.default_rng(0).normal(size=(5, DIMS["h_a"])).astype(np.float32)
    assert np.array_equal(
        predict_expressions(model, audio).coeffs,
        predict_expressions(loaded, audio).coeffs,
    )
    assert aux["rng_state"] is not None


def test_checkpoint_saves_optimizer_moments(tmp_path, basis):
    model = small_model(seed=11)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    samples = make_windows(basis, n=2, seed=11)
    report = a2e_loss(model, samples[0].audio, samples[0].exp, basis)
    report.total_tensor.backward()
    opt.step()
    save_a2e_checkpoint(model, tmp_path / "ck", optimizers={"joint": opt})
    _, aux = load_a2e_checkpoint(tmp_path / "ck")
    assert aux["optim_arrays"]
    assert aux["optim_steps"]
    sample_key = next(iter(aux["optim_arrays"]))
    state_arrays = {
        k: v for k, v in aux["optim_arrays"].items() if k.endswith("exp_avg")
    }
    assert state_arrays
    # moments round-trip bit-exactly
    name = next(iter(state_arrays))
    group_idx, param_idx = 2, 3  # optim.joint.<g>.<p>.exp_avg
    parts = name.split(".")
    p = opt.param_groups[int(parts[group_idx])]["params"][int(parts[param_idx])]
    assert np.array_equal(opt.state[p]["exp_avg"].numpy(), state_arrays[name])


def test_explicit_memory_model(basis):
    keys = np.random.default_rng(1).normal(size=(7, DIMS["h_a"])).astype(np.float32)
    values = np.random.default_rng(2).normal(size=(7, DIMS["h_c"])).astype(np.float32)
    model = small_model("explicit", seed=12, explicit_keys=keys, explicit_values=values)
    audio = np.random.default_rng(3).normal(size=(4, DIMS["h_a"])).astype(np.float32)
    out = predict_expressions(model, audio)
    assert out.coeffs.shape == (4, DIMS["h_c"])
    assert model.memory_parameters() == []


def test_explicit_a2e_bank_sampling(basis):
    dims = ModelDims(image_size=16, patch_size=8)
    data_cfg = DataConfig(n_train_frames=12, n_heldout_frames=4)
    identity = generate_identity(0, dims, data_cfg)
    train, _ = generate_split(identity, dims, data_cfg, seed=0)
    keys, values = explicit_a2e_bank(train, size=6, seed=0)
    assert keys.shape == (6, dims.h_a)
    assert values.shape == (6, dims.h_c)
    k2, v2 = explicit_a2e_bank(train, size=6, seed=0)
    assert np.array_equal(keys, k2)


def test_evaluate_vertex_rmse_perfect_prediction(basis):
    model = small_model(seed=13)
    samples = make_windows(basis, n=2, seed=13)
    # overwrite targets with the model's own predictions: RMSE must be ~0
    for s in samples:
        pred = predict_expressions(model, s.audio).coeffs
        s.exp = pred
        mouth_mean = basis.mean_vertices[basis.mouth_index_set].astype(np.float64)
        mouth_exp = basis.exp_basis[basis.mouth_index_set].astype(np.float64)
        s.mouth = (
            mouth_mean[None]
            + np.einsum("vck,tk->tvc", mouth_exp, pred.astype(np.float64))
        ).astype(np.float32)
    assert evaluate_vertex_rmse(model, samples, basis) < 1e-6
