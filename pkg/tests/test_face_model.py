import numpy as np
import pytest
import torch

from memtalk.errors import ArgumentError, DomainError
from memtalk.face_model import (
    CameraSpec,
    FaceCoefficients,
    extract_mouth_vertices,
    load_basis,
    make_synthetic_basis,
    mouth_basis_tensors,
    mouth_vertices_from_exp,
    project_to_guide_image,
    reconstruct_vertices,
    save_basis,
)


@pytest.fixture(scope="module")
def basis():
    return make_synthetic_basis(0, 100, 85, 10, 69)


def test_paper_dimension_basis(basis):
    assert basis.mean_vertices.shape == (100, 3)
    assert basis.exp_basis.shape == (100, 3, 85)
    assert basis.id_basis.shape == (100, 3, 10)
    assert basis.mouth_index_set.shape == (69,)
    assert len(set(basis.mouth_index_set.tolist())) == 69
    assert basis.mouth_index_set.max() < 100


def test_basis_determinism():
    a = make_synthetic_basis(0, 50, 10, 4, 20)
    b = make_synthetic_basis(0, 50, 10, 4, 20)
    assert np.array_equal(a.mean_vertices, b.mean_vertices)
    assert np.array_equal(a.exp_basis, b.exp_basis)
    assert np.array_equal(a.mouth_index_set, b.mouth_index_set)


def test_basis_seed_sensitivity():
    a = make_synthetic_basis(0, 50, 10, 4, 20)
    b = make_synthetic_basis(1, 50, 10, 4, 20)
    assert not np.array_equal(a.mean_vertices, b.mean_vertices)


def test_basis_columns_unit_norm(basis):
    norms = np.sqrt((basis.exp_basis.astype(np.float64) ** 2).sum(axis=(0, 1)))
    np.testing.assert_allclose(norms, 1.0, atol=1e-6)


def test_basis_invalid_counts():
    with pytest.raises(ArgumentError):
        make_synthetic_basis(0, 10, 5, 2, 11)  # h_v > v_total
    with pytest.raises(ArgumentError):
        make_synthetic_basis(0, 0, 5, 2, 1)


def test_reconstruct_zero_coefficients(basis):
    coeffs = FaceCoefficients.zeros(basis.h_c, basis.h_id)
    out = reconstruct_vertices(basis, coeffs)
    np.testing.assert_allclose(out, basis.mean_vertices, atol=0)


def test_reconstruct_single_mode_oracle(basis):
    # direct matrix-multiply oracle, checked column by column
    k = 7
    coeffs = FaceCoefficients.zeros(basis.h_c, basis.h_id)
    coeffs.alpha_exp[k] = 2.0
    out = reconstruct_vertices(basis, coeffs)
    expected = basis.mean_vertices.astype(np.float64) + 2.0 * basis.exp_basis[
        :, :, k
    ].astype(np.float64)
    for col in range(3):
        np.testing.assert_allclose(out[:, col], expected[:, col], atol=1e-12)


def test_reconstruct_translation_only(basis):
    coeffs = FaceCoefficients.zeros(basis.h_c, basis.h_id)
    coeffs.alpha_pose[3:] = [0.5, -0.25, 1.0]
    out = reconstruct_vertices(basis, coeffs)
    np.testing.assert_allclose(
        out, basis.mean_vertices.astype(np.float64) + [0.5, -0.25, 1.0], atol=1e-12
    )


def test_reconstruct_dimension_mismatch(basis):
    bad = FaceCoefficients(np.zeros(basis.h_id), np.zeros(basis.h_c + 1), np.zeros(6))
    with pytest.raises(ArgumentError):
        reconstruct_vertices(basis, bad)


def test_linearity_at_identity_pose(basis):
    rng = np.random.default_rng(3)
    alpha_a = rng.normal(size=basis.h_c)
    alpha_b = rng.normal(size=basis.h_c)
    mk = lambda alpha: FaceCoefficients(np.zeros(basis.h_id), alpha, np.zeros(6))
    lhs = reconstruct_vertices(basis, mk(alpha_a + alpha_b))
    rhs = (
        reconstruct_vertices(basis, mk(alpha_a))
        + reconstruct_vertices(basis, mk(alpha_b))
        - basis.mean_vertices.astype(np.float64)
    )
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_extract_mouth_identity_gather():
    basis = make_synthetic_basis(2, 30, 6, 3, 30)
    verts = reconstruct_vertices(basis, FaceCoefficients.zeros(6, 3))
    mouth = extract_mouth_vertices(verts, basis)
    # h_v == v_total: whole array, in index order
    np.testing.assert_array_equal(mouth.coords, verts[basis.mouth_index_set])


def test_extract_mouth_permuted_oracle(basis):
    rng = np.random.default_rng(5)
    verts = rng.normal(size=(basis.v_total, 3))
    mouth = extract_mouth_vertices(verts, basis)
    for row, idx in enumerate(basis.mouth_index_set):
        np.testing.assert_array_equal(mouth.coords[row], verts[idx])


def test_mouth_gradient_matches_basis_slice(basis):
    # analytic gradient is the gathered basis slice; compare to central
    # finite differences of the torch path
    mouth_t = mouth_basis_tensors(basis, dtype=torch.float64)
    alpha = torch.zeros(1, basis.h_c, dtype=torch.float64, requires_grad=True)
    out = mouth_vertices_from_exp(mouth_t, alpha)
    k, v, c = 11, 5, 1
    out[0, v, c].backward()
    grad = alpha.grad[0, k].item()
    analytic = basis.exp_basis[basis.mouth_index_set][v, c, k].item()
    assert abs(grad - analytic) < 1e-12

    eps = 1e-6
    plus = np.zeros(basis.h_c)
    plus[k] = eps
    coeff_p = FaceCoefficients(np.zeros(basis.h_id), plus, np.zeros(6))
    coeff_m = FaceCoefficients(np.zeros(basis.h_id), -plus, np.zeros(6))
    vp = extract_mouth_vertices(reconstruct_vertices(basis, coeff_p), basis).coords
    vm = extract_mouth_vertices(reconstruct_vertices(basis, coeff_m), basis).coords
    fd = (vp[v, c] - vm[v, c]) / (2 * eps)
    assert abs(fd - analytic) / max(abs(analytic), 1e-12) < 1e-6


def test_projection_single_center_vertex():
    cam = CameraSpec(focal=1.0, principal_point=(2.0, 2.0), canvas=(5, 5))
    img = project_to_guide_image(np.array([[0.0, 0.0, 1.0]]), cam)
    assert img.shape == (5, 5)
    assert img[2, 2] == 1.0
    assert img.sum() == 1.0


def test_projection_collision_max_compose():
    # two vertices on the optical axis at depths 1 and 2 hit the same pixel
    cam = CameraSpec(focal=1.0, principal_point=(2.0, 2.0), canvas=(5, 5))
    img = project_to_guide_image(
        np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]]), cam
    )
    assert img[2, 2] == pytest.approx(1.0)  # max(1/1, 1/2)


def test_projection_empty_input():
    cam = CameraSpec.default(8)
    img = project_to_guide_image(np.zeros((0, 3)), cam)
    assert img.shape == (8, 8)
    assert not img.any()


def test_projection_nonpositive_depth_names_vertex():
    cam = CameraSpec.default(8)
    with pytest.raises(DomainError, match="vertex 1"):
        project_to_guide_image(
            np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]), cam
        )


def test_projection_translation_equivariance():
    cam = CameraSpec(focal=8.0, principal_point=(4.0, 4.0), canvas=(16, 16))
    z = 2.0
    base = np.array([[0.0, 0.0, z]])
    for delta in (1, 2, 3):
        shifted = base + [delta * z / cam.focal, 0.0, 0.0]
        img_a = project_to_guide_image(base, cam)
        img_b = project_to_guide_image(shifted, cam)
        np.testing.assert_array_equal(np.roll(img_a, delta, axis=1), img_b)


def test_projection_determinism(basis):
    cam = CameraSpec.default(64)
    verts = reconstruct_vertices(basis, FaceCoefficients.zeros(basis.h_c, basis.h_id))
    a = project_to_guide_image(verts, cam)
    b = project_to_guide_image(verts, cam)
    assert np.array_equal(a, b)


def test_camera_validation():
    with pytest.raises(ArgumentError):
        CameraSpec(focal=0.0, principal_point=(1, 1), canvas=(4, 4))
    with pytest.raises(ArgumentError):
        CameraSpec(focal=1.0, principal_point=(1, 1), canvas=(0, 4))


def test_basis_round_trip(tmp_path, basis):
    save_basis(basis, tmp_path / "basis")
    loaded = load_basis(tmp_path / "basis")
    assert np.array_equal(loaded.mean_vertices, basis.mean_vertices)
    assert np.array_equal(loaded.exp_basis, basis.exp_basis)
    assert np.array_equal(loaded.id_basis, basis.id_basis)
    assert np.array_equal(loaded.mouth_index_set, basis.mouth_index_set)
    assert loaded.seed == basis.seed
