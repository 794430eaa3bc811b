import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memtalk.errors import ArgumentError, IntegrityError
from memtalk.explicit_memory import (
    ExplicitMemoryBank,
    VertexPatchPair,
    build_explicit_memory,
    closest_pair,
    initial_selection_indices,
    load_bank,
    rebuild_for_identity,
    rms_distance,
    save_bank,
    stability_check,
)
from memtalk.face_model import MouthVertexSet


def vertex(x, y=0.0, z=0.0):
    return MouthVertexSet(coords=np.array([[x, y, z]], dtype=np.float32))


def pair(x, frame=0, patch_val=0.0):
    return VertexPatchPair(
        key=vertex(x),
        value=np.full((4, 4, 3), patch_val, dtype=np.float32),
        source_frame=frame,
    )


def scalar_pool(values):
    return [pair(x, frame=i, patch_val=i / 10) for i, x in enumerate(values)]


def exhaustive_best_dmin(pool, n):
    """Independent oracle: brute-force max-min over all C(|pool|, n) subsets."""
    best = -1.0
    for combo in itertools.combinations(range(len(pool)), n):
        keys = [pool[i].key for i in combo]
        d = min(
            rms_distance(keys[i], keys[j])
            for i in range(n)
            for j in range(i + 1, n)
        )
        best = max(best, d)
    return best


def test_rms_distance_zero_on_equal():
    a = vertex(1.0, 2.0, 3.0)
    assert rms_distance(a, a) == 0.0


def test_rms_distance_single_vertex_euclidean():
    assert rms_distance(vertex(0, 0, 0), vertex(3, 4, 0)) == pytest.approx(5.0)


def test_rms_distance_hand_example():
    a = MouthVertexSet(coords=np.array([[1.0, 0, 0], [0, 0, 0]]))
    b = MouthVertexSet(coords=np.zeros((2, 3)))
    assert rms_distance(a, b) == pytest.approx(np.sqrt(0.5))  # 0.70711...


def test_rms_distance_shape_mismatch():
    a = MouthVertexSet(coords=np.zeros((2, 3)))
    b = MouthVertexSet(coords=np.zeros((3, 3)))
    with pytest.raises(ArgumentError):
        rms_distance(a, b)


@settings(deadline=None, max_examples=60)
@given(
    st.lists(
        st.tuples(
            st.floats(-5, 5, allow_nan=False),
            st.floats(-5, 5, allow_nan=False),
            st.floats(-5, 5, allow_nan=False),
        ),
        min_size=3,
        max_size=3,
    )
)
def test_rms_distance_is_a_metric(points):
    a, b, c = (
        MouthVertexSet(coords=np.array([p], dtype=np.float64)) for p in points
    )
    dab, dba = rms_distance(a, b), rms_distance(b, a)
    assert dab == pytest.approx(dba, abs=1e-9)
    assert rms_distance(a, a) == 0.0
    assert rms_distance(a, c) <= dab + rms_distance(b, c) + 1e-9


def test_closest_pair_oracle():
    keys = [vertex(0.0), vertex(1.0), vertex(10.0)]
    assert closest_pair(keys) == (0, 1, 1.0)
    # exhaustive scan agrees
    dists = {
        (i, j): rms_distance(keys[i], keys[j])
        for i in range(3)
        for j in range(i + 1, 3)
    }
    assert min(dists.values()) == 1.0


def test_closest_pair_identical_keys():
    _, _, d = closest_pair([vertex(2.0), vertex(2.0), vertex(9.0)])
    assert d == 0.0


def test_closest_pair_tie_break_lexicographic():
    # exact ties between (0, 1) and (1, 2) resolve to the smaller pair
    keys = [vertex(0.0), vertex(1.0), vertex(2.0)]
    i, j, d = closest_pair(keys)
    assert (i, j, d) == (0, 1, 1.0)
    # and a global tie across every pair still returns (0, 1)
    same = [vertex(3.0), vertex(3.0), vertex(3.0)]
    assert closest_pair(same)[:2] == (0, 1)


def test_closest_pair_needs_two():
    with pytest.raises(ArgumentError):
        closest_pair([vertex(1.0)])


def test_build_reaches_exhaustive_optimum_012_pool():
    pool = scalar_pool([0.0, 1.0, 10.0])
    for seed in range(12):
        bank = build_explicit_memory(pool, 2, seed)
        assert sorted(k[0, 0] for k in bank.keys_array()) == [0.0, 10.0]
        assert bank.min_pair_distance == 10.0
        assert stability_check(bank, pool)


def test_build_whole_pool():
    pool = scalar_pool([0.0, 2.0, 5.0])
    bank = build_explicit_memory(pool, 3, 0)
    assert bank.n == 3
    assert bank.min_pair_distance == pytest.approx(2.0)
    assert stability_check(bank, pool)


def test_build_degenerate_identical_pool():
    pool = scalar_pool([4.0] * 5)
    bank = build_explicit_memory(pool, 3, 1)
    assert bank.min_pair_distance == 0.0
    assert stability_check(bank, pool)


def test_build_argument_errors():
    pool = scalar_pool([0.0, 1.0, 2.0])
    with pytest.raises(ArgumentError):
        build_explicit_memory(pool, 4, 0)
    with pytest.raises(ArgumentError):
        build_explicit_memory(pool, 1, 0)


def test_build_monotone_improvement_and_stability_random_pools():
    rng = np.random.default_rng(0)
    ratios = []
    for trial in range(100):
        size = rng.integers(4, 11)
        n = int(rng.integers(2, min(5, size + 1)))
        pool = [
            VertexPatchPair(
                key=MouthVertexSet(
                    coords=rng.normal(size=(2, 3)).astype(np.float32)
                ),
                value=np.zeros((4, 4, 3), np.float32),
                source_frame=i,
            )
            for i, _ in enumerate(range(size))
        ]
        seed = trial
        bank = build_explicit_memory(pool, n, seed)
        init_idx = initial_selection_indices(len(pool), n, seed)
        init_keys = [pool[i].key for i in init_idx]
        init_dmin = closest_pair(init_keys)[2] if n >= 2 else 0.0
        assert bank.min_pair_distance >= init_dmin
        assert stability_check(bank, pool)
        best = exhaustive_best_dmin(pool, n)
        assert best > 0
        ratios.append(bank.min_pair_distance / best)
        assert ratios[-1] > 0
    # selection quality is logged; the greedy pass has no guarantee beyond
    # local stability, but it should stay close to optimal on small pools
    assert np.median(ratios) > 0.9


def test_stability_check_flags_bad_member():
    pool = scalar_pool([0.0, 1.0, 10.0])
    bad = ExplicitMemoryBank(
        pairs=[pool[0], pool[1]], identity_tag="", min_pair_distance=1.0
    )
    assert stability_check(bad, pool) is False


def test_stability_check_whole_pool_vacuous():
    pool = scalar_pool([0.0, 3.0, 7.0])
    bank = build_explicit_memory(pool, 3, 0)
    assert stability_check(bank, pool) is True


def test_bank_min_distance_matches_recompute():
    rng = np.random.default_rng(7)
    pool = [
        VertexPatchPair(
            key=MouthVertexSet(coords=rng.normal(size=(3, 3)).astype(np.float32)),
            value=rng.random((4, 4, 3)).astype(np.float32),
            source_frame=i,
        )
        for i in range(12)
    ]
    bank = build_explicit_memory(pool, 4, 3)
    recomputed = closest_pair([p.key for p in bank.pairs])[2]
    assert bank.min_pair_distance == pytest.approx(recomputed, abs=1e-9)


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    pool = [
        VertexPatchPair(
            key=MouthVertexSet(coords=rng.normal(size=(3, 3)).astype(np.float32)),
            value=rng.random((4, 4, 3)).astype(np.float32),
            source_frame=i,
        )
        for i in range(8)
    ]
    bank = build_explicit_memory(pool, 3, 0, identity_tag="id0007")
    save_bank(bank, tmp_path / "bank")
    loaded = load_bank(tmp_path / "bank")
    assert loaded.identity_tag == "id0007"
    assert loaded.min_pair_distance == bank.min_pair_distance
    assert np.array_equal(loaded.keys_array(), bank.keys_array())
    assert np.array_equal(loaded.values_array(), bank.values_array())
    assert loaded.source_frames() == bank.source_frames()
    # loaded bank is still judged stable against the original pool
    assert stability_check(loaded, pool) is True


def test_corrupted_blob_named(tmp_path):
    pool = scalar_pool([0.0, 1.0, 10.0, 4.0])
    bank = build_explicit_memory(pool, 2, 0, identity_tag="idx")
    save_bank(bank, tmp_path / "bank")
    blob = tmp_path / "bank" / "values.f32"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(IntegrityError, match="values.f32"):
        load_bank(tmp_path / "bank")


def test_rebuild_for_identity_provenance_and_determinism():
    pool_a = scalar_pool([0.0, 1.0, 10.0, 5.0])
    pool_b = [pair(x, frame=100 + i) for i, x in enumerate([2.0, 8.0, 3.0, 11.0])]
    bank = rebuild_for_identity(pool_b, 3, 2, identity_tag="idB")
    assert bank.identity_tag == "idB"
    b_frames = {p.source_frame for p in pool_b}
    assert set(bank.source_frames()) <= b_frames
    again = rebuild_for_identity(pool_b, 3, 2, identity_tag="idB")
    assert np.array_equal(bank.keys_array(), again.keys_array())
    assert bank.source_frames() == again.source_frames()
    assert not (set(bank.source_frames()) & {p.source_frame for p in pool_a})
