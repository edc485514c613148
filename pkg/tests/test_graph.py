"""Response-graph assembly, normalization and edge flipping."""

import numpy as np
import pytest
import scipy.sparse as sp

from resdiag.data import SyntheticSpec, build_interaction_matrix, generate_synthetic
from resdiag.errors import DataError
from resdiag.graph import (
    FlipPlan,
    build_response_graph,
    dump_edges,
    flip_edges,
    normalize_adjacency,
)


def hand_graph():
    """2 students, 2 exercises, 2 concepts; worked out by hand.

    s0 answered e0 right and e1 wrong, s1 answered e1 right.
    e0 covers k0; e1 covers both concepts.
    """
    inter = sp.csr_matrix(np.array([[1.0, -1.0], [0.0, 1.0]]))
    q = np.array([[1, 0], [1, 1]])
    return build_response_graph(inter, q)


def test_block_structure_matches_hand_construction():
    g = hand_graph()
    # node order: s0 s1 | e0 e1 | k0 k1
    expected_right = np.zeros((6, 6))
    expected_right[0, 2] = expected_right[2, 0] = 1  # s0-e0 right
    expected_right[1, 3] = expected_right[3, 1] = 1  # s1-e1 right
    for e, k in ((2, 4), (3, 4), (3, 5)):  # Q edges in both channels
        expected_right[e, k] = expected_right[k, e] = 1
    expected_wrong = np.zeros((6, 6))
    expected_wrong[0, 3] = expected_wrong[3, 0] = 1  # s0-e1 wrong
    for e, k in ((2, 4), (3, 4), (3, 5)):
        expected_wrong[e, k] = expected_wrong[k, e] = 1

    np.testing.assert_array_equal(g.a_right.toarray(), expected_right)
    np.testing.assert_array_equal(g.a_wrong.toarray(), expected_wrong)


def test_symmetry_zero_diagonal_and_counts():
    spec = SyntheticSpec.random(12, 20, 5, logs_per_student=8, seed=3)
    d = generate_synthetic(spec)
    g = build_response_graph(build_interaction_matrix(d), d.q_matrix)
    for a in (g.a_right, g.a_wrong):
        assert (a != a.T).nnz == 0
        assert a.diagonal().sum() == 0
    assert g.n_nodes == 12 + 20 + 5
    assert g.n_edges == d.n_logs + int(d.q_matrix.sum())
    # channel split partitions the responses
    rights = g.response_block(True).nnz
    wrongs = g.response_block(False).nnz
    assert rights == (d.triplets[:, 2] == 1).sum()
    assert wrongs == (d.triplets[:, 2] == 0).sum()
    np.testing.assert_array_equal(g.q_block().toarray(), d.q_matrix)


def test_bad_interactions_raise():
    q = np.array([[1]])
    with pytest.raises(DataError):
        build_response_graph(sp.csr_matrix(np.array([[2.0]])), q)
    with pytest.raises(DataError):
        build_response_graph(sp.csr_matrix(np.array([[1.0, 1.0]])), q)


def test_normalization_matches_dense_oracle():
    rng = np.random.default_rng(0)
    for seed in range(10):
        rs = np.random.RandomState(seed)
        a = sp.random(15, 15, density=0.2, random_state=rs)
        a = ((a + a.T) > 0).astype(np.float64)
        a.setdiag(0)
        a = sp.csr_matrix(a)
        a.eliminate_zeros()

        norm = normalize_adjacency(a)

        dense = a.toarray()
        deg = (dense != 0).sum(axis=1)
        with np.errstate(divide="ignore"):
            inv = 1.0 / np.sqrt(deg)
        inv[deg == 0] = 0.0
        expected = np.diag(inv) @ dense @ np.diag(inv)
        np.testing.assert_allclose(norm.matrix.toarray(), expected, atol=1e-12)
        np.testing.assert_array_equal(norm.degrees, deg)


def test_normalization_row_sums_bounded():
    spec = SyntheticSpec.random(25, 40, 6, logs_per_student=10, seed=1)
    d = generate_synthetic(spec)
    g = build_response_graph(build_interaction_matrix(d), d.q_matrix)
    norm = normalize_adjacency(g.a_right)
    # spectral norm of the symmetric normalized adjacency is at most 1
    top = abs(sp.linalg.eigsh(norm.matrix, k=1, return_eigenvectors=False)[0])
    assert top <= 1.0 + 1e-9


def test_isolated_node_has_zero_rows():
    inter = sp.csr_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]))  # s1 isolated in right
    q = np.array([[1, 0], [0, 1]])
    g = build_response_graph(inter, q)
    norm = normalize_adjacency(g.a_wrong)  # wrong channel: no response edges at all
    assert norm.degrees[0] == 0 and norm.degrees[1] == 0
    assert np.isfinite(norm.matrix.toarray()).all()
    np.testing.assert_array_equal(norm.matrix.toarray()[0], 0.0)


def flip_with(graph, ratio, seed):
    flipped, plan = flip_edges(graph, ratio, seed)
    assert isinstance(plan, FlipPlan)
    return flipped, plan


def test_flip_preserves_support_and_q():
    spec = SyntheticSpec.random(15, 25, 4, logs_per_student=10, seed=5)
    d = generate_synthetic(spec)
    g = build_response_graph(build_interaction_matrix(d), d.q_matrix)
    flipped, plan = flip_with(g, 0.3, seed=9)

    union_before = (g.response_block(True) + g.response_block(False)).toarray()
    union_after = (flipped.response_block(True) + flipped.response_block(False)).toarray()
    np.testing.assert_array_equal(union_before, union_after)
    np.testing.assert_array_equal(g.q_block().toarray(), flipped.q_block().toarray())

    # exactly the planned edges changed channel
    before = g.response_block(True).toarray()
    after = flipped.response_block(True).toarray()
    changed = np.argwhere(before != after)
    flipped_set = {tuple(row) for row in plan.flipped}
    assert {tuple(row) for row in changed} == flipped_set


def test_flip_extremes():
    spec = SyntheticSpec.random(8, 12, 3, logs_per_student=6, seed=2)
    d = generate_synthetic(spec)
    g = build_response_graph(build_interaction_matrix(d), d.q_matrix)

    same, plan0 = flip_with(g, 0.0, seed=4)
    assert plan0.n_flipped == 0
    np.testing.assert_array_equal(same.a_right.toarray(), g.a_right.toarray())

    swapped, plan1 = flip_with(g, 1.0, seed=4)
    assert plan1.n_flipped == d.n_logs
    np.testing.assert_array_equal(
        swapped.response_block(True).toarray(), g.response_block(False).toarray()
    )
    np.testing.assert_array_equal(
        swapped.response_block(False).toarray(), g.response_block(True).toarray()
    )


def test_flip_deterministic_per_seed():
    spec = SyntheticSpec.random(10, 15, 3, logs_per_student=8, seed=0)
    d = generate_synthetic(spec)
    g = build_response_graph(build_interaction_matrix(d), d.q_matrix)
    _, a = flip_with(g, 0.2, seed=7)
    _, b = flip_with(g, 0.2, seed=7)
    _, c = flip_with(g, 0.2, seed=8)
    np.testing.assert_array_equal(a.flipped, b.flipped)
    assert a.flipped.shape != c.flipped.shape or not np.array_equal(a.flipped, c.flipped)


def test_flip_fraction_concentrates():
    spec = SyntheticSpec.random(40, 60, 5, logs_per_student=30, seed=1)
    d = generate_synthetic(spec)
    g = build_response_graph(build_interaction_matrix(d), d.q_matrix)
    fractions = []
    for seed in range(30):
        _, plan = flip_with(g, 0.15, seed=seed)
        fractions.append(plan.n_flipped / d.n_logs)
    assert abs(np.mean(fractions) - 0.15) < 0.01


def test_dump_edges(tmp_path):
    g = hand_graph()
    path = tmp_path / "edges.txt"
    dump_edges(g, path)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == g.n_edges
    assert "0 2 R" in lines
    assert "0 3 W" in lines
    assert "2 4 Q" in lines
