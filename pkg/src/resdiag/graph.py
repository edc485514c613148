"""The typed response graph and its normalized adjacencies.

Nodes are stacked students, exercises, concepts: students occupy rows
``[0, N)``, exercises ``[N, N+M)``, concepts ``[N+M, N+M+Z)``.  Two
square adjacencies share the exercise-concept edges but carry disjoint
student-exercise edges: ``a_right`` holds the correctly-answered ones,
``a_wrong`` the rest.  Both are symmetric with empty diagonals.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DataError
from .seeding import substream


@dataclass(frozen=True, eq=False)
class ResponseGraph:
    n_students: int
    n_exercises: int
    n_concepts: int
    a_right: sp.csr_matrix
    a_wrong: sp.csr_matrix

    @property
    def n_nodes(self) -> int:
        return self.n_students + self.n_exercises + self.n_concepts

    @property
    def n_edges(self) -> int:
        """Undirected edge count: typed response edges plus Q-matrix edges."""
        q_nnz = self.q_block().nnz
        response_nnz = (self.a_right.nnz + self.a_wrong.nnz) // 2 - 2 * q_nnz
        return response_nnz + q_nnz

    def response_block(self, right: bool) -> sp.csr_matrix:
        """Student-exercise block of one channel, shape (N, M)."""
        a = self.a_right if right else self.a_wrong
        n, m = self.n_students, self.n_exercises
        return a[:n, n : n + m].tocsr()

    def q_block(self) -> sp.csr_matrix:
        """Exercise-concept block, shape (M, Z); identical in both channels."""
        n, m = self.n_students, self.n_exercises
        return self.a_right[n : n + m, n + m :].tocsr()


def _assemble(block_se: sp.spmatrix, q: sp.spmatrix) -> sp.csr_matrix:
    n, m = block_se.shape
    z = q.shape[1]
    a = sp.bmat(
        [
            [None, block_se, None],
            [block_se.T, None, q],
            [None, q.T, sp.csr_matrix((z, z))],
        ],
        format="csr",
    )
    a.eliminate_zeros()
    a.sort_indices()
    return a


def build_response_graph(interactions: sp.spmatrix, q_matrix: np.ndarray) -> ResponseGraph:
    """Build the typed graph from a signed interaction matrix and a Q-matrix.

    ``interactions`` is (N, M) with +1 for a correct response, -1 for an
    incorrect one, 0 for unobserved.
    """
    inter = sp.csr_matrix(interactions, dtype=np.float64)
    n, m = inter.shape
    q = sp.csr_matrix(np.asarray(q_matrix, dtype=np.float64))
    if q.shape[0] != m:
        raise DataError(
            f"interaction matrix has {m} exercises but the Q-matrix has {q.shape[0]} rows"
        )
    data = inter.data
    if data.size and not np.isin(data, (1.0, -1.0)).all():
        raise DataError("interaction matrix entries must be +1, -1 or 0")
    right = inter.multiply(inter > 0).tocsr()
    wrong = (-inter).multiply(inter < 0).tocsr()
    return ResponseGraph(
        n_students=n,
        n_exercises=m,
        n_concepts=q.shape[1],
        a_right=_assemble(right, q),
        a_wrong=_assemble(wrong, q),
    )


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    """A propagation operator D^-1/2 A D^-1/2 plus the raw binary degrees."""

    matrix: sp.csr_matrix
    degrees: np.ndarray  # nonzero count per row of the raw adjacency


def normalize_adjacency(a: sp.spmatrix) -> NormalizedAdjacency:
    """Symmetric degree normalization; isolated rows stay all-zero."""
    a = sp.csr_matrix(a, dtype=np.float64)
    a.eliminate_zeros()
    degrees = np.diff(a.indptr).astype(np.int64)
    with np.errstate(divide="ignore"):
        inv_sqrt = 1.0 / np.sqrt(degrees.astype(np.float64))
    inv_sqrt[degrees == 0] = 0.0
    scale = sp.diags(inv_sqrt)
    norm = (scale @ a @ scale).tocsr()
    norm.sort_indices()
    return NormalizedAdjacency(matrix=norm, degrees=degrees)


@dataclass(frozen=True, eq=False)
class FlipPlan:
    """Record of one edge-flip draw: which response edges switched channel."""

    flip_ratio: float
    seed: int
    flipped: np.ndarray  # (k, 2) int64 rows of (student, exercise)

    @property
    def n_flipped(self) -> int:
        return self.flipped.shape[0]


def flip_edges(graph: ResponseGraph, flip_ratio: float, seed: int) -> tuple[ResponseGraph, FlipPlan]:
    """Move each response edge to the opposite channel with probability flip_ratio.

    Exercise-concept edges and the overall edge support never change;
    only the right/wrong typing of student-exercise edges does.
    """
    if not 0.0 <= flip_ratio <= 1.0:
        raise ValueError(f"flip ratio must be in [0, 1], got {flip_ratio}")
    right = graph.response_block(right=True).tocoo()
    wrong = graph.response_block(right=False).tocoo()
    students = np.concatenate([right.row, wrong.row])
    exercises = np.concatenate([right.col, wrong.col])
    is_right = np.concatenate(
        [np.ones(right.nnz, dtype=bool), np.zeros(wrong.nnz, dtype=bool)]
    )
    # deterministic edge order regardless of storage order
    order = np.lexsort((exercises, students))
    students, exercises, is_right = students[order], exercises[order], is_right[order]

    rng = substream(seed, "flip")
    flip = rng.random(students.size) < flip_ratio
    new_right = is_right ^ flip

    signed = np.where(new_right, 1.0, -1.0)
    inter = sp.coo_matrix(
        (signed, (students, exercises)), shape=(graph.n_students, graph.n_exercises)
    ).tocsr()
    flipped_graph = build_response_graph(inter, graph.q_block().toarray())
    plan = FlipPlan(
        flip_ratio=flip_ratio,
        seed=seed,
        flipped=np.column_stack([students[flip], exercises[flip]]).astype(np.int64),
    )
    return flipped_graph, plan


def dump_edges(graph: ResponseGraph, path: str | Path) -> None:
    """Write one ``src dst type`` line per undirected edge (types R, W, Q)."""
    n, m = graph.n_students, graph.n_exercises
    with open(path, "w", encoding="utf-8") as fh:
        for right, label in ((True, "R"), (False, "W")):
            block = graph.response_block(right).tocoo()
            for s, e in zip(block.row, block.col):
                fh.write(f"{s} {n + e} {label}\n")
        q = graph.q_block().tocoo()
        for e, k in zip(q.row, q.col):
            fh.write(f"{n + e} {n + m + k} Q\n")
