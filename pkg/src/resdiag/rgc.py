"""Response-aware graph convolution.

Each layer runs one normalized propagation step per edge channel and
fuses the two results through channel weights and an activation:

    H_R(l) = A_hat_R @ H_F(l-1)
    H_W(l) = A_hat_W @ H_F(l-1)
    H_F(l) = phi(H_R(l) @ W_rc + H_W(l) @ W_wc)

with H_F(0) the free embedding table.  Both channels consume the fused
state of the previous layer, and the output is the mean of H_F(0..L),
so every depth contributes equally to the final representation.

``propagate_plain`` is the degraded variant used by the ablation that
removes response awareness: a single undecomposed adjacency, no channel
weights, no activation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NumericsError
from .graph import NormalizedAdjacency, ResponseGraph, normalize_adjacency

ACTIVATIONS = ("tanh", "leaky_relu", "identity")


def _apply_activation(name: str, x: ad.Tensor) -> ad.Tensor:
    if name == "tanh":
        return ad.tanh(x)
    if name == "leaky_relu":
        return ad.leaky_relu(x)
    if name == "identity":
        return x
    raise ValueError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


@dataclass
class RgcParams:
    """Trainable state of the convolution: embedding table plus channel weights."""

    h0: ad.Tensor  # (V, d)
    w_right: ad.Tensor  # (d, d)
    w_wrong: ad.Tensor  # (d, d)
    n_layers: int
    activation: str = "tanh"

    @classmethod
    def init(
        cls,
        n_nodes: int,
        dim: int,
        n_layers: int,
        rng: np.random.Generator,
        activation: str = "tanh",
    ) -> "RgcParams":
        if n_layers < 1:
            raise ValueError(f"need at least one layer, got {n_layers}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")
        return cls(
            h0=ad.xavier_init(n_nodes, dim, rng),
            w_right=ad.xavier_init(dim, dim, rng),
            w_wrong=ad.xavier_init(dim, dim, rng),
            n_layers=n_layers,
            activation=activation,
        )

    def tensors(self) -> dict[str, ad.Tensor]:
        return {"h0": self.h0, "w_right": self.w_right, "w_wrong": self.w_wrong}


@dataclass
class PooledEmbedding:
    """Mean-pooled node embedding plus the per-layer fused states."""

    pooled: ad.Tensor  # (V, d)
    per_layer: list[ad.Tensor]  # H_F(0..L)


def _pool(layers: list[ad.Tensor]) -> ad.Tensor:
    total = layers[0]
    for layer in layers[1:]:
        total = ad.add(total, layer)
    return ad.affine(total, 1.0 / len(layers))


def propagate(
    params: RgcParams,
    adj_right: NormalizedAdjacency,
    adj_wrong: NormalizedAdjacency,
) -> PooledEmbedding:
    """Run the response-aware convolution and mean-pool all layer outputs."""
    v, d = params.h0.shape
    for adj in (adj_right, adj_wrong):
        if adj.matrix.shape != (v, v):
            raise ValueError(
                f"adjacency shape {adj.matrix.shape} does not match embedding rows {v}"
            )
    if params.w_right.shape != (d, d) or params.w_wrong.shape != (d, d):
        raise ValueError("channel weights must be (d, d)")

    h = params.h0
    layers = [h]
    for _ in range(params.n_layers):
        h_right = ad.spmm(adj_right.matrix, h)
        h_wrong = ad.spmm(adj_wrong.matrix, h)
        fused = ad.add(ad.matmul(h_right, params.w_right), ad.matmul(h_wrong, params.w_wrong))
        h = _apply_activation(params.activation, fused)
        layers.append(h)
    pooled = _pool(layers)
    if not np.isfinite(pooled.value).all():
        bad = int((~np.isfinite(pooled.value)).sum())
        raise NumericsError(
            f"propagation produced {bad} non-finite entries "
            f"(layers={params.n_layers}, activation={params.activation})"
        )
    return PooledEmbedding(pooled=pooled, per_layer=layers)


def propagate_plain(
    h0: ad.Tensor, adjacency: NormalizedAdjacency, n_layers: int
) -> PooledEmbedding:
    """Channel-blind convolution: H(l) = A_hat @ H(l-1), mean-pooled."""
    if adjacency.matrix.shape[0] != h0.shape[0]:
        raise ValueError("adjacency does not match embedding rows")
    h = h0
    layers = [h]
    for _ in range(n_layers):
        h = ad.spmm(adjacency.matrix, h)
        layers.append(h)
    pooled = _pool(layers)
    if not np.isfinite(pooled.value).all():
        raise NumericsError("plain propagation produced non-finite values")
    return PooledEmbedding(pooled=pooled, per_layer=layers)


@dataclass
class TransformParams:
    """Projection of pooled embeddings into concept space: H @ W + b.

    The bias is one value per node, broadcast across the concept
    columns, so it shifts a node's whole mastery/difficulty profile.
    """

    weight: ad.Tensor  # (d, Z)
    bias: ad.Tensor  # (V, 1)

    @classmethod
    def init(cls, n_nodes: int, dim: int, n_concepts: int, rng: np.random.Generator) -> "TransformParams":
        return cls(
            weight=ad.xavier_init(dim, n_concepts, rng),
            bias=ad.Tensor(np.zeros((n_nodes, 1)), requires_grad=True),
        )

    def tensors(self) -> dict[str, ad.Tensor]:
        return {"transform_weight": self.weight, "transform_bias": self.bias}


def transform(pooled: ad.Tensor, params: TransformParams) -> ad.Tensor:
    return ad.add_colvec(ad.matmul(pooled, params.weight), params.bias)


def student_distance_decomposition_check(
    graph: ResponseGraph, h0: np.ndarray, atol: float = 1e-10
) -> bool:
    """Verify the two-student distance identity on a one-layer linear conv.

    With identity channel weights, identity activation and raw (not
    degree-normalized) adjacencies, the pooled squared distance between
    the two student rows equals one quarter of the squared norm of the
    summed per-source differences: base embeddings, right-channel
    neighborhoods and wrong-channel neighborhoods.  This is the identity
    that motivates measuring mastery spread over student pairs.
    """
    if graph.n_students != 2:
        raise ValueError("the decomposition check is defined for exactly two students")
    h0 = np.asarray(h0, dtype=np.float64)
    d = h0.shape[1]
    params = RgcParams(
        h0=ad.Tensor(h0),
        w_right=ad.Tensor(np.eye(d)),
        w_wrong=ad.Tensor(np.eye(d)),
        n_layers=1,
        activation="identity",
    )
    raw_right = NormalizedAdjacency(
        matrix=graph.a_right.tocsr(), degrees=np.diff(graph.a_right.indptr)
    )
    raw_wrong = NormalizedAdjacency(
        matrix=graph.a_wrong.tocsr(), degrees=np.diff(graph.a_wrong.indptr)
    )
    pooled = propagate(params, raw_right, raw_wrong).pooled.value
    lhs = float(((pooled[0] - pooled[1]) ** 2).sum())

    base_diff = h0[0] - h0[1]
    right_diff = (graph.a_right @ h0)[0] - (graph.a_right @ h0)[1]
    wrong_diff = (graph.a_wrong @ h0)[0] - (graph.a_wrong @ h0)[1]
    rhs = 0.25 * float(((base_diff + right_diff + wrong_diff) ** 2).sum())
    return abs(lhs - rhs) <= atol * max(1.0, abs(rhs))
